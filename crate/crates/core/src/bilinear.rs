//! Bilinear pooling head.
//!
//! Two location-major feature maps `Y×N` and `Y×M` are combined by summing
//! their per-location outer products into an `N×M` matrix, which is then
//! flattened, passed through a signed square root and L2-normalised, in that
//! order.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorError, TensorResult, Var};

/// Default denominator floor for L2 normalisation.
pub const L2_EPS: f64 = 1e-12;

/// How per-location outer products are aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BilinearPooling {
    /// Plain sum over locations.
    #[default]
    Sum,
    /// Sum divided by the location count.
    Average,
}

impl std::str::FromStr for BilinearPooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Self::Sum),
            "average" | "avg" => Ok(Self::Average),
            other => Err(format!(
                "unknown bilinear pooling '{other}' (expected sum or average)"
            )),
        }
    }
}

/// Flattened, signed-square-rooted and normalised pooled outer product.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearFeature {
    pub vector: Tensor,
    pub n: usize,
    pub m: usize,
}

/// Outer product `fa ⊗ fb` of two per-location feature vectors.
pub fn bilinear_combine(fa: &Tensor, fb: &Tensor) -> TensorResult<Tensor> {
    let (n, m) = (fa.len(), fb.len());
    fa.reshape(vec![n, 1])?.matmul(&fb.reshape(vec![1, m])?)
}

/// Pooled bilinear matrix `N×M` of two location-major maps.
pub fn bilinear_pool(
    map_a: &Tensor,
    map_b: &Tensor,
    pooling: BilinearPooling,
) -> TensorResult<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(map_a.clone());
    let b = tape.constant(map_b.clone());
    let pooled = pool_on_tape(&mut tape, a, b, pooling)?;
    Ok(tape.value(pooled).clone())
}

/// Full head: `l2_normalize(signed_sqrt(flatten(pool(a, b))))`.
pub fn bilinear_head(
    map_a: &Tensor,
    map_b: &Tensor,
    pooling: BilinearPooling,
) -> TensorResult<BilinearFeature> {
    let mut tape = Tape::new();
    let a = tape.constant(map_a.clone());
    let b = tape.constant(map_b.clone());
    let v = head_on_tape(&mut tape, a, b, pooling)?;
    Ok(BilinearFeature {
        vector: tape.value(v).clone(),
        n: map_a.shape()[1],
        m: map_b.shape()[1],
    })
}

pub fn pool_on_tape(
    tape: &mut Tape,
    map_a: Var,
    map_b: Var,
    pooling: BilinearPooling,
) -> TensorResult<Var> {
    let pooled = tape.bilinear_pool(map_a, map_b)?;
    match pooling {
        BilinearPooling::Sum => Ok(pooled),
        BilinearPooling::Average => {
            let locations = tape.shape(map_a)[0] as f64;
            tape.scale(pooled, 1.0 / locations)
        }
    }
}

/// Tape version of [`bilinear_head`]; returns a 1-D vector of length `N·M`.
pub fn head_on_tape(
    tape: &mut Tape,
    map_a: Var,
    map_b: Var,
    pooling: BilinearPooling,
) -> TensorResult<Var> {
    let pooled = pool_on_tape(tape, map_a, map_b, pooling)?;
    let len = tape.value(pooled).len();
    let flat = tape.reshape(pooled, vec![len])?;
    let rooted = tape.signed_sqrt(flat)?;
    tape.l2_normalize(rooted, 0, L2_EPS)
}

/// Location count check shared by callers that build maps themselves.
pub fn check_locations(map_a: &Tensor, map_b: &Tensor) -> TensorResult<()> {
    if map_a.ndim() == 2 && map_b.ndim() == 2 && map_a.shape()[0] == map_b.shape()[0] {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op: "bilinear_pool",
            lhs: map_a.shape().to_vec(),
            rhs: map_b.shape().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn outer_product_by_hand() {
        let fa = Tensor::vector(&[1.0, 2.0]).unwrap();
        let fb = Tensor::vector(&[3.0, 4.0]).unwrap();
        let out = bilinear_combine(&fa, &fb).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.data(), &[3.0, 4.0, 6.0, 8.0]);

        let zeros = Tensor::zeros(vec![2]).unwrap();
        assert!(bilinear_combine(&zeros, &fb)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn combine_matches_matmul_of_column_and_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fa = random(&mut rng, &[1, 5]);
        let fb = random(&mut rng, &[1, 7]);
        let expected = fa.transpose().unwrap().matmul(&fb).unwrap();
        let got =
            bilinear_combine(&fa.reshape(vec![5]).unwrap(), &fb.reshape(vec![7]).unwrap()).unwrap();
        assert_eq!(got, expected);
    }

    #[test]
    fn single_location_pool_equals_combine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, &[1, 4]);
        let b = random(&mut rng, &[1, 3]);
        let pooled = bilinear_pool(&a, &b, BilinearPooling::Sum).unwrap();
        let combined =
            bilinear_combine(&a.reshape(vec![4]).unwrap(), &b.reshape(vec![3]).unwrap()).unwrap();
        assert_eq!(pooled, combined);
    }

    #[test]
    fn pool_matches_loop_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[3, 2]);
        let b = random(&mut rng, &[3, 2]);
        let pooled = bilinear_pool(&a, &b, BilinearPooling::Sum).unwrap();
        let mut expected = [0.0; 4];
        for l in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    expected[i * 2 + j] += a.data()[l * 2 + i] * b.data()[l * 2 + j];
                }
            }
        }
        for (g, e) in pooled.data().iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn head_by_hand() {
        // pooled [[4,0],[0,4]] from a single location is impossible, so use two:
        // a = b = [[2,0],[0,2]] gives Σ_l a_lᵀ b_l = diag(4, 4).
        let a = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let feat = bilinear_head(&a, &a, BilinearPooling::Sum).unwrap();
        let h = 1.0 / 2f64.sqrt();
        let expected = [h, 0.0, 0.0, h];
        for (g, e) in feat.vector.data().iter().zip(expected) {
            assert!((g - e).abs() < 1e-15);
        }
        assert_eq!((feat.n, feat.m), (2, 2));
    }

    #[test]
    fn average_pooling_divides_by_location_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[4, 2]);
        let sum = bilinear_pool(&a, &b, BilinearPooling::Sum).unwrap();
        let avg = bilinear_pool(&a, &b, BilinearPooling::Average).unwrap();
        assert!(sum.map(|v| v / 4.0).unwrap().max_abs_diff(&avg).unwrap() < 1e-15);
    }

    #[test]
    fn mismatched_locations_rejected() {
        let a = Tensor::zeros(vec![3, 2]).unwrap();
        let b = Tensor::zeros(vec![4, 2]).unwrap();
        assert!(bilinear_pool(&a, &b, BilinearPooling::Sum).is_err());
        assert!(check_locations(&a, &b).is_err());
    }

    #[test]
    fn parses_pooling_names() {
        assert_eq!(
            "sum".parse::<BilinearPooling>().unwrap(),
            BilinearPooling::Sum
        );
        assert_eq!(
            "average".parse::<BilinearPooling>().unwrap(),
            BilinearPooling::Average
        );
        assert!("max".parse::<BilinearPooling>().is_err());
    }
}
