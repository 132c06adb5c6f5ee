use ctnet_core::bilinear::{bilinear_pool, BilinearPooling};
use ctnet_core::data::{augment, split_indices, AugmentConfig, Dataset, Provenance, SplitSpec};
use ctnet_core::eval::{kfold_pair_eval, pair_distance, roc_auc, ConfusionMatrix};
use ctnet_core::losses::{
    constrained_triplet_loss, cross_entropy, joint_loss, triplet_loss, weighted_softmax_loss,
    Margins, SimilarityMatrix,
};
use ctnet_core::mining::{mine_triplets, MiningStrategy, Triplet};
use ctnet_core::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

/// Brute-force `Σ_y a_y b_yᵀ`.
fn outer_sum(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (y, n, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for l in 0..y {
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += a.data()[l * n + i] * b.data()[l * m + j];
            }
        }
    }
    out
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
    let c = t.shape()[1];
    let data: Vec<f64> = order
        .iter()
        .flat_map(|&r| t.data()[r * c..(r + 1) * c].to_vec())
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let s = tape.softmax(x, 1).unwrap();
    tape.value(s).clone()
}

fn bilinear_case() -> impl Strategy<Value = (Tensor, Tensor, Vec<usize>)> {
    (1usize..=10, 1usize..=8, 1usize..=8).prop_flat_map(|(y, n, m)| {
        (
            matrix(y, n, -2.0, 2.0),
            matrix(y, m, -2.0, 2.0),
            Just((0..y).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bilinear_pool_matches_outer_products((a, b, order) in bilinear_case()) {
        let pooled = bilinear_pool(&a, &b, BilinearPooling::Sum).unwrap();
        let oracle = outer_sum(&a, &b);
        for (x, y) in pooled.data().iter().zip(&oracle) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let shuffled = bilinear_pool(&permute_rows(&a, &order), &permute_rows(&b, &order), BilinearPooling::Sum).unwrap();
        prop_assert_eq!(shuffled.data(), pooled.data());
    }

    #[test]
    fn bilinear_pool_is_bilinear((a, b, _) in bilinear_case(), s in -3.0f64..3.0) {
        let base = bilinear_pool(&a, &b, BilinearPooling::Sum).unwrap();
        let scaled = bilinear_pool(&a.map(|v| v * s).unwrap(), &b, BilinearPooling::Sum).unwrap();
        for (x, y) in scaled.data().iter().zip(base.data()) {
            prop_assert!((x - s * y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        // Swapping the streams transposes the pooled matrix.
        let swapped = bilinear_pool(&b, &a, BilinearPooling::Sum).unwrap();
        let transposed = base.transpose().unwrap();
        prop_assert_eq!(swapped.data(), transposed.data());
    }

    #[test]
    fn average_pooling_divides_by_locations((a, b, _) in bilinear_case()) {
        let sum = bilinear_pool(&a, &b, BilinearPooling::Sum).unwrap();
        let avg = bilinear_pool(&a, &b, BilinearPooling::Average).unwrap();
        let y = a.shape()[0] as f64;
        for (s, v) in sum.data().iter().zip(avg.data()) {
            prop_assert!((s / y - v).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(logits in matrix(5, 4, -30.0, 30.0)) {
        let s = softmax_rows(&logits);
        for row in s.data().chunks(4) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(x in matrix(4, 6, -5.0, 5.0)) {
        prop_assume!(x.data().chunks(6).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let n = tape.l2_normalize(v, 1, 1e-12).unwrap();
        for row in tape.value(n).data().chunks(6) {
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn unconstrained_triplet_is_the_b_zero_case(
        a in matrix(6, 5, -1.0, 1.0),
        p in matrix(6, 5, -1.0, 1.0),
        n in matrix(6, 5, -1.0, 1.0),
        mu1 in 0.01f64..2.0,
        mu2 in 0.01f64..2.0,
    ) {
        let m = Margins { mu1, mu2, b: 0.0, alpha_t: 0.5 };
        prop_assert_eq!(constrained_triplet_loss(&a, &p, &n, &m).unwrap(), triplet_loss(&a, &p, &n, mu1).unwrap());
    }

    #[test]
    fn triplet_losses_are_nonnegative_and_grow_with_b(
        a in matrix(4, 3, -1.0, 1.0),
        p in matrix(4, 3, -1.0, 1.0),
        n in matrix(4, 3, -1.0, 1.0),
        b in 0.0f64..3.0,
    ) {
        let small = Margins { mu1: 0.5, mu2: 0.3, b, alpha_t: 0.5 };
        let large = Margins { b: b + 1.0, ..small };
        let ls = constrained_triplet_loss(&a, &p, &n, &small).unwrap();
        prop_assert!(ls >= 0.0);
        prop_assert!(constrained_triplet_loss(&a, &p, &n, &large).unwrap() >= ls);
    }

    #[test]
    fn similarity_weighting_identities(
        logits in matrix(7, 4, -4.0, 4.0),
        labels in prop::collection::vec(0usize..4, 7),
    ) {
        let probs = softmax_rows(&logits);
        let identity = SimilarityMatrix::identity(4, 0.9).unwrap();
        prop_assert_eq!(weighted_softmax_loss(&probs, &labels, &identity).unwrap(), 0.0);
        let uniform = SimilarityMatrix::uniform(4, 0.9).unwrap();
        let ce = cross_entropy(&probs, &labels).unwrap();
        let w = weighted_softmax_loss(&probs, &labels, &uniform).unwrap();
        prop_assert!((w - 0.75 * ce).abs() <= 1e-12);
    }

    #[test]
    fn joint_loss_endpoints(ls in 0.0f64..10.0, lt in 0.0f64..10.0, alpha in 0.0f64..=1.0) {
        prop_assert_eq!(joint_loss(ls, lt, 1.0).unwrap(), ls);
        prop_assert_eq!(joint_loss(ls, lt, 0.0).unwrap(), lt);
        let j = joint_loss(ls, lt, alpha).unwrap();
        prop_assert!(j >= ls.min(lt) - 1e-12 && j <= ls.max(lt) + 1e-12);
    }

    #[test]
    fn similarity_rows_stay_stochastic(
        logits in prop::collection::vec(matrix(6, 3, -3.0, 3.0), 1..5),
        labels in prop::collection::vec(0usize..3, 6),
        momentum in 0.0f64..1.0,
    ) {
        let mut sm = SimilarityMatrix::uniform(3, momentum).unwrap();
        for l in &logits {
            sm = sm.update(&softmax_rows(l), &labels).unwrap();
        }
        for row in sm.rows() {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

/// Hard mining as an exhaustive search: the `(p, n)` pair maximising
/// `d(a,p) − d(a,n)`, lexicographically smallest on ties.
fn exhaustive_hard(d: &[f64], b: usize, labels: &[usize]) -> Vec<Triplet> {
    let mut out = Vec::new();
    for a in 0..b {
        let mut best: Option<(f64, usize, usize)> = None;
        for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
            for n in (0..b).filter(|&n| labels[n] != labels[a]) {
                let gap = d[a * b + p] - d[a * b + n];
                if best.is_none_or(|(g, _, _)| gap > g) {
                    best = Some((gap, p, n));
                }
            }
        }
        if let Some((_, p, n)) = best {
            out.push(Triplet::new(a, p, n));
        }
    }
    out
}

fn mining_case() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (2usize..=16)
        .prop_flat_map(|b| {
            (
                prop::collection::vec(0usize..4, b),
                prop::collection::vec(0u8..6, b * b),
            )
        })
        .prop_filter("needs two classes", |(l, _)| l.iter().any(|&x| x != l[0]))
        .prop_map(|(labels, raw)| {
            // Symmetric, zero diagonal, small integers so ties are common.
            let b = labels.len();
            let mut d = vec![0.0; b * b];
            for i in 0..b {
                for j in i + 1..b {
                    d[i * b + j] = f64::from(raw[i * b + j]);
                    d[j * b + i] = d[i * b + j];
                }
            }
            (labels, d)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn hard_mining_matches_exhaustive_search((labels, d) in mining_case()) {
        let b = labels.len();
        let dist = Tensor::new(vec![b, b], d.clone()).unwrap();
        let mined = mine_triplets(&dist, &labels, MiningStrategy::Hard, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(mined, exhaustive_hard(&d, b, &labels));
    }

    #[test]
    fn mined_triplets_respect_labels((labels, d) in mining_case(), seed in any::<u64>()) {
        let b = labels.len();
        let dist = Tensor::new(vec![b, b], d).unwrap();
        for s in [MiningStrategy::Hard, MiningStrategy::SemiHard, MiningStrategy::Random] {
            for t in mine_triplets(&dist, &labels, s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap() {
                prop_assert!(t.anchor != t.positive);
                prop_assert_eq!(labels[t.anchor], labels[t.positive]);
                prop_assert!(labels[t.anchor] != labels[t.negative]);
            }
        }
    }
}

fn concordance(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    let mut hits = 0.0;
    for p in &pos {
        for n in &neg {
            hits += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    hits / (pos.len() * neg.len()) as f64
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=200)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..20, n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, l)| {
            l.iter().any(|&x| x) && l.iter().any(|&x| !x)
        })
        .prop_map(|(s, l)| (s.into_iter().map(|v| f64::from(v) / 10.0).collect(), l))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_is_the_concordance_probability((scores, labels) in scored_labels()) {
        let roc = roc_auc(&scores, &labels).unwrap();
        prop_assert!((roc.auc - concordance(&scores, &labels)).abs() <= 1e-9);
        prop_assert!(roc.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    }

    #[test]
    fn pair_distance_is_a_metric(
        x in prop::collection::vec(-1.0f64..1.0, 8),
        y in prop::collection::vec(-1.0f64..1.0, 8),
        z in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let (x, y, z) = (Tensor::vector(&x).unwrap(), Tensor::vector(&y).unwrap(), Tensor::vector(&z).unwrap());
        let d = |a: &Tensor, b: &Tensor| pair_distance(a, b).unwrap();
        prop_assert_eq!(d(&x, &y), d(&y, &x));
        prop_assert_eq!(d(&x, &x), 0.0);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12);
    }

    #[test]
    fn thresholds_ignore_held_out_labels(
        distances in prop::collection::vec(0.0f64..2.0, 20..80),
        seed in any::<u64>(),
        folds in 2usize..=10,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let same: Vec<bool> = distances.iter().map(|_| rand::Rng::gen_bool(&mut rng, 0.6)).collect();
        let base = kfold_pair_eval(&distances, &same, folds).unwrap();
        for fold in &base.folds {
            let mut permuted = same.clone();
            rand::seq::SliceRandom::shuffle(&mut permuted[fold.start..fold.end], &mut rng);
            for flip in permuted[fold.start..fold.end].iter_mut().step_by(2) {
                *flip = !*flip;
            }
            let again = kfold_pair_eval(&distances, &permuted, folds).unwrap();
            let f = base.folds.iter().position(|x| x.start == fold.start).unwrap();
            prop_assert_eq!(again.folds[f].threshold, fold.threshold);
        }
    }

    #[test]
    fn one_vs_rest_counts_partition_the_matrix(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..100),
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, 5).unwrap();
        prop_assert_eq!(cm.total(), truth.len() as u64);
        for c in 0..5 {
            let b = cm.one_vs_rest(c);
            prop_assert_eq!(b.tp + b.fn_, cm.row_sum(c));
            prop_assert_eq!(b.tn + b.fp, cm.total() - cm.row_sum(c));
        }
    }
}

fn labelled(counts: &[usize]) -> Dataset {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            images.push(Tensor::full(vec![1, 2, 2], i as f64 / n as f64).unwrap());
            labels.push(c);
        }
    }
    let names = (0..counts.len()).map(|c| format!("c{c}")).collect();
    Dataset::new(images, labels, names, Provenance::Synthetic).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_and_stratify(counts in prop::collection::vec(3usize..60, 2..5), seed in any::<u64>()) {
        let ds = labelled(&counts);
        let s = split_indices(&ds, &SplitSpec::with_seed(seed)).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        for (c, &n) in counts.iter().enumerate() {
            let in_test = s.test.iter().filter(|&&i| ds.label(i) == c).count() as f64;
            prop_assert!((in_test - 0.2 * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn augmentation_keeps_shape_and_range(
        data in prop::collection::vec(0.0f64..=1.0, 3 * 6 * 5),
        seed in any::<u64>(),
    ) {
        let img = Tensor::new(vec![3, 6, 5], data).unwrap();
        let out = augment(&img, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let normalized = AugmentConfig::default().normalize(&out).unwrap();
        prop_assert!(normalized.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
