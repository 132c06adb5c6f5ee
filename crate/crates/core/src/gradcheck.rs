//! Central finite-difference checks of every differentiable op, every loss
//! and small full networks.
//!
//! Each check compares the tape gradient `g_a` with central differences
//! `g_fd` (step `h`) over all input coordinates and reports
//! `‖g_a − g_fd‖ / max(‖g_fd‖, 1e-8)`. Non-scalar outputs are reduced to
//! `sum(out ⊙ R)` with a fixed random `R`. Random inputs that land within a
//! margin of a kink (ReLU at zero, max-pool ties, hinge boundaries, the
//! signed square root near zero) are redrawn, since the derivative is not
//! defined there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{BackboneConfig, ConvBlock, Mode, Network};
use crate::bilinear::{head_on_tape, BilinearPooling};
use crate::losses::{
    constrained_triplet_loss_on, joint_loss_on, triplet_loss_on, weighted_softmax_loss_on, Margins,
};
use crate::mining::Triplet;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 20;
/// Minimum distance from a kink for a random input to be accepted.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            trials: DEFAULT_TRIALS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Func = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// `sum(out ⊙ R)` for non-scalar `out`; scalars pass through.
fn reduce(tape: &mut Tape, out: Var, r_seed: u64) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(tape.reshape(out, vec![1])?);
    }
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(r_seed);
    let n: usize = shape.iter().product();
    let r = Tensor::new(
        shape,
        (0..n)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect::<Vec<f64>>(),
    )?;
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod)?)
}

fn evaluate(inputs: &[Tensor], f: &Func, r_seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = reduce(&mut tape, out, r_seed)?;
    Ok(tape.value(s).item()?)
}

/// Relative error between the tape gradient of `f` and central differences
/// with respect to every coordinate of every input.
pub fn check_gradient(inputs: &[Tensor], f: &Func, step: f64, r_seed: u64) -> Result<f64> {
    check_gradient_wrt(inputs, inputs.len(), f, step, r_seed)
}

/// As [`check_gradient`], differentiating only the first `wrt` inputs; the
/// rest are held fixed.
pub fn check_gradient_wrt(
    inputs: &[Tensor],
    wrt: usize,
    f: &Func,
    step: f64,
    r_seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i < wrt {
                tape.leaf(t.clone().with_requires_grad(true))
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let s = reduce(&mut tape, out, r_seed)?;
    let grads = tape.backward(s)?;

    let (mut diff2, mut fd2) = (0.0, 0.0);
    for (i, input) in inputs.iter().enumerate().take(wrt) {
        let analytic: Vec<f64> = grads
            .get(vars[i])
            .map_or_else(|| vec![0.0; input.len()], |g| g.data().to_vec());
        for j in 0..input.len() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut data = input.data().to_vec();
                data[j] += delta;
                let mut perturbed = inputs.to_vec();
                perturbed[i] = Tensor::new(input.shape().to_vec(), data)?;
                evaluate(&perturbed, f, r_seed)
            };
            let fd = (shifted(step)? - shifted(-step)?) / (2.0 * step);
            diff2 += (analytic[j] - fd).powi(2);
            fd2 += fd * fd;
        }
    }
    Ok(diff2.sqrt() / fd2.sqrt().max(1e-8))
}

/// One gradient check family: how to draw inputs, when a draw is too close
/// to a kink, and the function under test.
pub struct Case {
    pub name: String,
    sample: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
    smooth: Box<dyn Fn(&[Tensor]) -> bool>,
    f: Box<Func>,
    /// Trailing inputs that are data rather than variables.
    fixed: usize,
}

impl Case {
    fn new(
        name: &str,
        sample: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        smooth: impl Fn(&[Tensor]) -> bool + 'static,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            sample: Box::new(sample),
            smooth: Box::new(smooth),
            f: Box::new(f),
            fixed: 0,
        }
    }

    fn smooth_everywhere(
        name: &str,
        sample: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self::new(name, sample, |_| true, f)
    }
}

impl Case {
    pub fn run(&self, config: &CheckConfig) -> Result<CheckReport> {
        run_case(self, config)
    }
}

fn hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>(),
    )
    .expect("finite")
}

/// Values with random sign and magnitude in `[lo, hi)`.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}

fn away_from(values: &[f64], point: f64) -> bool {
    values.iter().all(|v| (v - point).abs() > KINK_MARGIN)
}

/// Every pooling window's maximum beats its runner-up by the margin, unless
/// the window is entirely zero (dead ReLUs, where the gradient is zero on
/// both sides).
fn pool_gaps_ok(data: &[f64], shape: &[usize], size: usize, stride: usize) -> bool {
    let &[c, h, w] = shape else { return false };
    let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals: Vec<f64> = (0..size)
                    .flat_map(|dy| (0..size).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| data[ch * h * w + (oy * stride + dy) * w + ox * stride + dx])
                    .collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                if vals[0] != 0.0 && vals[0] - vals[1] <= KINK_MARGIN {
                    return false;
                }
            }
        }
    }
    true
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    t.data().chunks(t.shape()[1]).collect()
}

/// Hinge arguments of the (constrained) triplet loss stay off zero.
fn triplet_hinges_ok(a: &Tensor, p: &Tensor, n: &Tensor, m: &Margins, constrained: bool) -> bool {
    rows(a)
        .into_iter()
        .zip(rows(p))
        .zip(rows(n))
        .all(|((a, p), n)| {
            let (dap, dan) = (squared_distance(a, p), squared_distance(a, n));
            (dap - dan + m.mu1).abs() > KINK_MARGIN
                && (!constrained || (dap - m.mu2).abs() > KINK_MARGIN)
        })
}

fn unit_rows(t: &Tensor) -> Tensor {
    let d = t.shape()[1];
    let data: Vec<f64> = t
        .data()
        .chunks(d)
        .flat_map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(move |v| v / n).collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("finite")
}

fn margins() -> Margins {
    Margins {
        mu1: 0.5,
        mu2: 0.5,
        b: 1.5,
        alpha_t: 0.55,
    }
}

/// Element-wise and structural tape operations.
pub fn op_cases() -> Vec<Case> {
    use Case as C;
    let mut cases = vec![
        C::smooth_everywhere(
            "matmul",
            |r| {
                vec![
                    uniform(r, &[3, 4], -1.0, 1.0),
                    uniform(r, &[4, 2], -1.0, 1.0),
                ]
            },
            |t, v| Ok(t.matmul(v[0], v[1])?),
        ),
        C::smooth_everywhere(
            "transpose",
            |r| vec![uniform(r, &[3, 5], -1.0, 1.0)],
            |t, v| Ok(t.transpose(v[0])?),
        ),
        C::smooth_everywhere(
            "reshape",
            |r| vec![uniform(r, &[2, 6], -1.0, 1.0)],
            |t, v| Ok(t.reshape(v[0], vec![3, 4])?),
        ),
        C::smooth_everywhere(
            "conv2d",
            |r| {
                vec![
                    uniform(r, &[2, 5, 5], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                ]
            },
            |t, v| Ok(t.conv2d(v[0], v[1], 1, 0)?),
        ),
        C::smooth_everywhere(
            "conv2d_stride2_pad1",
            |r| {
                vec![
                    uniform(r, &[2, 6, 5], -1.0, 1.0),
                    uniform(r, &[2, 2, 3, 2], -1.0, 1.0),
                ]
            },
            |t, v| Ok(t.conv2d(v[0], v[1], 2, 1)?),
        ),
        C::smooth_everywhere(
            "bias_add",
            |r| {
                vec![
                    uniform(r, &[3, 2, 2], -1.0, 1.0),
                    uniform(r, &[3], -1.0, 1.0),
                ]
            },
            |t, v| Ok(t.bias_add(v[0], v[1])?),
        ),
        C::new(
            "relu",
            |r| vec![uniform(r, &[4, 5], -1.0, 1.0)],
            |x| away_from(x[0].data(), 0.0),
            |t, v| Ok(t.relu(v[0])?),
        ),
        C::smooth_everywhere(
            "signed_sqrt",
            |r| vec![signed(r, &[10], 0.05, 2.0)],
            |t, v| Ok(t.signed_sqrt(v[0])?),
        ),
        C::smooth_everywhere(
            "add",
            |r| {
                vec![
                    uniform(r, &[2, 3], -1.0, 1.0),
                    uniform(r, &[2, 3], -1.0, 1.0),
                ]
            },
            |t, v| Ok(t.add(v[0], v[1])?),
        ),
        C::smooth_everywhere(
            "sub",
            |r| {
                vec![
                    uniform(r, &[2, 3], -1.0, 1.0),
                    uniform(r, &[2, 3], -1.0, 1.0),
                ]
            },
            |t, v| Ok(t.sub(v[0], v[1])?),
        ),
        C::smooth_everywhere(
            "mul",
            |r| {
                vec![
                    uniform(r, &[2, 3], -1.0, 1.0),
                    uniform(r, &[2, 3], -1.0, 1.0),
                ]
            },
            |t, v| Ok(t.mul(v[0], v[1])?),
        ),
        C::smooth_everywhere(
            "scale",
            |r| vec![uniform(r, &[5], -1.0, 1.0)],
            |t, v| Ok(t.scale(v[0], -2.5)?),
        ),
        C::smooth_everywhere(
            "add_scalar",
            |r| vec![uniform(r, &[5], -1.0, 1.0)],
            |t, v| Ok(t.add_scalar(v[0], 0.7)?),
        ),
        C::smooth_everywhere(
            "square",
            |r| vec![uniform(r, &[6], -2.0, 2.0)],
            |t, v| Ok(t.square(v[0])?),
        ),
        C::smooth_everywhere(
            "log",
            |r| vec![uniform(r, &[6], 0.1, 3.0)],
            |t, v| Ok(t.log(v[0])?),
        ),
        C::new(
            "clamp_min",
            |r| vec![uniform(r, &[8], -1.0, 1.0)],
            |x| away_from(x[0].data(), 0.2),
            |t, v| Ok(t.clamp_min(v[0], 0.2)?),
        ),
        C::smooth_everywhere(
            "sum",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| Ok(t.sum(v[0])?),
        ),
        C::smooth_everywhere(
            "mean",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| Ok(t.mean(v[0])?),
        ),
        C::smooth_everywhere(
            "sum_rows",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| Ok(t.sum_rows(v[0])?),
        ),
        C::new(
            "max_pool2d",
            |r| vec![uniform(r, &[2, 4, 6], -1.0, 1.0)],
            |x| pool_gaps_ok(x[0].data(), x[0].shape(), 2, 2),
            |t, v| Ok(t.max_pool2d(v[0], 2, 2)?),
        ),
        C::new(
            "max_pool2d_overlapping",
            |r| vec![uniform(r, &[1, 5, 5], -1.0, 1.0)],
            |x| pool_gaps_ok(x[0].data(), x[0].shape(), 3, 1),
            |t, v| Ok(t.max_pool2d(v[0], 3, 1)?),
        ),
        C::smooth_everywhere(
            "global_avg_pool",
            |r| vec![uniform(r, &[3, 4, 2], -1.0, 1.0)],
            |t, v| Ok(t.global_avg_pool(v[0])?),
        ),
        C::smooth_everywhere(
            "dropout",
            |r| vec![uniform(r, &[4, 6], -1.0, 1.0)],
            |t, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(11);
                Ok(t.dropout(v[0], 0.3, Some(&mut mask_rng))?)
            },
        ),
        C::smooth_everywhere(
            "softmax_rows",
            |r| vec![uniform(r, &[1, 8], -3.0, 3.0)],
            |t, v| Ok(t.softmax(v[0], 1)?),
        ),
        C::smooth_everywhere(
            "softmax_columns",
            |r| vec![uniform(r, &[4, 3], -3.0, 3.0)],
            |t, v| Ok(t.softmax(v[0], 0)?),
        ),
        C::smooth_everywhere(
            "l2_normalize",
            |r| vec![uniform(r, &[3, 5], -1.0, 1.0)],
            |t, v| Ok(t.l2_normalize(v[0], 1, crate::bilinear::L2_EPS)?),
        ),
        C::smooth_everywhere(
            "stack",
            |r| vec![uniform(r, &[3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            |t, v| Ok(t.stack(&[v[0], v[1], v[0]])?),
        ),
        C::smooth_everywhere(
            "gather_rows",
            |r| vec![uniform(r, &[4, 3], -1.0, 1.0)],
            |t, v| Ok(t.gather_rows(v[0], &[2, 0, 2, 3])?),
        ),
        C::smooth_everywhere(
            "pick",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| Ok(t.pick(v[0], &[1, 3, 1])?),
        ),
        C::smooth_everywhere(
            "bilinear_pool",
            |r| {
                vec![
                    uniform(r, &[5, 3], -1.0, 1.0),
                    uniform(r, &[5, 4], -1.0, 1.0),
                ]
            },
            |t, v| Ok(t.bilinear_pool(v[0], v[1])?),
        ),
    ];
    for pooling in [BilinearPooling::Sum, BilinearPooling::Average] {
        let name = match pooling {
            BilinearPooling::Sum => "bilinear_head_sum",
            BilinearPooling::Average => "bilinear_head_average",
        };
        cases.push(C::new(
            name,
            |r| {
                vec![
                    uniform(r, &[6, 3], -1.0, 1.0),
                    uniform(r, &[6, 2], -1.0, 1.0),
                ]
            },
            move |x| {
                let pooled = crate::bilinear::bilinear_pool(&x[0], &x[1], pooling).expect("shapes");
                pooled.data().iter().all(|v| v.abs() > 0.05)
            },
            move |t, v| Ok(head_on_tape(t, v[0], v[1], pooling)?),
        ));
    }
    cases
}

fn triplet_sample(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    (0..3).map(|_| uniform(r, &[5, 4], -1.0, 1.0)).collect()
}

fn normalized(t: &mut Tape, v: &[Var]) -> Result<Vec<Var>> {
    v.iter()
        .map(|&x| Ok(t.l2_normalize(x, 1, crate::bilinear::L2_EPS)?))
        .collect()
}

/// Losses with respect to raw embeddings (normalised on the tape) and logits.
pub fn loss_cases() -> Vec<Case> {
    let m = margins();
    let labels = vec![0, 2, 1, 2, 0, 1];
    let weights = vec![0.3, 0.9, 0.5, 0.9, 0.3, 0.5];
    let (l2, w2) = (labels.clone(), weights.clone());
    let (l3, w3) = (labels.clone(), weights.clone());
    vec![
        Case::new(
            "triplet_loss",
            triplet_sample,
            move |x| {
                let u: Vec<Tensor> = x.iter().map(unit_rows).collect();
                triplet_hinges_ok(&u[0], &u[1], &u[2], &m, false)
            },
            move |t, v| {
                let u = normalized(t, v)?;
                Ok(triplet_loss_on(t, u[0], u[1], u[2], m.mu1)?)
            },
        ),
        Case::new(
            "constrained_triplet_loss",
            triplet_sample,
            move |x| {
                let u: Vec<Tensor> = x.iter().map(unit_rows).collect();
                triplet_hinges_ok(&u[0], &u[1], &u[2], &m, true)
            },
            move |t, v| {
                let u = normalized(t, v)?;
                Ok(constrained_triplet_loss_on(t, u[0], u[1], u[2], &m)?)
            },
        ),
        Case::smooth_everywhere(
            "weighted_softmax_loss",
            |r| vec![uniform(r, &[6, 3], -2.0, 2.0)],
            move |t, v| {
                let probs = t.softmax(v[0], 1)?;
                weighted_softmax_loss_on(t, probs, &l2, &w2)
            },
        ),
        Case::new(
            "joint_loss",
            |r| {
                let mut v = triplet_sample(r);
                v.push(uniform(r, &[6, 3], -2.0, 2.0));
                v
            },
            move |x| {
                let u: Vec<Tensor> = x[..3].iter().map(unit_rows).collect();
                triplet_hinges_ok(&u[0], &u[1], &u[2], &m, true)
            },
            move |t, v| {
                let u = normalized(t, &v[..3])?;
                let lt = constrained_triplet_loss_on(t, u[0], u[1], u[2], &m)?;
                let probs = t.softmax(v[3], 1)?;
                let ls = weighted_softmax_loss_on(t, probs, &l3, &w3)?;
                joint_loss_on(t, ls, lt, m.alpha_t)
            },
        ),
    ]
}

fn probe_config(shared: bool, pooling: BilinearPooling) -> BackboneConfig {
    BackboneConfig {
        input_size: [3, 6, 6],
        conv_blocks: vec![ConvBlock::new(3, 3, 1, 2)],
        embedding_dim: 4,
        dropout_rate: 0.25,
        shared_streams: shared,
        num_classes: 3,
        pooling,
    }
}

/// Whether every ReLU input, pooling window and pooled bilinear entry of
/// `net` on `images` sits away from its kink.
fn network_smooth(config: &BackboneConfig, params: &[Tensor], images: &Tensor) -> bool {
    let Ok(net) = Network::init(config.clone(), 0) else {
        return false;
    };
    let names: Vec<String> = net.params().iter().map(|(n, _)| n.clone()).collect();
    let get = |name: &str| &params[names.iter().position(|n| n == name).expect("parameter")];
    let streams: &[&str] = if config.shared_streams {
        &["stream_a"]
    } else {
        &["stream_a", "stream_b"]
    };
    for i in 0..images.shape()[0] {
        let Ok(image) = images.index_axis0(i) else {
            return false;
        };
        let mut maps = Vec::new();
        for prefix in streams {
            let mut tape = Tape::new();
            let mut x = tape.constant(image.clone());
            for (b, block) in config.conv_blocks.iter().enumerate() {
                let w = tape.constant(get(&format!("{prefix}.conv{b}.weight")).clone());
                let bias = tape.constant(get(&format!("{prefix}.conv{b}.bias")).clone());
                let Ok(conv) = tape.conv2d(x, w, block.stride, block.padding()) else {
                    return false;
                };
                let Ok(pre) = tape.bias_add(conv, bias) else {
                    return false;
                };
                if !away_from(tape.value(pre).data(), 0.0) {
                    return false;
                }
                let Ok(act) = tape.relu(pre) else {
                    return false;
                };
                x = act;
                if block.pool > 1 {
                    if !pool_gaps_ok(tape.value(x).data(), tape.shape(x), block.pool, block.pool) {
                        return false;
                    }
                    let Ok(pooled) = tape.max_pool2d(x, block.pool, block.pool) else {
                        return false;
                    };
                    x = pooled;
                }
            }
            let v = tape.value(x);
            let (c, hw) = (v.shape()[0], v.shape()[1] * v.shape()[2]);
            let Ok(lm) = v.reshape(vec![c, hw]).and_then(|t| t.transpose()) else {
                return false;
            };
            maps.push(lm);
        }
        let b = maps.last().expect("one stream").clone();
        let Ok(pooled) = crate::bilinear::bilinear_pool(&maps[0], &b, config.pooling) else {
            return false;
        };
        if !pooled.data().iter().all(|&v| v == 0.0 || v > 1e-2) {
            return false;
        }
    }
    true
}

fn network_case<F>(name: &str, config: BackboneConfig, batch: usize, objective: F) -> Case
where
    F: Fn(&mut Tape, Var, Var) -> Result<Var> + 'static,
{
    let net = Network::init(config.clone(), 0).expect("valid probe config");
    let shapes: Vec<Vec<usize>> = net
        .params()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let input = config.input_size;
    let cfg_smooth = config;
    let mut case = Case::new(
        name,
        move |r| {
            let mut v: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    let fan_in: usize = s[1..].iter().product::<usize>().max(1);
                    let bound = (6.0 / fan_in as f64).sqrt();
                    uniform(r, s, -bound, bound)
                })
                .collect();
            v.push(uniform(
                r,
                &[batch, input[0], input[1], input[2]],
                -1.0,
                1.0,
            ));
            v
        },
        move |x| {
            let (params, images) = x.split_at(x.len() - 1);
            network_smooth(&cfg_smooth, params, &images[0])
        },
        move |t, v| {
            let (params, images) = v.split_at(v.len() - 1);
            let images = t.value(images[0]).clone();
            let mut mask_rng = ChaCha8Rng::seed_from_u64(5);
            let out = net.forward_on_tape(t, params, &images, Mode::Train(&mut mask_rng))?;
            objective(t, out.probs, out.embeddings)
        },
    );
    case.fixed = 1;
    case
}

/// Full forward passes with respect to every parameter.
pub fn network_cases() -> Vec<Case> {
    let m = margins();
    let labels = vec![0, 0, 1, 1, 2];
    let triplets = [
        Triplet::new(0, 1, 2),
        Triplet::new(1, 0, 4),
        Triplet::new(2, 3, 0),
        Triplet::new(3, 2, 1),
    ];
    let weights = vec![0.4, 0.4, 0.7, 0.7, 0.2];
    let mut cases = vec![
        network_case(
            "network_outputs",
            probe_config(true, BilinearPooling::Sum),
            2,
            |t, p, e| {
                let (a, b) = (project(t, p, 1)?, project(t, e, 2)?);
                Ok(t.add(a, b)?)
            },
        ),
        network_case(
            "network_unshared_average",
            probe_config(false, BilinearPooling::Average),
            2,
            |t, p, e| {
                let (a, b) = (project(t, p, 3)?, project(t, e, 4)?);
                Ok(t.add(a, b)?)
            },
        ),
        network_case(
            "network_embedding",
            probe_config(true, BilinearPooling::Sum),
            2,
            |t, _, e| project(t, e, 5),
        ),
    ];
    let joint = network_case(
        "network_joint_loss",
        probe_config(true, BilinearPooling::Sum),
        labels.len(),
        move |t, p, e| {
            let pick = |f: fn(&Triplet) -> usize| triplets.iter().map(f).collect::<Vec<_>>();
            let a = t.gather_rows(e, &pick(|x| x.anchor))?;
            let pp = t.gather_rows(e, &pick(|x| x.positive))?;
            let n = t.gather_rows(e, &pick(|x| x.negative))?;
            let dap: Vec<f64> = squared_rows(t.value(a), t.value(pp));
            let dan: Vec<f64> = squared_rows(t.value(a), t.value(n));
            if dap.iter().zip(&dan).any(|(p, n)| {
                (p - n + m.mu1).abs() <= KINK_MARGIN || (p - m.mu2).abs() <= KINK_MARGIN
            }) {
                return Err(Error::InvalidInput("hinge boundary".into()));
            }
            let lt = constrained_triplet_loss_on(t, a, pp, n, &m)?;
            let ls = weighted_softmax_loss_on(t, p, &labels, &weights)?;
            joint_loss_on(t, ls, lt, m.alpha_t)
        },
    );
    cases.push(joint);
    cases
}

fn squared_rows(a: &Tensor, b: &Tensor) -> Vec<f64> {
    rows(a)
        .into_iter()
        .zip(rows(b))
        .map(|(x, y)| squared_distance(x, y))
        .collect()
}

/// `sum(x ⊙ R)` with a fixed random `R`, so every output entry matters.
fn project(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(x).to_vec();
    let r = uniform(&mut rng, &shape, -1.0, 1.0);
    let r = t.constant(r);
    let prod = t.mul(x, r)?;
    Ok(t.sum(prod)?)
}

pub fn all_cases() -> Vec<Case> {
    let mut cases = op_cases();
    cases.extend(loss_cases());
    cases.extend(network_cases());
    cases
}

/// Runs every case; hinge-boundary draws inside network objectives are
/// redrawn like any other kink.
pub fn run_suite(config: &CheckConfig) -> Result<Vec<CheckReport>> {
    all_cases().iter().map(|c| run_case(c, config)).collect()
}

fn run_case(case: &Case, config: &CheckConfig) -> Result<CheckReport> {
    let mut rng = crate::rng::stream(config.seed, &[0x6C4E, hash(&case.name)]);
    let mut max_rel_err: f64 = 0.0;
    let mut done = 0;
    let mut attempts = 0;
    while done < config.trials {
        attempts += 1;
        if attempts > MAX_REDRAWS * config.trials.max(1) {
            return Err(Error::InvalidInput(format!(
                "{}: too many inputs rejected near kinks",
                case.name
            )));
        }
        let inputs = (case.sample)(&mut rng);
        if !(case.smooth)(&inputs) {
            continue;
        }
        let r_seed = crate::rng::derive_seed(config.seed, &[hash(&case.name), done as u64]);
        match check_gradient_wrt(
            &inputs,
            inputs.len() - case.fixed,
            &*case.f,
            config.step,
            r_seed,
        ) {
            Ok(err) => {
                max_rel_err = max_rel_err.max(err);
                done += 1;
            }
            // A perturbed evaluation crossed a hinge boundary: redraw.
            Err(Error::InvalidInput(msg)) if msg == "hinge boundary" => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(CheckReport {
        name: case.name.clone(),
        trials: config.trials,
        max_rel_err,
        passed: max_rel_err < config.tolerance,
    })
}
