//! Two-phase optimisation of the bilinear classifier and embedding heads.
//!
//! Phase one trains the feature streams and classifier with plain
//! cross-entropy while the embedding head stays frozen. Phase two trains all
//! parameters on `alpha·L_softmax + (1 − alpha)·L_triplet`, where the softmax
//! term is weighted by the similarity matrix and the triplet term is the
//! constrained triplet loss over triplets mined from the batch's own
//! embeddings.
//!
//! Every random draw comes from a stream keyed by `(seed, epoch, step)`, so a
//! run resumed from a checkpoint follows the uninterrupted trajectory bit for
//! bit.

mod config;
mod optim;

use std::path::Path;

use log::{debug, info};
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use config::{default_phase1, parse_size, TrainConfig, CONFIG_KEYS};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::backbone::{is_embedding_param, Mode, Network};
use crate::data::{augment, AugmentConfig, Dataset};
use crate::losses::{
    constrained_triplet_loss, constrained_triplet_loss_on, cross_entropy, joint_loss,
    joint_loss_on, weighted_softmax_loss, weighted_softmax_loss_on, SimilarityMatrix,
};
use crate::mining::{
    mine_triplets, pairwise_distances, sample_batch, MiningStrategy, Triplet, TripletBatch,
};
use crate::rng::stream;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::{ClassId, Error, Result};

const EPOCH_STREAM: u64 = 0xE90C;
const STEP_STREAM: u64 = 0x57E9;
const AUGMENT_STREAM: u64 = 0xA116;

pub const CHECKPOINT_LATEST: &str = "latest.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Cross-entropy on the classifier branch, embedding head frozen.
    Classifier,
    /// Joint objective over all parameters.
    Joint,
}

impl Phase {
    pub fn trains(self, name: &str) -> bool {
        match self {
            Self::Classifier => !is_embedding_param(name),
            Self::Joint => true,
        }
    }
}

impl TrainConfig {
    /// Phase of the 0-based `epoch`.
    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.phase1_epochs {
            Phase::Classifier
        } else {
            Phase::Joint
        }
    }

    /// Mining strategy used during the 0-based `epoch`.
    pub fn mining_strategy(&self, epoch: usize) -> MiningStrategy {
        self.sampler
            .mining
            .strategy(epoch.saturating_sub(self.phase1_epochs))
    }

    fn optimizer(&self, phase: Phase, sizes: &[usize]) -> Optimizer {
        match phase {
            Phase::Classifier => {
                Optimizer::new(self.optimizer_phase1, self.phase1_learning_rate, sizes)
            }
            Phase::Joint => Optimizer::new(self.optimizer_phase2, self.learning_rate, sizes),
        }
    }

    pub fn steps_for(&self, train_len: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| train_len.div_ceil(self.sampler.batch_size()).max(1))
    }
}

/// One row of the training history; `epoch` counts from 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub softmax_loss: f64,
    /// `None` in the classifier phase.
    pub triplet_loss: Option<f64>,
    pub triplets: usize,
    pub grad_norm: f64,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub network: Network,
    pub optimizer: Optimizer,
    pub similarity: SimilarityMatrix,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub config: TrainConfig,
    pub class_names: Vec<String>,
}

impl TrainState {
    /// Fresh parameters from `config.seed` and a uniform similarity matrix.
    pub fn new(config: TrainConfig, channels: usize, class_names: Vec<String>) -> Result<Self> {
        config.validate()?;
        let k = class_names.len();
        let network = Network::init(config.backbone(channels, k), config.seed)?;
        let optimizer = config.optimizer(config.phase(0), &param_sizes(&network));
        let similarity = SimilarityMatrix::uniform(k, config.similarity_momentum)?;
        Ok(Self {
            network,
            optimizer,
            similarity,
            epoch: 0,
            history: Vec::new(),
            config,
            class_names,
        })
    }

    /// Phase of the next epoch to run.
    pub fn phase(&self) -> Phase {
        self.config.phase(self.epoch)
    }
}

fn param_sizes(network: &Network) -> Vec<usize> {
    network.params().iter().map(|(_, t)| t.len()).collect()
}

/// Maps `[0, 1]` pixels onto the network's `(−1, 1)` input range.
pub fn normalize_input(image: &Tensor) -> Result<Tensor> {
    Ok(AugmentConfig::default().normalize(image)?)
}

/// Inference over `images` (pixel range `[0, 1]`): `(B×k, B×d)`.
pub fn predict(network: &Network, images: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let inputs: Vec<Tensor> = images.iter().map(normalize_input).collect::<Result<_>>()?;
    network.infer_many(&inputs)
}

pub fn argmax_rows(probs: &Tensor) -> Vec<ClassId> {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

pub fn accuracy(probs: &Tensor, labels: &[ClassId]) -> f64 {
    let hits = argmax_rows(probs)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Tape handles of one recorded objective.
struct Objective {
    loss: Var,
    softmax: Var,
    triplet: Option<Var>,
    triplets: usize,
    params: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn record_objective(
    tape: &mut Tape,
    network: &Network,
    images: &Tensor,
    labels: &[ClassId],
    given: &[Triplet],
    phase: Phase,
    strategy: MiningStrategy,
    config: &TrainConfig,
    sm: &SimilarityMatrix,
    rng: &mut dyn RngCore,
) -> Result<Objective> {
    let params = network.register(tape, &|name| phase.trains(name));
    let out = network.forward_on_tape(tape, &params, images, Mode::Train(&mut *rng))?;
    if phase == Phase::Classifier {
        let softmax = weighted_softmax_loss_on(tape, out.probs, labels, &vec![1.0; labels.len()])?;
        return Ok(Objective {
            loss: softmax,
            softmax,
            triplet: None,
            triplets: 0,
            params,
        });
    }
    let softmax = weighted_softmax_loss_on(tape, out.probs, labels, &sm.weights(labels)?)?;
    let triplets = if given.is_empty() {
        let d = pairwise_distances(tape.value(out.embeddings))?;
        mine_triplets(&d, labels, strategy, rng)?
    } else {
        given.to_vec()
    };
    if triplets.is_empty() {
        return Err(Error::InvalidInput("batch yields no triplets".into()));
    }
    let pick = |f: fn(&Triplet) -> usize| triplets.iter().map(f).collect::<Vec<_>>();
    let a = tape.gather_rows(out.embeddings, &pick(|t| t.anchor))?;
    let p = tape.gather_rows(out.embeddings, &pick(|t| t.positive))?;
    let n = tape.gather_rows(out.embeddings, &pick(|t| t.negative))?;
    let triplet = constrained_triplet_loss_on(tape, a, p, n, &config.margins)?;
    let loss = joint_loss_on(tape, softmax, triplet, config.margins.alpha_t)?;
    Ok(Objective {
        loss,
        softmax,
        triplet: Some(triplet),
        triplets: triplets.len(),
        params,
    })
}

/// Normalised (and optionally augmented) batch images.
fn prepare_images(images: &Tensor, augment_rng: Option<&mut dyn RngCore>) -> Result<Tensor> {
    let b = images.shape()[0];
    let cfg = AugmentConfig::default();
    let mut rows = Vec::with_capacity(b);
    let mut rng = augment_rng;
    for i in 0..b {
        let img = images.index_axis0(i)?;
        let img = match rng.as_deref_mut() {
            Some(r) => augment(&img, &cfg, r)?,
            None => img,
        };
        rows.push(cfg.normalize(&img)?);
    }
    Ok(Tensor::stack(&rows)?)
}

fn check_batch(state: &TrainState, batch: &TripletBatch) -> Result<()> {
    if batch.is_empty() || batch.images.shape().first() != Some(&batch.len()) {
        return Err(Error::InvalidInput(format!(
            "batch of {} labels with images {:?}",
            batch.len(),
            batch.images.shape()
        )));
    }
    batch.validate()?;
    crate::losses::check_labels(&batch.labels, state.similarity.k())
}

/// The current-phase objective on `batch` (pixel range `[0, 1]`) without
/// updating anything. Dropout masks and random mining draw from `rng`.
pub fn batch_objective(
    state: &TrainState,
    batch: &TripletBatch,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    check_batch(state, batch)?;
    let images = prepare_images(&batch.images, None)?;
    let mut tape = Tape::new();
    let obj = record_objective(
        &mut tape,
        &state.network,
        &images,
        &batch.labels,
        &batch.triplets,
        state.phase(),
        state.config.mining_strategy(state.epoch),
        &state.config,
        &state.similarity,
        rng,
    )?;
    Ok(tape.value(obj.loss).item()?)
}

/// One forward pass, one backward pass and one optimizer update on `batch`
/// (pixel range `[0, 1]`). Triplets are mined from the batch's embeddings
/// when the batch carries none.
pub fn train_step(
    state: &mut TrainState,
    batch: &TripletBatch,
    rng: &mut dyn RngCore,
) -> Result<StepMetrics> {
    check_batch(state, batch)?;
    let images = prepare_images(&batch.images, None)?;
    step_on(state, &images, batch, rng)
}

fn step_on(
    state: &mut TrainState,
    images: &Tensor,
    batch: &TripletBatch,
    rng: &mut dyn RngCore,
) -> Result<StepMetrics> {
    let phase = state.phase();
    let mut tape = Tape::new();
    let obj = record_objective(
        &mut tape,
        &state.network,
        images,
        &batch.labels,
        &batch.triplets,
        phase,
        state.config.mining_strategy(state.epoch),
        &state.config,
        &state.similarity,
        rng,
    )?;
    let grads = tape.backward(obj.loss)?;
    let names = state.network.params();
    let per_param: Vec<Option<&Tensor>> = names
        .iter()
        .zip(&obj.params)
        .map(|((name, _), &v)| {
            if phase.trains(name) {
                grads.get(v)
            } else {
                None
            }
        })
        .collect();
    let grad_norm = per_param
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let values: Vec<Tensor> = names.iter().map(|(_, t)| t.clone()).collect();
    let updated = state
        .optimizer
        .apply(&values, &per_param, state.config.grad_clip)?;
    state.network.set_params(updated)?;
    Ok(StepMetrics {
        loss: tape.value(obj.loss).item()?,
        softmax_loss: tape.value(obj.softmax).item()?,
        triplet_loss: obj.triplet.map(|t| tape.value(t).item()).transpose()?,
        triplets: obj.triplets,
        grad_norm,
    })
}

fn diagnostics(batch: &TripletBatch, images: &Tensor, state: &TrainState) -> String {
    let d = images.data();
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let mut counts = vec![0usize; state.similarity.k()];
    for &l in &batch.labels {
        counts[l] += 1;
    }
    let max_param = state
        .network
        .params()
        .iter()
        .map(|(n, t)| (n, t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))))
        .fold((String::new(), 0.0), |best, (n, m)| {
            if m > best.1 {
                (n.clone(), m)
            } else {
                best
            }
        });
    format!(
        "batch of {} (class counts {counts:?}), input range [{lo:.4}, {hi:.4}] mean {mean:.4}, \
         {} triplets, largest |param| {:.4e} in {}",
        batch.len(),
        batch.triplets.len(),
        max_param.1,
        max_param.0
    )
}

/// Value-level phase objective over a whole split using hard mining. A
/// split where no class has two members yields no triplets; its triplet
/// term counts as zero.
pub fn split_objective(
    probs: &Tensor,
    embeddings: &Tensor,
    labels: &[ClassId],
    phase: Phase,
    config: &TrainConfig,
    sm: &SimilarityMatrix,
) -> Result<f64> {
    if phase == Phase::Classifier {
        return cross_entropy(probs, labels);
    }
    let ls = weighted_softmax_loss(probs, labels, sm)?;
    let d = pairwise_distances(embeddings)?;
    let triplets = mine_triplets(
        &d,
        labels,
        MiningStrategy::Hard,
        &mut rand::rngs::mock::StepRng::new(0, 1),
    )?;
    if triplets.is_empty() {
        return joint_loss(ls, 0.0, config.margins.alpha_t);
    }
    let rows = |f: fn(&Triplet) -> usize| -> Result<Tensor> {
        let picked: Vec<Tensor> = triplets
            .iter()
            .map(|t| embeddings.index_axis0(f(t)))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Tensor::stack(&picked)?)
    };
    let lt = constrained_triplet_loss(
        &rows(|t| t.anchor)?,
        &rows(|t| t.positive)?,
        &rows(|t| t.negative)?,
        &config.margins,
    )?;
    joint_loss(ls, lt, config.margins.alpha_t)
}

/// Trains from scratch on `train`, validating on `val` after every epoch.
/// With `checkpoint_dir`, writes `epoch_NNN.ckpt`, `latest.ckpt` and
/// `history.csv` there after each epoch.
pub fn train(
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainState> {
    let channels = train
        .image_shape()
        .ok_or_else(|| Error::InvalidInput("training split is empty".into()))?[0];
    let state = TrainState::new(config.clone(), channels, train.class_names().to_vec())?;
    resume(state, train, val, checkpoint_dir)
}

/// Runs the remaining epochs of `state`.
pub fn resume(
    mut state: TrainState,
    train: &Dataset,
    val: &Dataset,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainState> {
    check_splits(&state, train, val)?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let config = state.config.clone();
    let steps = config.steps_for(train.len());
    while state.epoch < config.epochs {
        let e = state.epoch;
        if e == config.phase1_epochs && e > 0 {
            state.optimizer = config.optimizer(Phase::Joint, &param_sizes(&state.network));
            info!(
                "epoch {}: switching to joint phase ({})",
                e + 1,
                config.optimizer_phase2
            );
        }
        let mut epoch_rng = stream(config.seed, &[EPOCH_STREAM, e as u64]);
        let mut loss_sum = 0.0;
        for s in 0..steps {
            let batch = sample_batch(train, &config.sampler, &state.similarity, &mut epoch_rng)?;
            let mut aug_rng = stream(config.seed, &[AUGMENT_STREAM, e as u64, s as u64]);
            let images = prepare_images(
                &batch.images,
                config.augment.then_some(&mut aug_rng as &mut dyn RngCore),
            )?;
            let mut step_rng = stream(config.seed, &[STEP_STREAM, e as u64, s as u64]);
            let metrics = match step_on(&mut state, &images, &batch, &mut step_rng) {
                Err(Error::Tensor(TensorError::NonFinite { op })) => {
                    return Err(Error::NonFiniteLoss {
                        epoch: e + 1,
                        step: s,
                        diagnostics: format!(
                            "{op} overflowed; {}",
                            diagnostics(&batch, &images, &state)
                        ),
                    })
                }
                other => other?,
            };
            if !metrics.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: e + 1,
                    step: s,
                    diagnostics: diagnostics(&batch, &images, &state),
                });
            }
            debug!(
                "epoch {} step {s}: loss {:.5} softmax {:.5} triplet {:?} ({} triplets) |g| {:.4}",
                e + 1,
                metrics.loss,
                metrics.softmax_loss,
                metrics.triplet_loss,
                metrics.triplets,
                metrics.grad_norm
            );
            loss_sum += metrics.loss;
        }
        let (train_probs, _) = predict(&state.network, train.images())?;
        let train_acc = accuracy(&train_probs, train.labels());
        state.similarity = state.similarity.update(&train_probs, train.labels())?;
        let (val_probs, val_emb) = predict(&state.network, val.images())?;
        let val_acc = accuracy(&val_probs, val.labels());
        let val_loss = split_objective(
            &val_probs,
            &val_emb,
            val.labels(),
            config.phase(e),
            &config,
            &state.similarity,
        )?;
        let record = EpochRecord {
            epoch: e + 1,
            train_loss: loss_sum / steps as f64,
            val_loss,
            train_acc,
            val_acc,
        };
        info!(
            "epoch {}/{} [{:?}] train_loss {:.4} val_loss {:.4} train_acc {:.4} val_acc {:.4}",
            record.epoch,
            config.epochs,
            config.phase(e),
            record.train_loss,
            record.val_loss,
            record.train_acc,
            record.val_acc
        );
        state.history.push(record);
        state.epoch += 1;
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("epoch_{:03}.ckpt", state.epoch));
            crate::checkpoint::save(&path, &state)?;
            crate::checkpoint::save(&dir.join(CHECKPOINT_LATEST), &state)?;
            write_history(&dir.join(HISTORY_FILE), &state.history)?;
        }
    }
    Ok(state)
}

fn check_splits(state: &TrainState, train: &Dataset, val: &Dataset) -> Result<()> {
    let k = state.class_names.len();
    for (name, ds) in [("training", train), ("validation", val)] {
        if ds.is_empty() {
            return Err(Error::InvalidInput(format!("{name} split is empty")));
        }
        if ds.num_classes() != k {
            return Err(Error::InvalidInput(format!(
                "{name} split has {} classes, the model has {k}",
                ds.num_classes()
            )));
        }
        if ds
            .image_shape()
            .map(|s| s[1..] != state.network.config().input_size[1..])
            == Some(true)
        {
            return Err(Error::InvalidInput(format!(
                "{name} images are {:?}, the model expects {:?}",
                ds.image_shape().unwrap_or_default(),
                state.network.config().input_size
            )));
        }
    }
    Ok(())
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    if history.is_empty() {
        w.write_record(["epoch", "train_loss", "val_loss", "train_acc", "val_acc"])?;
    }
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

/// One row of an alpha sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    /// Test accuracy of the model trained with this alpha.
    pub accuracy: f64,
}

/// Trains one model per alpha (all else equal, same seed) and measures test
/// accuracy. With `out_dir`, writes `sweep.csv` and `sweep.svg`.
pub fn alpha_sweep(
    train_split: &Dataset,
    val: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    alphas: &[f64],
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::InvalidInput(
            "alpha sweep needs at least one alpha".into(),
        ));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut cfg = config.clone();
        cfg.margins.alpha_t = alpha;
        let state = train(train_split, val, &cfg, None)?;
        let (probs, _) = predict(&state.network, test.images())?;
        let acc = accuracy(&probs, test.labels());
        info!("alpha {alpha}: test accuracy {acc:.4}");
        rows.push(SweepRow {
            alpha,
            accuracy: acc,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::eval::write_sweep(dir, &rows)?;
    }
    Ok(rows)
}
