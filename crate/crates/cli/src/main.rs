//! `ctnet`: dataset preparation, training, evaluation, pair testing, alpha
//! sweeps and gradient self-checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.
//! Log verbosity comes from `CTNET_LOG` (default `info`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use ctnet_core::checkpoint;
use ctnet_core::data::{
    balance_classes, load_directory, load_manifest_dataset, make_synthetic, write_synthetic,
    AugmentConfig, Dataset, SplitIndices, SplitName, SplitSpec, SynthConfig,
};
use ctnet_core::eval::{full_report, pair_evaluation, write_pairs, write_report, PairConfig};
use ctnet_core::gradcheck::{run_suite, CheckConfig};
use ctnet_core::trainer::{
    alpha_sweep, parse_size, predict, resume, train, TrainConfig, TrainState, CHECKPOINT_LATEST,
    CONFIG_KEYS,
};

#[derive(Parser)]
#[command(
    name = "ctnet",
    version,
    about = "Bilinear CNN with a constrained triplet objective"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic textured-blob dataset with a manifest.
    Synth(SynthArgs),
    /// Import a `root/<class>/<image>` tree as a resized, split dataset.
    Ingest(IngestArgs),
    /// Train a model and write checkpoints plus history.csv.
    Train(TrainArgs),
    /// Classification report, ROC curves, confusion matrix and pair test.
    Eval(EvalArgs),
    /// Pair verification with k-fold threshold selection.
    Pairs(PairsArgs),
    /// Train one model per alpha and tabulate test accuracy.
    SweepAlpha(SweepArgs),
    /// Finite-difference check of every op, loss and a small network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    /// `HxW` or a single side length.
    #[arg(long, default_value = "32x32")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Half-width of the per-pixel noise.
    #[arg(long, default_value_t = SynthConfig::default().noise)]
    noise: f64,
}

#[derive(Args)]
struct SplitFlags {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SplitSpec::default().test_fraction)]
    test_fraction: f64,
    #[arg(long, default_value_t = SplitSpec::default().validation_fraction_of_train)]
    val_fraction: f64,
    /// Five-sevenths / one-seventh / one-seventh split instead of the fractions.
    #[arg(long)]
    sevenths: bool,
}

impl SplitFlags {
    fn spec(&self) -> SplitSpec {
        if self.sevenths {
            SplitSpec::sevenths(self.seed)
        } else {
            SplitSpec {
                test_fraction: self.test_fraction,
                validation_fraction_of_train: self.val_fraction,
                seed: self.seed,
            }
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    /// Directory with one subdirectory per class.
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "32x32")]
    size: String,
    /// Bring every class to exactly this many samples (augmenting or subsampling).
    #[arg(long)]
    balance: Option<usize>,
    #[command(flatten)]
    split: SplitFlags,
}

#[derive(Args)]
struct ConfigFlags {
    /// Training config file (`key = value` per line).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's epoch count; phase one keeps its share.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Further overrides, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigFlags {
    fn load(&self) -> anyhow::Result<TrainConfig> {
        let text = std::fs::read_to_string(&self.config)
            .map_err(|e| Usage(format!("cannot read config {}: {e}", self.config.display())))?;
        let mut cfg: TrainConfig = with_overrides(&text, &self.overrides)?
            .parse()
            .map_err(|e| Usage(format!("{}: {e}", self.config.display())))?;
        if let Some(e) = self.epochs {
            let share = cfg.phase1_epochs as f64 / cfg.epochs as f64;
            cfg.phase1_epochs = ((share * e as f64).round() as usize).min(e);
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Replaces `key=value` lines in the config text, appending known keys the
/// text lacks.
fn with_overrides(text: &str, overrides: &[String]) -> anyhow::Result<String> {
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Usage(format!("override '{o}' is not key=value")))?;
        if !CONFIG_KEYS.contains(&key) {
            return Err(Usage(format!("unknown config key '{key}'")).into());
        }
        let defines = |l: &String| {
            l.split('#')
                .next()
                .and_then(|l| l.split_once('='))
                .is_some_and(|(k, _)| k.trim() == key)
        };
        match lines.iter_mut().find(|l| defines(l)) {
            Some(line) => *line = format!("{key} = {value}"),
            None => lines.push(format!("{key} = {value}")),
        }
    }
    Ok(lines.join("\n"))
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `synth` or `ingest`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from `<out>/latest.ckpt` when it exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct PairFlags {
    #[arg(long, default_value_t = PairConfig::default().folds)]
    folds: usize,
    #[arg(long, default_value_t = PairConfig::default().count)]
    count: usize,
    #[arg(long, default_value_t = PairConfig::default().same_fraction)]
    same_fraction: f64,
    #[arg(long = "pair-seed", default_value_t = 0)]
    pair_seed: u64,
}

impl PairFlags {
    fn config(&self) -> anyhow::Result<PairConfig> {
        if self.folds < 2 {
            return Err(Usage(format!("--folds must be at least 2, got {}", self.folds)).into());
        }
        if self.count < self.folds {
            return Err(Usage(format!(
                "--count {} cannot fill {} folds",
                self.count, self.folds
            ))
            .into());
        }
        if !(0.0..=1.0).contains(&self.same_fraction) {
            return Err(Usage(format!(
                "--same-fraction {} outside [0, 1]",
                self.same_fraction
            ))
            .into());
        }
        Ok(PairConfig {
            count: self.count,
            folds: self.folds,
            same_fraction: self.same_fraction,
            seed: self.pair_seed,
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file, or a training directory (uses latest.ckpt).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: SplitName,
    #[command(flatten)]
    pairs: PairFlags,
    /// Skip pair verification.
    #[arg(long)]
    no_pairs: bool,
}

#[derive(Args)]
struct PairsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Split the pairs are drawn from.
    #[arg(long, default_value = "val")]
    split: SplitName,
    #[command(flatten)]
    pairs: PairFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.55,0.75,1")]
    alphas: Vec<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = CheckConfig::default().trials)]
    trials: usize,
    #[arg(long, default_value_t = CheckConfig::default().tolerance)]
    tolerance: f64,
    #[arg(long, default_value_t = CheckConfig::default().step)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A problem with the invocation rather than with the computation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn size(s: &str) -> anyhow::Result<(usize, usize)> {
    Ok(parse_size(s).map_err(|e| Usage(format!("--size: {e}")))?)
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    if a.classes < 2 {
        return Err(Usage(format!("--classes must be at least 2, got {}", a.classes)).into());
    }
    if a.per_class < 3 {
        return Err(Usage(format!(
            "--per-class must be at least 3 to split, got {}",
            a.per_class
        ))
        .into());
    }
    let (h, w) = size(&a.size)?;
    let cfg = SynthConfig {
        noise: a.noise,
        ..SynthConfig::default()
    };
    let ds = make_synthetic(a.classes, a.per_class, h, w, a.seed, &cfg)?;
    let rows = write_synthetic(&ds, &a.out, &SplitSpec::with_seed(a.seed))?;
    info!(
        "wrote {} images in {} classes to {}",
        rows.len(),
        a.classes,
        a.out.display()
    );
    Ok(())
}

fn ingest(a: &IngestArgs) -> anyhow::Result<()> {
    let (h, w) = size(&a.size)?;
    let spec = a.split.spec();
    spec.validate().map_err(|e| Usage(e.to_string()))?;
    if a.balance == Some(0) {
        return Err(Usage("--balance must be at least 1".into()).into());
    }
    let mut ds = load_directory(&a.root, h, w)?;
    if let Some(target) = a.balance {
        let mut rng = ctnet_core::rng::stream(a.split.seed, &[0xBA1A]);
        ds = balance_classes(&ds, target, &AugmentConfig::default(), &mut rng)?;
    }
    let rows = write_synthetic(&ds, &a.out, &spec)?;
    info!(
        "ingested {} images in {} classes into {}",
        rows.len(),
        ds.num_classes(),
        a.out.display()
    );
    Ok(())
}

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

impl Splits {
    fn get(&self, name: SplitName) -> &Dataset {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

fn load_splits(root: &Path, (h, w): (usize, usize)) -> anyhow::Result<Splits> {
    let (ds, assignment) =
        load_manifest_dataset(root, h, w).with_context(|| format!("loading {}", root.display()))?;
    let idx = SplitIndices::from_assignment(&assignment);
    Ok(Splits {
        train: ds.subset(&idx.train),
        val: ds.subset(&idx.val),
        test: ds.subset(&idx.test),
    })
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = a.config.load()?;
    let splits = load_splits(&a.data, cfg.image_size)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.conf"), cfg.to_config_string())
        .with_context(|| format!("writing {}", a.out.join("config.conf").display()))?;
    let latest = a.out.join(CHECKPOINT_LATEST);
    let state = if a.resume && latest.exists() {
        let mut state = checkpoint::load(&latest)?;
        if state.config.epochs != cfg.epochs {
            info!(
                "extending the run from {} to {} epochs",
                state.config.epochs, cfg.epochs
            );
            state.config.epochs = cfg.epochs;
        }
        info!("resuming after epoch {}", state.epoch);
        resume(state, &splits.train, &splits.val, Some(&a.out))?
    } else {
        train(&splits.train, &splits.val, &cfg, Some(&a.out))?
    };
    if let Some(last) = state.history.last() {
        println!(
            "epoch {}: train loss {:.4}, val loss {:.4}, train acc {:.4}, val acc {:.4}",
            last.epoch, last.train_loss, last.val_loss, last.train_acc, last.val_acc
        );
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<TrainState> {
    let file = if path.is_dir() {
        path.join(CHECKPOINT_LATEST)
    } else {
        path.to_path_buf()
    };
    Ok(checkpoint::load(&file)?)
}

fn eval_cmd(a: &EvalArgs) -> anyhow::Result<()> {
    let pairs = if a.no_pairs {
        None
    } else {
        Some(a.pairs.config()?)
    };
    let state = load_checkpoint(&a.checkpoint)?;
    let splits = load_splits(&a.data, state.config.image_size)?;
    let report = full_report(&state.network, splits.get(a.split), pairs.as_ref())?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_report(&report, Some(&state.history), &a.out)?;
    let avg = report.average();
    println!(
        "accuracy {:.4}; mean one-vs-rest accuracy {}, sensitivity {}, specificity {}, AUC {}",
        report.overall_accuracy,
        fmt_opt(avg.accuracy),
        fmt_opt(avg.sensitivity),
        fmt_opt(avg.specificity),
        fmt_opt(avg.auc)
    );
    if let Some(p) = &report.pairs {
        println!(
            "pair verification: {}-fold mean accuracy {:.4}",
            p.kfold.folds.len(),
            p.kfold.mean_accuracy
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"))
}

fn pairs_cmd(a: &PairsArgs) -> anyhow::Result<()> {
    let cfg = a.pairs.config()?;
    let state = load_checkpoint(&a.checkpoint)?;
    let splits = load_splits(&a.data, state.config.image_size)?;
    let ds = splits.get(a.split);
    let (_, emb) = predict(&state.network, ds.images())?;
    let p = pair_evaluation(&emb, ds.labels(), &cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_pairs(&a.out.join(ctnet_core::eval::PAIRS_FILE), &p)?;
    let same = p.set.same().iter().filter(|&&s| s).count();
    println!(
        "{} pairs ({same} same-class), {}-fold mean accuracy {:.4}",
        p.set.pairs.len(),
        cfg.folds,
        p.kfold.mean_accuracy
    );
    for (i, f) in p.kfold.folds.iter().enumerate() {
        println!(
            "fold {}: threshold {:.6}, accuracy {:.4}",
            i + 1,
            f.threshold,
            f.accuracy
        );
    }
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> anyhow::Result<()> {
    let cfg = a.config.load()?;
    if a.alphas.is_empty() {
        bail!(Usage("--alphas must list at least one value".into()));
    }
    if let Some(bad) = a.alphas.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        bail!(Usage(format!("alpha {bad} outside [0, 1]")));
    }
    let splits = load_splits(&a.data, cfg.image_size)?;
    let rows = alpha_sweep(
        &splits.train,
        &splits.val,
        &splits.test,
        &cfg,
        &a.alphas,
        Some(&a.out),
    )?;
    for r in rows {
        println!("alpha {:.2}: accuracy {:.4}", r.alpha, r.accuracy);
    }
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> anyhow::Result<bool> {
    if a.trials == 0 || !(a.step > 0.0) || !(a.tolerance > 0.0) {
        bail!(Usage(
            "--trials, --step and --tolerance must be positive".into()
        ));
    }
    let cfg = CheckConfig {
        step: a.step,
        tolerance: a.tolerance,
        trials: a.trials,
        seed: a.seed,
    };
    let reports = run_suite(&cfg)?;
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &reports {
        println!(
            "{:width$}  {:>4} trials  max rel err {:.3e}  {}",
            r.name,
            r.trials,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!(
        "{} of {} checks passed",
        reports.len() - failed,
        reports.len()
    );
    Ok(failed == 0)
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Ingest(a) => ingest(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Pairs(a) => pairs_cmd(a)?,
        Command::SweepAlpha(a) => sweep_cmd(a)?,
        Command::Gradcheck(a) => return gradcheck_cmd(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CTNET_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some()
                || matches!(e.downcast_ref(), Some(ctnet_core::Error::Config(_)))
            {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
