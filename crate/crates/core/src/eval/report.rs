use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    binary_rates, build_pair_set, kfold_pair_eval, roc_auc, ConfusionMatrix, KFoldResult, PairSet,
    RocCurve,
};
use crate::backbone::Network;
use crate::data::Dataset;
use crate::plot::{heatmap, side_by_side, LineChart, Series};
use crate::tensor::Tensor;
use crate::trainer::{argmax_rows, csv_io, predict, EpochRecord, SweepRow};
use crate::{ClassId, Error, Result};

/// Pair-verification settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub count: usize,
    pub folds: usize,
    pub same_fraction: f64,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            count: 600,
            folds: 10,
            same_fraction: 0.6,
            seed: 0,
        }
    }
}

/// One line of `report.csv`. Blank cells (`None`) mark undefined rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairEvaluation {
    pub set: PairSet,
    pub kfold: KFoldResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    /// One row per class followed by the `Average` row.
    pub rows: Vec<ClassRow>,
    /// Fraction of samples classified correctly.
    pub overall_accuracy: f64,
    /// One-vs-rest curve per class; `None` when the class is absent.
    pub roc: Vec<Option<RocCurve>>,
    pub pairs: Option<PairEvaluation>,
}

impl EvalReport {
    pub fn average(&self) -> &ClassRow {
        self.rows.last().expect("average row")
    }
}

/// Classifies `test`, builds all metrics and, with `pairs`, runs pair
/// verification on the test embeddings.
pub fn full_report(
    network: &Network,
    test: &Dataset,
    pairs: Option<&PairConfig>,
) -> Result<EvalReport> {
    let (probs, embeddings) = predict(network, test.images())?;
    report_from_outputs(
        &probs,
        &embeddings,
        test.labels(),
        test.class_names(),
        pairs,
    )
}

pub fn report_from_outputs(
    probs: &Tensor,
    embeddings: &Tensor,
    labels: &[ClassId],
    class_names: &[String],
    pairs: Option<&PairConfig>,
) -> Result<EvalReport> {
    let k = class_names.len();
    if probs.shape() != [labels.len(), k] {
        return Err(Error::InvalidInput(format!(
            "probabilities {:?} do not match {} samples over {k} classes",
            probs.shape(),
            labels.len()
        )));
    }
    let predicted = argmax_rows(probs);
    let confusion = ConfusionMatrix::from_predictions(labels, &predicted, k)?;
    let mut rows = Vec::with_capacity(k + 1);
    let mut roc = Vec::with_capacity(k);
    for (c, name) in class_names.iter().enumerate() {
        let rates = binary_rates(&confusion, c)?;
        let scores: Vec<f64> = probs.data().chunks(k).map(|r| r[c]).collect();
        let truth: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let curve = roc_auc(&scores, &truth).ok();
        rows.push(ClassRow {
            class: name.clone(),
            accuracy: rates.accuracy,
            sensitivity: rates.sensitivity,
            specificity: rates.specificity,
            auc: curve.as_ref().map(|r| r.auc),
        });
        roc.push(curve);
    }
    let mean = |f: fn(&ClassRow) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let average = ClassRow {
        class: "Average".into(),
        accuracy: mean(|r| r.accuracy),
        sensitivity: mean(|r| r.sensitivity),
        specificity: mean(|r| r.specificity),
        auc: mean(|r| r.auc),
    };
    rows.push(average);
    let pairs = pairs
        .map(|cfg| pair_evaluation(embeddings, labels, cfg))
        .transpose()?;
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        overall_accuracy: confusion.accuracy().unwrap_or(0.0),
        confusion,
        rows,
        roc,
        pairs,
    })
}

pub fn pair_evaluation(
    embeddings: &Tensor,
    labels: &[ClassId],
    cfg: &PairConfig,
) -> Result<PairEvaluation> {
    let mut rng = crate::rng::stream(cfg.seed, &[0x9A12]);
    let set = build_pair_set(embeddings, labels, cfg.count, cfg.same_fraction, &mut rng)?;
    let kfold = kfold_pair_eval(&set.distances(), &set.same(), cfg.folds)?;
    Ok(PairEvaluation { set, kfold })
}

pub const REPORT_FILE: &str = "report.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const PAIRS_FILE: &str = "pairs.csv";

/// Writes every table and plot of `report` into `dir`:
/// `report.csv`, `confusion.csv`, `roc_<class>.csv`, `pairs.csv` (when pair
/// verification ran), `roc.svg`, `confusion.svg` and, given a history,
/// `history.svg`.
pub fn write_report(
    report: &EvalReport,
    history: Option<&[EpochRecord]>,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rows(&dir.join(REPORT_FILE), &report.rows)?;
    write_confusion(
        &dir.join(CONFUSION_FILE),
        &report.class_names,
        &report.confusion,
    )?;
    for (name, curve) in report.class_names.iter().zip(&report.roc) {
        if let Some(curve) = curve {
            write_roc(&dir.join(format!("roc_{}.csv", file_stem(name))), curve)?;
        }
    }
    if let Some(p) = &report.pairs {
        write_pairs(&dir.join(PAIRS_FILE), p)?;
    }
    write_text(
        &dir.join("roc.svg"),
        &roc_svg(&report.class_names, &report.roc),
    )?;
    let counts: Vec<Vec<f64>> = report
        .confusion
        .rows()
        .iter()
        .map(|r| r.iter().map(|&c| c as f64).collect())
        .collect();
    write_text(
        &dir.join("confusion.svg"),
        &heatmap(
            "Confusion matrix",
            "true class",
            "predicted class",
            &report.class_names,
            &counts,
        ),
    )?;
    if let Some(h) = history.filter(|h| !h.is_empty()) {
        write_text(&dir.join("history.svg"), &history_svg(h))?;
    }
    Ok(())
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_rows(path: &Path, rows: &[ClassRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<ClassRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Header `true\predicted,<class>...`, one row per true class.
pub fn write_confusion(path: &Path, names: &[String], cm: &ConfusionMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in names.iter().zip(cm.rows()) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_confusion(path: &Path) -> Result<(Vec<String>, ConfusionMatrix)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let names: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| Error::InvalidInput(format!("bad count '{v}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((names, ConfusionMatrix::from_rows(&rows)?))
}

#[derive(Serialize, Deserialize)]
struct RocRow {
    fpr: f64,
    tpr: f64,
}

pub fn write_roc(path: &Path, curve: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for &(fpr, tpr) in &curve.points {
        w.serialize(RocRow { fpr, tpr })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_roc(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize::<RocRow>()
        .map(|row| row.map(|r| (r.fpr, r.tpr)).map_err(Error::from))
        .collect()
}

/// One line of `pairs.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub distance: f64,
    pub same_class: bool,
    pub fold: usize,
    pub threshold: f64,
    pub correct: bool,
}

pub fn pair_rows(p: &PairEvaluation) -> Vec<PairRow> {
    p.set
        .pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let fold = p.kfold.fold_of(i).expect("every pair belongs to a fold");
            let threshold = p.kfold.folds[fold].threshold;
            PairRow {
                distance: pair.distance,
                same_class: pair.same_class,
                fold,
                threshold,
                correct: (pair.distance < threshold) == pair.same_class,
            }
        })
        .collect()
}

pub fn write_pairs(path: &Path, p: &PairEvaluation) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for row in pair_rows(p) {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Per-class ROC curves on fixed `[0, 1]` axes with the chance diagonal.
pub fn roc_svg(names: &[String], curves: &[Option<RocCurve>]) -> String {
    let mut chart = LineChart::new(
        "ROC (one vs rest)",
        "false positive rate",
        "true positive rate",
        (0.0, 1.0),
        (0.0, 1.0),
    );
    for (name, curve) in names.iter().zip(curves) {
        if let Some(c) = curve {
            chart = chart.with_series(Series::new(
                format!("{name} (AUC {:.3})", c.auc),
                c.points.clone(),
            ));
        }
    }
    chart
        .with_series(Series::new("chance", vec![(0.0, 0.0), (1.0, 1.0)]).dashed())
        .to_svg(520.0, 420.0)
}

/// Loss (y from 0 to 1.05·max) and accuracy (y in `[0, 1]`) against epoch.
pub fn history_svg(history: &[EpochRecord]) -> String {
    let last = history.last().map_or(1, |r| r.epoch) as f64;
    let x_range = (1.0, last.max(2.0));
    let series = |name: &str, f: fn(&EpochRecord) -> f64| {
        Series::new(
            name,
            history.iter().map(|r| (r.epoch as f64, f(r))).collect(),
        )
    };
    let max_loss = history
        .iter()
        .flat_map(|r| [r.train_loss, r.val_loss])
        .fold(0.0f64, f64::max);
    let mut loss = LineChart::new(
        "Loss",
        "epoch",
        "loss",
        x_range,
        (0.0, (max_loss * 1.05).max(1e-6)),
    )
    .with_series(series("train", |r| r.train_loss))
    .with_series(series("validation", |r| r.val_loss));
    let mut acc = LineChart::new("Accuracy", "epoch", "accuracy", x_range, (0.0, 1.0))
        .with_series(series("train", |r| r.train_acc))
        .with_series(series("validation", |r| r.val_acc));
    loss.markers = true;
    acc.markers = true;
    side_by_side(&[&loss, &acc], 460.0, 360.0)
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// `sweep.csv` (`alpha,accuracy`) and `sweep.svg` (alpha on `[0, 1]`,
/// accuracy on `[0, 1]`).
pub fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    let path = dir.join(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let mut chart = LineChart::new(
        "Alpha sweep",
        "alpha",
        "test accuracy",
        (0.0, 1.0),
        (0.0, 1.0),
    )
    .with_series(Series::new(
        "accuracy",
        rows.iter().map(|r| (r.alpha, r.accuracy)).collect(),
    ));
    chart.markers = true;
    write_text(&dir.join("sweep.svg"), &chart.to_svg(480.0, 360.0))
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
