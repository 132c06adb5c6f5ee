//! Classification metrics, ROC/AUC, pair verification and report files.

mod metrics;
mod pairs;
mod report;
mod roc;

pub use metrics::{binary_rates, BinaryCounts, BinaryRates, ConfusionMatrix};
pub use pairs::{
    build_pair_set, kfold_pair_eval, pair_distance, select_threshold, FoldResult, KFoldResult,
    Pair, PairSet,
};
pub use report::{
    full_report, history_svg, pair_evaluation, pair_rows, read_confusion, read_pairs, read_roc,
    read_rows, read_sweep, report_from_outputs, roc_svg, write_confusion, write_pairs,
    write_report, write_roc, write_rows, write_sweep, ClassRow, EvalReport, PairConfig,
    PairEvaluation, PairRow, CONFUSION_FILE, PAIRS_FILE, REPORT_FILE, SWEEP_FILE,
};
pub use roc::{roc_auc, RocCurve};
