//! ROC/AUC, balanced accuracy, CDF separation and layer ablations.

mod ablation;
mod cdf;
mod metrics;

pub use ablation::{
    ablation_sweep, layer_separation, mean_std, run_cell, run_cell_probed, score_metric, write_ablation_csv, AblationRow,
    AblationSetup, Metric,
};
pub use cdf::{cdf_export, empirical_cdf, separation_gap, write_cdf_csv, CdfTables};
pub use metrics::{
    balanced_accuracy, evaluate, max_balanced_accuracy, roc_auc, trapezoid_area, write_roc_csv,
    write_summary_csv, EvalReport,
};
