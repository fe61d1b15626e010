//! Evaluation: ranking metrics plus the end-to-end experiment protocols
//! (mislabeled-sample detection, relabeling, pseudo-label recall, and the
//! checkpoint/tuning sweeps).

pub mod metrics;
pub mod protocol;

pub use metrics::{
    average_precision, mean_std, pearson, pseudo_label, recall_at_s, relabel_from_scores,
    roc_auc, spearman, RelabelOutcome,
};
pub use protocol::{
    accuracy, detection_run, epoch_sweep, prepare_data, recall_run, relabel_run, relabel_sample,
    Aggregate, DataSource, GeneratorConfig, MetricsReport, RunConfig, SeedMetrics, SweepMode,
    SweepReport, SweepRow,
};
