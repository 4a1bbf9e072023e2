//! Loss, metrics, schedules, the training loop and ablation variants.

mod ablation;
mod loss;
mod metrics;
mod schedule;
mod trainer;

pub use ablation::Variant;
pub use loss::{masked_mae_loss, MaskedLoss};
pub use metrics::{metrics, MetricAccumulator, MetricReport, Metrics};
pub use schedule::{curriculum_horizon, learning_rate};
pub use trainer::{evaluate, for_each_prediction, stream_rng, train, EpochRecord, TrainOutcome};
