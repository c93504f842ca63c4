//! Toy two-tower model and its training loop.
//!
//! Each modality has a per-token two-layer MLP producing `M x d` token
//! features. Mean pooling plus a linear map gives the first-order
//! embedding; a pooling head from [`crate::counterparts`] (MBDC by default)
//! gives the second-order one.

mod model;
mod optim;
mod train;

pub use model::{embed, BatchNodes, Tower, TowerConfig, TowerParams, TowerVars};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use train::{
    batch_loss, epoch_batches, evaluate, lambda_sweep, train, EpochRecord, EvalMetrics, Matching, MetricsLog,
    ObjectiveKind, StepLosses, StepRecord, SweepRow, TrainConfig, Trainer, EPOCH_HEADER, STEP_HEADER,
    SWEEP_LAMBDAS,
};
