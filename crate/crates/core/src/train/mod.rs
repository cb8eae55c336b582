//! Optimization recipe, validation, TTA and ensembling.

pub mod ema;
pub mod fit;
pub mod optim;
pub mod tta;

pub use ema::{ema_update, EmaState};
pub use fit::{
    evaluate, fit, metrics_csv, EpochRecord, FitOptions, FitOutcome, MicroOutput, SplitMetrics, StepRecord,
    TrainConfig, Trainer, ADAM_M_PREFIX, ADAM_V_PREFIX, CSV_HEADER,
};
pub use optim::{adamw_step, check_finite_grads, clip_grad_norm, cosine_lr, grad_norm, scale_grads, AdamWConfig, ClipReport, OptimizerState};
pub use tta::{ensemble_combine, ensemble_predict, ensemble_weights, tta_predict, tta_predict_model, TtaTransform};
