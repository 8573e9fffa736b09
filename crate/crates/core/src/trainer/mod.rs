//! Optimization loop: configuration, the batched teacher/student step with
//! AdamW and EMA, checkpoints, metrics, and finite-difference gradient checks.

mod checkpoint;
mod config;
mod gradcheck;
mod optim;
mod run;
mod step;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use config::TrainConfig;
pub use gradcheck::{
    check_gradient, gradcheck, gradcheck_config, relative_error, GradcheckOptions, GradcheckReport, GroupError,
    GRADCHECK_TOLERANCE,
};
pub use optim::{clip_grad_norm, lr_at, AdamW, ADAM_EPS, BETA1, BETA2};
pub use run::{epoch_checkpoint_name, epoch_order, run_pretrain, RunOutput, FINAL_CHECKPOINT, METRICS_FILE};
pub use step::{sample_loss, train_step, SampleLoss, StepMetrics, TrainState};
