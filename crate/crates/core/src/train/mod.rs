//! Loss assembly, optimization, the training loop and its checkpoints.

pub mod checkpoint;
pub mod config;
pub mod engine;
pub mod gradcheck;
pub mod optim;
pub mod runner;

pub use checkpoint::Checkpoint;
pub use config::{DistillConfig, LossMode, OptimizerConfig, ScheduleConfig};
pub use engine::{compute_losses, distill_step, distill_step_with_taps, plain_step, total_loss, GradNorms, LossTerms, StepReport};
pub use gradcheck::{gradcheck, Component, GradCheckReport};
pub use optim::{poly_lr, AdamW};
pub use runner::{evaluate, load_model, save_model, train, EvalRecord, LogRecord, RunOutcome, TrainMode};
