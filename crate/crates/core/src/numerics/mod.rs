//! Differentiable tensor substrate, optimizer, scheduler and gradient checking.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod params;
pub mod plateau;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointIndex};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport, Probe};
pub use params::{Bound, ParamStore};
pub use plateau::{plateau_step, PlateauConfig, PlateauState};
pub use tape::{Conv2dGeom, Tape, Var};
pub use tensor::{Element, Tensor};
