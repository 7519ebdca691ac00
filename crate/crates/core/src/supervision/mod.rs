pub mod augment;
pub mod boundary;
pub mod losses;
pub mod mjs;
pub mod sgd;
pub mod train;

pub use augment::{augment, augment_with, AugmentConfig};
pub use boundary::boundary_labels;
pub use mjs::{mjs_total, record_mjs, CeResolution, LossBreakdown, LossConfig, MjsVars, Targets};
pub use sgd::{param_kinds, poly_lr, sgd_step, SgdConfig, SgdState};
pub use train::{evaluate, train_loop, train_step, Dataset, IterRecord, TrainReport, TrainerConfig};
