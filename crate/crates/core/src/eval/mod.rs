//! Metrics, static cost analysis, batch-norm folding and timing.

mod confusion;
mod cost;
mod fold;
mod timing;

pub use confusion::{ConfusionMatrix, MiouReport};
pub use cost::{count_flops, count_params, CostEntry, CostReport, FlopsConvention};
pub use fold::fold_bn;
pub use timing::{time_forward, time_pair, Timing};
