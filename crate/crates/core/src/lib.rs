pub mod asfm;
pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod labels;
pub mod mfam;
pub mod model;
pub mod ram;
pub mod supervision;
pub mod tensor;

pub use error::{Error, Result, WeightError};
pub use labels::{Labels, IGNORE_LABEL};
pub use tensor::{ConvSpec, Dims, Element, Tensor};
