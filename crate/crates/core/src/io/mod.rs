//! Files: weights, netpbm images, configs, toy datasets, fixtures.

pub mod atomic;
pub mod colorize;
pub mod config;
pub mod fixture;
pub mod netpbm;
pub mod normalize;
pub mod toy;
pub mod weights;

pub use atomic::write_atomic;
pub use colorize::{colorize, palette};
pub use config::{parse_config, ConfigEntry, RunConfig};
pub use fixture::{parse_fixture, write_fixture, Fixture};
pub use netpbm::{read_image, read_labels, write_image, write_labels, RgbImage};
pub use normalize::Normalization;
pub use toy::{gen_toy, read_dataset, to_dataset, write_dataset, ShapeKind, ShapeRecord, ToyDataset, ToySample};
pub use weights::{
    load_params, load_weights, read_weights_file, save_params, save_weights, write_weights_file, LoadedParams,
    WeightEntry, WeightFile,
};
