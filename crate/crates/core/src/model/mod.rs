//! The two subnetworks and their shared encoder.

mod checkpoint;
mod config;
mod decode;
mod network;
mod params;
mod roi;

pub use checkpoint::{file_checksum, Checkpoint};
pub use config::{Architecture, ModelConfig};
pub use decode::{decode_box, metric_vector, BoxPrediction, RawTargets};
pub use network::{Bound, DetachedInputs, DsnOutput, Model, RoiNodes, RoiPredictions};
pub use params::{col, inverse_softplus, ModelParams, ParamGroup};
pub use roi::{bilinear_matrix, lattice, nearest_tokens, roi_pool};
