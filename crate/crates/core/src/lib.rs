//! Differentially private classifier training by pseudo-posterior
//! reweighting of a SWAG posterior approximation, plus a DP-SGD baseline and
//! an imbalanced-classification benchmark harness.

pub mod accountant;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod ppm;
pub mod swag;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelFamily, ModelSpec, Record, SparseVector};
pub use params::{Layout, ParameterVector};
