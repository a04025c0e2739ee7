//! Synthetic forgery data.
//!
//! * [`synth`]: procedural base images with a per-image sensor-noise level.
//! * [`forge`]: the two-stage forgery of four method families.
//! * [`dataset`]: reproducible dataset generation, manifests and loading.
//! * [`io`]: PNG files and conversion to network input tensors.

pub mod dataset;
pub mod error;
pub mod forge;
pub mod io;
pub mod synth;

pub use dataset::{build_dataset, Dataset, DatasetConfig, Manifest, Record};
pub use error::{DataError, Result};
pub use forge::{forge, ForgerySample, Method};
pub use synth::{gen_base_image, BaseImage};
