pub mod assign;
pub mod backbone;
pub mod bench;
pub mod bbox;
pub mod config;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod io;
mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod tensor;
pub mod weights;

pub use bbox::{iou, BBox};
pub use config::{ModelConfig, Profile};
pub use error::{Error, Result};
pub use model::{InitOptions, Model};
pub use tensor::{ConvSpec, Shape, Tensor};
