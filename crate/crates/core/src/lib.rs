//! Top-down modulation (TDM) feature hierarchies with a minimal two-stage
//! detector, progressive training, ablation baselines, a synthetic shapes
//! benchmark and COCO-style evaluation.

pub mod autograd;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod synthdata;
pub mod tdm;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use config::ArchConfig;
pub use error::{Result, TdmError};
pub use tensor::{Real, Tensor};
