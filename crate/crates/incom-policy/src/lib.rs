//! The InCoM policy: multi-scale image/point encoders, OT-regularized
//! cross-modal fusion, intent-gated pyramid aggregation, and bidirectionally
//! coordinated flow-matching action decoding.

pub mod config;
pub mod darm;
pub mod dcfm;
pub mod encoders;
pub mod feat;
pub mod idppm;
pub mod model;

pub use config::{ActivitySource, PolicyConfig};
pub use model::{AlignSpec, EvalOutput, InComModel, ObsInput, Sample, TrainOutput, Variant};

#[derive(thiserror::Error, Debug)]
pub enum PolicyError {
    #[error("sinkhorn: {0}")]
    Sinkhorn(String),
    #[error("flow time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("unknown topology `{0}` (expected one of dcfm, shared, sequential)")]
    UnknownTopology(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("{0}")]
    Input(String),
}
