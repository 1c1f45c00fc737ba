//! Open-set anomaly detection over bags of instance features.
//!
//! A graph-convolutional encoder and an evidential head are trained with a
//! multiple-instance objective, a normalizing flow fitted to normal
//! encodings supplies low-density pseudo anomalies, and the head is then
//! fine-tuned on clean positives plus those samples.
//!
//! The numerical core is generic over [`Scalar`]; the pipeline and the
//! aliases below fix it to `f64`.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod evidential;
pub mod flow;
pub mod pipeline;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Adam = autodiff::Adam<f64>;
pub type GraphEncoder = encoder::GraphEncoder<f64>;
pub type BagGraph = encoder::BagGraph<f64>;
pub type EvidenceHead = evidential::EvidenceHead<f64>;
pub type EvidenceOutput = evidential::EvidenceOutput<f64>;
pub type FlowModel = flow::FlowModel<f64>;
pub type PseudoAnomalySet = flow::PseudoAnomalySet<f64>;
pub type ScoredInstances = eval::ScoredInstances<f64>;
