//! fedbias: a desk-scale federated-learning simulator with a
//! group-fairness audit toolkit.
//!
//! The crate trains the three reference regimes (standalone, centralized,
//! federated averaging with full participation, optionally with a
//! proximal term), checkpoints every round, and audits how group bias
//! moves through the network: per-party accuracy/fairness benefits,
//! per-round fairness dynamics, leave-one-out influence between parties,
//! integrated-gradients feature attribution, sensitive-parameter norms,
//! parameter-scaling interventions, and reweighing mitigation.
//!
//! The numeric core is generic over the scalar type (see
//! [`scalar::Scalar`]); the aliases below pin the `f64` instantiation the
//! CLI and checkpoint format use.

pub mod attribution;
pub mod audit;
pub mod data;
pub mod error;
pub mod harness;
pub mod intervention;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub(crate) mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};

/// `f64` model, the pipeline default.
pub type Model = nn::MlpModel<f64>;
/// `f64` gradient set.
pub type Gradients = nn::GradientSet<f64>;
/// `f64` feature matrix.
pub type Features = matrix::Matrix<f64>;
/// `f64` labeled, group-annotated data split.
pub type Split = data::DataSplit<f64>;
/// `f64` party dataset.
pub type Party = data::PartyDataset<f64>;
/// `f64` per-round federated trace.
pub type Trace = training::RoundTrace<f64>;

/// `f32` instantiations for callers that want the narrow scalar.
pub type Model32 = nn::MlpModel<f32>;
pub type Party32 = data::PartyDataset<f32>;
