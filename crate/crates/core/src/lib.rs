//! Conformal predictive safety filtering for an ego vehicle among ambient agents.
//!
//! The pipeline: simulate ambient-agent episodes, train a recurrent trajectory
//! predictor, calibrate per-step conformal prediction radii, train a safety
//! filter network that imitates a nominal controller while keeping clear of the
//! predicted agents inflated by those radii, and evaluate it in closed loop.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which the file formats and the CLI use.

pub mod agents;
pub mod conformal;
pub mod controllers;
pub mod error;
pub mod filter;
pub mod gaussian;
pub mod geometry;
pub mod harness;
pub mod learncore;
pub mod predictor;
pub mod scalar;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vec2 = geometry::Vec2<f64>;
pub type SystemState = world::SystemState<f64>;
pub type ControlInput = world::ControlInput<f64>;
pub type AgentSnapshot = world::AgentSnapshot<f64>;
pub type Scenario = world::Scenario<f64>;
pub type AgentModel = agents::AgentModel<f64>;
pub type TrajectoryRecord = agents::TrajectoryRecord<f64>;
pub type Tensor = learncore::Tensor<f64>;
pub type ModelParams = learncore::ModelParams<f64>;
pub type PredictionBundle = predictor::PredictionBundle<f64>;
pub type PredictorModel = predictor::PredictorModel<f64>;
pub type FilterTrainingRecord = filter::FilterTrainingRecord<f64>;
pub type FilterModel = filter::FilterModel<f64>;
pub type FilterTrainingOutcome = filter::FilterTrainingOutcome<f64>;
