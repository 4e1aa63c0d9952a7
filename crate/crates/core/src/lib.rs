//! Heterogeneous graph scheduling for the flexible job-shop problem with
//! transport vehicles.

pub mod baselines;
pub mod decoder;
pub mod encoder;
pub mod env;
pub mod hetgraph;
pub mod instance;
pub mod kernel;
pub mod model;
pub mod num;
pub mod rng;
pub mod training;

pub use env::{ActionTriple, Schedule, ScheduleState, StepOutcome};
pub use instance::{generate_instance, load_instance, write_instance, Instance, Operation, Time};
pub use num::Scalar;
pub use training::{gap, train, TrainConfig};

/// Double-precision policy, the default for training and inference.
pub type PolicyF64 = model::Policy<f64>;
pub type PolicyF32 = model::Policy<f32>;
pub type ParameterStoreF64 = kernel::ParameterStore<f64>;
pub type ParameterStoreF32 = kernel::ParameterStore<f32>;
pub type GraphF64 = kernel::Graph<f64>;
pub type GraphF32 = kernel::Graph<f32>;
pub type FeaturesF64 = hetgraph::HeteroGraphFeatures<f64>;
pub type FeaturesF32 = hetgraph::HeteroGraphFeatures<f32>;
