pub mod baselines;
pub mod diff;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod integrator;
pub mod lagrangian;
pub mod learn;
pub mod metrics;
pub mod seed;

pub use baselines::{NeuralTransition, RefinementConfig};
pub use diff::{DualBatch, ParamVector};
pub use dynamics::{MotionFamily, Split, TrajectoryRecord};
pub use error::{Error, Result};
pub use harness::{Checkpoint, ExperimentConfig, ExperimentReport};
pub use integrator::{RolloutResult, SolverConfig};
pub use lagrangian::{LagrangianModel, LatentState, ModelConfig, PhysicalContext, Variant};
pub use learn::{ContextEncoder, LossWeights, TrainConfig};
pub use metrics::{MetricReport, QuantitySeries};
