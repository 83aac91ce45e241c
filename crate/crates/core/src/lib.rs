//! Debiased estimation and inference for the genetic covariance, genetic
//! variances and genetic correlation of two binary traits under sparse
//! high-dimensional logistic models.

pub mod baselines;
pub mod error;
pub mod harness;
pub mod inference;
pub mod lasso;
pub mod model;
pub mod relatedness;
pub mod rng;
pub mod simgen;

pub use baselines::{BootstrapOptions, PlugInEstimates};
pub use error::{Error, Result};
pub use harness::{ExperimentReport, ExperimentSpec, Method, Summary};
pub use inference::{InferenceResult, InferenceSummary, NullValues, SampleCount, VarianceEstimates};
pub use lasso::{LassoFit, SolverOptions, TuningRule};
pub use model::{expit, validate_study, LinkKind, PairedStudy, Scenario, TargetFunctional, Trait};
pub use relatedness::{full_pipeline, DebiasedEstimates, PipelineOptions};
pub use simgen::{SimDesign, SigmaKind, TrueParams};
