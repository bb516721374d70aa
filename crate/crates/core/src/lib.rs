//! Federated learning simulation with cluster-stratified client sampling.
//!
//! Clients are grouped by how similarly their locally trained models label a
//! shared public dataset, and each round samples from every group in
//! proportion to its size.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod sampling;
pub mod seed;

pub use data::{Dataset, ManualGroup, Partition, PublicDataset};
pub use error::{Error, Result};
pub use experiment::{compare_runs, run_experiment, ExperimentConfig, Sampler};
pub use fl::{Algorithm, ClientState, WeightDenominator, LocalConfig, LocalUpdate, ServerState};
pub use matrix::Matrix;
pub use metrics::{CostLedger, CostRecord, RoundMetrics};
pub use nn::{ModelParams, ModelSpec, SoftLabels};
pub use sampling::{ClusterAssignment, SamplingPlan, SimilarityMatrix, SoftLabelReduction};
