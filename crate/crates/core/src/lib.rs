//! Distributed vector search over partitioned graph indexes.
//!
//! A query batch flows through four stages on every rank: K-means
//! classification into its top-c clusters, all-to-all dispatch to the ranks
//! owning those clusters, a beam search over each cluster's proximity graph,
//! and a combine step that merges the partial top-k lists back at the
//! originating rank. [`sim`] executes that pipeline functionally over
//! simulated ranks and prices every stage with the closed-form latencies in
//! [`cost`].

pub mod cost;
pub mod error;
pub mod graph;
pub mod index;
pub mod kmeans;
pub mod router;
pub mod sim;
pub mod vector;

pub use cost::{CostReport, GpuSpec, LinkSpec, Workload};
pub use error::{Error, Result};
pub use graph::{GraphIndex, SearchParams};
pub use index::{BuildParams, IndexBundle};
pub use kmeans::{Assignment, Centroids};
pub use router::{ClusterTopology, PlacementMap, RoutedBatch};
pub use sim::{
    combine_results, replay_schedule, run_pipeline, PipelineConfig, PipelineMode, PipelineResult, SearchPricing, StageDurations,
    Timeline, TimingModel,
};
pub use vector::{Dataset, ElementFormat, ScoredId};
