//! Population-level orchestration: manifests, the global graph, bundles and
//! the end-to-end pipeline.

pub mod bundle;
pub mod graph;
pub mod manifest;
pub mod mds;
pub mod pipeline;

pub use bundle::{read_bundle, write_bundle, AtlasBundle, BundleStatus, ItemError, ModelArtifacts, PairArtifacts};
pub use graph::{build_global_graph, DistanceMatrix, GlobalGraph, GraphEdge, GraphNode, PairKey};
pub use manifest::{parse_manifest, Manifest};
pub use mds::classical_mds;
pub use pipeline::{run_experiment, ExperimentContext, Progress, RunOptions, RunReport, Stage};
