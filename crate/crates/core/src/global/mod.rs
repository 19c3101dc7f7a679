//! Pairwise metrics between trained models.

pub mod cka;
pub mod connector;

pub use cka::{cka, cka_layerwise, feature_matrix, probe_inputs, CkaResult, FeatureMatrix};
pub use connector::{
    mode_connectivity, train_connector, ConnectorConfig, CurveKind, CurveSpec, McResult,
};
