//! On-disk experiment bundles: a directory of schema-versioned JSON files.
//!
//! ```text
//! bundle.json                      index: ids, status, item errors
//! manifest.json                    manifest echo
//! graph.json                       global graph
//! models/<id>/record.json          trained model
//! models/<id>/landscape.json       loss slice
//! models/<id>/mergetree.json
//! models/<id>/persistence.json
//! models/<id>/hessian.json
//! pairs/<a>__<b>/mc.json           a < b
//! pairs/<a>__<b>/cka.json
//! ```
//!
//! Every file is an envelope `{"schema_version", "kind", "data"}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::graph::{GlobalGraph, PairKey};
use super::manifest::Manifest;
use crate::error::{Error, Result};
use crate::global::{CkaResult, McResult};
use crate::local::{HessianSpectrum, ScalarField2D};
use crate::model::ModelRecord;
use crate::tda::{MergeTree, PersistencePair};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleStatus {
    Complete,
    Partial,
}

/// A stage failure for one model or pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    pub stage: String,
    pub item: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifacts {
    pub record: ModelRecord,
    pub landscape: Option<ScalarField2D>,
    pub merge_tree: Option<MergeTree>,
    pub persistence: Option<Vec<PersistencePair>>,
    pub hessian: Option<HessianSpectrum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairArtifacts {
    pub mc: Option<McResult>,
    pub cka: Option<CkaResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasBundle {
    pub experiment_id: String,
    pub manifest_hash: String,
    pub manifest: Manifest,
    pub status: BundleStatus,
    pub graph: GlobalGraph,
    pub models: BTreeMap<String, ModelArtifacts>,
    pub pairs: BTreeMap<PairKey, PairArtifacts>,
    pub errors: Vec<ItemError>,
}

/// Contents of `bundle.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleIndex {
    pub experiment_id: String,
    pub manifest_hash: String,
    pub status: BundleStatus,
    pub models: Vec<String>,
    pub pairs: Vec<PairKey>,
    pub errors: Vec<ItemError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    pub data: T,
}

/// Artifact kinds and the files that hold them.
pub mod kind {
    pub const INDEX: &str = "bundle_index";
    pub const MANIFEST: &str = "manifest";
    pub const GRAPH: &str = "global_graph";
    pub const RECORD: &str = "model_record";
    pub const LANDSCAPE: &str = "landscape";
    pub const MERGE_TREE: &str = "merge_tree";
    pub const PERSISTENCE: &str = "persistence";
    pub const HESSIAN: &str = "hessian";
    pub const MC: &str = "mode_connectivity";
    pub const CKA: &str = "cka";
}

pub fn envelope<T: Serialize>(kind: &str, data: &T) -> serde_json::Value {
    serde_json::to_value(Envelope {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        data,
    })
    .expect("artifact serializes")
}

/// Check an envelope's version and kind and decode its payload.
pub fn open_envelope<T: DeserializeOwned>(kind: &str, value: serde_json::Value) -> std::result::Result<T, String> {
    let env: Envelope<serde_json::Value> =
        serde_json::from_value(value).map_err(|e| format!("not an envelope: {e}"))?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(format!(
            "schema version {} unsupported, expected {SCHEMA_VERSION}",
            env.schema_version
        ));
    }
    if env.kind != kind {
        return Err(format!("kind {:?}, expected {kind:?}", env.kind));
    }
    serde_json::from_value(env.data).map_err(|e| format!("payload does not match {kind}: {e}"))
}

/// Payload type check for an envelope of the given kind.
pub fn check_envelope(kind: &str, value: &serde_json::Value) -> std::result::Result<(), String> {
    let v = value.clone();
    match kind {
        kind::INDEX => open_envelope::<BundleIndex>(kind, v).map(drop),
        kind::MANIFEST => open_envelope::<Manifest>(kind, v).map(drop),
        kind::GRAPH => open_envelope::<GlobalGraph>(kind, v).map(drop),
        kind::RECORD => open_envelope::<ModelRecord>(kind, v).map(drop),
        kind::LANDSCAPE => open_envelope::<ScalarField2D>(kind, v).map(drop),
        kind::MERGE_TREE => open_envelope::<MergeTree>(kind, v).map(drop),
        kind::PERSISTENCE => open_envelope::<Vec<PersistencePair>>(kind, v).map(drop),
        kind::HESSIAN => open_envelope::<HessianSpectrum>(kind, v).map(drop),
        kind::MC => open_envelope::<McResult>(kind, v).map(drop),
        kind::CKA => open_envelope::<CkaResult>(kind, v).map(drop),
        other => Err(format!("unknown artifact kind {other:?}")),
    }
}

pub fn pair_dir_name(key: &PairKey) -> String {
    format!("{}__{}", key.0, key.1)
}

impl AtlasBundle {
    pub fn index(&self) -> BundleIndex {
        BundleIndex {
            experiment_id: self.experiment_id.clone(),
            manifest_hash: self.manifest_hash.clone(),
            status: self.status,
            models: self.models.keys().cloned().collect(),
            pairs: self.pairs.keys().cloned().collect(),
            errors: self.errors.clone(),
        }
    }

    /// Every file of the bundle as `(relative path, envelope)`, in a fixed
    /// order.
    pub fn files(&self) -> Vec<(PathBuf, serde_json::Value)> {
        let mut out = vec![
            (PathBuf::from("bundle.json"), envelope(kind::INDEX, &self.index())),
            (PathBuf::from("manifest.json"), envelope(kind::MANIFEST, &self.manifest)),
            (PathBuf::from("graph.json"), envelope(kind::GRAPH, &self.graph)),
        ];
        for (id, m) in &self.models {
            let dir = Path::new("models").join(id);
            out.push((dir.join("record.json"), envelope(kind::RECORD, &m.record)));
            if let Some(x) = &m.landscape {
                out.push((dir.join("landscape.json"), envelope(kind::LANDSCAPE, x)));
            }
            if let Some(x) = &m.merge_tree {
                out.push((dir.join("mergetree.json"), envelope(kind::MERGE_TREE, x)));
            }
            if let Some(x) = &m.persistence {
                out.push((dir.join("persistence.json"), envelope(kind::PERSISTENCE, x)));
            }
            if let Some(x) = &m.hessian {
                out.push((dir.join("hessian.json"), envelope(kind::HESSIAN, x)));
            }
        }
        for (key, p) in &self.pairs {
            let dir = Path::new("pairs").join(pair_dir_name(key));
            if let Some(x) = &p.mc {
                out.push((dir.join("mc.json"), envelope(kind::MC, x)));
            }
            if let Some(x) = &p.cka {
                out.push((dir.join("cka.json"), envelope(kind::CKA, x)));
            }
        }
        out
    }

    /// Referential and completeness problems; empty for a sound bundle.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let node_ids: BTreeSet<&str> = self.graph.nodes.iter().map(|n| n.model_id.as_str()).collect();
        let model_ids: BTreeSet<&str> = self.models.keys().map(String::as_str).collect();
        if node_ids != model_ids {
            problems.push(format!("graph nodes {node_ids:?} differ from model artifacts {model_ids:?}"));
        }
        let config_of: BTreeMap<&str, &str> = self
            .graph
            .nodes
            .iter()
            .map(|n| (n.model_id.as_str(), n.config_id.as_str()))
            .collect();
        for e in &self.graph.edges {
            match (config_of.get(e.a.as_str()), config_of.get(e.b.as_str())) {
                (Some(ca), Some(cb)) if ca == cb => {}
                (Some(_), Some(_)) => problems.push(format!("edge ({}, {}) crosses configs", e.a, e.b)),
                _ => problems.push(format!("edge ({}, {}) references a missing node", e.a, e.b)),
            }
            if e.a >= e.b {
                problems.push(format!("edge ({}, {}) is not stored in key order", e.a, e.b));
            }
            let mc = self.pairs.get(&PairKey::new(&e.a, &e.b)).and_then(|p| p.mc.as_ref());
            if mc.map(|m| m.mc) != Some(e.mc) {
                problems.push(format!("edge ({}, {}) disagrees with its mc artifact", e.a, e.b));
            }
        }
        for key in self.pairs.keys() {
            if key.0 >= key.1 {
                problems.push(format!("pair ({}, {}) is not in key order", key.0, key.1));
            }
            for id in [&key.0, &key.1] {
                if !model_ids.contains(id.as_str()) {
                    problems.push(format!("pair ({}, {}) references unknown model {id}", key.0, key.1));
                }
            }
        }
        for (id, m) in &self.models {
            if &m.record.id != id {
                problems.push(format!("model {id} holds record {}", m.record.id));
            }
            if let Some(f) = &m.landscape {
                if f.center_id.as_deref() != Some(id.as_str()) {
                    problems.push(format!("landscape of {id} is centered on {:?}", f.center_id));
                }
            }
            if let Some(h) = &m.hessian {
                if h.eigenvalues.len() != self.manifest.analysis.hessian_k {
                    problems.push(format!("model {id} has {} eigenvalues", h.eigenvalues.len()));
                }
            }
            for name in &self.manifest.metrics {
                if !m.record.metrics.contains_key(name) {
                    problems.push(format!("model {id} lacks metric {name}"));
                }
            }
        }
        if self.status == BundleStatus::Complete {
            if !self.errors.is_empty() {
                problems.push("complete bundle carries item errors".into());
            }
            let expected = self.manifest.models().len();
            if self.models.len() != expected {
                problems.push(format!("{} of {expected} models present", self.models.len()));
            }
            for (id, m) in &self.models {
                if m.landscape.is_none() || m.merge_tree.is_none() || m.persistence.is_none() || m.hessian.is_none() {
                    problems.push(format!("model {id} lacks local artifacts"));
                }
            }
            let ids: Vec<&String> = self.models.keys().collect();
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    let key = PairKey::new(a.as_str(), b.as_str());
                    let p = self.pairs.get(&key);
                    if p.and_then(|p| p.cka.as_ref()).is_none() {
                        problems.push(format!("pair ({}, {}) lacks cka", key.0, key.1));
                    }
                    if config_of.get(a.as_str()) == config_of.get(b.as_str()) && p.and_then(|p| p.mc.as_ref()).is_none() {
                        problems.push(format!("pair ({}, {}) lacks mc", key.0, key.1));
                    }
                }
            }
        }
        problems
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).expect("json value serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write `bundle` to `dir`.
///
/// Files go to a sibling staging directory that is renamed into place, so a
/// reader sees either the old directory or the complete new one. An
/// existing `dir` is replaced only when `overwrite` is set.
pub fn write_bundle(bundle: &AtlasBundle, dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() && !overwrite {
        return Err(Error::Precondition(format!(
            "{} exists; refusing to overwrite",
            dir.display()
        )));
    }
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Precondition(format!("{} has no final component", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    for (rel, value) in bundle.files() {
        write_json(&staging.join(rel), &value)?;
    }
    if dir.exists() {
        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Read and decode one envelope file.
pub fn read_artifact<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Integrity {
        path: path.to_path_buf(),
        message: format!("cannot read: {e}"),
    })?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::Integrity {
        path: path.to_path_buf(),
        message: format!("invalid JSON: {e}"),
    })?;
    open_envelope(kind, value).map_err(|message| Error::Integrity {
        path: path.to_path_buf(),
        message,
    })
}

fn read_optional<T: DeserializeOwned>(path: PathBuf, kind: &str) -> Result<Option<T>> {
    if path.exists() {
        read_artifact(&path, kind).map(Some)
    } else {
        Ok(None)
    }
}

pub fn read_bundle(dir: &Path) -> Result<AtlasBundle> {
    let index: BundleIndex = read_artifact(&dir.join("bundle.json"), kind::INDEX)?;
    let manifest: Manifest = read_artifact(&dir.join("manifest.json"), kind::MANIFEST)?;
    let graph: GlobalGraph = read_artifact(&dir.join("graph.json"), kind::GRAPH)?;
    let mut models = BTreeMap::new();
    for id in &index.models {
        let d = dir.join("models").join(id);
        models.insert(
            id.clone(),
            ModelArtifacts {
                record: read_artifact(&d.join("record.json"), kind::RECORD)?,
                landscape: read_optional(d.join("landscape.json"), kind::LANDSCAPE)?,
                merge_tree: read_optional(d.join("mergetree.json"), kind::MERGE_TREE)?,
                persistence: read_optional(d.join("persistence.json"), kind::PERSISTENCE)?,
                hessian: read_optional(d.join("hessian.json"), kind::HESSIAN)?,
            },
        );
    }
    let mut pairs = BTreeMap::new();
    for key in &index.pairs {
        let d = dir.join("pairs").join(pair_dir_name(key));
        pairs.insert(
            key.clone(),
            PairArtifacts {
                mc: read_optional(d.join("mc.json"), kind::MC)?,
                cka: read_optional(d.join("cka.json"), kind::CKA)?,
            },
        );
    }
    Ok(AtlasBundle {
        experiment_id: index.experiment_id,
        manifest_hash: index.manifest_hash,
        manifest,
        status: index.status,
        graph,
        models,
        pairs,
        errors: index.errors,
    })
}
