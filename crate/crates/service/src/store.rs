//! File-backed experiment store.
//!
//! ```text
//! <root>/index.json                 experiment index
//! <root>/experiments/<id>/          one bundle directory per experiment
//! <root>/cache/                     per-item pipeline cache
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use lossatlas_core::atlas::bundle::{check_envelope, envelope, open_envelope};
use lossatlas_core::atlas::{read_bundle, write_bundle, AtlasBundle, BundleStatus, Manifest};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StoreError};

pub const INDEX_KIND: &str = "experiment_index";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentStatus {
    Running,
    Partial,
    Complete,
}

impl From<BundleStatus> for ExperimentStatus {
    fn from(s: BundleStatus) -> Self {
        match s {
            BundleStatus::Complete => ExperimentStatus::Complete,
            BundleStatus::Partial => ExperimentStatus::Partial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEntry {
    pub experiment_id: String,
    pub manifest_hash: String,
    pub name: String,
    pub status: ExperimentStatus,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct IndexFile {
    experiments: Vec<ExperimentEntry>,
}

/// Outcome of registering a manifest.
#[derive(Debug, Clone, PartialEq)]
pub enum Registration {
    /// A new entry in the running state.
    Started(ExperimentEntry),
    /// An entry with the same manifest hash already exists.
    Existing(ExperimentEntry),
}

#[derive(Debug)]
pub struct ExperimentStore {
    root: PathBuf,
    index: RwLock<BTreeMap<String, ExperimentEntry>>,
    writes: Mutex<()>,
}

impl ExperimentStore {
    /// Open or create a store at `root`.
    ///
    /// Entries left running by an earlier process are dropped, and bundle
    /// directories missing from the index are added back.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let experiments = root.join("experiments");
        fs::create_dir_all(&experiments).map_err(|e| StoreError::io(&experiments, e))?;
        let index_path = root.join("index.json");
        let mut index: BTreeMap<String, ExperimentEntry> = if index_path.exists() {
            let bytes = fs::read(&index_path).map_err(|e| StoreError::io(&index_path, e))?;
            let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| StoreError::Integrity {
                path: index_path.clone(),
                message: format!("invalid JSON: {e}"),
            })?;
            let file: IndexFile = open_envelope(INDEX_KIND, value).map_err(|message| StoreError::Integrity {
                path: index_path.clone(),
                message,
            })?;
            file.experiments
                .into_iter()
                .map(|e| (e.experiment_id.clone(), e))
                .collect()
        } else {
            BTreeMap::new()
        };

        index.retain(|id, e| e.status != ExperimentStatus::Running && experiments.join(id).is_dir());
        for item in fs::read_dir(&experiments).map_err(|e| StoreError::io(&experiments, e))? {
            let item = item.map_err(|e| StoreError::io(&experiments, e))?;
            let name = item.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') || index.contains_key(&name) || !item.path().is_dir() {
                continue;
            }
            match read_bundle(&item.path()) {
                Ok(b) if b.experiment_id == name => {
                    let now = Utc::now();
                    index.insert(
                        name,
                        ExperimentEntry {
                            experiment_id: b.experiment_id,
                            manifest_hash: b.manifest_hash,
                            name: b.manifest.name,
                            status: b.status.into(),
                            created_at: now,
                            updated_at: now,
                        },
                    );
                }
                Ok(_) => tracing::warn!(dir = %item.path().display(), "bundle id does not match its directory"),
                Err(e) => tracing::warn!(dir = %item.path().display(), error = %e, "skipping unreadable bundle"),
            }
        }

        let store = Self {
            root,
            index: RwLock::new(index),
            writes: Mutex::new(()),
        };
        {
            let _guard = store.writes.lock().expect("store lock");
            store.persist_index()?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn bundle_dir(&self, id: &str) -> PathBuf {
        self.root.join("experiments").join(id)
    }

    pub fn list(&self) -> Vec<ExperimentEntry> {
        self.index.read().expect("index lock").values().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Option<ExperimentEntry> {
        self.index.read().expect("index lock").get(id).cloned()
    }

    /// Register `manifest`, or return the entry already holding its hash.
    pub fn register(&self, manifest: &Manifest) -> Result<Registration> {
        let _guard = self.writes.lock().expect("store lock");
        let id = manifest.experiment_id();
        let hash = manifest.hash();
        if let Some(existing) = self.get(&id) {
            return if existing.manifest_hash == hash {
                Ok(Registration::Existing(existing))
            } else {
                Err(StoreError::Conflict {
                    id,
                    existing: existing.manifest_hash,
                })
            };
        }
        let now = Utc::now();
        let entry = ExperimentEntry {
            experiment_id: id.clone(),
            manifest_hash: hash,
            name: manifest.name.clone(),
            status: ExperimentStatus::Running,
            created_at: now,
            updated_at: now,
        };
        self.index.write().expect("index lock").insert(id, entry.clone());
        self.persist_index()?;
        Ok(Registration::Started(entry))
    }

    /// Drop a running entry whose job failed.
    pub fn abandon(&self, id: &str) -> Result<()> {
        let _guard = self.writes.lock().expect("store lock");
        let removed = {
            let mut index = self.index.write().expect("index lock");
            match index.get(id) {
                Some(e) if e.status == ExperimentStatus::Running => index.remove(id).is_some(),
                _ => false,
            }
        };
        if removed {
            self.persist_index()?;
        }
        Ok(())
    }

    /// Persist `bundle` and return its experiment id. A bundle whose
    /// manifest hash is already stored is not rewritten.
    pub fn save_bundle(&self, bundle: &AtlasBundle) -> Result<String> {
        let _guard = self.writes.lock().expect("store lock");
        let id = bundle.experiment_id.clone();
        let previous = self.get(&id);
        if let Some(e) = &previous {
            if e.manifest_hash != bundle.manifest_hash {
                return Err(StoreError::Conflict {
                    id,
                    existing: e.manifest_hash.clone(),
                });
            }
            if e.status != ExperimentStatus::Running {
                return Ok(id);
            }
        }
        write_bundle(bundle, &self.bundle_dir(&id), true)?;
        let now = Utc::now();
        let entry = ExperimentEntry {
            experiment_id: id.clone(),
            manifest_hash: bundle.manifest_hash.clone(),
            name: bundle.manifest.name.clone(),
            status: bundle.status.into(),
            created_at: previous.map_or(now, |e| e.created_at),
            updated_at: now,
        };
        self.index.write().expect("index lock").insert(id.clone(), entry);
        self.persist_index()?;
        Ok(id)
    }

    pub fn load_bundle(&self, id: &str) -> Result<AtlasBundle> {
        self.stored(id)?;
        Ok(read_bundle(&self.bundle_dir(id))?)
    }

    /// One artifact envelope of a stored experiment, checked against `kind`.
    /// `rel` is a path inside the bundle directory.
    pub fn artifact(&self, id: &str, rel: &Path, kind: &str) -> Result<serde_json::Value> {
        self.stored(id)?;
        let path = self.bundle_dir(id).join(rel);
        if !path.is_file() {
            return Err(StoreError::NotFound(format!(
                "artifact {} of experiment {id}",
                rel.display()
            )));
        }
        let bytes = fs::read(&path).map_err(|e| StoreError::io(&path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| StoreError::Integrity {
            path: path.clone(),
            message: format!("invalid JSON: {e}"),
        })?;
        check_envelope(kind, &value).map_err(|message| StoreError::Integrity { path, message })?;
        Ok(value)
    }

    fn stored(&self, id: &str) -> Result<ExperimentEntry> {
        match self.get(id) {
            Some(e) if e.status != ExperimentStatus::Running => Ok(e),
            Some(_) => Err(StoreError::NotFound(format!("bundle of running experiment {id}"))),
            None => Err(StoreError::NotFound(format!("experiment {id}"))),
        }
    }

    /// Caller holds `writes`.
    fn persist_index(&self) -> Result<()> {
        let file = IndexFile {
            experiments: self.list(),
        };
        let text = serde_json::to_string_pretty(&envelope(INDEX_KIND, &file)).expect("index serializes");
        write_atomic(&self.root.join("index.json"), format!("{text}\n").as_bytes())
    }
}

/// Write through a temporary sibling file and rename it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| StoreError::io(&tmp, e))?;
    f.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}
