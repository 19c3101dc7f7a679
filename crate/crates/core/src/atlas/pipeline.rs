//! End-to-end experiment run: train every model, compute local and pairwise
//! metrics, assemble the global graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::bundle::{AtlasBundle, BundleStatus, ItemError, ModelArtifacts, PairArtifacts};
use super::graph::{build_global_graph, NodeInput, PairKey, PairwiseInput};
use super::manifest::{Manifest, ModelPlan, TaskSpec};
use crate::autodiff::{DatasetObjective, Objective, PinnObjective};
use crate::error::{Error, Result};
use crate::global::{
    cka_layerwise, mode_connectivity, probe_inputs, train_connector, CkaResult, ConnectorConfig, McResult,
};
use crate::local::surface::SurfaceConfig;
use crate::local::{loss_surface, top_eigenvalues, HessianSpectrum, ScalarField2D, SliceTarget};
use crate::model::pinn::{evaluation_grid, EVAL_GRID_NT, EVAL_GRID_NX};
use crate::model::{
    make_toy_classification, train, Dataset, LossKind, ModelRecord, NetworkSpec, Normalization, PinnPoints,
    PinnProblem, TrainingData,
};
use crate::tda::{merge_tree, persistence_pairs, MergeTree, PersistencePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Local,
    Pairs,
    Assemble,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Local => "local",
            Stage::Pairs => "pairs",
            Stage::Assemble => "assemble",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub stage: Stage,
    pub done: usize,
    pub total: usize,
}

impl Progress {
    pub fn fraction(&self) -> f64 {
        self.done as f64 / self.total.max(1) as f64
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Per-item results are reused from here when present.
    pub cache_dir: Option<PathBuf>,
    pub progress: Option<&'a (dyn Fn(Progress) + Sync)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunReport {
    pub cached_items: usize,
    pub computed_items: usize,
}

impl RunReport {
    pub fn fully_cached(&self) -> bool {
        self.computed_items == 0
    }
}

/// Cached outcome of one item.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Outcome<T> {
    Ok(T),
    Err(String),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct LocalArtifacts {
    landscape: Option<ScalarField2D>,
    merge_tree: Option<MergeTree>,
    persistence: Option<Vec<PersistencePair>>,
    hessian: Option<HessianSpectrum>,
    errors: Vec<ItemError>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct PairOutcome {
    mc: Option<McResult>,
    cka: Option<CkaResult>,
    errors: Vec<ItemError>,
}

/// Data shared by every model of the experiment.
enum TaskData {
    Classification(Dataset),
    Pinn(Vec<(PinnProblem, PinnPoints)>),
}

impl TaskData {
    fn new(manifest: &Manifest) -> Result<Self> {
        match &manifest.task {
            TaskSpec::Classification { n, data_seed, corruption } => Ok(TaskData::Classification(
                make_toy_classification(*data_seed, *n, *corruption)?,
            )),
            TaskSpec::Pinn { n_u, n_f, n_b, data_seed } => manifest
                .configs
                .iter()
                .map(|c| {
                    let beta = c.beta.ok_or_else(|| Error::Config(format!("config {} lacks beta", c.id)))?;
                    let problem = PinnProblem::new(beta, *n_u, *n_f, *n_b);
                    let points = PinnPoints::sample(&problem, *data_seed)?;
                    Ok((problem, points))
                })
                .collect::<Result<_>>()
                .map(TaskData::Pinn),
        }
    }

    fn training_data(&self, config: usize) -> TrainingData<'_> {
        match self {
            TaskData::Classification(d) => TrainingData::Supervised(d),
            TaskData::Pinn(v) => TrainingData::Pinn {
                problem: &v[config].0,
                points: &v[config].1,
            },
        }
    }

    fn probe_source(&self) -> Array2<f64> {
        match self {
            TaskData::Classification(d) => d.inputs.clone(),
            TaskData::Pinn(v) => evaluation_grid(&v[0].0, EVAL_GRID_NX, EVAL_GRID_NT),
        }
    }
}

struct Cache {
    dir: Option<PathBuf>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl Cache {
    fn get_or_compute<T: Serialize + DeserializeOwned>(&self, rel: &str, compute: impl FnOnce() -> T) -> Result<T> {
        if let Some(dir) = &self.dir {
            let path = dir.join(rel);
            if let Ok(bytes) = fs::read(&path) {
                if let Ok(v) = serde_json::from_slice(&bytes) {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(v);
                }
                tracing::warn!(path = %path.display(), "ignoring unreadable cache entry");
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let value = compute();
        if let Some(dir) = &self.dir {
            write_atomic(&dir.join(rel), &serde_json::to_vec(&value).expect("cache entry serializes"))?;
        }
        Ok(value)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().expect("cache path has a parent");
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = path.with_extension(format!("tmp-{}-{:?}", std::process::id(), std::thread::current().id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Tracker<'a> {
    done: AtomicUsize,
    total: usize,
    callback: Option<&'a (dyn Fn(Progress) + Sync)>,
}

impl Tracker<'_> {
    fn step(&self, stage: Stage) {
        let done = self.done.fetch_add(1, Ordering::SeqCst) + 1;
        if let Some(cb) = self.callback {
            cb(Progress {
                stage,
                done,
                total: self.total,
            });
        }
    }
}

/// Run every stage of `manifest` and assemble the bundle.
///
/// Item failures (a diverged model, a failed metric) are recorded in the
/// bundle, which is then marked partial. Results depend only on the
/// manifest: items are computed in parallel but merged in manifest order.
pub fn run_experiment(manifest: &Manifest, options: &RunOptions<'_>) -> Result<(AtlasBundle, RunReport)> {
    let ctx = ExperimentContext::new(manifest)?;
    let hash = manifest.hash();
    let cache = Cache {
        dir: options.cache_dir.as_ref().map(|d| d.join(&hash)),
        hits: AtomicUsize::new(0),
        misses: AtomicUsize::new(0),
    };
    let plans = ctx.plans();
    let n_pairs = plans.len() * plans.len().saturating_sub(1) / 2;
    let tracker = Tracker {
        done: AtomicUsize::new(0),
        total: 2 * plans.len() + n_pairs + 1,
        callback: options.progress,
    };

    // Training.
    let trained: Vec<Outcome<ModelRecord>> = plans
        .par_iter()
        .map(|plan| {
            let out = cache.get_or_compute(&format!("train/{}.json", plan.model_id), || match ctx.train(plan) {
                Ok(r) => Outcome::Ok(r),
                Err(e) => Outcome::Err(e.to_string()),
            });
            tracker.step(Stage::Train);
            out
        })
        .collect::<Result<_>>()?;
    let mut errors = Vec::new();
    let mut records: Vec<(&ModelPlan, ModelRecord)> = Vec::new();
    for (plan, outcome) in plans.iter().zip(trained) {
        match outcome {
            Outcome::Ok(r) => records.push((plan, r)),
            Outcome::Err(message) => errors.push(ItemError {
                stage: "train".into(),
                item: plan.model_id.clone(),
                message,
            }),
        }
    }

    // Local metrics.
    let locals: Vec<LocalArtifacts> = records
        .par_iter()
        .map(|(plan, record)| {
            let out = cache.get_or_compute(&format!("local/{}.json", plan.model_id), || {
                ctx.local_metrics(plan, record)
            });
            tracker.step(Stage::Local);
            out
        })
        .collect::<Result<_>>()?;
    for _ in records.len()..plans.len() {
        tracker.step(Stage::Local);
    }

    // Pairwise metrics over every pair of trained models.
    let probes = ctx.probes()?;
    let mut pair_jobs = Vec::new();
    for i in 0..records.len() {
        for j in (i + 1)..records.len() {
            pair_jobs.push((i, j));
        }
    }
    let pair_outcomes: Vec<(PairKey, PairOutcome)> = pair_jobs
        .par_iter()
        .map(|&(i, j)| {
            let (pa, ra) = &records[i];
            let (pb, rb) = &records[j];
            let key = PairKey::new(&pa.model_id, &pb.model_id);
            // Always evaluate with the lexicographically smaller id first.
            let ((pa, ra), (pb, rb)) = if key.0 == pa.model_id {
                ((pa, ra), (pb, rb))
            } else {
                ((pb, rb), (pa, ra))
            };
            let out = cache.get_or_compute(&format!("pairs/{}__{}.json", key.0, key.1), || {
                ctx.pair_metrics(&probes, (pa, ra), (pb, rb), &key)
            });
            tracker.step(Stage::Pairs);
            out.map(|o| (key, o))
        })
        .collect::<Result<_>>()?;
    for _ in pair_jobs.len()..n_pairs {
        tracker.step(Stage::Pairs);
    }

    // Assembly.
    let mut models = BTreeMap::new();
    let mut nodes = Vec::new();
    for ((plan, record), local) in records.iter().zip(locals) {
        errors.extend(local.errors.iter().cloned());
        nodes.push(NodeInput {
            model_id: plan.model_id.clone(),
            config_id: record.config_id.clone(),
            metrics: record.metrics.clone(),
            eigenvalues: local.hessian.as_ref().map(|h| h.eigenvalues.clone()),
        });
        models.insert(
            plan.model_id.clone(),
            ModelArtifacts {
                record: record.clone(),
                landscape: local.landscape,
                merge_tree: local.merge_tree,
                persistence: local.persistence,
                hessian: local.hessian,
            },
        );
    }
    let mut pairwise = PairwiseInput::default();
    let mut pairs = BTreeMap::new();
    let mut pair_errors: BTreeMap<PairKey, Vec<ItemError>> = BTreeMap::new();
    for (key, outcome) in pair_outcomes {
        if let Some(c) = &outcome.cka {
            pairwise.cka.insert(key.clone(), c.scalar);
        }
        if let Some(m) = &outcome.mc {
            pairwise.mc.insert(key.clone(), m.mc);
        }
        if !outcome.errors.is_empty() {
            pairwise.failed.insert(key.clone());
            pair_errors.insert(key.clone(), outcome.errors.clone());
        }
        pairs.insert(
            key,
            PairArtifacts {
                mc: outcome.mc,
                cka: outcome.cka,
            },
        );
    }
    errors.extend(pair_errors.into_values().flatten());
    let graph = build_global_graph(&nodes, &pairwise, manifest.analysis.hessian_k)?;
    tracker.step(Stage::Assemble);

    let status = if errors.is_empty() {
        BundleStatus::Complete
    } else {
        BundleStatus::Partial
    };
    let bundle = AtlasBundle {
        experiment_id: hash[..16].to_string(),
        manifest_hash: hash,
        manifest: manifest.clone(),
        status,
        graph,
        models,
        pairs,
        errors,
    };
    let report = RunReport {
        cached_items: cache.hits.load(Ordering::Relaxed),
        computed_items: cache.misses.load(Ordering::Relaxed),
    };
    Ok((bundle, report))
}

fn item_error(stage: &str, item: &str, e: impl ToString) -> ItemError {
    ItemError {
        stage: stage.into(),
        item: item.into(),
        message: e.to_string(),
    }
}

/// Data, network specs and probe inputs derived from a manifest; computes
/// single items of the pipeline.
pub struct ExperimentContext<'m> {
    manifest: &'m Manifest,
    task: TaskData,
    specs: Vec<NetworkSpec>,
    plans: Vec<ModelPlan>,
}

impl<'m> ExperimentContext<'m> {
    pub fn new(manifest: &'m Manifest) -> Result<Self> {
        let errs = manifest.check();
        if !errs.is_empty() {
            return Err(Error::Manifest(errs));
        }
        Ok(Self {
            manifest,
            task: TaskData::new(manifest)?,
            specs: manifest.configs.iter().map(|c| c.spec(&manifest.task)).collect(),
            plans: manifest.models(),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        self.manifest
    }

    pub fn plans(&self) -> &[ModelPlan] {
        &self.plans
    }

    /// The plan of model `model_id`.
    pub fn plan(&self, model_id: &str) -> Result<&ModelPlan> {
        self.plans.iter().find(|p| p.model_id == model_id).ok_or_else(|| {
            Error::Range(format!(
                "model {model_id:?} is not in the manifest; known: {}",
                self.plans.iter().map(|p| p.model_id.as_str()).collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn spec(&self, plan: &ModelPlan) -> &NetworkSpec {
        &self.specs[plan.config_index]
    }

    pub fn train(&self, plan: &ModelPlan) -> Result<ModelRecord> {
        let config = &self.manifest.configs[plan.config_index];
        train(
            &plan.model_id,
            &config.id,
            self.spec(plan),
            plan.seed,
            self.task.training_data(plan.config_index),
            &self.manifest.train,
        )
    }

    /// Eval-mode training objective of a trained model.
    fn with_objective<T>(&self, plan: &ModelPlan, record: &ModelRecord, f: impl FnOnce(&dyn Objective) -> T) -> T {
        let spec = self.spec(plan);
        match &self.task {
            TaskData::Classification(d) => f(&DatasetObjective::eval(
                spec,
                d,
                LossKind::for_head(spec.output_head),
                &record.bn_state,
            )),
            TaskData::Pinn(v) => {
                let (problem, points) = &v[plan.config_index];
                f(&PinnObjective { spec, problem, points })
            }
        }
    }

    pub fn hessian(&self, plan: &ModelPlan, record: &ModelRecord) -> Result<HessianSpectrum> {
        let a = &self.manifest.analysis;
        self.with_objective(plan, record, |o| top_eigenvalues(o, &record.params, a.hessian_k, a.hessian_seed))
    }

    pub fn landscape(&self, plan: &ModelPlan, record: &ModelRecord) -> Result<ScalarField2D> {
        let a = &self.manifest.analysis;
        let spec = self.spec(plan);
        let surface = SurfaceConfig {
            resolution: a.resolution,
            seed: a.direction_seed,
            alpha_range: (-a.range, a.range),
            beta_range: (-a.range, a.range),
            normalization: a.direction_norm,
        };
        let mut field = match &self.task {
            TaskData::Classification(d) => {
                let target = SliceTarget::Supervised {
                    spec,
                    dataset: d,
                    kind: LossKind::for_head(spec.output_head),
                    bn_state: &record.bn_state,
                    warmup_batches: a.warmup_batches,
                };
                loss_surface(&target, &record.params, &surface)?
            }
            TaskData::Pinn(v) => {
                let (problem, points) = &v[plan.config_index];
                loss_surface(&SliceTarget::Pinn { spec, problem, points }, &record.params, &surface)?
            }
        };
        field.center_id = Some(plan.model_id.clone());
        Ok(field)
    }

    /// Probe inputs for CKA: rows drawn from the training inputs, or from
    /// the PINN evaluation grid.
    pub fn probes(&self) -> Result<Array2<f64>> {
        let a = &self.manifest.analysis;
        probe_inputs(&self.task.probe_source(), a.probe_count, a.probe_seed)
    }

    pub fn cka(
        &self,
        probes: &Array2<f64>,
        (pa, ra): (&ModelPlan, &ModelRecord),
        (pb, rb): (&ModelPlan, &ModelRecord),
    ) -> Result<CkaResult> {
        cka_layerwise(
            self.spec(pa),
            &ra.params,
            &ra.bn_state,
            self.spec(pb),
            &rb.params,
            &rb.bn_state,
            probes,
        )
    }

    /// Mode connectivity of two models of the same config, along a trained
    /// connector. BatchNorm networks are evaluated with batch statistics
    /// since the endpoints' running statistics do not apply along the curve.
    pub fn mode_connectivity(
        &self,
        (pa, ra): (&ModelPlan, &ModelRecord),
        (pb, rb): (&ModelPlan, &ModelRecord),
    ) -> Result<McResult> {
        if pa.config_index != pb.config_index {
            return Err(Error::Precondition(format!(
                "mode connectivity needs models of one config, got {} and {}",
                pa.model_id, pb.model_id
            )));
        }
        let a = &self.manifest.analysis;
        let spec = self.spec(pa);
        let connector = ConnectorConfig {
            steps: a.connector_steps,
            learning_rate: a.connector_lr,
            seed: a.connector_seed,
        };
        let run = |objective: &dyn Objective| -> Result<McResult> {
            let curve = train_connector(objective, &ra.params, &rb.params, &connector)?;
            mode_connectivity(&curve, objective, a.mc_grid_points)
        };
        match &self.task {
            TaskData::Classification(d) => {
                let norm = if spec.batchnorm {
                    Normalization::Batch
                } else {
                    Normalization::Running(&ra.bn_state)
                };
                run(&DatasetObjective {
                    spec,
                    dataset: d,
                    kind: LossKind::for_head(spec.output_head),
                    norm,
                })
            }
            TaskData::Pinn(v) => {
                let (problem, points) = &v[pa.config_index];
                run(&PinnObjective { spec, problem, points })
            }
        }
    }

    fn local_metrics(&self, plan: &ModelPlan, record: &ModelRecord) -> LocalArtifacts {
        let id = plan.model_id.as_str();
        let mut out = LocalArtifacts::default();
        match self.landscape(plan, record) {
            Ok(field) => {
                match merge_tree(&field, self.manifest.analysis.connectivity) {
                    Ok(tree) => {
                        out.persistence = Some(persistence_pairs(&tree));
                        out.merge_tree = Some(tree);
                    }
                    Err(e) => out.errors.push(item_error("mergetree", id, e)),
                }
                out.landscape = Some(field);
            }
            Err(e) => out.errors.push(item_error("landscape", id, e)),
        }
        match self.hessian(plan, record) {
            Ok(h) => out.hessian = Some(h),
            Err(e) => out.errors.push(item_error("hessian", id, e)),
        }
        out
    }

    fn pair_metrics(
        &self,
        probes: &Array2<f64>,
        a: (&ModelPlan, &ModelRecord),
        b: (&ModelPlan, &ModelRecord),
        key: &PairKey,
    ) -> PairOutcome {
        let item = format!("{}__{}", key.0, key.1);
        let mut out = PairOutcome::default();
        match self.cka(probes, a, b) {
            Ok(c) => out.cka = Some(c),
            Err(e) => out.errors.push(item_error("cka", &item, e)),
        }
        if a.0.config_index == b.0.config_index {
            match self.mode_connectivity(a, b) {
                Ok(m) => out.mc = Some(m),
                Err(e) => out.errors.push(item_error("mc", &item, e)),
            }
        }
        out
    }
}

/// Models whose ids appear in some error record.
pub fn failed_items(bundle: &AtlasBundle) -> BTreeSet<String> {
    bundle.errors.iter().map(|e| e.item.clone()).collect()
}
