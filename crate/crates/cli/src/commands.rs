use std::path::{Path, PathBuf};
use std::sync::Mutex;

use lossatlas_core::atlas::bundle::{envelope, kind, open_envelope, read_artifact};
use lossatlas_core::atlas::manifest::ModelPlan;
use lossatlas_core::atlas::{
    read_bundle, run_experiment, write_bundle, AtlasBundle, ExperimentContext, Manifest, Progress, RunOptions,
    Stage,
};
use lossatlas_core::local::ScalarField2D;
use lossatlas_core::model::ModelRecord;
use lossatlas_core::tda::{branch_count, merge_tree, persistence_pairs};
use lossatlas_service::{ExperimentStore, ServiceConfig};

use crate::error::{CliError, Result};
use crate::output::{check_target, read_manifest, write_json};
use crate::{AtlasArgs, ModelArgs, PairArgs, ServeArgs, TdaArgs, ValidateArgs};

fn plan_for(manifest: &Manifest, config: &str, seed: u64) -> Result<ModelPlan> {
    let index = manifest
        .configs
        .iter()
        .position(|c| c.id == config)
        .ok_or_else(|| {
            let known: Vec<&str> = manifest.configs.iter().map(|c| c.id.as_str()).collect();
            CliError::Usage(format!("no config {config:?} in the manifest; known: {}", known.join(", ")))
        })?;
    Ok(ModelPlan {
        model_id: manifest.configs[index].model_id(seed),
        config_index: index,
        seed,
    })
}

/// A trained model: read from `record` when given, trained otherwise.
fn obtain_record(ctx: &ExperimentContext<'_>, plan: &ModelPlan, record: Option<&Path>) -> Result<ModelRecord> {
    match record {
        Some(path) => {
            let r: ModelRecord = read_artifact(path, kind::RECORD)?;
            if &r.spec != ctx.spec(plan) || r.seed != plan.seed {
                return Err(CliError::Usage(format!(
                    "{} holds {} ({:?}), not {} ({:?})",
                    path.display(),
                    r.id,
                    r.spec.layer_widths,
                    plan.model_id,
                    ctx.spec(plan).layer_widths
                )));
            }
            Ok(r)
        }
        None => Ok(ctx.train(plan)?),
    }
}

pub fn train(a: &ModelArgs) -> Result<()> {
    check_target(a.out.as_deref(), a.force)?;
    let manifest = read_manifest(&a.manifest)?;
    let plan = plan_for(&manifest, &a.config, a.seed)?;
    let ctx = ExperimentContext::new(&manifest)?;
    let record = ctx.train(&plan)?;
    write_json(a.out.as_deref(), &envelope(kind::RECORD, &record))?;
    if a.out.is_some() {
        println!("model {} seed {}", record.id, record.seed);
        for (k, v) in &record.metrics {
            println!("{k:<14} {v:.6}");
        }
    }
    Ok(())
}

pub fn hessian(a: &ModelArgs) -> Result<()> {
    check_target(a.out.as_deref(), a.force)?;
    let manifest = read_manifest(&a.manifest)?;
    let plan = plan_for(&manifest, &a.config, a.seed)?;
    let ctx = ExperimentContext::new(&manifest)?;
    let record = obtain_record(&ctx, &plan, a.record.as_deref())?;
    let spectrum = ctx.hessian(&plan, &record)?;
    write_json(a.out.as_deref(), &envelope(kind::HESSIAN, &spectrum))?;
    if a.out.is_some() {
        println!("model {} seed {}", plan.model_id, plan.seed);
        for (i, (l, r)) in spectrum.eigenvalues.iter().zip(&spectrum.residual_norms).enumerate() {
            println!("lambda_{:<3} {l:>14.6e}  residual {r:.1e}", i + 1);
        }
        println!("hvps {}  converged {}", spectrum.iterations, spectrum.converged);
    }
    if !spectrum.converged {
        eprintln!("warning: some eigenpairs did not reach the residual tolerance");
    }
    Ok(())
}

pub fn landscape(a: &ModelArgs) -> Result<()> {
    check_target(a.out.as_deref(), a.force)?;
    let manifest = read_manifest(&a.manifest)?;
    let plan = plan_for(&manifest, &a.config, a.seed)?;
    let ctx = ExperimentContext::new(&manifest)?;
    let record = obtain_record(&ctx, &plan, a.record.as_deref())?;
    let field = ctx.landscape(&plan, &record)?;
    write_json(a.out.as_deref(), &envelope(kind::LANDSCAPE, &field))?;
    for w in &field.warnings {
        eprintln!("warning: {w}");
    }
    if a.out.is_some() {
        let (lo, hi) = field
            .finite_values()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let masked = field.values.iter().flatten().filter(|v| v.is_none()).count();
        println!("model {} seed {}", plan.model_id, plan.seed);
        println!("grid {}x{}  loss [{lo:.6}, {hi:.6}]  masked {masked}", field.rows(), field.cols());
    }
    Ok(())
}

fn pair_records(
    ctx: &ExperimentContext<'_>,
    manifest: &Manifest,
    a: &PairArgs,
) -> Result<((ModelPlan, ModelRecord), (ModelPlan, ModelRecord))> {
    let pa = plan_for(manifest, &a.config, a.seed)?;
    let pb = plan_for(manifest, a.other_config.as_deref().unwrap_or(&a.config), a.other_seed)?;
    let ra = ctx.train(&pa)?;
    let rb = ctx.train(&pb)?;
    Ok(((pa, ra), (pb, rb)))
}

pub fn mc(a: &PairArgs) -> Result<()> {
    check_target(a.out.as_deref(), a.force)?;
    let manifest = read_manifest(&a.manifest)?;
    if a.other_config.as_deref().is_some_and(|c| c != a.config) {
        return Err(CliError::Usage(
            "mode connectivity compares two seeds of one config; drop --other-config".into(),
        ));
    }
    let ctx = ExperimentContext::new(&manifest)?;
    let ((pa, ra), (pb, rb)) = pair_records(&ctx, &manifest, a)?;
    let result = ctx.mode_connectivity((&pa, &ra), (&pb, &rb))?;
    write_json(a.out.as_deref(), &envelope(kind::MC, &result))?;
    if a.out.is_some() {
        println!("models {} {}", pa.model_id, pb.model_id);
        println!("mc {:.6}  t* {:.4}", result.mc, result.t_star);
    }
    Ok(())
}

pub fn cka(a: &PairArgs) -> Result<()> {
    check_target(a.out.as_deref(), a.force)?;
    let manifest = read_manifest(&a.manifest)?;
    let ctx = ExperimentContext::new(&manifest)?;
    let ((pa, ra), (pb, rb)) = pair_records(&ctx, &manifest, a)?;
    let result = ctx.cka(&ctx.probes()?, (&pa, &ra), (&pb, &rb))?;
    write_json(a.out.as_deref(), &envelope(kind::CKA, &result))?;
    if a.out.is_some() {
        println!("models {} {}", pa.model_id, pb.model_id);
        println!("cka {:.6}{}", result.scalar, if result.degenerate { "  (degenerate)" } else { "" });
    }
    Ok(())
}

fn read_field(path: &Path) -> Result<ScalarField2D> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read field {}: {e}", path.display())))?;
    let bad = |m: String| CliError::Domain(format!("malformed field {}: {m}", path.display()));
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    let field = if value.is_array() {
        let values: Vec<Vec<Option<f64>>> = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        let mut f = ScalarField2D::from_values(Vec::new());
        f.resolution = values.len();
        f.values = values;
        f
    } else if value.get("schema_version").is_some() {
        open_envelope(kind::LANDSCAPE, value).map_err(bad)?
    } else {
        serde_json::from_value(value).map_err(|e| bad(e.to_string()))?
    };
    field.validate().map_err(|e| bad(e.to_string()))?;
    Ok(field)
}

pub fn tda(a: &TdaArgs) -> Result<()> {
    let targets = a.out.as_ref().map(|d| (d.join("mergetree.json"), d.join("persistence.json")));
    if let Some((t, p)) = &targets {
        check_target(Some(t), a.force)?;
        check_target(Some(p), a.force)?;
    }
    let field = read_field(&a.field)?;
    let tree = merge_tree(&field, a.connectivity.into())?;
    let pairs = persistence_pairs(&tree);
    if let Some((t, p)) = &targets {
        write_json(Some(t), &envelope(kind::MERGE_TREE, &tree))?;
        write_json(Some(p), &envelope(kind::PERSISTENCE, &pairs))?;
    }
    println!("branches: {}", branch_count(&tree));
    let shown: Vec<String> = pairs.iter().map(|p| format!("({}, {})", p.birth, p.death)).collect();
    println!("pairs: {}", shown.join(", "));
    Ok(())
}

fn default_cache(a: &AtlasArgs, store: Option<&ExperimentStore>) -> Option<PathBuf> {
    if let Some(c) = &a.cache {
        return Some(c.clone());
    }
    if let Some(out) = &a.out {
        let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        return Some(parent.join(".lossatlas-cache"));
    }
    store.map(ExperimentStore::cache_dir)
}

pub fn atlas(a: &AtlasArgs) -> Result<()> {
    if a.out.is_none() && a.store.is_none() {
        return Err(CliError::Usage("atlas needs --out, --store or both".into()));
    }
    check_target(a.out.as_deref(), a.force)?;
    let manifest = read_manifest(&a.manifest)?;
    let store = a.store.as_ref().map(ExperimentStore::open).transpose()?;

    let last_stage: Mutex<Option<Stage>> = Mutex::new(None);
    let progress = |p: Progress| {
        let mut last = last_stage.lock().expect("progress lock");
        if *last != Some(p.stage) {
            eprintln!("[{:>3.0}%] {}", 100.0 * p.fraction(), p.stage.name());
            *last = Some(p.stage);
        }
    };
    let options = RunOptions {
        cache_dir: default_cache(a, store.as_ref()),
        progress: Some(&progress),
    };
    let (bundle, report) = run_experiment(&manifest, &options)?;
    if let Some(out) = &a.out {
        write_bundle(&bundle, out, a.force)?;
    }
    if let Some(store) = &store {
        store.save_bundle(&bundle)?;
    }
    for e in &bundle.errors {
        eprintln!("warning: {} {}: {}", e.stage, e.item, e.message);
    }
    print_summary(&bundle);
    if report.fully_cached() {
        println!("all stages cached ({} items)", report.cached_items);
    } else {
        println!("computed {} items, {} cached", report.computed_items, report.cached_items);
    }
    Ok(())
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

fn fmt_range(r: Option<(f64, f64)>) -> String {
    match r {
        Some((lo, hi)) => format!("[{lo:.4}, {hi:.4}]"),
        None => "-".into(),
    }
}

fn print_summary(bundle: &AtlasBundle) {
    let status = match bundle.status {
        lossatlas_core::atlas::BundleStatus::Complete => "complete",
        lossatlas_core::atlas::BundleStatus::Partial => "partial",
    };
    println!("experiment {}  ({}, {status})", bundle.experiment_id, bundle.manifest.name);
    println!("models     {}", bundle.graph.nodes.len());
    println!("edges      {}", bundle.graph.edges.len());
    println!("mc range   {}", fmt_range(range(bundle.graph.edges.iter().map(|e| e.mc))));
    println!(
        "cka range  {}",
        fmt_range(range(bundle.pairs.values().filter_map(|p| p.cka.as_ref()).map(|c| c.scalar)))
    );
    println!();
    println!("{:<12} {:>6} {:>6} {:>10} {:>10}", "config", "models", "edges", "mc min", "mc max");
    for c in &bundle.manifest.configs {
        let models = bundle.graph.nodes.iter().filter(|n| n.config_id == c.id).count();
        let in_config = |id: &str| bundle.graph.nodes.iter().any(|n| n.model_id == id && n.config_id == c.id);
        let mcs: Vec<f64> = bundle.graph.edges.iter().filter(|e| in_config(&e.a)).map(|e| e.mc).collect();
        let (lo, hi) = range(mcs.iter().copied()).map_or(("-".to_string(), "-".to_string()), |(lo, hi)| {
            (format!("{lo:.4}"), format!("{hi:.4}"))
        });
        println!("{:<12} {:>6} {:>6} {:>10} {:>10}", c.id, models, mcs.len(), lo, hi);
    }
}

pub fn validate(a: &ValidateArgs) -> Result<()> {
    if let Some(path) = &a.manifest {
        let m = read_manifest(path)?;
        let n = m.models().len();
        println!(
            "manifest ok: {} configs, {n} models, {} pairs, experiment {}",
            m.configs.len(),
            n * n.saturating_sub(1) / 2,
            m.experiment_id()
        );
    }
    if let Some(dir) = &a.bundle {
        let bundle = read_bundle(dir)?;
        let problems = bundle.validate();
        if !problems.is_empty() {
            for p in &problems {
                println!("problem: {p}");
            }
            return Err(CliError::Domain(format!("{} has {} problems", dir.display(), problems.len())));
        }
        println!(
            "bundle ok: experiment {}, {} models, {} edges, {} item errors",
            bundle.experiment_id,
            bundle.models.len(),
            bundle.graph.edges.len(),
            bundle.errors.len()
        );
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        store_root: a.store,
        host: a.host,
        port: a.port,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Domain(format!("cannot start the runtime: {e}")))?;
    runtime
        .block_on(lossatlas_service::serve(config))
        .map_err(|e| CliError::Domain(e.to_string()))
}
