//! CSV tables for external plotting.
//!
//! | View | Columns |
//! |---|---|
//! | global | `model_id, config_id, x, y`, one column per model metric, `lambda_1..lambda_k` |
//! | landscape | `row, col, alpha, beta, loss` (empty loss for masked cells) |
//! | persistence | `birth, death, persistence, birth_row, birth_col, death_row, death_col` |

use std::collections::BTreeSet;

use lossatlas_core::atlas::{read_bundle, AtlasBundle, ModelArtifacts};
use lossatlas_core::local::surface::grid_coordinate;
use lossatlas_service::ExperimentStore;

use crate::error::{CliError, Result};
use crate::output::{check_target, write_bytes};
use crate::{ExportArgs, View};

fn load(a: &ExportArgs) -> Result<AtlasBundle> {
    if let Some(dir) = &a.bundle {
        return Ok(read_bundle(dir)?);
    }
    let id = a.experiment.as_deref().expect("clap requires --experiment or --bundle");
    if !a.store.join("index.json").is_file() {
        return Err(CliError::Domain(format!(
            "experiment {id} not found: no store at {}",
            a.store.display()
        )));
    }
    Ok(ExperimentStore::open(&a.store)?.load_bundle(id)?)
}

fn model<'b>(bundle: &'b AtlasBundle, a: &ExportArgs) -> Result<&'b ModelArtifacts> {
    let id = a
        .model
        .as_deref()
        .ok_or_else(|| CliError::Usage("this view needs --model <id>".into()))?;
    bundle
        .models
        .get(id)
        .ok_or_else(|| CliError::Domain(format!("model {id} not found in experiment {}", bundle.experiment_id)))
}

fn missing(what: &str, id: &str) -> CliError {
    CliError::Domain(format!("model {id} has no {what} (see the bundle's item errors)"))
}

type Rows = Vec<Vec<String>>;

fn global_table(bundle: &AtlasBundle) -> (Vec<String>, Rows) {
    let metrics: BTreeSet<&String> = bundle.graph.nodes.iter().flat_map(|n| n.metrics.keys()).collect();
    let k = bundle.graph.nodes.iter().map(|n| n.eigenvalues.len()).max().unwrap_or(0);
    let mut header: Vec<String> = ["model_id", "config_id", "x", "y"].map(String::from).to_vec();
    header.extend(metrics.iter().map(|m| m.to_string()));
    header.extend((1..=k).map(|i| format!("lambda_{i}")));
    let rows = bundle
        .graph
        .nodes
        .iter()
        .map(|n| {
            let mut row = vec![
                n.model_id.clone(),
                n.config_id.clone(),
                n.xy[0].to_string(),
                n.xy[1].to_string(),
            ];
            row.extend(metrics.iter().map(|m| n.metrics.get(*m).map_or(String::new(), f64::to_string)));
            row.extend((0..k).map(|i| n.eigenvalues.get(i).map_or(String::new(), f64::to_string)));
            row
        })
        .collect();
    (header, rows)
}

pub fn export(a: &ExportArgs) -> Result<()> {
    check_target(a.out.as_deref(), a.force)?;
    if a.view != View::Global && a.model.is_none() {
        return Err(CliError::Usage("the landscape and persistence views need --model <id>".into()));
    }
    let bundle = load(a)?;
    let (header, rows): (Vec<String>, Rows) = match a.view {
        View::Global => global_table(&bundle),
        View::Landscape => {
            let m = model(&bundle, a)?;
            let field = m.landscape.as_ref().ok_or_else(|| missing("landscape", &m.record.id))?;
            let (r, c) = (field.rows(), field.cols());
            let mut rows = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    rows.push(vec![
                        i.to_string(),
                        j.to_string(),
                        grid_coordinate(field.alpha_range, j, c).to_string(),
                        grid_coordinate(field.beta_range, i, r).to_string(),
                        field.get(i, j).map_or(String::new(), |v| v.to_string()),
                    ]);
                }
            }
            (["row", "col", "alpha", "beta", "loss"].map(String::from).to_vec(), rows)
        }
        View::Persistence => {
            let m = model(&bundle, a)?;
            let pairs = m.persistence.as_ref().ok_or_else(|| missing("persistence pairs", &m.record.id))?;
            let rows = pairs
                .iter()
                .map(|p| {
                    vec![
                        p.birth.to_string(),
                        p.death.to_string(),
                        p.persistence().to_string(),
                        p.cell_birth.0.to_string(),
                        p.cell_birth.1.to_string(),
                        p.cell_death.0.to_string(),
                        p.cell_death.1.to_string(),
                    ]
                })
                .collect();
            let header = ["birth", "death", "persistence", "birth_row", "birth_col", "death_row", "death_col"];
            (header.map(String::from).to_vec(), rows)
        }
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Domain(format!("cannot format CSV: {e}"));
    w.write_record(&header).map_err(fail)?;
    for row in &rows {
        w.write_record(row).map_err(fail)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Domain(format!("cannot format CSV: {e}")))?;
    write_bytes(a.out.as_deref(), &bytes)
}
