//! Linear centered kernel alignment between feature maps.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{hidden_features, BnState, NetworkSpec, ParamVector};
use crate::rng::seeded_stream;

pub const DEFAULT_PROBE_COUNT: usize = 512;

/// Features of `m` probe inputs at one hidden layer, one row per probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub layer_index: usize,
    pub model_id: String,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>, layer_index: usize, model_id: impl Into<String>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::Shape(format!(
                "feature matrix needs at least 2 rows, got {}",
                values.nrows()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::eval("feature matrix", "non-finite feature"));
        }
        Ok(Self {
            values,
            layer_index,
            model_id: model_id.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaResult {
    /// Similarity of the last hidden layers.
    pub scalar: f64,
    pub layer_matrix: Option<Vec<Vec<f64>>>,
    /// Some compared feature map had zero variance; its entries are 0.
    #[serde(default)]
    pub degenerate: bool,
}

/// `count` probe rows drawn from `inputs` by a seeded permutation, cycling
/// when `count` exceeds the number of rows.
pub fn probe_inputs(inputs: &Array2<f64>, count: usize, seed: u64) -> Result<Array2<f64>> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("no rows to draw probes from".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_stream(seed, 13));
    let rows: Vec<usize> = (0..count).map(|i| order[i % n]).collect();
    Ok(inputs.select(Axis(0), &rows))
}

/// Post-activation features of hidden layer `layer_index` (0-based) in eval
/// mode.
pub fn feature_matrix(
    spec: &NetworkSpec,
    params: &ParamVector,
    state: &BnState,
    probes: &Array2<f64>,
    layer_index: usize,
) -> Result<FeatureMatrix> {
    if layer_index >= spec.num_hidden() {
        return Err(Error::Range(format!(
            "hidden layer {layer_index} out of range, network has {}",
            spec.num_hidden()
        )));
    }
    let mut all = hidden_features(spec, params, state, probes)?;
    FeatureMatrix::new(all.swap_remove(layer_index), layer_index, "")
}

fn centered_gram(f: &Array2<f64>) -> Array2<f64> {
    let mut k = f.dot(&f.t());
    let m = k.nrows();
    let row_means = k.mean_axis(Axis(1)).expect("nonempty");
    let total = row_means.sum() / m as f64;
    for i in 0..m {
        for j in 0..m {
            k[[i, j]] += total - row_means[i] - row_means[j];
        }
    }
    k
}

fn hsic(kc: &Array2<f64>, lc: &Array2<f64>) -> f64 {
    let m = kc.nrows() as f64;
    let s: f64 = kc.iter().zip(lc.iter()).map(|(a, b)| a * b).sum();
    s / ((m - 1.0) * (m - 1.0))
}

/// Linear CKA with its degeneracy flag.
///
/// `Cov(X, Y) = tr(X X^T H Y Y^T H) / (m-1)^2` with the centering matrix
/// `H = I - 11^T / m`, and `cka = Cov(F, G) / sqrt(Cov(F, F) Cov(G, G))`.
/// A zero-variance input gives 0 and sets the flag.
pub fn cka_with_flag(f: &FeatureMatrix, g: &FeatureMatrix) -> Result<(f64, bool)> {
    let (mf, mg) = (f.values.nrows(), g.values.nrows());
    if mf != mg {
        return Err(Error::Shape(format!(
            "feature matrices have {mf} and {mg} rows"
        )));
    }
    let kc = centered_gram(&f.values);
    let lc = centered_gram(&g.values);
    let ff = hsic(&kc, &kc);
    let gg = hsic(&lc, &lc);
    let scale = |k: &Array2<f64>| k.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let zero = |v: f64, k: &Array2<f64>| v <= 1e-24 * scale(k).powi(2).max(f64::MIN_POSITIVE);
    if zero(ff, &kc) || zero(gg, &lc) {
        tracing::warn!("zero-variance features, CKA defined as 0");
        return Ok((0.0, true));
    }
    Ok((hsic(&kc, &lc) / (ff * gg).sqrt(), false))
}

pub fn cka(f: &FeatureMatrix, g: &FeatureMatrix) -> Result<f64> {
    Ok(cka_with_flag(f, g)?.0)
}

/// CKA between every hidden layer of model A (rows) and model B (columns)
/// on shared probes. The scalar is the last-layer pair.
pub fn cka_layerwise(
    spec_a: &NetworkSpec,
    params_a: &ParamVector,
    state_a: &BnState,
    spec_b: &NetworkSpec,
    params_b: &ParamVector,
    state_b: &BnState,
    probes: &Array2<f64>,
) -> Result<CkaResult> {
    let fa = hidden_features(spec_a, params_a, state_a, probes)?;
    let fb = hidden_features(spec_b, params_b, state_b, probes)?;
    if fa.is_empty() || fb.is_empty() {
        return Err(Error::Range("CKA needs at least one hidden layer".into()));
    }
    let wrap = |v: Vec<Array2<f64>>| -> Result<Vec<FeatureMatrix>> {
        v.into_iter()
            .enumerate()
            .map(|(i, x)| FeatureMatrix::new(x, i, ""))
            .collect()
    };
    let (fa, fb) = (wrap(fa)?, wrap(fb)?);
    let mut degenerate = false;
    let mut matrix = vec![vec![0.0; fb.len()]; fa.len()];
    for (i, a) in fa.iter().enumerate() {
        for (j, b) in fb.iter().enumerate() {
            let (v, d) = cka_with_flag(a, b)?;
            matrix[i][j] = v;
            degenerate |= d;
        }
    }
    Ok(CkaResult {
        scalar: matrix[fa.len() - 1][fb.len() - 1],
        layer_matrix: Some(matrix),
        degenerate,
    })
}
