//! Two-dimensional loss slices around a trained model.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Objective;
use crate::error::{Error, Result};
use crate::model::loss::dataset_loss;
use crate::model::{
    forward, BnState, Dataset, LossKind, Mode, NetworkSpec, Normalization, ParamVector, PinnPoints,
    PinnProblem, Role,
};
use crate::rng::seeded;

pub const DEFAULT_RESOLUTION: usize = 21;
pub const DEFAULT_WARMUP_BATCHES: usize = 5;
/// Rows per BatchNorm warm-up pass.
pub const WARMUP_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionNorm {
    #[default]
    Filter,
    None,
}

/// Loss values on a regular `(alpha, beta)` grid.
///
/// `values[i][j]` is the loss at `alpha_j` (column, along `dir1`) and
/// `beta_i` (row, along `dir2`); masked cells are `None`. Only `values` is
/// required when a field is read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField2D {
    pub values: Vec<Vec<Option<f64>>>,
    #[serde(default = "unit_range")]
    pub alpha_range: (f64, f64),
    #[serde(default = "unit_range")]
    pub beta_range: (f64, f64),
    #[serde(default)]
    pub resolution: usize,
    #[serde(default)]
    pub center_id: Option<String>,
    #[serde(default)]
    pub direction_seed: Option<u64>,
    #[serde(default)]
    pub dir1: Option<ParamVector>,
    #[serde(default)]
    pub dir2: Option<ParamVector>,
    #[serde(default)]
    pub normalization: DirectionNorm,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn unit_range() -> (f64, f64) {
    (-1.0, 1.0)
}

impl ScalarField2D {
    /// Bare field from a value grid, e.g. for topology tests.
    pub fn from_values(values: Vec<Vec<f64>>) -> Self {
        let resolution = values.len();
        Self {
            values: values
                .into_iter()
                .map(|row| row.into_iter().map(Some).collect())
                .collect(),
            alpha_range: unit_range(),
            beta_range: unit_range(),
            resolution,
            center_id: None,
            direction_seed: None,
            dir1: None,
            dir2: None,
            normalization: DirectionNorm::None,
            warnings: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row][col]
    }

    pub fn validate(&self) -> Result<()> {
        let cols = self.cols();
        if self.values.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("field rows have different lengths".into()));
        }
        if self
            .values
            .iter()
            .flatten()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Shape("field contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn finite_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().filter_map(|v| *v)
    }

    /// `f` applied to every unmasked cell.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for v in out.values.iter_mut().flatten().flatten() {
            *v = f(*v);
        }
        out
    }
}

/// Grid coordinate `i` of `r` evenly spaced samples over `[lo, hi]`.
pub fn grid_coordinate(range: (f64, f64), i: usize, r: usize) -> f64 {
    if i == (r - 1) / 2 && r % 2 == 1 && range.0 == -range.1 {
        return 0.0;
    }
    range.0 + (range.1 - range.0) * i as f64 / (r - 1) as f64
}

/// Filter blocks of a parameter vector as lists of flat indices: one block
/// per output neuron of every weight segment (the neuron's fan-in, a column
/// of the `(fan_in, fan_out)` matrix) and one block per bias or BatchNorm
/// segment.
pub fn filter_blocks(params: &ParamVector) -> Vec<Vec<usize>> {
    let mut blocks = Vec::new();
    for (seg, start) in params.segments() {
        match seg.role {
            Role::Weight => {
                let (fan_in, fan_out) = seg.shape;
                for j in 0..fan_out {
                    blocks.push((0..fan_in).map(|i| start + i * fan_out + j).collect());
                }
            }
            Role::Bias | Role::BnGamma | Role::BnBeta => {
                blocks.push((start..start + seg.len()).collect());
            }
        }
    }
    blocks
}

/// Rescale every filter block of `direction` to the norm of the matching
/// block of `center`. Blocks whose center norm is zero become zero.
pub fn filter_normalize(direction: &mut ParamVector, center: &ParamVector) {
    for block in filter_blocks(center) {
        let cn: f64 = block.iter().map(|&i| center.values[i].powi(2)).sum::<f64>().sqrt();
        let dn: f64 = block.iter().map(|&i| direction.values[i].powi(2)).sum::<f64>().sqrt();
        let factor = if cn == 0.0 || dn == 0.0 { 0.0 } else { cn / dn };
        for &i in &block {
            direction.values[i] *= factor;
        }
    }
}

/// Two Gaussian directions with the layout of `params`, drawn from `seed`
/// (first `dir1`, then `dir2`) and filter-normalized against `params`.
pub fn random_directions(params: &ParamVector, seed: u64) -> (ParamVector, ParamVector) {
    random_directions_with(params, seed, DirectionNorm::Filter)
}

pub fn random_directions_with(
    params: &ParamVector,
    seed: u64,
    normalization: DirectionNorm,
) -> (ParamVector, ParamVector) {
    let mut rng = seeded(seed);
    let n = params.len();
    let mut d1 = params.with_values((0..n).map(|_| StandardNormal.sample(&mut rng)).collect());
    let mut d2 = params.with_values((0..n).map(|_| StandardNormal.sample(&mut rng)).collect());
    if normalization == DirectionNorm::Filter {
        filter_normalize(&mut d1, params);
        filter_normalize(&mut d2, params);
    }
    (d1, d2)
}

/// What the slice evaluates.
#[derive(Clone, Copy)]
pub enum SliceTarget<'a> {
    /// Eval-mode dataset loss. With BatchNorm each grid point starts from
    /// `bn_state` and runs `warmup_batches` train-mode passes that only
    /// refresh running statistics before the eval-mode loss.
    Supervised {
        spec: &'a NetworkSpec,
        dataset: &'a Dataset,
        kind: LossKind,
        bn_state: &'a BnState,
        warmup_batches: usize,
    },
    Pinn {
        spec: &'a NetworkSpec,
        problem: &'a PinnProblem,
        points: &'a PinnPoints,
    },
    Objective(&'a dyn Objective),
}

impl SliceTarget<'_> {
    pub fn evaluate(&self, params: &ParamVector) -> Result<f64> {
        match *self {
            SliceTarget::Supervised {
                spec,
                dataset,
                kind,
                bn_state,
                warmup_batches,
            } => {
                if spec.batchnorm && warmup_batches > 0 {
                    let state = warm_up(spec, params, dataset, bn_state, warmup_batches)?;
                    dataset_loss(spec, params, Normalization::Running(&state), dataset, kind)
                } else {
                    dataset_loss(spec, params, Normalization::Running(bn_state), dataset, kind)
                }
            }
            SliceTarget::Pinn {
                spec,
                problem,
                points,
            } => Ok(crate::model::pinn_loss(spec, params, problem, points)?.total),
            SliceTarget::Objective(obj) => obj.loss(params),
        }
    }
}

/// Refresh BatchNorm running statistics with the weights held fixed.
pub fn warm_up(
    spec: &NetworkSpec,
    params: &ParamVector,
    dataset: &Dataset,
    start: &BnState,
    batches: usize,
) -> Result<BnState> {
    let mut state = start.clone();
    let n = dataset.len();
    let size = WARMUP_BATCH_SIZE.min(n).max(1);
    let chunks = n.div_ceil(size);
    for b in 0..batches {
        let lo = (b % chunks) * size;
        let hi = (lo + size).min(n);
        let rows: Vec<usize> = (lo..hi).collect();
        if rows.len() < 2 {
            continue;
        }
        let batch = dataset.inputs.select(ndarray::Axis(0), &rows);
        forward(spec, params, &mut state, &batch, Mode::Train)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceConfig {
    pub resolution: usize,
    pub seed: u64,
    #[serde(default = "unit_range")]
    pub alpha_range: (f64, f64),
    #[serde(default = "unit_range")]
    pub beta_range: (f64, f64),
    #[serde(default)]
    pub normalization: DirectionNorm,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            seed: 0,
            alpha_range: unit_range(),
            beta_range: unit_range(),
            normalization: DirectionNorm::Filter,
        }
    }
}

/// Loss on `center + alpha * dir1 + beta * dir2` over the grid.
///
/// Cells are evaluated independently in parallel and gathered in row-major
/// order. A cell whose evaluation fails with a numerical error is masked and
/// a warning recorded; any other error aborts.
pub fn loss_surface(
    target: &SliceTarget<'_>,
    center: &ParamVector,
    config: &SurfaceConfig,
) -> Result<ScalarField2D> {
    let r = config.resolution;
    if r < 5 || r.is_multiple_of(2) {
        return Err(Error::Precondition(format!(
            "resolution must be odd and >= 5, got {r}"
        )));
    }
    let (dir1, dir2) = random_directions_with(center, config.seed, config.normalization);
    let cells: Vec<Result<Option<f64>>> = (0..r * r)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / r, idx % r);
            let a = grid_coordinate(config.alpha_range, j, r);
            let b = grid_coordinate(config.beta_range, i, r);
            let point = center
                .values
                .iter()
                .zip(&dir1.values)
                .zip(&dir2.values)
                .map(|((c, d1), d2)| c + a * d1 + b * d2)
                .collect();
            match target.evaluate(&center.with_values(point)) {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                Ok(_) | Err(Error::Evaluation { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut values = vec![vec![None; r]; r];
    let mut warnings = Vec::new();
    for (idx, cell) in cells.into_iter().enumerate() {
        let (i, j) = (idx / r, idx % r);
        let v = cell?;
        if v.is_none() {
            let msg = format!("masked cell ({i}, {j}): non-finite loss");
            tracing::warn!("{msg}");
            warnings.push(msg);
        }
        values[i][j] = v;
    }

    Ok(ScalarField2D {
        values,
        alpha_range: config.alpha_range,
        beta_range: config.beta_range,
        resolution: r,
        center_id: None,
        direction_seed: Some(config.seed),
        dir1: Some(dir1),
        dir2: Some(dir2),
        normalization: config.normalization,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Quadratic, Scaled};
    use crate::model::{build_network, make_toy_classification, train, Activation, OutputHead, TrainConfig, TrainingData};
    use ndarray::Array2;

    #[test]
    fn twenty_intervals_give_twenty_one_samples() {
        let r = DEFAULT_RESOLUTION;
        let xs: Vec<f64> = (0..r).map(|i| grid_coordinate((-1.0, 1.0), i, r)).collect();
        assert_eq!(xs.len(), 21);
        assert_eq!(xs[0], -1.0);
        assert_eq!(xs[10], 0.0);
        assert_eq!(xs[20], 1.0);
        assert!((xs[1] - xs[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn filter_norms_match_center() {
        let spec = crate::model::NetworkSpec::mlp(&[3, 7, 5, 2], Activation::Relu, OutputHead::Classification)
            .with_batchnorm(true);
        let p = build_network(&spec, 3).unwrap();
        let (d1, d2) = random_directions(&p, 11);
        for block in filter_blocks(&p) {
            let c: f64 = block.iter().map(|&i| p.values[i].powi(2)).sum::<f64>().sqrt();
            for d in [&d1, &d2] {
                let n: f64 = block.iter().map(|&i| d.values[i].powi(2)).sum::<f64>().sqrt();
                assert!((n - c).abs() <= 1e-12, "{n} vs {c}");
            }
        }
    }

    #[test]
    fn zero_center_filter_gives_zero_direction() {
        let spec = crate::model::NetworkSpec::mlp(&[2, 3, 1], Activation::Tanh, OutputHead::Regression);
        let mut p = build_network(&spec, 0).unwrap();
        // Zero the fan-in of hidden neuron 1 (column 1 of the 2x3 weight).
        p.values[1] = 0.0;
        p.values[4] = 0.0;
        let (d1, _) = random_directions(&p, 5);
        assert_eq!(d1.values[1], 0.0);
        assert_eq!(d1.values[4], 0.0);
        assert_ne!(d1.values[0], 0.0);
    }

    #[test]
    fn seeds_give_different_directions_same_layout() {
        let p = ParamVector::flat((0..20).map(|i| i as f64 * 0.1 + 0.05).collect());
        let (a, _) = random_directions(&p, 4);
        let (b, _) = random_directions(&p, 5);
        assert_eq!(a.layout, b.layout);
        assert_ne!(a.values, b.values);
    }

    #[test]
    fn quadratic_slice_is_centered_paraboloid() {
        let n = 6;
        let diag = [4.0, 1.0, 2.0, 3.0, 0.5, 1.5];
        let q = Quadratic::new(Array2::from_shape_fn((n, n), |(i, j)| if i == j { diag[i] } else { 0.0 }))
            .unwrap();
        let center = ParamVector::flat(vec![0.0; n]);
        // Directions along the first two eigenvectors via a tiny wrapper field.
        let d1 = ParamVector::flat(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let d2 = ParamVector::flat(vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let r = 9;
        for i in 0..r {
            for j in 0..r {
                let a = grid_coordinate((-1.0, 1.0), j, r);
                let b = grid_coordinate((-1.0, 1.0), i, r);
                let p = center.axpy(a, &d1).axpy(b, &d2);
                let v = SliceTarget::Objective(&q).evaluate(&p).unwrap();
                assert!((v - 0.5 * (4.0 * a * a + b * b)).abs() < 1e-14);
            }
        }

        let field = loss_surface(
            &SliceTarget::Objective(&q),
            &ParamVector::flat(vec![0.3, -0.2, 0.1, 0.4, -0.5, 0.25]),
            &SurfaceConfig {
                resolution: 11,
                seed: 2,
                normalization: DirectionNorm::None,
                ..SurfaceConfig::default()
            },
        )
        .unwrap();
        // The closed form along the drawn directions: 0.5 (c + a d1 + b d2)^T A (...).
        let d1 = field.dir1.clone().unwrap();
        let d2 = field.dir2.clone().unwrap();
        let c = [0.3, -0.2, 0.1, 0.4, -0.5, 0.25];
        for i in 0..11 {
            for j in 0..11 {
                let a = grid_coordinate((-1.0, 1.0), j, 11);
                let b = grid_coordinate((-1.0, 1.0), i, 11);
                let expect: f64 = (0..n)
                    .map(|k| 0.5 * diag[k] * (c[k] + a * d1.values[k] + b * d2.values[k]).powi(2))
                    .sum();
                let got = field.get(i, j).unwrap();
                assert!((got - expect).abs() <= 1e-12 * (1.0 + expect));
            }
        }
    }

    #[test]
    fn minimum_at_center_for_convex_quadratic() {
        let n = 8;
        let q = Quadratic::new(Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 + i as f64 } else { 0.0 }))
            .unwrap();
        let center = ParamVector::flat(vec![0.0; n]);
        let field = loss_surface(
            &SliceTarget::Objective(&q),
            &center,
            &SurfaceConfig {
                resolution: 7,
                normalization: DirectionNorm::None,
                ..SurfaceConfig::default()
            },
        )
        .unwrap();
        let min = field.finite_values().fold(f64::INFINITY, f64::min);
        assert_eq!(field.get(3, 3).unwrap(), min);
        assert_eq!(min, 0.0);
    }

    #[test]
    fn scaling_loss_scales_field_and_keeps_argmin() {
        let q = Quadratic::new(Array2::from_shape_fn((5, 5), |(i, j)| if i == j { 2.0 } else { 0.3 }))
            .unwrap();
        let center = ParamVector::flat(vec![0.5, -0.3, 0.2, 0.1, -0.4]);
        let cfg = SurfaceConfig {
            resolution: 9,
            seed: 3,
            ..SurfaceConfig::default()
        };
        let base = loss_surface(&SliceTarget::Objective(&q), &center, &cfg).unwrap();
        let scaled_obj = Scaled { inner: q.clone(), factor: 4.0 };
        let scaled = loss_surface(&SliceTarget::Objective(&scaled_obj), &center, &cfg).unwrap();
        let argmin = |f: &ScalarField2D| {
            let mut best = (0, 0, f64::INFINITY);
            for i in 0..f.rows() {
                for j in 0..f.cols() {
                    let v = f.get(i, j).unwrap();
                    if v < best.2 {
                        best = (i, j, v);
                    }
                }
            }
            (best.0, best.1)
        };
        for (a, b) in base.finite_values().zip(scaled.finite_values()) {
            assert!((b - 4.0 * a).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert_eq!(argmin(&base), argmin(&scaled));
    }

    #[test]
    fn rejects_even_or_small_resolution() {
        let q = Quadratic::new(Array2::eye(2)).unwrap();
        let p = ParamVector::flat(vec![1.0, 1.0]);
        for r in [3, 6] {
            let cfg = SurfaceConfig {
                resolution: r,
                ..SurfaceConfig::default()
            };
            assert!(matches!(
                loss_surface(&SliceTarget::Objective(&q), &p, &cfg),
                Err(Error::Precondition(_))
            ));
        }
    }

    #[test]
    fn center_cell_is_eval_loss_with_and_without_batchnorm() {
        let d = make_toy_classification(4, 64, 0.0).unwrap();
        for bn in [false, true] {
            let spec = crate::model::NetworkSpec::mlp(&[2, 8, 8, 2], Activation::Relu, OutputHead::Classification)
                .with_batchnorm(bn);
            let rec = train("m", "c", &spec, 1, TrainingData::Supervised(&d), &TrainConfig::sgd(0.05, 3, 16)).unwrap();
            let target = SliceTarget::Supervised {
                spec: &spec,
                dataset: &d,
                kind: LossKind::CrossEntropy,
                bn_state: &rec.bn_state,
                warmup_batches: 0,
            };
            let field = loss_surface(&target, &rec.params, &SurfaceConfig::default()).unwrap();
            let center = crate::model::loss(&spec, &rec.params, &rec.bn_state, &d, LossKind::CrossEntropy).unwrap();
            assert!((field.get(10, 10).unwrap() - center).abs() <= 1e-10);
            assert_eq!(field.rows(), 21);
            assert_eq!(field.cols(), 21);
        }
    }

    #[test]
    fn warm_up_changes_only_batchnorm_statistics() {
        let d = make_toy_classification(4, 64, 0.0).unwrap();
        let spec = crate::model::NetworkSpec::mlp(&[2, 8, 2], Activation::Relu, OutputHead::Classification)
            .with_batchnorm(true);
        let p = build_network(&spec, 2).unwrap();
        let start = BnState::new(&spec);
        let warmed = warm_up(&spec, &p, &d, &start, 5).unwrap();
        assert_ne!(warmed, start);
        let again = warm_up(&spec, &p, &d, &start, 5).unwrap();
        assert_eq!(warmed, again);
        let target = SliceTarget::Supervised {
            spec: &spec,
            dataset: &d,
            kind: LossKind::CrossEntropy,
            bn_state: &start,
            warmup_batches: 5,
        };
        let with = target.evaluate(&p).unwrap();
        let direct = crate::model::loss(&spec, &p, &warmed, &d, LossKind::CrossEntropy).unwrap();
        assert_eq!(with, direct);
    }

    #[test]
    fn nan_cells_are_masked() {
        struct Blowup;
        impl Objective for Blowup {
            fn loss(&self, p: &ParamVector) -> Result<f64> {
                Ok(if p.values[0] > 0.5 { f64::NAN } else { p.values[0] })
            }
            fn value_and_grad(&self, _: &ParamVector) -> Result<crate::autodiff::GradientResult> {
                unreachable!()
            }
        }
        let field = loss_surface(
            &SliceTarget::Objective(&Blowup),
            &ParamVector::flat(vec![0.0, 0.0]),
            &SurfaceConfig {
                resolution: 5,
                normalization: DirectionNorm::None,
                ..SurfaceConfig::default()
            },
        )
        .unwrap();
        assert!(field.values.iter().flatten().any(Option::is_none));
        assert!(!field.warnings.is_empty());
        assert!(field.get(2, 2).is_some());
    }
}
