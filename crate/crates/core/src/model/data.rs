use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, seeded_stream};

/// Standard deviation of the noise every moons sample receives.
pub const MOONS_BASE_NOISE: f64 = 0.1;
/// Standard deviation of the extra noise added to corrupted samples.
pub const CORRUPTION_NOISE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        seed: u64,
        inputs: Array2<f64>,
        targets: Array2<f64>,
    ) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::EmptyInput("dataset has no rows".into()));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::Shape(format!(
                "{} input rows vs {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        Ok(Self {
            name: name.into(),
            seed,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Class index per row (argmax of the one-hot target).
    pub fn labels(&self) -> Vec<usize> {
        self.targets.rows().into_iter().map(|r| argmax(r.iter())).collect()
    }

    /// Rows `indices` as a new dataset.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            seed: self.seed,
            inputs: self.inputs.select(ndarray::Axis(0), indices),
            targets: self.targets.select(ndarray::Axis(0), indices),
        }
    }
}

pub(crate) fn argmax<'a>(xs: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &x) in xs.enumerate() {
        if x > best_val {
            best = i;
            best_val = x;
        }
    }
    best
}

/// Two interleaving half-moons with one-hot labels.
///
/// Rows alternate between the classes (class 0 on even rows), so the split is
/// exactly balanced for even `n`. Sample `k` of a class sits at angle
/// `pi * k / (count - 1)` and every input gets `N(0, 0.1^2)` noise. A
/// `corruption` fraction of the rows (chosen by a seeded shuffle on a
/// separate stream) receives additional `N(0, 0.5^2)` noise, so labels and
/// the uncorrupted rows do not depend on `corruption`.
pub fn make_toy_classification(seed: u64, n: usize, corruption: f64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::Precondition(format!(
            "toy classification needs n >= 4, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&corruption) {
        return Err(Error::Precondition(format!(
            "corruption must lie in [0, 1], got {corruption}"
        )));
    }
    let base = Normal::new(0.0, MOONS_BASE_NOISE).expect("valid sigma");
    let extra = Normal::new(0.0, CORRUPTION_NOISE).expect("valid sigma");
    let mut rng = seeded(seed);

    let counts = [n.div_ceil(2), n / 2];
    let mut inputs = Array2::zeros((n, 2));
    let mut targets = Array2::zeros((n, 2));
    let mut seen = [0usize; 2];
    for i in 0..n {
        let class = i % 2;
        let k = seen[class];
        seen[class] += 1;
        let denom = (counts[class].max(2) - 1) as f64;
        let angle = std::f64::consts::PI * k as f64 / denom;
        let (x, y) = if class == 0 {
            (angle.cos(), angle.sin())
        } else {
            (1.0 - angle.cos(), 0.5 - angle.sin())
        };
        inputs[[i, 0]] = x + base.sample(&mut rng);
        inputs[[i, 1]] = y + base.sample(&mut rng);
        targets[[i, class]] = 1.0;
    }

    let n_corrupt = (corruption * n as f64).round() as usize;
    if n_corrupt > 0 {
        let mut noise_rng = seeded_stream(seed, 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut noise_rng);
        let mut chosen = order[..n_corrupt].to_vec();
        chosen.sort_unstable();
        for i in chosen {
            inputs[[i, 0]] += extra.sample(&mut noise_rng);
            inputs[[i, 1]] += extra.sample(&mut noise_rng);
        }
    }

    Dataset::new(
        format!("moons(seed={seed},n={n},corruption={corruption})"),
        seed,
        inputs,
        targets,
    )
}

/// Uniform regression data `y = x A + b` with small noise, used for
/// convex sanity checks.
pub fn make_linear_regression(
    seed: u64,
    n: usize,
    coefficients: &Array2<f64>,
    intercept: &[f64],
    noise: f64,
) -> Result<Dataset> {
    let (p, q) = coefficients.dim();
    if intercept.len() != q {
        return Err(Error::Shape("intercept width mismatch".into()));
    }
    let mut rng = seeded(seed);
    let inputs = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
    let mut targets = inputs.dot(coefficients);
    let gauss = Normal::new(0.0, 1.0).expect("valid sigma");
    for mut row in targets.rows_mut() {
        for (t, b) in row.iter_mut().zip(intercept) {
            *t += b + noise * gauss.sample(&mut rng);
        }
    }
    Dataset::new(format!("linear(seed={seed},n={n})"), seed, inputs, targets)
}
