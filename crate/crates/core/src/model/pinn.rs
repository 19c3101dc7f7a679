//! One-dimensional convection `u_t + beta u_x = 0` on `x in [0, 2pi]`,
//! `t in [0, T]`, with `u(x, 0) = sin(x)` and periodic boundaries. The exact
//! solution is `u(x, t) = sin(x - beta t)`.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{forward_graph, BnState, Normalization, ParamVars};
use super::params::ParamVector;
use super::spec::NetworkSpec;
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const X_MAX: f64 = 2.0 * PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnProblem {
    pub beta: f64,
    pub n_u: usize,
    pub n_f: usize,
    pub n_b: usize,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    /// Per-collocation-point residual weights; `None` means all ones.
    #[serde(default)]
    pub residual_weights: Option<Vec<f64>>,
}

fn default_t_max() -> f64 {
    1.0
}

impl PinnProblem {
    pub fn new(beta: f64, n_u: usize, n_f: usize, n_b: usize) -> Self {
        Self {
            beta,
            n_u,
            n_f,
            n_b,
            t_max: 1.0,
            residual_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.n_u == 0 || self.n_f == 0 || self.n_b == 0 {
            return Err(Error::Config("n_u, n_f and n_b must all be >= 1".into()));
        }
        if self.t_max.is_nan() || self.t_max <= 0.0 {
            return Err(Error::Config("t_max must be > 0".into()));
        }
        if let Some(w) = &self.residual_weights {
            if w.len() != self.n_f {
                return Err(Error::Config(format!(
                    "{} residual weights for {} collocation points",
                    w.len(),
                    self.n_f
                )));
            }
        }
        Ok(())
    }

    pub fn initial_condition(x: f64) -> f64 {
        x.sin()
    }

    pub fn exact(&self, x: f64, t: f64) -> f64 {
        (x - self.beta * t).sin()
    }
}

/// Sampled training points for a [`PinnProblem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnPoints {
    /// `n_u x 2` rows `(x, 0)`.
    pub initial: Array2<f64>,
    /// `u_0 = h(x)` at the initial points.
    pub initial_values: Array2<f64>,
    /// `n_f x 2` interior rows `(x, t)`.
    pub collocation: Array2<f64>,
    pub residual_weights: Array2<f64>,
    /// `n_b x 2` rows `(0, t)` and `(2pi, t)` for the same `t`.
    pub boundary_left: Array2<f64>,
    pub boundary_right: Array2<f64>,
}

impl PinnPoints {
    /// Uniform random points from a seeded stream: initial `x`, then
    /// collocation `(x, t)` pairs, then boundary `t`.
    pub fn sample(problem: &PinnProblem, seed: u64) -> Result<Self> {
        problem.validate()?;
        let mut rng = seeded(seed);
        let initial_x: Vec<f64> = (0..problem.n_u).map(|_| rng.random_range(0.0..X_MAX)).collect();
        let initial = Array2::from_shape_fn((problem.n_u, 2), |(i, j)| {
            if j == 0 {
                initial_x[i]
            } else {
                0.0
            }
        });
        let initial_values = Array2::from_shape_fn((problem.n_u, 1), |(i, _)| {
            PinnProblem::initial_condition(initial_x[i])
        });
        let mut collocation = Array2::zeros((problem.n_f, 2));
        for mut row in collocation.rows_mut() {
            row[0] = rng.random_range(0.0..X_MAX);
            row[1] = rng.random_range(0.0..problem.t_max);
        }
        let ts: Vec<f64> = (0..problem.n_b)
            .map(|_| rng.random_range(0.0..problem.t_max))
            .collect();
        let boundary_left = Array2::from_shape_fn((problem.n_b, 2), |(i, j)| if j == 0 { 0.0 } else { ts[i] });
        let boundary_right =
            Array2::from_shape_fn((problem.n_b, 2), |(i, j)| if j == 0 { X_MAX } else { ts[i] });
        let residual_weights = match &problem.residual_weights {
            Some(w) => Array2::from_shape_vec((problem.n_f, 1), w.clone()).expect("validated"),
            None => Array2::ones((problem.n_f, 1)),
        };
        Ok(Self {
            initial,
            initial_values,
            collocation,
            residual_weights,
            boundary_left,
            boundary_right,
        })
    }

    pub fn with_residual_weights(mut self, weights: Array2<f64>) -> Self {
        self.residual_weights = weights;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinnLoss {
    pub total: f64,
    pub initial: f64,
    pub residual: f64,
    pub boundary: f64,
}

pub(crate) struct PinnNodes {
    pub total: Var,
    pub initial: Var,
    pub residual: Var,
    pub boundary: Var,
}

fn check_pinn_spec(spec: &NetworkSpec) -> Result<()> {
    if spec.input_dim() != 2 || spec.output_dim() != 1 {
        return Err(Error::Config(format!(
            "PINN networks map (x, t) to u: need widths [2, .., 1], got {:?}",
            spec.layer_widths
        )));
    }
    if spec.batchnorm {
        return Err(Error::Config("PINN networks cannot use BatchNorm".into()));
    }
    Ok(())
}

/// Record the three loss terms and their sum on the tape.
pub(crate) fn pinn_nodes(
    tape: &mut Tape,
    spec: &NetworkSpec,
    vars: &ParamVars,
    problem: &PinnProblem,
    points: &PinnPoints,
) -> Result<PinnNodes> {
    check_pinn_spec(spec)?;
    let empty = BnState::default();
    let norm = Normalization::Running(&empty);

    let x0 = tape.leaf(points.initial.clone());
    let u0 = forward_graph(tape, spec, vars, x0, norm, &[])?.output;
    let target = tape.leaf(points.initial_values.clone());
    let d0 = tape.sub(u0, target);
    let sq0 = tape.square(d0);
    let initial = tape.mean(sq0);

    let n_f = points.collocation.nrows();
    let xf = tape.leaf(points.collocation.clone());
    let ex = tape.leaf(unit_columns(n_f, 0));
    let et = tape.leaf(unit_columns(n_f, 1));
    let g = forward_graph(tape, spec, vars, xf, norm, &[ex, et])?;
    let (du_dx, du_dt) = (g.tangents[0], g.tangents[1]);
    let adv = tape.affine(du_dx, problem.beta, 0.0);
    let r = tape.add(du_dt, adv);
    let r2 = tape.square(r);
    let weighted = tape.mul_const(r2, points.residual_weights.clone());
    let residual = tape.mean(weighted);

    let xl = tape.leaf(points.boundary_left.clone());
    let ul = forward_graph(tape, spec, vars, xl, norm, &[])?.output;
    let xr = tape.leaf(points.boundary_right.clone());
    let ur = forward_graph(tape, spec, vars, xr, norm, &[])?.output;
    let db = tape.sub(ul, ur);
    let sqb = tape.square(db);
    let boundary = tape.mean(sqb);

    let s = tape.add(initial, residual);
    let total = tape.add(s, boundary);
    Ok(PinnNodes {
        total,
        initial,
        residual,
        boundary,
    })
}

pub(crate) fn unit_columns(rows: usize, col: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, 2), |(_, j)| if j == col { 1.0 } else { 0.0 })
}

/// Soft-constrained PINN loss: initial-condition MSE, weighted mean squared
/// PDE residual (input derivatives by forward tangents) and the periodic
/// boundary mismatch `u(0, t) - u(2pi, t)`.
pub fn pinn_loss(
    spec: &NetworkSpec,
    params: &ParamVector,
    problem: &PinnProblem,
    points: &PinnPoints,
) -> Result<PinnLoss> {
    super::loss::ensure_finite_params(params)?;
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, spec, params)?;
    let nodes = pinn_nodes(&mut tape, spec, &vars, problem, points)?;
    let out = PinnLoss {
        total: tape.scalar(nodes.total),
        initial: tape.scalar(nodes.initial),
        residual: tape.scalar(nodes.residual),
        boundary: tape.scalar(nodes.boundary),
    };
    if !out.total.is_finite() {
        return Err(Error::eval("pinn loss", format!("non-finite loss {}", out.total)));
    }
    Ok(out)
}

/// The same three terms for an arbitrary candidate solution given as
/// `(x, t) -> (u, u_x, u_t)`.
pub fn pinn_loss_for_function(
    problem: &PinnProblem,
    points: &PinnPoints,
    u: impl Fn(f64, f64) -> (f64, f64, f64),
) -> PinnLoss {
    let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| xs.sum::<f64>() / n as f64;
    let n_u = points.initial.nrows();
    let initial = mean(
        &mut points
            .initial
            .rows()
            .into_iter()
            .zip(points.initial_values.iter())
            .map(|(r, u0)| (u(r[0], r[1]).0 - u0).powi(2)),
        n_u,
    );
    let n_f = points.collocation.nrows();
    let residual = mean(
        &mut points
            .collocation
            .rows()
            .into_iter()
            .zip(points.residual_weights.iter())
            .map(|(r, w)| {
                let (_, ux, ut) = u(r[0], r[1]);
                w * (ut + problem.beta * ux).powi(2)
            }),
        n_f,
    );
    let n_b = points.boundary_left.nrows();
    let boundary = mean(
        &mut points
            .boundary_left
            .rows()
            .into_iter()
            .zip(points.boundary_right.rows())
            .map(|(l, r)| (u(l[0], l[1]).0 - u(r[0], r[1]).0).powi(2)),
        n_b,
    );
    PinnLoss {
        total: initial + residual + boundary,
        initial,
        residual,
        boundary,
    }
}

/// Points of the fixed evaluation grid: `nx` x-values and `nt` t-values,
/// endpoints included.
pub fn evaluation_grid(problem: &PinnProblem, nx: usize, nt: usize) -> Array2<f64> {
    let mut grid = Array2::zeros((nx * nt, 2));
    for i in 0..nx {
        for j in 0..nt {
            let row = i * nt + j;
            grid[[row, 0]] = X_MAX * i as f64 / (nx - 1) as f64;
            grid[[row, 1]] = problem.t_max * j as f64 / (nt - 1) as f64;
        }
    }
    grid
}

pub const EVAL_GRID_NX: usize = 101;
pub const EVAL_GRID_NT: usize = 101;

/// `||u_hat - u||_2 / ||u||_2` on the 101 x 101 evaluation grid.
pub fn relative_l2_error(
    spec: &NetworkSpec,
    params: &ParamVector,
    problem: &PinnProblem,
) -> Result<f64> {
    let grid = evaluation_grid(problem, EVAL_GRID_NX, EVAL_GRID_NT);
    let pred = super::network::predict(spec, params, &BnState::default(), &grid)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (row, p) in grid.rows().into_iter().zip(pred.iter()) {
        let exact = problem.exact(row[0], row[1]);
        num += (p - exact).powi(2);
        den += exact * exact;
    }
    Ok((num / den).sqrt())
}
