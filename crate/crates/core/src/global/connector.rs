//! Low-loss curves between two trained models and the resulting
//! mode-connectivity score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Objective;
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::rng::seeded_stream;

pub const DEFAULT_GRID_POINTS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    #[default]
    QuadraticBezier,
}

/// Quadratic Bezier curve `(1-t)^2 a + 2t(1-t) control + t^2 b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub theta_a: ParamVector,
    pub theta_b: ParamVector,
    pub control: ParamVector,
    pub kind: CurveKind,
}

impl CurveSpec {
    /// Curve with the control point at the midpoint, i.e. the straight line.
    pub fn midpoint(theta_a: &ParamVector, theta_b: &ParamVector) -> Result<Self> {
        if !theta_a.same_layout(theta_b) {
            return Err(Error::Config(
                "connector endpoints have different parameter layouts".into(),
            ));
        }
        let control = theta_a.with_values(
            theta_a
                .values
                .iter()
                .zip(&theta_b.values)
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        );
        Ok(Self {
            theta_a: theta_a.clone(),
            theta_b: theta_b.clone(),
            control,
            kind: CurveKind::QuadraticBezier,
        })
    }

    pub fn point(&self, t: f64) -> ParamVector {
        if t == 0.0 {
            return self.theta_a.clone();
        }
        if t == 1.0 {
            return self.theta_b.clone();
        }
        // Written relative to `theta_a` so that constant curves stay exact.
        let (wc, wb) = (2.0 * t * (1.0 - t), t * t);
        self.theta_a.with_values(
            self.theta_a
                .values
                .iter()
                .zip(&self.control.values)
                .zip(&self.theta_b.values)
                .map(|((a, c), b)| a + wc * (c - a) + wb * (b - a))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

/// Fit the control point of a Bezier connector between `theta_a` and
/// `theta_b`.
///
/// Starts from the midpoint. Each step draws `t ~ U(0, 1)` and takes an Adam
/// step along `2t(1-t) * grad L(gamma(t))`. Identical endpoints return the
/// constant curve without training.
pub fn train_connector<O: Objective + ?Sized>(
    objective: &O,
    theta_a: &ParamVector,
    theta_b: &ParamVector,
    config: &ConnectorConfig,
) -> Result<CurveSpec> {
    let mut curve = CurveSpec::midpoint(theta_a, theta_b)?;
    if theta_a.values == theta_b.values || config.steps == 0 {
        return Ok(curve);
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Config("connector learning rate must be positive".into()));
    }
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let n = theta_a.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut rng = seeded_stream(config.seed, 11);
    for step in 1..=config.steps {
        let t: f64 = rng.random();
        let point = curve.point(t);
        let g = objective
            .value_and_grad(&point)
            .map_err(|e| e.with_context(format!("connector step {step} at t = {t:.4}")))?;
        let w = 2.0 * t * (1.0 - t);
        let b1 = 1.0 - beta1.powi(step as i32);
        let b2 = 1.0 - beta2.powi(step as i32);
        for i in 0..n {
            let gi = w * g.grad.values[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            curve.control.values[i] -= config.learning_rate * (m[i] / b1) / ((v[i] / b2).sqrt() + eps);
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub mc: f64,
    pub t_star: f64,
    pub curve_losses: Vec<(f64, f64)>,
    pub endpoint_losses: (f64, f64),
}

impl McResult {
    /// Recompute `mc` from the stored losses.
    pub fn recompute(&self) -> f64 {
        let mean = 0.5 * (self.endpoint_losses.0 + self.endpoint_losses.1);
        let at = self
            .curve_losses
            .iter()
            .find(|(t, _)| *t == self.t_star)
            .map_or(f64::NAN, |(_, l)| *l);
        mean - at
    }
}

/// Signed mode connectivity along `curve`.
///
/// Negative values mean a loss barrier, values near zero a well-connected
/// pair, positive values a path below the endpoint average.
pub fn mode_connectivity<O: Objective + ?Sized>(
    curve: &CurveSpec,
    objective: &O,
    grid_points: usize,
) -> Result<McResult> {
    if grid_points < 3 {
        return Err(Error::Precondition(format!(
            "mode connectivity needs at least 3 grid points, got {grid_points}"
        )));
    }
    let eval = |t: f64| -> Result<f64> {
        let l = objective
            .loss(&curve.point(t))
            .map_err(|e| e.with_context(format!("curve loss at t = {t}")))?;
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::eval(format!("curve loss at t = {t}"), format!("non-finite loss {l}")))
        }
    };
    let mut curve_losses = Vec::with_capacity(grid_points);
    for i in 0..grid_points {
        let t = i as f64 / (grid_points - 1) as f64;
        curve_losses.push((t, eval(t)?));
    }
    let endpoint_losses = (curve_losses[0].1, curve_losses[grid_points - 1].1);
    let mean = 0.5 * (endpoint_losses.0 + endpoint_losses.1);
    let mut best = 0;
    for (i, (_, l)) in curve_losses.iter().enumerate() {
        if (mean - l).abs() > (mean - curve_losses[best].1).abs() {
            best = i;
        }
    }
    let (t_star, l_star) = curve_losses[best];
    Ok(McResult {
        mc: mean - l_star,
        t_star,
        curve_losses,
        endpoint_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GradientResult, Quadratic};
    use ndarray::Array2;

    /// `(theta^2 - 1)^2` in one dimension.
    struct DoubleWell;
    impl Objective for DoubleWell {
        fn loss(&self, p: &ParamVector) -> Result<f64> {
            let x = p.values[0];
            Ok((x * x - 1.0).powi(2))
        }
        fn value_and_grad(&self, p: &ParamVector) -> Result<GradientResult> {
            let x = p.values[0];
            Ok(GradientResult {
                value: (x * x - 1.0).powi(2),
                grad: p.with_values(vec![4.0 * x * (x * x - 1.0)]),
            })
        }
    }

    /// Loss given by a table over `t` along a one-dimensional line `[0, 1]`.
    struct Profile;
    impl Objective for Profile {
        fn loss(&self, p: &ParamVector) -> Result<f64> {
            let t = p.values[0];
            Ok(if t == 0.0 {
                0.2
            } else if t == 1.0 {
                0.4
            } else if (t - 0.5).abs() < 1e-12 {
                0.1
            } else {
                0.3
            })
        }
        fn value_and_grad(&self, _: &ParamVector) -> Result<GradientResult> {
            unreachable!()
        }
    }

    #[test]
    fn double_well_straight_line_has_unit_barrier() {
        let a = ParamVector::flat(vec![-1.0]);
        let b = ParamVector::flat(vec![1.0]);
        let curve = CurveSpec::midpoint(&a, &b).unwrap();
        let r = mode_connectivity(&curve, &DoubleWell, DEFAULT_GRID_POINTS).unwrap();
        assert_eq!(r.t_star, 0.5);
        assert_eq!(r.mc, -1.0);
        assert_eq!(r.endpoint_losses, (0.0, 0.0));
        assert_eq!(r.recompute(), r.mc);
    }

    #[test]
    fn dip_below_endpoints_is_positive() {
        let curve = CurveSpec::midpoint(&ParamVector::flat(vec![0.0]), &ParamVector::flat(vec![1.0])).unwrap();
        let r = mode_connectivity(&curve, &Profile, 3).unwrap();
        assert!((r.mc - 0.2).abs() < 1e-15);
        assert_eq!(r.t_star, 0.5);
    }

    #[test]
    fn identical_endpoints_give_constant_curve() {
        let q = Quadratic::new(Array2::eye(3)).unwrap();
        let a = ParamVector::flat(vec![0.5, -0.2, 0.3]);
        let curve = train_connector(&q, &a, &a, &ConnectorConfig::default()).unwrap();
        let r = mode_connectivity(&curve, &q, DEFAULT_GRID_POINTS).unwrap();
        let la = q.loss(&a).unwrap();
        assert!(r.curve_losses.iter().all(|(_, l)| (l - la).abs() <= 1e-8));
        assert_eq!(r.mc, 0.0);
    }

    #[test]
    fn zero_steps_is_midpoint_curve() {
        let q = Quadratic::new(Array2::eye(2)).unwrap();
        let a = ParamVector::flat(vec![1.0, 0.0]);
        let b = ParamVector::flat(vec![0.0, 3.0]);
        let cfg = ConnectorConfig {
            steps: 0,
            ..ConnectorConfig::default()
        };
        let curve = train_connector(&q, &a, &b, &cfg).unwrap();
        assert_eq!(curve, CurveSpec::midpoint(&a, &b).unwrap());
        assert_eq!(curve.point(0.0), a);
        assert_eq!(curve.point(1.0), b);
    }

    #[test]
    fn layout_mismatch_is_config_error() {
        let q = Quadratic::new(Array2::eye(2)).unwrap();
        let a = ParamVector::flat(vec![1.0, 0.0]);
        let b = ParamVector::flat(vec![0.0, 3.0, 1.0]);
        assert!(matches!(
            train_connector(&q, &a, &b, &ConnectorConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn too_few_grid_points_rejected() {
        let c = CurveSpec::midpoint(&ParamVector::flat(vec![0.0]), &ParamVector::flat(vec![1.0])).unwrap();
        assert!(matches!(mode_connectivity(&c, &DoubleWell, 2), Err(Error::Precondition(_))));
    }

    #[test]
    fn training_deterministic_per_seed() {
        let a = ParamVector::flat(vec![-1.0, 0.3]);
        let b = ParamVector::flat(vec![1.0, -0.3]);
        struct Well2;
        impl Objective for Well2 {
            fn loss(&self, p: &ParamVector) -> Result<f64> {
                Ok(self.value_and_grad(p)?.value)
            }
            fn value_and_grad(&self, p: &ParamVector) -> Result<GradientResult> {
                let (x, y) = (p.values[0], p.values[1]);
                Ok(GradientResult {
                    value: (x * x - 1.0).powi(2) + y * y,
                    grad: p.with_values(vec![4.0 * x * (x * x - 1.0), 2.0 * y]),
                })
            }
        }
        let cfg = ConnectorConfig::default();
        let c1 = train_connector(&Well2, &a, &b, &cfg).unwrap();
        let c2 = train_connector(&Well2, &a, &b, &cfg).unwrap();
        assert_eq!(c1, c2);
    }
}
