//! Parameter gradients, Hessian-vector products and input derivatives.

pub mod tape;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::loss::{ensure_finite_params, loss_node, LossKind};
use crate::model::network::{forward_graph, forward_graph_masked, BnState, Normalization, ParamVars};
use crate::model::Activation;
use crate::model::pinn::{pinn_nodes, unit_columns, PinnPoints, PinnProblem};
use crate::model::{Dataset, NetworkSpec, ParamVector};
use tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientResult {
    pub value: f64,
    pub grad: ParamVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDerivatives {
    pub du_dx: Vec<f64>,
    pub du_dt: Vec<f64>,
}

/// A scalar loss over a parameter vector with an exact gradient.
pub trait Objective: Sync {
    fn loss(&self, params: &ParamVector) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamVector) -> Result<GradientResult>;

    /// Gradients at `plus` and `minus`, two points placed symmetrically
    /// around `center`. Piecewise-smooth objectives evaluate both on the
    /// smooth piece that contains `center`.
    fn gradient_pair(
        &self,
        _center: &ParamVector,
        plus: &ParamVector,
        minus: &ParamVector,
    ) -> Result<(ParamVector, ParamVector)> {
        Ok((self.value_and_grad(plus)?.grad, self.value_and_grad(minus)?.grad))
    }
}

/// Empirical loss of a network on a dataset.
#[derive(Debug, Clone, Copy)]
pub struct DatasetObjective<'a> {
    pub spec: &'a NetworkSpec,
    pub dataset: &'a Dataset,
    pub kind: LossKind,
    pub norm: Normalization<'a>,
}

impl<'a> DatasetObjective<'a> {
    /// Eval-mode objective using stored running statistics.
    pub fn eval(spec: &'a NetworkSpec, dataset: &'a Dataset, kind: LossKind, state: &'a BnState) -> Self {
        Self {
            spec,
            dataset,
            kind,
            norm: Normalization::Running(state),
        }
    }
}

impl Objective for DatasetObjective<'_> {
    fn loss(&self, params: &ParamVector) -> Result<f64> {
        crate::model::loss::dataset_loss(self.spec, params, self.norm, self.dataset, self.kind)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<GradientResult> {
        grad_with(self.spec, params, self.norm, self.dataset, self.kind)
    }

    fn gradient_pair(
        &self,
        center: &ParamVector,
        plus: &ParamVector,
        minus: &ParamVector,
    ) -> Result<(ParamVector, ParamVector)> {
        if self.spec.activation != Activation::Relu {
            return Ok((self.value_and_grad(plus)?.grad, self.value_and_grad(minus)?.grad));
        }
        let masks = relu_masks(self.spec, center, self.norm, self.dataset)?;
        let g = |p: &ParamVector| {
            grad_masked(self.spec, p, self.norm, self.dataset, self.kind, Some(&masks))
                .map(|r| r.grad)
        };
        Ok((g(plus)?, g(minus)?))
    }
}

/// Active-unit masks `z > 0` of every hidden ReLU layer at `params`.
fn relu_masks(
    spec: &NetworkSpec,
    params: &ParamVector,
    norm: Normalization<'_>,
    dataset: &Dataset,
) -> Result<Vec<Array2<f64>>> {
    ensure_finite_params(params)?;
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, spec, params)?;
    let x = tape.leaf(dataset.inputs.clone());
    let g = forward_graph(&mut tape, spec, &vars, x, norm, &[])?;
    Ok(g.pre_activations
        .iter()
        .map(|z| tape.value(*z).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }))
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct PinnObjective<'a> {
    pub spec: &'a NetworkSpec,
    pub problem: &'a PinnProblem,
    pub points: &'a PinnPoints,
}

impl Objective for PinnObjective<'_> {
    fn loss(&self, params: &ParamVector) -> Result<f64> {
        Ok(crate::model::pinn::pinn_loss(self.spec, params, self.problem, self.points)?.total)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<GradientResult> {
        ensure_finite_params(params)?;
        let mut tape = Tape::new();
        let vars = ParamVars::load(&mut tape, self.spec, params)?;
        let nodes = pinn_nodes(&mut tape, self.spec, &vars, self.problem, self.points)?;
        let value = tape.scalar(nodes.total);
        check_finite(value)?;
        let grads = tape.backward(nodes.total);
        let grad = vars.gradient(&grads, params);
        check_finite_grad(&grad)?;
        Ok(GradientResult { value, grad })
    }
}

/// `0.5 * theta^T A theta` for a symmetric `A`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub matrix: Array2<f64>,
}

impl Quadratic {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Shape("quadratic form needs a square matrix".into()));
        }
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .rows()
            .into_iter()
            .map(|row| crate::linalg::dot(row.as_slice().expect("standard layout"), x))
            .collect()
    }
}

impl Objective for Quadratic {
    fn loss(&self, params: &ParamVector) -> Result<f64> {
        Ok(0.5 * crate::linalg::dot(&params.values, &self.apply(&params.values)))
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<GradientResult> {
        let g = self.apply(&params.values);
        let value = 0.5 * crate::linalg::dot(&params.values, &g);
        Ok(GradientResult {
            value,
            grad: params.with_values(g),
        })
    }
}

/// `factor * inner`.
#[derive(Debug, Clone)]
pub struct Scaled<O> {
    pub inner: O,
    pub factor: f64,
}

impl<O: Objective> Objective for Scaled<O> {
    fn loss(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.factor * self.inner.loss(params)?)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<GradientResult> {
        let r = self.inner.value_and_grad(params)?;
        Ok(GradientResult {
            value: self.factor * r.value,
            grad: r.grad.scaled(self.factor),
        })
    }

    fn gradient_pair(
        &self,
        center: &ParamVector,
        plus: &ParamVector,
        minus: &ParamVector,
    ) -> Result<(ParamVector, ParamVector)> {
        let (a, b) = self.inner.gradient_pair(center, plus, minus)?;
        Ok((a.scaled(self.factor), b.scaled(self.factor)))
    }
}

impl<O: Objective + ?Sized> Objective for &O {
    fn loss(&self, params: &ParamVector) -> Result<f64> {
        (**self).loss(params)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<GradientResult> {
        (**self).value_and_grad(params)
    }

    fn gradient_pair(
        &self,
        center: &ParamVector,
        plus: &ParamVector,
        minus: &ParamVector,
    ) -> Result<(ParamVector, ParamVector)> {
        (**self).gradient_pair(center, plus, minus)
    }
}

fn check_finite(value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::eval("loss", format!("non-finite loss {value}")))
    }
}

fn check_finite_grad(grad: &ParamVector) -> Result<()> {
    match grad.values.iter().position(|g| !g.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::eval(
            format!("gradient entry {i}"),
            "non-finite gradient",
        )),
    }
}

pub(crate) fn grad_with(
    spec: &NetworkSpec,
    params: &ParamVector,
    norm: Normalization<'_>,
    dataset: &Dataset,
    kind: LossKind,
) -> Result<GradientResult> {
    grad_masked(spec, params, norm, dataset, kind, None)
}

fn grad_masked(
    spec: &NetworkSpec,
    params: &ParamVector,
    norm: Normalization<'_>,
    dataset: &Dataset,
    kind: LossKind,
    masks: Option<&[Array2<f64>]>,
) -> Result<GradientResult> {
    ensure_finite_params(params)?;
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, spec, params)?;
    let x = tape.leaf(dataset.inputs.clone());
    let g = forward_graph_masked(&mut tape, spec, &vars, x, norm, &[], masks)?;
    let l = loss_node(&mut tape, g.output, &dataset.targets, kind)?;
    let value = tape.scalar(l);
    check_finite(value)?;
    let grads = tape.backward(l);
    let grad = vars.gradient(&grads, params);
    check_finite_grad(&grad)?;
    Ok(GradientResult { value, grad })
}

/// Exact reverse-mode gradient of the eval-mode empirical loss.
pub fn grad(
    spec: &NetworkSpec,
    params: &ParamVector,
    state: &BnState,
    dataset: &Dataset,
    kind: LossKind,
) -> Result<GradientResult> {
    grad_with(spec, params, Normalization::Running(state), dataset, kind)
}

/// Step used by [`hvp`]: `cbrt(machine eps) * (1 + ||theta||)`.
pub fn hvp_step(params: &ParamVector) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + params.norm())
}

/// Hessian-vector product by a central difference of exact gradients along
/// the unit direction `v / ||v||`, rescaled by `||v||`.
///
/// For ReLU networks both gradients are taken with the activation pattern
/// frozen at `params`, which yields the Hessian of the linear region
/// containing `params` instead of a jump across a kink.
pub fn hvp<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    v: &ParamVector,
) -> Result<ParamVector> {
    if v.len() != params.len() {
        return Err(Error::Shape(format!(
            "direction has {} entries, parameters {}",
            v.len(),
            params.len()
        )));
    }
    let vnorm = v.norm();
    if !vnorm.is_finite() || vnorm <= 0.0 {
        return Err(Error::Precondition(
            "Hessian-vector product needs a nonzero finite direction".into(),
        ));
    }
    let eps = hvp_step(params);
    let step = eps / vnorm;
    let (plus, minus) =
        objective.gradient_pair(params, &params.axpy(step, v), &params.axpy(-step, v))?;
    let scale = vnorm / (2.0 * eps);
    Ok(params.with_values(
        plus.values
            .iter()
            .zip(&minus.values)
            .map(|(a, b)| (a - b) * scale)
            .collect(),
    ))
}

/// Derivatives of a scalar-output network with respect to its two inputs
/// `(x, t)`, propagated as forward tangents through the graph.
pub fn input_derivatives(
    spec: &NetworkSpec,
    params: &ParamVector,
    inputs: &Array2<f64>,
) -> Result<InputDerivatives> {
    if spec.batchnorm {
        return Err(Error::Unsupported(
            "input derivatives are not defined for BatchNorm networks".into(),
        ));
    }
    if spec.input_dim() != 2 || spec.output_dim() != 1 {
        return Err(Error::Config(format!(
            "input derivatives need a (x, t) -> u network, got widths {:?}",
            spec.layer_widths
        )));
    }
    let m = inputs.nrows();
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, spec, params)?;
    let x = tape.leaf(inputs.clone());
    let ex = tape.leaf(unit_columns(m, 0));
    let et = tape.leaf(unit_columns(m, 1));
    let empty = BnState::default();
    let g = forward_graph(&mut tape, spec, &vars, x, Normalization::Running(&empty), &[ex, et])?;
    Ok(InputDerivatives {
        du_dx: tape.value(g.tangents[0]).iter().copied().collect(),
        du_dt: tape.value(g.tangents[1]).iter().copied().collect(),
    })
}
