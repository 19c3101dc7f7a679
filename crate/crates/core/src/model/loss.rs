use serde::{Deserialize, Serialize};

use super::data::{argmax, Dataset};
use super::network::{forward_graph, BnState, Normalization, ParamVars};
use super::params::ParamVector;
use super::spec::{NetworkSpec, OutputHead};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

impl LossKind {
    pub fn for_head(head: OutputHead) -> Self {
        match head {
            OutputHead::Regression => LossKind::Mse,
            OutputHead::Classification => LossKind::CrossEntropy,
        }
    }
}

/// Append the empirical loss of `output` against `targets` to the tape.
/// MSE averages over every output entry; cross-entropy applies softmax and
/// averages over rows.
pub(crate) fn loss_node(
    tape: &mut Tape,
    output: Var,
    targets: &ndarray::Array2<f64>,
    kind: LossKind,
) -> Result<Var> {
    if tape.value(output).dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "network output {:?} vs targets {:?}",
            tape.value(output).dim(),
            targets.dim()
        )));
    }
    Ok(match kind {
        LossKind::Mse => {
            let t = tape.leaf(targets.clone());
            let diff = tape.sub(output, t);
            let sq = tape.square(diff);
            tape.mean(sq)
        }
        LossKind::CrossEntropy => tape.softmax_cross_entropy(output, targets.clone()),
    })
}

pub(crate) fn ensure_finite_params(params: &ParamVector) -> Result<()> {
    if let Some(i) = params.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::eval(
            format!("parameter {i}"),
            format!("non-finite parameter value {}", params.values[i]),
        ));
    }
    Ok(())
}

/// Empirical loss `(1/n) sum_i l(x_i, y_i; theta)` with the given
/// BatchNorm normalization.
pub fn dataset_loss(
    spec: &NetworkSpec,
    params: &ParamVector,
    norm: Normalization<'_>,
    dataset: &Dataset,
    kind: LossKind,
) -> Result<f64> {
    ensure_finite_params(params)?;
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, spec, params)?;
    let x = tape.leaf(dataset.inputs.clone());
    let g = forward_graph(&mut tape, spec, &vars, x, norm, &[])?;
    let l = loss_node(&mut tape, g.output, &dataset.targets, kind)?;
    let value = tape.scalar(l);
    if !value.is_finite() {
        return Err(Error::eval("loss", format!("non-finite loss {value}")));
    }
    Ok(value)
}

/// Eval-mode empirical loss.
pub fn loss(
    spec: &NetworkSpec,
    params: &ParamVector,
    state: &BnState,
    dataset: &Dataset,
    kind: LossKind,
) -> Result<f64> {
    dataset_loss(spec, params, Normalization::Running(state), dataset, kind)
}

/// Fraction of rows whose argmax output matches the label.
pub fn accuracy(
    spec: &NetworkSpec,
    params: &ParamVector,
    state: &BnState,
    dataset: &Dataset,
) -> Result<f64> {
    let out = super::network::predict(spec, params, state, &dataset.inputs)?;
    let labels = dataset.labels();
    let correct = out
        .rows()
        .into_iter()
        .zip(&labels)
        .filter(|(row, &l)| argmax(row.iter()) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}
