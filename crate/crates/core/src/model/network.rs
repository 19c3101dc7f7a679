//! Network initialization and the forward graph.
//!
//! The forward pass is always recorded on a [`Tape`], so the same code path
//! serves plain evaluation, parameter gradients and (for PINNs) input
//! tangents propagated alongside the values.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{layout_for, ParamVector, Role};
use super::spec::{Activation, NetworkSpec};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running BatchNorm statistics, one entry per hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BnState {
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
}

impl BnState {
    pub fn new(spec: &NetworkSpec) -> Self {
        if !spec.batchnorm {
            return Self::default();
        }
        let hidden = spec.hidden_widths();
        Self {
            running_mean: hidden.iter().map(|&w| vec![0.0; w]).collect(),
            running_var: hidden.iter().map(|&w| vec![1.0; w]).collect(),
        }
    }

    fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if !spec.batchnorm {
            return Ok(());
        }
        let hidden = spec.hidden_widths();
        let ok = self.running_mean.len() == hidden.len()
            && self.running_var.len() == hidden.len()
            && hidden
                .iter()
                .enumerate()
                .all(|(i, &w)| self.running_mean[i].len() == w && self.running_var[i].len() == w);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(
                "BatchNorm state does not match the network".into(),
            ))
        }
    }
}

/// How BatchNorm layers normalize.
#[derive(Debug, Clone, Copy)]
pub enum Normalization<'a> {
    /// Stored running statistics (eval mode).
    Running(&'a BnState),
    /// Statistics of the current batch (train mode).
    Batch,
}

/// Deterministic initialization.
///
/// Weights are drawn from `U(-sqrt(3/fan_in), sqrt(3/fan_in))` (unit-gain
/// Kaiming-uniform, variance `1/fan_in`), biases from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`. BatchNorm gamma starts at 1 and beta
/// at 0. Segments are filled in layout order from a single ChaCha stream.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let layout = layout_for(spec);
    let mut rng = seeded(seed);
    let mut values = Vec::with_capacity(layout.iter().map(|s| s.len()).sum());
    for seg in &layout {
        let fan_in = spec.layer_widths[seg.layer] as f64;
        match seg.role {
            Role::Weight => {
                let bound = (3.0 / fan_in).sqrt();
                values.extend((0..seg.len()).map(|_| rng.random_range(-bound..bound)));
            }
            Role::Bias => {
                let bound = 1.0 / fan_in.sqrt();
                values.extend((0..seg.len()).map(|_| rng.random_range(-bound..bound)));
            }
            Role::BnGamma => values.extend(std::iter::repeat_n(1.0, seg.len())),
            Role::BnBeta => values.extend(std::iter::repeat_n(0.0, seg.len())),
        }
    }
    ParamVector::new(values, layout)
}

/// Parameter leaves of one network on a tape, grouped by layer.
pub(crate) struct ParamVars {
    pub all: Vec<Var>,
    layers: Vec<LayerVars>,
}

#[derive(Clone, Copy)]
struct LayerVars {
    weight: Var,
    bias: Var,
    bn: Option<(Var, Var)>,
}

impl ParamVars {
    pub fn load(tape: &mut Tape, spec: &NetworkSpec, params: &ParamVector) -> Result<Self> {
        params.check_layout(spec)?;
        let all: Vec<Var> = params
            .unflatten()
            .into_iter()
            .map(|block| tape.leaf(block))
            .collect();
        let mut layers = Vec::with_capacity(spec.num_layers());
        let mut it = params.layout.iter().zip(all.iter().copied()).peekable();
        while let Some((seg, weight)) = it.next() {
            debug_assert_eq!(seg.role, Role::Weight);
            let (_, bias) = it.next().expect("bias follows weight");
            let bn = match it.peek() {
                Some((s, _)) if s.role == Role::BnGamma => {
                    let (_, gamma) = it.next().unwrap();
                    let (_, beta) = it.next().unwrap();
                    Some((gamma, beta))
                }
                _ => None,
            };
            layers.push(LayerVars { weight, bias, bn });
        }
        Ok(Self { all, layers })
    }

    /// Collect adjoints of all parameter leaves into a flat vector.
    pub fn gradient(
        &self,
        grads: &crate::autodiff::tape::Gradients,
        like: &ParamVector,
    ) -> ParamVector {
        let mut values = Vec::with_capacity(like.len());
        for ((seg, _), v) in like.segments().zip(&self.all) {
            match grads.get(*v) {
                Some(g) => values.extend(g.iter().copied()),
                None => values.extend(std::iter::repeat_n(0.0, seg.len())),
            }
        }
        like.with_values(values)
    }
}

/// Graph nodes produced by one forward pass.
pub(crate) struct ForwardGraph {
    pub output: Var,
    /// Post-activation output of every hidden layer.
    pub hidden: Vec<Var>,
    /// `(batch mean, biased batch variance)` for each BatchNorm layer, in
    /// batch mode only.
    pub batch_stats: Vec<(Var, Var)>,
    /// Output tangents, one per seeded input tangent.
    pub tangents: Vec<Var>,
    /// Activation inputs of every hidden layer.
    pub pre_activations: Vec<Var>,
}

/// Record the forward pass on `tape`.
///
/// `input_tangents` are `m x p` seeds; each is pushed through the network by
/// the chain rule, producing the matching directional derivative of the
/// output. Tangents are only supported without BatchNorm.
pub(crate) fn forward_graph(
    tape: &mut Tape,
    spec: &NetworkSpec,
    vars: &ParamVars,
    input: Var,
    norm: Normalization<'_>,
    input_tangents: &[Var],
) -> Result<ForwardGraph> {
    forward_graph_masked(tape, spec, vars, input, norm, input_tangents, None)
}

/// [`forward_graph`] with ReLU replaced by multiplication with a fixed 0/1
/// mask per hidden layer, so the graph is the smooth piece selected by the
/// masks.
pub(crate) fn forward_graph_masked(
    tape: &mut Tape,
    spec: &NetworkSpec,
    vars: &ParamVars,
    input: Var,
    norm: Normalization<'_>,
    input_tangents: &[Var],
    relu_masks: Option<&[Array2<f64>]>,
) -> Result<ForwardGraph> {
    let (m, p) = tape.value(input).dim();
    if p != spec.input_dim() {
        return Err(Error::Shape(format!(
            "network expects {} input columns, got {p}",
            spec.input_dim()
        )));
    }
    if m == 0 {
        return Err(Error::EmptyInput("forward pass on zero rows".into()));
    }
    if spec.batchnorm && !input_tangents.is_empty() {
        return Err(Error::Unsupported(
            "input derivatives are not supported through BatchNorm".into(),
        ));
    }
    if let Normalization::Running(state) = norm {
        state.check(spec)?;
    }

    let mut h = input;
    let mut dh: Vec<Var> = input_tangents.to_vec();
    let mut hidden = Vec::with_capacity(spec.num_hidden());
    let mut batch_stats = Vec::new();
    let mut pre_activations = Vec::with_capacity(spec.num_hidden());
    let last = spec.num_layers() - 1;

    for (layer, lv) in vars.layers.iter().enumerate() {
        let xw = tape.matmul(h, lv.weight);
        let mut z = tape.add_row(xw, lv.bias);
        let mut dz: Vec<Var> = dh.iter().map(|&d| tape.matmul(d, lv.weight)).collect();

        if layer == last {
            h = z;
            dh = dz;
            break;
        }

        if let Some((gamma, beta)) = lv.bn {
            let normalized = match norm {
                Normalization::Batch => {
                    let mean = tape.col_mean(z);
                    let centered = tape.sub_row(z, mean);
                    let sq = tape.square(centered);
                    let var = tape.col_mean(sq);
                    let shifted = tape.affine(var, 1.0, BN_EPSILON);
                    let inv_std = tape.powf(shifted, -0.5);
                    batch_stats.push((mean, var));
                    tape.mul_row(centered, inv_std)
                }
                Normalization::Running(state) => {
                    let width = spec.layer_widths[layer + 1];
                    let mean = Array2::from_shape_vec((1, width), state.running_mean[layer].clone())
                        .expect("bn width");
                    let inv_std = Array2::from_shape_fn((1, width), |(_, j)| {
                        1.0 / (state.running_var[layer][j] + BN_EPSILON).sqrt()
                    });
                    let mean = tape.leaf(mean);
                    let inv_std = tape.leaf(inv_std);
                    let centered = tape.sub_row(z, mean);
                    tape.mul_row(centered, inv_std)
                }
            };
            let scaled = tape.mul_row(normalized, gamma);
            z = tape.add_row(scaled, beta);
        }

        pre_activations.push(z);
        let a = match (spec.activation, relu_masks) {
            (Activation::Tanh, _) => tape.tanh(z),
            (Activation::Relu, None) => tape.relu(z),
            (Activation::Relu, Some(masks)) => {
                let mask = masks.get(layer).ok_or_else(|| {
                    Error::Shape(format!("no ReLU mask for hidden layer {layer}"))
                })?;
                if mask.dim() != tape.value(z).dim() {
                    return Err(Error::Shape(format!(
                        "ReLU mask for layer {layer} is {:?}, activations {:?}",
                        mask.dim(),
                        tape.value(z).dim()
                    )));
                }
                tape.mul_const(z, mask.clone())
            }
        };
        if !dz.is_empty() {
            let local = match spec.activation {
                Activation::Tanh => {
                    let sq = tape.square(a);
                    Some(tape.affine(sq, -1.0, 1.0))
                }
                Activation::Relu => None,
            };
            for d in dz.iter_mut() {
                *d = match local {
                    Some(l) => tape.mul(*d, l),
                    None => {
                        let mask = tape
                            .value(z)
                            .mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                        tape.mul_const(*d, mask)
                    }
                };
            }
        }

        if spec.has_skip(layer) {
            h = tape.add(a, h);
            dh = dh.iter().zip(&dz).map(|(&d0, &d1)| tape.add(d1, d0)).collect();
        } else {
            h = a;
            dh = dz;
        }
        hidden.push(h);
    }

    Ok(ForwardGraph {
        output: h,
        hidden,
        batch_stats,
        tangents: dh,
        pre_activations,
    })
}

/// Fold batch statistics recorded on a tape into running statistics,
/// `running = (1 - momentum) * running + momentum * batch`. The running
/// variance uses the unbiased batch variance.
pub(crate) fn update_running_stats(
    tape: &Tape,
    graph: &ForwardGraph,
    batch_rows: usize,
    state: &mut BnState,
) {
    let correction = if batch_rows > 1 {
        batch_rows as f64 / (batch_rows as f64 - 1.0)
    } else {
        1.0
    };
    for (layer, (mean, var)) in graph.batch_stats.iter().enumerate() {
        let mean = tape.value(*mean);
        let var = tape.value(*var);
        for (j, (rm, rv)) in state.running_mean[layer]
            .iter_mut()
            .zip(state.running_var[layer].iter_mut())
            .enumerate()
        {
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[[0, j]];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[[0, j]] * correction;
        }
    }
}

/// Network map `inputs -> outputs`.
///
/// In [`Mode::Eval`] BatchNorm uses `state`'s running statistics; in
/// [`Mode::Train`] it normalizes with batch statistics and folds them into
/// `state` with momentum [`BN_MOMENTUM`].
pub fn forward(
    spec: &NetworkSpec,
    params: &ParamVector,
    state: &mut BnState,
    inputs: &Array2<f64>,
    mode: Mode,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, spec, params)?;
    let x = tape.leaf(inputs.clone());
    match mode {
        Mode::Eval => {
            let g = forward_graph(&mut tape, spec, &vars, x, Normalization::Running(state), &[])?;
            Ok(tape.value(g.output).clone())
        }
        Mode::Train => {
            if spec.batchnorm && state.running_mean.is_empty() {
                *state = BnState::new(spec);
            }
            let g = forward_graph(&mut tape, spec, &vars, x, Normalization::Batch, &[])?;
            if spec.batchnorm {
                update_running_stats(&tape, &g, inputs.nrows(), state);
            }
            Ok(tape.value(g.output).clone())
        }
    }
}

/// Eval-mode forward pass that leaves the state untouched.
pub fn predict(
    spec: &NetworkSpec,
    params: &ParamVector,
    state: &BnState,
    inputs: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, spec, params)?;
    let x = tape.leaf(inputs.clone());
    let g = forward_graph(&mut tape, spec, &vars, x, Normalization::Running(state), &[])?;
    Ok(tape.value(g.output).clone())
}

/// Post-activation features of every hidden layer in eval mode.
pub fn hidden_features(
    spec: &NetworkSpec,
    params: &ParamVector,
    state: &BnState,
    inputs: &Array2<f64>,
) -> Result<Vec<Array2<f64>>> {
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, spec, params)?;
    let x = tape.leaf(inputs.clone());
    let g = forward_graph(&mut tape, spec, &vars, x, Normalization::Running(state), &[])?;
    Ok(g.hidden.iter().map(|v| tape.value(*v).clone()).collect())
}
