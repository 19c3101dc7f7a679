use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::loss::{accuracy, loss, LossKind};
use super::network::{build_network, forward_graph, update_running_stats, BnState, Normalization, ParamVars};
use super::params::ParamVector;
use super::pinn::{relative_l2_error, PinnPoints, PinnProblem};
use super::spec::{NetworkSpec, OutputHead};
use crate::autodiff::tape::Tape;
use crate::autodiff::{Objective, PinnObjective};
use crate::error::{Error, Result};
use crate::rng::seeded_stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Minibatch size; `0` means full batch.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    /// SGD with momentum 0.9, the classification default.
    pub fn sgd(learning_rate: f64, epochs: usize, batch_size: usize) -> Self {
        Self {
            optimizer: Optimizer::Sgd,
            learning_rate,
            epochs,
            batch_size,
            momentum: 0.9,
        }
    }

    /// Full-batch Adam at lr 1e-3, the PINN default.
    pub fn adam(epochs: usize) -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            epochs,
            batch_size: 0,
            momentum: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be a positive number".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// What a model is trained on.
#[derive(Debug, Clone, Copy)]
pub enum TrainingData<'a> {
    Supervised(&'a Dataset),
    Pinn {
        problem: &'a PinnProblem,
        points: &'a PinnPoints,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub config_id: String,
    pub spec: NetworkSpec,
    pub seed: u64,
    pub params: ParamVector,
    #[serde(default)]
    pub bn_state: BnState,
    pub train_config: TrainConfig,
    pub metrics: BTreeMap<String, f64>,
    pub dataset_ref: String,
}

/// First and second moment state for the optimizers.
struct OptimizerState {
    config: TrainConfig,
    velocity: Vec<f64>,
    second: Vec<f64>,
    step: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    fn new(config: &TrainConfig, n: usize) -> Self {
        Self {
            config: config.clone(),
            velocity: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let lr = self.config.learning_rate;
        match self.config.optimizer {
            Optimizer::Sgd => {
                let mu = self.config.momentum;
                for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                }
            }
            Optimizer::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.step);
                let c2 = 1.0 - ADAM_BETA2.powi(self.step);
                for (((p, m), s), g) in params
                    .iter_mut()
                    .zip(&mut self.velocity)
                    .zip(&mut self.second)
                    .zip(grad)
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = *m / c1;
                    let shat = *s / c2;
                    *p -= lr * mhat / (shat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn check_params(params: &ParamVector, epoch: usize) -> Result<()> {
    match params.values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::Training {
            epoch,
            message: format!("a parameter became {v}"),
        }),
        None => Ok(()),
    }
}

/// Train a network from its seeded initialization.
///
/// Supervised data is visited in minibatches reshuffled every epoch by a
/// stream derived from `seed`; BatchNorm layers train on batch statistics
/// and keep running statistics for evaluation. PINNs train full batch on the
/// fixed point set. The result is a pure function of the arguments.
pub fn train(
    id: impl Into<String>,
    config_id: impl Into<String>,
    spec: &NetworkSpec,
    seed: u64,
    data: TrainingData<'_>,
    config: &TrainConfig,
) -> Result<ModelRecord> {
    config.validate()?;
    let mut params = build_network(spec, seed)?;
    let mut bn_state = BnState::new(spec);
    let mut opt = OptimizerState::new(config, params.len());

    let (metrics, dataset_ref) = match data {
        TrainingData::Supervised(dataset) => {
            let kind = LossKind::for_head(spec.output_head);
            let n = dataset.len();
            let batch = if config.batch_size == 0 { n } else { config.batch_size.min(n) };
            let mut order: Vec<usize> = (0..n).collect();
            let mut shuffle_rng = seeded_stream(seed, 7);
            for epoch in 0..config.epochs {
                order.shuffle(&mut shuffle_rng);
                for chunk in order.chunks(batch) {
                    // A single-row batch has no batch variance.
                    if spec.batchnorm && chunk.len() < 2 {
                        continue;
                    }
                    let mb = dataset.select(chunk);
                    let (value, grad) = supervised_step(spec, &params, &mut bn_state, &mb, kind)?;
                    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::Training {
                            epoch,
                            message: format!("loss became {value}"),
                        });
                    }
                    opt.apply(&mut params.values, &grad);
                    check_params(&params, epoch)?;
                }
            }
            let mut metrics = BTreeMap::new();
            let final_loss = loss(spec, &params, &bn_state, dataset, kind).map_err(|e| Error::Training {
                epoch: config.epochs,
                message: e.to_string(),
            })?;
            metrics.insert("loss".to_string(), final_loss);
            if spec.output_head == OutputHead::Classification {
                metrics.insert("accuracy".to_string(), accuracy(spec, &params, &bn_state, dataset)?);
            }
            (metrics, dataset.name.clone())
        }
        TrainingData::Pinn { problem, points } => {
            let objective = PinnObjective {
                spec,
                problem,
                points,
            };
            for epoch in 0..config.epochs {
                let r = objective.value_and_grad(&params).map_err(|e| Error::Training {
                    epoch,
                    message: e.to_string(),
                })?;
                opt.apply(&mut params.values, &r.grad.values);
                check_params(&params, epoch)?;
            }
            let final_loss = objective.loss(&params).map_err(|e| Error::Training {
                epoch: config.epochs,
                message: e.to_string(),
            })?;
            let mut metrics = BTreeMap::new();
            metrics.insert("loss".to_string(), final_loss);
            metrics.insert(
                "rel_l2_error".to_string(),
                relative_l2_error(spec, &params, problem)?,
            );
            (metrics, format!("convection(beta={})", problem.beta))
        }
    };

    Ok(ModelRecord {
        id: id.into(),
        config_id: config_id.into(),
        spec: spec.clone(),
        seed,
        params,
        bn_state,
        train_config: config.clone(),
        metrics,
        dataset_ref,
    })
}

/// Loss and gradient on one minibatch in train mode, folding the batch
/// statistics into `state`.
fn supervised_step(
    spec: &NetworkSpec,
    params: &ParamVector,
    state: &mut BnState,
    batch: &Dataset,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, spec, params)?;
    let x = tape.leaf(batch.inputs.clone());
    let g = forward_graph(&mut tape, spec, &vars, x, Normalization::Batch, &[])?;
    let l = super::loss::loss_node(&mut tape, g.output, &batch.targets, kind)?;
    if spec.batchnorm {
        update_running_stats(&tape, &g, batch.len(), state);
    }
    let value = tape.scalar(l);
    let grads = tape.backward(l);
    Ok((value, vars.gradient(&grads, params).values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::{make_linear_regression, make_toy_classification};
    use crate::model::spec::Activation;
    use ndarray::{array, Array2};

    /// Least-squares optimum of `y ~ [x, 1] beta` through the normal equations
    /// solved by Gaussian elimination.
    fn least_squares_loss(d: &Dataset) -> f64 {
        let m = d.len();
        let p = d.inputs.ncols();
        let design = Array2::from_shape_fn((m, p + 1), |(i, j)| if j < p { d.inputs[[i, j]] } else { 1.0 });
        let mut ata = design.t().dot(&design);
        let mut aty = design.t().dot(&d.targets.column(0));
        let n = p + 1;
        for k in 0..n {
            let piv = (k..n).max_by(|&a, &b| ata[[a, k]].abs().total_cmp(&ata[[b, k]].abs())).unwrap();
            for j in 0..n {
                ata.swap([k, j], [piv, j]);
            }
            aty.swap(k, piv);
            for i in (k + 1)..n {
                let f = ata[[i, k]] / ata[[k, k]];
                for j in k..n {
                    ata[[i, j]] -= f * ata[[k, j]];
                }
                aty[i] -= f * aty[k];
            }
        }
        let mut beta = vec![0.0; n];
        for k in (0..n).rev() {
            let s: f64 = ((k + 1)..n).map(|j| ata[[k, j]] * beta[j]).sum();
            beta[k] = (aty[k] - s) / ata[[k, k]];
        }
        let pred = design.dot(&ndarray::Array1::from(beta));
        pred.iter()
            .zip(d.targets.column(0))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / m as f64
    }

    #[test]
    fn linear_model_reaches_least_squares_optimum() {
        let d = make_linear_regression(3, 64, &array![[1.5], [-0.7], [0.3]], &[0.2], 0.3).unwrap();
        let spec = NetworkSpec::mlp(&[3, 1], Activation::Tanh, OutputHead::Regression);
        let config = TrainConfig::sgd(0.1, 1500, 0);
        let r = train("lin", "lin", &spec, 0, TrainingData::Supervised(&d), &config).unwrap();
        let optimum = least_squares_loss(&d);
        assert!(
            (r.metrics["loss"] - optimum).abs() <= 1e-6,
            "trained {} vs optimum {optimum}",
            r.metrics["loss"]
        );
    }

    #[test]
    fn training_is_deterministic() {
        let d = make_toy_classification(1, 64, 0.0).unwrap();
        let spec = NetworkSpec::mlp(&[2, 8, 8, 2], Activation::Relu, OutputHead::Classification)
            .with_residual(true)
            .with_batchnorm(true);
        let config = TrainConfig::sgd(0.05, 5, 16);
        let a = train("m", "c", &spec, 123, TrainingData::Supervised(&d), &config).unwrap();
        let b = train("m", "c", &spec, 123, TrainingData::Supervised(&d), &config).unwrap();
        assert_eq!(a, b);
        assert!(a.metrics.contains_key("accuracy"));
        assert_ne!(a.bn_state, BnState::new(&spec));
    }

    #[test]
    fn classifier_learns_moons() {
        let d = make_toy_classification(2, 200, 0.0).unwrap();
        let spec = NetworkSpec::mlp(&[2, 16, 16, 2], Activation::Tanh, OutputHead::Classification);
        let config = TrainConfig::sgd(0.05, 200, 32);
        let r = train("m", "c", &spec, 0, TrainingData::Supervised(&d), &config).unwrap();
        assert!(r.metrics["accuracy"] > 0.95, "{:?}", r.metrics);
    }

    #[test]
    fn divergence_reports_epoch() {
        let d = make_linear_regression(1, 16, &array![[50.0]], &[0.0], 0.0).unwrap();
        let spec = NetworkSpec::mlp(&[1, 1], Activation::Tanh, OutputHead::Regression);
        let mut config = TrainConfig::sgd(10.0, 500, 0);
        config.momentum = 0.0;
        let err = train("x", "x", &spec, 0, TrainingData::Supervised(&d), &config).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err:?}");
    }

    #[test]
    fn overflowing_parameters_are_divergence() {
        let d = make_toy_classification(3, 32, 0.0).unwrap();
        let spec = NetworkSpec::mlp(&[2, 6, 2], Activation::Tanh, OutputHead::Classification);
        let config = TrainConfig::sgd(1e308, 3, 0);
        let err = train("x", "x", &spec, 0, TrainingData::Supervised(&d), &config).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err:?}");
    }

    #[test]
    fn zero_epochs_rejected() {
        let d = make_toy_classification(1, 8, 0.0).unwrap();
        let spec = NetworkSpec::mlp(&[2, 2], Activation::Tanh, OutputHead::Classification);
        let config = TrainConfig::sgd(0.1, 0, 0);
        assert!(matches!(
            train("x", "x", &spec, 0, TrainingData::Supervised(&d), &config),
            Err(Error::Config(_))
        ));
    }
}
