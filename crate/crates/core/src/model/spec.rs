use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    Regression,
    Classification,
}

/// Architecture of a fully connected network.
///
/// `layer_widths[0]` is the input dimension and the last entry the output
/// dimension; everything in between is a hidden width. Each hidden layer is
/// `act(bn(h W + b))`; with `residual` set, a hidden layer whose input is
/// itself a hidden layer of equal width adds its input back (identity skip).
/// The output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub batchnorm: bool,
    pub output_head: OutputHead,
}

impl NetworkSpec {
    pub fn mlp(layer_widths: &[usize], activation: Activation, output_head: OutputHead) -> Self {
        Self {
            layer_widths: layer_widths.to_vec(),
            activation,
            residual: false,
            batchnorm: false,
            output_head,
        }
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn with_batchnorm(mut self, batchnorm: bool) -> Self {
        self.batchnorm = batchnorm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(format!(
                "layer_widths needs at least 2 entries, got {}",
                self.layer_widths.len()
            )));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("layer_widths[{i}] must be >= 1")));
        }
        if self.residual {
            let hidden = self.hidden_widths();
            if let Some(w) = hidden.windows(2).find(|w| w[0] != w[1]) {
                return Err(Error::Config(format!(
                    "residual connections need equal consecutive hidden widths, found {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    /// Number of linear layers (hidden layers plus the output layer).
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn num_hidden(&self) -> usize {
        self.layer_widths.len().saturating_sub(2)
    }

    pub fn hidden_widths(&self) -> &[usize] {
        let n = self.layer_widths.len();
        if n <= 2 {
            &[]
        } else {
            &self.layer_widths[1..n - 1]
        }
    }

    /// Whether linear layer `layer` carries an identity skip.
    pub fn has_skip(&self, layer: usize) -> bool {
        self.residual
            && layer >= 1
            && layer < self.num_layers() - 1
            && self.layer_widths[layer] == self.layer_widths[layer + 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_and_zero_widths() {
        let s = NetworkSpec::mlp(&[3], Activation::Tanh, OutputHead::Regression);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let s = NetworkSpec::mlp(&[3, 0, 1], Activation::Tanh, OutputHead::Regression);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn residual_needs_equal_hidden_widths() {
        let bad = NetworkSpec::mlp(&[2, 4, 8, 1], Activation::Relu, OutputHead::Regression)
            .with_residual(true);
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let ok = NetworkSpec::mlp(&[2, 4, 4, 1], Activation::Relu, OutputHead::Regression)
            .with_residual(true);
        ok.validate().unwrap();
        assert!(!ok.has_skip(0));
        assert!(ok.has_skip(1));
        assert!(!ok.has_skip(2));
    }
}
