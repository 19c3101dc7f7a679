use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::spec::NetworkSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

/// One contiguous block of a flat parameter vector. Weights have shape
/// `(fan_in, fan_out)`; biases and BatchNorm affine terms `(1, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub layer: usize,
    pub role: Role,
    pub shape: (usize, usize),
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<Segment>,
}

/// Segment order for a network: per layer, weight then bias, then BatchNorm
/// gamma and beta on hidden layers when enabled.
pub fn layout_for(spec: &NetworkSpec) -> Vec<Segment> {
    let mut layout = Vec::new();
    for layer in 0..spec.num_layers() {
        let (fan_in, fan_out) = (spec.layer_widths[layer], spec.layer_widths[layer + 1]);
        layout.push(Segment {
            layer,
            role: Role::Weight,
            shape: (fan_in, fan_out),
        });
        layout.push(Segment {
            layer,
            role: Role::Bias,
            shape: (1, fan_out),
        });
        if spec.batchnorm && layer + 1 < spec.num_layers() {
            layout.push(Segment {
                layer,
                role: Role::BnGamma,
                shape: (1, fan_out),
            });
            layout.push(Segment {
                layer,
                role: Role::BnBeta,
                shape: (1, fan_out),
            });
        }
    }
    layout
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let expected: usize = layout.iter().map(Segment::len).sum();
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "layout describes {expected} values but {} were given",
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<Segment>) -> Self {
        let n = layout.iter().map(Segment::len).sum();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    /// Single-segment vector, handy for objectives that are not networks.
    pub fn flat(values: Vec<f64>) -> Self {
        let layout = vec![Segment {
            layer: 0,
            role: Role::Weight,
            shape: (values.len(), 1),
        }];
        Self { values, layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn check_layout(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layout != layout_for(spec) {
            return Err(Error::Shape(
                "parameter layout does not match the network spec".into(),
            ));
        }
        if self.values.len() != self.layout.iter().map(Segment::len).sum::<usize>() {
            return Err(Error::Shape("parameter count does not match layout".into()));
        }
        Ok(())
    }

    /// `(segment, offset)` pairs in layout order.
    pub fn segments(&self) -> impl Iterator<Item = (Segment, usize)> + '_ {
        self.layout.iter().scan(0usize, |offset, seg| {
            let start = *offset;
            *offset += seg.len();
            Some((*seg, start))
        })
    }

    pub fn segment_view(&self, index: usize) -> ArrayView2<'_, f64> {
        let (seg, start) = self.segments().nth(index).expect("segment index");
        ArrayView2::from_shape(seg.shape, &self.values[start..start + seg.len()])
            .expect("segment shape")
    }

    /// Split into one matrix per segment.
    pub fn unflatten(&self) -> Vec<Array2<f64>> {
        self.segments()
            .map(|(seg, start)| {
                Array2::from_shape_vec(seg.shape, self.values[start..start + seg.len()].to_vec())
                    .expect("segment shape")
            })
            .collect()
    }

    pub fn flatten(layout: Vec<Segment>, blocks: &[Array2<f64>]) -> Result<Self> {
        if blocks.len() != layout.len() {
            return Err(Error::Shape(format!(
                "{} blocks for {} segments",
                blocks.len(),
                layout.len()
            )));
        }
        let mut values = Vec::with_capacity(layout.iter().map(Segment::len).sum());
        for (seg, block) in layout.iter().zip(blocks) {
            if block.dim() != seg.shape {
                return Err(Error::Shape(format!(
                    "block {:?} does not match segment shape {:?}",
                    block.dim(),
                    seg.shape
                )));
            }
            values.extend(block.iter().copied());
        }
        Ok(Self { values, layout })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.values)
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        crate::linalg::dot(&self.values, &other.values)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            layout: self.layout.clone(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.with_values(self.values.iter().map(|v| v * c).collect())
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &ParamVector) -> Self {
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + c * b)
                .collect(),
        )
    }
}
