//! Matrix-valued reverse-mode tape.
//!
//! Every node holds a dense `Array2<f64>`; scalars are `1x1` matrices. Nodes
//! are appended in evaluation order, so the reverse sweep simply walks the
//! node list backwards. Reductions are plain sequential loops so the result
//! does not depend on thread count.

use ndarray::{Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + row`, with `row` a `1xn` matrix broadcast over rows of `a`.
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Relu(Var),
    MulConst(Var, Array2<f64>),
    Square(Var),
    Powf(Var, f64),
    ColMean(Var),
    Mean(Var),
    /// Mean softmax cross-entropy of logits against fixed (one-hot) targets.
    SoftmaxCe(Var, Array2<f64>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Input or parameter. Constants are leaves whose gradient is ignored.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) - self.value(row);
        self.push(value, Op::SubRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a))
    }

    /// Elementwise product with a matrix that is not differentiated.
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let value = self.value(a) * &c;
        self.push(value, Op::MulConst(a, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).mapv(|x| x.powf(p));
        self.push(value, Op::Powf(a, p))
    }

    /// Column means, `m x n -> 1 x n`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.nrows() as f64;
        let mut out = Array2::zeros((1, x.ncols()));
        for row in x.rows() {
            for (o, v) in out.iter_mut().zip(row.iter()) {
                *o += v;
            }
        }
        out.mapv_inplace(|s| s / m);
        self.push(out, Op::ColMean(a))
    }

    /// Mean over all entries, `-> 1 x 1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len() as f64;
        let s: f64 = x.iter().sum();
        self.push(Array2::from_elem((1, 1), s / n), Op::Mean(a))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let x = self.value(logits);
        let m = x.nrows() as f64;
        let mut total = 0.0;
        for (row, t) in x.rows().into_iter().zip(targets.rows()) {
            let lse = log_sum_exp(row.iter().copied());
            for (z, y) in row.iter().zip(t.iter()) {
                if *y != 0.0 {
                    total += y * (lse - z);
                }
            }
        }
        self.push(
            Array2::from_elem((1, 1), total / m),
            Op::SoftmaxCe(logits, targets),
        )
    }

    /// Reverse sweep from a scalar node. Adjoints are kept for leaves only;
    /// leaves that do not influence `root` have none.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut adj: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Array2::ones(self.value(root).raw_dim()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.mapv(|x| -x));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut adj, *row, column_sums(&g));
                    accumulate(&mut adj, *a, g);
                }
                Op::SubRow(a, row) => {
                    accumulate(&mut adj, *row, column_sums(&g).mapv(|x| -x));
                    accumulate(&mut adj, *a, g);
                }
                Op::MulRow(a, row) => {
                    let grow = column_sums(&(&g * self.value(*a)));
                    let ga = &g * self.value(*row);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *row, grow);
                }
                Op::Affine(a, scale) => {
                    accumulate(&mut adj, *a, g.mapv(|x| x * scale));
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, y| *g *= 1.0 - y * y);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, x| {
                            if *x <= 0.0 {
                                *g = 0.0
                            }
                        });
                    accumulate(&mut adj, *a, ga);
                }
                Op::MulConst(a, c) => {
                    accumulate(&mut adj, *a, g * c);
                }
                Op::Square(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, x| *g *= 2.0 * x);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Powf(a, p) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, x| *g *= p * x.powf(p - 1.0));
                    accumulate(&mut adj, *a, ga);
                }
                Op::ColMean(a) => {
                    let x = self.value(*a);
                    let m = x.nrows() as f64;
                    let row = g.mapv(|v| v / m);
                    let ga = Array2::from_shape_fn(x.raw_dim(), |(_, j)| row[[0, j]]);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let s = g[[0, 0]] / x.len() as f64;
                    accumulate(&mut adj, *a, Array2::from_elem(x.raw_dim(), s));
                }
                Op::SoftmaxCe(a, targets) => {
                    let x = self.value(*a);
                    let m = x.nrows() as f64;
                    let scale = g[[0, 0]] / m;
                    let mut ga = Array2::zeros(x.raw_dim());
                    for ((row, t), mut out) in x
                        .rows()
                        .into_iter()
                        .zip(targets.rows())
                        .zip(ga.rows_mut())
                    {
                        let lse = log_sum_exp(row.iter().copied());
                        let tsum: f64 = t.iter().sum();
                        for ((o, z), y) in out.iter_mut().zip(row.iter()).zip(t.iter()) {
                            *o = scale * ((z - lse).exp() * tsum - y);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
            }
        }
        Gradients { adj }
    }
}

pub struct Gradients {
    adj: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when `v` does not reach the root.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.adj.get(v.0).and_then(|g| g.as_ref())
    }
}

fn accumulate(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut adj[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((1, g.ncols()));
    for row in g.axis_iter(Axis(0)) {
        for (o, v) in out.iter_mut().zip(row.iter()) {
            *o += v;
        }
    }
    out
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.map(|x| (x - max).exp()).sum();
    max + s.ln()
}
