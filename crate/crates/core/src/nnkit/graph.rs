//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward pass is a single reverse sweep. Leaves
//! created with [`Graph::param`] require gradients; everything derived only
//! from [`Graph::constant`] leaves is skipped during backpropagation.

use ndarray::{Array2, Axis, Zip};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (n×m) + r (1×m)` broadcast over rows.
    AddRow(Var, Var),
    /// `a (n×m) ⊙ r (1×m)` broadcast over rows.
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    /// Column means, shape `1×m`.
    ColMean(Var),
    /// Sum of all entries, shape `1×1`.
    Sum(Var),
    ConcatCols(Var, Var),
    /// Row-major gather: `out.flat[i] = src.flat[index[i]]`.
    Gather(Var, Vec<usize>),
    Reshape(Var),
    LogSoftmax(Var),
    /// Frobenius norm, shape `1×1`.
    Norm2(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1×m row");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a 1×m row");
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) + s;
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).mapv(|x| x.powf(p));
        self.push(value, Op::Powf(a, p), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn col_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = x
            .mean_axis(Axis(0))
            .expect("col_mean of an empty matrix")
            .insert_axis(Axis(0));
        self.push(value, Op::ColMean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Mean of all entries, shape `1×1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols row mismatch");
        self.push(value, Op::ConcatCols(a, b), &[a, b])
    }

    /// Gather entries of `src` (flattened row-major) into a new
    /// `rows × cols` matrix.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let flat = self.value(src);
        let cols_src = flat.ncols();
        let value = Array2::from_shape_fn((rows, cols), |(r, c)| {
            let s = index[r * cols + c];
            flat[[s / cols_src, s % cols_src]]
        });
        self.push(value, Op::Gather(src, index), &[src])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape size");
        let value = Array2::from_shape_vec((rows, cols), x.iter().copied().collect())
            .expect("reshape");
        self.push(value, Op::Reshape(a), &[a])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    pub fn norm2(&mut self, a: Var) -> Var {
        let n = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(Array2::from_elem((1, 1), n), Op::Norm2(a), &[a])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if self.needs_grad(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    acc(*a, g * val(*b));
                }
                if self.needs_grad(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if self.needs_grad(*r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if self.needs_grad(*a) {
                    acc(*a, g * val(*r));
                }
                if self.needs_grad(*r) {
                    acc(*r, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Powf(a, p) => {
                let mut d = val(*a).mapv(|x| p * x.powf(p - 1.0));
                d *= g;
                acc(*a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= slope;
                    }
                });
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let d = g * &node.value.mapv(|y| 1.0 - y * y);
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::ColMean(a) => {
                let x = val(*a);
                let n = x.nrows() as f64;
                let row = g / n;
                acc(*a, row.broadcast(x.dim()).expect("broadcast").to_owned());
            }
            Op::Sum(a) => {
                acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]]));
            }
            Op::ConcatCols(a, b) => {
                let split = val(*a).ncols();
                acc(*a, g.slice(ndarray::s![.., ..split]).to_owned());
                acc(*b, g.slice(ndarray::s![.., split..]).to_owned());
            }
            Op::Gather(src, index) => {
                let shape = val(*src).dim();
                let cols = shape.1;
                let mut d = Array2::zeros(shape);
                for (gi, &s) in g.iter().zip(index.iter()) {
                    d[[s / cols, s % cols]] += gi;
                }
                acc(*src, d);
            }
            Op::Reshape(a) => {
                let shape = val(*a).dim();
                let d = Array2::from_shape_vec(shape, g.iter().copied().collect())
                    .expect("reshape grad");
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let soft = node.value.mapv(f64::exp);
                let row_sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let d = g - &(soft * &row_sums);
                acc(*a, d);
            }
            Op::Norm2(a) => {
                let n = node.value[[0, 0]];
                if n > 0.0 {
                    acc(*a, val(*a) * (g[[0, 0]] / n));
                }
            }
        }
    }
}

/// Numerically stable row-wise log-softmax of a plain matrix.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    log_softmax_rows(x).mapv(f64::exp)
}
