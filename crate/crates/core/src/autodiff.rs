//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding
//! its forward value; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! trainable leaf. Scalars are `1×1` matrices.
//!
//! Parameters are bound by name with [`Graph::param`]. Binding the same name
//! twice returns the same [`Var`], which is how weight sharing between the
//! drone and satellite branches is expressed. Names matching a frozen prefix
//! are bound as constants, so the optimizer never sees a gradient for them.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    Sum(Var),
    NormalizeRows(Var),
    PairwiseDist(Var),
    BlockLeftMatmul { mix: Var, x: Var, block: usize },
    BlockMeanRows(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: BTreeMap<String, Var>,
    frozen: Vec<String>,
    grads: Vec<Option<Mat>>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn row_sums(m: &Mat) -> Mat {
    m.sum_axis(Axis(1)).insert_axis(Axis(1))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters whose name starts with any of `prefixes` are bound as
    /// constants from now on.
    pub fn freeze_prefixes<I, S>(&mut self, prefixes: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.frozen.extend(prefixes.into_iter().map(Into::into));
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Bind a named parameter. Re-binding a name returns the existing node.
    pub fn param(&mut self, name: &str, value: &Mat) -> Var {
        if let Some(&v) = self.names.get(name) {
            return v;
        }
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.names.insert(name.to_string(), v);
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// Copy of `v` with no gradient path back to its inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- primitive ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// `a + row`, broadcasting a `1×n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a ⊙ col`, broadcasting a `B×1` column over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        let ng = self.needs(a) || self.needs(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(a) * k;
        let ng = self.needs(a) || self.needs(s);
        self.push(value, Op::MulScalar(a, s), ng)
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(a) / k;
        let ng = self.needs(a) || self.needs(s);
        self.push(value, Op::DivScalar(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.needs(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let ng = self.needs(a);
        self.push(value, Op::Ln(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start, end), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Rows scaled to unit Euclidean norm. Zero rows map to zero with zero
    /// gradient; callers that must reject them check beforehand.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::NormalizeRows(a), ng)
    }

    /// `B×B` matrix of Euclidean distances between the rows of `a`.
    pub fn pairwise_dist(&mut self, a: Var) -> Var {
        let value = pairwise_distances(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::PairwiseDist(a), ng)
    }

    /// Left-multiplies every consecutive `block`-row slab of `x` by `mix`
    /// (`block×block`).
    pub fn block_left_matmul(&mut self, mix: Var, x: Var, block: usize) -> Var {
        let m = self.value(mix);
        let xv = self.value(x);
        assert_eq!(m.dim(), (block, block), "block_left_matmul: mixer shape");
        assert_eq!(xv.nrows() % block, 0, "block_left_matmul: rows not a multiple of block");
        let mut value = Array2::zeros(xv.dim());
        for b in 0..xv.nrows() / block {
            let rows = b * block..(b + 1) * block;
            let out = m.dot(&xv.slice(s![rows.clone(), ..]));
            value.slice_mut(s![rows, ..]).assign(&out);
        }
        let ng = self.needs(mix) || self.needs(x);
        self.push(value, Op::BlockLeftMatmul { mix, x, block }, ng)
    }

    /// Mean of every consecutive `block`-row slab of `x`.
    pub fn block_mean_rows(&mut self, x: Var, block: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows() % block, 0, "block_mean_rows: rows not a multiple of block");
        let groups = xv.nrows() / block;
        let mut value = Array2::zeros((groups, xv.ncols()));
        for b in 0..groups {
            let mean = xv
                .slice(s![b * block..(b + 1) * block, ..])
                .mean_axis(Axis(0))
                .expect("non-empty block");
            value.row_mut(b).assign(&mean);
        }
        let ng = self.needs(x);
        self.push(value, Op::BlockMeanRows(x, block), ng)
    }

    // ---- composites ----------------------------------------------------

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let total = self.sum(a);
        self.scale(total, 1.0 / n)
    }

    /// `B×1` column of row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let ones = self.constant(Array2::ones((self.value(a).ncols(), 1)));
        self.matmul(a, ones)
    }

    /// `1×n` row of column means.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let rows = self.value(a).nrows();
        let w = self.constant(Array2::from_elem((1, rows), 1.0 / rows as f64));
        self.matmul(w, a)
    }

    /// Mean over the diagonal of a square matrix.
    pub fn diag_mean(&mut self, a: Var) -> Var {
        let n = self.value(a).nrows();
        let eye = self.constant(Array2::eye(n));
        let masked = self.mul(a, eye);
        let total = self.sum(masked);
        self.scale(total, 1.0 / n as f64)
    }

    /// `x W + b` with `W: in×out`, `b: 1×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    // ---- reverse pass --------------------------------------------------

    /// Accumulate gradients of the scalar `loss` into every node that needs
    /// one. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward: loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
    }

    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter, zero-filled when the loss does not
    /// depend on it. `None` when the name was never bound or is frozen.
    pub fn param_grad(&self, name: &str) -> Option<Mat> {
        let v = *self.names.get(name)?;
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(
            self.grad(v)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(self.value(v).dim())),
        )
    }

    /// Gradients of every trainable bound parameter, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Mat> {
        self.names
            .keys()
            .filter_map(|n| self.param_grad(n).map(|g| (n.clone(), g)))
            .collect()
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, contrib: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).t().dot(g));
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
                if self.needs(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.needs(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.needs(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if self.needs(*a) {
                    acc(*a, g * self.value(*col));
                }
                if self.needs(*col) {
                    acc(*col, row_sums(&(g * self.value(*a))));
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.scalar(*s);
                if self.needs(*a) {
                    acc(*a, g * k);
                }
                if self.needs(*s) {
                    let d = (g * self.value(*a)).sum();
                    acc(*s, Array2::from_elem((1, 1), d));
                }
            }
            Op::DivScalar(a, s) => {
                let k = self.scalar(*s);
                if self.needs(*a) {
                    acc(*a, g / k);
                }
                if self.needs(*s) {
                    let d = -(g * self.value(*a)).sum() / (k * k);
                    acc(*s, Array2::from_elem((1, 1), d));
                }
            }
            Op::Gelu(a) => {
                let d = self.value(*a).mapv(gelu_grad);
                acc(*a, g * &d);
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Ln(a) => acc(*a, g / self.value(*a)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let inner = row_sums(&(g * y));
                acc(*a, y * &(g - &inner));
            }
            Op::LogSoftmaxRows(a) => {
                let p = node.value.mapv(f64::exp);
                let total = row_sums(g);
                acc(*a, g - &(&p * &total));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.needs(p) {
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Sum(a) => acc(*a, Array2::from_elem(self.value(*a).dim(), g[[0, 0]])),
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut d = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    let n = x.row(i).dot(&x.row(i)).sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let gy = g.row(i).dot(&y.row(i));
                    let row = (&g.row(i) - &(&y.row(i) * gy)) / n;
                    d.row_mut(i).assign(&row);
                }
                acc(*a, d);
            }
            Op::PairwiseDist(a) => {
                let x = self.value(*a);
                let dist = &node.value;
                let n = x.nrows();
                let mut d = Array2::zeros(x.dim());
                for i in 0..n {
                    for j in 0..n {
                        if i == j || dist[[i, j]] == 0.0 {
                            continue;
                        }
                        let w = (g[[i, j]] + g[[j, i]]) / dist[[i, j]];
                        let diff = &x.row(i) - &x.row(j);
                        let mut row = d.row_mut(i);
                        row.scaled_add(w, &diff);
                    }
                }
                acc(*a, d);
            }
            Op::BlockLeftMatmul { mix, x, block } => {
                let m = self.value(*mix);
                let xv = self.value(*x);
                let mut dx = Array2::zeros(xv.dim());
                let mut dm: Mat = Array2::zeros(m.dim());
                for b in 0..xv.nrows() / block {
                    let rows = b * block..(b + 1) * block;
                    let gb = g.slice(s![rows.clone(), ..]);
                    let xb = xv.slice(s![rows.clone(), ..]);
                    dx.slice_mut(s![rows, ..]).assign(&m.t().dot(&gb));
                    dm += &gb.dot(&xb.t());
                }
                if self.needs(*x) {
                    acc(*x, dx);
                }
                if self.needs(*mix) {
                    acc(*mix, dm);
                }
            }
            Op::BlockMeanRows(x, block) => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(xv.dim());
                for b in 0..g.nrows() {
                    let share = &g.row(b) / *block as f64;
                    for r in b * block..(b + 1) * block {
                        d.row_mut(r).assign(&share);
                    }
                }
                acc(*x, d);
            }
        }
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

pub fn log_softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn pairwise_distances(m: &Mat) -> Mat {
    let n = m.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = m
                .row(i)
                .iter()
                .zip(m.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}
