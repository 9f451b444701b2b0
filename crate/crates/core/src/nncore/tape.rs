//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every operation appends a node holding its forward value; `backward` walks
//! the tape in reverse and accumulates adjoints. Nodes created with
//! [`Tape::constant`] (and everything computed only from constants) are
//! skipped during the backward pass.

use ndarray::{s, Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `1 x c` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    /// Parametric ReLU with a `1 x 1` slope.
    PRelu(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    SoftmaxRows(Var),
    MeanAbsDiff(Var, Var),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// `None` when the variable does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "bias must be a single row");
        let value = self.value(a) + self.value(row);
        let rg = self.grad_of(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn prelu(&mut self, a: Var, slope: Var) -> Var {
        let alpha = self.scalar(slope);
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { alpha * x });
        let rg = self.grad_of(&[a, slope]);
        self.push(value, Op::PRelu(a, slope), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat rows must agree");
        let rg = self.grad_of(parts);
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Slice(a, start, len), rg)
    }

    /// Softmax along each row (rows sum to one).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row /= total;
        }
        let rg = self.grad_of(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Mean absolute difference, as a `1 x 1` node.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "mean_abs_diff shape mismatch");
        let total: f64 = Zip::from(va).and(vb).fold(0.0, |acc, &x, &y| acc + (x - y).abs());
        let value = Array2::from_elem((1, 1), total / va.len() as f64);
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::MeanAbsDiff(a, b), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            // leaf adjoints stay in place; intermediate ones are consumed
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, factor) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g * *factor);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(*a) {
                        let mut ga = g;
                        Zip::from(&mut ga).and(y).for_each(|gi, &yi| *gi *= yi * (1.0 - yi));
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::Tanh(a) => {
                    if self.needs(*a) {
                        let mut ga = g;
                        Zip::from(&mut ga).and(y).for_each(|gi, &yi| *gi *= 1.0 - yi * yi);
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::PRelu(a, slope) => {
                    let x = self.value(*a);
                    if self.needs(*slope) {
                        let gs = Zip::from(&g)
                            .and(x)
                            .fold(0.0, |acc, &gi, &xi| if xi > 0.0 { acc } else { acc + gi * xi });
                        accumulate(&mut grads, *slope, Array2::from_elem((1, 1), gs));
                    }
                    if self.needs(*a) {
                        let alpha = self.scalar(*slope);
                        let mut ga = g;
                        Zip::from(&mut ga).and(x).for_each(|gi, &xi| {
                            if xi <= 0.0 {
                                *gi *= alpha;
                            }
                        });
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let width = self.value(*p).ncols();
                        if self.needs(*p) {
                            let gp = g.slice(s![.., start..start + width]).to_owned();
                            accumulate(&mut grads, *p, gp);
                        }
                        start += width;
                    }
                }
                Op::Slice(a, start, len) => {
                    if self.needs(*a) {
                        let mut ga = Array2::zeros(self.value(*a).dim());
                        ga.slice_mut(s![.., *start..*start + *len]).assign(&g);
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs(*a) {
                        let mut ga = g;
                        for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                            let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                            Zip::from(&mut grow).and(&yrow).for_each(|gi, &yi| *gi = yi * (*gi - dot));
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::MeanAbsDiff(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let coeff = g[[0, 0]] / va.len() as f64;
                    let sign = Zip::from(va).and(vb).map_collect(|&x, &t| coeff * sign(x - t));
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, -&sign);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, sign);
                    }
                }
                Op::Sum(a) => {
                    if self.needs(*a) {
                        let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                        accumulate(&mut grads, *a, ga);
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
