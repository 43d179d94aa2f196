use std::sync::Arc;

use super::{CsrMatrix, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    SoftmaxRows,
    Identity,
}

impl Activation {
    /// Activation order used by the input/output structure genes.
    pub const ALL: [Activation; 5] = [
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Relu,
        Activation::SoftmaxRows,
        Activation::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::SoftmaxRows => "softmax",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleByScalar(Var, Var),
    Act(Var, Activation),
    MeanStack(Vec<Var>),
    ConcatCols(Var, Var),
    Sum(Var),
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    EdgeAttention {
        pattern: Arc<CsrMatrix>,
        target_score: Var,
        source_score: Var,
        values: Var,
        slope: f64,
        pre_act: Vec<f64>,
        alpha: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation. Nodes are appended in evaluation order, so the
/// node list is already a topological order and backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf of a [`Graph`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; leaves the loss does not depend on get zeros.
    pub fn get(&self, v: Var) -> &Tensor {
        self.grads[v.0]
            .as_ref()
            .expect("gradient requested for a non-leaf node")
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .expect("gradient requested for a non-leaf node")
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (n, c) = (x.rows(), x.cols());
    let mut out = x.clone();
    for r in 0..n {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub(crate) fn apply_activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    Ok(match kind {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(f64::tanh),
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Identity => x.clone(),
        Activation::SoftmaxRows => {
            x.require_rank2("softmax_rows")?;
            softmax_rows(x)
        }
    })
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

    fn is_constant(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Constant)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        check_finite(&out, "matmul")?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a × x` with a constant sparse `a`.
    pub fn spmm(&mut self, a: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let out = a.spmm(self.value(x))?;
        check_finite(&out, "spmm")?;
        Ok(self.push(Op::SpMM(Arc::clone(a), x), out))
    }

    /// Adds a length-f bias vector to every row of an n×f matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, f) = xv.require_rank2("add_bias")?;
        let bv = self.value(bias);
        if bv.len() != f {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for r in 0..n {
            for (o, b) in out.data_mut()[r * f..(r + 1) * f].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        check_finite(&out, "add_bias")?;
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        check_finite(&out, "add")?;
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "mul")?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        check_finite(&out, "mul")?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        check_finite(&out, "scale")?;
        Ok(self.push(Op::Scale(x, factor), out))
    }

    /// `s · x` where `s` is a one-element tensor on the graph.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                left: self.value(x).shape().to_vec(),
                right: sv.shape().to_vec(),
            });
        }
        let factor = sv.data()[0];
        let out = self.value(x).map(|v| v * factor);
        check_finite(&out, "scale_by")?;
        Ok(self.push(Op::ScaleByScalar(x, s), out))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = apply_activation(self.value(x), kind)?;
        check_finite(&out, "activation")?;
        Ok(self.push(Op::Act(x, kind), out))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(TensorError::Empty("mean_stack"))?;
        let mut out = self.value(first).clone();
        for &x in &xs[1..] {
            self.value(x).same_shape(&out, "mean_stack")?;
            out.add_assign(self.value(x));
        }
        let inv = 1.0 / xs.len() as f64;
        for v in out.data_mut() {
            *v *= inv;
        }
        Ok(self.push(Op::MeanStack(xs.to_vec()), out))
    }

    /// Column-wise concatenation `[a ∥ b]` of two n-row matrices.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, fa) = self.value(a).require_rank2("concat_cols")?;
        let (nb, fb) = self.value(b).require_rank2("concat_cols")?;
        if n != nb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(n * (fa + fb));
        for r in 0..n {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        let out = Tensor::new(&[n, fa + fb], data)?;
        Ok(self.push(Op::ConcatCols(a, b), out))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        check_finite(&out, "sum")?;
        Ok(self.push(Op::Sum(x), out))
    }

    /// Mean negative log-likelihood of `labels[i]` over the rows listed in
    /// `mask`, via a max-shifted log-sum-exp.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[usize]) -> Result<Var> {
        if mask.is_empty() {
            return Err(TensorError::Empty("masked_cross_entropy"));
        }
        let lv = self.value(logits);
        let (n, c) = lv.require_rank2("masked_cross_entropy")?;
        let mut targets = Vec::with_capacity(mask.len());
        let mut probs = Vec::with_capacity(mask.len() * c);
        let mut total = 0.0;
        for &node in mask {
            if node >= n {
                return Err(TensorError::OutOfRange {
                    op: "masked_cross_entropy",
                    index: node,
                    bound: n,
                });
            }
            let label = labels[node];
            if label >= c {
                return Err(TensorError::OutOfRange {
                    op: "masked_cross_entropy",
                    index: label,
                    bound: c,
                });
            }
            let row = lv.row(node);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
            targets.push((node, label));
        }
        let out = Tensor::scalar(total / mask.len() as f64);
        check_finite(&out, "masked_cross_entropy")?;
        Ok(self.push(
            Op::MaskedCrossEntropy {
                logits,
                targets,
                probs,
            },
            out,
        ))
    }

    /// Single-head additive attention over the sparsity pattern of
    /// `pattern`: for row i, `out_i = Σ_j α_ij · values_j` where
    /// `α_i· = softmax_j(leaky_relu(target_i + source_j))`.
    /// `target_score` and `source_score` are n×1 columns.
    pub fn edge_attention(
        &mut self,
        pattern: &Arc<CsrMatrix>,
        target_score: Var,
        source_score: Var,
        values: Var,
        slope: f64,
    ) -> Result<Var> {
        let (n, f) = self.value(values).require_rank2("edge_attention")?;
        if pattern.rows() != n || pattern.cols() != n {
            return Err(TensorError::ShapeMismatch {
                op: "edge_attention",
                left: vec![pattern.rows(), pattern.cols()],
                right: vec![n, f],
            });
        }
        for s in [target_score, source_score] {
            if self.value(s).len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "edge_attention",
                    left: vec![n, 1],
                    right: self.value(s).shape().to_vec(),
                });
            }
        }
        let tv = self.value(target_score).data();
        let sv = self.value(source_score).data();
        let vals = self.value(values).data();
        let mut pre_act = vec![0.0; pattern.nnz()];
        let mut alpha = vec![0.0; pattern.nnz()];
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            let span = pattern.indptr()[i]..pattern.indptr()[i + 1];
            if span.is_empty() {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for e in span.clone() {
                let u = tv[i] + sv[pattern.indices()[e]];
                pre_act[e] = u;
                let act = if u > 0.0 { u } else { slope * u };
                alpha[e] = act;
                max = max.max(act);
            }
            let mut total = 0.0;
            for e in span.clone() {
                alpha[e] = (alpha[e] - max).exp();
                total += alpha[e];
            }
            let out_row = &mut out[i * f..(i + 1) * f];
            for e in span {
                alpha[e] /= total;
                let j = pattern.indices()[e];
                for (o, &v) in out_row.iter_mut().zip(&vals[j * f..(j + 1) * f]) {
                    *o += alpha[e] * v;
                }
            }
        }
        let out = Tensor::new(&[n, f], out)?;
        check_finite(&out, "edge_attention")?;
        Ok(self.push(
            Op::EdgeAttention {
                pattern: Arc::clone(pattern),
                target_score,
                source_score,
                values,
                slope,
                pre_act,
                alpha,
            },
            out,
        ))
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalar(lv.shape().to_vec()));
        }
        let mut acc: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        acc[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        fn accumulate(acc: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut acc[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = acc[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::MatMul(a, b) => {
                    // constant inputs (feature matrices) need no gradient
                    if !self.is_constant(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        accumulate(&mut acc, *a, ga);
                    }
                    if !self.is_constant(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut acc, *b, gb);
                    }
                }
                Op::SpMM(a, x) => {
                    accumulate(&mut acc, *x, a.t_spmm(&g)?);
                }
                Op::AddBias(x, b) => {
                    let f = g.cols();
                    let mut gb = vec![0.0; f];
                    for r in 0..g.rows() {
                        for (s, v) in gb.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    let gb = Tensor::new(self.value(*b).shape(), gb)?;
                    accumulate(&mut acc, *b, gb);
                    accumulate(&mut acc, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut acc, *a, g.clone());
                    accumulate(&mut acc, *b, g);
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (o, y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *o *= y;
                    }
                    let mut gb = g;
                    for (o, y) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= y;
                    }
                    accumulate(&mut acc, *a, ga);
                    accumulate(&mut acc, *b, gb);
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut acc, *x, g.map(|v| v * factor));
                }
                Op::ScaleByScalar(x, s) => {
                    let factor = self.value(*s).data()[0];
                    let ds: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    accumulate(&mut acc, *s, Tensor::new(self.value(*s).shape(), vec![ds])?);
                    accumulate(&mut acc, *x, g.map(|v| v * factor));
                }
                Op::Act(x, kind) => {
                    let y = &node.value;
                    let gx = match kind {
                        Activation::Identity => g,
                        Activation::Sigmoid => zip_map(&g, y, |g, y| g * y * (1.0 - y)),
                        Activation::Tanh => zip_map(&g, y, |g, y| g * (1.0 - y * y)),
                        Activation::Relu => zip_map(&g, self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 }),
                        Activation::SoftmaxRows => {
                            let c = y.cols();
                            let mut out = g.clone();
                            for r in 0..y.rows() {
                                let yr = y.row(r);
                                let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                                for (o, yv) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(yr) {
                                    *o = yv * (*o - dot);
                                }
                            }
                            out
                        }
                    };
                    accumulate(&mut acc, *x, gx);
                }
                Op::MeanStack(xs) => {
                    let share = g.map(|v| v / xs.len() as f64);
                    for &x in xs {
                        accumulate(&mut acc, x, share.clone());
                    }
                }
                Op::ConcatCols(a, b) => {
                    let fa = self.value(*a).cols();
                    let fb = self.value(*b).cols();
                    let n = g.rows();
                    let mut ga = Vec::with_capacity(n * fa);
                    let mut gb = Vec::with_capacity(n * fb);
                    for r in 0..n {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..fa]);
                        gb.extend_from_slice(&row[fa..]);
                    }
                    accumulate(&mut acc, *a, Tensor::new(&[n, fa], ga)?);
                    accumulate(&mut acc, *b, Tensor::new(&[n, fb], gb)?);
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    accumulate(&mut acc, *x, Tensor::full(self.value(*x).shape(), gv));
                }
                Op::MaskedCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let lv = self.value(*logits);
                    let c = lv.cols();
                    let scale = g.data()[0] / targets.len() as f64;
                    let mut gl = Tensor::zeros(lv.shape());
                    for (k, &(node, label)) in targets.iter().enumerate() {
                        let row = &mut gl.data_mut()[node * c..(node + 1) * c];
                        for (o, p) in row.iter_mut().zip(&probs[k * c..(k + 1) * c]) {
                            *o += scale * p;
                        }
                        row[label] -= scale;
                    }
                    accumulate(&mut acc, *logits, gl);
                }
                Op::EdgeAttention {
                    pattern,
                    target_score,
                    source_score,
                    values,
                    slope,
                    pre_act,
                    alpha,
                } => {
                    let vals = self.value(*values);
                    let (n, f) = (vals.rows(), vals.cols());
                    let mut g_vals = Tensor::zeros(&[n, f]);
                    let mut g_target = vec![0.0; n];
                    let mut g_source = vec![0.0; n];
                    let mut d_alpha = Vec::new();
                    for i in 0..n {
                        let span = pattern.indptr()[i]..pattern.indptr()[i + 1];
                        let gi = g.row(i);
                        d_alpha.clear();
                        let mut weighted = 0.0;
                        for e in span.clone() {
                            let j = pattern.indices()[e];
                            let vj = vals.row(j);
                            let da: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            d_alpha.push(da);
                            weighted += alpha[e] * da;
                            for (o, &gv) in g_vals.data_mut()[j * f..(j + 1) * f].iter_mut().zip(gi) {
                                *o += alpha[e] * gv;
                            }
                        }
                        for (k, e) in span.enumerate() {
                            let de = alpha[e] * (d_alpha[k] - weighted);
                            let du = if pre_act[e] > 0.0 { de } else { slope * de };
                            g_target[i] += du;
                            g_source[pattern.indices()[e]] += du;
                        }
                    }
                    let ts = self.value(*target_score).shape().to_vec();
                    let ss = self.value(*source_score).shape().to_vec();
                    accumulate(&mut acc, *values, g_vals);
                    accumulate(&mut acc, *target_score, Tensor::new(&ts, g_target)?);
                    accumulate(&mut acc, *source_score, Tensor::new(&ss, g_source)?);
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(acc)
            .map(|(node, g)| match node.op {
                Op::Leaf => Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map on equal shapes")
}
