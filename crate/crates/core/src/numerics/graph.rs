//! Define-by-run reverse-mode autodiff.
//!
//! Every op appends a node to the [`Graph`] in execution order; node indices
//! double as the tape position, so [`Graph::backward`] walks indices in
//! reverse. Gradients accumulate: a node consumed by several ops receives the
//! sum of their contributions.

use crate::error::{Error, Result};
use crate::numerics::tensor::{log_softmax_slice, softmax_slice, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom_unary`]: `(input, grad_output) -> grad_input`.
pub type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &Tensor<F>) -> Tensor<F> + Send + Sync>;

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Softmax(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    TemperedKl {
        teacher: Var,
        student: Var,
        tau: F,
        p: Vec<F>,
        log_ratio: Vec<F>,
        q: Vec<F>,
        row_kl: Vec<F>,
    },
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ReplaceRows {
        x: Var,
        indices: Vec<usize>,
        src: Var,
    },
    SliceRows(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Custom(Var, BackwardFn<F>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient data, or `None` if nothing flowed to `v`.
    pub fn slice(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(0.044715);
    let half = F::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let value = half * x * (F::one() + t);
    let deriv = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x);
    (value, deriv)
}

/// GELU, tanh approximation.
pub fn gelu<F: Scalar>(x: F) -> F {
    gelu_parts(x).0
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push("param", t, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Copy of `v` cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", t, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push("add", t, Op::Add(a, b), rg)
    }

    /// `x[.., n] + bias[n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.last_dim();
        if bv.numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o = *o + *b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", t, Op::AddBias(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push("scale", t, Op::Scale(x, s), rg)
    }

    /// Normalizes over the last dimension, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?} with gamma {:?}, beta {:?}",
                    xv.shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        if eps <= F::zero() {
            return Err(Error::shape("layer_norm", "eps must be positive"));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let dn = F::from_usize(d).expect("dim");
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push("gelu", t, Op::Gelu(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = crate::numerics::tensor::softmax(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        self.push("softmax", t, Op::Softmax(x, axis), rg)
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of length `seq`. `q`, `k`, `v` are `[batch·seq, heads·dh]`;
    /// the result has the same shape. Attention weights are retained and can
    /// be read back with [`Graph::attention_probs`] as `[batch, heads, seq, seq]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rank() != 2 {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (rows, width) = (qv.shape()[0], qv.shape()[1]);
        if seq == 0 || rows % seq != 0 || heads == 0 || width % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{rows} rows, width {width}, seq {seq}, heads {heads}"),
            ));
        }
        let batch = rows / seq;
        let dh = width / heads;
        let scale = F::one() / F::from_usize(dh).expect("dim").sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let mut out = vec![F::zero(); rows * width];
        let mut scores = vec![F::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * width + col..][..dh];
                    for j in 0..seq {
                        let kj = &kd[(b * seq + j) * width + col..][..dh];
                        scores[j] = dot(qi, kj) * scale;
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    softmax_slice(&scores, p);
                    let o = &mut out[(b * seq + i) * width + col..][..dh];
                    for j in 0..seq {
                        let vj = &vd[(b * seq + j) * width + col..][..dh];
                        for c in 0..dh {
                            o[c] = o[c] + p[j] * vj[c];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, width], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            t,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Attention weights `[batch, heads, seq, seq]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<F>> {
        match &self.nodes[v.0].op {
            Op::Attention { seq, heads, probs, .. } => {
                let batch = probs.len() / (heads * seq * seq);
                Tensor::new(vec![batch, *heads, *seq, *seq], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} labels", lv.shape(), labels.len()),
            ));
        }
        let k = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::index("cross_entropy", format!("label {bad} outside [0, {k})")));
        }
        let bn = F::from_usize(labels.len()).expect("batch");
        let mut probs = vec![F::zero(); lv.numel()];
        let mut logp = vec![F::zero(); k];
        let mut total = F::zero();
        for (r, &y) in labels.iter().enumerate() {
            log_softmax_slice(lv.row(r), &mut logp);
            total = total - logp[y];
            for (p, l) in probs[r * k..(r + 1) * k].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        let t = Tensor::scalar(total / bn);
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `τ² · mean_b KL(softmax(teacher_b/τ) || softmax(student_b/τ))` over
    /// `[batch, K]` logits. Detach `teacher` beforehand to stop its gradient.
    pub fn tempered_kl(&mut self, teacher: Var, student: Var, tau: F) -> Result<Var> {
        let (tv, sv) = (self.value(teacher), self.value(student));
        if tv.shape() != sv.shape() || tv.rank() != 2 {
            return Err(Error::shape(
                "tempered_kl",
                format!("teacher {:?}, student {:?}", tv.shape(), sv.shape()),
            ));
        }
        if tau <= F::zero() {
            return Err(Error::shape("tempered_kl", "temperature must be positive"));
        }
        let (rows, k) = (tv.shape()[0], tv.shape()[1]);
        let mut p = vec![F::zero(); rows * k];
        let mut q = vec![F::zero(); rows * k];
        let mut log_ratio = vec![F::zero(); rows * k];
        let mut row_kl = vec![F::zero(); rows];
        let mut scaled_t = vec![F::zero(); k];
        let mut scaled_s = vec![F::zero(); k];
        let mut logp = vec![F::zero(); k];
        let mut logq = vec![F::zero(); k];
        for r in 0..rows {
            for j in 0..k {
                scaled_t[j] = tv.row(r)[j] / tau;
                scaled_s[j] = sv.row(r)[j] / tau;
            }
            log_softmax_slice(&scaled_t, &mut logp);
            log_softmax_slice(&scaled_s, &mut logq);
            let mut kl = F::zero();
            for j in 0..k {
                let pj = logp[j].exp();
                let lr = logp[j] - logq[j];
                p[r * k + j] = pj;
                q[r * k + j] = logq[j].exp();
                log_ratio[r * k + j] = lr;
                kl = kl + pj * lr;
            }
            row_kl[r] = kl;
        }
        let total: F = row_kl.iter().copied().sum();
        let value = tau * tau * total / F::from_usize(rows).expect("batch");
        let rg = self.rg(&[teacher, student]);
        self.push(
            "tempered_kl",
            Tensor::scalar(value),
            Op::TemperedKl {
                teacher,
                student,
                tau,
                p,
                log_ratio,
                q,
                row_kl,
            },
            rg,
        )
    }

    /// Stacks inputs with equal last dimension row-wise into `[Σ rows, d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let d = self.value(*first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.last_dim() != d {
                return Err(Error::shape(
                    "concat_rows",
                    format!("last dims {d} and {}", pv.last_dim()),
                ));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / d;
        let t = Tensor::new(vec![rows, d], data)?;
        let rg = self.rg(parts);
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// `out[i] = x[indices[i]]` over rows; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.last_dim());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::index("gather_rows", format!("row {i} of {rows}")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.rg(&[x]);
        self.push("gather_rows", t, Op::GatherRows(x, indices.to_vec()), rg)
    }

    /// Copy of `x` with row `indices[i]` replaced by row `i` of `src`.
    pub fn replace_rows(&mut self, x: Var, indices: &[usize], src: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(src));
        let d = xv.last_dim();
        if sv.last_dim() != d || sv.rows() != indices.len() {
            return Err(Error::shape(
                "replace_rows",
                format!("x {:?}, src {:?}, {} indices", xv.shape(), sv.shape(), indices.len()),
            ));
        }
        let mut seen = vec![false; xv.rows()];
        for &i in indices {
            if i >= xv.rows() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::index("replace_rows", format!("row {i} invalid or repeated")));
            }
        }
        let mut data = xv.data().to_vec();
        for (s, &i) in indices.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(sv.row(s));
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, src]);
        self.push(
            "replace_rows",
            t,
            Op::ReplaceRows {
                x,
                indices: indices.to_vec(),
                src,
            },
            rg,
        )
    }

    /// Rows `start..end` as `[end - start, d]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.rows() {
            return Err(Error::index(
                "slice_rows",
                format!("{start}..{end} of {} rows", xv.rows()),
            ));
        }
        let d = xv.last_dim();
        let t = Tensor::new(vec![end - start, d], xv.data()[start * d..end * d].to_vec())?;
        let rg = self.rg(&[x]);
        self.push("slice_rows", t, Op::SliceRows(x, start), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank {}", xv.rank())));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let t = Tensor::new(vec![n, m], transposed(xv.data(), m, n))?;
        let rg = self.rg(&[x]);
        self.push("transpose", t, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Elementwise map with a caller-supplied backward rule.
    pub fn custom_unary(&mut self, x: Var, forward: impl Fn(F) -> F, backward: BackwardFn<F>) -> Result<Var> {
        let t = self.value(x).map(forward);
        let rg = self.rg(&[x]);
        self.push("custom", t, Op::Custom(x, backward), rg)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node<F>, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [F])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.numel()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                // dA = dC·Bᵀ
                acc(*a, &|ga| {
                    for i in 0..m {
                        let gi = &gout[i * n..(i + 1) * n];
                        for kk in 0..k {
                            ga[i * k + kk] = ga[i * k + kk] + dot(gi, &bv.data()[kk * n..(kk + 1) * n]);
                        }
                    }
                });
                // dB = Aᵀ·dC
                acc(*b, &|gb| {
                    for i in 0..m {
                        let gi = &gout[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let a_ik = av.data()[i * k + kk];
                            let row = &mut gb[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                row[j] = row[j] + a_ik * gi[j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|g| add_into(g, gout));
                acc(*b, &|g| add_into(g, gout));
            }
            Op::AddBias(x, bias) => {
                acc(*x, &|g| add_into(g, gout));
                acc(*bias, &|g| {
                    let n = g.len();
                    for row in gout.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &|g| {
                for (gi, go) in g.iter_mut().zip(gout) {
                    *gi = *gi + *go * *s;
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                acc(*gamma, &|g| {
                    for (go, h) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] = g[j] + go[j] * h[j];
                        }
                    }
                });
                acc(*beta, &|g| {
                    for go in gout.chunks(d) {
                        add_into(g, go);
                    }
                });
                acc(*x, &|g| {
                    let dn = F::from_usize(d).expect("dim");
                    for (r, (go, h)) in gout.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut sum_dh = F::zero();
                        let mut sum_dh_h = F::zero();
                        for j in 0..d {
                            let dh = go[j] * gam[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * h[j];
                        }
                        let gr = &mut g[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = go[j] * gam[j];
                            gr[j] = gr[j] + rstd[r] / dn * (dn * dh - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|g| {
                    for ((gi, go), xi) in g.iter_mut().zip(gout).zip(xv) {
                        *gi = *gi + *go * gelu_parts(*xi).1;
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let len = y.shape()[*axis];
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let outer: usize = y.shape()[..*axis].iter().product();
                let yd = y.data();
                acc(*x, &|g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dotp = F::zero();
                            for j in 0..len {
                                dotp = dotp + gout[base + j * inner] * yd[base + j * inner];
                            }
                            for j in 0..len {
                                let at = base + j * inner;
                                g[at] = g[at] + yd[at] * (gout[at] - dotp);
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *seq, *heads, probs, gout, &mut acc),
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = gout[0] / F::from_usize(labels.len()).expect("batch");
                acc(*logits, &|g| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { F::one() } else { F::zero() };
                            g[r * k + j] = g[r * k + j] + (probs[r * k + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::TemperedKl {
                teacher,
                student,
                tau,
                p,
                log_ratio,
                q,
                row_kl,
            } => {
                let rows = row_kl.len();
                let k = p.len() / rows;
                let scale = gout[0] * *tau / F::from_usize(rows).expect("batch");
                acc(*student, &|g| {
                    for i in 0..rows * k {
                        g[i] = g[i] + (q[i] - p[i]) * scale;
                    }
                });
                acc(*teacher, &|g| {
                    for r in 0..rows {
                        for j in 0..k {
                            let i = r * k + j;
                            g[i] = g[i] + p[i] * (log_ratio[i] - row_kl[r]) * scale;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let piece = &gout[offset..offset + len];
                    acc(p, &|g| add_into(g, piece));
                    offset += len;
                }
            }
            Op::GatherRows(x, indices) => {
                let d = node.value.last_dim();
                acc(*x, &|g| {
                    for (s, &i) in indices.iter().enumerate() {
                        add_into(&mut g[i * d..(i + 1) * d], &gout[s * d..(s + 1) * d]);
                    }
                });
            }
            Op::ReplaceRows { x, indices, src } => {
                let d = node.value.last_dim();
                acc(*x, &|g| {
                    add_into(g, gout);
                    for &i in indices {
                        for j in 0..d {
                            g[i * d + j] = g[i * d + j] - gout[i * d + j];
                        }
                    }
                });
                acc(*src, &|g| {
                    for (s, &i) in indices.iter().enumerate() {
                        add_into(&mut g[s * d..(s + 1) * d], &gout[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let d = node.value.last_dim();
                acc(*x, &|g| add_into(&mut g[start * d..start * d + gout.len()], gout));
            }
            Op::Transpose(x) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, &|g| add_into(g, &transposed(gout, n, m)));
            }
            Op::Reshape(x) => acc(*x, &|g| add_into(g, gout)),
            Op::Sum(x) => acc(*x, &|g| {
                for gi in g.iter_mut() {
                    *gi = *gi + gout[0];
                }
            }),
            Op::Custom(x, rule) => {
                let xv = self.value(*x);
                let go = Tensor::new(node.value.shape().to_vec(), gout.to_vec()).expect("grad shape");
                let gi = rule(xv, &go);
                acc(*x, &|g| add_into(g, gi.data()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: &[F],
        gout: &[F],
        acc: &mut impl FnMut(Var, &dyn Fn(&mut [F])),
    ) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let width = self.value(q).shape()[1];
        let rows = self.value(q).shape()[0];
        let batch = rows / seq;
        let dh = width / heads;
        let scale = F::one() / F::from_usize(dh).expect("dim").sqrt();
        let mut dq = vec![F::zero(); rows * width];
        let mut dk = vec![F::zero(); rows * width];
        let mut dv = vec![F::zero(); rows * width];
        let mut dp = vec![F::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let goi = &gout[(b * seq + i) * width + col..][..dh];
                    let mut pdp = F::zero();
                    for j in 0..seq {
                        let vj = &vd[(b * seq + j) * width + col..][..dh];
                        dp[j] = dot(goi, vj);
                        pdp = pdp + p[j] * dp[j];
                        let dvj = &mut dv[(b * seq + j) * width + col..][..dh];
                        for c in 0..dh {
                            dvj[c] = dvj[c] + p[j] * goi[c];
                        }
                    }
                    let qi_at = (b * seq + i) * width + col;
                    for j in 0..seq {
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        let kj_at = (b * seq + j) * width + col;
                        for c in 0..dh {
                            dq[qi_at + c] = dq[qi_at + c] + ds * kd[kj_at + c];
                            dk[kj_at + c] = dk[kj_at + c] + ds * qd[qi_at + c];
                        }
                    }
                }
            }
        }
        acc(q, &|g| add_into(g, &dq));
        acc(k, &|g| add_into(g, &dk));
        acc(v, &|g| add_into(g, &dv));
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (x, y)| s + *x * *y)
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn transposed<F: Scalar>(data: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

pub(crate) fn matmul_into<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let a_ik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                row[j] = row[j] + a_ik * brow[j];
            }
        }
    }
}
