//! Reverse-mode differentiation over a flat list of recorded operations.
//!
//! A [`Tape`] is built fresh for each forward pass. Every operation pushes a
//! node holding its value; [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients into the [`ParamStore`] for trainable parameters.

use rand::Rng;

use crate::error::{shape_err, NnError, Result};
use crate::kernels::{self, gemm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One block of the block-diagonal attention pattern: queries
/// `q_start..q_start+q_len` attend to keys `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub segments: Vec<AttnSegment>,
    pub heads: usize,
    /// Query `i` sees keys `0..=i` of its segment only.
    pub causal: bool,
    /// Dropout applied to attention probabilities.
    pub dropout: f64,
}

/// Row-sparse mixing matrix: output row `r` is `Σ weight · x[col]` over `rows[r]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<f64>, mask: Option<Vec<f64>> },
    Embedding { table: Var, ids: Vec<usize> },
    EmbeddingMean { table: Var, groups: Vec<Vec<usize>> },
    ConcatRows(Var, Var),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { base: Var, idx: Vec<usize>, src: Var },
    SparseMix { x: Var, mix: SparseRows },
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    NllPick { logp: Var, targets: Vec<usize>, mask: Vec<bool> },
    KlRows { logp: Var, logq: Var, mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(NnError::NonFinite { op: name });
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

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Places a parameter on the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return Ok(*v);
        }
        let p = store.get(id);
        let v = self.push("param", p.value.clone(), Op::Param(id), true)?;
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        Ok(v)
    }

    /// Copy of `x` with the gradient path cut.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims(self.value(a));
        let (k2, m) = dims(self.value(b));
        if k != k2 {
            return shape_err("matmul", format!("[{n},{k}] x [{k2},{m}]"));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::matrix(n, m, out)?, Op::MatMul { a, b, b_t: false }, rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims(self.value(a));
        let (m, k2) = dims(self.value(b));
        if k != k2 {
            return shape_err("matmul_bt", format!("[{n},{k}] x [{m},{k2}]^T"));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), true, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        self.push("matmul_bt", Tensor::matrix(n, m, out)?, Op::MatMul { a, b, b_t: true }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push("add", t, Op::Add(a, b), rg)
    }

    /// Adds a `[1, c]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if self.value(bias).numel() != c {
            return shape_err("add_bias", format!("bias of {} for {c} columns", self.value(bias).numel()));
        }
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += b[j];
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", Tensor::matrix(r, c, out)?, Op::AddBias { x, bias }, rg)
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("scale", t, Op::Scale { x, c }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("gelu", t, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1, c]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err("layer_norm", "affine parameters must match columns");
        }
        let mut out = vec![0.0; r * c];
        let mut mean = Vec::with_capacity(r);
        let mut rstd = Vec::with_capacity(r);
        {
            let xv = self.value(x);
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            for i in 0..r {
                let (m, s) = kernels::layer_norm_row(xv.row(i), g, b, eps, &mut out[i * c..(i + 1) * c]);
                mean.push(m);
                rstd.push(s);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm { x, gamma, beta, mean, rstd },
            rg,
        )
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        for i in 0..t.rows() {
            kernels::softmax_in_place(t.row_mut(i));
        }
        let rg = self.rg(&[x]);
        self.push("softmax", t, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        for i in 0..t.rows() {
            kernels::log_softmax_in_place(t.row_mut(i));
        }
        let rg = self.rg(&[x]);
        self.push("log_softmax", t, Op::LogSoftmax(x), rg)
    }

    /// Inverted dropout. A rate of zero returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(NnError::Invalid(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("dropout", t, Op::Dropout { x, mask }, rg)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` is `[Nq, b]`, `k` and `v` are `[Nk, b]`; heads split the columns.
    /// Rows outside every segment produce zeros.
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        rng: &mut R,
    ) -> Result<Var> {
        let (nq, b) = dims(self.value(q));
        let (nk, bk) = dims(self.value(k));
        let (nv, bv) = dims(self.value(v));
        if b != bk || b != bv || nk != nv {
            return shape_err("attention", format!("q [{nq},{b}] k [{nk},{bk}] v [{nv},{bv}]"));
        }
        if spec.heads == 0 || b % spec.heads != 0 {
            return shape_err("attention", format!("{b} columns not divisible by {} heads", spec.heads));
        }
        for s in &spec.segments {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk {
                return shape_err("attention", format!("segment {s:?} exceeds inputs"));
            }
            if spec.causal && s.q_len > s.k_len {
                return shape_err("attention", "causal segment needs k_len >= q_len");
            }
        }
        let dh = b / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total: usize = spec.segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * spec.heads;
        let mut probs = vec![0.0; total];
        let mut mask = if spec.dropout > 0.0 { Some(vec![0.0; total]) } else { None };
        let keep = 1.0 / (1.0 - spec.dropout);
        let mut out = vec![0.0; nq * b];
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            let mut off = 0;
            for s in &spec.segments {
                for h in 0..spec.heads {
                    let c0 = h * dh;
                    for i in 0..s.q_len {
                        let qi = &qd[(s.q_start + i) * b + c0..(s.q_start + i) * b + c0 + dh];
                        let visible = if spec.causal { i + 1 } else { s.k_len };
                        let row = &mut probs[off + i * s.k_len..off + (i + 1) * s.k_len];
                        for j in 0..visible {
                            let kj = &kd[(s.k_start + j) * b + c0..(s.k_start + j) * b + c0 + dh];
                            row[j] = kernels::dot(qi, kj) * scale;
                        }
                        kernels::softmax_in_place(&mut row[..visible]);
                        let orow = &mut out[(s.q_start + i) * b + c0..(s.q_start + i) * b + c0 + dh];
                        for j in 0..visible {
                            let mut p = row[j];
                            if let Some(m) = mask.as_mut() {
                                let mj = if rng.gen::<f64>() < spec.dropout { 0.0 } else { keep };
                                m[off + i * s.k_len + j] = mj;
                                p *= mj;
                            }
                            if p != 0.0 {
                                let vj = &vd[(s.k_start + j) * b + c0..(s.k_start + j) * b + c0 + dh];
                                for (o, x) in orow.iter_mut().zip(vj) {
                                    *o += p * x;
                                }
                            }
                        }
                    }
                    off += s.q_len * s.k_len;
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            Tensor::matrix(nq, b, out)?,
            Op::Attention { q, k, v, spec, probs, mask },
            rg,
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vsz, c) = dims(self.value(table));
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= vsz {
                return Err(NnError::IndexOutOfRange { op: "embedding", index: id, bound: vsz });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(&[table]);
        self.push(
            "embedding",
            Tensor::matrix(ids.len(), c, out)?,
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        )
    }

    /// Row `i` is the mean of the `table` rows listed in `groups[i]`.
    pub fn embedding_mean(&mut self, table: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (vsz, c) = dims(self.value(table));
        let mut out = vec![0.0; groups.len() * c];
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(NnError::Invalid("embedding_mean over an empty group".into()));
            }
            let w = 1.0 / g.len() as f64;
            for &id in g {
                if id >= vsz {
                    return Err(NnError::IndexOutOfRange { op: "embedding_mean", index: id, bound: vsz });
                }
                for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(self.value(table).row(id)) {
                    *o += w * x;
                }
            }
        }
        let rg = self.rg(&[table]);
        self.push(
            "embedding_mean",
            Tensor::matrix(groups.len(), c, out)?,
            Op::EmbeddingMean { table, groups: groups.to_vec() },
            rg,
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = dims(self.value(a));
        let (rb, cb) = dims(self.value(b));
        if ca != cb {
            return shape_err("concat_rows", format!("{ca} vs {cb} columns"));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        self.push("concat_rows", Tensor::matrix(ra + rb, ca, data)?, Op::ConcatRows(a, b), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if start + len > r {
            return shape_err("slice_rows", format!("{start}+{len} > {r}"));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        self.push("slice_rows", Tensor::matrix(len, c, data)?, Op::SliceRows { x, start }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(NnError::IndexOutOfRange { op: "gather_rows", index: i, bound: r });
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(&[x]);
        self.push(
            "gather_rows",
            Tensor::matrix(idx.len(), c, data)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        )
    }

    /// Copy of `base` with `src[i]` added onto row `idx[i]`.
    pub fn scatter_add_rows(&mut self, base: Var, idx: &[usize], src: Var) -> Result<Var> {
        let (r, c) = dims(self.value(base));
        let (rs, cs) = dims(self.value(src));
        if cs != c || rs != idx.len() {
            return shape_err("scatter_add_rows", format!("src [{rs},{cs}] for {} rows of width {c}", idx.len()));
        }
        let mut out = self.value(base).data().to_vec();
        for (k, &i) in idx.iter().enumerate() {
            if i >= r {
                return Err(NnError::IndexOutOfRange { op: "scatter_add_rows", index: i, bound: r });
            }
            for (o, s) in out[i * c..(i + 1) * c].iter_mut().zip(self.value(src).row(k)) {
                *o += s;
            }
        }
        let rg = self.rg(&[base, src]);
        self.push(
            "scatter_add_rows",
            Tensor::matrix(r, c, out)?,
            Op::ScatterAddRows { base, idx: idx.to_vec(), src },
            rg,
        )
    }

    /// Output row `r` = `Σ w · x[u]` over `(u, w)` in `mix.rows[r]`.
    pub fn sparse_mix(&mut self, x: Var, mix: &SparseRows) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        let mut out = vec![0.0; mix.rows.len() * c];
        for (v, row) in mix.rows.iter().enumerate() {
            for &(u, w) in row {
                if u >= r {
                    return Err(NnError::IndexOutOfRange { op: "sparse_mix", index: u, bound: r });
                }
                for (o, xv) in out[v * c..(v + 1) * c].iter_mut().zip(self.value(x).row(u)) {
                    *o += w * xv;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "sparse_mix",
            Tensor::matrix(mix.rows.len(), c, out)?,
            Op::SparseMix { x, mix: mix.clone() },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ c_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            if self.value(v).numel() != 1 {
                return shape_err("weighted_sum", "terms must be scalars");
            }
            s += c * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// `-Σ logp[r, targets[r]]` over rows with `mask[r]`.
    pub fn nll(&mut self, logp: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (r, c) = dims(self.value(logp));
        if targets.len() != r || mask.len() != r {
            return shape_err("nll", format!("{r} rows, {} targets, {} mask", targets.len(), mask.len()));
        }
        let mut s = 0.0;
        for i in 0..r {
            if mask[i] {
                if targets[i] >= c {
                    return Err(NnError::IndexOutOfRange { op: "nll", index: targets[i], bound: c });
                }
                s -= self.value(logp).data()[i * c + targets[i]];
            }
        }
        let rg = self.rg(&[logp]);
        self.push(
            "nll",
            Tensor::scalar(s),
            Op::NllPick { logp, targets: targets.to_vec(), mask: mask.to_vec() },
            rg,
        )
    }

    /// Cross-entropy of raw logits: `nll(log_softmax(logits))`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        self.nll(lp, targets, mask)
    }

    /// `Σ_r Σ_k p_k (log p_k − log q_k)` over masked rows, from log-probabilities.
    /// The first argument is the distribution the expectation is taken under.
    pub fn kl_div(&mut self, logp: Var, logq: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = dims(self.value(logp));
        if self.value(logq).shape() != self.value(logp).shape() || mask.len() != r {
            return shape_err("kl_div", "log-probability tables must match");
        }
        let lp = self.value(logp).data();
        let lq = self.value(logq).data();
        let mut s = 0.0;
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            for k in i * c..(i + 1) * c {
                let p = lp[k].exp();
                if p > 0.0 {
                    s += p * (lp[k] - lq[k]);
                }
            }
        }
        let rg = self.rg(&[logp, logq]);
        self.push("kl_div", Tensor::scalar(s), Op::KlRows { logp, logq, mask: mask.to_vec() }, rg)
    }

    /// Back-propagates from scalar `loss`, accumulating into trainable
    /// parameters of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err("backward", "loss must be a scalar");
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate(*id, g),
            Op::MatMul { a, b, b_t } => {
                let (n, m) = dims(&node.value);
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = av.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    // da = g · bᵀ  (or g · b when b was transposed)
                    gemm(n, m, k, g, false, bv.data(), !*b_t, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *b_t {
                        // d(b) = gᵀ · a   [m,k]
                        gemm(m, n, k, g, true, av.data(), false, 1.0, gb);
                    } else {
                        // d(b) = aᵀ · g   [k,m]
                        gemm(k, n, m, av.data(), true, g, false, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let c = node.value.cols();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (r, c) = dims(&node.value);
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    for j in 0..c {
                        xhat[j] = (xv[i * c + j] - mean[i]) * rstd[i];
                        dxhat[j] = gr[j] * gam[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = rstd[i] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    gg.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    gb.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
                }
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            gx[i * c + j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs, mask } => {
                self.attention_backward(g, *q, *k, *v, spec, probs, mask.as_deref(), grads);
            }
            Op::Embedding { table, ids } => {
                let c = node.value.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::EmbeddingMean { table, groups } => {
                let c = node.value.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, grp) in groups.iter().enumerate() {
                        let w = 1.0 / grp.len() as f64;
                        for &id in grp {
                            for j in 0..c {
                                gt[id * c + j] += w * g[r * c + j];
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&g[..na]).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(&g[na..]).for_each(|(x, y)| *x += y);
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    gx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::ScatterAddRows { base, idx, src } => {
                let c = node.value.cols();
                if let Some(gb) = self.acc(grads, *base) {
                    gb.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gs) = self.acc(grads, *src) {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gs[k * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::SparseMix { x, mix } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (v, row) in mix.rows.iter().enumerate() {
                        for &(u, w) in row {
                            for j in 0..c {
                                gx[u * c + j] += w * g[v * c + j];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if let Some(gv) = self.acc(grads, v) {
                        gv[0] += c * g[0];
                    }
                }
            }
            Op::NllPick { logp, targets, mask } => {
                let c = self.value(*logp).cols();
                if let Some(gl) = self.acc(grads, *logp) {
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if m {
                            gl[i * c + t] -= g[0];
                        }
                    }
                }
            }
            Op::KlRows { logp, logq, mask } => {
                let c = self.value(*logp).cols();
                let lp = self.value(*logp).data();
                let lq = self.value(*logq).data();
                if let Some(gp) = self.acc(grads, *logp) {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for k in i * c..(i + 1) * c {
                                let p = lp[k].exp();
                                gp[k] += g[0] * p * (lp[k] - lq[k] + 1.0);
                            }
                        }
                    }
                }
                if let Some(gq) = self.acc(grads, *logq) {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for k in i * c..(i + 1) * c {
                                gq[k] -= g[0] * lp[k].exp();
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[f64],
        mask: Option<&[f64]>,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let b = self.value(q).cols();
        let dh = b / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = Vec::new();
        let mut off = 0;
        for s in &spec.segments {
            for h in 0..spec.heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let visible = if spec.causal { i + 1 } else { s.k_len };
                    let base = off + i * s.k_len;
                    let p = &probs[base..base + visible];
                    let qrow = (s.q_start + i) * b + c0;
                    let go = &g[qrow..qrow + dh];
                    dp.clear();
                    for j in 0..visible {
                        let vrow = (s.k_start + j) * b + c0;
                        let m = mask.map_or(1.0, |m| m[base + j]);
                        let d = kernels::dot(go, &vd[vrow..vrow + dh]) * m;
                        dp.push(d);
                        let pj = p[j] * m;
                        if pj != 0.0 {
                            for (x, y) in dv[vrow..vrow + dh].iter_mut().zip(go) {
                                *x += pj * y;
                            }
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..visible {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (s.k_start + j) * b + c0;
                        for t in 0..dh {
                            dq[qrow + t] += ds * kd[krow + t];
                            dk[krow + t] += ds * qd[qrow + t];
                        }
                    }
                }
                off += s.q_len * s.k_len;
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.acc(grads, var) {
                gv.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
        }
    }
}
