//! Reverse-mode autodiff on a single-use Wengert tape.
//!
//! Every primitive records itself during the forward pass; `backward`
//! replays the tape in exact reverse order and accumulates adjoints into
//! parameter leaves. A tape is consumed by one backward call; a new
//! forward pass builds a new tape, which rules out stale-adjoint bugs.
//!
//! Non-finite outputs do not panic mid-graph: the first offending op is
//! remembered and surfaces as an error when the loss is extracted or
//! backward runs.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_S: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

/// exp(x) for x <= 0, accurate to ~1e-12 relative. Branch-light
/// range-reduction + Horner kernel that the compiler can vectorize across
/// element loops; libm's exp/tanh are an order of magnitude slower here
/// and tanh in particular falls off a cliff for moderate arguments.
#[inline]
fn exp_neg(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931471803691238e-1;
    const LN2_LO: f64 = 1.9082149292705877e-10;
    // branchless clamp keeps the whole kernel vectorizable; exp(-40) is
    // zero for every consumer's purposes
    let x = x.max(-40.0);
    let n = (x * LOG2E).round();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // degree-10 Taylor kernel on |r| <= ln2/2
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5040.0
                                    + r * (1.0 / 40320.0
                                        + r * (1.0 / 362880.0 + r * (1.0 / 3628800.0))))))))));
    // scale by 2^n via exponent bits; n is in [-58, 0] here
    let bits = ((n as i64 + 1023) as u64) << 52;
    p * f64::from_bits(bits)
}

/// tanh through exp_neg(-2|x|). Agrees with tanh to ~1e-12.
#[inline]
fn tanh_via_exp(x: f64) -> f64 {
    let e = exp_neg(-2.0 * x.abs());
    let t = (1.0 - e) / (1.0 + e);
    t.copysign(x)
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    /// a @ b^T with b stored row-major [n, k]
    MatmulNT(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows(Var),
    MeanPool { x: Var, batch: usize, seq: usize },
    AddPos { x: Var, pos: Var, batch: usize },
    Gelu { x: Var, tanh: Vec<f64> },
    Relu(Var),
    SumSq(Var),
    L1(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    /// Forward value is the quantized constant; gradient passes to `z` unchanged.
    StraightThrough { z: Var },
    /// Fused multi-head self-attention over packed [B*T, 3H] q|k|v columns.
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<String>,
}

/// Adjoints produced by one backward pass, indexed by `Var`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false, fault: None }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First op that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    /// Scalar value of a loss node, failing if any upstream op misbehaved.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        if let Some(op) = &self.fault {
            return Err(Error::non_finite(op.clone()));
        }
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::LossNotScalar { shape: t.shape.clone() });
        }
        Ok(t.data[0])
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, name: &str) -> Var {
        if self.fault.is_none() && !finite_all(&value.data) {
            self.fault = Some(name.to_string());
        }
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf: participates in values, never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false, "input")
    }

    /// Trainable leaf: receives an accumulated gradient per backward pass.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true, "param")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor { shape: ta.shape.clone(), data };
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let value = Tensor { shape: ta.shape.clone(), data };
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor { shape: ta.shape.clone(), data };
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), value, ng, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| c * x).collect();
        let value = Tensor { shape: ta.shape.clone(), data };
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), value, ng, "scale")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape.len(), 2, "matmul lhs must be 2-D");
        assert_eq!(tb.shape.len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (k2, n) = (tb.shape[0], tb.shape[1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &ta.data, &tb.data, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], out), ng, "matmul")
    }

    /// a[m,k] @ b[n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (n, k2) = (tb.shape[0], tb.shape[1]);
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, 1.0, &ta.data, &tb.data, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatmulNT(a, b), Tensor::new(vec![m, n], out), ng, "matmul_nt")
    }

    /// x[m,k] @ w[k,n] + row-broadcast b[n]
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (m, k) = (tx.shape[0], tx.shape[1]);
        let (k2, n) = (tw.shape[0], tw.shape[1]);
        assert_eq!(k, k2, "affine inner dimension mismatch");
        assert_eq!(tb.numel(), n, "affine bias length mismatch");
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            out[r * n..(r + 1) * n].copy_from_slice(&tb.data);
        }
        gemm(m, k, n, 1.0, &tx.data, &tw.data, 1.0, &mut out);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Affine { x, w, b }, Tensor::new(vec![m, n], out), ng, "affine")
    }

    /// Normalizes each row of x[r,c] to mean 0 / variance 1, then scales
    /// and shifts by gamma/beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = (tx.shape[0], tx.shape[1]);
        assert_eq!(tg.numel(), c, "layer_norm gamma length mismatch");
        assert_eq!(tb.numel(), c, "layer_norm beta length mismatch");
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for (i, row) in tx.data.chunks_exact(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            let xh_row = &mut xhat[i * c..(i + 1) * c];
            let out_row = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xh_row[j] = xh;
                out_row[j] = xh * tg.data[j] + tb.data[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            Tensor::new(vec![r, c], out),
            ng,
            "layer_norm",
        )
    }

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, c) = (tx.shape[0], tx.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data[i * c..(i + 1) * c];
            softmax_into(row, &mut out[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        self.push(Op::SoftmaxRows(x), Tensor::new(vec![r, c], out), ng, "softmax")
    }

    /// Mean over the sequence axis: [batch*seq, h] -> [batch, h].
    pub fn mean_pool(&mut self, x: Var, batch: usize, seq: usize) -> Var {
        let tx = self.value(x);
        let h = tx.shape[1];
        assert_eq!(tx.shape[0], batch * seq, "mean_pool row count mismatch");
        let mut out = vec![0.0; batch * h];
        let inv = 1.0 / seq as f64;
        for b in 0..batch {
            for t in 0..seq {
                let row = &tx.data[(b * seq + t) * h..(b * seq + t + 1) * h];
                for j in 0..h {
                    out[b * h + j] += row[j];
                }
            }
            for j in 0..h {
                out[b * h + j] *= inv;
            }
        }
        let ng = self.needs(x);
        self.push(Op::MeanPool { x, batch, seq }, Tensor::new(vec![batch, h], out), ng, "mean_pool")
    }

    /// Adds positional embeddings pos[seq,h] to every batch block of x[batch*seq,h].
    pub fn add_pos(&mut self, x: Var, pos: Var, batch: usize) -> Var {
        let (tx, tp) = (self.value(x), self.value(pos));
        let (seq, h) = (tp.shape[0], tp.shape[1]);
        assert_eq!(tx.shape[0], batch * seq, "add_pos row count mismatch");
        assert_eq!(tx.shape[1], h, "add_pos width mismatch");
        let mut out = tx.data.clone();
        for b in 0..batch {
            for t in 0..seq {
                let base = (b * seq + t) * h;
                let prow = &tp.data[t * h..(t + 1) * h];
                for j in 0..h {
                    out[base + j] += prow[j];
                }
            }
        }
        let ng = self.needs(x) || self.needs(pos);
        self.push(Op::AddPos { x, pos, batch }, Tensor::new(tx.shape.clone(), out), ng, "add_pos")
    }

    /// tanh-form GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut tanh = vec![0.0; tx.numel()];
        let mut out = vec![0.0; tx.numel()];
        for (i, &v) in tx.data.iter().enumerate() {
            let t = tanh_via_exp(GELU_S * (v + GELU_C * v * v * v));
            tanh[i] = t;
            out[i] = 0.5 * v * (1.0 + t);
        }
        let ng = self.needs(x);
        self.push(Op::Gelu { x, tanh }, Tensor { shape: tx.shape.clone(), data: out }, ng, "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = tx.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let ng = self.needs(x);
        self.push(Op::Relu(x), Tensor { shape: tx.shape.clone(), data: out }, ng, "relu")
    }

    /// Squared L2 norm of all elements, as a [1] scalar.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s: f64 = tx.data.iter().map(|v| v * v).sum();
        let ng = self.needs(x);
        self.push(Op::SumSq(x), Tensor::scalar(s), ng, "sum_sq")
    }

    /// L1 norm of all elements, as a [1] scalar.
    pub fn l1_norm(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s: f64 = tx.data.iter().map(|v| v.abs()).sum();
        let ng = self.needs(x);
        self.push(Op::L1(x), Tensor::scalar(s), ng, "l1_norm")
    }

    /// Embedding lookup: rows of table[k,d] selected by idx.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let tt = self.value(table);
        let (k, d) = (tt.shape[0], tt.shape[1]);
        let mut out = vec![0.0; idx.len() * d];
        for (i, &ix) in idx.iter().enumerate() {
            assert!(ix < k, "gather index {ix} out of range (k = {k})");
            out[i * d..(i + 1) * d].copy_from_slice(&tt.data[ix * d..(ix + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], out);
        let ng = self.needs(table);
        self.push(Op::GatherRows { table, idx }, value, ng, "gather_rows")
    }

    /// Straight-through estimator: the forward value is exactly `quantized`;
    /// the backward pass hands the incoming gradient to `z` unchanged. The
    /// quantized constant receives no gradient through this path.
    pub fn straight_through(&mut self, z: Var, quantized: Tensor) -> Var {
        assert_eq!(self.value(z).shape, quantized.shape, "straight_through shape mismatch");
        let ng = self.needs(z);
        self.push(Op::StraightThrough { z }, quantized, ng, "straight_through")
    }

    /// Multi-head scaled dot-product self-attention on packed projections.
    ///
    /// `qkv` is [batch*seq, 3h] with query, key and value column blocks;
    /// output is [batch*seq, h].
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let tq = self.value(qkv);
        assert_eq!(tq.shape[0], batch * seq, "attention row count mismatch");
        let h3 = tq.shape[1];
        assert_eq!(h3 % 3, 0, "attention expects packed q|k|v columns");
        let h = h3 / 3;
        assert_eq!(h % heads, 0, "hidden size not divisible by head count");
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut out = vec![0.0; batch * seq * h];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let data = &tq.data;
        // contiguous per-(batch, head) scratch; keys transposed to [dh, seq]
        // so the score accumulation runs d-outer over dense rows and
        // vectorizes instead of doing seq^2 short dot products
        let mut qh = vec![0.0; seq * dh];
        let mut kt = vec![0.0; seq * dh];
        let mut vh = vec![0.0; seq * dh];
        let mut scores = vec![0.0; seq * seq];
        for b in 0..batch {
            for hd in 0..heads {
                let qoff = hd * dh;
                let koff = h + hd * dh;
                let voff = 2 * h + hd * dh;
                for t in 0..seq {
                    let base = (b * seq + t) * h3;
                    qh[t * dh..(t + 1) * dh].copy_from_slice(&data[base + qoff..base + qoff + dh]);
                    vh[t * dh..(t + 1) * dh].copy_from_slice(&data[base + voff..base + voff + dh]);
                    for d in 0..dh {
                        kt[d * seq + t] = data[base + koff + d];
                    }
                }
                scores.fill(0.0);
                for i in 0..seq {
                    let qrow = &qh[i * dh..(i + 1) * dh];
                    let srow = &mut scores[i * seq..(i + 1) * seq];
                    for (d, &q) in qrow.iter().enumerate() {
                        let krow = &kt[d * seq..(d + 1) * seq];
                        for j in 0..seq {
                            srow[j] += q * krow[j];
                        }
                    }
                    for sv in srow.iter_mut() {
                        *sv *= scale;
                    }
                }
                let pbase = (b * heads + hd) * seq * seq;
                for i in 0..seq {
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    softmax_into(&scores[i * seq..(i + 1) * seq], prow);
                    let orow = &mut out[(b * seq + i) * h + hd * dh..(b * seq + i) * h + hd * dh + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vh[j * dh..(j + 1) * dh];
                        for d in 0..dh {
                            orow[d] += p * vrow[d];
                        }
                    }
                }
            }
        }
        let ng = self.needs(qkv);
        self.push(
            Op::Attention { qkv, batch, seq, heads, probs },
            Tensor::new(vec![batch * seq, h], out),
            ng,
            "attention",
        )
    }

    /// Reverse pass from a scalar loss. Consumes the tape: a second call
    /// is an error by design.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if let Some(op) = &self.fault {
            return Err(Error::non_finite(op.clone()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::LossNotScalar { shape: self.value(loss).shape.clone() });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                // Gradient only flows below param leaves; keep the adjoint
                // for callers that query intermediate vars.
                grads[i] = Some(g);
                continue;
            }
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, node: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        // Helper: get-or-zero the slot for an input var, skipping vars that
        // cannot reach a parameter.
        macro_rules! slot {
            ($v:expr) => {{
                let vi: Var = $v;
                if self.needs(vi) {
                    Some(
                        grads[vi.0]
                            .get_or_insert_with(|| Tensor::zeros(self.value(vi).shape.clone())),
                    )
                } else {
                    None
                }
            }};
        }

        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(da) = slot!(*a) {
                    for (d, &gv) in da.data.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                }
                if let Some(db) = slot!(*b) {
                    for (d, &gv) in db.data.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot!(*a) {
                    for (d, &gv) in da.data.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                }
                if let Some(db) = slot!(*b) {
                    for (d, &gv) in db.data.iter_mut().zip(&g.data) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                if let Some(da) = slot!(*a) {
                    for ((d, &gv), &bv) in da.data.iter_mut().zip(&g.data).zip(vb) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = slot!(*b) {
                    for ((d, &gv), &av) in db.data.iter_mut().zip(&g.data).zip(va) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = slot!(*a) {
                    for (d, &gv) in da.data.iter_mut().zip(&g.data) {
                        *d += c * gv;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if self.needs(*a) {
                    let da = grads[a.0].get_or_insert_with(|| Tensor::zeros(ta.shape.clone()));
                    gemm_nt(m, n, k, 1.0, &g.data, &tb.data, 1.0, &mut da.data);
                }
                if self.needs(*b) {
                    let db = grads[b.0].get_or_insert_with(|| Tensor::zeros(tb.shape.clone()));
                    gemm_tn(k, m, n, 1.0, &ta.data, &g.data, 1.0, &mut db.data);
                }
            }
            Op::MatmulNT(a, b) => {
                // c = a @ b^T, a[m,k], b[n,k], g[m,n]
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[0];
                if self.needs(*a) {
                    let da = grads[a.0].get_or_insert_with(|| Tensor::zeros(ta.shape.clone()));
                    gemm(m, n, k, 1.0, &g.data, &tb.data, 1.0, &mut da.data);
                }
                if self.needs(*b) {
                    let db = grads[b.0].get_or_insert_with(|| Tensor::zeros(tb.shape.clone()));
                    gemm_tn(n, m, k, 1.0, &g.data, &ta.data, 1.0, &mut db.data);
                }
            }
            Op::Affine { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (m, k) = (tx.shape[0], tx.shape[1]);
                let n = tw.shape[1];
                if self.needs(*x) {
                    let dx = grads[x.0].get_or_insert_with(|| Tensor::zeros(tx.shape.clone()));
                    gemm_nt(m, n, k, 1.0, &g.data, &tw.data, 1.0, &mut dx.data);
                }
                if self.needs(*w) {
                    let dw = grads[w.0].get_or_insert_with(|| Tensor::zeros(tw.shape.clone()));
                    gemm_tn(k, m, n, 1.0, &tx.data, &g.data, 1.0, &mut dw.data);
                }
                if let Some(db) = slot!(*b) {
                    for r in 0..m {
                        for j in 0..n {
                            db.data[j] += g.data[r * n + j];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let tg = self.value(*gamma);
                let (r, c) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                if let Some(dbeta) = slot!(*beta) {
                    for i in 0..r {
                        for j in 0..c {
                            dbeta.data[j] += g.data[i * c + j];
                        }
                    }
                }
                if let Some(dgamma) = slot!(*gamma) {
                    for i in 0..r {
                        for j in 0..c {
                            dgamma.data[j] += g.data[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(dx) = slot!(*x) {
                    let inv = 1.0 / c as f64;
                    for i in 0..r {
                        let grow = &g.data[i * c..(i + 1) * c];
                        let xrow = &xhat[i * c..(i + 1) * c];
                        let dxrow = &mut dx.data[i * c..(i + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = grow[j] * tg.data[j];
                            m1 += dxh;
                            m2 += dxh * xrow[j];
                        }
                        m1 *= inv;
                        m2 *= inv;
                        for j in 0..c {
                            let dxh = grow[j] * tg.data[j];
                            dxrow[j] += rstd[i] * (dxh - m1 - xrow[j] * m2);
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let p = &self.nodes[node].value;
                let (r, c) = (p.shape[0], p.shape[1]);
                if let Some(dx) = slot!(*x) {
                    for i in 0..r {
                        let prow = &p.data[i * c..(i + 1) * c];
                        let grow = &g.data[i * c..(i + 1) * c];
                        let dotgp: f64 = prow.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                        for j in 0..c {
                            dx.data[i * c + j] += prow[j] * (grow[j] - dotgp);
                        }
                    }
                }
            }
            Op::MeanPool { x, batch, seq } => {
                let h = self.value(*x).shape[1];
                if let Some(dx) = slot!(*x) {
                    let inv = 1.0 / *seq as f64;
                    for b in 0..*batch {
                        for t in 0..*seq {
                            for j in 0..h {
                                dx.data[(b * seq + t) * h + j] += g.data[b * h + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::AddPos { x, pos, batch } => {
                let (seq, h) = (self.value(*pos).shape[0], self.value(*pos).shape[1]);
                if let Some(dx) = slot!(*x) {
                    for (d, &gv) in dx.data.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                }
                if let Some(dp) = slot!(*pos) {
                    for b in 0..*batch {
                        for t in 0..seq {
                            for j in 0..h {
                                dp.data[t * h + j] += g.data[(b * seq + t) * h + j];
                            }
                        }
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let vx = &self.value(*x).data;
                if let Some(dx) = slot!(*x) {
                    for i in 0..vx.len() {
                        let v = vx[i];
                        let t = tanh[i];
                        let du = GELU_S * (1.0 + 3.0 * GELU_C * v * v);
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                        dx.data[i] += g.data[i] * d;
                    }
                }
            }
            Op::Relu(x) => {
                let vx = &self.value(*x).data;
                if let Some(dx) = slot!(*x) {
                    for i in 0..vx.len() {
                        if vx[i] > 0.0 {
                            dx.data[i] += g.data[i];
                        }
                    }
                }
            }
            Op::SumSq(x) => {
                let vx = &self.value(*x).data;
                let g0 = g.data[0];
                if let Some(dx) = slot!(*x) {
                    for i in 0..vx.len() {
                        dx.data[i] += 2.0 * g0 * vx[i];
                    }
                }
            }
            Op::L1(x) => {
                let vx = &self.value(*x).data;
                let g0 = g.data[0];
                if let Some(dx) = slot!(*x) {
                    for i in 0..vx.len() {
                        dx.data[i] += g0 * sign0(vx[i]);
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let d = self.value(*table).shape[1];
                if let Some(dt) = slot!(*table) {
                    for (i, &ix) in idx.iter().enumerate() {
                        for j in 0..d {
                            dt.data[ix * d + j] += g.data[i * d + j];
                        }
                    }
                }
            }
            Op::StraightThrough { z } => {
                if let Some(dz) = slot!(*z) {
                    for (d, &gv) in dz.data.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                }
            }
            Op::Attention { qkv, batch, seq, heads, probs } => {
                let tq = self.value(*qkv);
                let h3 = tq.shape[1];
                let h = h3 / 3;
                let dh = h / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let data = &tq.data;
                if let Some(dqkv) = slot!(*qkv) {
                    let mut dp = vec![0.0; *seq];
                    let mut dc = vec![0.0; *seq];
                    let mut qh = vec![0.0; seq * dh];
                    let mut kh = vec![0.0; seq * dh];
                    let mut vt = vec![0.0; seq * dh];
                    let mut gt = vec![0.0; seq * dh];
                    let mut dqh = vec![0.0; seq * dh];
                    let mut dkh = vec![0.0; seq * dh];
                    let mut dvh = vec![0.0; seq * dh];
                    for b in 0..*batch {
                        for hd in 0..*heads {
                            let qoff = hd * dh;
                            let koff = h + hd * dh;
                            let voff = 2 * h + hd * dh;
                            for t in 0..*seq {
                                let base = (b * seq + t) * h3;
                                qh[t * dh..(t + 1) * dh]
                                    .copy_from_slice(&data[base + qoff..base + qoff + dh]);
                                kh[t * dh..(t + 1) * dh]
                                    .copy_from_slice(&data[base + koff..base + koff + dh]);
                                let gbase = (b * seq + t) * h + hd * dh;
                                for d in 0..dh {
                                    vt[d * seq + t] = data[base + voff + d];
                                    gt[d * seq + t] = g.data[gbase + d];
                                }
                            }
                            dqh.fill(0.0);
                            dkh.fill(0.0);
                            dvh.fill(0.0);
                            let pbase = (b * heads + hd) * seq * seq;
                            for i in 0..*seq {
                                let grow = &g.data
                                    [(b * seq + i) * h + hd * dh..(b * seq + i) * h + hd * dh + dh];
                                let prow = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                                // dP = dO V^T, accumulated d-outer over dense rows
                                dp.fill(0.0);
                                for d in 0..dh {
                                    let gv = gt[d * seq + i];
                                    let vrow = &vt[d * seq..(d + 1) * seq];
                                    for j in 0..*seq {
                                        dp[j] += gv * vrow[j];
                                    }
                                }
                                let mut dotpp = 0.0;
                                for j in 0..*seq {
                                    dotpp += dp[j] * prow[j];
                                }
                                // dV rows and softmax backward with the scale folded in
                                for j in 0..*seq {
                                    let dvrow = &mut dvh[j * dh..(j + 1) * dh];
                                    for d in 0..dh {
                                        dvrow[d] += prow[j] * grow[d];
                                    }
                                    dc[j] = prow[j] * (dp[j] - dotpp) * scale;
                                }
                                // dQ and dK
                                let dqrow = &mut dqh[i * dh..(i + 1) * dh];
                                let qrow = &qh[i * dh..(i + 1) * dh];
                                for j in 0..*seq {
                                    let c = dc[j];
                                    let krow = &kh[j * dh..(j + 1) * dh];
                                    let dkrow = &mut dkh[j * dh..(j + 1) * dh];
                                    for d in 0..dh {
                                        dqrow[d] += c * krow[d];
                                        dkrow[d] += c * qrow[d];
                                    }
                                }
                            }
                            for t in 0..*seq {
                                let base = (b * seq + t) * h3;
                                for d in 0..dh {
                                    dqkv.data[base + qoff + d] += dqh[t * dh + d];
                                    dqkv.data[base + koff + d] += dkh[t * dh + d];
                                    dqkv.data[base + voff + d] += dvh[t * dh + d];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Branch-free whole-buffer finiteness test; the integer max-reduction
/// vectorizes where an early-exit `all()` would not. An all-ones exponent
/// field means NaN or infinity.
fn finite_all(data: &[f64]) -> bool {
    const EXP_MASK: u64 = 0x7ff0_0000_0000_0000;
    let mut m = 0u64;
    for &v in data {
        m = m.max(v.to_bits() & EXP_MASK);
    }
    m != EXP_MASK
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Max-shifted softmax of `row` written into `out`.
fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = exp_neg(v - max);
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha20Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data)
    }

    /// Central finite differences of `f` at `x`, one tensor input.
    fn fd_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut g = Tensor::zeros(x.shape.clone());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            g.data[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(analytic: &Tensor, fd: &Tensor) -> f64 {
        analytic
            .data
            .iter()
            .zip(&fd.data)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let p = tape.softmax_rows(x);
        assert_eq!(tape.value(p).data, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn layer_norm_matches_closed_form() {
        // independent oracle: hand-computed mean/variance of [1,2,3]
        let row = [1.0, 2.0, 3.0];
        let mean: f64 = row.iter().sum::<f64>() / 3.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        let expect: Vec<f64> = row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        assert!((expect[0] + 1.2247).abs() < 1e-3);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 3], row.to_vec()));
        let g = tape.input(Tensor::ones(vec![3]));
        let b = tape.input(Tensor::zeros(vec![3]));
        let y = tape.layer_norm(x, g, b, 1e-5);
        for (got, want) in tape.value(y).data.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_square_gradient() {
        // loss = sum(x*x), x = [1,-2] -> grad [2,-4]
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, -2.0]));
        let loss = tape.sum_sq(x);
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(x).unwrap().data, vec![2.0, -4.0]);
    }

    #[test]
    fn constant_branch_gets_zero_gradient() {
        // loss constant w.r.t. a parameter -> no gradient entry
        let mut tape = Tape::new();
        let unused = tape.param(Tensor::ones(vec![3]));
        let x = tape.param(Tensor::new(vec![2], vec![0.5, -0.25]));
        let loss = tape.sum_sq(x);
        let mut grads = tape.backward(loss).unwrap();
        assert!(grads.take(unused).is_none());
        assert!(grads.take(x).is_some());
    }

    #[test]
    fn backward_twice_is_refused() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(vec![2]));
        let loss = tape.sum_sq(x);
        tape.backward(loss).unwrap();
        match tape.backward(loss) {
            Err(Error::TapeConsumed) => {}
            other => panic!("expected TapeConsumed, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_is_reported_with_op_identity() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1], vec![1e308]));
        let y = tape.mul(x, x); // overflows to inf
        assert_eq!(tape.fault(), Some("mul"));
        match tape.backward(y) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "mul"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // loss = ||x @ w||^2 against the central-difference oracle
        let mut r = rng(11);
        let x0 = rand_tensor(vec![3, 4], &mut r);
        let w0 = rand_tensor(vec![4, 2], &mut r);
        let f = |w: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.input(x0.clone());
            let wv = tape.input(w.clone());
            let y = tape.matmul(x, wv);
            let l = tape.sum_sq(y);
            tape.scalar(l).unwrap()
        };
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let w = tape.param(w0.clone());
        let y = tape.matmul(x, w);
        let l = tape.sum_sq(y);
        let mut grads = tape.backward(l).unwrap();
        let analytic = grads.take(w).unwrap();
        let numeric = fd_grad(&f, &w0, 1e-5);
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut r = rng(4242);
        // Each case: closure building loss(tape, x_var) with a fixed partner
        // input; checks d loss / d x.
        type Build = Box<dyn Fn(&mut Tape, Var) -> Var>;
        let partner = rand_tensor(vec![4, 3], &mut r);
        let gamma = rand_tensor(vec![3], &mut r);
        let beta = rand_tensor(vec![3], &mut r);
        let w = rand_tensor(vec![3, 5], &mut r);
        let bias = rand_tensor(vec![5], &mut r);
        let pos = rand_tensor(vec![2, 3], &mut r);

        let cases: Vec<(&str, Vec<usize>, Build)> = vec![
            ("add", vec![4, 3], {
                let p = partner.clone();
                Box::new(move |t, x| {
                    let b = t.input(p.clone());
                    let y = t.add(x, b);
                    t.sum_sq(y)
                })
            }),
            ("sub", vec![4, 3], {
                let p = partner.clone();
                Box::new(move |t, x| {
                    let b = t.input(p.clone());
                    let y = t.sub(b, x);
                    t.sum_sq(y)
                })
            }),
            ("mul", vec![4, 3], {
                let p = partner.clone();
                Box::new(move |t, x| {
                    let b = t.input(p.clone());
                    let y = t.mul(x, b);
                    t.sum_sq(y)
                })
            }),
            ("scale", vec![4, 3], Box::new(|t, x| {
                let y = t.scale(x, -1.7);
                t.sum_sq(y)
            })),
            ("matmul_nt", vec![4, 3], {
                let p = partner.clone();
                Box::new(move |t, x| {
                    let b = t.input(p.clone());
                    let y = t.matmul_nt(x, b);
                    t.sum_sq(y)
                })
            }),
            ("affine", vec![4, 3], {
                let (w, bias) = (w.clone(), bias.clone());
                Box::new(move |t, x| {
                    let wv = t.input(w.clone());
                    let bv = t.input(bias.clone());
                    let y = t.affine(x, wv, bv);
                    t.sum_sq(y)
                })
            }),
            ("layer_norm", vec![4, 3], {
                let (g, b) = (gamma.clone(), beta.clone());
                Box::new(move |t, x| {
                    let gv = t.input(g.clone());
                    let bv = t.input(b.clone());
                    let y = t.layer_norm(x, gv, bv, 1e-5);
                    t.sum_sq(y)
                })
            }),
            ("softmax", vec![4, 3], Box::new(|t, x| {
                let p = t.softmax_rows(x);
                // weighted sum-of-squares keeps rows coupled
                let y = t.sum_sq(p);
                t.scale(y, 3.0)
            })),
            ("mean_pool", vec![4, 3], Box::new(|t, x| {
                let y = t.mean_pool(x, 2, 2);
                t.sum_sq(y)
            })),
            ("add_pos", vec![4, 3], {
                let p = pos.clone();
                Box::new(move |t, x| {
                    let pv = t.input(p.clone());
                    let y = t.add_pos(x, pv, 2);
                    t.sum_sq(y)
                })
            }),
            ("gelu", vec![4, 3], Box::new(|t, x| {
                let y = t.gelu(x);
                t.sum_sq(y)
            })),
            ("sum_sq", vec![4, 3], Box::new(|t, x| t.sum_sq(x))),
            ("gather_rows", vec![4, 3], Box::new(|t, x| {
                let y = t.gather_rows(x, vec![2, 0, 2, 1]);
                t.sum_sq(y)
            })),
            ("attention", vec![4, 6], Box::new(|t, x| {
                let y = t.attention(x, 2, 2, 2);
                t.sum_sq(y)
            })),
        ];

        for (name, shape, build) in cases {
            let x0 = rand_tensor(shape, &mut r);
            let f = |x: &Tensor| {
                let mut tape = Tape::new();
                let xv = tape.input(x.clone());
                let l = build(&mut tape, xv);
                tape.scalar(l).unwrap()
            };
            let mut tape = Tape::new();
            let xv = tape.param(x0.clone());
            let l = build(&mut tape, xv);
            let mut grads = tape.backward(l).unwrap();
            let analytic = grads.take(xv).unwrap();
            let numeric = fd_grad(&f, &x0, 1e-6);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-6, "primitive `{name}` rel err {err}");
        }
    }

    #[test]
    fn relu_and_l1_match_fd_away_from_kinks() {
        let mut r = rng(99);
        // keep magnitudes well away from 0 so FD never crosses the kink
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = r.random_range(0.2..1.0);
                if r.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x0 = Tensor::new(vec![4, 3], data);
        for prim in ["relu", "l1"] {
            let f = |x: &Tensor| {
                let mut tape = Tape::new();
                let xv = tape.input(x.clone());
                let l = match prim {
                    "relu" => {
                        let y = tape.relu(xv);
                        tape.sum_sq(y)
                    }
                    _ => tape.l1_norm(xv),
                };
                tape.scalar(l).unwrap()
            };
            let mut tape = Tape::new();
            let xv = tape.param(x0.clone());
            let l = match prim {
                "relu" => {
                    let y = tape.relu(xv);
                    tape.sum_sq(y)
                }
                _ => tape.l1_norm(xv),
            };
            let mut grads = tape.backward(l).unwrap();
            let analytic = grads.take(xv).unwrap();
            let numeric = fd_grad(&f, &x0, 1e-6);
            assert!(max_rel_err(&analytic, &numeric) < 1e-6, "{prim}");
        }
    }

    #[test]
    fn straight_through_forwards_quantized_and_routes_gradient() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]));
        let q = Tensor::new(vec![3], vec![1.0, -1.0, 0.5]);
        let st = tape.straight_through(z, q.clone());
        // forward equals the quantized value exactly
        assert_eq!(tape.value(st).data, q.data);
        let w = tape.input(Tensor::new(vec![3], vec![2.0, 3.0, 4.0]));
        let y = tape.mul(st, w);
        let l = tape.sum_sq(y);
        let mut grads = tape.backward(l).unwrap();
        // d l / d z == d l / d st (identity pass-through)
        let dz = grads.take(z).unwrap();
        let expect: Vec<f64> = q
            .data
            .iter()
            .zip(&tape.value(w).data)
            .map(|(&qv, &wv)| 2.0 * qv * wv * wv)
            .collect();
        for (a, b) in dz.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_values_are_reproducible() {
        let mut r = rng(5);
        let x0 = rand_tensor(vec![6, 6], &mut r);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(x0.clone());
            let qkv = tape.input(Tensor::ones(vec![6, 6]));
            let h = tape.matmul(x, qkv);
            let a = tape.attention(h, 1, 6, 1);
            let l = tape.sum_sq(a);
            tape.scalar(l).unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
