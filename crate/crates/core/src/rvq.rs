//! Residual vector quantization against a shared codebook.
//!
//! Each stage picks the codebook row nearest (squared Euclidean) to the
//! current residual, subtracts it and carries the new residual forward.
//! Ties break toward the lowest index so tokenization is identical across
//! platforms. Distances are plain 64-bit accumulations in coordinate
//! order — no norm-precomputation shortcuts — so the compared distance of
//! the winning code is bit-identical to the norm of the residual it leaves
//! behind.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Shared K x D codebook with per-entry usage counters.
///
/// Counters track how many times each index was emitted since the last
/// reset; `quantize` itself is pure — the training loop records usage
/// explicitly so inference never mutates the codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Tensor,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Self {
        assert_eq!(entries.shape.len(), 2, "codebook must be K x D");
        assert!(entries.shape[0] >= 2, "codebook needs at least 2 entries");
        let k = entries.shape[0];
        Codebook { entries, usage: vec![0; k] }
    }

    /// Rows drawn N(0, (1/sqrt(D))^2), giving unit expected row norm.
    pub fn init(k: usize, d: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Codebook::new(Tensor::randn(vec![k, d], std, rng))
    }

    pub fn len(&self) -> usize {
        self.entries.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape[1]
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        self.entries.row(k)
    }

    pub fn note_usage(&mut self, tokens: &[usize]) {
        for &t in tokens {
            self.usage[t] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }
}

/// Result of quantizing one latent.
///
/// Invariants: `z_q` is the stage-order sum of the selected codes;
/// `residuals[i] == residuals[i-1] - e_{k_i}` elementwise; `residuals[0]`
/// is the input latent.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub tokens: Vec<usize>,
    /// z_0 .. z_L — the input latent followed by each stage's residual.
    pub residuals: Vec<Vec<f64>>,
    pub z_q: Vec<f64>,
}

/// L-stage residual quantization of `z0`. Pure: usage counters are the
/// caller's concern (see [`Codebook::note_usage`]).
pub fn quantize(z0: &[f64], cb: &Codebook, stages: usize) -> Result<QuantizationResult> {
    if cb.len() == 0 {
        return Err(Error::Empty("codebook"));
    }
    if z0.len() != cb.dim() {
        return Err(Error::DimMismatch { expected: cb.dim(), got: z0.len() });
    }
    assert!(stages >= 1, "quantize needs at least one stage");
    if !z0.iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite("quantize input"));
    }

    let d = cb.dim();
    let mut tokens = Vec::with_capacity(stages);
    let mut residuals = Vec::with_capacity(stages + 1);
    let mut z_q = vec![0.0; d];
    let mut current = z0.to_vec();
    residuals.push(current.clone());
    let mut best_diff = vec![0.0; d];
    let mut diff = vec![0.0; d];
    for _ in 0..stages {
        let mut best_k = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..cb.len() {
            let row = cb.entry(k);
            let mut dist = 0.0;
            for j in 0..d {
                let dv = current[j] - row[j];
                diff[j] = dv;
                dist += dv * dv;
            }
            // strict `<` keeps the lowest index on ties
            if dist < best_d {
                best_d = dist;
                best_k = k;
                best_diff.copy_from_slice(&diff);
            }
        }
        if !best_d.is_finite() {
            return Err(Error::non_finite("quantize residual"));
        }
        let row = cb.entry(best_k);
        for j in 0..d {
            z_q[j] += row[j];
        }
        current.copy_from_slice(&best_diff);
        tokens.push(best_k);
        residuals.push(current.clone());
    }
    Ok(QuantizationResult { tokens, residuals, z_q })
}

/// Rebuilds a [`QuantizationResult`] for externally fixed token choices.
/// Used by gradient checking, where the argmin must not move under
/// parameter perturbations.
pub fn quantize_with_tokens(z0: &[f64], cb: &Codebook, tokens: &[usize]) -> Result<QuantizationResult> {
    let d = cb.dim();
    if z0.len() != d {
        return Err(Error::DimMismatch { expected: d, got: z0.len() });
    }
    let mut residuals = Vec::with_capacity(tokens.len() + 1);
    let mut z_q = vec![0.0; d];
    let mut current = z0.to_vec();
    residuals.push(current.clone());
    for &k in tokens {
        if k >= cb.len() {
            return Err(Error::IndexOutOfRange { index: k, k: cb.len() });
        }
        let row = cb.entry(k);
        for j in 0..d {
            current[j] -= row[j];
            z_q[j] += row[j];
        }
        residuals.push(current.clone());
    }
    Ok(QuantizationResult { tokens: tokens.to_vec(), residuals, z_q })
}

/// Batched quantization artifacts laid out for the tape-side loss terms.
#[derive(Debug, Clone)]
pub struct BatchQuantization {
    /// B x L token table, row-major.
    pub tokens: Vec<usize>,
    pub stages: usize,
    /// Quantized latents, [B, D].
    pub z_q: Tensor,
    /// Per-stage running code sums P_i = sum_{j<=i} e_{k_j}, each [B, D].
    pub partial_sums: Vec<Tensor>,
    /// Commitment/codebook residual targets z_{i-1}, flattened [B*L, D]
    /// in (sample, stage) order.
    pub residual_targets: Tensor,
}

/// Quantizes each row of `z0` ([B, D]).
pub fn quantize_batch(z0: &Tensor, cb: &Codebook, stages: usize) -> Result<BatchQuantization> {
    let (b, d) = (z0.shape[0], z0.shape[1]);
    let mut tokens = Vec::with_capacity(b * stages);
    let mut z_q = Tensor::zeros(vec![b, d]);
    let mut partial_sums = vec![Tensor::zeros(vec![b, d]); stages];
    let mut residual_targets = Tensor::zeros(vec![b * stages, d]);
    for r in 0..b {
        let q = quantize(z0.row(r), cb, stages)?;
        z_q.row_mut(r).copy_from_slice(&q.z_q);
        let mut run = vec![0.0; d];
        for i in 0..stages {
            residual_targets.row_mut(r * stages + i).copy_from_slice(&q.residuals[i]);
            let row = cb.entry(q.tokens[i]);
            for j in 0..d {
                run[j] += row[j];
            }
            partial_sums[i].row_mut(r).copy_from_slice(&run);
        }
        tokens.extend_from_slice(&q.tokens);
    }
    Ok(BatchQuantization { tokens, stages, z_q, partial_sums, residual_targets })
}

/// Replaces under-used codebook entries with encoder outputs sampled from
/// the given batch, plus small noise, and resets the usage counters.
/// Returns the indices that were reinitialized. A threshold of 0 is a
/// no-op (counters included).
pub fn reinit_dead_codes(
    cb: &mut Codebook,
    batch_latents: &Tensor,
    threshold: u64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if threshold == 0 {
        return Ok(Vec::new());
    }
    if batch_latents.shape[0] == 0 {
        return Err(Error::Empty("batch"));
    }
    assert_eq!(batch_latents.shape[1], cb.dim(), "latent width mismatch");
    let noise = Normal::new(0.0, REINIT_NOISE_STD).expect("valid std");
    let rows = batch_latents.shape[0];
    let mut reborn = Vec::new();
    for k in 0..cb.len() {
        if cb.usage[k] < threshold {
            let pick = rng.random_range(0..rows);
            let src = batch_latents.row(pick).to_vec();
            let dst = cb.entries.row_mut(k);
            for (dj, sj) in dst.iter_mut().zip(&src) {
                *dj = sj + noise.sample(rng);
            }
            reborn.push(k);
        }
    }
    cb.reset_usage();
    Ok(reborn)
}

pub const REINIT_NOISE_STD: f64 = 1e-3;

/// Captures the RNG draws `reinit_dead_codes` would make, for replay-style
/// verification in tests.
pub fn replay_reinit_row(
    batch_latents: &Tensor,
    state: &RngState,
) -> (usize, Vec<f64>) {
    let mut rng = state.restore();
    let noise = Normal::new(0.0, REINIT_NOISE_STD).expect("valid std");
    let pick = rng.random_range(0..batch_latents.shape[0]);
    let row: Vec<f64> = batch_latents
        .row(pick)
        .iter()
        .map(|v| v + noise.sample(&mut rng))
        .collect();
    (pick, row)
}
