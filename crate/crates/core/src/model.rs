//! Encoder-quantizer-decoder model and its training losses.
//!
//! The encoder reshapes a flat expression vector into a short token
//! sequence, runs it through a pre-norm transformer, mean-pools and
//! projects into the latent that the residual quantizer codes. The
//! decoder is a single affine map, which is what makes per-token additive
//! decomposition of a reconstruction possible.

use crate::error::{Error, Result};
use crate::rvq::{self, Codebook};
use crate::tape::{Tape, Var};
use crate::tensor::{vec_mat, Tensor};
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

/// Which residual the commitment loss pulls toward the selected code.
/// `Pre` compares the residual the code was chosen for; `Post` keeps the
/// literal post-subtraction reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommitTarget {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookUpdate {
    /// Stop-gradient codebook loss with weight 1.
    Loss,
    /// Exponential moving average of assigned residuals.
    Ema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub input_dim: usize,
    /// Sequence length T the input vector is reshaped into.
    pub tokens: usize,
    /// Per-token width d; tokens * token_dim == input_dim.
    pub token_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    /// Number of residual quantization stages L.
    pub stages: usize,
    pub beta_commit: f64,
    pub lambda_orth: f64,
    pub lambda_reg: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub activation: Activation,
    pub commit_target: CommitTarget,
    pub codebook_update: CodebookUpdate,
    pub ema_decay: f64,
    pub orth_on_decoded: bool,
    pub dead_code_reinit: bool,
    pub dead_code_threshold: u64,
    pub standardize: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            input_dim: 50,
            tokens: 10,
            token_dim: 5,
            hidden: 128,
            layers: 6,
            heads: 4,
            latent_dim: 50,
            codebook_size: 64,
            stages: 4,
            beta_commit: 0.25,
            lambda_orth: 1.0,
            lambda_reg: 0.1,
            weight_decay: 1e-4,
            lr: 1e-4,
            batch: 512,
            epochs: 500,
            seed: 0,
            activation: Activation::Gelu,
            commit_target: CommitTarget::Pre,
            codebook_update: CodebookUpdate::Loss,
            ema_decay: 0.99,
            orth_on_decoded: false,
            dead_code_reinit: true,
            dead_code_threshold: 1,
            standardize: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.tokens * self.token_dim != self.input_dim {
            return err(format!(
                "tokens * token_dim must equal input_dim ({} * {} != {})",
                self.tokens, self.token_dim, self.input_dim
            ));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return err(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.codebook_size < 2 {
            return err(format!("codebook_size must be >= 2, got {}", self.codebook_size));
        }
        if self.stages < 1 {
            return err("stages must be >= 1".into());
        }
        if self.layers < 1 {
            return err("layers must be >= 1".into());
        }
        if self.latent_dim < 1 || self.input_dim < 1 {
            return err("dimensions must be positive".into());
        }
        for (name, v) in [
            ("beta_commit", self.beta_commit),
            ("lambda_orth", self.lambda_orth),
            ("lambda_reg", self.lambda_reg),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) {
                return err(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.batch < 1 {
            return err("batch must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return err(format!("ema_decay must be in [0,1), got {}", self.ema_decay));
        }
        Ok(())
    }

    /// Paper-scale defaults.
    pub fn paper() -> Self {
        Hyperparams::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub pos: Tensor,
    pub layers: Vec<EncoderLayerParams>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Affine decoder. `w` is stored [latent_dim, input_dim] so that
/// `psi_hat = z @ w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl DecoderParams {
    /// psi_hat = z @ W + b.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.w.shape[0] {
            return Err(Error::DimMismatch { expected: self.w.shape[0], got: z.len() });
        }
        let mut out = vec_mat(z, &self.w);
        for (o, &b) in out.iter_mut().zip(&self.b.data) {
            *o += b;
        }
        Ok(out)
    }

    /// Bias-free contribution of a single code: W e_k.
    pub fn token_offset(&self, cb: &Codebook, k: usize) -> Result<Vec<f64>> {
        if k >= cb.len() {
            return Err(Error::IndexOutOfRange { index: k, k: cb.len() });
        }
        Ok(vec_mat(cb.entry(k), &self.w))
    }

    /// Single-code decode: b + W e_k (bias included), or W e_k alone.
    pub fn token_template(&self, cb: &Codebook, k: usize, include_bias: bool) -> Result<Vec<f64>> {
        let mut out = self.token_offset(cb, k)?;
        if include_bias {
            for (o, &b) in out.iter_mut().zip(&self.b.data) {
                *o = b + *o;
            }
        }
        Ok(out)
    }

    /// Canonical reconstruction of a token sequence, built additively:
    /// starting from the bias, per-token offsets W e_{k_i} are accumulated
    /// in token order. This exact summation order is the contract that
    /// makes the additive decomposition bitwise reproducible.
    pub fn decode_tokens(&self, cb: &Codebook, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut acc = self.b.data.clone();
        for &k in tokens {
            let off = self.token_offset(cb, k)?;
            for (a, o) in acc.iter_mut().zip(&off) {
                *a += o;
            }
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub enc: EncoderParams,
    pub dec: DecoderParams,
    pub codebook: Codebook,
}

const INIT_STD: f64 = 0.02;

/// Draws fresh parameters. The draw order is fixed (input projection,
/// positions, layers in order, output projection, decoder, codebook) so a
/// given init-stream state always produces the same model.
pub fn init_params(hp: &Hyperparams, rng: &mut impl rand::Rng) -> ModelParams {
    let (d, h, t) = (hp.token_dim, hp.hidden, hp.tokens);
    let w_in = Tensor::randn(vec![d, h], INIT_STD, rng);
    let b_in = Tensor::zeros(vec![h]);
    let pos = Tensor::randn(vec![t, h], INIT_STD, rng);
    let mut layers = Vec::with_capacity(hp.layers);
    for _ in 0..hp.layers {
        layers.push(EncoderLayerParams {
            ln1_g: Tensor::ones(vec![h]),
            ln1_b: Tensor::zeros(vec![h]),
            w_qkv: Tensor::randn(vec![h, 3 * h], INIT_STD, rng),
            b_qkv: Tensor::zeros(vec![3 * h]),
            w_o: Tensor::randn(vec![h, h], INIT_STD, rng),
            b_o: Tensor::zeros(vec![h]),
            ln2_g: Tensor::ones(vec![h]),
            ln2_b: Tensor::zeros(vec![h]),
            w_up: Tensor::randn(vec![h, 4 * h], INIT_STD, rng),
            b_up: Tensor::zeros(vec![4 * h]),
            w_down: Tensor::randn(vec![4 * h, h], INIT_STD, rng),
            b_down: Tensor::zeros(vec![h]),
        });
    }
    let w_out = Tensor::randn(vec![h, hp.latent_dim], INIT_STD, rng);
    let b_out = Tensor::zeros(vec![hp.latent_dim]);
    let dec = DecoderParams {
        w: Tensor::randn(vec![hp.latent_dim, hp.input_dim], INIT_STD, rng),
        b: Tensor::zeros(vec![hp.input_dim]),
    };
    let codebook = Codebook::init(hp.codebook_size, hp.latent_dim, rng);
    ModelParams { enc: EncoderParams { w_in, b_in, pos, layers, w_out, b_out }, dec, codebook }
}

/// Parameters at a generic, healthy scale for gradient checking. The tiny
/// training init (std 0.02) leaves deep-path gradients so small that
/// finite-difference roundoff dominates them; checking at std ~0.2 probes
/// the same code paths with well-conditioned sensitivities.
pub fn random_params(hp: &Hyperparams, std: f64, rng: &mut impl rand::Rng) -> ModelParams {
    let base = init_params(hp, rng);
    let (_, tensors) = base.flatten();
    let redrawn: Vec<Tensor> = tensors
        .iter()
        .map(|t| {
            let mut fresh = Tensor::randn(t.shape.clone(), std, rng);
            // keep layer-norm gains centred at 1
            if t.data.iter().all(|&v| v == 1.0) {
                for v in fresh.data.iter_mut() {
                    *v = 1.0 + *v * 0.25;
                }
            }
            fresh
        })
        .collect();
    ModelParams::from_flat(hp, &redrawn).expect("shapes preserved")
}

/// Parameter names in canonical order for a given architecture; checkpoint
/// layout, optimizer slots and gradient extraction all follow this order.
pub fn canonical_param_names(hp: &Hyperparams) -> Vec<String> {
    let mut out: Vec<String> =
        vec!["enc.w_in".into(), "enc.b_in".into(), "enc.pos".into()];
    for i in 0..hp.layers {
        for field in [
            "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o", "ln2_g", "ln2_b", "w_up", "b_up",
            "w_down", "b_down",
        ] {
            out.push(format!("enc.l{i}.{field}"));
        }
    }
    out.push("enc.w_out".into());
    out.push("enc.b_out".into());
    out.push("dec.w".into());
    out.push("dec.b".into());
    out.push("codebook".into());
    out
}

impl ModelParams {
    /// Canonical (name, tensor) listing; mirrors [`canonical_param_names`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("enc.w_in".into(), &self.enc.w_in),
            ("enc.b_in".into(), &self.enc.b_in),
            ("enc.pos".into(), &self.enc.pos),
        ];
        for (i, l) in self.enc.layers.iter().enumerate() {
            out.push((format!("enc.l{i}.ln1_g"), &l.ln1_g));
            out.push((format!("enc.l{i}.ln1_b"), &l.ln1_b));
            out.push((format!("enc.l{i}.w_qkv"), &l.w_qkv));
            out.push((format!("enc.l{i}.b_qkv"), &l.b_qkv));
            out.push((format!("enc.l{i}.w_o"), &l.w_o));
            out.push((format!("enc.l{i}.b_o"), &l.b_o));
            out.push((format!("enc.l{i}.ln2_g"), &l.ln2_g));
            out.push((format!("enc.l{i}.ln2_b"), &l.ln2_b));
            out.push((format!("enc.l{i}.w_up"), &l.w_up));
            out.push((format!("enc.l{i}.b_up"), &l.b_up));
            out.push((format!("enc.l{i}.w_down"), &l.w_down));
            out.push((format!("enc.l{i}.b_down"), &l.b_down));
        }
        out.push(("enc.w_out".into(), &self.enc.w_out));
        out.push(("enc.b_out".into(), &self.enc.b_out));
        out.push(("dec.w".into(), &self.dec.w));
        out.push(("dec.b".into(), &self.dec.b));
        out.push(("codebook".into(), &self.codebook.entries));
        out
    }

    /// Mutable references in canonical order, for in-place optimizer steps.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            vec![&mut self.enc.w_in, &mut self.enc.b_in, &mut self.enc.pos];
        for l in self.enc.layers.iter_mut() {
            out.push(&mut l.ln1_g);
            out.push(&mut l.ln1_b);
            out.push(&mut l.w_qkv);
            out.push(&mut l.b_qkv);
            out.push(&mut l.w_o);
            out.push(&mut l.b_o);
            out.push(&mut l.ln2_g);
            out.push(&mut l.ln2_b);
            out.push(&mut l.w_up);
            out.push(&mut l.b_up);
            out.push(&mut l.w_down);
            out.push(&mut l.b_down);
        }
        out.push(&mut self.enc.w_out);
        out.push(&mut self.enc.b_out);
        out.push(&mut self.dec.w);
        out.push(&mut self.dec.b);
        out.push(&mut self.codebook.entries);
        out
    }

    pub fn flatten(&self) -> (Vec<String>, Vec<Tensor>) {
        let named = self.named_tensors();
        let names = named.iter().map(|(n, _)| n.clone()).collect();
        let tensors = named.into_iter().map(|(_, t)| t.clone()).collect();
        (names, tensors)
    }

    /// Rebuilds a model from tensors in canonical order.
    pub fn from_flat(hp: &Hyperparams, tensors: &[Tensor]) -> Result<Self> {
        let expected = 3 + 12 * hp.layers + 2 + 2 + 1;
        if tensors.len() != expected {
            return Err(Error::Corrupt(format!(
                "expected {expected} tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.iter().cloned();
        let mut next = || it.next().expect("length checked");
        let w_in = next();
        let b_in = next();
        let pos = next();
        let mut layers = Vec::with_capacity(hp.layers);
        for _ in 0..hp.layers {
            layers.push(EncoderLayerParams {
                ln1_g: next(),
                ln1_b: next(),
                w_qkv: next(),
                b_qkv: next(),
                w_o: next(),
                b_o: next(),
                ln2_g: next(),
                ln2_b: next(),
                w_up: next(),
                b_up: next(),
                w_down: next(),
                b_down: next(),
            });
        }
        let w_out = next();
        let b_out = next();
        let dec = DecoderParams { w: next(), b: next() };
        let codebook = Codebook::new(next());
        let params = ModelParams {
            enc: EncoderParams { w_in, b_in, pos, layers, w_out, b_out },
            dec,
            codebook,
        };
        params.check_shapes(hp)?;
        Ok(params)
    }

    pub fn check_shapes(&self, hp: &Hyperparams) -> Result<()> {
        let (d, h, t) = (hp.token_dim, hp.hidden, hp.tokens);
        let mut check = |name: &str, tensor: &Tensor, shape: &[usize]| -> Result<()> {
            if tensor.shape != shape {
                return Err(Error::Corrupt(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    tensor.shape
                )));
            }
            Ok(())
        };
        check("enc.w_in", &self.enc.w_in, &[d, h])?;
        check("enc.b_in", &self.enc.b_in, &[h])?;
        check("enc.pos", &self.enc.pos, &[t, h])?;
        if self.enc.layers.len() != hp.layers {
            return Err(Error::Corrupt(format!(
                "expected {} layers, got {}",
                hp.layers,
                self.enc.layers.len()
            )));
        }
        for (i, l) in self.enc.layers.iter().enumerate() {
            check(&format!("enc.l{i}.ln1_g"), &l.ln1_g, &[h])?;
            check(&format!("enc.l{i}.ln1_b"), &l.ln1_b, &[h])?;
            check(&format!("enc.l{i}.w_qkv"), &l.w_qkv, &[h, 3 * h])?;
            check(&format!("enc.l{i}.b_qkv"), &l.b_qkv, &[3 * h])?;
            check(&format!("enc.l{i}.w_o"), &l.w_o, &[h, h])?;
            check(&format!("enc.l{i}.b_o"), &l.b_o, &[h])?;
            check(&format!("enc.l{i}.ln2_g"), &l.ln2_g, &[h])?;
            check(&format!("enc.l{i}.ln2_b"), &l.ln2_b, &[h])?;
            check(&format!("enc.l{i}.w_up"), &l.w_up, &[h, 4 * h])?;
            check(&format!("enc.l{i}.b_up"), &l.b_up, &[4 * h])?;
            check(&format!("enc.l{i}.w_down"), &l.w_down, &[4 * h, h])?;
            check(&format!("enc.l{i}.b_down"), &l.b_down, &[h])?;
        }
        check("enc.w_out", &self.enc.w_out, &[h, hp.latent_dim])?;
        check("enc.b_out", &self.enc.b_out, &[hp.latent_dim])?;
        check("dec.w", &self.dec.w, &[hp.latent_dim, hp.input_dim])?;
        check("dec.b", &self.dec.b, &[hp.input_dim])?;
        check("codebook", &self.codebook.entries, &[hp.codebook_size, hp.latent_dim])?;
        Ok(())
    }
}

/// Per-term loss values for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub commit: f64,
    pub orth: f64,
    pub l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The one composition order used everywhere, so `total` recomposes
    /// bitwise from its terms.
    pub fn compose(recon: f64, commit: f64, orth: f64, l1: f64, hp: &Hyperparams) -> f64 {
        ((recon + hp.beta_commit * commit) + hp.lambda_orth * orth) + hp.lambda_reg * l1
    }
}

/// Standalone evaluation of the loss terms for a single sample, from the
/// quantizer's residual chain. Mirrors what the training tape computes.
pub fn loss_terms(
    psi: &[f64],
    psi_hat: &[f64],
    residuals: &[Vec<f64>],
    codes: &[&[f64]],
    cb: &Codebook,
    hp: &Hyperparams,
) -> Result<LossBreakdown> {
    if psi.len() != psi_hat.len() {
        return Err(Error::DimMismatch { expected: psi.len(), got: psi_hat.len() });
    }
    if residuals.len() != codes.len() {
        return Err(Error::Config(format!(
            "got {} residual states but {} codes",
            residuals.len(),
            codes.len()
        )));
    }
    if hp.lambda_orth > 0.0 && cb.len() < 2 {
        return Err(Error::Config("orthogonality loss needs at least 2 codebook rows".into()));
    }
    let recon: f64 = psi
        .iter()
        .zip(psi_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let mut commit = 0.0;
    for (z_prev, code) in residuals.iter().zip(codes) {
        match hp.commit_target {
            CommitTarget::Pre => {
                commit += z_prev
                    .iter()
                    .zip(*code)
                    .map(|(z, e)| (z - e) * (z - e))
                    .sum::<f64>();
            }
            CommitTarget::Post => {
                commit += z_prev
                    .iter()
                    .zip(*code)
                    .map(|(z, e)| {
                        let post = z - e;
                        (post - e) * (post - e)
                    })
                    .sum::<f64>();
            }
        }
    }
    let orth = orthogonality(cb);
    let l1: f64 = psi_hat.iter().map(|v| v.abs()).sum();
    let total = LossBreakdown::compose(recon, commit, orth, l1, hp);
    Ok(LossBreakdown { recon, commit, orth, l1, total })
}

/// Mean squared pairwise inner product over distinct codebook rows.
pub fn orthogonality(cb: &Codebook) -> f64 {
    let k = cb.len();
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let d: f64 = cb.entry(i).iter().zip(cb.entry(j)).map(|(a, b)| a * b).sum();
                sum += d * d;
            }
        }
    }
    sum / (k * (k - 1)) as f64
}

// ── tape-side forward pass ───────────────────────────────────────────

struct BoundLayer {
    ln1_g: Var,
    ln1_b: Var,
    w_qkv: Var,
    b_qkv: Var,
    w_o: Var,
    b_o: Var,
    ln2_g: Var,
    ln2_b: Var,
    w_up: Var,
    b_up: Var,
    w_down: Var,
    b_down: Var,
}

struct Bound {
    w_in: Var,
    b_in: Var,
    pos: Var,
    layers: Vec<BoundLayer>,
    w_out: Var,
    b_out: Var,
    dec_w: Var,
    dec_b: Var,
    codebook: Var,
    named: Vec<(String, Var)>,
}

fn bind(params: &ModelParams, tape: &mut Tape, trainable: bool) -> Bound {
    let mut named = Vec::new();
    let mut leaf = |tape: &mut Tape, name: String, t: &Tensor| -> Var {
        let v = if trainable { tape.param(t.clone()) } else { tape.input(t.clone()) };
        named.push((name, v));
        v
    };
    let w_in = leaf(tape, "enc.w_in".into(), &params.enc.w_in);
    let b_in = leaf(tape, "enc.b_in".into(), &params.enc.b_in);
    let pos = leaf(tape, "enc.pos".into(), &params.enc.pos);
    let mut layers = Vec::with_capacity(params.enc.layers.len());
    for (i, l) in params.enc.layers.iter().enumerate() {
        layers.push(BoundLayer {
            ln1_g: leaf(tape, format!("enc.l{i}.ln1_g"), &l.ln1_g),
            ln1_b: leaf(tape, format!("enc.l{i}.ln1_b"), &l.ln1_b),
            w_qkv: leaf(tape, format!("enc.l{i}.w_qkv"), &l.w_qkv),
            b_qkv: leaf(tape, format!("enc.l{i}.b_qkv"), &l.b_qkv),
            w_o: leaf(tape, format!("enc.l{i}.w_o"), &l.w_o),
            b_o: leaf(tape, format!("enc.l{i}.b_o"), &l.b_o),
            ln2_g: leaf(tape, format!("enc.l{i}.ln2_g"), &l.ln2_g),
            ln2_b: leaf(tape, format!("enc.l{i}.ln2_b"), &l.ln2_b),
            w_up: leaf(tape, format!("enc.l{i}.w_up"), &l.w_up),
            b_up: leaf(tape, format!("enc.l{i}.b_up"), &l.b_up),
            w_down: leaf(tape, format!("enc.l{i}.w_down"), &l.w_down),
            b_down: leaf(tape, format!("enc.l{i}.b_down"), &l.b_down),
        });
    }
    let w_out = leaf(tape, "enc.w_out".into(), &params.enc.w_out);
    let b_out = leaf(tape, "enc.b_out".into(), &params.enc.b_out);
    let dec_w = leaf(tape, "dec.w".into(), &params.dec.w);
    let dec_b = leaf(tape, "dec.b".into(), &params.dec.b);
    let codebook = leaf(tape, "codebook".into(), &params.codebook.entries);
    Bound { w_in, b_in, pos, layers, w_out, b_out, dec_w, dec_b, codebook, named }
}

/// Transformer encoder on the tape: [B, input_dim] -> z_0 var [B, D].
fn build_encoder(tape: &mut Tape, bound: &Bound, hp: &Hyperparams, x: &Tensor) -> Var {
    let b = x.shape[0];
    let (t, d) = (hp.tokens, hp.token_dim);
    // row-major reshape [B, T*d] -> [B*T, d] is a pure reinterpretation
    let x_tok = tape.input(x.clone().reshaped(vec![b * t, d]));
    let mut h = tape.affine(x_tok, bound.w_in, bound.b_in);
    h = tape.add_pos(h, bound.pos, b);
    for l in &bound.layers {
        let n1 = tape.layer_norm(h, l.ln1_g, l.ln1_b, LN_EPS);
        let qkv = tape.affine(n1, l.w_qkv, l.b_qkv);
        let att = tape.attention(qkv, b, t, hp.heads);
        let ao = tape.affine(att, l.w_o, l.b_o);
        h = tape.add(h, ao);
        let n2 = tape.layer_norm(h, l.ln2_g, l.ln2_b, LN_EPS);
        let up = tape.affine(n2, l.w_up, l.b_up);
        let act = match hp.activation {
            Activation::Gelu => tape.gelu(up),
            Activation::Relu => tape.relu(up),
        };
        let down = tape.affine(act, l.w_down, l.b_down);
        h = tape.add(h, down);
    }
    let pooled = tape.mean_pool(h, b, t);
    tape.affine(pooled, bound.w_out, bound.b_out)
}

/// Quantizer state captured at a base point so the gradient-check
/// surrogate stays smooth: token choices, straight-through offset and all
/// stop-gradient targets are constants.
#[derive(Debug, Clone)]
pub struct FrozenQuant {
    pub tokens: Vec<usize>,
    /// z_q - z_0 at the base point, [B, D].
    pub delta: Tensor,
    pub partial_sums: Vec<Tensor>,
    /// Gathered e_{k_i} per stage, [B, D] each (for the post commit mode).
    pub stage_codes: Vec<Tensor>,
    pub residual_targets: Tensor,
}

impl FrozenQuant {
    pub fn capture(z0: &Tensor, cb: &Codebook, hp: &Hyperparams) -> Result<Self> {
        let bq = rvq::quantize_batch(z0, cb, hp.stages)?;
        let (b, dim) = (z0.shape[0], z0.shape[1]);
        let mut delta = Tensor::zeros(vec![b, dim]);
        for i in 0..b * dim {
            delta.data[i] = bq.z_q.data[i] - z0.data[i];
        }
        let stage_codes = gather_stage_codes(&bq.tokens, hp.stages, cb, b);
        Ok(FrozenQuant {
            tokens: bq.tokens,
            delta,
            partial_sums: bq.partial_sums,
            stage_codes,
            residual_targets: bq.residual_targets,
        })
    }
}

fn gather_stage_codes(tokens: &[usize], stages: usize, cb: &Codebook, b: usize) -> Vec<Tensor> {
    let d = cb.dim();
    let mut out = vec![Tensor::zeros(vec![b, d]); stages];
    for r in 0..b {
        for i in 0..stages {
            let k = tokens[r * stages + i];
            out[i].row_mut(r).copy_from_slice(cb.entry(k));
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub recon: Var,
    pub commit: Var,
    pub orth: Var,
    pub l1: Var,
    pub total: Var,
    /// total plus the codebook term when codebook_update == loss.
    pub objective: Var,
}

pub struct ForwardBatch {
    pub tape: Tape,
    pub vars: LossVars,
    pub breakdown: LossBreakdown,
    /// B x L tokens, row-major.
    pub tokens: Vec<usize>,
    pub z0: Tensor,
    pub z_q: Tensor,
    /// Per-assignment residual targets z_{i-1}, [B*L, D]; what EMA
    /// codebook updates average over.
    pub residual_targets: Tensor,
    pub param_vars: Vec<(String, Var)>,
    stages: usize,
}

impl ForwardBatch {
    /// Canonical additive reconstructions, [B, input_dim]: per sample,
    /// bias plus per-token offsets accumulated in token order.
    pub fn psi_hat(&self, params: &ModelParams) -> Result<Tensor> {
        let b = self.z0.shape[0];
        let input_dim = params.dec.b.numel();
        let mut out = Tensor::zeros(vec![b, input_dim]);
        for r in 0..b {
            let row = params
                .dec
                .decode_tokens(&params.codebook, &self.tokens[r * self.stages..(r + 1) * self.stages])?;
            out.row_mut(r).copy_from_slice(&row);
        }
        Ok(out)
    }
}

pub enum QuantMode<'a> {
    /// Fresh per-stage argmin (training and inference).
    Fresh,
    /// Everything quantizer-derived frozen at a base point (gradient checks).
    Frozen(&'a FrozenQuant),
}

/// Full forward pass with loss construction over a batch.
pub fn forward_batch(
    params: &ModelParams,
    hp: &Hyperparams,
    x: &Tensor,
    mode: QuantMode<'_>,
) -> Result<ForwardBatch> {
    if x.shape.len() != 2 || x.shape[1] != hp.input_dim {
        return Err(Error::DimMismatch {
            expected: hp.input_dim,
            got: *x.shape.last().unwrap_or(&0),
        });
    }
    let b = x.shape[0];
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    let mut tape = Tape::new();
    let bound = bind(params, &mut tape, true);
    let z0v = build_encoder(&mut tape, &bound, hp, x);
    if let Some(op) = tape.fault() {
        return Err(Error::non_finite(op.to_string()));
    }
    let z0 = tape.value(z0v).clone();

    // quantize (or reuse frozen choices)
    let frozen;
    let (tokens, partial_sums, stage_codes, residual_targets, st) = match mode {
        QuantMode::Fresh => {
            frozen = None;
            let bq = rvq::quantize_batch(&z0, &params.codebook, hp.stages)?;
            let stage_codes = match hp.commit_target {
                CommitTarget::Post => {
                    gather_stage_codes(&bq.tokens, hp.stages, &params.codebook, b)
                }
                CommitTarget::Pre => Vec::new(),
            };
            let st = tape.straight_through(z0v, bq.z_q.clone());
            (bq.tokens, bq.partial_sums, stage_codes, bq.residual_targets, st)
        }
        QuantMode::Frozen(fq) => {
            frozen = Some(fq);
            let delta = tape.input(fq.delta.clone());
            let st = tape.add(z0v, delta);
            (
                fq.tokens.clone(),
                fq.partial_sums.clone(),
                fq.stage_codes.clone(),
                fq.residual_targets.clone(),
                st,
            )
        }
    };
    let _ = frozen;
    let z_q = tape.value(st).clone();

    let psi_hat_v = tape.affine(st, bound.dec_w, bound.dec_b);

    // reconstruction
    let x_flat = tape.input(x.clone());
    let rdiff = tape.sub(x_flat, psi_hat_v);
    let rsum = tape.sum_sq(rdiff);
    let recon = tape.scale(rsum, 1.0 / b as f64);

    // commitment: residuals pulled toward stop-gradiented code sums
    let mut commit_sum: Option<Var> = None;
    for i in 0..hp.stages {
        let target = match hp.commit_target {
            CommitTarget::Pre => partial_sums[i].clone(),
            CommitTarget::Post => {
                let mut t = partial_sums[i].clone();
                for (tv, cv) in t.data.iter_mut().zip(&stage_codes[i].data) {
                    *tv += cv;
                }
                t
            }
        };
        let tv = tape.input(target);
        let diff = tape.sub(z0v, tv);
        let term = tape.sum_sq(diff);
        commit_sum = Some(match commit_sum {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let commit = tape.scale(commit_sum.expect("stages >= 1"), 1.0 / b as f64);

    // orthogonality over codebook rows (optionally decoded rows)
    let k = hp.codebook_size;
    let orth_rows = if hp.orth_on_decoded {
        tape.matmul(bound.codebook, bound.dec_w)
    } else {
        bound.codebook
    };
    let gram = tape.matmul_nt(orth_rows, orth_rows);
    let mut mask = Tensor::ones(vec![k, k]);
    for i in 0..k {
        mask.data[i * k + i] = 0.0;
    }
    let maskv = tape.input(mask);
    let off_diag = tape.mul(gram, maskv);
    let osum = tape.sum_sq(off_diag);
    let orth = tape.scale(osum, 1.0 / (k * (k - 1)) as f64);

    // sparsity on the reconstruction
    let l1_sum = tape.l1_norm(psi_hat_v);
    let l1 = tape.scale(l1_sum, 1.0 / b as f64);

    // Eq-style composition; the same association order as
    // LossBreakdown::compose
    let bc = tape.scale(commit, hp.beta_commit);
    let s1 = tape.add(recon, bc);
    let lo = tape.scale(orth, hp.lambda_orth);
    let s2 = tape.add(s1, lo);
    let lr = tape.scale(l1, hp.lambda_reg);
    let total = tape.add(s2, lr);

    // codebook training term (stop-gradient on the residual targets)
    let gathered = tape.gather_rows(bound.codebook, tokens.clone());
    let targets = tape.input(residual_targets.clone());
    let cdiff = tape.sub(targets, gathered);
    let csum = tape.sum_sq(cdiff);
    let cb_term = tape.scale(csum, 1.0 / b as f64);
    let objective = match hp.codebook_update {
        CodebookUpdate::Loss => tape.add(total, cb_term),
        CodebookUpdate::Ema => total,
    };

    let breakdown = LossBreakdown {
        recon: tape.scalar(recon)?,
        commit: tape.scalar(commit)?,
        orth: tape.scalar(orth)?,
        l1: tape.scalar(l1)?,
        total: tape.scalar(total)?,
    };

    Ok(ForwardBatch {
        tape,
        vars: LossVars { recon, commit, orth, l1, total, objective },
        breakdown,
        tokens,
        z0,
        z_q,
        residual_targets,
        param_vars: bound.named,
        stages: hp.stages,
    })
}

/// Single-sample forward: reconstruction, token sequence and losses.
pub fn forward(
    params: &ModelParams,
    hp: &Hyperparams,
    psi: &[f64],
) -> Result<(Vec<f64>, Vec<usize>, LossBreakdown)> {
    if psi.len() != hp.input_dim {
        return Err(Error::DimMismatch { expected: hp.input_dim, got: psi.len() });
    }
    let x = Tensor::new(vec![1, hp.input_dim], psi.to_vec());
    let fb = forward_batch(params, hp, &x, QuantMode::Fresh)?;
    let psi_hat = fb.psi_hat(params)?;
    Ok((psi_hat.data, fb.tokens, fb.breakdown))
}

/// Encoder-only latent for one expression vector.
pub fn encode(params: &ModelParams, hp: &Hyperparams, psi: &[f64]) -> Result<Vec<f64>> {
    let z = encode_batch(params, hp, &Tensor::new(vec![1, hp.input_dim], psi.to_vec()))?;
    Ok(z.data)
}

/// Encoder-only latents for a batch; parameters are bound as constants so
/// no gradient bookkeeping happens.
pub fn encode_batch(params: &ModelParams, hp: &Hyperparams, x: &Tensor) -> Result<Tensor> {
    if x.shape.len() != 2 || x.shape[1] != hp.input_dim {
        return Err(Error::DimMismatch {
            expected: hp.input_dim,
            got: *x.shape.last().unwrap_or(&0),
        });
    }
    let mut tape = Tape::new();
    let bound = bind(params, &mut tape, false);
    let z0v = build_encoder(&mut tape, &bound, hp, x);
    if let Some(op) = tape.fault() {
        return Err(Error::non_finite(op.to_string()));
    }
    Ok(tape.value(z0v).clone())
}

/// Tokenizes a batch without building loss terms.
pub fn tokenize_batch(params: &ModelParams, hp: &Hyperparams, x: &Tensor) -> Result<Vec<usize>> {
    let z0 = encode_batch(params, hp, x)?;
    let bq = rvq::quantize_batch(&z0, &params.codebook, hp.stages)?;
    Ok(bq.tokens)
}

// ── gradient checking ────────────────────────────────────────────────

/// Evaluates the Eq-7-style total at arbitrary parameter values with the
/// quantizer frozen at a base point.
pub fn frozen_loss(
    hp: &Hyperparams,
    tensors: &[Tensor],
    x: &Tensor,
    frozen: &FrozenQuant,
) -> Result<f64> {
    let params = ModelParams::from_flat(hp, tensors)?;
    let fb = forward_batch(&params, hp, x, QuantMode::Frozen(frozen))?;
    fb.tape.scalar(fb.vars.total)
}

/// End-to-end gradient check of the full training loss on `x`, straight
/// through the frozen quantizer. Returns the max relative error across
/// sampled coordinates of every parameter.
pub fn model_grad_check(
    params: &ModelParams,
    hp: &Hyperparams,
    x: &Tensor,
    h: f64,
    max_coords_per_tensor: usize,
    seed: u64,
) -> Result<crate::optim::GradCheckReport> {
    let z0 = encode_batch(params, hp, x)?;
    let frozen = FrozenQuant::capture(&z0, &params.codebook, hp)?;

    let mut fb = forward_batch(params, hp, x, QuantMode::Frozen(&frozen))?;
    let total = fb.vars.total;
    let mut grads = fb.tape.backward(total)?;
    let (_, tensors) = params.flatten();
    let analytic: Vec<Tensor> = fb
        .param_vars
        .iter()
        .enumerate()
        .map(|(i, (_, var))| {
            grads
                .take(*var)
                .unwrap_or_else(|| Tensor::zeros(tensors[i].shape.clone()))
        })
        .collect();

    crate::optim::grad_check(
        |ts| frozen_loss(hp, ts, x, &frozen),
        &tensors,
        &analytic,
        h,
        max_coords_per_tensor,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, STREAM_INIT};
    use rand::Rng;

    fn tiny_hp() -> Hyperparams {
        Hyperparams {
            input_dim: 6,
            tokens: 2,
            token_dim: 3,
            hidden: 8,
            layers: 1,
            heads: 2,
            latent_dim: 6,
            codebook_size: 8,
            stages: 2,
            batch: 4,
            epochs: 1,
            ..Hyperparams::default()
        }
    }

    fn zero_params(hp: &Hyperparams) -> ModelParams {
        let mut rng = substream(0, STREAM_INIT);
        let mut p = init_params(hp, &mut rng);
        let (_, tensors) = p.flatten();
        let zeroed: Vec<Tensor> =
            tensors.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
        p = ModelParams::from_flat(hp, &zeroed).unwrap();
        p
    }

    #[test]
    fn defaults_validate_and_match_paper_scale() {
        let hp = Hyperparams::default();
        hp.validate().unwrap();
        assert_eq!((hp.tokens, hp.token_dim), (10, 5));
        assert_eq!(hp.stages, 4);
        assert_eq!(hp.codebook_size, 64);
        assert_eq!((hp.beta_commit, hp.lambda_orth, hp.lambda_reg), (0.25, 1.0, 0.1));
        assert_eq!((hp.lr, hp.batch, hp.epochs), (1e-4, 512, 500));
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        let mut hp = Hyperparams::default();
        hp.tokens = 7;
        assert!(hp.validate().is_err());
        let mut hp = Hyperparams::default();
        hp.heads = 3;
        assert!(hp.validate().is_err());
        let mut hp = Hyperparams::default();
        hp.codebook_size = 1;
        assert!(hp.validate().is_err());
    }

    #[test]
    fn zero_network_encodes_to_output_bias() {
        let hp = tiny_hp();
        let mut params = zero_params(&hp);
        params.enc.b_out = Tensor::new(vec![6], vec![0.5, -1.0, 0.25, 2.0, 0.0, -0.125]);
        let mut rng = substream(5, STREAM_INIT);
        let psi: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z0 = encode(&params, &hp, &psi).unwrap();
        assert_eq!(z0, params.enc.b_out.data);
    }

    #[test]
    fn paper_shapes_produce_50_dim_latent_and_4_tokens() {
        let hp = Hyperparams { batch: 1, ..Hyperparams::default() };
        let mut rng = substream(1, STREAM_INIT);
        let params = init_params(&hp, &mut rng);
        let psi: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z0 = encode(&params, &hp, &psi).unwrap();
        assert_eq!(z0.len(), 50);
        let (_, tokens, _) = forward(&params, &hp, &psi).unwrap();
        assert_eq!(tokens.len(), 4);
        assert!(tokens.iter().all(|&t| t < 64));
    }

    #[test]
    fn block_permutation_changes_latent_with_positions() {
        let hp = tiny_hp();
        let mut rng = substream(9, STREAM_INIT);
        let params = init_params(&hp, &mut rng);
        let psi: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        // swap the two token blocks of width 3
        let mut swapped = psi[3..6].to_vec();
        swapped.extend_from_slice(&psi[0..3]);
        let z_a = encode(&params, &hp, &psi).unwrap();
        let z_b = encode(&params, &hp, &swapped).unwrap();
        assert_ne!(z_a, z_b, "nonzero positional embeddings must break permutation symmetry");
    }

    #[test]
    fn decode_identity_and_bias_cases() {
        let dec = DecoderParams {
            w: Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            b: Tensor::zeros(vec![3]),
        };
        assert_eq!(dec.decode(&[0.5, -2.0, 3.25]).unwrap(), vec![0.5, -2.0, 3.25]);

        let dec = DecoderParams {
            w: Tensor::zeros(vec![3, 3]),
            b: Tensor::new(vec![3], vec![1.5, -0.5, 0.75]),
        };
        assert_eq!(dec.decode(&[0.0, 0.0, 0.0]).unwrap(), vec![1.5, -0.5, 0.75]);
    }

    #[test]
    fn decoder_affinity_is_exact_on_dyadic_values() {
        // dyadic entries keep every product and sum exact, so affinity
        // holds bitwise: decode(e_i + e_j) - b == (decode(e_i) - b) + (decode(e_j) - b)
        let w = Tensor::new(
            vec![2, 3],
            vec![0.5, -0.25, 1.5, 0.125, 2.0, -0.75],
        );
        let b = Tensor::new(vec![3], vec![0.5, 0.25, -1.0]);
        let dec = DecoderParams { w, b };
        let e_i = [0.75, -0.5];
        let e_j = [1.25, 0.25];
        let sum: Vec<f64> = e_i.iter().zip(&e_j).map(|(a, b)| a + b).collect();
        let lhs: Vec<f64> = dec
            .decode(&sum)
            .unwrap()
            .iter()
            .zip(&dec.b.data)
            .map(|(v, b)| v - b)
            .collect();
        let di = dec.decode(&e_i).unwrap();
        let dj = dec.decode(&e_j).unwrap();
        let rhs: Vec<f64> = di
            .iter()
            .zip(&dj)
            .zip(&dec.b.data)
            .map(|((a, c), b)| (a - b) + (c - b))
            .collect();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn additive_token_decomposition_is_bitwise() {
        let hp = tiny_hp();
        let mut rng = substream(31, STREAM_INIT);
        let params = init_params(&hp, &mut rng);
        let psi: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (psi_hat, tokens, _) = forward(&params, &hp, &psi).unwrap();
        // b + sum of bias-free templates, accumulated in token order
        let mut acc = params.dec.b.data.clone();
        for &k in &tokens {
            let off = params.dec.token_template(&params.codebook, k, false).unwrap();
            for (a, o) in acc.iter_mut().zip(&off) {
                *a += o;
            }
        }
        assert_eq!(acc, psi_hat);
    }

    #[test]
    fn loss_terms_zero_when_everything_matches() {
        let hp = tiny_hp();
        // orthogonal codebook with a zero row: z0 == e_0, second stage hits
        // the zero row, psi_hat == 0
        let mut entries = Tensor::zeros(vec![8, 6]);
        entries.row_mut(1)[0] = 1.0;
        let cb = Codebook::new(entries);
        let z0 = cb.entry(1).to_vec();
        let residuals = vec![z0.clone(), vec![0.0; 6]];
        let codes: Vec<&[f64]> = vec![cb.entry(1), cb.entry(0)];
        let psi = vec![0.0; 6];
        let psi_hat = vec![0.0; 6];
        let lb = loss_terms(&psi, &psi_hat, &residuals, &codes, &cb, &hp).unwrap();
        assert_eq!(
            (lb.recon, lb.commit, lb.orth, lb.l1, lb.total),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn orthogonality_of_duplicated_rows_is_one() {
        // K = 2 with e_1 == e_2 == (1, 0): orth = (1/(2*1)) * 2 * 1 = 1
        let cb = Codebook::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]));
        assert_eq!(orthogonality(&cb), 1.0);
    }

    #[test]
    fn orthogonality_is_permutation_invariant() {
        let mut rng = substream(12, STREAM_INIT);
        let entries = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        let cb = Codebook::new(entries.clone());
        let base = orthogonality(&cb);
        // relabel rows: reverse order
        let mut rev = Tensor::zeros(vec![5, 4]);
        for i in 0..5 {
            rev.row_mut(i).copy_from_slice(entries.row(4 - i));
        }
        let got = orthogonality(&Codebook::new(rev));
        assert!((base - got).abs() < 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn breakdown_total_recomposes_bitwise() {
        let hp = tiny_hp();
        let mut rng = substream(3, STREAM_INIT);
        let params = init_params(&hp, &mut rng);
        let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let fb = forward_batch(&params, &hp, &x, QuantMode::Fresh).unwrap();
        let lb = fb.breakdown;
        assert!(lb.recon >= 0.0 && lb.commit >= 0.0 && lb.orth >= 0.0 && lb.l1 >= 0.0);
        let recomposed = LossBreakdown::compose(lb.recon, lb.commit, lb.orth, lb.l1, &hp);
        assert_eq!(recomposed.to_bits(), lb.total.to_bits());
    }

    #[test]
    fn forward_is_deterministic() {
        let hp = tiny_hp();
        let mut rng = substream(8, STREAM_INIT);
        let params = init_params(&hp, &mut rng);
        let psi: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = forward(&params, &hp, &psi).unwrap();
        let b = forward(&params, &hp, &psi).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2.total.to_bits(), b.2.total.to_bits());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let hp = tiny_hp();
        let mut rng = substream(77, STREAM_INIT);
        let params = random_params(&hp, 0.2, &mut rng);
        let x = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let report = model_grad_check(&params, &hp, &x, 1e-5, 16, 123).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} over {} coords",
            report.max_rel_err,
            report.coords_checked
        );
    }

    #[test]
    fn post_commit_mode_also_grad_checks() {
        let hp = Hyperparams {
            commit_target: CommitTarget::Post,
            orth_on_decoded: true,
            activation: Activation::Relu,
            ..tiny_hp()
        };
        let mut rng = substream(78, STREAM_INIT);
        let params = random_params(&hp, 0.2, &mut rng);
        let x = Tensor::randn(vec![2, 6], 1.0, &mut rng);
        let report = model_grad_check(&params, &hp, &x, 1e-5, 8, 5).unwrap();
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn hyperparams_serde_roundtrip_rejects_unknown_keys() {
        let hp = Hyperparams::default();
        let js = serde_json::to_string(&hp).unwrap();
        let back: Hyperparams = serde_json::from_str(&js).unwrap();
        assert_eq!(hp, back);
        let bad = r#"{"input_dim": 50, "no_such_key": 1}"#;
        assert!(serde_json::from_str::<Hyperparams>(bad).is_err());
        // partial configs fill in defaults
        let partial: Hyperparams = serde_json::from_str(r#"{"hidden": 32}"#).unwrap();
        assert_eq!(partial.hidden, 32);
        assert_eq!(partial.stages, 4);
    }
}
