//! Minibatch training loop with deterministic shuffling and checkpointing.
//!
//! All randomness flows from the run seed through named substreams, the
//! per-epoch shuffle is a seeded Fisher-Yates, and the last short batch is
//! kept, so two single-threaded runs with the same seed produce
//! byte-identical checkpoints and loss logs. Multi-worker batches split
//! into fixed contiguous chunks reduced in chunk order: deterministic for
//! a given worker count.

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::error::{Error, Result};
use crate::model::{
    forward_batch, init_params, CodebookUpdate, Hyperparams, ModelParams, QuantMode,
};
use crate::optim::AdamState;
use crate::rng::{substream, RngState, STREAM_INIT, STREAM_TRAIN};
use crate::rvq::reinit_dead_codes;
use crate::synth::Dataset;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub recon: f64,
    pub commit: f64,
    pub orth: f64,
    pub l1: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    /// Worker count for batch-parallel gradients; 1 is the deterministic
    /// reference mode used by all acceptance runs.
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { threads: 1 }
    }
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRow>,
}

/// Per-dimension standardization statistics.
fn standardize_stats(rows: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (rows.shape[0], rows.shape[1]);
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(rows.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            let dv = rows.row(r)[j] - mean[j];
            std[j] += dv * dv;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    (mean, std)
}

struct EmaState {
    counts: Vec<f64>,
    sums: Tensor,
}

impl EmaState {
    fn new(params: &ModelParams) -> Self {
        EmaState {
            counts: vec![1.0; params.codebook.len()],
            sums: params.codebook.entries.clone(),
        }
    }

    fn update(
        &mut self,
        params: &mut ModelParams,
        tokens: &[usize],
        targets: &Tensor,
        decay: f64,
    ) {
        let (k, d) = (params.codebook.len(), params.codebook.dim());
        let mut batch_counts = vec![0.0; k];
        let mut batch_sums = Tensor::zeros(vec![k, d]);
        for (i, &tok) in tokens.iter().enumerate() {
            batch_counts[tok] += 1.0;
            let row = targets.row(i);
            for (s, &v) in batch_sums.row_mut(tok).iter_mut().zip(row) {
                *s += v;
            }
        }
        for kk in 0..k {
            self.counts[kk] = decay * self.counts[kk] + (1.0 - decay) * batch_counts[kk];
            for j in 0..d {
                self.sums.data[kk * d + j] =
                    decay * self.sums.data[kk * d + j] + (1.0 - decay) * batch_sums.data[kk * d + j];
            }
            let denom = self.counts[kk].max(1e-8);
            for j in 0..d {
                params.codebook.entries.data[kk * d + j] = self.sums.data[kk * d + j] / denom;
            }
        }
    }

    /// After a dead-code reset the moving averages must restart from the
    /// fresh row or they would immediately drag it back.
    fn reset_codes(&mut self, params: &ModelParams, codes: &[usize]) {
        let d = params.codebook.dim();
        for &k in codes {
            self.counts[k] = 1.0;
            self.sums.data[k * d..(k + 1) * d].copy_from_slice(params.codebook.entry(k));
        }
    }
}

struct StepResult {
    grads: Vec<Option<Tensor>>,
    tokens: Vec<usize>,
    residual_targets: Tensor,
    z0: Tensor,
    recon: f64,
    commit: f64,
    orth: f64,
    l1: f64,
    total: f64,
}

fn run_step(params: &ModelParams, hp: &Hyperparams, x: &Tensor) -> Result<StepResult> {
    let mut fb = forward_batch(params, hp, x, QuantMode::Fresh)?;
    let objective = fb.vars.objective;
    let mut grads = fb.tape.backward(objective)?;
    let out: Vec<Option<Tensor>> =
        fb.param_vars.iter().map(|(_, var)| grads.take(*var)).collect();
    Ok(StepResult {
        grads: out,
        tokens: fb.tokens,
        residual_targets: fb.residual_targets,
        z0: fb.z0,
        recon: fb.breakdown.recon,
        commit: fb.breakdown.commit,
        orth: fb.breakdown.orth,
        l1: fb.breakdown.l1,
        total: fb.breakdown.total,
    })
}

/// Gradient step over one batch, possibly split across workers. Chunks
/// are contiguous and reduced in chunk order.
fn batched_step(
    params: &ModelParams,
    hp: &Hyperparams,
    x: &Tensor,
    threads: usize,
) -> Result<StepResult> {
    let b = x.shape[0];
    if threads <= 1 || b < 2 * threads {
        return run_step(params, hp, x);
    }
    let dim = x.shape[1];
    let chunk_rows = b.div_ceil(threads);
    let chunks: Vec<(usize, usize)> = (0..b)
        .step_by(chunk_rows)
        .map(|start| (start, (start + chunk_rows).min(b)))
        .collect();
    let parts: Vec<Result<StepResult>> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let rows = Tensor::new(
                vec![end - start, dim],
                x.data[start * dim..end * dim].to_vec(),
            );
            run_step(params, hp, &rows)
        })
        .collect();
    let mut merged: Option<StepResult> = None;
    for (part, &(start, end)) in parts.into_iter().zip(&chunks) {
        let part = part?;
        let w = (end - start) as f64 / b as f64;
        match &mut merged {
            None => {
                let mut p = part;
                for g in p.grads.iter_mut().flatten() {
                    g.data.iter_mut().for_each(|v| *v *= w);
                }
                p.recon *= w;
                p.commit *= w;
                p.orth *= w;
                p.l1 *= w;
                p.total *= w;
                merged = Some(p);
            }
            Some(acc) => {
                for (ag, pg) in acc.grads.iter_mut().zip(part.grads) {
                    match (ag.as_mut(), pg) {
                        (Some(a), Some(p)) => {
                            for (av, pv) in a.data.iter_mut().zip(&p.data) {
                                *av += w * pv;
                            }
                        }
                        (None, Some(mut p)) => {
                            p.data.iter_mut().for_each(|v| *v *= w);
                            *ag = Some(p);
                        }
                        _ => {}
                    }
                }
                acc.tokens.extend(part.tokens);
                let mut t = acc.residual_targets.data.clone();
                t.extend_from_slice(&part.residual_targets.data);
                let rows = acc.residual_targets.shape[0] + part.residual_targets.shape[0];
                acc.residual_targets = Tensor::new(vec![rows, acc.residual_targets.shape[1]], t);
                let mut z = acc.z0.data.clone();
                z.extend_from_slice(&part.z0.data);
                let zrows = acc.z0.shape[0] + part.z0.shape[0];
                acc.z0 = Tensor::new(vec![zrows, acc.z0.shape[1]], z);
                acc.recon += w * part.recon;
                acc.commit += w * part.commit;
                acc.orth = part.orth; // batch-independent term, keep one copy
                acc.l1 += w * part.l1;
                acc.total += w * part.total;
            }
        }
    }
    Ok(merged.expect("at least one chunk"))
}

/// Trains a model on `dataset` and returns the final checkpoint plus
/// per-epoch loss rows.
pub fn train(dataset: &Dataset, hp: &Hyperparams, opts: TrainOptions) -> Result<TrainOutput> {
    crate::runtime::tune_allocator();
    hp.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if dataset.dim() != hp.input_dim {
        return Err(Error::DimMismatch { expected: hp.input_dim, got: dataset.dim() });
    }

    // standardization is part of the model contract when enabled; the
    // stats ship inside the checkpoint
    let mut extra = Vec::new();
    let rows = if hp.standardize {
        let (mean, std) = standardize_stats(&dataset.rows);
        let d = dataset.dim();
        let mut t = dataset.rows.clone();
        for r in 0..t.shape[0] {
            let row = t.row_mut(r);
            for j in 0..d {
                row[j] = (row[j] - mean[j]) / std[j];
            }
        }
        extra.push(NamedTensor::from_tensor("norm.mean", &Tensor::new(vec![d], mean)));
        extra.push(NamedTensor::from_tensor("norm.std", &Tensor::new(vec![d], std)));
        t
    } else {
        dataset.rows.clone()
    };

    let mut init_rng = substream(hp.seed, STREAM_INIT);
    let mut train_rng = substream(hp.seed, STREAM_TRAIN);
    let mut params = init_params(hp, &mut init_rng);
    let names = crate::model::canonical_param_names(hp);
    let (_, flat) = params.flatten();
    let mut adam = AdamState::new(hp.lr, hp.weight_decay, &flat);
    let mut ema = match hp.codebook_update {
        CodebookUpdate::Ema => Some(EmaState::new(&params)),
        CodebookUpdate::Loss => None,
    };

    let n = rows.shape[0];
    let dim = rows.shape[1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(hp.epochs);
    let mut last_z0: Option<Tensor> = None;

    for epoch in 0..hp.epochs {
        order.shuffle(&mut train_rng);
        let mut sums = [0.0f64; 5];
        let mut seen = 0usize;
        for chunk in order.chunks(hp.batch) {
            let mut x = Tensor::zeros(vec![chunk.len(), dim]);
            for (i, &ri) in chunk.iter().enumerate() {
                x.row_mut(i).copy_from_slice(rows.row(ri));
            }
            let step = batched_step(&params, hp, &x, opts.threads).map_err(|e| match e {
                Error::NonFinite { op } => Error::NonFinite {
                    op: format!("{op} (epoch {epoch}, step {})", seen / hp.batch),
                },
                other => other,
            })?;

            params.codebook.note_usage(&step.tokens);
            {
                let mut refs = params.tensors_mut();
                adam.step(&mut refs, &step.grads, &names).map_err(|e| match e {
                    Error::NonFinite { op } => Error::NonFinite {
                        op: format!("{op} (epoch {epoch}, step {})", seen / hp.batch),
                    },
                    other => other,
                })?;
            }
            if let Some(ema) = &mut ema {
                ema.update(&mut params, &step.tokens, &step.residual_targets, hp.ema_decay);
            }

            let w = chunk.len() as f64;
            sums[0] += step.recon * w;
            sums[1] += step.commit * w;
            sums[2] += step.orth * w;
            sums[3] += step.l1 * w;
            sums[4] += step.total * w;
            seen += chunk.len();
            last_z0 = Some(step.z0);
        }

        if hp.dead_code_reinit && hp.dead_code_threshold > 0 {
            if let Some(z0) = &last_z0 {
                let reborn = reinit_dead_codes(
                    &mut params.codebook,
                    z0,
                    hp.dead_code_threshold,
                    &mut train_rng,
                )?;
                if let (Some(ema), false) = (&mut ema, reborn.is_empty()) {
                    ema.reset_codes(&params, &reborn);
                }
            }
        }

        let inv = 1.0 / seen as f64;
        log.push(LossRow {
            epoch,
            recon: sums[0] * inv,
            commit: sums[1] * inv,
            orth: sums[2] * inv,
            l1: sums[3] * inv,
            total: sums[4] * inv,
        });
    }

    let rng_state = RngState::capture(&train_rng);
    let checkpoint = Checkpoint::from_training(
        hp,
        &params,
        Some(&adam),
        &rng_state,
        hp.epochs as u32,
        &extra,
    );
    Ok(TrainOutput { checkpoint, log })
}

/// Applies checkpoint standardization stats to raw feature rows, when the
/// model was trained with them.
pub fn apply_standardization(ck: &Checkpoint, rows: &mut Tensor) -> Result<()> {
    if !ck.hp.standardize {
        return Ok(());
    }
    let mean = ck
        .extra("norm.mean")
        .ok_or_else(|| Error::Corrupt("missing norm.mean".into()))?
        .to_tensor();
    let std = ck
        .extra("norm.std")
        .ok_or_else(|| Error::Corrupt("missing norm.std".into()))?
        .to_tensor();
    let d = rows.shape[1];
    if mean.numel() != d || std.numel() != d {
        return Err(Error::DimMismatch { expected: d, got: mean.numel() });
    }
    for r in 0..rows.shape[0] {
        let row = rows.row_mut(r);
        for j in 0..d {
            row[j] = (row[j] - mean.data[j]) / std.data[j];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, SynthSpec};

    fn tiny_hp() -> Hyperparams {
        Hyperparams {
            input_dim: 10,
            tokens: 2,
            token_dim: 5,
            hidden: 8,
            layers: 1,
            heads: 2,
            latent_dim: 6,
            codebook_size: 8,
            stages: 2,
            batch: 16,
            epochs: 3,
            lr: 1e-3,
            seed: 11,
            ..Hyperparams::default()
        }
    }

    fn tiny_corpus() -> Dataset {
        let spec = SynthSpec {
            input_dim: 10,
            templates: 4,
            sparsity: 3,
            samples: 64,
            seed: 2,
            ..SynthSpec::default()
        };
        synth_generate(&spec).unwrap().0
    }

    #[test]
    fn same_seed_runs_are_byte_identical() {
        let hp = tiny_hp();
        let data = tiny_corpus();
        let a = train(&data, &hp, TrainOptions::default()).unwrap();
        let b = train(&data, &hp, TrainOptions::default()).unwrap();
        let mut ba = Vec::new();
        a.checkpoint.write_to(&mut ba).unwrap();
        let mut bb = Vec::new();
        b.checkpoint.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let hp = Hyperparams {
            lr: 0.0,
            weight_decay: 0.0,
            dead_code_reinit: false,
            ..tiny_hp()
        };
        let data = tiny_corpus();
        let out = train(&data, &hp, TrainOptions::default()).unwrap();
        let trained = out.checkpoint.to_model().unwrap();
        let mut rng = substream(hp.seed, STREAM_INIT);
        let init = init_params(&hp, &mut rng);
        // compare at checkpoint precision
        let (_, ti) = init.flatten();
        let (_, tt) = trained.flatten();
        for (a, b) in ti.iter().zip(&tt) {
            assert_eq!(a.to_f32(), b.to_f32());
        }
    }

    #[test]
    fn reconstruction_improves_on_a_learnable_corpus() {
        // the orthogonality term rides a slow codebook-scale transient on
        // tiny latent spaces, so the learning signal here is recon; the
        // total-loss check lives with the full recovery experiment
        let hp = Hyperparams { epochs: 30, ..tiny_hp() };
        let data = tiny_corpus();
        let out = train(&data, &hp, TrainOptions::default()).unwrap();
        let first = out.log.first().unwrap().recon;
        let last = out.log.last().unwrap().recon;
        assert!(last < 0.75 * first, "recon failed to decrease: {first} -> {last}");
    }

    #[test]
    fn checkpoint_tokens_survive_roundtrip() {
        let hp = tiny_hp();
        let data = tiny_corpus();
        let out = train(&data, &hp, TrainOptions::default()).unwrap();
        let model_a = out.checkpoint.to_model().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dfem");
        out.checkpoint.save(&path).unwrap();
        let model_b = Checkpoint::load(&path).unwrap().to_model().unwrap();
        let probe = Tensor::new(vec![4, 10], data.rows.data[0..40].to_vec());
        let ta = crate::model::tokenize_batch(&model_a, &hp, &probe).unwrap();
        let tb = crate::model::tokenize_batch(&model_b, &hp, &probe).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn worker_split_is_deterministic_for_fixed_count() {
        let hp = Hyperparams { epochs: 2, ..tiny_hp() };
        let data = tiny_corpus();
        let a = train(&data, &hp, TrainOptions { threads: 2 }).unwrap();
        let b = train(&data, &hp, TrainOptions { threads: 2 }).unwrap();
        let mut ba = Vec::new();
        a.checkpoint.write_to(&mut ba).unwrap();
        let mut bb = Vec::new();
        b.checkpoint.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn ema_mode_trains_without_codebook_gradient() {
        let hp = Hyperparams {
            codebook_update: CodebookUpdate::Ema,
            epochs: 5,
            ..tiny_hp()
        };
        let data = tiny_corpus();
        let out = train(&data, &hp, TrainOptions::default()).unwrap();
        assert_eq!(out.log.len(), 5);
    }

    #[test]
    fn standardize_ships_stats_in_checkpoint() {
        let hp = Hyperparams { standardize: true, epochs: 1, ..tiny_hp() };
        let data = tiny_corpus();
        let out = train(&data, &hp, TrainOptions::default()).unwrap();
        assert!(out.checkpoint.extra("norm.mean").is_some());
        assert!(out.checkpoint.extra("norm.std").is_some());
        let mut rows = data.rows.clone();
        apply_standardization(&out.checkpoint, &mut rows).unwrap();
    }
}
