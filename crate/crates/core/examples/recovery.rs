// Recovery-experiment tuning harness: trains the acceptance-4 config and
// reports recon vs noise floor, template recovery and token entropy.
use dfe_core::model::*;
use dfe_core::synth::{synth_generate, SynthSpec};
use dfe_core::tensor::Tensor;
use dfe_core::train::{train, TrainOptions};
use std::time::Instant;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let act = match args.get(4).map(|s| s.as_str()) {
        Some("relu") => Activation::Relu,
        _ => Activation::Gelu,
    };
    let lreg: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let batch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(512);

    let spec = SynthSpec { seed: 7, ..SynthSpec::default() }; // G=12 s=5 sigma=0.02 N=20000
    let (data, templates) = synth_generate(&spec).unwrap();
    let hp = Hyperparams {
        hidden: 32,
        layers: 2,
        heads: 4,
        codebook_size: 16,
        stages: 3,
        epochs,
        lr,
        seed,
        activation: act,
        lambda_reg: lreg,
        batch,
        ..Hyperparams::default()
    };
    let t0 = Instant::now();
    let out = train(&data, &hp, TrainOptions::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let params = out.checkpoint.to_model().unwrap();

    let floor = spec.noise_floor();
    let final_recon = out.log.last().unwrap().recon;
    println!("epochs {epochs} lr {lr} seed {seed}: {secs:.1}s total ({:.1} ms/epoch)", secs * 1000.0 / epochs as f64);
    println!("recon {final_recon:.5} vs floor {floor:.5} (ratio {:.3}, need <= 1.5)", final_recon / floor);

    // template recovery: best codeword offset per ground-truth template
    let mut matched = 0;
    for g in 0..12 {
        let mut best = 0.0f64;
        for k in 0..hp.codebook_size {
            let off = params.dec.token_template(&params.codebook, k, false).unwrap();
            best = best.max(cosine(&off, templates.row(g)).abs());
        }
        if best >= 0.85 { matched += 1; }
        print!("{best:.3} ");
    }
    println!("\nmatched {matched}/12 (need >= 9)");

    // token usage entropy over the corpus
    let mut counts = vec![0f64; hp.codebook_size];
    let bsz = 512;
    let n = data.rows.shape[0];
    let mut i = 0;
    while i < n {
        let end = (i + bsz).min(n);
        let x = Tensor::new(vec![end - i, 50], data.rows.data[i * 50..end * 50].to_vec());
        let toks = tokenize_batch(&params, &hp, &x).unwrap();
        for t in toks { counts[t] += 1.0; }
        i = end;
    }
    let total: f64 = counts.iter().sum();
    let h: f64 = counts.iter().filter(|&&c| c > 0.0).map(|&c| { let p = c / total; -p * p.log2() }).sum();
    let hn = h / (hp.codebook_size as f64).log2();
    println!("normalized entropy {hn:.4} (need >= 0.5)");

    // loss trajectory: first vs last 10%
    let k = (epochs / 10).max(1);
    let first: f64 = out.log[..k].iter().map(|r| r.total).sum::<f64>() / k as f64;
    let last: f64 = out.log[epochs - k..].iter().map(|r| r.total).sum::<f64>() / k as f64;
    println!("total first10% {first:.4} last10% {last:.4}");
    for row in out.log.iter().step_by((epochs / 10).max(1)) {
        println!("  ep {:3} recon {:.4} commit {:.4} orth {:.4} l1 {:.4} total {:.4}", row.epoch, row.recon, row.commit, row.orth, row.l1, row.total);
    }
}
