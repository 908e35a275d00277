use dfe_core::model::*;
use dfe_core::rng::{substream, STREAM_INIT};
use dfe_core::synth::{synth_generate, SynthSpec};
use dfe_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    dfe_core::runtime::tune_allocator();
    let spec = SynthSpec { seed: 7, samples: 2048, ..SynthSpec::default() };
    let (data, _) = synth_generate(&spec).unwrap();
    let hp = Hyperparams { hidden: 32, layers: 2, heads: 4, codebook_size: 16, stages: 3, ..Hyperparams::default() };
    let mut rng = substream(0, STREAM_INIT);
    let params = init_params(&hp, &mut rng);
    let x = Tensor::new(vec![512, 50], data.rows.data[..512 * 50].to_vec());

    // encoder-only timing
    let t = Instant::now();
    for _ in 0..10 { let _ = encode_batch(&params, &hp, &x).unwrap(); }
    println!("encode_batch:       {:6.1} ms", t.elapsed().as_secs_f64() * 100.0);

    // full forward
    let t = Instant::now();
    for _ in 0..10 { let _ = forward_batch(&params, &hp, &x, QuantMode::Fresh).unwrap(); }
    println!("forward_batch:      {:6.1} ms", t.elapsed().as_secs_f64() * 100.0);

    // forward + backward
    let t = Instant::now();
    for _ in 0..10 {
        let mut fb = forward_batch(&params, &hp, &x, QuantMode::Fresh).unwrap();
        let obj = fb.vars.objective;
        let _ = fb.tape.backward(obj).unwrap();
    }
    println!("forward+backward:   {:6.1} ms", t.elapsed().as_secs_f64() * 100.0);

    // quantize alone
    let z0 = encode_batch(&params, &hp, &x).unwrap();
    let t = Instant::now();
    for _ in 0..10 { let _ = dfe_core::rvq::quantize_batch(&z0, &params.codebook, 3).unwrap(); }
    println!("quantize_batch:     {:6.1} ms", t.elapsed().as_secs_f64() * 100.0);
}
