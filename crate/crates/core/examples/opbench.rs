use dfe_core::tape::Tape;
use dfe_core::tensor::Tensor;
use std::time::Instant;

fn t(name: &str, mut f: impl FnMut()) {
    // warm
    f();
    let n = 20;
    let start = Instant::now();
    for _ in 0..n { f(); }
    println!("{name:24} {:7.2} ms", start.elapsed().as_secs_f64() * 1000.0 / n as f64);
}

fn main() {
    dfe_core::runtime::tune_allocator();
    let x5 = Tensor::ones(vec![5120, 5]);
    let w5 = Tensor::ones(vec![5, 32]);
    let x32 = Tensor::ones(vec![5120, 32]);
    let w96 = Tensor::ones(vec![32, 96]);
    let w128 = Tensor::ones(vec![32, 128]);
    let x128 = Tensor::ones(vec![5120, 128]);
    let w_down = Tensor::ones(vec![128, 32]);
    let b96 = Tensor::ones(vec![96]);
    let b128 = Tensor::ones(vec![128]);
    let b32 = Tensor::ones(vec![32]);
    let qkv = Tensor::ones(vec![5120, 96]);
    let g32 = Tensor::ones(vec![32]);

    t("alloc 5120x128", || { let v = vec![0.37f64; 5120*128]; std::hint::black_box(&v); });
    t("affine 5x32", || { let mut t2 = Tape::new(); let a = t2.input(x5.clone()); let w = t2.input(w5.clone()); let b = t2.input(b32.clone()); let _ = t2.affine(a, w, b); });
    t("input clone only", || { let mut t2 = Tape::new(); let _ = t2.input(x32.clone()); });
    t("affine 32x96", || { let mut t2 = Tape::new(); let a = t2.input(x32.clone()); let w = t2.input(w96.clone()); let b = t2.input(b96.clone()); let _ = t2.affine(a, w, b); });
    t("affine 32x128", || { let mut t2 = Tape::new(); let a = t2.input(x32.clone()); let w = t2.input(w128.clone()); let b = t2.input(b128.clone()); let _ = t2.affine(a, w, b); });
    t("affine 128x32", || { let mut t2 = Tape::new(); let a = t2.input(x128.clone()); let w = t2.input(w_down.clone()); let b = t2.input(b32.clone()); let _ = t2.affine(a, w, b); });
    t("attention 512x10x4", || { let mut t2 = Tape::new(); let a = t2.input(qkv.clone()); let _ = t2.attention(a, 512, 10, 4); });
    t("layer_norm 5120x32", || { let mut t2 = Tape::new(); let a = t2.input(x32.clone()); let g = t2.input(g32.clone()); let b = t2.input(b32.clone()); let _ = t2.layer_norm(a, g, b, 1e-5); });
    t("gelu 5120x128", || { let mut t2 = Tape::new(); let a = t2.input(x128.clone()); let _ = t2.gelu(a); });
    t("add 5120x32", || { let mut t2 = Tape::new(); let a = t2.input(x32.clone()); let b = t2.input(x32.clone()); let _ = t2.add(a, b); });
    t("add_pos 512", || { let mut t2 = Tape::new(); let a = t2.input(x32.clone()); let p = t2.input(Tensor::ones(vec![10, 32])); let _ = t2.add_pos(a, p, 512); });
    t("mean_pool", || { let mut t2 = Tape::new(); let a = t2.input(x32.clone()); let _ = t2.mean_pool(a, 512, 10); });

    // raw gemm for reference
    let a = vec![1.0f64; 5120*32];
    let b = vec![1.0f64; 32*128];
    let mut c = vec![0.0f64; 5120*128];
    t("raw dgemm 5120x32x128", || { dfe_core::tensor::gemm(5120, 32, 128, 1.0, &a, &b, 0.0, &mut c); });
    bench_backward();
}

// appended: backward timings (forward + backward minus forward)
fn bench_backward() {
    let x32 = Tensor::ones(vec![5120, 32]);
    let w128 = Tensor::ones(vec![32, 128]);
    let b128 = Tensor::ones(vec![128]);
    let qkv = Tensor::ones(vec![5120, 96]);
    let x128 = Tensor::ones(vec![5120, 128]);
    let g32 = Tensor::ones(vec![32]);
    let b32v = Tensor::ones(vec![32]);

    t("bwd affine 32x128", || {
        let mut t2 = Tape::new();
        let a = t2.param(x32.clone());
        let w = t2.param(w128.clone());
        let b = t2.param(b128.clone());
        let y = t2.affine(a, w, b);
        let l = t2.sum_sq(y);
        let _ = t2.backward(l).unwrap();
    });
    t("bwd attention", || {
        let mut t2 = Tape::new();
        let a = t2.param(qkv.clone());
        let y = t2.attention(a, 512, 10, 4);
        let l = t2.sum_sq(y);
        let _ = t2.backward(l).unwrap();
    });
    t("bwd gelu", || {
        let mut t2 = Tape::new();
        let a = t2.param(x128.clone());
        let y = t2.gelu(a);
        let l = t2.sum_sq(y);
        let _ = t2.backward(l).unwrap();
    });
    t("bwd layer_norm", || {
        let mut t2 = Tape::new();
        let a = t2.param(x32.clone());
        let g = t2.param(g32.clone());
        let b = t2.param(b32v.clone());
        let y = t2.layer_norm(a, g, b, 1e-5);
        let l = t2.sum_sq(y);
        let _ = t2.backward(l).unwrap();
    });
}
