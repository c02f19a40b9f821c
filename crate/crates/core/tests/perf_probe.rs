//! Rough single-core throughput probe for the kernel shapes the training
//! loop hits. Not part of the regular suite; run on demand with
//! `cargo test -p usiqa-core --test perf_probe -- --ignored --nocapture`.

use std::time::Instant;

use usiqa_core::Scalar;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let mut c = vec![0.0f32; m * n];
    for _ in 0..3 {
        f32::gemm(m, k, n, 1.0, &a, &b, 0.0, &mut c);
    }
    let t = Instant::now();
    for _ in 0..reps {
        f32::gemm(m, k, n, 1.0, &a, &b, 0.0, &mut c);
    }
    let dt = t.elapsed().as_secs_f64();
    let gf = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
    println!("sgemm {m}x{k}x{n}: {gf:.1} GFLOP/s");
}

#[test]
#[ignore]
fn kernel_throughput() {
    bench(4160, 64, 64, 200); // batched token linear, B=64
    bench(4160, 64, 256, 100); // mlp in
    bench(4160, 256, 64, 100); // mlp out
    bench(65, 64, 64, 2000); // single-frame linear
    bench(65, 65, 16, 2000); // per-head attention
    bench(16384, 1152, 32, 10); // decoder conv stage 1 (im2col rows)
    bench(256, 1152, 32, 200); // decoder conv stage 1, single frame

    let x: Vec<f32> = (0..4160 * 256).map(|i| (i as f32) * 1e-6 - 0.5).collect();
    let mut y = vec![0.0f32; x.len()];
    let t = Instant::now();
    for _ in 0..20 {
        for (o, &v) in y.iter_mut().zip(x.iter()) {
            let c = 0.7978845608f32;
            let k3 = 0.044715f32;
            *o = 0.5 * v * (1.0 + (c * (v + k3 * v * v * v)).tanh());
        }
    }
    println!("gelu tanh: {:.0} Melem/s", 20.0 * x.len() as f64 / t.elapsed().as_secs_f64() / 1e6);
}
