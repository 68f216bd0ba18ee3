use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ide_core::tensor::{kernels, Array, Rng, Tape};

fn conv_bench(c: &mut Criterion) {
    let mut rng = Rng::from_seed(1);
    // stage-2 stem scale: 19ch 16x16 -> 32ch
    let x: Vec<f32> = rng.normal_vec(19 * 16 * 16, 1.0);
    let w: Vec<f32> = rng.normal_vec(32 * 19 * 3 * 3, 0.1);
    c.bench_function("conv2d_19x16x16_to_32_k3", |b| {
        b.iter(|| {
            let mut out = vec![0.0f32; 32 * 16 * 16];
            kernels::conv2d_fwd(black_box(&x), black_box(&w), 19, 16, 16, 32, 3, 1, 1, &mut out);
            out
        })
    });
    // stage-1 encoder scale: 3ch 64x64 -> 32ch stride 2
    let x2: Vec<f32> = rng.normal_vec(3 * 64 * 64, 1.0);
    let w2: Vec<f32> = rng.normal_vec(32 * 3 * 3 * 3, 0.1);
    c.bench_function("conv2d_3x64x64_to_32_s2", |b| {
        b.iter(|| {
            let mut out = vec![0.0f32; 32 * 32 * 32];
            kernels::conv2d_fwd(black_box(&x2), black_box(&w2), 3, 64, 64, 32, 3, 2, 1, &mut out);
            out
        })
    });
    let x3: Vec<f32> = rng.normal_vec(32 * 32 * 32, 1.0);
    let w3: Vec<f32> = rng.normal_vec(32 * 32 * 3 * 3, 0.1);
    c.bench_function("conv2d_32x32x32_to_32", |b| {
        b.iter(|| {
            let mut out = vec![0.0f32; 32 * 32 * 32];
            kernels::conv2d_fwd(black_box(&x3), black_box(&w3), 32, 32, 32, 32, 3, 1, 1, &mut out);
            out
        })
    });
}

fn matmul_bench(c: &mut Criterion) {
    let mut rng = Rng::from_seed(2);
    let a: Vec<f32> = rng.normal_vec(65 * 64, 1.0);
    let b: Vec<f32> = rng.normal_vec(64 * 64, 1.0);
    c.bench_function("matmul_65x64x64", |bch| {
        bch.iter(|| {
            let mut out = vec![0.0f32; 65 * 64];
            kernels::matmul_nn(black_box(&a), black_box(&b), 65, 64, 64, &mut out);
            out
        })
    });
}

fn tape_step_bench(c: &mut Criterion) {
    // forward+backward of a conv stack at stage-1 scale
    let mut rng = Rng::from_seed(3);
    let x = Array::from_vec(vec![3, 64, 64], rng.normal_vec(3 * 64 * 64, 1.0));
    let w1 = Array::from_vec(vec![16, 3, 3, 3], rng.normal_vec(16 * 3 * 9, 0.2));
    let w2 = Array::from_vec(vec![32, 16, 3, 3], rng.normal_vec(32 * 16 * 9, 0.2));
    c.bench_function("tape_conv_stack_fwd_bwd", |b| {
        b.iter(|| {
            let mut t: Tape<f32> = Tape::new();
            let xv = t.constant(x.clone());
            let w1v = t.leaf(w1.clone());
            let w2v = t.leaf(w2.clone());
            let h1 = t.conv2d(xv, w1v, 2, 1);
            let h1 = t.relu(h1);
            let h2 = t.conv2d(h1, w2v, 2, 1);
            let l = t.mean(h2);
            t.backward(l);
            t.grad(w1v)
        })
    });
}

criterion_group!(benches, conv_bench, matmul_bench, tape_step_bench);
criterion_main!(benches);
