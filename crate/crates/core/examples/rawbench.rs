use std::time::Instant;
use guidecode::tensor::Elem;

#[inline(never)]
fn raw_gelu(x: &[f32], out: &mut [f32]) {
    let c = (2.0f32 / std::f32::consts::PI).sqrt();
    for i in 0..x.len() {
        let v = x[i];
        let inner = c * (v + 0.044715 * v * v * v);
        out[i] = 0.5 * v * (1.0 + inner.tanh());
    }
}

#[inline(never)]
fn raw_fast_exp(x: &[f32], out: &mut [f32]) {
    for i in 0..x.len() {
        out[i] = x[i].fast_exp();
    }
}

#[inline(never)]
fn raw_mul(x: &[f32], y: &[f32], out: &mut [f32]) {
    for i in 0..x.len() {
        out[i] = x[i] * y[i];
    }
}

fn main() {
    let n = 2_097_152;
    let x: Vec<f32> = (0..n).map(|i| ((i % 1000) as f32 / 250.0) - 2.0).collect();
    let y: Vec<f32> = x.iter().map(|v| v * 0.5).collect();
    let mut out = vec![0.0f32; n];

    for (name, f) in [("raw_gelu", 0usize), ("raw_fast_exp", 1), ("raw_mul", 2)] {
        let reps = 20;
        let t0 = Instant::now();
        for _ in 0..reps {
            match f {
                0 => raw_gelu(&x, &mut out),
                1 => raw_fast_exp(&x, &mut out),
                _ => raw_mul(&x, &y, &mut out),
            }
        }
        let per = t0.elapsed() / reps;
        println!("{name}: {:?} ({:.2} ns/elem) sink={}", per, per.as_nanos() as f64 / n as f64, out[7]);
    }

    // allocation + collect pattern as Tensor::map does
    let t0 = Instant::now();
    let reps = 20;
    let mut sink = 0.0;
    for _ in 0..reps {
        let v: Vec<f32> = x.iter().map(|&a| a * 1.5).collect();
        sink += v[3];
    }
    println!("alloc+collect: {:?} sink={sink}", t0.elapsed() / reps);
}
