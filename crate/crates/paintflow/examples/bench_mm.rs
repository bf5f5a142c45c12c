use std::time::Instant;
use paintflow::kernels::{matmul_nn, matmul_nt, matmul_tn};

fn main() {
    let (m, k, n) = (2064usize, 128usize, 384usize);
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let mut out = vec![0.0f32; m * n];
    let reps = 50;
    let t0 = Instant::now();
    for _ in 0..reps {
        out.iter_mut().for_each(|v| *v = 0.0);
        matmul_nn(&a, &b, m, k, n, &mut out);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("nn {}x{}x{}: {:.4} s -> {:.1} GFLOP/s", m, k, n, dt, 2.0 * (m*k*n) as f64 / dt / 1e9);

    let bt = vec![0.25f32; n * k];
    let t0 = Instant::now();
    for _ in 0..reps {
        out.iter_mut().for_each(|v| *v = 0.0);
        matmul_nt(&a, &bt, m, k, n, &mut out);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("nt: {:.4} s -> {:.1} GFLOP/s", dt, 2.0 * (m*k*n) as f64 / dt / 1e9);

    let b2 = vec![0.25f32; m * n];
    let mut out2 = vec![0.0f32; k * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        out2.iter_mut().for_each(|v| *v = 0.0);
        matmul_tn(&a, &b2, m, k, n, &mut out2);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("tn: {:.4} s -> {:.1} GFLOP/s", dt, 2.0 * (m*k*n) as f64 / dt / 1e9);
}
