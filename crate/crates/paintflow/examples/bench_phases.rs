//! Phase timing: forward graph vs backward vs optimizer.

use std::time::Instant;

use paintflow::backbone::{bind_params, encode_condition_nodes, predict_velocity_nodes};
use paintflow::codec::encode;
use paintflow::config::default_config;
use paintflow::dataset::generate_corpus;
use paintflow::graph::Graph;
use paintflow::image::PixelImage;
use paintflow::nn::{adam_step, AdamConfig, AdamState};
use paintflow::backbone::TaskDirection;
use paintflow::tensor::Tensor;
use paintflow::trainer::Trainer;

fn main() {
    let cfg = default_config();
    let corpus = generate_corpus(200, 1, &cfg.canvas).expect("corpus");
    let codec = cfg.codec.to_codec();
    let trainer = Trainer::new(&cfg, codec.clone()).expect("trainer");
    let b = 16usize;

    let images: Vec<&PixelImage> = corpus.samples.iter().take(b).map(|s| &s.rgb).collect();
    let dirs = vec![TaskDirection::Understanding; b];
    let z0 = encode(&corpus.samples[0].painted.image, &codec).expect("encode");
    let (tokens, channels) = (z0.tokens(), z0.channels());
    let mut z_t = Tensor::zeros(&[b * tokens, channels]);
    for (i, v) in z_t.data_mut().iter_mut().enumerate() {
        *v = ((i % 97) as f32 / 97.0) - 0.5;
    }
    let ts = vec![0.4f32; b];
    let target = Tensor::zeros(&[b * tokens, channels]);

    let reps = 5;
    let mut t_fwd = 0.0;
    let mut t_bwd = 0.0;
    let mut t_adam = 0.0;
    let mut adam = AdamState::new(&trainer.params);
    let mut params = trainer.params.clone();
    for _ in 0..reps {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let ids = bind_params(&mut g, &params, true);
        let cond = encode_condition_nodes(&mut g, &params, &ids, &cfg.model, &cfg.canvas, &images, &dirs).unwrap();
        let v = predict_velocity_nodes(&mut g, &params, &ids, &cfg.model, z_t.clone(), &ts, cond).unwrap();
        let loss = g.mse_loss(v, target.clone());
        t_fwd += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let grads = g.backward(loss);
        t_bwd += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let gvec: Vec<Vec<f32>> = (0..params.len())
            .map(|i| grads.get(ids[i]).map(|s| s.to_vec()).unwrap_or_default())
            .collect();
        adam_step(&mut params, &gvec, &mut adam, &AdamConfig::default()).unwrap();
        t_adam += t0.elapsed().as_secs_f64();
    }
    println!("forward: {:.3} s", t_fwd / reps as f64);
    println!("backward: {:.3} s", t_bwd / reps as f64);
    println!("adam+collect: {:.3} s", t_adam / reps as f64);
}
