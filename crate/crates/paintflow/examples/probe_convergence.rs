//! Convergence probe: train the default config and report caption accuracy
//! on a corpus subset at intervals.

use std::time::Instant;

use paintflow::config::default_config;
use paintflow::dataset::{generate_corpus, Sample};
use paintflow::flow::SamplerConfig;
use paintflow::image::PixelImage;
use paintflow::pipelines::{caption_batch, classify_scene, generate_from_painted_batch, generation_prior_seed};
use paintflow::rng::{stream_rng, uniform_usize, Stream};
use paintflow::trainer::Trainer;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let total_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let eval_every: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let mut cfg = default_config();
    cfg.train.steps = total_steps;
    cfg.train.learning_rate = lr;
    let corpus = generate_corpus(200, 1, &cfg.canvas).expect("corpus");
    let codec = cfg.codec.to_codec();
    let mut trainer = Trainer::new(&cfg, codec).expect("trainer");

    let eval_n = 50;
    let sampler = SamplerConfig { num_steps: 12, seed: 1000, ..SamplerConfig::default() };
    let t0 = Instant::now();
    let mut rng = stream_rng(5, Stream::Data);
    let mut window_loss = 0.0f64;
    let mut window_n = 0usize;
    while (trainer.step as usize) < total_steps {
        let batch: Vec<&Sample> = (0..cfg.train.batch_size)
            .map(|_| &corpus.samples[uniform_usize(&mut rng, corpus.len())])
            .collect();
        let stats = trainer.train_step(&batch).expect("step");
        window_loss += stats.loss as f64;
        window_n += 1;
        let step = trainer.step as usize;
        if step % eval_every == 0 || step == total_steps {
            let ckpt = trainer.to_checkpoint();
            let subset: Vec<&Sample> = corpus.samples.iter().take(eval_n).collect();
            let rgbs: Vec<&PixelImage> = subset.iter().map(|s| &s.rgb).collect();
            let seeds: Vec<u64> = (0..eval_n as u64).map(|i| sampler.seed + i).collect();
            let caps = caption_batch(&rgbs, &ckpt, &seeds, &sampler).expect("caption");
            let exact = subset
                .iter()
                .zip(&caps)
                .filter(|(s, c)| s.scene.caption() == c.text)
                .count();
            let gen_seeds: Vec<u64> = seeds.iter().map(|&s| generation_prior_seed(s)).collect();
            let painted: Vec<&PixelImage> = subset.iter().map(|s| &s.painted.image).collect();
            let gens = generate_from_painted_batch(&painted, &ckpt, &gen_seeds, &sampler).expect("gen");
            let gen_ok = subset
                .iter()
                .zip(&gens)
                .filter(|(s, g)| classify_scene(g, &cfg.canvas).matches(&s.scene))
                .count();
            println!(
                "step {step}: loss(avg {} steps) {:.4}, caption {}/{}, genscene {}/{}, elapsed {:.1} min",
                window_n,
                window_loss / window_n as f64,
                exact,
                eval_n,
                gen_ok,
                eval_n,
                t0.elapsed().as_secs_f64() / 60.0
            );
            window_loss = 0.0;
            window_n = 0;
        }
    }
}
