//! Rough timing of a default-config training step and a sampling pass.

use std::time::Instant;

use paintflow::config::default_config;
use paintflow::dataset::generate_corpus;
use paintflow::dataset::Sample;
use paintflow::flow::SamplerConfig;
use paintflow::pipelines::caption_batch;
use paintflow::trainer::Trainer;

fn main() {
    let cfg = default_config();
    let corpus = generate_corpus(200, 1, &cfg.canvas).expect("corpus");
    let codec = cfg.codec.to_codec();
    let mut trainer = Trainer::new(&cfg, codec).expect("trainer");

    let batch: Vec<&Sample> = corpus.samples.iter().take(cfg.train.batch_size).collect();
    // warmup
    trainer.train_step(&batch).expect("step");
    let reps = 5;
    let t0 = Instant::now();
    for _ in 0..reps {
        trainer.train_step(&batch).expect("step");
    }
    let per_step = t0.elapsed().as_secs_f64() / reps as f64;
    println!("train_step ({} examples): {:.3} s/step", batch.len(), per_step);
    println!("1000 steps ~ {:.1} min", per_step * 1000.0 / 60.0);

    let ckpt = trainer.to_checkpoint();
    let images: Vec<&paintflow::image::PixelImage> = corpus.samples.iter().take(25).map(|s| &s.rgb).collect();
    let seeds: Vec<u64> = (0..25).collect();
    for steps in [10usize, 25] {
        let sampler = SamplerConfig { num_steps: steps, ..SamplerConfig::default() };
        let t0 = Instant::now();
        caption_batch(&images, &ckpt, &seeds, &sampler).expect("caption");
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "caption_batch of 25 at {steps} euler steps: {:.2} s ({:.3} s/sample); 600 samples ~ {:.1} min",
            dt,
            dt / 25.0,
            dt / 25.0 * 600.0 / 60.0
        );
    }
}
