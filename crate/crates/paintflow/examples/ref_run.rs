//! Instrumented reference training run: periodic metrics on a corpus subset,
//! sample dumps, and a final checkpoint for offline evaluation.

use std::path::PathBuf;
use std::time::Instant;

use paintflow::checkpoint::save_checkpoint;
use paintflow::config::default_config;
use paintflow::dataset::{generate_corpus, Sample};
use paintflow::flow::SamplerConfig;
use paintflow::image::PixelImage;
use paintflow::pipelines::{caption_batch, classify_scene, generate_from_painted_batch, generation_prior_seed};
use paintflow::rng::uniform_usize;
use paintflow::trainer::Trainer;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let total_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2500);
    let eval_every: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(250);
    let lr: f32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(7);
    let out: PathBuf = args.get(5).map(PathBuf::from).unwrap_or_else(|| "/tmp/refrun".into());
    std::fs::create_dir_all(&out).unwrap();

    let mut cfg = default_config();
    cfg.train.steps = total_steps;
    cfg.train.learning_rate = lr;
    cfg.train.seed = seed;
    let corpus = generate_corpus(200, 1, &cfg.canvas).expect("corpus");
    let codec = cfg.codec.to_codec();
    let mut trainer = Trainer::new(&cfg, codec).expect("trainer");

    let eval_n = 50;
    let sampler = SamplerConfig { num_steps: 12, seed: 10_000, ..SamplerConfig::default() };
    let t0 = Instant::now();
    let mut bw = (0.0f64, 0.0f64, 0usize, 0usize); // und sum/gen sum, und elems, gen elems
    while (trainer.step as usize) < total_steps {
        let batch: Vec<&Sample> = (0..cfg.train.batch_size)
            .map(|_| {
                let idx = uniform_usize(&mut trainer.rng, corpus.len());
                &corpus.samples[idx]
            })
            .collect();
        // NOTE: batch selection here duplicates Trainer::run so we can
        // instrument between steps; the acceptance test uses Trainer::run.
        let stats = trainer.train_step(&batch).expect("step");
        bw.0 += stats.sum_sq_understanding;
        bw.1 += stats.sum_sq_generation;
        bw.2 += stats.elems_understanding;
        bw.3 += stats.elems_generation;

        let step = trainer.step as usize;
        if step % eval_every == 0 || step == total_steps {
            let ckpt = trainer.to_checkpoint();
            let subset: Vec<&Sample> = corpus.samples.iter().take(eval_n).collect();
            let rgbs: Vec<&PixelImage> = subset.iter().map(|s| &s.rgb).collect();
            let seeds: Vec<u64> = (0..eval_n as u64).map(|i| sampler.seed + i).collect();
            let caps = caption_batch(&rgbs, &ckpt, &seeds, &sampler).expect("caption");
            let exact = subset.iter().zip(&caps).filter(|(s, c)| s.scene.caption() == c.text).count();
            let gen_seeds: Vec<u64> = seeds.iter().map(|&s| generation_prior_seed(s)).collect();
            let painted: Vec<&PixelImage> = subset.iter().map(|s| &s.painted.image).collect();
            let gens = generate_from_painted_batch(&painted, &ckpt, &gen_seeds, &sampler).expect("gen");
            let gen_ok = subset
                .iter()
                .zip(&gens)
                .filter(|(s, g)| classify_scene(g, &cfg.canvas).matches(&s.scene))
                .count();
            println!(
                "step {step}: und {:.4} gen {:.4} | caption {exact}/{eval_n} genscene {gen_ok}/{eval_n} | {:.1} min",
                bw.0 / bw.2.max(1) as f64,
                bw.1 / bw.3.max(1) as f64,
                t0.elapsed().as_secs_f64() / 60.0
            );
            for i in 0..3 {
                let trip = PixelImage::hconcat(&[&subset[i].rgb, &caps[i].painted, &gens[i]], -1.0).unwrap();
                trip.save_png(out.join(format!("step{step:05}_{i}.png"))).unwrap();
            }
            bw = (0.0, 0.0, 0, 0);
        }
    }
    save_checkpoint(&trainer.to_checkpoint(), out.join("ref_final.unim")).unwrap();
    println!("saved {}", out.join("ref_final.unim").display());
}
