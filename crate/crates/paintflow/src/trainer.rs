//! Bidirectional training: each example is randomly assigned a direction
//! (image -> caption or caption -> image), both directions flow through the
//! identical loss path, and one Adam step updates the shared weights.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    bind_params, encode_condition_nodes, init_model, predict_velocity_nodes, ModelConfig, TaskDirection,
};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::codec::{encode as codec_encode, train_autoencoder, CodecConfig, Latent};
use crate::config::{CodecSpec, RunConfig};
use crate::dataset::{Corpus, Sample};
use crate::error::{Error, Result};
use crate::flow::{interpolate, sample_time, velocity_target};
use crate::graph::Graph;
use crate::image::PixelImage;
use crate::nn::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::nn::ParamStore;
use crate::painted::CanvasSpec;
use crate::rng::{self, fill_normal, restore_state, save_state, uniform_f32, uniform_usize, Stream};
use crate::tensor::Tensor;

/// Global gradient-norm ceiling; the minimal stabilizer for the two
/// heterogeneous objectives sharing one set of weights.
pub const GRAD_CLIP_NORM: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
}

impl OptimizerKind {
    pub fn label(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub swap_probability: f32,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            swap_probability: 0.5,
            seed: 7,
            checkpoint_every: 0,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.swap_probability) {
            return Err(Error::Config("train.swap_probability must lie in [0, 1]".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("train.learning_rate must be a non-negative number".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One direction-resolved training example.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub z0: Latent,
    pub cond_image: PixelImage,
    pub direction: TaskDirection,
}

/// Understanding: condition on the RGB image, target the painted caption.
/// Generation: condition on the painted caption, target the RGB image.
pub fn make_training_example(
    sample: &Sample,
    direction: TaskDirection,
    codec: &CodecConfig,
) -> Result<TrainingExample> {
    let (target, cond) = match direction {
        TaskDirection::Understanding => (&sample.painted.image, &sample.rgb),
        TaskDirection::Generation => (&sample.rgb, &sample.painted.image),
    };
    Ok(TrainingExample { z0: codec_encode(target, codec)?, cond_image: cond.clone(), direction })
}

/// Draw the direction for one pair: Understanding with probability
/// `swap_probability`, Generation otherwise.
pub fn sample_direction(rng: &mut ChaCha8Rng, swap_probability: f32) -> TaskDirection {
    if uniform_f32(rng) < swap_probability {
        TaskDirection::Understanding
    } else {
        TaskDirection::Generation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: u64,
    /// Mean squared velocity error over every element in the batch.
    pub loss: f32,
    pub loss_understanding: Option<f32>,
    pub loss_generation: Option<f32>,
    pub sum_sq_understanding: f64,
    pub elems_understanding: usize,
    pub sum_sq_generation: f64,
    pub elems_generation: usize,
    pub grad_norm: f32,
}

pub struct Trainer {
    pub canvas: CanvasSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub codec: CodecConfig,
    pub codec_spec: CodecSpec,
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    /// Fresh trainer from a validated run config; the codec must already
    /// carry weights if it needs them.
    pub fn new(cfg: &RunConfig, codec: CodecConfig) -> Result<Trainer> {
        cfg.validate()?;
        let source = (cfg.canvas.height, cfg.canvas.width, cfg.canvas.channels);
        let (_, latent_channels) = codec.latent_shape(source)?;
        let params = init_model(&cfg.model, &cfg.canvas, latent_channels, cfg.train.seed)?;
        let adam = AdamState::new(&params);
        let rng = rng::stream_rng(cfg.train.seed, Stream::Train);
        Ok(Trainer {
            canvas: cfg.canvas.clone(),
            model: cfg.model.clone(),
            train: cfg.train.clone(),
            codec,
            codec_spec: cfg.codec.clone(),
            params,
            adam,
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Trainer {
        Trainer {
            canvas: ckpt.canvas,
            model: ckpt.model,
            train: ckpt.train,
            codec: ckpt.codec,
            codec_spec: ckpt.codec_spec,
            params: ckpt.params,
            adam: ckpt.adam,
            rng: restore_state(&ckpt.rng_state),
            step: ckpt.step,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            canvas: self.canvas.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            codec: self.codec.clone(),
            codec_spec: self.codec_spec.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            rng_state: save_state(&self.rng),
        }
    }

    /// One optimization step over a batch of samples. Per example: draw a
    /// direction, build (z0, cond), draw z1 ~ N(0, I) and t ~ U(0, 1), form
    /// z(t), predict the velocity, and average the squared error over the
    /// whole batch. The loss path is identical for both directions; only the
    /// (target, condition, task row) assignment differs.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Config("training batch must be non-empty".into()));
        }
        let b = batch.len();
        let directions: Vec<TaskDirection> =
            (0..b).map(|_| sample_direction(&mut self.rng, self.train.swap_probability)).collect();
        let examples: Vec<TrainingExample> = batch
            .iter()
            .zip(&directions)
            .map(|(s, &d)| make_training_example(s, d, &self.codec))
            .collect::<Result<_>>()?;

        let source = (self.canvas.height, self.canvas.width, self.canvas.channels);
        let (tokens, channels) = self.codec.latent_shape(source)?;
        let mut z_t = Tensor::zeros(&[b * tokens, channels]);
        let mut target = Tensor::zeros(&[b * tokens, channels]);
        let mut ts = Vec::with_capacity(b);
        for (i, ex) in examples.iter().enumerate() {
            let mut z1 = Tensor::zeros(&[tokens, channels]);
            fill_normal(&mut self.rng, z1.data_mut());
            let t = sample_time(&mut self.rng);
            let state = interpolate(&ex.z0.data, &z1, t)?;
            let v = velocity_target(&ex.z0.data, &z1)?;
            let block = tokens * channels;
            z_t.data_mut()[i * block..(i + 1) * block].copy_from_slice(state.z_t.data());
            target.data_mut()[i * block..(i + 1) * block].copy_from_slice(v.data());
            ts.push(t);
        }

        let mut g = Graph::new();
        let ids = bind_params(&mut g, &self.params, true);
        let cond_images: Vec<&PixelImage> = examples.iter().map(|e| &e.cond_image).collect();
        let cond = encode_condition_nodes(&mut g, &self.params, &ids, &self.model, &self.canvas, &cond_images, &directions)?;
        let v_hat = predict_velocity_nodes(&mut g, &self.params, &ids, &self.model, z_t, &ts, cond)?;
        let loss_node = g.mse_loss(v_hat, target.clone());
        let loss = g.value(loss_node).data()[0];
        if !loss.is_finite() {
            let n_und = directions.iter().filter(|d| **d == TaskDirection::Understanding).count();
            return Err(Error::NonFinite {
                context: format!(
                    "training loss at step {} (directions: {} understanding / {} generation; t = {:?})",
                    self.step,
                    n_und,
                    b - n_und,
                    ts
                ),
            });
        }

        // Per-direction diagnostics from the same prediction.
        let block = tokens * channels;
        let v_vals = g.value(v_hat).data();
        let mut sum_sq = [0.0f64; 2];
        let mut elems = [0usize; 2];
        for (i, &dir) in directions.iter().enumerate() {
            let mut acc = 0.0f64;
            let span = i * block..(i + 1) * block;
            for (&v, &t) in v_vals[span.clone()].iter().zip(&target.data()[span]) {
                let d = (v - t) as f64;
                acc += d * d;
            }
            sum_sq[dir.index()] += acc;
            elems[dir.index()] += block;
        }

        let grads_by_node = g.backward(loss_node);
        let mut grads: Vec<Vec<f32>> = (0..self.params.len())
            .map(|i| grads_by_node.get(ids[i]).map(|s| s.to_vec()).unwrap_or_default())
            .collect();
        let grad_norm = clip_grad_norm(&mut grads, GRAD_CLIP_NORM);
        adam_step(&mut self.params, &grads, &mut self.adam, &self.train.adam())?;
        self.step += 1;

        Ok(StepStats {
            step: self.step,
            loss,
            loss_understanding: (elems[0] > 0).then(|| (sum_sq[0] / elems[0] as f64) as f32),
            loss_generation: (elems[1] > 0).then(|| (sum_sq[1] / elems[1] as f64) as f32),
            sum_sq_understanding: sum_sq[0],
            elems_understanding: elems[0],
            sum_sq_generation: sum_sq[1],
            elems_generation: elems[1],
            grad_norm,
        })
    }

    /// Run from the current step to `train.steps`, drawing batches uniformly
    /// with replacement, appending the metrics log and writing checkpoints.
    pub fn run(&mut self, corpus: &Corpus, out_dir: Option<&Path>) -> Result<Vec<StepStats>> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if corpus.canvas != self.canvas {
            return Err(Error::Config("corpus canvas does not match the training canvas".into()));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut stats = Vec::new();
        while (self.step as usize) < self.train.steps {
            let batch: Vec<&Sample> = (0..self.train.batch_size)
                .map(|_| &corpus.samples[uniform_usize(&mut self.rng, corpus.len())])
                .collect();
            let s = self.train_step(&batch)?;
            if let Some(dir) = out_dir {
                append_metrics_line(&dir.join("metrics.log"), &s)?;
                if self.train.checkpoint_every > 0
                    && (self.step as usize).is_multiple_of(self.train.checkpoint_every)
                    && (self.step as usize) < self.train.steps
                {
                    save_checkpoint(&self.to_checkpoint(), dir.join(format!("checkpoint_{:06}.unim", self.step)))?;
                }
            }
            stats.push(s);
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&self.to_checkpoint(), dir.join("checkpoint_final.unim"))?;
        }
        Ok(stats)
    }
}

fn append_metrics_line(path: &Path, s: &StepStats) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let fmt = |v: Option<f32>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
    writeln!(
        f,
        "{}\t{:.6}\t{}\t{}",
        s.step,
        s.loss,
        fmt(s.loss_understanding),
        fmt(s.loss_generation)
    )
    .map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub stats: Vec<StepStats>,
}

/// Full training entry point: trains the codec first when the config asks
/// for the autoencoder, then optimizes the backbone.
pub fn train(corpus: &Corpus, cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let codec = match &cfg.codec {
        CodecSpec::IdentityPatch { .. } => cfg.codec.to_codec(),
        CodecSpec::TinyAutoencoder { train_steps, learning_rate, .. } => {
            let (trained, _) =
                train_autoencoder(corpus, &cfg.codec.to_codec(), *train_steps, cfg.train.seed, *learning_rate)?;
            trained
        }
    };
    let mut trainer = Trainer::new(cfg, codec)?;
    let stats = trainer.run(corpus, out_dir)?;
    Ok(TrainOutcome { checkpoint: trainer.to_checkpoint(), stats })
}

/// Resume from a checkpoint and run to its configured step budget.
pub fn resume(ckpt: Checkpoint, corpus: &Corpus, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::from_checkpoint(ckpt);
    let stats = trainer.run(corpus, out_dir)?;
    Ok(TrainOutcome { checkpoint: trainer.to_checkpoint(), stats })
}
