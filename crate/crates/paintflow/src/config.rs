//! Structured-text run configuration: `[section]` headers with `key = value`
//! lines. Every field is explicit; missing or unknown keys are errors, so a
//! config echoed into a checkpoint re-parses to an equal config.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::backbone::ModelConfig;
use crate::painted::CanvasSpec;
use crate::trainer::{OptimizerKind, TrainConfig};

/// Codec settings as they appear in config files (weights live in checkpoints).
#[derive(Debug, Clone, PartialEq)]
pub enum CodecSpec {
    IdentityPatch { patch_size: usize },
    TinyAutoencoder {
        latent_channels: usize,
        downsample_factor: usize,
        train_steps: usize,
        learning_rate: f32,
    },
}

impl CodecSpec {
    /// The runtime codec this spec describes, initially without weights.
    pub fn to_codec(&self) -> CodecConfig {
        match self {
            CodecSpec::IdentityPatch { patch_size } => CodecConfig::IdentityPatch { patch_size: *patch_size },
            CodecSpec::TinyAutoencoder { latent_channels, downsample_factor, .. } => {
                CodecConfig::TinyAutoencoder {
                    latent_channels: *latent_channels,
                    downsample_factor: *downsample_factor,
                    weights: None,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub canvas: CanvasSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub codec: CodecSpec,
}

impl RunConfig {
    /// Cross-field validation (divisibility, token counts, value ranges).
    pub fn validate(&self) -> Result<()> {
        self.canvas.validate()?;
        self.model.validate(&self.canvas)?;
        self.codec.to_codec().validate(self.canvas.height, self.canvas.width)?;
        self.train.validate()?;
        Ok(())
    }
}

pub fn to_text(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[canvas]");
    let _ = writeln!(s, "width = {}", cfg.canvas.width);
    let _ = writeln!(s, "height = {}", cfg.canvas.height);
    let _ = writeln!(s, "channels = {}", cfg.canvas.channels);
    let _ = writeln!(s, "margin = {}", cfg.canvas.margin);
    let _ = writeln!(s, "background_value = {}", cfg.canvas.background_value);
    let _ = writeln!(s, "foreground_value = {}", cfg.canvas.foreground_value);
    let _ = writeln!(s);
    let _ = writeln!(s, "[model]");
    let _ = writeln!(s, "width = {}", cfg.model.width);
    let _ = writeln!(s, "depth = {}", cfg.model.depth);
    let _ = writeln!(s, "heads = {}", cfg.model.heads);
    let _ = writeln!(s, "patch_size = {}", cfg.model.patch_size);
    let _ = writeln!(s, "time_embed_dim = {}", cfg.model.time_embed_dim);
    let _ = writeln!(s, "cond_tokens = {}", cfg.model.cond_tokens);
    let _ = writeln!(s, "cond_depth = {}", cfg.model.cond_depth);
    let _ = writeln!(s, "mlp_hidden = {}", cfg.model.mlp_hidden);
    let _ = writeln!(s);
    let _ = writeln!(s, "[train]");
    let _ = writeln!(s, "steps = {}", cfg.train.steps);
    let _ = writeln!(s, "batch_size = {}", cfg.train.batch_size);
    let _ = writeln!(s, "learning_rate = {}", cfg.train.learning_rate);
    let _ = writeln!(s, "swap_probability = {}", cfg.train.swap_probability);
    let _ = writeln!(s, "seed = {}", cfg.train.seed);
    let _ = writeln!(s, "checkpoint_every = {}", cfg.train.checkpoint_every);
    let _ = writeln!(s, "optimizer = {}", cfg.train.optimizer.label());
    let _ = writeln!(s, "adam_beta1 = {}", cfg.train.adam_beta1);
    let _ = writeln!(s, "adam_beta2 = {}", cfg.train.adam_beta2);
    let _ = writeln!(s, "adam_eps = {}", cfg.train.adam_eps);
    let _ = writeln!(s, "weight_decay = {}", cfg.train.weight_decay);
    let _ = writeln!(s);
    let _ = writeln!(s, "[codec]");
    match &cfg.codec {
        CodecSpec::IdentityPatch { patch_size } => {
            let _ = writeln!(s, "kind = identity_patch");
            let _ = writeln!(s, "patch_size = {patch_size}");
        }
        CodecSpec::TinyAutoencoder { latent_channels, downsample_factor, train_steps, learning_rate } => {
            let _ = writeln!(s, "kind = tiny_autoencoder");
            let _ = writeln!(s, "latent_channels = {latent_channels}");
            let _ = writeln!(s, "downsample_factor = {downsample_factor}");
            let _ = writeln!(s, "train_steps = {train_steps}");
            let _ = writeln!(s, "learning_rate = {learning_rate}");
        }
    }
    s
}

struct Section {
    name: String,
    entries: BTreeMap<String, (String, bool)>, // value, consumed
}

impl Section {
    fn take(&mut self, key: &str) -> Result<String> {
        match self.entries.get_mut(key) {
            Some((v, consumed)) => {
                *consumed = true;
                Ok(v.clone())
            }
            None => Err(Error::Config(format!("[{}] is missing required key {key:?}", self.name))),
        }
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let raw = self.take(key)?;
        raw.parse::<T>().map_err(|_| {
            Error::Config(format!("[{}] key {key:?} has invalid value {raw:?}", self.name))
        })
    }

    fn finish(self) -> Result<()> {
        for (k, (_, consumed)) in &self.entries {
            if !consumed {
                return Err(Error::Config(format!("[{}] has unknown key {k:?}", self.name)));
            }
        }
        Ok(())
    }
}

type SectionEntries = BTreeMap<String, (String, bool)>;

fn split_sections(text: &str) -> Result<BTreeMap<String, SectionEntries>> {
    let mut out: BTreeMap<String, SectionEntries> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            if out.contains_key(name) {
                return Err(Error::Config(format!("duplicate section [{name}]")));
            }
            out.insert(name.to_string(), BTreeMap::new());
            current = Some(name.to_string());
            continue;
        }
        let section = current
            .as_ref()
            .ok_or_else(|| Error::Config(format!("line {}: key before any section", lineno + 1)))?;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let prior = out
            .get_mut(section)
            .expect("section inserted above")
            .insert(key.trim().to_string(), (value.trim().to_string(), false));
        if prior.is_some() {
            return Err(Error::Config(format!("duplicate key {:?} in [{}]", key.trim(), section)));
        }
    }
    Ok(out)
}

pub fn from_text(text: &str) -> Result<RunConfig> {
    let mut sections = split_sections(text)?;
    let mut section = |name: &str| -> Result<Section> {
        sections
            .remove(name)
            .map(|entries| Section { name: name.to_string(), entries })
            .ok_or_else(|| Error::Config(format!("missing section [{name}]")))
    };

    let mut canvas = section("canvas")?;
    let canvas_cfg = CanvasSpec {
        width: canvas.parse("width")?,
        height: canvas.parse("height")?,
        channels: canvas.parse("channels")?,
        margin: canvas.parse("margin")?,
        background_value: canvas.parse("background_value")?,
        foreground_value: canvas.parse("foreground_value")?,
    };
    canvas.finish()?;

    let mut model = section("model")?;
    let model_cfg = ModelConfig {
        width: model.parse("width")?,
        depth: model.parse("depth")?,
        heads: model.parse("heads")?,
        patch_size: model.parse("patch_size")?,
        time_embed_dim: model.parse("time_embed_dim")?,
        cond_tokens: model.parse("cond_tokens")?,
        cond_depth: model.parse("cond_depth")?,
        mlp_hidden: model.parse("mlp_hidden")?,
    };
    model.finish()?;

    let mut train = section("train")?;
    let optimizer = match train.take("optimizer")?.as_str() {
        "adam" => OptimizerKind::Adam,
        other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
    };
    let train_cfg = TrainConfig {
        steps: train.parse("steps")?,
        batch_size: train.parse("batch_size")?,
        learning_rate: train.parse("learning_rate")?,
        swap_probability: train.parse("swap_probability")?,
        seed: train.parse("seed")?,
        checkpoint_every: train.parse("checkpoint_every")?,
        optimizer,
        adam_beta1: train.parse("adam_beta1")?,
        adam_beta2: train.parse("adam_beta2")?,
        adam_eps: train.parse("adam_eps")?,
        weight_decay: train.parse("weight_decay")?,
    };
    train.finish()?;

    let mut codec = section("codec")?;
    let codec_spec = match codec.take("kind")?.as_str() {
        "identity_patch" => CodecSpec::IdentityPatch { patch_size: codec.parse("patch_size")? },
        "tiny_autoencoder" => CodecSpec::TinyAutoencoder {
            latent_channels: codec.parse("latent_channels")?,
            downsample_factor: codec.parse("downsample_factor")?,
            train_steps: codec.parse("train_steps")?,
            learning_rate: codec.parse("learning_rate")?,
        },
        other => return Err(Error::Config(format!("unknown codec kind {other:?}"))),
    };
    codec.finish()?;

    if let Some(extra) = sections.keys().next() {
        return Err(Error::Config(format!("unknown section [{extra}]")));
    }

    Ok(RunConfig { canvas: canvas_cfg, model: model_cfg, train: train_cfg, codec: codec_spec })
}

/// The desk-scale default configuration.
pub fn default_config() -> RunConfig {
    RunConfig {
        canvas: CanvasSpec::default(),
        model: ModelConfig::default(),
        train: TrainConfig::default(),
        codec: CodecSpec::IdentityPatch { patch_size: 8 },
    }
}
