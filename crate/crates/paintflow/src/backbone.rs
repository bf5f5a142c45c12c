//! The unified transformer: a shared condition encoder that turns either
//! modality (RGB render or painted caption) into conditioning tokens, a
//! learnable two-row task-embedding table selecting the translation
//! direction, and a velocity network over latent tokens with AdaLN time
//! modulation. Latent and condition tokens are concatenated into one
//! self-attention sequence; fixed sinusoidal positions plus a learned
//! segment embedding tell them apart.

use crate::codec::{encode as codec_encode, CodecConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::PixelImage;
use crate::nn::{init_linear, init_normal, sinusoidal_positions, time_features, ParamStore};
use crate::painted::CanvasSpec;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Which way the translation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskDirection {
    /// RGB image in, painted caption out.
    Understanding,
    /// Painted caption in, RGB image out.
    Generation,
}

impl TaskDirection {
    pub fn index(&self) -> usize {
        match self {
            TaskDirection::Understanding => 0,
            TaskDirection::Generation => 1,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TaskDirection::Understanding => "understanding",
            TaskDirection::Generation => "generation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub time_embed_dim: usize,
    pub cond_tokens: usize,
    pub cond_depth: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 128,
            depth: 6,
            heads: 4,
            patch_size: 8,
            time_embed_dim: 128,
            cond_tokens: 64,
            cond_depth: 2,
            mlp_hidden: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, canvas: &CanvasSpec) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("model depth must be at least 1".into()));
        }
        if self.cond_depth == 0 {
            return Err(Error::Config("condition encoder depth must be at least 1".into()));
        }
        if self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.time_embed_dim < 4 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("time_embed_dim must be an even number >= 4".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        if self.patch_size == 0
            || !canvas.width.is_multiple_of(self.patch_size)
            || !canvas.height.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "canvas {}x{} must be divisible by patch size {}",
                canvas.width, canvas.height, self.patch_size
            )));
        }
        let expected = (canvas.height / self.patch_size) * (canvas.width / self.patch_size);
        if self.cond_tokens != expected {
            return Err(Error::Config(format!(
                "cond_tokens {} must equal (H/p)*(W/p) = {expected}",
                self.cond_tokens
            )));
        }
        Ok(())
    }

    fn patch_dim(&self, canvas: &CanvasSpec) -> usize {
        self.patch_size * self.patch_size * canvas.channels
    }
}

/// Encoder output plus the appended task-embedding row. Only
/// [`encode_condition`] constructs one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens {
    tokens: Tensor,
    direction: TaskDirection,
}

impl ConditionTokens {
    /// (cond_tokens + 1, width)
    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn direction(&self) -> TaskDirection {
        self.direction
    }
}

/// Latent tokens whose channel count exceeds the model width are split into
/// equal sub-tokens so the token embedding and the output projection stay
/// full-rank; otherwise noise components outside the readout's column space
/// could never be predicted. Returns (split factor, channels per sub-token).
pub fn sub_token_split(latent_channels: usize, width: usize) -> Result<(usize, usize)> {
    for s in 1..=latent_channels {
        if latent_channels.is_multiple_of(s) && latent_channels / s <= width {
            return Ok((s, latent_channels / s));
        }
    }
    Err(Error::Config(format!(
        "cannot split {latent_channels} latent channels into width-{width} sub-tokens"
    )))
}

/// Deterministic parameter initialization. AdaLN modulation heads and the
/// final projection start at zero so every block begins as an identity map
/// and the initial velocity prediction is exactly zero.
pub fn init_model(cfg: &ModelConfig, canvas: &CanvasSpec, latent_channels: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate(canvas)?;
    let mut rng = rng::stream_rng(seed, Stream::Init);
    let w = cfg.width;
    let mut p = ParamStore::new();

    p.add("cond.patch.w", init_linear(&mut rng, cfg.patch_dim(canvas), w));
    p.add("cond.patch.b", Tensor::zeros(&[w]));
    for i in 0..cfg.cond_depth {
        p.add(format!("cond.b{i}.ln1.g"), Tensor::filled(&[w], 1.0));
        p.add(format!("cond.b{i}.ln1.b"), Tensor::zeros(&[w]));
        p.add(format!("cond.b{i}.attn.qkv.w"), init_linear(&mut rng, w, 3 * w));
        p.add(format!("cond.b{i}.attn.qkv.b"), Tensor::zeros(&[3 * w]));
        p.add(format!("cond.b{i}.attn.out.w"), init_linear(&mut rng, w, w));
        p.add(format!("cond.b{i}.attn.out.b"), Tensor::zeros(&[w]));
        p.add(format!("cond.b{i}.ln2.g"), Tensor::filled(&[w], 1.0));
        p.add(format!("cond.b{i}.ln2.b"), Tensor::zeros(&[w]));
        p.add(format!("cond.b{i}.mlp.fc1.w"), init_linear(&mut rng, w, cfg.mlp_hidden));
        p.add(format!("cond.b{i}.mlp.fc1.b"), Tensor::zeros(&[cfg.mlp_hidden]));
        p.add(format!("cond.b{i}.mlp.fc2.w"), init_linear(&mut rng, cfg.mlp_hidden, w));
        p.add(format!("cond.b{i}.mlp.fc2.b"), Tensor::zeros(&[w]));
    }
    p.add("task.table", init_normal(&mut rng, &[2, w], 0.02));
    p.add("seg.latent", init_normal(&mut rng, &[w], 0.02));
    p.add("seg.cond", init_normal(&mut rng, &[w], 0.02));

    let (_, sub_channels) = sub_token_split(latent_channels, w)?;
    p.add("lat.embed.w", init_linear(&mut rng, sub_channels, w));
    p.add("lat.embed.b", Tensor::zeros(&[w]));
    p.add("time.fc1.w", init_linear(&mut rng, cfg.time_embed_dim, w));
    p.add("time.fc1.b", Tensor::zeros(&[w]));
    p.add("time.fc2.w", init_linear(&mut rng, w, w));
    p.add("time.fc2.b", Tensor::zeros(&[w]));
    for i in 0..cfg.depth {
        for head in ["shift1", "scale1", "gate1", "shift2", "scale2", "gate2"] {
            p.add(format!("dit.b{i}.adaln.{head}.w"), Tensor::zeros(&[w, w]));
            p.add(format!("dit.b{i}.adaln.{head}.b"), Tensor::zeros(&[w]));
        }
        p.add(format!("dit.b{i}.attn.qkv.w"), init_linear(&mut rng, w, 3 * w));
        p.add(format!("dit.b{i}.attn.qkv.b"), Tensor::zeros(&[3 * w]));
        p.add(format!("dit.b{i}.attn.out.w"), init_linear(&mut rng, w, w));
        p.add(format!("dit.b{i}.attn.out.b"), Tensor::zeros(&[w]));
        p.add(format!("dit.b{i}.mlp.fc1.w"), init_linear(&mut rng, w, cfg.mlp_hidden));
        p.add(format!("dit.b{i}.mlp.fc1.b"), Tensor::zeros(&[cfg.mlp_hidden]));
        p.add(format!("dit.b{i}.mlp.fc2.w"), init_linear(&mut rng, cfg.mlp_hidden, w));
        p.add(format!("dit.b{i}.mlp.fc2.b"), Tensor::zeros(&[w]));
    }
    p.add("final.adaln.shift.w", Tensor::zeros(&[w, w]));
    p.add("final.adaln.shift.b", Tensor::zeros(&[w]));
    p.add("final.adaln.scale.w", Tensor::zeros(&[w, w]));
    p.add("final.adaln.scale.b", Tensor::zeros(&[w]));
    p.add("final.proj.w", Tensor::zeros(&[w, sub_channels]));
    p.add("final.proj.b", Tensor::zeros(&[sub_channels]));
    Ok(p)
}

pub fn count_parameters(params: &ParamStore) -> usize {
    params.scalar_count()
}

/// Bind every parameter into a graph (as trainable leaves when `train`),
/// returning node ids aligned with ParamStore entry order.
pub fn bind_params(g: &mut Graph, params: &ParamStore, train: bool) -> Vec<NodeId> {
    (0..params.len())
        .map(|i| {
            let (_, t) = params.at(i);
            if train {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            }
        })
        .collect()
}

struct Bound<'a> {
    params: &'a ParamStore,
    ids: &'a [NodeId],
}

impl<'a> Bound<'a> {
    fn get(&self, name: &str) -> NodeId {
        self.ids[self.params.id_of(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }
}

/// Flatten images into patch tokens: (batch * cond_tokens, patch_dim).
fn patchify_images(cfg: &ModelConfig, canvas: &CanvasSpec, images: &[&PixelImage]) -> Result<Tensor> {
    let codec = CodecConfig::IdentityPatch { patch_size: cfg.patch_size };
    let patch_dim = cfg.patch_dim(canvas);
    let mut out = Tensor::zeros(&[images.len() * cfg.cond_tokens, patch_dim]);
    for (i, img) in images.iter().enumerate() {
        if img.height() != canvas.height || img.width() != canvas.width || img.channels() != canvas.channels {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}x{}", canvas.height, canvas.width, canvas.channels),
                actual: format!("{}x{}x{}", img.height(), img.width(), img.channels()),
            });
        }
        let latent = codec_encode(img, &codec)?;
        debug_assert_eq!(latent.tokens(), cfg.cond_tokens);
        let dst = i * cfg.cond_tokens * patch_dim;
        out.data_mut()[dst..dst + cfg.cond_tokens * patch_dim].copy_from_slice(latent.data.data());
    }
    Ok(out)
}

/// Tile a (rows, cols) table `batch` times into (batch*rows, cols).
fn tile(table: &Tensor, batch: usize) -> Tensor {
    let (r, c) = (table.rows(), table.cols());
    let mut out = Tensor::zeros(&[batch * r, c]);
    for b in 0..batch {
        out.data_mut()[b * r * c..(b + 1) * r * c].copy_from_slice(table.data());
    }
    out
}

/// Build the condition-encoder subgraph for a batch of images. The same
/// weights process both modalities; the task embedding is appended as one
/// extra row per example. Output: (batch * (cond_tokens + 1), width).
pub fn encode_condition_nodes(
    g: &mut Graph,
    params: &ParamStore,
    ids: &[NodeId],
    cfg: &ModelConfig,
    canvas: &CanvasSpec,
    images: &[&PixelImage],
    directions: &[TaskDirection],
) -> Result<NodeId> {
    if images.is_empty() || images.len() != directions.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} directions", images.len()),
            actual: format!("{}", directions.len()),
        });
    }
    let bound = Bound { params, ids };
    let batch = images.len();
    let c_tokens = cfg.cond_tokens;

    let patches = patchify_images(cfg, canvas, images)?;
    let x = g.input(patches);
    let w = bound.get("cond.patch.w");
    let b = bound.get("cond.patch.b");
    let mut h = g.matmul(x, w);
    h = g.add_row_bias(h, b);

    let pos = g.input(tile(&sinusoidal_positions(c_tokens, cfg.width), batch));
    h = g.add(h, pos);
    let seg = bound.get("seg.cond");
    h = g.add_row_bias(h, seg);

    for i in 0..cfg.cond_depth {
        let ln1g = bound.get(&format!("cond.b{i}.ln1.g"));
        let ln1b = bound.get(&format!("cond.b{i}.ln1.b"));
        let normed = g.layernorm(h, Some(ln1g), Some(ln1b));
        let qkv_w = bound.get(&format!("cond.b{i}.attn.qkv.w"));
        let qkv_b = bound.get(&format!("cond.b{i}.attn.qkv.b"));
        let mut qkv = g.matmul(normed, qkv_w);
        qkv = g.add_row_bias(qkv, qkv_b);
        let att = g.attention(qkv, batch, c_tokens, cfg.heads);
        let out_w = bound.get(&format!("cond.b{i}.attn.out.w"));
        let out_b = bound.get(&format!("cond.b{i}.attn.out.b"));
        let mut att = g.matmul(att, out_w);
        att = g.add_row_bias(att, out_b);
        h = g.add(h, att);

        let ln2g = bound.get(&format!("cond.b{i}.ln2.g"));
        let ln2b = bound.get(&format!("cond.b{i}.ln2.b"));
        let normed2 = g.layernorm(h, Some(ln2g), Some(ln2b));
        let fc1w = bound.get(&format!("cond.b{i}.mlp.fc1.w"));
        let fc1b = bound.get(&format!("cond.b{i}.mlp.fc1.b"));
        let mut m = g.matmul(normed2, fc1w);
        m = g.add_row_bias(m, fc1b);
        m = g.gelu(m);
        let fc2w = bound.get(&format!("cond.b{i}.mlp.fc2.w"));
        let fc2b = bound.get(&format!("cond.b{i}.mlp.fc2.b"));
        let mut m2 = g.matmul(m, fc2w);
        m2 = g.add_row_bias(m2, fc2b);
        h = g.add(h, m2);
    }

    let table = bound.get("task.table");
    let task_rows = g.gather_rows(table, directions.iter().map(|d| d.index()).collect());
    Ok(g.concat_groups(h, task_rows, batch))
}

/// Build the velocity-network subgraph. `z_t` is (batch * latent_tokens,
/// latent_channels), `ts` one time per example, `cond` the output of
/// [`encode_condition_nodes`]. Output shape equals `z_t`'s.
#[allow(clippy::too_many_arguments)]
pub fn predict_velocity_nodes(
    g: &mut Graph,
    params: &ParamStore,
    ids: &[NodeId],
    cfg: &ModelConfig,
    z_t: Tensor,
    ts: &[f32],
    cond: NodeId,
) -> Result<NodeId> {
    let bound = Bound { params, ids };
    let batch = ts.len();
    if batch == 0 || !z_t.rows().is_multiple_of(batch) {
        return Err(Error::DimensionMismatch {
            expected: format!("latent rows divisible by batch {batch}"),
            actual: format!("{}", z_t.rows()),
        });
    }
    for &t in ts {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("time {t} outside [0, 1]")));
        }
    }
    let latent_tokens = z_t.rows() / batch;
    let latent_channels = z_t.cols();
    let (split, sub_channels) = sub_token_split(latent_channels, cfg.width)?;
    let sub_tokens = latent_tokens * split;
    let cond_rows = g.value(cond).rows() / batch;
    let seq_tokens = sub_tokens + cond_rows;

    // Latent token embedding over channel sub-tokens (a pure row-major
    // reshape: each token's channel block splits contiguously).
    let total_rows = z_t.rows();
    let z_in = g.input(z_t);
    let z_sub = g.reshape(z_in, &[total_rows * split, sub_channels]);
    let lat_w = bound.get("lat.embed.w");
    let lat_b = bound.get("lat.embed.b");
    let mut lat = g.matmul(z_sub, lat_w);
    lat = g.add_row_bias(lat, lat_b);
    let pos = g.input(tile(&sinusoidal_positions(sub_tokens, cfg.width), batch));
    lat = g.add(lat, pos);
    let seg = bound.get("seg.latent");
    lat = g.add_row_bias(lat, seg);

    // Time conditioning vector per example.
    let mut t_feats = Tensor::zeros(&[batch, cfg.time_embed_dim]);
    for (b, &t) in ts.iter().enumerate() {
        t_feats.data_mut()[b * cfg.time_embed_dim..(b + 1) * cfg.time_embed_dim]
            .copy_from_slice(&time_features(t, cfg.time_embed_dim));
    }
    let t_in = g.input(t_feats);
    let t1w = bound.get("time.fc1.w");
    let t1b = bound.get("time.fc1.b");
    let mut t_vec = g.matmul(t_in, t1w);
    t_vec = g.add_row_bias(t_vec, t1b);
    t_vec = g.silu(t_vec);
    let t2w = bound.get("time.fc2.w");
    let t2b = bound.get("time.fc2.b");
    t_vec = g.matmul(t_vec, t2w);
    t_vec = g.add_row_bias(t_vec, t2b);
    let t_act = g.silu(t_vec);

    let modulation = |g: &mut Graph, name: &str| {
        let w = bound.get(&format!("{name}.w"));
        let b = bound.get(&format!("{name}.b"));
        let m = g.matmul(t_act, w);
        g.add_row_bias(m, b)
    };

    // One self-attention sequence per example: [latent tokens | cond tokens].
    // Each segment gets its own sinusoidal positions here so the sequence
    // order of the condition tokens is visible to the velocity network.
    let mut seq = g.concat_groups(lat, cond, batch);
    let mut seq_pos = Tensor::zeros(&[seq_tokens, cfg.width]);
    let lat_pos = sinusoidal_positions(sub_tokens, cfg.width);
    let cond_pos = sinusoidal_positions(cond_rows, cfg.width);
    seq_pos.data_mut()[..sub_tokens * cfg.width].copy_from_slice(lat_pos.data());
    seq_pos.data_mut()[sub_tokens * cfg.width..].copy_from_slice(cond_pos.data());
    let seq_pos = g.input(tile(&seq_pos, batch));
    seq = g.add(seq, seq_pos);
    for i in 0..cfg.depth {
        let shift1 = modulation(g, &format!("dit.b{i}.adaln.shift1"));
        let scale1 = modulation(g, &format!("dit.b{i}.adaln.scale1"));
        let gate1 = modulation(g, &format!("dit.b{i}.adaln.gate1"));
        let shift2 = modulation(g, &format!("dit.b{i}.adaln.shift2"));
        let scale2 = modulation(g, &format!("dit.b{i}.adaln.scale2"));
        let gate2 = modulation(g, &format!("dit.b{i}.adaln.gate2"));

        let normed = g.layernorm(seq, None, None);
        let mod1 = g.row_affine(normed, scale1, shift1, seq_tokens);
        let qkv_w = bound.get(&format!("dit.b{i}.attn.qkv.w"));
        let qkv_b = bound.get(&format!("dit.b{i}.attn.qkv.b"));
        let mut qkv = g.matmul(mod1, qkv_w);
        qkv = g.add_row_bias(qkv, qkv_b);
        let att = g.attention(qkv, batch, seq_tokens, cfg.heads);
        let out_w = bound.get(&format!("dit.b{i}.attn.out.w"));
        let out_b = bound.get(&format!("dit.b{i}.attn.out.b"));
        let mut att = g.matmul(att, out_w);
        att = g.add_row_bias(att, out_b);
        seq = g.row_gate_add(seq, att, gate1, seq_tokens);

        let normed2 = g.layernorm(seq, None, None);
        let mod2 = g.row_affine(normed2, scale2, shift2, seq_tokens);
        let fc1w = bound.get(&format!("dit.b{i}.mlp.fc1.w"));
        let fc1b = bound.get(&format!("dit.b{i}.mlp.fc1.b"));
        let mut m = g.matmul(mod2, fc1w);
        m = g.add_row_bias(m, fc1b);
        m = g.gelu(m);
        let fc2w = bound.get(&format!("dit.b{i}.mlp.fc2.w"));
        let fc2b = bound.get(&format!("dit.b{i}.mlp.fc2.b"));
        let mut m2 = g.matmul(m, fc2w);
        m2 = g.add_row_bias(m2, fc2b);
        seq = g.row_gate_add(seq, m2, gate2, seq_tokens);
    }

    // Project latent sub-tokens back to their channel slices and merge.
    let lat_out = g.slice_groups(seq, batch, 0, sub_tokens);
    let normed = g.layernorm(lat_out, None, None);
    let shift = modulation(g, "final.adaln.shift");
    let scale = modulation(g, "final.adaln.scale");
    let modded = g.row_affine(normed, scale, shift, sub_tokens);
    let proj_w = bound.get("final.proj.w");
    let proj_b = bound.get("final.proj.b");
    let mut v = g.matmul(modded, proj_w);
    v = g.add_row_bias(v, proj_b);
    Ok(g.reshape(v, &[total_rows, latent_channels]))
}

/// Spec-level single-image API: encode one image into condition tokens.
pub fn encode_condition(
    image: &PixelImage,
    direction: TaskDirection,
    params: &ParamStore,
    cfg: &ModelConfig,
    canvas: &CanvasSpec,
) -> Result<ConditionTokens> {
    cfg.validate(canvas)?;
    let mut g = Graph::new();
    let ids = bind_params(&mut g, params, false);
    let node = encode_condition_nodes(&mut g, params, &ids, cfg, canvas, &[image], &[direction])?;
    let tokens = g.value(node).clone();
    if !tokens.all_finite() {
        return Err(Error::NonFinite { context: "condition tokens".into() });
    }
    Ok(ConditionTokens { tokens, direction })
}

/// Spec-level single-example velocity prediction.
pub fn predict_velocity(
    z_t: &Tensor,
    t: f32,
    cond: &ConditionTokens,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = bind_params(&mut g, params, false);
    let cond_node = g.input(cond.tokens.clone());
    let v = predict_velocity_nodes(&mut g, params, &ids, cfg, z_t.clone(), &[t], cond_node)?;
    Ok(g.value(v).clone())
}

/// Forward-only batched condition encoding (for sampling and evaluation).
pub fn encode_condition_batch(
    images: &[&PixelImage],
    directions: &[TaskDirection],
    params: &ParamStore,
    cfg: &ModelConfig,
    canvas: &CanvasSpec,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = bind_params(&mut g, params, false);
    let node = encode_condition_nodes(&mut g, params, &ids, cfg, canvas, images, directions)?;
    Ok(g.value(node).clone())
}

/// A frozen model + condition tokens as an integrable velocity field over a
/// whole batch (the same t applies to every example in the batch).
pub struct BatchVelocityField<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a ModelConfig,
    pub cond: Tensor,
    pub batch: usize,
}

impl crate::flow::VelocityField for BatchVelocityField<'_> {
    fn velocity(&self, z: &Tensor, t: f32) -> Result<Tensor> {
        let mut g = Graph::new();
        let ids = bind_params(&mut g, self.params, false);
        let cond_node = g.input(self.cond.clone());
        let ts = vec![t; self.batch];
        let v = predict_velocity_nodes(&mut g, self.params, &ids, self.cfg, z.clone(), &ts, cond_node)?;
        Ok(g.value(v).clone())
    }
}
