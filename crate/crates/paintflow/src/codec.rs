//! Latent codec: the pluggable mapping between pixel images and the tensors
//! the flow runs on. Two implementations: a lossless patch reshape (the
//! default; the flow then literally runs in pixel space) and a small strided
//! convolutional autoencoder trained on the corpus.

use rand_chacha::ChaCha8Rng;

use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::graph::{ConvMeta, Graph};
use crate::image::PixelImage;
use crate::nn::{adam_step, init_linear, AdamConfig, AdamState, ParamStore};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Identifies which codec produced a latent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodecId {
    IdentityPatch { patch_size: usize },
    TinyAutoencoder { latent_channels: usize, downsample_factor: usize },
}

impl std::fmt::Display for CodecId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CodecId::IdentityPatch { patch_size } => write!(f, "identity_patch(p={patch_size})"),
            CodecId::TinyAutoencoder { latent_channels, downsample_factor } => {
                write!(f, "tiny_autoencoder(c={latent_channels},d={downsample_factor})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub data: Tensor,
    pub codec_id: CodecId,
    pub source_shape: (usize, usize, usize),
}

impl Latent {
    pub fn tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }
}

/// Hidden width of the autoencoder's intermediate feature maps.
const AE_HIDDEN: usize = 16;
const AE_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum CodecConfig {
    IdentityPatch { patch_size: usize },
    TinyAutoencoder {
        latent_channels: usize,
        downsample_factor: usize,
        weights: Option<ParamStore>,
    },
}

impl CodecConfig {
    pub fn id(&self) -> CodecId {
        match self {
            CodecConfig::IdentityPatch { patch_size } => CodecId::IdentityPatch { patch_size: *patch_size },
            CodecConfig::TinyAutoencoder { latent_channels, downsample_factor, .. } => CodecId::TinyAutoencoder {
                latent_channels: *latent_channels,
                downsample_factor: *downsample_factor,
            },
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        match self {
            CodecConfig::IdentityPatch { patch_size } => {
                if *patch_size == 0 || !h.is_multiple_of(*patch_size) || !w.is_multiple_of(*patch_size) {
                    return Err(Error::Config(format!(
                        "patch size {patch_size} must divide canvas {h}x{w}"
                    )));
                }
            }
            CodecConfig::TinyAutoencoder { latent_channels, downsample_factor, .. } => {
                if *downsample_factor != 4 {
                    return Err(Error::Config("tiny autoencoder supports downsample_factor = 4".into()));
                }
                if *latent_channels == 0 {
                    return Err(Error::Config("latent_channels must be positive".into()));
                }
                if !h.is_multiple_of(*downsample_factor) || !w.is_multiple_of(*downsample_factor) {
                    return Err(Error::Config(format!(
                        "downsample factor {downsample_factor} must divide canvas {h}x{w}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// (tokens, channels) of the latent for a given source shape.
    pub fn latent_shape(&self, source: (usize, usize, usize)) -> Result<(usize, usize)> {
        let (h, w, c) = source;
        self.validate(h, w)?;
        match self {
            CodecConfig::IdentityPatch { patch_size } => {
                Ok(((h / patch_size) * (w / patch_size), patch_size * patch_size * c))
            }
            CodecConfig::TinyAutoencoder { latent_channels, downsample_factor, .. } => {
                Ok(((h / downsample_factor) * (w / downsample_factor), *latent_channels))
            }
        }
    }
}

pub fn encode(image: &PixelImage, codec: &CodecConfig) -> Result<Latent> {
    let source = (image.height(), image.width(), image.channels());
    codec.validate(source.0, source.1)?;
    match codec {
        CodecConfig::IdentityPatch { patch_size } => {
            let p = *patch_size;
            let (gh, gw) = (source.0 / p, source.1 / p);
            let c = source.2;
            let mut data = Tensor::zeros(&[gh * gw, p * p * c]);
            {
                let out = data.data_mut();
                let mut idx = 0;
                for gy in 0..gh {
                    for gx in 0..gw {
                        for py in 0..p {
                            for px in 0..p {
                                for ch in 0..c {
                                    out[idx] = image.get(gy * p + py, gx * p + px, ch);
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
            }
            Ok(Latent { data, codec_id: codec.id(), source_shape: source })
        }
        CodecConfig::TinyAutoencoder { weights, .. } => {
            let params = weights
                .as_ref()
                .ok_or_else(|| Error::Config("tiny autoencoder has no trained weights".into()))?;
            let batch = image_batch(&[image]);
            let mut g = Graph::new();
            let x = g.input(batch);
            let z = ae_encode_graph(&mut g, x, params, source, 1, false)?;
            let (tokens, channels) = codec.latent_shape(source)?;
            let data = g.value(z).clone().reshaped(&[tokens, channels])?;
            Ok(Latent { data, codec_id: codec.id(), source_shape: source })
        }
    }
}

pub fn decode(latent: &Latent, codec: &CodecConfig) -> Result<PixelImage> {
    if latent.codec_id != codec.id() {
        return Err(Error::CodecMismatch {
            expected: codec.id().to_string(),
            found: latent.codec_id.to_string(),
        });
    }
    let (h, w, c) = latent.source_shape;
    match codec {
        CodecConfig::IdentityPatch { patch_size } => {
            let p = *patch_size;
            let (gh, gw) = (h / p, w / p);
            let mut img = PixelImage::filled(h, w, c, 0.0);
            let data = latent.data.data();
            let mut idx = 0;
            for gy in 0..gh {
                for gx in 0..gw {
                    for py in 0..p {
                        for px in 0..p {
                            for ch in 0..c {
                                img.set(gy * p + py, gx * p + px, ch, data[idx]);
                                idx += 1;
                            }
                        }
                    }
                }
            }
            img.clamp_canonical();
            Ok(img)
        }
        CodecConfig::TinyAutoencoder { weights, .. } => {
            let params = weights
                .as_ref()
                .ok_or_else(|| Error::Config("tiny autoencoder has no trained weights".into()))?;
            let mut g = Graph::new();
            let z = g.input(latent.data.clone().reshaped(&[1, latent.data.len()])?);
            let out = ae_decode_graph(&mut g, z, params, (h, w, c), 1, false)?;
            let mut img = PixelImage::from_data(h, w, c, g.value(out).data().to_vec())?;
            img.clamp_canonical();
            Ok(img)
        }
    }
}

/// Stack images into a (batch, H*W*C) tensor, preserving pixel layout.
fn image_batch(images: &[&PixelImage]) -> Tensor {
    let first = images[0];
    let len = first.data().len();
    let mut t = Tensor::zeros(&[images.len(), len]);
    for (i, img) in images.iter().enumerate() {
        t.data_mut()[i * len..(i + 1) * len].copy_from_slice(img.data());
    }
    t
}

fn ae_param_ids(params: &ParamStore) -> Result<()> {
    for name in ["ae.enc1.w", "ae.enc1.b", "ae.enc2.w", "ae.enc2.b", "ae.dec1.w", "ae.dec1.b", "ae.dec2.w", "ae.dec2.b"] {
        if params.get(name).is_none() {
            return Err(Error::Config(format!("autoencoder weights missing {name}")));
        }
    }
    Ok(())
}

/// Fresh random autoencoder weights for `latent_channels` and image channels `c`.
pub fn init_autoencoder(rng: &mut ChaCha8Rng, latent_channels: usize, c: usize) -> ParamStore {
    let k2 = AE_KERNEL * AE_KERNEL;
    let mut p = ParamStore::new();
    p.add("ae.enc1.w", init_linear(rng, k2 * c, AE_HIDDEN));
    p.add("ae.enc1.b", Tensor::zeros(&[AE_HIDDEN]));
    p.add("ae.enc2.w", init_linear(rng, k2 * AE_HIDDEN, latent_channels));
    p.add("ae.enc2.b", Tensor::zeros(&[latent_channels]));
    p.add("ae.dec1.w", init_linear(rng, k2 * latent_channels, AE_HIDDEN));
    p.add("ae.dec1.b", Tensor::zeros(&[AE_HIDDEN]));
    p.add("ae.dec2.w", init_linear(rng, k2 * AE_HIDDEN, c));
    p.add("ae.dec2.b", Tensor::zeros(&[c]));
    p
}

/// Encoder: conv(s2) -> relu -> conv(s2), yielding (batch, H/4 * W/4 * latent_c).
fn ae_encode_graph(
    g: &mut Graph,
    x: crate::graph::NodeId,
    params: &ParamStore,
    source: (usize, usize, usize),
    batch: usize,
    train: bool,
) -> Result<crate::graph::NodeId> {
    ae_param_ids(params)?;
    let (h, w, c) = source;
    let bind = |g: &mut Graph, name: &str| {
        let t = params.get(name).expect("checked by ae_param_ids").clone();
        if train {
            g.param(t)
        } else {
            g.input(t)
        }
    };
    let w1 = bind(g, "ae.enc1.w");
    let b1 = bind(g, "ae.enc1.b");
    let w2 = bind(g, "ae.enc2.w");
    let b2 = bind(g, "ae.enc2.b");

    let m1 = ConvMeta { batch, in_h: h, in_w: w, in_c: c, kernel: AE_KERNEL, stride: 2, pad: 1 };
    let cols1 = g.im2col(x, m1.clone());
    let conv1 = g.matmul(cols1, w1);
    let conv1 = g.add_row_bias(conv1, b1);
    let act1 = g.relu(conv1);
    let act1 = reshape_rows(g, act1, batch, m1.out_h() * m1.out_w() * AE_HIDDEN);

    let m2 = ConvMeta { batch, in_h: m1.out_h(), in_w: m1.out_w(), in_c: AE_HIDDEN, kernel: AE_KERNEL, stride: 2, pad: 1 };
    let cols2 = g.im2col(act1, m2.clone());
    let conv2 = g.matmul(cols2, w2);
    let conv2 = g.add_row_bias(conv2, b2);
    let latent_c = params.get("ae.enc2.b").expect("checked").len();
    Ok(reshape_rows(g, conv2, batch, m2.out_h() * m2.out_w() * latent_c))
}

/// Decoder: upsample -> conv -> relu -> upsample -> conv, back to (batch, H*W*C).
fn ae_decode_graph(
    g: &mut Graph,
    z: crate::graph::NodeId,
    params: &ParamStore,
    source: (usize, usize, usize),
    batch: usize,
    train: bool,
) -> Result<crate::graph::NodeId> {
    ae_param_ids(params)?;
    let (h, w, c) = source;
    let (lh, lw) = (h / 4, w / 4);
    let latent_c = params.get("ae.enc2.b").expect("checked").len();
    let bind = |g: &mut Graph, name: &str| {
        let t = params.get(name).expect("checked by ae_param_ids").clone();
        if train {
            g.param(t)
        } else {
            g.input(t)
        }
    };
    let w1 = bind(g, "ae.dec1.w");
    let b1 = bind(g, "ae.dec1.b");
    let w2 = bind(g, "ae.dec2.w");
    let b2 = bind(g, "ae.dec2.b");

    let up1 = g.upsample_nearest_2x(z, lh, lw, latent_c);
    let m1 = ConvMeta { batch, in_h: 2 * lh, in_w: 2 * lw, in_c: latent_c, kernel: AE_KERNEL, stride: 1, pad: 1 };
    let cols1 = g.im2col(up1, m1.clone());
    let conv1 = g.matmul(cols1, w1);
    let conv1 = g.add_row_bias(conv1, b1);
    let act1 = g.relu(conv1);
    let act1 = reshape_rows(g, act1, batch, m1.out_h() * m1.out_w() * AE_HIDDEN);

    let up2 = g.upsample_nearest_2x(act1, 2 * lh, 2 * lw, AE_HIDDEN);
    let m2 = ConvMeta { batch, in_h: h, in_w: w, in_c: AE_HIDDEN, kernel: AE_KERNEL, stride: 1, pad: 1 };
    let cols2 = g.im2col(up2, m2);
    let conv2 = g.matmul(cols2, w2);
    let conv2 = g.add_row_bias(conv2, b2);
    Ok(reshape_rows(g, conv2, batch, h * w * c))
}

fn reshape_rows(g: &mut Graph, x: crate::graph::NodeId, batch: usize, cols: usize) -> crate::graph::NodeId {
    debug_assert_eq!(g.value(x).len(), batch * cols);
    g.reshape(x, &[batch, cols])
}

pub struct AutoencoderTraining {
    pub final_loss: f32,
    pub initial_loss: f32,
}

/// Train the tiny autoencoder on both modalities of the corpus (RGB renders
/// and painted captions through one shared codec) with Adam on pixel MSE.
pub fn train_autoencoder(
    corpus: &Corpus,
    config: &CodecConfig,
    steps: usize,
    seed: u64,
    learning_rate: f32,
) -> Result<(CodecConfig, AutoencoderTraining)> {
    let (latent_channels, downsample_factor) = match config {
        CodecConfig::TinyAutoencoder { latent_channels, downsample_factor, .. } => {
            (*latent_channels, *downsample_factor)
        }
        CodecConfig::IdentityPatch { .. } => {
            return Err(Error::Config("train_autoencoder requires the tiny_autoencoder codec".into()))
        }
    };
    let canvas = &corpus.canvas;
    config.validate(canvas.height, canvas.width)?;
    let source = (canvas.height, canvas.width, canvas.channels);

    let mut init_rng = rng::stream_rng(seed, Stream::Init);
    let mut params = init_autoencoder(&mut init_rng, latent_channels, canvas.channels);
    let mut train_rng = rng::stream_rng(seed, Stream::Train);
    let mut adam = AdamState::new(&params);
    let adam_cfg = AdamConfig { learning_rate, ..AdamConfig::default() };

    // Both modalities feed one codec: the pool interleaves RGB and painted.
    let pool: Vec<&PixelImage> = corpus
        .samples
        .iter()
        .flat_map(|s| [&s.rgb, &s.painted.image])
        .collect();
    let batch_size = 8.min(pool.len());

    let mut initial_loss = None;
    let mut final_loss = 0.0;
    for step in 0..steps {
        let picks: Vec<&PixelImage> =
            (0..batch_size).map(|_| pool[rng::uniform_usize(&mut train_rng, pool.len())]).collect();
        let batch = image_batch(&picks);
        let target = batch.clone();

        let mut g = Graph::new();
        let x = g.input(batch);
        let z = ae_encode_graph(&mut g, x, &params, source, batch_size, true)?;
        let recon = ae_decode_graph(&mut g, z, &params, source, batch_size, true)?;
        let loss_node = g.mse_loss(recon, target);
        let loss = g.value(loss_node).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: format!("autoencoder loss at step {step}") });
        }
        initial_loss.get_or_insert(loss);
        final_loss = loss;

        let grads = g.backward(loss_node);
        // The builders bind parameters in this fixed order.
        let names = ["ae.enc1.w", "ae.enc1.b", "ae.enc2.w", "ae.enc2.b", "ae.dec1.w", "ae.dec1.b", "ae.dec2.w", "ae.dec2.b"];
        let ids = g.param_leaves();
        debug_assert_eq!(ids.len(), names.len());
        let mut ordered: Vec<Vec<f32>> = vec![Vec::new(); params.len()];
        for (name, id) in names.iter().zip(ids) {
            let store_idx = params.id_of(name).expect("name exists");
            if let Some(grad) = grads.get(id) {
                ordered[store_idx] = grad.to_vec();
            }
        }
        adam_step(&mut params, &ordered, &mut adam, &adam_cfg)?;
    }

    let trained = CodecConfig::TinyAutoencoder {
        latent_channels,
        downsample_factor,
        weights: Some(params),
    };
    Ok((
        trained,
        AutoencoderTraining {
            final_loss,
            initial_loss: initial_loss.unwrap_or(f32::NAN),
        },
    ))
}
