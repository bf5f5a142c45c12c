//! Shared test support: an independent f64 re-implementation of the
//! condition encoder + velocity network + flow loss, used as the
//! finite-difference oracle for gradient checking. It reads the same
//! parameter store but performs every operation in f64 with its own code
//! path, so it also cross-checks the production forward pass.

use std::collections::BTreeMap;

use paintflow::backbone::{ModelConfig, TaskDirection};
use paintflow::image::PixelImage;
use paintflow::nn::ParamStore;
use paintflow::tensor::Tensor;

pub struct RefParams {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl RefParams {
    pub fn from_store(store: &ParamStore) -> RefParams {
        let tensors = store
            .iter()
            .map(|(name, t)| {
                (name.to_string(), (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect()))
            })
            .collect();
        RefParams { tensors }
    }

    fn get(&self, name: &str) -> (&[usize], &[f64]) {
        let (shape, data) = self.tensors.get(name).unwrap_or_else(|| panic!("missing {name}"));
        (shape, data)
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044715f32 as f64;
const SQRT_2_OVER_PI: f64 = 0.797_884_6f32 as f64;

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            for j in 0..n {
                out[i * n + j] += aik * b[kk * n + j];
            }
        }
    }
    out
}

fn add_bias(x: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn layernorm(x: &[f64], cols: usize, gamma: Option<&[f64]>, beta: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0f64; x.len()];
    for (r, row) in x.chunks(cols).enumerate() {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..cols {
            let mut v = (row[c] - mean) * inv;
            if let Some(g) = gamma {
                v *= g[c];
            }
            if let Some(b) = beta {
                v += b[c];
            }
            out[r * cols + c] = v;
        }
    }
    out
}

fn gelu(x: &mut [f64]) {
    for v in x.iter_mut() {
        let u = SQRT_2_OVER_PI * (*v + GELU_C * *v * *v * *v);
        *v = 0.5 * *v * (1.0 + u.tanh());
    }
}

fn silu(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v /= 1.0 + (-*v).exp();
    }
}

/// Bidirectional self-attention over one sequence of `tokens` rows.
fn attention(qkv: &[f64], tokens: usize, heads: usize) -> Vec<f64> {
    let three_w = qkv.len() / tokens;
    let width = three_w / 3;
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0f64; tokens * width];
    for h in 0..heads {
        let qo = h * dh;
        let ko = width + h * dh;
        let vo = 2 * width + h * dh;
        for i in 0..tokens {
            let q = &qkv[i * three_w + qo..i * three_w + qo + dh];
            let mut scores = vec![0.0f64; tokens];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &qkv[j * three_w + ko..j * three_w + ko + dh];
                *s = scale * q.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                if *s > max {
                    max = *s;
                }
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            for s in scores.iter_mut() {
                *s /= denom;
            }
            for (j, &p) in scores.iter().enumerate() {
                let vj = &qkv[j * three_w + vo..j * three_w + vo + dh];
                for d in 0..dh {
                    out[i * width + qo + d] += p * vj[d];
                }
            }
        }
    }
    out
}

fn sinusoidal_positions(positions: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut t = vec![0.0f64; positions * dim];
    for p in 0..positions {
        for i in 0..half {
            let freq = 1.0f64 / 10000f64.powf(i as f64 / half.max(1) as f64);
            let angle = p as f64 * freq;
            t[p * dim + 2 * i] = angle.sin();
            t[p * dim + 2 * i + 1] = angle.cos();
        }
    }
    t
}

fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0f64; dim];
    for i in 0..half {
        let freq = 1000f64.powf(i as f64 / (half.max(2) - 1) as f64);
        let angle = t * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

fn patchify(image: &PixelImage, patch: usize) -> Vec<f64> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(gh * gw * patch * patch * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        out.push(image.get(gy * patch + py, gx * patch + px, ch) as f64);
                    }
                }
            }
        }
    }
    out
}

fn linear(p: &RefParams, x: &[f64], rows: usize, w_name: &str, b_name: &str) -> Vec<f64> {
    let (w_shape, w) = p.get(w_name);
    let (_, b) = p.get(b_name);
    let mut out = matmul(x, w, rows, w_shape[0], w_shape[1]);
    add_bias(&mut out, b);
    out
}

fn encoder_block(p: &RefParams, prefix: &str, x: &[f64], tokens: usize, width: usize, heads: usize) -> Vec<f64> {
    let (_, ln1g) = p.get(&format!("{prefix}.ln1.g"));
    let (_, ln1b) = p.get(&format!("{prefix}.ln1.b"));
    let normed = layernorm(x, width, Some(ln1g), Some(ln1b));
    let qkv = linear(p, &normed, tokens, &format!("{prefix}.attn.qkv.w"), &format!("{prefix}.attn.qkv.b"));
    let att = attention(&qkv, tokens, heads);
    let att = linear(p, &att, tokens, &format!("{prefix}.attn.out.w"), &format!("{prefix}.attn.out.b"));
    let mut h: Vec<f64> = x.iter().zip(&att).map(|(a, b)| a + b).collect();

    let (_, ln2g) = p.get(&format!("{prefix}.ln2.g"));
    let (_, ln2b) = p.get(&format!("{prefix}.ln2.b"));
    let normed2 = layernorm(&h, width, Some(ln2g), Some(ln2b));
    let mut m = linear(p, &normed2, tokens, &format!("{prefix}.mlp.fc1.w"), &format!("{prefix}.mlp.fc1.b"));
    gelu(&mut m);
    let m2 = linear(p, &m, tokens, &format!("{prefix}.mlp.fc2.w"), &format!("{prefix}.mlp.fc2.b"));
    for (a, b) in h.iter_mut().zip(&m2) {
        *a += b;
    }
    h
}

fn encode_condition_f64(
    p: &RefParams,
    cfg: &ModelConfig,
    image: &PixelImage,
    direction: TaskDirection,
) -> Vec<f64> {
    let w = cfg.width;
    let patches = patchify(image, cfg.patch_size);
    let mut h = linear(p, &patches, cfg.cond_tokens, "cond.patch.w", "cond.patch.b");
    let pos = sinusoidal_positions(cfg.cond_tokens, w);
    for (a, b) in h.iter_mut().zip(&pos) {
        *a += b;
    }
    let (_, seg) = p.get("seg.cond");
    add_bias(&mut h, seg);
    for i in 0..cfg.cond_depth {
        h = encoder_block(p, &format!("cond.b{i}"), &h, cfg.cond_tokens, w, cfg.heads);
    }
    let (_, table) = p.get("task.table");
    let row = direction.index();
    h.extend_from_slice(&table[row * w..(row + 1) * w]);
    h
}

/// Full f64 forward: condition encoding, velocity prediction, mean squared
/// error against the velocity target. Mirrors the production architecture.
pub fn ref_flow_loss(
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &PixelImage,
    direction: TaskDirection,
    z_t: &Tensor,
    t: f64,
    target: &Tensor,
) -> f64 {
    let p = RefParams::from_store(store);
    let w = cfg.width;
    let latent_tokens = z_t.rows();
    let latent_channels = z_t.cols();
    let (split, _sub_channels) = paintflow::backbone::sub_token_split(latent_channels, w).unwrap();
    let sub_tokens = latent_tokens * split;
    let cond = encode_condition_f64(&p, cfg, image, direction);
    let cond_rows = cfg.cond_tokens + 1;
    let seq_tokens = sub_tokens + cond_rows;

    // Latent embedding over channel sub-tokens + positions + segment.
    let z: Vec<f64> = z_t.data().iter().map(|&v| v as f64).collect();
    let mut lat = linear(&p, &z, sub_tokens, "lat.embed.w", "lat.embed.b");
    let lat_pos = sinusoidal_positions(sub_tokens, w);
    for (a, b) in lat.iter_mut().zip(&lat_pos) {
        *a += b;
    }
    let (_, seg_lat) = p.get("seg.latent");
    add_bias(&mut lat, seg_lat);

    // Time vector.
    let feats = time_features(t, cfg.time_embed_dim);
    let mut t_vec = linear(&p, &feats, 1, "time.fc1.w", "time.fc1.b");
    silu(&mut t_vec);
    t_vec = linear(&p, &t_vec, 1, "time.fc2.w", "time.fc2.b");
    let mut t_act = t_vec;
    silu(&mut t_act);

    let modulation = |name: &str| -> Vec<f64> { linear(&p, &t_act, 1, &format!("{name}.w"), &format!("{name}.b")) };

    // Sequence with per-segment positions.
    let mut seq = lat;
    seq.extend_from_slice(&cond);
    let seq_lat_pos = sinusoidal_positions(sub_tokens, w);
    let seq_cond_pos = sinusoidal_positions(cond_rows, w);
    for r in 0..sub_tokens {
        for c in 0..w {
            seq[r * w + c] += seq_lat_pos[r * w + c];
        }
    }
    for r in 0..cond_rows {
        for c in 0..w {
            seq[(sub_tokens + r) * w + c] += seq_cond_pos[r * w + c];
        }
    }

    for i in 0..cfg.depth {
        let shift1 = modulation(&format!("dit.b{i}.adaln.shift1"));
        let scale1 = modulation(&format!("dit.b{i}.adaln.scale1"));
        let gate1 = modulation(&format!("dit.b{i}.adaln.gate1"));
        let shift2 = modulation(&format!("dit.b{i}.adaln.shift2"));
        let scale2 = modulation(&format!("dit.b{i}.adaln.scale2"));
        let gate2 = modulation(&format!("dit.b{i}.adaln.gate2"));

        let normed = layernorm(&seq, w, None, None);
        let mut mod1 = normed;
        for (r, row) in mod1.chunks_mut(w).enumerate() {
            let _ = r;
            for c in 0..w {
                row[c] = row[c] * (1.0 + scale1[c]) + shift1[c];
            }
        }
        let qkv = linear(&p, &mod1, seq_tokens, &format!("dit.b{i}.attn.qkv.w"), &format!("dit.b{i}.attn.qkv.b"));
        let att = attention(&qkv, seq_tokens, cfg.heads);
        let att = linear(&p, &att, seq_tokens, &format!("dit.b{i}.attn.out.w"), &format!("dit.b{i}.attn.out.b"));
        for (r, a) in seq.iter_mut().enumerate() {
            *a += gate1[r % w] * att[r];
        }

        let normed2 = layernorm(&seq, w, None, None);
        let mut mod2 = normed2;
        for row in mod2.chunks_mut(w) {
            for c in 0..w {
                row[c] = row[c] * (1.0 + scale2[c]) + shift2[c];
            }
        }
        let mut m = linear(&p, &mod2, seq_tokens, &format!("dit.b{i}.mlp.fc1.w"), &format!("dit.b{i}.mlp.fc1.b"));
        gelu(&mut m);
        let m2 = linear(&p, &m, seq_tokens, &format!("dit.b{i}.mlp.fc2.w"), &format!("dit.b{i}.mlp.fc2.b"));
        for (r, a) in seq.iter_mut().enumerate() {
            *a += gate2[r % w] * m2[r];
        }
    }

    // Final projection over the latent tokens only.
    let lat_out = &seq[..sub_tokens * w];
    let normed = layernorm(lat_out, w, None, None);
    let shift = modulation("final.adaln.shift");
    let scale = modulation("final.adaln.scale");
    let mut modded = normed;
    for row in modded.chunks_mut(w) {
        for c in 0..w {
            row[c] = row[c] * (1.0 + scale[c]) + shift[c];
        }
    }
    let v = linear(&p, &modded, sub_tokens, "final.proj.w", "final.proj.b");

    let mut acc = 0.0f64;
    for (i, &tv) in target.data().iter().enumerate() {
        let d = v[i] - tv as f64;
        acc += d * d;
    }
    acc / (latent_tokens * latent_channels) as f64
}
