//! Inference and evaluation: image -> painted caption, caption -> image, the
//! closed loop through both, a rule-based scene judge, and corpus metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::backbone::{encode_condition_batch, BatchVelocityField, TaskDirection};
use crate::checkpoint::Checkpoint;
use crate::codec::{decode as codec_decode, Latent};
use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::flow::{euler_sample, SamplerConfig};
use crate::font::GlyphFont;
use crate::image::{PixelImage, PIXEL_MIN};
use crate::painted::{decode as painted_decode, glyph_error_rate, rasterize, CanvasSpec, DecodedText};
use crate::rng::{self, fill_normal, Stream};
use crate::scene::{
    position_center, render_scene, SceneColor, ScenePosition, SceneSpec, Shape, ShapeSize,
};
use crate::tensor::Tensor;

/// Derive the prior seed for the generation leg of a cycle from the
/// understanding leg's seed, so a cycle equals its manual composition.
pub fn generation_prior_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionResult {
    pub painted: PixelImage,
    pub text: String,
    pub confidence: Vec<f32>,
}

fn sample_prior(ckpt: &Checkpoint, batch: usize, seeds: &[u64]) -> Result<Tensor> {
    let source = (ckpt.canvas.height, ckpt.canvas.width, ckpt.canvas.channels);
    let (tokens, channels) = ckpt.codec.latent_shape(source)?;
    let mut z1 = Tensor::zeros(&[batch * tokens, channels]);
    let block = tokens * channels;
    for (i, &seed) in seeds.iter().enumerate() {
        let mut rng = rng::stream_rng(seed, Stream::Sample);
        fill_normal(&mut rng, &mut z1.data_mut()[i * block..(i + 1) * block]);
    }
    Ok(z1)
}

/// Batched sampling: conditions -> integrated latents -> decoded pixel images.
fn sample_images(
    ckpt: &Checkpoint,
    cond_images: &[&PixelImage],
    direction: TaskDirection,
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Vec<PixelImage>> {
    let batch = cond_images.len();
    debug_assert_eq!(batch, seeds.len());
    let directions = vec![direction; batch];
    let cond = encode_condition_batch(cond_images, &directions, &ckpt.params, &ckpt.model, &ckpt.canvas)?;
    let field = BatchVelocityField { params: &ckpt.params, cfg: &ckpt.model, cond, batch };
    let z1 = sample_prior(ckpt, batch, seeds)?;
    let z0_hat = euler_sample(&field, &z1, cfg)?;

    let source = (ckpt.canvas.height, ckpt.canvas.width, ckpt.canvas.channels);
    let (tokens, channels) = ckpt.codec.latent_shape(source)?;
    let block = tokens * channels;
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let data = Tensor::from_vec(&[tokens, channels], z0_hat.data()[i * block..(i + 1) * block].to_vec())?;
        let latent = Latent { data, codec_id: ckpt.codec.id(), source_shape: source };
        out.push(codec_decode(&latent, &ckpt.codec)?);
    }
    Ok(out)
}

/// Understanding over a batch, one prior seed per image.
pub fn caption_batch(
    images: &[&PixelImage],
    ckpt: &Checkpoint,
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Vec<CaptionResult>> {
    let font = GlyphFont::embedded();
    let painted = sample_images(ckpt, images, TaskDirection::Understanding, seeds, cfg)?;
    painted
        .into_iter()
        .map(|img| {
            let DecodedText { text, per_char_confidence } = painted_decode(&img, &ckpt.canvas, &font)?;
            Ok(CaptionResult { painted: img, text, confidence: per_char_confidence })
        })
        .collect()
}

/// RGB image -> painted caption image -> decoded string.
pub fn image_to_text(rgb: &PixelImage, ckpt: &Checkpoint, cfg: &SamplerConfig) -> Result<CaptionResult> {
    let mut results = caption_batch(&[rgb], ckpt, &[cfg.seed], cfg)?;
    Ok(results.remove(0))
}

/// Generate RGB images conditioned on already-painted caption canvases.
pub fn generate_from_painted_batch(
    painted: &[&PixelImage],
    ckpt: &Checkpoint,
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Vec<PixelImage>> {
    sample_images(ckpt, painted, TaskDirection::Generation, seeds, cfg)
}

pub fn generate_from_painted(painted: &PixelImage, ckpt: &Checkpoint, cfg: &SamplerConfig) -> Result<PixelImage> {
    let mut out = generate_from_painted_batch(&[painted], ckpt, &[cfg.seed], cfg)?;
    Ok(out.remove(0))
}

/// Caption string -> painted canvas -> RGB image.
pub fn text_to_image(text: &str, ckpt: &Checkpoint, cfg: &SamplerConfig) -> Result<PixelImage> {
    let font = GlyphFont::embedded();
    let painted = rasterize(text, &ckpt.canvas, &font)?;
    generate_from_painted(&painted.image, ckpt, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleResult {
    pub painted_pred: PixelImage,
    pub decoded: String,
    pub confidence: Vec<f32>,
    pub reconstructed: PixelImage,
}

/// RGB -> painted caption -> reconstructed RGB. By default the raw predicted
/// painted image (imperfections included) conditions the generation leg;
/// `rerasterize` swaps in a clean re-render of the decoded string.
pub fn cycle(rgb: &PixelImage, ckpt: &Checkpoint, cfg: &SamplerConfig, rerasterize: bool) -> Result<CycleResult> {
    let caption = image_to_text(rgb, ckpt, cfg)?;
    let gen_cfg = SamplerConfig { seed: generation_prior_seed(cfg.seed), ..cfg.clone() };
    let gen_input = if rerasterize {
        let font = GlyphFont::embedded();
        rasterize(&caption.text, &ckpt.canvas, &font)?.image
    } else {
        caption.painted.clone()
    };
    let reconstructed = generate_from_painted(&gen_input, ckpt, &gen_cfg)?;
    Ok(CycleResult {
        painted_pred: caption.painted,
        decoded: caption.text,
        confidence: caption.confidence,
        reconstructed,
    })
}

/// Rule-based scene judgment of an RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneClassification {
    pub shape: Shape,
    pub color: SceneColor,
    pub size: ShapeSize,
    pub position: ScenePosition,
    /// Mask IoU of the best shape template; 0 when no foreground was found.
    pub confidence: f32,
    pub foreground_pixels: usize,
    pub no_foreground: bool,
}

impl SceneClassification {
    pub fn matches(&self, scene: &SceneSpec) -> bool {
        !self.no_foreground
            && self.shape == scene.shape
            && self.color == scene.color
            && self.size == scene.size
            && self.position == scene.position
    }
}

/// Smallest component treated as a real shape rather than noise.
const MIN_FOREGROUND_PIXELS: usize = 30;
/// Foreground pixel count separating small from large on a 64px canvas.
const SIZE_THRESHOLD_AT_64: f32 = 280.0;

/// Classify color from foreground channel means, position from the centroid,
/// size from the pixel count, and shape by mask correlation against clean
/// renders. Noise robustness comes from keeping only the largest connected
/// bright component.
pub fn classify_scene(rgb: &PixelImage, canvas: &CanvasSpec) -> SceneClassification {
    let (h, w) = (rgb.height(), rgb.width());
    let bright = |y: usize, x: usize| (0..rgb.channels()).any(|c| rgb.get(y, x, c) > 0.0);

    // Largest 4-connected bright component.
    let mut visited = vec![false; h * w];
    let mut best: Vec<(usize, usize)> = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if visited[sy * w + sx] || !bright(sy, sx) {
                continue;
            }
            let mut stack = vec![(sy, sx)];
            visited[sy * w + sx] = true;
            let mut comp = Vec::new();
            while let Some((y, x)) = stack.pop() {
                comp.push((y, x));
                let neighbors = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w && !visited[ny * w + nx] && bright(ny, nx) {
                        visited[ny * w + nx] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            if comp.len() > best.len() {
                best = comp;
            }
        }
    }

    let fallback = SceneClassification {
        shape: Shape::Circle,
        color: SceneColor::Red,
        size: ShapeSize::Small,
        position: ScenePosition::Center,
        confidence: 0.0,
        foreground_pixels: best.len(),
        no_foreground: true,
    };
    if best.len() < MIN_FOREGROUND_PIXELS {
        return fallback;
    }

    // Color: nearest prototype to the component's channel means.
    let mut mean = [0.0f32; 3];
    for &(y, x) in &best {
        for (c, m) in mean.iter_mut().enumerate().take(rgb.channels().min(3)) {
            *m += rgb.get(y, x, c);
        }
    }
    for m in &mut mean {
        *m /= best.len() as f32;
    }
    let color = *SceneColor::ALL
        .iter()
        .min_by(|a, b| {
            let d = |col: &SceneColor| -> f32 {
                let p = col.rgb();
                (0..3).map(|c| (mean[c] - p[c]) * (mean[c] - p[c])).sum()
            };
            d(a).partial_cmp(&d(b)).expect("finite distances")
        })
        .expect("non-empty color list");

    // Position: centroid against the five anchor points.
    let cx = best.iter().map(|&(_, x)| x as f32 + 0.5).sum::<f32>() / best.len() as f32;
    let cy = best.iter().map(|&(y, _)| y as f32 + 0.5).sum::<f32>() / best.len() as f32;
    let position = *ScenePosition::ALL
        .iter()
        .min_by(|a, b| {
            let d = |p: &ScenePosition| -> f32 {
                let (px, py) = position_center(*p, canvas);
                (cx - px) * (cx - px) + (cy - py) * (cy - py)
            };
            d(a).partial_cmp(&d(b)).expect("finite distances")
        })
        .expect("non-empty position list");

    // Size: foreground count against a canvas-scaled threshold.
    let scale = (h.min(w) as f32 / 64.0).powi(2);
    let size = if (best.len() as f32) < SIZE_THRESHOLD_AT_64 * scale { ShapeSize::Small } else { ShapeSize::Large };

    // Shape: mask IoU against each clean template at the classified
    // color/size/position.
    let mut comp_mask = vec![false; h * w];
    for &(y, x) in &best {
        comp_mask[y * w + x] = true;
    }
    let mut best_shape = Shape::Circle;
    let mut best_iou = -1.0f32;
    for &shape in Shape::ALL {
        let scene = SceneSpec { shape, color, size, position, seed: 0 };
        let template = render_scene(&scene, canvas);
        let mut inter = 0usize;
        let mut union = 0usize;
        for y in 0..h {
            for x in 0..w {
                let t = (0..template.channels()).any(|c| template.get(y, x, c) > 0.0);
                let m = comp_mask[y * w + x];
                inter += usize::from(t && m);
                union += usize::from(t || m);
            }
        }
        let iou = if union == 0 { 0.0 } else { inter as f32 / union as f32 };
        if iou > best_iou {
            best_iou = iou;
            best_shape = shape;
        }
    }

    SceneClassification {
        shape: best_shape,
        color,
        size,
        position,
        confidence: best_iou,
        foreground_pixels: best.len(),
        no_foreground: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub caption_exact_match: f32,
    pub caption_cer: f32,
    pub generation_scene_accuracy: f32,
    pub cycle_scene_accuracy: f32,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "caption_exact_match = {:.6}", self.caption_exact_match);
        let _ = writeln!(s, "caption_cer = {:.6}", self.caption_cer);
        let _ = writeln!(s, "generation_scene_accuracy = {:.6}", self.generation_scene_accuracy);
        let _ = writeln!(s, "cycle_scene_accuracy = {:.6}", self.cycle_scene_accuracy);
        s
    }

    pub fn from_text(text: &str) -> Result<MetricsReport> {
        let mut n = None;
        let mut exact = None;
        let mut cer = None;
        let mut gen = None;
        let mut cyc = None;
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::CorruptData(format!("report: bad line {line:?}")))?;
            let v = v.trim();
            match k.trim() {
                "n" => n = v.parse::<usize>().ok(),
                "caption_exact_match" => exact = v.parse::<f32>().ok(),
                "caption_cer" => cer = v.parse::<f32>().ok(),
                "generation_scene_accuracy" => gen = v.parse::<f32>().ok(),
                "cycle_scene_accuracy" => cyc = v.parse::<f32>().ok(),
                other => return Err(Error::CorruptData(format!("report: unknown key {other:?}"))),
            }
        }
        match (n, exact, cer, gen, cyc) {
            (Some(n), Some(e), Some(c), Some(g), Some(y)) => Ok(MetricsReport {
                n,
                caption_exact_match: e,
                caption_cer: c,
                generation_scene_accuracy: g,
                cycle_scene_accuracy: y,
            }),
            _ => Err(Error::CorruptData("report: missing fields".into())),
        }
    }
}

const EVAL_BATCH: usize = 25;

/// Corpus-level evaluation. Per-sample prior seeds derive from the sampler
/// seed plus the sample index; the generation leg derives its seed from the
/// understanding leg's. Writes the report file and, when a gallery directory
/// is given, one `input | painted | reconstruction` triptych per sample.
pub fn evaluate(
    corpus: &Corpus,
    ckpt: &Checkpoint,
    cfg: &SamplerConfig,
    report_path: Option<&Path>,
    gallery_dir: Option<&Path>,
) -> Result<MetricsReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(dir) = gallery_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let font = GlyphFont::embedded();
    let mut exact = 0usize;
    let mut cer_sum = 0.0f64;
    let mut gen_ok = 0usize;
    let mut cycle_ok = 0usize;

    let mut index = 0usize;
    for chunk in corpus.samples.chunks(EVAL_BATCH) {
        let rgbs: Vec<&PixelImage> = chunk.iter().map(|s| &s.rgb).collect();
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| cfg.seed + (index + i) as u64).collect();
        let gen_seeds: Vec<u64> = seeds.iter().map(|&s| generation_prior_seed(s)).collect();

        // Understanding leg.
        let captions = caption_batch(&rgbs, ckpt, &seeds, cfg)?;

        // Generation from the clean painted caption.
        let clean_painted: Vec<PixelImage> = chunk
            .iter()
            .map(|s| Ok(rasterize(&s.scene.caption(), &ckpt.canvas, &font)?.image))
            .collect::<Result<_>>()?;
        let clean_refs: Vec<&PixelImage> = clean_painted.iter().collect();
        let generated = generate_from_painted_batch(&clean_refs, ckpt, &gen_seeds, cfg)?;

        // Cycle: generation from the predicted painted image.
        let pred_refs: Vec<&PixelImage> = captions.iter().map(|c| &c.painted).collect();
        let reconstructed = generate_from_painted_batch(&pred_refs, ckpt, &gen_seeds, cfg)?;

        for (i, sample) in chunk.iter().enumerate() {
            let caption = sample.scene.caption();
            if captions[i].text == caption {
                exact += 1;
            }
            cer_sum += glyph_error_rate(&captions[i].painted, &caption, &ckpt.canvas, &font)? as f64;
            if classify_scene(&generated[i], &ckpt.canvas).matches(&sample.scene) {
                gen_ok += 1;
            }
            if classify_scene(&reconstructed[i], &ckpt.canvas).matches(&sample.scene) {
                cycle_ok += 1;
            }
            if let Some(dir) = gallery_dir {
                let trip = PixelImage::hconcat(
                    &[&sample.rgb, &captions[i].painted, &reconstructed[i]],
                    PIXEL_MIN,
                )?;
                trip.save_png(dir.join(format!("{:04}_triptych.png", index + i)))?;
            }
        }
        index += chunk.len();
    }

    let n = corpus.len();
    let report = MetricsReport {
        n,
        caption_exact_match: exact as f32 / n as f32,
        caption_cer: (cer_sum / n as f64) as f32,
        generation_scene_accuracy: gen_ok as f32 / n as f32,
        cycle_scene_accuracy: cycle_ok as f32 / n as f32,
    };
    if let Some(path) = report_path {
        fs::write(path, report.to_text()).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}
