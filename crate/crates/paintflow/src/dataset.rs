//! Paired (RGB image, caption) corpus: generation, persistence, loading.
//!
//! A corpus directory holds a `manifest`, per-sample `NNNN_rgb.png` /
//! `NNNN_txt.png` images and an `NNNN_scene` record. The manifest carries a
//! checksum over all sample files, so truncation or edits are detected before
//! any decoding happens.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::font::GlyphFont;
use crate::hash::Fnv1a;
use crate::image::PixelImage;
use crate::painted::{rasterize, CanvasSpec, PaintedText};
use crate::rng::{self, Stream};
use crate::scene::{render_scene, scene_grid, SceneColor, ScenePosition, SceneSpec, Shape, ShapeSize};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub rgb: PixelImage,
    pub painted: PaintedText,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub canvas: CanvasSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generate `n` samples with the given seed. Scenes are drawn by walking
/// shuffled permutations of the 200-scene grid, so any window of 200
/// consecutive samples covers the grid and n = 200 yields every scene exactly
/// once; smaller n gives a uniform subset. Pure in (n, seed, spec).
pub fn generate_corpus(n: usize, seed: u64, spec: &CanvasSpec) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let font = GlyphFont::embedded();
    let mut data_rng = rng::stream_rng(seed, Stream::Data);
    let grid = scene_grid();

    let mut samples = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..n {
        if order.is_empty() {
            order = (0..grid.len()).collect();
            rng::shuffle(&mut data_rng, &mut order);
        }
        let mut scene = grid[order.pop().expect("refilled above")];
        scene.seed = data_rng.next_u64();
        let rgb = render_scene(&scene, spec);
        let painted = rasterize(&scene.caption(), spec, &font)?;
        samples.push(Sample { rgb, painted, scene });
    }
    Ok(Corpus { canvas: spec.clone(), seed, samples })
}

use rand_chacha::rand_core::Rng as _;

fn scene_record(scene: &SceneSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "shape = {}", scene.shape.label());
    let _ = writeln!(s, "color = {}", scene.color.label());
    let _ = writeln!(s, "size = {}", scene.size.label());
    let _ = writeln!(s, "position = {}", scene.position.label());
    let _ = writeln!(s, "seed = {}", scene.seed);
    s
}

fn parse_scene_record(text: &str, path: &Path) -> Result<SceneSpec> {
    let mut shape = None;
    let mut color = None;
    let mut size = None;
    let mut position = None;
    let mut seed = None;
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::CorruptData(format!("{}: bad scene line {line:?}", path.display())))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "shape" => shape = Shape::from_label(value),
            "color" => color = SceneColor::from_label(value),
            "size" => size = ShapeSize::from_label(value),
            "position" => position = ScenePosition::from_label(value),
            "seed" => seed = value.parse::<u64>().ok(),
            _ => return Err(Error::CorruptData(format!("{}: unknown scene key {key:?}", path.display()))),
        }
    }
    match (shape, color, size, position, seed) {
        (Some(shape), Some(color), Some(size), Some(position), Some(seed)) => {
            Ok(SceneSpec { shape, color, size, position, seed })
        }
        _ => Err(Error::CorruptData(format!("{}: incomplete scene record", path.display()))),
    }
}

fn canvas_manifest_lines(canvas: &CanvasSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "canvas.width = {}", canvas.width);
    let _ = writeln!(s, "canvas.height = {}", canvas.height);
    let _ = writeln!(s, "canvas.channels = {}", canvas.channels);
    let _ = writeln!(s, "canvas.margin = {}", canvas.margin);
    let _ = writeln!(s, "canvas.background = {}", canvas.background_value);
    let _ = writeln!(s, "canvas.foreground = {}", canvas.foreground_value);
    s
}

/// Write a corpus to a directory. Empty corpora are rejected.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut hasher = Fnv1a::new();
    for (i, sample) in corpus.samples.iter().enumerate() {
        let rgb_bytes = sample.rgb.to_png_bytes()?;
        let txt_bytes = sample.painted.image.to_png_bytes()?;
        let scene_text = scene_record(&sample.scene);
        hasher.update(&rgb_bytes);
        hasher.update(&txt_bytes);
        hasher.update(scene_text.as_bytes());

        let rgb_path = dir.join(format!("{i:04}_rgb.png"));
        fs::write(&rgb_path, &rgb_bytes).map_err(|e| Error::io(&rgb_path, e))?;
        let txt_path = dir.join(format!("{i:04}_txt.png"));
        fs::write(&txt_path, &txt_bytes).map_err(|e| Error::io(&txt_path, e))?;
        let scene_path = dir.join(format!("{i:04}_scene"));
        fs::write(&scene_path, scene_text).map_err(|e| Error::io(&scene_path, e))?;
    }

    let mut manifest = String::new();
    let _ = writeln!(manifest, "version = {CORPUS_FORMAT_VERSION}");
    let _ = writeln!(manifest, "n = {}", corpus.len());
    let _ = writeln!(manifest, "seed = {}", corpus.seed);
    manifest.push_str(&canvas_manifest_lines(&corpus.canvas));
    let _ = writeln!(manifest, "font = embedded-5x7");
    let _ = writeln!(manifest, "checksum = {:016x}", hasher.finish());
    let manifest_path = dir.join("manifest");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Load a corpus, verifying version, checksum and the painted-text invariant.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest");
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;

    let mut version = None;
    let mut n = None;
    let mut seed = None;
    let mut checksum = None;
    let mut canvas = CanvasSpec::default();
    let mut font_name = None;
    for line in manifest.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::CorruptData(format!("manifest: bad line {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_usize =
            |v: &str| v.parse::<usize>().map_err(|_| Error::CorruptData(format!("manifest: bad value for {key}")));
        let parse_f32 =
            |v: &str| v.parse::<f32>().map_err(|_| Error::CorruptData(format!("manifest: bad value for {key}")));
        match key {
            "version" => version = Some(value.parse::<u32>().map_err(|_| Error::CorruptData("manifest: bad version".into()))?),
            "n" => n = Some(parse_usize(value)?),
            "seed" => seed = Some(value.parse::<u64>().map_err(|_| Error::CorruptData("manifest: bad seed".into()))?),
            "checksum" => checksum = Some(u64::from_str_radix(value, 16).map_err(|_| Error::CorruptData("manifest: bad checksum".into()))?),
            "canvas.width" => canvas.width = parse_usize(value)?,
            "canvas.height" => canvas.height = parse_usize(value)?,
            "canvas.channels" => canvas.channels = parse_usize(value)?,
            "canvas.margin" => canvas.margin = parse_usize(value)?,
            "canvas.background" => canvas.background_value = parse_f32(value)?,
            "canvas.foreground" => canvas.foreground_value = parse_f32(value)?,
            "font" => font_name = Some(value.to_string()),
            _ => return Err(Error::CorruptData(format!("manifest: unknown key {key:?}"))),
        }
    }
    let version = version.ok_or_else(|| Error::CorruptData("manifest: missing version".into()))?;
    if version != CORPUS_FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CORPUS_FORMAT_VERSION });
    }
    let n = n.ok_or_else(|| Error::CorruptData("manifest: missing n".into()))?;
    let seed = seed.ok_or_else(|| Error::CorruptData("manifest: missing seed".into()))?;
    let expected_checksum = checksum.ok_or_else(|| Error::CorruptData("manifest: missing checksum".into()))?;
    match font_name.as_deref() {
        Some("embedded-5x7") => {}
        other => return Err(Error::CorruptData(format!("manifest: unsupported font {other:?}"))),
    }

    // First pass: hash raw bytes so corruption is reported as such.
    let mut hasher = Fnv1a::new();
    let mut raw: Vec<(Vec<u8>, Vec<u8>, String)> = Vec::with_capacity(n);
    for i in 0..n {
        let rgb_path = dir.join(format!("{i:04}_rgb.png"));
        let rgb_bytes = fs::read(&rgb_path).map_err(|e| Error::io(&rgb_path, e))?;
        let txt_path = dir.join(format!("{i:04}_txt.png"));
        let txt_bytes = fs::read(&txt_path).map_err(|e| Error::io(&txt_path, e))?;
        let scene_path = dir.join(format!("{i:04}_scene"));
        let scene_text = fs::read_to_string(&scene_path).map_err(|e| Error::io(&scene_path, e))?;
        hasher.update(&rgb_bytes);
        hasher.update(&txt_bytes);
        hasher.update(scene_text.as_bytes());
        raw.push((rgb_bytes, txt_bytes, scene_text));
    }
    if hasher.finish() != expected_checksum {
        return Err(Error::ChecksumMismatch(format!("corpus at {}", dir.display())));
    }

    let font = GlyphFont::embedded();
    let mut samples = Vec::with_capacity(n);
    for (i, (rgb_bytes, txt_bytes, scene_text)) in raw.into_iter().enumerate() {
        let scene_path = dir.join(format!("{i:04}_scene"));
        let scene = parse_scene_record(&scene_text, &scene_path)?;
        let rgb = PixelImage::from_png_bytes(&rgb_bytes)?;
        let txt = PixelImage::from_png_bytes(&txt_bytes)?;
        let painted = rasterize(&scene.caption(), &canvas, &font)?;
        if painted.image != txt {
            return Err(Error::CorruptData(format!(
                "sample {i:04}: stored painted image does not match its caption"
            )));
        }
        samples.push(Sample { rgb, painted, scene });
    }
    Ok(Corpus { canvas, seed, samples })
}
