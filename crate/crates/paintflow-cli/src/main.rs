//! paintflow CLI: dataset generation, training, captioning, generation,
//! cycle inference, evaluation, and canvas decoding.
//!
//! Exit codes: 0 success, 1 runtime failure (one `error: <class>: ...` line
//! on stderr), 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use paintflow::checkpoint::{load_checkpoint, Checkpoint};
use paintflow::config;
use paintflow::dataset::{generate_corpus, load_corpus, save_corpus};
use paintflow::flow::{SamplerConfig, SamplerScheme};
use paintflow::font::GlyphFont;
use paintflow::image::PixelImage;
use paintflow::painted::decode as decode_canvas;
use paintflow::pipelines::{cycle, evaluate, image_to_text, text_to_image};
use paintflow::trainer::{resume, train};
use paintflow::Error;

#[derive(Parser)]
#[command(name = "paintflow", version, about = "Bidirectional pixel-space caption/image model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SamplerArgs {
    /// Seed for the sampling prior.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Euler integration steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig { num_steps: self.steps, scheme: SamplerScheme::Euler, seed: self.seed }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired (image, caption) corpus directory.
    GenData {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Corpus seed.
        #[arg(long)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a config file on a corpus.
    Train {
        /// Corpus directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Caption an RGB image: writes the painted canvas, prints the string.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Where to write the predicted painted canvas.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Generate an RGB image from a caption string.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Cycle inference: image -> painted caption -> reconstructed image.
    Cycle {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output triptych PNG path.
        #[arg(long)]
        out: PathBuf,
        /// Condition the generation leg on a clean re-render of the decoded
        /// string instead of the raw predicted canvas.
        #[arg(long)]
        rerasterize: bool,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Evaluate a checkpoint over a corpus and write a metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report file path.
        #[arg(long)]
        out: PathBuf,
        /// Gallery directory (default: `<out>_gallery`).
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Decode a painted canvas PNG back to text (no model involved).
    DecodeText {
        #[arg(long)]
        image: PathBuf,
        /// Optional glyph table file; defaults to the embedded font.
        #[arg(long)]
        font: Option<PathBuf>,
    },
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Error> {
    load_checkpoint(path)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { n, seed, out } => {
            let corpus = generate_corpus(n, seed, &paintflow::painted::CanvasSpec::default())?;
            save_corpus(&corpus, &out)?;
            println!("wrote {} samples to {}", corpus.len(), out.display());
        }
        Command::Train { data, config: config_path, out, resume: resume_from } => {
            let text = std::fs::read_to_string(&config_path)
                .map_err(|e| Error::io(&config_path, e))?;
            let cfg = config::from_text(&text)?;
            cfg.validate()?;
            let corpus = load_corpus(&data)?;
            let outcome = match resume_from {
                Some(path) => {
                    let ckpt = load_ckpt(&path)?;
                    resume(ckpt, &corpus, Some(&out))?
                }
                None => train(&corpus, &cfg, Some(&out))?,
            };
            let last = outcome.stats.last();
            println!(
                "trained to step {} (final loss {})",
                outcome.checkpoint.step,
                last.map_or_else(|| "n/a".into(), |s| format!("{:.6}", s.loss))
            );
        }
        Command::Caption { ckpt, image, out, sampler } => {
            let ckpt = load_ckpt(&ckpt)?;
            let rgb = PixelImage::load_png(&image)?;
            let result = image_to_text(&rgb, &ckpt, &sampler.config())?;
            if let Some(out) = out {
                result.painted.save_png(&out)?;
            }
            println!("{}", result.text);
        }
        Command::Generate { ckpt, text, out, sampler } => {
            let ckpt = load_ckpt(&ckpt)?;
            let img = text_to_image(&text, &ckpt, &sampler.config())?;
            img.save_png(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Cycle { ckpt, image, out, rerasterize, sampler } => {
            let ckpt = load_ckpt(&ckpt)?;
            let rgb = PixelImage::load_png(&image)?;
            let result = cycle(&rgb, &ckpt, &sampler.config(), rerasterize)?;
            let trip = PixelImage::hconcat(
                &[&rgb, &result.painted_pred, &result.reconstructed],
                paintflow::image::PIXEL_MIN,
            )?;
            trip.save_png(&out)?;
            println!("{}", result.decoded);
        }
        Command::Eval { ckpt, data, out, gallery, sampler } => {
            let ckpt = load_ckpt(&ckpt)?;
            let corpus = load_corpus(&data)?;
            let gallery_dir = gallery.unwrap_or_else(|| {
                let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
                name.push("_gallery");
                out.with_file_name(name)
            });
            let report = evaluate(&corpus, &ckpt, &sampler.config(), Some(&out), Some(&gallery_dir))?;
            print!("{}", report.to_text());
        }
        Command::DecodeText { image, font } => {
            let img = PixelImage::load_png(&image)?;
            let font = match font {
                Some(path) => GlyphFont::load(&path)?,
                None => GlyphFont::embedded(),
            };
            let canvas = paintflow::painted::CanvasSpec {
                width: img.width(),
                height: img.height(),
                channels: img.channels(),
                ..paintflow::painted::CanvasSpec::default()
            };
            let decoded = decode_canvas(&img, &canvas, &font)?;
            println!("{}", decoded.text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}
