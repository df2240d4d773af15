//! Command-line front end. Every failure is reported on stderr as a single
//! line `error[<class>]: <message>` and a nonzero exit status.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    attention_heatmap, decoder_attention_projection, pca_meta_queries, query_ablation_study, render_projection,
    HeatmapSpec, Reduction,
};
use crate::codec::{compress_image, decompress_image};
use crate::coder::Bitstream;
use crate::config::RunConfig;
use crate::error::{CodecError, Result};
use crate::eval::evaluate;
use crate::image::ImageTensor;
use crate::model::{Checkpoint, Codec};
use crate::perceptual::{FeatureNet, PerceptualBackend};
use crate::train::{Dataset, TrainOutput, Trainer};

/// Exit status for runtime failures.
pub const EXIT_FAILURE: i32 = 1;
/// Exit status for unparsable command lines.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "qpf", version, about = "Attention-only learned image codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML). Defaults apply when omitted, except for `train`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model checkpoint; the output path for `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a directory of images.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from `--checkpoint` if it exists.
        #[arg(long)]
        resume: bool,
        /// Append per-step metrics to this CSV file.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Encode an image to a `.qpf` stream.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Store the CDF tables in the stream.
        #[arg(long)]
        side_info: bool,
    },
    /// Decode a `.qpf` stream to an image.
    Decompress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score every image in a directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Write per-image metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Feature-network weights for the perceptual column; falls back to
        /// the configured `loss.perceptual_weights`.
        #[arg(long)]
        perceptual_weights: Option<PathBuf>,
    },
    /// Encoder cross-attention heatmap of the centered tile.
    VizAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Mean map of one query instead of the max over all of them.
        #[arg(long)]
        query: Option<usize>,
        /// Blend the map over the tile.
        #[arg(long)]
        overlay: bool,
    },
    /// Reconstruction change when one query is dropped from the decoder.
    VizAblate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        query: usize,
    },
    /// Meta-query colors propagated through decoder cross-attention.
    VizPca {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Decoder layer, counted from 0.
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return EXIT_USAGE;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            EXIT_FAILURE
        }
    }
}

/// `error[<class>]: <message>` with the message folded onto one line.
pub fn error_line(e: &CodecError) -> String {
    let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error[{}]: {msg}", e.class())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Loads the checkpoint and, when a config file was given, checks that it
/// describes the same model.
fn load_model(common: &Common) -> Result<(RunConfig, Codec)> {
    let run = load_config(common.config.as_deref())?;
    let ck = Checkpoint::load(&common.checkpoint)?;
    if common.config.is_some() && run.model != ck.codec.config {
        return Err(CodecError::Config(format!(
            "model section of the config does not match checkpoint {}",
            common.checkpoint.display()
        )));
    }
    Ok((run, ck.codec))
}

fn center_tile(image: &ImageTensor, side: usize) -> Result<ImageTensor> {
    if image.height() < side || image.width() < side {
        return Err(CodecError::InvalidInput(format!(
            "image is {}x{}, smaller than one {side}x{side} tile",
            image.height(),
            image.width()
        )));
    }
    image.crop((image.height() - side) / 2, (image.width() - side) / 2, side, side)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train {
            common,
            data,
            resume,
            metrics,
        } => {
            let config = common
                .config
                .as_deref()
                .ok_or_else(|| CodecError::Config("train requires --config".into()))?;
            let run = RunConfig::load(config)?;
            let dataset = Dataset::open(&data, run.model.tile_size, run.train.flip)?;
            let mut trainer = if resume && common.checkpoint.exists() {
                Trainer::resume(run, Checkpoint::load(&common.checkpoint)?)?
            } else {
                Trainer::new(run)?
            };
            log::info!(
                "training on {} images from step {}",
                dataset.len(),
                trainer.step_count()
            );
            let out = TrainOutput {
                checkpoint: common.checkpoint.clone(),
                metrics_csv: metrics,
            };
            let history = trainer.run(&dataset, &out)?;
            if let Some(last) = history.last() {
                println!(
                    "step {} loss {:.6} bpp {:.5} distortion {:.6}",
                    last.step, last.terms.loss, last.terms.bpp, last.terms.distortion
                );
            }
            println!("checkpoint {}", common.checkpoint.display());
        }
        Command::Compress {
            common,
            input,
            output,
            side_info,
        } => {
            let (_, codec) = load_model(&common)?;
            let image = ImageTensor::load(&input)?;
            let (bitstream, stats) = compress_image(&image, &codec, side_info)?;
            let bytes = bitstream.to_bytes()?;
            std::fs::write(&output, &bytes).map_err(|e| CodecError::io(&output, e))?;
            println!(
                "{} bytes, {}x{} coded pixels, {:.6} bpp",
                bytes.len(),
                stats.grid.cropped_height(),
                stats.grid.cropped_width(),
                stats.file_bpp()
            );
        }
        Command::Decompress { common, input, output } => {
            let (_, codec) = load_model(&common)?;
            let bytes = std::fs::read(&input).map_err(|e| CodecError::io(&input, e))?;
            let image = decompress_image(&Bitstream::from_bytes(&bytes)?, &codec)?;
            image.save(&output)?;
            println!("{}x{} -> {}", image.height(), image.width(), output.display());
        }
        Command::Eval {
            common,
            data,
            csv,
            perceptual_weights,
        } => {
            let (run, codec) = load_model(&common)?;
            let net = match perceptual_weights.or(run.loss.perceptual_weights) {
                Some(p) => Some(FeatureNet::load(p)?),
                None => None,
            };
            let perceptual = net
                .as_ref()
                .map(|n| (n as &dyn PerceptualBackend, run.loss.perceptual_upscale));
            let report = evaluate(&data, &codec, perceptual)?;
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv()).map_err(|e| CodecError::io(&path, e))?;
            }
            println!("{}", report.summary());
        }
        Command::VizAttn {
            common,
            input,
            output,
            query,
            overlay,
        } => {
            let (run, codec) = load_model(&common)?;
            let tile = center_tile(&ImageTensor::load(&input)?, codec.config.tile_size)?;
            let (_, records) = codec.encode(&tile, true)?;
            let reduction = query.map_or(Reduction::Max, Reduction::MeanForQuery);
            let spec = HeatmapSpec {
                colormap: run.viz.colormap,
                overlay_alpha: run.viz.overlay_alpha,
                ..HeatmapSpec::new(reduction)
            };
            let map = attention_heatmap(&records, &spec, tile.height())?;
            let rendered = if overlay {
                map.overlay(&tile, &spec)?
            } else {
                map.render(spec.colormap)
            };
            rendered.save(&output)?;
            println!("raw min {:.6e} max {:.6e}", map.raw_min, map.raw_max);
        }
        Command::VizAblate {
            common,
            input,
            output,
            query,
        } => {
            let (_, codec) = load_model(&common)?;
            let tile = center_tile(&ImageTensor::load(&input)?, codec.config.tile_size)?;
            let result = query_ablation_study(&codec, &[tile], query)?;
            result.render().save(&output)?;
            println!("mean |delta| {:.6e} max {:.6e}", result.mean_error(), result.max_error());
        }
        Command::VizPca {
            common,
            input,
            output,
            layer,
        } => {
            let (_, codec) = load_model(&common)?;
            let tile = center_tile(&ImageTensor::load(&input)?, codec.config.tile_size)?;
            let latent = crate::codec::quantized_latent(&codec, &tile)?;
            let meta = pca_meta_queries(&latent)?;
            let (_, records) = codec.decode(&latent, true)?;
            let projection = decoder_attention_projection(&records, &meta.projections[0], layer)?;
            render_projection(&projection, &meta.ranges(), tile.height())?.save(&output)?;
            let total: f64 = meta.pca.explained_variance.iter().sum();
            let top: Vec<String> = meta.pca.explained_variance[..3]
                .iter()
                .map(|v| format!("{:.4}", v / total))
                .collect();
            println!("explained variance ratio {}", top.join(" "));
        }
    }
    Ok(())
}
