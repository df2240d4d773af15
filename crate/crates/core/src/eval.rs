//! Tiled evaluation over an image directory.

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{compress_image, decompress_image};
use crate::error::Result;
use crate::image::ImageTensor;
use crate::metrics::{ms_ssim, psnr, MS_SSIM_MIN_SIDE};
use crate::model::Codec;
use crate::patch::{center_crop, tile_image};
use crate::perceptual::{perceptual_distance, PerceptualBackend};
use crate::train::dataset::load_images;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    /// Absent when the coded crop is too small for five scales.
    pub ms_ssim: Option<f64>,
    /// Mean over tiles of the upscaled feature distance.
    pub perceptual: Option<f64>,
    pub bpp: f64,
    pub bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
}

pub const REPORT_HEADER: &str = "image,psnr,ms_ssim,perceptual,bpp,bytes";

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Mean when every image has the value.
fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.images.iter().map(|m| m.psnr))
    }

    pub fn mean_ms_ssim(&self) -> Option<f64> {
        mean_of(self.images.iter().map(|m| m.ms_ssim))
    }

    pub fn mean_perceptual(&self) -> Option<f64> {
        mean_of(self.images.iter().map(|m| m.perceptual))
    }

    pub fn mean_bpp(&self) -> f64 {
        mean(self.images.iter().map(|m| m.bpp))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for m in &self.images {
            writeln!(out, "{},{},{},{},{},{}", m.name, m.psnr, cell(m.ms_ssim), cell(m.perceptual), m.bpp, m.bytes)
                .expect("string write");
        }
        writeln!(
            out,
            "mean,{},{},{},{},",
            self.mean_psnr(),
            cell(self.mean_ms_ssim()),
            cell(self.mean_perceptual()),
            self.mean_bpp()
        )
        .expect("string write");
        out
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} images: PSNR {:.3} dB, {:.4} bpp",
            self.images.len(),
            self.mean_psnr(),
            self.mean_bpp()
        );
        if let Some(m) = self.mean_ms_ssim() {
            write!(s, ", MS-SSIM {m:.5}").expect("string write");
        }
        if let Some(p) = self.mean_perceptual() {
            write!(s, ", perceptual {p:.5}").expect("string write");
        }
        s
    }
}

/// Compresses, decompresses and scores one image against its centered crop.
pub fn evaluate_image(
    name: &str,
    image: &ImageTensor,
    codec: &Codec,
    perceptual: Option<(&dyn PerceptualBackend, usize)>,
) -> Result<ImageMetrics> {
    let (bitstream, stats) = compress_image(image, codec, false)?;
    let recon = decompress_image(&bitstream, codec)?;
    let reference = center_crop(image, &stats.grid)?;
    let perceptual = match perceptual {
        None => None,
        Some((backend, side)) => {
            let tile = codec.config.tile_size;
            let (_, ref_tiles) = tile_image(&reference, tile)?;
            let (_, rec_tiles) = tile_image(&recon, tile)?;
            let d = ref_tiles
                .iter()
                .zip(&rec_tiles)
                .map(|(a, b)| perceptual_distance(backend, a, b, side))
                .collect::<Result<Vec<_>>>()?;
            Some(mean(d.into_iter()))
        }
    };
    Ok(ImageMetrics {
        name: name.to_string(),
        psnr: psnr(&reference, &recon)?,
        ms_ssim: if reference.height().min(reference.width()) >= MS_SSIM_MIN_SIDE {
            Some(ms_ssim(&reference, &recon)?)
        } else {
            None
        },
        perceptual,
        bpp: stats.file_bpp(),
        bytes: stats.file_bytes,
    })
}

/// Scores every readable image in `dir` at least one tile in size.
/// Smaller images are skipped with a warning.
pub fn evaluate(
    dir: &Path,
    codec: &Codec,
    perceptual: Option<(&dyn PerceptualBackend, usize)>,
) -> Result<MetricReport> {
    let images = load_images(dir, codec.config.tile_size)?;
    let mut report = MetricReport::default();
    for (path, image) in images {
        let name = display_name(dir, &path);
        let m = evaluate_image(&name, &image, codec, perceptual)?;
        log::info!("{name}: {:.3} dB, {:.4} bpp", m.psnr, m.bpp);
        report.images.push(m);
    }
    Ok(report)
}

fn display_name(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).display().to_string()
}
