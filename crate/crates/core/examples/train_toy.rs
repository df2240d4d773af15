//! Overfits the toy profile on one synthetic 256×256 image and reports the
//! reconstruction quality through the full coded pipeline.
//!
//! cargo run --release -p qpf --example train_toy -- [steps] [out.qpck]

use std::time::Instant;

use qpf::codec::{compress_image, decompress_image};
use qpf::metrics::psnr;
use qpf::synthetic::smooth_image;
use qpf::train::{Dataset, TrainOutput, Trainer};
use qpf::RunConfig;

fn main() -> qpf::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut run = RunConfig::toy();
    if let Some(steps) = args.next() {
        run.train.steps = steps.parse().expect("steps must be an integer");
    }
    let out = args.next().unwrap_or_else(|| "toy.qpck".into());

    let image = smooth_image(256, 256, 2024);
    let data = Dataset::from_images(vec![image.clone()], 256, run.train.flip)?;
    let mut trainer = Trainer::new(run)?;
    let start = Instant::now();
    let history = trainer.run(
        &data,
        &TrainOutput {
            checkpoint: out.clone().into(),
            metrics_csv: None,
        },
    )?;
    let last = history.last().expect("at least one step");
    println!(
        "trained {} steps in {:.1}s, final loss {:.5}, noisy distortion {:.2e}",
        history.len(),
        start.elapsed().as_secs_f64(),
        last.terms.loss,
        last.terms.distortion
    );

    let (bitstream, stats) = compress_image(&image, &trainer.codec, false)?;
    let recon = decompress_image(&bitstream, &trainer.codec)?;
    println!(
        "coded: {} bytes, {:.4} bpp, MSE {:.3e}, PSNR {:.2} dB, checkpoint {out}",
        stats.file_bytes,
        stats.file_bpp(),
        image.mse(&recon)?,
        psnr(&image, &recon)?
    );
    Ok(())
}
