//! Drops each latent query in turn from the decoder and reports how much of
//! the reconstruction it controls.
//!
//! cargo run --release -p qpf --example query_ablation -- [checkpoint] [image]

use qpf::analysis::ablate_all_queries;
use qpf::synthetic::smooth_image;
use qpf::{Checkpoint, Codec, ImageTensor, ModelConfig};

fn main() -> qpf::Result<()> {
    let mut args = std::env::args().skip(1);
    let codec = match args.next() {
        Some(path) => Checkpoint::load(path)?.codec,
        None => Codec::new(ModelConfig::toy(), 0)?,
    };
    let image = match args.next() {
        Some(path) => ImageTensor::load(path)?,
        None => smooth_image(256, 256, 2024),
    };
    let tile = image.crop((image.height() - 256) / 2, (image.width() - 256) / 2, 256, 256)?;
    let out = std::env::temp_dir();
    for r in ablate_all_queries(&codec, &[tile])? {
        r.render().save(out.join(format!("ablate_q{}.png", r.query)))?;
        println!("query {}: mean |delta| {:.4e}, max {:.4e}", r.query, r.mean_error(), r.max_error());
    }
    println!("maps in {}", out.display());
    Ok(())
}
