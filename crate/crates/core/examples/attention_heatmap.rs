//! Renders encoder cross-attention of the centered tile as a heatmap and as
//! an overlay.
//!
//! cargo run --release -p qpf --example attention_heatmap -- [checkpoint] [image]

use qpf::analysis::{attention_heatmap, HeatmapSpec, Reduction};
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
    let (_, records) = codec.encode(&tile, true)?;
    let out = std::env::temp_dir();
    for (name, reduction) in [("max", Reduction::Max), ("query0", Reduction::MeanForQuery(0))] {
        let spec = HeatmapSpec::new(reduction);
        let map = attention_heatmap(&records, &spec, 256)?;
        map.render(spec.colormap).save(out.join(format!("attn_{name}.png")))?;
        map.overlay(&tile, &spec)?.save(out.join(format!("attn_{name}_overlay.png")))?;
        println!(
            "{name}: raw range [{:.3e}, {:.3e}], every patch above 1/256: {}",
            map.raw_min,
            map.raw_max,
            map.raw_min > 1.0 / 256.0
        );
    }
    println!("images in {}", out.display());
    Ok(())
}
