//! Colors the decoder's patch grid by the three principal components of the
//! latent queries, one image per decoder layer.
//!
//! cargo run --release -p qpf --example pca_meta_queries -- [checkpoint] [image]

use qpf::analysis::{decoder_attention_projection, pca_meta_queries, render_projection};
use qpf::codec::quantized_latent;
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
    let latent = quantized_latent(&codec, &tile)?;
    let meta = pca_meta_queries(&latent)?;
    println!("explained variance {:?}", meta.pca.explained_variance);
    let (_, records) = codec.decode(&latent, true)?;
    let out = std::env::temp_dir();
    for layer in 0..codec.config.depth {
        let projection = decoder_attention_projection(&records, &meta.projections[0], layer)?;
        let path = out.join(format!("pca_layer{layer}.png"));
        render_projection(&projection, &meta.ranges(), 256)?.save(&path)?;
        println!("layer {layer} -> {}", path.display());
    }
    Ok(())
}
