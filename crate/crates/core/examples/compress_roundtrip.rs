//! Compresses an image to a `.qpf` file, decodes it again and checks that
//! the result is bitwise equal to the in-process reconstruction.
//!
//! cargo run --release -p qpf --example compress_roundtrip -- [checkpoint] [image]

use qpf::codec::{compress_image, decompress_image, reconstruct_in_process};
use qpf::coder::Bitstream;
use qpf::metrics::psnr;
use qpf::patch::center_crop;
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
        None => smooth_image(384, 640, 11),
    };
    let (bitstream, stats) = compress_image(&image, &codec, false)?;
    let path = std::env::temp_dir().join("compress_roundtrip.qpf");
    std::fs::write(&path, bitstream.to_bytes()?).expect("write stream");
    let bytes = std::fs::read(&path).expect("read stream");
    let decoded = decompress_image(&Bitstream::from_bytes(&bytes)?, &codec)?;
    assert_eq!(decoded, reconstruct_in_process(&image, &codec)?);
    println!(
        "{} bytes ({} payload), {:.5} bpp, ideal {:.0} payload bits, PSNR {:.2} dB, written to {}",
        stats.file_bytes,
        stats.payload_bytes,
        stats.file_bpp(),
        stats.estimated_bits,
        psnr(&center_crop(&image, &stats.grid)?, &decoded)?,
        path.display()
    );
    Ok(())
}
