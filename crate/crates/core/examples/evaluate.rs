//! Scores a checkpoint on a directory of images (synthetic ones by default).
//!
//! cargo run --release -p qpf --example evaluate -- [checkpoint] [dir]

use qpf::eval::evaluate;
use qpf::synthetic::smooth_image;
use qpf::{Checkpoint, Codec, ModelConfig};

fn main() -> qpf::Result<()> {
    let mut args = std::env::args().skip(1);
    let codec = match args.next() {
        Some(path) => Checkpoint::load(path)?.codec,
        None => Codec::new(ModelConfig::toy(), 0)?,
    };
    let scratch = scratch_dir();
    let dir = match args.next() {
        Some(d) => d.into(),
        None => {
            for (i, (h, w)) in [(256, 256), (300, 520), (512, 512)].into_iter().enumerate() {
                smooth_image(h, w, i as u64).save(scratch.join(format!("img{i}.png")))?;
            }
            scratch
        }
    };
    let report = evaluate(&dir, &codec, None)?;
    print!("{}", report.to_csv());
    println!("{}", report.summary());
    Ok(())
}

fn scratch_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("qpf_evaluate_example");
    std::fs::create_dir_all(&dir).expect("create scratch dir");
    dir
}
