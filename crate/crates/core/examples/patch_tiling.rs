//! Crops an image to whole tiles, splits it into patches and tokens, and
//! puts everything back together.
//!
//! cargo run -p qpf --example patch_tiling -- [image]

use qpf::patch::{center_crop, patchify, reassemble, tile_image, unpatchify};
use qpf::synthetic::smooth_image;
use qpf::ImageTensor;

fn main() -> qpf::Result<()> {
    let image = match std::env::args().nth(1) {
        Some(path) => ImageTensor::load(path)?,
        None => smooth_image(600, 900, 5),
    };
    let (grid, tiles) = tile_image(&image, 256)?;
    println!(
        "{}x{} image -> {}x{} tiles of 256, crop offset {:?}, {} coded pixels",
        image.height(),
        image.width(),
        grid.rows,
        grid.cols,
        grid.crop_offset,
        grid.cropped_pixels()
    );
    let tokens = patchify(&tiles[0], 16)?;
    println!("one tile = {} tokens of width {}", tokens.nrows(), tokens.ncols());
    assert_eq!(unpatchify(&tokens, 16, 256, 256)?, tiles[0]);
    assert_eq!(reassemble(&grid, &tiles)?, center_crop(&image, &grid)?);
    println!("patchify and tiling round-trip exactly");
    Ok(())
}
