//! Image/token conversion and the tiling protocol.
//!
//! A tile of side `S` split into `P×P` patches yields `(S/P)²` tokens of
//! `P·P·3` components. Tokens are in raster order over the patch grid; inside
//! a token the pixels are row-major with the channel innermost. This layout is
//! frozen: checkpoints and bitstreams depend on it.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};
use crate::image::{ImageTensor, CHANNELS};

pub const SUPPORTED_PATCH_SIZES: [usize; 3] = [8, 16, 32];

pub fn patch_dim(patch_size: usize) -> usize {
    patch_size * patch_size * CHANNELS
}

pub fn patchify(image: &ImageTensor, patch_size: usize) -> Result<Array2<f64>> {
    patchify_raw(image.data(), image.height(), image.width(), patch_size)
}

/// [`patchify`] over an interleaved `h × w × 3` buffer with unrestricted
/// values.
pub fn patchify_raw(data: &[f64], h: usize, w: usize, patch_size: usize) -> Result<Array2<f64>> {
    if patch_size == 0 || !h.is_multiple_of(patch_size) || !w.is_multiple_of(patch_size) {
        return Err(CodecError::InvalidInput(format!(
            "{h}x{w} image is not divisible into {patch_size}x{patch_size} patches"
        )));
    }
    if data.len() != h * w * CHANNELS {
        return Err(CodecError::Shape(format!(
            "{} values for a {h}x{w} image",
            data.len()
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let row = patch_size * CHANNELS;
    let mut tokens = Array2::zeros((gh * gw, patch_dim(patch_size)));
    for (t, mut token) in tokens.outer_iter_mut().enumerate() {
        let (py, px) = (t / gw, t % gw);
        let token = token.as_slice_mut().expect("standard layout");
        for dy in 0..patch_size {
            let start = ((py * patch_size + dy) * w + px * patch_size) * CHANNELS;
            token[dy * row..(dy + 1) * row].copy_from_slice(&data[start..start + row]);
        }
    }
    Ok(tokens)
}

/// Inverse of [`patchify`] without clamping; values may leave `[0, 1]`.
pub fn unpatchify_raw(
    tokens: &Array2<f64>,
    patch_size: usize,
    height: usize,
    width: usize,
) -> Result<Vec<f64>> {
    let expected_len = (height / patch_size) * (width / patch_size);
    if !height.is_multiple_of(patch_size)
        || !width.is_multiple_of(patch_size)
        || tokens.nrows() != expected_len
        || tokens.ncols() != patch_dim(patch_size)
    {
        return Err(CodecError::Shape(format!(
            "{}x{} tokens cannot form a {height}x{width} image with {patch_size}px patches",
            tokens.nrows(),
            tokens.ncols()
        )));
    }
    let gw = width / patch_size;
    let row = patch_size * CHANNELS;
    let mut data = vec![0.0; height * width * CHANNELS];
    for (t, token) in tokens.outer_iter().enumerate() {
        let (py, px) = (t / gw, t % gw);
        for dy in 0..patch_size {
            let start = ((py * patch_size + dy) * width + px * patch_size) * CHANNELS;
            for (k, v) in data[start..start + row].iter_mut().enumerate() {
                *v = token[dy * row + k];
            }
        }
    }
    Ok(data)
}

/// Reassembles tokens into an image, clamping every value to `[0, 1]`.
pub fn unpatchify(
    tokens: &Array2<f64>,
    patch_size: usize,
    height: usize,
    width: usize,
) -> Result<ImageTensor> {
    let data = unpatchify_raw(tokens, patch_size, height, width)?;
    ImageTensor::from_clamped(height, width, data)
}

/// Adds `table[i]` to token `i`.
pub fn add_positional_encoding(tokens: &Array2<f64>, table: &Array2<f64>) -> Result<Array2<f64>> {
    if table.nrows() < tokens.nrows() {
        return Err(CodecError::Config(format!(
            "position table has {} rows, sequence has {}",
            table.nrows(),
            tokens.nrows()
        )));
    }
    if table.ncols() != tokens.ncols() {
        return Err(CodecError::Config(format!(
            "position table width {} does not match token width {}",
            table.ncols(),
            tokens.ncols()
        )));
    }
    Ok(tokens + &table.slice(ndarray::s![..tokens.nrows(), ..]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// `(y, x)` of the top-left corner of the centered crop.
    pub crop_offset: (usize, usize),
    pub image_height: usize,
    pub image_width: usize,
}

impl TileGrid {
    pub fn for_image(height: usize, width: usize, tile_size: usize) -> Result<Self> {
        if height < tile_size || width < tile_size {
            return Err(CodecError::InvalidInput(format!(
                "image is {height}x{width}, smaller than one {tile_size}x{tile_size} tile"
            )));
        }
        let rows = height / tile_size;
        let cols = width / tile_size;
        Ok(Self {
            tile_size,
            rows,
            cols,
            crop_offset: (
                (height - rows * tile_size) / 2,
                (width - cols * tile_size) / 2,
            ),
            image_height: height,
            image_width: width,
        })
    }

    pub fn tile_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cropped_height(&self) -> usize {
        self.rows * self.tile_size
    }

    pub fn cropped_width(&self) -> usize {
        self.cols * self.tile_size
    }

    pub fn cropped_pixels(&self) -> usize {
        self.cropped_height() * self.cropped_width()
    }
}

pub fn center_crop(image: &ImageTensor, grid: &TileGrid) -> Result<ImageTensor> {
    image.crop(
        grid.crop_offset.0,
        grid.crop_offset.1,
        grid.cropped_height(),
        grid.cropped_width(),
    )
}

/// Splits the maximal centered crop into tiles in raster order.
pub fn tile_image(image: &ImageTensor, tile_size: usize) -> Result<(TileGrid, Vec<ImageTensor>)> {
    let grid = TileGrid::for_image(image.height(), image.width(), tile_size)?;
    let (oy, ox) = grid.crop_offset;
    let mut tiles = Vec::with_capacity(grid.tile_count());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            tiles.push(image.crop(oy + r * tile_size, ox + c * tile_size, tile_size, tile_size)?);
        }
    }
    Ok((grid, tiles))
}

/// Inverse of [`tile_image`]: rebuilds the cropped region.
pub fn reassemble(grid: &TileGrid, tiles: &[ImageTensor]) -> Result<ImageTensor> {
    if tiles.len() != grid.tile_count() {
        return Err(CodecError::Shape(format!(
            "{} tiles for a {}x{} grid",
            tiles.len(),
            grid.rows,
            grid.cols
        )));
    }
    let (h, w, s) = (grid.cropped_height(), grid.cropped_width(), grid.tile_size);
    let mut data = vec![0.0; h * w * CHANNELS];
    for (i, tile) in tiles.iter().enumerate() {
        if tile.height() != s || tile.width() != s {
            return Err(CodecError::Shape(format!(
                "tile {i} is {}x{}, expected {s}x{s}",
                tile.height(),
                tile.width()
            )));
        }
        let (r, c) = (i / grid.cols, i % grid.cols);
        for y in 0..s {
            let dst = ((r * s + y) * w + c * s) * CHANNELS;
            let src = tile.index(y, 0, 0);
            data[dst..dst + s * CHANNELS].copy_from_slice(&tile.data()[src..src + s * CHANNELS]);
        }
    }
    ImageTensor::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let data = (0..h * w * 3).map(|i| ((i * 37) % 251) as f64 / 250.0).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn full_tile_gives_256_tokens_of_768() {
        let tokens = patchify(&ramp(256, 256), 16).unwrap();
        assert_eq!(tokens.dim(), (256, 768));
    }

    #[test]
    fn token_layout_is_raster_row_major_channel_inner() {
        let img = ramp(32, 48);
        let tokens = patchify(&img, 16).unwrap();
        // token 4 = patch row 1, patch col 1; component for pixel (dy=2, dx=5, c=1)
        assert_eq!(tokens[[4, (2 * 16 + 5) * 3 + 1]], img.get(16 + 2, 16 + 5, 1));
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let tokens = patchify(&ImageTensor::filled(256, 256, 0.5).unwrap(), 16).unwrap();
        assert!(tokens.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let err = patchify(&ramp(40, 32), 16).unwrap_err();
        assert!(matches!(err, CodecError::InvalidInput(_)));
    }

    #[test]
    fn unpatchify_checks_shape_and_clamps() {
        assert!(unpatchify(&Array2::zeros((255, 768)), 16, 256, 256).is_err());
        assert!(unpatchify(&Array2::zeros((256, 700)), 16, 256, 256).is_err());
        let black = unpatchify(&Array2::zeros((256, 768)), 16, 256, 256).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
        let mut t = Array2::from_elem((256, 768), 3.0);
        t[[0, 0]] = -1.0;
        let img = unpatchify(&t, 16, 256, 256).unwrap();
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(255, 255, 2), 1.0);
    }

    #[test]
    fn positional_encoding_contract() {
        let tokens = Array2::from_shape_fn((256, 768), |(i, j)| (i + j) as f64 * 1e-3);
        let zero = Array2::zeros((256, 768));
        assert_eq!(add_positional_encoding(&tokens, &zero).unwrap(), tokens);
        let table = Array2::from_shape_fn((300, 768), |(i, j)| (i * j) as f64 * 1e-4);
        assert_eq!(
            add_positional_encoding(&tokens, &table).unwrap().dim(),
            (256, 768)
        );
        let short = Array2::zeros((10, 768));
        assert!(matches!(
            add_positional_encoding(&tokens, &short),
            Err(CodecError::Config(_))
        ));
    }

    #[test]
    fn positional_encoding_is_local() {
        let table = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let a = Array2::from_shape_fn((4, 3), |(i, _)| i as f64);
        let mut b = a.clone();
        b.row_mut(2).fill(9.0);
        let ea = add_positional_encoding(&a, &table).unwrap();
        let eb = add_positional_encoding(&b, &table).unwrap();
        for i in 0..4 {
            assert_eq!(ea.row(i) == eb.row(i), i != 2);
        }
    }

    #[test]
    fn tile_grids() {
        let g = TileGrid::for_image(512, 768, 256).unwrap();
        assert_eq!((g.rows, g.cols, g.crop_offset), (2, 3, (0, 0)));
        let g = TileGrid::for_image(300, 300, 256).unwrap();
        assert_eq!((g.rows, g.cols, g.crop_offset), (1, 1, (22, 22)));
        let g = TileGrid::for_image(768, 512, 256).unwrap();
        assert_eq!((g.rows, g.cols), (3, 2));
        let err = TileGrid::for_image(255, 1000, 256).unwrap_err();
        assert!(err.to_string().contains("smaller than one"));
    }

    #[test]
    fn swapping_patches_swaps_tokens() {
        let img = ramp(64, 64);
        let mut data = img.data().to_vec();
        // swap patch (0,0) with patch (1,2) of the 16px grid
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    let a = img.index(y, x, c);
                    let b = img.index(16 + y, 32 + x, c);
                    data.swap(a, b);
                }
            }
        }
        let swapped = ImageTensor::new(64, 64, data).unwrap();
        let t0 = patchify(&img, 16).unwrap();
        let t1 = patchify(&swapped, 16).unwrap();
        for i in 0..16 {
            let j = match i {
                0 => 6,
                6 => 0,
                k => k,
            };
            assert_eq!(t0.row(i), t1.row(j));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn patch_round_trip_is_exact(
            gh in 1usize..5, gw in 1usize..5, ps_idx in 0usize..3, seed in any::<u64>()
        ) {
            let ps = SUPPORTED_PATCH_SIZES[ps_idx];
            let (h, w) = ((gh * ps).max(16), (gw * ps).max(16));
            let (h, w) = (h - h % ps, w - w % ps);
            let data = (0..h * w * 3)
                .map(|i| ((i as u64).wrapping_mul(seed | 1) >> 7) as f64 % 256.0 / 255.0)
                .collect();
            let img = ImageTensor::new(h, w, data).unwrap();
            let tokens = patchify(&img, ps).unwrap();
            let back = unpatchify(&tokens, ps, h, w).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(patchify(&back, ps).unwrap(), tokens);
        }

        #[test]
        fn tiling_is_lossless_on_the_crop(h in 256usize..700, w in 256usize..700) {
            let img = ramp(h, w);
            let (grid, tiles) = tile_image(&img, 256).unwrap();
            prop_assert_eq!(tiles.len(), (h / 256) * (w / 256));
            prop_assert_eq!(grid.crop_offset, ((h % 256) / 2, (w % 256) / 2));
            prop_assert_eq!(reassemble(&grid, &tiles).unwrap(), center_crop(&img, &grid).unwrap());
        }
    }
}
