//! End-to-end image compression: tiling, analysis, rounding, range coding
//! and the inverse path.

use rayon::prelude::*;

use crate::coder::{range_decode, range_encode, Bitstream, BitstreamHeader, SymbolStream, TilePayload};
use crate::entropy::cdf::{build_cdf_tables, check_support, support_for, CdfTables};
use crate::entropy::round;
use crate::error::{CodecError, Result};
use crate::image::ImageTensor;
use crate::model::{hex, Codec};
use crate::patch::{reassemble, tile_image, TileGrid};
use crate::transforms::LatentCode;

#[derive(Clone, Debug, PartialEq)]
pub struct CompressStats {
    pub grid: TileGrid,
    pub file_bytes: usize,
    pub payload_bytes: usize,
    /// Ideal code length of all symbols under the coding tables.
    pub estimated_bits: f64,
}

impl CompressStats {
    pub fn file_bpp(&self) -> f64 {
        bits_per_pixel(self.file_bytes, &self.grid)
    }

    pub fn payload_bpp(&self) -> f64 {
        bits_per_pixel(self.payload_bytes, &self.grid)
    }
}

/// `8 · bytes / cropped pixels`.
pub fn bits_per_pixel(bytes: usize, grid: &TileGrid) -> f64 {
    (8 * bytes) as f64 / grid.cropped_pixels() as f64
}

fn u16_field(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| CodecError::InvalidInput(format!("{what} {v} exceeds 65535")))
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| CodecError::InvalidInput(format!("{what} {v} exceeds 2^32")))
}

/// Round-quantized latent of one tile.
pub fn quantized_latent(codec: &Codec, tile: &ImageTensor) -> Result<LatentCode> {
    round(&codec.encode(tile, false)?.0)
}

struct CodedTile {
    payload: TilePayload,
    bits: f64,
}

fn compress_tile(codec: &Codec, tile: &ImageTensor, side_info: bool) -> Result<CodedTile> {
    let latent = quantized_latent(codec, tile)?;
    let symbols = latent.symbols().expect("rounded latent is quantized");
    let (n_min, n_max) = support_for(&symbols);
    check_support(n_min, n_max, codec.config.max_support)?;
    if n_min < i64::from(i16::MIN) || n_max > i64::from(i16::MAX) {
        return Err(CodecError::Diverged {
            min: n_min,
            max: n_max,
            limit: codec.config.max_support,
        });
    }
    let tables = build_cdf_tables(&codec.prior, n_min, n_max, codec.config.max_support)?;
    let stream = SymbolStream::from_row_major(&symbols, latent.rows(), latent.dim())?;
    let bits = tables.cross_entropy_bits(&stream.symbols, stream.run)?;
    let bytes = range_encode(&stream, &tables)?;
    Ok(CodedTile {
        payload: TilePayload {
            n_min: n_min as i16,
            n_max: n_max as i16,
            tables: side_info.then_some(tables.channels),
            bytes,
        },
        bits,
    })
}

/// Compresses the maximal centered crop of `image`, tiles coded in parallel.
pub fn compress_image(image: &ImageTensor, codec: &Codec, side_info: bool) -> Result<(Bitstream, CompressStats)> {
    let cfg = &codec.config;
    let (grid, tiles) = tile_image(image, cfg.tile_size)?;
    let coded = tiles
        .par_iter()
        .map(|t| compress_tile(codec, t, side_info))
        .collect::<Result<Vec<_>>>()?;
    let estimated_bits = coded.iter().map(|c| c.bits).sum();
    let bitstream = Bitstream {
        header: BitstreamHeader {
            version: crate::coder::bitstream::VERSION,
            side_info,
            image_height: u32_field(grid.image_height, "image height")?,
            image_width: u32_field(grid.image_width, "image width")?,
            tile_size: u16_field(grid.tile_size, "tile size")?,
            rows: u16_field(grid.rows, "tile rows")?,
            cols: u16_field(grid.cols, "tile cols")?,
            crop_offset: (
                u32_field(grid.crop_offset.0, "crop offset")?,
                u32_field(grid.crop_offset.1, "crop offset")?,
            ),
            num_queries: u16_field(cfg.num_queries, "query count")?,
            channels: u16_field(cfg.dim, "latent width")?,
            digest: codec.digest(),
        },
        tiles: coded.into_iter().map(|c| c.payload).collect(),
    };
    let file_bytes = bitstream.to_bytes()?.len();
    let stats = CompressStats {
        grid,
        file_bytes,
        payload_bytes: bitstream.payload_bytes(),
        estimated_bits,
    };
    Ok((bitstream, stats))
}

fn check_compatible(header: &BitstreamHeader, codec: &Codec) -> Result<()> {
    let digest = codec.digest();
    if header.digest != digest {
        return Err(CodecError::DigestMismatch {
            expected: hex(&header.digest),
            found: hex(&digest),
        });
    }
    let cfg = &codec.config;
    if usize::from(header.num_queries) != cfg.num_queries
        || usize::from(header.channels) != cfg.dim
        || usize::from(header.tile_size) != cfg.tile_size
    {
        return Err(CodecError::Format(format!(
            "stream geometry N={} d={} tile={} disagrees with the model",
            header.num_queries, header.channels, header.tile_size
        )));
    }
    Ok(())
}

/// Grid described by a stream header, validated against its image size.
pub fn header_grid(header: &BitstreamHeader) -> Result<TileGrid> {
    let grid = TileGrid::for_image(
        header.image_height as usize,
        header.image_width as usize,
        usize::from(header.tile_size),
    )
    .map_err(|e| CodecError::Format(e.to_string()))?;
    let offset = (header.crop_offset.0 as usize, header.crop_offset.1 as usize);
    if grid.rows != usize::from(header.rows) || grid.cols != usize::from(header.cols) || grid.crop_offset != offset {
        return Err(CodecError::Format("tile grid inconsistent with image size".into()));
    }
    Ok(grid)
}

fn decompress_tile(codec: &Codec, header: &BitstreamHeader, tile: &TilePayload) -> Result<ImageTensor> {
    let (n_min, n_max) = (i64::from(tile.n_min), i64::from(tile.n_max));
    let tables = match &tile.tables {
        Some(channels) => CdfTables {
            n_min,
            n_max,
            channels: channels.clone(),
        },
        None => build_cdf_tables(&codec.prior, n_min, n_max, codec.config.max_support)?,
    };
    let (rows, dim) = (usize::from(header.num_queries), usize::from(header.channels));
    let stream = range_decode(&tile.bytes, &tables, rows * dim, rows)?;
    let latent = LatentCode::from_symbols(rows, dim, &stream.to_row_major())?;
    Ok(codec.decode(&latent, false)?.0)
}

/// Reconstructs the cropped region coded in `bitstream`.
pub fn decompress_image(bitstream: &Bitstream, codec: &Codec) -> Result<ImageTensor> {
    let header = &bitstream.header;
    check_compatible(header, codec)?;
    let grid = header_grid(header)?;
    let tiles = bitstream
        .tiles
        .par_iter()
        .map(|t| decompress_tile(codec, header, t))
        .collect::<Result<Vec<_>>>()?;
    reassemble(&grid, &tiles)
}

/// `decode(round(encode(tile)))` for every tile, reassembled, with no
/// entropy coding in between.
pub fn reconstruct_in_process(image: &ImageTensor, codec: &Codec) -> Result<ImageTensor> {
    let (grid, tiles) = tile_image(image, codec.config.tile_size)?;
    let recon = tiles
        .par_iter()
        .map(|t| Ok(codec.decode(&quantized_latent(codec, t)?, false)?.0))
        .collect::<Result<Vec<_>>>()?;
    reassemble(&grid, &recon)
}
