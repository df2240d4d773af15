//! `.qpf` container: a fixed header, a tile directory, then per-tile
//! payloads. All integers are little-endian.
//!
//! ```text
//! offset size  field
//!      0    4  magic "QPF1"
//!      4    1  version (1)
//!      5    1  flags; bit 0 = per-tile CDF tables transmitted
//!      6    4  image height (u32)
//!     10    4  image width (u32)
//!     14    2  tile side (u16)
//!     16    2  tile rows (u16)
//!     18    2  tile cols (u16)
//!     20    4  crop offset y (u32)
//!     24    4  crop offset x (u32)
//!     28    2  latent rows N (u16)
//!     30    2  latent channels d (u16)
//!     32   32  SHA-256 model digest
//!     64  8·T  tile directory, raster order: n_min (i16), n_max (i16),
//!              payload length in bytes (u32)
//!      …       per tile: [tables] payload
//! ```
//!
//! With bit 0 set, each tile's payload is preceded by `d` tables of
//! `n_max − n_min + 1` u16 entries holding `frequency − 1`.

use crate::entropy::cdf::CdfTable;
use crate::error::{CodecError, Result};

pub const MAGIC: &[u8; 4] = b"QPF1";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 64;
pub const DIRECTORY_ENTRY_BYTES: usize = 8;
const FLAG_SIDE_INFO: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub version: u8,
    pub side_info: bool,
    pub image_height: u32,
    pub image_width: u32,
    pub tile_size: u16,
    pub rows: u16,
    pub cols: u16,
    pub crop_offset: (u32, u32),
    pub num_queries: u16,
    pub channels: u16,
    pub digest: [u8; 32],
}

impl BitstreamHeader {
    pub fn tile_count(&self) -> usize {
        usize::from(self.rows) * usize::from(self.cols)
    }

    pub fn symbols_per_tile(&self) -> usize {
        usize::from(self.num_queries) * usize::from(self.channels)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePayload {
    pub n_min: i16,
    pub n_max: i16,
    /// Present exactly when the header's side-info flag is set.
    pub tables: Option<Vec<CdfTable>>,
    pub bytes: Vec<u8>,
}

impl TilePayload {
    pub fn support_len(&self) -> usize {
        (i32::from(self.n_max) - i32::from(self.n_min) + 1).max(0) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub tiles: Vec<TilePayload>,
}

impl Bitstream {
    pub fn payload_bytes(&self) -> usize {
        self.tiles.iter().map(|t| t.bytes.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        if self.tiles.len() != h.tile_count() {
            return Err(CodecError::Format(format!(
                "{} payloads for {} tiles",
                self.tiles.len(),
                h.tile_count()
            )));
        }
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.push(h.version);
        out.push(if h.side_info { FLAG_SIDE_INFO } else { 0 });
        out.extend_from_slice(&h.image_height.to_le_bytes());
        out.extend_from_slice(&h.image_width.to_le_bytes());
        out.extend_from_slice(&h.tile_size.to_le_bytes());
        out.extend_from_slice(&h.rows.to_le_bytes());
        out.extend_from_slice(&h.cols.to_le_bytes());
        out.extend_from_slice(&h.crop_offset.0.to_le_bytes());
        out.extend_from_slice(&h.crop_offset.1.to_le_bytes());
        out.extend_from_slice(&h.num_queries.to_le_bytes());
        out.extend_from_slice(&h.channels.to_le_bytes());
        out.extend_from_slice(&h.digest);
        debug_assert_eq!(out.len(), HEADER_BYTES);

        for t in &self.tiles {
            let len = u32::try_from(t.bytes.len())
                .map_err(|_| CodecError::Format("tile payload exceeds 4 GiB".into()))?;
            out.extend_from_slice(&t.n_min.to_le_bytes());
            out.extend_from_slice(&t.n_max.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
        }
        for t in &self.tiles {
            match (&t.tables, h.side_info) {
                (Some(tables), true) => {
                    if tables.len() != usize::from(h.channels) {
                        return Err(CodecError::Format("side-info table count".into()));
                    }
                    for table in tables {
                        if table.symbols() != t.support_len() {
                            return Err(CodecError::Format("side-info table width".into()));
                        }
                        for f in table.frequencies() {
                            out.extend_from_slice(&((f - 1) as u16).to_le_bytes());
                        }
                    }
                }
                (None, false) => {}
                _ => {
                    return Err(CodecError::Format(
                        "side-info flag disagrees with tile tables".into(),
                    ))
                }
            }
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CodecError::Format("bad magic, not a QPF1 stream".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(CodecError::Format(format!("unsupported version {version}")));
        }
        let flags = r.u8()?;
        if flags & !FLAG_SIDE_INFO != 0 {
            return Err(CodecError::Format(format!("unknown flags {flags:#04x}")));
        }
        let header = BitstreamHeader {
            version,
            side_info: flags & FLAG_SIDE_INFO != 0,
            image_height: r.u32()?,
            image_width: r.u32()?,
            tile_size: r.u16()?,
            rows: r.u16()?,
            cols: r.u16()?,
            crop_offset: (r.u32()?, r.u32()?),
            num_queries: r.u16()?,
            channels: r.u16()?,
            digest: r.take(32)?.try_into().expect("32 bytes"),
        };
        let t = header.tile_count();
        if t == 0 {
            return Err(CodecError::Format("stream holds no tiles".into()));
        }
        let mut directory = Vec::with_capacity(t);
        for _ in 0..t {
            directory.push((r.i16()?, r.i16()?, r.u32()? as usize));
        }
        let mut tiles = Vec::with_capacity(t);
        for (n_min, n_max, len) in directory {
            if n_max < n_min {
                return Err(CodecError::Format(format!("empty support [{n_min}, {n_max}]")));
            }
            let support = (i32::from(n_max) - i32::from(n_min) + 1) as usize;
            let tables = if header.side_info {
                let mut tables = Vec::with_capacity(usize::from(header.channels));
                for _ in 0..header.channels {
                    let mut freqs = Vec::with_capacity(support);
                    for _ in 0..support {
                        freqs.push(u32::from(r.u16()?) + 1);
                    }
                    tables.push(CdfTable::from_frequencies(&freqs)?);
                }
                Some(tables)
            } else {
                None
            };
            tiles.push(TilePayload {
                n_min,
                n_max,
                tables,
                bytes: r.take(len)?.to_vec(),
            });
        }
        if r.pos != bytes.len() {
            return Err(CodecError::Format(format!(
                "{} trailing bytes after the last tile",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { header, tiles })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CodecError::Truncated(format!(
                "needed {n} bytes at offset {}, stream has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
