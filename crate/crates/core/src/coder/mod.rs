//! Range coding and the `.qpf` container.

pub mod bitstream;
pub mod range;

pub use bitstream::{Bitstream, BitstreamHeader, TilePayload};
pub use range::{range_decode, range_encode, RangeDecoder, RangeEncoder, SymbolStream};
