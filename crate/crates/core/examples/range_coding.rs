//! Range-codes a skewed random stream with a static table and compares the
//! output size to the ideal code length.
//!
//! cargo run --release -p qpf --example range_coding -- [symbols]

use qpf::coder::{range_decode, range_encode, SymbolStream};
use qpf::entropy::{quantize_pmf, CdfTables};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> qpf::Result<()> {
    let count: usize = std::env::args().nth(1).map_or(100_000, |s| s.parse().expect("symbol count"));
    let pmf = [0.02, 0.08, 0.5, 0.25, 0.1, 0.05];
    let table = quantize_pmf(&pmf)?;
    let tables = CdfTables {
        n_min: -2,
        n_max: 3,
        channels: vec![table],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dist = WeightedIndex::new(pmf).expect("valid weights");
    let symbols: Vec<i32> = (0..count).map(|_| dist.sample(&mut rng) as i32 - 2).collect();
    let stream = SymbolStream { symbols, run: count };

    let bytes = range_encode(&stream, &tables)?;
    let decoded = range_decode(&bytes, &tables, count, count)?;
    assert_eq!(decoded, stream);
    let ideal = tables.cross_entropy_bits(&stream.symbols, count)?;
    println!(
        "{count} symbols: {} bytes, ideal {:.0} bytes, {:.4} bits/symbol vs {:.4} ideal",
        bytes.len(),
        ideal / 8.0,
        8.0 * bytes.len() as f64 / count as f64,
        ideal / count as f64
    );
    Ok(())
}
