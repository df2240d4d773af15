//! Inspects a freshly initialized factorized prior: per-channel mass on a
//! few integers, the quantized coding table and the rate of a latent.

use qpf::entropy::{quantize_pmf, FactorizedPrior};
use qpf::nn::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> qpf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prior = FactorizedPrior::new(4, &[3, 3, 3], 10.0, &mut rng);
    for c in 0..prior.channels() {
        let pmf = prior.pmf(c, -3, 3);
        let table = quantize_pmf(&pmf)?;
        let masses: Vec<String> = pmf.iter().map(|p| format!("{p:.3}")).collect();
        println!("channel {c}: P(-3..=3) = [{}], table {:?}", masses.join(", "), table.frequencies());
    }
    let latent = Mat::from_shape_fn((8, 4), |(i, j)| (i as f64 - 3.5) * 0.5 + j as f64 * 0.1);
    println!("rate of an 8x4 latent: {:.2} bits", prior.rate_bits(&latent)?);
    Ok(())
}
