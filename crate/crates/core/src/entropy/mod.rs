//! Quantization and the factorized-prior entropy model.

pub mod cdf;
pub mod prior;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::Mat;
use crate::transforms::{LatentCode, LatentMode};

pub use cdf::{build_cdf_tables, quantize_pmf, support_for, CdfTable, CdfTables};
pub use prior::{bits_from_likelihood, FactorizedPrior, LIKELIHOOD_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerMode {
    /// Additive `U(−½, ½)` noise, the differentiable training proxy.
    Noise,
    /// Nearest integer, ties to even. Used for coding.
    Round,
}

/// I.i.d. `U(−½, ½)` samples.
pub fn uniform_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-0.5..0.5))
}

pub fn quantize(latent: &LatentCode, mode: QuantizerMode, rng: &mut impl Rng) -> Result<LatentCode> {
    match mode {
        QuantizerMode::Noise => {
            let noise = uniform_noise(latent.rows(), latent.dim(), rng);
            Ok(LatentCode::continuous(latent.values() + &noise))
        }
        QuantizerMode::Round => round(latent),
    }
}

/// Rounds to the nearest integer, ties to even. A latent that is already
/// quantized is returned unchanged.
pub fn round(latent: &LatentCode) -> Result<LatentCode> {
    if latent.mode() == LatentMode::Quantized {
        log::warn!("rounding an already quantized latent; returning it unchanged");
        return Ok(latent.clone());
    }
    LatentCode::quantized(latent.values().mapv(f64::round_ties_even))
}
