//! Effect of removing one latent query from the decoder context.

use rayon::prelude::*;

use crate::codec::quantized_latent;
use crate::error::{CodecError, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::model::Codec;

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub query: usize,
    /// `(full, ablated)` reconstruction per input tile.
    pub reconstructions: Vec<(ImageTensor, ImageTensor)>,
    /// Per-pixel `|full − ablated|`, averaged over channels and tiles.
    pub error_map: Vec<f64>,
    pub side: usize,
}

impl AblationResult {
    pub fn mean_error(&self) -> f64 {
        self.error_map.iter().sum::<f64>() / self.error_map.len() as f64
    }

    pub fn max_error(&self) -> f64 {
        self.error_map.iter().copied().fold(0.0, f64::max)
    }

    /// Error map as a gray image scaled by its own maximum.
    pub fn render(&self) -> ImageTensor {
        let m = self.max_error();
        let scale = if m > 0.0 { 1.0 / m } else { 0.0 };
        let data = self.error_map.iter().flat_map(|v| [v * scale; 3]).collect();
        ImageTensor::from_clamped(self.side, self.side, data).expect("square map")
    }
}

/// Decodes each tile's rounded latent with and without query `query`.
pub fn query_ablation_study(codec: &Codec, tiles: &[ImageTensor], query: usize) -> Result<AblationResult> {
    if tiles.is_empty() {
        return Err(CodecError::InvalidInput("ablation needs at least one tile".into()));
    }
    let n = codec.config.num_queries;
    if query >= n {
        return Err(CodecError::InvalidInput(format!(
            "query index {query} out of range for {n} queries"
        )));
    }
    let side = codec.config.tile_size;
    let reconstructions = tiles
        .par_iter()
        .map(|t| {
            let latent = quantized_latent(codec, t)?;
            let full = codec.decode(&latent, false)?.0;
            let ablated = codec.decode_ablated(&latent, query)?;
            Ok((full, ablated))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut error_map = vec![0.0; side * side];
    let weight = 1.0 / (CHANNELS * reconstructions.len()) as f64;
    for (full, ablated) in &reconstructions {
        for (i, (a, b)) in full.data().iter().zip(ablated.data()).enumerate() {
            error_map[i / CHANNELS] += (a - b).abs() * weight;
        }
    }
    Ok(AblationResult {
        query,
        reconstructions,
        error_map,
        side,
    })
}

/// [`query_ablation_study`] for every query index.
pub fn ablate_all_queries(codec: &Codec, tiles: &[ImageTensor]) -> Result<Vec<AblationResult>> {
    (0..codec.config.num_queries)
        .map(|q| query_ablation_study(codec, tiles, q))
        .collect()
}
