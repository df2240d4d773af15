//! Model, loss and training configuration, loadable from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{check_heads, NormMode};
use crate::error::{CodecError, Result};
use crate::patch::{patch_dim, SUPPORTED_PATCH_SIZES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub tile_size: usize,
    pub patch_size: usize,
    /// Number of learned image queries (latent rows).
    pub num_queries: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `dim`.
    pub ffw_mult: usize,
    pub norm: NormMode,
    /// Attention logit scale. `None` means `1/√(dim/heads)`.
    pub attention_scale: Option<f64>,
    /// Learned linear maps between raw patches and `dim`-wide tokens. When
    /// disabled, `dim` must equal the flattened patch size.
    pub project_patches: bool,
    /// Std of the Gaussian init for queries, prototypes and positions.
    pub init_std: f64,
    /// Hidden widths of the per-channel cumulative density network.
    pub prior_filters: Vec<usize>,
    pub prior_init_scale: f64,
    /// Widest symbol support accepted when building coding tables.
    pub max_support: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// 16px patches on 256px tiles, 64 queries of width 768, 12 heads,
    /// depth 12.
    pub fn full() -> Self {
        Self {
            tile_size: 256,
            patch_size: 16,
            num_queries: 64,
            dim: 768,
            depth: 12,
            heads: 12,
            ffw_mult: 4,
            norm: NormMode::Pre,
            attention_scale: None,
            project_patches: false,
            init_std: 0.02,
            prior_filters: vec![3, 3, 3],
            prior_init_scale: 10.0,
            max_support: 4096,
        }
    }

    /// Desk-scale profile: 4 queries of width 32, two heads, depth 2.
    pub fn toy() -> Self {
        Self {
            num_queries: 4,
            dim: 32,
            depth: 2,
            heads: 2,
            project_patches: true,
            init_std: 1.0,
            ..Self::full()
        }
    }

    pub fn patch_dim(&self) -> usize {
        patch_dim(self.patch_size)
    }

    pub fn grid_side(&self) -> usize {
        self.tile_size / self.patch_size
    }

    pub fn patches_per_tile(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_PATCH_SIZES.contains(&self.patch_size) {
            return Err(CodecError::Config(format!(
                "patch size {} not in {:?}",
                self.patch_size, SUPPORTED_PATCH_SIZES
            )));
        }
        if self.tile_size == 0 || !self.tile_size.is_multiple_of(self.patch_size) {
            return Err(CodecError::Config(format!(
                "tile size {} is not a multiple of the patch size {}",
                self.tile_size, self.patch_size
            )));
        }
        if self.tile_size > u16::MAX as usize {
            return Err(CodecError::Config("tile size exceeds 65535".into()));
        }
        if self.num_queries == 0 || self.num_queries > u16::MAX as usize {
            return Err(CodecError::Config(format!(
                "query count {} outside 1..=65535",
                self.num_queries
            )));
        }
        if self.dim == 0 || self.dim > u16::MAX as usize {
            return Err(CodecError::Config(format!("dimension {} outside 1..=65535", self.dim)));
        }
        if self.depth == 0 {
            return Err(CodecError::Config("depth must be at least 1".into()));
        }
        if self.ffw_mult == 0 {
            return Err(CodecError::Config("ffw_mult must be at least 1".into()));
        }
        check_heads(self.dim, self.heads)?;
        if !self.project_patches && self.dim != self.patch_dim() {
            return Err(CodecError::Config(format!(
                "without patch projection the dimension must equal the patch size {} (got {})",
                self.patch_dim(),
                self.dim
            )));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(CodecError::Config("init_std must be finite and >= 0".into()));
        }
        if self.prior_filters.contains(&0) {
            return Err(CodecError::Config("prior filter widths must be positive".into()));
        }
        if !(self.prior_init_scale.is_finite() && self.prior_init_scale > 0.0) {
            return Err(CodecError::Config("prior_init_scale must be positive".into()));
        }
        if self.max_support == 0 || self.max_support > 1 << 16 {
            return Err(CodecError::Config(format!(
                "max_support {} outside 1..=65536",
                self.max_support
            )));
        }
        if let Some(s) = self.attention_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(CodecError::Config("attention_scale must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistortionKind {
    #[default]
    Mse,
    /// Feature-network distance; needs `perceptual_weights`.
    Perceptual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdLossConfig {
    /// Weight of the distortion term against the rate in bits per pixel.
    pub lambda: f64,
    pub distortion: DistortionKind,
    pub perceptual_weights: Option<PathBuf>,
    /// Both images are bilinearly resized to this side before the
    /// perceptual metric.
    pub perceptual_upscale: usize,
}

impl Default for RdLossConfig {
    fn default() -> Self {
        Self::mse()
    }
}

impl RdLossConfig {
    pub fn mse() -> Self {
        Self {
            lambda: 0.01,
            distortion: DistortionKind::Mse,
            perceptual_weights: None,
            perceptual_upscale: 512,
        }
    }

    pub fn perceptual(weights: impl Into<PathBuf>) -> Self {
        Self {
            lambda: 130.0,
            distortion: DistortionKind::Perceptual,
            perceptual_weights: Some(weights.into()),
            perceptual_upscale: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(CodecError::Config(format!("lambda must be > 0 (got {})", self.lambda)));
        }
        if self.distortion == DistortionKind::Perceptual && self.perceptual_weights.is_none() {
            return Err(CodecError::Config(
                "perceptual distortion requires perceptual_weights".into(),
            ));
        }
        if self.perceptual_upscale < 16 {
            return Err(CodecError::Config("perceptual_upscale must be >= 16".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only the final one).
    pub checkpoint_every: usize,
    /// Random horizontal flips of training crops.
    pub flip: bool,
}


impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            steps: 100_000,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 5_000,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CodecError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(CodecError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizConfig {
    pub colormap: crate::analysis::Colormap,
    /// Heatmap weight when blended over the tile.
    pub overlay_alpha: f64,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self {
            colormap: crate::analysis::Colormap::default(),
            overlay_alpha: 0.6,
        }
    }
}

/// Everything a run needs; one TOML file with `[model]`, `[loss]`, `[train]`
/// and `[viz]` tables, each optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: RdLossConfig,
    pub train: TrainConfig,
    pub viz: VizConfig,
}

impl RunConfig {
    /// Toy profile used for desk-scale experiments and the acceptance suite.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            loss: RdLossConfig {
                lambda: 1000.0,
                ..RdLossConfig::mse()
            },
            train: TrainConfig {
                learning_rate: 2e-2,
                steps: 2000,
                batch_size: 1,
                seed: 7,
                checkpoint_every: 0,
                flip: false,
            },
            viz: VizConfig::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CodecError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CodecError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.viz.overlay_alpha) {
            return Err(CodecError::Config("overlay_alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        RunConfig::toy().validate().unwrap();
        assert_eq!(ModelConfig::full().patches_per_tile(), 256);
        assert_eq!(ModelConfig::full().patch_dim(), 768);
    }

    #[test]
    fn rejects_bad_models() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::toy();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.heads = 3));
        assert!(bad(|c| c.patch_size = 12));
        assert!(bad(|c| c.project_patches = false));
        assert!(bad(|c| c.num_queries = 0));
        assert!(bad(|c| c.max_support = 70_000));
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = RunConfig::toy();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("[model]\ndim = 64\nheads = 4\nproject_patches = true\n")
            .unwrap();
        assert_eq!(partial.model.dim, 64);
        assert_eq!(partial.model.num_queries, 64);
        assert_eq!(partial.train.learning_rate, 1e-4);
        assert!(RunConfig::from_toml("[model]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[loss]\nlambda = -1.0\n").is_err());
    }
}
