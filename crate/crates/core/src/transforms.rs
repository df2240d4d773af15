//! Analysis transform (learned image queries aggregating patch tokens) and
//! synthesis transform (learned patch prototypes aggregating the latent).
//!
//! Both operate on token matrices; image-level entry points live on
//! [`crate::model::Codec`].

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRecord, BlockCache, DecoderBlock, Stage};
use crate::config::ModelConfig;
use crate::error::{CodecError, Result};
use crate::nn::{gaussian, join, Linear, Mat, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentMode {
    Continuous,
    Quantized,
}

/// Output queries of the encoder, `N × d`, row-major (query-major).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    values: Mat,
    mode: LatentMode,
}

impl LatentCode {
    pub fn continuous(values: Mat) -> Self {
        Self {
            values,
            mode: LatentMode::Continuous,
        }
    }

    /// Wraps integer-valued data; every entry must be an integer in `i32`
    /// range.
    pub fn quantized(values: Mat) -> Result<Self> {
        if let Some(v) = values
            .iter()
            .find(|v| v.fract() != 0.0 || **v < i32::MIN as f64 || **v > i32::MAX as f64)
        {
            return Err(CodecError::InvalidInput(format!(
                "quantized latent holds non-integer or out-of-range value {v}"
            )));
        }
        Ok(Self {
            values,
            mode: LatentMode::Quantized,
        })
    }

    pub fn from_symbols(rows: usize, dim: usize, symbols: &[i32]) -> Result<Self> {
        let values = Array2::from_shape_vec((rows, dim), symbols.iter().map(|&s| s as f64).collect())
            .map_err(|e| CodecError::Shape(e.to_string()))?;
        Ok(Self {
            values,
            mode: LatentMode::Quantized,
        })
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn into_values(self) -> Mat {
        self.values
    }

    pub fn mode(&self) -> LatentMode {
        self.mode
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Integer symbols in row-major order; `None` for continuous latents.
    pub fn symbols(&self) -> Option<Vec<i32>> {
        (self.mode == LatentMode::Quantized).then(|| self.values.iter().map(|&v| v as i32).collect())
    }

    /// Copy with row `index` removed.
    pub fn without_row(&self, index: usize) -> Result<LatentCode> {
        if index >= self.rows() {
            return Err(CodecError::InvalidInput(format!(
                "query index {index} out of range for {} queries",
                self.rows()
            )));
        }
        let keep: Vec<usize> = (0..self.rows()).filter(|&i| i != index).collect();
        Ok(Self {
            values: self.values.select(Axis(0), &keep),
            mode: self.mode,
        })
    }
}

fn new_blocks(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Vec<DecoderBlock>> {
    (0..cfg.depth)
        .map(|_| {
            DecoderBlock::new(
                cfg.dim,
                cfg.heads,
                cfg.ffw_mult,
                cfg.norm,
                cfg.attention_scale,
                rng,
            )
        })
        .collect()
}

fn records(caches: &[BlockCache], stage: Stage) -> Vec<AttentionRecord> {
    caches
        .iter()
        .enumerate()
        .flat_map(|(layer, c)| c.records(stage, layer))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    /// Raw patch → token projection; absent when tokens are raw patches.
    pub patch_embed: Option<Linear>,
    /// Learned positional table, one row per patch index.
    pub positions: Mat,
    /// Learned image queries, `N × d`.
    pub queries: Mat,
    pub blocks: Vec<DecoderBlock>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    patches: Mat,
    blocks: Vec<BlockCache>,
}

impl EncoderCache {
    pub fn records(&self) -> Vec<AttentionRecord> {
        records(&self.blocks, Stage::Encoder)
    }
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = cfg
            .project_patches
            .then(|| Linear::new(cfg.patch_dim(), cfg.dim, rng));
        Ok(Self {
            patch_embed,
            positions: gaussian(cfg.patches_per_tile(), cfg.dim, cfg.init_std, rng),
            queries: gaussian(cfg.num_queries, cfg.dim, cfg.init_std, rng),
            blocks: new_blocks(cfg, rng)?,
        })
    }

    /// Patch tokens plus positional encodings, the context of every block.
    pub fn embed(&self, patches: &Mat) -> Result<Mat> {
        let tokens = match &self.patch_embed {
            Some(p) => {
                if patches.ncols() != p.input_dim() {
                    return Err(CodecError::Shape(format!(
                        "patch width {} but embedding expects {}",
                        patches.ncols(),
                        p.input_dim()
                    )));
                }
                p.forward(patches)
            }
            None => patches.clone(),
        };
        crate::patch::add_positional_encoding(&tokens, &self.positions)
    }

    pub fn forward(&self, patches: &Mat) -> Result<(Mat, EncoderCache)> {
        let context = self.embed(patches)?;
        let mut q = self.queries.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&q, &context)?;
            q = next;
            caches.push(cache);
        }
        Ok((
            q,
            EncoderCache {
                patches: patches.clone(),
                blocks: caches,
            },
        ))
    }

    pub fn backward(&self, cache: &EncoderCache, d_latent: &Mat, grad: &mut Encoder) {
        let mut dq = d_latent.clone();
        let mut d_context = Array2::zeros(self.positions.raw_dim());
        for ((block, bc), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            let (dx, dc) = block.backward(bc, &dq, g);
            dq = dx;
            d_context += &dc;
        }
        grad.queries += &dq;
        grad.positions += &d_context;
        if let (Some(p), Some(gp)) = (&self.patch_embed, grad.patch_embed.as_mut()) {
            p.backward(&cache.patches, &d_context, gp);
        }
    }
}

impl Parameters for Encoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        if let Some(p) = &self.patch_embed {
            p.visit(&join(prefix, "patch_embed"), f);
        }
        f(join(prefix, "positions"), &self.positions);
        f(join(prefix, "queries"), &self.queries);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        if let Some(p) = &mut self.patch_embed {
            p.visit_mut(&join(prefix, "patch_embed"), f);
        }
        f(join(prefix, "positions"), &mut self.positions);
        f(join(prefix, "queries"), &mut self.queries);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    /// Learned patch prototypes, one query per output patch.
    pub prototypes: Mat,
    pub blocks: Vec<DecoderBlock>,
    /// Token → raw patch projection; absent when tokens are raw patches.
    pub head: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    blocks: Vec<BlockCache>,
    hidden: Mat,
}

impl DecoderCache {
    pub fn records(&self) -> Vec<AttentionRecord> {
        records(&self.blocks, Stage::Decoder)
    }
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let prototypes = gaussian(cfg.patches_per_tile(), cfg.dim, cfg.init_std, rng);
        let blocks = new_blocks(cfg, rng)?;
        let head = cfg
            .project_patches
            .then(|| Linear::new(cfg.dim, cfg.patch_dim(), rng));
        Ok(Self {
            prototypes,
            blocks,
            head,
        })
    }

    /// Raw (unclamped) patch values for a latent context.
    pub fn forward(&self, latent: &Mat) -> Result<(Mat, DecoderCache)> {
        if latent.nrows() == 0 {
            return Err(CodecError::InvalidInput(
                "cannot decode against an empty latent".into(),
            ));
        }
        if latent.ncols() != self.prototypes.ncols() {
            return Err(CodecError::Shape(format!(
                "latent width {} but decoder width {}",
                latent.ncols(),
                self.prototypes.ncols()
            )));
        }
        let mut q = self.prototypes.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&q, latent)?;
            q = next;
            caches.push(cache);
        }
        let out = match &self.head {
            Some(h) => h.forward(&q),
            None => q.clone(),
        };
        Ok((
            out,
            DecoderCache {
                blocks: caches,
                hidden: q,
            },
        ))
    }

    /// Returns the gradient w.r.t. the latent.
    pub fn backward(&self, cache: &DecoderCache, d_patches: &Mat, grad: &mut Decoder) -> Mat {
        let mut dq = match (&self.head, grad.head.as_mut()) {
            (Some(h), Some(gh)) => h.backward(&cache.hidden, d_patches, gh),
            _ => d_patches.clone(),
        };
        let mut d_latent: Option<Mat> = None;
        for ((block, bc), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            let (dx, dc) = block.backward(bc, &dq, g);
            dq = dx;
            match &mut d_latent {
                Some(acc) => *acc += &dc,
                None => d_latent = Some(dc),
            }
        }
        grad.prototypes += &dq;
        d_latent.expect("at least one block")
    }
}

impl Parameters for Decoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        f(join(prefix, "prototypes"), &self.prototypes);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(h) = &self.head {
            h.visit(&join(prefix, "head"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        f(join(prefix, "prototypes"), &mut self.prototypes);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(h) = &mut self.head {
            h.visit_mut(&join(prefix, "head"), f);
        }
    }
}
