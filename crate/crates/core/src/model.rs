//! The full codec: analysis transform, synthesis transform and prior, plus
//! the checkpoint archive.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionRecord;
use crate::config::ModelConfig;
use crate::entropy::FactorizedPrior;
use crate::error::{CodecError, Result};
use crate::image::ImageTensor;
use crate::nn::{join, Mat, Parameters};
use crate::patch::{patchify, unpatchify};
use crate::transforms::{Decoder, Encoder, LatentCode};

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub prior: FactorizedPrior,
}

impl Codec {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config, &mut rng)?;
        let decoder = Decoder::new(&config, &mut rng)?;
        let prior = FactorizedPrior::new(
            config.dim,
            &config.prior_filters,
            config.prior_init_scale,
            &mut rng,
        );
        Ok(Self {
            config,
            encoder,
            decoder,
            prior,
        })
    }

    /// Zeroes every residual branch of every block, turning both transforms
    /// into identities on their query tables.
    pub fn zero_blocks(&mut self) {
        for b in self
            .encoder
            .blocks
            .iter_mut()
            .chain(self.decoder.blocks.iter_mut())
        {
            b.zero_residual_branches();
        }
    }

    fn check_tile(&self, tile: &ImageTensor) -> Result<()> {
        let s = self.config.tile_size;
        if tile.height() != s || tile.width() != s {
            return Err(CodecError::Shape(format!(
                "tile is {}x{}, model expects {s}x{s}",
                tile.height(),
                tile.width()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, latent: &LatentCode) -> Result<()> {
        if latent.rows() != self.config.num_queries || latent.dim() != self.config.dim {
            return Err(CodecError::Shape(format!(
                "latent is {}x{}, model expects {}x{}",
                latent.rows(),
                latent.dim(),
                self.config.num_queries,
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Continuous output queries for one tile, with attention records when
    /// `capture` is set.
    pub fn encode(&self, tile: &ImageTensor, capture: bool) -> Result<(LatentCode, Vec<AttentionRecord>)> {
        self.check_tile(tile)?;
        let patches = patchify(tile, self.config.patch_size)?;
        let (latent, cache) = self.encoder.forward(&patches)?;
        let records = if capture { cache.records() } else { Vec::new() };
        Ok((LatentCode::continuous(latent), records))
    }

    pub fn decode(&self, latent: &LatentCode, capture: bool) -> Result<(ImageTensor, Vec<AttentionRecord>)> {
        self.check_latent(latent)?;
        self.decode_context(latent.values(), capture)
    }

    /// Decodes with latent row `drop_index` removed from the context of
    /// every decoder layer.
    pub fn decode_ablated(&self, latent: &LatentCode, drop_index: usize) -> Result<ImageTensor> {
        self.check_latent(latent)?;
        let reduced = latent.without_row(drop_index)?;
        Ok(self.decode_context(reduced.values(), false)?.0)
    }

    fn decode_context(&self, context: &Mat, capture: bool) -> Result<(ImageTensor, Vec<AttentionRecord>)> {
        let (patches, cache) = self.decoder.forward(context)?;
        let s = self.config.tile_size;
        let image = unpatchify(&patches, self.config.patch_size, s, s)?;
        let records = if capture { cache.records() } else { Vec::new() };
        Ok((image, records))
    }

    /// SHA-256 over the configuration and every parameter tensor.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"qpf-model-v1\0");
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, m) in self.named_parameters() {
            h.update(name.as_bytes());
            h.update([0]);
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Parameters for Codec {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.prior.visit(&join(prefix, "prior"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.prior.visit_mut(&join(prefix, "prior"), f);
    }
}

const ARCHIVE_MAGIC: &[u8; 4] = b"QPCK";
const ARCHIVE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    config: ModelConfig,
    digest: String,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Model weights plus optional extra tensors (optimizer state) and metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub codec: Codec,
    /// Tensors outside the model, e.g. `optim.m.<param>`.
    pub extra: BTreeMap<String, Mat>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(codec: Codec) -> Self {
        Self {
            codec,
            extra: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    /// Archive layout: `"QPCK"`, u32 version, u64 header length, JSON header
    /// (config, digest, metadata, tensor index), then every tensor as
    /// little-endian f64 in index order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors: Vec<(String, &Mat)> = self.codec.named_parameters();
        tensors.extend(self.extra.iter().map(|(n, m)| (n.clone(), m)));
        let header = ArchiveHeader {
            config: self.codec.config.clone(),
            digest: self.codec.digest_hex(),
            meta: self.meta.clone(),
            tensors: tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| CodecError::Serde(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + json.len());
        buf.extend_from_slice(ARCHIVE_MAGIC);
        buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, m) in &tensors {
            for v in m.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| CodecError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CodecError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != ARCHIVE_MAGIC {
            return Err(CodecError::Format("not a QPCK checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != ARCHIVE_VERSION {
            return Err(CodecError::Format(format!("checkpoint version {version}")));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(json_len))
            .ok_or_else(|| CodecError::Truncated("checkpoint header".into()))?;
        let header: ArchiveHeader =
            serde_json::from_slice(json).map_err(|e| CodecError::Serde(e.to_string()))?;
        let mut codec = Codec::new(header.config.clone(), 0)?;
        let mut data = &bytes[16 + json_len..];
        let mut loaded: BTreeMap<String, Mat> = BTreeMap::new();
        for entry in &header.tensors {
            let n = entry.rows * entry.cols;
            if data.len() < n * 8 {
                return Err(CodecError::Truncated(format!("tensor {}", entry.name)));
            }
            let values: Vec<f64> = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[n * 8..];
            let m = Mat::from_shape_vec((entry.rows, entry.cols), values)
                .map_err(|e| CodecError::Shape(e.to_string()))?;
            loaded.insert(entry.name.clone(), m);
        }
        if !data.is_empty() {
            return Err(CodecError::Format("trailing bytes in checkpoint".into()));
        }
        let mut missing = Vec::new();
        let mut shape_err = None;
        codec.visit_mut("", &mut |name, m| match loaded.remove(&name) {
            Some(v) if v.dim() == m.dim() => *m = v,
            Some(v) => {
                shape_err = Some(format!("{name}: stored {:?}, expected {:?}", v.dim(), m.dim()))
            }
            None => missing.push(name),
        });
        if let Some(e) = shape_err {
            return Err(CodecError::Shape(e));
        }
        if !missing.is_empty() {
            return Err(CodecError::Format(format!("missing tensors: {}", missing.join(", "))));
        }
        if codec.digest_hex() != header.digest {
            return Err(CodecError::Format(
                "checkpoint digest does not match its contents".into(),
            ));
        }
        Ok(Self {
            codec,
            extra: loaded,
            meta: header.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn small() -> ModelConfig {
        ModelConfig {
            num_queries: 4,
            dim: 8,
            depth: 1,
            heads: 2,
            ..ModelConfig::toy()
        }
    }

    fn tile(v: f64) -> ImageTensor {
        ImageTensor::filled(256, 256, v).unwrap()
    }

    #[test]
    fn zeroed_encoder_returns_the_query_table() {
        let mut codec = Codec::new(small(), 1).unwrap();
        codec.zero_blocks();
        let (latent, _) = codec.encode(&tile(0.3), false).unwrap();
        assert_eq!(latent.values(), &codec.encoder.queries);
    }

    #[test]
    fn zeroed_decoder_renders_the_prototypes() {
        let cfg = ModelConfig {
            num_queries: 4,
            depth: 1,
            ..ModelConfig::full()
        };
        let mut codec = Codec::new(cfg, 2).unwrap();
        codec.zero_blocks();
        let latent = LatentCode::continuous(Array2::from_elem((4, 768), 1.0));
        let (img, _) = codec.decode(&latent, false).unwrap();
        let expected = unpatchify(&codec.decoder.prototypes, 16, 256, 256).unwrap();
        assert_eq!(img, expected);
    }

    #[test]
    fn shapes_for_full_dims() {
        let cfg = ModelConfig {
            depth: 1,
            ..ModelConfig::full()
        };
        let codec = Codec::new(cfg, 3).unwrap();
        let (latent, rec) = codec.encode(&tile(0.5), true).unwrap();
        assert_eq!((latent.rows(), latent.dim()), (64, 768));
        assert_eq!(rec.len(), 2 * 12);
        let (img, _) = codec.decode(&latent, false).unwrap();
        assert_eq!((img.height(), img.width()), (256, 256));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn shape_errors() {
        let codec = Codec::new(small(), 4).unwrap();
        assert!(codec.encode(&ImageTensor::filled(128, 256, 0.1).unwrap(), false).is_err());
        let wrong = LatentCode::continuous(Array2::zeros((3, 8)));
        assert!(codec.decode(&wrong, false).is_err());
    }

    #[test]
    fn ablation_guards() {
        let cfg = ModelConfig {
            num_queries: 1,
            ..small()
        };
        let codec = Codec::new(cfg, 5).unwrap();
        let latent = LatentCode::continuous(Array2::zeros((1, 8)));
        assert!(codec.decode_ablated(&latent, 0).is_err());
        let codec = Codec::new(small(), 5).unwrap();
        let latent = LatentCode::continuous(Array2::zeros((4, 8)));
        assert!(codec.decode_ablated(&latent, 4).is_err());
        assert!(codec.decode_ablated(&latent, 3).is_ok());
    }

    #[test]
    fn encode_is_deterministic() {
        let a = Codec::new(small(), 6).unwrap();
        let b = Codec::new(small(), 6).unwrap();
        assert_eq!(a, b);
        let t = tile(0.7);
        assert_eq!(a.encode(&t, false).unwrap().0, b.encode(&t, false).unwrap().0);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), Codec::new(small(), 7).unwrap().digest());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qpck");
        let mut ck = Checkpoint::new(Codec::new(small(), 8).unwrap());
        ck.extra.insert("optim.m.x".into(), Array2::from_elem((2, 3), 0.25));
        ck.meta.insert("step".into(), serde_json::json!(17));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.codec, ck.codec);
        assert_eq!(back.extra, ck.extra);
        assert_eq!(back.meta["step"], 17);

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 100] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..n - 8]).is_err());
    }
}
