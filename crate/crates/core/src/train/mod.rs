//! Rate-distortion training.

pub mod dataset;
pub mod loss;
pub mod optim;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DistortionKind, RunConfig};
use crate::entropy::uniform_noise;
use crate::error::{CodecError, Result};
use crate::image::ImageTensor;
use crate::model::{Checkpoint, Codec};
use crate::nn::{Mat, Parameters};
use crate::perceptual::FeatureNet;

pub use dataset::Dataset;
pub use loss::{rd_loss, Distortion, LossTerms};
pub use optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub terms: LossTerms,
}

pub const METRICS_HEADER: &str = "step,loss,rate_bits,bpp,distortion";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let t = &self.terms;
        format!("{},{:.10e},{:.10e},{:.10e},{:.10e}", self.step, t.loss, t.rate_bits, t.bpp, t.distortion)
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Final checkpoint; periodic ones go next to it as `<stem>.step<N>.qpck`.
    pub checkpoint: PathBuf,
    /// Appended to on resume.
    pub metrics_csv: Option<PathBuf>,
}

impl TrainOutput {
    pub fn periodic_path(&self, step: u64) -> PathBuf {
        let stem = self
            .checkpoint
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("checkpoint");
        self.checkpoint.with_file_name(format!("{stem}.step{step:07}.qpck"))
    }
}

pub struct Trainer {
    pub run: RunConfig,
    pub codec: Codec,
    adam: Adam,
    backend: Option<FeatureNet>,
    step: u64,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let codec = Codec::new(run.model.clone(), run.train.seed)?;
        Self::with_codec(run, codec)
    }

    pub fn with_codec(run: RunConfig, codec: Codec) -> Result<Self> {
        let backend = match run.loss.distortion {
            DistortionKind::Mse => None,
            DistortionKind::Perceptual => {
                let path = run.loss.perceptual_weights.as_ref().ok_or_else(|| {
                    CodecError::Config("perceptual distortion requires perceptual_weights".into())
                })?;
                Some(FeatureNet::load(path)?)
            }
        };
        let adam = Adam::new(run.train.learning_rate, &codec);
        Ok(Self {
            run,
            codec,
            adam,
            backend,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(run: RunConfig, ck: Checkpoint) -> Result<Self> {
        if ck.codec.config != run.model {
            return Err(CodecError::Config(
                "checkpoint model configuration differs from the run configuration".into(),
            ));
        }
        let step = ck.meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut t = Self::with_codec(run, ck.codec)?;
        if step > 0 {
            t.adam.restore(&t.codec, &ck.extra)?;
        }
        t.step = step;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn distortion(&self) -> Distortion<'_> {
        match &self.backend {
            None => Distortion::Mse,
            Some(net) => Distortion::Perceptual {
                backend: net,
                side: self.run.loss.perceptual_upscale,
            },
        }
    }

    /// Independent random stream for step `step`, so that a resumed run
    /// draws exactly what an uninterrupted one would.
    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.run.train.seed);
        rng.set_stream(step);
        rng
    }

    /// Batch and noise drawn for `step`.
    pub fn draw(&self, data: &Dataset, step: u64) -> (Vec<ImageTensor>, Vec<Mat>) {
        let mut rng = self.step_rng(step);
        let images = data.batch(self.run.train.batch_size, &mut rng);
        let cfg = &self.codec.config;
        let noise = images
            .iter()
            .map(|_| uniform_noise(cfg.num_queries, cfg.dim, &mut rng))
            .collect();
        (images, noise)
    }

    /// One Adam update. The returned loss is measured before the update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        let (images, noise) = self.draw(data, self.step);
        let mut grad = self.codec.zeros_like();
        let terms = rd_loss(
            &self.codec,
            &images,
            &noise,
            self.run.loss.lambda,
            self.distortion(),
            Some(&mut grad),
        )?;
        self.adam.step(&mut self.codec, &grad);
        let m = StepMetrics { step: self.step, terms };
        self.step += 1;
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.codec.clone());
        ck.extra = self.adam.state(&self.codec);
        ck.meta.insert("step".into(), self.step.into());
        ck.meta.insert("seed".into(), self.run.train.seed.into());
        ck.meta.insert("lambda".into(), self.run.loss.lambda.into());
        ck
    }

    /// Trains until `run.train.steps` updates have been applied in total.
    pub fn run(&mut self, data: &Dataset, out: &TrainOutput) -> Result<Vec<StepMetrics>> {
        let mut csv = match &out.metrics_csv {
            Some(path) => Some(open_metrics(path)?),
            None => None,
        };
        let total = self.run.train.steps as u64;
        let every = self.run.train.checkpoint_every as u64;
        let mut history = Vec::new();
        while self.step < total {
            let m = self.train_step(data)?;
            if let Some((path, f)) = csv.as_mut() {
                writeln!(f, "{}", m.csv_row()).map_err(|e| CodecError::io(path.as_path(), e))?;
            }
            if m.step % 100 == 0 {
                log::info!(
                    "step {} loss {:.6} bpp {:.5} distortion {:.6}",
                    m.step,
                    m.terms.loss,
                    m.terms.bpp,
                    m.terms.distortion
                );
            }
            history.push(m);
            if every > 0 && self.step.is_multiple_of(every) && self.step < total {
                self.checkpoint().save(out.periodic_path(self.step))?;
            }
        }
        self.checkpoint().save(&out.checkpoint)?;
        Ok(history)
    }
}

fn open_metrics(path: &Path) -> Result<(PathBuf, std::fs::File)> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CodecError::io(path, e))?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}").map_err(|e| CodecError::io(path, e))?;
    }
    Ok((path.to_path_buf(), f))
}
