//! Learned perceptual distance with a pluggable feature backend.
//!
//! The bundled [`FeatureNet`] reads a JSON weight file describing a stack of
//! non-overlapping strided patch projections with ReLU. The distance at each
//! level compares unit-normalized feature vectors per location, weighted by
//! a per-channel vector, averaged over locations and summed over levels.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::metrics::{resize_bilinear, resize_bilinear_adjoint};
use crate::nn::Mat;

const NORM_EPS: f64 = 1e-10;

pub trait PerceptualBackend: Send + Sync {
    /// Distance between two interleaved `h × w × 3` buffers.
    fn distance(&self, reference: &[f64], other: &[f64], h: usize, w: usize) -> Result<f64>;

    /// Distance and its gradient with respect to `other`.
    fn distance_with_grad(&self, reference: &[f64], other: &[f64], h: usize, w: usize) -> Result<(f64, Vec<f64>)>;
}

/// Resizes both images to `side × side` and measures them with `backend`.
pub fn perceptual_distance(
    backend: &dyn PerceptualBackend,
    a: &ImageTensor,
    b: &ImageTensor,
    side: usize,
) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    let ra = resize_bilinear(a.data(), h, w, side, side);
    let rb = resize_bilinear(b.data(), h, w, side, side);
    backend.distance(&ra, &rb, side, side)
}

/// [`perceptual_distance`] on raw buffers with the gradient with respect to
/// `other` at its original resolution.
pub fn perceptual_distance_with_grad(
    backend: &dyn PerceptualBackend,
    reference: &[f64],
    other: &[f64],
    h: usize,
    w: usize,
    side: usize,
) -> Result<(f64, Vec<f64>)> {
    let ra = resize_bilinear(reference, h, w, side, side);
    let rb = resize_bilinear(other, h, w, side, side);
    let (d, g) = backend.distance_with_grad(&ra, &rb, side, side)?;
    Ok((d, resize_bilinear_adjoint(&g, h, w, side, side)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayer {
    /// Side of the square, non-overlapping receptive field (also the stride).
    pub kernel: usize,
    pub input: usize,
    pub output: usize,
    /// Row-major `(kernel² · input) × output`, rows ordered `(dy, dx, c)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Non-negative per-channel weights of the level distance.
    pub lin: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetWeights {
    pub shift: [f64; 3],
    pub scale: [f64; 3],
    pub layers: Vec<FeatureLayer>,
}

#[derive(Clone, Debug)]
pub struct FeatureNet {
    shift: [f64; 3],
    scale: [f64; 3],
    layers: Vec<Layer>,
}

#[derive(Clone, Debug)]
struct Layer {
    kernel: usize,
    weight: Mat,
    bias: Mat,
    lin: Vec<f64>,
}

/// Per-layer input size, pre-activation and output for one image.
struct Trace {
    dims: Vec<(usize, usize)>,
    pre: Vec<Mat>,
    post: Vec<Mat>,
}

fn unfold(x: &Mat, h: usize, w: usize, k: usize) -> Mat {
    let c = x.ncols();
    let (oh, ow) = (h / k, w / k);
    let mut out = Array2::zeros((oh * ow, k * k * c));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut row = out.row_mut(oy * ow + ox);
            for dy in 0..k {
                for dx in 0..k {
                    let src = x.row((oy * k + dy) * w + ox * k + dx);
                    for ch in 0..c {
                        row[(dy * k + dx) * c + ch] = src[ch];
                    }
                }
            }
        }
    }
    out
}

fn fold(g: &Mat, h: usize, w: usize, k: usize, c: usize) -> Mat {
    let (oh, ow) = (h / k, w / k);
    let mut out = Array2::zeros((h * w, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = g.row(oy * ow + ox);
            for dy in 0..k {
                for dx in 0..k {
                    let mut dst = out.row_mut((oy * k + dy) * w + ox * k + dx);
                    for ch in 0..c {
                        dst[ch] += row[(dy * k + dx) * c + ch];
                    }
                }
            }
        }
    }
    out
}

fn normalize_rows(f: &Mat) -> (Mat, Vec<f64>) {
    let mut n = f.clone();
    let mut norms = Vec::with_capacity(f.nrows());
    for mut row in n.rows_mut() {
        let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.mapv_inplace(|v| v / (r + NORM_EPS));
        norms.push(r);
    }
    (n, norms)
}

impl FeatureNet {
    pub fn from_weights(w: FeatureNetWeights) -> Result<Self> {
        if w.layers.is_empty() {
            return Err(CodecError::Config("feature net has no layers".into()));
        }
        if w.scale.contains(&0.0) {
            return Err(CodecError::Config("feature net input scale must be nonzero".into()));
        }
        let mut input = CHANNELS;
        let mut layers = Vec::with_capacity(w.layers.len());
        for (i, l) in w.layers.into_iter().enumerate() {
            let rows = l.kernel * l.kernel * l.input;
            if l.kernel == 0
                || l.input != input
                || l.weight.len() != rows * l.output
                || l.bias.len() != l.output
                || l.lin.len() != l.output
            {
                return Err(CodecError::Config(format!("feature net layer {i} has inconsistent shapes")));
            }
            let all = l.weight.iter().chain(&l.bias).chain(&l.lin);
            if all.clone().any(|v| !v.is_finite()) || l.lin.iter().any(|v| *v < 0.0) {
                return Err(CodecError::Config(format!("feature net layer {i} has invalid values")));
            }
            input = l.output;
            layers.push(Layer {
                kernel: l.kernel,
                weight: Array2::from_shape_vec((rows, l.output), l.weight).expect("checked"),
                bias: Array2::from_shape_vec((1, l.output), l.bias).expect("checked"),
                lin: l.lin,
            });
        }
        Ok(Self {
            shift: w.shift,
            scale: w.scale,
            layers,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(CodecError::MissingWeights { path: path.to_path_buf() });
        }
        let text = std::fs::read_to_string(path).map_err(|e| CodecError::io(path, e))?;
        let w: FeatureNetWeights = serde_json::from_str(&text).map_err(|e| CodecError::Serde(e.to_string()))?;
        Self::from_weights(w)
    }

    pub fn weights(&self) -> FeatureNetWeights {
        FeatureNetWeights {
            shift: self.shift,
            scale: self.scale,
            layers: self
                .layers
                .iter()
                .map(|l| FeatureLayer {
                    kernel: l.kernel,
                    input: l.weight.nrows() / (l.kernel * l.kernel),
                    output: l.weight.ncols(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.iter().copied().collect(),
                    lin: l.lin.clone(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.weights()).map_err(|e| CodecError::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CodecError::io(path, e))
    }

    /// Randomly initialized network with the given `(kernel, output)` layers.
    pub fn random(layers: &[(usize, usize)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = CHANNELS;
        let mut out = Vec::new();
        for &(kernel, output) in layers {
            let rows = kernel * kernel * input;
            let std = (2.0 / rows as f64).sqrt();
            out.push(FeatureLayer {
                kernel,
                input,
                output,
                weight: (0..rows * output).map(|_| rng.random_range(-1.7..1.7) * std).collect(),
                bias: (0..output).map(|_| rng.random_range(-0.1..0.1)).collect(),
                lin: (0..output).map(|_| rng.random_range(0.0..1.0)).collect(),
            });
            input = output;
        }
        Self::from_weights(FeatureNetWeights {
            shift: [0.45, 0.45, 0.4],
            scale: [0.23, 0.22, 0.23],
            layers: out,
        })
        .expect("consistent by construction")
    }

    fn check_dims(&self, len: usize, h: usize, w: usize) -> Result<()> {
        let stride: usize = self.layers.iter().map(|l| l.kernel).product();
        if len != h * w * CHANNELS || !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
            return Err(CodecError::Shape(format!(
                "feature net needs a {h}x{w} buffer with sides divisible by {stride}"
            )));
        }
        Ok(())
    }

    fn forward(&self, data: &[f64], h: usize, w: usize) -> Trace {
        let mut x = Array2::from_shape_fn((h * w, CHANNELS), |(i, c)| {
            (data[i * CHANNELS + c] - self.shift[c]) / self.scale[c]
        });
        let (mut ch, mut cw) = (h, w);
        let mut t = Trace {
            dims: Vec::new(),
            pre: Vec::new(),
            post: Vec::new(),
        };
        for l in &self.layers {
            t.dims.push((ch, cw));
            let u = unfold(&x, ch, cw, l.kernel);
            let pre = u.dot(&l.weight) + &l.bias;
            x = pre.mapv(|v| v.max(0.0));
            t.pre.push(pre);
            t.post.push(x.clone());
            ch /= l.kernel;
            cw /= l.kernel;
        }
        t
    }
}

impl PerceptualBackend for FeatureNet {
    fn distance(&self, reference: &[f64], other: &[f64], h: usize, w: usize) -> Result<f64> {
        Ok(self.distance_with_grad(reference, other, h, w)?.0)
    }

    fn distance_with_grad(&self, reference: &[f64], other: &[f64], h: usize, w: usize) -> Result<(f64, Vec<f64>)> {
        self.check_dims(reference.len(), h, w)?;
        self.check_dims(other.len(), h, w)?;
        let ta = self.forward(reference, h, w);
        let tb = self.forward(other, h, w);
        let mut total = 0.0;
        let mut g_next: Option<Mat> = None;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (na, _) = normalize_rows(&ta.post[i]);
            let (nb, norms) = normalize_rows(&tb.post[i]);
            let rows = nb.nrows() as f64;
            let mut g_n = Array2::zeros(nb.raw_dim());
            for ((r, c), g) in g_n.indexed_iter_mut() {
                let diff = na[[r, c]] - nb[[r, c]];
                total += l.lin[c] * diff * diff / rows;
                *g = -2.0 * l.lin[c] * diff / rows;
            }
            let f = &tb.post[i];
            let mut g_f = g_n;
            for (r, mut row) in g_f.rows_mut().into_iter().enumerate() {
                let nr = norms[r];
                let denom = nr + NORM_EPS;
                let dot: f64 = row.iter().zip(f.row(r)).map(|(a, b)| a * b).sum();
                let coeff = if nr > 0.0 { dot / (nr * denom * denom) } else { 0.0 };
                for (c, g) in row.iter_mut().enumerate() {
                    *g = *g / denom - f[[r, c]] * coeff;
                }
            }
            if let Some(g) = g_next.take() {
                g_f += &g;
            }
            let g_pre = ndarray::Zip::from(&g_f)
                .and(&tb.pre[i])
                .map_collect(|g, p| if *p > 0.0 { *g } else { 0.0 });
            let g_u = g_pre.dot(&l.weight.t());
            let (ch, cw) = tb.dims[i];
            let cin = l.weight.nrows() / (l.kernel * l.kernel);
            g_next = Some(fold(&g_u, ch, cw, l.kernel, cin));
        }
        let g_in = g_next.expect("at least one layer");
        let mut grad = vec![0.0; h * w * CHANNELS];
        for (i, g) in grad.iter_mut().enumerate() {
            let c = i % CHANNELS;
            *g = g_in[[i / CHANNELS, c]] / self.scale[c];
        }
        Ok((total, grad))
    }
}
