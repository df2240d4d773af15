//! Dense layers with explicit backward passes.
//!
//! Every layer exposes `forward` returning whatever the backward pass needs,
//! and `backward` that accumulates parameter gradients into a same-shaped
//! gradient instance and returns the gradient with respect to its input.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type Mat = Array2<f64>;

/// Uniform access to the trainable tensors of a module, keyed by a dotted
/// module path. Biases and vectors are stored as `1×n` matrices.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat));

    fn named_parameters(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, m| out.push((name, m)));
        out
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |name, m| out.push((name, m)));
        out
    }

    fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, m)| m.len()).sum()
    }

    fn zero_(&mut self) {
        self.visit_mut("", &mut |_, m| m.fill(0.0));
    }

    /// `self += alpha · other`, tensor by tensor.
    fn add_scaled(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        let src: Vec<&Mat> = other.named_parameters().into_iter().map(|(_, m)| m).collect();
        let mut i = 0;
        self.visit_mut("", &mut |_, m| {
            m.scaled_add(alpha, src[i]);
            i += 1;
        });
    }

    /// A copy with every parameter set to zero, used as a gradient buffer.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero_();
        z
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Mat,
    /// `1 × out`
    pub bias: Mat,
}

impl Linear {
    /// LeCun-normal weights, zero bias.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: gaussian(input, output, (1.0 / input as f64).sqrt(), rng),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array2::zeros((1, dim)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Mat,
    pub beta: Mat,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Mat,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *s;
        }
        let mut y = &normalized * &self.gamma;
        y += &self.beta;
        (
            y,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Mat, grad: &mut LayerNorm) -> Mat {
        let d = dy.ncols() as f64;
        grad.gamma += &(dy * &cache.normalized)
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, mut out) in dx.outer_iter_mut().enumerate() {
            let g = dxhat.row(i);
            let xh = cache.normalized.row(i);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let s = cache.inv_std[i];
            for ((o, &gj), &xj) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = s * (gj - mean_g - xj * mean_gx);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}


#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Weighted sum so every output element carries a distinct upstream grad.
    fn probe(rows: usize, cols: usize) -> Mat {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4)
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(5, 4, &mut rng);
        lin.bias = gaussian(1, 4, 0.3, &mut rng);
        let mut x = gaussian(3, 5, 1.0, &mut rng);
        let w = probe(3, 4);
        let mut g = lin.zeros_like();
        let dx = lin.backward(&x, &w, &mut g);
        let num_x = numeric(&mut x, |x| (lin.forward(x) * &w).sum());
        assert_close(&dx, &num_x, 1e-6, "dx");
        let mut weight = lin.weight.clone();
        let num_w = numeric(&mut weight, |wt| {
            let l = Linear {
                weight: wt.clone(),
                bias: lin.bias.clone(),
            };
            (l.forward(&x) * &w).sum()
        });
        assert_close(&g.weight, &num_w, 1e-6, "dW");
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ln = LayerNorm::new(6);
        ln.gamma = gaussian(1, 6, 1.0, &mut rng);
        ln.beta = gaussian(1, 6, 1.0, &mut rng);
        let mut x = gaussian(4, 6, 2.0, &mut rng);
        let w = probe(4, 6);
        let (_, cache) = ln.forward(&x);
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &w, &mut g);
        let num_x = numeric(&mut x, |x| (ln.forward(x).0 * &w).sum());
        assert_close(&dx, &num_x, 1e-5, "dx");
        let mut gamma = ln.gamma.clone();
        let num_g = numeric(&mut gamma, |gm| {
            let l = LayerNorm {
                gamma: gm.clone(),
                beta: ln.beta.clone(),
            };
            (l.forward(&x).0 * &w).sum()
        });
        assert_close(&g.gamma, &num_g, 1e-6, "dgamma");
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j * j) as f64);
        let (y, _) = LayerNorm::new(8).forward(&x);
        for row in y.outer_iter() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(x + STEP) - gelu(x - STEP)) / (2.0 * STEP);
            assert!(rel_err(gelu_grad(x), num) < 1e-7);
        }
    }

    #[test]
    fn parameter_names_are_dotted_paths() {
        let lin = Linear::zeros(2, 3);
        let names: Vec<_> = lin.named_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["weight", "bias"]);
        let mut names = Vec::new();
        lin.visit("enc.embed", &mut |n, _| names.push(n));
        assert_eq!(names, ["enc.embed.weight", "enc.embed.bias"]);
    }
}
