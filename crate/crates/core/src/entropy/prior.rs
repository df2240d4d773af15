//! Per-channel factorized density over latent values.
//!
//! Each channel owns a small monotone network `f: ℝ → ℝ` built from stages
//! `u = softplus(H) v + b`, followed (except on the last stage) by
//! `v = u + tanh(a) ⊙ tanh(u)`. The cumulative is `c(x) = σ(f(x))`; the
//! positive matrices and the bounded gating keep `f` nondecreasing. The
//! probability of an integer symbol `n` is `c(n + ½) − c(n − ½)`.

use ndarray::Array2;
use rand::Rng;

use crate::error::{CodecError, Result};
use crate::nn::{join, Mat, Parameters};

/// Lower bound on any element likelihood; keeps the rate finite.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior {
    channels: usize,
    /// `[1, filters.., 1]`
    widths: Vec<usize>,
    /// Stage `k`: `C × (out·in)`, pre-softplus, row-major `out × in`.
    pub matrices: Vec<Mat>,
    /// Stage `k`: `C × out`.
    pub biases: Vec<Mat>,
    /// Stage `k < K−1`: `C × out`, pre-tanh gating factors.
    pub factors: Vec<Mat>,
}

/// Per-channel parameters with the nonlinear reparameterizations applied.
struct Materialized {
    /// softplus(raw) per stage, `C × (out·in)`
    h: Vec<Mat>,
    /// tanh(factor) per stage
    a: Vec<Mat>,
}

/// Forward intermediates of one cumulative-logit evaluation.
#[derive(Default)]
struct Trace {
    /// Stage inputs, `widths[k]` each.
    inputs: Vec<Vec<f64>>,
    /// Stage affine outputs, `widths[k+1]` each.
    affine: Vec<Vec<f64>>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl FactorizedPrior {
    /// Initializes so that the density starts broad (roughly `init_scale`
    /// wide) around zero.
    pub fn new(channels: usize, filters: &[usize], init_scale: f64, rng: &mut impl Rng) -> Self {
        let mut widths = vec![1];
        widths.extend_from_slice(filters);
        widths.push(1);
        let stages = widths.len() - 1;
        let scale = init_scale.powf(1.0 / stages as f64);
        let mut matrices = Vec::with_capacity(stages);
        let mut biases = Vec::with_capacity(stages);
        let mut factors = Vec::with_capacity(stages - 1);
        for k in 0..stages {
            let (inp, out) = (widths[k], widths[k + 1]);
            let init = (1.0 / scale / out as f64).exp_m1().ln();
            matrices.push(Array2::from_elem((channels, out * inp), init));
            biases.push(Array2::from_shape_simple_fn((channels, out), || {
                rng.random_range(-0.5..0.5)
            }));
            if k + 1 < stages {
                factors.push(Array2::zeros((channels, out)));
            }
        }
        Self {
            channels,
            widths,
            matrices,
            biases,
            factors,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn stages(&self) -> usize {
        self.widths.len() - 1
    }

    fn materialize(&self) -> Materialized {
        Materialized {
            h: self.matrices.iter().map(|m| m.mapv(softplus)).collect(),
            a: self.factors.iter().map(|m| m.mapv(f64::tanh)).collect(),
        }
    }

    fn logit(&self, mat: &Materialized, c: usize, x: f64, trace: Option<&mut Trace>) -> f64 {
        let mut v = vec![x];
        let mut local = Trace::default();
        let record = trace.is_some();
        for k in 0..self.stages() {
            let (inp, out) = (self.widths[k], self.widths[k + 1]);
            let h = mat.h[k].row(c);
            let b = self.biases[k].row(c);
            let mut u = vec![0.0; out];
            for (i, ui) in u.iter_mut().enumerate() {
                let mut acc = b[i];
                for (j, vj) in v.iter().enumerate() {
                    acc += h[i * inp + j] * vj;
                }
                *ui = acc;
            }
            let next = if k + 1 < self.stages() {
                let a = mat.a[k].row(c);
                u.iter().zip(a.iter()).map(|(ui, ai)| ui + ai * ui.tanh()).collect()
            } else {
                u.clone()
            };
            if record {
                local.inputs.push(v);
                local.affine.push(u);
            }
            v = next;
        }
        if let Some(t) = trace {
            *t = local;
        }
        v[0]
    }

    /// Accumulates `upstream · ∂logit/∂params` into `grad` and returns
    /// `∂logit/∂x`.
    fn logit_backward(
        &self,
        mat: &Materialized,
        c: usize,
        trace: &Trace,
        upstream: f64,
        grad: &mut FactorizedPrior,
    ) -> f64 {
        let mut dv = vec![upstream];
        for k in (0..self.stages()).rev() {
            let (inp, out) = (self.widths[k], self.widths[k + 1]);
            let u = &trace.affine[k];
            let du: Vec<f64> = if k + 1 < self.stages() {
                let a = mat.a[k].row(c);
                let raw = self.factors[k].row(c);
                let mut du = vec![0.0; out];
                for i in 0..out {
                    let t = u[i].tanh();
                    du[i] = dv[i] * (1.0 + a[i] * (1.0 - t * t));
                    let ta = raw[i].tanh();
                    grad.factors[k][[c, i]] += dv[i] * t * (1.0 - ta * ta);
                }
                du
            } else {
                dv.clone()
            };
            let h = mat.h[k].row(c);
            let raw = self.matrices[k].row(c);
            let x = &trace.inputs[k];
            let mut dx = vec![0.0; inp];
            for (i, &d) in du.iter().enumerate().take(out) {
                grad.biases[k][[c, i]] += d;
                for j in 0..inp {
                    let idx = i * inp + j;
                    grad.matrices[k][[c, idx]] += d * x[j] * sigmoid(raw[idx]);
                    dx[j] += h[idx] * d;
                }
            }
            dv = dx;
        }
        dv[0]
    }

    /// Cumulative `c(x)` of one channel.
    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        sigmoid(self.logit(&self.materialize(), channel, x, None))
    }

    /// Unfloored probability mass of the unit interval centered on `y`.
    pub fn mass(&self, channel: usize, y: f64) -> f64 {
        let mat = self.materialize();
        mass_from_logits(
            self.logit(&mat, channel, y - 0.5, None),
            self.logit(&mat, channel, y + 0.5, None),
        )
        .0
    }

    /// Floored likelihoods of the integers `n_min..=n_max` for one channel.
    pub fn pmf(&self, channel: usize, n_min: i64, n_max: i64) -> Vec<f64> {
        let mat = self.materialize();
        let edges: Vec<f64> = (n_min..=n_max + 1)
            .map(|n| self.logit(&mat, channel, n as f64 - 0.5, None))
            .collect();
        edges
            .windows(2)
            .map(|w| mass_from_logits(w[0], w[1]).0.max(LIKELIHOOD_FLOOR))
            .collect()
    }

    fn check_width(&self, latent: &Mat) -> Result<()> {
        if latent.ncols() != self.channels {
            return Err(CodecError::Shape(format!(
                "latent has {} channels, prior has {}",
                latent.ncols(),
                self.channels
            )));
        }
        Ok(())
    }

    /// Per-element likelihood `max(c(y+½) − c(y−½), floor)`. Column `j` of
    /// the latent is channel `j`; rows share the channel's density.
    pub fn likelihood(&self, latent: &Mat) -> Result<Mat> {
        self.check_width(latent)?;
        let mat = self.materialize();
        let mut out = latent.clone();
        for ((_, c), p) in out.indexed_iter_mut() {
            let y = *p;
            let (m, _, _) = mass_from_logits(
                self.logit(&mat, c, y - 0.5, None),
                self.logit(&mat, c, y + 0.5, None),
            );
            *p = m.max(LIKELIHOOD_FLOOR);
        }
        Ok(out)
    }

    /// `−Σ log₂ p(y)` over all elements.
    pub fn rate_bits(&self, latent: &Mat) -> Result<f64> {
        Ok(bits_from_likelihood(&self.likelihood(latent)?))
    }

    /// Rate with its gradient: accumulates into `grad`, returns
    /// `(bits, ∂bits/∂latent)`.
    pub fn rate_bits_with_grad(&self, latent: &Mat, grad: &mut FactorizedPrior) -> Result<(f64, Mat)> {
        self.check_width(latent)?;
        let mat = self.materialize();
        let mut bits = 0.0;
        let mut d_latent = Array2::zeros(latent.raw_dim());
        let (mut lo_t, mut hi_t) = (Trace::default(), Trace::default());
        for ((r, c), &y) in latent.indexed_iter() {
            let lower = self.logit(&mat, c, y - 0.5, Some(&mut lo_t));
            let upper = self.logit(&mat, c, y + 0.5, Some(&mut hi_t));
            let (m, d_lower, d_upper) = mass_from_logits(lower, upper);
            if m < LIKELIHOOD_FLOOR {
                bits -= LIKELIHOOD_FLOOR.log2();
                continue;
            }
            bits -= m.log2();
            let d_m = -1.0 / (m * std::f64::consts::LN_2);
            let dx_lo = self.logit_backward(&mat, c, &lo_t, d_m * d_lower, grad);
            let dx_hi = self.logit_backward(&mat, c, &hi_t, d_m * d_upper, grad);
            d_latent[[r, c]] = dx_lo + dx_hi;
        }
        Ok((bits, d_latent))
    }
}

/// Information content `−Σ log₂ p` of a likelihood matrix.
pub fn bits_from_likelihood(likelihood: &Mat) -> f64 {
    likelihood.iter().map(|p| -p.log2()).sum()
}

/// `|σ(s·upper) − σ(s·lower)|` with the sign chosen to evaluate in the
/// accurate tail of the sigmoid. Returns the mass and its partials w.r.t.
/// `lower` and `upper`.
fn mass_from_logits(lower: f64, upper: f64) -> (f64, f64, f64) {
    let s = if lower + upper > 0.0 { -1.0 } else { 1.0 };
    let (su, sl) = (sigmoid(s * upper), sigmoid(s * lower));
    let diff = su - sl;
    let sign = if diff >= 0.0 { 1.0 } else { -1.0 };
    let d_upper = sign * s * su * (1.0 - su);
    let d_lower = -sign * s * sl * (1.0 - sl);
    (diff.abs(), d_lower, d_upper)
}

impl Parameters for FactorizedPrior {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        for (k, m) in self.matrices.iter().enumerate() {
            f(join(prefix, &format!("matrices.{k}")), m);
        }
        for (k, m) in self.biases.iter().enumerate() {
            f(join(prefix, &format!("biases.{k}")), m);
        }
        for (k, m) in self.factors.iter().enumerate() {
            f(join(prefix, &format!("factors.{k}")), m);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        for (k, m) in self.matrices.iter_mut().enumerate() {
            f(join(prefix, &format!("matrices.{k}")), m);
        }
        for (k, m) in self.biases.iter_mut().enumerate() {
            f(join(prefix, &format!("biases.{k}")), m);
        }
        for (k, m) in self.factors.iter_mut().enumerate() {
            f(join(prefix, &format!("factors.{k}")), m);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;
    use crate::nn::gradcheck::{assert_close, numeric};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior(channels: usize, seed: u64) -> FactorizedPrior {
        FactorizedPrior::new(channels, &[3, 3, 3], 10.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Same shape as a fresh prior but with every parameter jittered, so
    /// the gating factors are nonzero.
    fn perturbed(channels: usize, seed: u64) -> FactorizedPrior {
        let mut p = prior(channels, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        p.visit_mut("", &mut |_, m| *m += &gaussian(m.nrows(), m.ncols(), 0.3, &mut rng));
        p
    }

    #[test]
    fn cdf_is_monotone_with_correct_limits() {
        let p = perturbed(3, 1);
        for c in 0..3 {
            let mut prev = 0.0;
            for i in -4000..=4000 {
                let v = p.cdf(c, i as f64 * 0.01);
                assert!(v >= prev, "channel {c} decreases at {i}");
                prev = v;
            }
            assert!(p.cdf(c, -1e6) < 1e-9);
            assert!(p.cdf(c, 1e6) > 1.0 - 1e-9);
        }
    }

    #[test]
    fn fresh_prior_mass_sums_to_one() {
        let p = prior(4, 2);
        for c in 0..4 {
            // exhaustive unfloored summation over the integers in [-1000, 1000]
            let total: f64 = (-1000..=1000).map(|n| p.mass(c, n as f64)).sum();
            assert!((1.0 - 1e-4..=1.0).contains(&total), "channel {c}: {total}");
        }
    }

    #[test]
    fn likelihoods_are_positive_and_floored() {
        let p = perturbed(2, 3);
        let y = Array2::from_shape_vec((3, 2), vec![0.0, 1.0, -7.0, 3.0, 1e5, -1e5]).unwrap();
        let l = p.likelihood(&y).unwrap();
        assert!(l.iter().all(|&v| (LIKELIHOOD_FLOOR..=1.0).contains(&v)));
        assert_eq!(l[[2, 0]], LIKELIHOOD_FLOOR);
    }

    #[test]
    fn one_half_is_one_bit() {
        let l = Array2::from_shape_vec((1, 3), vec![0.5, 0.25, 1.0]).unwrap();
        assert_eq!(bits_from_likelihood(&l), 3.0);
        let p = perturbed(1, 4);
        let y = Array2::from_elem((1, 1), 0.3);
        let l = p.likelihood(&y).unwrap();
        assert_eq!(p.rate_bits(&y).unwrap(), bits_from_likelihood(&l));
    }

    #[test]
    fn rate_is_order_invariant() {
        let p = perturbed(3, 5);
        let y = gaussian(5, 3, 4.0, &mut ChaCha8Rng::seed_from_u64(6));
        let rev = y.slice(ndarray::s![..;-1, ..]).to_owned();
        let (a, b) = (p.rate_bits(&y).unwrap(), p.rate_bits(&rev).unwrap());
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn channel_count_is_checked() {
        assert!(prior(3, 7).likelihood(&Array2::zeros((2, 4))).is_err());
    }

    #[test]
    fn rate_gradients_match_finite_differences() {
        let p = perturbed(2, 8);
        let mut y = gaussian(3, 2, 2.0, &mut ChaCha8Rng::seed_from_u64(9));
        let mut g = p.zeros_like();
        let (_, dy) = p.rate_bits_with_grad(&y, &mut g).unwrap();
        let num_y = numeric(&mut y, |y| p.rate_bits(y).unwrap());
        assert_close(&dy, &num_y, 1e-3, "d latent");
        let names: Vec<String> = g.named_parameters().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let analytic = g
                .named_parameters()
                .into_iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .clone();
            let mut probe = p.clone();
            let mut param = probe
                .named_parameters()
                .into_iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .clone();
            let num = numeric(&mut param, |v| {
                probe.visit_mut("", &mut |n, m| {
                    if n == name {
                        m.assign(v)
                    }
                });
                probe.rate_bits(&y).unwrap()
            });
            assert_close(&analytic, &num, 1e-3, &name);
        }
    }
}
