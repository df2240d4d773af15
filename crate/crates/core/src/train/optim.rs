//! Adam over any [`Parameters`] container.

use std::collections::BTreeMap;

use crate::error::{CodecError, Result};
use crate::nn::{Mat, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &impl Parameters) -> Self {
        let zeros: Vec<Mat> = params
            .named_parameters()
            .into_iter()
            .map(|(_, p)| Mat::zeros(p.raw_dim()))
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.learning_rate;
        let eps = self.eps;
        let grads: Vec<&Mat> = grads.named_parameters().into_iter().map(|(_, g)| g).collect();
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            let g = grads[i];
            ndarray::Zip::from(p)
                .and(&mut m[i])
                .and(&mut v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            i += 1;
        });
    }

    /// Moment tensors keyed `optim.m.<param>` / `optim.v.<param>`, plus the
    /// step count as a `1×1` tensor `optim.t`.
    pub fn state(&self, params: &impl Parameters) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in params.named_parameters().into_iter().enumerate() {
            out.insert(format!("optim.m.{name}"), self.m[i].clone());
            out.insert(format!("optim.v.{name}"), self.v[i].clone());
        }
        out.insert("optim.t".into(), Mat::from_elem((1, 1), self.t as f64));
        out
    }

    pub fn restore(&mut self, params: &impl Parameters, state: &BTreeMap<String, Mat>) -> Result<()> {
        let missing = |k: &str| CodecError::Format(format!("optimizer state lacks {k}"));
        for (i, (name, p)) in params.named_parameters().into_iter().enumerate() {
            for (key, slot) in [(format!("optim.m.{name}"), &mut self.m[i]), (format!("optim.v.{name}"), &mut self.v[i])] {
                let s = state.get(&key).ok_or_else(|| missing(&key))?;
                if s.raw_dim() != p.raw_dim() {
                    return Err(CodecError::Shape(format!("optimizer tensor {key}")));
                }
                *slot = s.clone();
            }
        }
        self.t = state.get("optim.t").ok_or_else(|| missing("optim.t"))?[[0, 0]] as u64;
        Ok(())
    }
}
