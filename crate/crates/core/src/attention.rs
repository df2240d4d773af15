//! Scaled dot-product attention, multi-head attention, the feed-forward
//! sublayer and the composed transformer decoder block
//! (self-attention, cross-attention, feed-forward; each residual).

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};
use crate::nn::{gelu, gelu_grad, join, LayerNorm, LayerNormCache, Linear, Mat, Parameters};

/// Where layer normalization sits relative to each residual sublayer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Plain residual sublayers, `x + f(x)`.
    Off,
    /// `x + f(norm(x))`.
    #[default]
    Pre,
    /// `norm(x + f(x))`.
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionRole {
    SelfAttention,
    Cross,
}

/// Attention weights of one head in one layer, captured during a forward
/// pass. `weights` is `queries × keys`.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub stage: Stage,
    pub layer: usize,
    pub head: usize,
    pub role: AttentionRole,
    pub weights: Mat,
}

pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// `A = softmax(scale · Q Kᵀ)` row-wise, output `A V`. Returns `(A V, A)`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, scale: f64) -> Result<(Mat, Mat)> {
    if k.nrows() != v.nrows() {
        return Err(CodecError::Shape(format!(
            "{} keys but {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    if k.nrows() == 0 {
        return Err(CodecError::Shape("attention over an empty key set".into()));
    }
    if q.ncols() != k.ncols() {
        return Err(CodecError::Shape(format!(
            "query width {} does not match key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    let mut logits = q.dot(&k.t());
    logits *= scale;
    let weights = softmax_rows(&logits);
    Ok((weights.dot(v), weights))
}

/// Gradients of [`attention`] w.r.t. `(Q, K, V)` given the upstream gradient
/// of the output and the weights from the forward pass.
pub fn attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    scale: f64,
    weights: &Mat,
    d_out: &Mat,
) -> (Mat, Mat, Mat) {
    let dv = weights.t().dot(d_out);
    let d_weights = d_out.dot(&v.t());
    let row_dot = (&d_weights * weights).sum_axis(Axis(1)).insert_axis(Axis(1));
    let mut d_logits = (&d_weights - &row_dot) * weights;
    d_logits *= scale;
    let dq = d_logits.dot(k);
    let dk = d_logits.t().dot(q);
    (dq, dk, dv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    /// Logit scale; `1/√d_h` unless configured otherwise.
    pub scale: f64,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct MhaCache {
    xq: Mat,
    xkv: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    concat: Mat,
    pub weights: Vec<Mat>,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, scale: Option<f64>, rng: &mut impl Rng) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            heads,
            scale: scale.unwrap_or(1.0 / ((dim / heads) as f64).sqrt()),
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            output: Linear::new(dim, dim, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.query.input_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// Concatenated, output-projected head results without the residual.
    pub fn attend(&self, xq: &Mat, xkv: &Mat) -> Result<(Mat, MhaCache)> {
        check_heads(self.dim(), self.heads)?;
        if xq.ncols() != self.dim() || xkv.ncols() != self.dim() {
            return Err(CodecError::Shape(format!(
                "inputs of width {}/{} for a {}-dim attention layer",
                xq.ncols(),
                xkv.ncols(),
                self.dim()
            )));
        }
        let q = self.query.forward(xq);
        let k = self.key.forward(xkv);
        let v = self.value.forward(xkv);
        let dh = self.head_dim();
        let mut concat = Array2::zeros((xq.nrows(), self.dim()));
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (out, a) = attention(
                &q.slice(cols).to_owned(),
                &k.slice(cols).to_owned(),
                &v.slice(cols).to_owned(),
                self.scale,
            )?;
            concat.slice_mut(cols).assign(&out);
            weights.push(a);
        }
        let out = self.output.forward(&concat);
        Ok((
            out,
            MhaCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                concat,
                weights,
            },
        ))
    }

    /// Returns gradients w.r.t. the query input and the key/value input.
    pub fn attend_backward(
        &self,
        cache: &MhaCache,
        d_out: &Mat,
        grad: &mut MultiHeadAttention,
    ) -> (Mat, Mat) {
        let d_concat = self.output.backward(&cache.concat, d_out, &mut grad.output);
        let dh = self.head_dim();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (gq, gk, gv) = attention_backward(
                &cache.q.slice(cols).to_owned(),
                &cache.k.slice(cols).to_owned(),
                &cache.v.slice(cols).to_owned(),
                self.scale,
                &cache.weights[h],
                &d_concat.slice(cols).to_owned(),
            );
            dq.slice_mut(cols).assign(&gq);
            dk.slice_mut(cols).assign(&gk);
            dv.slice_mut(cols).assign(&gv);
        }
        let dxq = self.query.backward(&cache.xq, &dq, &mut grad.query);
        let mut dxkv = self.key.backward(&cache.xkv, &dk, &mut grad.key);
        dxkv += &self.value.backward(&cache.xkv, &dv, &mut grad.value);
        (dxq, dxkv)
    }

    /// `Q + [A V]_h`: residual multi-head attention of `q` over `kv`.
    pub fn forward(&self, q: &Mat, kv: &Mat) -> Result<Mat> {
        let (out, _) = self.attend(q, kv)?;
        Ok(q + &out)
    }

    pub fn self_attention(&self, q: &Mat) -> Result<Mat> {
        self.forward(q, q)
    }
}

impl Parameters for MultiHeadAttention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(CodecError::Config(format!(
            "embedding dimension {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Two affine maps with a GELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(dim, hidden, rng),
            output: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, FeedForwardCache) {
        let pre = self.hidden.forward(x);
        let act = pre.mapv(gelu);
        let y = self.output.forward(&act);
        (
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &FeedForwardCache, dy: &Mat, grad: &mut FeedForward) -> Mat {
        let d_act = self.output.backward(&cache.act, dy, &mut grad.output);
        let d_pre = d_act * &cache.pre.mapv(gelu_grad);
        self.hidden.backward(&cache.x, &d_pre, &mut grad.hidden)
    }
}

impl Parameters for FeedForward {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Transformer decoder block: queries attend to themselves, then to a
/// context sequence, then pass through a feed-forward sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub norm_mode: NormMode,
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub context_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffw_norm: LayerNorm,
    pub ffw: FeedForward,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    self_ln: Option<LayerNormCache>,
    self_attn: MhaCache,
    cross_ln: Option<LayerNormCache>,
    context_ln: Option<LayerNormCache>,
    cross_attn: MhaCache,
    ffw_ln: Option<LayerNormCache>,
    ffw: FeedForwardCache,
}

impl BlockCache {
    pub fn self_weights(&self) -> &[Mat] {
        &self.self_attn.weights
    }

    pub fn cross_weights(&self) -> &[Mat] {
        &self.cross_attn.weights
    }

    pub fn records(&self, stage: Stage, layer: usize) -> Vec<AttentionRecord> {
        let mut out = Vec::with_capacity(2 * self.self_attn.weights.len());
        for (role, weights) in [
            (AttentionRole::SelfAttention, &self.self_attn.weights),
            (AttentionRole::Cross, &self.cross_attn.weights),
        ] {
            for (head, w) in weights.iter().enumerate() {
                out.push(AttentionRecord {
                    stage,
                    layer,
                    head,
                    role,
                    weights: w.clone(),
                });
            }
        }
        out
    }
}

impl DecoderBlock {
    pub fn new(
        dim: usize,
        heads: usize,
        ffw_mult: usize,
        norm_mode: NormMode,
        scale: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm_mode,
            self_norm: LayerNorm::new(dim),
            self_attn: MultiHeadAttention::new(dim, heads, scale, rng)?,
            cross_norm: LayerNorm::new(dim),
            context_norm: LayerNorm::new(dim),
            cross_attn: MultiHeadAttention::new(dim, heads, scale, rng)?,
            ffw_norm: LayerNorm::new(dim),
            ffw: FeedForward::new(dim, dim * ffw_mult, rng),
        })
    }

    /// Zeroes the value/output projections and the feed-forward output so
    /// that the block reduces to the identity (except under post-norm).
    pub fn zero_residual_branches(&mut self) {
        for mha in [&mut self.self_attn, &mut self.cross_attn] {
            mha.value.zero_();
            mha.output.zero_();
        }
        self.ffw.output.zero_();
    }

    pub fn forward(&self, x: &Mat, context: &Mat) -> Result<(Mat, BlockCache)> {
        if context.nrows() == 0 {
            return Err(CodecError::Shape("decoder block needs a nonempty context".into()));
        }
        let mode = self.norm_mode;

        let (x1, self_ln, self_cache) = match mode {
            NormMode::Off => {
                let (a, c) = self.self_attn.attend(x, x)?;
                (x + &a, None, c)
            }
            NormMode::Pre => {
                let (n, l) = self.self_norm.forward(x);
                let (a, c) = self.self_attn.attend(&n, &n)?;
                (x + &a, Some(l), c)
            }
            NormMode::Post => {
                let (a, c) = self.self_attn.attend(x, x)?;
                let (y, l) = self.self_norm.forward(&(x + &a));
                (y, Some(l), c)
            }
        };

        let (x2, cross_ln, context_ln, cross_cache) = match mode {
            NormMode::Off => {
                let (a, c) = self.cross_attn.attend(&x1, context)?;
                (&x1 + &a, None, None, c)
            }
            NormMode::Pre => {
                let (nq, lq) = self.cross_norm.forward(&x1);
                let (nk, lk) = self.context_norm.forward(context);
                let (a, c) = self.cross_attn.attend(&nq, &nk)?;
                (&x1 + &a, Some(lq), Some(lk), c)
            }
            NormMode::Post => {
                let (a, c) = self.cross_attn.attend(&x1, context)?;
                let (y, l) = self.cross_norm.forward(&(&x1 + &a));
                (y, Some(l), None, c)
            }
        };

        let (x3, ffw_ln, ffw_cache) = match mode {
            NormMode::Off => {
                let (f, c) = self.ffw.forward(&x2);
                (&x2 + &f, None, c)
            }
            NormMode::Pre => {
                let (n, l) = self.ffw_norm.forward(&x2);
                let (f, c) = self.ffw.forward(&n);
                (&x2 + &f, Some(l), c)
            }
            NormMode::Post => {
                let (f, c) = self.ffw.forward(&x2);
                let (y, l) = self.ffw_norm.forward(&(&x2 + &f));
                (y, Some(l), c)
            }
        };

        Ok((
            x3,
            BlockCache {
                self_ln,
                self_attn: self_cache,
                cross_ln,
                context_ln,
                cross_attn: cross_cache,
                ffw_ln,
                ffw: ffw_cache,
            },
        ))
    }

    /// Returns gradients w.r.t. the block input and the context.
    pub fn backward(&self, cache: &BlockCache, dy: &Mat, grad: &mut DecoderBlock) -> (Mat, Mat) {
        let ln = |c: &Option<LayerNormCache>| c.as_ref().expect("norm cache for active mode").clone();

        let d2 = match self.norm_mode {
            NormMode::Off => dy + &self.ffw.backward(&cache.ffw, dy, &mut grad.ffw),
            NormMode::Pre => {
                let dn = self.ffw.backward(&cache.ffw, dy, &mut grad.ffw);
                dy + &self
                    .ffw_norm
                    .backward(&ln(&cache.ffw_ln), &dn, &mut grad.ffw_norm)
            }
            NormMode::Post => {
                let ds = self
                    .ffw_norm
                    .backward(&ln(&cache.ffw_ln), dy, &mut grad.ffw_norm);
                &ds + &self.ffw.backward(&cache.ffw, &ds, &mut grad.ffw)
            }
        };

        let (d1, d_context) = match self.norm_mode {
            NormMode::Off => {
                let (dq, dk) =
                    self.cross_attn
                        .attend_backward(&cache.cross_attn, &d2, &mut grad.cross_attn);
                (&d2 + &dq, dk)
            }
            NormMode::Pre => {
                let (dq, dk) =
                    self.cross_attn
                        .attend_backward(&cache.cross_attn, &d2, &mut grad.cross_attn);
                let dq = self
                    .cross_norm
                    .backward(&ln(&cache.cross_ln), &dq, &mut grad.cross_norm);
                let dk = self
                    .context_norm
                    .backward(&ln(&cache.context_ln), &dk, &mut grad.context_norm);
                (&d2 + &dq, dk)
            }
            NormMode::Post => {
                let ds = self
                    .cross_norm
                    .backward(&ln(&cache.cross_ln), &d2, &mut grad.cross_norm);
                let (dq, dk) =
                    self.cross_attn
                        .attend_backward(&cache.cross_attn, &ds, &mut grad.cross_attn);
                (&ds + &dq, dk)
            }
        };

        let dx = match self.norm_mode {
            NormMode::Off => {
                let (dq, dk) =
                    self.self_attn
                        .attend_backward(&cache.self_attn, &d1, &mut grad.self_attn);
                &(&d1 + &dq) + &dk
            }
            NormMode::Pre => {
                let (dq, dk) =
                    self.self_attn
                        .attend_backward(&cache.self_attn, &d1, &mut grad.self_attn);
                &d1 + &self
                    .self_norm
                    .backward(&ln(&cache.self_ln), &(&dq + &dk), &mut grad.self_norm)
            }
            NormMode::Post => {
                let ds = self
                    .self_norm
                    .backward(&ln(&cache.self_ln), &d1, &mut grad.self_norm);
                let (dq, dk) =
                    self.self_attn
                        .attend_backward(&cache.self_attn, &ds, &mut grad.self_attn);
                &(&ds + &dq) + &dk
            }
        };

        (dx, d_context)
    }
}

impl Parameters for DecoderBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        self.self_norm.visit(&join(prefix, "self_norm"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.cross_norm.visit(&join(prefix, "cross_norm"), f);
        self.context_norm.visit(&join(prefix, "context_norm"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.ffw_norm.visit(&join(prefix, "ffw_norm"), f);
        self.ffw.visit(&join(prefix, "ffw"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        self.self_norm.visit_mut(&join(prefix, "self_norm"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.cross_norm.visit_mut(&join(prefix, "cross_norm"), f);
        self.context_norm.visit_mut(&join(prefix, "context_norm"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.ffw_norm.visit_mut(&join(prefix, "ffw_norm"), f);
        self.ffw.visit_mut(&join(prefix, "ffw"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;
    use crate::nn::gradcheck::{assert_close, numeric};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn probe(rows: usize, cols: usize) -> Mat {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i * 5 + j * 3) % 7) as f64 / 7.0 - 0.45)
    }

    #[test]
    fn equal_logits_average_values() {
        let q = Array2::zeros((2, 4));
        let k = gaussian(5, 4, 1.0, &mut rng(1));
        let v = gaussian(5, 3, 1.0, &mut rng(2));
        let (out, a) = attention(&q, &k, &v, 0.5).unwrap();
        let mean = v.mean_axis(Axis(0)).unwrap();
        for row in out.outer_iter() {
            for (x, m) in row.iter().zip(mean.iter()) {
                assert!((x - m).abs() < 1e-12);
            }
        }
        assert!(a.iter().all(|&w| (w - 0.2).abs() < 1e-12));
    }

    #[test]
    fn dominant_key_selects_its_value() {
        // logits 20 vs 0 on four other keys: weight = 1 / (1 + 4 e^-20)
        let q = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let k = Array2::from_shape_vec((5, 2), vec![20.0, 0., 0., 0., 0., 0., 0., 0., 0., 0.])
            .unwrap();
        let v = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64);
        let (out, a) = attention(&q, &k, &v, 1.0).unwrap();
        let expected_w = 1.0 / (1.0 + 4.0 * (-20.0f64).exp());
        assert!((a[[0, 0]] - expected_w).abs() < 1e-15);
        for j in 0..3 {
            assert!((out[[0, j]] - v[[0, j]]).abs() < 1e-3);
        }
    }

    #[test]
    fn single_key_is_passthrough() {
        let q = gaussian(1, 3, 1.0, &mut rng(3));
        let k = gaussian(1, 3, 1.0, &mut rng(4));
        let v = gaussian(1, 5, 1.0, &mut rng(5));
        let (out, a) = attention(&q, &k, &v, 1.0).unwrap();
        assert_eq!(a[[0, 0]], 1.0);
        assert_eq!(out, v);
    }

    #[test]
    fn kv_length_mismatch_is_shape_error() {
        let q = Array2::zeros((1, 2));
        let err = attention(&q, &Array2::zeros((3, 2)), &Array2::zeros((2, 2)), 1.0);
        assert!(matches!(err, Err(CodecError::Shape(_))));
    }

    #[test]
    fn rows_are_distributions() {
        let q = gaussian(6, 4, 3.0, &mut rng(6));
        let k = gaussian(9, 4, 3.0, &mut rng(7));
        let (_, a) = attention(&q, &k, &Array2::zeros((9, 1)), 1.0).unwrap();
        for row in a.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut q = gaussian(3, 4, 1.0, &mut rng(8));
        let mut k = gaussian(4, 4, 1.0, &mut rng(9));
        let mut v = gaussian(4, 4, 1.0, &mut rng(10));
        let w = probe(3, 4);
        let scale = 0.5;
        let (_, a) = attention(&q, &k, &v, scale).unwrap();
        let (dq, dk, dv) = attention_backward(&q, &k, &v, scale, &a, &w);
        let (k0, v0, q0) = (k.clone(), v.clone(), q.clone());
        let nq = numeric(&mut q, |q| (attention(q, &k0, &v0, scale).unwrap().0 * &w).sum());
        let nk = numeric(&mut k, |k| (attention(&q0, k, &v0, scale).unwrap().0 * &w).sum());
        let nv = numeric(&mut v, |v| (attention(&q0, &k0, v, scale).unwrap().0 * &w).sum());
        assert_close(&dq, &nq, 1e-3, "dQ");
        assert_close(&dk, &nk, 1e-3, "dK");
        assert_close(&dv, &nv, 1e-3, "dV");
    }

    #[test]
    fn heads_must_divide_dim() {
        assert!(matches!(
            MultiHeadAttention::new(10, 3, None, &mut rng(0)),
            Err(CodecError::Config(_))
        ));
    }

    #[test]
    fn zero_value_output_is_pure_residual() {
        let mut mha = MultiHeadAttention::new(8, 2, None, &mut rng(11)).unwrap();
        mha.value.zero_();
        mha.output.zero_();
        let q = gaussian(3, 8, 1.0, &mut rng(12));
        let kv = gaussian(5, 8, 1.0, &mut rng(13));
        assert_eq!(mha.forward(&q, &kv).unwrap(), q);
    }

    #[test]
    fn single_head_is_attention_plus_residual() {
        let mha = MultiHeadAttention::new(6, 1, None, &mut rng(14)).unwrap();
        let q = gaussian(2, 6, 1.0, &mut rng(15));
        let kv = gaussian(4, 6, 1.0, &mut rng(16));
        let (o, _) = attention(
            &mha.query.forward(&q),
            &mha.key.forward(&kv),
            &mha.value.forward(&kv),
            1.0 / 6f64.sqrt(),
        )
        .unwrap();
        let expected = &q + &mha.output.forward(&o);
        let got = mha.forward(&q, &kv).unwrap();
        assert!((&got - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn single_token_self_attention() {
        let mha = MultiHeadAttention::new(4, 2, None, &mut rng(17)).unwrap();
        let q = gaussian(1, 4, 1.0, &mut rng(18));
        let expected = &q + &mha.output.forward(&mha.value.forward(&q));
        let got = mha.self_attention(&q).unwrap();
        assert!((&got - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let mha = MultiHeadAttention::new(8, 2, None, &mut rng(19)).unwrap();
        let q = gaussian(5, 8, 1.0, &mut rng(20));
        let perm = [3, 0, 4, 1, 2];
        let qp = q.select(Axis(0), &perm);
        let out = mha.self_attention(&q).unwrap();
        let outp = mha.self_attention(&qp).unwrap();
        let expected = out.select(Axis(0), &perm);
        assert!((&outp - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn full_scale_shape() {
        let mha = MultiHeadAttention::new(768, 12, None, &mut rng(21)).unwrap();
        let q = gaussian(64, 768, 0.02, &mut rng(22));
        let kv = gaussian(256, 768, 1.0, &mut rng(23));
        assert_eq!(mha.forward(&q, &kv).unwrap().dim(), (64, 768));
    }

    fn block(mode: NormMode, seed: u64) -> DecoderBlock {
        let mut r = rng(seed);
        let mut b = DecoderBlock::new(8, 2, 4, mode, None, &mut r).unwrap();
        // perturb norms so their gradients are exercised
        b.visit_mut("", &mut |name, m| {
            if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
                *m += &gaussian(m.nrows(), m.ncols(), 0.2, &mut r);
            }
        });
        b
    }

    #[test]
    fn zeroed_blocks_are_identity() {
        for mode in [NormMode::Off, NormMode::Pre] {
            let mut b = block(mode, 30);
            b.zero_residual_branches();
            let x = gaussian(4, 8, 1.0, &mut rng(31));
            let ctx = gaussian(6, 8, 1.0, &mut rng(32));
            assert_eq!(b.forward(&x, &ctx).unwrap().0, x);
        }
    }

    #[test]
    fn empty_context_is_rejected() {
        let b = block(NormMode::Pre, 33);
        assert!(b.forward(&Array2::zeros((2, 8)), &Array2::zeros((0, 8))).is_err());
    }

    #[test]
    fn context_permutation_invariance() {
        let b = block(NormMode::Pre, 34);
        let x = gaussian(3, 8, 1.0, &mut rng(35));
        let ctx = gaussian(5, 8, 1.0, &mut rng(36));
        let ctxp = ctx.select(Axis(0), &[4, 2, 0, 3, 1]);
        let a = b.forward(&x, &ctx).unwrap().0;
        let c = b.forward(&x, &ctxp).unwrap().0;
        assert!((&a - &c).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        for (mode, seed) in [(NormMode::Off, 40), (NormMode::Pre, 41), (NormMode::Post, 42)] {
            let b = block(mode, seed);
            let mut x = gaussian(4, 8, 1.0, &mut rng(seed + 100));
            let mut ctx = gaussian(3, 8, 1.0, &mut rng(seed + 200));
            let w = probe(4, 8);
            let (_, cache) = b.forward(&x, &ctx).unwrap();
            let mut g = b.zeros_like();
            let (dx, dctx) = b.backward(&cache, &w, &mut g);

            let (x0, c0) = (x.clone(), ctx.clone());
            let nx = numeric(&mut x, |x| (b.forward(x, &c0).unwrap().0 * &w).sum());
            let nc = numeric(&mut ctx, |c| (b.forward(&x0, c).unwrap().0 * &w).sum());
            assert_close(&dx, &nx, 1e-3, &format!("{mode:?} dx"));
            assert_close(&dctx, &nc, 1e-3, &format!("{mode:?} dctx"));

            let grads: Vec<(String, Mat)> = g
                .named_parameters()
                .into_iter()
                .map(|(n, m)| (n, m.clone()))
                .collect();
            for (name, analytic) in grads {
                let mut probe_block = b.clone();
                let mut p = probe_block
                    .named_parameters()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .unwrap()
                    .1
                    .clone();
                let num = numeric(&mut p, |p| {
                    probe_block.visit_mut("", &mut |n, m| {
                        if n == name {
                            m.assign(p);
                        }
                    });
                    (probe_block.forward(&x0, &c0).unwrap().0 * &w).sum()
                });
                assert_close(&analytic, &num, 1e-3, &format!("{mode:?} {name}"));
            }
        }
    }
}
