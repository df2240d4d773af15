//! Principal components of latent queries ("meta-queries") and their
//! projection through decoder cross-attention.

use nalgebra::DMatrix;

use crate::attention::{AttentionRecord, AttentionRole, Stage};
use crate::error::{CodecError, Result};
use crate::image::ImageTensor;
use crate::nn::Mat;
use crate::transforms::LatentCode;

/// Number of components kept for rendering.
pub const META_COMPONENTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// Row mean removed before the decomposition, `1 × d`.
    pub mean: Mat,
    /// Orthonormal principal directions as rows, `k × d`, in order of
    /// decreasing variance.
    pub components: Mat,
    /// Variance along every principal direction (`min(n, d)` values,
    /// nonincreasing), including the ones not kept.
    pub explained_variance: Vec<f64>,
}

impl Pca {
    /// Fits `k` components to the rows of `data`. Each component's
    /// largest-magnitude coordinate is made positive.
    pub fn fit(data: &Mat, k: usize) -> Result<Self> {
        let (n, d) = data.dim();
        if n < k.max(2) {
            return Err(CodecError::InvalidInput(format!(
                "PCA with {k} components needs at least {} rows, got {n}",
                k.max(2)
            )));
        }
        let mean = data.mean_axis(ndarray::Axis(0)).expect("rows").insert_axis(ndarray::Axis(0));
        let centered = data - &mean;
        let m = DMatrix::from_row_iterator(n, d, centered.iter().copied());
        let cov = m.transpose() * &m / (n - 1) as f64;
        let eigen = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
        let variance: Vec<f64> = order.iter().take(n.min(d)).map(|&i| eigen.eigenvalues[i].max(0.0)).collect();
        let tol = variance[0] * 1e-12;
        let rank = variance.iter().filter(|&&v| v > tol).count();
        if rank < k {
            return Err(CodecError::InvalidInput(format!(
                "centered latent has rank {rank}, fewer than the {k} requested components"
            )));
        }
        let mut components = Mat::zeros((k, d));
        for (c, &i) in order.iter().take(k).enumerate() {
            let col = eigen.eigenvectors.column(i);
            let pivot = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for j in 0..d {
                components[[c, j]] = sign * col[j];
            }
        }
        Ok(Self {
            mean,
            components,
            explained_variance: variance,
        })
    }

    /// Coordinates of `data`'s rows along the kept components.
    pub fn project(&self, data: &Mat) -> Mat {
        (data - &self.mean).dot(&self.components.t())
    }

    /// Rows rebuilt from their first `k` coordinates.
    pub fn reconstruct(&self, data: &Mat, k: usize) -> Mat {
        let c = self.components.slice(ndarray::s![..k, ..]);
        (data - &self.mean).dot(&c.t()).dot(&c) + &self.mean
    }
}

/// Meta-queries of one latent or of several tiles' latents fitted jointly.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaQueries {
    pub pca: Pca,
    /// Per latent, its `N × 3` projection.
    pub projections: Vec<Mat>,
}

impl MetaQueries {
    /// Per-column `(min, max)` across every projection.
    pub fn ranges(&self) -> [(f64, f64); META_COMPONENTS] {
        let mut r = [(f64::INFINITY, f64::NEG_INFINITY); META_COMPONENTS];
        for p in &self.projections {
            for row in p.rows() {
                for (c, v) in row.iter().enumerate() {
                    r[c] = (r[c].0.min(*v), r[c].1.max(*v));
                }
            }
        }
        r
    }
}

pub fn pca_meta_queries(latent: &LatentCode) -> Result<MetaQueries> {
    pca_meta_queries_joint(std::slice::from_ref(latent))
}

/// One fit over the stacked rows of all `latents`, so that colors are
/// comparable across tiles.
pub fn pca_meta_queries_joint(latents: &[LatentCode]) -> Result<MetaQueries> {
    let first = latents
        .first()
        .ok_or_else(|| CodecError::InvalidInput("no latents to analyse".into()))?;
    if first.rows() < META_COMPONENTS {
        return Err(CodecError::InvalidInput(format!(
            "meta-queries need at least {META_COMPONENTS} latent rows, got {}",
            first.rows()
        )));
    }
    let views: Vec<_> = latents.iter().map(|l| l.values().view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| CodecError::Shape(e.to_string()))?;
    let pca = Pca::fit(&stacked, META_COMPONENTS)?;
    let projections = latents.iter().map(|l| pca.project(l.values())).collect();
    Ok(MetaQueries { pca, projections })
}

/// `(1/H) Σ_h A_h · P`: decoder cross-attention of `layer`, averaged over
/// heads, applied to the `N × 3` meta-query projection `meta`.
pub fn decoder_attention_projection(records: &[AttentionRecord], meta: &Mat, layer: usize) -> Result<Mat> {
    let heads: Vec<&Mat> = records
        .iter()
        .filter(|r| r.stage == Stage::Decoder && r.role == AttentionRole::Cross && r.layer == layer)
        .map(|r| &r.weights)
        .collect();
    if heads.is_empty() {
        return Err(CodecError::InvalidInput(format!(
            "no decoder cross-attention records for layer {layer}"
        )));
    }
    let mut acc = Mat::zeros((heads[0].nrows(), meta.ncols()));
    for a in &heads {
        if a.ncols() != meta.nrows() || a.nrows() != acc.nrows() {
            return Err(CodecError::Shape(format!(
                "attention {:?} cannot project {} meta-queries",
                a.dim(),
                meta.nrows()
            )));
        }
        acc += &a.dot(meta);
    }
    Ok(acc / heads.len() as f64)
}

/// Treats the three columns as Y, Cb, Cr, each affinely mapped from its
/// `ranges` entry onto the channel's valid range, converts to RGB and
/// upsamples the patch grid to `side × side` by nearest neighbour.
pub fn render_projection(
    projection: &Mat,
    ranges: &[(f64, f64); META_COMPONENTS],
    side: usize,
) -> Result<ImageTensor> {
    let tokens = projection.nrows();
    let grid = (tokens as f64).sqrt().round() as usize;
    if grid * grid != tokens || grid == 0 || !side.is_multiple_of(grid) || projection.ncols() != META_COMPONENTS {
        return Err(CodecError::Shape(format!(
            "{:?} projection does not tile a {side}x{side} image",
            projection.dim()
        )));
    }
    let unit = |v: f64, (lo, hi): (f64, f64)| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let rgb: Vec<[f64; 3]> = projection
        .rows()
        .into_iter()
        .map(|r| {
            let y = unit(r[0], ranges[0]);
            let cb = unit(r[1], ranges[1]) - 0.5;
            let cr = unit(r[2], ranges[2]) - 0.5;
            [y + 1.402 * cr, y - 0.344_136 * cb - 0.714_136 * cr, y + 1.772 * cb]
        })
        .collect();
    let cell = side / grid;
    let mut data = Vec::with_capacity(side * side * 3);
    for py in 0..side {
        for px in 0..side {
            data.extend_from_slice(&rgb[(py / cell) * grid + px / cell]);
        }
    }
    ImageTensor::from_clamped(side, side, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cyclic Jacobi eigensolver for symmetric matrices.
    fn jacobi_eigenvalues(mut a: Mat) -> Vec<f64> {
        let n = a.nrows();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[[i, j]].powi(2)).sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[[k, p]], a[[k, q]]);
                        a[[k, p]] = c * akp - s * akq;
                        a[[k, q]] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                        a[[p, k]] = c * apk - s * aqk;
                        a[[q, k]] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    fn random(n: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
    }

    fn covariance(x: &Mat) -> Mat {
        let c = x - &x.mean_axis(ndarray::Axis(0)).unwrap();
        c.t().dot(&c) / (x.nrows() - 1) as f64
    }

    #[test]
    fn agrees_with_brute_force_eigensolver() {
        let x = random(8, 5, 1);
        let pca = Pca::fit(&x, 3).unwrap();
        let ev = jacobi_eigenvalues(covariance(&x));
        for (a, b) in pca.explained_variance.iter().zip(&ev) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        // Reconstruction error with k components equals the tail eigenvalue
        // sum and is nonincreasing in k.
        let total: f64 = ev.iter().sum();
        let mut last = f64::INFINITY;
        let full = Pca::fit(&x, 5).unwrap();
        for k in 0..=5 {
            let r = &x - &full.reconstruct(&x, k);
            let err = r.mapv(|v| v * v).sum() / 7.0;
            let tail: f64 = ev[k..].iter().sum();
            assert!((err - tail).abs() < 1e-10 * total, "k={k}: {err} vs {tail}");
            assert!(err <= last + 1e-12);
            last = err;
        }
    }

    #[test]
    fn variance_sums_to_the_trace_on_wide_rank_deficient_input() {
        for seed in 0..200 {
            let x = random(4, 8, seed);
            let pca = Pca::fit(&x, 3).unwrap();
            let trace: f64 = (0..8).map(|i| covariance(&x)[[i, i]]).sum();
            let total: f64 = pca.explained_variance.iter().sum();
            assert!((total - trace).abs() < 1e-12 * trace, "seed {seed}: {total} vs {trace}");
        }
    }

    #[test]
    fn exact_low_rank_is_recovered() {
        let mut x = Array2::zeros((6, 10));
        let coords = random(6, 3, 2);
        for i in 0..6 {
            for c in 0..3 {
                x[[i, 2 * c + 1]] = coords[[i, c]];
            }
        }
        let pca = Pca::fit(&x, 3).unwrap();
        assert!(pca.explained_variance[3..].iter().all(|v| v.abs() < 1e-14));
        // components span exactly coordinates 1, 3 and 5
        for row in pca.components.rows() {
            let inside: f64 = [1, 3, 5].iter().map(|&j| row[j] * row[j]).sum();
            assert!((inside - 1.0).abs() < 1e-12);
        }
        let err = (&x - &pca.reconstruct(&x, 3)).mapv(f64::abs).sum();
        assert!(err < 1e-12);
    }

    #[test]
    fn rank_deficiency_is_named() {
        let mut x = Array2::zeros((5, 4));
        for i in 0..5 {
            x[[i, 0]] = i as f64;
            x[[i, 1]] = 2.0 * i as f64;
        }
        let err = Pca::fit(&x, 3).unwrap_err().to_string();
        assert!(err.contains("rank 1"), "{err}");
        let short = LatentCode::continuous(random(2, 4, 1));
        assert!(pca_meta_queries(&short).is_err());
    }

    #[test]
    fn sign_convention() {
        let pca = Pca::fit(&random(9, 6, 3), 3).unwrap();
        for row in pca.components.rows() {
            let pivot = row.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(pivot > 0.0);
        }
        let gram = pca.components.dot(&pca.components.t());
        for i in 0..3 {
            for j in 0..3 {
                assert!((gram[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    fn decoder_record(layer: usize, head: usize, w: Mat) -> AttentionRecord {
        AttentionRecord {
            stage: Stage::Decoder,
            layer,
            head,
            role: AttentionRole::Cross,
            weights: w,
        }
    }

    #[test]
    fn one_hot_rows_select_meta_queries() {
        let meta = random(4, 3, 4);
        let mut a = Array2::zeros((16, 4));
        for t in 0..16 {
            a[[t, (t * 7) % 4]] = 1.0;
        }
        let recs = vec![decoder_record(1, 0, a.clone()), decoder_record(1, 1, a)];
        let p = decoder_attention_projection(&recs, &meta, 1).unwrap();
        for t in 0..16 {
            assert_eq!(p.row(t), meta.row((t * 7) % 4));
        }
        assert!(decoder_attention_projection(&recs, &meta, 0).is_err());
    }

    #[test]
    fn uniform_rows_give_the_meta_query_mean() {
        let meta = Array2::from_shape_vec((4, 3), vec![1.0, 2.0, 4.0, -3.0, 0.5, 8.0, 0.0, 0.0, 1.0, 6.0, -2.5, 3.0]).unwrap();
        let recs = vec![decoder_record(0, 0, Array2::from_elem((16, 4), 0.25))];
        let p = decoder_attention_projection(&recs, &meta, 0).unwrap();
        let mean = meta.mean_axis(ndarray::Axis(0)).unwrap();
        for row in p.rows() {
            assert_eq!(row, mean);
        }
        let img = render_projection(&p, &[(-5.0, 5.0); 3], 32).unwrap();
        assert!(img.data().chunks(3).all(|px| px == &img.data()[..3]));
    }

    #[test]
    fn gray_meta_queries_render_gray() {
        // Cb = Cr = mid-range gives R = G = B = Y.
        let p = Array2::from_shape_vec((4, 3), vec![0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 0.25, 1.0, 1.0]).unwrap();
        let img = render_projection(&p, &[(0.0, 1.0), (0.0, 2.0), (0.0, 2.0)], 32).unwrap();
        for (i, px) in img.data().chunks(3).enumerate() {
            let (y, x) = (i / 32, i % 32);
            let expected = p[[(y / 16) * 2 + x / 16, 0]];
            assert!(px.iter().all(|v| (v - expected).abs() < 1e-12));
        }
    }

    proptest! {
        #[test]
        fn projection_is_linear_in_attention(t in 0.0f64..1.0, seed in any::<u64>()) {
            let meta = random(5, 3, seed);
            let soft = |s: u64| {
                let r = random(9, 5, s).mapv(f64::exp);
                let sums = r.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
                r / &sums
            };
            let (a, b) = (soft(seed ^ 1), soft(seed ^ 2));
            let mix = &a * t + &b * (1.0 - t);
            let pa = decoder_attention_projection(&[decoder_record(0, 0, a)], &meta, 0).unwrap();
            let pb = decoder_attention_projection(&[decoder_record(0, 0, b)], &meta, 0).unwrap();
            let pm = decoder_attention_projection(&[decoder_record(0, 0, mix)], &meta, 0).unwrap();
            let expected = &pa * t + &pb * (1.0 - t);
            prop_assert!((&pm - &expected).iter().all(|v| v.abs() < 1e-12));
        }

        #[test]
        fn explained_variance_is_nonincreasing(seed in any::<u64>(), n in 4usize..12, d in 3usize..9) {
            let pca = Pca::fit(&random(n, d, seed), 3).unwrap();
            prop_assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn invariant_to_rotations_outside_the_top_subspace(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU) {
            // Latent rows lie in span(e0..e3) plus a small e4/e5 residual;
            // rotating the residual plane leaves the top-3 meta-queries alone.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = Array2::zeros((8, 6));
            for i in 0..8 {
                for (j, scale) in [(0, 5.0), (1, 3.0), (2, 2.0), (4, 0.1), (5, 0.05)] {
                    x[[i, j]] = scale * rng.random_range(-1.0..1.0);
                }
            }
            let mut r = x.clone();
            let (c, s) = (angle.cos(), angle.sin());
            for i in 0..8 {
                let (a, b) = (x[[i, 4]], x[[i, 5]]);
                r[[i, 4]] = c * a - s * b;
                r[[i, 5]] = s * a + c * b;
            }
            let m1 = pca_meta_queries(&LatentCode::continuous(x)).unwrap();
            let m2 = pca_meta_queries(&LatentCode::continuous(r)).unwrap();
            prop_assert!((&m1.projections[0] - &m2.projections[0]).iter().all(|v| v.abs() < 1e-9));
        }
    }
}
