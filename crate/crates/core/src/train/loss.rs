//! Rate-distortion objective with an explicit backward pass.

use crate::error::{CodecError, Result};
use crate::image::ImageTensor;
use crate::model::Codec;
use crate::nn::{Mat, Parameters};
use crate::patch::{patchify, patchify_raw, unpatchify_raw};
use crate::perceptual::{perceptual_distance_with_grad, PerceptualBackend};

#[derive(Clone, Copy)]
pub enum Distortion<'a> {
    /// Mean squared error over all pixels and channels.
    Mse,
    /// Backend distance after bilinear resizing to `side × side`.
    Perceptual {
        backend: &'a dyn PerceptualBackend,
        side: usize,
    },
}

/// Batch means of the objective and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    /// Estimated bits per image.
    pub rate_bits: f64,
    pub bpp: f64,
    pub distortion: f64,
}

fn distortion_with_grad(kind: Distortion, reference: &[f64], recon: &[f64], side: usize) -> Result<(f64, Vec<f64>)> {
    match kind {
        Distortion::Mse => {
            let n = reference.len() as f64;
            let mut d = 0.0;
            let grad = recon
                .iter()
                .zip(reference)
                .map(|(r, x)| {
                    d += (r - x) * (r - x);
                    2.0 * (r - x) / n
                })
                .collect();
            Ok((d / n, grad))
        }
        Distortion::Perceptual { backend, side: up } => {
            perceptual_distance_with_grad(backend, reference, recon, side, side, up)
        }
    }
}

/// `mean_i [ bits_i / pixels + λ · D(x_i, x̂_i) ]` where `x̂_i` is decoded,
/// unclamped, from `encode(x_i) + noise_i`. Gradients are accumulated into
/// `grad` when given.
pub fn rd_loss(
    codec: &Codec,
    images: &[ImageTensor],
    noise: &[Mat],
    lambda: f64,
    distortion: Distortion,
    mut grad: Option<&mut Codec>,
) -> Result<LossTerms> {
    if images.is_empty() || images.len() != noise.len() {
        return Err(CodecError::InvalidInput(format!(
            "{} images with {} noise draws",
            images.len(),
            noise.len()
        )));
    }
    let cfg = &codec.config;
    let side = cfg.tile_size;
    let pixels = (side * side) as f64;
    let batch = images.len() as f64;
    let mut prior_grad = grad.as_ref().map(|_| codec.prior.zeros_like());
    let mut total = LossTerms {
        loss: 0.0,
        rate_bits: 0.0,
        bpp: 0.0,
        distortion: 0.0,
    };
    for (i, (image, u)) in images.iter().zip(noise).enumerate() {
        if image.height() != side || image.width() != side {
            return Err(CodecError::Shape(format!(
                "training image {i} is {}x{}, expected {side}x{side}",
                image.height(),
                image.width()
            )));
        }
        let patches = patchify(image, cfg.patch_size)?;
        let (latent, enc_cache) = codec.encoder.forward(&patches)?;
        if latent.raw_dim() != u.raw_dim() {
            return Err(CodecError::Shape("noise shape differs from the latent".into()));
        }
        let noisy = &latent + u;
        let (bits, d_rate) = match prior_grad.as_mut() {
            Some(pg) => {
                pg.zero_();
                codec.prior.rate_bits_with_grad(&noisy, pg)?
            }
            None => (codec.prior.rate_bits(&noisy)?, Mat::zeros((0, 0))),
        };
        let (recon, dec_cache) = codec.decoder.forward(&noisy)?;
        let raw = unpatchify_raw(&recon, cfg.patch_size, side, side)?;
        let (dist, d_raw) = distortion_with_grad(distortion, image.data(), &raw, side)?;
        let loss = bits / pixels + lambda * dist;
        if !loss.is_finite() {
            return Err(CodecError::NonFinite(format!(
                "loss on batch item {i}: rate {bits} bits, distortion {dist}, latent range [{}, {}]",
                latent.fold(f64::INFINITY, |a, &b| a.min(b)),
                latent.fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
            )));
        }
        total.loss += loss / batch;
        total.rate_bits += bits / batch;
        total.distortion += dist / batch;

        if let Some(g) = grad.as_deref_mut() {
            let rate_scale = 1.0 / (pixels * batch);
            g.prior.add_scaled(rate_scale, prior_grad.as_ref().expect("allocated with grad"));
            let d_img: Vec<f64> = d_raw.iter().map(|v| v * lambda / batch).collect();
            let d_patches = patchify_raw(&d_img, side, side, cfg.patch_size)?;
            let mut d_latent = codec.decoder.backward(&dec_cache, &d_patches, &mut g.decoder);
            d_latent.scaled_add(rate_scale, &d_rate);
            codec.encoder.backward(&enc_cache, &d_latent, &mut g.encoder);
        }
    }
    total.bpp = total.rate_bits / pixels;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::entropy::uniform_noise;
    use crate::nn::gradcheck;
    use crate::perceptual::FeatureNet;
    use crate::synthetic::smooth_image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Codec {
        let cfg = ModelConfig {
            tile_size: 32,
            patch_size: 16,
            num_queries: 3,
            dim: 8,
            depth: 1,
            heads: 2,
            prior_filters: vec![3, 3],
            ..ModelConfig::toy()
        };
        Codec::new(cfg, 11).unwrap()
    }

    fn batch(codec: &Codec, n: usize) -> (Vec<ImageTensor>, Vec<Mat>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = codec.config.tile_size;
        let images = (0..n).map(|i| smooth_image(s, s, 40 + i as u64)).collect();
        let noise = (0..n)
            .map(|_| uniform_noise(codec.config.num_queries, codec.config.dim, &mut rng))
            .collect();
        (images, noise)
    }

    #[test]
    fn identical_reconstruction_has_zero_mse() {
        let x = vec![0.25, 0.5, 0.75];
        assert_eq!(distortion_with_grad(Distortion::Mse, &x, &x, 1).unwrap().0, 0.0);
    }

    #[test]
    fn lambda_weights_only_the_distortion() {
        let c = tiny();
        let (imgs, noise) = batch(&c, 2);
        let a = rd_loss(&c, &imgs, &noise, 1.0, Distortion::Mse, None).unwrap();
        let b = rd_loss(&c, &imgs, &noise, 3.0, Distortion::Mse, None).unwrap();
        assert_eq!(a.rate_bits, b.rate_bits);
        assert!((b.loss - a.loss - 2.0 * a.distortion).abs() < 1e-12);
        assert!((a.loss - (a.bpp + a.distortion)).abs() < 1e-12);
    }

    /// Compares every entry of small tensors and `probes` evenly spaced
    /// entries of large ones against central differences.
    /// An entry passes when central differences at any of `steps` agree.
    /// Small steps avoid ReLU kinks in the feature network, larger ones
    /// avoid roundoff on near-zero gradients.
    fn check_gradients(distortion: Distortion, lambda: f64, steps: &[f64], probes: usize) {
        let c = tiny();
        let (imgs, noise) = batch(&c, 2);
        let mut grad = c.zeros_like();
        rd_loss(&c, &imgs, &noise, lambda, distortion, Some(&mut grad)).unwrap();
        let loss_at = |k: usize, idx: usize, v: f64| {
            let mut trial = c.clone();
            trial.named_parameters_mut().swap_remove(k).1.as_slice_mut().unwrap()[idx] = v;
            rd_loss(&trial, &imgs, &noise, lambda, distortion, None).unwrap().loss
        };
        for (k, (name, g)) in grad.named_parameters().into_iter().enumerate() {
            let values = c.named_parameters()[k].1.as_slice().unwrap().to_vec();
            let stride = (values.len() / probes).max(1);
            for idx in (0..values.len()).step_by(stride) {
                let x = values[idx];
                let analytic = g.as_slice().unwrap()[idx];
                let (e, numeric) = steps
                    .iter()
                    .map(|&h| {
                        let numeric = (loss_at(k, idx, x + h) - loss_at(k, idx, x - h)) / (2.0 * h);
                        (gradcheck::rel_err(analytic, numeric), numeric)
                    })
                    .fold((f64::INFINITY, 0.0), |best, c| if c.0 < best.0 { c } else { best });
                assert!(e <= 1e-3, "{name}[{idx}]: analytic {analytic} vs numeric {numeric} (rel {e})");
            }
        }
    }

    #[test]
    fn mse_gradients_match_finite_differences() {
        check_gradients(Distortion::Mse, 5.0, &[gradcheck::STEP], usize::MAX);
    }

    #[test]
    fn perceptual_gradients_match_finite_differences() {
        let net = FeatureNet::random(&[(2, 4), (2, 4)], 9);
        check_gradients(Distortion::Perceptual { backend: &net, side: 48 }, 2.0, &[1e-6, 1e-4], 64);
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let c = tiny();
        let (imgs, noise) = batch(&c, 2);
        assert!(rd_loss(&c, &imgs, &noise[..1], 1.0, Distortion::Mse, None).is_err());
    }
}
