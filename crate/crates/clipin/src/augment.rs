//! Deterministic two-view augmentation.
//!
//! Images: horizontal flip (prob 0.5) then per-channel brightness jitter
//! (gain uniform in [1-s, 1+s], clamped back to [0,1]). Text: random token
//! masking, the desk-scale stand-in for caption rewriting. Each view draws
//! from its own RNG sub-stream, so the two views of a sample are independent
//! and swapping the sub-streams swaps the views exactly.

use crate::error::{Error, Result};
use crate::model::{MASK_TOKEN, PAD_TOKEN};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    /// Probability of mirroring the image horizontally.
    pub flip_prob: f64,
    /// Per-channel gain is drawn from [1 - s, 1 + s].
    pub jitter_strength: f64,
    /// Probability of replacing a non-pad token with the mask token.
    pub token_mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> AugmentConfig {
        AugmentConfig { flip_prob: 0.5, jitter_strength: 0.1, token_mask_prob: 0.1 }
    }
}

impl AugmentConfig {
    /// No-op configuration used by evaluation forwards.
    pub fn identity() -> AugmentConfig {
        AugmentConfig { flip_prob: 0.0, jitter_strength: 0.0, token_mask_prob: 0.0 }
    }
}

fn check_pixels(values: &[f64]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRangePixels { index: i, value: v });
        }
    }
    Ok(())
}

/// One augmented view of a [3,H,W] image. Draw order is fixed (flip decision,
/// then three channel gains) so a given sub-stream always produces the same
/// view regardless of the config values.
pub fn augment_image_view(image: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                op: "augment_image",
                detail: format!("expected [3,H,W], got {other:?}"),
            })
        }
    };
    check_pixels(image.values())?;
    let flip = rng.bernoulli(cfg.flip_prob);
    let gains = [
        rng.uniform(1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength),
        rng.uniform(1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength),
        rng.uniform(1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength),
    ];
    let src = image.values();
    let mut out = vec![0.0; src.len()];
    for c in 0..3 {
        let gain = gains[c];
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                let v = src[c * h * w + y * w + sx] * gain;
                out[c * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// The two training views of one image, from disjoint sub-streams of the
/// sample's augmentation stream.
pub fn augment_image(image: &Tensor, cfg: &AugmentConfig, rng: &Rng) -> Result<(Tensor, Tensor)> {
    let v1 = augment_image_view(image, cfg, &mut rng.stream("view1"))?;
    let v2 = augment_image_view(image, cfg, &mut rng.stream("view2"))?;
    Ok((v1, v2))
}

/// One augmented view of a token sequence: every non-pad token is
/// independently replaced by the mask token with `token_mask_prob`.
pub fn augment_text_view(tokens: &[u32], cfg: &AugmentConfig, rng: &mut Rng) -> Vec<u32> {
    tokens
        .iter()
        .map(|&t| {
            if t != PAD_TOKEN && rng.bernoulli(cfg.token_mask_prob) {
                MASK_TOKEN
            } else {
                t
            }
        })
        .collect()
}

/// The two training views of one caption.
pub fn augment_text(tokens: &[u32], cfg: &AugmentConfig, rng: &Rng) -> (Vec<u32>, Vec<u32>) {
    let v1 = augment_text_view(tokens, cfg, &mut rng.stream("view1"));
    let v2 = augment_text_view(tokens, cfg, &mut rng.stream("view2"));
    (v1, v2)
}
