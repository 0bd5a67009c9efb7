use rand::Rng;
use s3im_tensor::Real;

use crate::dataset::{crop_patches_avoiding, MaskSpec};
use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::psrl::{StyleEmbedding, StyleNet};
use crate::rng;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Mean cosine over all cross pairs of two embedding sets.
pub fn cross_set_cosine(a: &[StyleEmbedding], b: &[StyleEmbedding]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("cross-set cosine needs two non-empty sets".into()));
    }
    let mut sum = 0.0;
    for x in a {
        for y in b {
            let d: f64 = x.0.iter().zip(&y.0).map(|(p, q)| *p as f64 * *q as f64).sum();
            let n = (x.norm() as f64 * y.norm() as f64).max(1e-300);
            sum += d / n;
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

/// `k` possibly overlapping `p`×`p` crops lying entirely inside the mask.
pub fn region_patches(image: &Image, mask: &MaskSpec, k: usize, p: usize, seed: u64) -> Result<Vec<Image>> {
    let r = mask.rect;
    if r.w < p || r.h < p {
        return Err(Error::Infeasible(format!("mask {}x{} too small for a {p}x{p} patch", r.w, r.h)));
    }
    let mut g = rng::stream(seed, "eval-region", 0);
    Ok((0..k)
        .map(|_| {
            let x = r.x + g.random_range(0..=r.w - p);
            let y = r.y + g.random_range(0..=r.h - p);
            image.crop(&Rect::new(x, y, p, p))
        })
        .collect())
}

/// `k` disjoint crops avoiding the mask.
pub fn context_patches(image: &Image, mask: &MaskSpec, k: usize, p: usize, seed: u64) -> Result<Vec<Image>> {
    crop_patches_avoiding(image, 0, k, p, mask.avoid(), rng::derive_seed(seed, "eval-context", 0))
        .map(|ps| ps.patches)
        .map_err(|e| match e {
            Error::Infeasible(_) => Error::Infeasible(format!("mask too large: no room for {k} context patches of size {p}")),
            other => other,
        })
}

/// Style-cosine between the masked region of `region_image` and the
/// unmasked context of `context_image`.
pub fn style_cosine_between<T: Real>(
    net: &StyleNet<T>,
    region_image: &Image,
    region_mask: &MaskSpec,
    context_image: &Image,
    context_mask: &MaskSpec,
    k: usize,
    p: usize,
    seed: u64,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("style cosine needs k >= 1".into()));
    }
    let inside = region_patches(region_image, region_mask, k, p, seed)?;
    let outside = context_patches(context_image, context_mask, k, p, seed)?;
    let a = net.embed_batch(&inside.iter().collect::<Vec<_>>())?;
    let b = net.embed_batch(&outside.iter().collect::<Vec<_>>())?;
    cross_set_cosine(&a, &b)
}

/// Mean pairwise cosine between `k` patches inside the mask and `k`
/// outside it, in one image.
pub fn style_cosine_consistency<T: Real>(net: &StyleNet<T>, image: &Image, mask: &MaskSpec, k: usize, p: usize, seed: u64) -> Result<f64> {
    style_cosine_between(net, image, mask, image, mask, k, p, seed)
}

/// `10 log10(1 / MSE)` over unmasked pixels on the `[0, 1]` scale.
pub fn psnr_unmasked(generated: &Image, reference: &Image, mask: &MaskSpec) -> Result<f64> {
    if generated.height != reference.height || generated.width != reference.width || mask.height != generated.height || mask.width != generated.width {
        return Err(Error::InvalidArgument("psnr inputs differ in size".into()));
    }
    let (mut se, mut n) = (0.0f64, 0usize);
    for y in 0..generated.height {
        for x in 0..generated.width {
            if mask.is_masked(x, y) {
                continue;
            }
            for (a, b) in generated.get(x, y).iter().zip(&reference.get(x, y)) {
                se += (*a as f64 - *b as f64).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("psnr needs a non-empty unmasked region".into()));
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { PSNR_CAP_DB } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB) })
}
