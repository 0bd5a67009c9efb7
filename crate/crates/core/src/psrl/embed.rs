use super::model::{StyleEmbedding, StyleNet};
use crate::dataset::{crop_patches_avoiding, MaskSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use s3im_tensor::Real;

/// `k` patch embeddings drawn from outside the mask, preceded by their
/// re-normalized mean (token 0).
pub fn embed_style<T: Real>(net: &StyleNet<T>, image: &Image, mask: Option<&MaskSpec>, k: usize, p: usize, seed: u64) -> Result<Vec<StyleEmbedding>> {
    if k == 0 {
        return Err(Error::InvalidArgument("style embedding needs k >= 1".into()));
    }
    let avoid = mask.and_then(|m| m.avoid());
    let ps = crop_patches_avoiding(image, 0, k, p, avoid, seed).map_err(|e| match e {
        Error::Infeasible(_) => Error::Infeasible(format!("unmasked area too small for {k} disjoint patches of size {p}")),
        other => other,
    })?;
    let refs: Vec<&Image> = ps.patches.iter().collect();
    let tokens = net.embed_batch(&refs)?;
    let mut out = Vec::with_capacity(k + 1);
    out.push(StyleEmbedding::pooled(&tokens)?);
    out.extend(tokens);
    Ok(out)
}
