//! Reference-network input assembly. The network itself and the
//! zero-initialized connectors live with the denoiser (see
//! [`crate::diffusion::reference_sites`] and [`crate::diffusion::inject`]).

use s3im_tensor::{Real, Tensor};

use crate::dataset::MaskSpec;
use crate::error::{Error, Result};
use crate::image::Image;

/// Nearest-neighbour resize of a `[B, C, h, w]` tensor to `H`×`W`.
pub fn resize_nearest<T: Real>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::InvalidArgument(format!("resize expects [B, C, H, W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(b * c * height * width);
    for plane in x.data().chunks(h * w) {
        for y in 0..height {
            let sy = y * h / height;
            for xx in 0..width {
                out.push(plane[sy * w + xx * w / width]);
            }
        }
    }
    Ok(Tensor::new(&[b, c, height, width], out)?)
}

/// Concatenates `(x_t, x_mask, x_m)` along channels into `[B, 7, H, W]`.
/// The mask is resized (nearest neighbour) when its resolution differs.
pub fn build_ref_input<T: Real>(x_t: &Tensor<T>, x_mask: &Tensor<T>, x_m: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x_t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::InvalidArgument(format!("x_t must be [B, 3, H, W], got {s:?}")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    if x_mask.shape() != s {
        return Err(Error::InvalidArgument(format!(
            "masked image {:?} does not match x_t {:?}",
            x_mask.shape(),
            s
        )));
    }
    let ms = x_m.shape();
    if ms.len() != 4 || ms[0] != b || ms[1] != 1 {
        return Err(Error::InvalidArgument(format!("mask must be [B, 1, h, w], got {ms:?}")));
    }
    let m = if ms[2] != h || ms[3] != w { resize_nearest(x_m, h, w)? } else { x_m.clone() };
    let hw = h * w;
    let mut out = Vec::with_capacity(b * 7 * hw);
    for i in 0..b {
        out.extend_from_slice(&x_t.data()[i * 3 * hw..(i + 1) * 3 * hw]);
        out.extend_from_slice(&x_mask.data()[i * 3 * hw..(i + 1) * 3 * hw]);
        out.extend_from_slice(&m.data()[i * hw..(i + 1) * hw]);
    }
    Ok(Tensor::new(&[b, 7, h, w], out)?)
}

/// `(x_mask, x_m)` for a batch of images and masks, in model space
/// (pixels mapped to `[-1, 1]`, then zeroed inside the mask).
pub fn masked_condition<T: Real>(images: &[&Image], masks: &[MaskSpec]) -> Result<(Tensor<T>, Tensor<T>)> {
    if images.len() != masks.len() || images.is_empty() {
        return Err(Error::InvalidArgument("need one mask per image".into()));
    }
    let (h, w) = (images[0].height, images[0].width);
    let mut xm = Vec::with_capacity(images.len() * 3 * h * w);
    let mut mm = Vec::with_capacity(images.len() * h * w);
    for (img, mask) in images.iter().zip(masks) {
        if img.height != h || img.width != w || mask.height != h || mask.width != w {
            return Err(Error::InvalidArgument("images and masks must share one size".into()));
        }
        let m = mask.mask();
        let planes = img.to_planes::<T>(2.0, -1.0);
        for c in 0..3 {
            for p in 0..h * w {
                xm.push(planes[c * h * w + p] * T::of(1.0 - m[p] as f64));
            }
        }
        mm.extend(m.iter().map(|&v| T::of(v as f64)));
    }
    let b = images.len();
    Ok((Tensor::new(&[b, 3, h, w], xm)?, Tensor::new(&[b, 1, h, w], mm)?))
}
