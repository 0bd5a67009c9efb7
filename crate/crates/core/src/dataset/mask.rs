use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::rng;

pub const MIN_FRACTION: f64 = 0.1;
pub const MAX_FRACTION: f64 = 0.5;
const AREA_TOLERANCE: f64 = 0.02;

/// A rectangular inpainting mask; pixels inside `rect` are to be generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub height: usize,
    pub width: usize,
    pub rect: Rect,
}

impl MaskSpec {
    pub fn new(height: usize, width: usize, rect: Rect) -> Result<Self> {
        if rect.x + rect.w > width || rect.y + rect.h > height {
            return Err(Error::InvalidArgument(format!(
                "mask rectangle {:?} exceeds the {width}x{height} image",
                rect
            )));
        }
        Ok(Self { height, width, rect })
    }

    /// A mask with nothing to generate.
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            rect: Rect::new(0, 0, 0, 0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rect.area() == 0
    }

    pub fn fraction(&self) -> f64 {
        self.rect.area() as f64 / (self.height * self.width) as f64
    }

    #[inline]
    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        self.rect.contains(x, y)
    }

    /// Binary map `m`, row-major, 1 inside the rectangle.
    pub fn mask(&self) -> Vec<f32> {
        let mut m = vec![0.0; self.height * self.width];
        for y in self.rect.y..self.rect.y + self.rect.h {
            m[y * self.width + self.rect.x..y * self.width + self.rect.x + self.rect.w].fill(1.0);
        }
        m
    }

    /// `x * (1 - m)`.
    pub fn masked_image(&self, image: &Image) -> Image {
        let mut out = image.clone();
        let m = self.mask();
        for (px, mv) in out.data.chunks_mut(3).zip(&m) {
            px.iter_mut().for_each(|v| *v *= 1.0 - mv);
        }
        out
    }

    /// The rectangle as a region to avoid when cropping context patches.
    pub fn avoid(&self) -> Option<Rect> {
        (!self.is_empty()).then_some(self.rect)
    }
}

/// A fully interior rectangle covering `fraction` of the image (±2%),
/// aspect ratio in `[1/2, 2]`.
pub fn make_mask(image: &Image, fraction: f64, seed: u64) -> Result<MaskSpec> {
    make_mask_dims(image.height, image.width, fraction, seed)
}

pub fn make_mask_dims(height: usize, width: usize, fraction: f64, seed: u64) -> Result<MaskSpec> {
    if !(MIN_FRACTION..=MAX_FRACTION).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "mask fraction {fraction} outside [{MIN_FRACTION}, {MAX_FRACTION}]"
        )));
    }
    if height < 4 || width < 4 {
        return Err(Error::InvalidArgument(format!("image {height}x{width} too small for an interior mask")));
    }
    let target = fraction * (height * width) as f64;
    let mut r = rng::stream(seed, "mask", 0);
    for _ in 0..1000 {
        let aspect: f64 = r.random_range(0.5..=2.0);
        let w = ((target * aspect).sqrt().round() as usize).clamp(1, width - 2);
        let h = ((target / w as f64).round() as usize).clamp(1, height - 2);
        if ((w * h) as f64 - target).abs() > AREA_TOLERANCE * target {
            continue;
        }
        let x = r.random_range(1..=width - 1 - w);
        let y = r.random_range(1..=height - 1 - h);
        return MaskSpec::new(height, width, Rect::new(x, y, w, h));
    }
    Err(Error::Infeasible(format!("no interior rectangle of fraction {fraction} in {height}x{width}")))
}
