use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::rng;

/// Total placement attempts before giving up.
pub const MAX_ATTEMPTS: usize = 10_000;
/// Consecutive rejections after which a partial placement is discarded and
/// sampling restarts; random sequential placement can jam before `n` fits.
const RESTART_AFTER: usize = 400;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub source: usize,
    pub size: usize,
    pub patches: Vec<Image>,
    /// Top-left corner `(x, y)` of each patch.
    pub coords: Vec<(usize, usize)>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn rects(&self) -> Vec<Rect> {
        self.coords.iter().map(|&(x, y)| Rect::new(x, y, self.size, self.size)).collect()
    }
}

/// Rejection-samples `n` pairwise-disjoint `p`×`p` windows inside a
/// `width`×`height` canvas, none touching `avoid`.
pub fn place_patches(width: usize, height: usize, n: usize, p: usize, avoid: Option<Rect>, seed: u64) -> Result<Vec<(usize, usize)>> {
    let infeasible = || Error::Infeasible(format!("cannot place {n} disjoint patches of size {p} in a {width}x{height} image"));
    if p == 0 || p > width || p > height {
        return Err(infeasible());
    }
    let free_area = width * height - avoid.map_or(0, |r| r.area());
    if n * p * p > free_area {
        return Err(infeasible());
    }
    let mut r = rng::stream(seed, "patches", 0);
    let mut placed: Vec<Rect> = Vec::with_capacity(n);
    let mut streak = 0;
    for _ in 0..MAX_ATTEMPTS {
        if placed.len() == n {
            break;
        }
        let cand = Rect::new(r.random_range(0..=width - p), r.random_range(0..=height - p), p, p);
        let ok = avoid.is_none_or(|a| !a.intersects(&cand)) && placed.iter().all(|q| !q.intersects(&cand));
        if ok {
            placed.push(cand);
            streak = 0;
        } else {
            streak += 1;
            if streak >= RESTART_AFTER {
                placed.clear();
                streak = 0;
            }
        }
    }
    if placed.len() < n {
        return Err(infeasible());
    }
    Ok(placed.iter().map(|q| (q.x, q.y)).collect())
}

pub fn crop_patches_avoiding(image: &Image, source: usize, n: usize, p: usize, avoid: Option<Rect>, seed: u64) -> Result<PatchSet> {
    let coords = place_patches(image.width, image.height, n, p, avoid, seed)?;
    Ok(PatchSet {
        source,
        size: p,
        patches: coords.iter().map(|&(x, y)| image.crop(&Rect::new(x, y, p, p))).collect(),
        coords,
    })
}

pub fn crop_patches(image: &Image, n: usize, p: usize, seed: u64) -> Result<PatchSet> {
    crop_patches_avoiding(image, 0, n, p, None, seed)
}
