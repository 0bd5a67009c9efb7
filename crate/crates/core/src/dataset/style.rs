use std::f32::consts::PI;

use rand::Rng;

use crate::rng;

/// Minimum palette distance between two styles that share a pattern family.
pub const MIN_PALETTE_DISTANCE: f32 = 0.3;
/// Minimum L2 distance between any two colors of one palette, so every
/// pattern is visible.
const MIN_COLOR_CONTRAST: f32 = 0.25;
const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatternFamily {
    Stripes,
    Checker,
    Dots,
    ValueNoise,
}

impl PatternFamily {
    pub const ALL: [PatternFamily; 4] = [
        PatternFamily::Stripes,
        PatternFamily::Checker,
        PatternFamily::Dots,
        PatternFamily::ValueNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatternFamily::Stripes => "stripes",
            PatternFamily::Checker => "checker",
            PatternFamily::Dots => "dots",
            PatternFamily::ValueNoise => "value-noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleParams {
    pub palette: [[f32; 3]; 3],
    pub family: PatternFamily,
    /// Cycles per image width, in `[2, 16]`.
    pub frequency: f32,
    /// Radians in `[0, pi)`.
    pub orientation: f32,
    pub style_id: u32,
    /// Seed of the lattice used by the value-noise family.
    pub noise_seed: u64,
}

fn l2(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Order-free palette distance: mean L2 distance between matched colors,
/// minimized over the six matchings.
pub fn palette_distance(a: &[[f32; 3]; 3], b: &[[f32; 3]; 3]) -> f32 {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    PERMS
        .iter()
        .map(|p| (0..3).map(|i| l2(&a[i], &b[p[i]])).sum::<f32>() / 3.0)
        .fold(f32::INFINITY, f32::min)
}

/// True when two styles may serve as a negative pair.
pub fn distinct_enough(a: &StyleParams, b: &StyleParams) -> bool {
    a.family != b.family || palette_distance(&a.palette, &b.palette) >= MIN_PALETTE_DISTANCE
}

/// Draws one style. The family is uniform over the four families; the
/// palette is redrawn until its colors are mutually distinguishable.
pub fn sample_style(seed: u64) -> StyleParams {
    let mut r = rng::stream(seed, "style", 0);
    let family = PatternFamily::ALL[r.random_range(0..4)];
    let palette = loop {
        let p: [[f32; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| r.random::<f32>()));
        if l2(&p[0], &p[1]) >= MIN_COLOR_CONTRAST && l2(&p[1], &p[2]) >= MIN_COLOR_CONTRAST && l2(&p[0], &p[2]) >= MIN_COLOR_CONTRAST {
            break p;
        }
    };
    StyleParams {
        palette,
        family,
        frequency: r.random_range(2.0f32..=16.0),
        orientation: r.random_range(0.0f32..PI),
        style_id: 0,
        noise_seed: r.random(),
    }
}

/// A bank of `n` styles that are pairwise valid negatives. Style `i`
/// carries `style_id = i`.
pub fn sample_styles(n: usize, seed: u64) -> Vec<StyleParams> {
    let mut out: Vec<StyleParams> = Vec::with_capacity(n);
    let mut draw = 0u64;
    while out.len() < n {
        assert!((draw as usize) < MAX_DRAWS * (n + 1), "style bank rejection sampling did not converge");
        let mut s = sample_style(rng::derive_seed(seed, "style-bank", draw));
        draw += 1;
        if out.iter().all(|o| distinct_enough(o, &s)) {
            s.style_id = out.len() as u32;
            out.push(s);
        }
    }
    out
}
