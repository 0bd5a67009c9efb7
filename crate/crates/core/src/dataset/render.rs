use std::f32::consts::PI;

use rand::Rng;

use super::caption::caption_of;
use super::style::{PatternFamily, StyleParams};
use crate::image::Image;
use crate::rng;

pub const DEFAULT_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// The whole canvas.
    Background,
    Disc { cx: f32, cy: f32, r: f32 },
    Rectangle { x0: f32, y0: f32, x1: f32, y1: f32 },
    Triangle { v: [[f32; 2]; 3] },
}

impl Shape {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Background => true,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rectangle { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { v } => {
                let edge = |a: [f32; 2], b: [f32; 2]| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                let (d0, d1, d2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: usize,
    pub shape: Shape,
    /// Pattern phase offsets, in cycles.
    pub phase: [f32; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub pixels: Image,
    pub style: StyleParams,
    /// Region 0 is the background; later regions are painted over earlier ones.
    pub regions: Vec<Region>,
    pub caption_tokens: Vec<u8>,
    pub layout_seed: u64,
}

impl SceneImage {
    /// Region id visible at each pixel, row-major.
    pub fn region_map(&self) -> Vec<usize> {
        let (h, w) = (self.pixels.height, self.pixels.width);
        let mut map = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                map[y * w + x] = self.regions.iter().rev().find(|r| r.shape.contains(px, py)).map_or(0, |r| r.id);
            }
        }
        map
    }
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f32 {
    let h = rng::derive_seed(seed, "lattice", (ix as u64).wrapping_mul(0x1_0000_0001) ^ (iy as u64));
    (h >> 40) as f32 / (1u64 << 24) as f32
}

fn value_noise(seed: u64, u: f32, v: f32) -> f32 {
    let (fx, fy) = (u.floor(), v.floor());
    let (tx, ty) = (smooth(u - fx), smooth(v - fy));
    let (ix, iy) = (fx as i64, fy as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

/// Mixing weight in `[0, 1]` between a region's two colors at normalized
/// canvas coordinates `(u, v)`.
pub fn pattern_value(style: &StyleParams, phase: [f32; 2], u: f32, v: f32) -> f32 {
    let (s, c) = style.orientation.sin_cos();
    let ru = (c * u + s * v) * style.frequency + phase[0];
    let rv = (-s * u + c * v) * style.frequency + phase[1];
    match style.family {
        PatternFamily::Stripes => 0.5 + 0.5 * (2.0 * PI * ru).sin(),
        PatternFamily::Checker => {
            let a = (2.0 * PI * ru).sin() * (2.0 * PI * rv).sin();
            if a >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        PatternFamily::Dots => {
            let du = ru - ru.floor() - 0.5;
            let dv = rv - rv.floor() - 0.5;
            if du * du + dv * dv <= 0.3 * 0.3 {
                1.0
            } else {
                0.0
            }
        }
        PatternFamily::ValueNoise => value_noise(style.noise_seed, ru, rv),
    }
}

/// Color pair used by region `id`: consecutive palette entries.
pub fn region_colors(style: &StyleParams, id: usize) -> ([f32; 3], [f32; 3]) {
    (style.palette[id % 3], style.palette[(id + 1) % 3])
}

fn random_shape<R: Rng>(r: &mut R, size: f32) -> Shape {
    match r.random_range(0..3) {
        0 => {
            let rad = r.random_range(0.12 * size..0.28 * size);
            Shape::Disc {
                cx: r.random_range(rad..size - rad),
                cy: r.random_range(rad..size - rad),
                r: rad,
            }
        }
        1 => {
            let w = r.random_range(0.2 * size..0.5 * size);
            let h = r.random_range(0.2 * size..0.5 * size);
            let x0 = r.random_range(0.0..size - w);
            let y0 = r.random_range(0.0..size - h);
            Shape::Rectangle { x0, y0, x1: x0 + w, y1: y0 + h }
        }
        _ => {
            let cx = r.random_range(0.25 * size..0.75 * size);
            let cy = r.random_range(0.25 * size..0.75 * size);
            let rad = r.random_range(0.18 * size..0.3 * size);
            let rot = r.random_range(0.0..2.0 * PI);
            let v = std::array::from_fn(|k| {
                let a = rot + k as f32 * 2.0 * PI / 3.0;
                [cx + rad * a.cos(), cy + rad * a.sin()]
            });
            Shape::Triangle { v }
        }
    }
}

/// Renders a `size`×`size` scene: a background plus 1 to 3 shapes, every
/// region filled with the same style at its own phase.
pub fn render_scene_sized(style: &StyleParams, layout_seed: u64, size: usize) -> SceneImage {
    let mut r = rng::stream(layout_seed, "layout", 0);
    let n_shapes = r.random_range(1..=3usize);
    let sz = size as f32;
    let mut regions = Vec::with_capacity(n_shapes + 1);
    for id in 0..=n_shapes {
        let shape = if id == 0 { Shape::Background } else { random_shape(&mut r, sz) };
        regions.push(Region {
            id,
            shape,
            phase: [r.random::<f32>(), r.random::<f32>()],
        });
    }
    let mut pixels = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let region = regions.iter().rev().find(|g| g.shape.contains(px, py)).expect("background covers the canvas");
            let t = pattern_value(style, region.phase, px / sz, py / sz);
            let (a, b) = region_colors(style, region.id);
            pixels.set(x, y, std::array::from_fn(|c| (a[c] + (b[c] - a[c]) * t).clamp(0.0, 1.0)));
        }
    }
    let mut scene = SceneImage {
        pixels,
        style: style.clone(),
        regions,
        caption_tokens: Vec::new(),
        layout_seed,
    };
    scene.caption_tokens = caption_of(&scene);
    scene
}

pub fn render_scene(style: &StyleParams, layout_seed: u64) -> SceneImage {
    render_scene_sized(style, layout_seed, DEFAULT_SIZE)
}
