//! RGB images in `[0, 1]`, stored row-major with interleaved channels.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use s3im_tensor::{Real, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn intersects(&self, o: &Rect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }

    /// True when `o` lies entirely inside `self`.
    pub fn encloses(&self, o: &Rect) -> bool {
        o.x >= self.x && o.y >= self.y && o.x + o.w <= self.x + self.w && o.y + o.h <= self.y + self.h
    }
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    pub fn crop(&self, r: &Rect) -> Image {
        let mut out = Image::new(r.h, r.w);
        for y in 0..r.h {
            let src = ((r.y + y) * self.width + r.x) * 3;
            out.data[y * r.w * 3..(y + 1) * r.w * 3].copy_from_slice(&self.data[src..src + r.w * 3]);
        }
        out
    }

    /// Copies `src` into this image with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, src: &Image, x: usize, y: usize) {
        for yy in 0..src.height {
            let dst = ((y + yy) * self.width + x) * 3;
            self.data[dst..dst + src.width * 3].copy_from_slice(&src.data[yy * src.width * 3..(yy + 1) * src.width * 3]);
        }
    }

    /// Channel-first planes `[3, H, W]`, optionally affinely remapped.
    pub fn to_planes<T: Real>(&self, scale: f32, offset: f32) -> Vec<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); 3 * hw];
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = T::of((px[c] * scale + offset) as f64);
            }
        }
        out
    }

    pub fn from_planes<T: Real>(h: usize, w: usize, planes: &[T], scale: f32, offset: f32) -> Image {
        let hw = h * w;
        let mut img = Image::new(h, w);
        for p in 0..hw {
            for c in 0..3 {
                img.data[p * 3 + c] = planes[c * hw + p].to_f64c() as f32 * scale + offset;
            }
        }
        img
    }

    /// Stacks images into a `[B, 3, H, W]` tensor of `pixel * scale + offset`.
    pub fn batch_tensor<T: Real>(images: &[&Image], scale: f32, offset: f32) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.height != h || img.width != w {
                return Err(Error::InvalidArgument("image batch with mixed sizes".into()));
            }
            data.extend(img.to_planes::<T>(scale, offset));
        }
        Ok(Tensor::new(&[images.len(), 3, h, w], data)?)
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut header = Vec::new();
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
                return Err(Error::MalformedHeader(format!("{}: incomplete PPM header", path.display())));
            }
            header.push(line.clone());
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_string));
        }
        if fields[0] != "P6" {
            return Err(Error::MalformedHeader(format!("{}: not a binary PPM", path.display())));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::MalformedHeader(format!("{}: bad PPM field `{s}`", path.display())))
        };
        let (w, h, maxv) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxv != 255 {
            return Err(Error::MalformedHeader(format!("{}: unsupported maxval {maxv}", path.display())));
        }
        let mut raw = vec![0u8; w * h * 3];
        r.read_exact(&mut raw)
            .map_err(|_| Error::TruncatedPayload(format!("{}: expected {} pixel bytes", path.display(), w * h * 3)))?;
        Image::from_data(h, w, raw.iter().map(|&b| b as f32 / 255.0).collect())
    }
}
