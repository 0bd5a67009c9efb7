use std::path::Path;

use rayon::prelude::*;

use super::mask::{make_mask_dims, MaskSpec};
use super::render::{render_scene_sized, SceneImage};
use super::style::{sample_styles, StyleParams};
use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::rng;

pub const DATASET_MAGIC: &[u8; 8] = b"S3IMTOY1";

/// One stored training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: Rect,
    pub tokens: Vec<u8>,
    pub style_id: u16,
    pub seed: u64,
}

impl Sample {
    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            height: self.image.height,
            width: self.image.width,
            rect: self.mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub styles: usize,
    pub images_per_style: usize,
    pub size: usize,
    pub mask_min: f64,
    pub mask_max: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            styles: 8,
            images_per_style: 16,
            size: 64,
            mask_min: 0.1,
            mask_max: 0.3,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn style_bank(&self) -> Vec<StyleParams> {
        sample_styles(self.styles, rng::derive_seed(self.seed, "bank", 0))
    }

    /// Renders scene `index` of `style` from the stream named `split`.
    pub fn scene(&self, style: &StyleParams, split: &str, index: u64) -> SceneImage {
        let layout = rng::derive_seed(self.seed, split, ((style.style_id as u64) << 32) | index);
        render_scene_sized(style, layout, self.size)
    }

    fn mask_for(&self, layout_seed: u64) -> Result<MaskSpec> {
        use rand::Rng;
        let mut r = rng::stream(layout_seed, "mask-fraction", 0);
        let f = if self.mask_max > self.mask_min {
            r.random_range(self.mask_min..=self.mask_max)
        } else {
            self.mask_min
        };
        make_mask_dims(self.size, self.size, f, rng::derive_seed(layout_seed, "mask", 0))
    }

    /// Builds a sample (scene plus its mask) for a split.
    pub fn sample(&self, style: &StyleParams, split: &str, index: u64) -> Result<Sample> {
        let scene = self.scene(style, split, index);
        let mask = self.mask_for(scene.layout_seed)?;
        Ok(Sample {
            image: scene.pixels,
            mask: mask.rect,
            tokens: scene.caption_tokens,
            style_id: style.style_id as u16,
            seed: scene.layout_seed,
        })
    }

    /// The training split, ordered by style then image index. Samples are
    /// rendered in parallel from per-sample seeds.
    pub fn generate(&self) -> Result<Vec<Sample>> {
        self.generate_split("train", self.images_per_style)
    }

    pub fn generate_split(&self, split: &str, per_style: usize) -> Result<Vec<Sample>> {
        let bank = self.style_bank();
        let jobs: Vec<(usize, u64)> = (0..bank.len()).flat_map(|s| (0..per_style as u64).map(move |i| (s, i))).collect();
        jobs.par_iter().map(|&(s, i)| self.sample(&bank[s], split, i)).collect()
    }
}

fn put_u16(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u16")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    let count = u32::try_from(samples.len()).map_err(|_| Error::InvalidArgument("too many samples".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for s in samples {
        put_u16(&mut buf, s.image.height, "height")?;
        put_u16(&mut buf, s.image.width, "width")?;
        for v in &s.image.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in [s.mask.x, s.mask.y, s.mask.w, s.mask.h] {
            put_u16(&mut buf, v, "mask coordinate")?;
        }
        let n = u8::try_from(s.tokens.len()).map_err(|_| Error::InvalidArgument("caption longer than 255 tokens".into()))?;
        buf.push(n);
        buf.extend_from_slice(&s.tokens);
        buf.extend_from_slice(&s.style_id.to_le_bytes());
        buf.extend_from_slice(&s.seed.to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedPayload(format!(
                "needed {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<Sample>> {
    if buf.len() < 8 {
        return Err(Error::MalformedHeader("file shorter than the magic".into()));
    }
    if &buf[..8] != DATASET_MAGIC {
        if buf[..7] == DATASET_MAGIC[..7] {
            return Err(Error::VersionMismatch {
                expected: "S3IMTOY1".into(),
                found: String::from_utf8_lossy(&buf[..8]).into_owned(),
            });
        }
        return Err(Error::MalformedHeader(format!("bad magic {:?}", String::from_utf8_lossy(&buf[..8]))));
    }
    let mut r = Reader { buf, pos: 8 };
    let count = u32::from_le_bytes(r.take(4, "sample count")?.try_into().expect("4 bytes"));
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        let h = r.u16("height")? as usize;
        let w = r.u16("width")? as usize;
        let raw = r.take(h * w * 3 * 4, &format!("pixels of sample {i}"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let rect = Rect::new(r.u16("mask")? as usize, r.u16("mask")? as usize, r.u16("mask")? as usize, r.u16("mask")? as usize);
        let n = r.take(1, "token count")?[0] as usize;
        let tokens = r.take(n, "tokens")?.to_vec();
        let style_id = r.u16("style id")?;
        let seed = u64::from_le_bytes(r.take(8, "render seed")?.try_into().expect("8 bytes"));
        out.push(Sample {
            image: Image::from_data(h, w, data)?,
            mask: rect,
            tokens,
            style_id,
            seed,
        });
    }
    Ok(out)
}

pub fn dataset_write(samples: &[Sample], path: &Path) -> Result<()> {
    let bytes = encode_dataset(samples)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn dataset_read(path: &Path) -> Result<Vec<Sample>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
