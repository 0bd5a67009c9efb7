use rand_distr::{Distribution, StandardNormal};
use s3im_tensor::Tensor;

use super::model::{ConditioningBundle, NsdModel};
use crate::dataset::MaskSpec;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::psrl::{embed_style, StyleNet};
use crate::reference::{build_ref_input, masked_condition};
use crate::rng;

/// One inpainting request.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintTask {
    pub image: Image,
    pub mask: MaskSpec,
    pub tokens: Vec<u8>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub lambda: f64,
    /// Style patch tokens (the pooled token is added on top).
    pub k: usize,
    pub p: usize,
    pub paste_background: bool,
    pub use_reference: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            lambda: 1.0,
            k: 4,
            p: 16,
            paste_background: false,
            use_reference: true,
        }
    }
}

/// `steps` timesteps from `T-1` down to 0, evenly spaced.
pub fn timestep_sequence(total: usize, steps: usize) -> Vec<usize> {
    match steps {
        0 => Vec::new(),
        1 => vec![total - 1],
        _ => (0..steps)
            .map(|i| ((total - 1) as f64 * (1.0 - i as f64 / (steps - 1) as f64)).round() as usize)
            .collect(),
    }
}

fn gaussian(n: usize, seed: u64, tag: &str, index: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, tag, index);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Replaces unmasked pixels of `out` with those of `src`.
pub fn paste_background(out: &mut Image, src: &Image, mask: &MaskSpec) {
    for y in 0..out.height {
        for x in 0..out.width {
            if !mask.is_masked(x, y) {
                out.set(x, y, src.get(x, y));
            }
        }
    }
}

/// Ancestral sampling for a batch of tasks. Each task draws its noise from
/// streams keyed by its own seed.
pub fn sample_inpaint_batch(model: &NsdModel<f32>, psrl: &StyleNet<f32>, tasks: &[InpaintTask], cfg: &SamplerConfig) -> Result<Vec<Image>> {
    let total = model.schedule.steps();
    if cfg.steps > total {
        return Err(Error::InvalidArgument(format!("{} sampling steps exceed the schedule length {total}", cfg.steps)));
    }
    if tasks.is_empty() {
        return Ok(Vec::new());
    }
    let size = model.arch.image;
    for t in tasks {
        if t.image.height != size || t.image.width != size || t.mask.height != size || t.mask.width != size {
            return Err(Error::InvalidArgument(format!("task image must be {size}x{size}")));
        }
    }
    let b = tasks.len();
    let n = 3 * size * size;
    let images: Vec<&Image> = tasks.iter().map(|t| &t.image).collect();
    let masks: Vec<MaskSpec> = tasks.iter().map(|t| t.mask).collect();
    let (x_mask, x_m) = masked_condition::<f32>(&images, &masks)?;
    let style = if cfg.lambda != 0.0 {
        Some(
            tasks
                .iter()
                .map(|t| embed_style(psrl, &t.image, Some(&t.mask), cfg.k, cfg.p, rng::derive_seed(t.seed, "style", 0)))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let bundle = ConditioningBundle {
        tokens: tasks.iter().map(|t| t.tokens.clone()).collect(),
        style,
        lambda: cfg.lambda,
    };

    let mut x: Vec<f64> = tasks.iter().flat_map(|t| gaussian(n, t.seed, "sample-init", 0)).collect();
    let seq = timestep_sequence(total, cfg.steps);
    let (al, si) = (&model.schedule.alpha, &model.schedule.sigma);
    for (i, &t) in seq.iter().enumerate() {
        let xt = Tensor::new(&[b, 3, size, size], x.iter().map(|&v| v as f32).collect())?;
        let r = if cfg.use_reference { Some(build_ref_input(&xt, &x_mask, &x_m)?) } else { None };
        let eps = model.predict_noise(&xt, &vec![t; b], &bundle, r.as_ref())?;
        let (a_t, s_t) = (al[t], si[t]);
        let x0: Vec<f64> = x.iter().zip(eps.data()).map(|(&xv, &e)| ((xv - s_t * e as f64) / a_t).clamp(-1.0, 1.0)).collect();
        match seq.get(i + 1) {
            None => x = x0,
            Some(&s) => {
                let (a_s, s_s) = (al[s], si[s]);
                // DDPM posterior step expressed for an arbitrary stride (eta = 1).
                let var = (s_s * s_s / (s_t * s_t)) * (1.0 - (a_t * a_t) / (a_s * a_s));
                let var = var.clamp(0.0, s_s * s_s);
                let dir = (s_s * s_s - var).sqrt();
                let noise: Vec<f64> = tasks.iter().flat_map(|task| gaussian(n, task.seed, "sample-step", i as u64)).collect();
                x = x
                    .iter()
                    .zip(&x0)
                    .zip(&noise)
                    .map(|((&xv, &x0v), &z)| {
                        let e = (xv - a_t * x0v) / s_t;
                        a_s * x0v + dir * e + var.sqrt() * z
                    })
                    .collect();
            }
        }
    }
    let mut out = Vec::with_capacity(b);
    for (j, task) in tasks.iter().enumerate() {
        let planes: Vec<f64> = x[j * n..(j + 1) * n].to_vec();
        let mut img = Image::from_planes::<f64>(size, size, &planes, 0.5, 0.5);
        img.clamp01();
        if cfg.paste_background {
            paste_background(&mut img, &task.image, &task.mask);
        }
        out.push(img);
    }
    Ok(out)
}

pub fn sample_inpaint(model: &NsdModel<f32>, psrl: &StyleNet<f32>, task: &InpaintTask, cfg: &SamplerConfig) -> Result<Image> {
    Ok(sample_inpaint_batch(model, psrl, std::slice::from_ref(task), cfg)?.remove(0))
}

