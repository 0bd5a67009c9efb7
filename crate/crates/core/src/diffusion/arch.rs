use rand_distr::{Distribution, Normal};
use s3im_tensor::{ParameterSet, Real, Tensor};

use crate::error::{Error, Result};
use crate::rng;

/// Attention width; every query, key and value lives in this space.
pub const ATTN_DIM: usize = 64;
/// Width of the shared timestep embedding.
pub const TEMB_DIM: usize = 128;
/// Spatial downsampling of the patchifying stem.
pub const PATCH: usize = 4;

/// The five block sites, in execution order.
pub const SITES: [&str; 5] = ["down0", "down1", "mid", "up0", "up1"];

/// Sizes of the denoiser and its reference mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NsdArch {
    pub image: usize,
    /// Channels at the stem resolution.
    pub c0: usize,
    /// Channels after the first downsampling.
    pub c1: usize,
    pub vocab: usize,
    pub max_tokens: usize,
}

impl Default for NsdArch {
    fn default() -> Self {
        Self {
            image: 64,
            c0: 64,
            c1: 128,
            vocab: crate::dataset::VOCAB_SIZE,
            max_tokens: 8,
        }
    }
}

impl NsdArch {
    pub fn validate(&self) -> Result<()> {
        if !self.image.is_multiple_of(PATCH * 4) {
            return Err(Error::Config(format!("image size {} must be a multiple of {}", self.image, PATCH * 4)));
        }
        if self.c0 == 0 || self.c1 == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// `(input channels, output channels)` of the block at each site.
    pub fn block_channels(&self) -> [(usize, usize); 5] {
        let (c0, c1) = (self.c0, self.c1);
        [(c0, c0), (c0, c1), (c1, c1), (2 * c1, c1), (c1 + c0, c0)]
    }

    /// Spatial side length at each site.
    pub fn site_sizes(&self) -> [usize; 5] {
        let s = self.image / PATCH;
        [s, s / 2, s / 4, s / 2, s]
    }
}

pub(crate) struct Init<'a, T> {
    pub params: &'a mut ParameterSet<T>,
    pub rng: rand_chacha::ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    pub fn normal(&mut self, path: String, shape: &[usize], std: f64) {
        let n = shape.iter().product();
        let data = if std == 0.0 {
            vec![T::zero(); n]
        } else {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| T::of(d.sample(&mut self.rng))).collect()
        };
        self.params.insert(path, Tensor::new(shape, data).expect("shape")).expect("unique path");
    }

    /// He-normal weight scaled by `gain`, zero bias.
    pub fn conv(&mut self, prefix: &str, ci: usize, co: usize, k: usize, gain: f64) {
        self.normal(format!("{prefix}.weight"), &[co, ci, k, k], gain * (2.0 / (ci * k * k) as f64).sqrt());
        self.normal(format!("{prefix}.bias"), &[co], 0.0);
    }

    pub fn linear(&mut self, prefix: &str, fi: usize, fo: usize, gain: f64) {
        self.normal(format!("{prefix}.weight"), &[fo, fi], gain * (1.0 / fi as f64).sqrt());
        self.normal(format!("{prefix}.bias"), &[fo], 0.0);
    }

    pub fn zeros(&mut self, prefix: &str, ci: usize, co: usize) {
        self.normal(format!("{prefix}.weight"), &[co, ci, 1, 1], 0.0);
        self.normal(format!("{prefix}.bias"), &[co], 0.0);
    }
}

pub(crate) fn init_resblock<T: Real>(i: &mut Init<'_, T>, p: &str, ci: usize, co: usize) {
    i.conv(&format!("{p}.res.conv0"), ci, co, 3, 1.0);
    i.conv(&format!("{p}.res.conv1"), co, co, 3, 0.2);
    i.linear(&format!("{p}.res.temb"), TEMB_DIM, co, 1.0);
    if ci != co {
        i.conv(&format!("{p}.res.skip"), ci, co, 1, 0.5);
    }
}

pub(crate) fn init_self_attn<T: Real>(i: &mut Init<'_, T>, p: &str, c: usize) {
    for n in ["q", "k", "v"] {
        i.linear(&format!("{p}.attn.{n}"), c, ATTN_DIM, 1.0);
    }
    i.linear(&format!("{p}.attn.o"), ATTN_DIM, c, 0.2);
}

pub(crate) fn init_cross_attn<T: Real>(i: &mut Init<'_, T>, p: &str, c: usize) {
    i.linear(&format!("{p}.cross.q"), c, ATTN_DIM, 1.0);
    for n in ["k_sem", "v_sem", "k_sty"] {
        i.linear(&format!("{p}.cross.{n}"), ATTN_DIM, ATTN_DIM, 1.0);
    }
    // The style path starts silent so enabling it leaves the prior intact.
    i.linear(&format!("{p}.cross.v_sty"), ATTN_DIM, ATTN_DIM, 0.0);
    i.linear(&format!("{p}.cross.o"), ATTN_DIM, c, 0.2);
}

pub(crate) fn init_temb<T: Real>(i: &mut Init<'_, T>, p: &str) {
    i.linear(&format!("{p}.temb.fc0"), ATTN_DIM, TEMB_DIM, 1.0);
    i.linear(&format!("{p}.temb.fc1"), TEMB_DIM, TEMB_DIM, 1.0);
}

/// Denoiser (`unet.`), semantic encoder (`sem.`), reference net (`ref.`)
/// and zero connectors (`conn.`).
pub fn init_params<T: Real>(arch: &NsdArch, seed: u64) -> ParameterSet<T> {
    let mut params = ParameterSet::new();
    let mut i = Init {
        params: &mut params,
        rng: rng::stream(seed, "nsd-init", 0),
    };
    i.normal("sem.embed".into(), &[arch.vocab, ATTN_DIM], 1.0);
    i.normal("sem.pos".into(), &[arch.max_tokens, ATTN_DIM], 0.1);
    init_self_attn(&mut i, "sem", ATTN_DIM);

    init_temb(&mut i, "unet");
    i.conv("unet.stem", 3, arch.c0, PATCH, 1.0);
    for (site, (ci, co)) in SITES.iter().zip(arch.block_channels()) {
        let p = format!("unet.{site}");
        init_resblock(&mut i, &p, ci, co);
        init_self_attn(&mut i, &p, co);
        init_cross_attn(&mut i, &p, co);
    }
    i.conv("unet.down0.downsample", arch.c0, arch.c0, 3, 1.0);
    i.conv("unet.down1.downsample", arch.c1, arch.c1, 3, 1.0);
    i.conv("unet.out", arch.c0, 3 * PATCH * PATCH, 3, 0.1);

    init_temb(&mut i, "ref");
    i.conv("ref.stem", 7, arch.c0, PATCH, 1.0);
    for (site, (ci, co)) in SITES.iter().zip(arch.block_channels()) {
        let p = format!("ref.{site}");
        init_resblock(&mut i, &p, ci, co);
        if *site != "up1" {
            init_self_attn(&mut i, &p, co);
        }
        i.zeros(&format!("conn.{site}"), co, co);
    }
    i.conv("ref.down0.downsample", arch.c0, arch.c0, 3, 1.0);
    i.conv("ref.down1.downsample", arch.c1, arch.c1, 3, 1.0);
    params
}

/// Parameters trained in phase B: the style path's key/value projections,
/// the reference network and its connectors.
pub fn is_phase_b_trainable(path: &str) -> bool {
    path.starts_with("ref.") || path.starts_with("conn.") || path.ends_with(".cross.k_sty.weight") || path.ends_with(".cross.k_sty.bias") || path.ends_with(".cross.v_sty.weight") || path.ends_with(".cross.v_sty.bias")
}

/// Parameters trained in phase A: the denoiser and semantic encoder,
/// without the (disabled) style path.
pub fn is_phase_a_trainable(path: &str) -> bool {
    (path.starts_with("unet.") || path.starts_with("sem.")) && !is_phase_b_trainable(path)
}
