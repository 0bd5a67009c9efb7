//! Flat `key=value` run configuration. Keys are namespaced (`psrl.tau`),
//! `#` starts a comment, later assignments override earlier ones.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use s3im_core::dataset::DatasetConfig;
use s3im_core::diffusion::{NsdConfig, SamplerConfig};
use s3im_core::image::Rect;
use s3im_core::psrl::{Pairing, PsrlConfig};
use s3im_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub tasks: usize,
    pub k: usize,
    pub p: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintParams {
    /// PPM input; empty means held-out sample `sample`.
    pub image: String,
    pub sample: usize,
    /// `x,y,w,h`; empty means the sample's own mask.
    pub mask: String,
    /// Space-separated caption words; empty means the sample's caption.
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VizParams {
    pub images: usize,
    pub patches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub heldout_per_style: usize,
    pub psrl: PsrlConfig,
    pub nsd: NsdConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalParams,
    pub inpaint: InpaintParams,
    pub viz: VizParams,
    /// Steps between checkpoint writes during training.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            out: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            heldout_per_style: 4,
            psrl: PsrlConfig {
                s1: 200,
                s2: 600,
                ..Default::default()
            },
            nsd: NsdConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalParams {
                tasks: 50,
                k: 4,
                p: 16,
                batch: 8,
            },
            inpaint: InpaintParams {
                image: String::new(),
                sample: 0,
                mask: String::new(),
                caption: String::new(),
            },
            viz: VizParams { images: 16, patches: 8 },
            checkpoint_every: 500,
        };
        c.sync();
        c
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("cannot parse `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{v}`"))),
    }
}

/// Every key with its documentation, in rendering order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "global seed shared by every stage"),
    ("out", "output directory"),
    ("checkpoint_every", "training steps between checkpoint writes"),
    ("dataset.styles", "number of procedural styles"),
    ("dataset.images_per_style", "training scenes per style"),
    ("dataset.heldout_per_style", "held-out scenes per style"),
    ("dataset.size", "image side in pixels"),
    ("dataset.mask_min", "smallest mask area fraction"),
    ("dataset.mask_max", "largest mask area fraction"),
    ("dataset.pairing", "negative pairing: indoor (different style) or general (different image)"),
    ("psrl.n", "patches per image"),
    ("psrl.p", "patch side"),
    ("psrl.tau", "contrastive temperature"),
    ("psrl.s1", "statistics-only steps"),
    ("psrl.s2", "contrastive steps"),
    ("psrl.lr", "Adam learning rate"),
    ("psrl.batch", "image pairs per step"),
    ("psrl.mode", "progressive, contrastive_only or stats_only"),
    ("psrl.freeze_encoder_stage2", "train only the projector in stage 2"),
    ("psrl.in_batch_negatives", "add other pairs' patches as negatives"),
    ("nsd.c0", "denoiser channels at full resolution"),
    ("nsd.c1", "denoiser channels at half resolution"),
    ("nsd.max_tokens", "caption token capacity"),
    ("nsd.T", "diffusion timesteps"),
    ("nsd.schedule", "cosine or linear"),
    ("nsd.phase_a", "steps training the semantic denoiser"),
    ("nsd.phase_b", "steps training style K/V and the reference network"),
    ("nsd.lr", "Adam learning rate"),
    ("nsd.batch", "images per step"),
    ("nsd.lambda", "style attention weight in phase B"),
    ("nsd.k", "style patch tokens"),
    ("nsd.p", "style patch side"),
    ("nsd.mask_min", "smallest training mask fraction"),
    ("nsd.mask_max", "largest training mask fraction"),
    ("sample.steps", "sampler steps"),
    ("sample.lambda", "style attention weight at inference"),
    ("sample.paste_background", "copy unmasked input pixels into the output"),
    ("sample.use_reference", "run the reference network while sampling"),
    ("eval.tasks", "benchmark tasks"),
    ("eval.k", "patches per side for style-cosine scoring"),
    ("eval.p", "scoring patch side"),
    ("eval.batch", "tasks sampled together"),
    ("inpaint.image", "input PPM; empty uses a held-out sample"),
    ("inpaint.sample", "held-out sample index when no image is given"),
    ("inpaint.mask", "x,y,w,h; empty uses the sample's mask"),
    ("inpaint.caption", "space-separated caption words; empty uses the sample's caption"),
    ("viz.images", "held-out images to embed"),
    ("viz.patches", "patches per image"),
];

impl RunConfig {
    /// Propagates shared values (seed, image size, sampler defaults).
    fn sync(&mut self) {
        self.dataset.seed = self.seed;
        self.psrl.seed = self.seed;
        self.nsd.seed = self.seed;
        self.nsd.arch.image = self.dataset.size;
        self.sampler.k = self.nsd.k;
        self.sampler.p = self.nsd.p;
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "dataset.styles" => self.dataset.styles = parse(key, v)?,
            "dataset.images_per_style" => self.dataset.images_per_style = parse(key, v)?,
            "dataset.heldout_per_style" => self.heldout_per_style = parse(key, v)?,
            "dataset.size" => self.dataset.size = parse(key, v)?,
            "dataset.mask_min" => self.dataset.mask_min = parse(key, v)?,
            "dataset.mask_max" => self.dataset.mask_max = parse(key, v)?,
            "dataset.pairing" => self.psrl.pairing = v.parse::<Pairing>().map_err(|e| Error::Config(e.to_string()))?,
            "psrl.n" => self.psrl.n = parse(key, v)?,
            "psrl.p" => self.psrl.p = parse(key, v)?,
            "psrl.tau" => self.psrl.tau = parse(key, v)?,
            "psrl.s1" => self.psrl.s1 = parse(key, v)?,
            "psrl.s2" => self.psrl.s2 = parse(key, v)?,
            "psrl.lr" => self.psrl.lr = parse(key, v)?,
            "psrl.batch" => self.psrl.batch = parse(key, v)?,
            "psrl.mode" => self.psrl.mode = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "psrl.freeze_encoder_stage2" => self.psrl.freeze_encoder_stage2 = parse_bool(key, v)?,
            "psrl.in_batch_negatives" => self.psrl.in_batch_negatives = parse_bool(key, v)?,
            "nsd.c0" => self.nsd.arch.c0 = parse(key, v)?,
            "nsd.c1" => self.nsd.arch.c1 = parse(key, v)?,
            "nsd.max_tokens" => self.nsd.arch.max_tokens = parse(key, v)?,
            "nsd.T" => self.nsd.timesteps = parse(key, v)?,
            "nsd.schedule" => self.nsd.schedule = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "nsd.phase_a" => self.nsd.phase_a = parse(key, v)?,
            "nsd.phase_b" => self.nsd.phase_b = parse(key, v)?,
            "nsd.lr" => self.nsd.lr = parse(key, v)?,
            "nsd.batch" => self.nsd.batch = parse(key, v)?,
            "nsd.lambda" => self.nsd.lambda = parse(key, v)?,
            "nsd.k" => self.nsd.k = parse(key, v)?,
            "nsd.p" => self.nsd.p = parse(key, v)?,
            "nsd.mask_min" => self.nsd.mask_min = parse(key, v)?,
            "nsd.mask_max" => self.nsd.mask_max = parse(key, v)?,
            "sample.steps" => self.sampler.steps = parse(key, v)?,
            "sample.lambda" => self.sampler.lambda = parse(key, v)?,
            "sample.paste_background" => self.sampler.paste_background = parse_bool(key, v)?,
            "sample.use_reference" => self.sampler.use_reference = parse_bool(key, v)?,
            "eval.tasks" => self.eval.tasks = parse(key, v)?,
            "eval.k" => self.eval.k = parse(key, v)?,
            "eval.p" => self.eval.p = parse(key, v)?,
            "eval.batch" => self.eval.batch = parse(key, v)?,
            "inpaint.image" => self.inpaint.image = v.to_string(),
            "inpaint.sample" => self.inpaint.sample = parse(key, v)?,
            "inpaint.mask" => self.inpaint.mask = v.to_string(),
            "inpaint.caption" => self.inpaint.caption = v.to_string(),
            "viz.images" => self.viz.images = parse(key, v)?,
            "viz.patches" => self.viz.patches = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        self.sync();
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "dataset.styles" => self.dataset.styles.to_string(),
            "dataset.images_per_style" => self.dataset.images_per_style.to_string(),
            "dataset.heldout_per_style" => self.heldout_per_style.to_string(),
            "dataset.size" => self.dataset.size.to_string(),
            "dataset.mask_min" => self.dataset.mask_min.to_string(),
            "dataset.mask_max" => self.dataset.mask_max.to_string(),
            "dataset.pairing" => self.psrl.pairing.to_string(),
            "psrl.n" => self.psrl.n.to_string(),
            "psrl.p" => self.psrl.p.to_string(),
            "psrl.tau" => self.psrl.tau.to_string(),
            "psrl.s1" => self.psrl.s1.to_string(),
            "psrl.s2" => self.psrl.s2.to_string(),
            "psrl.lr" => self.psrl.lr.to_string(),
            "psrl.batch" => self.psrl.batch.to_string(),
            "psrl.mode" => self.psrl.mode.to_string(),
            "psrl.freeze_encoder_stage2" => self.psrl.freeze_encoder_stage2.to_string(),
            "psrl.in_batch_negatives" => self.psrl.in_batch_negatives.to_string(),
            "nsd.c0" => self.nsd.arch.c0.to_string(),
            "nsd.c1" => self.nsd.arch.c1.to_string(),
            "nsd.max_tokens" => self.nsd.arch.max_tokens.to_string(),
            "nsd.T" => self.nsd.timesteps.to_string(),
            "nsd.schedule" => self.nsd.schedule.to_string(),
            "nsd.phase_a" => self.nsd.phase_a.to_string(),
            "nsd.phase_b" => self.nsd.phase_b.to_string(),
            "nsd.lr" => self.nsd.lr.to_string(),
            "nsd.batch" => self.nsd.batch.to_string(),
            "nsd.lambda" => self.nsd.lambda.to_string(),
            "nsd.k" => self.nsd.k.to_string(),
            "nsd.p" => self.nsd.p.to_string(),
            "nsd.mask_min" => self.nsd.mask_min.to_string(),
            "nsd.mask_max" => self.nsd.mask_max.to_string(),
            "sample.steps" => self.sampler.steps.to_string(),
            "sample.lambda" => self.sampler.lambda.to_string(),
            "sample.paste_background" => self.sampler.paste_background.to_string(),
            "sample.use_reference" => self.sampler.use_reference.to_string(),
            "eval.tasks" => self.eval.tasks.to_string(),
            "eval.k" => self.eval.k.to_string(),
            "eval.p" => self.eval.p.to_string(),
            "eval.batch" => self.eval.batch.to_string(),
            "inpaint.image" => self.inpaint.image.clone(),
            "inpaint.sample" => self.inpaint.sample.to_string(),
            "inpaint.mask" => self.inpaint.mask.clone(),
            "inpaint.caption" => self.inpaint.caption.clone(),
            "viz.images" => self.viz.images.to_string(),
            "viz.patches" => self.viz.patches.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// The full configuration as documented `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            let v = self.get(k).expect("every listed key is readable");
            writeln!(out, "# {doc}\n{k}={v}").expect("write to string");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.psrl.tau > 0.0) {
            return Err(Error::Config(format!("psrl.tau must be positive, got {}", self.psrl.tau)));
        }
        for (k, l) in [("nsd.lambda", self.nsd.lambda), ("sample.lambda", self.sampler.lambda)] {
            if !(l >= 0.0) {
                return Err(Error::Config(format!("{k} must be non-negative, got {l}")));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Parses `x,y,w,h`.
pub fn parse_rect(s: &str) -> Result<Rect> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("mask `{s}` is not x,y,w,h")))?;
    match v[..] {
        [x, y, w, h] => Ok(Rect::new(x, y, w, h)),
        _ => Err(Error::InvalidArgument(format!("mask `{s}` is not x,y,w,h"))),
    }
}
