use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use s3im_tensor::{Adam, Bindings, Real, Tape, Tensor, Var};
use serde_json::{json, Value};

use super::arch::{is_phase_a_trainable, is_phase_b_trainable, NsdArch};
use super::model::{ConditioningBundle, NsdModel};
use super::schedule::{build_schedule, forward_noise, NoiseSchedule, ScheduleKind};
use crate::checkpoint::Checkpoint;
use crate::dataset::{make_mask_dims, MaskSpec, Sample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::psrl::{embed_style, StyleNet};
use crate::reference::{build_ref_input, masked_condition};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Denoiser and semantic encoder, style path off, no reference.
    A,
    /// Style key/value projections and the reference network only.
    B,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::A => "A",
            Phase::B => "B",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NsdConfig {
    pub arch: NsdArch,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub phase_a: u64,
    pub phase_b: u64,
    pub lr: f64,
    pub batch: usize,
    pub lambda: f64,
    pub k: usize,
    pub p: usize,
    pub mask_min: f64,
    pub mask_max: f64,
    pub seed: u64,
}

impl Default for NsdConfig {
    fn default() -> Self {
        Self {
            arch: NsdArch::default(),
            timesteps: 100,
            schedule: ScheduleKind::Cosine,
            phase_a: 1000,
            phase_b: 1000,
            // From scratch at this size, 1e-4 leaves the reference path
            // undertrained within the step budget.
            lr: 1e-3,
            batch: 8,
            lambda: 1.0,
            k: 4,
            p: 16,
            mask_min: 0.1,
            mask_max: 0.3,
            seed: 0,
        }
    }
}

impl NsdConfig {
    pub fn total_steps(&self) -> u64 {
        self.phase_a + self.phase_b
    }

    pub fn phase_at(&self, step: u64) -> Phase {
        if step < self.phase_a {
            Phase::A
        } else {
            Phase::B
        }
    }

    pub fn echo(&self) -> BTreeMap<String, Value> {
        BTreeMap::from([
            ("nsd.c0".into(), json!(self.arch.c0)),
            ("nsd.c1".into(), json!(self.arch.c1)),
            ("nsd.image".into(), json!(self.arch.image)),
            ("nsd.vocab".into(), json!(self.arch.vocab)),
            ("nsd.max_tokens".into(), json!(self.arch.max_tokens)),
            ("nsd.T".into(), json!(self.timesteps)),
            ("nsd.schedule".into(), json!(self.schedule.to_string())),
            ("nsd.phase_a".into(), json!(self.phase_a)),
            ("nsd.phase_b".into(), json!(self.phase_b)),
            ("nsd.lr".into(), json!(self.lr)),
            ("nsd.batch".into(), json!(self.batch)),
            ("nsd.lambda".into(), json!(self.lambda)),
            ("nsd.k".into(), json!(self.k)),
            ("nsd.p".into(), json!(self.p)),
            ("nsd.mask_min".into(), json!(self.mask_min)),
            ("nsd.mask_max".into(), json!(self.mask_max)),
            ("seed".into(), json!(self.seed)),
        ])
    }

    pub fn from_echo(e: &BTreeMap<String, Value>) -> Result<Self> {
        let bad = |k: &str| Error::MalformedHeader(format!("config echo lacks `{k}`"));
        let u = |k: &str| e.get(k).and_then(Value::as_u64).ok_or_else(|| bad(k));
        let f = |k: &str| e.get(k).and_then(Value::as_f64).ok_or_else(|| bad(k));
        let s = |k: &str| e.get(k).and_then(Value::as_str).ok_or_else(|| bad(k));
        Ok(Self {
            arch: NsdArch {
                image: u("nsd.image")? as usize,
                c0: u("nsd.c0")? as usize,
                c1: u("nsd.c1")? as usize,
                vocab: u("nsd.vocab")? as usize,
                max_tokens: u("nsd.max_tokens")? as usize,
            },
            timesteps: u("nsd.T")? as usize,
            schedule: s("nsd.schedule")?.parse()?,
            phase_a: u("nsd.phase_a")?,
            phase_b: u("nsd.phase_b")?,
            lr: f("nsd.lr")?,
            batch: u("nsd.batch")? as usize,
            lambda: f("nsd.lambda")?,
            k: u("nsd.k")? as usize,
            p: u("nsd.p")? as usize,
            mask_min: f("nsd.mask_min")?,
            mask_max: f("nsd.mask_max")?,
            seed: u("seed")?,
        })
    }
}

/// One batch of the denoising objective, fully materialized.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x0: Tensor<f32>,
    pub t: Vec<usize>,
    pub eps: Tensor<f32>,
    pub bundle: ConditioningBundle,
    /// `(x_mask, x_m)` for the reference path.
    pub reference: Option<(Tensor<f32>, Tensor<f32>)>,
}

fn draw_mask(sample: &Sample, cfg: &NsdConfig, r: &mut impl Rng) -> Result<MaskSpec> {
    let f = if cfg.mask_max > cfg.mask_min { r.random_range(cfg.mask_min..=cfg.mask_max) } else { cfg.mask_min };
    make_mask_dims(sample.image.height, sample.image.width, f, r.random())
}

impl TrainBatch {
    /// Draws images, timesteps, noise, masks and style tokens for `step`.
    pub fn draw(data: &[Sample], psrl: Option<&StyleNet<f32>>, cfg: &NsdConfig, phase: Phase, step: u64) -> Result<Self> {
        let mut r = rng::stream(cfg.seed, "nsd-batch", step);
        let size = cfg.arch.image;
        let mut images = Vec::with_capacity(cfg.batch);
        let mut t = Vec::with_capacity(cfg.batch);
        let mut eps = Vec::with_capacity(cfg.batch * 3 * size * size);
        let mut masks = Vec::new();
        let mut style = Vec::new();
        let mut tokens = Vec::new();
        for _ in 0..cfg.batch {
            let s = &data[r.random_range(0..data.len())];
            if s.image.height != size || s.image.width != size {
                return Err(Error::InvalidArgument(format!("training image is not {size}x{size}")));
            }
            images.push(&s.image);
            tokens.push(s.tokens.clone());
            t.push(r.random_range(0..cfg.timesteps));
            for _ in 0..3 * size * size {
                let v: f64 = StandardNormal.sample(&mut r);
                eps.push(v as f32);
            }
            if phase == Phase::B {
                let psrl = psrl.ok_or_else(|| Error::InvalidArgument("phase B needs a style encoder".into()))?;
                // Redraw masks that leave no room for the context patches.
                let mut found = None;
                for _ in 0..32 {
                    let m = draw_mask(s, cfg, &mut r)?;
                    match embed_style(psrl, &s.image, Some(&m), cfg.k, cfg.p, r.random()) {
                        Ok(tok) => {
                            found = Some((m, tok));
                            break;
                        }
                        Err(Error::Infeasible(_)) => continue,
                        Err(e) => return Err(e),
                    }
                }
                let (m, tok) = found.ok_or_else(|| Error::Infeasible("no mask leaves room for style patches".into()))?;
                masks.push(m);
                style.push(tok);
            }
        }
        let b = cfg.batch;
        let x0 = Image::batch_tensor::<f32>(&images, 2.0, -1.0)?;
        let reference = if phase == Phase::B { Some(masked_condition::<f32>(&images, &masks)?) } else { None };
        Ok(Self {
            x0,
            t,
            eps: Tensor::new(&[b, 3, size, size], eps)?,
            bundle: ConditioningBundle {
                tokens,
                style: (phase == Phase::B).then_some(style),
                lambda: if phase == Phase::B { cfg.lambda } else { 0.0 },
            },
            reference,
        })
    }

    /// `x_t = alpha_t x0 + sigma_t eps`, per sample.
    pub fn noisy<T: Real>(&self, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
        let per = self.x0.numel() / self.t.len();
        let mut out = Vec::with_capacity(self.x0.numel());
        for (i, &t) in self.t.iter().enumerate() {
            let x0 = Tensor::new(&[per], self.x0.data()[i * per..(i + 1) * per].to_vec())?.cast::<T>();
            let e = Tensor::new(&[per], self.eps.data()[i * per..(i + 1) * per].to_vec())?.cast::<T>();
            out.extend_from_slice(forward_noise(schedule, &x0, t, &e)?.data());
        }
        Ok(Tensor::new(self.x0.shape(), out)?)
    }
}

/// Mean squared error between the true noise and the prediction.
pub fn training_loss<T: Real>(model: &NsdModel<T>, tape: &mut Tape<T>, b: &Bindings, batch: &TrainBatch) -> Result<Var> {
    let xt = batch.noisy::<T>(&model.schedule)?;
    let x = tape.leaf(&xt);
    let cond = model.bind_cond(tape, b, &batch.bundle)?;
    let r = match &batch.reference {
        Some((x_mask, x_m)) => Some(tape.leaf(&build_ref_input(&xt, &x_mask.cast::<T>(), &x_m.cast::<T>())?)),
        None => None,
    };
    let eps_hat = model.forward(tape, b, x, &batch.t, &cond, r)?;
    let eps = tape.leaf(&batch.eps.cast::<T>());
    Ok(tape.mse(eps_hat, eps)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NsdLogRow {
    pub step: u64,
    pub phase: Phase,
    pub loss: f64,
}

pub const NSD_LOG_HEADER: &str = "step,phase,loss";

impl NsdLogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:.6}", self.step, self.phase.label(), self.loss)
    }
}

#[derive(Debug, Clone)]
pub struct NsdTrainer {
    pub cfg: NsdConfig,
    pub model: NsdModel<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
}

impl NsdTrainer {
    pub fn new(cfg: NsdConfig) -> Result<Self> {
        let schedule = build_schedule(cfg.timesteps, cfg.schedule)?;
        let model = NsdModel::new(cfg.arch, schedule, rng::derive_seed(cfg.seed, "nsd-init", 0))?;
        Ok(Self {
            adam: Adam::new(cfg.lr),
            cfg,
            model,
            step: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    pub fn train_step(&mut self, data: &[Sample], psrl: &StyleNet<f32>) -> Result<NsdLogRow> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let step = self.step;
        let phase = self.cfg.phase_at(step);
        match phase {
            Phase::A => self.model.params.set_trainable(is_phase_a_trainable),
            Phase::B => self.model.params.set_trainable(is_phase_b_trainable),
        }
        let batch = TrainBatch::draw(data, Some(psrl), &self.cfg, phase, step)?;
        let mut tape = Tape::new();
        let b = self.model.params.bind(&mut tape);
        let loss = training_loss(&self.model, &mut tape, &b, &batch)?;
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::NumericalAbort {
                step,
                what: format!("denoising loss is {value}"),
            });
        }
        let grads = tape.backward(loss)?;
        self.model.params.absorb(&b, &grads)?;
        self.adam.step(&mut self.model.params)?;
        self.step += 1;
        Ok(NsdLogRow { step, phase, loss: value })
    }

    pub fn run(&mut self, data: &[Sample], psrl: &StyleNet<f32>, until: u64, mut on_row: impl FnMut(&NsdLogRow)) -> Result<Vec<NsdLogRow>> {
        let end = until.min(self.cfg.total_steps());
        let mut rows = Vec::new();
        while self.step < end {
            let row = self.train_step(data, psrl)?;
            if row.step % 50 == 0 {
                log::info!("nsd step {} phase {} loss {:.4}", row.step, row.phase.label(), row.loss);
            }
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut echo = self.cfg.echo();
        echo.insert("train.completed_steps".into(), json!(self.step));
        echo.insert("schedule.alpha".into(), json!(self.model.schedule.alpha));
        echo.insert("schedule.sigma".into(), json!(self.model.schedule.sigma));
        let mut params = self.model.params.clone();
        params.set_trainable(|_| true);
        Checkpoint {
            echo,
            params,
            optimizer: Some(self.adam.state.clone()),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = NsdConfig::from_echo(&ck.echo)?;
        let mut t = Self::new(cfg)?;
        t.model.params.load_values(&ck.params)?;
        t.step = ck.echo_u64("train.completed_steps")?;
        if let Some(s) = &ck.optimizer {
            t.adam = Adam::from_state(s.clone());
        }
        Ok(t)
    }
}

pub fn train_nsd(data: &[Sample], psrl: &StyleNet<f32>, cfg: &NsdConfig) -> Result<(NsdModel<f32>, Vec<NsdLogRow>)> {
    let mut t = NsdTrainer::new(cfg.clone())?;
    let rows = t.run(data, psrl, cfg.total_steps(), |_| {})?;
    t.model.params.set_trainable(|_| true);
    Ok((t.model, rows))
}
