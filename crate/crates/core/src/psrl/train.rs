use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use s3im_tensor::{Adam, Tape};
use serde_json::{json, Value};

use super::loss::{batch_cosines, batch_forward, contrastive_on_rows, BatchLayout, Stage};
use super::model::{is_projector, StyleNet, EMBED_DIM};
use crate::checkpoint::Checkpoint;
use crate::dataset::{crop_patches_avoiding, Sample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsrlMode {
    /// Stage 1 for `s1` steps, then stage 2 for `s2` steps.
    Progressive,
    /// Stage 2 from the first step ("without progressive" ablation).
    ContrastiveOnly,
    /// Stage 1 throughout; the projector stays at its initialization.
    StatsOnly,
}

impl FromStr for PsrlMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(PsrlMode::Progressive),
            "contrastive_only" => Ok(PsrlMode::ContrastiveOnly),
            "stats_only" => Ok(PsrlMode::StatsOnly),
            _ => Err(Error::InvalidArgument(format!(
                "unknown psrl mode `{s}` (expected progressive, contrastive_only or stats_only)"
            ))),
        }
    }
}

impl fmt::Display for PsrlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PsrlMode::Progressive => "progressive",
            PsrlMode::ContrastiveOnly => "contrastive_only",
            PsrlMode::StatsOnly => "stats_only",
        })
    }
}

/// How the second image of a training pair is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Any image with a different style label.
    Indoor,
    /// Any other image; same-style false negatives are possible.
    General,
}

impl FromStr for Pairing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indoor" => Ok(Pairing::Indoor),
            "general" => Ok(Pairing::General),
            _ => Err(Error::InvalidArgument(format!("unknown pairing `{s}` (expected indoor or general)"))),
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pairing::Indoor => "indoor",
            Pairing::General => "general",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsrlConfig {
    pub n: usize,
    pub p: usize,
    pub tau: f64,
    pub s1: u64,
    pub s2: u64,
    pub lr: f64,
    pub batch: usize,
    pub mode: PsrlMode,
    pub pairing: Pairing,
    pub freeze_encoder_stage2: bool,
    pub in_batch_negatives: bool,
    pub seed: u64,
}

impl Default for PsrlConfig {
    fn default() -> Self {
        Self {
            n: 8,
            p: 16,
            tau: 0.07,
            s1: 2000,
            s2: 2000,
            lr: 1e-4,
            batch: 8,
            mode: PsrlMode::Progressive,
            pairing: Pairing::Indoor,
            freeze_encoder_stage2: false,
            in_batch_negatives: false,
            seed: 0,
        }
    }
}

impl PsrlConfig {
    pub fn total_steps(&self) -> u64 {
        self.s1 + self.s2
    }

    pub fn stage_at(&self, step: u64) -> Stage {
        match self.mode {
            PsrlMode::Progressive if step < self.s1 => Stage::One,
            PsrlMode::Progressive | PsrlMode::ContrastiveOnly => Stage::Two,
            PsrlMode::StatsOnly => Stage::One,
        }
    }

    pub fn echo(&self) -> BTreeMap<String, Value> {
        BTreeMap::from([
            ("psrl.n".into(), json!(self.n)),
            ("psrl.p".into(), json!(self.p)),
            ("psrl.tau".into(), json!(self.tau)),
            ("psrl.s1".into(), json!(self.s1)),
            ("psrl.s2".into(), json!(self.s2)),
            ("psrl.lr".into(), json!(self.lr)),
            ("psrl.batch".into(), json!(self.batch)),
            ("psrl.mode".into(), json!(self.mode.to_string())),
            ("psrl.pairing".into(), json!(self.pairing.to_string())),
            ("psrl.freeze_encoder_stage2".into(), json!(self.freeze_encoder_stage2)),
            ("psrl.in_batch_negatives".into(), json!(self.in_batch_negatives)),
            ("seed".into(), json!(self.seed)),
        ])
    }

    pub fn from_echo(e: &BTreeMap<String, Value>) -> Result<Self> {
        let bad = |k: &str| Error::MalformedHeader(format!("config echo lacks `{k}`"));
        let u = |k: &str| e.get(k).and_then(Value::as_u64).ok_or_else(|| bad(k));
        let f = |k: &str| e.get(k).and_then(Value::as_f64).ok_or_else(|| bad(k));
        let b = |k: &str| e.get(k).and_then(Value::as_bool).ok_or_else(|| bad(k));
        let s = |k: &str| e.get(k).and_then(Value::as_str).ok_or_else(|| bad(k));
        Ok(Self {
            n: u("psrl.n")? as usize,
            p: u("psrl.p")? as usize,
            tau: f("psrl.tau")?,
            s1: u("psrl.s1")?,
            s2: u("psrl.s2")?,
            lr: f("psrl.lr")?,
            batch: u("psrl.batch")? as usize,
            mode: s("psrl.mode")?.parse()?,
            pairing: s("psrl.pairing")?.parse()?,
            freeze_encoder_stage2: b("psrl.freeze_encoder_stage2")?,
            in_batch_negatives: b("psrl.in_batch_negatives")?,
            seed: u("seed")?,
        })
    }

    fn validate(&self, data: &[Sample]) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("psrl.tau must be positive, got {}", self.tau)));
        }
        if self.n < 2 || self.batch == 0 {
            return Err(Error::Config("psrl.n must be at least 2 and psrl.batch at least 1".into()));
        }
        let styles: std::collections::BTreeSet<u16> = data.iter().map(|s| s.style_id).collect();
        match self.pairing {
            Pairing::Indoor if styles.len() < 2 => Err(Error::InvalidArgument(format!(
                "style training needs at least 2 styles, dataset has {}",
                styles.len()
            ))),
            Pairing::General if data.len() < 2 => Err(Error::InvalidArgument("style training needs at least 2 images".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsrlLogRow {
    pub step: u64,
    pub stage: u8,
    pub lx: f64,
    pub ly: f64,
    /// Contrastive term; in stage 1 it is computed for monitoring only.
    pub lxy: f64,
    pub total: f64,
    pub pos_cos: f64,
    pub neg_cos: f64,
}

pub const PSRL_LOG_HEADER: &str = "step,stage,L_x,L_y,L_xy,total,pos_cos,neg_cos";

impl PsrlLogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.stage, self.lx, self.ly, self.lxy, self.total, self.pos_cos, self.neg_cos
        )
    }
}

/// Stateful trainer so runs can be checkpointed and resumed exactly.
#[derive(Debug, Clone)]
pub struct PsrlTrainer {
    pub cfg: PsrlConfig,
    pub net: StyleNet<f32>,
    pub adam: Adam<f32>,
    /// Number of completed steps.
    pub step: u64,
}

impl PsrlTrainer {
    pub fn new(cfg: PsrlConfig) -> Self {
        let net = StyleNet::init(rng::derive_seed(cfg.seed, "psrl-init", 0));
        let adam = Adam::new(cfg.lr);
        Self { cfg, net, adam, step: 0 }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    fn set_trainable(&mut self, stage: Stage) {
        let freeze_encoder = self.cfg.freeze_encoder_stage2;
        match stage {
            Stage::One => self.net.params.set_trainable(|p| !is_projector(p)),
            Stage::Two if freeze_encoder => self.net.params.set_trainable(is_projector),
            Stage::Two => self.net.params.set_trainable(|_| true),
        }
    }

    /// Draws the image pairs and patch crops for `step`.
    pub fn batch_patches(&self, data: &[Sample], step: u64) -> Result<Vec<Image>> {
        let mut r = rng::stream(self.cfg.seed, "psrl-batch", step);
        let mut out = Vec::with_capacity(self.cfg.batch * 2 * self.cfg.n);
        for _ in 0..self.cfg.batch {
            let xi = r.random_range(0..data.len());
            let yi = loop {
                let c = r.random_range(0..data.len());
                let ok = match self.cfg.pairing {
                    Pairing::Indoor => data[c].style_id != data[xi].style_id,
                    Pairing::General => c != xi,
                };
                if ok {
                    break c;
                }
            };
            for idx in [xi, yi] {
                let ps = crop_patches_avoiding(&data[idx].image, idx, self.cfg.n, self.cfg.p, None, r.random())?;
                out.extend(ps.patches);
            }
        }
        Ok(out)
    }

    pub fn train_step(&mut self, data: &[Sample]) -> Result<PsrlLogRow> {
        self.cfg.validate(data)?;
        let step = self.step;
        let stage = self.cfg.stage_at(step);
        self.set_trainable(stage);
        let patches = self.batch_patches(data, step)?;
        let refs: Vec<&Image> = patches.iter().collect();
        let layout = BatchLayout {
            pairs: self.cfg.batch,
            n: self.cfg.n,
        };

        let mut tape = Tape::<f32>::new();
        let b = self.net.params.bind(&mut tape);
        let x = StyleNet::<f32>::input(&mut tape, &refs)?;
        let (vars, z) = batch_forward(&mut tape, &b, x, layout, stage, self.cfg.tau, self.cfg.in_batch_negatives)?;
        let lxy = match vars.lxy {
            Some(v) => v,
            None => contrastive_on_rows(&mut tape, z, layout.nce_terms(self.cfg.in_batch_negatives), self.cfg.tau)?,
        };
        let total = tape.scalar(vars.total) as f64;
        if !total.is_finite() {
            return Err(Error::NumericalAbort {
                step,
                what: format!("style loss is {total}"),
            });
        }
        let grads = tape.backward(vars.total)?;
        self.net.params.absorb(&b, &grads)?;
        self.adam.step(&mut self.net.params)?;
        let (pos_cos, neg_cos) = batch_cosines(tape.value(z), layout, EMBED_DIM);
        self.step += 1;
        Ok(PsrlLogRow {
            step,
            stage: stage.number(),
            lx: tape.scalar(vars.lx) as f64,
            ly: tape.scalar(vars.ly) as f64,
            lxy: tape.scalar(lxy) as f64,
            total,
            pos_cos,
            neg_cos,
        })
    }

    /// Trains until `until` steps are complete (or the schedule ends).
    pub fn run(&mut self, data: &[Sample], until: u64, mut on_row: impl FnMut(&PsrlLogRow)) -> Result<Vec<PsrlLogRow>> {
        let end = until.min(self.cfg.total_steps());
        let mut rows = Vec::new();
        while self.step < end {
            let row = self.train_step(data)?;
            if row.step % 50 == 0 {
                log::info!("psrl step {} stage {} total {:.4} pos {:.3} neg {:.3}", row.step, row.stage, row.total, row.pos_cos, row.neg_cos);
            }
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut echo = self.cfg.echo();
        echo.insert("train.completed_steps".into(), json!(self.step));
        let mut params = self.net.params.clone();
        params.set_trainable(|_| true);
        Checkpoint {
            echo,
            params,
            optimizer: Some(self.adam.state.clone()),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = PsrlConfig::from_echo(&ck.echo)?;
        let mut t = Self::new(cfg);
        t.net.params.load_values(&ck.params)?;
        t.step = ck.echo_u64("train.completed_steps")?;
        if let Some(s) = &ck.optimizer {
            t.adam = Adam::from_state(s.clone());
        }
        Ok(t)
    }
}

/// Runs the full schedule from scratch.
pub fn train_psrl(data: &[Sample], cfg: &PsrlConfig) -> Result<(StyleNet<f32>, Vec<PsrlLogRow>)> {
    let mut t = PsrlTrainer::new(cfg.clone());
    let rows = t.run(data, cfg.total_steps(), |_| {})?;
    t.net.params.set_trainable(|_| true);
    Ok((t.net, rows))
}
