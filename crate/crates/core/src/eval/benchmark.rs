use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use super::metrics::{psnr_unmasked, style_cosine_between};
use crate::dataset::{MaskSpec, Sample};
use crate::diffusion::{sample_inpaint, sample_inpaint_batch, InpaintTask, NsdModel, SamplerConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::psrl::StyleNet;
use crate::rng;

pub const REPORT_HEADER: &str = "task_id,style_cos_self,style_cos_foreign,psnr_db,status";

/// An inpainting task plus an image of another style whose context serves
/// as the foreign reference.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchTask {
    pub id: usize,
    pub task: InpaintTask,
    pub foreign: Image,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub sampler: SamplerConfig,
    /// Patches per side for the style-cosine score.
    pub k: usize,
    pub p: usize,
    /// Tasks sampled together.
    pub batch: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            k: 4,
            p: 16,
            batch: 8,
            seed: 0,
        }
    }
}

/// `n` tasks cycling through `samples`, each paired with a random image of
/// a different style.
pub fn benchmark_tasks(samples: &[Sample], n: usize, seed: u64) -> Result<Vec<BenchTask>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("no samples to build tasks from".into()))?;
    if samples.iter().all(|s| s.style_id == first.style_id) {
        return Err(Error::InvalidArgument("benchmark tasks need at least 2 styles".into()));
    }
    (0..n)
        .map(|i| {
            let s = &samples[i % samples.len()];
            let mut r = rng::stream(seed, "bench-foreign", i as u64);
            let foreign = loop {
                let c = &samples[r.random_range(0..samples.len())];
                if c.style_id != s.style_id {
                    break c.image.clone();
                }
            };
            Ok(BenchTask {
                id: i,
                task: InpaintTask {
                    image: s.image.clone(),
                    mask: s.mask_spec(),
                    tokens: s.tokens.clone(),
                    seed: rng::derive_seed(seed, "bench-task", i as u64),
                },
                foreign,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub task_id: usize,
    pub style_cos_self: f64,
    pub style_cos_foreign: f64,
    pub psnr_db: f64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

impl TaskRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn failed(task_id: usize, e: &Error) -> Self {
        Self {
            task_id,
            style_cos_self: f64::NAN,
            style_cos_foreign: f64::NAN,
            psnr_db: f64::NAN,
            status: format!("failed: {}", e.to_string().replace([',', '\n'], ";")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<TaskRecord>,
    pub echo: BTreeMap<String, String>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    fn ok(&self) -> impl Iterator<Item = &TaskRecord> {
        self.records.iter().filter(|r| r.is_ok())
    }

    /// Fraction of successful tasks whose self score beats the foreign one.
    pub fn win_rate(&self) -> f64 {
        mean(self.ok().map(|r| (r.style_cos_self > r.style_cos_foreign) as u8 as f64))
    }

    pub fn mean_self(&self) -> f64 {
        mean(self.ok().map(|r| r.style_cos_self))
    }

    pub fn mean_foreign(&self) -> f64 {
        mean(self.ok().map(|r| r.style_cos_foreign))
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.ok().map(|r| r.psnr_db))
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.records {
            writeln!(out, "{},{:.6},{:.6},{:.4},{}", r.task_id, r.style_cos_self, r.style_cos_foreign, r.psnr_db, r.status).expect("write to string");
        }
        out
    }

    /// `key=value` lines: aggregates, then the config echo.
    pub fn aggregate(&self) -> String {
        let ok = self.ok().count();
        let mut out = String::new();
        for (k, v) in [
            ("tasks", self.records.len().to_string()),
            ("tasks_ok", ok.to_string()),
            ("tasks_failed", (self.records.len() - ok).to_string()),
            ("mean_style_cos_self", format!("{:.6}", self.mean_self())),
            ("mean_style_cos_foreign", format!("{:.6}", self.mean_foreign())),
            ("mean_psnr_db", format!("{:.4}", self.mean_psnr())),
            ("win_rate", format!("{:.6}", self.win_rate())),
        ] {
            writeln!(out, "{k}={v}").expect("write to string");
        }
        for (k, v) in &self.echo {
            writeln!(out, "{k}={v}").expect("write to string");
        }
        out
    }
}

fn score(psrl: &StyleNet<f32>, t: &BenchTask, out: &Image, cfg: &BenchConfig) -> Result<TaskRecord> {
    let m: &MaskSpec = &t.task.mask;
    let seed = rng::derive_seed(t.task.seed, "bench-score", 0);
    Ok(TaskRecord {
        task_id: t.id,
        style_cos_self: style_cosine_between(psrl, out, m, &t.task.image, m, cfg.k, cfg.p, seed)?,
        style_cos_foreign: style_cosine_between(psrl, out, m, &t.foreign, m, cfg.k, cfg.p, seed)?,
        psnr_db: psnr_unmasked(out, &t.task.image, m)?,
        status: "ok".into(),
    })
}

/// Inpaints and scores every task. Failures become `failed` rows; the sweep
/// never aborts on a single task.
pub fn run_benchmark(model: &NsdModel<f32>, psrl: &StyleNet<f32>, tasks: &[BenchTask], cfg: &BenchConfig) -> EvalReport {
    let mut outputs: Vec<Result<Image>> = Vec::with_capacity(tasks.len());
    for chunk in tasks.chunks(cfg.batch.max(1)) {
        let inner: Vec<InpaintTask> = chunk.iter().map(|t| t.task.clone()).collect();
        match sample_inpaint_batch(model, psrl, &inner, &cfg.sampler) {
            Ok(imgs) => outputs.extend(imgs.into_iter().map(Ok)),
            // Retry one by one so only the offending tasks fail.
            Err(_) => outputs.extend(inner.iter().map(|t| sample_inpaint(model, psrl, t, &cfg.sampler))),
        }
    }
    let records = tasks
        .par_iter()
        .zip(outputs.into_par_iter())
        .map(|(t, out)| match out.and_then(|img| score(psrl, t, &img, cfg)) {
            Ok(r) => r,
            Err(e) => TaskRecord::failed(t.id, &e),
        })
        .collect();
    let echo = BTreeMap::from([
        ("eval.k".to_string(), cfg.k.to_string()),
        ("eval.p".to_string(), cfg.p.to_string()),
        ("eval.seed".to_string(), cfg.seed.to_string()),
        ("sample.steps".to_string(), cfg.sampler.steps.to_string()),
        ("sample.lambda".to_string(), cfg.sampler.lambda.to_string()),
        ("sample.paste_background".to_string(), cfg.sampler.paste_background.to_string()),
        ("sample.use_reference".to_string(), cfg.sampler.use_reference.to_string()),
    ]);
    EvalReport { records, echo }
}
