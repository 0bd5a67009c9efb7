use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use s3im_core::checkpoint::{Checkpoint, NSD_MAGIC, PSRL_MAGIC};
use s3im_core::dataset::{crop_patches, dataset_read, dataset_write, word_token, MaskSpec, Sample};
use s3im_core::diffusion::{sample_inpaint, InpaintTask, NsdModel, NsdTrainer, NSD_LOG_HEADER};
use s3im_core::eval::{benchmark_tasks, clustering_stats, export_projection, run_benchmark, BenchConfig, EvalReport};
use s3im_core::image::Image;
use s3im_core::psrl::{PsrlTrainer, StyleNet, PSRL_LOG_HEADER};
use s3im_core::{rng, Error, Result};

use crate::config::{parse_rect, RunConfig};

pub const DATASET_FILE: &str = "dataset.s3im";
pub const HELDOUT_FILE: &str = "heldout.s3im";
pub const MANIFEST_FILE: &str = "dataset_manifest.txt";
pub const PSRL_CKPT: &str = "psrl.ckpt";
pub const PSRL_LOG: &str = "psrl_log.csv";
pub const NSD_CKPT: &str = "nsd.ckpt";
pub const NSD_LOG: &str = "nsd_log.csv";
pub const INPAINT_FILE: &str = "inpaint.ppm";
pub const REPORT_FILE: &str = "eval_report.csv";
pub const SUMMARY_FILE: &str = "eval_summary.txt";
pub const PROJECTION_FILE: &str = "projection.csv";
pub const VIZ_SUMMARY_FILE: &str = "viz_summary.txt";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))
}

fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "run gen-dataset first")));
    }
    dataset_read(path)
}

fn read_checkpoint(path: &Path, magic: &[u8; 8]) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    Checkpoint::read(path, magic)
}

pub fn load_psrl(path: &Path) -> Result<StyleNet<f32>> {
    let mut net = PsrlTrainer::from_checkpoint(&read_checkpoint(path, PSRL_MAGIC)?)?.net;
    net.params.set_trainable(|_| true);
    Ok(net)
}

pub fn load_nsd(path: &Path) -> Result<NsdModel<f32>> {
    let mut model = NsdTrainer::from_checkpoint(&read_checkpoint(path, NSD_MAGIC)?)?.model;
    model.params.set_trainable(|_| true);
    Ok(model)
}

pub fn gen_dataset(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out(cfg)?;
    let train = cfg.dataset.generate()?;
    let held = cfg.dataset.generate_split("test", cfg.heldout_per_style)?;
    let (tp, hp, mp) = (cfg.path(DATASET_FILE), cfg.path(HELDOUT_FILE), cfg.path(MANIFEST_FILE));
    dataset_write(&train, &tp)?;
    dataset_write(&held, &hp)?;
    let mut m = String::new();
    for (k, v) in [
        ("format", "S3IMTOY1".to_string()),
        ("seed", cfg.seed.to_string()),
        ("styles", cfg.dataset.styles.to_string()),
        ("size", cfg.dataset.size.to_string()),
        ("mask_min", cfg.dataset.mask_min.to_string()),
        ("mask_max", cfg.dataset.mask_max.to_string()),
        ("train_file", DATASET_FILE.to_string()),
        ("train_samples", train.len().to_string()),
        ("heldout_file", HELDOUT_FILE.to_string()),
        ("heldout_samples", held.len().to_string()),
    ] {
        writeln!(m, "{k}={v}").expect("write to string");
    }
    for s in 0..cfg.dataset.styles {
        let n = train.iter().filter(|x| x.style_id as usize == s).count();
        writeln!(m, "style.{s}.train={n}").expect("write to string");
    }
    write(&mp, &m)?;
    Ok(vec![tp, hp, mp])
}

/// Log rows already recorded before `step`, so a resumed run rewrites the
/// same file an uninterrupted one would.
fn log_prefix(path: &Path, header: &str, step: u64) -> Vec<String> {
    let mut rows = vec![header.to_string()];
    if step == 0 {
        return rows;
    }
    if let Ok(text) = std::fs::read_to_string(path) {
        rows.extend(
            text.lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step))
                .map(str::to_string),
        );
    }
    rows
}

fn flush_log(path: &Path, rows: &[String]) -> Result<()> {
    write(path, &(rows.join("\n") + "\n"))
}

fn config_clash(path: &Path) -> Error {
    Error::Config(format!(
        "{} was written with a different configuration; remove it or pick another --out",
        path.display()
    ))
}

pub fn train_psrl(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out(cfg)?;
    let data = read_dataset(&cfg.path(DATASET_FILE))?;
    let (ck_path, log_path) = (cfg.path(PSRL_CKPT), cfg.path(PSRL_LOG));
    let mut t = if ck_path.exists() {
        let t = PsrlTrainer::from_checkpoint(&Checkpoint::read(&ck_path, PSRL_MAGIC)?)?;
        if t.cfg != cfg.psrl {
            return Err(config_clash(&ck_path));
        }
        log::info!("resuming style training at step {}", t.step);
        t
    } else {
        PsrlTrainer::new(cfg.psrl.clone())
    };
    let mut log = log_prefix(&log_path, PSRL_LOG_HEADER, t.step);
    while !t.is_done() {
        let until = t.step + cfg.checkpoint_every;
        let res = t.run(&data, until, |r| log.push(r.csv()));
        flush_log(&log_path, &log)?;
        res?;
        t.checkpoint().write(&ck_path, PSRL_MAGIC)?;
    }
    if !ck_path.exists() {
        t.checkpoint().write(&ck_path, PSRL_MAGIC)?;
        flush_log(&log_path, &log)?;
    }
    Ok(vec![ck_path, log_path])
}

pub fn train_nsd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out(cfg)?;
    let data = read_dataset(&cfg.path(DATASET_FILE))?;
    let psrl = load_psrl(&cfg.path(PSRL_CKPT))?;
    let (ck_path, log_path) = (cfg.path(NSD_CKPT), cfg.path(NSD_LOG));
    let mut t = if ck_path.exists() {
        let t = NsdTrainer::from_checkpoint(&Checkpoint::read(&ck_path, NSD_MAGIC)?)?;
        if t.cfg != cfg.nsd {
            return Err(config_clash(&ck_path));
        }
        log::info!("resuming diffusion training at step {}", t.step);
        t
    } else {
        NsdTrainer::new(cfg.nsd.clone())?
    };
    let mut log = log_prefix(&log_path, NSD_LOG_HEADER, t.step);
    while !t.is_done() {
        let until = t.step + cfg.checkpoint_every;
        let res = t.run(&data, &psrl, until, |r| log.push(r.csv()));
        flush_log(&log_path, &log)?;
        res?;
        t.checkpoint().write(&ck_path, NSD_MAGIC)?;
    }
    if !ck_path.exists() {
        t.checkpoint().write(&ck_path, NSD_MAGIC)?;
        flush_log(&log_path, &log)?;
    }
    Ok(vec![ck_path, log_path])
}

pub fn caption_tokens(caption: &str) -> Result<Vec<u8>> {
    caption
        .split_whitespace()
        .map(|w| word_token(w).ok_or_else(|| Error::InvalidArgument(format!("unknown caption token `{w}`"))))
        .collect()
}

/// The inpainting request described by `cfg.inpaint`.
pub fn inpaint_task(cfg: &RunConfig) -> Result<InpaintTask> {
    let p = &cfg.inpaint;
    let (image, mask, tokens) = if p.image.is_empty() {
        let held = read_dataset(&cfg.path(HELDOUT_FILE))?;
        let s = held
            .get(p.sample)
            .ok_or_else(|| Error::InvalidArgument(format!("held-out sample {} does not exist ({} samples)", p.sample, held.len())))?;
        (s.image.clone(), s.mask_spec(), s.tokens.clone())
    } else {
        let img = Image::read_ppm(Path::new(&p.image))?;
        if p.mask.is_empty() || p.caption.is_empty() {
            return Err(Error::InvalidArgument("an input image needs inpaint.mask and inpaint.caption".into()));
        }
        (img, MaskSpec::empty(0, 0), Vec::new())
    };
    let mask = if p.mask.is_empty() { mask } else { MaskSpec::new(image.height, image.width, parse_rect(&p.mask)?)? };
    let tokens = if p.caption.is_empty() { tokens } else { caption_tokens(&p.caption)? };
    Ok(InpaintTask {
        image,
        mask,
        tokens,
        seed: rng::derive_seed(cfg.seed, "inpaint", 0),
    })
}

pub fn inpaint(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out(cfg)?;
    let task = inpaint_task(cfg)?;
    let psrl = load_psrl(&cfg.path(PSRL_CKPT))?;
    let model = load_nsd(&cfg.path(NSD_CKPT))?;
    let out = sample_inpaint(&model, &psrl, &task, &cfg.sampler)?;
    let path = cfg.path(INPAINT_FILE);
    out.write_ppm(&path)?;
    Ok(vec![path])
}

pub fn eval(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out(cfg)?;
    let held = read_dataset(&cfg.path(HELDOUT_FILE))?;
    let psrl = load_psrl(&cfg.path(PSRL_CKPT))?;
    let model = load_nsd(&cfg.path(NSD_CKPT))?;
    let tasks = if held.is_empty() { Vec::new() } else { benchmark_tasks(&held, cfg.eval.tasks, cfg.seed)? };
    let bench = BenchConfig {
        sampler: cfg.sampler,
        k: cfg.eval.k,
        p: cfg.eval.p,
        batch: cfg.eval.batch,
        seed: cfg.seed,
    };
    let mut report = if tasks.is_empty() {
        EvalReport {
            records: Vec::new(),
            echo: Default::default(),
        }
    } else {
        run_benchmark(&model, &psrl, &tasks, &bench)
    };
    report.echo.insert("eval.tasks".into(), tasks.len().to_string());
    report.echo.insert("seed".into(), cfg.seed.to_string());
    let (rp, sp) = (cfg.path(REPORT_FILE), cfg.path(SUMMARY_FILE));
    write(&rp, &report.csv())?;
    write(&sp, &report.aggregate())?;
    Ok(vec![rp, sp])
}

pub fn viz(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out(cfg)?;
    let held = read_dataset(&cfg.path(HELDOUT_FILE))?;
    let psrl = load_psrl(&cfg.path(PSRL_CKPT))?;
    let mut embs = Vec::new();
    let mut labels = Vec::new();
    for (i, s) in held.iter().take(cfg.viz.images).enumerate() {
        let ps = crop_patches(&s.image, cfg.viz.patches, cfg.psrl.p, rng::derive_seed(cfg.seed, "viz", i as u64))?;
        embs.extend(psrl.embed_batch(&ps.patches.iter().collect::<Vec<_>>())?);
        labels.extend(std::iter::repeat_n(i, ps.patches.len()));
    }
    let (pp, sp) = (cfg.path(PROJECTION_FILE), cfg.path(VIZ_SUMMARY_FILE));
    export_projection(&embs, &labels, &pp)?;
    let mut summary = format!("embeddings={}\nimages={}\n", embs.len(), labels.iter().max().map_or(0, |m| m + 1));
    match clustering_stats(&embs, &labels) {
        Ok(st) => write!(
            summary,
            "silhouette={:.6}\nintra_mean_cos={:.6}\ninter_mean_cos={:.6}\nmargin={:.6}\n",
            st.silhouette,
            st.intra_mean_cos,
            st.inter_mean_cos,
            st.margin()
        )
        .expect("write to string"),
        Err(e) => writeln!(summary, "clustering=unavailable: {e}").expect("write to string"),
    }
    write(&sp, &summary)?;
    Ok(vec![pp, sp])
}
