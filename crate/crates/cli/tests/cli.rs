use std::path::Path;
use std::process::Command as Proc;

use s3im_cli::commands::*;
use s3im_cli::config::{parse_rect, KEYS};
use s3im_cli::{run, Command, RunConfig};
use s3im_core::checkpoint::PSRL_MAGIC;
use s3im_core::dataset::dataset_read;
use s3im_core::image::{Image, Rect};
use s3im_core::psrl::{PsrlTrainer, PSRL_LOG_HEADER};
use s3im_core::Error;

/// A pipeline small enough to run every command in seconds.
const SMOKE: &str = "
seed=3
checkpoint_every=2
dataset.styles=2
dataset.images_per_style=2
dataset.heldout_per_style=1
dataset.size=64
dataset.mask_min=0.2
dataset.mask_max=0.2
psrl.n=2
psrl.batch=2
psrl.s1=2
psrl.s2=3
nsd.c0=8
nsd.c1=16
nsd.T=20
nsd.phase_a=2
nsd.phase_b=3
nsd.batch=2
nsd.k=1
nsd.mask_min=0.2
nsd.mask_max=0.2
sample.steps=3
eval.tasks=2
eval.k=1
eval.batch=2
viz.images=2
viz.patches=3
";

fn smoke(out: &Path) -> RunConfig {
    let mut c = RunConfig::from_text(SMOKE).unwrap();
    c.out = out.to_path_buf();
    c
}

fn bin() -> Proc {
    let mut p = Proc::new(env!("CARGO_BIN_EXE_s3im"));
    p.env("RUST_LOG", "error");
    p
}

#[test]
fn default_config_round_trips() {
    let d = RunConfig::default();
    let text = d.to_text();
    assert_eq!(RunConfig::from_text(&text).unwrap(), d);
    for (k, doc) in KEYS {
        assert!(d.get(k).is_some(), "{k}");
        assert!(!doc.is_empty());
        assert!(text.lines().any(|l| l.starts_with(&format!("{k}="))), "{k}");
    }
    d.validate().unwrap();
}

#[test]
fn config_text_rules() {
    let c = RunConfig::from_text("# header\n\npsrl.tau = 0.5 # trailing\npsrl.tau=0.25\nseed=9\n").unwrap();
    assert_eq!(c.psrl.tau, 0.25);
    assert_eq!((c.seed, c.dataset.seed, c.psrl.seed, c.nsd.seed), (9, 9, 9, 9));
    let c = RunConfig::from_text("dataset.size=32\nnsd.k=2\nnsd.p=16").unwrap();
    assert_eq!((c.nsd.arch.image, c.sampler.k, c.sampler.p), (32, 2, 16));
    for bad in ["nope=1", "psrl.tau", "psrl.n=two", "sample.paste_background=maybe", "psrl.mode=fast", "nsd.schedule=sigmoid"] {
        assert!(matches!(RunConfig::from_text(bad), Err(Error::Config(_))), "{bad}");
    }
    let unknown = RunConfig::from_text("nope=1").unwrap_err().to_string();
    assert!(unknown.contains("nope"));
    assert!(RunConfig::from_text("psrl.tau=0").unwrap().validate().is_err());
    assert!(RunConfig::from_text("nsd.lambda=-1").unwrap().validate().is_err());
    assert!(RunConfig::from_text("sample.lambda=-0.5").unwrap().validate().is_err());
    assert!(RunConfig::from_text("checkpoint_every=0").unwrap().validate().is_err());
}

#[test]
fn rect_and_caption_parsing() {
    assert_eq!(parse_rect("1, 2,3,4").unwrap(), Rect::new(1, 2, 3, 4));
    assert!(parse_rect("1,2,3").is_err());
    assert!(parse_rect("a,b,c,d").is_err());
    assert_eq!(caption_tokens("red disc").unwrap().len(), 2);
    let e = caption_tokens("red unicorn").unwrap_err().to_string();
    assert!(e.contains("unicorn"), "{e}");
}

#[test]
fn gen_dataset_counts_and_empty_sets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    run(Command::GenDataset, &cfg).unwrap();
    assert_eq!(dataset_read(&cfg.path(DATASET_FILE)).unwrap().len(), 4);
    assert_eq!(dataset_read(&cfg.path(HELDOUT_FILE)).unwrap().len(), 2);
    let manifest = std::fs::read_to_string(cfg.path(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("train_samples=4\n") && manifest.contains("heldout_samples=2\n"));

    let mut empty = smoke(&dir.path().join("empty"));
    empty.set("dataset.images_per_style", "0").unwrap();
    empty.set("dataset.heldout_per_style", "0").unwrap();
    run(Command::GenDataset, &empty).unwrap();
    assert!(dataset_read(&empty.path(DATASET_FILE)).unwrap().is_empty());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let full = smoke(&dir.path().join("full"));
    run(Command::GenDataset, &full).unwrap();
    run(Command::TrainPsrl, &full).unwrap();

    // Simulate a run killed after 3 of 5 steps with a stale log tail.
    let cut = smoke(&dir.path().join("cut"));
    run(Command::GenDataset, &cut).unwrap();
    let data = dataset_read(&cut.path(DATASET_FILE)).unwrap();
    let mut t = PsrlTrainer::new(cut.psrl.clone());
    let rows = t.run(&data, 3, |_| {}).unwrap();
    t.checkpoint().write(&cut.path(PSRL_CKPT), PSRL_MAGIC).unwrap();
    let mut log = vec![PSRL_LOG_HEADER.to_string()];
    log.extend(rows.iter().map(|r| r.csv()));
    log.push("3,2,9,9,9,9,9,9".into());
    std::fs::write(cut.path(PSRL_LOG), log.join("\n") + "\n").unwrap();
    run(Command::TrainPsrl, &cut).unwrap();

    for f in [PSRL_CKPT, PSRL_LOG] {
        assert_eq!(std::fs::read(full.path(f)).unwrap(), std::fs::read(cut.path(f)).unwrap(), "{f}");
    }
    // A checkpoint from another configuration is refused.
    let mut other = cut.clone();
    other.set("psrl.tau", "0.1").unwrap();
    assert!(matches!(run(Command::TrainPsrl, &other), Err(Error::Config(_))));
}

#[test]
fn pipeline_outputs_and_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    assert!(matches!(run(Command::TrainPsrl, &cfg), Err(Error::Io { .. })));
    run(Command::GenDataset, &cfg).unwrap();
    assert!(matches!(run(Command::TrainNsd, &cfg), Err(Error::MissingCheckpoint(_))));
    run(Command::TrainPsrl, &cfg).unwrap();
    run(Command::TrainNsd, &cfg).unwrap();
    let log = std::fs::read_to_string(cfg.path(NSD_LOG)).unwrap();
    assert_eq!(log.lines().count(), 1 + 5);

    // Paste flag keeps every unmasked pixel of the input.
    let mut pasted = cfg.clone();
    pasted.set("sample.paste_background", "true").unwrap();
    run(Command::Inpaint, &pasted).unwrap();
    let task = inpaint_task(&pasted).unwrap();
    let out = Image::read_ppm(&pasted.path(INPAINT_FILE)).unwrap();
    let input_path = dir.path().join("input.ppm");
    task.image.write_ppm(&input_path).unwrap();
    let input = Image::read_ppm(&input_path).unwrap();
    for y in 0..64 {
        for x in 0..64 {
            if !task.mask.is_masked(x, y) {
                assert_eq!(out.get(x, y), input.get(x, y));
            }
        }
    }
    let mut bad = cfg.clone();
    bad.set("inpaint.caption", "red unicorn").unwrap();
    assert!(run(Command::Inpaint, &bad).unwrap_err().to_string().contains("unicorn"));

    run(Command::Eval, &cfg).unwrap();
    let report = std::fs::read_to_string(cfg.path(REPORT_FILE)).unwrap();
    assert_eq!(report.lines().count(), 1 + 2);
    run(Command::Viz, &cfg).unwrap();
    let proj = std::fs::read_to_string(cfg.path(PROJECTION_FILE)).unwrap();
    assert_eq!(proj.lines().count(), 1 + 2 * 3);
    assert!(std::fs::read_to_string(cfg.path(VIZ_SUMMARY_FILE)).unwrap().contains("embeddings=6\n"));

    // Empty held-out set gives an empty report.
    let mut empty = cfg.clone();
    empty.out = dir.path().join("empty");
    empty.set("dataset.heldout_per_style", "0").unwrap();
    run(Command::GenDataset, &empty).unwrap();
    for f in [PSRL_CKPT, NSD_CKPT] {
        std::fs::copy(cfg.path(f), empty.path(f)).unwrap();
    }
    run(Command::Eval, &empty).unwrap();
    assert_eq!(std::fs::read_to_string(empty.path(REPORT_FILE)).unwrap().lines().count(), 1);
    assert!(std::fs::read_to_string(empty.path(SUMMARY_FILE)).unwrap().contains("tasks=0\n"));
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("smoke.cfg");
    std::fs::write(&cfg_path, SMOKE).unwrap();
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code().unwrap();
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["gen-dataset", "--bogus"]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["show-config", "--set", "nope=1"]), 1);
    assert_eq!(code(&["train-psrl", "--mode", "sideways"]), 1);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let cfg_s = cfg_path.to_str().unwrap();
    assert_eq!(code(&["train-psrl", "--config", cfg_s, "--out", out_s]), 2);
    assert_eq!(code(&["gen-dataset", "--config", cfg_s, "--out", out_s]), 0);
    assert_eq!(code(&["train-nsd", "--config", cfg_s, "--out", out_s]), 2);
    let nan = bin()
        .args(["train-psrl", "--config", cfg_s, "--out", out_s, "--set", "psrl.lr=inf"])
        .output()
        .unwrap();
    assert_eq!(nan.status.code(), Some(3), "{}", String::from_utf8_lossy(&nan.stderr));
    assert!(String::from_utf8_lossy(&nan.stderr).contains("numerical abort at step"));
    let shown = bin().args(["show-config", "--seed", "11", "--mode", "stats_only", "--paste-background"]).output().unwrap();
    let text = String::from_utf8(shown.stdout).unwrap();
    assert!(text.contains("\nseed=11\n") && text.contains("psrl.mode=stats_only") && text.contains("sample.paste_background=true"));
}

#[test]
fn thread_cap_is_validated() {
    let out = bin().env("S3IM_THREADS", "zero").args(["show-config"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().env("S3IM_THREADS", "1").args(["show-config"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
