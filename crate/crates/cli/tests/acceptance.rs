//! Acceptance suite. Every criterion prints one `PASS|FAIL criterion N`
//! line straight to the process stderr (not captured by the harness) and
//! then asserts. Tests hold a global lock so runtime budgets are measured
//! without interference on a single core.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s3im_cli::commands::{inpaint_task, DATASET_FILE, HELDOUT_FILE, INPAINT_FILE, NSD_CKPT, NSD_LOG, PSRL_CKPT, REPORT_FILE, SUMMARY_FILE, VIZ_SUMMARY_FILE};
use s3im_cli::RunConfig;
use s3im_core::dataset::{crop_patches, make_mask, DatasetConfig};
use s3im_core::diffusion::*;
use s3im_core::eval::{clustering_stats, pca_2d, PSNR_CAP_DB};
use s3im_core::image::Image;
use s3im_core::psrl::*;
use s3im_core::reference::{build_ref_input, masked_condition};
use s3im_core::Error;
use s3im_tensor::{grad_check, grad_check_at, Bindings, GradCheckReport, NceTerm, Tape, Tensor, Var};

const PRIMITIVE_TOL: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-3;
/// Share of composite coordinates allowed to need a smaller FD step
/// because their stencil crossed a ReLU kink.
const MAX_REFINED_FRACTION: f64 = 0.25;
const GRAD_SEEDS: u64 = 20;
const ORACLE_TOL: f64 = 1e-5;
const IDENTITY_TOL: f64 = 1e-6;
const SCHEDULE_TOL: f64 = 1e-6;
const MC_REL_TOL: f64 = 0.03;
const MC_DRAWS: usize = 10_000;
const SILHOUETTE_MIN: f64 = 0.5;
const CLUSTER_MARGIN_MIN: f64 = 0.3;
const ABLATION_SEEDS: u64 = 5;
const ABLATION_STEPS: u64 = 400;
const ABLATION_STAGE_ONE: u64 = 200;
const ABLATION_WINS_MIN: usize = 4;
const WIN_RATE_MIN: f64 = 0.8;
const EVAL_TASKS: usize = 50;
/// Mean unmasked PSNR without background pasting. The pilot run with the
/// default configuration measured 20.66 dB; the bound floors it.
const UNPASTED_PSNR_MIN_DB: f64 = 20.0;
const ADDITIVITY_TOL: f64 = 1e-5;
const FAST_BUDGET_S: f64 = 60.0;
const PSRL_BUDGET_S: f64 = 600.0;
const ABLATION_BUDGET_S: f64 = 1800.0;
const NSD_BUDGET_S: f64 = 3600.0;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u8, what: &str, pass: bool, detail: &str) {
    let line = format!("{} criterion {n}: {what} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn bin() -> Proc {
    let mut p = Proc::new(env!("CARGO_BIN_EXE_s3im"));
    p.env("RUST_LOG", "error");
    p
}

fn cli(args: &[&str], cfg: &Path, out: &Path) -> Result<String, String> {
    let o = bin()
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("`s3im {}` exited {:?}: {}", args.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr)))
    }
}

/// A clean directory under the cargo scratch area. Stale checkpoints would
/// make the training commands resume instead of train.
fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn summary_value(text: &str, key: &str) -> Option<f64> {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key}=")).and_then(|v| v.parse().ok()))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tensor_err(e: Error) -> s3im_tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => s3im_tensor::TensorError::Invalid(other.to_string()),
    }
}

fn noise_image(size: usize, r: &mut ChaCha8Rng) -> Image {
    Image::from_data(size, size, (0..size * size * 3).map(|_| r.random::<f32>()).collect()).unwrap()
}

fn unit(d: usize, r: &mut ChaCha8Rng) -> StyleEmbedding {
    let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    StyleEmbedding(v.iter().map(|x| (x / n) as f32).collect())
}

// ---------------------------------------------------------------- 1

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> s3im_tensor::Result<Var>>;
type Make = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;

fn u(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

fn primitives() -> Vec<(&'static str, Op, Make)> {
    fn p(name: &'static str, op: impl Fn(&mut Tape<f64>, &[Var]) -> s3im_tensor::Result<Var> + 'static, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static) -> (&'static str, Op, Make) {
        (name, Box::new(op), Box::new(make))
    }
    vec![
        p("conv2d", |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1), |r| vec![u(r, &[2, 2, 5, 5]), u(r, &[3, 2, 3, 3]), u(r, &[3])]),
        p("linear", |t, v| t.linear(v[0], v[1], Some(v[2])), |r| vec![u(r, &[3, 4]), u(r, &[5, 4]), u(r, &[5])]),
        p("matmul", |t, v| t.matmul(v[0], v[1]), |r| vec![u(r, &[2, 3, 4]), u(r, &[2, 4, 2])]),
        p("relu", |t, v| Ok(t.relu(v[0])), |r| vec![u(r, &[16])]),
        p("add", |t, v| t.add(v[0], v[1]), |r| vec![u(r, &[6]), u(r, &[6])]),
        p("sub", |t, v| t.sub(v[0], v[1]), |r| vec![u(r, &[6]), u(r, &[6])]),
        p("mul", |t, v| t.mul(v[0], v[1]), |r| vec![u(r, &[6]), u(r, &[6])]),
        p("scale", |t, v| Ok(t.scale(v[0], -2.5)), |r| vec![u(r, &[6])]),
        p("add_channel", |t, v| t.add_channel(v[0], v[1]), |r| vec![u(r, &[2, 3, 2, 2]), u(r, &[2, 3])]),
        p("channel_mean", |t, v| t.channel_mean(v[0]), |r| vec![u(r, &[2, 3, 3, 3])]),
        p("channel_std", |t, v| t.channel_std(v[0]), |r| vec![u(r, &[2, 3, 3, 3])]),
        p("concat", |t, v| t.concat(&[v[0], v[1]], 1), |r| vec![u(r, &[2, 3, 2]), u(r, &[2, 1, 2])]),
        p("narrow", |t, v| t.narrow(v[0], 1, 1, 2), |r| vec![u(r, &[2, 4, 3])]),
        p("index_select", |t, v| t.index_select(v[0], &[2, 0, 2]), |r| vec![u(r, &[3, 4])]),
        p("reshape", |t, v| t.reshape(v[0], &[4, 3]), |r| vec![u(r, &[2, 6])]),
        p("permute", |t, v| t.permute(v[0], &[0, 2, 1]), |r| vec![u(r, &[2, 3, 4])]),
        p("pad_replicate", |t, v| t.pad_replicate(v[0], 1), |r| vec![u(r, &[1, 2, 3, 3])]),
        p("upsample2x", |t, v| t.upsample2x(v[0]), |r| vec![u(r, &[1, 2, 2, 3])]),
        p("depth_to_space", |t, v| t.depth_to_space(v[0], 2), |r| vec![u(r, &[1, 8, 2, 2])]),
        p("attention", |t, v| t.attention(v[0], v[1], v[2]), |r| vec![u(r, &[2, 3, 4]), u(r, &[2, 5, 4]), u(r, &[2, 5, 4])]),
        p("l2_normalize", |t, v| t.l2_normalize(v[0]), |r| vec![u(r, &[3, 4])]),
        p("row_norm", |t, v| Ok(t.row_norm(v[0])), |r| vec![u(r, &[3, 4])]),
        p("sum", |t, v| Ok(t.sum(v[0])), |r| vec![u(r, &[5])]),
        p("mean", |t, v| Ok(t.mean(v[0])), |r| vec![u(r, &[5])]),
        p("mse", |t, v| t.mse(v[0], v[1]), |r| vec![u(r, &[7]), u(r, &[7])]),
        p(
            "info_nce",
            |t, v| {
                let s = t.scale(v[0], 1.0 / DEFAULT_TAU);
                t.info_nce(
                    s,
                    vec![
                        NceTerm { row: 0, positive: 1, negatives: vec![2, 3] },
                        NceTerm { row: 2, positive: 3, negatives: vec![0, 1, 2] },
                    ],
                )
            },
            |r| vec![u(r, &[4, 4])],
        ),
    ]
}

fn composite_ok(rep: &GradCheckReport) -> bool {
    rep.passed && rep.refined as f64 <= MAX_REFINED_FRACTION * rep.checked as f64
}

fn psrl_composite(seed: u64, stage: Stage) -> GradCheckReport {
    let net = StyleNet::<f64>::init(100 + seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed + 77);
    let patches: Vec<Image> = (0..4).map(|_| noise_image(MIN_PATCH, &mut r)).collect();
    let x = Image::batch_tensor::<f64>(&patches.iter().collect::<Vec<_>>(), 1.0, -0.5).unwrap();
    let paths: Vec<String> = net.params.paths().map(String::from).collect();
    let inputs: Vec<Tensor<f64>> = paths.iter().map(|p| net.params.get(p).unwrap().clone()).collect();
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..3).map(|_| r.random_range(0..t.numel())).collect()).collect();
    let layout = BatchLayout { pairs: 1, n: 2 };
    grad_check_at(
        |t, v| {
            let b = Bindings::from_pairs(paths.iter().cloned().zip(v.iter().copied()));
            let xv = t.constant(x.shape(), x.data().to_vec())?;
            let (vars, _) = batch_forward(t, &b, xv, layout, stage, DEFAULT_TAU, false).map_err(tensor_err)?;
            Ok(vars.total)
        },
        &inputs,
        &coords,
        COMPOSITE_TOL,
    )
    .unwrap()
}

fn tiny_model<T: s3im_tensor::Real>(seed: u64) -> NsdModel<T> {
    let arch = NsdArch { image: 16, c0: 4, c1: 8, ..Default::default() };
    NsdModel::new(arch, build_schedule(20, ScheduleKind::Cosine).unwrap(), seed).unwrap()
}

fn style_bundle(b: usize, k: usize, lambda: f64, r: &mut ChaCha8Rng) -> ConditioningBundle {
    ConditioningBundle {
        tokens: (0..b).map(|i| vec![1 + i as u8, 5, 12]).collect(),
        style: Some((0..b).map(|_| (0..k).map(|_| unit(EMBED_DIM, r)).collect()).collect()),
        lambda,
    }
}

fn denoising_composite(seed: u64) -> GradCheckReport {
    let mut m = tiny_model::<f64>(100 + seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    // Wake the zero-initialized paths so every parameter carries gradient.
    for (p, v) in m.params.iter_mut() {
        if p.starts_with("conn.") || p.contains(".v_sty.") {
            *v = Tensor::randn(v.shape(), 0.1, &mut r);
        }
    }
    let img = noise_image(16, &mut r);
    let mask = make_mask(&img, 0.25, r.random()).unwrap();
    let batch = TrainBatch {
        x0: Image::batch_tensor::<f32>(&[&img], 2.0, -1.0).unwrap(),
        t: vec![r.random_range(0..20)],
        eps: Tensor::randn(&[1, 3, 16, 16], 1.0, &mut r),
        bundle: style_bundle(1, 3, 1.0, &mut r),
        reference: Some(masked_condition::<f32>(&[&img], &[mask]).unwrap()),
    };
    let paths: Vec<String> = m.params.paths().map(String::from).collect();
    let inputs: Vec<Tensor<f64>> = paths.iter().map(|p| m.params.get(p).unwrap().clone()).collect();
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| vec![r.random_range(0..t.numel())]).collect();
    grad_check_at(
        |t, v| {
            let b = Bindings::from_pairs(paths.iter().cloned().zip(v.iter().copied()));
            training_loss(&m, t, &b, &batch).map_err(tensor_err)
        },
        &inputs,
        &coords,
        COMPOSITE_TOL,
    )
    .unwrap()
}

#[test]
fn criterion_01_gradient_suite() {
    let _g = serial();
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for (name, op, make) in primitives() {
        for seed in 0..GRAD_SEEDS {
            let mut r = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
            let rep = grad_check(&op, &make(&mut r), PRIMITIVE_TOL).unwrap();
            worst = worst.max(rep.max_rel_err);
            checks += 1;
            if !rep.passed {
                failures.push(format!("{name}/{seed}"));
            }
        }
    }
    let mut composite_worst = 0.0f64;
    for seed in 0..GRAD_SEEDS {
        for (name, rep) in [
            ("psrl stage 1", psrl_composite(seed, Stage::One)),
            ("psrl stage 2", psrl_composite(seed, Stage::Two)),
            ("denoising", denoising_composite(seed)),
        ] {
            composite_worst = composite_worst.max(rep.max_rel_err);
            checks += 1;
            if !composite_ok(&rep) {
                failures.push(format!("{name}/{seed}"));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < FAST_BUDGET_S;
    verdict(
        1,
        "gradient suite",
        pass,
        &format!("{checks} checks, worst primitive {worst:.2e}, worst composite {composite_worst:.2e}, failures {failures:?}, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------- 2

fn conv_oracle(x: &[f64], (b, ci, h, w): (usize, usize, usize, usize), wt: &[f64], (co, k): (usize, usize), bias: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(b * co * ho * wo);
    for n in 0..b {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (y * stride + i) as i64 - pad as i64;
                                let ix = (xx * stride + j) as i64 - pad as i64;
                                if iy >= 0 && ix >= 0 && iy < h as i64 && ix < w as i64 {
                                    acc += x[((n * ci + c) * h + iy as usize) * w + ix as usize] * wt[((o * ci + c) * k + i) * k + j];
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn linear_oracle(x: &[f64], rows: usize, fan_in: usize, w: &[f64], fan_out: usize, b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * fan_out);
    for r in 0..rows {
        for o in 0..fan_out {
            out.push(b[o] + (0..fan_in).map(|i| x[r * fan_in + i] * w[o * fan_in + i]).sum::<f64>());
        }
    }
    out
}

fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], b: usize, lq: usize, lk: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * lq * d];
    for n in 0..b {
        for i in 0..lq {
            let logits: Vec<f64> = (0..lk)
                .map(|j| (0..d).map(|c| q[(n * lq + i) * d + c] * k[(n * lk + j) * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..lk {
                let p = (logits[j] - m).exp() / z;
                for c in 0..d {
                    out[(n * lq + i) * d + c] += p * v[(n * lk + j) * d + c];
                }
            }
        }
    }
    out
}

fn cos64(a: &StyleEmbedding, b: &StyleEmbedding) -> f64 {
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.0.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.0.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean silhouette on cosine distance, plus mean same/different-label cosine.
fn silhouette_oracle(e: &[StyleEmbedding], labels: &[usize]) -> (f64, f64, f64) {
    let n = e.len();
    let groups = labels.iter().max().unwrap() + 1;
    let mut sil = 0.0;
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let mut dist = vec![0.0; groups];
        let mut cnt = vec![0.0; groups];
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = cos64(&e[i], &e[j]);
            dist[labels[j]] += 1.0 - c;
            cnt[labels[j]] += 1.0;
            if labels[i] == labels[j] {
                intra += c;
                ni += 1.0;
            } else {
                inter += c;
                nx += 1.0;
            }
        }
        let a = dist[labels[i]] / cnt[labels[i]];
        let b = (0..groups).filter(|&g| g != labels[i]).map(|g| dist[g] / cnt[g]).fold(f64::INFINITY, f64::min);
        sil += (b - a) / a.max(b);
    }
    (sil / n as f64, intra / ni, inter / nx)
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let vals = (0..d).map(|i| a[i][i]).collect();
    let vecs = (0..d).map(|c| (0..d).map(|r| v[r][c]).collect()).collect();
    (vals, vecs)
}

fn pca_oracle(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = points.len();
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (p[a] - mean[a]) * (p[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    let (vals, vecs) = jacobi(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&c| {
            let v = &vecs[c];
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            v.iter().map(|x| x * lead.signum()).collect()
        })
        .collect();
    points
        .iter()
        .map(|p| {
            let proj = |a: &Vec<f64>| (0..d).map(|j| (p[j] - mean[j]) * a[j]).sum::<f64>();
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect()
}

fn nce_oracle(a: &StyleEmbedding, p: &StyleEmbedding, negs: &[StyleEmbedding], tau: f64) -> f64 {
    let dot = |x: &StyleEmbedding, y: &StyleEmbedding| x.0.iter().zip(&y.0).map(|(u, v)| *u as f64 * *v as f64).sum::<f64>();
    let pos = (dot(a, p) / tau).exp();
    let all = pos + negs.iter().map(|n| (dot(a, n) / tau).exp()).sum::<f64>();
    -(pos / all).ln()
}

#[test]
fn criterion_02_oracle_equivalence() {
    let _g = serial();
    let t0 = Instant::now();
    let mut worst = [0.0f64; 6];
    for trial in 0..10u64 {
        let mut r = ChaCha8Rng::seed_from_u64(trial);
        let mut tape = Tape::<f64>::new();

        let (b, ci, h, co) = (2, r.random_range(1..4), r.random_range(4..=8), r.random_range(1..4));
        let (k, stride, pad) = ([1, 3][trial as usize % 2], 1 + trial as usize % 2, trial as usize % 2);
        let x = u(&mut r, &[b, ci, h, h]);
        let w = u(&mut r, &[co, ci, k, k]);
        let bias = u(&mut r, &[co]);
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&bias));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = conv_oracle(x.data(), (b, ci, h, h), w.data(), (co, k), bias.data(), stride, pad);
        worst[0] = worst[0].max(max_abs_diff(tape.value(y), &want));

        let (rows, fi, fo) = (r.random_range(1..16), r.random_range(1..9), r.random_range(1..9));
        let x = u(&mut r, &[rows, fi]);
        let w = u(&mut r, &[fo, fi]);
        let bias = u(&mut r, &[fo]);
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&bias));
        let y = tape.linear(xv, wv, Some(bv)).unwrap();
        worst[1] = worst[1].max(max_abs_diff(tape.value(y), &linear_oracle(x.data(), rows, fi, w.data(), fo, bias.data())));

        let (lq, lk, d) = (r.random_range(1..=16), r.random_range(1..=16), r.random_range(1..9));
        let q = u(&mut r, &[2, lq, d]);
        let kk = u(&mut r, &[2, lk, d]);
        let v = u(&mut r, &[2, lk, d]);
        let (qv, kv, vv) = (tape.leaf(&q), tape.leaf(&kk), tape.leaf(&v));
        let y = tape.attention(qv, kv, vv).unwrap();
        worst[2] = worst[2].max(max_abs_diff(tape.value(y), &attention_oracle(q.data(), kk.data(), v.data(), 2, lq, lk, d)));

        let groups = r.random_range(2..5);
        let labels: Vec<usize> = (0..groups * 4).map(|i| i % groups).collect();
        let centers: Vec<StyleEmbedding> = (0..groups).map(|_| unit(8, &mut r)).collect();
        let embs: Vec<StyleEmbedding> = labels
            .iter()
            .map(|&l| StyleEmbedding(centers[l].0.iter().map(|c| c + r.random_range(-0.3f32..0.3)).collect()))
            .collect();
        let got = clustering_stats(&embs, &labels).unwrap();
        let (s, ia, ie) = silhouette_oracle(&embs, &labels);
        worst[3] = worst[3].max(max_abs_diff(&[got.silhouette, got.intra_mean_cos, got.inter_mean_cos], &[s, ia, ie]));

        let scales = [4.0, 2.0, 1.0, 0.5, 0.25];
        let pts: Vec<Vec<f64>> = (0..12).map(|_| scales.iter().map(|s| s * r.random_range(-1.0..1.0)).collect()).collect();
        let got = pca_2d(&pts).unwrap();
        let want = pca_oracle(&pts);
        let flat = |v: &[[f64; 2]]| v.iter().flatten().copied().collect::<Vec<f64>>();
        worst[4] = worst[4].max(max_abs_diff(&flat(&got), &flat(&want)));

        let a = unit(16, &mut r);
        let p = unit(16, &mut r);
        let negs: Vec<StyleEmbedding> = (0..r.random_range(1..8)).map(|_| unit(16, &mut r)).collect();
        let tau = [DEFAULT_TAU, 0.5, 1.0][trial as usize % 3];
        let got = contrastive_loss(&a, &p, &negs, tau).unwrap();
        worst[5] = worst[5].max((got - nce_oracle(&a, &p, &negs, tau)).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    let names = ["conv", "linear", "attention", "silhouette", "pca", "contrastive"];
    let detail: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    let pass = worst.iter().all(|w| *w <= ORACLE_TOL) && secs < FAST_BUDGET_S;
    verdict(2, "oracle equivalence", pass, &format!("max abs diff: {}, {secs:.1}s", detail.join(", ")));
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_zero_init_identity() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = NsdConfig::default();
    let model = NsdModel::<f32>::new(cfg.arch, build_schedule(cfg.timesteps, cfg.schedule).unwrap(), 11).unwrap();
    let size = cfg.arch.image;
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let img = noise_image(size, &mut r);
        let mask = make_mask(&img, r.random_range(0.1..0.3), i).unwrap();
        let (xm, mm) = masked_condition::<f32>(&[&img], &[mask]).unwrap();
        let x = Tensor::<f32>::randn(&[1, 3, size, size], 1.0, &mut r);
        let refin = build_ref_input(&x, &xm, &mm).unwrap();
        let bundle = style_bundle(1, 4, 1.0, &mut r);
        let t = [r.random_range(0..cfg.timesteps)];
        let plain = model.predict_noise(&x, &t, &bundle, None).unwrap();
        let injected = model.predict_noise(&x, &t, &bundle, Some(&refin)).unwrap();
        let d = plain.data().iter().zip(injected.data()).map(|(a, b)| (*a as f64 - *b as f64).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(3, "zero-init identity", worst <= IDENTITY_TOL, &format!("50 inputs, max abs diff {worst:.1e}, {secs:.1}s"));
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_schedule_soundness() {
    let _g = serial();
    let t0 = Instant::now();
    let steps = NsdConfig::default().timesteps;
    let mut worst_id = 0.0f64;
    let mut worst_mc = 0.0f64;
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        let s = build_schedule(steps, kind).unwrap();
        for t in 0..steps {
            worst_id = worst_id.max((s.alpha[t].powi(2) + s.sigma[t].powi(2) - 1.0).abs());
        }
        let mut r = ChaCha8Rng::seed_from_u64(4);
        // x0 uniform on [-1, 1] has variance 1/3.
        let x0 = Tensor::from_fn(&[MC_DRAWS], |_| r.random_range(-1.0f64..1.0));
        for t in [1, steps / 2, steps - 1] {
            let eps = Tensor::<f64>::randn(&[MC_DRAWS], 1.0, &mut r);
            let xt = forward_noise(&s, &x0, t, &eps).unwrap();
            let m = xt.data().iter().sum::<f64>() / MC_DRAWS as f64;
            let var = xt.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (MC_DRAWS - 1) as f64;
            let want = s.alpha[t].powi(2) / 3.0 + s.sigma[t].powi(2);
            worst_mc = worst_mc.max(((var - want) / want).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_id <= SCHEDULE_TOL && worst_mc <= MC_REL_TOL && secs < FAST_BUDGET_S;
    verdict(
        4,
        "schedule soundness",
        pass,
        &format!("T={steps}, max |a^2+s^2-1| {worst_id:.1e}, max MC rel err {:.2}%, {secs:.1}s", 100.0 * worst_mc),
    );
}

// ---------------------------------------------------------------- 5, 7, 9

struct Trained {
    psrl_dir: PathBuf,
    psrl_secs: f64,
    nsd_dir: PathBuf,
    nsd_cfg: PathBuf,
    nsd_secs: f64,
    /// Mean loss over the last 50 logged steps.
    nsd_final_loss: f64,
    /// `eval_summary.txt` and `eval_report.csv` without background pasting.
    summary: String,
    report: String,
}

/// Defaults throughout; only the NSD dataset is narrowed to two styles.
const NSD_RUN: &str = "
dataset.styles=2
dataset.images_per_style=32
dataset.heldout_per_style=25
";

fn train_pipeline() -> Result<Trained, String> {
    let psrl_dir = scratch("psrl");
    let psrl_cfg = psrl_dir.join("run.cfg");
    // One held-out image per style: renders of one style share every style
    // parameter, so only distinct-style images can form separate clusters.
    std::fs::write(&psrl_cfg, "dataset.heldout_per_style=1\n").map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    cli(&["gen-dataset"], &psrl_cfg, &psrl_dir)?;
    cli(&["train-psrl"], &psrl_cfg, &psrl_dir)?;
    let psrl_secs = t0.elapsed().as_secs_f64();

    let nsd_dir = scratch("nsd");
    let nsd_cfg = nsd_dir.join("run.cfg");
    std::fs::write(&nsd_cfg, NSD_RUN).map_err(|e| e.to_string())?;
    cli(&["gen-dataset"], &nsd_cfg, &nsd_dir)?;
    std::fs::copy(psrl_dir.join(PSRL_CKPT), nsd_dir.join(PSRL_CKPT)).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    cli(&["train-nsd"], &nsd_cfg, &nsd_dir)?;
    let nsd_secs = t0.elapsed().as_secs_f64();
    let log = std::fs::read_to_string(nsd_dir.join(NSD_LOG)).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = log.lines().skip(1).filter_map(|l| l.rsplit(',').next()?.parse().ok()).collect();
    let tail = &losses[losses.len().saturating_sub(50)..];
    let nsd_final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    cli(&["eval"], &nsd_cfg, &nsd_dir)?;
    let summary = std::fs::read_to_string(nsd_dir.join(SUMMARY_FILE)).map_err(|e| e.to_string())?;
    let report = std::fs::read_to_string(nsd_dir.join(REPORT_FILE)).map_err(|e| e.to_string())?;
    Ok(Trained { psrl_dir, psrl_secs, nsd_dir, nsd_cfg, nsd_secs, nsd_final_loss, summary, report })
}

fn trained() -> &'static Result<Trained, String> {
    static T: OnceLock<Result<Trained, String>> = OnceLock::new();
    T.get_or_init(train_pipeline)
}

#[test]
fn criterion_05_patch_clustering() {
    let _g = serial();
    let tr = match trained() {
        Ok(t) => t,
        Err(e) => return verdict(5, "held-out patch clustering", false, e),
    };
    cli(&["viz"], &tr.psrl_dir.join("run.cfg"), &tr.psrl_dir).unwrap();
    let text = std::fs::read_to_string(tr.psrl_dir.join(VIZ_SUMMARY_FILE)).unwrap();
    let n = summary_value(&text, "images").unwrap_or(0.0);
    let sil = summary_value(&text, "silhouette").unwrap_or(f64::NAN);
    let margin = summary_value(&text, "margin").unwrap_or(f64::NAN);
    let pass = sil >= SILHOUETTE_MIN && margin >= CLUSTER_MARGIN_MIN && tr.psrl_secs <= PSRL_BUDGET_S;
    verdict(
        5,
        "held-out patch clustering",
        pass,
        &format!("{n} held-out images, silhouette {sil:.3}, margin {margin:.3}, gen+train {:.0}s", tr.psrl_secs),
    );
}

#[test]
fn criterion_07_end_to_end_style_consistency() {
    let _g = serial();
    let tr = match trained() {
        Ok(t) => t,
        Err(e) => return verdict(7, "end-to-end style consistency", false, e),
    };
    let rows: Vec<Vec<&str>> = tr.report.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let wins = rows
        .iter()
        .filter(|c| c[4] == "ok" && c[1].parse::<f64>().unwrap() > c[2].parse::<f64>().unwrap())
        .count();
    // Failed tasks count as losses.
    let win_rate = wins as f64 / EVAL_TASKS as f64;
    let ok = summary_value(&tr.summary, "tasks_ok").unwrap_or(0.0);
    let pass = rows.len() == EVAL_TASKS && win_rate >= WIN_RATE_MIN && tr.nsd_secs <= NSD_BUDGET_S;
    verdict(
        7,
        "end-to-end style consistency",
        pass,
        &format!(
            "{wins}/{} wins, win rate {win_rate:.2}, {ok} ok, self {:.3} vs foreign {:.3}, final loss {:.3}, train-nsd {:.0}s",
            rows.len(),
            summary_value(&tr.summary, "mean_style_cos_self").unwrap_or(f64::NAN),
            summary_value(&tr.summary, "mean_style_cos_foreign").unwrap_or(f64::NAN),
            tr.nsd_final_loss,
            tr.nsd_secs
        ),
    );
}

#[test]
fn criterion_09_background_preservation() {
    let _g = serial();
    let tr = match trained() {
        Ok(t) => t,
        Err(e) => return verdict(9, "background preservation", false, e),
    };
    let unpasted = summary_value(&tr.summary, "mean_psnr_db").unwrap_or(f64::NAN);

    let pasted_dir = scratch("nsd-pasted");
    for f in [DATASET_FILE, HELDOUT_FILE, PSRL_CKPT, NSD_CKPT] {
        std::fs::copy(tr.nsd_dir.join(f), pasted_dir.join(f)).unwrap();
    }
    let run = |cmd: &str| {
        let o = bin().args([cmd, "--paste-background", "--config"]).arg(&tr.nsd_cfg).arg("--out").arg(&pasted_dir).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("eval");
    let summary = std::fs::read_to_string(pasted_dir.join(SUMMARY_FILE)).unwrap();
    let report = std::fs::read_to_string(pasted_dir.join(REPORT_FILE)).unwrap();
    // Failed rows are tasks the style metric cannot score; no output exists for them.
    let ok_rows: Vec<Vec<&str>> = report.lines().skip(1).map(|l| l.split(',').collect::<Vec<_>>()).filter(|c| c[4] == "ok").collect();
    let capped = !ok_rows.is_empty() && ok_rows.iter().all(|c| c[3].parse::<f64>().unwrap() == PSNR_CAP_DB);

    run("inpaint");
    let mut cfg = RunConfig::from_file(&tr.nsd_cfg).unwrap();
    cfg.out = pasted_dir.clone();
    let task = inpaint_task(&cfg).unwrap();
    let input_path = pasted_dir.join("input.ppm");
    task.image.write_ppm(&input_path).unwrap();
    let input = Image::read_ppm(&input_path).unwrap();
    let output = Image::read_ppm(&pasted_dir.join(INPAINT_FILE)).unwrap();
    let mut changed = 0;
    for y in 0..input.height {
        for x in 0..input.width {
            if !task.mask.is_masked(x, y) && input.get(x, y) != output.get(x, y) {
                changed += 1;
            }
        }
    }
    let pass = capped && changed == 0 && unpasted >= UNPASTED_PSNR_MIN_DB;
    verdict(
        9,
        "background preservation",
        pass,
        &format!(
            "pasted: all {} ok rows at {PSNR_CAP_DB} dB {capped}, mean {:.2} dB, changed unmasked pixels {changed}; unpasted mean {unpasted:.2} dB vs bound {UNPASTED_PSNR_MIN_DB} dB",
            ok_rows.len(),
            summary_value(&summary, "mean_psnr_db").unwrap_or(f64::NAN)
        ),
    );
}

// ---------------------------------------------------------------- 6

/// Held-out margin and silhouette of patch embeddings grouped by image.
fn heldout_clustering(net: &StyleNet<f32>, data: &DatasetConfig) -> (f64, f64) {
    let held = data.generate_split("test", 1).unwrap();
    let mut embs = Vec::new();
    let mut labels = Vec::new();
    for (i, s) in held.iter().enumerate() {
        let ps = crop_patches(&s.image, 8, MIN_PATCH, 1000 + i as u64).unwrap();
        embs.extend(net.embed_batch(&ps.patches.iter().collect::<Vec<_>>()).unwrap());
        labels.extend(std::iter::repeat_n(i, ps.patches.len()));
    }
    // Fully collapsed embeddings have no cluster structure: margin zero.
    match clustering_stats(&embs, &labels) {
        Ok(c) => (c.margin(), c.silhouette),
        Err(_) => (0.0, f64::NAN),
    }
}

#[test]
fn criterion_06_directional_ablation() {
    let _g = serial();
    let t0 = Instant::now();
    let mut wins = 0;
    let mut between = 0;
    let mut lines = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let data = DatasetConfig { seed, ..Default::default() };
        let samples = data.generate().unwrap();
        let arms = [
            (PsrlMode::Progressive, ABLATION_STAGE_ONE, ABLATION_STEPS - ABLATION_STAGE_ONE),
            (PsrlMode::ContrastiveOnly, 0, ABLATION_STEPS),
            (PsrlMode::StatsOnly, ABLATION_STEPS, 0),
        ];
        let m: Vec<f64> = arms
            .iter()
            .map(|&(mode, s1, s2)| {
                let cfg = PsrlConfig { s1, s2, mode, seed, ..Default::default() };
                let (net, _) = train_psrl(&samples, &cfg).unwrap();
                heldout_clustering(&net, &data).0
            })
            .collect();
        let (prog, con, stats) = (m[0], m[1], m[2]);
        if prog > con {
            wins += 1;
        }
        if stats >= prog.min(con) && stats <= prog.max(con) {
            between += 1;
        }
        lines.push(format!("seed {seed}: {prog:.3}/{con:.3}/{stats:.3}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = wins >= ABLATION_WINS_MIN && between == ABLATION_SEEDS as usize && secs <= ABLATION_BUDGET_S;
    verdict(
        6,
        "directional ablation",
        pass,
        &format!(
            "held-out margin progressive/contrastive_only/stats_only: {}; progressive wins {wins}/{ABLATION_SEEDS}, stats-only between {between}/{ABLATION_SEEDS}, {secs:.0}s",
            lines.join("; ")
        ),
    );
}

// ---------------------------------------------------------------- 8

fn cross_output(model: &NsdModel<f64>, tokens: &Tensor<f64>, sem: &Tensor<f64>, sty: Option<&Tensor<f64>>, lambda: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let x = tape.leaf(tokens);
    let cond = CondVars { f_sem: tape.leaf(sem), f_sty: sty.map(|s| tape.leaf(s)), lambda };
    let z = dual_cross_attention(&mut tape, &b, "unet.mid", x, &cond).unwrap();
    tape.value(z).to_vec()
}

#[test]
fn criterion_08_fusion_contract() {
    let _g = serial();
    let t0 = Instant::now();
    let mut exact = true;
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut m = tiny_model::<f64>(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        // The style value projection starts at zero; give it weight so the
        // style path contributes.
        *m.params.get_mut("unet.mid.cross.v_sty.weight").unwrap() = Tensor::randn(&[EMBED_DIM, EMBED_DIM], 0.2, &mut r);
        let x = Tensor::randn(&[2, 6, 8], 1.0, &mut r);
        let sem = Tensor::randn(&[2, 3, EMBED_DIM], 1.0, &mut r);
        let sty = Tensor::randn(&[2, 5, EMBED_DIM], 1.0, &mut r);
        let z: Vec<Vec<f64>> = [0.0, 1.0, 2.0].iter().map(|&l| cross_output(&m, &x, &sem, Some(&sty), l)).collect();
        exact &= z[0] == cross_output(&m, &x, &sem, None, 1.0);
        let d21: Vec<f64> = z[2].iter().zip(&z[1]).map(|(a, b)| a - b).collect();
        let d10: Vec<f64> = z[1].iter().zip(&z[0]).map(|(a, b)| a - b).collect();
        worst = worst.max(max_abs_diff(&d21, &d10));

        // Same contract through the full denoiser.
        let mf = m.cast::<f32>();
        let img = Tensor::<f32>::randn(&[1, 3, 16, 16], 1.0, &mut r);
        let styled = style_bundle(1, 3, 0.0, &mut r);
        let plain = ConditioningBundle::semantic(styled.tokens.clone());
        let t = [r.random_range(0..20)];
        exact &= mf.predict_noise(&img, &t, &styled, None).unwrap() == mf.predict_noise(&img, &t, &plain, None).unwrap();
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        8,
        "lambda fusion contract",
        exact && worst <= ADDITIVITY_TOL,
        &format!("lambda=0 bit-equal {exact}, additivity max abs diff {worst:.1e}, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------- 10

/// Every command at toy size, as in the CLI smoke tests.
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

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let t0 = Instant::now();
    let commands = ["gen-dataset", "train-psrl", "train-nsd", "inpaint", "eval", "viz", "show-config"];
    let mut runs = Vec::new();
    for name in ["det-a", "det-b"] {
        let root = scratch(name);
        let cfg = root.join("smoke.cfg");
        std::fs::write(&cfg, SMOKE).unwrap();
        let out = root.join("out");
        let mut stdout = Vec::new();
        for c in commands {
            // Stdout names the run directory, which differs by construction.
            let text = cli(&[c], &cfg, &out).unwrap();
            stdout.push(text.replace(out.to_str().unwrap(), "<out>"));
        }
        runs.push((files(&out), stdout));
    }
    let names: Vec<&str> = runs[0].0.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = runs[0].0.iter().zip(&runs[1].0).filter(|(a, b)| a != b).map(|(a, _)| a.0.as_str()).collect();
    let same_set = runs[0].0.len() == runs[1].0.len();
    let pass = same_set && differing.is_empty() && runs[0].1 == runs[1].1;
    verdict(
        10,
        "determinism",
        pass,
        &format!("{} commands, {} files compared {names:?}, differing {differing:?}, {:.1}s", commands.len(), names.len(), t0.elapsed().as_secs_f64()),
    );
}
