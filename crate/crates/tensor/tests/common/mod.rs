//! Scalar-loop reference implementations. Deliberately naive: no im2col,
//! no gemm, no shared code with the crate under test.
#![allow(dead_code)]

pub fn conv2d_naive(
    x: &[f64],
    (b, ci, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as i64 - pad as i64;
                                let ix = (xx * stride + j) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += x[((n * ci + c) * h + iy as usize) * w + ix as usize]
                                    * wt[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((n * co + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

pub fn linear_naive(x: &[f64], rows: usize, fan_in: usize, w: &[f64], fan_out: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * fan_out];
    for r in 0..rows {
        for o in 0..fan_out {
            let mut acc = b[o];
            for i in 0..fan_in {
                acc += x[r * fan_in + i] * w[o * fan_in + i];
            }
            out[r * fan_out + o] = acc;
        }
    }
    out
}

/// Explicit softmax-then-matmul attention.
pub fn attention_naive(q: &[f64], k: &[f64], v: &[f64], b: usize, lq: usize, lk: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * lq * d];
    for n in 0..b {
        for i in 0..lq {
            let mut logits = vec![0.0; lk];
            for j in 0..lk {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q[(n * lq + i) * d + c] * k[(n * lk + j) * d + c];
                }
                logits[j] = dot / (d as f64).sqrt();
            }
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

/// Two-pass mean / population std with the 1e-5 variance stabiliser.
pub fn channel_stats_naive(x: &[f64], bc: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for i in 0..bc {
        let s = &x[i * spatial..(i + 1) * spatial];
        let m = s.iter().sum::<f64>() / spatial as f64;
        let var = s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / spatial as f64;
        means.push(m);
        stds.push((var + 1e-5).sqrt());
    }
    (means, stds)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
