use std::fmt;
use std::str::FromStr;

use s3im_tensor::{Real, Tensor};

use crate::error::{Error, Result};

/// Offset of the cosine schedule, keeping the first step slightly noisy.
const COSINE_OFFSET: f64 = 0.008;
/// Floor on the cumulative signal fraction.
const ALPHA_BAR_MIN: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            _ => Err(Error::InvalidArgument(format!("unknown schedule kind `{s}` (expected cosine or linear)"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        })
    }
}

/// Variance-preserving coefficients: `x_t = alpha_t x_0 + sigma_t eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }
}

pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {steps}")));
    }
    let alpha_bar: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let f = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (0..steps).map(|t| (f(t as f64 / steps as f64) / f(0.0)).max(ALPHA_BAR_MIN)).collect()
        }
        ScheduleKind::Linear => {
            // beta from 0.1/T to 20/T: the classic 1e-4..0.02 range at T = 1000.
            let (lo, hi) = (0.1 / steps as f64, 20.0 / steps as f64);
            // Like the cosine schedule, t = 0 is noise-free; step t applies
            // the first t transitions.
            let mut acc = 1.0;
            (0..steps)
                .map(|t| {
                    let out = acc;
                    let beta = lo + (hi - lo) * t as f64 / (steps - 1) as f64;
                    acc *= 1.0 - beta.min(0.999);
                    out.max(ALPHA_BAR_MIN)
                })
                .collect()
        }
    };
    let alpha: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
    let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
    Ok(NoiseSchedule { kind, alpha, sigma })
}

/// `alpha_t x0 + sigma_t eps`, elementwise.
pub fn forward_noise<T: Real>(schedule: &NoiseSchedule, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::InvalidArgument(format!(
            "noise shape {:?} does not match signal shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    if t >= schedule.steps() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside [0, {})", schedule.steps())));
    }
    let (a, s) = (T::of(schedule.alpha[t]), T::of(schedule.sigma[t]));
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + s * e).collect();
    Ok(Tensor::new(x0.shape(), data)?)
}
