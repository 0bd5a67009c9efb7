//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Steps tried in turn; a smaller step is only used when the larger one
/// disagrees, which happens when the stencil straddles a kink.
const REFINE_STEPS: [f64; 3] = [FD_STEP, FD_STEP / 10.0, FD_STEP / 100.0];

/// Denominator floor for the relative error. Below this magnitude the
/// comparison is effectively absolute; central differences with `h = 1e-5`
/// carry roughly `1e-10` of round-off even in double precision.
pub const REL_FLOOR: f64 = 1e-3;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_err: f64,
    /// `(input index, flat element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Elements whose `FD_STEP` stencil straddled a kink (ReLU, norm at
    /// zero) and were resolved with a smaller step.
    pub refined: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn scalarize(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    // Fixed, irregular projection weights so every output element matters.
    let n = tape.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662).fract() - 0.5).collect();
    let shape = tape.shape(out).to_vec();
    let wv = tape.constant(&shape, w)?;
    let prod = tape.mul(out, wv)?;
    Ok(tape.sum(prod))
}

fn eval(op: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = op(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    Ok(tape.scalar(s))
}

/// Compares the tape's gradient against central differences for every
/// element of every input.
pub fn grad_check(
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    grad_check_at(op, inputs, &all, tolerance)
}

/// Like [`grad_check`] but only perturbs the listed element indices of each
/// input (used for parameter sets too large to sweep exhaustively).
pub fn grad_check_at(
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    coords: &[Vec<usize>],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = op(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    let grads = tape.backward(s)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        refined: 0,
        tolerance,
        passed: true,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, idxs) in coords.iter().enumerate() {
        let analytic = grads.get(vars[ii]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[ii].numel()]);
        for &e in idxs {
            let a = analytic[e];
            let mut rel = f64::INFINITY;
            for (k, h) in REFINE_STEPS.iter().enumerate() {
                let orig = work[ii].data()[e];
                work[ii].data_mut()[e] = orig + h;
                let fp = eval(&op, &work)?;
                work[ii].data_mut()[e] = orig - h;
                let fm = eval(&op, &work)?;
                work[ii].data_mut()[e] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                if rel <= tolerance {
                    report.refined += (k > 0) as usize;
                    break;
                }
            }
            report.checked += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = (ii, e);
            }
        }
    }
    report.passed = report.max_rel_err <= tolerance;
    Ok(report)
}
