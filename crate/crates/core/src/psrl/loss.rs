use s3im_tensor::{Bindings, NceTerm, Real, Tape, Var};

use super::model::{StyleEmbedding, StyleFeature, StyleNet};
use crate::dataset::PatchSet;
use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Second-order statistics alignment only.
    One,
    /// Statistics plus the style-contrastive term.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Row layout of a training batch: pair `b` occupies rows
/// `b*2n .. b*2n+n` (image X) and `b*2n+n .. (b+1)*2n` (image Y).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchLayout {
    pub pairs: usize,
    pub n: usize,
}

impl BatchLayout {
    pub fn rows(&self) -> usize {
        self.pairs * 2 * self.n
    }

    /// First row of image `side` (0 = X, 1 = Y) of pair `b`.
    pub fn start(&self, b: usize, side: usize) -> usize {
        b * 2 * self.n + side * self.n
    }

    /// Unordered within-image pairs `(i, j)`, `i < j`, for one side of every pair.
    pub fn stat_pairs(&self, side: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for b in 0..self.pairs {
            let s = self.start(b, side);
            for i in 0..self.n {
                for j in i + 1..self.n {
                    out.push((s + i, s + j));
                }
            }
        }
        out
    }

    /// InfoNCE terms: every ordered positive pair anchored in X or Y. The
    /// negatives are the paired image's rows, or every row of every other
    /// image when `in_batch` is set.
    pub fn nce_terms(&self, in_batch: bool) -> Vec<NceTerm> {
        let mut out = Vec::new();
        for b in 0..self.pairs {
            for side in 0..2 {
                let own = self.start(b, side);
                let negatives: Vec<usize> = if in_batch {
                    (0..self.rows()).filter(|r| !(own..own + self.n).contains(r)).collect()
                } else {
                    let other = self.start(b, 1 - side);
                    (other..other + self.n).collect()
                };
                for i in 0..self.n {
                    for j in 0..self.n {
                        if i != j {
                            out.push(NceTerm {
                                row: own + i,
                                positive: own + j,
                                negatives: negatives.clone(),
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Mean over `pairs` of `|mu_i - mu_j| + |sigma_i - sigma_j|`.
pub fn stats_pairs_loss<T: Real>(tape: &mut Tape<T>, mu: Var, sigma: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("statistics loss needs at least one pair".into()));
    }
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let term = |t: &mut Tape<T>, v: Var| -> Result<Var> {
        let a = t.index_select(v, &is)?;
        let b = t.index_select(v, &js)?;
        let d = t.sub(a, b)?;
        Ok(t.row_norm(d))
    };
    let dm = term(tape, mu)?;
    let ds = term(tape, sigma)?;
    let s = tape.add(dm, ds)?;
    Ok(tape.mean(s))
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub lx: Var,
    pub ly: Var,
    pub lxy: Option<Var>,
    pub total: Var,
}

/// Builds the combined objective on an already-encoded batch. `z` is the
/// normalized projection, required in stage 2.
pub fn psrl_loss_vars<T: Real>(
    tape: &mut Tape<T>,
    mu: Var,
    sigma: Var,
    z: Option<Var>,
    layout: BatchLayout,
    stage: Stage,
    tau: f64,
    in_batch_negatives: bool,
) -> Result<LossVars> {
    if layout.n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 patches per image, got {}", layout.n)));
    }
    let lx = stats_pairs_loss(tape, mu, sigma, &layout.stat_pairs(0))?;
    let ly = stats_pairs_loss(tape, mu, sigma, &layout.stat_pairs(1))?;
    let stats = tape.add(lx, ly)?;
    match stage {
        Stage::One => Ok(LossVars { lx, ly, lxy: None, total: stats }),
        Stage::Two => {
            let z = z.ok_or_else(|| Error::InvalidArgument("stage 2 needs projections".into()))?;
            let lxy = contrastive_on_rows(tape, z, layout.nce_terms(in_batch_negatives), tau)?;
            let total = tape.add(stats, lxy)?;
            Ok(LossVars { lx, ly, lxy: Some(lxy), total })
        }
    }
}

/// InfoNCE over the cosine logit matrix `z z^T / tau`.
pub fn contrastive_on_rows<T: Real>(tape: &mut Tape<T>, z: Var, terms: Vec<NceTerm>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let zt = tape.permute(z, &[1, 0])?;
    let sim = tape.matmul(z, zt)?;
    let logits = tape.scale(sim, 1.0 / tau);
    Ok(tape.info_nce(logits, terms)?)
}

/// Full forward for one batch of stacked patches.
pub fn batch_forward<T: Real>(
    tape: &mut Tape<T>,
    b: &Bindings,
    x: Var,
    layout: BatchLayout,
    stage: Stage,
    tau: f64,
    in_batch_negatives: bool,
) -> Result<(LossVars, Var)> {
    let (mu, sigma) = StyleNet::<T>::stats(tape, b, x)?;
    let z = StyleNet::<T>::project(tape, b, mu, sigma)?;
    let vars = psrl_loss_vars(tape, mu, sigma, Some(z), layout, stage, tau, in_batch_negatives)?;
    Ok((vars, z))
}

fn feature_consts(tape: &mut Tape<f64>, fs: &[&StyleFeature]) -> Result<(Var, Var)> {
    let d = fs[0].mu.len();
    if fs.iter().any(|f| f.mu.len() != d || f.sigma.len() != d) {
        return Err(Error::InvalidArgument("style features of different dimensionality".into()));
    }
    let mu = tape.constant(&[fs.len(), d], fs.iter().flat_map(|f| f.mu.iter().map(|&v| v as f64)).collect())?;
    let sigma = tape.constant(&[fs.len(), d], fs.iter().flat_map(|f| f.sigma.iter().map(|&v| v as f64)).collect())?;
    Ok((mu, sigma))
}

/// One statistics term: `|mu_i - mu_j|_2 + |sigma_i - sigma_j|_2`.
pub fn stats_loss(fi: &StyleFeature, fj: &StyleFeature) -> Result<f64> {
    let mut tape = Tape::new();
    let (mu, sigma) = feature_consts(&mut tape, &[fi, fj])?;
    let l = stats_pairs_loss(&mut tape, mu, sigma, &[(0, 1)])?;
    Ok(tape.scalar(l))
}

/// Mean statistics term over all unordered pairs of `features`.
pub fn mean_pairwise_stats_loss(features: &[StyleFeature]) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 features, got {}", features.len())));
    }
    let refs: Vec<&StyleFeature> = features.iter().collect();
    let mut tape = Tape::new();
    let (mu, sigma) = feature_consts(&mut tape, &refs)?;
    let layout = BatchLayout { pairs: 1, n: features.len() };
    let l = stats_pairs_loss(&mut tape, mu, sigma, &layout.stat_pairs(0))?;
    Ok(tape.scalar(l))
}

/// Statistics loss of one image's patches under a trained encoder.
pub fn intra_image_stats_loss<T: Real>(net: &StyleNet<T>, patches: &PatchSet) -> Result<f64> {
    if patches.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 patches, got {}", patches.len())));
    }
    let refs: Vec<&Image> = patches.patches.iter().collect();
    mean_pairwise_stats_loss(&net.encode_batch(&refs)?)
}

/// `-log(exp(a.p/tau) / (exp(a.p/tau) + sum_k exp(a.n_k/tau)))`.
pub fn contrastive_loss(anchor: &StyleEmbedding, positive: &StyleEmbedding, negatives: &[StyleEmbedding], tau: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("contrastive loss needs at least one negative".into()));
    }
    let d = anchor.0.len();
    let rows: Vec<&StyleEmbedding> = std::iter::once(anchor).chain(std::iter::once(positive)).chain(negatives).collect();
    if rows.iter().any(|e| e.0.len() != d) {
        return Err(Error::InvalidArgument("embeddings of different dimensionality".into()));
    }
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(&[rows.len(), d], rows.iter().flat_map(|e| e.0.iter().map(|&v| v as f64)).collect())?;
    let term = NceTerm {
        row: 0,
        positive: 1,
        negatives: (2..rows.len()).collect(),
    };
    let l = contrastive_on_rows(&mut tape, z, vec![term], tau)?;
    Ok(tape.scalar(l))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub lx: f64,
    pub ly: f64,
    pub lxy: f64,
    pub total: f64,
}

/// Evaluates the combined objective for one `(X, Y)` pair of patch sets.
/// `lxy` is reported as 0 in stage 1.
pub fn psrl_batch_loss<T: Real>(net: &StyleNet<T>, x: &PatchSet, y: &PatchSet, tau: f64, stage: Stage) -> Result<LossComponents> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("patch set sizes differ: {} vs {}", x.len(), y.len())));
    }
    let refs: Vec<&Image> = x.patches.iter().chain(&y.patches).collect();
    let mut tape = Tape::<T>::new();
    let b = net.params.bind(&mut tape);
    let input = StyleNet::<T>::input(&mut tape, &refs)?;
    let layout = BatchLayout { pairs: 1, n: x.len() };
    let (v, _) = batch_forward(&mut tape, &b, input, layout, stage, tau, false)?;
    let get = |t: &Tape<T>, v: Var| t.scalar(v).to_f64c();
    Ok(LossComponents {
        lx: get(&tape, v.lx),
        ly: get(&tape, v.ly),
        lxy: v.lxy.map_or(0.0, |l| get(&tape, l)),
        total: get(&tape, v.total),
    })
}

/// Mean within-image and cross-image cosine of normalized rows.
pub fn batch_cosines(z: &[f32], layout: BatchLayout, dim: usize) -> (f64, f64) {
    let row = |r: usize| &z[r * dim..(r + 1) * dim];
    let dot = |a: usize, b: usize| row(a).iter().zip(row(b)).map(|(x, y)| (x * y) as f64).sum::<f64>();
    let (mut pos, mut np, mut neg, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for b in 0..layout.pairs {
        for side in 0..2 {
            let s = layout.start(b, side);
            for i in 0..layout.n {
                for j in 0..layout.n {
                    if i != j {
                        pos += dot(s + i, s + j);
                        np += 1;
                    }
                }
            }
        }
        let (sx, sy) = (layout.start(b, 0), layout.start(b, 1));
        for i in 0..layout.n {
            for j in 0..layout.n {
                neg += dot(sx + i, sy + j);
                nn += 1;
            }
        }
    }
    (pos / np.max(1) as f64, neg / nn.max(1) as f64)
}

