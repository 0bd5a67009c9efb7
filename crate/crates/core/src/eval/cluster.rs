use crate::error::{Error, Result};
use crate::psrl::StyleEmbedding;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterStats {
    pub silhouette: f64,
    pub intra_mean_cos: f64,
    pub inter_mean_cos: f64,
}

impl ClusterStats {
    pub fn margin(&self) -> f64 {
        self.intra_mean_cos - self.inter_mean_cos
    }
}

fn cos(a: &StyleEmbedding, b: &StyleEmbedding) -> f64 {
    let (mut d, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.0.iter().zip(&b.0) {
        d += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    d / (na.sqrt() * nb.sqrt()).max(1e-300)
}

/// Silhouette on cosine distance plus mean within/between-label cosines.
/// Labels with a single member are dropped with a warning.
pub fn clustering_stats(embeddings: &[StyleEmbedding], labels: &[usize]) -> Result<ClusterStats> {
    if embeddings.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    labels.iter().for_each(|&l| *counts.entry(l).or_default() += 1);
    for (l, c) in &counts {
        if *c == 1 {
            log::warn!("label {l} has a single member and is excluded from clustering statistics");
        }
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| counts[&labels[i]] >= 2).collect();
    let groups: Vec<usize> = {
        let mut g: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
        g.sort_unstable();
        g.dedup();
        g
    };
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("clustering statistics need at least 2 labels with 2+ members".into()));
    }
    let n = keep.len();
    let mut sim = vec![0.0f64; n * n];
    for a in 0..n {
        for b in a..n {
            let c = cos(&embeddings[keep[a]], &embeddings[keep[b]]);
            sim[a * n + b] = c;
            sim[b * n + a] = c;
        }
    }
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            if labels[keep[a]] == labels[keep[b]] {
                intra += sim[a * n + b];
                ni += 1;
            } else {
                inter += sim[a * n + b];
                nx += 1;
            }
        }
    }
    let gi = |l: usize| groups.binary_search(&l).expect("kept label");
    let mut sil = 0.0;
    let mut all_degenerate = true;
    for a in 0..n {
        let mut sums = vec![0.0f64; groups.len()];
        let mut cnt = vec![0usize; groups.len()];
        for b in 0..n {
            if a != b {
                let g = gi(labels[keep[b]]);
                sums[g] += 1.0 - sim[a * n + b];
                cnt[g] += 1;
            }
        }
        let own = gi(labels[keep[a]]);
        let ai = sums[own] / cnt[own] as f64;
        let bi = (0..groups.len())
            .filter(|&g| g != own)
            .map(|g| sums[g] / cnt[g] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = ai.max(bi);
        if denom > 1e-12 {
            all_degenerate = false;
            sil += (bi - ai) / denom;
        }
    }
    if all_degenerate {
        return Err(Error::InvalidArgument("silhouette undefined: all embeddings coincide".into()));
    }
    Ok(ClusterStats {
        silhouette: sil / n as f64,
        intra_mean_cos: intra / ni as f64,
        inter_mean_cos: inter / nx as f64,
    })
}
