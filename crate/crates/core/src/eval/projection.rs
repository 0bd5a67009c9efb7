use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::psrl::StyleEmbedding;

/// Top-two principal axes of `points` (rows) and the centered projections.
/// Each axis is oriented so its largest-magnitude coordinate is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("projection needs at least 2 samples, got {n}")));
    }
    let d = points[0].len();
    if d < 2 || points.iter().any(|p| p.len() != d) {
        return Err(Error::InvalidArgument("projection needs equal-length vectors of dimension >= 2".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    // Stable on ties so the axis choice is deterministic.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let s = if lead < 0.0 { -1.0 } else { 1.0 };
            v.iter().map(|x| x * s).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            let proj = |a: &Vec<f64>| row.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect())
}

/// CSV text with header `x,y,label`.
pub fn projection_csv(embeddings: &[StyleEmbedding], labels: &[usize]) -> Result<String> {
    if embeddings.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} embeddings but {} labels", embeddings.len(), labels.len())));
    }
    let pts: Vec<Vec<f64>> = embeddings.iter().map(|e| e.0.iter().map(|&v| v as f64).collect()).collect();
    let xy = pca_2d(&pts)?;
    let mut out = String::from("x,y,label\n");
    for (p, l) in xy.iter().zip(labels) {
        writeln!(out, "{:.9},{:.9},{l}", p[0], p[1]).expect("write to string");
    }
    Ok(out)
}

pub fn export_projection(embeddings: &[StyleEmbedding], labels: &[usize], path: &Path) -> Result<()> {
    let csv = projection_csv(embeddings, labels)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}
