//! PCA of penultimate features and a scatter-ratio separability score.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{csv_writer, flush, write_record};

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// Orthonormal rows, by descending explained variance.
    pub components: Vec<Vec<f64>>,
    /// Sample variance (n - 1 denominator) along each component.
    pub explained_variance: Vec<f64>,
    /// Sum of all covariance eigenvalues, i.e. the total feature variance.
    pub total_variance: f64,
    /// One row of component coordinates per input point.
    pub projected: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl PcaResult {
    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Maps component coordinates back to feature space.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &a) in self.components.iter().zip(coords) {
            out.iter_mut().zip(c).for_each(|(o, v)| *o += a * v);
        }
        out
    }
}

fn flip_sign(v: &mut [f64]) {
    let pivot = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Centres `features` (`N × d`), diagonalizes their covariance and projects
/// onto the top `k` eigenvectors. Each component is signed so that its
/// largest-magnitude entry is positive. When the data has rank below `k`,
/// only the non-degenerate components are returned.
pub fn pca_fit_project(features: &[Vec<f64>], labels: &[usize], k: usize) -> Result<PcaResult> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if n < 2 || d == 0 || k == 0 || d < k {
        return Err(Error::shape(format!("pca needs N >= 2 and d >= k >= 1, got N={n}, d={d}, k={k}")));
    }
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::shape("feature rows differ in length"));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} points", labels.len())));
    }
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centred = DMatrix::from_fn(n, d, |i, j| features[i][j] - mean[j]);
    let cov = (centred.transpose() * &centred) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total_variance = eig.eigenvalues.iter().sum();
    let largest = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > RANK_TOLERANCE * largest).count();
    if rank < k {
        log::warn!("features have rank {rank}; returning {rank} of {k} requested components");
    }
    let keep = k.min(rank);
    let mut components = Vec::with_capacity(keep);
    let mut explained_variance = Vec::with_capacity(keep);
    for &i in order.iter().take(keep) {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        flip_sign(&mut v);
        components.push(v);
        explained_variance.push(eig.eigenvalues[i].max(0.0));
    }
    let projected = (0..n)
        .map(|i| components.iter().map(|c| (0..d).map(|j| centred[(i, j)] * c[j]).sum()).collect())
        .collect();
    Ok(PcaResult { mean, components, explained_variance, total_variance, projected, labels: labels.to_vec() })
}

/// Between-class over within-class scatter, `Σ n_c ‖μ_c − μ‖² / Σ ‖x − μ_c‖²`,
/// of the projected points. Infinite when every class collapses to a point.
pub fn separability_score(result: &PcaResult) -> Result<f64> {
    scatter_ratio(&result.projected, &result.labels)
}

pub fn scatter_ratio(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::data("separability needs at least two classes"));
    }
    let n = points.len() as f64;
    let grand: Vec<f64> = (0..dim).map(|j| sums.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let means: Vec<Vec<f64>> =
        sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect()).collect();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let between: f64 = means.iter().zip(&counts).map(|(m, &c)| c as f64 * sq(m, &grand)).sum();
    let within: f64 = points.iter().zip(labels).map(|(p, &l)| sq(p, &means[l])).sum();
    Ok(if within > 0.0 { between / within } else if between > 0.0 { f64::INFINITY } else { 0.0 })
}

/// Writes `x,y,class` rows (further components as extra columns).
pub fn write_projection_csv(result: &PcaResult, class_names: &[String], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let axes = ["x", "y"];
    let mut header: Vec<String> =
        (0..result.num_components()).map(|i| axes.get(i).map_or(format!("pc{}", i + 1), |a| a.to_string())).collect();
    header.push("class".into());
    write_record(&mut w, path, &header)?;
    for (p, &l) in result.projected.iter().zip(&result.labels) {
        let mut rec: Vec<String> = p.iter().map(f64::to_string).collect();
        rec.push(class_names.get(l).cloned().unwrap_or_else(|| l.to_string()));
        write_record(&mut w, path, &rec)?;
    }
    flush(w, path)
}
