//! PCA, whitening and row normalization.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::model::{EmbeddingSet, Transform};
use crate::{Error, Result};

/// Floor added to eigenvalues before whitening.
pub const WHITEN_EPS: f64 = 1e-8;

/// Relative eigenvalue cutoff used to report numerical rank.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaReport {
    /// Eigenvalues of the retained directions, descending.
    pub eigenvalues: Vec<f64>,
    /// Numerical rank of the centered data.
    pub rank: usize,
    /// Components kept (always the requested `out_dim`).
    pub retained: usize,
}

impl PcaReport {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.retained
    }
}

/// Default output width: 256 for wide inputs, otherwise `min(dim, n - 1)`.
pub fn default_out_dim(dim: usize, n: usize) -> usize {
    if dim > 256 {
        256
    } else {
        dim.min(n.saturating_sub(1))
    }
}

/// Fits the transform on a row-major `n x dim` matrix and returns it with
/// the transformed rows.
///
/// Eigenvectors are sign-normalized so that their largest-magnitude entry is
/// positive, which makes the output independent of the eigensolver's sign
/// choices.
pub fn fit_pca_whiten_rows(
    rows: &[f64],
    dim: usize,
    out_dim: usize,
    l2_normalize: bool,
) -> Result<(Transform, Vec<f64>, PcaReport)> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(Error::arg("feature matrix shape mismatch"));
    }
    let n = rows.len() / dim;
    if out_dim == 0 || out_dim > dim {
        return Err(Error::arg(format!("output width {out_dim} must lie in 1..={dim}")));
    }
    if n <= out_dim {
        return Err(Error::pre(format!("need more than {out_dim} rows, got {n}")));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature value".into()));
    }

    let mut mean = vec![0.0; dim];
    for row in rows.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, dim, |i, j| rows[i * dim + j] - mean[j]);
    let cov = (centered.transpose() * &centered) / n as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > RANK_TOL * top.max(f64::MIN_POSITIVE))
        .count();

    let mut basis = Vec::with_capacity(out_dim * dim);
    let mut eigenvalues = Vec::with_capacity(out_dim);
    let mut scales = Vec::with_capacity(out_dim);
    for &idx in order.iter().take(out_dim) {
        let v = eig.eigenvectors.column(idx);
        let pivot = (0..dim).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        basis.extend(v.iter().map(|x| x * sign));
        let lambda = eig.eigenvalues[idx].max(0.0);
        eigenvalues.push(lambda);
        scales.push(1.0 / (lambda + WHITEN_EPS).sqrt());
    }

    let transform = Transform {
        pca_mean: mean,
        pca_basis: basis,
        whitening_scales: scales,
        l2_normalized: l2_normalize,
    };
    let out = apply_transform_rows(&transform, rows)?;
    Ok((
        transform,
        out,
        PcaReport {
            eigenvalues,
            rank,
            retained: out_dim,
        },
    ))
}

/// Applies a fitted transform to row-major rows of width `in_dim`.
pub fn apply_transform_rows(t: &Transform, rows: &[f64]) -> Result<Vec<f64>> {
    let (din, dout) = (t.in_dim(), t.out_dim());
    if din == 0 || rows.len() % din != 0 {
        return Err(Error::arg(format!("rows do not have width {din}")));
    }
    let n = rows.len() / din;
    let mut out = vec![0.0; n * dout];
    out.par_chunks_mut(dout.max(1))
        .zip(rows.par_chunks(din))
        .for_each(|(o, x)| {
            let centered: Vec<f64> = x.iter().zip(&t.pca_mean).map(|(v, m)| v - m).collect();
            for (k, ok) in o.iter_mut().enumerate() {
                let dir = &t.pca_basis[k * din..(k + 1) * din];
                *ok = dir.iter().zip(&centered).map(|(a, b)| a * b).sum::<f64>() * t.whitening_scales[k];
            }
            if t.l2_normalized {
                let norm = o.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    o.iter_mut().for_each(|v| *v /= norm);
                }
            }
        });
    Ok(out)
}

/// Embedding-set form of [`fit_pca_whiten_rows`]; the transform is attached
/// to the output.
pub fn fit_pca_whiten(emb: &EmbeddingSet, out_dim: usize, l2_normalize: bool) -> Result<(EmbeddingSet, PcaReport)> {
    let (t, rows, report) = fit_pca_whiten_rows(&emb.to_f64(), emb.dim, out_dim, l2_normalize)?;
    let mut out = EmbeddingSet::new(out_dim, rows.iter().map(|&v| v as f32).collect(), emb.patch_ids.clone())?;
    out.transform = Some(t);
    Ok((out, report))
}

/// Re-applies a stored transform to new embeddings.
pub fn apply_transform(t: &Transform, emb: &EmbeddingSet) -> Result<EmbeddingSet> {
    let rows = apply_transform_rows(t, &emb.to_f64())?;
    let mut out = EmbeddingSet::new(
        t.out_dim(),
        rows.iter().map(|&v| v as f32).collect(),
        emb.patch_ids.clone(),
    )?;
    out.transform = Some(t.clone());
    Ok(out)
}

/// `1/n` covariance of row-major data, as a dense row-major matrix.
pub fn covariance(rows: &[f64], dim: usize) -> Vec<f64> {
    let n = rows.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in rows.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; dim * dim];
    for row in rows.chunks_exact(dim) {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in 0..dim {
                cov[i * dim + j] += di * (row[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    cov
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn max_dev_from_identity(cov: &[f64], dim: usize) -> f64 {
        (0..dim * dim)
            .map(|i| (cov[i] - if i / dim == i % dim { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn whitened_output_has_identity_covariance() {
        let dim = 6;
        let mut x = gaussian(500, dim, 1);
        // anisotropic and correlated
        for row in x.chunks_exact_mut(dim) {
            row[0] *= 5.0;
            row[1] += 2.0 * row[0];
            row[3] *= 0.1;
        }
        let (_, out, report) = fit_pca_whiten_rows(&x, dim, dim, false).unwrap();
        assert_eq!(report.rank, dim);
        assert!(max_dev_from_identity(&covariance(&out, dim), dim) < 1e-6);
    }

    #[test]
    fn rows_unit_norm_after_normalization() {
        let x = gaussian(200, 5, 2);
        let (_, out, _) = fit_pca_whiten_rows(&x, 5, 3, true).unwrap();
        for row in out.chunks_exact(3) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn points_on_a_line_report_rank_one() {
        let x: Vec<f64> = (0..50).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let (t, _, report) = fit_pca_whiten_rows(&x, 2, 2, false).unwrap();
        assert_eq!(report.rank, 1);
        assert!(report.rank_deficient());
        // second scale is governed by the floor
        assert!(t.whitening_scales[1] > 1e3);
    }

    #[test]
    fn stored_transform_reproduces_output() {
        let x = gaussian(300, 8, 3);
        let (t, out, _) = fit_pca_whiten_rows(&x, 8, 4, true).unwrap();
        let again = apply_transform_rows(&t, &x).unwrap();
        assert!(out.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn shape_preconditions() {
        let x = gaussian(4, 3, 4);
        assert!(fit_pca_whiten_rows(&x, 3, 4, false).is_err());
        assert!(fit_pca_whiten_rows(&x, 3, 0, false).is_err());
        assert!(matches!(
            fit_pca_whiten_rows(&x[..6], 3, 2, false),
            Err(Error::Precondition(_))
        ));
        assert_eq!(default_out_dim(512, 10_000), 256);
        assert_eq!(default_out_dim(80, 10_000), 80);
        assert_eq!(default_out_dim(80, 50), 49);
    }
}
