//! Feature transforms and triplet metric learning.

pub mod pca;
pub mod triplet;

pub use pca::{apply_transform, fit_pca_whiten, fit_pca_whiten_rows, PcaReport};
pub use triplet::{
    sample_triplets, train_epoch, triplet_loss_and_grad, triplet_objective, Embedder, EpochStats, TanhModel,
    TrainConfig, Triplet,
};

/// Per-dimension mean and standard deviation, for feature standardization.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Constant dimensions keep a unit scale.
    pub fn fit(rows: &[f64], dim: usize) -> Self {
        let n = (rows.len() / dim.max(1)).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    /// Rescales so standardized rows have mean squared norm 1, the scale of
    /// unit-normalized embeddings.
    pub fn with_unit_norm(mut self) -> Self {
        let root = (self.std.len() as f64).sqrt();
        self.std.iter_mut().for_each(|s| *s *= root);
        self
    }

    pub fn apply(&self, rows: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        rows.chunks_exact(dim)
            .flat_map(|row| row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_columns_have_unit_variance() {
        let rows = [1.0, 5.0, 3.0, 5.0, 5.0, 5.0];
        let s = Standardizer::fit(&rows, 2);
        assert_eq!(s.mean, vec![3.0, 5.0]);
        assert_eq!(s.std[1], 1.0);
        let z = s.apply(&rows);
        let var: f64 = z.iter().step_by(2).map(|v| v * v).sum::<f64>() / 3.0;
        assert!((var - 1.0).abs() < 1e-12);
    }
}
