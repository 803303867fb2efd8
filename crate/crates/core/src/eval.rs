//! Clustering and retrieval metrics.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{ImageDims, PatchRecord, Split};
use crate::{Error, Result};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Davies-Bouldin index with mean-distance dispersion.
///
/// Only non-empty clusters count. Coincident centroids give `+inf`.
pub fn db_index(x: &[f64], dim: usize, assignments: &[u32]) -> Result<f64> {
    if dim == 0 || x.len() != assignments.len() * dim {
        return Err(Error::arg("embeddings and assignments disagree in length"));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &a) in assignments.iter().enumerate() {
        groups.entry(a).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::pre("Davies-Bouldin needs at least two non-empty clusters"));
    }
    let row = |i: usize| &x[i * dim..(i + 1) * dim];
    let stats: Vec<(Vec<f64>, f64)> = groups
        .values()
        .map(|members| {
            let mut c = vec![0.0; dim];
            for &i in members {
                for (acc, v) in c.iter_mut().zip(row(i)) {
                    *acc += v;
                }
            }
            c.iter_mut().for_each(|v| *v /= members.len() as f64);
            let sigma = members.iter().map(|&i| dist(row(i), &c)).sum::<f64>() / members.len() as f64;
            (c, sigma)
        })
        .collect();
    let m = stats.len();
    let total: f64 = (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| j != i)
                .map(|j| {
                    let d = dist(&stats[i].0, &stats[j].0);
                    let s = stats[i].1 + stats[j].1;
                    if d == 0.0 {
                        f64::INFINITY
                    } else {
                        s / d
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / m as f64)
}

fn dense_ids<T: Eq + std::hash::Hash>(labels: &[T]) -> Vec<usize> {
    let mut map: HashMap<&T, usize> = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Normalized mutual information, `2 I / (H(a) + H(b))`, natural logs.
///
/// Two single-cluster partitions have NMI 1.
pub fn nmi<A: Eq + std::hash::Hash, B: Eq + std::hash::Hash>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!("label lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::arg("empty labelings"));
    }
    let n = a.len() as f64;
    let (ia, ib) = (dense_ids(a), dense_ids(b));
    let (ka, kb) = (ia.iter().max().unwrap() + 1, ib.iter().max().unwrap() + 1);
    let mut table = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in ia.iter().zip(&ib) {
        table[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let entropy = |c: &[usize]| -> f64 {
        c.iter()
            .filter(|&&v| v > 0)
            .map(|&v| {
                let p = v as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (entropy(&ca), entropy(&cb));
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let v = table[x * kb + y];
            if v > 0 {
                let pxy = v as f64 / n;
                mi += pxy * (pxy * n * n / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// One retrieval result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub precision: f64,
    /// Retrieved gallery positions, nearest first.
    pub neighbors: Vec<usize>,
    /// Fewer than `k` gallery items were eligible.
    pub short: bool,
}

/// Searchable gallery: embeddings with patch metadata and category labels.
pub struct Gallery<'a> {
    pub x: &'a [f64],
    pub dim: usize,
    pub patch_ids: &'a [u64],
    /// `(site, drive)` per row.
    pub location: &'a [(i64, i64)],
    pub labels: &'a [u32],
}

impl Gallery<'_> {
    fn len(&self) -> usize {
        self.patch_ids.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Precision@k for gallery row `q` used as the query, excluding every
    /// item that shares its `(site, drive)`. Ties go to the smaller patch id.
    pub fn precision_at_k(&self, q: usize, k: usize) -> Retrieval {
        let query = self.row(q);
        let mut cands: Vec<(f64, u64, usize)> = (0..self.len())
            .filter(|&i| self.location[i] != self.location[q])
            .map(|i| {
                let d: f64 = query.iter().zip(self.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, self.patch_ids[i], i)
            })
            .collect();
        let take = k.min(cands.len());
        let cmp = |a: &(f64, u64, usize), b: &(f64, u64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if take > 0 && take < cands.len() {
            cands.select_nth_unstable_by(take - 1, cmp);
        }
        cands.truncate(take);
        cands.sort_by(cmp);
        let hits = cands.iter().filter(|c| self.labels[c.2] == self.labels[q]).count();
        Retrieval {
            precision: if take == 0 { 0.0 } else { hits as f64 / take as f64 },
            neighbors: cands.iter().map(|c| c.2).collect(),
            short: take < k,
        }
    }

    /// Mean precision over the given query rows, with the count of short
    /// queries.
    pub fn mean_precision(&self, queries: &[usize], k: usize) -> (f64, usize) {
        let results: Vec<Retrieval> = queries.par_iter().map(|&q| self.precision_at_k(q, k)).collect();
        let short = results.iter().filter(|r| r.short).count();
        let mean = if results.is_empty() {
            0.0
        } else {
            results.iter().map(|r| r.precision).sum::<f64>() / results.len() as f64
        };
        (mean, short)
    }
}

/// Marks patches Train (entirely left of `fraction * width`), Test
/// (entirely right) or Excluded (straddling).
pub fn split_train_test(patches: &mut [PatchRecord], images: &[ImageDims], fraction: f64) -> Result<()> {
    let widths: HashMap<u64, u32> = images.iter().map(|d| (d.image_id, d.width)).collect();
    for p in patches {
        let w = *widths
            .get(&p.image_id)
            .ok_or_else(|| Error::arg(format!("unknown image {} for patch {}", p.image_id, p.patch_id)))?;
        let boundary = fraction * f64::from(w);
        let win = p.window();
        p.split = if win.col0 + win.cols <= boundary {
            Split::Train
        } else if win.col0 >= boundary {
            Split::Test
        } else {
            Split::Excluded
        };
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPurity {
    pub cluster: u32,
    pub size: usize,
    pub majority_label: u32,
    pub majority_fraction: f64,
    pub homogeneous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityReport {
    pub homogeneous: usize,
    pub clusters: Vec<ClusterPurity>,
}

/// Counts clusters whose majority label covers strictly more than
/// `threshold` of the members.
pub fn homogeneity_report(assignments: &[u32], truth: &[u32], threshold: f64) -> Result<HomogeneityReport> {
    if assignments.len() != truth.len() {
        return Err(Error::arg("assignments and truth differ in length"));
    }
    let mut counts: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (&a, &t) in assignments.iter().zip(truth) {
        *counts.entry(a).or_default().entry(t).or_default() += 1;
    }
    let clusters: Vec<ClusterPurity> = counts
        .into_iter()
        .map(|(cluster, labels)| {
            let size: usize = labels.values().sum();
            let (&majority_label, &top) = labels
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .expect("non-empty cluster");
            let majority_fraction = top as f64 / size as f64;
            ClusterPurity {
                cluster,
                size,
                majority_label,
                majority_fraction,
                homogeneous: majority_fraction > threshold,
            }
        })
        .collect();
    Ok(HomogeneityReport {
        homogeneous: clusters.iter().filter(|c| c.homogeneous).count(),
        clusters,
    })
}

/// The `metrics.json` document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub db_index: f64,
    pub nmi_vs_truth: Option<f64>,
    pub precision_at_10_mean: Option<f64>,
    pub homogeneous_clusters: Option<usize>,
    pub k: usize,
    pub n_patches: usize,
}
