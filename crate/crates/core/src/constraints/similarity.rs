//! Soft must-links between neighboring patches of one image.

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{LinkSource, PatchRecord, SoftLink};
use crate::{Error, Result};

/// Weights and bandwidths of the neighbor similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Pixels.
    pub sigma_spatial: f64,
    /// Depth units.
    pub sigma_depth: f64,
    pub threshold: f64,
    /// Optional cutoff on center distance (pixels) for candidate pairs.
    pub candidate_radius: Option<f64>,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            sigma_spatial: 512.0,
            sigma_depth: 6.0,
            threshold: 0.7,
            candidate_radius: None,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::arg("alpha and beta must be non-negative with a positive sum"));
        }
        if !(self.sigma_spatial > 0.0 && self.sigma_depth > 0.0) {
            return Err(Error::arg("sigmas must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::arg("threshold must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Largest squared center distance worth scoring: beyond `9 sigma²` the
    /// spatial term is below `e^-4.5`.
    pub fn max_spatial_sq(&self) -> f64 {
        let prune = 9.0 * self.sigma_spatial * self.sigma_spatial;
        match self.candidate_radius {
            Some(r) => prune.min(r * r),
            None => prune,
        }
    }
}

/// Squared Euclidean distance between patch centers.
pub fn spatial_distance(p1: &PatchRecord, p2: &PatchRecord) -> Result<f64> {
    if p1.image_id != p2.image_id {
        return Err(Error::arg(format!(
            "patches {} and {} come from different images",
            p1.patch_id, p2.patch_id
        )));
    }
    let dr = (p1.center_row - p2.center_row) as f64;
    let dc = (p1.center_col - p2.center_col) as f64;
    Ok(dr * dr + dc * dc)
}

/// Mean squared difference of co-registered depth values.
///
/// Returns `None` when the lengths differ or either side is empty.
pub fn depth_distance_values(d1: &[f32], d2: &[f32]) -> Option<f64> {
    if d1.len() != d2.len() || d1.is_empty() {
        return None;
    }
    let mut acc = [0.0f64; 8];
    let mut c1 = d1.chunks_exact(8);
    let mut c2 = d2.chunks_exact(8);
    for (a, b) in (&mut c1).zip(&mut c2) {
        for k in 0..8 {
            let d = f64::from(a[k]) - f64::from(b[k]);
            acc[k] += d * d;
        }
    }
    let mut total: f64 = acc.iter().sum();
    for (a, b) in c1.remainder().iter().zip(c2.remainder()) {
        let d = f64::from(*a) - f64::from(*b);
        total += d * d;
    }
    Some(total / d1.len() as f64)
}

/// Depth distance between two patches carrying `depth_pixels`.
pub fn depth_distance(p1: &PatchRecord, p2: &PatchRecord) -> Result<f64> {
    match (&p1.depth_pixels, &p2.depth_pixels) {
        (Some(a), Some(b)) => depth_distance_values(a, b).ok_or_else(|| {
            Error::arg(format!(
                "depth of patches {} and {} differ in length",
                p1.patch_id, p2.patch_id
            ))
        }),
        _ => Err(Error::pre(format!(
            "depth unavailable for patch pair ({}, {})",
            p1.patch_id, p2.patch_id
        ))),
    }
}

/// Similarity from precomputed distances.
///
/// Without depth the spatial term carries full weight (`alpha' = 1`,
/// `beta' = 0`).
pub fn similarity_from_distances(d_spatial: f64, d_depth: Option<f64>, cfg: &SimilarityConfig) -> f64 {
    let spatial = (-d_spatial / (2.0 * cfg.sigma_spatial * cfg.sigma_spatial)).exp();
    match d_depth {
        Some(dd) => cfg.alpha * spatial + cfg.beta * (-dd / (2.0 * cfg.sigma_depth * cfg.sigma_depth)).exp(),
        None => spatial,
    }
}

/// Combined spatial and depth similarity of two patches of one image.
pub fn soft_similarity(p1: &PatchRecord, p2: &PatchRecord, cfg: &SimilarityConfig) -> Result<f64> {
    let ds = spatial_distance(p1, p2)?;
    let dd = match (&p1.depth_pixels, &p2.depth_pixels) {
        (Some(_), Some(_)) => Some(depth_distance(p1, p2)?),
        _ => None,
    };
    Ok(similarity_from_distances(ds, dd, cfg))
}

/// Emits a soft link for every same-image pair whose similarity reaches the
/// threshold; the similarity becomes the link confidence.
///
/// `depth_of` supplies per-pixel depth for a patch (commonly a crop of the
/// image's depth map); when it returns `None` for either side the pair is
/// scored on distance alone.
pub fn generate_neighbor_constraints<'a, F>(
    patches: &'a [PatchRecord],
    depth_of: F,
    cfg: &SimilarityConfig,
) -> Result<Vec<SoftLink>>
where
    F: Fn(&'a PatchRecord) -> Option<Cow<'a, [f32]>>,
{
    cfg.validate()?;
    let mut by_image: BTreeMap<u64, Vec<&PatchRecord>> = BTreeMap::new();
    for p in patches {
        by_image.entry(p.image_id).or_default().push(p);
    }
    let max_sq = cfg.max_spatial_sq();
    // best possible depth term is beta; skip pairs that cannot reach the threshold
    let spatial_floor = if cfg.alpha > 0.0 {
        (cfg.threshold - cfg.beta) / cfg.alpha
    } else {
        f64::NEG_INFINITY
    };

    let mut links = Vec::new();
    for group in by_image.values() {
        let depths: Vec<Option<Cow<'a, [f32]>>> = group.iter().map(|p| depth_of(p)).collect();
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (p, q) = (group[i], group[j]);
                let ds = spatial_distance(p, q)?;
                if ds > max_sq {
                    continue;
                }
                let dd = match (&depths[i], &depths[j]) {
                    (Some(a), Some(b)) if a.len() == b.len() => {
                        let spatial = (-ds / (2.0 * cfg.sigma_spatial * cfg.sigma_spatial)).exp();
                        if spatial < spatial_floor {
                            continue;
                        }
                        depth_distance_values(a, b)
                    }
                    // missing depth or windows of different sizes
                    _ => None,
                };
                let sim = similarity_from_distances(ds, dd, cfg);
                if sim >= cfg.threshold {
                    let (a, b) = if p.patch_id < q.patch_id {
                        (p.patch_id, q.patch_id)
                    } else {
                        (q.patch_id, p.patch_id)
                    };
                    links.push(SoftLink {
                        a,
                        b,
                        confidence: sim,
                        source: LinkSource::Neighbor,
                    });
                }
            }
        }
    }
    links.sort_by_key(|l| (l.a, l.b));
    Ok(links)
}
