//! Shared data types and dataset validation.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Camera eye that captured an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    Left,
    Right,
    Mono,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterClass {
    Rock,
    Soil,
    Pebbly,
    Mixed,
    Distant,
    Unfiltered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Excluded,
}

/// Origin of a pairwise constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkSource {
    /// Stereo left/right correspondence.
    Lr,
    /// Consecutive-image correspondence (RSM counts two apart).
    Rsm,
    /// Same-image neighbor with spatial and depth similarity.
    Neighbor,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self {
                    $(Self::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::arg(format!(
                        "unknown {} `{other}`",
                        stringify!($ty)
                    ))),
                }
            }
        }
    };
}

text_enum!(Eye { Left => "left", Right => "right", Mono => "mono" });
text_enum!(FilterClass {
    Rock => "rock",
    Soil => "soil",
    Pebbly => "pebbly",
    Mixed => "mixed",
    Distant => "distant",
    Unfiltered => "unfiltered",
});
text_enum!(Split { Train => "train", Test => "test", Excluded => "excluded" });
text_enum!(LinkSource { Lr => "lr", Rsm => "rsm", Neighbor => "neighbor" });

/// One square image patch.
///
/// Centers are signed so that malformed input can be represented and
/// reported by [`validate_dataset`] instead of failing at parse time.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub patch_id: u64,
    pub image_id: u64,
    pub center_row: i64,
    pub center_col: i64,
    pub patch_size: u32,
    /// Per-pixel relative depth, row-major, `patch_size²` entries.
    pub depth_pixels: Option<Vec<f32>>,
    pub depth_mean: f32,
    pub site: i64,
    pub drive: i64,
    pub pose: i64,
    pub rsm_count: i64,
    pub eye: Eye,
    pub filter_class: FilterClass,
    pub split: Split,
}

impl PatchRecord {
    /// Top-left corner of the window as (row, col).
    pub fn origin(&self) -> (i64, i64) {
        let half = i64::from(self.patch_size / 2);
        (self.center_row - half, self.center_col - half)
    }

    /// Window as `[row0, row1) x [col0, col1)`.
    pub fn window(&self) -> Rect {
        let (r, c) = self.origin();
        Rect {
            row0: r as f64,
            col0: c as f64,
            rows: f64::from(self.patch_size),
            cols: f64::from(self.patch_size),
        }
    }

    fn geometry_key(&self) -> (u64, i64, i64, u32) {
        (self.image_id, self.center_row, self.center_col, self.patch_size)
    }
}

/// Axis-aligned rectangle in (possibly fractional) pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub row0: f64,
    pub col0: f64,
    pub rows: f64,
    pub cols: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        self.rows.max(0.0) * self.cols.max(0.0)
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let r = (self.row0 + self.rows).min(other.row0 + other.rows) - self.row0.max(other.row0);
        let c = (self.col0 + self.cols).min(other.col0 + other.cols) - self.col0.max(other.col0);
        if r <= 0.0 || c <= 0.0 {
            0.0
        } else {
            r * c
        }
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= self.row0 && row < self.row0 + self.rows && col >= self.col0 && col < self.col0 + self.cols
    }
}

/// PCA, whitening and normalization chain applied to raw features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub pca_mean: Vec<f64>,
    /// Principal directions, `out_dim x in_dim` row-major.
    pub pca_basis: Vec<f64>,
    pub whitening_scales: Vec<f64>,
    pub l2_normalized: bool,
}

impl Transform {
    pub fn in_dim(&self) -> usize {
        self.pca_mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.whitening_scales.len()
    }
}

/// Dense per-patch feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    /// `n_patches x dim`, row-major.
    pub values: Vec<f32>,
    pub patch_ids: Vec<u64>,
    pub transform: Option<Transform>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, values: Vec<f32>, patch_ids: Vec<u64>) -> Result<Self> {
        if dim == 0 && !values.is_empty() {
            return Err(Error::arg("embedding dimension must be positive"));
        }
        if values.len() != dim * patch_ids.len() {
            return Err(Error::arg(format!(
                "embedding matrix has {} values, expected {} x {}",
                values.len(),
                patch_ids.len(),
                dim
            )));
        }
        Ok(Self {
            dim,
            values,
            patch_ids,
            transform: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], patch_ids: Vec<u64>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::arg("ragged embedding rows"));
        }
        Self::new(dim, rows.concat(), patch_ids)
    }

    pub fn n_patches(&self) -> usize {
        self.patch_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim.max(1))
    }

    pub fn is_l2_normalized(&self) -> bool {
        self.transform.as_ref().is_some_and(|t| t.l2_normalized)
    }

    /// Rows widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    /// Position of each patch id in the matrix.
    pub fn index_of(&self) -> HashMap<u64, usize> {
        self.patch_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HardLink {
    pub a: u64,
    pub b: u64,
    pub source: LinkSource,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftLink {
    pub a: u64,
    pub b: u64,
    pub confidence: f64,
    pub source: LinkSource,
}

/// Must-link pairs (hard and confidence-weighted) plus optional cannot-links.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConstraintSet {
    pub hard_links: Vec<HardLink>,
    pub soft_links: Vec<SoftLink>,
    /// Weighted cannot-link penalties. No stage generates these; they are
    /// accepted from constraint files.
    pub cannot_links: Vec<SoftLink>,
}

impl ConstraintSet {
    pub fn is_empty(&self) -> bool {
        self.hard_links.is_empty() && self.soft_links.is_empty() && self.cannot_links.is_empty()
    }

    pub fn len(&self) -> usize {
        self.hard_links.len() + self.soft_links.len() + self.cannot_links.len()
    }

    /// Orders every pair as `a < b`, drops self-pairs and duplicates, removes
    /// soft links already covered by a hard link and sorts by `(a, b)`.
    ///
    /// Duplicate hard links keep the smallest source; duplicate soft and
    /// cannot links keep the largest confidence.
    pub fn dedup(mut self) -> Self {
        fn order(a: u64, b: u64) -> (u64, u64) {
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        }

        let mut hard: HashMap<(u64, u64), LinkSource> = HashMap::new();
        for l in self.hard_links.drain(..) {
            let key = order(l.a, l.b);
            if key.0 == key.1 {
                continue;
            }
            hard.entry(key)
                .and_modify(|s| *s = (*s).min(l.source))
                .or_insert(l.source);
        }
        let mut hard_links: Vec<HardLink> = hard
            .into_iter()
            .map(|((a, b), source)| HardLink { a, b, source })
            .collect();
        hard_links.sort_by_key(|l| (l.a, l.b));
        let hard_pairs: HashSet<(u64, u64)> = hard_links.iter().map(|l| (l.a, l.b)).collect();

        let weighted = |links: Vec<SoftLink>, skip: Option<&HashSet<(u64, u64)>>| {
            let mut best: HashMap<(u64, u64), SoftLink> = HashMap::new();
            for l in links {
                let (a, b) = order(l.a, l.b);
                if a == b || skip.is_some_and(|s| s.contains(&(a, b))) {
                    continue;
                }
                let l = SoftLink { a, b, ..l };
                best.entry((a, b))
                    .and_modify(|cur| {
                        if l.confidence > cur.confidence {
                            *cur = l;
                        }
                    })
                    .or_insert(l);
            }
            let mut out: Vec<SoftLink> = best.into_values().collect();
            out.sort_by_key(|l| (l.a, l.b));
            out
        };

        let soft_links = weighted(std::mem::take(&mut self.soft_links), Some(&hard_pairs));
        let cannot_links = weighted(std::mem::take(&mut self.cannot_links), None);
        Self {
            hard_links,
            soft_links,
            cannot_links,
        }
    }

    /// Keeps only links whose source is in `sources`.
    pub fn restrict_sources(&self, sources: &[LinkSource]) -> Self {
        Self {
            hard_links: self
                .hard_links
                .iter()
                .filter(|l| sources.contains(&l.source))
                .copied()
                .collect(),
            soft_links: self
                .soft_links
                .iter()
                .filter(|l| sources.contains(&l.source))
                .copied()
                .collect(),
            cannot_links: self.cannot_links.clone(),
        }
    }

    pub fn count_source(&self, source: LinkSource) -> usize {
        self.hard_links.iter().filter(|l| l.source == source).count()
            + self.soft_links.iter().filter(|l| l.source == source).count()
    }
}

/// Result of constrained clustering.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<u32>,
    /// Hard-link closure; each entry lists member indices in ascending order.
    pub chunklets: Vec<Vec<usize>>,
    pub objective: f64,
    pub iterations_run: usize,
    /// Objective after seeding and after every sweep + centroid update.
    pub objective_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

/// Affine projection `f(x) = W x + b` trained with a triplet loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricModel {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub margin: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl MetricModel {
    /// Identity-initialized model (`W = I` on the leading block, `b = 0`).
    pub fn identity(in_dim: usize, out_dim: usize) -> Result<Self> {
        if out_dim < 2 || in_dim == 0 {
            return Err(Error::arg("metric model needs in_dim >= 1 and out_dim >= 2"));
        }
        let mut weights = vec![0.0; out_dim * in_dim];
        for i in 0..out_dim.min(in_dim) {
            weights[i * in_dim + i] = 1.0;
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            margin: 0.2,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
            && self.margin.is_finite()
            && self.learning_rate.is_finite()
            && self.weight_decay.is_finite()
    }

    /// Writes `W x + b` into `out`.
    pub fn project_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b;
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.project_into(x, &mut out);
        out
    }

    /// Projects every row of a row-major `n x in_dim` matrix.
    pub fn project_rows(&self, rows: &[f64]) -> Vec<f64> {
        let n = rows.len() / self.in_dim;
        let mut out = vec![0.0; n * self.out_dim];
        for (x, o) in rows.chunks_exact(self.in_dim).zip(out.chunks_exact_mut(self.out_dim)) {
            self.project_into(x, o);
        }
        out
    }
}

/// Image extent used for bounds checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageDims {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    DuplicatePatchId(u64),
    DuplicateGeometry {
        patch_id: u64,
    },
    NonPositiveSize {
        patch_id: u64,
    },
    CenterOutOfBounds {
        patch_id: u64,
    },
    DepthLength {
        patch_id: u64,
        expected: usize,
        found: usize,
    },
    RowCountMismatch {
        rows: usize,
        patches: usize,
    },
    DuplicateEmbeddingId(u64),
    UnknownEmbeddingId(u64),
    NormViolation {
        row: usize,
        norm: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicatePatchId(id) => write!(f, "duplicate patch id {id}"),
            Violation::DuplicateGeometry { patch_id } => {
                write!(f, "patch {patch_id} repeats an existing (image, center, size)")
            }
            Violation::NonPositiveSize { patch_id } => write!(f, "patch {patch_id} has size 0"),
            Violation::CenterOutOfBounds { patch_id } => {
                write!(f, "patch {patch_id}: center out of bounds")
            }
            Violation::DepthLength {
                patch_id,
                expected,
                found,
            } => write!(f, "patch {patch_id}: depth has {found} values, expected {expected}"),
            Violation::RowCountMismatch { rows, patches } => {
                write!(f, "row-count mismatch: {rows} embedding rows for {patches} patches")
            }
            Violation::DuplicateEmbeddingId(id) => write!(f, "duplicate embedding id {id}"),
            Violation::UnknownEmbeddingId(id) => write!(f, "embedding id {id} has no patch"),
            Violation::NormViolation { row, norm } => {
                write!(f, "row {row} has norm {norm}, expected 1")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every invariant violation in a patch table and its embeddings.
///
/// `images` supplies extents for the upper bounds check; patches of unknown
/// images are checked against the lower bound only.
pub fn validate_dataset(patches: &[PatchRecord], embeddings: &EmbeddingSet, images: &[ImageDims]) -> ValidationReport {
    let mut violations = Vec::new();
    let dims: HashMap<u64, ImageDims> = images.iter().map(|d| (d.image_id, *d)).collect();

    let mut ids = HashSet::new();
    let mut geometry = HashSet::new();
    for p in patches {
        if !ids.insert(p.patch_id) {
            violations.push(Violation::DuplicatePatchId(p.patch_id));
        }
        if !geometry.insert(p.geometry_key()) {
            violations.push(Violation::DuplicateGeometry { patch_id: p.patch_id });
        }
        if p.patch_size == 0 {
            violations.push(Violation::NonPositiveSize { patch_id: p.patch_id });
            continue;
        }
        let half = i64::from(p.patch_size / 2);
        let mut in_bounds = p.center_row >= half && p.center_col >= half;
        if let Some(d) = dims.get(&p.image_id) {
            in_bounds &= p.center_row <= i64::from(d.height) - half && p.center_col <= i64::from(d.width) - half;
        }
        if !in_bounds {
            violations.push(Violation::CenterOutOfBounds { patch_id: p.patch_id });
        }
        if let Some(depth) = &p.depth_pixels {
            let expected = (p.patch_size as usize).pow(2);
            if depth.len() != expected {
                violations.push(Violation::DepthLength {
                    patch_id: p.patch_id,
                    expected,
                    found: depth.len(),
                });
            }
        }
    }

    let rows = if embeddings.dim == 0 {
        embeddings.patch_ids.len()
    } else {
        embeddings.values.len() / embeddings.dim
    };
    if rows != patches.len() {
        violations.push(Violation::RowCountMismatch {
            rows,
            patches: patches.len(),
        });
    }
    let mut seen = HashSet::new();
    for &id in &embeddings.patch_ids {
        if !seen.insert(id) {
            violations.push(Violation::DuplicateEmbeddingId(id));
        } else if !ids.contains(&id) {
            violations.push(Violation::UnknownEmbeddingId(id));
        }
    }
    if embeddings.is_l2_normalized() {
        for (row, values) in embeddings.rows().enumerate() {
            let norm = values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                violations.push(Violation::NormViolation { row, norm });
            }
        }
    }
    ValidationReport { violations }
}
