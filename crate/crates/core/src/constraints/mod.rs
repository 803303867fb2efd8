//! Automatic must-link generation.

pub mod ncc;
pub mod rsm;
pub mod similarity;
pub mod stereo;

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ncc::{ncc_match, NccMatch};
pub use rsm::{generate_rsm_constraints, RsmConfig};
pub use similarity::{
    depth_distance, generate_neighbor_constraints, soft_similarity, spatial_distance, SimilarityConfig,
};
pub use stereo::{generate_lr_constraints, Localization, LrConfig};

use crate::image::GrayImage;
use crate::ingest::{Dataset, ImageMeta};
use crate::model::{ConstraintSet, Eye, LinkSource, PatchRecord};
use crate::Result;

/// Acquisition metadata that decides which images correspond.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewKey {
    pub site: i64,
    pub drive: i64,
    pub pose: i64,
    pub rsm_count: i64,
    pub eye: Eye,
}

impl ViewKey {
    pub fn from_meta(meta: &ImageMeta) -> Self {
        Self {
            site: meta.site,
            drive: meta.drive,
            pose: meta.pose,
            rsm_count: meta.rsm_count,
            eye: meta.eye,
        }
    }
}

/// An image with its patches, as seen by the correspondence stages.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub image_id: u64,
    pub key: ViewKey,
    pub gray: &'a GrayImage,
    pub patches: &'a [PatchRecord],
}

/// An image pair for which no links were emitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub source: LinkSource,
    pub image_a: u64,
    pub image_b: u64,
    pub score: f64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    pub similarity: SimilarityConfig,
    pub lr: LrConfig,
    pub rsm: RsmConfig,
    pub sources: Vec<LinkSource>,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            similarity: SimilarityConfig::default(),
            lr: LrConfig::default(),
            rsm: RsmConfig::default(),
            sources: vec![LinkSource::Lr, LinkSource::Rsm, LinkSource::Neighbor],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ConstraintReport {
    pub constraints: ConstraintSet,
    pub skips: Vec<Skip>,
    /// Stereo localizations by (left, right) image.
    pub localizations: BTreeMap<(u64, u64), Localization>,
}

/// Image pairs eligible for correspondence search.
pub fn candidate_pairs(dataset: &Dataset, rsm_gap: i64) -> (Vec<(u64, u64)>, Vec<(u64, u64)>) {
    let keys: Vec<(u64, ViewKey)> = dataset
        .images
        .iter()
        .map(|e| (e.image_id, ViewKey::from_meta(&e.meta)))
        .collect();
    let mut lr = Vec::new();
    let mut rsm = Vec::new();
    for &(ia, ka) in &keys {
        for &(ib, kb) in &keys {
            if ka.eye == Eye::Left
                && kb.eye == Eye::Right
                && (ka.site, ka.drive, ka.pose, ka.rsm_count) == (kb.site, kb.drive, kb.pose, kb.rsm_count)
            {
                lr.push((ia, ib));
            }
            if ka.eye == kb.eye
                && (ka.site, ka.drive, ka.pose) == (kb.site, kb.drive, kb.pose)
                && kb.rsm_count - ka.rsm_count == rsm_gap
            {
                rsm.push((ia, ib));
            }
        }
    }
    lr.sort_unstable();
    rsm.sort_unstable();
    (lr, rsm)
}

/// Per-pixel relative depth of a patch: attached values first, else a crop
/// of the image's depth map.
pub fn patch_depth<'a>(dataset: &'a Dataset, p: &'a PatchRecord) -> Option<Cow<'a, [f32]>> {
    if let Some(d) = &p.depth_pixels {
        return Some(Cow::Borrowed(d));
    }
    let map = dataset.image(p.image_id)?.depth.as_ref()?;
    let (r, c) = p.origin();
    let size = p.patch_size as usize;
    if r < 0 || c < 0 || r as usize + size > map.height || c as usize + size > map.width {
        return None;
    }
    Some(Cow::Owned(map.crop(r as usize, c as usize, size)))
}

/// Runs every enabled source over the dataset and merges the links.
///
/// `lr_matches` replaces stereo localization for the listed (left, right)
/// pairs.
pub fn generate_constraints(
    dataset: &Dataset,
    patches: &[PatchRecord],
    cfg: &ConstraintConfig,
    lr_matches: &HashMap<(u64, u64), Localization>,
) -> Result<ConstraintReport> {
    let enabled = |s| cfg.sources.contains(&s);
    let mut by_image: HashMap<u64, Vec<PatchRecord>> = HashMap::new();
    for p in patches {
        by_image.entry(p.image_id).or_default().push(p.clone());
    }
    let (lr_pairs, rsm_pairs) = candidate_pairs(dataset, cfg.rsm.rsm_gap);

    let mut needed: Vec<u64> = Vec::new();
    if enabled(LinkSource::Lr) {
        needed.extend(lr_pairs.iter().flat_map(|&(a, b)| [a, b]));
    }
    if enabled(LinkSource::Rsm) {
        needed.extend(rsm_pairs.iter().flat_map(|&(a, b)| [a, b]));
    }
    needed.sort_unstable();
    needed.dedup();
    let grays: HashMap<u64, GrayImage> = needed
        .par_iter()
        .filter_map(|&id| dataset.image(id).map(|e| (id, e.image.to_gray_f32())))
        .collect();

    let empty: Vec<PatchRecord> = Vec::new();
    let view = |id: u64| -> Option<View<'_>> {
        let entry = dataset.image(id)?;
        Some(View {
            image_id: id,
            key: ViewKey::from_meta(&entry.meta),
            gray: grays.get(&id)?,
            patches: by_image.get(&id).unwrap_or(&empty),
        })
    };

    let mut report = ConstraintReport::default();
    let mut set = ConstraintSet::default();

    if enabled(LinkSource::Lr) {
        let outcomes: Vec<_> = lr_pairs
            .par_iter()
            .filter_map(|&(l, r)| Some(((l, r), view(l)?, view(r)?)))
            .map(|(pair, left, right)| {
                let out = match lr_matches.get(&pair) {
                    Some(loc) => stereo::generate_lr_from_match(&left, &right, loc, &cfg.lr),
                    None => generate_lr_constraints(&left, &right, &cfg.lr),
                };
                out.map(|o| (pair, o))
            })
            .collect::<Result<_>>()?;
        for (pair, out) in outcomes {
            set.hard_links.extend(out.links);
            report.skips.extend(out.skip);
            if let Some(loc) = out.localization {
                report.localizations.insert(pair, loc);
            }
        }
    }

    if enabled(LinkSource::Rsm) {
        let links: Vec<_> = rsm_pairs
            .par_iter()
            .filter_map(|&(a, b)| Some((view(a)?, view(b)?)))
            .map(|(a, b)| generate_rsm_constraints(&a, &b, &cfg.rsm))
            .collect::<Result<_>>()?;
        set.hard_links.extend(links.into_iter().flatten());
    }

    if enabled(LinkSource::Neighbor) {
        set.soft_links = generate_neighbor_constraints(patches, |p| patch_depth(dataset, p), &cfg.similarity)?;
    }

    report.constraints = set.dedup();
    Ok(report)
}
