//! Hard links between simultaneous left/right stereo views.

use serde::{Deserialize, Serialize};

use super::ncc::{scale_template, NccMatch, Pyramid, PyramidOptions, SearchWindow};
use super::{Skip, View};
use crate::model::{Eye, HardLink, LinkSource, Rect};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrConfig {
    /// Left focal length over right focal length.
    pub focal_ratio: f64,
    /// Minimum IoU between a right-patch footprint and a left patch.
    pub iou_threshold: f64,
    /// Minimum localization score.
    pub min_score: f64,
    pub left_patch_size: u32,
    pub right_patch_size: u32,
    pub pyramid: PyramidOptions,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            focal_ratio: 34.0 / 100.0,
            iou_threshold: 0.4,
            min_score: 0.6,
            left_patch_size: 128,
            right_patch_size: 256,
            pyramid: PyramidOptions {
                max_factor: 8,
                ..PyramidOptions::default()
            },
        }
    }
}

/// Where the right image lands inside the left one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub row: f64,
    pub col: f64,
    /// Left pixels per right pixel, per axis.
    pub scale_row: f64,
    pub scale_col: f64,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LrOutcome {
    pub links: Vec<HardLink>,
    pub localization: Option<Localization>,
    pub skip: Option<Skip>,
}

fn check_pair(left: &View<'_>, right: &View<'_>) -> Result<()> {
    let (l, r) = (&left.key, &right.key);
    if l.eye != Eye::Left || r.eye != Eye::Right {
        return Err(Error::pre(format!(
            "images {} and {} are not a left/right pair",
            left.image_id, right.image_id
        )));
    }
    if (l.site, l.drive, l.pose, l.rsm_count) != (r.site, r.drive, r.pose, r.rsm_count) {
        return Err(Error::pre(format!(
            "images {} and {} differ in site, drive, pose or rsm count",
            left.image_id, right.image_id
        )));
    }
    Ok(())
}

/// Finds the scaled right image inside the left image.
pub fn localize_right(left: &View<'_>, right: &View<'_>, cfg: &LrConfig) -> Result<Localization> {
    let template = scale_template(right.gray, cfg.focal_ratio)?;
    let window = SearchWindow::full(left.gray, template.height, template.width).ok_or_else(|| {
        Error::arg(format!(
            "scaled right image {} does not fit in left image {}",
            right.image_id, left.image_id
        ))
    })?;
    let pyramid = Pyramid::new(left.gray, cfg.pyramid.max_factor);
    let NccMatch { row, col, score } = pyramid.search(&template, &window, &cfg.pyramid)?;
    Ok(Localization {
        row: row as f64,
        col: col as f64,
        scale_row: template.height as f64 / right.gray.height as f64,
        scale_col: template.width as f64 / right.gray.width as f64,
        score,
    })
}

/// Footprint of a right-image rectangle in left-image coordinates.
pub fn footprint(window: &Rect, loc: &Localization) -> Rect {
    Rect {
        row0: loc.row + window.row0 * loc.scale_row,
        col0: loc.col + window.col0 * loc.scale_col,
        rows: window.rows * loc.scale_row,
        cols: window.cols * loc.scale_col,
    }
}

/// Links every right patch to the left patches its footprint overlaps
/// enough.
pub fn links_from_localization(left: &View<'_>, right: &View<'_>, loc: &Localization, cfg: &LrConfig) -> Vec<HardLink> {
    let mut links = Vec::new();
    for rp in right.patches.iter().filter(|p| p.patch_size == cfg.right_patch_size) {
        let fp = footprint(&rp.window(), loc);
        for lp in left.patches.iter().filter(|p| p.patch_size == cfg.left_patch_size) {
            if fp.iou(&lp.window()) >= cfg.iou_threshold {
                links.push(HardLink {
                    a: lp.patch_id.min(rp.patch_id),
                    b: lp.patch_id.max(rp.patch_id),
                    source: LinkSource::Lr,
                });
            }
        }
    }
    links.sort_by_key(|l| (l.a, l.b));
    links
}

/// Localizes the right view in the left view and emits hard links.
///
/// A localization scoring below `min_score` yields no links and a skip
/// record.
pub fn generate_lr_constraints(left: &View<'_>, right: &View<'_>, cfg: &LrConfig) -> Result<LrOutcome> {
    check_pair(left, right)?;
    let loc = localize_right(left, right, cfg)?;
    if !(loc.score >= cfg.min_score) {
        return Ok(LrOutcome {
            links: Vec::new(),
            localization: Some(loc),
            skip: Some(Skip {
                source: LinkSource::Lr,
                image_a: left.image_id,
                image_b: right.image_id,
                score: loc.score,
                reason: format!("localization score {:.3} below {}", loc.score, cfg.min_score),
            }),
        });
    }
    Ok(LrOutcome {
        links: links_from_localization(left, right, &loc, cfg),
        localization: Some(loc),
        skip: None,
    })
}

/// Same as [`generate_lr_constraints`] with an externally supplied
/// localization (for example from a keypoint matcher).
pub fn generate_lr_from_match(
    left: &View<'_>,
    right: &View<'_>,
    loc: &Localization,
    cfg: &LrConfig,
) -> Result<LrOutcome> {
    check_pair(left, right)?;
    Ok(LrOutcome {
        links: links_from_localization(left, right, loc, cfg),
        localization: Some(*loc),
        skip: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ViewKey;
    use crate::image::GrayImage;
    use crate::model::tests::patch;

    fn key(eye: Eye, site: i64) -> ViewKey {
        ViewKey {
            site,
            drive: 1,
            pose: 1,
            rsm_count: 10,
            eye,
        }
    }

    #[test]
    fn mismatched_sites_rejected() {
        let g = GrayImage::filled(64, 64, 1.0);
        let left = View {
            image_id: 0,
            key: key(Eye::Left, 1),
            gray: &g,
            patches: &[],
        };
        let right = View {
            image_id: 1,
            key: key(Eye::Right, 2),
            gray: &g,
            patches: &[],
        };
        assert!(matches!(
            generate_lr_constraints(&left, &right, &LrConfig::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn flat_images_skip() {
        let l = GrayImage::filled(200, 200, 90.0);
        let r = GrayImage::filled(200, 200, 90.0);
        let lp = [patch(0, 0, 64, 64, 128)];
        let rp = [patch(1, 1, 128, 128, 256)];
        let left = View {
            image_id: 0,
            key: key(Eye::Left, 1),
            gray: &l,
            patches: &lp,
        };
        let right = View {
            image_id: 1,
            key: key(Eye::Right, 1),
            gray: &r,
            patches: &rp,
        };
        let out = generate_lr_constraints(&left, &right, &LrConfig::default()).unwrap();
        assert!(out.links.is_empty());
        let skip = out.skip.unwrap();
        assert_eq!(skip.score, 0.0);
    }

    #[test]
    fn footprint_maps_through_scale_and_offset() {
        let loc = Localization {
            row: 10.0,
            col: 20.0,
            scale_row: 0.5,
            scale_col: 0.25,
            score: 1.0,
        };
        let fp = footprint(
            &Rect {
                row0: 4.0,
                col0: 8.0,
                rows: 16.0,
                cols: 16.0,
            },
            &loc,
        );
        assert_eq!(
            fp,
            Rect {
                row0: 12.0,
                col0: 22.0,
                rows: 8.0,
                cols: 4.0
            }
        );
    }
}
