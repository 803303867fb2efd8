//! Hard links between views of one target taken a short time apart.

use serde::{Deserialize, Serialize};

use super::ncc::{NccMatch, Pyramid, PyramidOptions, SearchWindow};
use super::View;
use crate::model::{HardLink, LinkSource, PatchRecord};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsmConfig {
    /// Search half-width as a fraction of image width/height.
    pub search_fraction: f64,
    pub min_score: f64,
    /// Required absolute difference of rsm counts.
    pub rsm_gap: i64,
    pub pyramid: PyramidOptions,
    /// Half-width of the full-resolution check around the pair's median
    /// displacement; 0 disables it.
    pub consensus_radius: usize,
}

impl Default for RsmConfig {
    fn default() -> Self {
        Self {
            search_fraction: 0.25,
            min_score: 0.8,
            rsm_gap: 2,
            pyramid: PyramidOptions {
                max_factor: 4,
                ..PyramidOptions::default()
            },
            consensus_radius: 4,
        }
    }
}

/// Among `candidates` of the given size whose window contains the point,
/// the one with the nearest center; ties go to the smallest id.
pub fn patch_at(candidates: &[PatchRecord], size: u32, row: f64, col: f64) -> Option<&PatchRecord> {
    candidates
        .iter()
        .filter(|p| p.patch_size == size && p.window().contains(row, col))
        .min_by(|p, q| {
            let d = |x: &PatchRecord| (x.center_row as f64 - row).powi(2) + (x.center_col as f64 - col).powi(2);
            d(p).total_cmp(&d(q)).then(p.patch_id.cmp(&q.patch_id))
        })
}

pub fn check_pair(a: &View<'_>, b: &View<'_>, gap: i64) -> Result<()> {
    let (ka, kb) = (&a.key, &b.key);
    if (ka.site, ka.drive, ka.pose) != (kb.site, kb.drive, kb.pose) {
        return Err(Error::pre(format!(
            "images {} and {} differ in site, drive or pose",
            a.image_id, b.image_id
        )));
    }
    if (ka.rsm_count - kb.rsm_count).abs() != gap {
        return Err(Error::pre(format!(
            "rsm counts {} and {} are not {} apart",
            ka.rsm_count, kb.rsm_count, gap
        )));
    }
    Ok(())
}

fn median(mut v: Vec<i64>) -> i64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Matches every patch of `a` inside `b` near its own location and links it
/// to the `b` patch covering the best match.
///
/// Each patch is first located with the pyramid search. The median
/// displacement of the matches scoring at least `min_score` is then checked
/// at full resolution for every patch, and the better of the two placements
/// is kept.
pub fn generate_rsm_constraints(a: &View<'_>, b: &View<'_>, cfg: &RsmConfig) -> Result<Vec<HardLink>> {
    check_pair(a, b, cfg.rsm_gap)?;
    let pyramid = Pyramid::new(b.gray, cfg.pyramid.max_factor);
    let reach_r = (cfg.search_fraction * b.gray.height as f64).round() as usize;
    let reach_c = (cfg.search_fraction * b.gray.width as f64).round() as usize;

    let mut found = Vec::new();
    for p in a.patches {
        let size = p.patch_size as usize;
        let (r0, c0) = p.origin();
        if r0 < 0 || c0 < 0 || r0 as usize + size > a.gray.height || c0 as usize + size > a.gray.width {
            continue;
        }
        let Some(full) = SearchWindow::full(b.gray, size, size) else {
            continue;
        };
        let Some(window) = SearchWindow::around(r0 as usize, c0 as usize, reach_r, reach_c, &full) else {
            continue;
        };
        let template = a.gray.crop(r0 as usize, c0 as usize, size, size);
        let m = pyramid.search(&template, &window, &cfg.pyramid)?;
        found.push((p, template, window, m));
    }

    let confident: Vec<&(&PatchRecord, _, _, NccMatch)> = found.iter().filter(|f| f.3.score >= cfg.min_score).collect();
    if cfg.consensus_radius > 0 && !confident.is_empty() {
        let dy = median(confident.iter().map(|f| f.3.row as i64 - f.0.origin().0).collect());
        let dx = median(confident.iter().map(|f| f.3.col as i64 - f.0.origin().1).collect());
        for (p, template, window, m) in found.iter_mut() {
            let (r0, c0) = p.origin();
            let (r, c) = (r0 + dy, c0 + dx);
            let rad = cfg.consensus_radius as i64;
            let local = SearchWindow {
                row_min: (r - rad).max(window.row_min as i64) as usize,
                row_max: (r + rad).min(window.row_max as i64).max(0) as usize,
                col_min: (c - rad).max(window.col_min as i64) as usize,
                col_max: (c + rad).min(window.col_max as i64).max(0) as usize,
            };
            if local.row_min > local.row_max || local.col_min > local.col_max {
                continue;
            }
            let check = pyramid.scan_base(template, &local);
            if check.score > m.score {
                *m = check;
            }
        }
    }

    let mut links = Vec::new();
    for (p, _, _, m) in &found {
        if m.score < cfg.min_score {
            continue;
        }
        let half = p.patch_size as f64 / 2.0;
        if let Some(q) = patch_at(b.patches, p.patch_size, m.row as f64 + half, m.col as f64 + half) {
            links.push(HardLink {
                a: p.patch_id.min(q.patch_id),
                b: p.patch_id.max(q.patch_id),
                source: LinkSource::Rsm,
            });
        }
    }
    links.sort_by_key(|l| (l.a, l.b));
    Ok(links)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ViewKey;
    use crate::image::GrayImage;
    use crate::model::tests::patch;
    use crate::model::Eye;

    #[test]
    fn rsm_gap_must_be_two() {
        let g = GrayImage::filled(32, 32, 0.0);
        let key = |rsm| ViewKey {
            site: 1,
            drive: 1,
            pose: 1,
            rsm_count: rsm,
            eye: Eye::Left,
        };
        let a = View {
            image_id: 0,
            key: key(10),
            gray: &g,
            patches: &[],
        };
        let b = View {
            image_id: 1,
            key: key(11),
            gray: &g,
            patches: &[],
        };
        assert!(matches!(
            generate_rsm_constraints(&a, &b, &RsmConfig::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn nearest_covering_patch_wins() {
        let ps = vec![
            patch(5, 0, 64, 64, 128),
            patch(6, 0, 64, 128, 128),
            patch(7, 0, 64, 96, 64),
        ];
        assert_eq!(patch_at(&ps, 128, 64.0, 90.0).unwrap().patch_id, 5);
        assert_eq!(patch_at(&ps, 128, 64.0, 96.0).unwrap().patch_id, 5);
        assert_eq!(patch_at(&ps, 128, 64.0, 97.0).unwrap().patch_id, 6);
        assert_eq!(patch_at(&ps, 64, 64.0, 97.0).unwrap().patch_id, 7);
        assert!(patch_at(&ps, 128, 500.0, 500.0).is_none());
    }
}
