//! Patch classification from segmentation masks and depth.

use serde::{Deserialize, Serialize};

use crate::image::SegMask;
use crate::ingest::Dataset;
use crate::model::{FilterClass, PatchRecord};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

/// One connected region of a mask crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    pub pixels: usize,
    /// Inclusive bounds.
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

/// Labels the regions of `class_code` pixels, largest first.
///
/// Equal-sized components keep raster order of their first pixel.
pub fn connected_components(mask: &SegMask, class_code: u8, connectivity: Connectivity) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    for start in 0..w * h {
        if seen[start] || mask.values[start] != class_code {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Component {
            pixels: 0,
            min_row: usize::MAX,
            min_col: usize::MAX,
            max_row: 0,
            max_col: 0,
        };
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / w, idx % w);
            comp.pixels += 1;
            comp.min_row = comp.min_row.min(r);
            comp.min_col = comp.min_col.min(c);
            comp.max_row = comp.max_row.max(r);
            comp.max_col = comp.max_col.max(c);
            for &(dr, dc) in offsets {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let n = nr as usize * w + nc as usize;
                if !seen[n] && mask.values[n] == class_code {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        out.push(comp);
    }
    // stable: ties keep discovery (raster) order
    out.sort_by(|a, b| b.pixels.cmp(&a.pixels));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// A patch is mixed when its dominant class covers less than this.
    pub mixed_fraction: f64,
    /// A patch is soil when soil covers more than this.
    pub soil_fraction: f64,
    /// A patch is pebbly with more rock components than this.
    pub pebble_components: usize,
    pub min_component_pixels: usize,
    /// Cutoff on mean absolute depth (meters).
    pub depth_cutoff: f64,
    /// Cutoff applied to mean relative depth when no absolute channel exists.
    pub relative_depth_cutoff: Option<f64>,
    pub connectivity: Connectivity,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mixed_fraction: 0.70,
            soil_fraction: 0.70,
            pebble_components: 10,
            min_component_pixels: 1,
            depth_cutoff: 10.0,
            relative_depth_cutoff: None,
            connectivity: Connectivity::Four,
        }
    }
}

/// Depth evidence for the distant rule.
#[derive(Clone, Copy, Debug)]
pub enum DepthCrop<'a> {
    Absolute(&'a [f32]),
    Relative(&'a [f32]),
}

fn mean(values: &[f32]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().map(|&v| f64::from(v)).sum::<f64>() / values.len() as f64)
}

/// Assigns a filter class to one patch.
///
/// Rules apply in order: distant, mixed, soil, pebbly, rock. Pixels coded
/// unknown are left out of every fraction. Without a mask, or with a mask
/// holding no labeled pixels, the patch stays unfiltered.
pub fn classify_patch(mask: Option<&SegMask>, depth: Option<DepthCrop<'_>>, cfg: &FilterConfig) -> FilterClass {
    let Some(mask) = mask else {
        return FilterClass::Unfiltered;
    };

    let distant = match depth {
        Some(DepthCrop::Absolute(d)) => mean(d).is_some_and(|m| m > cfg.depth_cutoff),
        Some(DepthCrop::Relative(d)) => cfg
            .relative_depth_cutoff
            .is_some_and(|cut| mean(d).is_some_and(|m| m > cut)),
        None => false,
    };
    if distant {
        return FilterClass::Distant;
    }

    let soil = mask.values.iter().filter(|&&v| v == SegMask::SOIL).count();
    let rock = mask.values.iter().filter(|&&v| v == SegMask::ROCK).count();
    let labeled = soil + rock;
    if labeled == 0 {
        return FilterClass::Unfiltered;
    }
    let fraction = |n: usize| n as f64 / labeled as f64;
    if fraction(soil.max(rock)) < cfg.mixed_fraction {
        return FilterClass::Mixed;
    }
    if fraction(soil) > cfg.soil_fraction {
        return FilterClass::Soil;
    }
    let pebbles = connected_components(mask, SegMask::ROCK, cfg.connectivity)
        .iter()
        .filter(|c| c.pixels >= cfg.min_component_pixels)
        .count();
    if pebbles > cfg.pebble_components {
        return FilterClass::Pebbly;
    }
    FilterClass::Rock
}

/// Classifies every patch from its image's mask and depth crops.
///
/// The absolute depth channel is preferred; the relative one is consulted
/// only when a relative cutoff is configured.
pub fn classify_patches(dataset: &Dataset, patches: &mut [PatchRecord], cfg: &FilterConfig) -> Result<()> {
    for p in patches.iter_mut() {
        let entry = dataset
            .image(p.image_id)
            .ok_or_else(|| Error::arg(format!("patch {} references unknown image {}", p.patch_id, p.image_id)))?;
        let (row, col) = p.origin();
        let size = p.patch_size as usize;
        if row < 0 || col < 0 || row as usize + size > entry.image.height || col as usize + size > entry.image.width {
            return Err(Error::arg(format!("patch {} window leaves its image", p.patch_id)));
        }
        let (row, col) = (row as usize, col as usize);
        let mask = entry.mask.as_ref().map(|m| m.crop(row, col, size, size));
        let absolute = entry.absolute_depth.as_ref().map(|d| d.crop(row, col, size));
        let relative = match (&absolute, cfg.relative_depth_cutoff) {
            (None, Some(_)) => entry.depth.as_ref().map(|d| d.crop(row, col, size)),
            _ => None,
        };
        let depth = match (&absolute, &relative) {
            (Some(a), _) => Some(DepthCrop::Absolute(a)),
            (None, Some(r)) => Some(DepthCrop::Relative(r)),
            _ => None,
        };
        p.filter_class = classify_patch(mask.as_ref(), depth, cfg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: u8 = SegMask::SOIL;
    const R: u8 = SegMask::ROCK;

    fn mask(w: usize, h: usize, values: Vec<u8>) -> SegMask {
        SegMask::new(w, h, values).unwrap()
    }

    #[test]
    fn two_blobs_of_three() {
        #[rustfmt::skip]
        let m = mask(5, 3, vec![
            R, R, S, S, S,
            R, S, S, R, S,
            S, S, S, R, R,
        ]);
        let comps = connected_components(&m, R, Connectivity::Four);
        assert_eq!(comps.iter().map(|c| c.pixels).collect::<Vec<_>>(), vec![3, 3]);
        assert_eq!(
            (comps[0].min_row, comps[0].min_col, comps[0].max_row, comps[0].max_col),
            (0, 0, 1, 1)
        );
    }

    #[test]
    fn all_soil_has_no_rock_components() {
        assert!(connected_components(&mask(4, 4, vec![S; 16]), R, Connectivity::Four).is_empty());
    }

    #[test]
    fn isolated_pixels_are_separate_under_four_connectivity() {
        let mut values = vec![S; 8 * 6];
        let mut placed = 0;
        for r in (0..6).step_by(2) {
            for c in (0..8).step_by(2) {
                values[r * 8 + c] = R;
                placed += 1;
            }
        }
        assert_eq!(placed, 12);
        let comps = connected_components(&mask(8, 6, values.clone()), R, Connectivity::Four);
        assert_eq!(comps.len(), 12);
        assert!(comps.iter().all(|c| c.pixels == 1));
    }

    #[test]
    fn diagonal_touch_depends_on_connectivity() {
        let m = mask(2, 2, vec![R, S, S, R]);
        assert_eq!(connected_components(&m, R, Connectivity::Four).len(), 2);
        assert_eq!(connected_components(&m, R, Connectivity::Eight).len(), 1);
    }

    #[test]
    fn missing_mask_is_unfiltered() {
        assert_eq!(
            classify_patch(None, None, &FilterConfig::default()),
            FilterClass::Unfiltered
        );
    }

    #[test]
    fn unknown_pixels_do_not_force_mixed() {
        // 50 rock, 50 unknown: rock is 100% of labeled pixels
        let mut values = vec![R; 50];
        values.extend(vec![SegMask::UNKNOWN; 50]);
        let m = mask(10, 10, values);
        assert_eq!(
            classify_patch(Some(&m), None, &FilterConfig::default()),
            FilterClass::Rock
        );
        let unknown = mask(2, 2, vec![SegMask::UNKNOWN; 4]);
        assert_eq!(
            classify_patch(Some(&unknown), None, &FilterConfig::default()),
            FilterClass::Unfiltered
        );
    }

    #[test]
    fn relative_depth_needs_configured_cutoff() {
        let m = mask(2, 2, vec![R; 4]);
        let depth = [50.0f32; 4];
        let mut cfg = FilterConfig::default();
        assert_eq!(
            classify_patch(Some(&m), Some(DepthCrop::Relative(&depth)), &cfg),
            FilterClass::Rock
        );
        cfg.relative_depth_cutoff = Some(40.0);
        assert_eq!(
            classify_patch(Some(&m), Some(DepthCrop::Relative(&depth)), &cfg),
            FilterClass::Distant
        );
    }
}
