//! Manifest loading, sliding-window patch extraction and the baseline
//! featurizer.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::{DepthMap, GrayImage, RawImage, SegMask};
use crate::model::{EmbeddingSet, Eye, FilterClass, ImageDims, PatchRecord, Split};
use crate::{Error, Result};

/// Per-image metadata as listed in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub site: i64,
    pub drive: i64,
    pub pose: i64,
    pub rsm_count: i64,
    pub eye: Eye,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    /// Calibrated depth (meters) for the distant-patch rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absolute_depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// Per-pixel ground-truth class raster (PGM), when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// False when the image target lies beyond the range limit; such images
    /// are skipped at load time.
    #[serde(default = "default_true")]
    pub within_range: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ImageMeta>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestDoc {
    List(Vec<ImageMeta>),
    Doc(Manifest),
}

impl Manifest {
    pub fn parse(text: &str) -> serde_json::Result<Self> {
        Ok(match serde_json::from_str::<ManifestDoc>(text)? {
            ManifestDoc::List(images) => Manifest { images },
            ManifestDoc::Doc(m) => m,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One loaded image with its optional channels.
#[derive(Clone, Debug)]
pub struct ImageEntry {
    pub image_id: u64,
    pub meta: ImageMeta,
    pub image: RawImage,
    pub depth: Option<DepthMap>,
    pub absolute_depth: Option<DepthMap>,
    pub mask: Option<SegMask>,
    /// Ground-truth class per pixel.
    pub labels: Option<SegMask>,
}

impl ImageEntry {
    pub fn new(image_id: u64, meta: ImageMeta, image: RawImage) -> Self {
        Self {
            image_id,
            meta,
            image,
            depth: None,
            absolute_depth: None,
            mask: None,
            labels: None,
        }
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims {
            image_id: self.image_id,
            width: self.image.width as u32,
            height: self.image.height as u32,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<ImageEntry>,
}

impl Dataset {
    pub fn image(&self, image_id: u64) -> Option<&ImageEntry> {
        self.images
            .get(image_id as usize)
            .filter(|e| e.image_id == image_id)
            .or_else(|| self.images.iter().find(|e| e.image_id == image_id))
    }

    pub fn dims(&self) -> Vec<ImageDims> {
        self.images.iter().map(ImageEntry::dims).collect()
    }
}

/// Loads a manifest and every image it references.
///
/// Paths are resolved relative to the manifest's directory. Image ids are
/// manifest positions; out-of-range images are skipped but keep their id
/// slot so ids stay stable.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        entry: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let manifest = Manifest::parse(&text).map_err(|e| Error::Load {
        entry: path.display().to_string(),
        reason: format!("malformed manifest: {e}"),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_entries(&manifest, base)
}

pub fn load_entries(manifest: &Manifest, base: &Path) -> Result<Dataset> {
    let mut images = Vec::new();
    for (idx, meta) in manifest.images.iter().enumerate() {
        if !meta.within_range {
            continue;
        }
        let name = format!("image {idx} ({})", meta.path.display());
        let fail = |reason: String| Error::Load {
            entry: name.clone(),
            reason,
        };
        let image = RawImage::read(&base.join(&meta.path)).map_err(|e| fail(e.to_string()))?;
        if image.width != meta.width || image.height != meta.height {
            return Err(fail(format!(
                "image is {}x{}, manifest says {}x{}",
                image.width, image.height, meta.width, meta.height
            )));
        }
        let check = |what: &str, w: usize, h: usize| {
            if (w, h) != (image.width, image.height) {
                Err(fail(format!(
                    "dimension mismatch: {what} is {w}x{h}, image is {}x{}",
                    image.width, image.height
                )))
            } else {
                Ok(())
            }
        };
        let depth = optional(base, meta.depth.as_deref(), DepthMap::read).map_err(|e| fail(e.to_string()))?;
        if let Some(d) = &depth {
            check("depth map", d.width, d.height)?;
        }
        let absolute_depth =
            optional(base, meta.absolute_depth.as_deref(), DepthMap::read).map_err(|e| fail(e.to_string()))?;
        if let Some(d) = &absolute_depth {
            check("absolute depth map", d.width, d.height)?;
        }
        let mask = optional(base, meta.mask.as_deref(), SegMask::read).map_err(|e| fail(e.to_string()))?;
        if let Some(m) = &mask {
            check("mask", m.width, m.height)?;
        }
        let labels = optional(base, meta.labels.as_deref(), SegMask::read).map_err(|e| fail(e.to_string()))?;
        if let Some(l) = &labels {
            check("label raster", l.width, l.height)?;
        }
        images.push(ImageEntry {
            image_id: idx as u64,
            meta: meta.clone(),
            image,
            depth,
            absolute_depth,
            mask,
            labels,
        });
    }
    Ok(Dataset { images })
}

/// Missing optional files leave the channel absent.
fn optional<T>(base: &Path, rel: Option<&Path>, read: impl Fn(&Path) -> Result<T>) -> Result<Option<T>> {
    match rel {
        Some(rel) => {
            let full = base.join(rel);
            if full.exists() {
                read(&full).map(Some)
            } else {
                Ok(None)
            }
        }
        None => Ok(None),
    }
}

/// Top-left corners `(row, col)` of every window, rows then columns.
pub fn window_origins(width: usize, height: usize, patch_size: usize, stride_fraction: f64) -> Vec<(usize, usize)> {
    if patch_size == 0 || patch_size > width || patch_size > height {
        return Vec::new();
    }
    let stride = ((patch_size as f64 * stride_fraction).floor() as usize).max(1);
    let rows = (height - patch_size) / stride + 1;
    let cols = (width - patch_size) / stride + 1;
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r * stride, c * stride)))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct ExtractOptions {
    pub stride_fraction: f64,
    /// Copy per-pixel depth into each record.
    pub attach_depth: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            stride_fraction: 0.5,
            attach_depth: false,
        }
    }
}

/// Slides a `patch_size` window over the image.
///
/// Patch ids start at `first_id` and increase in window order. Images smaller
/// than the window yield nothing.
pub fn extract_patches(
    entry: &ImageEntry,
    patch_size: usize,
    opts: &ExtractOptions,
    first_id: u64,
) -> Result<Vec<PatchRecord>> {
    if !(opts.stride_fraction > 0.0 && opts.stride_fraction <= 1.0) {
        return Err(Error::arg(format!(
            "stride fraction {} outside (0, 1]",
            opts.stride_fraction
        )));
    }
    let img = &entry.image;
    let half = (patch_size / 2) as i64;
    let records = window_origins(img.width, img.height, patch_size, opts.stride_fraction)
        .into_iter()
        .enumerate()
        .map(|(i, (r, c))| {
            let depth = entry.depth.as_ref().map(|d| d.crop(r, c, patch_size));
            let depth_mean = depth.as_ref().map_or(0.0, |d| {
                (d.iter().map(|&v| f64::from(v)).sum::<f64>() / d.len() as f64) as f32
            });
            PatchRecord {
                patch_id: first_id + i as u64,
                image_id: entry.image_id,
                center_row: r as i64 + half,
                center_col: c as i64 + half,
                patch_size: patch_size as u32,
                depth_pixels: if opts.attach_depth { depth } else { None },
                depth_mean,
                site: entry.meta.site,
                drive: entry.meta.drive,
                pose: entry.meta.pose,
                rsm_count: entry.meta.rsm_count,
                eye: entry.meta.eye,
                filter_class: FilterClass::Unfiltered,
                split: Split::Train,
            }
        })
        .collect();
    Ok(records)
}

/// Which window sizes each eye contributes.
#[derive(Clone, Debug, PartialEq)]
pub struct SizePolicy {
    pub sizes: Vec<usize>,
    /// Extract every size from every image. When false, right-eye images use
    /// the largest size and all others the smallest.
    pub all_sizes: bool,
}

impl SizePolicy {
    pub fn sizes_for(&self, eye: Eye) -> Vec<usize> {
        if self.all_sizes || self.sizes.len() <= 1 {
            return self.sizes.clone();
        }
        let pick = match eye {
            Eye::Right => self.sizes.iter().max(),
            Eye::Left | Eye::Mono => self.sizes.iter().min(),
        };
        pick.into_iter().copied().collect()
    }
}

impl Default for SizePolicy {
    fn default() -> Self {
        Self {
            sizes: vec![128, 256],
            all_sizes: false,
        }
    }
}

/// Builds the patch table for a dataset; ids are dense in (image, size,
/// row, col) order.
pub fn build_patch_table(dataset: &Dataset, sizes: &SizePolicy, opts: &ExtractOptions) -> Result<Vec<PatchRecord>> {
    let mut patches = Vec::new();
    for entry in &dataset.images {
        for size in sizes.sizes_for(entry.meta.eye) {
            let next = patches.len() as u64;
            patches.extend(extract_patches(entry, size, opts, next)?);
        }
    }
    Ok(patches)
}

pub const FEATURE_DIM: usize = 80;
const RESAMPLE: usize = 64;
const BLOCKS: usize = 8;
const ORIENTATION_BINS: usize = 16;

/// Deterministic 80-dim descriptor: 8x8 block-mean intensities followed by
/// a 16-bin magnitude-weighted edge orientation histogram.
///
/// The crop is converted to luma and area-resampled to 64x64 first. Block
/// means are scaled to `[0, 1]`. Orientation is that of the edge tangent,
/// perpendicular to the central-difference gradient, binned over `[0, pi)`;
/// the histogram is L1-normalized unless it is all zero.
pub fn baseline_featurize(crop: &RawImage) -> Result<Vec<f32>> {
    if crop.width == 0 || crop.height == 0 {
        return Err(Error::arg("empty crop"));
    }
    if crop.width != crop.height {
        return Err(Error::arg(format!(
            "crop must be square, got {}x{}",
            crop.width, crop.height
        )));
    }
    Ok(featurize_gray(&crop.to_gray_f32()))
}

pub(crate) fn featurize_gray(gray: &GrayImage) -> Vec<f32> {
    let img = gray.resize_area(RESAMPLE, RESAMPLE);
    let mut out = Vec::with_capacity(FEATURE_DIM);

    let block = RESAMPLE / BLOCKS;
    for br in 0..BLOCKS {
        for bc in 0..BLOCKS {
            let mut sum = 0.0f64;
            for r in br * block..(br + 1) * block {
                for c in bc * block..(bc + 1) * block {
                    sum += f64::from(img.at(r, c));
                }
            }
            out.push((sum / (block * block) as f64 / 255.0) as f32);
        }
    }

    let mut hist = [0.0f64; ORIENTATION_BINS];
    let bin_width = PI / ORIENTATION_BINS as f64;
    for r in 1..RESAMPLE - 1 {
        for c in 1..RESAMPLE - 1 {
            let gx = f64::from(img.at(r, c + 1) - img.at(r, c - 1)) / 2.0;
            let gy = f64::from(img.at(r + 1, c) - img.at(r - 1, c)) / 2.0;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let mut theta = gx.atan2(-gy);
            if theta < 0.0 {
                theta += PI;
            }
            if theta >= PI {
                theta -= PI;
            }
            let bin = ((theta / bin_width) as usize).min(ORIENTATION_BINS - 1);
            hist[bin] += mag;
        }
    }
    let total: f64 = hist.iter().sum();
    out.extend(hist.iter().map(|&h| if total > 0.0 { (h / total) as f32 } else { 0.0 }));
    out
}

/// Featurizes every patch of a dataset, in patch-table order.
pub fn featurize_patches(dataset: &Dataset, patches: &[PatchRecord]) -> Result<EmbeddingSet> {
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, p) in patches.iter().enumerate() {
        by_image.entry(p.image_id).or_default().push(i);
    }
    let mut rows = vec![Vec::new(); patches.len()];
    for (image_id, idxs) in by_image {
        let entry = dataset.image(image_id).ok_or_else(|| {
            Error::arg(format!(
                "patch {} references unknown image {image_id}",
                patches[idxs[0]].patch_id
            ))
        })?;
        let gray = entry.image.to_gray_f32();
        let feats: Vec<(usize, Vec<f32>)> = idxs
            .par_iter()
            .map(|&i| {
                let p = &patches[i];
                let (r, c) = p.origin();
                let size = p.patch_size as usize;
                if r < 0 || c < 0 || r as usize + size > gray.height || c as usize + size > gray.width {
                    return Err(Error::arg(format!("patch {} window outside its image", p.patch_id)));
                }
                Ok((i, featurize_gray(&gray.crop(r as usize, c as usize, size, size))))
            })
            .collect::<Result<_>>()?;
        for (i, f) in feats {
            rows[i] = f;
        }
    }
    EmbeddingSet::new(FEATURE_DIM, rows.concat(), patches.iter().map(|p| p.patch_id).collect())
}
