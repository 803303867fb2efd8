//! Labeled synthetic terrain: textured region mosaics with depth, masks,
//! stereo pairs and repeated-pointing pairs.
//!
//! Each class is an oriented sinusoidal grating with its own orientation and
//! frequency. Regions of a square grid receive classes round-robin, shuffled
//! per seed. Nuisances are a per-region brightness factor, per-pixel noise,
//! a smooth phase warp and a smooth illumination field; the two smooth fields
//! make the texture aperiodic so correspondences are unambiguous.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::{DepthMap, GrayImage, RawImage, SegMask};
use crate::ingest::{Dataset, ImageEntry, ImageMeta, Manifest};
use crate::model::{Eye, PatchRecord};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_classes: usize,
    pub image_size: usize,
    /// Regions per side.
    pub grid: usize,
    /// Depth increase from top to bottom.
    pub depth_ramp: f64,
    /// Spacing of per-region depth offsets.
    pub depth_step: f64,
    /// Standard deviation of the per-region brightness factor.
    pub brightness_sigma: f64,
    /// Pixel noise standard deviation as a fraction of 255.
    pub noise_sigma: f64,
    /// Amplitude (radians) of the smooth phase warp.
    pub warp: f64,
    /// Relative amplitude of the smooth illumination field.
    pub illumination: f64,
    /// Extra texture rendered around the image, available to shifted views.
    pub margin: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            image_size: 1024,
            grid: 4,
            depth_ramp: 8.0,
            depth_step: 12.0,
            brightness_sigma: 0.25,
            noise_sigma: 0.05,
            warp: 1.5,
            illumination: 0.15,
            margin: 128,
            seed: 0,
        }
    }
}

/// Grating parameters of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassTexture {
    /// Radians.
    pub orientation: f64,
    /// Cycles per 128 pixels.
    pub frequency: f64,
}

/// Orientations evenly spaced over a half turn; frequencies spread over
/// 2..12 cycles per 128 px, interleaved so that neighboring orientations get
/// distant frequencies.
pub fn class_textures(n_classes: usize) -> Vec<ClassTexture> {
    let order: Vec<usize> = (0..3).flat_map(|r| (r..n_classes).step_by(3)).collect();
    let mut rank = vec![0usize; n_classes];
    for (i, &c) in order.iter().enumerate() {
        rank[c] = i;
    }
    (0..n_classes)
        .map(|c| ClassTexture {
            orientation: c as f64 * PI / n_classes as f64,
            frequency: if n_classes > 1 {
                2.0 + 10.0 * rank[c] as f64 / (n_classes - 1) as f64
            } else {
                2.0
            },
        })
        .collect()
}

/// Image, depth, mask and ground-truth class raster of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthView {
    pub image: RawImage,
    pub depth: DepthMap,
    pub mask: SegMask,
    pub labels: SegMask,
}

#[derive(Clone, Debug)]
struct Region {
    class: usize,
    brightness: f64,
    phase: f64,
    depth_offset: f64,
}

/// A rendered scene on a canvas `margin` pixels larger than the image on
/// every side.
#[derive(Clone, Debug)]
pub struct Scene {
    pub config: SceneConfig,
    side: usize,
    pixels: Vec<u8>,
    depth: Vec<f32>,
    labels: Vec<u8>,
    /// Class of each region, row-major.
    pub region_classes: Vec<usize>,
}

/// Bilinear interpolation of a coarse random grid.
struct SmoothField {
    cell: f64,
    n: usize,
    values: Vec<f64>,
}

impl SmoothField {
    fn new(extent: usize, cell: f64, rng: &mut impl Rng) -> Self {
        let n = (extent as f64 / cell).ceil() as usize + 2;
        Self {
            cell,
            n,
            values: (0..n * n).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let (fy, fx) = (y / self.cell, x / self.cell);
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - iy as f64, fx - ix as f64);
        let v = |r: usize, c: usize| self.values[r.min(self.n - 1) * self.n + c.min(self.n - 1)];
        let top = v(iy, ix) * (1.0 - tx) + v(iy, ix + 1) * tx;
        let bottom = v(iy + 1, ix) * (1.0 - tx) + v(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Renders a scene.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    if cfg.n_classes < 2 {
        return Err(Error::arg("a scene needs at least two classes"));
    }
    if cfg.grid == 0 || cfg.image_size < cfg.grid {
        return Err(Error::arg("grid must be positive and no larger than the image"));
    }
    if !(cfg.brightness_sigma >= 0.0 && cfg.noise_sigma >= 0.0) {
        return Err(Error::arg("nuisance levels must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_regions = cfg.grid * cfg.grid;
    let mut classes: Vec<usize> = (0..n_regions).map(|i| i % cfg.n_classes).collect();
    classes.shuffle(&mut rng);
    let mut offsets: Vec<usize> = (0..n_regions).collect();
    offsets.shuffle(&mut rng);
    let bright = Normal::new(1.0, cfg.brightness_sigma).map_err(|e| Error::arg(e.to_string()))?;
    let regions: Vec<Region> = (0..n_regions)
        .map(|i| Region {
            class: classes[i],
            brightness: bright.sample(&mut rng).clamp(0.3, 1.8),
            phase: rng.random_range(0.0..2.0 * PI),
            depth_offset: offsets[i] as f64 * cfg.depth_step,
        })
        .collect();

    let s = cfg.image_size;
    let m = cfg.margin;
    let side = s + 2 * m;
    let warp = SmoothField::new(side, 96.0, &mut rng);
    let light = SmoothField::new(side, 128.0, &mut rng);
    let textures = class_textures(cfg.n_classes);
    let region_size = s as f64 / cfg.grid as f64;
    let region_of = |yi: f64, xi: f64| -> usize {
        let r = ((yi / region_size).floor().max(0.0) as usize).min(cfg.grid - 1);
        let c = ((xi / region_size).floor().max(0.0) as usize).min(cfg.grid - 1);
        r * cfg.grid + c
    };

    let noise_seed: u64 = rng.random();
    let noise_sd = cfg.noise_sigma * 255.0;
    let rows: Vec<(Vec<u8>, Vec<f32>, Vec<u8>)> = (0..side)
        .into_par_iter()
        .map(|y| {
            let mut row_rng = ChaCha8Rng::seed_from_u64(noise_seed ^ (y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let yi = y as f64 - m as f64;
            let mut px = Vec::with_capacity(side);
            let mut dp = Vec::with_capacity(side);
            let mut lb = Vec::with_capacity(side);
            for x in 0..side {
                let xi = x as f64 - m as f64;
                let reg = &regions[region_of(yi, xi)];
                let tex = textures[reg.class];
                let k = 2.0 * PI * tex.frequency / 128.0;
                let arg = k * (xi * tex.orientation.cos() + yi * tex.orientation.sin())
                    + reg.phase
                    + cfg.warp * warp.at(y as f64, x as f64);
                let shade = 1.0 + cfg.illumination * light.at(y as f64, x as f64);
                let noise: f64 = if noise_sd > 0.0 {
                    noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut row_rng)
                } else {
                    0.0
                };
                let v = reg.brightness * (110.0 + 50.0 * arg.sin()) * shade + noise;
                px.push(v.round().clamp(0.0, 255.0) as u8);
                dp.push((cfg.depth_ramp * yi / s as f64 + reg.depth_offset) as f32);
                lb.push(reg.class as u8);
            }
            (px, dp, lb)
        })
        .collect();
    let mut pixels = Vec::with_capacity(side * side);
    let mut depth = Vec::with_capacity(side * side);
    let mut labels = Vec::with_capacity(side * side);
    for (p, d, l) in rows {
        pixels.extend(p);
        depth.extend(d);
        labels.extend(l);
    }
    Ok(Scene {
        config: cfg.clone(),
        side,
        pixels,
        depth,
        labels,
        region_classes: classes,
    })
}

fn mask_of(labels: &[u8]) -> Vec<u8> {
    labels
        .iter()
        .map(|&c| if c % 2 == 0 { SegMask::ROCK } else { SegMask::SOIL })
        .collect()
}

impl Scene {
    pub fn size(&self) -> usize {
        self.config.image_size
    }

    /// The image-sized window whose top-left corner sits at `(dy, dx)`
    /// relative to the nominal image.
    fn window(&self, dy: i64, dx: i64) -> Result<SynthView> {
        let s = self.size();
        let m = self.config.margin as i64;
        if dy.abs() > m || dx.abs() > m {
            return Err(Error::arg(format!(
                "offset ({dy}, {dx}) exceeds the rendered margin {m}"
            )));
        }
        let (r0, c0) = ((m + dy) as usize, (m + dx) as usize);
        let take = |src: &[u8]| -> Vec<u8> {
            (r0..r0 + s)
                .flat_map(|r| src[r * self.side + c0..r * self.side + c0 + s].iter().copied())
                .collect()
        };
        let depth: Vec<f32> = (r0..r0 + s)
            .flat_map(|r| self.depth[r * self.side + c0..r * self.side + c0 + s].iter().copied())
            .collect();
        let labels = take(&self.labels);
        Ok(SynthView {
            image: RawImage::gray(s, s, take(&self.pixels))?,
            depth: DepthMap::new(s, s, depth)?,
            mask: SegMask::new(s, s, mask_of(&labels))?,
            labels: SegMask::new(s, s, labels)?,
        })
    }

    /// The scene as seen by the reference camera.
    pub fn view(&self) -> SynthView {
        self.window(0, 0).expect("zero offset fits")
    }

    /// Ground-truth class at image coordinates.
    pub fn class_at(&self, row: usize, col: usize) -> u8 {
        let m = self.config.margin;
        self.labels[(row + m) * self.side + col + m]
    }
}

/// Where the narrow view sits inside the wide one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropTruth {
    pub row: usize,
    pub col: usize,
    pub side: usize,
}

#[derive(Clone, Debug)]
pub struct StereoPair {
    pub left: SynthView,
    pub right: SynthView,
    pub truth: CropTruth,
}

fn nearest_upsample<T: Copy>(src: &[T], src_w: usize, row: usize, col: usize, side: usize, out: usize) -> Vec<T> {
    let map: Vec<usize> = (0..out)
        .map(|o| (((o as f64 + 0.5) * side as f64 / out as f64) as usize).min(side - 1))
        .collect();
    let mut v = Vec::with_capacity(out * out);
    for &r in &map {
        for &c in &map {
            v.push(src[(row + r) * src_w + col + c]);
        }
    }
    v
}

/// Left = the scene; right = its central crop of side
/// `round(focal_ratio * size)` enlarged back to full size.
pub fn generate_stereo_pair(scene: &Scene, focal_ratio: f64) -> Result<StereoPair> {
    if !(focal_ratio > 0.0 && focal_ratio <= 1.0) {
        return Err(Error::arg(format!("focal ratio {focal_ratio} outside (0, 1]")));
    }
    let s = scene.size();
    let left = scene.view();
    let side = ((focal_ratio * s as f64).round() as usize).clamp(1, s);
    let origin = (s - side) / 2;
    let crop = left.image.crop(origin, origin, side, side)?.to_gray_f32();
    let enlarged = crop.resize_area(s, s);
    let image = RawImage::gray(
        s,
        s,
        enlarged
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect(),
    )?;
    let labels = nearest_upsample(&left.labels.values, s, origin, origin, side, s);
    let right = SynthView {
        image,
        depth: DepthMap::new(s, s, nearest_upsample(&left.depth.values, s, origin, origin, side, s))?,
        mask: SegMask::new(s, s, mask_of(&labels))?,
        labels: SegMask::new(s, s, labels)?,
    };
    Ok(StereoPair {
        left,
        right,
        truth: CropTruth {
            row: origin,
            col: origin,
            side,
        },
    })
}

#[derive(Clone, Debug)]
pub struct RsmPair {
    pub a: SynthView,
    pub b: SynthView,
    /// Content of `a` at `(r, c)` appears in `b` at `(r + dy, c + dx)`.
    pub shift: (i64, i64),
}

/// `b` is `a` translated by `shift` (newly exposed borders show the
/// surrounding scene) with `brightness_delta` added to every pixel.
pub fn generate_rsm_pair(scene: &Scene, shift: (i64, i64), brightness_delta: f64) -> Result<RsmPair> {
    let s = scene.size() as i64;
    if shift.0.abs() * 4 >= s || shift.1.abs() * 4 >= s {
        return Err(Error::arg("shift must stay below a quarter of the image size"));
    }
    let a = scene.view();
    let mut b = scene.window(-shift.0, -shift.1)?;
    if brightness_delta != 0.0 {
        b.image
            .pixels
            .iter_mut()
            .for_each(|p| *p = (f64::from(*p) + brightness_delta).round().clamp(0.0, 255.0) as u8);
    }
    Ok(RsmPair { a, b, shift })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub scene: SceneConfig,
    pub n_scenes: usize,
    pub focal_ratio: f64,
    /// Largest absolute translation of the repeated view, per axis.
    pub rsm_max_shift: i64,
    /// Largest absolute brightness offset of the repeated view.
    pub rsm_max_brightness: f64,
    pub seed: u64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            n_scenes: 20,
            focal_ratio: 34.0 / 100.0,
            rsm_max_shift: 40,
            rsm_max_brightness: 20.0,
            seed: 7,
        }
    }
}

fn entry(image_id: u64, name: String, key: (i64, i64, Eye), view: SynthView) -> ImageEntry {
    let s = view.image.width;
    let (site, rsm_count, eye) = key;
    let meta = ImageMeta {
        path: PathBuf::from(format!("{name}.pgm")),
        width: s,
        height: view.image.height,
        site,
        drive: 1,
        pose: 1,
        rsm_count,
        eye,
        depth: Some(PathBuf::from(format!("{name}.depth"))),
        absolute_depth: None,
        mask: Some(PathBuf::from(format!("{name}.mask.pgm"))),
        labels: Some(PathBuf::from(format!("{name}.labels.pgm"))),
        within_range: true,
    };
    ImageEntry {
        image_id,
        meta,
        image: view.image,
        depth: Some(view.depth),
        absolute_depth: None,
        mask: Some(view.mask),
        labels: Some(view.labels),
    }
}

/// Scenes with a left view, a right view and a repeated left view each.
///
/// Scene `s` uses site `100 + s`; the left and right views carry rsm count
/// 10 and the repeated view 12.
pub fn generate_nuisance_dataset(cfg: &NuisanceConfig) -> Result<Dataset> {
    let mut meta_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plans: Vec<(u64, (i64, i64), f64)> = (0..cfg.n_scenes)
        .map(|_| {
            let seed: u64 = meta_rng.random();
            let shift = (
                meta_rng.random_range(-cfg.rsm_max_shift..=cfg.rsm_max_shift),
                meta_rng.random_range(-cfg.rsm_max_shift..=cfg.rsm_max_shift),
            );
            let delta = if cfg.rsm_max_brightness > 0.0 {
                meta_rng.random_range(-cfg.rsm_max_brightness..=cfg.rsm_max_brightness)
            } else {
                0.0
            };
            (seed, shift, delta.round())
        })
        .collect();
    let per_scene: Vec<Vec<ImageEntry>> = plans
        .iter()
        .enumerate()
        .map(|(s, &(seed, shift, delta))| {
            let scene = generate_scene(&SceneConfig {
                seed,
                ..cfg.scene.clone()
            })?;
            let stereo = generate_stereo_pair(&scene, cfg.focal_ratio)?;
            let rsm = generate_rsm_pair(&scene, shift, delta)?;
            let site = 100 + s as i64;
            let id = 3 * s as u64;
            Ok(vec![
                entry(id, format!("s{s:03}_left"), (site, 10, Eye::Left), stereo.left),
                entry(id + 1, format!("s{s:03}_right"), (site, 10, Eye::Right), stereo.right),
                entry(id + 2, format!("s{s:03}_repeat"), (site, 12, Eye::Left), rsm.b),
            ])
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        images: per_scene.into_iter().flatten().collect(),
    })
}

/// Writes every channel next to a `manifest.json`, returning its path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    dataset.images.par_iter().try_for_each(|e| -> Result<()> {
        e.image.write(&dir.join(&e.meta.path))?;
        if let (Some(d), Some(p)) = (&e.depth, &e.meta.depth) {
            d.write(&dir.join(p))?;
        }
        if let (Some(m), Some(p)) = (&e.mask, &e.meta.mask) {
            m.write(&dir.join(p))?;
        }
        if let (Some(l), Some(p)) = (&e.labels, &e.meta.labels) {
            l.write(&dir.join(p))?;
        }
        Ok(())
    })?;
    let manifest = Manifest {
        images: dataset.images.iter().map(|e| e.meta.clone()).collect(),
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

/// Ground-truth class at each patch center.
pub fn truth_labels(dataset: &Dataset, patches: &[PatchRecord]) -> Result<Vec<u32>> {
    patches
        .iter()
        .map(|p| {
            let labels = dataset
                .image(p.image_id)
                .and_then(|e| e.labels.as_ref())
                .ok_or_else(|| Error::pre(format!("no ground truth for image {}", p.image_id)))?;
            let (r, c) = (p.center_row, p.center_col);
            if r < 0 || c < 0 || r as usize >= labels.height || c as usize >= labels.width {
                return Err(Error::arg(format!("patch {} center outside its image", p.patch_id)));
            }
            Ok(u32::from(labels.values[r as usize * labels.width + c as usize]))
        })
        .collect()
}

/// Grayscale copy of a view as floats (for tests and diagnostics).
pub fn gray_of(view: &SynthView) -> GrayImage {
    view.image.to_gray_f32()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig {
            image_size: 256,
            margin: 32,
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn textures_are_distinct_and_interleaved() {
        let t = class_textures(8);
        assert_eq!(t[0].frequency, 2.0);
        assert!((t[7].orientation - 7.0 * PI / 8.0).abs() < 1e-12);
        let mut f: Vec<f64> = t.iter().map(|x| x.frequency).collect();
        f.sort_by(f64::total_cmp);
        f.dedup();
        assert_eq!(f.len(), 8);
        assert!((f[7] - 12.0).abs() < 1e-12);
        let two = class_textures(2);
        assert_eq!((two[0].frequency, two[1].frequency), (2.0, 12.0));
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = generate_scene(&small(3)).unwrap().view();
        let b = generate_scene(&small(3)).unwrap().view();
        assert_eq!(a, b);
        assert_ne!(a.image, generate_scene(&small(4)).unwrap().view().image);
    }

    #[test]
    fn every_class_appears_and_mask_follows_parity() {
        let scene = generate_scene(&small(1)).unwrap();
        let mut seen = scene.region_classes.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        let v = scene.view();
        for (l, m) in v.labels.values.iter().zip(&v.mask.values) {
            assert_eq!(*m, if l % 2 == 0 { SegMask::ROCK } else { SegMask::SOIL });
        }
    }

    #[test]
    fn unit_focal_ratio_gives_identical_views() {
        let scene = generate_scene(&small(2)).unwrap();
        let pair = generate_stereo_pair(&scene, 1.0).unwrap();
        assert_eq!(pair.left.image, pair.right.image);
        assert_eq!(
            pair.truth,
            CropTruth {
                row: 0,
                col: 0,
                side: 256
            }
        );
    }

    #[test]
    fn zero_shift_repeat_is_identical() {
        let scene = generate_scene(&small(2)).unwrap();
        let pair = generate_rsm_pair(&scene, (0, 0), 0.0).unwrap();
        assert_eq!(pair.a.image, pair.b.image);
        let moved = generate_rsm_pair(&scene, (10, -6), 0.0).unwrap();
        let (a, b) = (&moved.a.image, &moved.b.image);
        assert_eq!(b.pixels[(50 + 10) * 256 + (70 - 6)], a.pixels[50 * 256 + 70]);
        assert!(generate_rsm_pair(&scene, (64, 0), 0.0).is_err());
    }

    #[test]
    fn clean_same_region_patches_match_up_to_phase() {
        let cfg = SceneConfig {
            brightness_sigma: 0.0,
            noise_sigma: 0.0,
            warp: 0.0,
            illumination: 0.0,
            ..small(5)
        };
        let scene = generate_scene(&cfg).unwrap();
        let g = scene.view().image.to_gray_f32();
        let t = class_textures(8)[scene.region_classes[0]];
        let k = 2.0 * PI * t.frequency / 128.0;
        let grating = |r: usize, c: usize, phase: f64| {
            (110.0 + 50.0 * (k * (c as f64 * t.orientation.cos() + r as f64 * t.orientation.sin()) + phase).sin())
                .round()
        };
        // both windows lie in region (0, 0); one phase explains both exactly
        let windows = [(0usize, 0usize), (40, 30)];
        let fits = |phase: f64| {
            windows.iter().all(|&(r0, c0)| {
                (r0..r0 + 16)
                    .all(|r| (c0..c0 + 16).all(|c| (f64::from(g.at(r, c)) - grating(r, c, phase)).abs() <= 1.0))
            })
        };
        assert!((0..6284).any(|i| fits(i as f64 * 1e-3)));
    }
}
