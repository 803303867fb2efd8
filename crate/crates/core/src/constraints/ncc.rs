//! Zero-normalized cross-correlation template search.

use crate::image::GrayImage;
use crate::{Error, Result};

/// Best template placement: top-left corner and correlation score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NccMatch {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Inclusive range of candidate top-left positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchWindow {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl SearchWindow {
    /// Every position at which a `th x tw` template fits in `scene`.
    pub fn full(scene: &GrayImage, th: usize, tw: usize) -> Option<Self> {
        (th <= scene.height && tw <= scene.width && th > 0 && tw > 0).then(|| Self {
            row_min: 0,
            row_max: scene.height - th,
            col_min: 0,
            col_max: scene.width - tw,
        })
    }

    /// Positions within `radius` of `(row, col)`, clipped to `bounds`.
    pub fn around(row: usize, col: usize, row_radius: usize, col_radius: usize, bounds: &SearchWindow) -> Option<Self> {
        let w = Self {
            row_min: row.saturating_sub(row_radius).max(bounds.row_min),
            row_max: (row + row_radius).min(bounds.row_max),
            col_min: col.saturating_sub(col_radius).max(bounds.col_min),
            col_max: (col + col_radius).min(bounds.col_max),
        };
        (w.row_min <= w.row_max && w.col_min <= w.col_max).then_some(w)
    }
}

/// Prefix sums of values and squared values, `(h+1) x (w+1)`.
#[derive(Clone, Debug)]
struct Integral {
    stride: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(img: &GrayImage) -> Self {
        let stride = img.width + 1;
        let mut sum = vec![0.0; stride * (img.height + 1)];
        let mut sq = vec![0.0; stride * (img.height + 1)];
        for r in 0..img.height {
            let (mut row_sum, mut row_sq) = (0.0f64, 0.0f64);
            for c in 0..img.width {
                let v = f64::from(img.at(r, c));
                row_sum += v;
                row_sq += v * v;
                let idx = (r + 1) * stride + c + 1;
                sum[idx] = sum[idx - stride] + row_sum;
                sq[idx] = sq[idx - stride] + row_sq;
            }
        }
        Self { stride, sum, sq }
    }

    fn window(&self, row: usize, col: usize, h: usize, w: usize) -> (f64, f64) {
        let s = self.stride;
        let (a, b, c, d) = (
            row * s + col,
            row * s + col + w,
            (row + h) * s + col,
            (row + h) * s + col + w,
        );
        (
            self.sum[d] - self.sum[b] - self.sum[c] + self.sum[a],
            self.sq[d] - self.sq[b] - self.sq[c] + self.sq[a],
        )
    }
}

/// Zero-mean template with its norm.
struct Prepared {
    width: usize,
    height: usize,
    centered: Vec<f32>,
    norm: f64,
}

impl Prepared {
    fn new(t: &GrayImage) -> Self {
        let n = t.data.len() as f64;
        let mean = t.data.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let centered: Vec<f32> = t.data.iter().map(|&v| (f64::from(v) - mean) as f32).collect();
        let norm = centered.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        Self {
            width: t.width,
            height: t.height,
            centered,
            norm,
        }
    }

    fn is_flat(&self) -> bool {
        self.norm <= 1e-6 * (self.centered.len() as f64).sqrt()
    }

    fn score(&self, scene: &GrayImage, stats: &Integral, row: usize, col: usize) -> f64 {
        let n = (self.width * self.height) as f64;
        let (s, q) = stats.window(row, col, self.height, self.width);
        let var = q - s * s / n;
        if var <= 1e-9 * n || self.is_flat() {
            return 0.0;
        }
        let mut num = 0.0f64;
        for (i, trow) in self.centered.chunks_exact(self.width).enumerate() {
            let start = (row + i) * scene.width + col;
            let srow = &scene.data[start..start + self.width];
            let mut acc = [0.0f32; 8];
            let mut tc = trow.chunks_exact(8);
            let mut sc = srow.chunks_exact(8);
            for (a, b) in (&mut tc).zip(&mut sc) {
                for k in 0..8 {
                    acc[k] += a[k] * b[k];
                }
            }
            let mut row_sum: f32 = acc.iter().sum();
            for (a, b) in tc.remainder().iter().zip(sc.remainder()) {
                row_sum += a * b;
            }
            num += f64::from(row_sum);
        }
        (num / (self.norm * var.sqrt())).clamp(-1.0, 1.0)
    }

    /// Exhaustive scan; the first position in raster order wins ties.
    fn scan(&self, scene: &GrayImage, stats: &Integral, window: &SearchWindow) -> NccMatch {
        let mut best = NccMatch {
            row: window.row_min,
            col: window.col_min,
            score: f64::NEG_INFINITY,
        };
        for r in window.row_min..=window.row_max {
            for c in window.col_min..=window.col_max {
                let s = self.score(scene, stats, r, c);
                if s > best.score {
                    best = NccMatch {
                        row: r,
                        col: c,
                        score: s,
                    };
                }
            }
        }
        best
    }

    /// Up to `n` best positions, each at least `spacing` apart (Chebyshev).
    fn top_peaks(
        &self,
        scene: &GrayImage,
        stats: &Integral,
        window: &SearchWindow,
        n: usize,
        spacing: usize,
    ) -> Vec<NccMatch> {
        let mut all = Vec::new();
        for r in window.row_min..=window.row_max {
            for c in window.col_min..=window.col_max {
                all.push(NccMatch {
                    row: r,
                    col: c,
                    score: self.score(scene, stats, r, c),
                });
            }
        }
        // stable sort keeps raster order among equal scores
        all.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut peaks: Vec<NccMatch> = Vec::new();
        for m in all {
            if peaks.len() == n {
                break;
            }
            if peaks
                .iter()
                .all(|p| p.row.abs_diff(m.row) > spacing || p.col.abs_diff(m.col) > spacing)
            {
                peaks.push(m);
            }
        }
        peaks
    }
}

/// Scales `template` by `scale` (area averaging) and finds its best
/// placement anywhere in `scene`.
///
/// Scores lie in `[-1, 1]`; a flat template or flat scene window scores 0.
pub fn ncc_match(template: &GrayImage, scene: &GrayImage, scale: f64) -> Result<NccMatch> {
    let scaled = scale_template(template, scale)?;
    let window = SearchWindow::full(scene, scaled.height, scaled.width).ok_or_else(|| {
        Error::arg(format!(
            "scaled template {}x{} does not fit in scene {}x{}",
            scaled.width, scaled.height, scene.width, scene.height
        ))
    })?;
    ncc_search(&scaled, scene, &window)
}

/// Exhaustive search restricted to `window`.
pub fn ncc_search(template: &GrayImage, scene: &GrayImage, window: &SearchWindow) -> Result<NccMatch> {
    let full = SearchWindow::full(scene, template.height, template.width)
        .ok_or_else(|| Error::arg("template does not fit in scene"))?;
    if window.row_max > full.row_max
        || window.col_max > full.col_max
        || window.row_min > window.row_max
        || window.col_min > window.col_max
    {
        return Err(Error::arg("search window outside valid placements"));
    }
    let prepared = Prepared::new(template);
    let stats = Integral::new(scene);
    Ok(prepared.scan(scene, &stats, window))
}

/// Resamples a template by `scale`, rounding the target size.
pub fn scale_template(template: &GrayImage, scale: f64) -> Result<GrayImage> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::arg(format!("invalid template scale {scale}")));
    }
    let w = (template.width as f64 * scale).round() as usize;
    let h = (template.height as f64 * scale).round() as usize;
    if w == 0 || h == 0 {
        return Err(Error::arg("template vanishes after scaling"));
    }
    Ok(template.resize_area(w, h))
}

/// Block-mean reduction by an integer factor; trailing partial blocks are
/// dropped.
pub fn downsample(img: &GrayImage, factor: usize) -> GrayImage {
    if factor <= 1 {
        return img.clone();
    }
    let (w, h) = (img.width / factor, img.height / factor);
    img.crop(0, 0, h * factor, w * factor).resize_area(w, h)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PyramidOptions {
    /// Coarsest reduction factor; a power of two.
    pub max_factor: usize,
    /// The coarse template keeps at least this many pixels per side.
    pub min_template_side: usize,
    /// Refinement radius (pixels at each finer level).
    pub refine_radius: usize,
    /// Coarse peaks carried into refinement.
    pub candidates: usize,
}

impl Default for PyramidOptions {
    fn default() -> Self {
        Self {
            max_factor: 4,
            min_template_side: 12,
            refine_radius: 2,
            candidates: 3,
        }
    }
}

/// Scene reduced by powers of two, with integral images per level.
pub struct Pyramid {
    levels: Vec<(usize, GrayImage, Integral)>,
}

impl Pyramid {
    pub fn new(scene: &GrayImage, max_factor: usize) -> Self {
        let mut levels = Vec::new();
        let mut factor = 1;
        while factor <= max_factor.max(1) {
            let img = downsample(scene, factor);
            if img.width == 0 || img.height == 0 {
                break;
            }
            let stats = Integral::new(&img);
            levels.push((factor, img, stats));
            factor *= 2;
        }
        Self { levels }
    }

    pub fn base(&self) -> &GrayImage {
        &self.levels[0].1
    }

    /// Exhaustive full-resolution scan of `window`, which must hold valid
    /// placements.
    pub fn scan_base(&self, template: &GrayImage, window: &SearchWindow) -> NccMatch {
        let (_, img, stats) = &self.levels[0];
        Prepared::new(template).scan(img, stats, window)
    }

    /// Coarse-to-fine search for `template` within `window` (full-resolution
    /// positions).
    ///
    /// The coarsest usable level is scanned exhaustively; its best peaks are
    /// refined level by level in small neighborhoods and the best full
    /// resolution score wins.
    pub fn search(&self, template: &GrayImage, window: &SearchWindow, opts: &PyramidOptions) -> Result<NccMatch> {
        let base = self.base();
        let full = SearchWindow::full(base, template.height, template.width)
            .ok_or_else(|| Error::arg("template does not fit in scene"))?;
        if window.row_max > full.row_max || window.col_max > full.col_max {
            return Err(Error::arg("search window outside valid placements"));
        }
        let coarse_idx = self
            .levels
            .iter()
            .rposition(|(f, img, _)| {
                *f <= opts.max_factor
                    && template.width / f >= opts.min_template_side.min(template.width)
                    && template.height / f >= opts.min_template_side.min(template.height)
                    && template.width / f <= img.width
                    && template.height / f <= img.height
            })
            .unwrap_or(0);

        let templates: Vec<Prepared> = self.levels[..=coarse_idx]
            .iter()
            .map(|(f, _, _)| Prepared::new(&downsample(template, *f)))
            .collect();

        let level_window = |idx: usize| -> Option<SearchWindow> {
            let (f, img, _) = &self.levels[idx];
            let t = &templates[idx];
            let lf = SearchWindow::full(img, t.height, t.width)?;
            let w = SearchWindow {
                row_min: window.row_min / f,
                row_max: window.row_max.div_ceil(*f).min(lf.row_max),
                col_min: window.col_min / f,
                col_max: window.col_max.div_ceil(*f).min(lf.col_max),
            };
            (w.row_min <= w.row_max && w.col_min <= w.col_max).then_some(w)
        };

        let (_, cimg, cstats) = &self.levels[coarse_idx];
        let coarse_window = level_window(coarse_idx).ok_or_else(|| Error::arg("empty coarse search window"))?;
        let seeds = if coarse_idx == 0 {
            vec![templates[0].scan(cimg, cstats, &coarse_window)]
        } else {
            templates[coarse_idx].top_peaks(cimg, cstats, &coarse_window, opts.candidates.max(1), opts.refine_radius)
        };

        let mut best: Option<NccMatch> = None;
        for seed in seeds {
            let mut m = seed;
            for idx in (0..coarse_idx).rev() {
                let (_, img, stats) = &self.levels[idx];
                let bounds = if idx == 0 { Some(*window) } else { level_window(idx) };
                let Some(bounds) = bounds else { break };
                let r = opts.refine_radius.max(1);
                let Some(local) = SearchWindow::around(m.row * 2, m.col * 2, r, r, &bounds) else {
                    break;
                };
                m = templates[idx].scan(img, stats, &local);
            }
            if coarse_idx > 0 && !window_contains(window, &m) {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => m.score > b.score || (m.score == b.score && (m.row, m.col) < (b.row, b.col)),
            };
            if better {
                best = Some(m);
            }
        }
        best.ok_or_else(|| Error::arg("pyramid search found no placement"))
    }
}

fn window_contains(w: &SearchWindow, m: &NccMatch) -> bool {
    (w.row_min..=w.row_max).contains(&m.row) && (w.col_min..=w.col_max).contains(&m.col)
}
