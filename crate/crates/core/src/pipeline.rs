//! Iterative constrained clustering with metric learning.
//!
//! Each round projects the standardized features through the current
//! embedder, whitens them, clusters with the active constraints, and then
//! trains the embedder on the resulting pseudo-labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{pcc_kmeans, ClusterConfig, IndexedConstraints};
use crate::constraints::{ConstraintConfig, LrConfig, RsmConfig, SimilarityConfig};
use crate::embed::pca::fit_pca_whiten_rows;
use crate::embed::{train_epoch, Embedder, Standardizer, TanhModel, TrainConfig};
use crate::eval::{db_index, homogeneity_report, nmi, Gallery, Metrics};
use crate::formats;
use crate::image::{GrayImage, RawImage};
use crate::ingest::Dataset;
use crate::model::{ClusterModel, ConstraintSet, EmbeddingSet, LinkSource, MetricModel, PatchRecord, Split, Transform};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub margin: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub per_cluster: usize,
    pub epochs_per_round: usize,
    /// Embedder output width; the input width when unset.
    pub out_dim: Option<usize>,
    /// Hidden width of a one-layer tanh embedder; affine when unset.
    pub hidden: Option<usize>,
    pub semi_hard: bool,
    pub batches_per_epoch: Option<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            lr: 1e-4,
            weight_decay: 1e-5,
            per_cluster: 4,
            epochs_per_round: 5,
            out_dim: None,
            hidden: None,
            semi_hard: true,
            batches_per_epoch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    pub max_rounds: usize,
    pub nmi_convergence: f64,
    pub lambda: f64,
    pub similarity: SimilarityConfig,
    pub lr_matching: LrConfig,
    pub rsm_matching: RsmConfig,
    pub metric: MetricConfig,
    /// Whitened width fed to clustering; half the embedder width when unset
    /// (capped at 256).
    pub pca_dim: Option<usize>,
    pub l2_normalize: bool,
    pub seed: u64,
    pub constraint_sources: Vec<LinkSource>,
    pub max_iters: usize,
    pub n_init: usize,
    pub precision_k: usize,
    pub homogeneity_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 150,
            max_rounds: 20,
            nmi_convergence: 0.95,
            lambda: 1.0,
            similarity: SimilarityConfig::default(),
            lr_matching: LrConfig::default(),
            rsm_matching: RsmConfig::default(),
            metric: MetricConfig::default(),
            pca_dim: None,
            l2_normalize: true,
            seed: 0,
            constraint_sources: vec![LinkSource::Neighbor, LinkSource::Lr, LinkSource::Rsm],
            max_iters: 100,
            n_init: 1,
            precision_k: 10,
            homogeneity_threshold: 0.8,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.metric;
        let positive = self.k > 0
            && self.max_rounds > 0
            && self.lambda >= 0.0
            && m.margin > 0.0
            && m.lr > 0.0
            && m.weight_decay >= 0.0
            && m.per_cluster >= 2
            && self.max_iters > 0
            && self.n_init > 0
            && self.precision_k > 0;
        if !positive {
            return Err(Error::arg("pipeline settings must be positive"));
        }
        if !(self.nmi_convergence > 0.0 && self.nmi_convergence <= 1.0) {
            return Err(Error::arg(format!(
                "nmi_convergence {} outside (0, 1]",
                self.nmi_convergence
            )));
        }
        if m.out_dim.is_some_and(|d| d < 2) {
            return Err(Error::arg("embedder output width must be at least 2"));
        }
        Ok(())
    }

    /// Constraint generation settings implied by this configuration.
    pub fn constraint_config(&self) -> ConstraintConfig {
        ConstraintConfig {
            similarity: self.similarity.clone(),
            lr: self.lr_matching.clone(),
            rsm: self.rsm_matching.clone(),
            sources: self.constraint_sources.clone(),
        }
    }

    fn embed_dim(&self, in_dim: usize) -> usize {
        self.metric.out_dim.unwrap_or(in_dim)
    }

    fn whitened_dim(&self, embed_dim: usize, n: usize) -> usize {
        let d = self
            .pca_dim
            .unwrap_or(if embed_dim > 512 { 256 } else { (embed_dim / 2).max(1) });
        d.min(embed_dim).min(n.saturating_sub(1)).max(1)
    }
}

/// One row of the run history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub seed: u64,
    pub objective: f64,
    pub db_index: f64,
    pub nmi_vs_previous: Option<f64>,
    /// Mean loss over the last training epoch after this round's clustering.
    pub triplet_loss: Option<f64>,
    pub iterations: usize,
    pub rank_deficient: bool,
}

#[derive(Clone, Debug)]
pub struct DccmlResult {
    pub cluster: ClusterModel,
    /// Embedder that produced the selected clustering.
    pub embedder: Embedder,
    pub standardizer: Standardizer,
    pub transform: Transform,
    /// Whitened features of the selected round, row-major.
    pub embedding: Vec<f64>,
    pub dim: usize,
    pub history: Vec<RoundRecord>,
    pub converged: bool,
    /// 1-based round whose clustering is returned.
    pub selected_round: usize,
    pub constraints: ConstraintSet,
    /// Assignments and whitened features of every round.
    pub rounds: Vec<RoundState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundState {
    pub assignments: Vec<u32>,
    pub embedding: Vec<f32>,
}

impl DccmlResult {
    pub fn metric_model(&self) -> Option<&MetricModel> {
        match &self.embedder {
            Embedder::Affine(m) => Some(m),
            Embedder::Tanh(_) => None,
        }
    }
}

/// Clustering-space values pass through `f32` so that recomputing the
/// index from persisted embeddings gives the same number.
fn quantize(rows: &[f64]) -> Vec<f64> {
    rows.iter().map(|&v| f64::from(v as f32)).collect()
}

fn new_embedder(in_dim: usize, cfg: &PipelineConfig, rng: &mut ChaCha8Rng) -> Result<Embedder> {
    let out = cfg.embed_dim(in_dim);
    let m = &cfg.metric;
    Ok(match m.hidden {
        None => {
            let mut model = MetricModel::identity(in_dim, out)?;
            model.margin = m.margin;
            model.learning_rate = m.lr;
            model.weight_decay = m.weight_decay;
            Embedder::Affine(model)
        }
        Some(h) => {
            let mut model = TanhModel::new(in_dim, h, out, rng)?;
            model.margin = m.margin;
            model.learning_rate = m.lr;
            model.weight_decay = m.weight_decay;
            Embedder::Tanh(model)
        }
    })
}

struct Round {
    cluster: ClusterModel,
    embedder: Embedder,
    transform: Transform,
    embedding: Vec<f64>,
}

/// Runs the alternating loop on `features` (one row per patch id).
///
/// Rounds stop when consecutive assignments reach `nmi_convergence`. When
/// `max_rounds` passes first, the round with the lowest Davies-Bouldin index
/// is returned and `converged` is false.
pub fn run_dccml(features: &EmbeddingSet, constraints: &ConstraintSet, cfg: &PipelineConfig) -> Result<DccmlResult> {
    cfg.validate()?;
    let n = features.n_patches();
    let raw = features.to_f64();
    let standardizer = Standardizer::fit(&raw, features.dim).with_unit_norm();
    let x = standardizer.apply(&raw);
    let active = constraints.restrict_sources(&cfg.constraint_sources);
    let indexed = IndexedConstraints::from_set(&active, &features.patch_ids);

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(2);
    let mut embedder = new_embedder(features.dim, cfg, &mut init_rng)?;
    let wdim = cfg.whitened_dim(embedder.out_dim(), n);
    let train = TrainConfig {
        per_cluster: cfg.metric.per_cluster,
        batches_per_epoch: cfg.metric.batches_per_epoch,
        semi_hard: cfg.metric.semi_hard,
    };

    let mut history: Vec<RoundRecord> = Vec::new();
    let mut best: Option<(f64, usize, Round)> = None;
    let mut last: Option<Round> = None;
    let mut converged = false;
    let mut states: Vec<RoundState> = Vec::new();

    for round in 1..=cfg.max_rounds {
        let seed = cfg.seed.wrapping_add(round as u64);
        let fail = |e: Error| Error::Round {
            round,
            source: Box::new(e),
        };
        let z = embedder.project_rows(&x);
        let (transform, y, report) =
            fit_pca_whiten_rows(&z, embedder.out_dim(), wdim, cfg.l2_normalize).map_err(fail)?;
        let y = quantize(&y);
        let cluster = pcc_kmeans(
            &y,
            wdim,
            &indexed,
            &ClusterConfig {
                k: cfg.k,
                lambda: cfg.lambda,
                max_iters: cfg.max_iters,
                seed,
                n_init: cfg.n_init,
            },
        )
        .map_err(fail)?;
        let db = db_index(&y, wdim, &cluster.assignments).map_err(fail)?;
        let nmi_prev = match &last {
            Some(prev) => Some(nmi(&prev.cluster.assignments, &cluster.assignments).map_err(fail)?),
            None => None,
        };
        history.push(RoundRecord {
            round,
            seed,
            objective: cluster.objective,
            db_index: db,
            nmi_vs_previous: nmi_prev,
            triplet_loss: None,
            iterations: cluster.iterations_run,
            rank_deficient: report.rank_deficient(),
        });
        states.push(RoundState {
            assignments: cluster.assignments.clone(),
            embedding: y.iter().map(|&v| v as f32).collect(),
        });
        let current = Round {
            cluster,
            embedder: embedder.clone(),
            transform,
            embedding: y,
        };
        if nmi_prev.is_some_and(|v| v >= cfg.nmi_convergence) {
            converged = true;
            last = Some(current);
            break;
        }
        let is_best = best.as_ref().is_none_or(|(b, _, _)| db < *b);
        if round < cfg.max_rounds && cfg.metric.epochs_per_round > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let mut loss = None;
            for _ in 0..cfg.metric.epochs_per_round {
                let stats =
                    train_epoch(&mut embedder, &x, &current.cluster.assignments, &train, &mut rng).map_err(fail)?;
                loss = Some(stats.mean_loss);
            }
            if !embedder.is_finite() {
                return Err(fail(Error::Numeric("embedder parameters diverged".into())));
            }
            history.last_mut().expect("pushed above").triplet_loss = loss;
        }
        if is_best {
            best = Some((db, round, current.clone_round()));
        }
        last = Some(current);
    }

    let (selected_round, chosen) = if converged {
        (history.len(), last.expect("at least one round"))
    } else {
        let (_, r, round) = best.expect("at least one round");
        (r, round)
    };
    Ok(DccmlResult {
        dim: wdim,
        cluster: chosen.cluster,
        embedder: chosen.embedder,
        standardizer,
        transform: chosen.transform,
        embedding: chosen.embedding,
        history,
        converged,
        selected_round,
        constraints: active,
        rounds: states,
    })
}

impl Round {
    fn clone_round(&self) -> Round {
        Round {
            cluster: self.cluster.clone(),
            embedder: self.embedder.clone(),
            transform: self.transform.clone(),
            embedding: self.embedding.clone(),
        }
    }
}

/// One clustering without constraints or training on the same features.
pub fn run_baseline(features: &EmbeddingSet, cfg: &PipelineConfig) -> Result<DccmlResult> {
    let cfg = PipelineConfig {
        constraint_sources: Vec::new(),
        max_rounds: 1,
        ..cfg.clone()
    };
    run_dccml(features, &ConstraintSet::default(), &cfg)
}

/// Per-patch information needed for evaluation.
#[derive(Clone, Debug, Default)]
pub struct EvalContext {
    /// Category per row, when known.
    pub truth: Option<Vec<u32>>,
    /// `(site, drive)` per row.
    pub location: Vec<(i64, i64)>,
    /// Rows used as retrieval gallery and queries.
    pub gallery: Vec<usize>,
}

impl EvalContext {
    /// Gallery rows are the test-split patches.
    pub fn new(patches: &[PatchRecord], truth: Option<Vec<u32>>) -> Self {
        Self {
            truth,
            location: patches.iter().map(|p| (p.site, p.drive)).collect(),
            gallery: patches
                .iter()
                .enumerate()
                .filter(|(_, p)| p.split == Split::Test)
                .map(|(i, _)| i)
                .collect(),
        }
    }
}

/// Davies-Bouldin in the clustering space plus the truth-based scores
/// available in `ctx`.
pub fn evaluate(result: &DccmlResult, patch_ids: &[u64], ctx: &EvalContext, cfg: &PipelineConfig) -> Result<Metrics> {
    let assignments = &result.cluster.assignments;
    let db = db_index(&result.embedding, result.dim, assignments)?;
    let (mut nmi_truth, mut precision, mut homogeneous) = (None, None, None);
    if let Some(truth) = &ctx.truth {
        nmi_truth = Some(nmi(assignments, truth)?);
        homogeneous = Some(homogeneity_report(assignments, truth, cfg.homogeneity_threshold)?.homogeneous);
        if !ctx.gallery.is_empty() {
            precision = Some(gallery_precision(result, patch_ids, ctx, truth, cfg.precision_k));
        }
    }
    Ok(Metrics {
        db_index: db,
        nmi_vs_truth: nmi_truth,
        precision_at_10_mean: precision,
        homogeneous_clusters: homogeneous,
        k: result.cluster.k,
        n_patches: assignments.len(),
    })
}

fn gallery_precision(result: &DccmlResult, patch_ids: &[u64], ctx: &EvalContext, truth: &[u32], k: usize) -> f64 {
    let d = result.dim;
    let x: Vec<f64> = ctx
        .gallery
        .iter()
        .flat_map(|&i| result.embedding[i * d..(i + 1) * d].iter().copied())
        .collect();
    let ids: Vec<u64> = ctx.gallery.iter().map(|&i| patch_ids[i]).collect();
    let location: Vec<(i64, i64)> = ctx.gallery.iter().map(|&i| ctx.location[i]).collect();
    let labels: Vec<u32> = ctx.gallery.iter().map(|&i| truth[i]).collect();
    let gallery = Gallery {
        x: &x,
        dim: d,
        patch_ids: &ids,
        location: &location,
        labels: &labels,
    };
    let queries: Vec<usize> = (0..ids.len()).collect();
    gallery.mean_precision(&queries, k).0
}

/// A named subset of constraint sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub sources: Vec<LinkSource>,
}

impl Variant {
    pub fn new(sources: &[LinkSource]) -> Self {
        let name = if sources.is_empty() {
            "none".to_string()
        } else {
            sources.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("+")
        };
        Self {
            name,
            sources: sources.to_vec(),
        }
    }

    /// none, Neighbor, LR, RSM, Neighbor+LR and all three.
    pub fn standard() -> Vec<Variant> {
        use LinkSource::*;
        [
            &[][..],
            &[Neighbor],
            &[Lr],
            &[Rsm],
            &[Neighbor, Lr],
            &[Neighbor, Lr, Rsm],
        ]
        .iter()
        .map(|s| Variant::new(s))
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub db_index: Option<f64>,
    pub homogeneous_clusters: Option<usize>,
    pub precision_at_10_mean: Option<f64>,
    pub nmi_vs_truth: Option<f64>,
    pub rounds: usize,
    pub converged: bool,
    pub error: Option<String>,
}

/// Runs the loop once per variant with the same seed. Failures land in the
/// row's `error` field.
pub fn run_ablation(
    features: &EmbeddingSet,
    constraints: &ConstraintSet,
    ctx: &EvalContext,
    cfg: &PipelineConfig,
    variants: &[Variant],
) -> Vec<AblationRow> {
    variants
        .iter()
        .map(|v| {
            let vcfg = PipelineConfig {
                constraint_sources: v.sources.clone(),
                ..cfg.clone()
            };
            let outcome = run_dccml(features, constraints, &vcfg)
                .and_then(|r| evaluate(&r, &features.patch_ids, ctx, &vcfg).map(|m| (r, m)));
            match outcome {
                Ok((r, m)) => AblationRow {
                    variant: v.name.clone(),
                    db_index: Some(m.db_index),
                    homogeneous_clusters: m.homogeneous_clusters,
                    precision_at_10_mean: m.precision_at_10_mean,
                    nmi_vs_truth: m.nmi_vs_truth,
                    rounds: r.history.len(),
                    converged: r.converged,
                    error: None,
                },
                Err(e) => AblationRow {
                    variant: v.name.clone(),
                    db_index: None,
                    homogeneous_clusters: None,
                    precision_at_10_mean: None,
                    nmi_vs_truth: None,
                    rounds: 0,
                    converged: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Tab-separated ablation table with a header row.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut out =
        String::from("variant\tdb_index\thomogeneous\tprecision_at_10\tnmi_vs_truth\trounds\tconverged\terror\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            opt(r.db_index),
            r.homogeneous_clusters.map_or("-".to_string(), |h| h.to_string()),
            opt(r.precision_at_10_mean),
            opt(r.nmi_vs_truth),
            r.rounds,
            r.converged,
            r.error.as_deref().unwrap_or("-"),
        ));
    }
    out
}

pub const MONTAGE_TILE: usize = 64;

/// Tiles up to `n_samples` seeded-random members of `cluster_id` into a
/// near-square RGB grid, each patch area-resized to [`MONTAGE_TILE`].
pub fn emit_cluster_montage(
    dataset: &Dataset,
    patches: &[PatchRecord],
    assignments: &[u32],
    cluster_id: u32,
    n_samples: usize,
    seed: u64,
) -> Result<RawImage> {
    if patches.len() != assignments.len() {
        return Err(Error::arg("patches and assignments disagree in length"));
    }
    let members: Vec<usize> = (0..patches.len()).filter(|&i| assignments[i] == cluster_id).collect();
    if members.is_empty() {
        return Err(Error::arg(format!("cluster {cluster_id} has no members")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = n_samples.min(members.len());
    let mut chosen: Vec<usize> = members.choose_multiple(&mut rng, take).copied().collect();
    chosen.sort_unstable();
    let cols = (take as f64).sqrt().ceil() as usize;
    let rows = take.div_ceil(cols);
    let t = MONTAGE_TILE;
    let tiles: Vec<GrayImage> = chosen
        .par_iter()
        .map(|&i| {
            let p = &patches[i];
            let entry = dataset
                .image(p.image_id)
                .ok_or_else(|| Error::arg(format!("patch {} references unknown image", p.patch_id)))?;
            let (r, c) = p.origin();
            let s = p.patch_size as usize;
            if r < 0 || c < 0 {
                return Err(Error::arg(format!("patch {} window leaves its image", p.patch_id)));
            }
            let crop = entry.image.crop(r as usize, c as usize, s, s)?;
            Ok(crop.to_gray_f32().resize_area(t, t))
        })
        .collect::<Result<_>>()?;
    let (w, h) = (cols * t, rows * t);
    let mut pixels = vec![0u8; w * h * 3];
    for (n, tile) in tiles.iter().enumerate() {
        let (gr, gc) = (n / cols, n % cols);
        for y in 0..t {
            for x in 0..t {
                let v = tile.at(y, x).round().clamp(0.0, 255.0) as u8;
                let o = ((gr * t + y) * w + gc * t + x) * 3;
                pixels[o..o + 3].fill(v);
            }
        }
    }
    RawImage::new(w, h, 3, pixels)
}

/// Files written by [`write_run`], relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundFiles {
    pub round: usize,
    pub assignments: PathBuf,
    pub embedding: PathBuf,
}

/// The `run.json` document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: PipelineConfig,
    pub converged: bool,
    pub selected_round: usize,
    pub history: Vec<RoundRecord>,
    pub rounds: Vec<RoundFiles>,
    /// Active links per source, after toggles.
    pub constraint_counts: BTreeMap<String, usize>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, PathBuf>,
}

/// Writes `assignments.csv`, `metrics.json`, `run.json`, the model files
/// and per-round artifacts under `out_dir`.
pub fn write_run(
    out_dir: &Path,
    patch_ids: &[u64],
    result: &DccmlResult,
    metrics: &Metrics,
    cfg: &PipelineConfig,
    inputs: BTreeMap<String, String>,
) -> Result<RunManifest> {
    fs::create_dir_all(out_dir)?;
    let n = patch_ids.len();
    if result.cluster.assignments.len() != n {
        return Err(Error::arg("patch ids and assignments disagree in length"));
    }
    let rounds_dir = out_dir.join("rounds");
    fs::create_dir_all(&rounds_dir)?;
    let mut rounds = Vec::new();
    for (i, state) in result.rounds.iter().enumerate() {
        let round = i + 1;
        let assignments = PathBuf::from(format!("rounds/round_{round:02}_assignments.csv"));
        let embedding = PathBuf::from(format!("rounds/round_{round:02}_embedding.temb"));
        formats::write_assignments(&out_dir.join(&assignments), patch_ids, &state.assignments)?;
        let emb = EmbeddingSet::new(result.dim, state.embedding.clone(), patch_ids.to_vec())?;
        formats::write_embeddings(&out_dir.join(&embedding), &emb)?;
        rounds.push(RoundFiles {
            round,
            assignments,
            embedding,
        });
    }

    let mut outputs = BTreeMap::new();
    let mut put = |key: &str, file: &str| {
        outputs.insert(key.to_string(), PathBuf::from(file));
        out_dir.join(file)
    };
    formats::write_assignments(
        &put("assignments", "assignments.csv"),
        patch_ids,
        &result.cluster.assignments,
    )?;
    fs::write(
        put("metrics", "metrics.json"),
        serde_json::to_string_pretty(metrics)? + "\n",
    )?;
    formats::write_cluster_model(&put("cluster_model", "cluster.tcm"), &result.cluster)?;
    let emb = EmbeddingSet::new(
        result.dim,
        result.embedding.iter().map(|&v| v as f32).collect(),
        patch_ids.to_vec(),
    )?;
    formats::write_embeddings(&put("embedding", "embedding.temb"), &emb)?;
    match &result.embedder {
        Embedder::Affine(m) => formats::write_metric(&put("metric_model", "metric.tmet"), m)?,
        Embedder::Tanh(m) => fs::write(
            put("metric_model", "metric.json"),
            serde_json::to_string_pretty(m)? + "\n",
        )?,
    }
    fs::write(
        put("standardizer", "standardizer.json"),
        serde_json::to_string_pretty(&result.standardizer)? + "\n",
    )?;
    fs::write(
        put("whitening", "whitening.json"),
        serde_json::to_string_pretty(&result.transform)? + "\n",
    )?;
    formats::write_constraints(&put("constraints", "constraints.csv"), &result.constraints)?;

    let constraint_counts = [LinkSource::Neighbor, LinkSource::Lr, LinkSource::Rsm]
        .iter()
        .map(|s| (s.as_str().to_string(), result.constraints.count_source(*s)))
        .chain(std::iter::once((
            "cannot".to_string(),
            result.constraints.cannot_links.len(),
        )))
        .collect();
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        converged: result.converged,
        selected_round: result.selected_round,
        history: result.history.clone(),
        rounds,
        constraint_counts,
        inputs,
        outputs,
    };
    fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}
