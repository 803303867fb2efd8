use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use terraclust::cluster::{pcc_kmeans, ClusterConfig, IndexedConstraints};
use terraclust::constraints::{generate_constraints, Localization};
use terraclust::embed::{fit_pca_whiten, PcaReport};
use terraclust::eval::{db_index, homogeneity_report, nmi, split_train_test, Gallery, Metrics};
use terraclust::filter::{classify_patches, FilterConfig};
use terraclust::formats;
use terraclust::ingest::{build_patch_table, featurize_patches, load_manifest, Dataset, ExtractOptions, SizePolicy};
use terraclust::model::{ConstraintSet, EmbeddingSet, FilterClass, LinkSource, PatchRecord, Split};
use terraclust::pipeline::{
    emit_cluster_montage, evaluate, format_ablation, run_ablation, run_dccml, write_run, EvalContext, PipelineConfig,
    Variant,
};
use terraclust::synth::{generate_nuisance_dataset, truth_labels, write_dataset, NuisanceConfig};

#[derive(Parser)]
#[command(
    name = "terraclust",
    version,
    about = "Constrained clustering of terrain image patches"
)]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Extract patches and baseline features.
    Extract(ExtractArgs),
    /// Classify patches from masks and depth.
    Filter(FilterArgs),
    /// Generate pairwise constraints.
    Constraints(ConstraintArgs),
    /// Constrained k-means on a feature file.
    Cluster(ClusterArgs),
    /// Full iterative pipeline.
    Run(RunArgs),
    /// Compare constraint-source subsets.
    Ablate(AblateArgs),
    /// Score a clustering.
    Eval(EvalArgs),
    /// Tile cluster members into an image.
    Montage(MontageArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 1024)]
    size: usize,
    #[arg(long, default_value_t = 0.25)]
    brightness_sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
}

#[derive(Args, Clone)]
struct PatchArgs {
    /// Window sides in pixels, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [128usize, 256])]
    patch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    stride: f64,
    /// Extract every size from every image.
    #[arg(long)]
    all_sizes: bool,
}

impl PatchArgs {
    fn extract(&self, dataset: &Dataset) -> Result<Vec<PatchRecord>> {
        let sizes = SizePolicy {
            sizes: self.patch_sizes.clone(),
            all_sizes: self.all_sizes,
        };
        let opts = ExtractOptions {
            stride_fraction: self.stride,
            attach_depth: false,
        };
        Ok(build_patch_table(dataset, &sizes, &opts)?)
    }
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    patches: PatchArgs,
    /// Fraction of each image width assigned to the training split.
    #[arg(long, default_value_t = 0.6)]
    train_fraction: f64,
    #[arg(long, default_value = "patches.csv")]
    out: PathBuf,
    #[arg(long, default_value = "features.temb")]
    features: PathBuf,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Classes to keep; all classes when omitted.
    #[arg(long, value_delimiter = ',')]
    keep: Vec<String>,
    /// Mean relative depth above which a patch counts as distant when no
    /// absolute depth is available.
    #[arg(long)]
    relative_depth_cutoff: Option<f64>,
    #[arg(long, default_value = "filtered.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ConstraintArgs {
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    sigma_spatial: Option<f64>,
    #[arg(long)]
    sigma_depth: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Sources to generate (neighbor, lr, rsm).
    #[arg(long, value_delimiter = ',')]
    sources: Vec<String>,
    /// Precomputed stereo localizations replacing template matching.
    #[arg(long)]
    lr_matches: Option<PathBuf>,
    #[arg(long, default_value = "constraints.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    constraints: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Whiten to this many components before clustering.
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Model and assignment outputs.
    #[arg(long, value_delimiter = ',', default_values_t = ["model.tcm".to_string(), "assignments.csv".to_string()])]
    out: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    patches: PatchArgs,
    #[arg(long, default_value_t = 0.6)]
    train_fraction: f64,
    /// Classes to keep after filtering; no filtering when omitted.
    #[arg(long, value_delimiter = ',')]
    keep: Vec<String>,
    /// Per-patch category labels (`patch_id,label`); taken from the
    /// manifest's label maps when omitted.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Precomputed stereo localizations replacing template matching.
    #[arg(long)]
    lr_matches: Option<PathBuf>,
    /// Use these constraints instead of generating them.
    #[arg(long)]
    constraints: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_rounds: Option<usize>,
    /// Constraint sources to use (neighbor, lr, rsm, or none).
    #[arg(long, value_delimiter = ',')]
    sources: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Variants as `+`-joined source lists, e.g. `none,neighbor,lr+rsm`;
    /// the standard six when omitted.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    assignments: PathBuf,
    /// `patch_id,label` category labels.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Patch table, needed for retrieval (site, drive and split).
    #[arg(long)]
    patches: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = ["db".to_string(), "nmi".to_string(), "p@10".to_string(), "homogeneity".to_string()])]
    metrics: Vec<String>,
    #[arg(long, default_value = "metrics.json")]
    out: PathBuf,
}

#[derive(Args)]
struct MontageArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    assignments: PathBuf,
    #[arg(long)]
    cluster: u32,
    #[arg(long, default_value_t = 300)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<PipelineConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Synth(a) => synth(a, cli.seed, &out),
        Command::Extract(a) => extract(a, &out),
        Command::Filter(a) => filter(a, &out),
        Command::Constraints(a) => constraints(a, &mut cfg, &out),
        Command::Cluster(a) => cluster(a, &mut cfg, &out),
        Command::Run(a) => run(a, cfg, &out),
        Command::Ablate(a) => ablate(a, cfg, &out),
        Command::Eval(a) => eval(a, &cfg, &out),
        Command::Montage(a) => montage(a, &cfg, &out),
    }
}

fn in_dir(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn parse_sources(names: &[String]) -> Result<Vec<LinkSource>> {
    let mut out = Vec::new();
    for n in names {
        for part in n.split('+') {
            match part.trim() {
                "" | "none" => {}
                s => out.push(s.parse::<LinkSource>()?),
            }
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn parse_classes(names: &[String]) -> Result<Vec<FilterClass>> {
    names.iter().map(|n| Ok(n.parse::<FilterClass>()?)).collect()
}

fn synth(a: SynthArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = NuisanceConfig::default();
    cfg.scene.n_classes = a.classes;
    cfg.scene.image_size = a.size;
    cfg.scene.brightness_sigma = a.brightness_sigma;
    cfg.scene.noise_sigma = a.noise_sigma;
    cfg.n_scenes = a.scenes;
    cfg.rsm_max_shift = cfg.rsm_max_shift.min((a.size as i64 / 10).max(0));
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let dataset = generate_nuisance_dataset(&cfg)?;
    let manifest = write_dataset(&dataset, out)?;
    println!("wrote {} images; manifest {}", dataset.images.len(), manifest.display());
    Ok(())
}

fn extract(a: ExtractArgs, out: &Path) -> Result<()> {
    let dataset = load_manifest(&a.manifest)?;
    let mut patches = a.patches.extract(&dataset)?;
    split_train_test(&mut patches, &dataset.dims(), a.train_fraction)?;
    let features = featurize_patches(&dataset, &patches)?;
    formats::write_patches(&in_dir(out, &a.out), &patches)?;
    formats::write_embeddings(&in_dir(out, &a.features), &features)?;
    println!("{} patches, {} features each", patches.len(), features.dim);
    Ok(())
}

fn filter(a: FilterArgs, out: &Path) -> Result<()> {
    let dataset = load_manifest(&a.manifest)?;
    let mut patches = formats::read_patches(&a.patches)?;
    let cfg = FilterConfig {
        relative_depth_cutoff: a.relative_depth_cutoff,
        ..FilterConfig::default()
    };
    classify_patches(&dataset, &mut patches, &cfg)?;
    let keep = parse_classes(&a.keep)?;
    let total = patches.len();
    if !keep.is_empty() {
        patches.retain(|p| keep.contains(&p.filter_class));
    }
    formats::write_patches(&in_dir(out, &a.out), &patches)?;
    println!("kept {} of {total} patches", patches.len());
    Ok(())
}

fn load_matches(path: &Option<PathBuf>) -> Result<HashMap<(u64, u64), Localization>> {
    Ok(match path {
        Some(p) => formats::read_lr_matches(p)?,
        None => HashMap::new(),
    })
}

fn constraints(a: ConstraintArgs, cfg: &mut PipelineConfig, out: &Path) -> Result<()> {
    let dataset = load_manifest(&a.manifest)?;
    let patches = formats::read_patches(&a.patches)?;
    let s = &mut cfg.similarity;
    s.sigma_spatial = a.sigma_spatial.unwrap_or(s.sigma_spatial);
    s.sigma_depth = a.sigma_depth.unwrap_or(s.sigma_depth);
    s.alpha = a.alpha.unwrap_or(s.alpha);
    s.beta = a.beta.unwrap_or(s.beta);
    s.threshold = a.threshold.unwrap_or(s.threshold);
    if !a.sources.is_empty() {
        cfg.constraint_sources = parse_sources(&a.sources)?;
    }
    let report = generate_constraints(
        &dataset,
        &patches,
        &cfg.constraint_config(),
        &load_matches(&a.lr_matches)?,
    )?;
    formats::write_constraints(&in_dir(out, &a.out), &report.constraints)?;
    let matches: Vec<_> = report.localizations.iter().map(|(&k, &v)| (k, v)).collect();
    formats::write_lr_matches(&out.join("lr_matches.csv"), &matches)?;
    fs::write(
        out.join("skips.json"),
        serde_json::to_string_pretty(&report.skips)? + "\n",
    )?;
    let c = &report.constraints;
    println!(
        "neighbor {} lr {} rsm {} skipped pairs {}",
        c.count_source(LinkSource::Neighbor),
        c.count_source(LinkSource::Lr),
        c.count_source(LinkSource::Rsm),
        report.skips.len()
    );
    Ok(())
}

fn cluster(a: ClusterArgs, cfg: &mut PipelineConfig, out: &Path) -> Result<()> {
    let features = formats::read_embeddings(&a.features)?;
    let set = match &a.constraints {
        Some(p) => formats::read_constraints(p)?,
        None => ConstraintSet::default(),
    };
    let (x, dim) = match a.pca_dim {
        Some(d) => {
            let (emb, report): (EmbeddingSet, PcaReport) = fit_pca_whiten(&features, d, false)?;
            if report.rank_deficient() {
                eprintln!("warning: features have rank {} below {d}", report.rank);
            }
            (emb.to_f64(), d)
        }
        None => (features.to_f64(), features.dim),
    };
    let ccfg = ClusterConfig {
        k: a.k.unwrap_or(cfg.k),
        lambda: a.lambda.unwrap_or(cfg.lambda),
        max_iters: cfg.max_iters,
        seed: cfg.seed,
        n_init: cfg.n_init,
    };
    let model = pcc_kmeans(&x, dim, &IndexedConstraints::from_set(&set, &features.patch_ids), &ccfg)?;
    let [model_path, assign_path] = a.out.as_slice() else {
        bail!("--out expects MODEL,ASSIGNMENTS");
    };
    formats::write_cluster_model(&in_dir(out, Path::new(model_path)), &model)?;
    formats::write_assignments(
        &in_dir(out, Path::new(assign_path)),
        &features.patch_ids,
        &model.assignments,
    )?;
    println!(
        "objective {:.6} after {} iterations",
        model.objective, model.iterations_run
    );
    Ok(())
}

struct Prepared {
    patches: Vec<PatchRecord>,
    features: EmbeddingSet,
    constraints: ConstraintSet,
    ctx: EvalContext,
    inputs: BTreeMap<String, String>,
}

fn prepare(a: &DataArgs, cfg: &mut PipelineConfig, out: &Path) -> Result<Prepared> {
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(r) = a.max_rounds {
        cfg.max_rounds = r;
    }
    if !a.sources.is_empty() {
        cfg.constraint_sources = parse_sources(&a.sources)?;
    }
    let dataset = load_manifest(&a.manifest)?;
    let mut patches = a.patches.extract(&dataset)?;
    let keep = parse_classes(&a.keep)?;
    if !keep.is_empty() {
        classify_patches(&dataset, &mut patches, &FilterConfig::default())?;
        patches.retain(|p| keep.contains(&p.filter_class));
    }
    split_train_test(&mut patches, &dataset.dims(), a.train_fraction)?;
    let features = featurize_patches(&dataset, &patches)?;
    let truth = match &a.truth {
        Some(p) => {
            let labels = formats::read_labels(p)?;
            Some(
                patches
                    .iter()
                    .map(|q| {
                        labels
                            .get(&q.patch_id)
                            .copied()
                            .ok_or_else(|| anyhow!("no label for patch {}", q.patch_id))
                    })
                    .collect::<Result<Vec<u32>>>()?,
            )
        }
        None if dataset.images.iter().all(|e| e.labels.is_some()) && !dataset.images.is_empty() => {
            Some(truth_labels(&dataset, &patches)?)
        }
        None => None,
    };
    let constraints = match &a.constraints {
        Some(p) => formats::read_constraints(p)?,
        None => {
            let report = generate_constraints(
                &dataset,
                &patches,
                &cfg.constraint_config(),
                &load_matches(&a.lr_matches)?,
            )?;
            formats::write_constraints(&out.join("generated_constraints.csv"), &report.constraints)?;
            report.constraints
        }
    };
    formats::write_patches(&out.join("patches.csv"), &patches)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("manifest".to_string(), a.manifest.display().to_string());
    if let Some(p) = &a.constraints {
        inputs.insert("constraints".to_string(), p.display().to_string());
    }
    if let Some(p) = &a.truth {
        inputs.insert("truth".to_string(), p.display().to_string());
    }
    if let Some(p) = &a.lr_matches {
        inputs.insert("lr_matches".to_string(), p.display().to_string());
    }
    let ctx = EvalContext::new(&patches, truth);
    Ok(Prepared {
        patches,
        features,
        constraints,
        ctx,
        inputs,
    })
}

fn run(a: RunArgs, mut cfg: PipelineConfig, out: &Path) -> Result<()> {
    let p = prepare(&a.data, &mut cfg, out)?;
    let result = run_dccml(&p.features, &p.constraints, &cfg)?;
    let metrics = evaluate(&result, &p.features.patch_ids, &p.ctx, &cfg)?;
    write_run(out, &p.features.patch_ids, &result, &metrics, &cfg, p.inputs)?;
    println!(
        "{} patches, {} rounds ({}), selected round {}, db {:.4}",
        p.patches.len(),
        result.history.len(),
        if result.converged { "converged" } else { "unconverged" },
        result.selected_round,
        metrics.db_index
    );
    Ok(())
}

fn ablate(a: AblateArgs, mut cfg: PipelineConfig, out: &Path) -> Result<()> {
    let variants = if a.variants.is_empty() {
        Variant::standard()
    } else {
        a.variants
            .iter()
            .map(|v| Ok(Variant::new(&parse_sources(std::slice::from_ref(v))?)))
            .collect::<Result<_>>()?
    };
    let p = prepare(&a.data, &mut cfg, out)?;
    let rows = run_ablation(&p.features, &p.constraints, &p.ctx, &cfg, &variants);
    let table = format_ablation(&rows);
    fs::write(out.join("ablation.tsv"), &table)?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    print!("{table}");
    Ok(())
}

fn eval(a: EvalArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let features = formats::read_embeddings(&a.features)?;
    let assigned: HashMap<u64, u32> = formats::read_assignments(&a.assignments)?.into_iter().collect();
    let assignments: Vec<u32> = features
        .patch_ids
        .iter()
        .map(|id| {
            assigned
                .get(id)
                .copied()
                .ok_or_else(|| anyhow!("no assignment for patch {id}"))
        })
        .collect::<Result<_>>()?;
    let truth = match &a.truth {
        Some(p) => {
            let labels = formats::read_labels(p)?;
            Some(
                features
                    .patch_ids
                    .iter()
                    .map(|id| {
                        labels
                            .get(id)
                            .copied()
                            .ok_or_else(|| anyhow!("no label for patch {id}"))
                    })
                    .collect::<Result<Vec<u32>>>()?,
            )
        }
        None => None,
    };
    let want = |m: &str| a.metrics.iter().any(|x| x.eq_ignore_ascii_case(m));
    let x = features.to_f64();
    let k = assignments.iter().collect::<std::collections::BTreeSet<_>>().len();
    let mut metrics = Metrics {
        db_index: f64::NAN,
        nmi_vs_truth: None,
        precision_at_10_mean: None,
        homogeneous_clusters: None,
        k,
        n_patches: assignments.len(),
    };
    if want("db") {
        metrics.db_index = db_index(&x, features.dim, &assignments)?;
    }
    if let Some(truth) = &truth {
        if want("nmi") {
            metrics.nmi_vs_truth = Some(nmi(&assignments, truth)?);
        }
        if want("homogeneity") {
            metrics.homogeneous_clusters =
                Some(homogeneity_report(&assignments, truth, cfg.homogeneity_threshold)?.homogeneous);
        }
        if want("p@10") {
            let path = a.patches.as_ref().ok_or_else(|| anyhow!("p@10 needs --patches"))?;
            let patches: HashMap<u64, PatchRecord> = formats::read_patches(path)?
                .into_iter()
                .map(|p| (p.patch_id, p))
                .collect();
            let rows: Vec<usize> = (0..features.n_patches())
                .filter(|&i| {
                    patches
                        .get(&features.patch_ids[i])
                        .is_some_and(|p| p.split == Split::Test)
                })
                .collect();
            let d = features.dim;
            let gx: Vec<f64> = rows
                .iter()
                .flat_map(|&i| x[i * d..(i + 1) * d].iter().copied())
                .collect();
            let ids: Vec<u64> = rows.iter().map(|&i| features.patch_ids[i]).collect();
            let location: Vec<(i64, i64)> = ids.iter().map(|id| (patches[id].site, patches[id].drive)).collect();
            let labels: Vec<u32> = rows.iter().map(|&i| truth[i]).collect();
            let gallery = Gallery {
                x: &gx,
                dim: d,
                patch_ids: &ids,
                location: &location,
                labels: &labels,
            };
            let queries: Vec<usize> = (0..ids.len()).collect();
            let (mean, short) = gallery.mean_precision(&queries, cfg.precision_k);
            if short > 0 {
                eprintln!(
                    "warning: {short} queries had fewer than {} eligible neighbors",
                    cfg.precision_k
                );
            }
            metrics.precision_at_10_mean = Some(mean);
        }
    }
    let text = serde_json::to_string_pretty(&metrics)? + "\n";
    fs::write(in_dir(out, &a.out), &text)?;
    print!("{text}");
    Ok(())
}

fn montage(a: MontageArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let dataset = load_manifest(&a.manifest)?;
    let patches = formats::read_patches(&a.patches)?;
    let assigned: HashMap<u64, u32> = formats::read_assignments(&a.assignments)?.into_iter().collect();
    let (kept, assignments): (Vec<PatchRecord>, Vec<u32>) = patches
        .into_iter()
        .filter_map(|p| assigned.get(&p.patch_id).map(|&c| (p, c)))
        .unzip();
    let image = emit_cluster_montage(&dataset, &kept, &assignments, a.cluster, a.samples, cfg.seed)?;
    let path = in_dir(
        out,
        &a.out
            .unwrap_or_else(|| PathBuf::from(format!("cluster_{:03}.ppm", a.cluster))),
    );
    image.write(&path)?;
    println!("{}x{} montage at {}", image.width, image.height, path.display());
    Ok(())
}
