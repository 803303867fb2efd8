use std::collections::{BTreeMap, HashMap};

use terraclust::constraints::generate_constraints;
use terraclust::eval::{db_index, split_train_test};
use terraclust::formats::{read_assignments, read_embeddings};
use terraclust::ingest::{build_patch_table, featurize_patches, Dataset, ExtractOptions, SizePolicy};
use terraclust::pipeline::{
    emit_cluster_montage, evaluate, run_dccml, write_run, EvalContext, PipelineConfig, MONTAGE_TILE,
};
use terraclust::synth::{generate_nuisance_dataset, truth_labels, NuisanceConfig, SceneConfig};
use terraclust::{ConstraintSet, EmbeddingSet, LinkSource, PatchRecord};

struct Fixture {
    dataset: Dataset,
    patches: Vec<PatchRecord>,
    features: EmbeddingSet,
    constraints: ConstraintSet,
}

fn fixture() -> Fixture {
    let dataset = generate_nuisance_dataset(&NuisanceConfig {
        scene: SceneConfig {
            image_size: 512,
            margin: 64,
            ..SceneConfig::default()
        },
        n_scenes: 2,
        rsm_max_shift: 20,
        ..NuisanceConfig::default()
    })
    .unwrap();
    let mut patches = build_patch_table(&dataset, &SizePolicy::default(), &ExtractOptions::default()).unwrap();
    split_train_test(&mut patches, &dataset.dims(), 0.6).unwrap();
    let features = featurize_patches(&dataset, &patches).unwrap();
    let constraints = generate_constraints(
        &dataset,
        &patches,
        &PipelineConfig::default().constraint_config(),
        &HashMap::new(),
    )
    .unwrap()
    .constraints;
    Fixture {
        dataset,
        patches,
        features,
        constraints,
    }
}

fn small_config() -> PipelineConfig {
    PipelineConfig {
        k: 5,
        max_rounds: 3,
        seed: 2,
        ..PipelineConfig::default()
    }
}

#[test]
fn fixture_has_every_source() {
    let f = fixture();
    for s in [LinkSource::Neighbor, LinkSource::Lr, LinkSource::Rsm] {
        assert!(f.constraints.count_source(s) > 0, "{s} links missing");
    }
}

#[test]
fn history_matches_persisted_rounds() {
    let f = fixture();
    let cfg = small_config();
    let r = run_dccml(&f.features, &f.constraints, &cfg).unwrap();
    let ctx = EvalContext::new(&f.patches, Some(truth_labels(&f.dataset, &f.patches).unwrap()));
    let m = evaluate(&r, &f.features.patch_ids, &ctx, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_run(dir.path(), &f.features.patch_ids, &r, &m, &cfg, BTreeMap::new()).unwrap();

    assert_eq!(manifest.rounds.len(), r.history.len());
    for (files, record) in manifest.rounds.iter().zip(&r.history) {
        let emb = read_embeddings(&dir.path().join(&files.embedding)).unwrap();
        let assigned: Vec<u32> = read_assignments(&dir.path().join(&files.assignments))
            .unwrap()
            .into_iter()
            .map(|(_, c)| c)
            .collect();
        let db = db_index(&emb.to_f64(), emb.dim, &assigned).unwrap();
        assert_eq!(db, record.db_index, "round {}", record.round);
    }
    let selected = &r.history[r.selected_round - 1];
    assert_eq!(selected.db_index, m.db_index);
}

#[test]
fn disabled_sources_contribute_nothing() {
    let f = fixture();
    let cfg = PipelineConfig {
        constraint_sources: vec![LinkSource::Neighbor],
        max_rounds: 1,
        ..small_config()
    };
    let r = run_dccml(&f.features, &f.constraints, &cfg).unwrap();
    assert_eq!(r.constraints.count_source(LinkSource::Lr), 0);
    assert_eq!(r.constraints.count_source(LinkSource::Rsm), 0);
    assert!(r.constraints.hard_links.is_empty());
    assert_eq!(r.constraints.soft_links.len(), f.constraints.soft_links.len());
}

#[test]
fn single_round_trains_nothing() {
    let f = fixture();
    let cfg = PipelineConfig {
        max_rounds: 1,
        ..small_config()
    };
    let r = run_dccml(&f.features, &f.constraints, &cfg).unwrap();
    assert_eq!(r.history.len(), 1);
    assert!(r.history[0].triplet_loss.is_none());
    let model = r.metric_model().unwrap();
    let identity = terraclust::MetricModel::identity(model.in_dim, model.out_dim).unwrap();
    assert_eq!(model.weights, identity.weights);
    assert_eq!(r.selected_round, 1);
}

#[test]
fn hard_links_hold_in_every_round() {
    let f = fixture();
    let r = run_dccml(&f.features, &f.constraints, &small_config()).unwrap();
    let index: HashMap<u64, usize> = f
        .features
        .patch_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    for state in &r.rounds {
        for l in &r.constraints.hard_links {
            assert_eq!(state.assignments[index[&l.a]], state.assignments[index[&l.b]]);
        }
    }
}

#[test]
fn montage_of_four_is_two_by_two() {
    let f = fixture();
    let assignments: Vec<u32> = (0..f.patches.len() as u32).map(|i| i % 3).collect();
    let img = emit_cluster_montage(&f.dataset, &f.patches, &assignments, 1, 4, 0).unwrap();
    assert_eq!(
        (img.width, img.height, img.channels),
        (2 * MONTAGE_TILE, 2 * MONTAGE_TILE, 3)
    );
    assert!(emit_cluster_montage(&f.dataset, &f.patches, &assignments, 7, 4, 0).is_err());
}
