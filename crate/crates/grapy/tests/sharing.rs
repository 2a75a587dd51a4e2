//! Which parameters a mutual-learning step may touch, and what the shared
//! core guarantees across branches.

use grapy::data::{generate_dataset, Dataset, DatasetSpec, Sample};
use grapy::gpm::{GpmConfig, MaskSource};
use grapy::labels::LabelMap;
use grapy::model::{ModelConfig, Phase};
use grapy::mutual::{audit_sharing, MlModel};
use grapy::optim::Sgd;
use grapy::synth::SceneSpec;
use grapy::taxonomy::{builtin_taxonomies, Level, Taxonomy};

fn config() -> ModelConfig {
    ModelConfig {
        hidden: vec![6],
        gpm: GpmConfig {
            channels: 6,
            ..GpmConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn datasets() -> Vec<Dataset> {
    let scene = SceneSpec {
        height: 24,
        width: 24,
        ..SceneSpec::default()
    };
    builtin_taxonomies()
        .into_iter()
        .map(|taxonomy| {
            let spec = DatasetSpec { taxonomy, train: 3, test: 0 };
            generate_dataset(&spec, &scene).unwrap().0
        })
        .collect()
}

fn taxonomies(data: &[Dataset]) -> Vec<Taxonomy> {
    data.iter().map(|d| d.taxonomy.clone()).collect()
}

#[test]
fn steps_only_touch_the_shared_core_and_their_own_branch() {
    let data = datasets();
    let mut model = MlModel::new(config(), taxonomies(&data), true, 4).unwrap();
    let mut opt = Sgd::new(0.9);
    for d in 1..=3 {
        let batch: Vec<&Sample> = data[d - 1].samples.iter().collect();
        for _ in 0..2 {
            let before = model.params.clone();
            model.ml_step(&mut opt, d, &batch, 0.05, Phase::Full, false).unwrap();
            for (name, t) in model.params.iter() {
                let moved = before.get(name).unwrap() != t;
                match model.branch_of(name) {
                    Some(b) if b != d => assert!(!moved, "step on {d} moved {name}"),
                    _ => {}
                }
            }
            let shared_moved = model
                .shared_names()
                .iter()
                .filter(|n| before.get(n).unwrap() != model.params.get(n).unwrap())
                .count();
            assert!(shared_moved > 0);
        }
    }
}

#[test]
fn pretrain_steps_leave_the_pyramid_alone() {
    let data = datasets();
    let mut model = MlModel::new(config(), taxonomies(&data), true, 4).unwrap();
    let before = model.params.clone();
    let batch: Vec<&Sample> = data[1].samples.iter().collect();
    model.ml_step(&mut Sgd::new(0.9), 2, &batch, 0.05, Phase::Pretrain, false).unwrap();
    for (name, t) in model.params.iter() {
        if name.contains("gpm.") {
            assert_eq!(before.get(name).unwrap(), t, "{name}");
        }
    }
}

#[test]
fn audit_passes_on_shared_and_separate_backbones() {
    let data = datasets();
    for share in [true, false] {
        let model = MlModel::new(config(), taxonomies(&data), share, 8).unwrap();
        let checks = audit_sharing(&model, &data, 0.05).unwrap();
        assert_eq!(checks.len(), if share { 4 } else { 3 });
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}

#[test]
fn forced_masks_give_equal_coarse_nodes_only_with_a_shared_backbone() {
    let data = datasets();
    let sample = &data[0].samples[0];
    let tax = &data[0].taxonomy;
    let (h, w) = sample.labels.size();
    let coarse = [
        tax.coarsen(&sample.labels, Level::One).unwrap(),
        tax.coarsen(&sample.labels, Level::Two).unwrap(),
    ];
    let nodes = |model: &MlModel, d: usize| {
        let k3 = model.taxonomies[d - 1].num_classes(Level::Three);
        let masks = [coarse[0].clone(), coarse[1].clone(), LabelMap::filled(h, w, k3, 0)];
        model.node_features(d, &sample.image, MaskSource::Fixed(&masks)).unwrap()
    };
    let shared = MlModel::new(config(), taxonomies(&data), true, 2).unwrap();
    let reference = nodes(&shared, 1);
    for d in 2..=3 {
        let other = nodes(&shared, d);
        for l in 0..2 {
            assert_eq!(other[l], reference[l], "branch {d}");
        }
        // level 3 has a different number of categories per branch
        assert_ne!(other[2].1.shape()[0], 0);
    }

    let separate = MlModel::new(config(), taxonomies(&data), false, 2).unwrap();
    assert_ne!(nodes(&separate, 1)[0], nodes(&separate, 2)[0]);
}
