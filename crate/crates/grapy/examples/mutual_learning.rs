//! Mutual learning across three datasets with different label sets: a shared
//! backbone and coarse pyramid levels, one fine level and head per dataset.
//! Fine-tunes on dataset A afterwards and audits the parameter sharing.

use grapy::data::{generate_dataset, DatasetSpec};
use grapy::metrics::{evaluate, Branch};
use grapy::model::{ModelConfig, TrainConfig};
use grapy::mutual::{audit_sharing, train_mutual, MlModel, MlTrainConfig};
use grapy::synth::SceneSpec;
use grapy::taxonomy::builtin_taxonomies;
use grapy::Level;

fn main() -> grapy::Result<()> {
    let scene = SceneSpec::default();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (taxonomy, n) in builtin_taxonomies().into_iter().zip([24, 48, 32]) {
        let (a, b) = generate_dataset(&DatasetSpec { taxonomy, train: n, test: 8 }, &scene)?;
        train.push(a);
        test.push(b);
    }
    let taxonomies = train.iter().map(|d| d.taxonomy.clone()).collect();
    let model = MlModel::new(ModelConfig::default(), taxonomies, true, 0)?;
    println!(
        "{} shared tensors, {} / {} / {} per branch",
        model.shared_names().len(),
        model.branch_names(1).len(),
        model.branch_names(2).len(),
        model.branch_names(3).len()
    );

    let config = MlTrainConfig {
        base: TrainConfig {
            lr: 0.2,
            batch_size: 8,
            pretrain_epochs: 3,
            main_epochs: 3,
            decay_epoch: Some(3),
            decay_factor: 0.25,
            ..TrainConfig::default()
        },
        steps_per_epoch: Some(12),
        accumulate: false,
        finetune: Some(1),
        finetune_epochs: 2,
    };
    let outcome = train_mutual(model, &train, &config, |r| {
        if r.step % 9 == 0 {
            println!("{}", r.to_line());
        }
    })?;

    for c in audit_sharing(&outcome.joint, &train, 0.05)? {
        println!("audit {}: {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for (d, ds) in test.iter().enumerate() {
        let eval = evaluate(ds, 1, |img| outcome.joint.predict(d + 1, img))?;
        let s = eval.scores(Branch::Gpm, Level::Three).unwrap()?;
        println!("joint model on {}: mIoU {:.4}", ds.taxonomy.name(), s.miou);
    }
    if let Some(tuned) = &outcome.finetuned {
        let eval = evaluate(&test[0], 1, |img| tuned.predict(1, img))?;
        let s = eval.scores(Branch::Gpm, Level::Three).unwrap()?;
        println!("fine-tuned on A: mIoU {:.4}", s.miou);
    }
    Ok(())
}
