//! Trains a single-dataset parser (pretrain, then the full two-branch
//! objective) on a small generated dataset and scores it.
//!
//! cargo run --release --example train_single -- [--no-gpm]

use grapy::data::{generate_dataset, DatasetSpec};
use grapy::metrics::{evaluate, Branch};
use grapy::model::{pretrain_then_train, ModelConfig, ParserModel, TrainConfig};
use grapy::synth::SceneSpec;
use grapy::{Level, Taxonomy};

fn main() -> grapy::Result<()> {
    let use_gpm = !std::env::args().any(|a| a == "--no-gpm");
    let spec = DatasetSpec {
        taxonomy: Taxonomy::builtin("A")?,
        train: 48,
        test: 16,
    };
    let (train, test) = generate_dataset(&spec, &SceneSpec::default())?;
    let config = ModelConfig {
        use_gpm,
        ..ModelConfig::default()
    };
    let mut model = ParserModel::new(config, spec.taxonomy.clone(), 0)?;
    let train_config = TrainConfig {
        lr: 0.2,
        batch_size: 8,
        pretrain_epochs: 6,
        main_epochs: 6,
        decay_epoch: Some(6),
        decay_factor: 0.25,
        ..TrainConfig::default()
    };
    pretrain_then_train(&mut model, &train.samples, &train_config, |r| {
        if r.step % 12 == 0 {
            println!("{}", r.to_line());
        }
    })?;

    let eval = evaluate(&test, 1, |img| model.predict(img))?;
    print!("{}", eval.report(&test.taxonomy));
    let branch = if use_gpm { Branch::Gpm } else { Branch::Main };
    let s = eval.scores(branch, Level::Three).unwrap()?;
    println!("test {} branch: mIoU {:.4}, mean accuracy {:.4}", branch.as_str(), s.miou, s.mean_accuracy);
    Ok(())
}
