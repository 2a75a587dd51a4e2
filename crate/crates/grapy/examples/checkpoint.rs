//! Saves a model checkpoint, loads it back and confirms the predictions are
//! bit-for-bit the same.

use grapy::checkpoint::Checkpoint;
use grapy::model::{ModelConfig, ParserModel};
use grapy::synth::{generate, SceneSpec};
use grapy::Taxonomy;

fn main() -> grapy::Result<()> {
    let tax = Taxonomy::builtin("C")?;
    let model = ParserModel::new(ModelConfig::default(), tax.clone(), 3)?;
    let path = std::env::temp_dir().join("grapy-example.grpy");
    model.to_checkpoint().save(&path)?;
    let ck = Checkpoint::load(&path)?;
    println!("manifest: {}", ck.manifest.trim());
    println!("{} tensors, {} values", ck.params.len(), ck.params.numel());
    for (name, t) in ck.params.iter().take(4) {
        println!("  {name} {:?}", t.shape());
    }

    let loaded = ParserModel::from_checkpoint(&ck, tax.clone())?;
    let image = &generate(&SceneSpec::default(), &tax, 1)?[0].image;
    let (a, b) = (model.predict(image)?, loaded.predict(image)?);
    println!("identical predictions: {}", a.best() == b.best());
    std::fs::remove_file(&path)?;
    Ok(())
}
