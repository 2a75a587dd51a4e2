//! Generates a few synthetic scenes and writes them as PPM images, PGM label
//! maps and colour-coded label renderings.
//!
//! cargo run --example synth_data -- [OUT_DIR]

use std::path::PathBuf;

use grapy::cli::colorize;
use grapy::data::write_sample;
use grapy::synth::{generate, SceneSpec};
use grapy::{Level, Taxonomy};

fn main() -> grapy::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth-samples".into()));
    std::fs::create_dir_all(&out)?;
    let tax = Taxonomy::builtin("B")?;
    let spec = SceneSpec {
        seed: 11,
        height: 64,
        width: 64,
        ..SceneSpec::default()
    };
    spec.validate()?;
    for (i, sample) in generate(&spec, &tax, 4)?.iter().enumerate() {
        write_sample(&out.join(format!("{i}.ppm")), &out.join(format!("{i}.pgm")), sample)?;
        std::fs::write(out.join(format!("{i}-labels.ppm")), colorize(&sample.labels))?;
        let parts = tax.coarsen(&sample.labels, Level::Two)?;
        std::fs::write(out.join(format!("{i}-parts.ppm")), colorize(&parts))?;
        let hist = sample.labels.histogram();
        let named: Vec<String> = tax
            .fine_labels()
            .iter()
            .zip(&hist)
            .filter(|(_, &n)| n > 0)
            .map(|(name, n)| format!("{name}={n}"))
            .collect();
        println!("scene {i}: occluded={} {}", sample.occluded, named.join(" "));
    }
    println!("wrote to {}", out.display());
    Ok(())
}
