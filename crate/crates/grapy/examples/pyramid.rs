//! One pass through the graph pyramid on random features: node sets per
//! level, the attention between nodes, and the fused output.

use grapy::gpm::{pyramid_forward, GpmConfig, MaskSource};
use grapy::labels::argmax_channel;
use grapy::params::{Binder, ParamStore};
use grapy::{Level, Tape, Taxonomy, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> grapy::Result<()> {
    let tax = Taxonomy::builtin("B")?;
    let k = tax.num_classes(Level::Three);
    let config = GpmConfig {
        channels: 8,
        ..GpmConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    config.init_params(&mut store, &mut rng, k)?;

    let (h, w) = (12, 10);
    let features = Tensor::from_fn(&[h, w, config.channels], |_| rng.gen_range(-1.0..1.0));
    // a smooth fake prediction: label depends on the row
    let prediction = Tensor::from_fn(&[h, w, k], |i| {
        let (p, c) = (i / k, i % k);
        if c == (p / w) % k {
            0.9
        } else {
            0.1 / (k - 1) as f64
        }
    });

    let mut tape = Tape::new();
    let mut binder = Binder::new(&store);
    let f = tape.constant(features);
    let out = pyramid_forward(&mut tape, &mut binder, f, &prediction, &tax, &config, MaskSource::Predicted)?;
    for trace in &out.levels {
        let present = trace.nodes.occupancy.iter().filter(|&&o| o).count();
        println!(
            "level {}: {} nodes ({} present), node features {:?}",
            trace.nodes.level.number(),
            trace.nodes.occupancy.len(),
            present,
            tape.shape(trace.nodes.features)
        );
        let last = *trace.reasoning.attention.last().unwrap();
        let a = tape.value(last);
        let n = a.shape()[0];
        let row: Vec<String> = a.data()[..n].iter().map(|v| format!("{v:.3}")).collect();
        println!("  attention row 0 after {} rounds: [{}]", trace.reasoning.attention.len(), row.join(", "));
    }
    println!("fused features {:?}", tape.shape(out.fused));
    let labels = argmax_channel(tape.value(out.prediction));
    println!("predicted label histogram {:?}", labels.histogram());
    Ok(())
}
