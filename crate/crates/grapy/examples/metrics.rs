//! Confusion matrices, mIoU and mean accuracy on hand-made label maps,
//! including the per-level view of a fine prediction.

use grapy::metrics::ConfusionMatrix;
use grapy::{LabelMap, Level, Taxonomy};

fn main() -> grapy::Result<()> {
    let tax = Taxonomy::builtin("A")?;
    let gt = LabelMap::new(2, 6, 7, vec![0, 1, 2, 2, 3, 4, 0, 5, 5, 6, 6, 0])?;
    // arms swapped, one leg pixel lost to background
    let pred = LabelMap::new(2, 6, 7, vec![0, 1, 2, 2, 4, 3, 0, 5, 0, 6, 6, 0])?;
    for level in Level::ALL {
        let mut cm = ConfusionMatrix::new(tax.num_classes(level));
        cm.accumulate(&tax.coarsen(&pred, level)?, &tax.coarsen(&gt, level)?)?;
        println!("level {}", level.number());
        print!("{}", cm.report(&tax.class_names(level)));
        println!("mean accuracy without background {:.4}\n", cm.mean_accuracy_from(1)?);
    }
    Ok(())
}
