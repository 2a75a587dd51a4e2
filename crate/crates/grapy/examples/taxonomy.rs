//! Label hierarchies: the built-in taxonomies, coarsening a fine label map,
//! and loading a custom taxonomy from its text config.

use grapy::taxonomy::{builtin_taxonomies, Level, Taxonomy};
use grapy::LabelMap;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for tax in builtin_taxonomies() {
        println!(
            "{}: {} fine / {} part / {} coarse labels",
            tax.name(),
            tax.num_classes(Level::Three),
            tax.num_classes(Level::Two),
            tax.num_classes(Level::One)
        );
        for (i, fine) in tax.fine_labels().iter().enumerate() {
            let part = tax.class_names(Level::Two)[tax.ancestor(i, Level::Two).unwrap()];
            let coarse = tax.class_names(Level::One)[tax.ancestor(i, Level::One).unwrap()];
            println!("  {fine:<12} -> {part:<10} -> {coarse}");
        }
    }

    let tax = Taxonomy::builtin("A")?;
    let fine = LabelMap::new(2, 4, 7, vec![0, 1, 2, 3, 4, 5, 6, 0])?;
    for level in Level::ALL {
        println!("level {}: {:?}", level.number(), tax.coarsen(&fine, level)?.values());
    }

    let config = "0\tBackground\tBackground\n1\tFace\tHead\n2\tHair\tHead\n3\tShirt\tTorso\n4\tSleeve\tArm\n5\tTrousers\tLeg\n";
    let custom = Taxonomy::parse_config("casual", config)?;
    println!("custom `{}` children of Head: {:?}", custom.name(), custom.children(1));
    print!("{}", custom.to_config());

    match Taxonomy::parse_config("broken", "0\tBackground\tBackground\n1\tCape\tWings\n") {
        Ok(_) => println!("unexpectedly valid"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
