//! Generates a small synthetic dataset, writes it with a manifest and reads
//! one row back.
//!
//!     cargo run --release --example synthetic_dataset -- /tmp/dp-data

use std::path::PathBuf;

use deeppyramid::data::{class_census, generate_synthetic, write_dataset, DatasetManifest, SynthConfig};

fn main() -> deeppyramid::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dp-data"));
    let cfg = SynthConfig::new(0, 40, 64, 3);
    let samples = generate_synthetic(&cfg)?;
    let names = cfg.class_names();
    for (c, n) in class_census(&samples, cfg.num_classes).iter().enumerate() {
        println!("class {c} ({}) present in {n}/{} samples", names[c], samples.len());
    }

    let manifest = write_dataset(&dir, &samples, &names)?;
    let loaded = DatasetManifest::load(&dir.join("manifest.csv"))?;
    assert_eq!(loaded, manifest);
    let (train, test) = loaded.split(0);
    println!(
        "{} rows in {} folds; fold 0 holds out {} of them",
        loaded.rows.len(),
        loaded.num_folds(),
        test.len()
    );
    let first = loaded.read_sample(train[0])?;
    println!(
        "row {} -> {} ({}x{})",
        train[0] + 1,
        first.id,
        first.height(),
        first.width()
    );
    println!("manifest written to {}", dir.join("manifest.csv").display());
    Ok(())
}
