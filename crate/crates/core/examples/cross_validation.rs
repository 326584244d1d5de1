//! K-fold evaluation: trains a short run per fold and aggregates mean Dice
//! and IoU across folds.
//!
//!     cargo run --release --example cross_validation

use deeppyramid::data::{generate_synthetic, SynthConfig};
use deeppyramid::metrics::aggregate_folds;
use deeppyramid::network::{Network, NetworkConfig, Variant};
use deeppyramid::train::{evaluate, train, TrainConfig};

fn main() -> deeppyramid::Result<()> {
    let mut synth = SynthConfig::new(1, 60, 64, 3);
    synth.num_folds = 3;
    let data = generate_synthetic(&synth)?;

    let mut reports = Vec::new();
    for fold in 0..synth.num_folds {
        let (train_set, test): (Vec<_>, Vec<_>) = data.iter().cloned().partition(|s| s.fold != fold);
        let mut net = Network::<f32>::new(NetworkConfig::desk(Variant::UnetPlus, 3), fold as u64)?;
        let cfg = TrainConfig {
            total_iters: 60,
            ..TrainConfig::desk(fold as u64)
        };
        train(&mut net, &train_set, &cfg, None)?;
        let r = evaluate(&net, &test)?;
        println!(
            "fold {fold}: {} test samples, mean Dice {:.2}",
            test.len(),
            r.mean_dice.unwrap_or(0.0)
        );
        reports.push(r);
    }
    let s = aggregate_folds(&reports)?;
    println!(
        "{} folds: Dice {:.2} ± {:.2}, IoU {:.2} ± {:.2}",
        s.folds, s.mean_dice, s.std_dice, s.mean_iou, s.std_iou
    );
    Ok(())
}
