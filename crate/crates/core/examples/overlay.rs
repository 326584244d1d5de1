//! Writes colour overlays of a ground-truth mask and of a briefly trained
//! network's prediction for the same image.
//!
//!     cargo run --release --example overlay -- /tmp/dp-overlay

use std::path::PathBuf;

use deeppyramid::data::{generate_synthetic, write_image, write_mask_overlay, OverlaySource, SynthConfig};
use deeppyramid::network::{Network, NetworkConfig, Variant};
use deeppyramid::train::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dp-overlay"));
    std::fs::create_dir_all(&dir)?;

    let data = generate_synthetic(&SynthConfig::new(2, 60, 64, 3))?;
    let (train_set, test): (Vec<_>, Vec<_>) = data.into_iter().partition(|s| s.fold != 0);
    let mut net = Network::<f32>::new(NetworkConfig::desk(Variant::UnetPlus, 3), 0)?;
    train(
        &mut net,
        &train_set,
        &TrainConfig {
            total_iters: 80,
            ..TrainConfig::desk(0)
        },
        None,
    )?;

    let sample = &test[0];
    let batch = sample.image.clone().reshape(&[1, 3, 64, 64])?;
    let logits = net.predict_logits(&batch)?;
    write_image(&dir.join("image.png"), &sample.image)?;
    write_mask_overlay(&sample.image, OverlaySource::Mask(&sample.mask), &dir.join("truth.png"))?;
    let pred = write_mask_overlay(
        &sample.image,
        OverlaySource::Logits(&logits),
        &dir.join("prediction.png"),
    )?;
    let agree = pred
        .data()
        .iter()
        .zip(sample.mask.data())
        .filter(|(a, b)| a == b)
        .count();
    println!(
        "pixel agreement {:.1}%",
        100.0 * agree as f64 / pred.data().len() as f64
    );
    println!("wrote image.png, truth.png and prediction.png to {}", dir.display());
    Ok(())
}
