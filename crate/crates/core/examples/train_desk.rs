//! Trains one variant on the 200-sample synthetic set and evaluates the
//! held-out fold.
//!
//!     cargo run --release --example train_desk -- deeppyramid_plus 200

use std::time::Instant;

use deeppyramid::data::{generate_synthetic, SynthConfig};
use deeppyramid::network::{Network, NetworkConfig, Variant};
use deeppyramid::train::{evaluate, train, TrainConfig};

fn main() -> deeppyramid::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("unet_plus").parse()?;
    let iters: usize = args
        .next()
        .map_or(Ok(200), |s| s.parse())
        .expect("iterations must be an integer");

    let data = generate_synthetic(&SynthConfig::new(0, 200, 64, 3))?;
    let (train_set, held_out): (Vec<_>, Vec<_>) = data.into_iter().partition(|s| s.fold != 0);

    let mut net = Network::<f32>::new(NetworkConfig::desk(variant, 3), 0)?;
    println!(
        "{variant}: {} parameters, {} training samples",
        net.param_count(),
        train_set.len()
    );
    let cfg = TrainConfig {
        total_iters: iters,
        eval_every: (iters / 4).max(1),
        ..TrainConfig::desk(0)
    };
    let start = Instant::now();
    let report = train(&mut net, &train_set, &cfg, Some(&held_out))?;
    if let Some((head, tail)) = report.head_tail_means(20) {
        println!("loss {head:.3} -> {tail:.3} in {:.1?}", start.elapsed());
    }
    for (it, dice) in &report.validation {
        println!("  iter {it:>4}: held-out mean Dice {dice:.2}");
    }
    print!(
        "{}",
        evaluate(&net, &held_out)?
            .with_names(&SynthConfig::new(0, 1, 64, 3).class_names())
            .table()
    );
    Ok(())
}
