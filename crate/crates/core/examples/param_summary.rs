//! Per-module parameter counts for each variant at desk and full scale.
//!
//!     cargo run --release --example param_summary

use deeppyramid::network::{Network, NetworkConfig, Variant};

fn main() -> deeppyramid::Result<()> {
    for variant in Variant::ALL {
        let desk = Network::<f32>::new(NetworkConfig::desk(variant, 3), 0)?;
        let full = Network::<f32>::new(NetworkConfig::full_scale(variant, 3), 0)?;
        println!(
            "{variant}: {} (w=8), {:.2}M (w=64)",
            desk.param_count(),
            full.param_count() as f64 / 1e6
        );
    }
    println!();
    let full = Network::<f32>::new(NetworkConfig::full_scale(Variant::DeepPyramidPlus, 3), 0)?;
    for row in full.param_breakdown() {
        println!("{:<22} {:>10}", row.module, row.params);
    }
    Ok(())
}
