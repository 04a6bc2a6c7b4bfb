//! Regenerates `data/freak_pairs.txt` from the built-in synthetic textures.
//!
//! Usage: `cargo run --release -p fcbir-core --example train_freak_pairs [--bootstrap] [OUT]`

use std::path::PathBuf;

use fcbir_core::freak::{self, PairSelection};
use fcbir_core::scale_space::DetectorParams;
use fcbir_core::synth;

fn main() -> fcbir_core::Result<()> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let bootstrap = args.iter().any(|a| a == "--bootstrap");
    args.retain(|a| a != "--bootstrap");
    let out = args
        .first()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/data/freak_pairs.txt")));

    let pattern = freak::build_pattern();
    let selection = if bootstrap {
        PairSelection::by_baseline(&pattern)
    } else {
        let images: Vec<_> = (0..48)
            .map(|i| {
                if i % 4 == 3 {
                    synth::textured(256, 256, 1000 + i)
                } else {
                    synth::class_image(i as usize % 3, 256, 256, 5000 + i)
                }
            })
            .collect();
        let rows = freak::training_rows(&images, &DetectorParams::default(), &pattern)?;
        println!("{} training rows", rows.len());
        freak::select_pairs(&rows, &pattern)
    };
    selection.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
