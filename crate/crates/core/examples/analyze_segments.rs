//! Trains briefly, saves a run directory and histograms predicted segments.
//!
//! cargo run --release --example analyze_segments -- [RUN_DIR]

use std::path::PathBuf;

use vqground::dataset::{generate_dataset, BiasSpec, GeneratorConfig};
use vqground::harness::{analyze_run, save_run, train_run, TrainConfig};

fn main() -> vqground::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("vqground-run"));
    let spec = BiasSpec {
        noise_sigma: 1.0,
        segment_ratio_mean: 0.3,
        seed: 8,
        ..BiasSpec::default()
    };
    let data = generate_dataset(&spec, &GeneratorConfig::default(), 120, 2)?;
    let run = train_run(&data, &TrainConfig { epochs: 5, ..TrainConfig::default() }, None)?;
    let files = save_run(&dir, &run, None)?;
    let a = analyze_run(&dir, &data)?;

    println!("ratio bin      predicted  ground truth");
    for (p, g) in a.predicted.ratio.iter().zip(&a.ground_truth.ratio) {
        println!("[{:.1}, {:.1})  {:>10} {:>13}", p.lo, p.hi, p.count, g.count);
    }
    println!("\nrun written to {}", files.dir.display());
    Ok(())
}
