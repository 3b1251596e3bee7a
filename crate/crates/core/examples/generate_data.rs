//! Generates a planted-bias benchmark and writes it to disk.
//!
//! cargo run --release --example generate_data -- [OUT_DIR]

use std::collections::BTreeMap;
use std::path::PathBuf;

use vqground::dataset::{generate_dataset, load_dataset, save_dataset, BiasSpec, GeneratorConfig, World};

fn main() -> vqground::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("vqground-bench"));
    let spec = BiasSpec {
        p_answer_bias: 0.7,
        segment_ratio_mean: 0.2,
        noise_sigma: 1.0,
        seed: 3,
        ..BiasSpec::default()
    };
    let cfg = GeneratorConfig::default();
    let data = generate_dataset(&spec, &cfg, 200, 2)?;

    let world = World::new(&spec, data.dim);
    let forced = data
        .samples
        .iter()
        .filter(|s| s.bias_entity_pair.is_some_and(|p| world.preferred_slot(p) == s.correct_idx))
        .count();
    let ratio: f64 = data
        .samples
        .iter()
        .map(|s| {
            let v = data.video(&s.video_id).unwrap();
            s.gt_intervals[0].length() / v.duration
        })
        .sum::<f64>()
        / data.samples.len() as f64;
    let mut slots = BTreeMap::new();
    for s in &data.samples {
        *slots.entry(s.correct_idx).or_insert(0) += 1;
    }

    println!("{} videos, {} questions, d = {}", data.videos.len(), data.samples.len(), data.dim);
    println!("answers on the preferred slot: {:.3}", forced as f64 / data.samples.len() as f64);
    println!("mean segment ratio: {ratio:.3}");
    println!("answer slot histogram: {slots:?}");

    let manifest = save_dataset(&data, &out)?;
    let back = load_dataset(&manifest)?;
    assert_eq!(back.samples, data.samples);
    println!("written to {}", manifest.display());
    Ok(())
}
