//! Module ablations under three seeds, reported as per-row medians.
//!
//! cargo run --release --example ablation

use vqground::dataset::{generate_dataset, BiasSpec, GeneratorConfig};
use vqground::harness::{run_ablation_matrix, AblationRow, TrainConfig};

fn main() -> vqground::Result<()> {
    let spec = BiasSpec {
        p_answer_bias: 0.7,
        noise_sigma: 1.5,
        seed: 9,
        ..BiasSpec::default()
    };
    let gen = GeneratorConfig {
        dim: Some(32),
        n_frames: 16,
        ..GeneratorConfig::default()
    };
    let data = generate_dataset(&spec, &gen, 160, 2)?;
    let base = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    let rows = [
        AblationRow::Full,
        AblationRow::NoCma,
        AblationRow::NoCausal,
        AblationRow::NoGsg,
        AblationRow::GsgNoGs,
    ];
    let table = run_ablation_matrix(&data, &base, &rows, &[0, 1, 2])?;
    print!("{}", table.to_table());
    Ok(())
}
