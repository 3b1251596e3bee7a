//! Trains the full model on a small noisy benchmark and prints the test report.
//!
//! cargo run --release --example train_model

use vqground::dataset::{generate_dataset, BiasSpec, GeneratorConfig};
use vqground::harness::{train_run, TrainConfig};

fn main() -> vqground::Result<()> {
    let spec = BiasSpec {
        noise_sigma: 1.0,
        seed: 5,
        ..BiasSpec::default()
    };
    let data = generate_dataset(&spec, &GeneratorConfig::default(), 150, 3)?;
    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    let run = train_run(&data, &cfg, None)?;
    let rec = &run.record;

    println!("epoch      loss        ce     align  val GQA  val VQA");
    for e in &rec.epochs {
        println!(
            "{:>5} {:>9.4} {:>9.4} {:>9.4} {:>8.2} {:>8.2}",
            e.epoch,
            e.loss,
            e.ce,
            e.align.unwrap_or(0.0),
            e.val_acc_gqa,
            e.val_acc_vqa
        );
    }
    println!(
        "\nbest epoch {}, sigma {:.3}, {} / {} / {} questions",
        rec.best_epoch,
        run.model.gsg.sigma(&run.model.store),
        rec.n_train,
        rec.n_val,
        rec.n_test
    );
    print!("{}", rec.report.to_table());
    Ok(())
}
