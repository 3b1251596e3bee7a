use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vqground::dataset::{generate_dataset, load_dataset, save_dataset, BiasSpec, GeneratorConfig};
use vqground::evalmetrics::{grade, read_grounding_jsonl, Averaging, Prediction};
use vqground::harness::{
    analyze_run, random_baseline_with, run_ablation_matrix, save_run, train_run, AblationRow, RunFiles,
    TrainConfig,
};
use vqground::{Error, Result};

#[derive(Parser)]
#[command(name = "vqground", version, about = "Weakly supervised video question grounding")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum AvgArg {
    Question,
    Video,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        videos: usize,
        #[arg(long, default_value_t = 2)]
        qa_per_video: usize,
        #[arg(long, default_value_t = 0.0)]
        p_bias: f64,
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        frames: usize,
    },
    /// Train one model and write a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run named configuration variants under several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full,no-cma,no-causal,no-gsg,no-lci,no-eci")]
        rows: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Write the full table as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment length and ratio histograms for a run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the dataset recorded in the run directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Grade a grounding file, or the whole-video baseline with --random.
    Eval {
        #[arg(long, required_unless_present = "random")]
        preds: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "0.3,0.5", value_delimiter = ',')]
        thresholds: Vec<f64>,
        #[arg(long, value_enum, default_value_t = AvgArg::Question)]
        averaging: AvgArg,
        #[arg(long)]
        random: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn write_out(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::Run(format!("writing {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            out,
            videos,
            qa_per_video,
            p_bias,
            ratio,
            seed,
            noise,
            dim,
            frames,
        } => {
            let spec = BiasSpec {
                p_answer_bias: p_bias,
                segment_ratio_mean: ratio,
                noise_sigma: noise,
                seed,
                ..BiasSpec::default()
            };
            let cfg = GeneratorConfig {
                dim: Some(dim),
                n_frames: frames,
                ..GeneratorConfig::default()
            };
            let data = generate_dataset(&spec, &cfg, videos, qa_per_video)?;
            let path = save_dataset(&data, &out)?;
            println!("wrote {} questions over {} videos to {}", data.samples.len(), data.videos.len(), path.display());
        }
        Cmd::Train { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_dataset(&data)?;
            let run = train_run(&ds, &cfg, None)?;
            save_run(&out, &run, Some(&data))?;
            println!("{}", run.record.report.to_table());
            println!("best epoch {}, run written to {}", run.record.best_epoch, out.display());
        }
        Cmd::Ablate {
            data,
            config,
            rows,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let rows = rows
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(str::parse)
                .collect::<Result<Vec<AblationRow>>>()?;
            let seeds: Vec<u64> = (0..seeds as u64).map(|i| cfg.seed + i).collect();
            let ds = load_dataset(&data)?;
            let table = run_ablation_matrix(&ds, &cfg, &rows, &seeds)?;
            println!("{}", table.to_table());
            if let Some(p) = out {
                write_out(&p, &serde_json::to_string_pretty(&table)?)?;
            }
        }
        Cmd::Analyze { run, data } => {
            let data = match data {
                Some(d) => d,
                None => {
                    let p = RunFiles::new(&run).data_dir();
                    let s = fs::read_to_string(&p)
                        .map_err(|e| Error::Config(format!("no --data given and {}: {e}", p.display())))?;
                    PathBuf::from(s.trim())
                }
            };
            let ds = load_dataset(&data)?;
            let a = analyze_run(&run, &ds)?;
            print!("{}", a.to_csv());
        }
        Cmd::Eval {
            preds,
            data,
            thresholds,
            averaging,
            random,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let averaging = match averaging {
                AvgArg::Question => Averaging::Question,
                AvgArg::Video => Averaging::Video,
            };
            let report = if random {
                random_baseline_with(&ds, averaging)?
            } else {
                let path = preds.ok_or_else(|| Error::Config("--preds is required".into()))?;
                let recs = read_grounding_jsonl(&path)?;
                let preds: Vec<Prediction> = recs.iter().map(Prediction::from).collect();
                // Grade only the questions the file covers.
                let wanted: std::collections::HashSet<&str> = preds.iter().map(|p| p.qid.as_str()).collect();
                let samples: Vec<_> = ds
                    .samples
                    .iter()
                    .filter(|s| wanted.contains(s.qid.as_str()))
                    .cloned()
                    .collect();
                grade(&preds, &samples, &thresholds, averaging)?
            };
            println!("{}", report.to_table());
            if let Some(p) = out {
                write_out(&p, &report.to_json()?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
