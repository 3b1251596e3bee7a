use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{fit_dictionaries, split_by_video, train_run, Dictionaries, RunRecord, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::IntervalPolicy;

/// Named variants of a base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationRow {
    Full,
    /// Post-hoc intervals instead of the grounding module.
    NoGsg,
    NoCma,
    /// Both interventions off.
    NoCausal,
    NoLci,
    NoEci,
    /// Grounding module without smoothing in training and inference.
    GsgNoGs,
    /// Smoothing during training only.
    GsgNoGsInfer,
    /// Same configuration as `NoGsg`.
    Ph,
}

impl AblationRow {
    pub const ALL: [AblationRow; 9] = [
        AblationRow::Full,
        AblationRow::NoGsg,
        AblationRow::NoCma,
        AblationRow::NoCausal,
        AblationRow::NoLci,
        AblationRow::NoEci,
        AblationRow::GsgNoGs,
        AblationRow::GsgNoGsInfer,
        AblationRow::Ph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Full => "full",
            AblationRow::NoGsg => "no-gsg",
            AblationRow::NoCma => "no-cma",
            AblationRow::NoCausal => "no-causal",
            AblationRow::NoLci => "no-lci",
            AblationRow::NoEci => "no-eci",
            AblationRow::GsgNoGs => "gsg-no-gs",
            AblationRow::GsgNoGsInfer => "gsg-no-gs-infer",
            AblationRow::Ph => "ph",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            AblationRow::Full => {}
            AblationRow::NoGsg | AblationRow::Ph => c.interval_policy = IntervalPolicy::Ph,
            AblationRow::NoCma => c.use_cma = false,
            AblationRow::NoCausal => {
                c.use_lci = false;
                c.use_eci = false;
            }
            AblationRow::NoLci => c.use_lci = false,
            AblationRow::NoEci => c.use_eci = false,
            AblationRow::GsgNoGs => {
                c.use_gsg_smoothing_train = false;
                c.use_gsg_smoothing_infer = false;
            }
            AblationRow::GsgNoGsInfer => c.use_gsg_smoothing_infer = false,
        }
        c.normalized()
    }
}

impl FromStr for AblationRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationRow::ALL
            .into_iter()
            .find(|r| r.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown ablation row {s:?}")))
    }
}

/// Medians over seeds of the headline metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub acc_gqa: f64,
    pub acc_vqa: f64,
    pub iop_05: f64,
    pub iou_05: f64,
    pub miop: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub config: TrainConfig,
    pub runs: Vec<RunRecord>,
    pub median: RowSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationResult>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn summarize(runs: &[RunRecord]) -> RowSummary {
    let m = |f: &dyn Fn(&RunRecord) -> f64| median(&mut runs.iter().map(f).collect::<Vec<_>>());
    RowSummary {
        acc_gqa: m(&|r| r.report.acc_gqa),
        acc_vqa: m(&|r| r.report.acc_vqa),
        iop_05: m(&|r| r.report.iop_rate(0.5).unwrap_or(f64::NAN)),
        iou_05: m(&|r| r.report.iou_rate(0.5).unwrap_or(f64::NAN)),
        miop: m(&|r| r.report.miop),
        miou: m(&|r| r.report.miou),
    }
}

impl AblationTable {
    pub fn row(&self, row: AblationRow) -> Option<&AblationResult> {
        self.rows.iter().find(|r| r.row == row)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18}{:>9}{:>9}{:>11}{:>11}",
            "row", "Acc@GQA", "Acc@VQA", "TIoP@0.5", "TIoU@0.5"
        );
        for r in &self.rows {
            let m = &r.median;
            let _ = writeln!(
                s,
                "{:<18}{:>9.2}{:>9.2}{:>11.2}{:>11.2}",
                r.row.name(),
                m.acc_gqa,
                m.acc_vqa,
                m.iop_05,
                m.iou_05
            );
        }
        s
    }
}

pub const MIN_SEEDS: usize = 3;

/// Trains every distinct row configuration under every seed and reports
/// per-row medians. Rows that resolve to the same configuration are run once.
pub fn run_ablation_matrix(
    data: &Dataset,
    base: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
) -> Result<AblationTable> {
    if rows.is_empty() {
        return Err(Error::Config("no ablation rows requested".into()));
    }
    if seeds.len() < MIN_SEEDS {
        return Err(Error::Config(format!(
            "ablations need at least {MIN_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    let mut unique: Vec<(AblationRow, TrainConfig)> = Vec::new();
    for &r in rows {
        let cfg = r.apply(base);
        cfg.validate()?;
        match unique.iter().find(|(_, c)| *c == cfg) {
            Some((kept, _)) => log::warn!(
                "ablation row {} duplicates {}; running it once",
                r.name(),
                kept.name()
            ),
            None => unique.push((r, cfg)),
        }
    }

    // Dictionaries depend only on the split, so every row shares one fit.
    let split = split_by_video(data, base.val_fraction, base.test_fraction, base.split_seed)?;
    let mut all = base.clone();
    all.use_lci = unique.iter().any(|(_, c)| c.use_lci);
    all.use_eci = unique.iter().any(|(_, c)| c.use_eci);
    let dicts: Dictionaries = fit_dictionaries(data, &split.train, &all)?;

    let mut cache: HashMap<usize, Vec<RunRecord>> = HashMap::new();
    for (ui, (row, cfg)) in unique.iter().enumerate() {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            log::info!("ablation {} seed {seed}", row.name());
            runs.push(train_run(data, &c, Some(&dicts))?.record);
        }
        cache.insert(ui, runs);
    }
    let rows = unique
        .into_iter()
        .enumerate()
        .map(|(ui, (row, config))| {
            let runs = cache.remove(&ui).unwrap_or_default();
            AblationResult {
                row,
                median: summarize(&runs),
                config,
                runs,
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
