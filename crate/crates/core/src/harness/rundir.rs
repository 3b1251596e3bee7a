//! Layout of a run directory:
//!
//! ```text
//! run.json              RunRecord
//! config.toml           the normalized TrainConfig
//! report.json           test-set EvalReport
//! model.safetensors     selected parameters
//! dict_linguistic.safetensors, dict_visual.safetensors   when used
//! grounding.jsonl       test-set predictions with attention
//! data_dir.txt          dataset location, when known
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RunRecord, TrainedRun};
use crate::dataset::{Dataset, Interval, VideoMeta};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    distribution_stats, read_grounding_jsonl, write_grounding_jsonl, DistributionStats, GroundingRecord,
};

#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunFiles { dir: dir.into() }
    }
    pub fn record(&self) -> PathBuf {
        self.dir.join("run.json")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.safetensors")
    }
    pub fn linguistic_dict(&self) -> PathBuf {
        self.dir.join("dict_linguistic.safetensors")
    }
    pub fn visual_dict(&self) -> PathBuf {
        self.dir.join("dict_visual.safetensors")
    }
    pub fn grounding(&self) -> PathBuf {
        self.dir.join("grounding.jsonl")
    }
    pub fn data_dir(&self) -> PathBuf {
        self.dir.join("data_dir.txt")
    }
    pub fn histograms_json(&self) -> PathBuf {
        self.dir.join("histograms.json")
    }
    pub fn histograms_csv(&self) -> PathBuf {
        self.dir.join("histograms.csv")
    }
}

fn write(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn save_run(dir: &Path, run: &TrainedRun, data_dir: Option<&Path>) -> Result<RunFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let f = RunFiles::new(dir);
    write(&f.record(), &serde_json::to_string_pretty(&run.record)?)?;
    write(&f.config(), &run.record.config.to_toml_string()?)?;
    write(&f.report(), &run.record.report.to_json()?)?;
    run.model.store.save(&f.checkpoint())?;
    if let Some(d) = &run.model.linguistic {
        d.save(&f.linguistic_dict())?;
    }
    if let Some(d) = &run.model.visual {
        d.save(&f.visual_dict())?;
    }
    write_grounding_jsonl(&f.grounding(), &run.predictions)?;
    if let Some(d) = data_dir {
        write(&f.data_dir(), &d.display().to_string())?;
    }
    Ok(f)
}

pub fn load_run(dir: &Path) -> Result<(RunRecord, Vec<GroundingRecord>)> {
    let f = RunFiles::new(dir);
    let path = f.record();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let record: RunRecord =
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    Ok((record, read_grounding_jsonl(&f.grounding())?))
}

/// Segment length and ratio histograms of predictions and ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnalysis {
    pub predicted: DistributionStats,
    pub ground_truth: DistributionStats,
}

impl SegmentAnalysis {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,histogram,lo,hi,count\n");
        for (name, st) in [("predicted", &self.predicted), ("ground_truth", &self.ground_truth)] {
            for line in st.to_csv().lines().skip(1) {
                s.push_str(name);
                s.push(',');
                s.push_str(line);
                s.push('\n');
            }
        }
        s
    }
}

/// Histograms for the predictions stored in `dir`, written back next to them.
pub fn analyze_run(dir: &Path, data: &Dataset) -> Result<SegmentAnalysis> {
    let (_, preds) = load_run(dir)?;
    let samples: HashMap<&str, usize> = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.qid.as_str(), i))
        .collect();
    let mut pred_iv: Vec<Interval> = Vec::new();
    let mut pred_meta: Vec<&VideoMeta> = Vec::new();
    let mut gt_iv = Vec::new();
    let mut gt_meta = Vec::new();
    for p in &preds {
        let &i = samples
            .get(p.qid.as_str())
            .ok_or_else(|| Error::Validation(format!("prediction for unknown question {}", p.qid)))?;
        let s = &data.samples[i];
        let meta = data
            .video(&s.video_id)
            .ok_or_else(|| Error::Data(format!("unknown video {}", s.video_id)))?;
        pred_iv.push(p.interval);
        pred_meta.push(meta);
        for g in &s.gt_intervals {
            gt_iv.push(*g);
            gt_meta.push(meta);
        }
    }
    let out = SegmentAnalysis {
        predicted: distribution_stats(&pred_iv, &pred_meta)?,
        ground_truth: distribution_stats(&gt_iv, &gt_meta)?,
    };
    let f = RunFiles::new(dir);
    write(&f.histograms_json(), &serde_json::to_string_pretty(&out)?)?;
    write(&f.histograms_csv(), &out.to_csv())?;
    Ok(out)
}
