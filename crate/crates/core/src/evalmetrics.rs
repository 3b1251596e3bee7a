//! Grounded QA metrics: answer accuracy, grounded accuracy, IoP/IoU and their
//! thresholded rates, the bias-error/unfaithful split, and segment histograms.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Interval, QASample, VideoMeta};
use crate::error::{Error, Result};

/// Grounded accuracy requires `IoP >= GQA_IOP`.
pub const GQA_IOP: f64 = 0.5;
/// Below this IoP an answer is either a bias error or unfaithful.
pub const BIAS_IOP: f64 = 0.3;
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.3, 0.5];
pub const LENGTH_BIN: f64 = 2.5;
pub const RATIO_BINS: usize = 10;
const MIN_LENGTH_BINS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub qid: String,
    pub answer_idx: usize,
    pub interval: Interval,
}

/// One line of a grounding output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub qid: String,
    pub answer_idx: usize,
    pub interval: Interval,
    #[serde(default)]
    pub attention: Vec<f64>,
}

impl From<&GroundingRecord> for Prediction {
    fn from(r: &GroundingRecord) -> Self {
        Prediction {
            qid: r.qid.clone(),
            answer_idx: r.answer_idx,
            interval: r.interval,
        }
    }
}

pub fn write_grounding_jsonl(path: &Path, records: &[GroundingRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_grounding_jsonl(path: &Path) -> Result<Vec<GroundingRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Best IoP and best IoU of `pred` against any of `gts`, each maximized
/// independently.
pub fn iop_iou(pred: &Interval, gts: &[Interval]) -> Result<(f64, f64)> {
    if gts.is_empty() {
        return Err(Error::Parameter("no ground-truth intervals".into()));
    }
    let len = pred.length();
    if !(len > 0.0) {
        return Err(Error::Parameter(format!(
            "prediction [{}, {}] has no length",
            pred.start, pred.end
        )));
    }
    let mut iop: f64 = 0.0;
    let mut iou: f64 = 0.0;
    for g in gts {
        let inter = pred.intersection(g);
        if inter > 0.0 {
            let union = pred.end.max(g.end) - pred.start.min(g.start);
            iop = iop.max(inter / len);
            iou = iou.max(inter / union);
        }
    }
    Ok((iop, iou))
}

/// How per-question values are averaged into rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Question,
    /// Mean within each video first, then across videos.
    Video,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub qid: String,
    pub video_id: String,
    pub answer_idx: usize,
    pub correct: bool,
    pub iop: f64,
    pub iou: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub questions: usize,
    pub correct: usize,
    pub grounded_correct: usize,
    pub low_iop: usize,
    pub bias_error: usize,
    pub unfaithful: usize,
}

/// Rates are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub averaging: Averaging,
    pub acc_vqa: f64,
    pub acc_gqa: f64,
    pub miop: f64,
    pub miou: f64,
    /// Keyed by the threshold printed with `{}`.
    pub iop_at: BTreeMap<String, f64>,
    pub iou_at: BTreeMap<String, f64>,
    pub bias_error_rate: f64,
    pub unfaithful_rate: f64,
    pub low_iop_rate: f64,
    pub counts: Counts,
    pub per_question: Vec<QuestionRecord>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

impl EvalReport {
    pub fn iop_rate(&self, t: f64) -> Option<f64> {
        self.iop_at.get(&threshold_key(t)).copied()
    }

    pub fn iou_rate(&self, t: f64) -> Option<f64> {
        self.iou_at.get(&threshold_key(t)).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18}{:>8}", "questions", self.counts.questions);
        let mut row = |k: &str, v: f64| {
            let _ = writeln!(s, "{k:<18}{v:>8.2}");
        };
        row("Acc@GQA", self.acc_gqa);
        row("Acc@VQA", self.acc_vqa);
        row("mIoP", self.miop);
        for (t, v) in &self.iop_at {
            row(&format!("IoP@{t}"), *v);
        }
        row("mIoU", self.miou);
        for (t, v) in &self.iou_at {
            row(&format!("IoU@{t}"), *v);
        }
        row("bias error", self.bias_error_rate);
        row("unfaithful", self.unfaithful_rate);
        s
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in v {
        sum += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores predictions against samples. Every sample needs exactly one
/// prediction and every prediction must name a known sample.
pub fn grade(
    preds: &[Prediction],
    samples: &[QASample],
    thresholds: &[f64],
    averaging: Averaging,
) -> Result<EvalReport> {
    let mut by_qid: HashMap<&str, &Prediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_qid.insert(p.qid.as_str(), p).is_some() {
            return Err(Error::Validation(format!("duplicate prediction for {}", p.qid)));
        }
    }
    let mut seen = HashSet::with_capacity(samples.len());
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        if !seen.insert(s.qid.as_str()) {
            return Err(Error::Validation(format!("duplicate sample {}", s.qid)));
        }
        let p = by_qid
            .get(s.qid.as_str())
            .ok_or_else(|| Error::Validation(format!("no prediction for {}", s.qid)))?;
        let (iop, iou) = iop_iou(&p.interval, &s.gt_intervals)?;
        records.push(QuestionRecord {
            qid: s.qid.clone(),
            video_id: s.video_id.clone(),
            answer_idx: p.answer_idx,
            correct: p.answer_idx == s.correct_idx,
            iop,
            iou,
        });
    }
    if let Some(p) = preds.iter().find(|p| !seen.contains(p.qid.as_str())) {
        return Err(Error::Validation(format!("prediction for unknown question {}", p.qid)));
    }
    for &t in thresholds {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Parameter(format!("threshold {t} outside [0, 1]")));
        }
    }
    Ok(summarize(records, thresholds, averaging))
}

fn summarize(records: Vec<QuestionRecord>, thresholds: &[f64], averaging: Averaging) -> EvalReport {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    let gqa = |r: &QuestionRecord| r.correct && r.iop >= GQA_IOP;
    let bias = |r: &QuestionRecord| r.iop < BIAS_IOP && !r.correct;
    let unf = |r: &QuestionRecord| r.iop < BIAS_IOP && r.correct;

    // Groups of record indices over which each rate is first averaged.
    let groups: Vec<Vec<usize>> = match averaging {
        Averaging::Question => (0..records.len()).map(|i| vec![i]).collect(),
        Averaging::Video => {
            let mut order: Vec<&str> = Vec::new();
            let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
            for (i, r) in records.iter().enumerate() {
                map.entry(r.video_id.as_str())
                    .or_insert_with(|| {
                        order.push(r.video_id.as_str());
                        Vec::new()
                    })
                    .push(i);
            }
            order.iter().map(|v| map[v].clone()).collect()
        }
    };
    let rate = |f: &dyn Fn(&QuestionRecord) -> f64| -> f64 {
        100.0 * mean(groups.iter().map(|g| mean(g.iter().map(|&i| f(&records[i])))))
    };

    let mut iop_at = BTreeMap::new();
    let mut iou_at = BTreeMap::new();
    for &t in thresholds {
        iop_at.insert(threshold_key(t), rate(&|r| ind(r.iop >= t)));
        iou_at.insert(threshold_key(t), rate(&|r| ind(r.iou >= t)));
    }
    let counts = Counts {
        questions: records.len(),
        correct: records.iter().filter(|r| r.correct).count(),
        grounded_correct: records.iter().filter(|r| gqa(r)).count(),
        low_iop: records.iter().filter(|r| r.iop < BIAS_IOP).count(),
        bias_error: records.iter().filter(|r| bias(r)).count(),
        unfaithful: records.iter().filter(|r| unf(r)).count(),
    };
    EvalReport {
        averaging,
        acc_vqa: rate(&|r| ind(r.correct)),
        acc_gqa: rate(&|r| ind(gqa(r))),
        miop: rate(&|r| r.iop),
        miou: rate(&|r| r.iou),
        iop_at,
        iou_at,
        bias_error_rate: rate(&|r| ind(bias(r))),
        unfaithful_rate: rate(&|r| ind(unf(r))),
        low_iop_rate: rate(&|r| ind(r.iop < BIAS_IOP)),
        counts,
        per_question: records,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Left-closed histograms of segment length (seconds) and length/duration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub length: Vec<Bin>,
    pub ratio: Vec<Bin>,
}

/// Index `k` with `edge(k) <= x < edge(k + 1)`, robust to rounding in `x / width`.
fn bin_index(x: f64, edge: impl Fn(usize) -> f64, guess: f64) -> usize {
    let mut k = guess.floor().max(0.0) as usize;
    while k > 0 && edge(k) > x {
        k -= 1;
    }
    while edge(k + 1) <= x {
        k += 1;
    }
    k
}

fn length_edge(k: usize) -> f64 {
    k as f64 * LENGTH_BIN
}

fn ratio_edge(k: usize) -> f64 {
    k as f64 / RATIO_BINS as f64
}

pub fn distribution_stats(intervals: &[Interval], metas: &[&VideoMeta]) -> Result<DistributionStats> {
    if intervals.len() != metas.len() {
        return Err(Error::Parameter(format!(
            "{} intervals but {} videos",
            intervals.len(),
            metas.len()
        )));
    }
    let mut len_idx = Vec::with_capacity(intervals.len());
    let mut ratio_idx = Vec::with_capacity(intervals.len());
    for (iv, m) in intervals.iter().zip(metas) {
        let l = iv.length();
        if !(l >= 0.0) || !(m.duration > 0.0) {
            return Err(Error::Parameter(format!(
                "invalid interval [{}, {}] in video {}",
                iv.start, iv.end, m.video_id
            )));
        }
        len_idx.push(bin_index(l, length_edge, l / LENGTH_BIN));
        let r = l / m.duration;
        ratio_idx.push(bin_index(r, ratio_edge, r * RATIO_BINS as f64).min(RATIO_BINS - 1));
    }
    let n_len = len_idx.iter().map(|k| k + 1).max().unwrap_or(0).max(MIN_LENGTH_BINS);
    let mut length: Vec<Bin> = (0..n_len)
        .map(|k| Bin {
            lo: length_edge(k),
            hi: length_edge(k + 1),
            count: 0,
        })
        .collect();
    let mut ratio: Vec<Bin> = (0..RATIO_BINS)
        .map(|k| Bin {
            lo: ratio_edge(k),
            hi: ratio_edge(k + 1),
            count: 0,
        })
        .collect();
    for k in len_idx {
        length[k].count += 1;
    }
    for k in ratio_idx {
        ratio[k].count += 1;
    }
    Ok(DistributionStats { length, ratio })
}

impl DistributionStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("histogram,lo,hi,count\n");
        for (name, bins) in [("length", &self.length), ("ratio", &self.ratio)] {
            for b in bins {
                let _ = writeln!(s, "{name},{},{},{}", b.lo, b.hi, b.count);
            }
        }
        s
    }
}
