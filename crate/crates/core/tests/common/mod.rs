//! Shared oracles for the integration tests.
#![allow(dead_code)]

pub mod grad;

use std::collections::BTreeMap;

use vqground::dataset::{
    generate_dataset, BiasSpec, Dataset, GeneratorConfig, Interval, QASample, VideoMeta,
};
use vqground::evalmetrics::Prediction;

pub fn meta(duration: f64, n_frames: usize) -> VideoMeta {
    VideoMeta {
        video_id: "v".into(),
        duration,
        n_frames,
    }
}

/// Central differences of `f` at `x`.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Best IoP and IoU against any ground truth, from overlap length and the
/// inclusion-exclusion union.
pub fn brute_iop_iou(pred: &Interval, gts: &[Interval]) -> (f64, f64) {
    let lp = pred.end - pred.start;
    let mut best = (0.0f64, 0.0f64);
    for g in gts {
        let lo = if pred.start > g.start { pred.start } else { g.start };
        let hi = if pred.end < g.end { pred.end } else { g.end };
        let inter = if hi > lo { hi - lo } else { 0.0 };
        let union = lp + (g.end - g.start) - inter;
        best.0 = best.0.max(inter / lp);
        if union > 0.0 {
            best.1 = best.1.max(inter / union);
        }
    }
    best
}

/// Per-question counts and percentages computed in one direct pass.
#[derive(Debug, Default)]
pub struct BruteReport {
    pub acc_vqa: f64,
    pub acc_gqa: f64,
    pub miop: f64,
    pub miou: f64,
    pub iop_at: BTreeMap<String, f64>,
    pub iou_at: BTreeMap<String, f64>,
    pub bias: usize,
    pub unfaithful: usize,
    pub low: usize,
}

pub fn brute_grade(preds: &[Prediction], samples: &[QASample], thresholds: &[f64], by_video: bool) -> BruteReport {
    // Rows of (video, correct, iop, iou).
    let mut rows = Vec::new();
    for s in samples {
        let p = preds.iter().find(|p| p.qid == s.qid).expect("prediction present");
        let (iop, iou) = brute_iop_iou(&p.interval, &s.gt_intervals);
        rows.push((s.video_id.clone(), p.answer_idx == s.correct_idx, iop, iou));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let key = if by_video { r.0.clone() } else { format!("{i:08}") };
        groups.entry(key).or_default().push(i);
    }
    let avg = |f: &dyn Fn(&(String, bool, f64, f64)) -> f64| {
        let mut total = 0.0;
        for idx in groups.values() {
            total += idx.iter().map(|&i| f(&rows[i])).sum::<f64>() / idx.len() as f64;
        }
        100.0 * total / groups.len() as f64
    };
    let b = |x: bool| if x { 1.0 } else { 0.0 };
    let mut out = BruteReport {
        acc_vqa: avg(&|r| b(r.1)),
        acc_gqa: avg(&|r| b(r.1 && r.2 >= 0.5)),
        miop: avg(&|r| r.2),
        miou: avg(&|r| r.3),
        ..Default::default()
    };
    for &t in thresholds {
        out.iop_at.insert(format!("{t}"), avg(&|r| b(r.2 >= t)));
        out.iou_at.insert(format!("{t}"), avg(&|r| b(r.3 >= t)));
    }
    for r in &rows {
        if r.2 < 0.3 {
            out.low += 1;
            if r.1 {
                out.unfaithful += 1;
            } else {
                out.bias += 1;
            }
        }
    }
    out
}

/// Checks every contiguous run that contains the earliest peak and keeps the
/// longest one whose entries all clear `gamma * max`.
pub fn brute_interval(att: &[f64], meta: &VideoMeta, gamma: f64) -> Interval {
    let n = att.len();
    let mut peak = 0;
    for i in 0..n {
        if att[i] > att[peak] {
            peak = i;
        }
    }
    let thr = gamma * att[peak];
    let mut best = (peak, peak);
    for l in 0..=peak {
        for r in peak..n {
            if (l..=r).all(|i| att[i] >= thr) && r - l > best.1 - best.0 {
                best = (l, r);
            }
        }
    }
    let slab = |i: usize| i as f64 * meta.duration / n as f64;
    let end = if best.1 + 1 == n { meta.duration } else { slab(best.1 + 1) };
    Interval::new(slab(best.0), end)
}

pub fn small_dataset(videos: usize, per_video: usize, dim: usize, n_frames: usize, seed: u64) -> Dataset {
    let spec = BiasSpec {
        seed,
        ..BiasSpec::default()
    };
    let cfg = GeneratorConfig {
        dim: Some(dim),
        n_frames,
        ..GeneratorConfig::default()
    };
    generate_dataset(&spec, &cfg, videos, per_video).expect("generator accepts the fixture")
}
