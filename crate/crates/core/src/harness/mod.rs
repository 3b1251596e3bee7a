//! Training, the ablation matrix, the whole-video baseline and run directories.

mod ablation;
mod config;
mod rundir;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation_matrix, AblationResult, AblationRow, AblationTable, RowSummary};
pub use config::TrainConfig;
pub use rundir::{analyze_run, load_run, save_run, RunFiles, SegmentAnalysis};

use crate::alignment::max_negatives;
use crate::autograd::Graph;
use crate::causal::{build_linguistic_dict, build_visual_dict, ConfounderDictionary};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evalmetrics::{grade, Averaging, EvalReport, GroundingRecord, Prediction, DEFAULT_THRESHOLDS};
use crate::model::{Batch, Model};
use crate::params::Adam;
use crate::tensor::Mat;

/// Sample indices of each partition. Videos never straddle partitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles the video ids with `seed` and cuts them by the given fractions.
pub fn split_by_video(data: &Dataset, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Split> {
    let mut ids: Vec<&str> = data
        .samples
        .iter()
        .map(|s| s.video_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if ids.len() < 3 {
        return Err(Error::Data(format!(
            "{} videos cannot be split three ways",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).max(1);
    let n_test = ((n as f64 * test_fraction).round() as usize).max(1);
    if n_val + n_test >= n {
        return Err(Error::Data(format!("{n} videos leave nothing to train on")));
    }
    let n_train = n - n_val - n_test;
    let part = |set: &[&str]| -> Vec<usize> {
        let set: BTreeSet<&str> = set.iter().copied().collect();
        (0..data.samples.len())
            .filter(|&i| set.contains(data.samples[i].video_id.as_str()))
            .collect()
    };
    Ok(Split {
        train: part(&ids[..n_train]),
        val: part(&ids[n_train..n_train + n_val]),
        test: part(&ids[n_train + n_val..]),
    })
}

/// Confounder dictionaries fit on a training partition.
#[derive(Clone, Debug, Default)]
pub struct Dictionaries {
    pub linguistic: Option<Arc<ConfounderDictionary>>,
    pub visual: Option<Arc<ConfounderDictionary>>,
}

/// Fits the dictionaries `cfg` needs on the `train` samples.
pub fn fit_dictionaries(data: &Dataset, train: &[usize], cfg: &TrainConfig) -> Result<Dictionaries> {
    let mut out = Dictionaries::default();
    if cfg.use_lci {
        let emb = data.embeddings.as_ref().ok_or_else(|| {
            Error::Data("the linguistic dictionary needs token embeddings".into())
        })?;
        let samples: Vec<_> = train.iter().map(|&i| &data.samples[i]).collect();
        let dict = build_linguistic_dict(&samples, emb, &data.vocab, cfg.dict_size, cfg.split_seed)?;
        out.linguistic = Some(Arc::new(dict));
    }
    if cfg.use_eci {
        let mut seen = BTreeSet::new();
        let mut parts: Vec<&Mat> = Vec::new();
        for &i in train {
            if seen.insert(data.samples[i].video_id.as_str()) {
                parts.push(&data.features[i].video_feats);
            }
        }
        let frames = Mat::vstack(&parts);
        out.visual = Some(Arc::new(build_visual_dict(&frames, cfg.dict_size, cfg.split_seed)?));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over batches of the total loss.
    pub loss: f64,
    pub ce: f64,
    pub align: Option<f64>,
    pub val_acc_gqa: f64,
    pub val_acc_vqa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    /// 0 means the untrained parameters won model selection.
    pub best_epoch: usize,
    pub report: EvalReport,
    pub wall_clock_secs: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl RunRecord {
    /// Equality of everything except timing.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        self.config == other.config
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.report == other.report
    }
}

/// A finished run with its selected model and test-set groundings.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub record: RunRecord,
    pub model: Model,
    pub split: Split,
    pub predictions: Vec<GroundingRecord>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 31;
    x.wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Cuts shuffled indices into batches, folding a short tail into the
/// previous batch.
fn batches(order: &[usize], size: usize, min_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().map_or(false, |b| b.len() < min_size) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    out
}

fn evaluate(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(EvalReport, Vec<GroundingRecord>)> {
    let recs = model.predict(data, indices, cfg.use_gsg_smoothing_infer, cfg.gamma, cfg.eval_chunk)?;
    let preds: Vec<Prediction> = recs.iter().map(Prediction::from).collect();
    let samples: Vec<_> = indices.iter().map(|&i| data.samples[i].clone()).collect();
    let report = grade(&preds, &samples, &DEFAULT_THRESHOLDS, Averaging::Question)?;
    Ok((report, recs))
}

fn selection_key(r: &EvalReport) -> (f64, f64) {
    (r.acc_gqa, r.acc_vqa)
}

/// Trains with freshly fit dictionaries.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<RunRecord> {
    Ok(train_run(data, cfg, None)?.record)
}

/// Trains, reusing `dicts` when given (they must come from the same split).
pub fn train_run(data: &Dataset, cfg: &TrainConfig, dicts: Option<&Dictionaries>) -> Result<TrainedRun> {
    let cfg = cfg.clone().normalized();
    cfg.validate()?;
    data.validate()?;
    let started = Instant::now();
    let split = split_by_video(data, cfg.val_fraction, cfg.test_fraction, cfg.split_seed)?;
    let fitted;
    let dicts = match dicts {
        Some(d) => d,
        None => {
            fitted = fit_dictionaries(data, &split.train, &cfg)?;
            &fitted
        }
    };
    let n_frames = data.features[split.train[0]].video_feats.rows();
    let mut model = Model::new(
        data.dim,
        n_frames,
        cfg.flags(),
        if cfg.use_lci { dicts.linguistic.clone() } else { None },
        if cfg.use_eci { dicts.visual.clone() } else { None },
        cfg.seed,
    )?;
    let frozen = model.idle_params();
    let mut opt = Adam::new(&model.store, cfg.lr);
    let align = cfg.align();
    let min_batch = if cfg.use_cma { cfg.k_l.max(cfg.k_v) + 1 } else { 1 };

    let (val0, _) = evaluate(&model, data, &split.val, &cfg)?;
    let mut best = (selection_key(&val0), 0usize, model.store.clone());
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order = split.train.clone();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0)));
        let (mut sum_loss, mut sum_ce, mut sum_al, mut nb) = (0.0, 0.0, 0.0, 0usize);
        for (bi, idx) in batches(&order, cfg.batch_size, min_batch).iter().enumerate() {
            let batch = Batch::new(data, idx)?;
            let mut step_align = None;
            let mut local;
            if cfg.use_cma {
                let avail = max_negatives(&batch.video_ids);
                if avail == 0 {
                    log::warn!("epoch {epoch} batch {bi}: no cross-video negatives, alignment skipped");
                } else {
                    local = align;
                    if avail < local.k_l.max(local.k_v) {
                        log::warn!("epoch {epoch} batch {bi}: only {avail} negatives available");
                        local.k_l = local.k_l.min(avail);
                        local.k_v = local.k_v.min(avail);
                    }
                    step_align = Some((local, mix(cfg.seed, epoch as u64, bi as u64 + 1)));
                }
            }
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let (total, ce, al, _) = model.loss(
                &mut g,
                &p,
                &batch,
                cfg.use_gsg_smoothing_train,
                step_align.as_ref().map(|(a, s)| (a, *s)),
            )?;
            let (lv, cv) = (g.value(total).item(), g.value(ce).item());
            let av = al.map(|a| g.value(a).item());
            if !lv.is_finite() {
                return Err(Error::Run(format!(
                    "loss diverged at epoch {epoch}, batch {bi}: total {lv}, cross-entropy {cv}, align {av:?}, sigma {:.4}",
                    model.gsg.sigma(&model.store)
                )));
            }
            let grads = g.backward(total);
            let gs = model.store.collect_grads(&grads, &p);
            opt.step(&mut model.store, &gs, &frozen);
            sum_loss += lv;
            sum_ce += cv;
            sum_al += av.unwrap_or(0.0);
            nb += 1;
        }
        if !model.store.all_finite() {
            return Err(Error::Run(format!("non-finite parameters after epoch {epoch}")));
        }
        let (val, _) = evaluate(&model, data, &split.val, &cfg)?;
        let nbf = nb.max(1) as f64;
        let log = EpochLog {
            epoch,
            loss: sum_loss / nbf,
            ce: sum_ce / nbf,
            align: cfg.use_cma.then_some(sum_al / nbf),
            val_acc_gqa: val.acc_gqa,
            val_acc_vqa: val.acc_vqa,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} ce {:.4} val Acc@GQA {:.2} Acc@VQA {:.2}",
            log.loss,
            log.ce,
            log.val_acc_gqa,
            log.val_acc_vqa
        );
        logs.push(log);
        if selection_key(&val) > best.0 {
            best = (selection_key(&val), epoch, model.store.clone());
        }
    }

    model.store = best.2;
    let (report, predictions) = evaluate(&model, data, &split.test, &cfg)?;
    let record = RunRecord {
        seed: cfg.seed,
        epochs: logs,
        best_epoch: best.1,
        report,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        n_train: split.train.len(),
        n_val: split.val.len(),
        n_test: split.test.len(),
        config: cfg,
    };
    Ok(TrainedRun {
        record,
        model,
        split,
        predictions,
    })
}

/// Answer 0 and the whole video for every question.
pub fn random_baseline(data: &Dataset) -> Result<EvalReport> {
    random_baseline_with(data, Averaging::Question)
}

pub fn random_baseline_with(data: &Dataset, averaging: Averaging) -> Result<EvalReport> {
    data.validate()?;
    let preds = data
        .samples
        .iter()
        .map(|s| {
            let meta = data
                .video(&s.video_id)
                .ok_or_else(|| Error::Data(format!("unknown video {}", s.video_id)))?;
            Ok(Prediction {
                qid: s.qid.clone(),
                answer_idx: 0,
                interval: meta.whole(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    grade(&preds, &data.samples, &DEFAULT_THRESHOLDS, averaging)
}
