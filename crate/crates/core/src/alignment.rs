//! Bidirectional contrastive alignment between grounded segment features and
//! question features, with negatives drawn from other videos in the batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub k_l: usize,
    pub k_v: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lambda1: 1.0,
            lambda2: 0.5,
            tau: 0.07,
            k_l: 32,
            k_v: 32,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Parameter(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.k_l == 0 || self.k_v == 0 {
            return Err(Error::Parameter("negative counts must be at least 1".into()));
        }
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::Parameter("loss weights must be finite".into()));
        }
        Ok(())
    }
}

/// `-log(e^{q·k+/τ} / (e^{q·k+/τ} + Σ e^{q·k-/τ}))` for one query.
pub fn info_nce(query: &[f64], positive: &[f64], negatives: &Mat, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if negatives.rows() == 0 {
        return Err(Error::Parameter("at least one negative is required".into()));
    }
    let mut g = Graph::new();
    let q = g.constant(Mat::row_vector(query.to_vec()));
    let p = g.constant(Mat::row_vector(positive.to_vec()));
    let n = g.constant(negatives.clone());
    let loss = info_nce_var(&mut g, q, p, n, tau);
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::Numeric("contrastive loss is not finite".into()));
    }
    Ok(v)
}

/// Tape version of [`info_nce`]: `query` and `positive` are `1 x d`,
/// `negatives` is `k x d`.
pub fn info_nce_var(g: &mut Graph, query: Var, positive: Var, negatives: Var, tau: f64) -> Var {
    let k = g.value(negatives).rows();
    let sp = g.matmul_t(query, positive);
    let sn = g.matmul_t(query, negatives);
    let s = g.concat_cols(&[sp, sn]);
    let s = g.scale(s, 1.0 / tau);
    g.info_nce(s, &[0], &[(1..=k).collect()])
}

/// Batch indices chosen for one anchor. The positives are the anchor itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSample {
    pub l_neg: Vec<usize>,
    pub v_neg: Vec<usize>,
    pub l_pos: usize,
    pub v_pos: usize,
}

fn candidates<S: AsRef<str>>(video_ids: &[S], index: usize) -> Vec<usize> {
    let own = video_ids[index].as_ref();
    (0..video_ids.len())
        .filter(|&j| video_ids[j].as_ref() != own)
        .collect()
}

/// Draws `k_l` question negatives and `k_v` segment negatives without
/// replacement from batch entries of other videos.
pub fn sample_negatives<S: AsRef<str>>(
    video_ids: &[S],
    index: usize,
    k_l: usize,
    k_v: usize,
    seed: u64,
) -> Result<NegativeSample> {
    if index >= video_ids.len() {
        return Err(Error::Parameter(format!(
            "index {index} outside a batch of {}",
            video_ids.len()
        )));
    }
    if k_l == 0 || k_v == 0 {
        return Err(Error::Parameter("negative counts must be at least 1".into()));
    }
    let pool = candidates(video_ids, index);
    let need = k_l.max(k_v);
    if pool.len() < need {
        return Err(Error::Sampling(format!(
            "entry {index} has {} other-video entries, {need} negatives requested",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut draw = |k: usize| -> Vec<usize> {
        rand::seq::index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    let l_neg = draw(k_l);
    let v_neg = draw(k_v);
    Ok(NegativeSample {
        l_neg,
        v_neg,
        l_pos: index,
        v_pos: index,
    })
}

/// Largest negative count every entry of the batch can supply.
pub fn max_negatives<S: AsRef<str>>(video_ids: &[S]) -> usize {
    (0..video_ids.len())
        .map(|i| candidates(video_ids, i).len())
        .min()
        .unwrap_or(0)
}

/// `λ1 · mean InfoNCE(v_t, l+, l-) + λ2 · mean InfoNCE(l_g, v+, v-)` on the
/// tape. `segments` and `questions` are `B x d`.
pub fn align_loss_var<S: AsRef<str>>(
    g: &mut Graph,
    segments: Var,
    questions: Var,
    video_ids: &[S],
    cfg: &AlignConfig,
    seed: u64,
) -> Result<Var> {
    cfg.validate()?;
    let b = g.value(segments).rows();
    if g.value(questions).rows() != b || video_ids.len() != b {
        return Err(Error::Parameter("segment, question and video counts differ".into()));
    }
    let mut l_neg = Vec::with_capacity(b);
    let mut v_neg = Vec::with_capacity(b);
    for i in 0..b {
        let s = sample_negatives(video_ids, i, cfg.k_l, cfg.k_v, seed)?;
        l_neg.push(s.l_neg);
        v_neg.push(s.v_neg);
    }
    let pos: Vec<usize> = (0..b).collect();
    let mut total: Option<Var> = None;
    if cfg.lambda1 != 0.0 {
        let s = g.matmul_t(segments, questions);
        let s = g.scale(s, 1.0 / cfg.tau);
        let l = g.info_nce(s, &pos, &l_neg);
        total = Some(g.scale(l, cfg.lambda1));
    }
    if cfg.lambda2 != 0.0 {
        let s = g.matmul_t(questions, segments);
        let s = g.scale(s, 1.0 / cfg.tau);
        let l = g.info_nce(s, &pos, &v_neg);
        let l = g.scale(l, cfg.lambda2);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Mat::scalar(0.0)),
    })
}

/// Value of [`align_loss_var`] for plain matrices.
pub fn align_loss<S: AsRef<str>>(
    segments: &Mat,
    questions: &Mat,
    video_ids: &[S],
    cfg: &AlignConfig,
    seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(segments.clone());
    let q = g.constant(questions.clone());
    let l = align_loss_var(&mut g, s, q, video_ids, cfg, seed)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_scores_give_log_k_plus_one() {
        let q = [0.2, -0.1, 0.4];
        let negs = Mat::from_rows(&[q.to_vec()]);
        let l = info_nce(&q, &q, &negs, 0.07).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let negs = Mat::from_rows(&vec![q.to_vec(); 7]);
        let l = info_nce(&q, &q, &negs, 0.5).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_positive_drives_loss_to_zero() {
        let q = [1.0, 0.0];
        let negs = Mat::from_rows(&[vec![-1.0, 0.0], vec![0.0, 1.0]]);
        let l = info_nce(&q, &[50.0, 0.0], &negs, 0.07).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn temperature_must_be_positive() {
        let negs = Mat::zeros(1, 2);
        assert!(matches!(info_nce(&[1.0, 0.0], &[1.0, 0.0], &negs, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn all_others_are_chosen_when_counts_match() {
        let ids: Vec<String> = (0..33).map(|i| format!("v{i}")).collect();
        let s = sample_negatives(&ids, 4, 32, 32, 9).unwrap();
        let mut l = s.l_neg.clone();
        l.sort();
        let expect: Vec<usize> = (0..33).filter(|&j| j != 4).collect();
        assert_eq!(l, expect);
        assert_eq!((s.l_pos, s.v_pos), (4, 4));
    }

    #[test]
    fn shortage_is_a_sampling_error() {
        let ids = ["a", "a", "b", "c"];
        assert!(matches!(sample_negatives(&ids, 0, 3, 1, 0), Err(Error::Sampling(_))));
        assert_eq!(max_negatives(&ids), 2);
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let ids = ["a", "b", "c"];
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0], vec![3.0, -1.0]]);
        let cfg = AlignConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            k_l: 2,
            k_v: 2,
            ..AlignConfig::default()
        };
        assert_eq!(align_loss(&m, &m, &ids, &cfg, 1).unwrap(), 0.0);
    }
}
