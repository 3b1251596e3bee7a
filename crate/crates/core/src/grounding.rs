//! Gaussian smoothing grounding: frame/question attention, adaptive temporal
//! smoothing, attention pooling and interval extraction.

use crate::autograd::{convolve_rows, gaussian_kernel, softmax_in_place, Graph, Padding, Var};
use crate::dataset::{frame_time_bounds, Interval, VideoMeta};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{dot, Mat};

pub const DEFAULT_GAMMA: f64 = 0.5;
/// Initial slope of the score MLP in the full model, and the fixed score
/// scale of post-hoc attention.
pub const ATTENTION_GAIN: f64 = 5.0;

/// Score MLP (`n -> 2n -> n`, GELU) and the log of the smoothing width.
///
/// The MLP starts as an exact scaled identity: with `W1 = [I | -I]` and
/// `W2 = c [I; -I]`, `c (gelu(x) - gelu(-x)) = c x`.
#[derive(Clone, Debug)]
pub struct GSGParams {
    pub n: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    log_sigma: ParamId,
}

impl GSGParams {
    /// Identity MLP.
    pub fn new(store: &mut ParamStore, n: usize) -> Self {
        Self::with_gain(store, n, 1.0)
    }

    pub fn with_gain(store: &mut ParamStore, n: usize, gain: f64) -> Self {
        let mut w1 = Mat::zeros(n, 2 * n);
        let mut w2 = Mat::zeros(2 * n, n);
        for i in 0..n {
            w1.row_mut(i)[i] = 1.0;
            w1.row_mut(i)[n + i] = -1.0;
            w2.row_mut(i)[i] = gain;
            w2.row_mut(n + i)[i] = -gain;
        }
        GSGParams {
            n,
            w1: store.add("gsg.mlp.in", w1),
            b1: store.add("gsg.mlp.in_bias", Mat::zeros(1, 2 * n)),
            w2: store.add("gsg.mlp.out", w2),
            b2: store.add("gsg.mlp.out_bias", Mat::zeros(1, n)),
            log_sigma: store.add("gsg.log_sigma", Mat::scalar(0.0)),
        }
    }

    pub fn log_sigma_id(&self) -> ParamId {
        self.log_sigma
    }

    pub fn mlp_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2, self.log_sigma]
    }

    pub fn sigma(&self, store: &ParamStore) -> f64 {
        store.get(self.log_sigma).item().exp()
    }

    /// `B x n` MLP scores from `(B*n) x d` frames and `B x d` queries.
    pub fn scores(&self, g: &mut Graph, p: &Bound, frames: Var, query: Var) -> Var {
        let raw = g.segment_dot(frames, query, self.n);
        self.mlp(g, p, raw)
    }

    pub fn mlp(&self, g: &mut Graph, p: &Bound, raw: Var) -> Var {
        let h = g.matmul(raw, p.var(self.w1));
        let h = g.add_row(h, p.var(self.b1));
        let h = g.gelu(h);
        let s = g.matmul(h, p.var(self.w2));
        g.add_row(s, p.var(self.b2))
    }

    /// Smooths (when `smooth`) and normalizes scores into per-row attention.
    pub fn attention(&self, g: &mut Graph, p: &Bound, scores: Var, smooth: bool) -> Var {
        let s = if smooth {
            g.gaussian_conv(scores, p.var(self.log_sigma), Padding::Reflect)
        } else {
            scores
        };
        g.softmax_rows(s)
    }
}

/// Attention weights over frames for one question, with the extracted span.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroundingResult {
    pub attention: Vec<f64>,
    pub interval: Interval,
    pub segment_feat: Vec<f64>,
    pub peak_idx: usize,
}

impl GroundingResult {
    pub fn new(attention: Vec<f64>, video_feats: &Mat, meta: &VideoMeta, gamma: f64) -> Result<Self> {
        let interval = extract_interval(&attention, meta, gamma)?;
        let segment_feat = attention_pool(video_feats, &attention)?;
        let peak_idx = argmax_first(&attention);
        Ok(GroundingResult {
            attention,
            interval,
            segment_feat,
            peak_idx,
        })
    }
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

/// Pre-smoothing scores `MLP(v · l_g)` for one video.
pub fn cross_modal_attention(
    video_feats: &Mat,
    qa_global: &[f64],
    params: &GSGParams,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    check_finite("frame features", video_feats.data())?;
    check_finite("question feature", qa_global)?;
    if video_feats.rows() != params.n || video_feats.cols() != qa_global.len() {
        return Err(Error::Parameter(format!(
            "frames {:?} and query width {} do not fit a grounding head over {} frames",
            video_feats.shape(),
            qa_global.len(),
            params.n
        )));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let frames = g.constant(video_feats.clone());
    let q = g.constant(Mat::row_vector(qa_global.to_vec()));
    let s = params.scores(&mut g, &p, frames, q);
    Ok(g.value(s).data().to_vec())
}

/// Reflect-padded Gaussian filtering followed by a softmax over frames.
pub fn gaussian_smooth(scores: &[f64], sigma: f64) -> Result<Vec<f64>> {
    gaussian_smooth_with(scores, sigma, Padding::Reflect)
}

pub fn gaussian_smooth_with(scores: &[f64], sigma: f64, padding: Padding) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("smoothing width must be positive, got {sigma}")));
    }
    if scores.is_empty() {
        return Err(Error::Parameter("cannot smooth an empty score vector".into()));
    }
    check_finite("scores", scores)?;
    let (kernel, _) = gaussian_kernel(sigma);
    let x = Mat::row_vector(scores.to_vec());
    let mut out = convolve_rows(&x, &kernel, padding).into_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_attention(attention: &[f64], meta: &VideoMeta, gamma: f64) -> Result<()> {
    meta.validate()?;
    if attention.len() != meta.n_frames {
        return Err(Error::Parameter(format!(
            "attention has {} entries for a video of {} frames",
            attention.len(),
            meta.n_frames
        )));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Parameter(format!("threshold ratio must be in (0, 1], got {gamma}")));
    }
    if attention.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::Parameter("attention must be finite and non-negative".into()));
    }
    Ok(())
}

/// Expands the maximal run of frames with `attention >= gamma * max` around
/// the (earliest) peak and maps it to seconds.
pub fn extract_interval(attention: &[f64], meta: &VideoMeta, gamma: f64) -> Result<Interval> {
    check_attention(attention, meta, gamma)?;
    let peak = argmax_first(attention);
    let thr = gamma * attention[peak];
    let mut lo = peak;
    while lo > 0 && attention[lo - 1] >= thr {
        lo -= 1;
    }
    let mut hi = peak;
    while hi + 1 < attention.len() && attention[hi + 1] >= thr {
        hi += 1;
    }
    let (start, _) = frame_time_bounds(meta, lo)?;
    let (_, end) = frame_time_bounds(meta, hi)?;
    Ok(Interval { start, end })
}

/// Interval from attention read off the answer path without the grounding
/// module. Same contract as [`extract_interval`].
pub fn ph_interval(attention_from_qa_head: &[f64], meta: &VideoMeta, gamma: f64) -> Result<Interval> {
    extract_interval(attention_from_qa_head, meta, gamma)
}

/// `wᵀ v`: the attention-weighted mean of frame features.
pub fn attention_pool(video_feats: &Mat, attention: &[f64]) -> Result<Vec<f64>> {
    if video_feats.rows() != attention.len() {
        return Err(Error::Parameter(format!(
            "{} attention weights for {} frames",
            attention.len(),
            video_feats.rows()
        )));
    }
    let w = Mat::row_vector(attention.to_vec());
    Ok(w.matmul(video_feats).into_vec())
}

/// Raw frame/question dot products, the input to the post-hoc policy.
pub fn raw_scores(video_feats: &Mat, qa_global: &[f64]) -> Vec<f64> {
    (0..video_feats.rows()).map(|i| dot(video_feats.row(i), qa_global)).collect()
}
