//! Temporal encoder over frame features and the answer scoring head.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::dataset::NUM_OPTIONS;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Mat;

pub const ENCODER_LAYERS: usize = 2;
const LN_EPS: f64 = 1e-5;
/// Fixed multiplier on the learned similarity scale of the answer head.
pub const SCALE_GAIN: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    /// Size of the positional embedding table.
    pub n_max: usize,
    pub ffn_mult: usize,
}

impl EncoderConfig {
    pub fn new(dim: usize, n_max: usize) -> Self {
        EncoderConfig {
            dim,
            heads: 4,
            n_max,
            ffn_mult: 4,
        }
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ff1: ParamId,
    ff1_bias: ParamId,
    ff2: ParamId,
    ff2_bias: ParamId,
}

/// Two pre-norm self-attention blocks with learned absolute positions.
///
/// There is no final normalization: with every projection zeroed the encoder
/// reduces to `x + pos[0..n]`.
#[derive(Clone, Debug)]
pub struct TemporalEncoderParams {
    pub cfg: EncoderConfig,
    pos: ParamId,
    layers: Vec<LayerParams>,
}

fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Mat {
    Mat::randn(fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), rng)
}

impl TemporalEncoderParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.dim == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible into {} heads",
                cfg.dim, cfg.heads
            )));
        }
        let d = cfg.dim;
        let h = d * cfg.ffn_mult;
        let pos = store.add("encoder.pos", Mat::randn(cfg.n_max, d, 0.02, rng));
        // Residual branches start small so the block begins near identity.
        let out_std = 0.1 / d as f64;
        let layers = (0..ENCODER_LAYERS)
            .map(|l| {
                let p = |s: &str| format!("encoder.layer{l}.{s}");
                LayerParams {
                    ln1_gain: store.add(p("ln1.gain"), Mat::filled(1, d, 1.0)),
                    ln1_bias: store.add(p("ln1.bias"), Mat::zeros(1, d)),
                    wq: store.add(p("attn.q"), xavier(d, d, rng)),
                    wk: store.add(p("attn.k"), xavier(d, d, rng)),
                    wv: store.add(p("attn.v"), xavier(d, d, rng)),
                    wo: store.add(p("attn.out"), Mat::randn(d, d, out_std, rng)),
                    ln2_gain: store.add(p("ln2.gain"), Mat::filled(1, d, 1.0)),
                    ln2_bias: store.add(p("ln2.bias"), Mat::zeros(1, d)),
                    ff1: store.add(p("ffn.in"), xavier(d, h, rng)),
                    ff1_bias: store.add(p("ffn.in_bias"), Mat::zeros(1, h)),
                    ff2: store.add(p("ffn.out"), Mat::randn(h, d, out_std, rng)),
                    ff2_bias: store.add(p("ffn.out_bias"), Mat::zeros(1, d)),
                }
            })
            .collect();
        Ok(TemporalEncoderParams { cfg, pos, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.pos];
        for l in &self.layers {
            ids.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.wk, l.wv, l.wo, l.ln2_gain, l.ln2_bias, l.ff1,
                l.ff1_bias, l.ff2, l.ff2_bias,
            ]);
        }
        ids
    }

    pub fn positional_id(&self) -> ParamId {
        self.pos
    }

    /// Zeroes every parameter except the positional table.
    pub fn zero_blocks(&self, store: &mut ParamStore) {
        for id in self.param_ids().into_iter().skip(1) {
            let (r, c) = store.get(id).shape();
            store.set(id, Mat::zeros(r, c));
        }
    }

    /// Encodes `frames`, a `(B*n) x d` stack of `B` videos with `n` frames each.
    pub fn forward(&self, g: &mut Graph, p: &Bound, frames: Var, n: usize) -> Result<Var> {
        if n > self.cfg.n_max {
            return Err(Error::Capacity(format!(
                "{n} frames exceed the positional table of {}",
                self.cfg.n_max
            )));
        }
        let rows = g.value(frames).rows();
        if n == 0 || rows % n != 0 {
            return Err(Error::Parameter(format!(
                "{rows} frame rows do not split into videos of {n} frames"
            )));
        }
        let pos = g.gather_rows(p.var(self.pos), (0..rows).map(|i| i % n).collect());
        let mut x = g.add(frames, pos);
        for l in &self.layers {
            let h = g.layer_norm(x, p.var(l.ln1_gain), p.var(l.ln1_bias), LN_EPS);
            let q = g.matmul(h, p.var(l.wq));
            let k = g.matmul(h, p.var(l.wk));
            let v = g.matmul(h, p.var(l.wv));
            let a = g.segment_attention(q, k, v, n, self.cfg.heads);
            let a = g.matmul(a, p.var(l.wo));
            x = g.add(x, a);
            let h = g.layer_norm(x, p.var(l.ln2_gain), p.var(l.ln2_bias), LN_EPS);
            let f = g.matmul(h, p.var(l.ff1));
            let f = g.add_row(f, p.var(l.ff1_bias));
            let f = g.gelu(f);
            let f = g.matmul(f, p.var(l.ff2));
            let f = g.add_row(f, p.var(l.ff2_bias));
            x = g.add(x, f);
        }
        Ok(x)
    }
}

/// Runs the encoder on one video's `n x d` frame features.
pub fn encode_temporal(video_feats: &Mat, params: &TemporalEncoderParams, store: &ParamStore) -> Result<Mat> {
    if video_feats.cols() != params.cfg.dim {
        return Err(Error::Parameter(format!(
            "frame width {} differs from encoder width {}",
            video_feats.cols(),
            params.cfg.dim
        )));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(video_feats.clone());
    let out = params.forward(&mut g, &p, x, video_feats.rows())?;
    Ok(g.value(out).clone())
}

/// Scores the five candidate answers against a fused feature.
///
/// `logit_k = g s <answer_k, f> + (S f)_k + b_k`: a learned-temperature match
/// between the fused feature `f` and each answer's features, plus a per-slot
/// term.
#[derive(Clone, Debug)]
pub struct AnswerHeadParams {
    scale: ParamId,
    slot_proj: ParamId,
    slot_bias: ParamId,
}

impl AnswerHeadParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        AnswerHeadParams {
            scale: store.add("answer.scale", Mat::zeros(1, 1)),
            slot_proj: store.add("answer.slot", Mat::randn(dim, NUM_OPTIONS, 0.01, rng)),
            slot_bias: store.add("answer.slot_bias", Mat::zeros(1, NUM_OPTIONS)),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.scale, self.slot_proj, self.slot_bias]
    }

    pub fn num_options(&self, store: &ParamStore) -> usize {
        store.get(self.slot_bias).cols()
    }

    /// `fused` is `B x d`, `answers` is `(B*5) x d`; returns `B x 5` logits
    /// `g s <a, f> + S f + b` with the fixed gain
    /// `g = SCALE_GAIN`.
    pub fn logits(&self, g: &mut Graph, p: &Bound, fused: Var, answers: Var) -> Var {
        let b = g.value(fused).rows();
        let ones = g.constant(Mat::filled(b, 1, 1.0));
        let scale = g.matmul(ones, p.var(self.scale));
        let dots = g.segment_dot(answers, fused, NUM_OPTIONS);
        let dots = g.mul_col(dots, scale);
        let dots = g.scale(dots, SCALE_GAIN);
        let slots = g.matmul(fused, p.var(self.slot_proj));
        let slots = g.add_row(slots, p.var(self.slot_bias));
        g.add(dots, slots)
    }
}

/// Answer distribution for one fused feature (`1 x d`) and its `5 x d` answers.
pub fn score_answers(
    fused_feat: &Mat,
    answer_feats: &Mat,
    params: &AnswerHeadParams,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    if !fused_feat.is_finite() || !answer_feats.is_finite() {
        return Err(Error::Numeric("non-finite input to answer scoring".into()));
    }
    if answer_feats.rows() != NUM_OPTIONS || answer_feats.cols() != fused_feat.cols() || fused_feat.rows() != 1 {
        return Err(Error::Parameter(format!(
            "expected a 1 x d fused feature and {NUM_OPTIONS} x d answers, got {:?} and {:?}",
            fused_feat.shape(),
            answer_feats.shape()
        )));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let f = g.constant(fused_feat.clone());
    let a = g.constant(answer_feats.clone());
    let logits = params.logits(&mut g, &p, f, a);
    let probs = g.softmax_rows(logits);
    Ok(g.value(probs).data().to_vec())
}

/// Softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    crate::autograd::softmax_in_place(&mut v);
    v
}
