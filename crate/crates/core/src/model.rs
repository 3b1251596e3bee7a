//! The full answer-and-ground model over batches of samples.
//!
//! ```text
//! frames ─ encoder ─ v ─┬─ attention(v, q) ─ w ─ pool ─ v_t ─┐
//!                       └─ frame mean ─ v̄ ────────────────────┼─ front-door ─ f ─┐
//! qa_global ─ proj ─ back-door ─ q ────────────────────────────┘                  ├─ fuse ─ head ─ logits
//!                                  └──────────────────────────────────────────────┘
//! ```

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_loss_var, AlignConfig};
use crate::autograd::{Graph, Var};
use crate::causal::{eci_var, lci_var, ConfounderDictionary, EciParams, LciParams};
use crate::dataset::{Dataset, NUM_OPTIONS};
use crate::encoders::{AnswerHeadParams, EncoderConfig, TemporalEncoderParams};
use crate::error::{Error, Result};
use crate::evalmetrics::GroundingRecord;
use crate::grounding::{extract_interval, ph_interval, GSGParams, ATTENTION_GAIN};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalPolicy {
    /// Smoothed MLP attention from the grounding module.
    #[default]
    Gsg,
    /// Plain softmax of scaled frame/question dot products.
    Ph,
}

/// Which branches of the model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    pub use_lci: bool,
    pub use_eci: bool,
    pub policy: IntervalPolicy,
}

impl Default for ModelFlags {
    fn default() -> Self {
        ModelFlags {
            use_lci: true,
            use_eci: true,
            policy: IntervalPolicy::Gsg,
        }
    }
}

/// Stacked inputs for `B` samples with `n` frames each.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `(B*n) x d`.
    pub frames: Mat,
    /// `B x d`.
    pub qa_global: Mat,
    /// `(B*5) x d`.
    pub answers: Mat,
    pub targets: Vec<usize>,
    pub video_ids: Vec<String>,
    pub n: usize,
}

impl Batch {
    pub fn new(data: &Dataset, indices: &[usize]) -> Result<Self> {
        let first = indices
            .first()
            .ok_or_else(|| Error::Parameter("empty batch".into()))?;
        let n = data.features[*first].video_feats.rows();
        let d = data.dim;
        let mut frames = Vec::with_capacity(indices.len() * n * d);
        let mut qa = Vec::with_capacity(indices.len() * d);
        let mut answers = Vec::with_capacity(indices.len() * NUM_OPTIONS * d);
        let mut targets = Vec::with_capacity(indices.len());
        let mut video_ids = Vec::with_capacity(indices.len());
        for &i in indices {
            let f = &data.features[i];
            let s = &data.samples[i];
            if f.video_feats.rows() != n {
                return Err(Error::Data(format!(
                    "video {} has {} frames, the batch expects {n}",
                    s.video_id,
                    f.video_feats.rows()
                )));
            }
            frames.extend_from_slice(f.video_feats.data());
            qa.extend_from_slice(f.qa_global.data());
            answers.extend_from_slice(f.answer_feats.data());
            targets.push(s.correct_idx);
            video_ids.push(s.video_id.clone());
        }
        let b = indices.len();
        Ok(Batch {
            indices: indices.to_vec(),
            frames: Mat::from_vec(b * n, d, frames),
            qa_global: Mat::from_vec(b, d, qa),
            answers: Mat::from_vec(b * NUM_OPTIONS, d, answers),
            targets,
            video_ids,
            n,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Tape nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub encoded: Var,
    pub question: Var,
    pub scores: Var,
    pub attention: Var,
    pub segment: Var,
    pub frame_mean: Var,
    pub answer_feat: Var,
    pub fused: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub flags: ModelFlags,
    pub dim: usize,
    pub n_frames: usize,
    pub encoder: TemporalEncoderParams,
    pub qa_proj: ParamId,
    pub gsg: GSGParams,
    pub lci: LciParams,
    pub eci: EciParams,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub head: AnswerHeadParams,
    pub linguistic: Option<Arc<ConfounderDictionary>>,
    pub visual: Option<Arc<ConfounderDictionary>>,
}

impl Model {
    pub fn new(
        dim: usize,
        n_frames: usize,
        flags: ModelFlags,
        linguistic: Option<Arc<ConfounderDictionary>>,
        visual: Option<Arc<ConfounderDictionary>>,
        seed: u64,
    ) -> Result<Self> {
        if flags.use_lci && linguistic.is_none() {
            return Err(Error::Config("the back-door branch needs a linguistic dictionary".into()));
        }
        if flags.use_eci && visual.is_none() {
            return Err(Error::Config("the front-door branch needs a visual dictionary".into()));
        }
        for d in linguistic.iter().chain(&visual) {
            if d.dim() != dim {
                return Err(Error::Config(format!(
                    "dictionary width {} differs from feature width {dim}",
                    d.dim()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = TemporalEncoderParams::new(&mut store, EncoderConfig::new(dim, n_frames), &mut rng)?;
        let qa_proj = store.add("qa.proj", Mat::zeros(dim, dim));
        let gsg = GSGParams::with_gain(&mut store, n_frames, ATTENTION_GAIN);
        let lci = LciParams::new(&mut store, dim, &mut rng);
        let eci = EciParams::new(&mut store, dim, &mut rng);
        let mut fw = Mat::randn(2 * dim, dim, 0.01, &mut rng);
        for i in 0..dim {
            fw.row_mut(i)[i] += 0.5;
            fw.row_mut(dim + i)[i] += 0.5;
        }
        let fuse_w = store.add("fuse.weight", fw);
        let fuse_b = store.add("fuse.bias", Mat::zeros(1, dim));
        let head = AnswerHeadParams::new(&mut store, dim, &mut rng);
        Ok(Model {
            store,
            flags,
            dim,
            n_frames,
            encoder,
            qa_proj,
            gsg,
            lci,
            eci,
            fuse_w,
            fuse_b,
            head,
            linguistic,
            visual,
        })
    }

    /// Parameters that the active branches never touch.
    pub fn idle_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if !self.flags.use_lci {
            out.extend(self.lci.param_ids());
        }
        if !self.flags.use_eci {
            out.extend(self.eci.param_ids());
        }
        if self.flags.policy == IntervalPolicy::Ph {
            out.extend(self.gsg.param_ids());
        }
        out
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &Batch, smooth: bool) -> Result<ForwardVars> {
        if batch.n != self.n_frames {
            return Err(Error::Capacity(format!(
                "model built for {} frames, batch has {}",
                self.n_frames, batch.n
            )));
        }
        let b = batch.len();
        let frames = g.constant(batch.frames.clone());
        let encoded = self.encoder.forward(g, p, frames, batch.n)?;

        let q0 = g.constant(batch.qa_global.clone());
        let proj = g.matmul(q0, p.var(self.qa_proj));
        let mut question = g.add(q0, proj);
        if self.flags.use_lci {
            let dict = self.linguistic.as_deref().expect("checked at construction");
            question = lci_var(g, p, &self.lci, question, dict)?;
        }

        let (scores, attention) = match self.flags.policy {
            IntervalPolicy::Gsg => {
                let s = self.gsg.scores(g, p, encoded, question);
                (s, self.gsg.attention(g, p, s, smooth))
            }
            IntervalPolicy::Ph => {
                let s = g.segment_dot(encoded, question, batch.n);
                let s = g.scale(s, ATTENTION_GAIN);
                (s, g.softmax_rows(s))
            }
        };
        let segment = g.segment_pool(attention, encoded);
        let uniform = g.constant(Mat::filled(b, batch.n, 1.0 / batch.n as f64));
        let frame_mean = g.segment_pool(uniform, encoded);

        let answer_feat = if self.flags.use_eci {
            let dict = self.visual.as_deref().expect("checked at construction");
            eci_var(g, p, &self.eci, segment, frame_mean, question, dict)?.output
        } else {
            segment
        };
        let cat = g.concat_cols(&[answer_feat, question]);
        let fused = g.matmul(cat, p.var(self.fuse_w));
        let fused = g.add_row(fused, p.var(self.fuse_b));
        let answers = g.constant(batch.answers.clone());
        let logits = self.head.logits(g, p, fused, answers);
        Ok(ForwardVars {
            encoded,
            question,
            scores,
            attention,
            segment,
            frame_mean,
            answer_feat,
            fused,
            logits,
        })
    }

    /// Cross-entropy plus, when `align` is given, the alignment loss.
    /// Returns `(total, cross_entropy, align)` nodes.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        smooth: bool,
        align: Option<(&AlignConfig, u64)>,
    ) -> Result<(Var, Var, Option<Var>, ForwardVars)> {
        let fv = self.forward(g, p, batch, smooth)?;
        let ce = g.cross_entropy(fv.logits, batch.targets.clone());
        match align {
            Some((cfg, seed)) => {
                let al = align_loss_var(g, fv.segment, fv.question, &batch.video_ids, cfg, seed)?;
                let total = g.add(ce, al);
                Ok((total, ce, Some(al), fv))
            }
            None => Ok((ce, ce, None, fv)),
        }
    }

    /// Answers and intervals for every sample in `indices`.
    pub fn predict(
        &self,
        data: &Dataset,
        indices: &[usize],
        smooth: bool,
        gamma: f64,
        chunk: usize,
    ) -> Result<Vec<GroundingRecord>> {
        let mut out = Vec::with_capacity(indices.len());
        for part in indices.chunks(chunk.max(1)) {
            let batch = Batch::new(data, part)?;
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let fv = self.forward(&mut g, &p, &batch, smooth)?;
            let logits = g.value(fv.logits);
            let att = g.value(fv.attention);
            if !logits.is_finite() || !att.is_finite() {
                return Err(Error::Numeric("non-finite model output".into()));
            }
            for (r, &i) in part.iter().enumerate() {
                let s = &data.samples[i];
                let meta = data
                    .video(&s.video_id)
                    .ok_or_else(|| Error::Data(format!("unknown video {}", s.video_id)))?;
                let row = logits.row(r);
                let mut answer_idx = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[answer_idx] {
                        answer_idx = k;
                    }
                }
                let attention = att.row(r).to_vec();
                let interval = match self.flags.policy {
                    IntervalPolicy::Gsg => extract_interval(&attention, meta, gamma)?,
                    IntervalPolicy::Ph => ph_interval(&attention, meta, gamma)?,
                };
                out.push(GroundingRecord {
                    qid: s.qid.clone(),
                    answer_idx,
                    interval,
                    attention,
                });
            }
        }
        Ok(out)
    }
}
