//! Synthetic confounded video-QA data, plus the on-disk manifest format.
//!
//! A generated video is a sequence of frame features. Each question about the
//! video owns one event: a unit-norm signature vector tied to the question's
//! (verb, object) pair, planted on the frames inside the question's ground
//! truth interval. Frames outside every event carry a per-video scene vector.
//! Question token rows carry the same signature, so the grounding cue is
//! learnable, and the correct answer option carries it as well.
//!
//! Linguistic bias is planted per (subject, object) entity pair: with
//! probability `p_answer_bias` a sample gets its pair's bias embedding added to
//! the question and its correct answer moved to the pair's preferred slot.

mod io;

use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use io::{load_dataset, save_dataset, MANIFEST_FILE};

/// Number of candidate answers per question.
pub const NUM_OPTIONS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    /// Seconds.
    pub duration: f64,
    /// Frames sampled evenly over the duration.
    pub n_frames: usize,
}

impl VideoMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Validation(format!(
                "video {}: duration {} is not positive",
                self.video_id, self.duration
            )));
        }
        if self.n_frames < 2 {
            return Err(Error::Validation(format!(
                "video {}: needs at least 2 frames, has {}",
                self.video_id, self.n_frames
            )));
        }
        Ok(())
    }

    pub fn whole(&self) -> Interval {
        Interval::new(0.0, self.duration)
    }
}

/// Time span `[frame_idx * D / n, (frame_idx + 1) * D / n)` covered by a frame.
pub fn frame_time_bounds(meta: &VideoMeta, frame_idx: usize) -> Result<(f64, f64)> {
    if frame_idx >= meta.n_frames {
        return Err(Error::Parameter(format!(
            "frame {frame_idx} out of range for {} frames",
            meta.n_frames
        )));
    }
    let n = meta.n_frames as f64;
    let end = if frame_idx + 1 == meta.n_frames {
        meta.duration
    } else {
        (frame_idx + 1) as f64 * meta.duration / n
    };
    Ok((frame_idx as f64 * meta.duration / n, end))
}

/// A closed time interval in seconds, serialized as `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub const fn new(start: f64, end: f64) -> Self {
        Interval { start, end }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn intersection(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }
}

impl From<[f64; 2]> for Interval {
    fn from([start, end]: [f64; 2]) -> Self {
        Interval { start, end }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.start, i.end]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: u32,
    pub verb: u32,
    pub object: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Causal,
    Temporal,
}

impl QuestionType {
    pub fn index(self) -> usize {
        match self {
            QuestionType::Causal => 0,
            QuestionType::Temporal => 1,
        }
    }
}

/// One question about one video.
///
/// Token ids live in a single space: subjects `0..E`, verbs `E..E+V`, objects
/// `E+V..E+V+O`. Questions are `[subject, verb, object]`; answer options are
/// `[verb, object]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub qid: String,
    pub video_id: String,
    pub question_tokens: Vec<u32>,
    pub answer_options: Vec<Vec<u32>>,
    pub correct_idx: usize,
    pub gt_intervals: Vec<Interval>,
    #[serde(default)]
    pub triple: Option<Triple>,
    pub question_type: QuestionType,
    #[serde(default)]
    pub bias_entity_pair: Option<u32>,
}

/// Per-sample features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `n x d`, shared by all questions of a video.
    pub video_feats: Arc<Mat>,
    /// `m x d`, one row per question token.
    pub qa_token_feats: Mat,
    /// `1 x d` coordinate-wise max over `qa_token_feats`.
    pub qa_global: Mat,
    /// `5 x d`, one row per answer option.
    pub answer_feats: Mat,
}

impl FeatureBundle {
    pub fn new(video_feats: Arc<Mat>, qa_token_feats: Mat, answer_feats: Mat) -> Self {
        let qa_global = qa_token_feats.max_over_rows();
        FeatureBundle {
            video_feats,
            qa_token_feats,
            qa_global,
            answer_feats,
        }
    }

    pub fn dim(&self) -> usize {
        self.qa_global.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub entity: usize,
    pub verb: usize,
    pub object: usize,
}

impl VocabSizes {
    pub fn verb_token(&self, verb: u32) -> u32 {
        self.entity as u32 + verb
    }

    pub fn object_token(&self, object: u32) -> u32 {
        (self.entity + self.verb) as u32 + object
    }

    pub fn total(&self) -> usize {
        self.entity + self.verb + self.object
    }
}

/// Token embedding tables used to build semantic graph features.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub entity: Mat,
    pub verb: Mat,
    pub object: Mat,
    /// One row per [`QuestionType`].
    pub qtype: Mat,
}

impl Embeddings {
    pub fn dim(&self) -> usize {
        self.entity.cols()
    }

    /// Embedding of a token in the unified id space.
    pub fn token(&self, vocab: &VocabSizes, token: u32) -> Result<&[f64]> {
        let t = token as usize;
        if t < vocab.entity {
            Ok(self.entity.row(t))
        } else if t < vocab.entity + vocab.verb {
            Ok(self.verb.row(t - vocab.entity))
        } else if t < vocab.total() {
            Ok(self.object.row(t - vocab.entity - vocab.verb))
        } else {
            Err(Error::Data(format!("token id {token} outside the vocabulary")))
        }
    }
}

/// Bias and difficulty knobs of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub p_answer_bias: f64,
    /// Target mean of `|gt| / duration`.
    pub segment_ratio_mean: f64,
    pub entity_vocab_size: usize,
    pub verb_vocab_size: usize,
    pub object_vocab_size: usize,
    /// Noise norm: each coordinate gets `N(0, noise_sigma^2 / d)`.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        BiasSpec {
            p_answer_bias: 0.0,
            segment_ratio_mean: 0.2,
            entity_vocab_size: 12,
            verb_vocab_size: 16,
            object_vocab_size: 16,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl BiasSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_answer_bias) {
            return Err(Error::Parameter(format!(
                "p_answer_bias {} outside [0, 1]",
                self.p_answer_bias
            )));
        }
        if !(self.segment_ratio_mean > 0.0 && self.segment_ratio_mean < 1.0) {
            return Err(Error::Parameter(format!(
                "segment_ratio_mean {} outside (0, 1)",
                self.segment_ratio_mean
            )));
        }
        if self.entity_vocab_size == 0 || self.verb_vocab_size == 0 || self.object_vocab_size == 0 {
            return Err(Error::Parameter("vocabulary sizes must be positive".into()));
        }
        if self.verb_vocab_size * self.object_vocab_size < NUM_OPTIONS {
            return Err(Error::Parameter(format!(
                "need at least {NUM_OPTIONS} (verb, object) events for distinct answers"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise_sigma {} must be non-negative",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> VocabSizes {
        VocabSizes {
            entity: self.entity_vocab_size,
            verb: self.verb_vocab_size,
            object: self.object_vocab_size,
        }
    }
}

/// Shape settings of the generator that are not bias knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Feature width `d`. Required.
    pub dim: Option<usize>,
    pub n_frames: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    /// Concentration `a + b` of the Beta distribution segment ratios are drawn from.
    pub ratio_concentration: f64,
    /// Norm of the per-video scene vector on frames outside events.
    pub scene_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            dim: Some(64),
            n_frames: 32,
            min_duration: 30.0,
            max_duration: 50.0,
            ratio_concentration: 8.0,
            scene_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub vocab: VocabSizes,
    pub embeddings: Option<Embeddings>,
    pub videos: Vec<VideoMeta>,
    pub samples: Vec<QASample>,
    /// Parallel to `samples`.
    pub features: Vec<FeatureBundle>,
}

impl Dataset {
    pub fn video(&self, video_id: &str) -> Option<&VideoMeta> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    /// Video metadata for every sample, in sample order.
    pub fn sample_videos(&self) -> Result<Vec<&VideoMeta>> {
        let index: std::collections::HashMap<&str, &VideoMeta> =
            self.videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
        self.samples
            .iter()
            .map(|s| {
                index.get(s.video_id.as_str()).copied().ok_or_else(|| {
                    Error::Validation(format!("sample {} references unknown video {}", s.qid, s.video_id))
                })
            })
            .collect()
    }

    /// Checks the cross-record invariants shared by generated and loaded data.
    pub fn validate(&self) -> Result<()> {
        let mut seen_videos = std::collections::HashSet::new();
        for v in &self.videos {
            v.validate()?;
            if !seen_videos.insert(v.video_id.as_str()) {
                return Err(Error::Validation(format!("duplicate video_id {}", v.video_id)));
            }
        }
        if self.features.len() != self.samples.len() {
            return Err(Error::Validation("features and samples differ in length".into()));
        }
        let metas = self.sample_videos()?;
        let mut seen = std::collections::HashSet::new();
        for ((s, f), meta) in self.samples.iter().zip(&self.features).zip(metas) {
            if !seen.insert(s.qid.as_str()) {
                return Err(Error::Validation(format!("duplicate qid {}", s.qid)));
            }
            if s.answer_options.len() != NUM_OPTIONS {
                return Err(Error::Validation(format!(
                    "sample {} has {} answer options, expected {NUM_OPTIONS}",
                    s.qid,
                    s.answer_options.len()
                )));
            }
            if s.correct_idx >= NUM_OPTIONS {
                return Err(Error::Validation(format!(
                    "sample {}: correct_idx {} out of range",
                    s.qid, s.correct_idx
                )));
            }
            if s.gt_intervals.is_empty() {
                return Err(Error::Validation(format!("sample {} has no ground-truth interval", s.qid)));
            }
            for g in &s.gt_intervals {
                if !(0.0 <= g.start && g.start < g.end && g.end <= meta.duration) {
                    return Err(Error::Validation(format!(
                        "sample {}: interval [{}, {}] invalid for duration {}",
                        s.qid, g.start, g.end, meta.duration
                    )));
                }
            }
            if f.video_feats.shape() != (meta.n_frames, self.dim) {
                return Err(Error::Validation(format!(
                    "sample {}: video features {:?}, expected ({}, {})",
                    s.qid,
                    f.video_feats.shape(),
                    meta.n_frames,
                    self.dim
                )));
            }
            let m = s.question_tokens.len();
            if f.answer_feats.shape() != (NUM_OPTIONS, self.dim) {
                return Err(Error::Validation(format!(
                    "sample {}: answer features {:?}, expected ({NUM_OPTIONS}, {})",
                    s.qid,
                    f.answer_feats.shape(),
                    self.dim
                )));
            }
            if f.qa_token_feats.shape() != (m, self.dim) {
                return Err(Error::Validation(format!(
                    "sample {}: QA features {:?}, expected ({m}, {})",
                    s.qid,
                    f.qa_token_feats.shape(),
                    self.dim
                )));
            }
            if !(f.video_feats.is_finite() && f.qa_token_feats.is_finite() && f.answer_feats.is_finite()) {
                return Err(Error::Validation(format!("sample {} has non-finite features", s.qid)));
            }
        }
        Ok(())
    }
}

// RNG stream tags, one independent ChaCha stream per table or video.
const STREAM_EMBED: u64 = 1;
const STREAM_SIGNATURE: u64 = 2;
const STREAM_ANSWER: u64 = 3;
const STREAM_BIAS: u64 = 4;
const STREAM_VIDEO: u64 = 1 << 32;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn round_f32(m: &mut Mat) {
    for v in m.data_mut() {
        *v = *v as f32 as f64;
    }
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Seed-derived lookup tables shared by every video of a dataset.
#[derive(Clone, Debug)]
pub struct World {
    pub dim: usize,
    pub vocab: VocabSizes,
    pub embeddings: Embeddings,
    /// Unit signature per event `verb * O + object`.
    signatures: Mat,
    /// Answer (verb, object) per event.
    answers: Vec<(u32, u32)>,
    /// Preferred answer slot per entity pair `subject * O + object`.
    preferred_slot: Vec<usize>,
    bias_embeddings: Mat,
}

impl World {
    pub fn new(spec: &BiasSpec, dim: usize) -> Self {
        let vocab = spec.vocab();
        let mut rng = stream_rng(spec.seed, STREAM_EMBED);
        let std = 1.0 / (dim as f64).sqrt();
        let mut embeddings = Embeddings {
            entity: Mat::randn(vocab.entity, dim, std, &mut rng),
            verb: Mat::randn(vocab.verb, dim, std, &mut rng),
            object: Mat::randn(vocab.object, dim, std, &mut rng),
            qtype: Mat::randn(2, dim, std, &mut rng),
        };
        for m in [
            &mut embeddings.entity,
            &mut embeddings.verb,
            &mut embeddings.object,
            &mut embeddings.qtype,
        ] {
            round_f32(m);
        }

        let n_events = vocab.verb * vocab.object;
        let mut rng = stream_rng(spec.seed, STREAM_SIGNATURE);
        let mut signatures = Mat::zeros(n_events, dim);
        for e in 0..n_events {
            signatures.row_mut(e).copy_from_slice(&unit_vector(dim, &mut rng));
        }
        round_f32(&mut signatures);

        let mut rng = stream_rng(spec.seed, STREAM_ANSWER);
        let answers = (0..n_events)
            .map(|_| {
                (
                    rng.random_range(0..vocab.verb as u32),
                    rng.random_range(0..vocab.object as u32),
                )
            })
            .collect();

        let n_pairs = vocab.entity * vocab.object;
        let mut rng = stream_rng(spec.seed, STREAM_BIAS);
        let preferred_slot = (0..n_pairs).map(|_| rng.random_range(0..NUM_OPTIONS)).collect();
        let mut bias_embeddings = Mat::zeros(n_pairs, dim);
        for p in 0..n_pairs {
            bias_embeddings.row_mut(p).copy_from_slice(&unit_vector(dim, &mut rng));
        }
        round_f32(&mut bias_embeddings);

        World {
            dim,
            vocab,
            embeddings,
            signatures,
            answers,
            preferred_slot,
            bias_embeddings,
        }
    }

    pub fn event_id(&self, verb: u32, object: u32) -> usize {
        verb as usize * self.vocab.object + object as usize
    }

    pub fn entity_pair(&self, subject: u32, object: u32) -> u32 {
        (subject as usize * self.vocab.object + object as usize) as u32
    }

    /// Unit-norm signature planted for the (verb, object) event.
    pub fn signature(&self, verb: u32, object: u32) -> &[f64] {
        self.signatures.row(self.event_id(verb, object))
    }

    pub fn answer_pair(&self, event: usize) -> (u32, u32) {
        self.answers[event]
    }

    pub fn preferred_slot(&self, pair: u32) -> usize {
        self.preferred_slot[pair as usize]
    }

    pub fn bias_embedding(&self, pair: u32) -> &[f64] {
        self.bias_embeddings.row(pair as usize)
    }
}

struct PlantedEvent {
    triple: Triple,
    event: usize,
    interval: Interval,
    frames: Vec<usize>,
}

/// Frames whose slab centre lies inside `iv`.
fn covered_frames(iv: &Interval, duration: f64, n_frames: usize) -> Vec<usize> {
    (0..n_frames)
        .filter(|&i| {
            let c = (i as f64 + 0.5) * duration / n_frames as f64;
            iv.start <= c && c <= iv.end
        })
        .collect()
}

/// Generates a synthetic dataset, deterministic in `spec.seed`.
///
/// Each video is a pure function of the seed and its index.
pub fn generate_dataset(
    spec: &BiasSpec,
    cfg: &GeneratorConfig,
    n_videos: usize,
    qa_per_video: usize,
) -> Result<Dataset> {
    spec.validate()?;
    let dim = cfg
        .dim
        .ok_or_else(|| Error::Config("feature dimension `dim` is not set".into()))?;
    if dim == 0 {
        return Err(Error::Config("feature dimension must be positive".into()));
    }
    if n_videos == 0 || qa_per_video == 0 {
        return Err(Error::Parameter(
            "need at least one video and one question per video".into(),
        ));
    }
    if cfg.n_frames < 2 {
        return Err(Error::Parameter("videos need at least 2 frames".into()));
    }
    if qa_per_video > cfg.n_frames {
        return Err(Error::Parameter(format!(
            "{qa_per_video} events per video do not fit in {} frames",
            cfg.n_frames
        )));
    }
    if !(cfg.min_duration > 0.0 && cfg.max_duration >= cfg.min_duration) {
        return Err(Error::Parameter("invalid duration range".into()));
    }
    let world = World::new(spec, dim);
    let mut videos = Vec::with_capacity(n_videos);
    let mut samples = Vec::with_capacity(n_videos * qa_per_video);
    let mut features = Vec::with_capacity(n_videos * qa_per_video);
    for vi in 0..n_videos {
        let (meta, s, f) = generate_video(spec, cfg, &world, vi, qa_per_video)?;
        videos.push(meta);
        samples.extend(s);
        features.extend(f);
    }
    Ok(Dataset {
        dim,
        vocab: world.vocab,
        embeddings: Some(world.embeddings),
        videos,
        samples,
        features,
    })
}

fn generate_video(
    spec: &BiasSpec,
    cfg: &GeneratorConfig,
    world: &World,
    index: usize,
    qa_per_video: usize,
) -> Result<(VideoMeta, Vec<QASample>, Vec<FeatureBundle>)> {
    let dim = world.dim;
    let vocab = world.vocab;
    let n = cfg.n_frames;
    let mut rng = stream_rng(spec.seed, STREAM_VIDEO + index as u64);
    let duration = if cfg.max_duration > cfg.min_duration {
        rng.random_range(cfg.min_duration..cfg.max_duration)
    } else {
        cfg.min_duration
    };
    let duration = duration as f32 as f64;
    let meta = VideoMeta {
        video_id: format!("v{index:05}"),
        duration,
        n_frames: n,
    };

    let mu = spec.segment_ratio_mean;
    let beta = Beta::new(mu * cfg.ratio_concentration, (1.0 - mu) * cfg.ratio_concentration)
        .map_err(|e| Error::Parameter(format!("segment ratio distribution: {e}")))?;
    let min_ratio = 1.0 / n as f64;

    let n_events = vocab.verb * vocab.object;
    let mut events: Vec<PlantedEvent> = Vec::with_capacity(qa_per_video);
    for _ in 0..qa_per_video {
        let mut triple = Triple {
            subject: rng.random_range(0..vocab.entity as u32),
            verb: rng.random_range(0..vocab.verb as u32),
            object: rng.random_range(0..vocab.object as u32),
        };
        // Distinct events within a video when the vocabulary allows it.
        for _ in 0..32 {
            if qa_per_video > n_events
                || !events.iter().any(|e| e.event == world.event_id(triple.verb, triple.object))
            {
                break;
            }
            triple.verb = rng.random_range(0..vocab.verb as u32);
            triple.object = rng.random_range(0..vocab.object as u32);
        }
        let ratio: f64 = beta.sample(&mut rng);
        // Leave at least one free frame for every event still to come.
        let used: usize = events.iter().map(|e| e.frames.len()).sum();
        let spare = n - used - (qa_per_video - events.len() - 1);
        let max_ratio = spare as f64 / n as f64;
        let mut len = ratio.clamp(min_ratio, max_ratio) * duration;
        // Segments that do not fit beside the earlier events are shortened.
        let mut placed = None;
        let fits = |start: f64, len: f64, events: &[PlantedEvent]| {
            let iv = Interval::new(start, (start + len).min(duration));
            let frames = covered_frames(&iv, duration, n);
            let clash = events
                .iter()
                .any(|e| e.frames.iter().any(|f| frames.contains(f)));
            (!clash && !frames.is_empty()).then_some((iv, frames))
        };
        while placed.is_none() {
            for _ in 0..64 {
                let start = rng.random_range(0.0..=(duration - len).max(0.0));
                placed = fits(start, len, &events);
                if placed.is_some() {
                    break;
                }
            }
            if placed.is_none() {
                let slab = duration / n as f64;
                let starts: Vec<f64> = (0..n)
                    .map(|i| i as f64 * slab)
                    .filter(|&st| st + len <= duration + 1e-9 && fits(st, len, &events).is_some())
                    .collect();
                if let Some(&st) = starts.choose(&mut rng) {
                    placed = fits(st, len, &events);
                }
            }
            if placed.is_none() {
                if len <= min_ratio * duration {
                    return Err(Error::Parameter(format!(
                        "cannot place {qa_per_video} disjoint events in {n} frames"
                    )));
                }
                len = (0.8 * len).max(min_ratio * duration);
            }
        }
        let (interval, frames) = placed.expect("loop exits once placed");
        events.push(PlantedEvent {
            triple,
            event: world.event_id(triple.verb, triple.object),
            interval,
            frames,
        });
    }

    let noise = spec.noise_sigma / (dim as f64).sqrt();
    let add_noise = |row: &mut [f64], rng: &mut ChaCha8Rng| {
        if noise > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += noise * z;
            }
        }
    };

    let scene: Vec<f64> = unit_vector(dim, &mut rng)
        .into_iter()
        .map(|v| v * cfg.scene_scale)
        .collect();
    let mut frames = Mat::zeros(n, dim);
    for i in 0..n {
        frames.row_mut(i).copy_from_slice(&scene);
    }
    for e in &events {
        let sig = world.signatures.row(e.event);
        for &f in &e.frames {
            frames.row_mut(f).copy_from_slice(sig);
        }
    }
    for i in 0..n {
        add_noise(frames.row_mut(i), &mut rng);
    }
    round_f32(&mut frames);
    let frames = Arc::new(frames);

    let emb = &world.embeddings;
    let mut samples = Vec::with_capacity(qa_per_video);
    let mut bundles = Vec::with_capacity(qa_per_video);
    for (k, e) in events.iter().enumerate() {
        let t = e.triple;
        let sig = world.signatures.row(e.event);
        let pair = world.entity_pair(t.subject, t.object);

        let (correct_idx, bias_entity_pair, forced) = if spec.p_answer_bias > 0.0 {
            let preferred = world.preferred_slot(pair);
            if rng.random_bool(spec.p_answer_bias) {
                (preferred, Some(pair), true)
            } else {
                let mut slot = rng.random_range(0..NUM_OPTIONS - 1);
                if slot >= preferred {
                    slot += 1;
                }
                (slot, Some(pair), false)
            }
        } else {
            (rng.random_range(0..NUM_OPTIONS), None, false)
        };

        // Distractors: the other events of this video first, then random ones.
        let mut distractors: Vec<usize> = events
            .iter()
            .map(|o| o.event)
            .filter(|&ev| ev != e.event)
            .collect();
        distractors.sort_unstable();
        distractors.dedup();
        distractors.shuffle(&mut rng);
        distractors.truncate(NUM_OPTIONS - 1);
        while distractors.len() < NUM_OPTIONS - 1 {
            let ev = rng.random_range(0..n_events);
            if ev != e.event && !distractors.contains(&ev) {
                distractors.push(ev);
            }
        }
        let mut option_events = distractors;
        option_events.insert(correct_idx, e.event);

        let mut qa = Mat::zeros(3, dim);
        let mut ans = Mat::zeros(NUM_OPTIONS, dim);
        let q_rows = [
            emb.entity.row(t.subject as usize),
            emb.verb.row(t.verb as usize),
            emb.object.row(t.object as usize),
        ];
        for (r, base) in q_rows.iter().enumerate() {
            let row = qa.row_mut(r);
            for ((o, b), s) in row.iter_mut().zip(base.iter()).zip(sig) {
                *o = b + s;
            }
            if forced {
                for (o, b) in row.iter_mut().zip(world.bias_embedding(pair)) {
                    *o += b;
                }
            }
            add_noise(row, &mut rng);
        }
        let mut answer_options = Vec::with_capacity(NUM_OPTIONS);
        for (slot, &ev) in option_events.iter().enumerate() {
            let (av, ao) = world.answer_pair(ev);
            answer_options.push(vec![vocab.verb_token(av), vocab.object_token(ao)]);
            let osig = world.signatures.row(ev);
            let row = ans.row_mut(slot);
            for (((o, a), b), s) in row
                .iter_mut()
                .zip(emb.verb.row(av as usize))
                .zip(emb.object.row(ao as usize))
                .zip(osig)
            {
                *o = 0.5 * (a + b) + s;
            }
            add_noise(row, &mut rng);
        }
        round_f32(&mut qa);
        round_f32(&mut ans);

        let question_type = if rng.random_bool(0.586) {
            QuestionType::Causal
        } else {
            QuestionType::Temporal
        };
        samples.push(QASample {
            qid: format!("{}_q{k}", meta.video_id),
            video_id: meta.video_id.clone(),
            question_tokens: vec![t.subject, vocab.verb_token(t.verb), vocab.object_token(t.object)],
            answer_options,
            correct_idx,
            gt_intervals: vec![e.interval],
            triple: Some(t),
            question_type,
            bias_entity_pair,
        });
        bundles.push(FeatureBundle::new(Arc::clone(&frames), qa, ans));
    }
    Ok((meta, samples, bundles))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> BiasSpec {
        BiasSpec {
            seed: 11,
            ..BiasSpec::default()
        }
    }

    #[test]
    fn frame_slabs_match_definition() {
        let meta = VideoMeta {
            video_id: "v".into(),
            duration: 40.0,
            n_frames: 32,
        };
        assert_eq!(frame_time_bounds(&meta, 0).unwrap(), (0.0, 1.25));
        assert_eq!(frame_time_bounds(&meta, 31).unwrap(), (38.75, 40.0));
        assert!(matches!(frame_time_bounds(&meta, 32), Err(Error::Parameter(_))));
    }

    #[test]
    fn frame_slabs_partition_the_video() {
        for (duration, n) in [(40.0, 32), (37.3, 7), (0.9, 2)] {
            let meta = VideoMeta {
                video_id: "v".into(),
                duration,
                n_frames: n,
            };
            let slabs: Vec<_> = (0..n).map(|i| frame_time_bounds(&meta, i).unwrap()).collect();
            assert_eq!(slabs[0].0, 0.0);
            assert_eq!(slabs[n - 1].1, duration);
            for w in slabs.windows(2) {
                assert_eq!(w[0].1, w[1].0);
                assert!(w[0].0 < w[0].1);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let cfg = GeneratorConfig::default();
        let bad = BiasSpec {
            p_answer_bias: 1.5,
            ..small_spec()
        };
        assert!(matches!(generate_dataset(&bad, &cfg, 2, 1), Err(Error::Parameter(_))));
        let bad = BiasSpec {
            segment_ratio_mean: 1.0,
            ..small_spec()
        };
        assert!(matches!(generate_dataset(&bad, &cfg, 2, 1), Err(Error::Parameter(_))));
        let no_dim = GeneratorConfig { dim: None, ..cfg };
        assert!(matches!(
            generate_dataset(&small_spec(), &no_dim, 2, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let cfg = GeneratorConfig::default();
        let a = generate_dataset(&small_spec(), &cfg, 6, 3).unwrap();
        let b = generate_dataset(&small_spec(), &cfg, 6, 3).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        let c = generate_dataset(&BiasSpec { seed: 12, ..small_spec() }, &cfg, 6, 3).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn qa_global_is_max_pooled() {
        let d = generate_dataset(&small_spec(), &GeneratorConfig::default(), 3, 2).unwrap();
        for f in &d.features {
            assert_eq!(f.qa_global, f.qa_token_feats.max_over_rows());
        }
    }

    #[test]
    fn zero_noise_frames_equal_the_signature() {
        let spec = BiasSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let cfg = GeneratorConfig::default();
        let d = generate_dataset(&spec, &cfg, 5, 2).unwrap();
        let world = World::new(&spec, 64);
        let mut checked = 0;
        for (s, f) in d.samples.iter().zip(&d.features) {
            let meta = d.video(&s.video_id).unwrap();
            let t = s.triple.unwrap();
            let sig = world.signature(t.verb, t.object);
            for i in covered_frames(&s.gt_intervals[0], meta.duration, meta.n_frames) {
                let row = f.video_feats.row(i);
                assert_eq!(row, sig);
                assert!((crate::tensor::cosine(row, sig) - 1.0).abs() < 1e-12);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn events_of_a_video_never_share_frames() {
        let cfg = GeneratorConfig {
            n_frames: 12,
            ..GeneratorConfig::default()
        };
        for per_video in [3, 8, 12] {
            let d = generate_dataset(&small_spec(), &cfg, 20, per_video).unwrap();
            for v in &d.videos {
                let mut seen = vec![false; v.n_frames];
                for s in d.samples.iter().filter(|s| s.video_id == v.video_id) {
                    let frames = covered_frames(&s.gt_intervals[0], v.duration, v.n_frames);
                    assert!(!frames.is_empty());
                    for f in frames {
                        assert!(!seen[f], "{} overlaps another event", s.qid);
                        seen[f] = true;
                    }
                }
            }
        }
        assert!(matches!(generate_dataset(&small_spec(), &cfg, 2, 13), Err(Error::Parameter(_))));
    }

    #[test]
    fn answers_are_kept_apart_from_question_rows() {
        let d = generate_dataset(&small_spec(), &GeneratorConfig::default(), 3, 2).unwrap();
        for (s, f) in d.samples.iter().zip(&d.features) {
            assert_eq!(f.qa_token_feats.rows(), s.question_tokens.len());
            assert_eq!(f.answer_feats.shape(), (NUM_OPTIONS, d.dim));
        }
    }
}
