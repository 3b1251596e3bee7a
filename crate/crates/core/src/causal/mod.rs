//! Confounder dictionaries and the two interventions built on them.
//!
//! The linguistic intervention (back-door) attends from the question feature
//! over clustered semantic-graph features, with the cluster priors added as
//! log-biases, and adds the result back to the question. The visual
//! intervention (front-door) treats the grounded segment as the mediator: a
//! gate mixes the segment with the frame mean, and a prior-weighted
//! expectation over clustered frame features is added on top.

mod kmeans;

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::{Embeddings, QASample, VocabSizes};
use crate::error::{Error, Result};
use crate::params::{load_tensors, save_tensors, Bound, ParamId, ParamStore};
use crate::tensor::Mat;

pub use kmeans::{kmeans, KMeansFit};

pub const DICT_SIZE: usize = 512;
pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Linguistic,
    Visual,
}

impl Modality {
    fn as_str(self) -> &'static str {
        match self {
            Modality::Linguistic => "linguistic",
            Modality::Visual => "visual",
        }
    }
}

/// Frozen cluster centers with their occupancy priors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfounderDictionary {
    pub modality: Modality,
    /// `K x d`.
    pub centers: Mat,
    /// Length `K`, sums to 1.
    pub priors: Vec<f64>,
}

impl ConfounderDictionary {
    pub fn new(modality: Modality, centers: Mat, priors: Vec<f64>) -> Result<Self> {
        if centers.rows() != priors.len() || priors.is_empty() {
            return Err(Error::Parameter(format!(
                "{} centers but {} priors",
                centers.rows(),
                priors.len()
            )));
        }
        if priors.iter().any(|p| !(*p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Parameter("priors must form a probability vector".into()));
        }
        Ok(ConfounderDictionary {
            modality,
            centers,
            priors,
        })
    }

    pub fn from_fit(modality: Modality, fit: KMeansFit) -> Self {
        let n: usize = fit.counts.iter().sum();
        let priors = fit.counts.iter().map(|&c| c as f64 / n as f64).collect();
        ConfounderDictionary {
            modality,
            centers: fit.centers,
            priors,
        }
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    /// `1 x K` log priors; empty clusters become `-inf` and drop out of the softmax.
    pub fn log_priors(&self) -> Mat {
        Mat::row_vector(self.priors.iter().map(|p| p.ln()).collect())
    }

    fn expect(&self, modality: Modality) -> Result<()> {
        if self.modality == modality {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "expected a {} dictionary, got a {} one",
                modality.as_str(),
                self.modality.as_str()
            )))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let priors = Mat::row_vector(self.priors.clone());
        let meta = HashMap::from([("modality".to_string(), self.modality.as_str().to_string())]);
        save_tensors(path, &[("centers", &self.centers), ("priors", &priors)], meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = load_tensors(path)?;
        let modality = match meta.get("modality").map(String::as_str) {
            Some("linguistic") => Modality::Linguistic,
            Some("visual") => Modality::Visual,
            other => {
                return Err(Error::Validation(format!(
                    "{}: unknown dictionary modality {other:?}",
                    path.display()
                )))
            }
        };
        let mut centers = None;
        let mut priors = None;
        for (name, m) in tensors {
            match name.as_str() {
                "centers" => centers = Some(m),
                "priors" => priors = Some(m.into_vec()),
                _ => {}
            }
        }
        let (Some(centers), Some(mut priors)) = (centers, priors) else {
            return Err(Error::Validation(format!("{}: missing centers or priors", path.display())));
        };
        // Stored as f32; renormalize so the simplex holds at f64.
        let z: f64 = priors.iter().sum();
        priors.iter_mut().for_each(|p| *p /= z);
        ConfounderDictionary::new(modality, centers, priors)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

/// Clusters `items` and wraps the result as a dictionary.
pub fn kmeans_fit(items: &Mat, k: usize, seed: u64, max_iters: usize, modality: Modality) -> Result<ConfounderDictionary> {
    Ok(ConfounderDictionary::from_fit(modality, kmeans(items, k, seed, max_iters)?))
}

/// Mean of subject, verb, object, question-type, answer-verb and answer-object
/// embeddings, the answer being the sample's correct option.
pub fn semantic_graph_feature(sample: &QASample, emb: &Embeddings, vocab: &VocabSizes) -> Result<Vec<f64>> {
    let t = sample
        .triple
        .ok_or_else(|| Error::Data(format!("sample {} has no semantic triple", sample.qid)))?;
    let ans = sample
        .answer_options
        .get(sample.correct_idx)
        .ok_or_else(|| Error::Data(format!("sample {} has no correct option", sample.qid)))?;
    if ans.len() != 2 {
        return Err(Error::Data(format!(
            "sample {}: answer options must be [verb, object] token pairs",
            sample.qid
        )));
    }
    let row = |m: &Mat, i: u32, what: &str| -> Result<Vec<f64>> {
        if (i as usize) < m.rows() {
            Ok(m.row(i as usize).to_vec())
        } else {
            Err(Error::Data(format!("sample {}: {what} id {i} outside the vocabulary", sample.qid)))
        }
    };
    let parts = [
        row(&emb.entity, t.subject, "subject")?,
        row(&emb.verb, t.verb, "verb")?,
        row(&emb.object, t.object, "object")?,
        emb.qtype.row(sample.question_type.index()).to_vec(),
        emb.token(vocab, ans[0])?.to_vec(),
        emb.token(vocab, ans[1])?.to_vec(),
    ];
    let d = emb.dim();
    let mut out = vec![0.0; d];
    for p in &parts {
        for (o, x) in out.iter_mut().zip(p) {
            *o += x / parts.len() as f64;
        }
    }
    Ok(out)
}

/// Clusters the semantic graph features of `samples` into `min(k, N)` centers.
pub fn build_linguistic_dict(
    samples: &[&QASample],
    emb: &Embeddings,
    vocab: &VocabSizes,
    k: usize,
    seed: u64,
) -> Result<ConfounderDictionary> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to build a linguistic dictionary from".into()));
    }
    let rows = samples
        .iter()
        .map(|s| semantic_graph_feature(s, emb, vocab))
        .collect::<Result<Vec<_>>>()?;
    let items = Mat::from_rows(&rows);
    kmeans_fit(&items, k.min(items.rows()), seed, KMEANS_MAX_ITERS, Modality::Linguistic)
}

/// Clusters frame features into `min(k, N)` centers.
pub fn build_visual_dict(frames: &Mat, k: usize, seed: u64) -> Result<ConfounderDictionary> {
    kmeans_fit(frames, k.min(frames.rows()), seed, KMEANS_MAX_ITERS, Modality::Visual)
}

/// Projections of the linguistic intervention.
#[derive(Clone, Debug)]
pub struct LciParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

fn proj<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::randn(rows, cols, (1.0 / rows as f64).sqrt(), rng)
}

impl LciParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        LciParams {
            wq: store.add("lci.query", proj(d, d, rng)),
            wk: store.add("lci.key", proj(d, d, rng)),
            wv: store.add("lci.value", proj(d, d, rng)),
            wo: store.add("lci.out", Mat::randn(d, d, 0.1 / (d as f64).sqrt(), rng)),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

/// `softmax(A + log priors) · (C Wv)` with `A` a `B x K` score matrix.
fn prior_attention(g: &mut Graph, scores: Var, dict: &ConfounderDictionary, values: Var) -> Var {
    let lp = g.constant(dict.log_priors());
    let s = g.add_row(scores, lp);
    let a = g.softmax_rows(s);
    g.matmul(a, values)
}

/// `q + softmax((q Wq)(C Wk)ᵀ/√d + log P) (C Wv) Wo` for `B x d` questions.
pub fn lci_var(g: &mut Graph, p: &Bound, params: &LciParams, q: Var, dict: &ConfounderDictionary) -> Result<Var> {
    dict.expect(Modality::Linguistic)?;
    let d = dict.dim();
    let c = g.constant(dict.centers.clone());
    let qq = g.matmul(q, p.var(params.wq));
    let k = g.matmul(c, p.var(params.wk));
    let v = g.matmul(c, p.var(params.wv));
    let s = g.matmul_t(qq, k);
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let e = prior_attention(g, s, dict, v);
    let e = g.matmul(e, p.var(params.wo));
    Ok(g.add(q, e))
}

pub fn lci_deconfound(
    qa_global: &[f64],
    dict: &ConfounderDictionary,
    params: &LciParams,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    if qa_global.len() != dict.dim() {
        return Err(Error::Parameter(format!(
            "question width {} differs from dictionary width {}",
            qa_global.len(),
            dict.dim()
        )));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let q = g.constant(Mat::row_vector(qa_global.to_vec()));
    let out = lci_var(&mut g, &p, params, q, dict)?;
    Ok(g.value(out).data().to_vec())
}

/// Projections and gate of the visual intervention.
#[derive(Clone, Debug)]
pub struct EciParams {
    /// `2d x d`, applied to `[v_t; q]`.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// `3d x d`, applied to `[v_t; v̄; q]`.
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

impl EciParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        EciParams {
            wq: store.add("eci.query", proj(2 * d, d, rng)),
            wk: store.add("eci.key", proj(d, d, rng)),
            wv: store.add("eci.value", proj(d, d, rng)),
            wo: store.add("eci.out", Mat::randn(d, d, 0.1 / (d as f64).sqrt(), rng)),
            gate_w: store.add("eci.gate", Mat::randn(3 * d, d, 0.1 / (3.0 * d as f64).sqrt(), rng)),
            gate_b: store.add("eci.gate_bias", Mat::filled(1, d, 2.0)),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo, self.gate_w, self.gate_b]
    }
}

/// Intermediate values of the visual intervention for one batch.
#[derive(Clone, Copy, Debug)]
pub struct EciVars {
    pub gate: Var,
    pub mediator: Var,
    pub expectation: Var,
    pub output: Var,
}

/// `m + E Wo` where `m = v̄ + g ⊙ (v_t − v̄)`, `g = σ([v_t; v̄; q] Wg + bg)` and
/// `E = softmax(([v_t; q] Wq)(C Wk)ᵀ/√d + log P)(C Wv)`. All inputs are `B x d`.
pub fn eci_var(
    g: &mut Graph,
    p: &Bound,
    params: &EciParams,
    v_t: Var,
    v_bar: Var,
    q: Var,
    dict: &ConfounderDictionary,
) -> Result<EciVars> {
    dict.expect(Modality::Visual)?;
    let d = dict.dim();
    let c = g.constant(dict.centers.clone());
    let vq = g.concat_cols(&[v_t, q]);
    let qq = g.matmul(vq, p.var(params.wq));
    let k = g.matmul(c, p.var(params.wk));
    let v = g.matmul(c, p.var(params.wv));
    let s = g.matmul_t(qq, k);
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let expectation = prior_attention(g, s, dict, v);

    let gin = g.concat_cols(&[v_t, v_bar, q]);
    let gl = g.matmul(gin, p.var(params.gate_w));
    let gl = g.add_row(gl, p.var(params.gate_b));
    let gate = g.sigmoid(gl);
    let diff = g.sub(v_t, v_bar);
    let gd = g.mul(gate, diff);
    let mediator = g.add(v_bar, gd);

    let eo = g.matmul(expectation, p.var(params.wo));
    let output = g.add(mediator, eo);
    Ok(EciVars {
        gate,
        mediator,
        expectation,
        output,
    })
}

pub fn eci_front_door(
    v_t: &[f64],
    v_bar: &[f64],
    qa_deconf: &[f64],
    dict: &ConfounderDictionary,
    params: &EciParams,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    let d = dict.dim();
    if v_t.len() != d || v_bar.len() != d || qa_deconf.len() != d {
        return Err(Error::Parameter(format!("inputs must all have width {d}")));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let vt = g.constant(Mat::row_vector(v_t.to_vec()));
    let vb = g.constant(Mat::row_vector(v_bar.to_vec()));
    let q = g.constant(Mat::row_vector(qa_deconf.to_vec()));
    let out = eci_var(&mut g, &p, params, vt, vb, q, dict)?;
    Ok(g.value(out.output).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_prior_selects_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 4;
        let mut store = ParamStore::new();
        let lci = LciParams::new(&mut store, d, &mut rng);
        let centers = Mat::randn(3, d, 1.0, &mut rng);
        let dict = ConfounderDictionary::new(Modality::Linguistic, centers.clone(), vec![0.0, 1.0, 0.0]).unwrap();
        let q: Vec<f64> = (0..d).map(|i| i as f64 * 0.3 - 0.4).collect();
        let out = lci_deconfound(&q, &dict, &lci, &store).unwrap();
        let vj = Mat::row_vector(centers.row(1).to_vec()).matmul(store.get(lci.wv));
        let add = vj.matmul(store.get(lci.wo));
        for i in 0..d {
            assert!((out[i] - q[i] - add.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn modality_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let lci = LciParams::new(&mut store, 2, &mut rng);
        let dict = ConfounderDictionary::new(Modality::Visual, Mat::zeros(1, 2), vec![1.0]).unwrap();
        assert!(matches!(
            lci_deconfound(&[0.0, 1.0], &dict, &lci, &store),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn archive_round_trip_keeps_modality() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dict.safetensors");
        let dict = ConfounderDictionary::new(
            Modality::Visual,
            Mat::from_rows(&[vec![0.5, 1.0], vec![-2.0, 0.25]]),
            vec![0.25, 0.75],
        )
        .unwrap();
        dict.save(&path).unwrap();
        assert_eq!(ConfounderDictionary::load(&path).unwrap(), dict);
    }
}
