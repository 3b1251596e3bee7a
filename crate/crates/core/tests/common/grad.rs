//! The four headline gradient checks. Each returns the worst relative error
//! between the tape gradient and central differences of the plain function.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqground::alignment::{info_nce, info_nce_var};
use vqground::autograd::{Graph, Padding, Var};
use vqground::causal::{kmeans_fit, lci_deconfound, lci_var, LciParams, Modality};
use vqground::grounding::gaussian_smooth;
use vqground::harness::{fit_dictionaries, TrainConfig};
use vqground::model::{Batch, Model};
use vqground::params::{ParamId, ParamStore};
use vqground::tensor::Mat;

use super::{fd_gradient, rel_err, small_dataset};

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn weighted_sum(g: &mut Graph, x: Var, w: &Mat) -> Var {
    let c = g.constant(w.clone());
    let p = g.mul(x, c);
    g.sum(p)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Finite differences over the entries of one stored parameter.
pub fn fd_param(store: &ParamStore, id: ParamId, mut f: impl FnMut(&ParamStore) -> f64) -> Vec<f64> {
    let base = store.get(id).clone();
    let mut s = store.clone();
    fd_gradient(base.data(), H, |x| {
        s.set(id, Mat::from_vec(base.rows(), base.cols(), x.to_vec()));
        f(&s)
    })
}

/// InfoNCE w.r.t. the query, at a sharp and a soft temperature.
pub fn info_nce_query() -> f64 {
    let mut r = rng(1);
    let d = 8;
    let q = Mat::randn(1, d, 0.4, &mut r);
    let pos = Mat::randn(1, d, 0.4, &mut r);
    let negs = Mat::randn(6, d, 0.4, &mut r);
    let mut worst = 0.0f64;
    for tau in [0.07, 0.5] {
        let mut g = Graph::new();
        let qv = g.leaf(q.clone());
        let pv = g.constant(pos.clone());
        let nv = g.constant(negs.clone());
        let loss = info_nce_var(&mut g, qv, pv, nv, tau);
        let analytic = g.backward(loss).get(qv).unwrap().data().to_vec();
        let numeric = fd_gradient(q.data(), H, |x| info_nce(x, pos.data(), &negs, tau).unwrap());
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Smoothed attention w.r.t. the raw scores and w.r.t. sigma.
pub fn smoothing_scores_and_sigma() -> (f64, f64) {
    let mut r = rng(2);
    let n = 8;
    let scores = Mat::randn(1, n, 1.0, &mut r);
    let w = Mat::randn(1, n, 1.0, &mut r);
    let (mut ws, mut wsig) = (0.0f64, 0.0f64);
    for sigma in [0.4, 1.3, 2.2] {
        let mut g = Graph::new();
        let sv = g.leaf(scores.clone());
        let ls = g.leaf(Mat::scalar(f64::ln(sigma)));
        let conv = g.gaussian_conv(sv, ls, Padding::Reflect);
        let att = g.softmax_rows(conv);
        let loss = weighted_sum(&mut g, att, &w);
        let grads = g.backward(loss);
        let plain = |x: &[f64], s: f64| dot(&gaussian_smooth(x, s).unwrap(), w.data());

        let analytic = grads.get(sv).unwrap().data().to_vec();
        let numeric = fd_gradient(scores.data(), H, |x| plain(x, sigma));
        ws = ws.max(rel_err(&analytic, &numeric));

        // The tape differentiates w.r.t. log sigma; dL/dsigma = dL/dlog(sigma) / sigma.
        let dsigma = grads.get(ls).unwrap().item() / sigma;
        let numeric = fd_gradient(&[sigma], H, |x| plain(scores.data(), x[0]));
        wsig = wsig.max(rel_err(&[dsigma], &numeric));
    }
    (ws, wsig)
}

/// Back-door adjustment w.r.t. its query projection.
pub fn back_door_query_projection() -> f64 {
    let mut r = rng(3);
    let d = 8;
    let items = Mat::randn(40, d, 1.0, &mut r);
    let dict = kmeans_fit(&items, 6, 0, 100, Modality::Linguistic).unwrap();
    let mut store = ParamStore::new();
    let lci = LciParams::new(&mut store, d, &mut r);
    // A non-trivial output projection so the query path carries signal.
    store.set(lci.wo, Mat::randn(d, d, 0.5, &mut r));
    let q = Mat::randn(1, d, 1.0, &mut r);
    let w = Mat::randn(1, d, 1.0, &mut r);

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let qv = g.constant(q.clone());
    let out = lci_var(&mut g, &p, &lci, qv, &dict).unwrap();
    let loss = weighted_sum(&mut g, out, &w);
    let analytic = g.backward(loss).get(p.var(lci.wq)).unwrap().data().to_vec();
    let numeric = fd_param(&store, lci.wq, |s| dot(&lci_deconfound(q.data(), &dict, &lci, s).unwrap(), w.data()));
    rel_err(&analytic, &numeric)
}

/// Full training loss (cross-entropy plus alignment) w.r.t. log sigma on a
/// tiny model with d = 8 and n = 8. Returns `(error, analytic gradient)`.
pub fn full_loss_log_sigma() -> (f64, f64) {
    let data = small_dataset(12, 1, 8, 8, 7);
    let cfg = TrainConfig {
        dict_size: 4,
        k_l: 3,
        k_v: 3,
        batch_size: 12,
        ..TrainConfig::default()
    };
    let idx: Vec<usize> = (0..data.samples.len()).collect();
    let dicts = fit_dictionaries(&data, &idx, &cfg).unwrap();
    let mut model = Model::new(8, 8, cfg.flags(), dicts.linguistic, dicts.visual, 3).unwrap();
    let id = model.gsg.log_sigma_id();
    // The kernel radius ceil(3 sigma) jumps at sigma = 1, so probe away from it.
    model.store.set(id, Mat::scalar(f64::ln(1.3)));
    let batch = Batch::new(&data, &idx).unwrap();
    let align = cfg.align();

    let total = |m: &Model| {
        let mut g = Graph::new();
        let p = m.store.bind(&mut g);
        let (loss, ..) = m.loss(&mut g, &p, &batch, true, Some((&align, 11))).unwrap();
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let (loss, ..) = model.loss(&mut g, &p, &batch, true, Some((&align, 11))).unwrap();
    let analytic = g.backward(loss).get(p.var(id)).unwrap().item();
    let mut probe = model.clone();
    let numeric = fd_param(&model.store, id, |s| {
        probe.store = s.clone();
        total(&probe)
    });
    (rel_err(&[analytic], &numeric), analytic)
}
