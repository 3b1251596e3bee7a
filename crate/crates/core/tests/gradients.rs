//! Tape gradients against central finite differences of the plain functions.

mod common;

use vqground::alignment::AlignConfig;
use vqground::autograd::Graph;
use vqground::causal::{eci_front_door, eci_var, kmeans_fit, EciParams, Modality};
use vqground::encoders::{encode_temporal, EncoderConfig, TemporalEncoderParams};
use vqground::grounding::{cross_modal_attention, GSGParams};
use vqground::params::ParamStore;
use vqground::tensor::Mat;

use common::grad::{self, dot, fd_param, rng, weighted_sum, H, TOL};
use common::{fd_gradient, rel_err};

#[test]
fn info_nce_wrt_query() {
    let e = grad::info_nce_query();
    assert!(e < TOL, "relative error {e}");
}

#[test]
fn smoothing_wrt_scores_and_width() {
    let (scores, sigma) = grad::smoothing_scores_and_sigma();
    assert!(scores < TOL, "scores: {scores}");
    assert!(sigma < TOL, "sigma: {sigma}");
}

#[test]
fn back_door_wrt_query_projection() {
    let e = grad::back_door_query_projection();
    assert!(e < TOL, "relative error {e}");
}

#[test]
fn full_loss_wrt_log_sigma() {
    let (e, analytic) = grad::full_loss_log_sigma();
    assert!(e < TOL, "relative error {e}");
    assert!(analytic != 0.0);
}

#[test]
fn front_door_wrt_every_parameter() {
    let mut r = rng(4);
    let d = 8;
    let items = Mat::randn(40, d, 1.0, &mut r);
    let dict = kmeans_fit(&items, 5, 1, 100, Modality::Visual).unwrap();
    let mut store = ParamStore::new();
    let eci = EciParams::new(&mut store, d, &mut r);
    store.set(eci.wo, Mat::randn(d, d, 0.5, &mut r));
    store.set(eci.gate_b, Mat::zeros(1, d));
    let vt = Mat::randn(1, d, 1.0, &mut r);
    let vb = Mat::randn(1, d, 1.0, &mut r);
    let q = Mat::randn(1, d, 1.0, &mut r);
    let w = Mat::randn(1, d, 1.0, &mut r);

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (a, b, c) = (g.constant(vt.clone()), g.constant(vb.clone()), g.constant(q.clone()));
    let out = eci_var(&mut g, &p, &eci, a, b, c, &dict).unwrap();
    let loss = weighted_sum(&mut g, out.output, &w);
    let grads = g.backward(loss);
    for id in eci.param_ids() {
        let analytic = grads.get(p.var(id)).unwrap().data().to_vec();
        let numeric = fd_param(&store, id, |s| {
            dot(&eci_front_door(vt.data(), vb.data(), q.data(), &dict, &eci, s).unwrap(), w.data())
        });
        let e = rel_err(&analytic, &numeric);
        assert!(e < TOL, "{}: {e}", store.name(id));
    }
}

#[test]
fn encoder_wrt_input() {
    let mut r = rng(5);
    let (d, n) = (8, 4);
    let mut store = ParamStore::new();
    let enc = TemporalEncoderParams::new(&mut store, EncoderConfig::new(d, n), &mut r).unwrap();
    // Larger residual branches than the default start, so they matter.
    for id in enc.param_ids() {
        let m = store.get(id);
        if m.rows() > 1 && m.rows() != n {
            store.set(id, Mat::randn(m.rows(), m.cols(), 0.3, &mut r));
        }
    }
    let x = Mat::randn(n, d, 1.0, &mut r);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let out = enc.forward(&mut g, &p, xv, n).unwrap();
    let loss = g.sum(out);
    let analytic = g.backward(loss).get(xv).unwrap().data().to_vec();
    let numeric = fd_gradient(x.data(), H, |v| {
        encode_temporal(&Mat::from_vec(n, d, v.to_vec()), &enc, &store)
            .unwrap()
            .data()
            .iter()
            .sum()
    });
    let e = rel_err(&analytic, &numeric);
    assert!(e < TOL, "relative error {e}");
}

#[test]
fn grounding_scores_wrt_frames() {
    let mut r = rng(6);
    let (d, n) = (8, 6);
    let mut store = ParamStore::new();
    let gsg = GSGParams::with_gain(&mut store, n, 2.0);
    let v = Mat::randn(n, d, 1.0, &mut r);
    let q = Mat::randn(1, d, 1.0, &mut r);
    let w = Mat::randn(1, n, 1.0, &mut r);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let vv = g.leaf(v.clone());
    let qv = g.constant(q.clone());
    let s = gsg.scores(&mut g, &p, vv, qv);
    let loss = weighted_sum(&mut g, s, &w);
    let analytic = g.backward(loss).get(vv).unwrap().data().to_vec();
    let numeric = fd_gradient(v.data(), H, |x| {
        dot(&cross_modal_attention(&Mat::from_vec(n, d, x.to_vec()), q.data(), &gsg, &store).unwrap(), w.data())
    });
    let e = rel_err(&analytic, &numeric);
    assert!(e < TOL, "relative error {e}");
}

#[test]
fn alignment_terms_use_both_directions() {
    // With one direction switched off the loss halves in structure: the
    // remaining term still matches its finite differences.
    let mut r = rng(8);
    let d = 8;
    let segs = Mat::randn(6, d, 0.5, &mut r);
    let qs = Mat::randn(6, d, 0.5, &mut r);
    let ids: Vec<String> = (0..6).map(|i| format!("v{i}")).collect();
    for (l1, l2) in [(1.0, 0.0), (0.0, 0.5), (1.0, 0.5)] {
        let cfg = AlignConfig {
            lambda1: l1,
            lambda2: l2,
            k_l: 3,
            k_v: 3,
            ..AlignConfig::default()
        };
        let mut g = Graph::new();
        let sv = g.leaf(segs.clone());
        let qv = g.constant(qs.clone());
        let loss = vqground::alignment::align_loss_var(&mut g, sv, qv, &ids, &cfg, 5).unwrap();
        let analytic = g.backward(loss).get(sv).unwrap().data().to_vec();
        let numeric = fd_gradient(segs.data(), H, |x| {
            vqground::alignment::align_loss(&Mat::from_vec(6, d, x.to_vec()), &qs, &ids, &cfg, 5).unwrap()
        });
        let e = rel_err(&analytic, &numeric);
        assert!(e < TOL, "lambdas ({l1}, {l2}): {e}");
    }
}
