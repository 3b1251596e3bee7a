mod common;

use std::fs;

use vqground::dataset::{generate_dataset, load_dataset, save_dataset, BiasSpec, Dataset, GeneratorConfig, World};
use vqground::Error;

use common::small_dataset;

fn biased(videos: usize, per_video: usize, p: f64, ratio: f64, seed: u64) -> Dataset {
    let spec = BiasSpec {
        p_answer_bias: p,
        segment_ratio_mean: ratio,
        seed,
        ..BiasSpec::default()
    };
    let cfg = GeneratorConfig {
        dim: Some(16),
        ..GeneratorConfig::default()
    };
    generate_dataset(&spec, &cfg, videos, per_video).unwrap()
}

fn max_feature_gap(a: &Dataset, b: &Dataset) -> f64 {
    let mut gap = 0.0f64;
    for (x, y) in a.features.iter().zip(&b.features) {
        for (m, n) in [
            (&*x.video_feats, &*y.video_feats),
            (&x.qa_token_feats, &y.qa_token_feats),
            (&x.qa_global, &y.qa_global),
            (&x.answer_feats, &y.answer_feats),
        ] {
            assert_eq!((m.rows(), m.cols()), (n.rows(), n.cols()));
            for (u, v) in m.data().iter().zip(n.data()) {
                gap = gap.max((u - v).abs() / u.abs().max(1.0));
            }
        }
    }
    gap
}

#[test]
fn saved_datasets_load_back() {
    let data = small_dataset(12, 3, 16, 10, 1);
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&data, dir.path()).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.samples, data.samples);
    assert_eq!(back.videos, data.videos);
    assert_eq!(back.vocab, data.vocab);
    assert_eq!(back.dim, data.dim);
    // Features are stored in single precision.
    assert!(max_feature_gap(&data, &back) < 1e-6);

    let dir2 = tempfile::tempdir().unwrap();
    let again = load_dataset(&save_dataset(&back, dir2.path()).unwrap()).unwrap();
    assert_eq!(again, back);
    // The directory form is accepted as well as the manifest path.
    assert_eq!(load_dataset(dir.path()).unwrap(), back);
}

#[test]
fn broken_directories_are_reported() {
    let data = small_dataset(4, 2, 8, 6, 2);
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&data, dir.path()).unwrap();

    let text = fs::read_to_string(&manifest).unwrap();
    let feat = dir.path().join("features");
    let victim = fs::read_dir(&feat).unwrap().next().unwrap().unwrap().path();
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_dataset(&manifest), Err(Error::Validation(_))));
    fs::write(&victim, &bytes).unwrap();
    assert!(load_dataset(&manifest).is_ok());

    fs::write(&manifest, "{ not json").unwrap();
    assert!(matches!(load_dataset(&manifest), Err(Error::Validation(_))));
    fs::write(&manifest, &text).unwrap();

    assert!(load_dataset(&dir.path().join("missing")).is_err());
}

#[test]
fn ground_truth_ratios_follow_the_requested_mean() {
    for ratio in [0.1, 0.2, 0.35] {
        let data = biased(400, 2, 0.0, ratio, 3);
        let mut total = 0.0;
        for s in &data.samples {
            let v = data.video(&s.video_id).unwrap();
            let len: f64 = s.gt_intervals.iter().map(|g| g.length()).sum();
            total += len / v.duration;
        }
        let mean = total / data.samples.len() as f64;
        assert!((mean - ratio).abs() < 0.03, "ratio {ratio}: mean {mean}");
    }
}

#[test]
fn planted_bias_moves_answers_to_the_preferred_slot() {
    for p in [0.3, 0.7, 1.0] {
        let data = biased(1500, 2, p, 0.2, 4);
        let spec = BiasSpec {
            p_answer_bias: p,
            seed: 4,
            ..BiasSpec::default()
        };
        let world = World::new(&spec, 16);
        let hits = data
            .samples
            .iter()
            .filter(|s| s.correct_idx == world.preferred_slot(s.bias_entity_pair.expect("every sample is tagged")))
            .count();
        let rate = hits as f64 / data.samples.len() as f64;
        assert!((rate - p).abs() < 0.03, "p {p}: rate {rate}");
    }
    let unbiased = biased(200, 2, 0.0, 0.2, 5);
    assert!(unbiased.samples.iter().all(|s| s.bias_entity_pair.is_none()));
    let mut counts = [0usize; 5];
    for s in &unbiased.samples {
        counts[s.correct_idx] += 1;
    }
    assert!(counts.iter().all(|&c| c > 50), "{counts:?}");
}

#[test]
fn invalid_generator_settings_fail_cleanly() {
    let cfg = GeneratorConfig {
        dim: Some(8),
        n_frames: 6,
        ..GeneratorConfig::default()
    };
    let spec = BiasSpec::default();
    assert!(generate_dataset(&spec, &cfg, 3, 7).is_err());
    assert!(generate_dataset(&spec, &GeneratorConfig { dim: None, ..cfg.clone() }, 3, 2).is_err());
    let bad = BiasSpec {
        noise_sigma: -1.0,
        ..BiasSpec::default()
    };
    assert!(generate_dataset(&bad, &cfg, 3, 2).is_err());
}
