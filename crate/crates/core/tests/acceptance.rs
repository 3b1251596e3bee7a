//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches stdout. The slow
//! parts are the learnability run (about half a minute) and the ablation
//! matrix (four rows by three seeds on 500 videos, several minutes).

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqground::autograd::{gaussian_kernel, Graph};
use vqground::dataset::{generate_dataset, BiasSpec, Dataset, GeneratorConfig, Interval, QASample, QuestionType};
use vqground::evalmetrics::{grade, iop_iou, Averaging, EvalReport, Prediction};
use vqground::grounding::extract_interval;
use vqground::harness::{random_baseline, run_ablation_matrix, train, train_run, AblationRow, TrainConfig, TrainedRun};
use vqground::model::Batch;

use common::{brute_grade, brute_interval, brute_iop_iou, grad, meta, small_dataset};

struct Tally {
    failed: Vec<usize>,
}

impl Tally {
    fn report(&mut self, n: usize, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("criterion {n} {tag}: {name} ({detail})");
        if !pass {
            self.failed.push(n);
        }
    }
}

fn random_interval(rng: &mut ChaCha8Rng, duration: f64) -> Interval {
    loop {
        let a = rng.random_range(0.0..duration);
        let b = rng.random_range(0.0..duration);
        if (a - b).abs() > 1e-6 {
            return Interval::new(a.min(b), a.max(b));
        }
    }
}

fn metric_oracle() -> (bool, String) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut preds = Vec::new();
    let mut samples = Vec::new();
    for i in 0..1000 {
        let duration = rng.random_range(1.0..120.0);
        let pred = random_interval(&mut rng, duration);
        let k = rng.random_range(1..4);
        let gts: Vec<Interval> = (0..k).map(|_| random_interval(&mut rng, duration)).collect();
        let (iop, iou) = iop_iou(&pred, &gts).unwrap();
        let (biop, biou) = brute_iop_iou(&pred, &gts);
        worst = worst.max((iop - biop).abs()).max((iou - biou).abs());
        let qid = format!("q{i}");
        preds.push(Prediction {
            qid: qid.clone(),
            answer_idx: rng.random_range(0..5),
            interval: pred,
        });
        samples.push(QASample {
            qid,
            video_id: format!("v{}", rng.random_range(0..150)),
            question_tokens: vec![0],
            answer_options: vec![vec![0]; 5],
            correct_idx: rng.random_range(0..5),
            gt_intervals: gts,
            triple: None,
            question_type: QuestionType::Causal,
            bias_entity_pair: None,
        });
    }
    let mut counts_match = true;
    for (averaging, by_video) in [(Averaging::Question, false), (Averaging::Video, true)] {
        let r = grade(&preds, &samples, &[0.3, 0.5, 0.7], averaging).unwrap();
        let b = brute_grade(&preds, &samples, &[0.3, 0.5, 0.7], by_video);
        for (x, y) in [(r.acc_vqa, b.acc_vqa), (r.acc_gqa, b.acc_gqa), (r.miop, b.miop), (r.miou, b.miou)] {
            worst = worst.max((x - y).abs());
        }
        for t in ["0.3", "0.5", "0.7"] {
            worst = worst.max((r.iop_at[t] - b.iop_at[t]).abs());
            worst = worst.max((r.iou_at[t] - b.iou_at[t]).abs());
        }
        counts_match &= r.counts.bias_error == b.bias && r.counts.unfaithful == b.unfaithful;
    }
    let secs = started.elapsed().as_secs_f64();
    (
        worst <= 1e-9 && counts_match && secs < 5.0,
        format!("1000 cases, max deviation {worst:.2e}, counts match {counts_match}, {secs:.2}s"),
    )
}

/// Checks the exact and product relations of a whole-video report.
fn baseline_identities(r: &EvalReport) -> (bool, bool, String) {
    let iop05 = r.iop_rate(0.5).unwrap();
    let bound = r.acc_vqa * iop05 / 100.0 + 1e-9;
    (
        r.miop == r.miou,
        r.acc_gqa <= bound,
        format!("mIoP {:.2} mIoU {:.2} Acc@GQA {:.2} bound {:.2}", r.miop, r.miou, r.acc_gqa, bound),
    )
}

fn extraction_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..48);
        // Small integer levels make ties and plateaus common.
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 + 0.01).collect();
        let z: f64 = raw.iter().sum();
        let att: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let top = att.iter().cloned().fold(f64::MIN, f64::max);
        if att.iter().filter(|&&x| x == top).count() > 1 {
            ties += 1;
        }
        let m = meta(rng.random_range(1.0..90.0), n);
        let gamma = rng.random_range(0.05..=1.0);
        if extract_interval(&att, &m, gamma).unwrap() != brute_interval(&att, &m, gamma) {
            mismatches += 1;
        }
    }
    (mismatches == 0, format!("1000 vectors, {ties} with tied peaks, {mismatches} mismatches"))
}

fn gradient_checks() -> (bool, String) {
    let started = Instant::now();
    let a = grad::info_nce_query();
    let (b1, b2) = grad::smoothing_scores_and_sigma();
    let c = grad::back_door_query_projection();
    let (d, _) = grad::full_loss_log_sigma();
    let secs = started.elapsed().as_secs_f64();
    let pass = [a, b1, b2, c, d].iter().all(|&e| e < grad::TOL) && secs < 30.0;
    (
        pass,
        format!("info_nce {a:.1e}, smooth/scores {b1:.1e}, smooth/sigma {b2:.1e}, back-door {c:.1e}, loss/log-sigma {d:.1e}, {secs:.2}s"),
    )
}

fn simplex_suite(run: &TrainedRun, data: &Dataset) -> (bool, String) {
    let mut worst_kernel = 0.0f64;
    for sigma in [0.1, 0.5, 1.0, 2.0, 5.0] {
        let (k, _) = gaussian_kernel(sigma);
        worst_kernel = worst_kernel.max((k.iter().sum::<f64>() - 1.0).abs());
    }
    let model = &run.model;
    let mut worst_dist = 0.0f64;
    let mut negative = false;
    let mut rows = 0;
    let mut check = |m: &vqground::tensor::Mat| {
        for r in 0..m.rows() {
            let row = m.row(r);
            negative |= row.iter().any(|&x| x < 0.0);
            worst_dist = worst_dist.max((row.iter().sum::<f64>() - 1.0).abs());
            rows += 1;
        }
    };
    let batch = Batch::new(data, &run.split.test).unwrap();
    for smooth in [true, false] {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let fv = model.forward(&mut g, &p, &batch, smooth).unwrap();
        check(g.value(fv.attention));
        let probs = g.softmax_rows(fv.logits);
        check(g.value(probs));
    }
    for rec in &run.predictions {
        let s: f64 = rec.attention.iter().sum();
        worst_dist = worst_dist.max((s - 1.0).abs());
    }
    let mut worst_prior = 0.0f64;
    for dict in model.linguistic.iter().chain(&model.visual) {
        negative |= dict.priors.iter().any(|&p| p < 0.0);
        worst_prior = worst_prior.max((dict.priors.iter().sum::<f64>() - 1.0).abs());
    }
    (
        worst_kernel < 1e-9 && worst_dist < 1e-6 && worst_prior < 1e-9 && !negative,
        format!(
            "kernel {worst_kernel:.1e}, {rows} attention/answer rows {worst_dist:.1e}, priors {worst_prior:.1e}, negatives {negative}"
        ),
    )
}

fn decomposition(r: &EvalReport) -> bool {
    let low = r.per_question.iter().filter(|q| q.iop < 0.3).count();
    r.counts.bias_error + r.counts.unfaithful == r.counts.low_iop
        && r.counts.low_iop == low
        && (r.bias_error_rate + r.unfaithful_rate - r.low_iop_rate).abs() < 1e-9
        && (r.low_iop_rate - 100.0 * low as f64 / r.per_question.len() as f64).abs() < 1e-9
}

fn main() {
    let mut tally = Tally { failed: Vec::new() };
    let mut reports: Vec<EvalReport> = Vec::new();

    let (pass, detail) = metric_oracle();
    tally.report(1, "metric oracle equivalence", pass, detail);

    let mut exact = true;
    let mut product = true;
    let mut details = Vec::new();
    let bench_spec = BiasSpec {
        p_answer_bias: 0.7,
        segment_ratio_mean: 0.2,
        noise_sigma: 2.0,
        seed: 7,
        ..BiasSpec::default()
    };
    let bench = generate_dataset(&bench_spec, &GeneratorConfig::default(), 500, 2).unwrap();
    let baselines = [
        ("uniform", small_dataset(200, 3, 16, 16, 11)),
        ("short-segments", {
            let spec = BiasSpec {
                segment_ratio_mean: 0.08,
                seed: 12,
                ..BiasSpec::default()
            };
            generate_dataset(&spec, &GeneratorConfig { dim: Some(16), ..Default::default() }, 200, 2).unwrap()
        }),
        ("bias benchmark", bench.clone()),
    ];
    for (name, data) in &baselines {
        let r = random_baseline(data).unwrap();
        let (e, p, d) = baseline_identities(&r);
        exact &= e;
        product &= p;
        details.push(format!("{name}: {d}"));
        reports.push(r);
    }
    tally.report(
        2,
        "random-baseline identities",
        exact && product,
        format!("mIoP == mIoU {exact}, product bound {product}; {}", details.join("; ")),
    );

    let (pass, detail) = extraction_oracle();
    tally.report(3, "interval extraction oracle", pass, detail);

    let (pass, detail) = gradient_checks();
    tally.report(4, "gradient checks", pass, detail);

    // Learnability run, also reused by the simplex suite.
    let learn_spec = BiasSpec {
        noise_sigma: 0.0,
        p_answer_bias: 0.0,
        seed: 1,
        ..BiasSpec::default()
    };
    let learn = generate_dataset(&learn_spec, &GeneratorConfig::default(), 200, 4).unwrap();
    let started = Instant::now();
    let learn_cfg = TrainConfig {
        epochs: 20,
        seed: 0,
        ..TrainConfig::default()
    };
    let run = train_run(&learn, &learn_cfg, None).unwrap();
    let learn_secs = started.elapsed().as_secs_f64();

    let (pass, detail) = simplex_suite(&run, &learn);
    tally.report(5, "simplex and normalization suite", pass, detail);

    let rec = &run.record;
    let finite = rec.epochs.iter().all(|e| e.loss.is_finite());
    tally.report(
        6,
        "learnability",
        rec.report.acc_vqa >= 95.0 && rec.report.miop >= 50.0 && learn_secs < 600.0 && finite,
        format!(
            "200 videos, test Acc@VQA {:.2}, mIoP {:.2}, best epoch {}, {learn_secs:.1}s",
            rec.report.acc_vqa, rec.report.miop, rec.best_epoch
        ),
    );
    reports.push(rec.report.clone());

    let started = Instant::now();
    let rows = [AblationRow::Full, AblationRow::NoCma, AblationRow::NoCausal, AblationRow::NoGsg];
    let table = run_ablation_matrix(&bench, &TrainConfig::default(), &rows, &[0, 1, 2]).unwrap();
    let secs = started.elapsed().as_secs_f64();
    print!("{}", table.to_table());
    let m = |r: AblationRow| table.row(r).unwrap().median.clone();
    let (full, no_cma, no_causal, ph) = (m(AblationRow::Full), m(AblationRow::NoCma), m(AblationRow::NoCausal), m(AblationRow::NoGsg));
    let finite = table.rows.iter().flat_map(|r| &r.runs).all(|r| r.epochs.iter().all(|e| e.loss.is_finite()));
    tally.report(
        7,
        "ablation ordering",
        full.acc_gqa > no_cma.acc_gqa && full.acc_gqa > no_causal.acc_gqa && full.iou_05 > ph.iou_05 && finite,
        format!(
            "median Acc@GQA full {:.2} vs no-cma {:.2} vs no-causal {:.2}; IoU@0.5 GSG {:.2} vs PH {:.2}; {secs:.0}s",
            full.acc_gqa, no_cma.acc_gqa, no_causal.acc_gqa, full.iou_05, ph.iou_05
        ),
    );
    for r in &table.rows {
        reports.extend(r.runs.iter().map(|x| x.report.clone()));
    }

    let repro = small_dataset(80, 2, 16, 16, 21);
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let a = train(&repro, &cfg).unwrap();
    let b = train(&repro, &cfg).unwrap();
    let losses_equal = a.epochs.iter().zip(&b.epochs).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits());
    tally.report(
        8,
        "reproducibility",
        losses_equal && a.epochs.len() == b.epochs.len() && a.report == b.report,
        format!("{} epochs bit-equal {losses_equal}, reports equal {}", a.epochs.len(), a.report == b.report),
    );
    reports.push(a.report);

    let consistent = reports.iter().filter(|r| decomposition(r)).count();
    tally.report(
        9,
        "bias decomposition consistency",
        consistent == reports.len(),
        format!("{consistent} of {} reports", reports.len()),
    );

    if tally.failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {:?}", tally.failed);
    }
}
