//! The whole-video, fixed-answer baseline, and grading of hand-made predictions.
//!
//! cargo run --release --example random_baseline

use vqground::dataset::{generate_dataset, BiasSpec, GeneratorConfig, Interval};
use vqground::evalmetrics::{grade, iop_iou, Averaging, Prediction};
use vqground::harness::random_baseline;

fn main() -> vqground::Result<()> {
    let data = generate_dataset(&BiasSpec::default(), &GeneratorConfig::default(), 300, 2)?;
    let r = random_baseline(&data)?;
    println!("whole video, answer 0");
    print!("{}", r.to_table());
    assert_eq!(r.miop, r.miou);

    // Predictions that sit on the first half of each ground truth.
    let preds: Vec<Prediction> = data
        .samples
        .iter()
        .map(|s| {
            let g = s.gt_intervals[0];
            Prediction {
                qid: s.qid.clone(),
                answer_idx: s.correct_idx,
                interval: Interval::new(g.start, g.start + 0.5 * g.length()),
            }
        })
        .collect();
    let half = grade(&preds, &data.samples, &[0.3, 0.5, 0.7], Averaging::Video)?;
    println!("\ncorrect answers, first half of the evidence");
    print!("{}", half.to_table());

    let (iop, iou) = iop_iou(&Interval::new(2.0, 6.0), &[Interval::new(4.0, 10.0), Interval::new(0.0, 3.0)])?;
    println!("\nIoP {iop:.3}  IoU {iou:.3}");
    Ok(())
}
