//! Cross-video negatives and the two-way InfoNCE alignment loss.
//!
//! cargo run --release --example contrastive_alignment

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqground::alignment::{align_loss, info_nce, max_negatives, sample_negatives, AlignConfig};
use vqground::tensor::Mat;

fn main() -> vqground::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, d) = (12, 16);
    let ids: Vec<String> = (0..b).map(|i| format!("v{}", i / 2)).collect();
    let questions = Mat::randn(b, d, 1.0, &mut rng);
    let noise = Mat::randn(b, d, 1.0, &mut rng);

    let neg = sample_negatives(&ids, 0, 4, 4, 7)?;
    println!("entry 0 ({}): question negatives {:?}, segment negatives {:?}", ids[0], neg.l_neg, neg.v_neg);
    println!("largest usable k in this batch: {}", max_negatives(&ids));

    let cfg = AlignConfig {
        k_l: 4,
        k_v: 4,
        ..AlignConfig::default()
    };
    println!("\nmix   align loss");
    for mix in [0.0, 0.25, 0.5, 0.75, 1.0] {
        // Segments drift from random towards their own question.
        let segments = questions.zip_map(&noise, |q, n| mix * q + (1.0 - mix) * n).scale(0.3);
        println!("{mix:>4.2}  {:.4}", align_loss(&segments, &questions.scale(0.3), &ids, &cfg, 1)?);
    }

    let q = questions.row(0);
    let negs = Mat::from_rows(&neg.l_neg.iter().map(|&j| questions.row(j).to_vec()).collect::<Vec<_>>());
    println!("\nInfoNCE of a question against itself: {:.4}", info_nce(q, q, &negs, cfg.tau)?);
    Ok(())
}
