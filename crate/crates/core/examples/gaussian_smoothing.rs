//! Smoothing a noisy score track, and the intervals read off it.
//!
//! cargo run --release --example gaussian_smoothing

use vqground::autograd::gaussian_kernel;
use vqground::dataset::VideoMeta;
use vqground::grounding::{extract_interval, gaussian_smooth, ph_interval};

fn bar(w: &[f64]) -> String {
    let top = w.iter().cloned().fold(0.0, f64::max);
    w.iter()
        .map(|x| [' ', '.', ':', '-', '=', '+', '*', '#'][((x / top) * 7.0).round() as usize])
        .collect()
}

fn main() -> vqground::Result<()> {
    // An event over frames 10..18, with a dip in the middle and a distractor spike.
    let mut scores = vec![0.0; 32];
    for (i, s) in scores.iter_mut().enumerate().take(18).skip(10) {
        *s = 2.0 + 0.3 * ((i * 7) % 3) as f64;
    }
    scores[14] = 0.5;
    scores[26] = 2.6;
    let meta = VideoMeta {
        video_id: "demo".into(),
        duration: 64.0,
        n_frames: 32,
    };
    let raw = gaussian_smooth(&scores, 1e-3)?;
    let ph = ph_interval(&raw, &meta, 0.5)?;
    println!("sigma   attention                           interval");
    println!("  raw   |{}|  {:>5.1}-{:<5.1} s", bar(&raw), ph.start, ph.end);
    for sigma in [0.5, 1.0, 2.0, 4.0] {
        let w = gaussian_smooth(&scores, sigma)?;
        let iv = extract_interval(&w, &meta, 0.5)?;
        let (k, _) = gaussian_kernel(sigma);
        println!(
            "{sigma:>5.1}   |{}|  {:>5.1}-{:<5.1} s  ({} taps)",
            bar(&w),
            iv.start,
            iv.end,
            k.len()
        );
    }
    Ok(())
}
