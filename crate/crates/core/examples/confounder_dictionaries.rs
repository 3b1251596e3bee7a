//! Builds both confounder dictionaries and applies the two interventions.
//!
//! cargo run --release --example confounder_dictionaries

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqground::causal::{build_linguistic_dict, build_visual_dict, eci_front_door, lci_deconfound, EciParams, LciParams};
use vqground::dataset::{generate_dataset, BiasSpec, GeneratorConfig};
use vqground::grounding::attention_pool;
use vqground::params::ParamStore;
use vqground::tensor::{cosine, Mat};

fn main() -> vqground::Result<()> {
    let spec = BiasSpec {
        p_answer_bias: 0.7,
        seed: 2,
        ..BiasSpec::default()
    };
    let data = generate_dataset(&spec, &GeneratorConfig::default(), 100, 2)?;
    let emb = data.embeddings.as_ref().expect("generated data carries embeddings");

    let samples: Vec<_> = data.samples.iter().collect();
    let ling = build_linguistic_dict(&samples, emb, &data.vocab, 16, 0)?;
    let frames: Vec<&Mat> = data.features.iter().step_by(2).map(|f| &*f.video_feats).collect();
    let visual = build_visual_dict(&Mat::vstack(&frames), 24, 0)?;
    for d in [&ling, &visual] {
        let top = d.priors.iter().cloned().fold(0.0, f64::max);
        println!(
            "{:?}: {} centres, largest prior {top:.3}, prior sum {:.6}",
            d.modality,
            d.len(),
            d.priors.iter().sum::<f64>()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let lci = LciParams::new(&mut store, data.dim, &mut rng);
    let eci = EciParams::new(&mut store, data.dim, &mut rng);

    let f = &data.features[0];
    let q = f.qa_global.data();
    let q_dec = lci_deconfound(q, &ling, &lci, &store)?;
    println!("\nback-door: cos(q, q') = {:.4}", cosine(q, &q_dec));

    let n = f.video_feats.rows();
    let s = &data.samples[0];
    let meta = data.video(&s.video_id).unwrap();
    let g = s.gt_intervals[0];
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) * meta.duration / n as f64;
            if t >= g.start && t < g.end { 1.0 } else { 0.0 }
        })
        .collect();
    let z: f64 = w.iter().sum::<f64>().max(1.0);
    let w: Vec<f64> = w.iter().map(|x| x / z).collect();
    let v_t = attention_pool(&f.video_feats, &w)?;
    let v_bar = f.video_feats.mean_over_rows();
    let out = eci_front_door(&v_t, v_bar.data(), &q_dec, &visual, &eci, &store)?;
    println!(
        "front-door: cos(out, v_t) = {:.4}, cos(out, mean frame) = {:.4}",
        cosine(&out, &v_t),
        cosine(&out, v_bar.data())
    );
    Ok(())
}
