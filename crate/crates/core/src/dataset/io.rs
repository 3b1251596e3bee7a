//! Manifest plus raw little-endian `f32` feature files.
//!
//! ```text
//! DIR/manifest.json
//! DIR/features/<video_id>.f32      n_frames * dim floats, row-major
//! DIR/features/q_<qid>.f32         m * dim floats, one row per question token
//! DIR/features/a_<qid>.f32         5 * dim floats, one row per answer option
//! DIR/embeddings.f32               (E + V + O + 2) * dim floats
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Dataset, Embeddings, FeatureBundle, QASample, VideoMeta, VocabSizes};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dim: usize,
    vocab: VocabSizes,
    #[serde(default)]
    embeddings_file: Option<String>,
    videos: Vec<VideoRecord>,
    samples: Vec<SampleRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VideoRecord {
    #[serde(flatten)]
    meta: VideoMeta,
    feat_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    #[serde(flatten)]
    sample: QASample,
    feat_file: String,
    answer_feat_file: String,
}

fn write_f32(path: &Path, m: &Mat) -> Result<()> {
    let bytes: Vec<u8> = m.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, rows: usize, cols: usize) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Validation(format!(
            "{} holds {} bytes, manifest implies {rows}x{cols} f32 values ({} bytes)",
            path.display(),
            bytes.len(),
            rows * cols * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Mat::from_vec(rows, cols, data))
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

/// Writes `data` under `dir`, returning the manifest path.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<PathBuf> {
    data.validate()?;
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let mut videos = Vec::with_capacity(data.videos.len());
    let mut written: HashMap<&str, String> = HashMap::new();
    for (s, f) in data.samples.iter().zip(&data.features) {
        if written.contains_key(s.video_id.as_str()) {
            continue;
        }
        let name = format!("features/{}.f32", file_stem(&s.video_id));
        write_f32(&dir.join(&name), &f.video_feats)?;
        written.insert(s.video_id.as_str(), name);
    }
    for v in &data.videos {
        let feat_file = match written.get(v.video_id.as_str()) {
            Some(n) => n.clone(),
            None => {
                return Err(Error::Validation(format!(
                    "video {} has no questions, so no features to write",
                    v.video_id
                )))
            }
        };
        videos.push(VideoRecord {
            meta: v.clone(),
            feat_file,
        });
    }

    let mut samples = Vec::with_capacity(data.samples.len());
    for (s, f) in data.samples.iter().zip(&data.features) {
        let name = format!("features/q_{}.f32", file_stem(&s.qid));
        write_f32(&dir.join(&name), &f.qa_token_feats)?;
        let answer_name = format!("features/a_{}.f32", file_stem(&s.qid));
        write_f32(&dir.join(&answer_name), &f.answer_feats)?;
        samples.push(SampleRecord {
            sample: s.clone(),
            feat_file: name,
            answer_feat_file: answer_name,
        });
    }

    let embeddings_file = match &data.embeddings {
        Some(e) => {
            let name = "embeddings.f32".to_string();
            let all = Mat::vstack(&[&e.entity, &e.verb, &e.object, &e.qtype]);
            write_f32(&dir.join(&name), &all)?;
            Some(name)
        }
        None => None,
    };

    let manifest = Manifest {
        dim: data.dim,
        vocab: data.vocab,
        embeddings_file,
        videos,
        samples,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a dataset from a manifest path, or from a directory containing one.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_FILE)
    } else {
        manifest_path.to_path_buf()
    };
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", manifest_path.display())))?;
    if manifest.dim == 0 {
        return Err(Error::Validation("manifest dim must be positive".into()));
    }
    let dim = manifest.dim;

    let mut video_feats: HashMap<String, Arc<Mat>> = HashMap::new();
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for rec in manifest.videos {
        rec.meta.validate()?;
        if video_feats.contains_key(&rec.meta.video_id) {
            return Err(Error::Validation(format!("duplicate video_id {}", rec.meta.video_id)));
        }
        let feats = read_f32(&root.join(&rec.feat_file), rec.meta.n_frames, dim)?;
        video_feats.insert(rec.meta.video_id.clone(), Arc::new(feats));
        videos.push(rec.meta);
    }

    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut features = Vec::with_capacity(manifest.samples.len());
    let mut qids = std::collections::HashSet::new();
    for rec in manifest.samples {
        let s = rec.sample;
        if !qids.insert(s.qid.clone()) {
            return Err(Error::Validation(format!("duplicate qid {}", s.qid)));
        }
        let vf = video_feats.get(&s.video_id).cloned().ok_or_else(|| {
            Error::Validation(format!("sample {} references unknown video {}", s.qid, s.video_id))
        })?;
        let qa = read_f32(&root.join(&rec.feat_file), s.question_tokens.len(), dim)?;
        let ans = read_f32(&root.join(&rec.answer_feat_file), super::NUM_OPTIONS, dim)?;
        features.push(FeatureBundle::new(vf, qa, ans));
        samples.push(s);
    }

    let v = manifest.vocab;
    let embeddings = match manifest.embeddings_file {
        Some(name) => {
            let all = read_f32(&root.join(&name), v.total() + 2, dim)?;
            let mut off = 0;
            let mut take = |n: usize| {
                let m = all.slice_rows(off, n);
                off += n;
                m
            };
            Some(Embeddings {
                entity: take(v.entity),
                verb: take(v.verb),
                object: take(v.object),
                qtype: take(2),
            })
        }
        None => None,
    };

    let data = Dataset {
        dim,
        vocab: v,
        embeddings,
        videos,
        samples,
        features,
    };
    data.validate()?;
    Ok(data)
}
