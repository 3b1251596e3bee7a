//! Named trainable tensors, the Adam optimizer, and the checkpoint archive.
//!
//! Checkpoints use the safetensors layout: an 8-byte little-endian header
//! length, a JSON header mapping each tensor name to its dtype, shape and byte
//! range, then the raw little-endian `f32` payload. Free-form string metadata
//! (such as a dictionary's modality) lives under the header's `__metadata__`.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use safetensors::{Dtype, SafeTensors, View};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name, which is a model-building bug.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "parameter {name} registered twice"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }

    /// Places every parameter on the tape as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.leaf(v.clone())).collect(),
        }
    }

    /// Gradients aligned with [`ParamStore::ids`]; parameters untouched by the
    /// loss get zeros.
    pub fn collect_grads(&self, grads: &Grads, bound: &Bound) -> Vec<Mat> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, var)| {
                grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(v.rows(), v.cols()))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Mat)> = self
            .names
            .iter()
            .map(String::as_str)
            .zip(&self.values)
            .collect();
        save_tensors(path, &entries, HashMap::new())
    }

    /// Overwrites values from an archive. Every stored name must exist here
    /// with the same shape, and every parameter here must be present.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let (tensors, _) = load_tensors(path)?;
        if tensors.len() != self.len() {
            return Err(Error::Validation(format!(
                "{} holds {} tensors, model has {}",
                path.display(),
                tensors.len(),
                self.len()
            )));
        }
        for (name, value) in tensors {
            let id = self.find(&name).ok_or_else(|| {
                Error::Validation(format!("unknown parameter {name} in {}", path.display()))
            })?;
            if self.get(id).shape() != value.shape() {
                return Err(Error::Validation(format!(
                    "parameter {name}: archive shape {:?}, model shape {:?}",
                    value.shape(),
                    self.get(id).shape()
                )));
            }
            self.values[id.0] = value;
        }
        Ok(())
    }
}

/// Graph variables for a [`ParamStore`] bound on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = store
            .values
            .iter()
            .map(|v| Mat::zeros(v.rows(), v.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters listed in `frozen` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], frozen: &[ParamId]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            if frozen.contains(&ParamId(i)) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = &mut store.values[i];
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

struct F32View {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for F32View {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

/// Writes named matrices as `f32` tensors of shape `[rows, cols]`.
pub fn save_tensors(path: &Path, tensors: &[(&str, &Mat)], metadata: HashMap<String, String>) -> Result<()> {
    let views = tensors.iter().map(|(name, m)| {
        let bytes = m
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        (
            name.to_string(),
            F32View {
                shape: vec![m.rows(), m.cols()],
                bytes,
            },
        )
    });
    let info = if metadata.is_empty() { None } else { Some(metadata) };
    safetensors::serialize_to_file(views, &info, path)
        .map_err(|e| Error::Serde(format!("writing {}: {e}", path.display())))
}

/// Reads an archive written by [`save_tensors`], in name order.
pub fn load_tensors(path: &Path) -> Result<(Vec<(String, Mat)>, HashMap<String, String>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&buf)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let st = SafeTensors::deserialize(&buf)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut names: Vec<String> = st.names().into_iter().cloned().collect();
    names.sort();
    for name in names {
        let view = st
            .tensor(&name)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::Validation(format!("tensor {name} is not f32")));
        }
        let (rows, cols) = match view.shape() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            other => {
                return Err(Error::Validation(format!(
                    "tensor {name} has unsupported rank {}",
                    other.len()
                )))
            }
        };
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Mat::from_vec(rows, cols, data)));
    }
    Ok((out, meta.metadata().clone().unwrap_or_default()))
}
