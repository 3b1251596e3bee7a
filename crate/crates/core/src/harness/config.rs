use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignConfig;
use crate::causal::DICT_SIZE;
use crate::error::{Error, Result};
use crate::grounding::DEFAULT_GAMMA;
use crate::model::{IntervalPolicy, ModelFlags};

/// Training and ablation settings. Serialized as a flat TOML table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Initialization, shuffling and negative sampling.
    pub seed: u64,
    /// Train/validation/test split and dictionary clustering.
    pub split_seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub k_l: usize,
    pub k_v: usize,
    pub gamma: f64,
    pub use_gsg_smoothing_train: bool,
    pub use_gsg_smoothing_infer: bool,
    pub use_cma: bool,
    pub use_lci: bool,
    pub use_eci: bool,
    pub interval_policy: IntervalPolicy,
    pub dict_size: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AlignConfig::default();
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            split_seed: 0,
            lambda1: a.lambda1,
            lambda2: a.lambda2,
            tau: a.tau,
            k_l: a.k_l,
            k_v: a.k_v,
            gamma: DEFAULT_GAMMA,
            use_gsg_smoothing_train: true,
            use_gsg_smoothing_infer: true,
            use_cma: true,
            use_lci: true,
            use_eci: true,
            interval_policy: IntervalPolicy::Gsg,
            dict_size: DICT_SIZE,
            val_fraction: 0.15,
            test_fraction: 0.15,
            eval_chunk: 128,
        }
    }
}

impl TrainConfig {
    /// Applies the flag implications: the post-hoc policy has no smoothing.
    pub fn normalized(mut self) -> Self {
        if self.interval_policy == IntervalPolicy::Ph {
            self.use_gsg_smoothing_train = false;
            self.use_gsg_smoothing_infer = false;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if self.dict_size == 0 {
            return bad("dict_size must be positive".into());
        }
        if self.eval_chunk == 0 {
            return bad("eval_chunk must be positive".into());
        }
        let (v, t) = (self.val_fraction, self.test_fraction);
        if !(v > 0.0 && t > 0.0 && v + t < 1.0) {
            return bad(format!("split fractions {v} and {t} leave no training data"));
        }
        if self.interval_policy == IntervalPolicy::Ph
            && (self.use_gsg_smoothing_train || self.use_gsg_smoothing_infer)
        {
            return bad("the post-hoc interval policy cannot use smoothing".into());
        }
        if self.use_cma {
            self.align().validate().map_err(|e| Error::Config(e.to_string()))?;
            let k = self.k_l.max(self.k_v);
            if k >= self.batch_size {
                return bad(format!(
                    "{k} negatives need a batch larger than {}",
                    self.batch_size
                ));
            }
        }
        Ok(())
    }

    pub fn align(&self) -> AlignConfig {
        AlignConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            tau: self.tau,
            k_l: self.k_l,
            k_v: self.k_v,
        }
    }

    pub fn flags(&self) -> ModelFlags {
        ModelFlags {
            use_lci: self.use_lci,
            use_eci: self.use_eci,
            policy: self.interval_policy,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.normalized())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}
