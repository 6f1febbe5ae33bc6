//! Run configuration shared by every subcommand: model, training, dataset and
//! evaluation settings in one flat `key=value` namespace.
//!
//! `seed` sets the model, training and dataset seeds together; `num_classes`
//! and `image_size` are shared by the model and the dataset.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::kv;
use crate::model::ModelConfig;
use crate::trainer::{EvalOptions, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub eval: EvalOptions,
    explicit: BTreeSet<String>,
}


const EVAL_KEYS: [&str; 7] = [
    "method",
    "class_source",
    "tau_steps",
    "component_policy",
    "grad_target",
    "clamp_order",
    "rollout_normalize",
];

impl RunConfig {
    /// Sets one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut known = false;
        known |= self.model.apply(key, raw)?;
        known |= self.train.apply(key, raw)?;
        known |= self.data.apply(key, raw)?;
        known |= self.apply_eval(key, raw)?;
        if !known {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    fn apply_eval(&mut self, key: &str, raw: &str) -> Result<bool> {
        let e = &mut self.eval;
        match key {
            "method" => e.map.source = kv::value(key, raw)?,
            "class_source" => e.class_source = kv::value(key, raw)?,
            "tau_steps" => e.tau_steps = kv::value(key, raw)?,
            "component_policy" => e.policy = kv::value(key, raw)?,
            "grad_target" => e.map.grad_target = kv::value(key, raw)?,
            "clamp_order" => e.map.rollout.clamp = kv::value(key, raw)?,
            "rollout_normalize" => e.map.rollout.normalize = kv::flag(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, k, v) in kv::parse(text, path)? {
            cfg.set(&k, &v).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                },
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, path)
    }

    /// Whether `key` was set by the file or an override.
    pub fn is_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.tau_steps == 0 {
            return Err(Error::Config("tau_steps must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its current value; parsing the rendering reproduces the config.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = self.model.to_pairs();
        let mut seen: BTreeSet<&str> = pairs.iter().map(|p| p.0).collect();
        for (k, v) in self.train.to_pairs().into_iter().chain(self.data.to_pairs()) {
            if seen.insert(k) {
                pairs.push((k, v));
            }
        }
        let e = &self.eval;
        let eval = [
            e.map.source.to_string(),
            e.class_source.to_string(),
            e.tau_steps.to_string(),
            e.policy.to_string(),
            e.map.grad_target.to_string(),
            e.map.rollout.clamp.to_string(),
            e.map.rollout.normalize.to_string(),
        ];
        pairs.extend(EVAL_KEYS.into_iter().zip(eval));
        pairs
    }

    pub fn render(&self) -> String {
        kv::render(&self.to_pairs())
    }
}
