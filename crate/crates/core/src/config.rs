//! Experiment configuration: a flat JSON object of named hyperparameters.
//!
//! Missing keys take the documented defaults, unknown keys are rejected by
//! name, and `key=value` overrides are applied last. The fully resolved
//! config serializes back to JSON so every run can echo it next to its
//! outputs and be reproduced from that file alone.

use serde_json::{Map, Value};
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::{LossHyper, LossKind};
use crate::model::{BackboneKind, BackboneSpec};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    Synth,
    Idx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub k: usize,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub p: usize,
    pub m: usize,
    pub lr: f64,
    pub d_embed: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub margin: f64,
    pub backbone: BackboneKind,
    pub channels: Vec<usize>,
    pub image_size: usize,
    pub image_channels: usize,
    pub dataset: DatasetKind,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_eval_per_class: usize,
    pub idx_images: Option<String>,
    pub idx_labels: Option<String>,
    pub idx_eval_images: Option<String>,
    pub idx_eval_labels: Option<String>,
    pub checkpoint_every: usize,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            k: 100,
            eta: 0.1,
            alpha: 2.0,
            beta: 50.0,
            lambda: 1.0,
            epsilon: 0.1,
            p: 14,
            m: 5,
            lr: 1e-3,
            d_embed: 32,
            epochs: 15,
            seed: 0,
            loss: LossKind::MultiSimilarity,
            margin: 0.2,
            backbone: BackboneKind::SmallConv,
            channels: vec![16, 32, 64],
            image_size: 32,
            image_channels: 1,
            dataset: DatasetKind::Synth,
            synth_classes: 8,
            synth_per_class: 200,
            synth_eval_per_class: 50,
            idx_images: None,
            idx_labels: None,
            idx_eval_images: None,
            idx_eval_labels: None,
            checkpoint_every: 5,
            workers: 1,
        }
    }
}

const KEYS: &[&str] = &[
    "k",
    "eta",
    "alpha",
    "beta",
    "lambda",
    "epsilon",
    "p",
    "m",
    "lr",
    "d_embed",
    "epochs",
    "seed",
    "loss",
    "margin",
    "backbone",
    "channels",
    "image_size",
    "image_channels",
    "dataset",
    "synth_classes",
    "synth_per_class",
    "synth_eval_per_class",
    "idx_images",
    "idx_labels",
    "idx_eval_images",
    "idx_eval_labels",
    "checkpoint_every",
    "workers",
];

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| Error::Config(format!("key {key:?}: expected a non-negative integer, got {v}")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Config(format!("key {key:?}: expected a non-negative integer, got {v}")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("key {key:?}: expected a number, got {v}")))
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("key {key:?}: expected a string, got {v}")))
}

fn as_opt_string(key: &str, v: &Value) -> Result<Option<String>> {
    match v {
        Value::Null => Ok(None),
        Value::String(s) => Ok(Some(s.clone())),
        other => Err(Error::Config(format!(
            "key {key:?}: expected a string or null, got {other}"
        ))),
    }
}

impl ExperimentConfig {
    /// Parses a flat JSON object, starting from defaults.
    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let mut cfg = ExperimentConfig::default();
        for (key, v) in obj {
            cfg.set_value(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies `key=value` overrides last.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let value = match path {
            None => Value::Object(Map::new()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: invalid JSON: {e}", p.display())))?
            }
        };
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let mut cfg = ExperimentConfig::default();
        for (key, v) in obj {
            cfg.set_value(key, v)?;
        }
        for (key, raw) in overrides {
            // numbers, booleans, arrays parse as JSON; anything else is a string
            let v: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.clone()));
            cfg.set_value(key, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_value(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "k" => self.k = as_usize(key, v)?,
            "eta" => self.eta = as_f64(key, v)?,
            "alpha" => self.alpha = as_f64(key, v)?,
            "beta" => self.beta = as_f64(key, v)?,
            "lambda" => self.lambda = as_f64(key, v)?,
            "epsilon" => self.epsilon = as_f64(key, v)?,
            "p" => self.p = as_usize(key, v)?,
            "m" => self.m = as_usize(key, v)?,
            "lr" => self.lr = as_f64(key, v)?,
            "d_embed" => self.d_embed = as_usize(key, v)?,
            "epochs" => self.epochs = as_usize(key, v)?,
            "seed" => self.seed = as_u64(key, v)?,
            "loss" => self.loss = LossKind::parse(as_str(key, v)?).map_err(reword_config)?,
            "margin" => self.margin = as_f64(key, v)?,
            "backbone" => {
                self.backbone = match as_str(key, v)? {
                    "small_conv" => BackboneKind::SmallConv,
                    "mlp" => BackboneKind::Mlp,
                    other => {
                        return Err(Error::Config(format!(
                            "key \"backbone\": unknown kind {other:?}; expected small_conv or mlp"
                        )))
                    }
                }
            }
            "channels" => {
                let arr = v.as_array().ok_or_else(|| {
                    Error::Config(format!("key \"channels\": expected an array of integers, got {v}"))
                })?;
                self.channels = arr
                    .iter()
                    .map(|e| as_usize("channels", e))
                    .collect::<Result<_>>()?;
            }
            "image_size" => self.image_size = as_usize(key, v)?,
            "image_channels" => self.image_channels = as_usize(key, v)?,
            "dataset" => {
                self.dataset = match as_str(key, v)? {
                    "synth" => DatasetKind::Synth,
                    "idx" => DatasetKind::Idx,
                    other => {
                        return Err(Error::Config(format!(
                            "key \"dataset\": unknown kind {other:?}; expected synth or idx"
                        )))
                    }
                }
            }
            "synth_classes" => self.synth_classes = as_usize(key, v)?,
            "synth_per_class" => self.synth_per_class = as_usize(key, v)?,
            "synth_eval_per_class" => self.synth_eval_per_class = as_usize(key, v)?,
            "idx_images" => self.idx_images = as_opt_string(key, v)?,
            "idx_labels" => self.idx_labels = as_opt_string(key, v)?,
            "idx_eval_images" => self.idx_eval_images = as_opt_string(key, v)?,
            "idx_eval_labels" => self.idx_eval_labels = as_opt_string(key, v)?,
            "checkpoint_every" => self.checkpoint_every = as_usize(key, v)?,
            "workers" => self.workers = as_usize(key, v)?,
            unknown => {
                return Err(Error::Config(format!(
                    "unknown config key {unknown:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        fn require(cond: bool, msg: &str) -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        }
        require(self.k >= 1, "k must be >= 1")?;
        require(self.p >= 1, "p must be >= 1")?;
        require(self.m >= 1, "m must be >= 1")?;
        require(
            self.p <= self.k,
            "p must be <= k: the batch sampler draws p distinct clusters",
        )?;
        require(self.lr > 0.0, "lr must be > 0")?;
        require(self.epochs >= 1, "epochs must be >= 1")?;
        require(self.d_embed >= 1, "d_embed must be >= 1")?;
        require(self.alpha > 0.0, "alpha must be > 0")?;
        require(self.beta > 0.0, "beta must be > 0")?;
        require(self.epsilon >= 0.0, "epsilon must be >= 0")?;
        require(self.eta >= 0.0, "eta must be >= 0")?;
        require(self.checkpoint_every >= 1, "checkpoint_every must be >= 1")?;
        require(self.workers >= 1, "workers must be >= 1")?;
        require(
            !self.channels.is_empty() && !self.channels.contains(&0),
            "channels must be a nonempty array of positive widths",
        )?;
        require(self.image_channels >= 1, "image_channels must be >= 1")?;
        if self.dataset == DatasetKind::Synth {
            require(self.synth_classes >= 1, "synth_classes must be >= 1")?;
            require(self.synth_per_class >= 1, "synth_per_class must be >= 1")?;
            require(self.image_size >= 16, "image_size must be >= 16 for synth data")?;
        }
        // backbone geometry is validated when the spec is built
        self.backbone_spec().map(|_| ())
    }

    pub fn backbone_spec(&self) -> Result<BackboneSpec> {
        BackboneSpec::new(
            self.backbone,
            self.channels.clone(),
            (self.image_channels, self.image_size, self.image_size),
        )
        .map_err(reword_config)
    }

    pub fn loss_hyper<T: Scalar>(&self) -> LossHyper<T> {
        LossHyper {
            alpha: T::from_f64(self.alpha),
            beta: T::from_f64(self.beta),
            lambda: T::from_f64(self.lambda),
            epsilon: T::from_f64(self.epsilon),
            eta: T::from_f64(self.eta),
            margin: T::from_f64(self.margin),
        }
    }

    /// The fully resolved config as a flat JSON object (keys sorted).
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        let mut put = |k: &str, v: Value| {
            map.insert(k.to_string(), v);
        };
        put("k", self.k.into());
        put("eta", self.eta.into());
        put("alpha", self.alpha.into());
        put("beta", self.beta.into());
        put("lambda", self.lambda.into());
        put("epsilon", self.epsilon.into());
        put("p", self.p.into());
        put("m", self.m.into());
        put("lr", self.lr.into());
        put("d_embed", self.d_embed.into());
        put("epochs", self.epochs.into());
        put("seed", self.seed.into());
        put("loss", self.loss.name().into());
        put("margin", self.margin.into());
        put(
            "backbone",
            match self.backbone {
                BackboneKind::SmallConv => "small_conv",
                BackboneKind::Mlp => "mlp",
            }
            .into(),
        );
        put(
            "channels",
            Value::Array(self.channels.iter().map(|&c| c.into()).collect()),
        );
        put("image_size", self.image_size.into());
        put("image_channels", self.image_channels.into());
        put(
            "dataset",
            match self.dataset {
                DatasetKind::Synth => "synth",
                DatasetKind::Idx => "idx",
            }
            .into(),
        );
        put("synth_classes", self.synth_classes.into());
        put("synth_per_class", self.synth_per_class.into());
        put("synth_eval_per_class", self.synth_eval_per_class.into());
        let opt = |o: &Option<String>| o.as_ref().map_or(Value::Null, |s| s.clone().into());
        put("idx_images", opt(&self.idx_images));
        put("idx_labels", opt(&self.idx_labels));
        put("idx_eval_images", opt(&self.idx_eval_images));
        put("idx_eval_labels", opt(&self.idx_eval_labels));
        put("checkpoint_every", self.checkpoint_every.into());
        put("workers", self.workers.into());
        Value::Object(map)
    }
}

fn reword_config(e: Error) -> Error {
    Error::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_yields_full_defaults() {
        let cfg = ExperimentConfig::from_json(&serde_json::json!({})).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.k, 100);
        assert_eq!(cfg.eta, 0.1);
        assert_eq!(cfg.m, 5);
        assert_eq!(cfg.alpha, 2.0);
        assert_eq!(cfg.beta, 50.0);
        assert_eq!(cfg.lambda, 1.0);
        assert_eq!(cfg.epsilon, 0.1);
    }

    #[test]
    fn overrides_apply_last() {
        let cfg =
            ExperimentConfig::load(None, &[("eta".to_string(), "0.5".to_string())]).unwrap();
        assert_eq!(cfg.eta, 0.5);
        let cfg = ExperimentConfig::load(
            None,
            &[
                ("loss".to_string(), "triplet".to_string()),
                ("channels".to_string(), "[4,8]".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.loss, LossKind::Triplet);
        assert_eq!(cfg.channels, vec![4, 8]);
    }

    #[test]
    fn zero_k_is_rejected() {
        let err = ExperimentConfig::from_json(&serde_json::json!({"k": 0})).unwrap_err();
        assert!(err.to_string().contains("k must be >= 1"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_json(&serde_json::json!({"learning_rate": 0.1}))
            .unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn type_mismatch_names_expected_type() {
        let err = ExperimentConfig::from_json(&serde_json::json!({"eta": "fast"})).unwrap_err();
        assert!(err.to_string().contains("expected a number"), "{err}");
    }

    #[test]
    fn p_larger_than_k_is_rejected() {
        let err = ExperimentConfig::from_json(&serde_json::json!({"k": 4})).unwrap_err();
        assert!(err.to_string().contains("p must be <= k"), "{err}");
        assert!(ExperimentConfig::from_json(&serde_json::json!({"k": 4, "p": 4})).is_ok());
    }

    #[test]
    fn json_round_trip_is_identity() {
        let cfg = ExperimentConfig::from_json(
            &serde_json::json!({"k": 8, "p": 4, "eta": 0.5, "loss": "lifted", "idx_images": "x.idx"}),
        )
        .unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }
}
