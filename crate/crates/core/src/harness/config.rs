use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::mcd::{SplitStrategy, StrategyKind};
use crate::rng::{derive_seed, tag};
use crate::scene::SceneSpec;
use crate::scn::{ModelConfig, TrainConfig};

/// Which MCD strategy, if any, reshapes the base split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitChoice {
    None,
    OddEven,
    EvenOdd,
}

impl SplitChoice {
    pub fn kind(self) -> Option<StrategyKind> {
        match self {
            SplitChoice::None => None,
            SplitChoice::OddEven => Some(StrategyKind::OddEven),
            SplitChoice::EvenOdd => Some(StrategyKind::EvenOdd),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitChoice::None => "none",
            SplitChoice::OddEven => "odd-even",
            SplitChoice::EvenOdd => "even-odd",
        }
    }
}

/// Extra models evaluated next to the main one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baselines {
    pub question_only: bool,
    pub image_only: bool,
    /// Guess labels from the training label histogram.
    pub random: bool,
    pub random_seed: u64,
}

/// Held-out scenes with ground-truth boxes for GroundP and AP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingConfig {
    /// Number of grounding questions; 0 disables grounding evaluation.
    pub size: usize,
    pub seed: u64,
    /// Ask only "How many {class}?" questions.
    pub simple_only: bool,
    pub ap_threshold: f64,
    /// Largest task-accuracy difference, in points, still read as parity
    /// between the two entropy settings.
    pub accuracy_tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub scene: SceneSpec,
    pub train_size: usize,
    pub test_size: usize,
    pub data_seed: u64,
    pub test_seed: u64,
    /// Load this dataset instead of generating one; its spec must match `scene`.
    pub dataset_path: Option<String>,
    pub val_fraction: f64,
    pub carve_seed: u64,
    pub strategy: SplitChoice,
    pub p: f64,
    pub strategy_seed: u64,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub train_seed: u64,
    pub baselines: Baselines,
    pub grounding: GroundingConfig,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        Self {
            name: "run".into(),
            model: ModelConfig::for_spec(&scene),
            scene,
            train_size: 20_000,
            test_size: 5_000,
            data_seed: 1,
            test_seed: 2,
            dataset_path: None,
            val_fraction: 0.1,
            carve_seed: 3,
            strategy: SplitChoice::OddEven,
            p: 90.0,
            strategy_seed: 4,
            trainer: TrainConfig::default(),
            train_seed: 5,
            baselines: Baselines {
                question_only: false,
                image_only: false,
                random: false,
                random_seed: 6,
            },
            grounding: GroundingConfig {
                size: 0,
                seed: 7,
                simple_only: true,
                ap_threshold: crate::metrics::DEFAULT_AP_THRESHOLD,
                accuracy_tolerance: 5.0,
            },
            output_dir: "out".into(),
        }
    }
}

/// Model fields that mirror the scene and follow it unless set explicitly.
const SCENE_MIRRORED: [&str; 3] = ["feature_dim", "num_classes", "num_attributes"];

impl ExperimentConfig {
    /// Defaults overlaid with `key=value` pairs. Keys are dotted paths into
    /// the config (`trainer.epochs`, `scene.noise_std`); values are parsed as
    /// JSON and fall back to a plain string.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, HarnessError> {
        let mut value = serde_json::to_value(Self::default())?;
        let mut explicit = Vec::new();
        for (key, raw) in pairs {
            set_path(&mut value, key, parse_value(raw))?;
            explicit.push(key.to_string());
        }
        let mut config: Self = serde_json::from_value(value).map_err(|e| HarnessError::Config(format!("{e}")))?;
        let scene = config.scene.clone();
        for field in SCENE_MIRRORED {
            if !explicit.iter().any(|k| k == &format!("model.{field}")) {
                match field {
                    "feature_dim" => config.model.feature_dim = scene.feature_dim,
                    "num_classes" => config.model.num_classes = scene.num_classes,
                    _ => config.model.num_attributes = scene.num_attributes,
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// A key=value file (blank lines and `#` comments ignored) followed by
    /// overrides, later pairs winning.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, HarnessError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut pairs = parse_kv(&text)?;
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.scene.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.trainer
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.model.feature_dim != self.scene.feature_dim
            || self.model.num_classes != self.scene.num_classes
            || self.model.num_attributes != self.scene.num_attributes
        {
            return bad("model feature_dim/num_classes/num_attributes disagree with the scene".into());
        }
        let top_label = self.scene.label_histogram.len().saturating_sub(1);
        if self.model.max_label < top_label {
            return bad(format!(
                "model.max_label {} below the largest label {top_label}",
                self.model.max_label
            ));
        }
        if self.dataset_path.is_none() && (self.train_size == 0 || self.test_size == 0) {
            return bad("train_size and test_size must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if let Some(kind) = self.strategy.kind() {
            SplitStrategy::new(kind, self.p).map_err(|e| HarnessError::Config(e.to_string()))?;
        } else if self.p != 0.0 {
            return bad(format!("p = {} needs a strategy", self.p));
        }
        if self.data_seed == self.test_seed {
            return bad("train and test pools need distinct seeds".into());
        }
        if self.grounding.size > 0 && [self.data_seed, self.test_seed].contains(&self.grounding.seed) {
            return bad("the grounding set needs a seed disjoint from the dataset seeds".into());
        }
        let g = &self.grounding;
        if !(g.ap_threshold > 0.0 && g.ap_threshold <= 1.0) {
            return bad(format!("grounding.ap_threshold {} outside (0, 1]", g.ap_threshold));
        }
        if !(g.accuracy_tolerance >= 0.0) {
            return bad("grounding.accuracy_tolerance must be non-negative".into());
        }
        Ok(())
    }

    pub fn split_strategy(&self) -> Option<SplitStrategy> {
        self.strategy.kind().map(|kind| SplitStrategy { kind, p: self.p })
    }

    /// Every seed replaced by a stream derived from `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let s = |name: &str| derive_seed(seed, tag(name));
        let mut c = self.clone();
        c.data_seed = s("data");
        c.test_seed = s("test");
        c.carve_seed = s("carve");
        c.strategy_seed = s("strategy");
        c.train_seed = s("train");
        c.baselines.random_seed = s("random");
        c.grounding.seed = s("grounding");
        c
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        Ok(serde_json::to_string(self)?)
    }

    /// sha256 of the compact JSON form.
    pub fn hash(&self) -> Result<String, HarnessError> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    /// The config as `key=value` lines that [`ExperimentConfig::load`] reads back.
    pub fn to_kv(&self) -> Result<String, HarnessError> {
        let mut out = String::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }
}

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, HarnessError> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected key=value", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// `key=value` into a pair, for command-line overrides.
pub fn parse_override(s: &str) -> Result<(String, String), HarnessError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), HarnessError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("{key}: {part} is not a section")))?;
        if !obj.contains_key(*part) {
            return Err(HarnessError::Config(format!("unknown key {key}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Err(HarnessError::Config("empty key".into()))
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push_str(&format!("{prefix}={s}\n")),
        other => out.push_str(&format!("{prefix}={other}\n")),
    }
}
