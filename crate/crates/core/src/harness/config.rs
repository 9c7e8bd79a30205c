//! Experiment configuration: a TOML file layered over a named profile.
//!
//! Resolution order is profile defaults, then the file, then command-line
//! overrides for `profile` and `seed`. The top-level `seed` is required and
//! seeds the dataset, the parameter initialization and the training streams
//! unless a section sets its own. The resolved configuration is written
//! next to every report.
//!
//! ```toml
//! seed = 7
//! profile = "desk"          # or "paper"
//! data_dir = "data"
//!
//! [dataset]
//! num_images = 12
//! [dataset.scene]
//! image_size = 128
//!
//! [model]
//! use_orientation = false
//!
//! [train]
//! initial_lr = 5e-4
//! [train.augment]
//! flip = 0.0
//!
//! [eval]
//! splits = ["all", "inshore", "offshore"]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::data::AugmentConfig;
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::AreaBuckets;
use crate::synth::{DatasetSpec, SceneSpec};
use crate::types::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small images and a narrow model that train on one CPU core.
    #[default]
    Desk,
    /// Full-size settings.
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config(
                "profile",
                format!("unknown profile `{other}` (desk or paper)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Dataset splits to report on.
    pub splits: Vec<String>,
    pub buckets: AreaBuckets,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            splits: vec!["all".into(), "inshore".into(), "offshore".into()],
            buckets: AreaBuckets::NARROW,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub profile: Profile,
    /// Dataset directory, relative to the config file's directory when
    /// loaded from a file.
    pub data_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Profile defaults with every seed set to `seed`.
    pub fn defaults(profile: Profile, seed: u64) -> Self {
        match profile {
            Profile::Desk => Self {
                seed,
                profile,
                data_dir: "data".into(),
                dataset: DatasetSpec {
                    scene: SceneSpec {
                        seed,
                        ..SceneSpec::default()
                    },
                    num_images: 12,
                    inshore_fraction: 0.5,
                    test_fraction: 1.0 / 6.0,
                },
                model: ModelConfig {
                    seed,
                    ..ModelConfig::desk()
                },
                train: TrainConfig {
                    epochs: 50,
                    batch_size: 1,
                    initial_lr: 5e-4,
                    lr_milestones: vec![30, 40],
                    checkpoint_every: 100,
                    ..TrainConfig::paper()
                },
                eval: EvalConfig {
                    buckets: AreaBuckets::DESK,
                    ..EvalConfig::default()
                },
            },
            Profile::Paper => Self {
                seed,
                profile,
                data_dir: "data".into(),
                dataset: DatasetSpec {
                    scene: SceneSpec {
                        seed,
                        ..SceneSpec::benchmark()
                    },
                    num_images: 1000,
                    inshore_fraction: 0.3,
                    test_fraction: 0.2,
                },
                model: ModelConfig {
                    seed,
                    ..ModelConfig::paper()
                },
                train: TrainConfig {
                    checkpoint_every: 1000,
                    ..TrainConfig::paper()
                },
                eval: EvalConfig {
                    buckets: AreaBuckets::COCO,
                    ..EvalConfig::default()
                },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !self.dataset.scene.image_size.is_multiple_of(32) {
            return Err(Error::config("image_size", "must be a multiple of 32"));
        }
        Ok(())
    }

    /// Resolves `text` (TOML) over profile defaults. `profile` and `seed`
    /// take precedence over the values in the file.
    pub fn resolve(text: &str, profile: Option<Profile>, seed: Option<u64>) -> Result<Self> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        let profile = match (profile, user.get("profile")) {
            (Some(p), _) => p,
            (None, Some(Value::String(s))) => s.parse()?,
            (None, Some(_)) => return Err(Error::config("profile", "must be a string")),
            (None, None) => Profile::default(),
        };
        let seed = match (seed, user.get("seed")) {
            (Some(s), _) => s,
            (None, Some(Value::Integer(s))) if *s >= 0 => *s as u64,
            (None, Some(_)) => return Err(Error::config("seed", "must be a non-negative integer")),
            (None, None) => {
                return Err(Error::config(
                    "seed",
                    "missing required key `seed` (set it in the config or pass --seed)",
                ))
            }
        };
        let defaults = Self::defaults(profile, seed);
        let mut merged = match Value::try_from(&defaults) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("configuration serializes to a table"),
        };
        merge(&mut merged, user);
        merged.insert("profile".into(), Value::String(profile.to_string()));
        merged.insert("seed".into(), Value::Integer(seed as i64));
        let cfg: Self = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| {
                let msg = e.message().to_string();
                Error::config(offending_key(&msg).unwrap_or("config"), msg.clone())
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and resolves a config file; a relative `data_dir` is taken
    /// relative to the file.
    pub fn load(path: &Path, profile: Option<Profile>, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::resolve(&text, profile, seed)?;
        if cfg.data_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data_dir = dir.join(&cfg.data_dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Copy with augmentation switched off.
    pub fn without_augmentation(mut self) -> Self {
        self.train.augment = AugmentConfig::NONE;
        self
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Pulls the field name out of serde messages such as
/// "unknown field `foo`, expected ...".
fn offending_key(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}
