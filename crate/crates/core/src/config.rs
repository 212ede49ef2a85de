//! Run configuration files and run manifests.
//!
//! A configuration file is TOML with optional top-level `profile` and
//! `preset` keys and `[model]`, `[model.flags]`, `[train]`, `[synth]`
//! sections. Missing keys come from the chosen profile; dotted-key overrides
//! (`train.seed = 3`) are applied last.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::preset;
use crate::datamodel::{SamplePair, SynthSpec};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-width model, batch 16, 30 epochs, 352×352.
    Paper,
    /// Small plan, batch 4, a few hundred steps, 64×64.
    #[default]
    Desk,
    /// Smallest plan; for smoke runs.
    Tiny,
}

impl Profile {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            "tiny" => Ok(Self::Tiny),
            other => Err(Error::Config(format!("unknown profile {other:?} (paper, desk, tiny)"))),
        }
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (model, train) = match profile {
            Profile::Paper => (ModelConfig::paper(), TrainConfig::paper()),
            Profile::Desk => (ModelConfig::desk(), TrainConfig::desk()),
            Profile::Tiny => (ModelConfig::tiny(), TrainConfig::desk()),
        };
        let synth = SynthSpec {
            image_size: model.input_size,
            ..SynthSpec::default()
        };
        Self {
            profile,
            model,
            train,
            synth,
        }
    }

    /// Parses a TOML configuration, then applies `overrides` (`dotted.key`,
    /// TOML literal or bare string).
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut file: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut top = BTreeMap::new();
        for key in ["profile", "preset"] {
            if let Some(v) = file.remove(key) {
                top.insert(key, v);
            }
        }
        for (k, v) in overrides {
            if k == "profile" || k == "preset" {
                top.insert(if k == "profile" { "profile" } else { "preset" }, toml::Value::String(v.clone()));
            }
        }
        let string = |v: &toml::Value| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Config("profile/preset must be strings".into()))
        };
        let profile = match top.get("profile") {
            Some(v) => Profile::parse(&string(v)?)?,
            None => Profile::default(),
        };
        let mut base = Self::for_profile(profile);
        if let Some(p) = top.get("preset") {
            base.model.flags = preset(&string(p)?)?;
        }
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut value, toml::Value::Table(file));
        for (k, v) in overrides {
            if k != "profile" && k != "preset" {
                set_dotted(&mut value, k, parse_literal(v))?;
            }
        }
        let mut cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.profile = profile;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth
            .validate()
            .map_err(|e| Error::Config(format!("synth: {e}")))
    }
}

fn parse_literal(v: &str) -> toml::Value {
    let wrapped = format!("x = {v}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").unwrap_or_else(|| toml::Value::String(v.to_string())),
        Err(_) => toml::Value::String(v.to_string()),
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a section")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config(format!("empty override key {key:?}")))
}

/// Content hash of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub name: String,
    pub source: String,
    pub n_samples: usize,
    pub sha256: String,
}

/// SHA-256 over sample ids, shapes and every grid value (little-endian).
pub fn fingerprint(name: &str, source: &str, samples: &[SamplePair]) -> DatasetFingerprint {
    let mut h = Sha256::new();
    for s in samples {
        h.update((s.id.len() as u64).to_le_bytes());
        h.update(s.id.as_bytes());
        for t in [&s.rgb, &s.depth, &s.gt, &s.edge] {
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    let digest = h.finalize();
    DatasetFingerprint {
        name: name.to_string(),
        source: source.to_string(),
        n_samples: samples.len(),
        sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
    }
}

/// Record of a run: enough to repeat it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub code_version: String,
    pub datasets: Vec<DatasetFingerprint>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            seed: config.train.seed,
            config: config.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            datasets: Vec::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
