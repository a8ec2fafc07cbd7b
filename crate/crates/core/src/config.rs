//! Run configuration: one TOML document with dotted keys such as
//! `beam.width = 8`, plus `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LmConfig, RewardConfig};
use crate::policy::{BeamConfig, PolicyConfig, PretrainConfig};
use crate::trainers::TrainConfig;
use crate::world::WorldConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamSection {
    pub width: usize,
    pub patience: f64,
}

impl Default for BeamSection {
    fn default() -> Self {
        let b = BeamConfig::default();
        Self {
            width: b.width,
            patience: b.patience,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub pool: usize,
    pub keep: usize,
    pub temperature: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        let b = BeamConfig::default();
        Self {
            pool: b.pool,
            keep: b.keep,
            temperature: b.temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Root for all artifacts; `RLFB_OUT` overrides it.
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Seeds used by `all` and by multi-seed sweeps.
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub policy: PolicyConfig,
    pub pretrain: PretrainConfig,
    pub lm: LmConfig,
    pub beam: BeamSection,
    pub sample: SampleSection,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub output: OutputSection,
    pub sweep: SweepSection,
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words are taken as strings so `--set world.targets=...` stays easy
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses a config document and applies `key=value` overrides on top.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !self.reward.lambda.is_finite() || self.reward.lambda < 0.0 {
            return Err(Error::Config("reward.lambda must be finite and >= 0".into()));
        }
        if self.sample.keep == 0 || self.sample.keep > self.sample.pool {
            return Err(Error::Config("need 1 <= sample.keep <= sample.pool".into()));
        }
        if self.beam.width == 0 || !(self.beam.patience >= 1.0) {
            return Err(Error::Config("need beam.width >= 1 and beam.patience >= 1".into()));
        }
        if self.world.max_len > self.policy.max_words {
            return Err(Error::Config(
                "world.max_len exceeds policy.max_words; the policy could not emit full sentences"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            width: self.beam.width,
            patience: self.beam.patience,
            temperature: self.sample.temperature,
            pool: self.sample.pool,
            keep: self.sample.keep,
        }
    }

    /// Hash of everything that affects results (the output location and the
    /// sweep seed list do not).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSection::default();
        c.sweep = SweepSection::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        crate::sha256_hex(json.as_bytes())
    }

    /// Hash of the settings a stage's artifacts depend on, so that editing a
    /// training knob does not flag the world or the pretrained checkpoints.
    pub fn stage_hash(&self, stage: &str) -> String {
        let parts = match stage {
            "world" => serde_json::json!({ "seed": self.seed, "world": self.world }),
            "pretrain" => serde_json::json!({
                "seed": self.seed,
                "world": self.world,
                "policy": self.policy,
                "pretrain": self.pretrain,
            }),
            "train-lm" => serde_json::json!({ "seed": self.seed, "world": self.world, "lm": self.lm }),
            _ => return self.hash(),
        };
        crate::sha256_hex(parts.to_string().as_bytes())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The output root, honoring the `RLFB_OUT` environment variable.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os("RLFB_OUT") {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output.dir.clone(),
        }
    }
}
