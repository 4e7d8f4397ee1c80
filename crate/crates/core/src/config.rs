//! Run configuration: one TOML document with a section per module.
//!
//! Precedence, lowest first: built-in defaults, preset, config file,
//! `--set key.path=value` overrides, dedicated command-line flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::SweepSpec;
use crate::env::{EnvConfig, ObservationMode, SimConfig};
use crate::error::{Error, Result};
use crate::ppo::{NetConfig, PpoConfig};
use crate::rowmap::VoxelGridSpec;
use crate::sensor::LidarConfig;
use crate::world::RowSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; training, environment and evaluation streams derive from it.
    pub seed: u64,
    /// Training iterations.
    pub iterations: usize,
    pub world: RowSpec,
    pub sensor: LidarConfig,
    pub rowmap: VoxelGridSpec,
    pub env: EnvConfig,
    pub nn: NetConfig,
    pub ppo: PpoConfig,
    pub bench: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            iterations: 500,
            world: RowSpec::default(),
            sensor: LidarConfig::default(),
            rowmap: VoxelGridSpec::default(),
            env: EnvConfig::default(),
            nn: NetConfig::default(),
            ppo: PpoConfig::default(),
            bench: SweepSpec::default(),
        }
    }
}

/// Named training settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Row-map observations with a three-frame history.
    Baseline,
    /// Row-map observations, current frame only.
    NoHistory,
    /// Raw point-cloud observations, current frame only.
    NoDownsampling,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Baseline, Preset::NoHistory, Preset::NoDownsampling];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::NoHistory => "no-history",
            Preset::NoDownsampling => "no-downsampling",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset {name:?} (expected baseline, no-history or no-downsampling)")))
    }

    pub fn config(self) -> RunConfig {
        let mut cfg = RunConfig::default();
        match self {
            Preset::Baseline => {}
            Preset::NoHistory => cfg.env.history_len = 1,
            Preset::NoDownsampling => {
                cfg.env.history_len = 1;
                cfg.env.observation = ObservationMode::RawCloud;
            }
        }
        cfg
    }
}

impl RunConfig {
    pub fn sim(&self) -> SimConfig {
        SimConfig {
            world: self.world,
            sensor: self.sensor.clone(),
            rowmap: self.rowmap.clone(),
            env: self.env.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Version {
                kind: "config schema",
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        self.sim().validate()?;
        self.nn.validate()?;
        self.ppo.validate()?;
        self.bench.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(format!("cannot serialise config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        ConfigBuilder::new(None).merge_toml(text)?.build()
    }

    pub fn load(path: &Path) -> Result<Self> {
        ConfigBuilder::new(None).merge_file(path)?.build()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::file(path, e))
    }
}

/// Layered construction of a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    table: toml::Table,
}

impl ConfigBuilder {
    pub fn new(preset: Option<Preset>) -> Self {
        Self::from_config(&preset.unwrap_or(Preset::Baseline).config())
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        let table = toml::Table::try_from(cfg).expect("config serialises to a table");
        Self { table }
    }

    pub fn merge_toml(mut self, text: &str) -> Result<Self> {
        let layer: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_error(text, &e))?;
        // unknown keys and type errors, anchored in this layer's text
        toml::from_str::<RunConfig>(text).map_err(|e| parse_error(text, &e))?;
        merge(&mut self.table, layer);
        Ok(self)
    }

    pub fn merge_file(self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        self.merge_toml(&text).map_err(|e| match e {
            Error::Parse { offset, message } => Error::Parse {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    /// Apply one `dotted.key=value` override. Values are read as TOML
    /// scalars or arrays; anything else is taken as a string.
    pub fn set(mut self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not of the form key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::InvalidConfig(format!("override key {key:?} is malformed")));
        }
        let mut table = &mut self.table;
        for part in &parts[..parts.len() - 1] {
            table = match table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            {
                toml::Value::Table(t) => t,
                _ => return Err(Error::InvalidConfig(format!("override key {key:?}: {part} is not a section"))),
            };
        }
        table.insert(parts[parts.len() - 1].to_string(), value);
        Ok(self)
    }

    pub fn build(self) -> Result<RunConfig> {
        let text = toml::to_string(&self.table).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Table, layer: toml::Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_error(text: &str, e: &toml::de::Error) -> Error {
    let offset = e.span().map_or(0, |s| s.start);
    let line = text[..offset.min(text.len())].matches('\n').count() + 1;
    Error::Parse {
        offset,
        message: format!("line {line}: {}", e.message()),
    }
}
