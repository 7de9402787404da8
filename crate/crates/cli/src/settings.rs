//! Layered run settings: built-in defaults, then a TOML file, then
//! `--set key.path=value` overrides, then dedicated flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use glyphdit_core::filter::{FilterConfig, KMeansConfig};
use glyphdit_core::glyph::shard::SynthDatasetConfig;
use glyphdit_core::layout::RewardWeights;
use glyphdit_pipelines::clients::HttpConfig;
use glyphdit_pipelines::config::{SamplerConfig, StageConfig, SystemConfig};
use glyphdit_pipelines::train::TvaeTrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 64-pixel glyphs, desk-scale model.
    #[default]
    Default,
    /// 32-pixel overfitting model.
    Toy,
    /// 8-pixel structural model.
    Tiny,
}

impl Preset {
    pub fn system(self) -> SystemConfig {
        match self {
            Preset::Default => SystemConfig::default(),
            Preset::Toy => SystemConfig::toy(),
            Preset::Tiny => SystemConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSettings {
    /// `stub` or an endpoint URL.
    pub mllm: String,
    pub layout: String,
    pub http: HttpConfig,
}

impl Default for ClientSettings {
    fn default() -> Self {
        Self {
            mllm: "stub".into(),
            layout: "stub".into(),
            http: HttpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSettings {
    pub kmeans: KMeansConfig,
    pub filter: FilterConfig,
    pub bins: usize,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            kmeans: KMeansConfig::default(),
            filter: FilterConfig::default(),
            bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    pub out: String,
    pub system: SystemConfig,
    pub synth: SynthDatasetConfig,
    pub tvae: TvaeTrainConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3_sft: StageConfig,
    pub stage3_dpo: StageConfig,
    pub sampler: SamplerConfig,
    pub clients: ClientSettings,
    pub filter: FilterSettings,
    pub reward: RewardWeights,
}

impl Settings {
    pub fn defaults(preset: Preset) -> Self {
        let system = preset.system();
        Self {
            seed: 0,
            out: "out".into(),
            synth: SynthDatasetConfig {
                resolution: system.resolution(),
                ..SynthDatasetConfig::default()
            },
            system,
            tvae: TvaeTrainConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            stage3_sft: StageConfig::stage3_sft(),
            stage3_dpo: StageConfig::stage3_dpo(),
            sampler: SamplerConfig::default(),
            clients: ClientSettings::default(),
            filter: FilterSettings::default(),
            reward: RewardWeights::default(),
        }
    }

    /// Apply the layers in order. `file` and `sets` may be empty.
    pub fn layered(preset: Preset, file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut base = Table::try_from(Self::defaults(preset)).context("serialising defaults")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let layer: Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut base, layer);
        }
        for s in sets {
            let (key, raw) = s.split_once('=').with_context(|| format!("--set {s}: expected key=value"))?;
            set_path(&mut base, key.trim(), parse_scalar(raw.trim()))?;
        }
        Value::Table(base).try_into().context("invalid settings")
    }
}

fn merge(base: &mut Table, layer: Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse a TOML value, falling back to a bare string.
fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut t = root;
    for p in parents {
        t = match t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(inner) => inner,
            _ => bail!("--set {key}: {p} is not a table"),
        };
    }
    t.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for p in [Preset::Default, Preset::Toy, Preset::Tiny] {
            assert_eq!(Settings::layered(p, None, &[]).unwrap(), Settings::defaults(p));
        }
    }

    #[test]
    fn later_layers_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[sampler]\nsteps = 7\ncfg_scale = 1.5\n[stage1]\nlr = 0.01\n").unwrap();
        let s = Settings::layered(
            Preset::Tiny,
            Some(&path),
            &["sampler.steps=9".into(), "clients.mllm=http://h:1/x".into()],
        )
        .unwrap();
        assert_eq!(s.seed, 4);
        assert_eq!(s.sampler.steps, 9);
        assert_eq!(s.sampler.cfg_scale, 1.5);
        assert_eq!(s.stage1.lr, 0.01);
        assert_eq!(s.stage1.steps, StageConfig::stage1().steps);
        assert_eq!(s.clients.mllm, "http://h:1/x");
        assert!(Settings::layered(Preset::Tiny, None, &["sampler.steps".into()]).is_err());
        assert!(Settings::layered(Preset::Tiny, None, &["sampler.steps=\"x\"".into()]).is_err());
    }
}
