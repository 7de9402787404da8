use glyphdit_model::dit::ModelConfig;
use glyphdit_model::encoders::{EncoderConfig, ResamplerConfig};
use glyphdit_model::objectives::WeightFn;
use glyphdit_model::tvae::TvaeConfig;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageId {
    #[serde(rename = "1")]
    Stage1,
    #[serde(rename = "2")]
    Stage2,
    #[serde(rename = "3-sft")]
    Stage3Sft,
    #[serde(rename = "3-dpo")]
    Stage3Dpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up over `warmup` steps, then cosine decay to `floor * lr`.
    WarmupCosine { warmup: usize, floor: f64 },
}

impl LrSchedule {
    pub fn id(&self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::WarmupCosine { .. } => "warmup_cosine",
        }
    }

    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::WarmupCosine { warmup, floor } => {
                if step < warmup {
                    return base * (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1) as f64;
                let p = ((step - warmup) as f64 / span).min(1.0);
                let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
                base * (floor + (1.0 - floor) * c)
            }
        }
    }
}

/// Settings for one training stage. Stage-specific fields are optional and
/// checked by [`StageConfig::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageId,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Stage 1: probability of dropping the style tokens for a batch.
    #[serde(default)]
    pub cond_dropout: Option<f64>,
    /// Stage 3 preference phase: candidates per condition.
    #[serde(default)]
    pub k_candidates: Option<usize>,
    #[serde(default)]
    pub scorer: Option<String>,
    /// Stage 3: low-rank adapter rank.
    #[serde(default)]
    pub adapter_rank: Option<usize>,
    #[serde(default)]
    pub weight_fn: Option<WeightFn>,
    /// Loss curve resolution: record every `log_every` steps.
    #[serde(default = "one")]
    pub log_every: usize,
}

fn one() -> usize {
    1
}

impl StageConfig {
    fn base(stage: StageId, steps: usize, lr: f64) -> Self {
        Self {
            stage,
            steps,
            batch_size: 16,
            lr,
            lr_schedule: LrSchedule::WarmupCosine {
                warmup: (steps / 20).max(1),
                floor: 0.05,
            },
            seed: 0,
            cond_dropout: None,
            k_candidates: None,
            scorer: None,
            adapter_rank: None,
            weight_fn: None,
            log_every: 1,
        }
    }

    pub fn stage1() -> Self {
        Self {
            cond_dropout: Some(0.1),
            ..Self::base(StageId::Stage1, 4000, 2e-3)
        }
    }

    pub fn stage2() -> Self {
        Self::base(StageId::Stage2, 2000, 2e-3)
    }

    pub fn stage3_sft() -> Self {
        Self {
            adapter_rank: Some(8),
            ..Self::base(StageId::Stage3Sft, 200, 1e-3)
        }
    }

    pub fn stage3_dpo() -> Self {
        Self {
            adapter_rank: Some(8),
            k_candidates: Some(4),
            scorer: Some("neg-mse".into()),
            weight_fn: Some(WeightFn::default()),
            batch_size: 8,
            lr_schedule: LrSchedule::Constant,
            ..Self::base(StageId::Stage3Dpo, 200, 1e-4)
        }
    }

    pub fn for_stage(stage: StageId) -> Self {
        match stage {
            StageId::Stage1 => Self::stage1(),
            StageId::Stage2 => Self::stage2(),
            StageId::Stage3Sft => Self::stage3_sft(),
            StageId::Stage3Dpo => Self::stage3_dpo(),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr_schedule.lr_at(self.lr, step, self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(config("steps, batch_size and log_every must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(config(format!("stage {:?} requires {what}", self.stage)))
            }
        };
        match self.stage {
            StageId::Stage1 => {
                need(self.cond_dropout.is_some(), "cond_dropout")?;
                let p = self.cond_dropout.unwrap_or(0.0);
                need((0.0..=1.0).contains(&p), "cond_dropout in [0, 1]")?;
            }
            StageId::Stage2 => {}
            StageId::Stage3Sft => need(self.adapter_rank.is_some_and(|r| r > 0), "adapter_rank >= 1")?,
            StageId::Stage3Dpo => {
                need(self.adapter_rank.is_some_and(|r| r > 0), "adapter_rank >= 1")?;
                need(self.k_candidates.is_some_and(|k| k >= 2), "k_candidates >= 2")?;
                need(self.scorer.is_some(), "a scorer id")?;
                need(self.weight_fn.is_some(), "a weight function")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            cfg_scale: 3.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config("sampler steps must be >= 1"));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(config("cfg_scale must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Shapes of every network in the system. Cross-component sizes must agree;
/// see [`SystemConfig::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub tvae: TvaeConfig,
    pub resampler: ResamplerConfig,
    /// Gray level glyphs are blended onto before entering the latent encoder.
    pub background: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            tvae: TvaeConfig::default(),
            resampler: ResamplerConfig::default(),
            background: 0.5,
        }
    }
}

impl SystemConfig {
    /// Small model used for overfitting experiments at 32 pixels.
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        Self {
            encoder: EncoderConfig {
                dim: model.dim,
                heads: model.heads,
                ..EncoderConfig::default()
            },
            resampler: ResamplerConfig {
                dim: model.dim,
                mllm_dim: 32,
                num_queries: model.style_tokens(),
                heads: model.heads,
                ..ResamplerConfig::default()
            },
            model,
            ..Self::default()
        }
    }

    /// Minimal shapes at 8 pixels, for fast structural tests.
    pub fn tiny() -> Self {
        let model = ModelConfig::tiny();
        Self {
            encoder: EncoderConfig {
                resolution: 8,
                patches_per_side: model.latent_side,
                dim: model.dim,
                depth: 1,
                heads: model.heads,
                mlp_ratio: 2,
            },
            tvae: TvaeConfig::tiny(),
            resampler: ResamplerConfig {
                dim: model.dim,
                mllm_dim: 8,
                num_queries: model.style_tokens(),
                heads: model.heads,
                depth: 1,
                mlp_ratio: 2,
                zero_init_outputs: true,
            },
            model,
            background: 0.5,
        }
    }

    pub fn resolution(&self) -> usize {
        self.tvae.resolution
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.encoder.validate()?;
        self.tvae.validate()?;
        self.resampler.validate()?;
        let m = &self.model;
        let checks = [
            (self.encoder.dim == m.dim, "encoder.dim == model.dim"),
            (self.encoder.patches_per_side == m.latent_side, "encoder.patches_per_side == model.latent_side"),
            (self.encoder.resolution == self.tvae.resolution, "encoder.resolution == tvae.resolution"),
            (self.tvae.latent_side() == m.latent_side, "tvae latent side == model.latent_side"),
            (self.tvae.latent_channels == m.latent_channels, "tvae.latent_channels == model.latent_channels"),
            (self.resampler.dim == m.dim, "resampler.dim == model.dim"),
            (self.resampler.num_queries == m.style_tokens(), "resampler.num_queries == style tokens"),
            ((0.0..=1.0).contains(&self.background), "background in [0, 1]"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(config(format!("inconsistent system config: need {what}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        SystemConfig::default().validate().unwrap();
        SystemConfig::toy().validate().unwrap();
        SystemConfig::tiny().validate().unwrap();
        let mut bad = SystemConfig::toy();
        bad.encoder.dim = 32;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stage_fields_are_required() {
        for s in [StageId::Stage1, StageId::Stage2, StageId::Stage3Sft, StageId::Stage3Dpo] {
            StageConfig::for_stage(s).validate().unwrap();
        }
        let mut c = StageConfig::stage1();
        c.cond_dropout = None;
        assert!(c.validate().is_err());
        let mut c = StageConfig::stage3_dpo();
        c.k_candidates = Some(1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let s = LrSchedule::WarmupCosine { warmup: 10, floor: 0.1 };
        assert!((s.lr_at(1.0, 0, 100) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(1.0, 10, 100) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(1.0, 100, 100) - 0.1).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.lr_at(0.3, 50, 100), 0.3);
    }

    #[test]
    fn stage_ids_use_cli_names() {
        assert_eq!(serde_json::to_string(&StageId::Stage3Dpo).unwrap(), "\"3-dpo\"");
        let c: StageConfig = serde_json::from_str(&serde_json::to_string(&StageConfig::stage1()).unwrap()).unwrap();
        assert_eq!(c, StageConfig::stage1());
    }
}
