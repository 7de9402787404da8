//! All trainable networks bundled over one parameter store.

use std::path::Path;

use candle_core::{DType, Tensor, Var};
use glyphdit_core::glyph::RgbaGlyph;
use glyphdit_model::checkpoint::Checkpoint;
use glyphdit_model::dit::Dit;
use glyphdit_model::encoders::{glyphs_to_tensor, ContentEncoder, Resampler, StyleEncoder};
use glyphdit_model::tvae::{blend_tensor, LatentStats, Tvae};
use glyphdit_model::ParamStore;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "glyph-system";

/// Parameter name prefixes, one per component.
pub mod prefix {
    pub const DIT: &str = "dit.";
    pub const CONTENT: &str = "content.";
    pub const STYLE: &str = "style.";
    pub const RESAMPLER: &str = "resampler.";
    pub const TVAE: &str = "tvae.";
}

/// Training history carried in checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemMeta {
    pub stages: Vec<String>,
    /// Style dropout used in stage 1; zero means no unconditional branch was trained.
    pub cond_dropout: f64,
    pub tvae_frozen: bool,
    pub latent_stats: Option<LatentStats>,
}

impl SystemMeta {
    pub fn has_stage(&self, s: &str) -> bool {
        self.stages.iter().any(|x| x == s)
    }

    pub fn mark(&mut self, s: &str) {
        if !self.has_stage(s) {
            self.stages.push(s.to_string());
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    system: SystemConfig,
    meta: SystemMeta,
}

pub struct GlyphSystem {
    pub cfg: SystemConfig,
    pub store: ParamStore,
    pub dit: Dit,
    pub content: ContentEncoder,
    pub style: StyleEncoder,
    pub resampler: Resampler,
    pub tvae: Tvae,
    pub meta: SystemMeta,
}

impl GlyphSystem {
    pub fn new(cfg: &SystemConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let dit = Dit::new(&root.pp("dit"), &cfg.model)?;
        let content = ContentEncoder::new(&root.pp("content"), &cfg.encoder)?;
        let style = StyleEncoder::new(&root.pp("style"), &cfg.encoder)?;
        let resampler = Resampler::new(&root.pp("resampler"), &cfg.resampler)?;
        let tvae = Tvae::new(&root.pp("tvae"), &cfg.tvae)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            dit,
            content,
            style,
            resampler,
            tvae,
            meta: SystemMeta::default(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn vars(&self, prefixes: &[&str]) -> Vec<Var> {
        self.store.vars_with_prefix(prefixes).into_iter().map(|(_, v)| v).collect()
    }

    pub fn checksum(&self, prefixes: &[&str]) -> Result<u64> {
        Ok(self.store.checksum(|n| prefixes.iter().any(|p| n.starts_with(p)))?)
    }

    /// Everything except the given prefixes.
    pub fn checksum_excluding(&self, prefixes: &[&str]) -> Result<u64> {
        Ok(self.store.checksum(|n| !prefixes.iter().any(|p| n.starts_with(p)))?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = self.meta.clone();
        meta.tvae_frozen = self.tvae.encoder_frozen();
        meta.latent_stats = Some(self.tvae.stats.clone());
        let cfg = CheckpointConfig {
            system: self.cfg.clone(),
            meta,
        };
        Ok(Checkpoint::from_store(CHECKPOINT_KIND, &cfg, &self.store, |_| true)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.checkpoint()?.save(path)?)
    }

    /// Rebuild from a checkpoint. `adjust` may change the configuration
    /// before construction (for instance to add adapters); parameters absent
    /// from the file keep their fresh initialization, every parameter in
    /// the file must exist in the rebuilt system.
    pub fn load(path: impl AsRef<Path>, dtype: DType, adjust: impl FnOnce(&mut SystemConfig)) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Precondition(format!("checkpoint {} not found", path.display())));
        }
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&ck, dtype, adjust)
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType, adjust: impl FnOnce(&mut SystemConfig)) -> Result<Self> {
        let CheckpointConfig { mut system, meta } = ck.config_as()?;
        adjust(&mut system);
        let mut sys = Self::new(&system, 0, dtype)?;
        ck.restore(CHECKPOINT_KIND, &sys.store, false)?;
        if meta.tvae_frozen {
            sys.tvae.freeze_encoder();
        }
        if let Some(s) = &meta.latent_stats {
            sys.tvae.stats = s.clone();
        }
        sys.meta = meta;
        Ok(sys)
    }

    /// Fresh system holding a copy of every shared parameter of `self`.
    pub fn duplicate(&self) -> Result<Self> {
        Self::from_checkpoint(&self.checkpoint()?, self.dtype(), |_| {})
    }

    pub fn glyph_tensor(&self, glyphs: &[RgbaGlyph]) -> Result<Tensor> {
        let r = self.cfg.resolution();
        if glyphs.iter().any(|g| g.resolution() != r) {
            return Err(crate::error::config(format!("glyphs must be {r}x{r} for this system")));
        }
        Ok(glyphs_to_tensor(glyphs, self.dtype(), self.store.device())?)
    }

    /// `(N, 4, H, W)` RGBA -> normalized `(N, c, s, s)` latents.
    pub fn encode_latents(&self, rgba: &Tensor) -> Result<Tensor> {
        let z = self.tvae.encode(&blend_tensor(rgba, self.cfg.background)?)?;
        Ok(self.tvae.stats.normalize(&z)?.detach())
    }

    /// Normalized `(N, c, s, s)` latents -> `(N, 4, H, W)` RGBA in [0, 1].
    pub fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        let raw = self.tvae.stats.denormalize(z)?;
        Ok(self.tvae.decode(&raw)?.rgba()?.detach())
    }
}

/// `(N, 4, H, W)` tensor back into glyphs with the given ids.
pub fn tensor_to_glyphs(t: &Tensor, ids: &[(u32, u32)]) -> Result<Vec<RgbaGlyph>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 4 || ids.len() != n {
        return Err(crate::error::config("expected (N, 4, H, W) with one id pair per glyph"));
    }
    let data = t.to_dtype(DType::F32)?.permute((0, 2, 3, 1))?.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
    data.chunks_exact(h * w * 4)
        .zip(ids)
        .map(|(px, &(char_id, style_id))| {
            let mut pixels = glyphdit_core::image::RgbaImage::from_vec(w, h, px.to_vec())?;
            pixels.clamp01();
            Ok(RgbaGlyph {
                pixels,
                char_id,
                style_id,
            })
        })
        .collect()
}
