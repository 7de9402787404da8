//! Content and style encoders, the normalized projector, the resampler and
//! the multi-modal condition path.
//!
//! Both image encoders are small patch transformers producing `s^2` tokens per
//! glyph (patch side = resolution / s), so content tokens line up one-to-one
//! with the backbone's latent cells.

mod condition;
mod resampler;

use candle_core::{DType, Device, Tensor};
use glyphdit_core::glyph::RgbaGlyph;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{l2_normalize, Dense, DenseSpec, EncoderBlock, RmsNorm};
use crate::params::{Init, Params};

pub use condition::{
    encode_condition, mllm_token_batch, render_condition_prompt, ConditionInput, HiddenStates, LayerSelect,
    MllmClient, MllmRequest, MllmResponse, StubMllm, DEFAULT_CONDITION_TEMPLATE,
};
pub use resampler::{Resampler, ResamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub resolution: usize,
    /// Tokens per glyph side; must divide `resolution`.
    pub patches_per_side: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            patches_per_side: 4,
            dim: 128,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn patch(&self) -> usize {
        self.resolution / self.patches_per_side.max(1)
    }

    pub fn tokens(&self) -> usize {
        self.patches_per_side * self.patches_per_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches_per_side == 0 || self.resolution % self.patches_per_side != 0 {
            return Err(invalid(format!(
                "patches_per_side {} must divide resolution {}",
                self.patches_per_side, self.resolution
            )));
        }
        if self.depth == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid("encoder depth >= 1 and dim divisible by heads required"));
        }
        Ok(())
    }
}

/// Stack glyphs into an `(N, 4, H, W)` tensor. All glyphs must share one resolution.
pub fn glyphs_to_tensor(glyphs: &[RgbaGlyph], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = glyphs.first().ok_or_else(|| invalid("no glyphs given"))?;
    let r = first.resolution();
    let mut data = Vec::with_capacity(glyphs.len() * 4 * r * r);
    for g in glyphs {
        if g.pixels.width() != r || g.pixels.height() != r {
            return Err(invalid("glyphs have mixed resolutions"));
        }
        let px = g.pixels.data();
        for c in 0..4 {
            data.extend(px.iter().skip(c).step_by(4).copied());
        }
    }
    Ok(Tensor::from_vec(data, (glyphs.len(), 4, r, r), device)?.to_dtype(dtype)?)
}

/// Patch embedding, learned positions and a few pre-norm blocks.
pub struct PatchTransformer {
    cfg: EncoderConfig,
    patch_in: Dense,
    pos: Tensor,
    blocks: Vec<EncoderBlock>,
    norm: RmsNorm,
}

impl PatchTransformer {
    pub fn new(p: &Params, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let pd = 4 * cfg.patch() * cfg.patch();
        Ok(Self {
            patch_in: Dense::new(&p.pp("patch_in"), pd, cfg.dim, DenseSpec::new())?,
            pos: p.var("pos", &[cfg.tokens(), cfg.dim], Init::Normal(0.02))?,
            blocks: (0..cfg.depth)
                .map(|i| EncoderBlock::new(&p.pp(format!("block{i}")), cfg.dim, cfg.heads, cfg.mlp_ratio))
                .collect::<Result<_>>()?,
            norm: RmsNorm::new(&p.pp("norm"), cfg.dim)?,
            cfg: cfg.clone(),
        })
    }

    /// `(N, 4, H, W)` -> `(N, s^2, d)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = images.dims4()?;
        let r = self.cfg.resolution;
        if (c, h, w) != (4, r, r) {
            return Err(invalid(format!("expected (4, {r}, {r}) images, got ({c}, {h}, {w})")));
        }
        let (s, p) = (self.cfg.patches_per_side, self.cfg.patch());
        // (n, c, s, p, s, p) -> (n, s, s, c, p, p)
        let x = images
            .reshape((n * c, s, p, s, p))?
            .permute((0, 1, 3, 2, 4))?
            .reshape((n, c, s * s, p * p))?
            .transpose(1, 2)?
            .reshape((n, s * s, c * p * p))?;
        let mut x = self.patch_in.forward(&x)?.broadcast_add(&self.pos)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        self.norm.forward(&x)
    }
}

pub struct ContentEncoder {
    trunk: PatchTransformer,
    proj: Dense,
}

impl ContentEncoder {
    pub fn new(p: &Params, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            trunk: PatchTransformer::new(&p.pp("trunk"), cfg)?,
            proj: Dense::new(&p.pp("proj"), cfg.dim, cfg.dim, DenseSpec::new())?,
        })
    }

    /// `(N, 4, H, W)` -> `(N, p, d)`, one token block per glyph in input order.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.proj.forward(&self.trunk.forward(images)?)
    }

    pub fn encode(&self, glyphs: &[RgbaGlyph], dtype: DType) -> Result<Tensor> {
        let x = glyphs_to_tensor(glyphs, dtype, &Device::Cpu)?;
        self.forward(&x)
    }
}

/// A transformer block followed by per-token L2 normalization. The input
/// projection carries a random bias so even an all-zero input lands on the
/// unit sphere.
pub struct NormalizedProjector {
    inp: Dense,
    block: EncoderBlock,
}

impl NormalizedProjector {
    pub fn new(p: &Params, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            inp: Dense::new(&p.pp("inp"), dim, dim, DenseSpec::new().bias(Init::Normal(0.1)))?,
            block: EncoderBlock::new(&p.pp("block"), dim, heads, mlp_ratio)?,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.block.forward(&self.inp.forward(features)?)?)
    }
}

pub struct StyleEncoder {
    trunk: PatchTransformer,
    projector: NormalizedProjector,
}

impl StyleEncoder {
    pub fn new(p: &Params, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            trunk: PatchTransformer::new(&p.pp("trunk"), cfg)?,
            projector: NormalizedProjector::new(&p.pp("projector"), cfg.dim, cfg.heads, cfg.mlp_ratio)?,
        })
    }

    /// `refs (B, m, 4, H, W)` -> `(B, q, d)` unit tokens. References are
    /// mean-pooled before projection, so the result does not depend on `m`
    /// beyond the set of distinct references.
    pub fn forward(&self, refs: &Tensor) -> Result<Tensor> {
        let (b, m, c, h, w) = refs.dims5()?;
        if m == 0 {
            return Err(invalid("style encoder needs at least one reference"));
        }
        let tokens = self.trunk.forward(&refs.reshape((b * m, c, h, w))?)?;
        let (_, q, d) = tokens.dims3()?;
        let pooled = tokens.reshape((b, m, q, d))?.mean(1)?;
        self.projector.forward(&pooled)
    }

    pub fn encode(&self, refs: &[RgbaGlyph], dtype: DType) -> Result<Tensor> {
        if refs.is_empty() {
            return Err(invalid("style encoder needs at least one reference"));
        }
        let x = glyphs_to_tensor(refs, dtype, &Device::Cpu)?;
        self.forward(&x.unsqueeze(0)?)
    }

    pub fn projector(&self) -> &NormalizedProjector {
        &self.projector
    }
}
