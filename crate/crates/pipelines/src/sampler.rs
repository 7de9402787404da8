//! Euler integration of the rectified-flow ODE with classifier-free guidance.

use candle_core::{DType, Device, Shape, Tensor};
use glyphdit_core::glyph::RgbaGlyph;
use glyphdit_core::rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::SamplerConfig;
use crate::error::{config, Result};
use crate::system::GlyphSystem;

/// A velocity predictor `v(x, t)` with an optional unconditional branch.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, conditional: bool) -> Result<Tensor>;
    /// Whether the unconditional branch was trained (needed for guidance).
    fn supports_unconditional(&self) -> bool;
}

/// Integrate from `x0` (t = 0, noise) to t = 1 in `steps` uniform Euler
/// steps with `v = v_u + s (v_c - v_u)`.
pub fn sample_rf(field: &dyn VelocityField, x0: &Tensor, cfg: &SamplerConfig) -> Result<Tensor> {
    cfg.validate()?;
    let guided = cfg.cfg_scale != 1.0;
    if guided && !field.supports_unconditional() {
        return Err(config(format!(
            "cfg_scale {} needs an unconditional branch, but the model was trained without condition dropout",
            cfg.cfg_scale
        )));
    }
    let dt = 1.0 / cfg.steps as f64;
    let mut x = x0.clone();
    for i in 0..cfg.steps {
        let t = i as f64 * dt;
        let vc = field.velocity(&x, t, true)?;
        let v = if guided {
            let vu = field.velocity(&x, t, false)?;
            (&vu + ((vc - &vu)? * cfg.cfg_scale)?)?
        } else {
            vc
        };
        x = (x + (v * dt)?)?;
    }
    Ok(x)
}

/// Seeded standard normal noise.
pub fn noise(shape: impl Into<Shape>, seed: u64, dtype: DType) -> Result<Tensor> {
    let shape = shape.into();
    let mut r = rng::derived(seed, 0x40_15_E0);
    let v: Vec<f64> = (0..shape.elem_count()).map(|_| StandardNormal.sample(&mut r)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// The exact field of a single straight path from `x0` to `x1`.
pub struct ConstantField {
    pub velocity: Tensor,
}

impl ConstantField {
    pub fn between(x0: &Tensor, x1: &Tensor) -> Result<Self> {
        Ok(Self { velocity: (x1 - x0)? })
    }
}

impl VelocityField for ConstantField {
    fn velocity(&self, _x: &Tensor, _t: f64, _conditional: bool) -> Result<Tensor> {
        Ok(self.velocity.clone())
    }

    fn supports_unconditional(&self) -> bool {
        true
    }
}

/// Style information for generation.
pub enum StyleSource<'a> {
    /// Reference glyphs for the style encoder.
    Refs(&'a [RgbaGlyph]),
    /// Precomputed `(1, q, d)` tokens, e.g. from the condition encoder.
    Tokens(Tensor),
    None,
}

/// The backbone with fixed content and style for one batch.
pub struct GlyphField<'a> {
    pub sys: &'a GlyphSystem,
    /// `(B, n * p, d)`
    pub content: Tensor,
    /// `(B, q, d)`; `None` runs the unconditional branch only.
    pub style: Option<Tensor>,
}

impl VelocityField for GlyphField<'_> {
    fn velocity(&self, x: &Tensor, t: f64, conditional: bool) -> Result<Tensor> {
        let b = x.dim(0)?;
        let style = if conditional { self.style.as_ref() } else { None };
        Ok(self.sys.dit.forward(x, &vec![t; b], &self.content, style)?.detach())
    }

    fn supports_unconditional(&self) -> bool {
        self.sys.meta.cond_dropout > 0.0
    }
}

impl<'a> GlyphField<'a> {
    /// `content (B * n, 4, H, W)` and `style (B, q, d)`.
    pub fn new(sys: &'a GlyphSystem, content_imgs: &Tensor, batch: usize, style: Option<Tensor>) -> Result<Self> {
        let tokens = sys.content.forward(content_imgs)?;
        let (bn, p, d) = tokens.dims3()?;
        if bn % batch != 0 {
            return Err(config("content glyph count not divisible by batch"));
        }
        Ok(Self {
            sys,
            content: tokens.reshape((batch, (bn / batch) * p, d))?.detach(),
            style: style.map(|s| s.detach()),
        })
    }
}

/// Generate one glyph per content reference in a shared style.
/// Returns `(n, 4, H, W)` RGBA.
pub fn generate_glyphs(
    sys: &GlyphSystem,
    content: &[RgbaGlyph],
    style: StyleSource<'_>,
    sampler: &SamplerConfig,
) -> Result<Tensor> {
    if content.is_empty() {
        return Err(config("nothing to generate"));
    }
    let tokens = match style {
        StyleSource::Refs(r) => Some(sys.style.forward(&sys.glyph_tensor(r)?.unsqueeze(0)?)?),
        StyleSource::Tokens(t) => Some(t),
        StyleSource::None => None,
    };
    let imgs = sys.glyph_tensor(content)?;
    let field = GlyphField::new(sys, &imgs, 1, tokens)?;
    let m = &sys.cfg.model;
    let x0 = noise(
        (1, content.len(), m.latent_channels, m.latent_side, m.latent_side),
        sampler.seed,
        sys.dtype(),
    )?;
    let z = sample_rf(&field, &x0, sampler)?;
    sys.decode_latents(&z.squeeze(0)?)
}
