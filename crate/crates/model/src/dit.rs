//! The velocity-predicting diffusion transformer.
//!
//! Sequence layout: noisy latent tokens (one per latent cell per glyph), then
//! content tokens sharing the noisy tokens' coordinates, then style or
//! condition tokens at glyph index 0. Fusion blocks update only the noisy
//! tokens; single blocks update everything.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid, Result};
use crate::nn::{modulate, rms_normalize, Attention, Dense, DenseSpec, Mlp, NORM_EPS};
use crate::params::{Init, Params};
use crate::rope::{build_3d_grid, default_split, validate_split, Coord, RopeTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub fusion_depth: usize,
    pub single_depth: usize,
    /// Latent cells per glyph side; each glyph contributes `latent_side^2` tokens.
    pub latent_side: usize,
    pub latent_channels: usize,
    pub rope_dim_split: [usize; 3],
    pub rope_theta: f64,
    pub mlp_ratio: usize,
    /// Rank of the adapters on attention projections; 0 disables them.
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 4,
            fusion_depth: 4,
            single_depth: 2,
            latent_side: 4,
            latent_channels: 4,
            rope_dim_split: [10, 10, 12],
            rope_theta: crate::rope::DEFAULT_THETA,
            mlp_ratio: 4,
            lora_rank: 0,
            lora_alpha: 8.0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the test suite and toy experiments.
    pub fn toy() -> Self {
        Self {
            dim: 64,
            heads: 4,
            fusion_depth: 2,
            single_depth: 1,
            rope_dim_split: [4, 4, 8],
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    /// Smallest sensible configuration, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            dim: 12,
            heads: 2,
            fusion_depth: 1,
            single_depth: 1,
            latent_side: 2,
            latent_channels: 2,
            rope_dim_split: [2, 2, 2],
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn tokens_per_glyph(&self) -> usize {
        self.latent_side * self.latent_side
    }

    /// Number of style or condition tokens the backbone expects.
    pub fn style_tokens(&self) -> usize {
        self.tokens_per_glyph()
    }

    pub fn with_default_split(mut self) -> Result<Self> {
        self.rope_dim_split = default_split(self.head_dim())?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.fusion_depth == 0 || self.single_depth == 0 {
            return Err(invalid("fusion_depth and single_depth must be >= 1"));
        }
        if self.latent_side == 0 || self.latent_channels == 0 || self.mlp_ratio == 0 {
            return Err(invalid("latent_side, latent_channels and mlp_ratio must be >= 1"));
        }
        validate_split(self.rope_dim_split, self.head_dim())
    }

    fn lora(&self) -> (usize, f64) {
        (self.lora_rank, self.lora_alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TokenType {
    Noisy,
    Content,
    StyleOrCond,
}

/// Token sequence `(B, K, dim)` with one coordinate and type tag per position.
/// Types appear in the order noisy, content, style/cond.
#[derive(Clone)]
pub struct LatentTokenSeq {
    pub tokens: Tensor,
    pub coords: Vec<Coord>,
    pub types: Vec<TokenType>,
}

impl LatentTokenSeq {
    pub fn new(tokens: Tensor, coords: Vec<Coord>, types: Vec<TokenType>) -> Result<Self> {
        let (_, k, _) = tokens.dims3()?;
        if coords.len() != k || types.len() != k {
            return Err(invalid(format!(
                "{k} tokens but {} coords and {} type tags",
                coords.len(),
                types.len()
            )));
        }
        if types.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid("token types must be grouped as noisy, content, style/cond"));
        }
        if coords.iter().flatten().any(|c| *c < 0) {
            return Err(invalid("coordinates must be nonnegative"));
        }
        Ok(Self {
            tokens,
            coords,
            types,
        })
    }

    pub fn count(&self, ty: TokenType) -> usize {
        self.types.iter().filter(|t| **t == ty).count()
    }

    fn require_all_types(&self) -> Result<()> {
        for ty in [TokenType::Noisy, TokenType::Content, TokenType::StyleOrCond] {
            if self.count(ty) == 0 {
                return Err(contract(format!("sequence has no {ty:?} tokens")));
            }
        }
        Ok(())
    }
}

/// Sinusoidal features of `t * 1000` followed by a two-layer MLP.
#[derive(Clone)]
pub struct TimestepEmbedder {
    dim: usize,
    fc1: Dense,
    fc2: Dense,
}

impl TimestepEmbedder {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            dim,
            fc1: Dense::new(&p.pp("fc1"), dim, dim, DenseSpec::new())?,
            fc2: Dense::new(&p.pp("fc2"), dim, dim, DenseSpec::new())?,
        })
    }

    pub fn sinusoidal(t: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("timesteps must lie in [0, 1]"));
        }
        let half = dim / 2;
        let mut out = vec![0.0f64; t.len() * dim];
        for (b, &tv) in t.iter().enumerate() {
            for i in 0..half {
                let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
                let a = tv * 1000.0 * freq;
                out[b * dim + i] = a.cos();
                out[b * dim + half + i] = a.sin();
            }
        }
        Ok(Tensor::from_vec(out, (t.len(), dim), device)?.to_dtype(dtype)?)
    }

    pub fn forward(&self, t: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
        let f = Self::sinusoidal(t, self.dim, dtype, device)?;
        self.fc2.forward(&self.fc1.forward(&f)?.silu()?)
    }
}

/// Noisy tokens attend over themselves plus all reference tokens; the
/// attention branch enters through `tanh(gate)`.
#[derive(Clone)]
pub struct FusionBlock {
    modulation: Dense,
    attn: Attention,
    out: Dense,
    gate: Tensor,
    mlp: Mlp,
}

impl FusionBlock {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            modulation: Dense::new(&p.pp("modulation"), d, 4 * d, DenseSpec::zeros())?,
            attn: Attention::new(&p.pp("attn"), d, cfg.heads, cfg.lora())?,
            out: Dense::new(&p.pp("attn_out"), d, d, DenseSpec::new().lora(cfg.lora_rank, cfg.lora_alpha))?,
            gate: p.var("gate", &[1], Init::Zeros)?,
            mlp: Mlp::new(&p.pp("mlp"), d, d * cfg.mlp_ratio, true)?,
        })
    }

    /// `noisy (B, Kn, d)`, `refs (B, Kr, d)`, `cond (B, d)`; returns updated noisy tokens.
    pub fn forward(
        &self,
        noisy: &Tensor,
        refs: &Tensor,
        cond: &Tensor,
        rope_q: &RopeTable,
        rope_kv: &RopeTable,
    ) -> Result<Tensor> {
        let m = self.modulation.forward(cond)?.chunk(4, 1)?;
        let h = modulate(&rms_normalize(noisy, NORM_EPS)?, &m[0], &m[1])?;
        let r = rms_normalize(refs, NORM_EPS)?;
        let kv = Tensor::cat(&[&h, &r], 1)?;
        let a = self.out.forward(&self.attn.attend(&h, &kv, Some(rope_q), Some(rope_kv), None)?)?;
        let noisy = (noisy + a.broadcast_mul(&self.gate.tanh()?)?)?;
        let h = modulate(&rms_normalize(&noisy, NORM_EPS)?, &m[2], &m[3])?;
        Ok((&noisy + self.mlp.forward(&h)?)?)
    }

    /// Sequence-level form: reference tokens pass through untouched.
    pub fn forward_seq(&self, seq: &LatentTokenSeq, cond: &Tensor, theta: f64, split: [usize; 3]) -> Result<LatentTokenSeq> {
        seq.require_all_types()?;
        let kn = seq.count(TokenType::Noisy);
        let k = seq.coords.len();
        let (dtype, dev) = (seq.tokens.dtype(), seq.tokens.device());
        let rope_q = RopeTable::new(&seq.coords[..kn], split, theta, dtype, dev)?;
        let rope_kv = RopeTable::new(&seq.coords, split, theta, dtype, dev)?;
        let noisy = seq.tokens.narrow(1, 0, kn)?;
        let refs = seq.tokens.narrow(1, kn, k - kn)?;
        let updated = self.forward(&noisy, &refs, cond, &rope_q, &rope_kv)?;
        Ok(LatentTokenSeq {
            tokens: Tensor::cat(&[&updated, &refs], 1)?,
            coords: seq.coords.clone(),
            types: seq.types.clone(),
        })
    }

    pub fn gate(&self) -> &Tensor {
        &self.gate
    }
}

/// Parallel attention and feed-forward over the whole sequence, fused by one
/// zero-initialized output projection.
#[derive(Clone)]
pub struct SingleBlock {
    modulation: Dense,
    attn: Attention,
    mlp_in: Dense,
    proj: Dense,
}

impl SingleBlock {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        Ok(Self {
            modulation: Dense::new(&p.pp("modulation"), d, 2 * d, DenseSpec::zeros())?,
            attn: Attention::new(&p.pp("attn"), d, cfg.heads, cfg.lora())?,
            mlp_in: Dense::new(&p.pp("mlp_in"), d, hidden, DenseSpec::new())?,
            proj: Dense::new(&p.pp("proj"), d + hidden, d, DenseSpec::zeros())?,
        })
    }

    pub fn forward(&self, seq: &Tensor, cond: &Tensor, rope: &RopeTable) -> Result<Tensor> {
        let m = self.modulation.forward(cond)?.chunk(2, 1)?;
        let h = modulate(&rms_normalize(seq, NORM_EPS)?, &m[0], &m[1])?;
        let a = self.attn.attend(&h, &h, Some(rope), Some(rope), None)?;
        let f = self.mlp_in.forward(&h)?.silu()?;
        Ok((seq + self.proj.forward(&Tensor::cat(&[&a, &f], 2)?)?)?)
    }

    pub fn forward_seq(&self, seq: &LatentTokenSeq, cond: &Tensor, theta: f64, split: [usize; 3]) -> Result<LatentTokenSeq> {
        let rope = RopeTable::new(&seq.coords, split, theta, seq.tokens.dtype(), seq.tokens.device())?;
        Ok(LatentTokenSeq {
            tokens: self.forward(&seq.tokens, cond, &rope)?,
            coords: seq.coords.clone(),
            types: seq.types.clone(),
        })
    }
}

pub struct Dit {
    cfg: ModelConfig,
    latent_in: Dense,
    type_embed: Tensor,
    null_style: Tensor,
    time: TimestepEmbedder,
    fusion: Vec<FusionBlock>,
    single: Vec<SingleBlock>,
    final_modulation: Dense,
    final_out: Dense,
}

impl Dit {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        Ok(Self {
            latent_in: Dense::new(&p.pp("latent_in"), cfg.latent_channels, d, DenseSpec::new())?,
            type_embed: p.var("type_embed", &[3, d], Init::Normal(0.02))?,
            null_style: p.var("null_style", &[cfg.style_tokens(), d], Init::Normal(0.02))?,
            time: TimestepEmbedder::new(&p.pp("time"), d)?,
            fusion: (0..cfg.fusion_depth)
                .map(|i| FusionBlock::new(&p.pp(format!("fusion{i}")), cfg))
                .collect::<Result<_>>()?,
            single: (0..cfg.single_depth)
                .map(|i| SingleBlock::new(&p.pp(format!("single{i}")), cfg))
                .collect::<Result<_>>()?,
            final_modulation: Dense::new(&p.pp("final_modulation"), d, 2 * d, DenseSpec::zeros())?,
            final_out: Dense::new(&p.pp("final_out"), d, cfg.latent_channels, DenseSpec::zeros())?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn fusion_blocks(&self) -> &[FusionBlock] {
        &self.fusion
    }

    pub fn single_blocks(&self) -> &[SingleBlock] {
        &self.single
    }

    /// `x_t (B, n, c, s, s)`, `t` one value per sample, `content (B, n*s*s, d)`,
    /// `style (B, q, d)` or `None` for the unconditional branch.
    pub fn forward(&self, x_t: &Tensor, t: &[f64], content: &Tensor, style: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, c, s1, s2) = x_t.dims5()?;
        let s = self.cfg.latent_side;
        if (c, s1, s2) != (self.cfg.latent_channels, s, s) {
            return Err(invalid(format!(
                "latent shape ({c}, {s1}, {s2}) does not match config ({}, {s}, {s})",
                self.cfg.latent_channels
            )));
        }
        let coords = build_3d_grid(n, s)?;
        let tokens = x_t.permute((0, 1, 3, 4, 2))?.reshape((b, n * s * s, c))?;
        let out = self.forward_tokens(&tokens, &coords, t, content, style)?;
        Ok(out.reshape((b, n, s, s, c))?.permute((0, 1, 4, 2, 3))?.contiguous()?)
    }

    /// Token-level forward with explicit coordinates for the noisy (and
    /// matching content) tokens. Returns `(B, Kn, c)`.
    pub fn forward_tokens(
        &self,
        noisy: &Tensor,
        coords: &[Coord],
        t: &[f64],
        content: &Tensor,
        style: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, kn, _) = noisy.dims3()?;
        let d = self.cfg.dim;
        let (cb, ck, cd) = content.dims3()?;
        if ck != kn || cb != b {
            return Err(contract(format!(
                "content carries {ck} tokens for batch {cb}, latents need {kn} for batch {b}"
            )));
        }
        if cd != d {
            return Err(invalid(format!("content width {cd} does not match dim {d}")));
        }
        if coords.len() != kn || t.len() != b {
            return Err(invalid("one coordinate per token and one timestep per sample required"));
        }
        let q = self.cfg.style_tokens();
        let style = match style {
            Some(st) => {
                if st.dims3()? != (b, q, d) {
                    return Err(invalid(format!(
                        "style tokens {:?} do not match ({b}, {q}, {d})",
                        st.dims()
                    )));
                }
                st.clone()
            }
            None => self.null_style.unsqueeze(0)?.broadcast_as((b, q, d))?.contiguous()?,
        };
        let (dtype, dev) = (noisy.dtype(), noisy.device());
        let ty = |i: usize| self.type_embed.narrow(0, i, 1);
        let x = self.latent_in.forward(noisy)?.broadcast_add(&ty(0)?)?;
        let content = content.broadcast_add(&ty(1)?)?;
        let style = style.broadcast_add(&ty(2)?)?;
        let refs = Tensor::cat(&[&content, &style], 1)?;

        let style_coords: Vec<Coord> = build_3d_grid(1, self.cfg.latent_side)?;
        let mut all_coords = coords.to_vec();
        all_coords.extend_from_slice(coords);
        all_coords.extend_from_slice(&style_coords);
        let (split, theta) = (self.cfg.rope_dim_split, self.cfg.rope_theta);
        let rope_q = RopeTable::new(coords, split, theta, dtype, dev)?;
        let rope_all = RopeTable::new(&all_coords, split, theta, dtype, dev)?;

        let cond = self.time.forward(t, dtype, dev)?.silu()?;
        let mut x = x;
        for blk in &self.fusion {
            x = blk.forward(&x, &refs, &cond, &rope_q, &rope_all)?;
        }
        let mut seq = Tensor::cat(&[&x, &refs], 1)?;
        for blk in &self.single {
            seq = blk.forward(&seq, &cond, &rope_all)?;
        }
        let x = seq.narrow(1, 0, kn)?;
        let m = self.final_modulation.forward(&cond)?.chunk(2, 1)?;
        let h = modulate(&rms_normalize(&x, NORM_EPS)?, &m[0], &m[1])?;
        self.final_out.forward(&h)
    }
}
