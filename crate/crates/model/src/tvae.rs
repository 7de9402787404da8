//! Convolutional latent autoencoder with a transparency decoder.
//!
//! The encoder maps blended RGB glyphs to an `s x s x c` latent. The decoder
//! has an RGB path (mid block then upsampling blocks) and an alpha head that
//! taps the features after the mid block and after every up block, brings
//! them to full resolution, concatenates them and fuses them with a single
//! zero-initialized convolution.

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer};
use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid, Result};
use crate::objectives::{mse, vae_loss, PerceptualModel};
use crate::params::{Init, ParamStore, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TvaeConfig {
    pub resolution: usize,
    pub latent_channels: usize,
    /// One entry per stride-2 downsampling stage.
    pub encoder_channels: Vec<usize>,
    pub mid_channels: usize,
    /// One entry per up block; must have as many entries as the encoder.
    pub decoder_channels: Vec<usize>,
    pub alpha_tap_channels: usize,
}

impl Default for TvaeConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            latent_channels: 4,
            encoder_channels: vec![16, 32, 32],
            mid_channels: 32,
            decoder_channels: vec![32, 16, 8],
            alpha_tap_channels: 4,
        }
    }
}

impl TvaeConfig {
    /// Two-stage configuration for gradient checks.
    pub fn tiny() -> Self {
        Self {
            resolution: 8,
            latent_channels: 2,
            encoder_channels: vec![3, 4],
            mid_channels: 4,
            decoder_channels: vec![4, 3],
            alpha_tap_channels: 2,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    pub fn latent_side(&self) -> usize {
        self.resolution / self.downsample_factor()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.decoder_channels.is_empty() {
            return Err(invalid("channel schedules must be non-empty"));
        }
        if self.encoder_channels.len() != self.decoder_channels.len() {
            return Err(invalid("encoder and decoder need the same number of stages"));
        }
        if self.resolution % self.downsample_factor() != 0 || self.latent_side() == 0 {
            return Err(invalid(format!(
                "resolution {} not divisible by downsample factor {}",
                self.resolution,
                self.downsample_factor()
            )));
        }
        if self.latent_channels == 0 || self.mid_channels == 0 || self.alpha_tap_channels == 0 {
            return Err(invalid("channel counts must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Conv {
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new(p: &Params, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Result<Self> {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Fan {
                fan_in: cin * k * k,
                gain: 2f64.sqrt(),
            }
        };
        Ok(Self {
            w: p.var("weight", &[cout, cin, k, k], init)?,
            b: p.var("bias", &[1, cout, 1, 1], Init::Zeros)?,
            stride,
            pad: k / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::nn::conv2d(x, &self.w, Some(&self.b), self.pad, self.stride)
    }
}

/// Nearest-neighbour upsampling by an integer factor, built from broadcasts
/// so it stays differentiable.
pub fn upsample_nearest(x: &Tensor, f: usize) -> Result<Tensor> {
    if f == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, f, w, f))?
        .contiguous()?
        .reshape((b, c, h * f, w * f))?)
}

/// `rgb * a + (1 - a) * background` for `(B, 4, H, W)` input.
pub fn blend_tensor(rgba: &Tensor, background: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&background) {
        return Err(invalid(format!("background {background} outside [0, 1]")));
    }
    let rgb = rgba.narrow(1, 0, 3)?;
    let a = rgba.narrow(1, 3, 1)?;
    Ok((rgb.broadcast_mul(&a)? + ((1.0 - &a)? * background)?.broadcast_as(rgb.shape())?)?)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel statistics of `(N, c, s, s)` latents.
    pub fn fit(latents: &Tensor) -> Result<Self> {
        let (n, c, h, w) = latents.dims4()?;
        let v = latents
            .transpose(0, 1)?
            .contiguous()?
            .reshape((c, n * h * w))?
            .to_dtype(candle_core::DType::F64)?
            .to_vec2::<f64>()?;
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for row in v {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / row.len() as f64;
            mean.push(m);
            std.push(var.sqrt().max(1e-6));
        }
        Ok(Self { mean, std })
    }

    fn tensors(&self, like: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = self.mean.len();
        let m = Tensor::from_vec(self.mean.clone(), (1, c, 1, 1), like.device())?.to_dtype(like.dtype())?;
        let s = Tensor::from_vec(self.std.clone(), (1, c, 1, 1), like.device())?.to_dtype(like.dtype())?;
        Ok((m, s))
    }

    pub fn normalize(&self, z: &Tensor) -> Result<Tensor> {
        let (m, s) = self.tensors(z)?;
        Ok(z.broadcast_sub(&m)?.broadcast_div(&s)?)
    }

    pub fn denormalize(&self, z: &Tensor) -> Result<Tensor> {
        let (m, s) = self.tensors(z)?;
        Ok(z.broadcast_mul(&s)?.broadcast_add(&m)?)
    }
}

struct UpBlock {
    conv1: Conv,
    conv2: Conv,
}

pub struct Tvae {
    cfg: TvaeConfig,
    prefix: String,
    enc_in: Conv,
    enc_down: Vec<(Conv, Conv)>,
    enc_out: Conv,
    dec_in: Conv,
    mid1: Conv,
    mid2: Conv,
    up: Vec<UpBlock>,
    rgb_out: Conv,
    taps: Vec<Conv>,
    alpha_fuse: Conv,
    encoder_frozen: bool,
    pub stats: LatentStats,
}

/// Decoder output split into its two paths.
pub struct Decoded {
    /// `(B, 3, H, W)` in [0, 1].
    pub rgb: Tensor,
    /// `(B, 1, H, W)` in [0, 1].
    pub alpha: Tensor,
}

impl Decoded {
    pub fn rgba(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.rgb, &self.alpha], 1)?)
    }
}

impl Tvae {
    pub fn new(p: &Params, cfg: &TvaeConfig) -> Result<Self> {
        cfg.validate()?;
        let e = p.pp("encoder");
        let d = p.pp("decoder");
        let c0 = cfg.encoder_channels[0];
        let mut enc_down = Vec::new();
        let mut cin = c0;
        for (i, &ch) in cfg.encoder_channels.iter().enumerate() {
            enc_down.push((
                Conv::new(&e.pp(format!("down{i}.conv1")), cin, ch, 3, 2, false)?,
                Conv::new(&e.pp(format!("down{i}.conv2")), ch, ch, 3, 1, false)?,
            ));
            cin = ch;
        }
        let enc_out = Conv::new(&e.pp("out"), cin, cfg.latent_channels, 1, 1, false)?;
        let mid = cfg.mid_channels;
        let mut up = Vec::new();
        let mut taps = vec![Conv::new(&d.pp("alpha.tap_mid"), mid, cfg.alpha_tap_channels, 3, 1, false)?];
        let mut cin = mid;
        for (i, &ch) in cfg.decoder_channels.iter().enumerate() {
            up.push(UpBlock {
                conv1: Conv::new(&d.pp(format!("up{i}.conv1")), cin, ch, 3, 1, false)?,
                conv2: Conv::new(&d.pp(format!("up{i}.conv2")), ch, ch, 3, 1, false)?,
            });
            taps.push(Conv::new(&d.pp(format!("alpha.tap_up{i}")), ch, cfg.alpha_tap_channels, 3, 1, false)?);
            cin = ch;
        }
        let n_taps = taps.len();
        Ok(Self {
            enc_in: Conv::new(&e.pp("in"), 3, c0, 3, 1, false)?,
            enc_down,
            enc_out,
            dec_in: Conv::new(&d.pp("in"), cfg.latent_channels, mid, 3, 1, false)?,
            mid1: Conv::new(&d.pp("mid.conv1"), mid, mid, 3, 1, false)?,
            mid2: Conv::new(&d.pp("mid.conv2"), mid, mid, 3, 1, false)?,
            up,
            rgb_out: Conv::new(&d.pp("rgb_out"), cin, 3, 3, 1, false)?,
            taps,
            alpha_fuse: Conv::new(&d.pp("alpha.fuse"), n_taps * cfg.alpha_tap_channels, 1, 3, 1, true)?,
            encoder_frozen: false,
            stats: LatentStats::identity(cfg.latent_channels),
            prefix: p.prefix().to_string(),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &TvaeConfig {
        &self.cfg
    }

    fn scoped(&self, part: &str) -> String {
        if self.prefix.is_empty() {
            format!("{part}.")
        } else {
            format!("{}.{part}.", self.prefix)
        }
    }

    pub fn encoder_prefix(&self) -> String {
        self.scoped("encoder")
    }

    pub fn decoder_prefix(&self) -> String {
        self.scoped("decoder")
    }

    pub fn encoder_vars(&self, store: &ParamStore) -> Vec<Var> {
        store.vars_with_prefix(&[&self.encoder_prefix()]).into_iter().map(|(_, v)| v).collect()
    }

    pub fn decoder_vars(&self, store: &ParamStore) -> Vec<Var> {
        store.vars_with_prefix(&[&self.decoder_prefix()]).into_iter().map(|(_, v)| v).collect()
    }

    pub fn freeze_encoder(&mut self) {
        self.encoder_frozen = true;
    }

    pub fn encoder_frozen(&self) -> bool {
        self.encoder_frozen
    }

    /// `(B, 3, H, W)` -> `(B, c, s, s)`; deterministic.
    pub fn encode(&self, rgb: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = rgb.dims4()?;
        let r = self.cfg.resolution;
        if (c, h, w) != (3, r, r) {
            return Err(invalid(format!("encoder expects (3, {r}, {r}) input, got ({c}, {h}, {w})")));
        }
        let mut x = self.enc_in.forward(rgb)?.silu()?;
        for (a, b) in &self.enc_down {
            x = b.forward(&a.forward(&x)?.silu()?)?.silu()?;
        }
        self.enc_out.forward(&x)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Decoded> {
        let (_, c, h, w) = z.dims4()?;
        let s = self.cfg.latent_side();
        if (c, h, w) != (self.cfg.latent_channels, s, s) {
            return Err(invalid(format!(
                "latent ({c}, {h}, {w}) does not match ({}, {s}, {s})",
                self.cfg.latent_channels
            )));
        }
        let full = self.cfg.resolution;
        let x = self.dec_in.forward(z)?.silu()?;
        let mut x = (&x + self.mid2.forward(&self.mid1.forward(&x)?.silu()?)?)?;
        let mut tap_feats = vec![upsample_nearest(&self.taps[0].forward(&x)?.silu()?, full / s)?];
        for (i, blk) in self.up.iter().enumerate() {
            x = upsample_nearest(&x, 2)?;
            x = blk.conv1.forward(&x)?.silu()?;
            x = blk.conv2.forward(&x)?.silu()?;
            let side = x.dim(2)?;
            tap_feats.push(upsample_nearest(&self.taps[i + 1].forward(&x)?.silu()?, full / side)?);
        }
        let rgb = candle_nn::ops::sigmoid(&self.rgb_out.forward(&x)?)?;
        let alpha = candle_nn::ops::sigmoid(&self.alpha_fuse.forward(&Tensor::cat(&tap_feats, 1)?)?)?;
        Ok(Decoded { rgb, alpha })
    }

    /// One warm-up step of the plain RGB autoencoder on blended glyphs.
    /// Trains the encoder and the RGB path; fails once the encoder is frozen.
    pub fn warmup_step(&self, opt: &mut AdamW, blended_rgb: &Tensor) -> Result<f64> {
        if self.encoder_frozen {
            return Err(contract("warm-up after the encoder was frozen"));
        }
        let out = self.decode(&self.encode(blended_rgb)?)?;
        let loss = mse(&out.rgb, blended_rgb)?;
        opt.backward_step(&loss)?;
        Ok(loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    }

    /// Decoder loss for an RGBA batch: the frozen encoder sees the blend over
    /// `background`, the decoder must reproduce the full RGBA glyph.
    pub fn decoder_loss(
        &self,
        rgba: &Tensor,
        background: f64,
        perceptual: &dyn PerceptualModel,
        lambda_lpips: f64,
    ) -> Result<crate::objectives::VaeLossParts> {
        let z = self.encode(&blend_tensor(rgba, background)?)?.detach();
        let out = self.decode(&z)?.rgba()?;
        vae_loss(&out, rgba, perceptual, lambda_lpips)
    }

    /// One decoder training step. `opt` must hold decoder variables only.
    pub fn decoder_step(
        &self,
        opt: &mut AdamW,
        rgba: &Tensor,
        background: f64,
        perceptual: &dyn PerceptualModel,
        lambda_lpips: f64,
    ) -> Result<f64> {
        if !self.encoder_frozen {
            return Err(contract("decoder training requires a frozen encoder"));
        }
        let parts = self.decoder_loss(rgba, background, perceptual, lambda_lpips)?;
        opt.backward_step(&parts.total)?;
        Ok(parts.total.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::ParamsAdamW;

    use crate::objectives::RandomConvPerceptual;

    #[test]
    fn config_shapes() {
        let c = TvaeConfig::default();
        c.validate().unwrap();
        assert_eq!((c.downsample_factor(), c.latent_side()), (8, 4));
        let bad = TvaeConfig {
            decoder_channels: vec![8],
            ..TvaeConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn upsample_repeats_cells() {
        let x = Tensor::new(&[[[[1.0f64, 2.0], [3.0, 4.0]]]], &Device::Cpu).unwrap();
        let y = upsample_nearest(&x, 2).unwrap().squeeze(0).unwrap().squeeze(0).unwrap();
        assert_eq!(
            y.to_vec2::<f64>().unwrap(),
            vec![
                vec![1.0, 1.0, 2.0, 2.0],
                vec![1.0, 1.0, 2.0, 2.0],
                vec![3.0, 3.0, 4.0, 4.0],
                vec![3.0, 3.0, 4.0, 4.0]
            ]
        );
    }

    #[test]
    fn shapes_and_zero_alpha_head() {
        let s = ParamStore::new(0, DType::F32);
        let t = Tvae::new(&s.root().pp("tvae"), &TvaeConfig::default()).unwrap();
        let x = Tensor::rand(0.0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let z = t.encode(&x).unwrap();
        assert_eq!(z.dims(), &[2, 4, 4, 4]);
        assert_eq!(
            t.encode(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            z.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let out = t.decode(&z).unwrap();
        assert_eq!(out.rgba().unwrap().dims(), &[2, 4, 32, 32]);
        let a = out.alpha.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(a.iter().all(|v| *v == 0.5));
        assert!(t.encode(&Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn decoder_step_needs_frozen_encoder_and_keeps_it_fixed() {
        let s = ParamStore::new(0, DType::F32);
        let cfg = TvaeConfig {
            resolution: 8,
            ..TvaeConfig::tiny()
        };
        let mut t = Tvae::new(&s.root().pp("tvae"), &cfg).unwrap();
        let p = RandomConvPerceptual::rgba_default(0, DType::F32).unwrap();
        let rgba = Tensor::rand(0.0f32, 1.0, (2, 4, 8, 8), &Device::Cpu).unwrap();
        let mut opt = AdamW::new(t.decoder_vars(&s), ParamsAdamW::default()).unwrap();
        assert!(matches!(t.decoder_step(&mut opt, &rgba, 0.5, &p, 0.1), Err(crate::Error::Contract(_))));
        t.freeze_encoder();
        let enc = t.encoder_prefix();
        let before = s.checksum(|n| n.starts_with(&enc)).unwrap();
        let dec_before = s.checksum(|n| !n.starts_with(&enc)).unwrap();
        t.decoder_step(&mut opt, &rgba, 0.5, &p, 0.1).unwrap();
        assert_eq!(before, s.checksum(|n| n.starts_with(&enc)).unwrap());
        assert_ne!(dec_before, s.checksum(|n| !n.starts_with(&enc)).unwrap());
    }

    #[test]
    fn blend_matches_formula() {
        let rgba = Tensor::new(&[0.8f64, 0.2, 0.0, 0.5], &Device::Cpu).unwrap().reshape((1, 4, 1, 1)).unwrap();
        let b = blend_tensor(&rgba, 0.0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((b[0] - 0.4).abs() < 1e-12 && (b[1] - 0.1).abs() < 1e-12 && b[2] == 0.0);
        assert!(blend_tensor(&rgba, 1.5).is_err());
    }
}
