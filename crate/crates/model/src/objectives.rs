//! Training losses. Every squared error is mean-reduced.

use candle_core::{DType, Device, Tensor, D};
use glyphdit_core::rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(invalid(format!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mse")?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Mean squared error per leading-axis sample, shape `(B,)`.
pub fn per_sample_mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "per-sample mse")?;
    let bsz = a.dim(0)?;
    Ok((a - b)?.sqr()?.reshape((bsz, ()))?.mean(1)?)
}

/// Noise, data, interpolant and target velocity for one batch.
#[derive(Clone)]
pub struct RfSample {
    pub x0: Tensor,
    pub x1: Tensor,
    /// One timestep per sample.
    pub t: Vec<f64>,
    pub x_t: Tensor,
    pub v_t: Tensor,
}

/// `x_t = t x1 + (1 - t) x0`, `v_t = x1 - x0`, with `t` broadcast per sample
/// along the leading axis.
pub fn rf_make_sample(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<RfSample> {
    same_shape(x0, x1, "rf sample")?;
    let b = x0.dim(0)?;
    if t.len() != b {
        return Err(invalid(format!("{} timesteps for batch {b}", t.len())));
    }
    if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("timesteps must lie in [0, 1]"));
    }
    let mut shape = vec![1usize; x0.rank()];
    shape[0] = b;
    let tt = Tensor::from_vec(t.to_vec(), shape, x0.device())?.to_dtype(x0.dtype())?;
    let x_t = (x1.broadcast_mul(&tt)? + x0.broadcast_mul(&(1.0 - &tt)?)?)?;
    Ok(RfSample {
        x0: x0.clone(),
        x1: x1.clone(),
        t: t.to_vec(),
        x_t,
        v_t: (x1 - x0)?,
    })
}

pub fn rf_loss(v_pred: &Tensor, sample: &RfSample) -> Result<Tensor> {
    mse(v_pred, &sample.v_t)
}

pub fn align_loss(projected: &Tensor, target: &Tensor) -> Result<Tensor> {
    mse(projected, target)
}

/// `log(1 + e^z)`, smooth everywhere and overflow-free.
pub fn softplus(z: &Tensor) -> Result<Tensor> {
    let capped = z.minimum(20.0)?;
    let soft = (capped.exp()? + 1.0)?.log()?;
    Ok(z.ge(20.0)?.where_cond(z, &soft)?)
}

/// Timestep weighting for the preference loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightFn {
    Constant { beta: f64 },
    /// `min(1 / (t (1 - t)), cap)`
    Snr { cap: f64 },
}

impl Default for WeightFn {
    fn default() -> Self {
        WeightFn::Constant { beta: 500.0 }
    }
}

impl WeightFn {
    pub fn id(&self) -> &'static str {
        match self {
            WeightFn::Constant { .. } => "constant",
            WeightFn::Snr { .. } => "snr",
        }
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let w = match *self {
            WeightFn::Constant { beta } => beta,
            WeightFn::Snr { cap } => {
                let denom = t * (1.0 - t);
                if denom <= 0.0 {
                    cap
                } else {
                    (1.0 / denom).min(cap)
                }
            }
        };
        if !(w > 0.0) || !w.is_finite() {
            return Err(invalid(format!("weight {w} must be positive and finite")));
        }
        Ok(w)
    }
}

/// Mean over pairs of `-log sigmoid(-W ((e_w - ê_w) - (e_l - ê_l)))`. All
/// error tensors have shape `(B,)`; `w` holds one positive weight per pair.
pub fn dpo_loss(e_w: &Tensor, e_l: &Tensor, ref_w: &Tensor, ref_l: &Tensor, w: &[f64]) -> Result<Tensor> {
    for t in [e_l, ref_w, ref_l] {
        same_shape(e_w, t, "dpo errors")?;
    }
    let b = e_w.dim(0)?;
    if w.len() != b || w.iter().any(|v| !(*v > 0.0)) {
        return Err(invalid("dpo weights must be positive, one per pair"));
    }
    let wt = Tensor::from_vec(w.to_vec(), b, e_w.device())?.to_dtype(e_w.dtype())?;
    let z = ((e_w - ref_w)? - (e_l - ref_l)?)?.mul(&wt)?;
    Ok(softplus(&z)?.mean_all()?)
}

/// Scalar closed form of the preference loss, for reporting and oracles.
pub fn dpo_loss_scalar(e_w: f64, e_l: f64, ref_w: f64, ref_l: f64, w: f64) -> Result<f64> {
    if !(w > 0.0) {
        return Err(invalid("W(t) must be positive"));
    }
    let z = w * ((e_w - ref_w) - (e_l - ref_l));
    Ok(if z > 30.0 { z } else { z.exp().ln_1p() })
}

pub const FOCAL_EPS: f64 = 1e-6;
pub const DICE_EPS: f64 = 1e-8;

fn check_seg(pred: &Tensor, gt: &Tensor) -> Result<()> {
    same_shape(pred, gt, "segmentation")?;
    if pred.rank() < 2 {
        return Err(invalid("segmentation maps need a leading batch axis"));
    }
    Ok(())
}

/// `-mean alpha (1 - p_t)^gamma log p_t` with `p_t = pred` where `gt > 0`
/// and `1 - pred` elsewhere; predictions are clipped to `[eps, 1 - eps]`.
pub fn focal_loss(pred: &Tensor, gt: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    check_seg(pred, gt)?;
    if !(alpha > 0.0) || !(gamma >= 0.0) {
        return Err(invalid("focal loss needs alpha > 0 and gamma >= 0"));
    }
    let p = pred.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)?;
    let pt = gt.gt(0.0)?.where_cond(&p, &(1.0 - &p)?)?;
    let modulating = if gamma == 0.0 {
        Tensor::ones_like(&pt)?
    } else {
        (1.0 - &pt)?.powf(gamma)?
    };
    Ok((modulating.mul(&pt.log()?)? * -alpha)?.mean_all()?)
}

/// Per-sample `1 - 2 sum(p g) / max(sum p + sum g, eps)`, averaged over the batch.
pub fn dice_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_seg(pred, gt)?;
    let b = pred.dim(0)?;
    let p = pred.clamp(0.0, 1.0)?.reshape((b, ()))?;
    let g = gt.clamp(0.0, 1.0)?.reshape((b, ()))?;
    let inter = p.mul(&g)?.sum(D::Minus1)?;
    let denom = (p.sum(D::Minus1)? + g.sum(D::Minus1)?)?.maximum(DICE_EPS)?;
    Ok((1.0 - (inter * 2.0)?.div(&denom)?)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegLossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub focal: f64,
    pub dice: f64,
}

impl Default for SegLossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            focal: 1.0,
            dice: 1.0,
        }
    }
}

pub struct SegLossParts {
    pub mse: Tensor,
    pub focal: Tensor,
    pub dice: Tensor,
    pub total: Tensor,
}

pub fn seg_loss_total(pred: &Tensor, gt: &Tensor, w: &SegLossWeights) -> Result<SegLossParts> {
    if w.focal < 0.0 || w.dice < 0.0 {
        return Err(invalid("segmentation loss weights must be nonnegative"));
    }
    let mse = mse(&pred.clamp(0.0, 1.0)?, &gt.clamp(0.0, 1.0)?)?;
    let focal = focal_loss(pred, gt, w.alpha, w.gamma)?;
    let dice = dice_loss(pred, gt)?;
    let total = ((&mse + (&focal * w.focal)?)? + (&dice * w.dice)?)?;
    Ok(SegLossParts {
        mse,
        focal,
        dice,
        total,
    })
}

/// Feature extractor used for the perceptual term.
pub trait PerceptualModel: Send + Sync {
    /// `(B, C, H, W)` -> a list of feature maps.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Fixed random convolution stack (seeded, never trained).
pub struct RandomConvPerceptual {
    layers: Vec<(Tensor, Tensor, usize)>,
    in_channels: usize,
}

impl RandomConvPerceptual {
    /// `channels` lists output widths; every layer after the first has stride 2.
    pub fn new(in_channels: usize, channels: &[usize], seed: u64, dtype: DType) -> Result<Self> {
        let mut r = rng::derived(seed, 0x1F_E4_7E);
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for (i, &cout) in channels.iter().enumerate() {
            let fan_in = cin * 9;
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| invalid(e.to_string()))?;
            let w: Vec<f64> = (0..cout * fan_in).map(|_| d.sample(&mut r)).collect();
            let b: Vec<f64> = (0..cout).map(|_| d.sample(&mut r) * 0.1).collect();
            layers.push((
                Tensor::from_vec(w, (cout, cin, 3, 3), &Device::Cpu)?.to_dtype(dtype)?,
                Tensor::from_vec(b, (1, cout, 1, 1), &Device::Cpu)?.to_dtype(dtype)?,
                if i == 0 { 1 } else { 2 },
            ));
            cin = cout;
        }
        Ok(Self { layers, in_channels })
    }

    pub fn rgba_default(seed: u64, dtype: DType) -> Result<Self> {
        Self::new(4, &[8, 16], seed, dtype)
    }
}

impl PerceptualModel for RandomConvPerceptual {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if x.dim(1)? != self.in_channels {
            return Err(invalid(format!("perceptual model expects {} channels", self.in_channels)));
        }
        let mut h = x.clone();
        let mut out = Vec::new();
        for (w, b, stride) in &self.layers {
            h = crate::nn::conv2d(&h, w, Some(b), 1, *stride)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Mean over feature layers of the mean squared feature difference.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, model: &dyn PerceptualModel) -> Result<Tensor> {
    same_shape(a, b, "perceptual")?;
    let fa = model.features(a)?;
    let fb = model.features(b)?;
    if fa.is_empty() {
        return Err(invalid("perceptual model returned no features"));
    }
    let mut acc = mse(&fa[0], &fb[0])?;
    for (x, y) in fa.iter().zip(&fb).skip(1) {
        acc = (acc + mse(x, y)?)?;
    }
    Ok((acc / fa.len() as f64)?)
}

pub struct VaeLossParts {
    pub mse: Tensor,
    pub lpips: Tensor,
    pub total: Tensor,
}

/// `L_mse + lambda * L_lpips` on `(B, 4, H, W)` RGBA tensors.
pub fn vae_loss(decoded: &Tensor, gt: &Tensor, perceptual: &dyn PerceptualModel, lambda: f64) -> Result<VaeLossParts> {
    if lambda < 0.0 {
        return Err(invalid("lambda_lpips must be nonnegative"));
    }
    let mse = mse(decoded, gt)?;
    let lpips = perceptual_distance(decoded, gt, perceptual)?;
    let total = (&mse + (&lpips * lambda)?)?;
    Ok(VaeLossParts { mse, lpips, total })
}
