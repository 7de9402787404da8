//! Central finite-difference checks for analytic gradients.

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index;

use crate::dit::{Dit, ModelConfig};
use crate::encoders::{NormalizedProjector, Resampler, ResamplerConfig};
use crate::error::{invalid, Result};
use crate::objectives::{
    align_loss, dice_loss, dpo_loss, focal_loss, rf_loss, rf_make_sample, seg_loss_total, vae_loss,
    RandomConvPerceptual, SegLossWeights, WeightFn,
};
use crate::params::ParamStore;
use crate::tvae::{Tvae, TvaeConfig};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    /// `name[index]` of the entry with the largest relative error.
    pub worst: String,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compare the gradient of the scalar `loss` against central differences for
/// up to `per_var` entries of every variable (always including the entry with
/// the largest analytic gradient). Variables must be f64.
pub fn check(
    loss: impl Fn() -> Result<Tensor>,
    vars: &[(String, Var)],
    per_var: usize,
    seed: u64,
) -> Result<GradReport> {
    let l = loss()?;
    if l.elem_count() != 1 {
        return Err(invalid("gradient check needs a scalar loss"));
    }
    let grads = l.backward()?;
    let mut rng = glyphdit_core::rng::seeded(seed);
    let mut report = GradReport {
        max_rel: 0.0,
        checked: 0,
        worst: String::new(),
    };
    for (name, var) in vars {
        if var.dtype() != DType::F64 {
            return Err(invalid(format!("{name}: gradient checks need f64 parameters")));
        }
        let shape = var.shape().clone();
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        let mut picks: Vec<usize> = index::sample(&mut rng, base.len(), per_var.min(base.len())).into_vec();
        let argmax = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap_or(0);
        if !picks.contains(&argmax) {
            picks.push(argmax);
        }
        for i in picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), var.device())?)?;
                scalar(&loss()?)
            };
            let plus = eval(DEFAULT_STEP)?;
            let minus = eval(-DEFAULT_STEP)?;
            var.set(&Tensor::from_vec(base.clone(), shape.clone(), var.device())?)?;
            let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
            let r = rel_err(g[i], numeric);
            report.checked += 1;
            if r > report.max_rel || report.worst.is_empty() {
                report.max_rel = r.max(report.max_rel);
                report.worst = format!("{name}[{i}] analytic {:.6e} numeric {numeric:.6e}", g[i]);
            }
        }
    }
    Ok(report)
}

fn leaf(shape: &[usize], lo: f64, hi: f64, rng: &mut glyphdit_core::rng::Rng) -> Result<Var> {
    use rand::Rng as _;
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(v, shape, &Device::Cpu)?)?)
}

fn named(vars: &[(&str, &Var)]) -> Vec<(String, Var)> {
    vars.iter().map(|(n, v)| (n.to_string(), (*v).clone())).collect()
}

/// Every loss plus scalar heads over the backbone, the projector, the
/// resampler and the alpha decoder, each checked on tiny double-precision
/// shapes. Returns one report per entry.
pub fn suite(seed: u64) -> Result<Vec<(&'static str, GradReport)>> {
    let mut r = glyphdit_core::rng::derived(seed, 0x6C_AD);
    let mut out = Vec::new();

    let (x0, x1, v) = (leaf(&[2, 3, 4], -1.0, 1.0, &mut r)?, leaf(&[2, 3, 4], -1.0, 1.0, &mut r)?, leaf(&[2, 3, 4], -1.0, 1.0, &mut r)?);
    let f = || rf_loss(v.as_tensor(), &rf_make_sample(x0.as_tensor(), x1.as_tensor(), &[0.3, 0.8])?);
    out.push(("rf_loss", check(f, &named(&[("v_pred", &v), ("x0", &x0), ("x1", &x1)]), 6, seed)?));

    let (p, tgt) = (leaf(&[2, 3, 5], -1.0, 1.0, &mut r)?, leaf(&[2, 3, 5], -1.0, 1.0, &mut r)?);
    let f = || align_loss(p.as_tensor(), tgt.as_tensor());
    out.push(("align_loss", check(f, &named(&[("projected", &p), ("target", &tgt)]), 6, seed)?));

    let e: Vec<Var> = (0..4).map(|_| leaf(&[3], 0.0, 1.0, &mut r)).collect::<Result<_>>()?;
    let w: Vec<f64> = [0.2, 0.5, 0.9]
        .iter()
        .map(|&t| WeightFn::Snr { cap: 5.0 }.eval(t))
        .collect::<Result<_>>()?;
    let f = || dpo_loss(e[0].as_tensor(), e[1].as_tensor(), e[2].as_tensor(), e[3].as_tensor(), &w);
    out.push((
        "dpo_loss",
        check(f, &named(&[("e_w", &e[0]), ("e_l", &e[1]), ("ref_w", &e[2]), ("ref_l", &e[3])]), 3, seed)?,
    ));

    let perceptual = RandomConvPerceptual::rgba_default(seed, DType::F64)?;
    let (dec, gt) = (leaf(&[1, 4, 6, 6], 0.0, 1.0, &mut r)?, leaf(&[1, 4, 6, 6], 0.0, 1.0, &mut r)?);
    let f = || Ok(vae_loss(dec.as_tensor(), gt.as_tensor(), &perceptual, 0.5)?.total);
    out.push(("vae_loss", check(f, &named(&[("decoded", &dec)]), 10, seed)?));

    let pred = leaf(&[2, 1, 4, 4], 0.05, 0.95, &mut r)?;
    let mask = Tensor::from_vec(
        (0..32).map(|i| if (i * 7) % 3 == 0 { 1.0 } else { 0.0 }).collect::<Vec<f64>>(),
        (2, 1, 4, 4),
        &Device::Cpu,
    )?;
    let f = || focal_loss(pred.as_tensor(), &mask, 0.25, 2.0);
    out.push(("focal_loss", check(f, &named(&[("pred", &pred)]), 10, seed)?));
    let f = || dice_loss(pred.as_tensor(), &mask);
    out.push(("dice_loss", check(f, &named(&[("pred", &pred)]), 10, seed)?));
    let sw = SegLossWeights::default();
    let f = || Ok(seg_loss_total(pred.as_tensor(), &mask, &sw)?.total);
    out.push(("seg_loss_total", check(f, &named(&[("pred", &pred)]), 10, seed)?));

    // Zero-initialized branches are jittered so every parameter carries a signal.
    let cfg = ModelConfig::tiny();
    let store = ParamStore::new(seed, DType::F64);
    let dit = Dit::new(&store.root(), &cfg)?;
    store.jitter(0.1, |_| true)?;
    let n = 2;
    let kn = n * cfg.tokens_per_glyph();
    let x_t = leaf(&[1, n, cfg.latent_channels, cfg.latent_side, cfg.latent_side], -1.0, 1.0, &mut r)?;
    let content = leaf(&[1, kn, cfg.dim], -1.0, 1.0, &mut r)?;
    let style = leaf(&[1, cfg.style_tokens(), cfg.dim], -1.0, 1.0, &mut r)?;
    let head = Tensor::from_vec(
        (0..x_t.elem_count()).map(|i| ((i as f64) * 0.37).sin()).collect::<Vec<f64>>(),
        x_t.shape(),
        &Device::Cpu,
    )?;
    let f = || {
        let o = dit.forward(x_t.as_tensor(), &[0.4], content.as_tensor(), Some(style.as_tensor()))?;
        Ok(o.mul(&head)?.sum_all()?)
    };
    let mut vars = store.vars_with_prefix(&[]);
    vars.extend(named(&[("x_t", &x_t), ("content", &content), ("style", &style)]));
    out.push(("dit_forward", check(f, &vars, 2, seed)?));

    let store = ParamStore::new(seed + 1, DType::F64);
    let proj = NormalizedProjector::new(&store.root(), 8, 2, 2)?;
    let (feat, tgt) = (leaf(&[1, 3, 8], -1.0, 1.0, &mut r)?, leaf(&[1, 3, 8], -0.5, 0.5, &mut r)?);
    let f = || align_loss(&proj.forward(feat.as_tensor())?, tgt.as_tensor());
    let mut vars = store.vars_with_prefix(&[]);
    vars.extend(named(&[("features", &feat)]));
    out.push(("projector", check(f, &vars, 3, seed)?));

    let store = ParamStore::new(seed + 2, DType::F64);
    let rs_cfg = ResamplerConfig {
        dim: 8,
        mllm_dim: 6,
        num_queries: 3,
        heads: 2,
        depth: 1,
        mlp_ratio: 2,
        zero_init_outputs: true,
    };
    let rs = Resampler::new(&store.root(), &rs_cfg)?;
    store.jitter(0.1, |_| true)?;
    let toks = leaf(&[1, 5, 6], -1.0, 1.0, &mut r)?;
    let tgt = leaf(&[1, 3, 8], -1.0, 1.0, &mut r)?;
    let f = || align_loss(&rs.forward(toks.as_tensor(), None)?, tgt.as_tensor());
    let mut vars = store.vars_with_prefix(&[]);
    vars.extend(named(&[("tokens", &toks)]));
    out.push(("resampler", check(f, &vars, 3, seed)?));

    let store = ParamStore::new(seed + 3, DType::F64);
    let tcfg = TvaeConfig::tiny();
    let tvae = Tvae::new(&store.root().pp("tvae"), &tcfg)?;
    let dp = tvae.decoder_prefix();
    store.jitter(0.1, |n| n.starts_with(&dp))?;
    let side = tcfg.latent_side();
    let z = leaf(&[1, tcfg.latent_channels, side, side], -1.0, 1.0, &mut r)?;
    let gt = leaf(&[1, 4, tcfg.resolution, tcfg.resolution], 0.0, 1.0, &mut r)?;
    let perceptual = RandomConvPerceptual::rgba_default(seed, DType::F64)?;
    let f = || Ok(vae_loss(&tvae.decode(z.as_tensor())?.rgba()?, gt.as_tensor(), &perceptual, 0.5)?.total);
    let mut vars = store.vars_with_prefix(&[&dp]);
    vars.extend(named(&[("z", &z)]));
    out.push(("tvae_decoder", check(f, &vars, 3, seed)?));

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    
    #[test]
    fn cubic_gradient_matches() {
        let x = Var::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        let r = check(|| Ok(x.as_tensor().powf(3.0)?.sum_all()?), &vars, 3, 0).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel < 1e-6, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Var::new(&[0.5f64, 1.5], &Device::Cpu).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        // detach hides half of the dependency from autograd
        let r = check(
            || Ok((x.as_tensor().sqr()? + x.as_tensor().detach().sqr()?)?.sum_all()?),
            &vars,
            2,
            0,
        )
        .unwrap();
        assert!(r.max_rel > 0.4);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }
}
