//! Latent autoencoder training and the three backbone training stages.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use glyphdit_core::glyph::CharacterSet;
use glyphdit_core::image::RgbImage;
use glyphdit_core::layout::BBox;
use glyphdit_core::rng::{self, Rng};
use glyphdit_model::encoders::{
    mllm_token_batch, render_condition_prompt, ConditionInput, HiddenStates, LayerSelect, MllmClient, MllmRequest,
    DEFAULT_CONDITION_TEMPLATE,
};
use glyphdit_model::nn::l2_normalize;
use glyphdit_model::objectives::{align_loss, dpo_loss, per_sample_mse, rf_loss, rf_make_sample, RandomConvPerceptual};
use glyphdit_model::tvae::{blend_tensor, LatentStats};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{SamplerConfig, StageConfig, StageId};
use crate::data::{Dataset, TrainItem};
use crate::error::{config, Error, Result};
use crate::sampler::{noise, sample_rf, GlyphField};
use crate::system::{prefix, GlyphSystem};

pub const STAGE1: &str = "stage1";
pub const STAGE2: &str = "stage2";
pub const STAGE3_SFT: &str = "stage3-sft";
pub const STAGE3_DPO: &str = "stage3-dpo";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub name: String,
    pub points: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, loss: f64) {
        self.points.push((step, loss));
    }

    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    /// Mean of the first `n` recorded values.
    pub fn head_mean(&self, n: usize) -> f64 {
        let k = n.min(self.points.len()).max(1);
        self.points.iter().take(k).map(|p| p.1).sum::<f64>() / k as f64
    }

    /// Mean of the last `n` recorded values.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.points.len()).max(1);
        self.points.iter().rev().take(k).map(|p| p.1).sum::<f64>() / k as f64
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss"])?;
        for (s, l) in &self.points {
            w.write_record([s.to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn adamw(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    if vars.is_empty() {
        return Err(config("no trainable parameters selected"));
    }
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?)
}

fn value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn normal(shape: impl Into<Shape>, r: &mut Rng, dtype: DType) -> Result<Tensor> {
    let shape = shape.into();
    let v: Vec<f64> = (0..shape.elem_count()).map(|_| StandardNormal.sample(r)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

fn pick(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    let ids = Tensor::from_vec(ids, idx.len(), t.device())?;
    Ok(t.index_select(&ids, 0)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TvaeTrainConfig {
    pub warmup_steps: usize,
    pub decoder_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_lpips: f64,
    pub seed: u64,
}

impl Default for TvaeTrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 500,
            decoder_steps: 3000,
            batch_size: 8,
            lr: 2e-3,
            lambda_lpips: 0.1,
            seed: 0,
        }
    }
}

pub struct TvaeRun {
    pub warmup: LossCurve,
    pub decoder: LossCurve,
}

fn cosine(base: f64, step: usize, total: usize) -> f64 {
    crate::config::LrSchedule::WarmupCosine {
        warmup: (total / 20).max(1),
        floor: 0.02,
    }
    .lr_at(base, step, total)
}

/// Warm up the autoencoder on blended glyphs (skipped when the encoder is
/// already frozen), freeze the encoder, fit latent statistics, then train the
/// RGBA decoder. `glyphs` is `(N, 4, H, W)`.
pub fn train_tvae(sys: &mut GlyphSystem, glyphs: &Tensor, cfg: &TvaeTrainConfig) -> Result<TvaeRun> {
    let n = glyphs.dim(0)?;
    if n == 0 || cfg.batch_size == 0 {
        return Err(config("tvae training needs glyphs and a positive batch size"));
    }
    let bg = sys.cfg.background;
    let mut r = rng::derived(cfg.seed, 0x7A_E0);
    let mut warmup = LossCurve::new("tvae-warmup");
    if !sys.tvae.encoder_frozen() && cfg.warmup_steps > 0 {
        let mut vars = sys.tvae.encoder_vars(&sys.store);
        vars.extend(sys.tvae.decoder_vars(&sys.store));
        let mut opt = adamw(vars, cfg.lr)?;
        let blended = blend_tensor(glyphs, bg)?;
        for step in 0..cfg.warmup_steps {
            opt.set_learning_rate(cosine(cfg.lr, step, cfg.warmup_steps));
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(0..n)).collect();
            warmup.push(step, sys.tvae.warmup_step(&mut opt, &pick(&blended, &idx)?)?);
        }
    }
    sys.tvae.freeze_encoder();
    let z = sys.tvae.encode(&blend_tensor(glyphs, bg)?)?;
    sys.tvae.stats = LatentStats::fit(&z)?;

    let perceptual = RandomConvPerceptual::rgba_default(cfg.seed, sys.dtype())?;
    let mut opt = adamw(sys.tvae.decoder_vars(&sys.store), cfg.lr)?;
    let mut decoder = LossCurve::new("tvae-decoder");
    for step in 0..cfg.decoder_steps {
        opt.set_learning_rate(cosine(cfg.lr, step, cfg.decoder_steps));
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(0..n)).collect();
        let loss = sys.tvae.decoder_step(&mut opt, &pick(glyphs, &idx)?, bg, &perceptual, cfg.lambda_lpips)?;
        decoder.push(step, loss);
    }
    Ok(TvaeRun { warmup, decoder })
}

/// Reconstruction quality of the latent autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    /// PSNR of the colour plane over every pixel, in dB.
    pub rgb_psnr: f64,
    /// PSNR of the colour plane composited onto the training background.
    pub blended_psnr: f64,
    pub alpha_mae: f64,
}

fn psnr(mse: f64) -> f64 {
    10.0 * (1.0 / mse.max(1e-12)).log10()
}

/// Encode and decode `glyphs (N, 4, H, W)` and compare against the input.
pub fn recon_metrics(sys: &GlyphSystem, glyphs: &Tensor) -> Result<ReconMetrics> {
    let glyphs = glyphs.to_dtype(sys.dtype())?;
    let rec = sys.decode_latents(&sys.encode_latents(&glyphs)?)?;
    let bg = sys.cfg.background;
    let rgb_mse = value(&(rec.narrow(1, 0, 3)? - glyphs.narrow(1, 0, 3)?)?.sqr()?.mean_all()?)?;
    let blended_mse = value(&(blend_tensor(&rec, bg)? - blend_tensor(&glyphs, bg)?)?.sqr()?.mean_all()?)?;
    let alpha_mae = value(&(rec.narrow(1, 3, 1)? - glyphs.narrow(1, 3, 1)?)?.abs()?.mean_all()?)?;
    Ok(ReconMetrics {
        rgb_psnr: psnr(rgb_mse),
        blended_psnr: psnr(blended_mse),
        alpha_mae,
    })
}

fn check_stage(cfg: &StageConfig, want: StageId) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != want {
        return Err(config(format!("expected a {want:?} config, got {:?}", cfg.stage)));
    }
    Ok(())
}

/// Content tokens `(B, n * p, d)` for a batch of `(B * n, 4, H, W)` images.
fn content_tokens(sys: &GlyphSystem, imgs: &Tensor, b: usize) -> Result<Tensor> {
    let t = sys.content.forward(imgs)?;
    let (bn, p, d) = t.dims3()?;
    Ok(t.reshape((b, (bn / b) * p, d))?)
}

/// One rectified-flow step on a sampled batch; returns the loss tensor.
fn rf_batch_loss(
    sys: &GlyphSystem,
    data: &Dataset,
    r: &mut Rng,
    batch_size: usize,
    dropout: f64,
) -> Result<Tensor> {
    let batch = data.sample_batch(r, batch_size)?;
    let b = batch.indices.len();
    let t: Vec<f64> = (0..b).map(|_| r.random::<f64>()).collect();
    let x0 = normal(batch.latents.shape().clone(), r, sys.dtype())?;
    let sample = rf_make_sample(&x0, &batch.latents, &t)?;
    let content = content_tokens(sys, &batch.content, b)?;
    let style = if dropout > 0.0 && r.random_bool(dropout) {
        None
    } else {
        Some(sys.style.forward(&batch.style)?)
    };
    let v = sys.dit.forward(&sample.x_t, &t, &content, style.as_ref())?;
    Ok(rf_loss(&v, &sample)?)
}

/// Jointly train the backbone, both encoders and their projectors with the
/// rectified-flow loss. Style tokens are dropped per batch with probability
/// `cond_dropout`.
pub fn train_stage1(sys: &mut GlyphSystem, data: &mut Dataset, cfg: &StageConfig) -> Result<LossCurve> {
    check_stage(cfg, StageId::Stage1)?;
    if !sys.tvae.encoder_frozen() {
        return Err(Error::Precondition("stage 1 needs a trained, frozen latent encoder".into()));
    }
    if !data.has_latents() {
        data.cache_latents(sys)?;
    }
    let dropout = cfg.cond_dropout.unwrap_or(0.0);
    let mut opt = adamw(sys.vars(&[prefix::DIT, prefix::CONTENT, prefix::STYLE]), cfg.lr)?;
    let mut r = rng::derived(cfg.seed, 0x57_A6_E1);
    let mut curve = LossCurve::new(STAGE1);
    for step in 0..cfg.steps {
        opt.set_learning_rate(cfg.lr_at(step));
        let loss = rf_batch_loss(sys, data, &mut r, cfg.batch_size, dropout)?;
        opt.backward_step(&loss)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push(step, value(&loss)?);
        }
    }
    sys.meta.cond_dropout = dropout;
    sys.meta.mark(STAGE1);
    Ok(curve)
}

/// Condition input describing one training item: its style references laid
/// side by side as the background, a caption naming the style and the
/// item's characters as the target text.
pub fn condition_for_item(item: &TrainItem, charset: &CharacterSet) -> Result<ConditionInput> {
    let blended = blend_tensor(&item.style, 1.0)?;
    let (m, _, h, w) = blended.dims4()?;
    let data = blended
        .permute((2, 0, 3, 1))?
        .contiguous()?
        .reshape((h, m * w, 3))?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let background = RgbImage::from_vec(m * w, h, data)?;
    let text: String = item.char_ids.iter().filter_map(|&c| charset.char_of(c)).collect();
    Ok(ConditionInput {
        background,
        caption: format!("lettering in house style {}", item.style_id),
        target_text: text,
        bbox: BBox::new(0, 0, (m * w) as i64, h as i64)?,
    })
}

/// Fixed per-style alignment targets: the frozen style encoder applied to
/// every reference of that style in `data`.
pub fn style_targets(sys: &GlyphSystem, data: &Dataset) -> Result<BTreeMap<u32, Tensor>> {
    let mut refs: BTreeMap<u32, Vec<Tensor>> = BTreeMap::new();
    for it in &data.items {
        refs.entry(it.style_id).or_default().push(it.style.clone());
    }
    refs.into_iter()
        .map(|(id, r)| {
            let all = Tensor::cat(&r, 0)?.unsqueeze(0)?;
            Ok((id, sys.style.forward(&all)?.squeeze(0)?.detach()))
        })
        .collect()
}

/// Train only the resampler so that condition embeddings match the frozen
/// style embeddings. Every other parameter stays bitwise unchanged.
pub fn train_stage2(
    sys: &mut GlyphSystem,
    data: &Dataset,
    cfg: &StageConfig,
    mllm: &dyn MllmClient,
) -> Result<LossCurve> {
    check_stage(cfg, StageId::Stage2)?;
    if !sys.meta.has_stage(STAGE1) {
        return Err(Error::Precondition("stage 2 needs a stage-1 checkpoint".into()));
    }
    if mllm.hidden_dim() != sys.cfg.resampler.mllm_dim {
        return Err(config(format!(
            "client width {} does not match resampler input {}",
            mllm.hidden_dim(),
            sys.cfg.resampler.mllm_dim
        )));
    }
    let charset = CharacterSet::procedural();
    let targets = style_targets(sys, data)?;
    let mut states: Vec<HiddenStates> = Vec::with_capacity(data.len());
    for it in &data.items {
        let input = condition_for_item(it, &charset)?;
        let resp = mllm.encode(&MllmRequest {
            prompt: render_condition_prompt(DEFAULT_CONDITION_TEMPLATE, &input),
            image: input.background,
        })?;
        states.push(resp.layer(LayerSelect::Last)?.clone());
    }
    let mut opt = adamw(sys.vars(&[prefix::RESAMPLER]), cfg.lr)?;
    let mut r = rng::derived(cfg.seed, 0x57_A6_E2);
    let mut curve = LossCurve::new(STAGE2);
    let q = sys.cfg.resampler.num_queries;
    for step in 0..cfg.steps {
        opt.set_learning_rate(cfg.lr_at(step));
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(0..data.len())).collect();
        let batch_states: Vec<&HiddenStates> = idx.iter().map(|&i| &states[i]).collect();
        let (tokens, mask) = mllm_token_batch(&batch_states, q, sys.dtype(), &Device::Cpu)?;
        let pred = l2_normalize(&sys.resampler.forward(&tokens, mask.as_ref())?)?;
        let tgt: Vec<Tensor> = idx
            .iter()
            .map(|&i| Ok(targets[&data.items[i].style_id].unsqueeze(0)?))
            .collect::<Result<_>>()?;
        let loss = align_loss(&pred, &Tensor::cat(&tgt, 0)?)?;
        opt.backward_step(&loss)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push(step, value(&loss)?);
        }
    }
    sys.meta.mark(STAGE2);
    Ok(curve)
}

fn is_adapter(name: &str) -> bool {
    name.contains("lora_")
}

fn adapter_vars(sys: &GlyphSystem) -> Vec<Var> {
    sys.store.vars_where(is_adapter).into_iter().map(|(_, v)| v).collect()
}

/// Checksum over every non-adapter parameter.
pub fn base_checksum(sys: &GlyphSystem) -> Result<u64> {
    Ok(sys.store.checksum(|n| !is_adapter(n))?)
}

fn check_adapters(sys: &GlyphSystem, cfg: &StageConfig) -> Result<()> {
    if !sys.meta.has_stage(STAGE1) {
        return Err(Error::Precondition("stage 3 needs a stage-1 checkpoint".into()));
    }
    let want = cfg.adapter_rank.unwrap_or(0);
    if sys.cfg.model.lora_rank != want {
        return Err(config(format!(
            "system carries rank-{} adapters, config asks for rank {want}",
            sys.cfg.model.lora_rank
        )));
    }
    Ok(())
}

/// Supervised fine-tuning of the low-rank adapters on a (filtered) subset.
pub fn train_stage3_sft(sys: &mut GlyphSystem, data: &mut Dataset, cfg: &StageConfig) -> Result<LossCurve> {
    check_stage(cfg, StageId::Stage3Sft)?;
    check_adapters(sys, cfg)?;
    if !data.has_latents() {
        data.cache_latents(sys)?;
    }
    let dropout = sys.meta.cond_dropout;
    let mut opt = adamw(adapter_vars(sys), cfg.lr)?;
    let mut r = rng::derived(cfg.seed, 0x57_A6_E3);
    let mut curve = LossCurve::new(STAGE3_SFT);
    for step in 0..cfg.steps {
        opt.set_learning_rate(cfg.lr_at(step));
        let loss = rf_batch_loss(sys, data, &mut r, cfg.batch_size, dropout)?;
        opt.backward_step(&loss)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push(step, value(&loss)?);
        }
    }
    sys.meta.mark(STAGE3_SFT);
    Ok(curve)
}

/// Ranks generated candidates; higher is better.
pub trait CandidateScorer {
    fn name(&self) -> &str;
    /// `candidate` is `(n, 4, H, W)` RGBA for `item`.
    fn score(&self, candidate: &Tensor, item: &TrainItem) -> Result<f64>;
}

/// Negative mean squared error to the ground-truth glyphs.
pub struct NegMseScorer;

impl CandidateScorer for NegMseScorer {
    fn name(&self) -> &str {
        "neg-mse"
    }

    fn score(&self, candidate: &Tensor, item: &TrainItem) -> Result<f64> {
        Ok(-value(&glyphdit_model::objectives::mse(candidate, &item.gt)?)?)
    }
}

pub fn scorer_by_name(name: &str) -> Result<Box<dyn CandidateScorer>> {
    match name {
        "neg-mse" => Ok(Box::new(NegMseScorer)),
        other => Err(config(format!("unknown scorer {other:?}"))),
    }
}

#[derive(Clone)]
pub struct PreferencePair {
    pub item: usize,
    /// `(n, c, s, s)` normalized latents.
    pub win: Tensor,
    pub lose: Tensor,
    pub win_score: f64,
    pub lose_score: f64,
}

/// Sample `k` candidates per item, score the decoded glyphs and keep the best
/// and worst as a pair. Items whose scoring fails are skipped and logged.
pub fn build_preference_pairs(
    sys: &GlyphSystem,
    data: &Dataset,
    items: &[usize],
    k: usize,
    scorer: &dyn CandidateScorer,
    sampler: &SamplerConfig,
) -> Result<Vec<PreferencePair>> {
    if k < 2 {
        return Err(config("need at least two candidates per condition"));
    }
    let m = &sys.cfg.model;
    let mut pairs = Vec::new();
    for &i in items {
        let it = &data.items[i];
        let n = it.n();
        let content = Tensor::cat(&vec![it.content.clone(); k], 0)?;
        let style = sys.style.forward(&it.style.unsqueeze(0)?)?;
        let style = style.repeat((k, 1, 1))?;
        let field = GlyphField::new(sys, &content, k, Some(style))?;
        let seed = rng::mix(sampler.seed, i as u64);
        let x0 = noise((k, n, m.latent_channels, m.latent_side, m.latent_side), seed, sys.dtype())?;
        let z = sample_rf(&field, &x0, sampler)?;
        let mut scored = Vec::with_capacity(k);
        let mut failed = false;
        for j in 0..k {
            let zj = z.get(j)?;
            match sys.decode_latents(&zj).and_then(|rgba| scorer.score(&rgba, it)) {
                Ok(s) if s.is_finite() => scored.push((s, zj)),
                Ok(s) => {
                    log::warn!("scorer {} returned {s} for item {i}; pair skipped", scorer.name());
                    failed = true;
                    break;
                }
                Err(e) => {
                    log::warn!("scorer {} failed on item {i}: {e}; pair skipped", scorer.name());
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            continue;
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (ws, w) = scored.first().cloned().expect("k >= 2");
        let (ls, l) = scored.last().cloned().expect("k >= 2");
        if ws > ls {
            pairs.push(PreferencePair {
                item: i,
                win: w,
                lose: l,
                win_score: ws,
                lose_score: ls,
            });
        }
    }
    Ok(pairs)
}

/// Per-pair denoising errors of `sys` on `(win, lose)` at shared `t` and
/// shared noise. Returns `(e_w, e_l)`, each `(B,)`.
fn pair_errors(
    sys: &GlyphSystem,
    pairs: &[&PreferencePair],
    t: &[f64],
    x0: &Tensor,
    content: &Tensor,
    style: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let b = pairs.len();
    let win = Tensor::stack(&pairs.iter().map(|p| p.win.clone()).collect::<Vec<_>>(), 0)?;
    let lose = Tensor::stack(&pairs.iter().map(|p| p.lose.clone()).collect::<Vec<_>>(), 0)?;
    let x1 = Tensor::cat(&[&win, &lose], 0)?;
    let x0 = Tensor::cat(&[x0, x0], 0)?;
    let tt: Vec<f64> = t.iter().chain(t).copied().collect();
    let s = rf_make_sample(&x0, &x1, &tt)?;
    let v = sys.dit.forward(&s.x_t, &tt, content, Some(style))?;
    let e = per_sample_mse(&v, &s.v_t)?;
    Ok((e.narrow(0, 0, b)?, e.narrow(0, b, b)?))
}

/// Frozen content and style tokens for the doubled `[win; lose]` batch.
fn pair_conditions(sys: &GlyphSystem, data: &Dataset, pairs: &[&PreferencePair]) -> Result<(Tensor, Tensor)> {
    let items: Vec<&TrainItem> = pairs.iter().map(|p| &data.items[p.item]).collect();
    let b = items.len();
    let imgs = Tensor::cat(&items.iter().map(|i| i.content.clone()).collect::<Vec<_>>(), 0)?;
    let refs = Tensor::stack(&items.iter().map(|i| i.style.clone()).collect::<Vec<_>>(), 0)?;
    let content = content_tokens(sys, &imgs, b)?.detach();
    let style = sys.style.forward(&refs)?.detach();
    Ok((
        Tensor::cat(&[&content, &content], 0)?,
        Tensor::cat(&[&style, &style], 0)?,
    ))
}

fn pair_groups(data: &Dataset, pairs: &[PreferencePair]) -> Vec<Vec<usize>> {
    let mut g: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (j, p) in pairs.iter().enumerate() {
        let it = &data.items[p.item];
        g.entry((it.n(), it.m())).or_default().push(j);
    }
    g.into_values().collect()
}

/// Preference optimization of the adapters against a frozen reference.
/// `t` is shared inside each pair, and so is the noise.
pub fn train_stage3_dpo(
    policy: &mut GlyphSystem,
    reference: &GlyphSystem,
    data: &Dataset,
    pairs: &[PreferencePair],
    cfg: &StageConfig,
) -> Result<LossCurve> {
    check_stage(cfg, StageId::Stage3Dpo)?;
    check_adapters(policy, cfg)?;
    if pairs.is_empty() {
        return Err(Error::Precondition("no preference pairs".into()));
    }
    let weight = cfg.weight_fn.unwrap_or_default();
    let groups = pair_groups(data, pairs);
    let mut opt = adamw(adapter_vars(policy), cfg.lr)?;
    let mut r = rng::derived(cfg.seed, 0x57_A6_E4);
    let mut curve = LossCurve::new(STAGE3_DPO);
    for step in 0..cfg.steps {
        opt.set_learning_rate(cfg.lr_at(step));
        let g = &groups[r.random_range(0..groups.len())];
        let chosen: Vec<&PreferencePair> = (0..cfg.batch_size).map(|_| &pairs[g[r.random_range(0..g.len())]]).collect();
        let b = chosen.len();
        let t: Vec<f64> = (0..b).map(|_| r.random::<f64>()).collect();
        let mut nshape = vec![b];
        nshape.extend(chosen[0].win.dims());
        let x0 = normal(nshape, &mut r, policy.dtype())?;
        let (content, style) = pair_conditions(policy, data, &chosen)?;
        let (e_w, e_l) = pair_errors(policy, &chosen, &t, &x0, &content, &style)?;
        let (r_w, r_l) = pair_errors(reference, &chosen, &t, &x0, &content, &style)?;
        let w: Vec<f64> = t.iter().map(|&ti| weight.eval(ti)).collect::<std::result::Result<_, _>>()?;
        let loss = dpo_loss(&e_w, &e_l, &r_w.detach(), &r_l.detach(), &w)?;
        opt.backward_step(&loss)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push(step, value(&loss)?);
        }
    }
    policy.meta.mark(STAGE3_DPO);
    Ok(curve)
}

/// Mean implicit preference margin `(e_l - ê_l) - (e_w - ê_w)` of `policy`
/// over `pairs`, averaged over `draws` seeded `(t, noise)` draws per pair.
/// Zero when the policy equals the reference; positive when the policy has
/// moved towards the winners relative to the reference.
pub fn preference_margin(
    policy: &GlyphSystem,
    reference: &GlyphSystem,
    data: &Dataset,
    pairs: &[PreferencePair],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() || draws == 0 {
        return Err(config("margin needs pairs and draws"));
    }
    let mut r = rng::derived(seed, 0x3A_461);
    let mut total = 0.0;
    let mut count = 0usize;
    for g in pair_groups(data, pairs) {
        let chosen: Vec<&PreferencePair> = g.iter().map(|&j| &pairs[j]).collect();
        let b = chosen.len();
        let (content, style) = pair_conditions(policy, data, &chosen)?;
        for _ in 0..draws {
            let t: Vec<f64> = (0..b).map(|_| r.random::<f64>()).collect();
            let mut nshape = vec![b];
            nshape.extend(chosen[0].win.dims());
            let x0 = normal(nshape, &mut r, policy.dtype())?;
            let (e_w, e_l) = pair_errors(policy, &chosen, &t, &x0, &content, &style)?;
            let (r_w, r_l) = pair_errors(reference, &chosen, &t, &x0, &content, &style)?;
            let m = ((e_l - r_l)? - (e_w - r_w)?)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            total += m.iter().sum::<f64>();
            count += m.len();
        }
    }
    Ok(total / count as f64)
}
