use candle_core::{DType, Device, Tensor};
use glyphdit_core::glyph::{GlyphSynth, StyleSpec};
use glyphdit_core::image::RgbImage;
use glyphdit_core::layout::BBox;
use glyphdit_model::dit::{Dit, ModelConfig};
use glyphdit_model::encoders::{
    encode_condition, ConditionInput, ContentEncoder, EncoderConfig, LayerSelect, Resampler, ResamplerConfig,
    StubMllm, StyleEncoder, DEFAULT_CONDITION_TEMPLATE,
};
use glyphdit_model::rope::build_3d_grid;
use glyphdit_model::tvae::{Tvae, TvaeConfig};
use glyphdit_model::{Init, ParamStore};
use proptest::prelude::*;

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    ParamStore::new(seed, DType::F64).root().var("x", shape, Init::Normal(1.0)).unwrap()
}

fn toy_dit(seed: u64) -> (ParamStore, Dit, ModelConfig) {
    let cfg = ModelConfig {
        dim: 16,
        heads: 2,
        fusion_depth: 1,
        single_depth: 1,
        latent_side: 2,
        latent_channels: 2,
        rope_dim_split: [2, 2, 4],
        ..ModelConfig::default()
    };
    let s = ParamStore::new(seed, DType::F64);
    let dit = Dit::new(&s.root(), &cfg).unwrap();
    s.jitter(0.1, |_| true).unwrap();
    (s, dit, cfg)
}

#[test]
fn glyph_reordering_is_equivariant() {
    let (_s, dit, cfg) = toy_dit(1);
    let (n, p, c) = (3, cfg.tokens_per_glyph(), cfg.latent_channels);
    let noisy = random(&[1, n * p, c], 2);
    let content = random(&[1, n * p, cfg.dim], 3);
    let style = random(&[1, cfg.style_tokens(), cfg.dim], 4);
    let coords = build_3d_grid(n, cfg.latent_side).unwrap();
    let out = dit.forward_tokens(&noisy, &coords, &[0.6], &content, Some(&style)).unwrap();

    let order = [2usize, 0, 1];
    let perm: Vec<u32> = order.iter().flat_map(|&g| (g * p..(g + 1) * p).map(|i| i as u32)).collect();
    let idx = Tensor::from_vec(perm.clone(), perm.len(), &Device::Cpu).unwrap();
    let pc: Vec<_> = perm.iter().map(|&i| coords[i as usize]).collect();
    let out_p = dit
        .forward_tokens(
            &noisy.index_select(&idx, 1).unwrap(),
            &pc,
            &[0.6],
            &content.index_select(&idx, 1).unwrap(),
            Some(&style),
        )
        .unwrap();
    assert!(max_diff(&out.index_select(&idx, 1).unwrap(), &out_p) < 1e-5);
}

fn enc_cfg() -> EncoderConfig {
    EncoderConfig {
        resolution: 16,
        patches_per_side: 2,
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    }
}

#[test]
fn duplicated_style_references_do_not_change_the_output() {
    let (s, dit, cfg) = toy_dit(5);
    let content_enc = ContentEncoder::new(&s.root().pp("content"), &enc_cfg()).unwrap();
    let style_enc = StyleEncoder::new(&s.root().pp("style"), &enc_cfg()).unwrap();
    let synth = GlyphSynth::procedural(16).unwrap();
    let style = StyleSpec::procedural(3).unwrap();
    let targets = [synth.render(1, &StyleSpec::neutral()).unwrap()];
    let refs = vec![synth.render(4, &style).unwrap(), synth.render(7, &style).unwrap()];
    let content = content_enc.encode(&targets, DType::F64).unwrap().reshape((1, cfg.tokens_per_glyph(), cfg.dim)).unwrap();
    let x_t = random(&[1, 1, 2, 2, 2], 6);
    let run = |r: &[_]| {
        let st = style_enc.encode(r, DType::F64).unwrap();
        dit.forward(&x_t, &[0.5], &content, Some(&st)).unwrap()
    };
    let once = run(&refs);
    let doubled: Vec<_> = refs.iter().chain(refs.iter()).cloned().collect();
    assert!(max_diff(&once, &run(&doubled)) < 1e-4);
    let uncond = dit.forward(&x_t, &[0.5], &content, None).unwrap();
    assert!(uncond.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn condition_embedding_replaces_style_tokens() {
    let (s, dit, cfg) = toy_dit(7);
    let rs = Resampler::new(
        &s.root().pp("resampler"),
        &ResamplerConfig {
            dim: cfg.dim,
            mllm_dim: 8,
            num_queries: cfg.style_tokens(),
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
            zero_init_outputs: false,
        },
    )
    .unwrap();
    let input = ConditionInput {
        background: RgbImage::filled(24, 24, [0.8, 0.7, 0.6]),
        caption: "a poster for a summer fair".into(),
        target_text: "SALE".into(),
        bbox: BBox::new(2, 2, 20, 10).unwrap(),
    };
    let mllm = StubMllm::new(8, 0);
    let cond = encode_condition(&input, &mllm, &rs, DEFAULT_CONDITION_TEMPLATE, LayerSelect::Last, DType::F64).unwrap();
    assert_eq!(cond.dims(), &[1, cfg.style_tokens(), cfg.dim]);
    let x_t = random(&[1, 2, 2, 2, 2], 8);
    let content = random(&[1, 2 * cfg.tokens_per_glyph(), cfg.dim], 9);
    let out = dit.forward(&x_t, &[0.3], &content, Some(&cond)).unwrap();
    assert_eq!(out.dims(), x_t.dims());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn resampler_ignores_token_order(seed in 0u64..1000, k in 1usize..12) {
        let s = ParamStore::new(seed, DType::F64);
        let cfg = ResamplerConfig { dim: 8, mllm_dim: 6, num_queries: 3, heads: 2, depth: 2, mlp_ratio: 2, zero_init_outputs: false };
        let r = Resampler::new(&s.root(), &cfg).unwrap();
        let toks = random(&[1, k, 6], seed + 1);
        let rev: Vec<u32> = (0..k as u32).rev().collect();
        let idx = Tensor::from_vec(rev, k, &Device::Cpu).unwrap();
        let a = r.forward(&toks, None).unwrap();
        let b = r.forward(&toks.index_select(&idx, 1).unwrap(), None).unwrap();
        prop_assert!(max_diff(&a, &b) < 1e-9);
    }

    #[test]
    fn alpha_stays_in_unit_range_for_any_latent(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let s = ParamStore::new(seed, DType::F64);
        let cfg = TvaeConfig::tiny();
        let t = Tvae::new(&s.root(), &cfg).unwrap();
        s.jitter(1.0, |_| true).unwrap();
        let side = cfg.latent_side();
        let z = (random(&[2, cfg.latent_channels, side, side], seed + 9) * scale).unwrap();
        let out = t.decode(&z).unwrap();
        for v in out.rgba().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
