//! Editing, generation and text-to-design inference.

use std::path::Path;

use glyphdit_core::glyph::{GlyphSynth, RgbaGlyph, StyleSpec};
use glyphdit_core::image::{alpha_over, merge_layers, RgbImage, RgbaImage};
use glyphdit_core::layout::{plan_coarse, plan_fine, BBox, Layout, LayoutTask, MllmPlanner, Planner, StubLayoutLlm};
use glyphdit_core::rng;
use glyphdit_model::encoders::{
    encode_condition, ConditionInput, LayerSelect, MllmClient, StubMllm, DEFAULT_CONDITION_TEMPLATE,
};
use serde::{Deserialize, Serialize};

use crate::clients::{border_median, CallLog, CallRecord, GradientT2i, Inpainter, MedianInpainter, TextToImage};
use crate::config::SamplerConfig;
use crate::error::{config, Result};
use crate::sampler::{generate_glyphs, StyleSource};
use crate::system::{tensor_to_glyphs, GlyphSystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextItem {
    pub text: String,
    /// Line box; when every item has one, coarse planning is skipped.
    #[serde(default)]
    pub bbox: Option<BBox>,
}

impl TextItem {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            bbox: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DesignCase {
    pub background: RgbImage,
    pub caption: String,
    pub items: Vec<TextItem>,
    /// Region holding the reference style, for editing.
    pub style_region: Option<BBox>,
}

impl DesignCase {
    pub fn canvas(&self) -> (i64, i64) {
        (self.background.width() as i64, self.background.height() as i64)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.canvas();
        let boxes = self.items.iter().filter_map(|i| i.bbox).chain(self.style_region);
        for b in boxes {
            if !b.within(w, h) {
                return Err(config(format!("box {b:?} outside the {w}x{h} image")));
            }
        }
        if self.items.iter().any(|i| i.text.trim().is_empty()) {
            return Err(config("text items must be non-empty"));
        }
        Ok(())
    }
}

/// External collaborators of the inference pipelines.
pub struct Clients {
    pub planner: Box<dyn Planner>,
    pub inpainter: Box<dyn Inpainter>,
    pub mllm: Box<dyn MllmClient>,
    pub t2i: Box<dyn TextToImage>,
}

impl Clients {
    /// Deterministic local stand-ins for every client.
    pub fn stubs(seed: u64, mllm_dim: usize) -> Self {
        Self {
            planner: Box::new(MllmPlanner::new(StubLayoutLlm { seed })),
            inpainter: Box::new(MedianInpainter::default()),
            mllm: Box::new(StubMllm::new(mllm_dim, seed)),
            t2i: Box::new(GradientT2i),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub sampler: SamplerConfig,
    pub template: String,
    pub layer: LayerSelect,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            template: DEFAULT_CONDITION_TEMPLATE.to_string(),
            layer: LayerSelect::Last,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub pipeline: String,
    pub seed: u64,
    /// Line-level layout.
    pub layout: Layout,
    /// Glyph boxes per line.
    pub glyphs: Vec<Layout>,
    pub calls: Vec<CallRecord>,
}

pub struct DesignOutput {
    pub image: RgbImage,
    /// One straight-alpha layer per text item, composited in order.
    pub foregrounds: Vec<RgbaImage>,
    pub report: PipelineReport,
}

impl DesignOutput {
    /// All layers merged into one.
    pub fn foreground(&self) -> Result<RgbaImage> {
        let (w, h) = (self.image.width(), self.image.height());
        self.foregrounds
            .iter()
            .try_fold(RgbaImage::new(w, h), |acc, l| Ok(merge_layers(&acc, l)?))
    }

    /// Writes `design.png`, `foreground.png` and `report.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.image.save_png(dir.join("design.png"))?;
        self.foreground()?.save_png(dir.join("foreground.png"))?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)?)?;
        Ok(())
    }
}

/// Characters of `text` as planner labels.
fn glyph_labels(text: &str) -> Vec<String> {
    text.chars().map(String::from).collect()
}

/// Render the glyphs of one line into a transparent canvas-sized layer.
/// Whitespace gets a box but no glyph.
fn render_line(
    sys: &GlyphSystem,
    synth: &GlyphSynth,
    boxes: &Layout,
    style: StyleSource<'_>,
    sampler: &SamplerConfig,
    canvas: (usize, usize),
) -> Result<RgbaImage> {
    let charset = synth.charset();
    let neutral = StyleSpec::neutral();
    let mut content = Vec::new();
    let mut targets = Vec::new();
    for item in &boxes.items {
        let c = item.label.chars().next().unwrap_or(' ');
        if c.is_whitespace() {
            continue;
        }
        let id = charset
            .id_of(c)
            .ok_or_else(|| config(format!("character {c:?} is not in the glyph set")))?;
        content.push(synth.render(id, &neutral)?);
        targets.push((id, item.bbox));
    }
    let mut layer = RgbaImage::new(canvas.0, canvas.1);
    if content.is_empty() {
        return Ok(layer);
    }
    let rgba = generate_glyphs(sys, &content, style, sampler)?;
    let ids: Vec<(u32, u32)> = targets.iter().map(|&(id, _)| (id, 0)).collect();
    for (g, (_, bbox)) in tensor_to_glyphs(&rgba, &ids)?.iter().zip(&targets) {
        layer.paste_scaled(&g.pixels, bbox)?;
    }
    Ok(layer)
}

fn line_sampler(base: &SamplerConfig, line: usize) -> SamplerConfig {
    SamplerConfig {
        seed: rng::mix(base.seed, line as u64),
        ..base.clone()
    }
}

/// Soft-matte the contents of `region` against its border colour and
/// resample to a `resolution`-sized reference glyph.
pub fn style_reference(image: &RgbImage, region: &BBox, resolution: usize) -> Result<RgbaGlyph> {
    let crop = image.crop(region)?;
    let bg = border_median(image, region, 2);
    let dist: Vec<f32> = crop
        .data()
        .chunks_exact(3)
        .map(|p| (0..3).map(|c| (p[c] - bg[c]).abs()).fold(0.0, f32::max))
        .collect();
    let peak = dist.iter().copied().fold(0.0, f32::max);
    let mut data = Vec::with_capacity(dist.len() * 4);
    for (p, d) in crop.data().chunks_exact(3).zip(&dist) {
        let a = if peak > 1e-6 { (d / peak).clamp(0.0, 1.0) } else { 0.0 };
        data.extend_from_slice(&[p[0], p[1], p[2], a]);
    }
    let rgba = RgbaImage::from_vec(crop.width(), crop.height(), data)?;
    Ok(RgbaGlyph {
        pixels: rgba.resize(resolution, resolution),
        char_id: 0,
        style_id: 0,
    })
}

/// Replace the text inside `region` with `new_text` in the style found there.
pub fn edit_pipeline(
    sys: &GlyphSystem,
    image: &RgbImage,
    region: BBox,
    new_text: &str,
    clients: &Clients,
    opts: &PipelineOptions,
) -> Result<DesignOutput> {
    let canvas = (image.width() as i64, image.height() as i64);
    if !region.within(canvas.0, canvas.1) {
        return Err(config(format!("edit region {region:?} outside the image")));
    }
    if new_text.trim().is_empty() {
        return Err(config("replacement text is empty"));
    }
    let log = CallLog::default();
    let reference = style_reference(image, &region, sys.cfg.resolution()).map_err(|e| e.at("style"))?;
    let clean = log.call("inpaint", clients.inpainter.name(), || clients.inpainter.inpaint(image, &region))?;
    let labels = glyph_labels(new_text);
    let glyphs = log.call("plan-fine", "planner", || {
        plan_fine(region, &labels, canvas, clients.planner.as_ref(), Some(&clean))
    })?;
    let synth = GlyphSynth::procedural(sys.cfg.resolution())?;
    let layer = render_line(
        sys,
        &synth,
        &glyphs,
        StyleSource::Refs(std::slice::from_ref(&reference)),
        &line_sampler(&opts.sampler, 0),
        (image.width(), image.height()),
    )
    .map_err(|e| e.at("generate"))?;
    let out = alpha_over(&clean, &layer)?;
    Ok(DesignOutput {
        image: out,
        foregrounds: vec![layer],
        report: PipelineReport {
            pipeline: "edit".into(),
            seed: opts.sampler.seed,
            layout: Layout::new(
                vec![glyphdit_core::layout::LayoutItem {
                    label: new_text.to_string(),
                    bbox: region,
                }],
                canvas,
            ),
            glyphs: vec![glyphs],
            calls: log.records(),
        },
    })
}

fn generate_with_log(
    sys: &GlyphSystem,
    case: &DesignCase,
    clients: &Clients,
    opts: &PipelineOptions,
    log: &CallLog,
    name: &str,
) -> Result<DesignOutput> {
    case.validate()?;
    if case.items.is_empty() {
        return Err(config("no text items"));
    }
    let canvas = case.canvas();
    let lines = if let Some(boxes) = case.items.iter().map(|i| i.bbox).collect::<Option<Vec<_>>>() {
        Layout::new(
            case.items
                .iter()
                .zip(boxes)
                .map(|(i, bbox)| glyphdit_core::layout::LayoutItem {
                    label: i.text.clone(),
                    bbox,
                })
                .collect(),
            canvas,
        )
    } else {
        let task = LayoutTask::coarse(canvas, case.caption.clone(), case.items.iter().map(|i| i.text.clone()).collect());
        log.call("plan-coarse", "planner", || {
            plan_coarse(&task, clients.planner.as_ref(), Some(&case.background))
        })?
    };
    let synth = GlyphSynth::procedural(sys.cfg.resolution())?;
    let size = (case.background.width(), case.background.height());
    let mut image = case.background.clone();
    let mut foregrounds = Vec::new();
    let mut glyphs = Vec::new();
    for (i, line) in lines.items.iter().enumerate() {
        let labels = glyph_labels(&line.label);
        let fine = log.call("plan-fine", "planner", || {
            plan_fine(line.bbox, &labels, canvas, clients.planner.as_ref(), Some(&case.background))
        })?;
        let input = ConditionInput {
            background: case.background.clone(),
            caption: case.caption.clone(),
            target_text: line.label.clone(),
            bbox: line.bbox,
        };
        let tokens = log.call("condition", clients.mllm.name(), || {
            encode_condition(
                &input,
                clients.mllm.as_ref(),
                &sys.resampler,
                &opts.template,
                opts.layer,
                sys.dtype(),
            )
        })?;
        let layer = render_line(
            sys,
            &synth,
            &fine,
            StyleSource::Tokens(tokens),
            &line_sampler(&opts.sampler, i),
            size,
        )
        .map_err(|e| e.at("generate"))?;
        image = alpha_over(&image, &layer)?;
        foregrounds.push(layer);
        glyphs.push(fine);
    }
    Ok(DesignOutput {
        image,
        foregrounds,
        report: PipelineReport {
            pipeline: name.into(),
            seed: opts.sampler.seed,
            layout: lines,
            glyphs,
            calls: log.records(),
        },
    })
}

/// Lay out and render the text items of `case` onto its background.
pub fn generate_pipeline(
    sys: &GlyphSystem,
    case: &DesignCase,
    clients: &Clients,
    opts: &PipelineOptions,
) -> Result<DesignOutput> {
    generate_with_log(sys, case, clients, opts, &CallLog::default(), "generate")
}

/// Background from the text-to-image client, then [`generate_pipeline`].
pub fn t2d_pipeline(
    sys: &GlyphSystem,
    prompt: &str,
    items: &[TextItem],
    canvas: (usize, usize),
    clients: &Clients,
    opts: &PipelineOptions,
) -> Result<DesignOutput> {
    let log = CallLog::default();
    let background = log.call("t2i", clients.t2i.name(), || {
        clients.t2i.generate(prompt, canvas.0, canvas.1, opts.sampler.seed)
    })?;
    let case = DesignCase {
        background,
        caption: prompt.to_string(),
        items: items.to_vec(),
        style_region: None,
    };
    generate_with_log(sys, &case, clients, opts, &log, "t2d")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SystemConfig;
    use crate::Error;
    use candle_core::DType;

    fn tiny() -> GlyphSystem {
        let mut s = GlyphSystem::new(&SystemConfig::tiny(), 3, DType::F32).unwrap();
        s.meta.cond_dropout = 0.1;
        s
    }

    fn opts() -> PipelineOptions {
        PipelineOptions {
            sampler: SamplerConfig {
                steps: 2,
                cfg_scale: 1.0,
                seed: 5,
            },
            ..Default::default()
        }
    }

    #[test]
    fn style_reference_mattes_against_border() {
        let mut img = RgbImage::filled(12, 12, [0.9, 0.9, 0.9]);
        for y in 4..8 {
            img.set_pixel(5, y, [0.1, 0.1, 0.1]);
        }
        let g = style_reference(&img, &BBox::new(2, 2, 10, 10).unwrap(), 8).unwrap();
        assert_eq!(g.resolution(), 8);
        assert!(g.pixels.in_unit_range());
        let alphas: Vec<f32> = (0..8).flat_map(|y| (0..8).map(move |x| (x, y))).map(|(x, y)| g.pixels.alpha(x, y)).collect();
        assert_eq!(alphas.iter().cloned().fold(0.0, f32::min), 0.0);
        assert!(alphas.iter().cloned().fold(0.0, f32::max) > 0.5);
    }

    #[test]
    fn edit_errors_name_their_stage() {
        struct Broken;
        impl Inpainter for Broken {
            fn name(&self) -> &str {
                "broken"
            }
            fn inpaint(&self, _: &RgbImage, _: &BBox) -> Result<RgbImage> {
                Err(Error::Client {
                    client: "broken".into(),
                    reason: "down".into(),
                })
            }
        }
        let sys = tiny();
        let mut clients = Clients::stubs(1, 8);
        clients.inpainter = Box::new(Broken);
        let img = RgbImage::filled(20, 10, [0.5, 0.5, 0.5]);
        let err = edit_pipeline(&sys, &img, BBox::new(1, 1, 15, 9).unwrap(), "Hi", &clients, &opts())
            .err()
            .unwrap();
        assert_eq!(err.stage(), Some("inpaint"));
        let bad = edit_pipeline(&sys, &img, BBox::new(1, 1, 25, 9).unwrap(), "Hi", &clients, &opts());
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn edit_has_one_box_per_glyph() {
        let sys = tiny();
        let clients = Clients::stubs(1, 8);
        let img = RgbImage::filled(40, 16, [0.2, 0.4, 0.6]);
        let out = edit_pipeline(&sys, &img, BBox::new(4, 2, 36, 14).unwrap(), "Abc", &clients, &opts()).unwrap();
        assert_eq!(out.report.glyphs[0].len(), 3);
        assert_eq!((out.image.width(), out.image.height()), (40, 16));
        assert_eq!(out.report.calls.len(), 2);
        assert!(out.report.calls.iter().all(|c| c.ok));
    }
}
