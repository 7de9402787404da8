//! Training items, batching and the toy overfit set.

use std::collections::BTreeMap;

use candle_core::Tensor;
use glyphdit_core::filter::StyleFeature;
use glyphdit_core::glyph::{GlyphSynth, GlyphTriplet, StyleSpec};
use glyphdit_core::rng::Rng;
use rand::Rng as _;

use crate::error::{config, Result};
use crate::system::GlyphSystem;

/// One triplet as tensors: `content` and `gt` are `(n, 4, H, W)`, `style`
/// is `(m, 4, H, W)`, `latents` is `(n, c, s, s)` once cached.
#[derive(Clone)]
pub struct TrainItem {
    pub content: Tensor,
    pub style: Tensor,
    pub gt: Tensor,
    pub latents: Option<Tensor>,
    pub style_id: u32,
    pub char_ids: Vec<u32>,
}

impl TrainItem {
    pub fn n(&self) -> usize {
        self.char_ids.len()
    }

    pub fn m(&self) -> usize {
        self.style.dim(0).unwrap_or(0)
    }
}

/// A batch of items sharing `(n, m)`.
pub struct Batch {
    pub indices: Vec<usize>,
    pub n: usize,
    /// `(B * n, 4, H, W)`
    pub content: Tensor,
    /// `(B, m, 4, H, W)`
    pub style: Tensor,
    /// `(B, n, 4, H, W)`
    pub gt: Tensor,
    /// `(B, n, c, s, s)`
    pub latents: Tensor,
}

pub struct Dataset {
    pub items: Vec<TrainItem>,
    groups: BTreeMap<(usize, usize), Vec<usize>>,
}

impl Dataset {
    pub fn from_triplets(sys: &GlyphSystem, triplets: &[GlyphTriplet]) -> Result<Self> {
        if triplets.is_empty() {
            return Err(config("dataset is empty"));
        }
        let items = triplets
            .iter()
            .map(|t| {
                t.validate()?;
                Ok(TrainItem {
                    content: sys.glyph_tensor(&t.content_refs)?,
                    style: sys.glyph_tensor(&t.style_refs)?,
                    gt: sys.glyph_tensor(&t.ground_truth)?,
                    latents: None,
                    style_id: t.style_id(),
                    char_ids: t.char_ids(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_items(items))
    }

    pub fn from_items(items: Vec<TrainItem>) -> Self {
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            groups.entry((it.n(), it.m())).or_default().push(i);
        }
        Self { items, groups }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self::from_items(indices.iter().map(|&i| self.items[i].clone()).collect())
    }

    /// Encode every ground truth through the (frozen) latent encoder.
    pub fn cache_latents(&mut self, sys: &GlyphSystem) -> Result<()> {
        for it in &mut self.items {
            it.latents = Some(sys.encode_latents(&it.gt)?);
        }
        Ok(())
    }

    pub fn has_latents(&self) -> bool {
        self.items.iter().all(|i| i.latents.is_some())
    }

    /// Stack the given items; they must share `(n, m)` and have cached latents.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let first = &self.items[*indices.first().ok_or_else(|| config("empty batch"))?];
        let (n, m) = (first.n(), first.m());
        let mut content = Vec::new();
        let mut style = Vec::new();
        let mut gt = Vec::new();
        let mut lat = Vec::new();
        for &i in indices {
            let it = &self.items[i];
            if (it.n(), it.m()) != (n, m) {
                return Err(config("batch items differ in glyph or reference count"));
            }
            content.push(it.content.clone());
            style.push(it.style.unsqueeze(0)?);
            gt.push(it.gt.unsqueeze(0)?);
            lat.push(
                it.latents
                    .as_ref()
                    .ok_or_else(|| config("latents not cached"))?
                    .unsqueeze(0)?,
            );
        }
        Ok(Batch {
            indices: indices.to_vec(),
            n,
            content: Tensor::cat(&content, 0)?,
            style: Tensor::cat(&style, 0)?,
            gt: Tensor::cat(&gt, 0)?,
            latents: Tensor::cat(&lat, 0)?,
        })
    }

    /// Draw a group with probability proportional to its size, then `size`
    /// items from it with replacement.
    pub fn sample_indices(&self, rng: &mut Rng, size: usize) -> Vec<usize> {
        let anchor = rng.random_range(0..self.items.len());
        let key = (self.items[anchor].n(), self.items[anchor].m());
        let group = &self.groups[&key];
        (0..size).map(|_| group[rng.random_range(0..group.len())]).collect()
    }

    pub fn sample_batch(&self, rng: &mut Rng, size: usize) -> Result<Batch> {
        self.batch(&self.sample_indices(rng, size))
    }
}

/// Style-encoder features of each triplet's references: tokens averaged over
/// `q`, scaled to unit length.
pub fn style_features(sys: &GlyphSystem, triplets: &[GlyphTriplet]) -> Result<Vec<StyleFeature>> {
    triplets
        .iter()
        .map(|t| {
            let refs = sys.glyph_tensor(&t.style_refs)?.unsqueeze(0)?;
            let v: Vec<f64> = sys
                .style
                .forward(&refs)?
                .mean(1)?
                .flatten_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_vec1()?;
            Ok(StyleFeature::normalized(v)?)
        })
        .collect()
}

/// Every `(style, character)` pair of `styles` flat procedural styles and
/// the first `chars` characters, one glyph per item. The `m` style references
/// are other characters of the same style, fixed per item.
pub fn toy_triplets(resolution: usize, styles: u32, chars: u32, m: usize) -> Result<Vec<GlyphTriplet>> {
    let synth = GlyphSynth::procedural(resolution)?;
    let total = synth.charset().len() as u32;
    if chars == 0 || chars > total || styles == 0 {
        return Err(config(format!("toy set needs 1..={total} characters and >= 1 style")));
    }
    let neutral = StyleSpec::neutral();
    let mut out = Vec::new();
    for s in 1..=styles {
        let style = StyleSpec::procedural_flat(s)?;
        for c in 0..chars {
            let refs = (1..=m as u32)
                .map(|k| synth.render((c + 7 * k) % total, &style))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            out.push(GlyphTriplet {
                content_refs: vec![synth.render(c, &neutral)?],
                style_refs: refs,
                ground_truth: vec![synth.render(c, &style)?],
            });
        }
    }
    Ok(out)
}
