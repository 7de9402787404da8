use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{render_glyph, GlyphRasterizer, RgbaGlyph, StyleSpec};
use crate::error::{invalid, Result};
use crate::rng;

/// Content references, style references and ground truth for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphTriplet {
    pub content_refs: Vec<RgbaGlyph>,
    pub style_refs: Vec<RgbaGlyph>,
    pub ground_truth: Vec<RgbaGlyph>,
}

impl GlyphTriplet {
    pub fn style_id(&self) -> u32 {
        self.ground_truth[0].style_id
    }

    pub fn char_ids(&self) -> Vec<u32> {
        self.content_refs.iter().map(|g| g.char_id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.content_refs.is_empty() || self.style_refs.is_empty() {
            return Err(invalid("triplet needs n >= 1 content and m >= 1 style references"));
        }
        if self.ground_truth.len() != self.content_refs.len() {
            return Err(invalid("ground truth length differs from content references"));
        }
        for (gt, c) in self.ground_truth.iter().zip(&self.content_refs) {
            if gt.char_id != c.char_id {
                return Err(invalid("ground truth char ids do not follow content references"));
            }
        }
        let sid = self.style_id();
        if self
            .ground_truth
            .iter()
            .chain(&self.style_refs)
            .any(|g| g.style_id != sid)
        {
            return Err(invalid("ground truth and style references disagree on style id"));
        }
        Ok(())
    }
}

pub(super) fn compose_triplet<R: GlyphRasterizer + ?Sized>(
    rasterizer: &R,
    content_chars: &[u32],
    style: &StyleSpec,
    m: usize,
    seed: u64,
    resolution: usize,
) -> Result<GlyphTriplet> {
    if content_chars.is_empty() {
        return Err(invalid("content_chars must be non-empty"));
    }
    if m == 0 {
        return Err(invalid("m must be >= 1"));
    }
    let neutral = StyleSpec::neutral();
    let content_refs = content_chars
        .iter()
        .map(|&c| render_glyph(rasterizer, c, &neutral, resolution))
        .collect::<Result<Vec<_>>>()?;
    let ground_truth = content_chars
        .iter()
        .map(|&c| render_glyph(rasterizer, c, style, resolution))
        .collect::<Result<Vec<_>>>()?;

    let total = rasterizer.charset().len() as u32;
    let mut pool: Vec<u32> = (0..total).filter(|c| !content_chars.contains(c)).collect();
    let mut r = rng::seeded(seed);
    let style_chars: Vec<u32> = if pool.len() >= m {
        pool.shuffle(&mut r);
        pool.truncate(m);
        pool
    } else if !pool.is_empty() {
        (0..m).map(|_| pool[r.random_range(0..pool.len())]).collect()
    } else {
        // character set too small to stay disjoint
        (0..m).map(|_| r.random_range(0..total)).collect()
    };
    let style_refs = style_chars
        .iter()
        .map(|&c| render_glyph(rasterizer, c, style, resolution))
        .collect::<Result<Vec<_>>>()?;

    Ok(GlyphTriplet {
        content_refs,
        style_refs,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use crate::glyph::{GlyphSynth, StyleSpec, NEUTRAL_STYLE_ID};

    #[test]
    fn structure_and_style_ids() {
        let s = GlyphSynth::procedural(16).unwrap();
        let style = StyleSpec::procedural(5).unwrap();
        let t = s.compose_triplet(&[3, 7], &style, 2, 0).unwrap();
        t.validate().unwrap();
        assert_eq!((t.content_refs.len(), t.style_refs.len()), (2, 2));
        assert!(t.ground_truth.iter().all(|g| g.style_id == 5));
        assert!(t.content_refs.iter().all(|g| g.style_id == NEUTRAL_STYLE_ID));
        assert_eq!(t, s.compose_triplet(&[3, 7], &style, 2, 0).unwrap());
    }

    #[test]
    fn style_refs_are_disjoint_from_content() {
        let s = GlyphSynth::procedural(16).unwrap();
        let style = StyleSpec::procedural(2).unwrap();
        for seed in 0..20 {
            let t = s.compose_triplet(&[3], &style, 4, seed).unwrap();
            assert!(t.style_refs.iter().all(|g| g.char_id != 3));
        }
    }

    #[test]
    fn ground_truth_rerenders_exactly() {
        let s = GlyphSynth::procedural(16).unwrap();
        let style = StyleSpec::procedural(9).unwrap();
        let t = s.compose_triplet(&[1, 40, 63], &style, 3, 11).unwrap();
        for (c, gt) in t.content_refs.iter().zip(&t.ground_truth) {
            assert_eq!(&s.render(c.char_id, &style).unwrap(), gt);
        }
    }

    #[test]
    fn empty_content_is_rejected() {
        let s = GlyphSynth::procedural(16).unwrap();
        assert!(s
            .compose_triplet(&[], &StyleSpec::neutral(), 1, 0)
            .is_err());
    }
}
