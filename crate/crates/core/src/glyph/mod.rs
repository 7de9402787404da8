//! Synthetic stylized glyphs.
//!
//! Glyph shapes are procedural stroke sets on a 3x3 anchor lattice; styles
//! control family (cap/serif/curvature treatment), stroke width, slant, fill
//! colour and an optional procedural texture. Everything is a pure function
//! of its arguments and seeds.

mod blend;
mod charset;
mod perturb;
mod raster;
pub mod shard;
mod triplet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::RgbaImage;
use crate::rng::{self, Rng};

pub use blend::{blend_alpha, blend_alpha_strict};
pub use charset::{CharacterSet, GlyphShape, Stroke};
pub use perturb::{perturb_style_refs, PerturbationConfig};
pub use raster::{GlyphRasterizer, ProceduralRasterizer};
pub use triplet::GlyphTriplet;

pub const DEFAULT_RESOLUTION: usize = 32;
pub const MIN_RESOLUTION: usize = 8;
/// Style id reserved for the plain black canonical style of content references.
pub const NEUTRAL_STYLE_ID: u32 = 0;

/// A four-channel glyph image. RGB carries the (possibly textured) fill over
/// the whole plane; alpha carries stroke coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbaGlyph {
    pub pixels: RgbaImage,
    pub char_id: u32,
    pub style_id: u32,
}

impl RgbaGlyph {
    pub fn resolution(&self) -> usize {
        self.pixels.width()
    }

    /// Number of pixels whose alpha exceeds `threshold`.
    pub fn alpha_area(&self, threshold: f32) -> usize {
        self.pixels
            .data()
            .chunks_exact(4)
            .filter(|p| p[3] > threshold)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FontFamily {
    /// Round caps; the canonical family used for content references.
    Round,
    /// Square caps (Chebyshev stroke profile).
    Square,
    /// Round strokes with perpendicular serifs at every endpoint.
    Serif,
    /// Strokes bent into quadratic arcs.
    Curvy,
}

impl FontFamily {
    pub const ALL: [FontFamily; 4] = [
        FontFamily::Round,
        FontFamily::Square,
        FontFamily::Serif,
        FontFamily::Curvy,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub id: u32,
    pub family: FontFamily,
    /// Stroke width as a fraction of the glyph side.
    pub stroke_width: f32,
    /// Shear angle in radians.
    pub slant: f32,
    pub fill_color: [f32; 3],
    pub texture_id: Option<u32>,
}

pub const NUM_TEXTURES: u32 = 4;

/// Fill colours kept well away from mid-gray so glyphs stay visible when
/// blended onto the default gray background.
const PALETTE: [[f32; 3]; 12] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.20, 0.85],
    [0.05, 0.60, 0.15],
    [0.95, 0.75, 0.05],
    [0.60, 0.05, 0.70],
    [0.00, 0.70, 0.75],
    [0.95, 0.45, 0.00],
    [0.05, 0.05, 0.05],
    [0.95, 0.95, 0.95],
    [0.90, 0.20, 0.60],
    [0.15, 0.15, 0.45],
    [0.55, 0.90, 0.10],
];

impl StyleSpec {
    pub const DEFAULT_STROKE_WIDTH: f32 = 0.09;

    /// Plain black canonical-family style used for content references.
    pub fn neutral() -> Self {
        Self {
            id: NEUTRAL_STYLE_ID,
            family: FontFamily::Round,
            stroke_width: Self::DEFAULT_STROKE_WIDTH,
            slant: 0.0,
            fill_color: [0.0, 0.0, 0.0],
            texture_id: None,
        }
    }

    /// Deterministic style drawn from the procedural style space.
    /// `id` must be non-zero (zero is the neutral style).
    pub fn procedural(id: u32) -> Result<Self> {
        if id == NEUTRAL_STYLE_ID {
            return Err(invalid("style id 0 is reserved for the neutral style"));
        }
        let mut rng = rng::derived(u64::from(id), 0x57_71_1E);
        Ok(Self::sample(id, &mut rng, true))
    }

    /// Like [`StyleSpec::procedural`] but never textured.
    pub fn procedural_flat(id: u32) -> Result<Self> {
        let mut s = Self::procedural(id)?;
        s.texture_id = None;
        Ok(s)
    }

    fn sample(id: u32, rng: &mut Rng, allow_texture: bool) -> Self {
        use rand::Rng as _;
        let family = FontFamily::ALL[(id as usize - 1) % FontFamily::ALL.len()];
        let texture_id = if allow_texture && rng.random_bool(0.4) {
            Some(rng.random_range(0..NUM_TEXTURES))
        } else {
            None
        };
        Self {
            id,
            family,
            stroke_width: rng.random_range(0.06..0.15),
            slant: rng.random_range(-0.3..0.3),
            fill_color: PALETTE[rng.random_range(0..PALETTE.len())],
            texture_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stroke_width > 0.0) || !self.stroke_width.is_finite() {
            return Err(invalid(format!("stroke_width {} must be > 0", self.stroke_width)));
        }
        if !(-0.5..=0.5).contains(&self.slant) {
            return Err(invalid(format!("slant {} outside [-0.5, 0.5]", self.slant)));
        }
        if self.fill_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid("fill_color components must lie in [0,1]"));
        }
        if let Some(t) = self.texture_id {
            if t >= NUM_TEXTURES {
                return Err(invalid(format!("unknown texture id {t}")));
            }
        }
        Ok(())
    }
}

/// Bundles a character set, a rasterizer and the working resolution.
pub struct GlyphSynth<R: GlyphRasterizer = ProceduralRasterizer> {
    rasterizer: R,
    resolution: usize,
}

impl GlyphSynth<ProceduralRasterizer> {
    pub fn procedural(resolution: usize) -> Result<Self> {
        Self::new(ProceduralRasterizer::new(CharacterSet::procedural()), resolution)
    }
}

impl<R: GlyphRasterizer> GlyphSynth<R> {
    pub fn new(rasterizer: R, resolution: usize) -> Result<Self> {
        if resolution < MIN_RESOLUTION {
            return Err(invalid(format!(
                "resolution {resolution} below minimum {MIN_RESOLUTION}"
            )));
        }
        Ok(Self {
            rasterizer,
            resolution,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn charset(&self) -> &CharacterSet {
        self.rasterizer.charset()
    }

    pub fn render(&self, char_id: u32, style: &StyleSpec) -> Result<RgbaGlyph> {
        render_glyph(&self.rasterizer, char_id, style, self.resolution)
    }

    pub fn compose_triplet(
        &self,
        content_chars: &[u32],
        style: &StyleSpec,
        m: usize,
        seed: u64,
    ) -> Result<GlyphTriplet> {
        triplet::compose_triplet(&self.rasterizer, content_chars, style, m, seed, self.resolution)
    }
}

/// Rasterize one glyph: coverage from the rasterizer becomes alpha, the fill
/// colour (times the optional texture) fills RGB.
pub fn render_glyph<R: GlyphRasterizer + ?Sized>(
    rasterizer: &R,
    char_id: u32,
    style: &StyleSpec,
    resolution: usize,
) -> Result<RgbaGlyph> {
    if resolution < MIN_RESOLUTION {
        return Err(invalid(format!(
            "resolution {resolution} below minimum {MIN_RESOLUTION}"
        )));
    }
    style.validate()?;
    let coverage = rasterizer.coverage(char_id, style, resolution)?;
    let mut pixels = RgbaImage::new(resolution, resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            let k = texture_factor(style.texture_id, x, y, resolution);
            let [r, g, b] = style.fill_color;
            pixels.set_pixel(
                x,
                y,
                [
                    (r * k).clamp(0.0, 1.0),
                    (g * k).clamp(0.0, 1.0),
                    (b * k).clamp(0.0, 1.0),
                    coverage[y * resolution + x],
                ],
            );
        }
    }
    Ok(RgbaGlyph {
        pixels,
        char_id,
        style_id: style.id,
    })
}

fn texture_factor(texture: Option<u32>, x: usize, y: usize, res: usize) -> f32 {
    let (u, v) = (
        (x as f32 + 0.5) / res as f32,
        (y as f32 + 0.5) / res as f32,
    );
    match texture {
        None => 1.0,
        Some(0) => 0.65 + 0.35 * u,
        Some(1) => {
            if (x / 3) % 2 == 0 {
                1.0
            } else {
                0.7
            }
        }
        Some(2) => {
            if ((x / 4) + (y / 4)) % 2 == 0 {
                1.0
            } else {
                0.75
            }
        }
        Some(_) => 0.6 + 0.4 * (u + v) * 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth() -> GlyphSynth {
        GlyphSynth::procedural(32).unwrap()
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = synth();
        let style = StyleSpec::neutral();
        assert_eq!(s.render(0, &style).unwrap(), s.render(0, &style).unwrap());
    }

    #[test]
    fn wider_strokes_cover_more_pixels() {
        let s = synth();
        let thin = StyleSpec::neutral();
        let mut thick = thin.clone();
        thick.stroke_width *= 2.0;
        let a = s.render(0, &thin).unwrap().alpha_area(0.5);
        let b = s.render(0, &thick).unwrap().alpha_area(0.5);
        assert!(b > a, "thick {b} <= thin {a}");
    }

    #[test]
    fn fill_colour_is_forced_under_strokes() {
        let s = synth();
        let mut style = StyleSpec::neutral();
        style.fill_color = [1.0, 0.0, 0.0];
        let g = s.render(0, &style).unwrap();
        let mut seen = 0;
        for p in g.pixels.data().chunks_exact(4) {
            if p[3] > 0.9 {
                seen += 1;
                assert!((p[0] - 1.0).abs() < 0.05 && p[1] < 0.05 && p[2] < 0.05);
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn alpha_vanishes_away_from_strokes() {
        let s = synth();
        let g = s.render(5, &StyleSpec::neutral()).unwrap();
        // corners are outside the anchor lattice margin
        for (x, y) in [(0, 0), (31, 0), (0, 31), (31, 31)] {
            assert_eq!(g.pixels.alpha(x, y), 0.0);
        }
        assert!(g.pixels.in_unit_range());
    }

    #[test]
    fn argument_errors() {
        let s = synth();
        assert!(matches!(
            s.render(10_000, &StyleSpec::neutral()),
            Err(crate::Error::Domain(_))
        ));
        assert!(GlyphSynth::procedural(4).is_err());
        let mut bad = StyleSpec::neutral();
        bad.slant = 0.9;
        assert!(s.render(0, &bad).is_err());
    }

    #[test]
    fn procedural_styles_are_valid_and_stable() {
        for id in 1..200 {
            let a = StyleSpec::procedural(id).unwrap();
            a.validate().unwrap();
            assert_eq!(a, StyleSpec::procedural(id).unwrap());
        }
        assert!(StyleSpec::procedural(0).is_err());
    }
}
