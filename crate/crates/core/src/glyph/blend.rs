use super::RgbaGlyph;
use crate::error::{invalid, Result};
use crate::image::RgbImage;

/// Flatten a glyph onto a uniform gray level: `a * rgb + (1 - a) * background`.
pub fn blend_alpha(glyph: &RgbaGlyph, background: f32) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&background) {
        return Err(invalid(format!("background {background} outside [0,1]")));
    }
    let px = &glyph.pixels;
    let mut data = Vec::with_capacity(px.width() * px.height() * 3);
    for p in px.data().chunks_exact(4) {
        let a = p[3];
        for c in &p[..3] {
            data.push(a * c + (1.0 - a) * background);
        }
    }
    RgbImage::from_vec(px.width(), px.height(), data)
}

/// Premultiplied colour `a * rgb` (black background).
pub fn blend_alpha_strict(glyph: &RgbaGlyph) -> RgbImage {
    blend_alpha(glyph, 0.0).expect("zero background is in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RgbaImage;

    fn glyph(px: [f32; 4]) -> RgbaGlyph {
        RgbaGlyph {
            pixels: RgbaImage::filled(4, 4, px),
            char_id: 0,
            style_id: 0,
        }
    }

    #[test]
    fn opaque_keeps_rgb() {
        let out = blend_alpha(&glyph([0.3, 0.6, 0.9, 1.0]), 0.5).unwrap();
        assert!(out.data().chunks_exact(3).all(|p| p == [0.3, 0.6, 0.9]));
    }

    #[test]
    fn transparent_gives_background() {
        let out = blend_alpha(&glyph([0.3, 0.6, 0.9, 0.0]), 0.5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn strict_premultiplies() {
        let out = blend_alpha_strict(&glyph([0.8, 0.2, 0.0, 0.5]));
        let p = out.pixel(1, 2);
        for (a, b) in p.iter().zip([0.4, 0.1, 0.0]) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn strict_blend_recovers_premultiplied_rgb() {
        let s = crate::glyph::GlyphSynth::procedural(16).unwrap();
        let g = s
            .render(4, &crate::glyph::StyleSpec::procedural(3).unwrap())
            .unwrap();
        let out = blend_alpha_strict(&g);
        for (o, p) in out.data().chunks_exact(3).zip(g.pixels.data().chunks_exact(4)) {
            for c in 0..3 {
                assert_eq!(o[c], p[3] * p[c]);
            }
        }
    }

    #[test]
    fn background_out_of_range() {
        assert!(blend_alpha(&glyph([0.0; 4]), 1.5).is_err());
        assert!(blend_alpha(&glyph([0.0; 4]), -0.1).is_err());
    }
}
