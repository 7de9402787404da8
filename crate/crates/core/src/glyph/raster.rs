use super::{CharacterSet, FontFamily, StyleSpec, Stroke};
use crate::error::Result;

/// Produces a per-pixel stroke coverage map in [0,1] (row-major, side
/// `resolution`). Implement this to plug in a real font backend.
pub trait GlyphRasterizer: Send + Sync {
    fn charset(&self) -> &CharacterSet;
    fn coverage(&self, char_id: u32, style: &StyleSpec, resolution: usize) -> Result<Vec<f32>>;
}

/// Distance-field rasterizer over the procedural stroke sets.
#[derive(Debug, Clone)]
pub struct ProceduralRasterizer {
    charset: CharacterSet,
}

impl ProceduralRasterizer {
    pub fn new(charset: CharacterSet) -> Self {
        Self { charset }
    }
}

type Segment = ([f32; 2], [f32; 2]);

fn seg_dist(p: [f32; 2], (a, b): Segment, chebyshev: bool) -> f32 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (p[0] - (a[0] + t * dx), p[1] - (a[1] + t * dy));
    if chebyshev {
        qx.abs().max(qy.abs())
    } else {
        (qx * qx + qy * qy).sqrt()
    }
}

/// Expand family-specific stroke geometry into plain segments.
fn family_segments(strokes: &[Stroke], family: FontFamily, width: f32) -> Vec<Segment> {
    let mut out = Vec::new();
    for s in strokes {
        match family {
            FontFamily::Round | FontFamily::Square => out.push((s.from, s.to)),
            FontFamily::Serif => {
                out.push((s.from, s.to));
                let (dx, dy) = (s.to[0] - s.from[0], s.to[1] - s.from[1]);
                let len = (dx * dx + dy * dy).sqrt().max(1e-6);
                let (nx, ny) = (-dy / len * 1.3 * width, dx / len * 1.3 * width);
                for e in [s.from, s.to] {
                    out.push(([e[0] - nx, e[1] - ny], [e[0] + nx, e[1] + ny]));
                }
            }
            FontFamily::Curvy => {
                let (dx, dy) = (s.to[0] - s.from[0], s.to[1] - s.from[1]);
                let mid = [(s.from[0] + s.to[0]) * 0.5, (s.from[1] + s.to[1]) * 0.5];
                let ctrl = [mid[0] - dy * 0.25, mid[1] + dx * 0.25];
                let mut prev = s.from;
                const PIECES: usize = 8;
                for k in 1..=PIECES {
                    let t = k as f32 / PIECES as f32;
                    let u = 1.0 - t;
                    let p = [
                        u * u * s.from[0] + 2.0 * u * t * ctrl[0] + t * t * s.to[0],
                        u * u * s.from[1] + 2.0 * u * t * ctrl[1] + t * t * s.to[1],
                    ];
                    out.push((prev, p));
                    prev = p;
                }
            }
        }
    }
    out
}

impl GlyphRasterizer for ProceduralRasterizer {
    fn charset(&self) -> &CharacterSet {
        &self.charset
    }

    fn coverage(&self, char_id: u32, style: &StyleSpec, resolution: usize) -> Result<Vec<f32>> {
        let shape = self.charset.shape(char_id)?;
        let segments = family_segments(&shape.strokes, style.family, style.stroke_width);
        let chebyshev = style.family == FontFamily::Square;
        let half = style.stroke_width * 0.5;
        let shear = style.slant.tan();
        let res = resolution as f32;
        let mut out = vec![0.0f32; resolution * resolution];
        for y in 0..resolution {
            for x in 0..resolution {
                let py = (y as f32 + 0.5) / res;
                // inverse shear around the vertical centre: positive slant leans right
                let px = (x as f32 + 0.5) / res + (py - 0.5) * shear;
                let d = segments
                    .iter()
                    .map(|s| seg_dist([px, py], *s, chebyshev))
                    .fold(f32::INFINITY, f32::min);
                // one-pixel antialiasing ramp across the stroke edge
                out[y * resolution + x] = ((half - d) * res + 0.5).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}
