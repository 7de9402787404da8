//! Interleaved float images (row-major, channels last, values nominally in [0,1]).

use std::io::Cursor;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::layout::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct Image<const C: usize> {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

pub type RgbImage = Image<3>;
pub type RgbaImage = Image<4>;

impl<const C: usize> Image<C> {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; C])
    }

    pub fn filled(width: usize, height: usize, value: [f32; C]) -> Self {
        let mut data = Vec::with_capacity(width * height * C);
        for _ in 0..width * height {
            data.extend_from_slice(&value);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * C {
            return Err(invalid(format!(
                "buffer of {} values does not match {width}x{height}x{C}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        C
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * C
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; C] {
        let o = self.offset(x, y);
        let mut p = [0.0; C];
        p.copy_from_slice(&self.data[o..o + C]);
        p
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, value: [f32; C]) {
        let o = self.offset(x, y);
        self.data[o..o + C].copy_from_slice(&value);
    }

    pub fn map_in_place(&mut self, f: impl Fn(f32) -> f32) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn clamp01(&mut self) {
        self.map_in_place(|v| v.clamp(0.0, 1.0));
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Copy of the region `bbox`, which must lie inside the image.
    pub fn crop(&self, bbox: &BBox) -> Result<Self> {
        if !bbox.within(self.width as i64, self.height as i64) {
            return Err(invalid(format!(
                "crop {bbox:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        let (w, h) = (bbox.width() as usize, bbox.height() as usize);
        let mut out = Self::new(w, h);
        for y in 0..h {
            let src = self.offset(bbox.left as usize, bbox.top as usize + y);
            let dst = out.offset(0, y);
            out.data[dst..dst + w * C].copy_from_slice(&self.data[src..src + w * C]);
        }
        Ok(out)
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Self::new(width, height);
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let (a, b) = (self.pixel(x0, y0), self.pixel(x1, y0));
                let (c, d) = (self.pixel(x0, y1), self.pixel(x1, y1));
                let mut p = [0.0; C];
                for ch in 0..C {
                    let top = a[ch] + (b[ch] - a[ch]) * wx;
                    let bot = c[ch] + (d[ch] - c[ch]) * wx;
                    p[ch] = top + (bot - top) * wy;
                }
                out.set_pixel(x, y, p);
            }
        }
        out
    }

    fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

impl RgbImage {
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .ok_or_else(|| invalid("image buffer size mismatch"))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
        Self::from_vec(w as usize, h as usize, data)
    }
}

impl RgbaImage {
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let buf = image::RgbaImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .ok_or_else(|| invalid("image buffer size mismatch"))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn alpha(&self, x: usize, y: usize) -> f32 {
        self.data[self.offset(x, y) + 3]
    }

    /// Paste `src` into this layer at (left, top) with bilinear scaling to
    /// `bbox`, replacing the covered pixels.
    pub fn paste_scaled(&mut self, src: &RgbaImage, bbox: &BBox) -> Result<()> {
        if !bbox.within(self.width as i64, self.height as i64) {
            return Err(invalid(format!(
                "paste target {bbox:?} outside {}x{} layer",
                self.width, self.height
            )));
        }
        let scaled = src.resize(bbox.width() as usize, bbox.height() as usize);
        for y in 0..scaled.height {
            for x in 0..scaled.width {
                self.set_pixel(
                    bbox.left as usize + x,
                    bbox.top as usize + y,
                    scaled.pixel(x, y),
                );
            }
        }
        Ok(())
    }
}

/// Standard "over" compositing of an RGBA layer onto an opaque background.
/// Pixels whose foreground alpha is exactly zero are left bitwise untouched.
pub fn alpha_over(background: &RgbImage, foreground: &RgbaImage) -> Result<RgbImage> {
    if background.width != foreground.width || background.height != foreground.height {
        return Err(invalid(format!(
            "layer {}x{} does not match background {}x{}",
            foreground.width, foreground.height, background.width, background.height
        )));
    }
    let mut out = background.clone();
    for (dst, src) in out
        .data
        .chunks_exact_mut(3)
        .zip(foreground.data.chunks_exact(4))
    {
        let a = src[3];
        if a == 0.0 {
            continue;
        }
        for c in 0..3 {
            dst[c] = a * src[c] + (1.0 - a) * dst[c];
        }
    }
    Ok(out)
}

/// Merge two RGBA layers (`top` over `bottom`) into one straight-alpha layer.
pub fn merge_layers(bottom: &RgbaImage, top: &RgbaImage) -> Result<RgbaImage> {
    if bottom.width != top.width || bottom.height != top.height {
        return Err(invalid("layer sizes differ"));
    }
    let mut out = bottom.clone();
    for (dst, src) in out.data.chunks_exact_mut(4).zip(top.data.chunks_exact(4)) {
        let (at, ab) = (src[3], dst[3]);
        let a = at + ab * (1.0 - at);
        if a <= 0.0 {
            dst.copy_from_slice(&[0.0; 4]);
            continue;
        }
        for c in 0..3 {
            dst[c] = (src[c] * at + dst[c] * ab * (1.0 - at)) / a;
        }
        dst[3] = a;
    }
    Ok(out)
}
