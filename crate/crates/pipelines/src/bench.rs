//! The inference pipelines as a benchmark system.

use std::path::PathBuf;

use glyphdit_core::image::RgbImage;
use glyphdit_core::metrics::{BenchCase, BenchmarkSystem};

use crate::design::{edit_pipeline, generate_pipeline, Clients, DesignCase, PipelineOptions, TextItem};
use crate::error::Result;
use crate::system::GlyphSystem;

/// Cases with an edit region run the editing pipeline on the joined texts,
/// all others the generation pipeline with one item per text.
pub struct DesignBench<'a> {
    pub sys: &'a GlyphSystem,
    pub clients: &'a Clients,
    pub opts: PipelineOptions,
    /// Directory that background paths are relative to.
    pub base_dir: PathBuf,
    /// Fill colour when a case has no background image.
    pub fill: [f32; 3],
}

impl DesignBench<'_> {
    fn background(&self, case: &BenchCase) -> Result<RgbImage> {
        let i = &case.inputs;
        if let Some(p) = &i.background {
            return Ok(RgbImage::load_png(self.base_dir.join(p))?);
        }
        let (w, h) = i.canvas.unwrap_or((256, 256));
        if w <= 0 || h <= 0 {
            return Err(crate::error::config(format!("case {} has an empty canvas", case.id)));
        }
        Ok(RgbImage::filled(w as usize, h as usize, self.fill))
    }

    fn run(&self, case: &BenchCase) -> Result<RgbImage> {
        let background = self.background(case)?;
        let i = &case.inputs;
        let out = match i.edit_region {
            Some(region) => edit_pipeline(self.sys, &background, region, &i.texts.join(" "), self.clients, &self.opts)?,
            None => {
                let design = DesignCase {
                    background,
                    caption: i.caption.clone(),
                    items: i.texts.iter().map(TextItem::new).collect(),
                    style_region: None,
                };
                generate_pipeline(self.sys, &design, self.clients, &self.opts)?
            }
        };
        Ok(out.image)
    }
}

impl BenchmarkSystem for DesignBench<'_> {
    fn name(&self) -> &str {
        "glyph-design"
    }

    fn render(&self, case: &BenchCase) -> glyphdit_core::Result<RgbImage> {
        self.run(case)
            .map_err(|e| glyphdit_core::Error::Client(format!("case {}: {e}", case.id)))
    }
}
