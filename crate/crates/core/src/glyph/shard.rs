//! On-disk dataset shards: one binary blob per glyph plus a JSON manifest.
//!
//! Blob layout (little endian): `b"GLYF"`, version, height, width, channels,
//! char id, style id (all `u32`), then `height * width * channels` `f32`s.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{perturb_style_refs, GlyphSynth, GlyphTriplet, PerturbationConfig, RgbaGlyph, StyleSpec};
use crate::error::{invalid, Error, Result};
use crate::image::RgbaImage;
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;
const BLOB_MAGIC: &[u8; 4] = b"GLYF";
const BLOB_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    /// Heavier reference degradation, used for the second Stage-1 phase.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub char_ids: Vec<u32>,
    pub style_id: u32,
    pub content_paths: Vec<String>,
    pub style_paths: Vec<String>,
    pub gt_paths: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub resolution: usize,
    pub samples: Vec<SampleRecord>,
}

pub fn encode_blob(glyph: &RgbaGlyph) -> Vec<u8> {
    let px = &glyph.pixels;
    let mut out = Vec::with_capacity(HEADER_LEN + px.data().len() * 4);
    out.extend_from_slice(BLOB_MAGIC);
    for v in [
        BLOB_VERSION,
        px.height() as u32,
        px.width() as u32,
        4,
        glyph.char_id,
        glyph.style_id,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in px.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_blob(bytes: &[u8], path: &Path) -> Result<RgbaGlyph> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != BLOB_MAGIC {
        return Err(bad("missing glyph blob header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, h, w, c) = (word(0), word(1) as usize, word(2) as usize, word(3));
    if version != BLOB_VERSION {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            found: version,
            expected: BLOB_VERSION,
        });
    }
    if c != 4 {
        return Err(bad("glyph blobs must have 4 channels"));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != h * w * 4 * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(RgbaGlyph {
        pixels: RgbaImage::from_vec(w, h, data)?,
        char_id: word(4),
        style_id: word(5),
    })
}

pub fn write_blob(path: &Path, glyph: &RgbaGlyph) -> Result<()> {
    fs::write(path, encode_blob(glyph))?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<RgbaGlyph> {
    decode_blob(&fs::read(path)?, path)
}

/// Write triplets as a shard under `dir` (created if missing).
pub fn write_shard(
    dir: &Path,
    resolution: usize,
    samples: &[(GlyphTriplet, Split)],
) -> Result<Manifest> {
    fs::create_dir_all(dir.join("blobs"))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, (t, split)) in samples.iter().enumerate() {
        t.validate()?;
        let id = format!("s{i:06}");
        let write_group = |tag: &str, glyphs: &[RgbaGlyph]| -> Result<Vec<String>> {
            glyphs
                .iter()
                .enumerate()
                .map(|(j, g)| {
                    let rel = format!("blobs/{id}_{tag}{j}.bin");
                    write_blob(&dir.join(&rel), g)?;
                    Ok(rel)
                })
                .collect()
        };
        let content_paths = write_group("c", &t.content_refs)?;
        let style_paths = write_group("s", &t.style_refs)?;
        let gt_paths = write_group("g", &t.ground_truth)?;
        records.push(SampleRecord {
            id,
            char_ids: t.char_ids(),
            style_id: t.style_id(),
            content_paths,
            style_paths,
            gt_paths,
            split: *split,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        resolution,
        samples: records,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let value: serde_json::Value = serde_json::from_slice(&fs::read(&path)?)?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format {
            path: path.clone(),
            reason: "missing schema_version".into(),
        })? as u32;
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            path,
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

pub fn load_triplet(dir: &Path, record: &SampleRecord) -> Result<GlyphTriplet> {
    let load = |paths: &[String]| -> Result<Vec<RgbaGlyph>> {
        paths.iter().map(|p| read_blob(&dir.join(p))).collect()
    };
    let t = GlyphTriplet {
        content_refs: load(&record.content_paths)?,
        style_refs: load(&record.style_paths)?,
        ground_truth: load(&record.gt_paths)?,
    };
    t.validate()?;
    Ok(t)
}

/// Load every sample of a shard, optionally restricted to one split.
pub fn load_shard(dir: &Path, split: Option<Split>) -> Result<(Manifest, Vec<GlyphTriplet>)> {
    let manifest = read_manifest(dir)?;
    let triplets = manifest
        .samples
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| load_triplet(dir, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, triplets))
}

/// Parameters for procedural dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetConfig {
    pub count: usize,
    pub resolution: usize,
    pub seed: u64,
    pub num_styles: u32,
    pub max_glyphs: usize,
    pub style_refs: usize,
    pub val_fraction: f32,
    /// Fraction of samples written to the [`Split::Hard`] split.
    pub hard_fraction: f32,
    pub perturbation: PerturbationConfig,
    pub hard_perturbation: PerturbationConfig,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            count: 256,
            resolution: super::DEFAULT_RESOLUTION,
            seed: 0,
            num_styles: 32,
            max_glyphs: 3,
            style_refs: 2,
            val_fraction: 0.1,
            hard_fraction: 0.0,
            perturbation: PerturbationConfig::default(),
            hard_perturbation: PerturbationConfig {
                blur_sigma_range: [0.5, 1.5],
                noise_std_range: [0.03, 0.08],
                per_op_probability: 0.6,
                ..PerturbationConfig::default()
            },
        }
    }
}

/// Generate `config.count` triplets. Sample `i` depends only on
/// `(config, i)`, so generation can be sharded across workers.
pub fn generate_samples(
    synth: &GlyphSynth,
    config: &SynthDatasetConfig,
) -> Result<Vec<(GlyphTriplet, Split)>> {
    if config.num_styles == 0 || config.max_glyphs == 0 || config.style_refs == 0 {
        return Err(invalid("num_styles, max_glyphs and style_refs must be >= 1"));
    }
    (0..config.count).map(|i| generate_sample(synth, config, i)).collect()
}

pub fn generate_sample(
    synth: &GlyphSynth,
    config: &SynthDatasetConfig,
    index: usize,
) -> Result<(GlyphTriplet, Split)> {
    let mut r = rng::derived(config.seed, index as u64);
    let style = StyleSpec::procedural(r.random_range(1..=config.num_styles))?;
    let n = r.random_range(1..=config.max_glyphs);
    let total = synth.charset().len() as u32;
    let chars: Vec<u32> = (0..n).map(|_| r.random_range(0..total)).collect();
    let u: f32 = r.random();
    let split = if u < config.hard_fraction {
        Split::Hard
    } else if u < config.hard_fraction + config.val_fraction {
        Split::Val
    } else {
        Split::Train
    };
    let mut t = synth.compose_triplet(&chars, &style, config.style_refs, r.random())?;
    let perturb = match split {
        Split::Hard => &config.hard_perturbation,
        _ => &config.perturbation,
    };
    t.style_refs = perturb_style_refs(&t.style_refs, perturb, r.random())?;
    Ok((t, split))
}

/// Paths of all blobs referenced by a manifest, relative to `dir`.
pub fn blob_paths(dir: &Path, manifest: &Manifest) -> Vec<PathBuf> {
    manifest
        .samples
        .iter()
        .flat_map(|r| r.content_paths.iter().chain(&r.style_paths).chain(&r.gt_paths))
        .map(|p| dir.join(p))
        .collect()
}
