mod settings;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};
use glyphdit_core::filter::{kmeans_fit, score_samples, write_report};
use glyphdit_core::glyph::shard::{generate_samples, load_shard, write_shard, Split};
use glyphdit_core::glyph::{GlyphSynth, GlyphTriplet, StyleSpec};
use glyphdit_core::image::RgbImage;
use glyphdit_core::layout::{total_reward_boxes, BBox, MllmPlanner, RewardWeights};
use glyphdit_core::metrics::{run_benchmark, CaseManifest, EmptyOcr, NoisyOcr, OcrClient, OracleOcr};
use glyphdit_pipelines::bench::DesignBench;
use glyphdit_pipelines::clients::{HttpConfig, HttpJson, RemoteLayoutLlm, RemoteMllm, RemoteOcr};
use glyphdit_pipelines::data::{style_features, Dataset};
use glyphdit_pipelines::design::{
    edit_pipeline, generate_pipeline, t2d_pipeline, Clients, DesignCase, DesignOutput, PipelineOptions, TextItem,
};
use glyphdit_pipelines::sampler::{generate_glyphs, StyleSource};
use glyphdit_pipelines::system::{tensor_to_glyphs, GlyphSystem};
use glyphdit_pipelines::train::{
    build_preference_pairs, scorer_by_name, train_stage1, train_stage2, train_stage3_dpo, train_stage3_sft,
    train_tvae, LossCurve,
};
use serde::Deserialize;

use settings::{Preset, Settings};

#[derive(Parser)]
#[command(name = "glyphdit", version, about = "Glyph-level text rendering: data, training, sampling and evaluation")]
struct Cli {
    /// TOML settings file layered over the preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Override one setting, e.g. `--set sampler.steps=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Print the effective settings as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a procedural glyph dataset shard.
    SynthData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Train the transparency autoencoder on a shard's ground-truth glyphs.
    TrainTvae(DataArgs),
    TrainStage1(StageArgs),
    TrainStage2(StageArgs),
    /// Adapter fine-tuning, then preference optimisation.
    TrainStage3 {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long, value_enum, default_value_t = Phase::Both)]
        phase: Phase,
    },
    /// Generate glyphs for a string in a procedural style.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        /// Procedural style id for the references.
        #[arg(long, default_value_t = 1)]
        style: u32,
        #[arg(long, default_value_t = 2)]
        refs: usize,
    },
    /// Replace the text inside a region of an image.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `left,top,right,bottom`
        #[arg(long, value_parser = parse_bbox)]
        region: BBox,
        #[arg(long)]
        text: String,
    },
    /// Lay out and render text onto a background.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        background: PathBuf,
        #[arg(long, default_value = "")]
        caption: String,
        /// One text line; repeatable.
        #[arg(long = "text", required = true)]
        texts: Vec<String>,
    },
    /// Text to design: background from a prompt, then generation.
    T2d {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long = "text", required = true)]
        texts: Vec<String>,
        /// `WIDTHxHEIGHT`
        #[arg(long, value_parser = parse_canvas, default_value = "512x512")]
        canvas: (usize, usize),
    },
    /// Score a predicted layout against ground truth; prints JSON.
    LayoutEval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// `lambda_ol,lambda_bl`
        #[arg(long)]
        weights: Option<String>,
    },
    /// Run a benchmark case manifest.
    Eval {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long, default_value = "glyph-design")]
        system: String,
        /// `oracle`, `empty`, `noisy` or an endpoint URL.
        #[arg(long, default_value = "oracle")]
        ocr: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Cluster style features and keep samples by distance to the centres.
    FilterData {
        #[arg(long)]
        data: PathBuf,
        /// Style encoder weights; a freshly seeded system otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Start from these weights instead of a fresh system.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Phase {
    Sft,
    Dpo,
    Both,
}

fn parse_bbox(s: &str) -> Result<BBox, String> {
    let v: Vec<i64> = s
        .split(',')
        .map(|p| p.trim().parse::<i64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [l, t, r, b] => BBox::new(l, t, r, b).map_err(|e| e.to_string()),
        _ => Err("expected left,top,right,bottom".into()),
    }
}

fn parse_canvas(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let w = w.parse::<usize>().map_err(|e| e.to_string())?;
    let h = h.parse::<usize>().map_err(|e| e.to_string())?;
    if w == 0 || h == 0 {
        return Err("canvas must be non-empty".into());
    }
    Ok((w, h))
}

struct Run {
    s: Settings,
    out: PathBuf,
}

impl Run {
    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }

    fn fresh_system(&self) -> Result<GlyphSystem> {
        Ok(GlyphSystem::new(&self.s.system, self.s.seed, DType::F32)?)
    }

    fn load(&self, path: &Path) -> Result<GlyphSystem> {
        GlyphSystem::load(path, DType::F32, |_| {}).with_context(|| format!("loading {}", path.display()))
    }

    fn save(&self, sys: &GlyphSystem, name: &str, curves: &[&LossCurve]) -> Result<()> {
        let dir = self.out_dir()?;
        let path = dir.join(name);
        sys.save(&path)?;
        for c in curves {
            c.save_csv(dir.join(format!("{}.csv", c.name)))?;
            if let Some(last) = c.last() {
                log::info!("{}: first {:.5} last {:.5}", c.name, c.first().unwrap_or(f64::NAN), last);
            }
        }
        println!("{}", path.display());
        Ok(())
    }

    fn http(&self, url: &str) -> Result<HttpJson> {
        Ok(HttpJson::new(HttpConfig {
            url: url.to_string(),
            ..self.s.clients.http.clone()
        })?)
    }

    fn clients(&self, sys: &GlyphSystem) -> Result<Clients> {
        let dim = sys.cfg.resampler.mllm_dim;
        let mut c = Clients::stubs(self.s.seed, dim);
        let cs = &self.s.clients;
        if cs.mllm != "stub" {
            c.mllm = Box::new(RemoteMllm {
                http: self.http(&cs.mllm)?,
                dim,
            });
        }
        if cs.layout != "stub" {
            c.planner = Box::new(MllmPlanner::new(RemoteLayoutLlm {
                http: self.http(&cs.layout)?,
            }));
        }
        Ok(c)
    }

    fn opts(&self) -> PipelineOptions {
        PipelineOptions {
            sampler: self.s.sampler.clone(),
            ..Default::default()
        }
    }

    fn finish(&self, out: &DesignOutput) -> Result<()> {
        let dir = self.out_dir()?;
        out.save(dir)?;
        println!("{}", dir.join("design.png").display());
        Ok(())
    }
}

fn train_triplets(dir: &Path) -> Result<Vec<GlyphTriplet>> {
    let (_, t) = load_shard(dir, Some(Split::Train)).with_context(|| format!("reading shard {}", dir.display()))?;
    if t.is_empty() {
        bail!("shard {} has no training samples", dir.display());
    }
    Ok(t)
}

#[derive(Deserialize)]
struct WireItem {
    #[allow(dead_code)]
    label: String,
    bbox: BBox,
}

fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let items: Vec<WireItem> = serde_json::from_slice(&std::fs::read(path)?)
        .with_context(|| format!("{}: expected [{{\"label\", \"bbox\"}}, ...]", path.display()))?;
    Ok(items.into_iter().map(|i| i.bbox).collect())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut s = Settings::layered(cli.preset, cli.config.as_deref(), &cli.sets)?;
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    if let Some(out) = &cli.out {
        s.out = out.display().to_string();
    }
    s.system.validate()?;
    if cli.print_config {
        print!("{}", toml::to_string(&s)?);
        return Ok(());
    }
    let run = Run {
        out: PathBuf::from(&s.out),
        s,
    };
    dispatch(&run, cli.cmd)
}

fn dispatch(run: &Run, cmd: Cmd) -> Result<()> {
    let s = &run.s;
    match cmd {
        Cmd::SynthData { count, resolution } => {
            let mut cfg = s.synth.clone();
            cfg.seed = s.seed;
            cfg.count = count.unwrap_or(cfg.count);
            cfg.resolution = resolution.unwrap_or(cfg.resolution);
            let synth = GlyphSynth::procedural(cfg.resolution)?;
            let samples = generate_samples(&synth, &cfg)?;
            let m = write_shard(run.out_dir()?, cfg.resolution, &samples)?;
            println!("wrote {} samples to {}", m.samples.len(), run.out.display());
        }
        Cmd::TrainTvae(a) => {
            let mut sys = match &a.checkpoint {
                Some(p) => run.load(p)?,
                None => run.fresh_system()?,
            };
            let gts: Vec<_> = train_triplets(&a.data)?.into_iter().flat_map(|t| t.ground_truth).collect();
            let mut cfg = s.tvae.clone();
            cfg.seed = s.seed;
            let glyphs = sys.glyph_tensor(&gts)?;
            let r = train_tvae(&mut sys, &glyphs, &cfg)?;
            run.save(&sys, "tvae.ckpt", &[&r.warmup, &r.decoder])?;
        }
        Cmd::TrainStage1(a) => {
            let mut sys = run.load(&a.checkpoint)?;
            let mut data = Dataset::from_triplets(&sys, &train_triplets(&a.data)?)?;
            let curve = train_stage1(&mut sys, &mut data, &s.stage1)?;
            run.save(&sys, "stage1.ckpt", &[&curve])?;
        }
        Cmd::TrainStage2(a) => {
            let mut sys = run.load(&a.checkpoint)?;
            let data = Dataset::from_triplets(&sys, &train_triplets(&a.data)?)?;
            let clients = run.clients(&sys)?;
            let curve = train_stage2(&mut sys, &data, &s.stage2, clients.mllm.as_ref())?;
            run.save(&sys, "stage2.ckpt", &[&curve])?;
        }
        Cmd::TrainStage3 { stage: a, phase } => {
            let rank = s.stage3_sft.adapter_rank.unwrap_or(0);
            let mut sys = GlyphSystem::load(&a.checkpoint, DType::F32, |c| {
                if c.model.lora_rank == 0 {
                    c.model.lora_rank = rank;
                }
            })?;
            let mut data = Dataset::from_triplets(&sys, &train_triplets(&a.data)?)?;
            let mut curves = Vec::new();
            if phase != Phase::Dpo {
                curves.push(train_stage3_sft(&mut sys, &mut data, &s.stage3_sft)?);
            }
            if phase != Phase::Sft {
                let dpo = &s.stage3_dpo;
                let reference = sys.duplicate()?;
                let scorer = scorer_by_name(dpo.scorer.as_deref().unwrap_or("neg-mse"))?;
                let items: Vec<usize> = (0..data.len()).collect();
                let k = dpo.k_candidates.unwrap_or(2);
                let pairs = build_preference_pairs(&sys, &data, &items, k, scorer.as_ref(), &s.sampler)?;
                log::info!("{} preference pairs", pairs.len());
                curves.push(train_stage3_dpo(&mut sys, &reference, &data, &pairs, dpo)?);
            }
            run.save(&sys, "stage3.ckpt", &curves.iter().collect::<Vec<_>>())?;
        }
        Cmd::Sample {
            checkpoint,
            text,
            style,
            refs,
        } => {
            let sys = run.load(&checkpoint)?;
            let synth = GlyphSynth::procedural(sys.cfg.resolution())?;
            let ids = synth.charset().encode(&text)?;
            let neutral = StyleSpec::neutral();
            let content = ids.iter().map(|&c| synth.render(c, &neutral)).collect::<Result<Vec<_>, _>>()?;
            let spec = StyleSpec::procedural(style)?;
            let ref_chars: Vec<u32> = (0..refs as u32).map(|i| i % synth.charset().len() as u32).collect();
            let style_refs = ref_chars.iter().map(|&c| synth.render(c, &spec)).collect::<Result<Vec<_>, _>>()?;
            let mut sampler = s.sampler.clone();
            sampler.seed = s.seed;
            let out = generate_glyphs(&sys, &content, StyleSource::Refs(&style_refs), &sampler)?;
            let pairs: Vec<(u32, u32)> = ids.iter().map(|&c| (c, style)).collect();
            let dir = run.out_dir()?;
            for (i, g) in tensor_to_glyphs(&out, &pairs)?.iter().enumerate() {
                let p = dir.join(format!("glyph_{i:02}.png"));
                g.pixels.save_png(&p)?;
                println!("{}", p.display());
            }
        }
        Cmd::Edit {
            checkpoint,
            image,
            region,
            text,
        } => {
            let sys = run.load(&checkpoint)?;
            let img = RgbImage::load_png(&image)?;
            let out = edit_pipeline(&sys, &img, region, &text, &run.clients(&sys)?, &run.opts())?;
            run.finish(&out)?;
        }
        Cmd::Generate {
            checkpoint,
            background,
            caption,
            texts,
        } => {
            let sys = run.load(&checkpoint)?;
            let case = DesignCase {
                background: RgbImage::load_png(&background)?,
                caption,
                items: texts.iter().map(TextItem::new).collect(),
                style_region: None,
            };
            let out = generate_pipeline(&sys, &case, &run.clients(&sys)?, &run.opts())?;
            run.finish(&out)?;
        }
        Cmd::T2d {
            checkpoint,
            prompt,
            texts,
            canvas,
        } => {
            let sys = run.load(&checkpoint)?;
            let items: Vec<TextItem> = texts.iter().map(TextItem::new).collect();
            let out = t2d_pipeline(&sys, &prompt, &items, canvas, &run.clients(&sys)?, &run.opts())?;
            run.finish(&out)?;
        }
        Cmd::LayoutEval { pred, gt, weights } => {
            let mut w = s.reward;
            if let Some(spec) = weights {
                let (ol, bl) = spec.split_once(',').context("--weights expects lambda_ol,lambda_bl")?;
                w = RewardWeights {
                    lambda_ol: ol.trim().parse()?,
                    lambda_bl: bl.trim().parse()?,
                    ..w
                };
            }
            let r = total_reward_boxes(&read_boxes(&pred)?, &read_boxes(&gt)?, &w)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Cmd::Eval {
            cases,
            system,
            ocr,
            checkpoint,
            iou,
        } => {
            if system != "glyph-design" {
                bail!("unknown system {system:?}; available: glyph-design");
            }
            let manifest = CaseManifest::load(&cases)?;
            let sys = match &checkpoint {
                Some(p) => run.load(p)?,
                None => run.fresh_system()?,
            };
            let ocr: Box<dyn OcrClient> = match ocr.as_str() {
                "oracle" => Box::new(OracleOcr),
                "empty" => Box::new(EmptyOcr),
                "noisy" => Box::new(NoisyOcr { rate: 0.1, seed: s.seed }),
                url if url.starts_with("http") => Box::new(RemoteOcr { http: run.http(url)? }),
                other => bail!("unknown OCR client {other:?}"),
            };
            let clients = run.clients(&sys)?;
            let bench = DesignBench {
                sys: &sys,
                clients: &clients,
                opts: run.opts(),
                base_dir: cases.parent().map(Path::to_path_buf).unwrap_or_default(),
                fill: [1.0; 3],
            };
            let report = run_benchmark(&manifest.cases, &bench, ocr.as_ref(), iou)?;
            report.save(run.out_dir()?)?;
            println!("{}", serde_json::to_string_pretty(&report.aggregate)?);
        }
        Cmd::FilterData { data, checkpoint } => {
            let sys = match &checkpoint {
                Some(p) => run.load(p)?,
                None => run.fresh_system()?,
            };
            let (manifest, triplets) = load_shard(&data, None)?;
            let feats = style_features(&sys, &triplets)?;
            let samples: Vec<_> = manifest.samples.iter().map(|r| r.id.clone()).zip(feats).collect();
            let f = &s.filter;
            let features: Vec<_> = samples.iter().map(|(_, f)| f.clone()).collect();
            let mut km = f.kmeans.clone();
            km.k = km.k.min(features.len());
            km.seed = s.seed;
            let model = kmeans_fit(&features, &km)?;
            let rows = score_samples(&samples, &model, &f.filter)?;
            let dir = run.out_dir()?;
            write_report(&dir.join("nsd.csv"), &rows, f.bins)?;
            let kept: Vec<&str> = rows.iter().filter(|r| r.kept).map(|r| r.id.as_str()).collect();
            std::fs::write(dir.join("kept.txt"), kept.join("\n"))?;
            println!("kept {} of {}", kept.len(), rows.len());
        }
    }
    Ok(())
}
