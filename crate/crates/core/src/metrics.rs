//! Text-rendering metrics over OCR line detections and the benchmark runner.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::RgbImage;
use crate::layout::{iou, BBox};
use crate::rng;

/// Edit distance over Unicode scalar values (unit insert/delete/substitute).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the longer length; 0 when both are empty.
pub fn ned(a: &str, b: &str) -> f64 {
    let n = a.chars().count().max(b.chars().count());
    if n == 0 {
        0.0
    } else {
        levenshtein(a, b) as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrLine {
    pub text: String,
    pub bbox: BBox,
    #[serde(default = "one")]
    pub confidence: f64,
}

fn one() -> f64 {
    1.0
}

impl OcrLine {
    pub fn new(text: impl Into<String>, bbox: BBox) -> Self {
        Self {
            text: text.into(),
            bbox,
            confidence: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// (pred index, gt index, iou)
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Greedy one-to-one matching by descending IoU; ties go to the lower
/// prediction index, then the lower ground-truth index.
pub fn match_lines(pred: &[OcrLine], gt: &[OcrLine], iou_thresh: f64) -> Result<MatchResult> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(invalid("iou threshold must lie in (0, 1)"));
    }
    let mut cands = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let v = iou(&p.bbox, &g.bbox, 0.0);
            if v >= iou_thresh {
                cands.push((i, j, v));
            }
        }
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let (mut used_p, mut used_g) = (HashSet::new(), HashSet::new());
    let mut pairs = Vec::new();
    for (i, j, v) in cands {
        if !used_p.contains(&i) && !used_g.contains(&j) {
            used_p.insert(i);
            used_g.insert(j);
            pairs.push((i, j, v));
        }
    }
    Ok(MatchResult {
        pairs,
        unmatched_pred: (0..pred.len()).filter(|i| !used_p.contains(i)).collect(),
        unmatched_gt: (0..gt.len()).filter(|j| !used_g.contains(j)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub n_pred: usize,
    pub n_gt: usize,
    pub n_matched: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub ned: f64,
    pub accuracy: f64,
    pub counts: Counts,
    /// Set when there were no ground-truth lines; recall and accuracy are 0.
    pub empty_gt: bool,
}

pub fn compute_metrics(m: &MatchResult, pred: &[OcrLine], gt: &[OcrLine]) -> Result<MetricsReport> {
    let mut seen_p = HashSet::new();
    let mut seen_g = HashSet::new();
    for &(i, j, _) in &m.pairs {
        if i >= pred.len() || j >= gt.len() || !seen_p.insert(i) || !seen_g.insert(j) {
            return Err(invalid("match result indices are inconsistent"));
        }
    }
    let tp = m
        .pairs
        .iter()
        .filter(|(i, j, _)| pred[*i].text == gt[*j].text)
        .count();
    let (n_pred, n_gt) = (pred.len(), gt.len());
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_gt);
    let f_score = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let mut ned_sum = 0.0;
    for (j, g) in gt.iter().enumerate() {
        let matched = m.pairs.iter().find(|p| p.1 == j).map(|p| pred[p.0].text.as_str());
        ned_sum += ned(matched.unwrap_or(""), &g.text);
    }
    Ok(MetricsReport {
        precision,
        recall,
        f_score,
        ned: if n_gt == 0 { 0.0 } else { ned_sum / n_gt as f64 },
        accuracy: recall,
        counts: Counts {
            n_pred,
            n_gt,
            n_matched: m.pairs.len(),
            true_positives: tp,
        },
        empty_gt: n_gt == 0,
    })
}

pub fn evaluate_lines(pred: &[OcrLine], gt: &[OcrLine], iou_thresh: f64) -> Result<MetricsReport> {
    compute_metrics(&match_lines(pred, gt, iou_thresh)?, pred, gt)
}

/// Unweighted mean of per-case reports; counts are summed.
pub fn macro_average(reports: &[MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mut counts = Counts::default();
    for r in reports {
        counts.n_pred += r.counts.n_pred;
        counts.n_gt += r.counts.n_gt;
        counts.n_matched += r.counts.n_matched;
        counts.true_positives += r.counts.true_positives;
    }
    Some(MetricsReport {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f_score: mean(|r| r.f_score),
        ned: mean(|r| r.ned),
        accuracy: mean(|r| r.accuracy),
        counts,
        empty_gt: reports.iter().all(|r| r.empty_gt),
    })
}

pub const CASE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseInputs {
    /// Background image path, relative to the manifest.
    #[serde(default)]
    pub background: Option<String>,
    /// Canvas size used when no background is given.
    #[serde(default)]
    pub canvas: Option<(i64, i64)>,
    #[serde(default)]
    pub caption: String,
    #[serde(default)]
    pub texts: Vec<String>,
    /// Source text region for editing cases.
    #[serde(default)]
    pub edit_region: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub id: String,
    pub inputs: CaseInputs,
    pub gt_lines: Vec<OcrLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub schema_version: u32,
    pub cases: Vec<BenchCase>,
}

impl CaseManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: CaseManifest = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.schema_version != CASE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                found: m.schema_version,
                expected: CASE_SCHEMA_VERSION,
            });
        }
        Ok(m)
    }
}

/// Produces the image to be read back for one case.
pub trait BenchmarkSystem {
    fn name(&self) -> &str;
    fn render(&self, case: &BenchCase) -> Result<RgbImage>;
}

/// Text recognizer. `case` is available so stubs can consult ground truth.
pub trait OcrClient {
    fn name(&self) -> &str;
    fn recognize(&self, image: &RgbImage, case: &BenchCase) -> Result<Vec<OcrLine>>;
}

/// Reads the ground truth back verbatim.
pub struct OracleOcr;

impl OcrClient for OracleOcr {
    fn name(&self) -> &str {
        "oracle"
    }
    fn recognize(&self, _image: &RgbImage, case: &BenchCase) -> Result<Vec<OcrLine>> {
        Ok(case.gt_lines.clone())
    }
}

/// Never detects anything.
pub struct EmptyOcr;

impl OcrClient for EmptyOcr {
    fn name(&self) -> &str {
        "empty"
    }
    fn recognize(&self, _image: &RgbImage, _case: &BenchCase) -> Result<Vec<OcrLine>> {
        Ok(Vec::new())
    }
}

/// Ground truth with each character replaced with probability `rate`,
/// seeded per case.
pub struct NoisyOcr {
    pub rate: f64,
    pub seed: u64,
}

impl OcrClient for NoisyOcr {
    fn name(&self) -> &str {
        "noisy"
    }
    fn recognize(&self, _image: &RgbImage, case: &BenchCase) -> Result<Vec<OcrLine>> {
        let mut r = rng::derived(self.seed, rng::hash_bytes(case.id.as_bytes()));
        Ok(case
            .gt_lines
            .iter()
            .map(|l| {
                let text = l
                    .text
                    .chars()
                    .map(|c| {
                        if r.random_bool(self.rate.clamp(0.0, 1.0)) {
                            char::from(b'a' + r.random_range(0..26u8))
                        } else {
                            c
                        }
                    })
                    .collect();
                OcrLine { text, ..l.clone() }
            })
            .collect())
    }
}

/// Image-quality scorer (FID, LPIPS, CLIP similarity, aesthetic score...).
pub trait ExternalScorer {
    fn name(&self) -> &str;
    fn score(&self, images: &[RgbImage], references: &[RgbImage]) -> Result<f64>;
}

/// Mean absolute pixel difference against the references: a deterministic
/// placeholder with the scorer signature.
pub struct StubScorer;

impl ExternalScorer for StubScorer {
    fn name(&self) -> &str {
        "stub-mad"
    }
    fn score(&self, images: &[RgbImage], references: &[RgbImage]) -> Result<f64> {
        if images.len() != references.len() || images.is_empty() {
            return Err(invalid("scorer needs equally many images and references"));
        }
        let mut total = 0.0;
        let mut n = 0usize;
        for (a, b) in images.iter().zip(references) {
            if (a.width(), a.height()) != (b.width(), b.height()) {
                return Err(invalid("scorer image sizes differ"));
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                total += f64::from((x - y).abs());
                n += 1;
            }
        }
        Ok(total / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub id: String,
    pub error: Option<String>,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub system: String,
    pub ocr: String,
    pub aggregate: MetricsReport,
    pub n_failed: usize,
    pub cases: Vec<CaseRow>,
}

/// Run every case; failing cases are recorded and skipped. Fails only when
/// no case succeeds.
pub fn run_benchmark(
    cases: &[BenchCase],
    system: &dyn BenchmarkSystem,
    ocr: &dyn OcrClient,
    iou_thresh: f64,
) -> Result<BenchmarkReport> {
    let mut rows = Vec::with_capacity(cases.len());
    let mut ok = Vec::new();
    for case in cases {
        let result = system
            .render(case)
            .and_then(|img| ocr.recognize(&img, case))
            .and_then(|pred| evaluate_lines(&pred, &case.gt_lines, iou_thresh));
        match result {
            Ok(m) => {
                ok.push(m.clone());
                rows.push(CaseRow {
                    id: case.id.clone(),
                    error: None,
                    metrics: Some(m),
                });
            }
            Err(e) => {
                log::warn!("case {} failed: {e}", case.id);
                rows.push(CaseRow {
                    id: case.id.clone(),
                    error: Some(e.to_string()),
                    metrics: None,
                });
            }
        }
    }
    let aggregate = macro_average(&ok).ok_or_else(|| {
        Error::Client(format!("all {} benchmark cases failed", cases.len()))
    })?;
    Ok(BenchmarkReport {
        schema_version: CASE_SCHEMA_VERSION,
        system: system.name().to_string(),
        ocr: ocr.name().to_string(),
        aggregate,
        n_failed: cases.len() - ok.len(),
        cases: rows,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: &'a str,
    ok: bool,
    precision: Option<f64>,
    recall: Option<f64>,
    f_score: Option<f64>,
    ned: Option<f64>,
    accuracy: Option<f64>,
    error: Option<&'a str>,
}

impl BenchmarkReport {
    /// Write `report.json` and `cases.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("cases.csv"))?;
        for row in &self.cases {
            let m = row.metrics.as_ref();
            w.serialize(CsvRow {
                id: &row.id,
                ok: m.is_some(),
                precision: m.map(|m| m.precision),
                recall: m.map(|m| m.recall),
                f_score: m.map(|m| m.f_score),
                ned: m.map(|m| m.ned),
                accuracy: m.map(|m| m.accuracy),
                error: row.error.as_deref(),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}
