//! Style-distance filtering: k-means over unit style features and the
//! distance of each sample to its nearest centre.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;

pub const UNIT_NORM_TOL: f64 = 1e-3;

/// A style feature vector of unit 2-norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleFeature(Vec<f64>);

impl StyleFeature {
    /// Accepts vectors whose norm is already within tolerance of 1.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if !v.iter().all(|x| x.is_finite()) || (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(invalid(format!("style feature norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    /// Normalize an arbitrary non-zero vector.
    pub fn normalized(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if !(n > 0.0) || !n.is_finite() {
            return Err(invalid("cannot normalize a zero or non-finite vector"));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centre moves farther than this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 16,
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f64>>,
    pub k: usize,
    pub seed: u64,
    pub inertia: f64,
    /// Inertia after initialization and after every iteration.
    pub inertia_trace: Vec<f64>,
}

fn assign(features: &[StyleFeature], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = features
        .iter()
        .map(|f| {
            let (j, d) = centers
                .iter()
                .enumerate()
                .map(|(j, c)| (j, sq_dist(f.as_slice(), c)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
            inertia += d;
            j
        })
        .collect();
    (labels, inertia)
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans_fit(features: &[StyleFeature], config: &KMeansConfig) -> Result<ClusterModel> {
    let k = config.k;
    if k == 0 {
        return Err(invalid("k must be >= 1"));
    }
    if features.len() < k {
        return Err(invalid(format!(
            "{} features are fewer than k = {k}",
            features.len()
        )));
    }
    let dim = features[0].dim();
    if features.iter().any(|f| f.dim() != dim) {
        return Err(invalid("style features have mixed dimensions"));
    }
    let mut r = rng::seeded(config.seed);

    let mut centers: Vec<Vec<f64>> = vec![features[r.random_range(0..features.len())].0.clone()];
    let mut d2: Vec<f64> = features
        .iter()
        .map(|f| sq_dist(f.as_slice(), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = features.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            if d2[pick] == 0.0 {
                // floating-point tail: take the farthest point instead
                pick = d2
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                    .0;
            }
            pick
        } else {
            // every point already coincides with a centre
            r.random_range(0..features.len())
        };
        let c = features[next].0.clone();
        for (d, f) in d2.iter_mut().zip(features) {
            *d = d.min(sq_dist(f.as_slice(), &c));
        }
        centers.push(c);
    }

    let (mut labels, mut inertia) = assign(features, &centers);
    let mut trace = vec![inertia];
    for _ in 0..config.max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (f, &j) in features.iter().zip(&labels) {
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(f.as_slice()) {
                *s += x;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&new, &centers[j]).sqrt());
            centers[j] = new;
        }
        let (new_labels, new_inertia) = assign(features, &centers);
        assert!(
            new_inertia <= inertia * (1.0 + 1e-12) + 1e-12,
            "k-means inertia increased from {inertia} to {new_inertia}"
        );
        labels = new_labels;
        inertia = new_inertia;
        trace.push(inertia);
        if shift <= config.tol {
            break;
        }
    }
    Ok(ClusterModel {
        centers,
        k,
        seed: config.seed,
        inertia,
        inertia_trace: trace,
    })
}

/// Distance from a feature to its nearest cluster centre.
pub fn nsd(feature: &StyleFeature, model: &ClusterModel) -> Result<f64> {
    if model.centers.iter().any(|c| c.len() != feature.dim()) {
        return Err(invalid("feature dimension does not match cluster centres"));
    }
    Ok(model
        .centers
        .iter()
        .map(|c| sq_dist(feature.as_slice(), c))
        .fold(f64::INFINITY, f64::min)
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep samples far from every centre (stylistically unusual).
    #[default]
    KeepAbove,
    KeepBelowOrEqual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub threshold: f64,
    pub mode: FilterMode,
    /// Divide distances by 2 so unit features map into [0, 1].
    pub halve: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            mode: FilterMode::KeepAbove,
            halve: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub id: String,
    pub nsd: f64,
    pub kept: bool,
}

/// Score every sample and mark which ones survive the threshold.
pub fn score_samples(
    samples: &[(String, StyleFeature)],
    model: &ClusterModel,
    config: &FilterConfig,
) -> Result<Vec<FilterRow>> {
    if !(config.threshold >= 0.0) {
        return Err(invalid("threshold must be >= 0"));
    }
    samples
        .iter()
        .map(|(id, f)| {
            let mut d = nsd(f, model)?;
            if config.halve {
                d /= 2.0;
            }
            let kept = match config.mode {
                FilterMode::KeepAbove => d > config.threshold,
                FilterMode::KeepBelowOrEqual => d <= config.threshold,
            };
            Ok(FilterRow {
                id: id.clone(),
                nsd: d,
                kept,
            })
        })
        .collect()
}

/// The kept subset, in input order.
pub fn filter_by_nsd<'a>(
    samples: &'a [(String, StyleFeature)],
    model: &ClusterModel,
    config: &FilterConfig,
) -> Result<Vec<&'a (String, StyleFeature)>> {
    let rows = score_samples(samples, model, config)?;
    Ok(samples.iter().zip(rows).filter(|(_, r)| r.kept).map(|(s, _)| s).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins];
    if values.is_empty() {
        return Histogram {
            lo: 0.0,
            hi: 0.0,
            counts,
        };
    }
    let width = (hi - lo).max(f64::MIN_POSITIVE);
    for v in values {
        let b = (((v - lo) / width) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    Histogram { lo, hi, counts }
}

/// Write `rows` as CSV (`id,nsd,kept`) and a JSON histogram next to it.
pub fn write_report(csv_path: &Path, rows: &[FilterRow], bins: usize) -> Result<Histogram> {
    let mut w = csv::Writer::from_path(csv_path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let hist = histogram(&rows.iter().map(|r| r.nsd).collect::<Vec<_>>(), bins);
    let mut f = std::fs::File::create(csv_path.with_extension("histogram.json"))?;
    f.write_all(&serde_json::to_vec_pretty(&hist)?)?;
    Ok(hist)
}
