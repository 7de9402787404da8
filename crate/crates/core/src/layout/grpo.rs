//! Group-normalised advantages and a small policy-gradient harness that
//! exercises them on a linear Gaussian layout policy.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{total_reward_boxes, BBox, Layout, RewardWeights};
use crate::error::{invalid, Result};
use crate::rng::{self, Rng};

pub const ADVANTAGE_EPS: f64 = 1e-8;

/// `(r_i - mean) / (std + eps)` with the population standard deviation.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(invalid("advantages need a group of at least 2 rewards"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect())
}

/// A fixed planning problem with a reference layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub gt: Layout,
}

impl ToyTask {
    pub fn canvas(&self) -> (i64, i64) {
        self.gt.canvas
    }
}

const FEATURES: usize = 4;
const OUTPUTS: usize = 4;

/// Per-item features: bias, relative slot centre, its square, inverse item count.
fn features(slot: usize, n: usize) -> [f64; FEATURES] {
    let t = (slot as f64 + 0.5) / n as f64;
    [1.0, t, t * t, 1.0 / n as f64]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Linear Gaussian policy over box logits `(cx, cy, w, h)`, each squashed
/// into canvas fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianPolicy {
    pub weights: [[f64; FEATURES]; OUTPUTS],
    pub sigma: f64,
}

impl LinearGaussianPolicy {
    pub fn new(sigma: f64) -> Self {
        Self {
            weights: [[0.0; FEATURES]; OUTPUTS],
            sigma,
        }
    }

    fn mean(&self, phi: &[f64; FEATURES]) -> [f64; OUTPUTS] {
        self.weights
            .map(|row| row.iter().zip(phi).map(|(w, f)| w * f).sum())
    }

    fn to_box(logits: &[f64; OUTPUTS], canvas: (i64, i64)) -> BBox {
        let (w, h) = (canvas.0 as f64, canvas.1 as f64);
        let (cx, cy) = (sigmoid(logits[0]) * w, sigmoid(logits[1]) * h);
        let (bw, bh) = (sigmoid(logits[2]) * w, sigmoid(logits[3]) * h);
        let clamp = |v: f64, hi: i64| (v.round() as i64).clamp(0, hi);
        let mut left = clamp(cx - bw / 2.0, canvas.0 - 1);
        let mut right = clamp(cx + bw / 2.0, canvas.0);
        let mut top = clamp(cy - bh / 2.0, canvas.1 - 1);
        let mut bottom = clamp(cy + bh / 2.0, canvas.1);
        if right <= left {
            right = (left + 1).min(canvas.0);
            left = right - 1;
        }
        if bottom <= top {
            bottom = (top + 1).min(canvas.1);
            top = bottom - 1;
        }
        BBox {
            left,
            top,
            right,
            bottom,
        }
    }

    /// Deterministic layout at the policy mean.
    pub fn mean_layout(&self, task: &ToyTask) -> Vec<BBox> {
        let n = task.gt.len();
        (0..n)
            .map(|i| Self::to_box(&self.mean(&features(i, n)), task.canvas()))
            .collect()
    }

    /// Sample a layout; returns the boxes and the Gaussian noise used per item.
    fn sample(&self, task: &ToyTask, r: &mut Rng) -> (Vec<BBox>, Vec<[f64; OUTPUTS]>) {
        let n = task.gt.len();
        let mut boxes = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        for i in 0..n {
            let mu = self.mean(&features(i, n));
            let z: [f64; OUTPUTS] = std::array::from_fn(|_| StandardNormal.sample(r));
            let a: [f64; OUTPUTS] = std::array::from_fn(|k| mu[k] + self.sigma * z[k]);
            boxes.push(Self::to_box(&a, task.canvas()));
            noise.push(z);
        }
        (boxes, noise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weights: RewardWeights,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            steps: 200,
            learning_rate: 0.05,
            weights: RewardWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoRun {
    pub policy: LinearGaussianPolicy,
    /// Mean sampled total reward per step.
    pub reward_curve: Vec<f64>,
    /// Norm of each parameter update.
    pub update_norms: Vec<f64>,
}

/// REINFORCE with group-normalised advantages. For each task, `group_size`
/// layouts are sampled and scored with the total reward against the task's
/// reference layout; the score-function gradient is averaged over all samples.
pub fn grpo_toy_train(
    mut policy: LinearGaussianPolicy,
    tasks: &[ToyTask],
    config: &GrpoConfig,
) -> Result<GrpoRun> {
    if config.group_size < 2 {
        return Err(invalid("group size must be >= 2"));
    }
    if tasks.is_empty() || tasks.iter().any(|t| t.gt.is_empty()) {
        return Err(invalid("tasks must be non-empty with non-empty reference layouts"));
    }
    if !(policy.sigma >= 0.0) || !(config.learning_rate >= 0.0) {
        return Err(invalid("sigma and learning rate must be >= 0"));
    }
    let mut r = rng::seeded(config.seed);
    let mut curve = Vec::with_capacity(config.steps);
    let mut norms = Vec::with_capacity(config.steps);
    let gt_boxes: Vec<Vec<BBox>> = tasks.iter().map(|t| t.gt.boxes()).collect();
    for _ in 0..config.steps {
        let mut grad = [[0.0f64; FEATURES]; OUTPUTS];
        let mut reward_sum = 0.0;
        let mut count = 0usize;
        for (task, gt) in tasks.iter().zip(&gt_boxes) {
            let samples: Vec<_> = (0..config.group_size)
                .map(|_| policy.sample(task, &mut r))
                .collect();
            let rewards = samples
                .iter()
                .map(|(b, _)| total_reward_boxes(b, gt, &config.weights).map(|x| x.total))
                .collect::<Result<Vec<_>>>()?;
            let adv = grpo_advantages(&rewards)?;
            reward_sum += rewards.iter().sum::<f64>();
            count += rewards.len();
            if policy.sigma == 0.0 {
                continue;
            }
            let n = task.gt.len();
            for ((_, noise), a) in samples.iter().zip(&adv) {
                for (i, z) in noise.iter().enumerate() {
                    let phi = features(i, n);
                    // d/dmu log N(a; mu, sigma) = (a - mu) / sigma^2 = z / sigma
                    for k in 0..OUTPUTS {
                        for (f, p) in phi.iter().enumerate() {
                            grad[k][f] += a * z[k] / policy.sigma * p;
                        }
                    }
                }
            }
        }
        let scale = config.learning_rate / count as f64;
        let mut norm = 0.0;
        for k in 0..OUTPUTS {
            for f in 0..FEATURES {
                let step = scale * grad[k][f];
                policy.weights[k][f] += step;
                norm += step * step;
            }
        }
        curve.push(reward_sum / count as f64);
        norms.push(norm.sqrt());
    }
    Ok(GrpoRun {
        policy,
        reward_curve: curve,
        update_norms: norms,
    })
}

/// Eight fixed reference layouts: stacked rows of 2 to 4 items on varied
/// canvases, with gaps so the optimum is overlap-free and balanced.
pub fn toy_tasks() -> Vec<ToyTask> {
    let specs: [((i64, i64), usize); 8] = [
        ((100, 100), 2),
        ((120, 80), 3),
        ((80, 120), 4),
        ((100, 60), 2),
        ((64, 128), 3),
        ((128, 64), 2),
        ((96, 96), 4),
        ((110, 90), 3),
    ];
    specs
        .iter()
        .map(|&((w, h), n)| {
            let rows = (0..n as i64)
                .map(|i| {
                    let band = h / n as i64;
                    super::LayoutItem {
                        label: format!("line{i}"),
                        bbox: BBox {
                            left: w / 10,
                            top: i * band + band / 8,
                            right: w - w / 10,
                            bottom: (i + 1) * band - band / 8,
                        },
                    }
                })
                .collect();
            ToyTask {
                gt: Layout::new(rows, (w, h)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_basic_cases() {
        assert_eq!(grpo_advantages(&[3.0, 3.0, 3.0]).unwrap(), vec![0.0; 3]);
        let a = grpo_advantages(&[0.0, 1.0]).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
        assert!(grpo_advantages(&[1.0]).is_err());
    }

    #[test]
    fn toy_tasks_are_valid() {
        for t in toy_tasks() {
            assert!(t.gt.in_bounds());
            assert!(t.gt.items.iter().all(|i| i.bbox.left < i.bbox.right && i.bbox.top < i.bbox.bottom));
        }
    }

    #[test]
    fn identical_samples_do_not_move_the_policy() {
        let cfg = GrpoConfig {
            group_size: 2,
            steps: 5,
            ..Default::default()
        };
        let run = grpo_toy_train(LinearGaussianPolicy::new(0.0), &toy_tasks(), &cfg).unwrap();
        assert!(run.update_norms.iter().all(|&n| n == 0.0));
        assert_eq!(run.policy, LinearGaussianPolicy::new(0.0));
    }
}
