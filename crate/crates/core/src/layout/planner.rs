use serde::{Deserialize, Serialize};

use super::protocol::{json_to_layout, layout_to_json, render_prompt, DEFAULT_PROMPT_TEMPLATE};
use super::{BBox, Layout, LayoutItem};
use crate::error::{invalid, Error, Result};
use crate::image::RgbImage;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanStage {
    /// Line boxes on the canvas.
    Coarse,
    /// Glyph boxes inside one line box.
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutTask {
    pub canvas: (i64, i64),
    pub caption: String,
    pub labels: Vec<String>,
    pub stage: PlanStage,
    pub parent_box: Option<BBox>,
}

impl LayoutTask {
    pub fn coarse(canvas: (i64, i64), caption: impl Into<String>, labels: Vec<String>) -> Self {
        Self {
            canvas,
            caption: caption.into(),
            labels,
            stage: PlanStage::Coarse,
            parent_box: None,
        }
    }

    pub fn fine(canvas: (i64, i64), parent: BBox, labels: Vec<String>) -> Self {
        Self {
            canvas,
            caption: String::new(),
            labels,
            stage: PlanStage::Fine,
            parent_box: Some(parent),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas.0 <= 0 || self.canvas.1 <= 0 {
            return Err(invalid("canvas must have positive size"));
        }
        if self.labels.is_empty() {
            return Err(invalid("layout task needs at least one label"));
        }
        match (self.stage, self.parent_box) {
            (PlanStage::Fine, None) => Err(invalid("fine stage requires a parent box")),
            (PlanStage::Fine, Some(p)) if !p.within(self.canvas.0, self.canvas.1) => {
                Err(invalid("parent box outside canvas"))
            }
            _ => Ok(()),
        }
    }

    /// Region the output must stay inside.
    pub fn region(&self) -> BBox {
        self.parent_box.unwrap_or(BBox {
            left: 0,
            top: 0,
            right: self.canvas.0,
            bottom: self.canvas.1,
        })
    }
}

/// A planner proposes one box per label. The answer is checked by
/// [`plan_coarse`] / [`plan_fine`], so implementations may return anything.
pub trait Planner: Send + Sync {
    fn plan(&self, task: &LayoutTask, background: Option<&RgbImage>) -> Result<PlannerOutput>;
}

/// A planned layout with the raw planner response kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerOutput {
    pub layout: Layout,
    pub raw: String,
}

fn check_output(task: &LayoutTask, out: PlannerOutput) -> Result<Layout> {
    let violation = |reason: String| Error::Protocol {
        reason,
        raw: out.raw.clone(),
    };
    let layout = &out.layout;
    if layout.len() != task.labels.len() {
        return Err(violation(format!(
            "expected {} boxes, got {}",
            task.labels.len(),
            layout.len()
        )));
    }
    for (i, (item, label)) in layout.items.iter().zip(&task.labels).enumerate() {
        if &item.label != label {
            return Err(violation(format!("item {i} label {:?} != {label:?}", item.label)));
        }
        if !task.region().contains(&item.bbox) {
            return Err(violation(format!("item {i} box {:?} out of bounds", item.bbox)));
        }
    }
    Ok(out.layout)
}

pub fn plan_coarse(
    task: &LayoutTask,
    planner: &dyn Planner,
    background: Option<&RgbImage>,
) -> Result<Layout> {
    task.validate()?;
    if task.stage != PlanStage::Coarse {
        return Err(invalid("plan_coarse needs a coarse-stage task"));
    }
    check_output(task, planner.plan(task, background)?)
}

/// Plan one box per glyph label inside `parent`.
pub fn plan_fine(
    parent: BBox,
    glyph_labels: &[String],
    canvas: (i64, i64),
    planner: &dyn Planner,
    background: Option<&RgbImage>,
) -> Result<Layout> {
    let task = LayoutTask::fine(canvas, parent, glyph_labels.to_vec());
    task.validate()?;
    check_output(&task, planner.plan(&task, background)?)
}

/// Rule-based reference planner.
///
/// Coarse: lines stacked vertically inside `margin` of the canvas, heights
/// proportional to label length, full margin-to-margin width.
/// Fine: equal-width subdivision of the parent with `tracking` pixels between
/// glyphs and `fine_margin` pixels inset; leftover pixels are split evenly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePlanner {
    pub margin: f64,
    pub tracking: i64,
    pub fine_margin: i64,
}

impl Default for BaselinePlanner {
    fn default() -> Self {
        Self {
            margin: 0.05,
            tracking: 0,
            fine_margin: 0,
        }
    }
}

/// Split `total` into integer parts proportional to `weights` (each >= 1),
/// returning the parts and the unused remainder.
fn proportional(total: i64, weights: &[i64]) -> Result<(Vec<i64>, i64)> {
    let sum: i64 = weights.iter().sum();
    let parts: Vec<i64> = weights.iter().map(|w| (total * w / sum).max(1)).collect();
    let used: i64 = parts.iter().sum();
    if used > total {
        return Err(invalid(format!(
            "{} items do not fit in {total} pixels",
            weights.len()
        )));
    }
    Ok((parts, total - used))
}

impl BaselinePlanner {
    pub fn layout(&self, task: &LayoutTask) -> Result<Layout> {
        task.validate()?;
        let region = task.region();
        let items = match task.stage {
            PlanStage::Coarse => {
                let mx = (region.width() as f64 * self.margin).round() as i64;
                let my = (region.height() as f64 * self.margin).round() as i64;
                let (left, right) = (region.left + mx, region.right - mx);
                if left >= right {
                    return Err(invalid("canvas too narrow for margins"));
                }
                let weights: Vec<i64> = task
                    .labels
                    .iter()
                    .map(|l| l.chars().count().max(1) as i64)
                    .collect();
                let (heights, spare) = proportional(region.height() - 2 * my, &weights)?;
                let mut y = region.top + my + spare / 2;
                heights
                    .iter()
                    .zip(&task.labels)
                    .map(|(h, label)| {
                        let b = BBox::new(left, y, right, y + h)?;
                        y += h;
                        Ok(LayoutItem {
                            label: label.clone(),
                            bbox: b,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            PlanStage::Fine => {
                let n = task.labels.len() as i64;
                let m = self.fine_margin;
                let (top, bottom) = (region.top + m, region.bottom - m);
                let avail = region.width() - 2 * m - (n - 1) * self.tracking;
                let w = avail / n;
                if w < 1 || top >= bottom {
                    return Err(invalid("parent box too small for glyphs"));
                }
                let mut x = region.left + m + (avail - w * n) / 2;
                task.labels
                    .iter()
                    .map(|label| {
                        let b = BBox::new(x, top, x + w, bottom)?;
                        x += w + self.tracking;
                        Ok(LayoutItem {
                            label: label.clone(),
                            bbox: b,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(Layout::new(items, task.canvas))
    }
}

impl Planner for BaselinePlanner {
    fn plan(&self, task: &LayoutTask, _background: Option<&RgbImage>) -> Result<PlannerOutput> {
        let layout = self.layout(task)?;
        Ok(PlannerOutput {
            raw: layout_to_json(&layout),
            layout,
        })
    }
}

/// What a language-model planner backend receives. `prompt` is the rendered
/// instruction; the structured fields are for backends that do not parse text.
#[derive(Debug, Clone)]
pub struct LayoutQuery<'a> {
    pub prompt: String,
    pub task: &'a LayoutTask,
    /// Size of the frame the model plans in (canvas, or parent box for fine plans).
    pub frame: (i64, i64),
    pub background: Option<&'a RgbImage>,
}

pub trait LayoutLlm: Send + Sync {
    fn complete(&self, query: &LayoutQuery<'_>) -> Result<String>;
}

/// Planner that prompts a language model and parses its JSON answer. Fine
/// plans are requested in parent-box coordinates and shifted back.
pub struct MllmPlanner<C: LayoutLlm> {
    pub client: C,
    pub template: String,
}

impl<C: LayoutLlm> MllmPlanner<C> {
    pub fn new(client: C) -> Self {
        Self {
            client,
            template: DEFAULT_PROMPT_TEMPLATE.to_string(),
        }
    }
}

impl<C: LayoutLlm> Planner for MllmPlanner<C> {
    fn plan(&self, task: &LayoutTask, background: Option<&RgbImage>) -> Result<PlannerOutput> {
        let region = task.region();
        let frame = (region.width(), region.height());
        let cropped;
        let image = match (task.stage, background) {
            (PlanStage::Fine, Some(bg)) => {
                cropped = bg.crop(&region)?;
                Some(&cropped)
            }
            (_, bg) => bg,
        };
        let query = LayoutQuery {
            prompt: render_prompt(&self.template, frame, &task.caption, &task.labels),
            task,
            frame,
            background: image,
        };
        let raw = self.client.complete(&query)?;
        let local = json_to_layout(&raw, &task.labels, frame).map_err(|e| Error::Protocol {
            reason: e.to_string(),
            raw: raw.clone(),
        })?;
        let mut layout = local.translated(region.left, region.top);
        layout.canvas = task.canvas;
        Ok(PlannerOutput { layout, raw })
    }
}

/// Deterministic stand-in for a language-model backend: answers with a fenced
/// JSON block of jittered rows derived from a hash of the prompt.
#[derive(Debug, Clone, Default)]
pub struct StubLayoutLlm {
    pub seed: u64,
}

impl LayoutLlm for StubLayoutLlm {
    fn complete(&self, query: &LayoutQuery<'_>) -> Result<String> {
        use rand::Rng as _;
        let mut r = rng::derived(self.seed, rng::hash_bytes(query.prompt.as_bytes()));
        let (w, h) = query.frame;
        let n = query.task.labels.len() as i64;
        let mut items = Vec::new();
        for (i, label) in query.task.labels.iter().enumerate() {
            let i = i as i64;
            let (top, bottom) = match query.task.stage {
                PlanStage::Coarse => (h * i / n, (h * (i + 1) / n).max(h * i / n + 1)),
                PlanStage::Fine => (0, h),
            };
            let (left, right) = match query.task.stage {
                PlanStage::Coarse => {
                    let inset = r.random_range(0..=(w / 8));
                    (inset, (w - inset).max(inset + 1))
                }
                PlanStage::Fine => (w * i / n, (w * (i + 1) / n).max(w * i / n + 1)),
            };
            items.push(LayoutItem {
                label: label.clone(),
                bbox: BBox {
                    left,
                    top,
                    right,
                    bottom,
                },
            });
        }
        Ok(format!(
            "```json\n{}\n```",
            layout_to_json(&Layout::new(items, query.frame))
        ))
    }
}

/// Replays fixed responses in order (test double).
#[derive(Debug, Default)]
pub struct ScriptedLayoutLlm {
    responses: std::sync::Mutex<std::collections::VecDeque<String>>,
}

impl ScriptedLayoutLlm {
    pub fn new(responses: impl IntoIterator<Item = String>) -> Self {
        Self {
            responses: std::sync::Mutex::new(responses.into_iter().collect()),
        }
    }
}

impl LayoutLlm for ScriptedLayoutLlm {
    fn complete(&self, _query: &LayoutQuery<'_>) -> Result<String> {
        self.responses
            .lock()
            .expect("scripted client mutex poisoned")
            .pop_front()
            .ok_or_else(|| Error::Client("scripted client has no responses left".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{reward_balance, reward_overlap};

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn baseline_coarse_three_labels() {
        let task = LayoutTask::coarse((100, 200), "", labels(&["ab", "cdef", "g"]));
        let l = plan_coarse(&task, &BaselinePlanner::default(), None).unwrap();
        assert_eq!(l.len(), 3);
        assert!(l.in_bounds());
        assert_eq!(reward_overlap(&l, 1e-6), 0.0);
        assert_eq!(l, plan_coarse(&task, &BaselinePlanner::default(), None).unwrap());
    }

    #[test]
    fn baseline_single_label_is_centred() {
        let task = LayoutTask::coarse((100, 200), "", labels(&["x"]));
        let b = plan_coarse(&task, &BaselinePlanner::default(), None).unwrap().items[0].bbox;
        assert_eq!(b, BBox::new(5, 10, 95, 190).unwrap());
    }

    #[test]
    fn baseline_fine_equal_widths() {
        let parent = BBox::new(0, 0, 100, 20).unwrap();
        let l = plan_fine(parent, &labels(&["a", "b", "c", "d"]), (100, 20), &BaselinePlanner::default(), None)
            .unwrap();
        assert!(l.items.iter().all(|i| i.bbox.width() == 25));
        assert_eq!(reward_balance(&l).unwrap(), 0.0);
        let one = plan_fine(parent, &labels(&["a"]), (100, 20), &BaselinePlanner::default(), None).unwrap();
        assert_eq!(one.items[0].bbox, parent);
        let inset = BaselinePlanner {
            fine_margin: 2,
            tracking: 3,
            ..Default::default()
        };
        let one = plan_fine(parent, &labels(&["a"]), (100, 20), &inset, None).unwrap();
        assert_eq!(one.items[0].bbox, BBox::new(2, 2, 98, 18).unwrap());
    }

    #[test]
    fn stub_mllm_planner_round_trips() {
        let planner = MllmPlanner::new(StubLayoutLlm { seed: 3 });
        let task = LayoutTask::coarse((120, 90), "A poster.", labels(&["SALE", "now"]));
        let l = plan_coarse(&task, &planner, None).unwrap();
        assert!(l.in_bounds());
        let parent = l.items[0].bbox;
        let fine = plan_fine(parent, &labels(&["S", "A", "L", "E"]), (120, 90), &planner, None).unwrap();
        assert!(fine.items.iter().all(|i| parent.contains(&i.bbox)));
    }

    #[test]
    fn protocol_violations_keep_raw_response() {
        let task = LayoutTask::coarse((50, 50), "", labels(&["a"]));
        let bad = [
            "not json".to_string(),
            r#"[{"label":"a","bbox":[0,0,80,10]}]"#.to_string(),
            r#"[{"label":"a","bbox":[0,0,8,10]},{"label":"b","bbox":[0,0,8,10]}]"#.to_string(),
        ];
        let planner = MllmPlanner::new(ScriptedLayoutLlm::new(bad.clone()));
        for raw in bad {
            match plan_coarse(&task, &planner, None) {
                Err(Error::Protocol { raw: got, .. }) => assert_eq!(got, raw),
                other => panic!("expected protocol error, got {other:?}"),
            }
        }
    }

    #[test]
    fn fine_task_requires_parent() {
        let mut t = LayoutTask::coarse((10, 10), "", labels(&["a"]));
        t.stage = PlanStage::Fine;
        assert!(t.validate().is_err());
    }
}
