//! Planner prompt rendering and the JSON layout exchange format:
//! an array of `{"label": text, "bbox": [left, top, right, bottom]}`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BBox, Layout, LayoutItem};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LayoutParseError {
    #[error("no JSON array found in response")]
    NoArray,
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("item {index}: {reason}")]
    ItemShape { index: usize, reason: String },
    #[error("item {index}: bbox coordinates must be integers")]
    NonIntegerCoord { index: usize },
    #[error("item {index}: degenerate bbox {bbox:?}")]
    Degenerate { index: usize, bbox: [i64; 4] },
    #[error("expected {expected} items, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("item {index}: expected label {expected:?}, found {found:?}")]
    LabelMismatch {
        index: usize,
        expected: String,
        found: String,
    },
}

#[derive(Serialize, Deserialize)]
struct WireItem<'a> {
    label: &'a str,
    bbox: [i64; 4],
}

/// Serialize to the exchange format (compact JSON).
pub fn layout_to_json(layout: &Layout) -> String {
    let items: Vec<WireItem> = layout
        .items
        .iter()
        .map(|i| WireItem {
            label: &i.label,
            bbox: i.bbox.to_array(),
        })
        .collect();
    serde_json::to_string(&items).expect("layout items always serialize")
}

/// Parse a planner response. Text around the outermost `[ ... ]` is ignored,
/// so fenced or chatty answers are accepted. Labels must match
/// `expected_labels` exactly and in order.
pub fn json_to_layout(
    text: &str,
    expected_labels: &[String],
    canvas: (i64, i64),
) -> Result<Layout, LayoutParseError> {
    let (start, end) = match (text.find('['), text.rfind(']')) {
        (Some(s), Some(e)) if s < e => (s, e),
        _ => return Err(LayoutParseError::NoArray),
    };
    let value: Value = serde_json::from_str(&text[start..=end])
        .map_err(|e| LayoutParseError::Malformed(e.to_string()))?;
    let arr = value
        .as_array()
        .ok_or_else(|| LayoutParseError::Malformed("top level is not an array".into()))?;
    if arr.len() != expected_labels.len() {
        return Err(LayoutParseError::CountMismatch {
            expected: expected_labels.len(),
            found: arr.len(),
        });
    }
    let mut items = Vec::with_capacity(arr.len());
    for (index, (v, expected)) in arr.iter().zip(expected_labels).enumerate() {
        let shape = |reason: &str| LayoutParseError::ItemShape {
            index,
            reason: reason.into(),
        };
        let obj = v.as_object().ok_or_else(|| shape("item is not an object"))?;
        let label = obj
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| shape("missing string label"))?;
        if label != expected {
            return Err(LayoutParseError::LabelMismatch {
                index,
                expected: expected.clone(),
                found: label.to_string(),
            });
        }
        let coords = obj
            .get("bbox")
            .and_then(Value::as_array)
            .ok_or_else(|| shape("missing bbox array"))?;
        if coords.len() != 4 {
            return Err(shape("bbox must have 4 values"));
        }
        let mut c = [0i64; 4];
        for (slot, v) in c.iter_mut().zip(coords) {
            *slot = v
                .as_i64()
                .ok_or(LayoutParseError::NonIntegerCoord { index })?;
        }
        let bbox = BBox::new(c[0], c[1], c[2], c[3])
            .map_err(|_| LayoutParseError::Degenerate { index, bbox: c })?;
        items.push(LayoutItem {
            label: label.to_string(),
            bbox,
        });
    }
    Ok(Layout::new(items, canvas))
}

/// Default planner instruction. Placeholders: `{l}`, `{w}`, `{h}`,
/// `{caption}`, `{labels}`, `{json_template}`.
pub const DEFAULT_PROMPT_TEMPLATE: &str = "<image>Please help me design a layout to place {l} foreground text items over the background of original size w={w}, h={h}. {caption} The foreground text items are {labels}. Place the items carefully to avoid unbalance, overlap, and out-of-bounds. The layout should contain all the text items in given order, in which each item has a bounding box described as [left, top, right, bottom] (all the values are integer numbers). Return the result by filling in the initial JSON file while keeping the label of items unchanged and do not return any extra explanation. The initial JSON is defined as: {json_template}.";

/// The initial JSON handed to the planner: every label with a zero bbox.
pub fn json_template(labels: &[String]) -> String {
    let items: Vec<WireItem> = labels
        .iter()
        .map(|l| WireItem {
            label: l,
            bbox: [0; 4],
        })
        .collect();
    serde_json::to_string(&items).expect("strings serialize")
}

pub fn render_prompt(
    template: &str,
    canvas: (i64, i64),
    caption: &str,
    labels: &[String],
) -> String {
    let label_list = serde_json::to_string(labels).expect("strings serialize");
    template
        .replace("{l}", &labels.len().to_string())
        .replace("{w}", &canvas.0.to_string())
        .replace("{h}", &canvas.1.to_string())
        .replace("{caption}", caption)
        .replace("{labels}", &label_list)
        .replace("{json_template}", &json_template(labels))
}
