use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Integer pixel box `[left, top, right, bottom)` with positive extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub left: i64,
    pub top: i64,
    pub right: i64,
    pub bottom: i64,
}

impl BBox {
    pub fn new(left: i64, top: i64, right: i64, bottom: i64) -> Result<Self> {
        if left >= right || top >= bottom {
            return Err(invalid(format!(
                "degenerate box [{left}, {top}, {right}, {bottom}]"
            )));
        }
        Ok(Self {
            left,
            top,
            right,
            bottom,
        })
    }

    pub fn width(&self) -> i64 {
        self.right - self.left
    }

    pub fn height(&self) -> i64 {
        self.bottom - self.top
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.right.min(other.right) - self.left.max(other.left);
        let h = self.bottom.min(other.bottom) - self.top.max(other.top);
        if w <= 0 || h <= 0 {
            0
        } else {
            w * h
        }
    }

    /// True when the box lies inside a `width` x `height` canvas.
    pub fn within(&self, width: i64, height: i64) -> bool {
        self.left >= 0 && self.top >= 0 && self.right <= width && self.bottom <= height
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.left >= self.left
            && other.top >= self.top
            && other.right <= self.right
            && other.bottom <= self.bottom
    }

    pub fn translated(&self, dx: i64, dy: i64) -> BBox {
        BBox {
            left: self.left + dx,
            top: self.top + dy,
            right: self.right + dx,
            bottom: self.bottom + dy,
        }
    }

    /// Smallest box covering both.
    pub fn union_hull(&self, other: &BBox) -> BBox {
        BBox {
            left: self.left.min(other.left),
            top: self.top.min(other.top),
            right: self.right.max(other.right),
            bottom: self.bottom.max(other.bottom),
        }
    }

    pub fn to_array(self) -> [i64; 4] {
        [self.left, self.top, self.right, self.bottom]
    }
}

impl TryFrom<[i64; 4]> for BBox {
    type Error = crate::Error;

    fn try_from(v: [i64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// `area(a ∩ b) / (area(a ∪ b) + eps)`.
pub fn iou(a: &BBox, b: &BBox, eps: f64) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / (union as f64 + eps)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutItem {
    pub label: String,
    pub bbox: BBox,
}

/// Ordered labelled boxes on a `canvas` of (width, height) pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub items: Vec<LayoutItem>,
    pub canvas: (i64, i64),
}

impl Layout {
    pub fn new(items: Vec<LayoutItem>, canvas: (i64, i64)) -> Self {
        Self { items, canvas }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.items.iter().map(|i| i.bbox).collect()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.label.as_str()).collect()
    }

    pub fn in_bounds(&self) -> bool {
        self.items
            .iter()
            .all(|i| i.bbox.within(self.canvas.0, self.canvas.1))
    }

    pub fn translated(&self, dx: i64, dy: i64) -> Layout {
        Layout {
            items: self
                .items
                .iter()
                .map(|i| LayoutItem {
                    label: i.label.clone(),
                    bbox: i.bbox.translated(dx, dy),
                })
                .collect(),
            canvas: self.canvas,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(l: i64, t: i64, r: i64, bt: i64) -> BBox {
        BBox::new(l, t, r, bt).unwrap()
    }

    #[test]
    fn self_iou_and_disjoint() {
        let a = b(0, 0, 10, 10);
        assert_eq!(iou(&a, &a, 1e-6), 100.0 / (100.0 + 1e-6));
        assert_eq!(iou(&a, &b(10, 0, 20, 10), 1e-6), 0.0);
    }

    #[test]
    fn half_overlap_is_one_third() {
        let v = iou(&b(0, 0, 10, 10), &b(5, 0, 15, 10), 1e-6);
        assert!((v - 50.0 / (150.0 + 1e-6)).abs() < 1e-15);
        assert!((v - 1.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn degenerate_rejected() {
        assert!(BBox::new(300, 200, 100, 400).is_err());
        assert!(BBox::new(0, 0, 0, 5).is_err());
        assert!(serde_json::from_str::<BBox>("[3,0,1,2]").is_err());
        assert_eq!(serde_json::from_str::<BBox>("[0,1,2,3]").unwrap(), b(0, 1, 2, 3));
    }
}
