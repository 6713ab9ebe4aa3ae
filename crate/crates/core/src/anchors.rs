//! Default boxes on the single detection feature map, offset coding, and
//! threshold matching of ground truth to default boxes.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BoxF};

/// Geometry of the default-box lattice.
///
/// Per cell there are two squares (sides `s1` and `s2`) followed by one box
/// per aspect ratio `R` of width `s1·√R` and height `s1/√R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSpec {
    pub input_side: usize,
    pub feature_side: usize,
    /// `s1 = small_fraction * input_side`.
    pub small_fraction: f64,
    /// `s2 = sqrt(s1 * large_fraction * input_side)`.
    pub large_fraction: f64,
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            input_side: 200,
            feature_side: 25,
            small_fraction: 0.1,
            large_fraction: 0.2,
            aspect_ratios: vec![2.0, 3.0, 0.5, 1.0 / 3.0],
        }
    }
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.feature_side == 0 || self.input_side % self.feature_side != 0 {
            return Err(format!(
                "anchors.input_side ({}) must be a multiple of anchors.feature_side ({})",
                self.input_side, self.feature_side
            ));
        }
        if !(self.small_fraction > 0.0 && self.small_fraction < self.large_fraction) {
            return Err("anchors: need 0 < small_fraction < large_fraction".into());
        }
        if self.aspect_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err("anchors.aspect_ratios must be positive".into());
        }
        Ok(())
    }

    pub fn cell_stride(&self) -> usize {
        self.input_side / self.feature_side
    }

    pub fn s1(&self) -> f64 {
        self.small_fraction * self.input_side as f64
    }

    pub fn s2(&self) -> f64 {
        (self.s1() * self.large_fraction * self.input_side as f64).sqrt()
    }

    pub fn boxes_per_cell(&self) -> usize {
        2 + self.aspect_ratios.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.boxes_per_cell() * self.feature_side * self.feature_side
    }

    /// Longest-side range `[s1/√2, 2√2·s1]` of objects the default boxes can reach.
    pub fn matchable_band(&self) -> (f64, f64) {
        let s1 = self.s1();
        (s1 / 2f64.sqrt(), 2.0 * 2f64.sqrt() * s1)
    }
}

/// All default boxes of one patch, row-major over cells, slot-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub boxes: Vec<BoxF>,
    pub boxes_per_cell: usize,
    pub feature_side: usize,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `(row, column, slot)` of an anchor index.
    pub fn position(&self, index: usize) -> (usize, usize, usize) {
        let cell = index / self.boxes_per_cell;
        (
            cell / self.feature_side,
            cell % self.feature_side,
            index % self.boxes_per_cell,
        )
    }
}

pub fn build_anchors(spec: &AnchorSpec) -> AnchorGrid {
    let stride = spec.cell_stride() as f64;
    let s1 = spec.s1();
    let s2 = spec.s2();
    let mut shapes = vec![(s1, s1), (s2, s2)];
    shapes.extend(spec.aspect_ratios.iter().map(|r| (s1 * r.sqrt(), s1 / r.sqrt())));

    let mut boxes = Vec::with_capacity(spec.anchor_count());
    for i in 0..spec.feature_side {
        let cy = (i as f64 + 0.5) * stride;
        for j in 0..spec.feature_side {
            let cx = (j as f64 + 0.5) * stride;
            boxes.extend(shapes.iter().map(|&(w, h)| BoxF::from_center(cx, cy, w, h)));
        }
    }
    AnchorGrid {
        boxes,
        boxes_per_cell: shapes.len(),
        feature_side: spec.feature_side,
    }
}

/// Center/log-size offsets of `gt` relative to `anchor`.
pub fn encode(gt: &BoxF, anchor: &BoxF) -> [f64; 4] {
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode`]. The result may be degenerate for extreme offsets.
pub fn decode(offsets: &[f64; 4], anchor: &BoxF) -> BoxF {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BoxF::from_center(
        offsets[0] * aw + ax,
        offsets[1] * ah + ay,
        aw * offsets[2].exp(),
        ah * offsets[3].exp(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Per anchor: the matched ground-truth index, or `None` for background.
    pub assignment: Vec<Option<usize>>,
    pub matched_count: usize,
}

/// Assigns each anchor whose best IoU strictly exceeds `threshold` to that
/// ground truth (lowest index on ties). There is no forced best match.
pub fn match_anchors(gt_boxes: &[BoxF], grid: &AnchorGrid, threshold: f64) -> MatchResult {
    let mut assignment = vec![None; grid.len()];
    let mut matched_count = 0;
    if gt_boxes.is_empty() {
        return MatchResult {
            assignment,
            matched_count,
        };
    }
    for (slot, anchor) in assignment.iter_mut().zip(&grid.boxes) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gt_boxes.iter().enumerate() {
            let overlap = iou(gt, anchor);
            if best.is_none_or(|(_, v)| overlap > v) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, overlap)) = best {
            if overlap > threshold {
                *slot = Some(g);
                matched_count += 1;
            }
        }
    }
    MatchResult {
        assignment,
        matched_count,
    }
}
