//! Axis-aligned boxes, Jaccard overlap, greedy NMS and frame projection.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Axis-aligned box with half-open corners, area `(xmax - xmin) * (ymax - ymin)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BoxF {
    /// Builds a box, returning `None` unless it is finite with positive extent.
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Option<Self> {
        let b = Self {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        b.is_valid().then_some(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            xmin: cx - w / 2.0,
            ymin: cy - h / 2.0,
            xmax: cx + w / 2.0,
            ymax: cy + h / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite())
            && self.xmax > self.xmin
            && self.ymax > self.ymin
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    pub fn intersection_area(&self, other: &BoxF) -> f64 {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// The overlapping region, if it has positive area.
    pub fn intersect(&self, other: &BoxF) -> Option<BoxF> {
        BoxF::new(
            self.xmin.max(other.xmin),
            self.ymin.max(other.ymin),
            self.xmax.min(other.xmax),
            self.ymax.min(other.ymax),
        )
    }

    pub fn scaled(&self, factor: f64) -> BoxF {
        BoxF {
            xmin: self.xmin * factor,
            ymin: self.ymin * factor,
            xmax: self.xmax * factor,
            ymax: self.ymax * factor,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BoxF {
        BoxF {
            xmin: self.xmin + dx,
            ymin: self.ymin + dy,
            xmax: self.xmax + dx,
            ymax: self.ymax + dy,
        }
    }

    fn coords(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoxF, b: &BoxF) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BoxF,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

/// Total order used everywhere detections are ranked: score descending,
/// then corners ascending, then class ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| {
            a.bbox
                .coords()
                .iter()
                .zip(b.bbox.coords().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.class_id.cmp(&b.class_id))
}

pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(detection_order);
}

/// Greedy per-class non-maximum suppression. A box is dropped when its IoU
/// with an already kept box of the same class exceeds `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sort_detections(&mut sorted);
    let mut kept: Vec<Detection> = Vec::new();
    for det in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == det.class_id && iou(&k.bbox, &det.bbox) > iou_threshold);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// Maps a box from a patch frame at pyramid scale `scale` back onto the
/// original image.
pub fn project_to_original(b: &BoxF, origin_x: f64, origin_y: f64, scale: f64) -> BoxF {
    BoxF {
        xmin: (b.xmin + origin_x) / scale,
        ymin: (b.ymin + origin_y) / scale,
        xmax: (b.xmax + origin_x) / scale,
        ymax: (b.ymax + origin_y) / scale,
    }
}

/// Clamps to `[0,width]x[0,height]`; `None` when nothing of positive area remains.
pub fn clip_to_image(b: &BoxF, width: f64, height: f64) -> Option<BoxF> {
    let clamp = |v: f64, hi: f64| v.clamp(0.0, hi);
    let clipped = BoxF {
        xmin: clamp(b.xmin, width),
        ymin: clamp(b.ymin, height),
        xmax: clamp(b.xmax, width),
        ymax: clamp(b.ymax, height),
    };
    clipped.is_valid().then_some(clipped)
}
