//! End-to-end inference: pyramid, tiling, batched forward passes, decoding,
//! projection back to the original image and a single global NMS.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{build_anchors, decode, AnchorGrid};
use crate::geometry::{clip_to_image, nms, project_to_original, sort_detections, BoxF, Detection};
use crate::net::{images_to_tensor, DetectorModel, NetError};
use crate::raster::{build_pyramid, tile, Image, PyramidConfig, TilerConfig};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid detect configuration: {0}")]
    Config(String),
    #[error("invalid level selection `{0}`")]
    Levels(String),
}

/// Which pyramid levels take part in detection. Parsed from a comma list
/// of `n`, `a..b` (exclusive), `a..=b` or `n..` (through the last level).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LevelSet {
    listed: BTreeSet<usize>,
    from: Option<usize>,
}

impl LevelSet {
    pub fn all() -> Self {
        Self {
            listed: BTreeSet::new(),
            from: Some(0),
        }
    }

    pub fn only(levels: impl IntoIterator<Item = usize>) -> Self {
        Self {
            listed: levels.into_iter().collect(),
            from: None,
        }
    }

    pub fn from_level(first: usize) -> Self {
        Self {
            listed: BTreeSet::new(),
            from: Some(first),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.listed.is_empty() && self.from.is_none()
    }

    pub fn contains(&self, level: usize) -> bool {
        self.listed.contains(&level) || self.from.is_some_and(|f| level >= f)
    }

    pub fn union(&self, other: &LevelSet) -> LevelSet {
        let from = match (self.from, other.from) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        LevelSet {
            listed: self.listed.union(&other.listed).copied().collect(),
            from,
        }
    }
}

impl FromStr for LevelSet {
    type Err = DetectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DetectError::Levels(s.to_string());
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let mut set = LevelSet::default();
        for part in s.split(',').map(str::trim) {
            if let Some((a, b)) = part.split_once("..=") {
                set.listed.extend(num(a)?..=num(b)?);
            } else if let Some((a, b)) = part.split_once("..") {
                if b.trim().is_empty() {
                    let a = num(a)?;
                    set.from = Some(set.from.map_or(a, |f| f.min(a)));
                } else {
                    set.listed.extend(num(a)?..num(b)?);
                }
            } else {
                set.listed.insert(num(part)?);
            }
        }
        if set.is_empty() {
            return Err(bad());
        }
        Ok(set)
    }
}

impl fmt::Display for LevelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = self.listed.iter().map(|l| l.to_string()).collect();
        if let Some(from) = self.from {
            parts.push(format!("{from}.."));
        }
        write!(f, "{}", parts.join(","))
    }
}

impl Serialize for LevelSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LevelSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Patches per forward pass.
    pub batch_size: usize,
    pub pyramid: PyramidConfig,
    pub tiler: TilerConfig,
    pub levels: LevelSet,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            nms_iou: 0.45,
            batch_size: 16,
            pyramid: PyramidConfig::default(),
            tiler: TilerConfig::default(),
            levels: LevelSet::all(),
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err("detect.score_threshold must lie in [0, 1)".into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err("detect.nms_iou must lie in (0, 1]".into());
        }
        if self.batch_size == 0 {
            return Err("detect.batch_size must be >= 1".into());
        }
        if self.levels.is_empty() {
            return Err("detect.levels must name at least one level".into());
        }
        self.pyramid.validate()?;
        self.tiler.validate()
    }
}

pub fn restrict_levels(config: &DetectConfig, levels: LevelSet) -> Result<DetectConfig, DetectError> {
    if levels.is_empty() {
        return Err(DetectError::Levels(String::new()));
    }
    Ok(DetectConfig {
        levels,
        ..config.clone()
    })
}

pub fn batch_count(patches: usize, batch_size: usize) -> usize {
    patches.div_ceil(batch_size)
}

/// Candidates of one patch in its own frame: one per (anchor, foreground
/// class) with softmax score above `threshold`, in anchor-then-class order.
pub fn decode_patch(conf: &[f32], loc: &[f32], grid: &AnchorGrid, classes: usize, threshold: f64) -> Vec<Detection> {
    let per_cell = grid.boxes_per_cell;
    let cells = grid.feature_side * grid.feature_side;
    let mut out = Vec::new();
    let mut logits = vec![0.0f64; classes];
    for (a, anchor) in grid.boxes.iter().enumerate() {
        let (cell, slot) = (a / per_cell, a % per_cell);
        for (k, z) in logits.iter_mut().enumerate() {
            *z = conf[(slot * classes + k) * cells + cell] as f64;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let mut decoded: Option<Option<BoxF>> = None;
        for (k, &z) in logits.iter().enumerate().skip(1) {
            let score = (z - max).exp() / denom;
            if !(score > threshold) {
                continue;
            }
            let bbox = *decoded.get_or_insert_with(|| {
                let offsets: [f64; 4] = std::array::from_fn(|j| loc[(slot * 4 + j) * cells + cell] as f64);
                let b = decode(&offsets, anchor);
                b.is_valid().then_some(b)
            });
            if let Some(bbox) = bbox {
                out.push(Detection {
                    bbox,
                    class_id: k - 1,
                    score,
                });
            }
        }
    }
    out
}

/// Runs the detector over `patches` in `ceil(P / batch_size)` consecutive
/// batches. Each entry is computed independently, so the result does not
/// depend on the batch size.
pub fn detect_patches_batched(
    model: &DetectorModel,
    patches: &[&Image],
    config: &DetectConfig,
) -> Result<Vec<Vec<Detection>>, DetectError> {
    if config.batch_size == 0 {
        return Err(DetectError::Config("batch_size must be >= 1".into()));
    }
    let grid = build_anchors(&model.config.anchors);
    let classes = model.config.classes_with_background();
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(config.batch_size) {
        let heads = model.forward(&images_to_tensor(chunk)?)?;
        for b in 0..chunk.len() {
            out.push(decode_patch(
                heads.conf.sample(b),
                heads.loc.sample(b),
                &grid,
                classes,
                config.score_threshold,
            ));
        }
    }
    Ok(out)
}

/// Candidates of one patch after projection and clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCandidates {
    pub level: usize,
    pub origin_x: usize,
    pub origin_y: usize,
    pub detections: Vec<Detection>,
}

/// Everything before NMS: per selected patch, its candidates in
/// original-image coordinates, clipped, with empty boxes dropped.
pub fn raw_candidates(
    model: &DetectorModel,
    image: &Image,
    config: &DetectConfig,
) -> Result<Vec<PatchCandidates>, DetectError> {
    config.validate().map_err(DetectError::Config)?;
    let patches: Vec<_> = build_pyramid(image, &config.pyramid)
        .iter()
        .filter(|l| config.levels.contains(l.level))
        .flat_map(|l| tile(l, &config.tiler))
        .collect();
    let images: Vec<&Image> = patches.iter().map(|p| &p.image).collect();
    let per_patch = detect_patches_batched(model, &images, config)?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    Ok(patches
        .iter()
        .zip(per_patch)
        .map(|(p, dets)| PatchCandidates {
            level: p.level,
            origin_x: p.origin_x,
            origin_y: p.origin_y,
            detections: dets
                .into_iter()
                .filter_map(|d| {
                    let projected = project_to_original(&d.bbox, p.origin_x as f64, p.origin_y as f64, p.scale);
                    clip_to_image(&projected, w, h).map(|bbox| Detection { bbox, ..d })
                })
                .collect(),
        })
        .collect())
}

/// Final image-level detections, in the deterministic total order.
pub fn detect_image(model: &DetectorModel, image: &Image, config: &DetectConfig) -> Result<Vec<Detection>, DetectError> {
    let all: Vec<Detection> = raw_candidates(model, image, config)?
        .into_iter()
        .flat_map(|p| p.detections)
        .collect();
    let mut kept = nms(&all, config.nms_iou);
    sort_detections(&mut kept);
    Ok(kept)
}
