//! Synthetic sign scenes, training-patch preparation, crop augmentation and
//! JSON-lines annotation I/O.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::AnchorSpec;
use crate::geometry::BoxF;
use crate::raster::{self, build_pyramid, decode_ppm, encode_ppm, resize_bilinear, Image, PpmError, PyramidConfig};
use crate::seed::{task_rng, Rng};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: PpmError,
    },
    #[error("{path}:{line}: {message}")]
    Annotation {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{image}: box {index} {bbox:?} lies outside the {width}x{height} image")]
    OutOfBounds {
        image: String,
        index: usize,
        bbox: BoxF,
        width: usize,
        height: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub image_side: usize,
    /// Foreground classes `K`.
    pub class_count: usize,
    pub signs_min: usize,
    pub signs_max: usize,
    pub sign_side_min: usize,
    pub sign_side_max: usize,
    /// Amplitude of uniform per-pixel noise, in 8-bit levels.
    pub background_noise: u8,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_side: 512,
            class_count: 5,
            signs_min: 2,
            signs_max: 5,
            sign_side_min: 10,
            sign_side_max: 160,
            background_noise: 20,
            seed: 42,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.class_count == 0 {
            return Err("scene.class_count must be >= 1".into());
        }
        if self.signs_min > self.signs_max {
            return Err("scene.signs_min exceeds scene.signs_max".into());
        }
        if self.sign_side_min < 2 || self.sign_side_min > self.sign_side_max {
            return Err("scene: need 2 <= sign_side_min <= sign_side_max".into());
        }
        if self.sign_side_max > self.image_side {
            return Err("scene.sign_side_max exceeds scene.image_side".into());
        }
        Ok(())
    }
}

/// One annotated object, integer-pixel corners in original-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(flatten)]
    pub bbox: BoxF,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "image")]
    pub image_path: String,
    #[serde(rename = "boxes")]
    pub objects: Vec<AnnotatedObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignShape {
    Disk,
    Square,
    Triangle,
    Diamond,
    Ring,
}

const SHAPES: [SignShape; 5] = [
    SignShape::Disk,
    SignShape::Square,
    SignShape::Triangle,
    SignShape::Diamond,
    SignShape::Ring,
];

const PALETTE: [[u8; 3]; 8] = [
    [215, 30, 35],
    [30, 165, 60],
    [35, 70, 220],
    [240, 200, 20],
    [200, 40, 200],
    [20, 190, 200],
    [245, 120, 15],
    [250, 250, 250],
];

/// Shape and color drawn for a class.
pub fn class_style(class_id: usize) -> (SignShape, [u8; 3]) {
    (
        SHAPES[class_id % SHAPES.len()],
        PALETTE[class_id % PALETTE.len()],
    )
}

impl SignShape {
    /// Whether the unit-square point `(u, v)` is covered.
    fn covers(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            SignShape::Disk => r2 <= 0.25,
            SignShape::Square => true,
            SignShape::Triangle => du.abs() <= v / 2.0,
            SignShape::Diamond => du.abs() + dv.abs() <= 0.5,
            SignShape::Ring => r2 <= 0.25 && r2 >= 0.25 * 0.36,
        }
    }
}

/// Pixel mask of a sign of side `side`, row-major `side`×`side`.
pub fn sign_mask(shape: SignShape, side: usize) -> Vec<bool> {
    let s = side as f64;
    (0..side * side)
        .map(|i| {
            let (x, y) = (i % side, i / side);
            shape.covers((x as f64 + 0.5) / s, (y as f64 + 0.5) / s)
        })
        .collect()
}

fn noisy(rng: &mut Rng, value: f64, amplitude: u8) -> u8 {
    let a = amplitude as f64;
    let n = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    (value + n).round().clamp(0.0, 255.0) as u8
}

/// Renders scene `index`. The result depends only on `(spec.seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> (Image, Annotation) {
    let mut rng = task_rng(spec.seed, "scene", &[index as u64]);
    let side = spec.image_side;

    // desaturated background: gray base, small tint, linear gradient, noise
    let base: f64 = rng.random_range(70.0..180.0);
    let tint: [f64; 3] = [
        rng.random_range(-15.0..15.0),
        rng.random_range(-15.0..15.0),
        rng.random_range(-15.0..15.0),
    ];
    let (gx, gy): (f64, f64) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
    let mut img = Image::new(side, side).expect("positive side");
    for y in 0..side {
        for x in 0..side {
            let ramp = gx * (x as f64 / side as f64 - 0.5) + gy * (y as f64 / side as f64 - 0.5);
            let px = [
                noisy(&mut rng, base + tint[0] + ramp, spec.background_noise),
                noisy(&mut rng, base + tint[1] + ramp, spec.background_noise),
                noisy(&mut rng, base + tint[2] + ramp, spec.background_noise),
            ];
            img.put(x, y, px);
        }
    }

    let count = rng.random_range(spec.signs_min..=spec.signs_max);
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    let mut objects = Vec::new();
    const MARGIN: usize = 4;
    for _ in 0..count {
        let sign_side = rng.random_range(spec.sign_side_min..=spec.sign_side_max);
        let class_id = rng.random_range(0..spec.class_count);
        let mut spot = None;
        for _ in 0..100 {
            let x = rng.random_range(0..=side - sign_side);
            let y = rng.random_range(0..=side - sign_side);
            let clear = placed.iter().all(|&(px, py, ps)| {
                x + sign_side + MARGIN <= px
                    || px + ps + MARGIN <= x
                    || y + sign_side + MARGIN <= py
                    || py + ps + MARGIN <= y
            });
            if clear {
                spot = Some((x, y));
                break;
            }
        }
        let Some((x0, y0)) = spot else { continue };
        placed.push((x0, y0, sign_side));

        let (shape, color) = class_style(class_id);
        let shade: f64 = rng.random_range(-15.0..15.0);
        let mask = sign_mask(shape, sign_side);
        let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = (x0 + i % sign_side, y0 + i / sign_side);
            let px = [
                noisy(&mut rng, color[0] as f64 + shade, spec.background_noise / 2),
                noisy(&mut rng, color[1] as f64 + shade, spec.background_noise / 2),
                noisy(&mut rng, color[2] as f64 + shade, spec.background_noise / 2),
            ];
            img.put(x, y, px);
            xmin = xmin.min(x);
            ymin = ymin.min(y);
            xmax = xmax.max(x + 1);
            ymax = ymax.max(y + 1);
        }
        objects.push(AnnotatedObject {
            class_id,
            bbox: BoxF::new(xmin as f64, ymin as f64, xmax as f64, ymax as f64).expect("non-empty mask"),
        });
    }
    let annotation = Annotation {
        image_path: scene_file_name(index),
        objects,
    };
    (img, annotation)
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.ppm")
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<(), SynthError> {
    let mut out = Vec::new();
    for a in annotations {
        serde_json::to_writer(&mut out, a).expect("annotation serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>, SynthError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| SynthError::Annotation {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let a: Annotation = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        for (k, o) in a.objects.iter().enumerate() {
            if !o.bbox.is_valid() {
                return Err(err(format!("box {k} is not a finite box with positive extent")));
            }
        }
        out.push(a);
    }
    Ok(out)
}

/// Writes `count` scenes plus `annotations.jsonl` into `dir`.
/// Writes scenes `first..first + count`; disjoint ranges under one seed give disjoint splits.
pub fn write_dataset(spec: &SceneSpec, first: usize, count: usize, dir: &Path) -> Result<Vec<Annotation>, SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let annotations = (first..first + count)
        .into_par_iter()
        .map(|i| {
            let (img, ann) = generate_scene(spec, i);
            let path = dir.join(&ann.image_path);
            fs::write(&path, encode_ppm(&img)).map_err(io_err(&path))?;
            Ok(ann)
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    write_annotations(&dir.join(ANNOTATIONS_FILE), &annotations)?;
    Ok(annotations)
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Image,
    pub annotation: Annotation,
}

pub fn load_image(path: &Path) -> Result<Image, SynthError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes).map_err(|source| SynthError::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Loads `annotations.jsonl` and every image it names from `dir`.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>, SynthError> {
    let annotations = read_annotations(&dir.join(ANNOTATIONS_FILE))?;
    annotations
        .into_par_iter()
        .map(|annotation| {
            let image = load_image(&dir.join(&annotation.image_path))?;
            Ok(LabeledImage { image, annotation })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(flatten)]
    pub bbox: BoxF,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_index: usize,
    pub level: usize,
    pub origin_x: usize,
    pub origin_y: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image: Image,
    /// Labeled boxes in patch coordinates.
    pub boxes: Vec<LabeledBox>,
    pub provenance: Provenance,
}

/// Fraction of an object's area that must fall inside a patch for it to be
/// labeled there.
pub const MIN_VISIBLE_FRACTION: f64 = 0.5;
/// Background patches per positive patch.
pub const BACKGROUND_RATIO: usize = 2;

fn patch_rect(x: usize, y: usize, side: usize) -> BoxF {
    BoxF {
        xmin: x as f64,
        ymin: y as f64,
        xmax: (x + side) as f64,
        ymax: (y + side) as f64,
    }
}

/// Labels of a patch: every object with strictly more than half its area
/// inside, clipped to the patch and shifted into patch coordinates.
pub fn patch_labels(objects: &[(usize, BoxF)], rect: &BoxF) -> Vec<LabeledBox> {
    objects
        .iter()
        .filter_map(|&(class_id, b)| {
            let inside = b.intersect(rect)?;
            (inside.area() / b.area() > MIN_VISIBLE_FRACTION).then(|| LabeledBox {
                class_id,
                bbox: inside.translated(-rect.xmin, -rect.ymin),
            })
        })
        .collect()
}

/// Builds the training set: one patch centered on each object at every
/// pyramid level where the object's longest side falls in the anchors'
/// matchable band, plus `BACKGROUND_RATIO` object-free patches per positive.
pub fn prep_training_patches(
    dataset: &[LabeledImage],
    pyramid: &PyramidConfig,
    anchors: &AnchorSpec,
    seed: u64,
) -> Result<Vec<TrainingSample>, SynthError> {
    let side = anchors.input_side;
    let (band_lo, band_hi) = anchors.matchable_band();
    for item in dataset {
        let (w, h) = (item.image.width() as f64, item.image.height() as f64);
        for (index, o) in item.annotation.objects.iter().enumerate() {
            let b = o.bbox;
            if !(b.is_valid() && b.xmin >= 0.0 && b.ymin >= 0.0 && b.xmax <= w && b.ymax <= h) {
                return Err(SynthError::OutOfBounds {
                    image: item.annotation.image_path.clone(),
                    index,
                    bbox: b,
                    width: item.image.width(),
                    height: item.image.height(),
                });
            }
        }
    }

    // level dimensions per image, for background sampling
    let per_image: Vec<(Vec<TrainingSample>, Vec<(usize, usize, f64)>)> = dataset
        .par_iter()
        .enumerate()
        .map(|(image_index, item)| {
            let levels = build_pyramid(&item.image, pyramid);
            let mut positives = Vec::new();
            for level in &levels {
                let objects: Vec<(usize, BoxF)> = item
                    .annotation
                    .objects
                    .iter()
                    .map(|o| (o.class_id, o.bbox.scaled(level.scale)))
                    .collect();
                let (lw, lh) = (level.image.width(), level.image.height());
                for &(_, b) in &objects {
                    let longest = b.width().max(b.height());
                    if longest < band_lo || longest > band_hi {
                        continue;
                    }
                    let (cx, cy) = b.center();
                    let ox = ((cx - side as f64 / 2.0).round().max(0.0) as usize).min(lw.saturating_sub(side));
                    let oy = ((cy - side as f64 / 2.0).round().max(0.0) as usize).min(lh.saturating_sub(side));
                    let rect = patch_rect(ox, oy, side);
                    positives.push(TrainingSample {
                        image: level.image.crop_padded(ox as i64, oy as i64, side, side),
                        boxes: patch_labels(&objects, &rect),
                        provenance: Provenance {
                            image_index,
                            level: level.level,
                            origin_x: ox,
                            origin_y: oy,
                        },
                    });
                }
            }
            let dims = levels
                .iter()
                .map(|l| (l.image.width(), l.image.height(), l.scale))
                .collect();
            (positives, dims)
        })
        .collect();

    let mut samples = Vec::new();
    let mut level_dims = Vec::new();
    for (positives, dims) in per_image {
        samples.extend(positives);
        level_dims.push(dims);
    }

    // background origins are drawn from box geometry alone, then cut out
    let wanted = BACKGROUND_RATIO * samples.len();
    let mut rng = task_rng(seed, "background", &[]);
    let mut picks: Vec<Provenance> = Vec::with_capacity(wanted);
    let max_attempts = 1000 * wanted.max(1);
    let mut attempts = 0;
    while picks.len() < wanted && attempts < max_attempts && !dataset.is_empty() {
        attempts += 1;
        let image_index = rng.random_range(0..dataset.len());
        let dims = &level_dims[image_index];
        let level = rng.random_range(0..dims.len());
        let (lw, lh, scale) = dims[level];
        let ox = rng.random_range(0..=lw.saturating_sub(side));
        let oy = rng.random_range(0..=lh.saturating_sub(side));
        let rect = patch_rect(ox, oy, side);
        let clear = dataset[image_index]
            .annotation
            .objects
            .iter()
            .all(|o| o.bbox.scaled(scale).intersection_area(&rect) == 0.0);
        if clear {
            picks.push(Provenance {
                image_index,
                level,
                origin_x: ox,
                origin_y: oy,
            });
        }
    }
    let backgrounds: Vec<TrainingSample> = picks
        .par_iter()
        .map(|p| {
            let item = &dataset[p.image_index];
            let mut level_img = item.image.clone();
            for _ in 0..p.level {
                level_img = raster::downsample(&level_img, pyramid.ratio).expect("validated ratio");
            }
            TrainingSample {
                image: level_img.crop_padded(p.origin_x as i64, p.origin_y as i64, side, side),
                boxes: Vec::new(),
                provenance: *p,
            }
        })
        .collect();
    samples.extend(backgrounds);
    Ok(samples)
}

/// Crop window in patch pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub min_scale: f64,
    pub max_scale: f64,
    pub min_aspect: f64,
    pub max_aspect: f64,
    /// A box survives a crop when at least this fraction of it is inside.
    pub min_kept_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            min_scale: 0.5,
            max_scale: 1.0,
            min_aspect: 0.75,
            max_aspect: 4.0 / 3.0,
            min_kept_fraction: 0.7,
        }
    }
}

pub fn sample_crop(rng: &mut Rng, side: usize, config: &AugmentConfig) -> CropRect {
    let scale = rng.random_range(config.min_scale..=config.max_scale);
    let aspect: f64 = rng.random_range(config.min_aspect..=config.max_aspect);
    let s = side as f64;
    let width = ((s * scale * aspect.sqrt()).round() as usize).clamp(1, side);
    let height = ((s * scale / aspect.sqrt()).round() as usize).clamp(1, side);
    CropRect {
        x: rng.random_range(0..=side - width),
        y: rng.random_range(0..=side - height),
        width,
        height,
    }
}

/// Cuts `crop` out of the sample and stretches it back to full patch size.
/// Boxes keep their clipped part when enough of them is inside the crop.
pub fn augment_with_crop(sample: &TrainingSample, crop: CropRect, config: &AugmentConfig) -> TrainingSample {
    let (side_w, side_h) = (sample.image.width(), sample.image.height());
    let sx = side_w as f64 / crop.width as f64;
    let sy = side_h as f64 / crop.height as f64;
    let window = sample
        .image
        .crop_padded(crop.x as i64, crop.y as i64, crop.width, crop.height);
    let image = resize_bilinear(&window, side_w, side_h, sx, sy);
    let rect = BoxF {
        xmin: crop.x as f64,
        ymin: crop.y as f64,
        xmax: (crop.x + crop.width) as f64,
        ymax: (crop.y + crop.height) as f64,
    };
    let boxes = sample
        .boxes
        .iter()
        .filter_map(|lb| {
            let inside = lb.bbox.intersect(&rect)?;
            (inside.area() / lb.bbox.area() >= config.min_kept_fraction).then(|| LabeledBox {
                class_id: lb.class_id,
                bbox: BoxF {
                    xmin: (inside.xmin - rect.xmin) * sx,
                    ymin: (inside.ymin - rect.ymin) * sy,
                    xmax: (inside.xmax - rect.xmin) * sx,
                    ymax: (inside.ymax - rect.ymin) * sy,
                },
            })
        })
        .collect();
    TrainingSample {
        image,
        boxes,
        provenance: sample.provenance,
    }
}

pub fn augment(sample: &TrainingSample, seed: u64) -> TrainingSample {
    let config = AugmentConfig::default();
    let mut rng = task_rng(seed, "augment", &[]);
    let crop = sample_crop(&mut rng, sample.image.width(), &config);
    augment_with_crop(sample, crop, &config)
}

/// Directory layout written by `prep`: one PPM per sample plus a JSON-lines index.
pub fn write_samples(dir: &Path, samples: &[TrainingSample]) -> Result<(), SynthError> {
    #[derive(Serialize)]
    struct Record<'a> {
        image: String,
        boxes: &'a [LabeledBox],
        #[serde(flatten)]
        provenance: Provenance,
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut index = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("patch_{i:06}.ppm");
        let path: PathBuf = dir.join(&name);
        fs::write(&path, encode_ppm(&s.image)).map_err(io_err(&path))?;
        serde_json::to_writer(
            &mut index,
            &Record {
                image: name,
                boxes: &s.boxes,
                provenance: s.provenance,
            },
        )
        .expect("record serializes");
        index.push(b'\n');
    }
    let path = dir.join("samples.jsonl");
    fs::write(&path, index).map_err(io_err(&path))
}
