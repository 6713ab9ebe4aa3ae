//! Multibox objective, hard negative mining, SGD and the training loop.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{build_anchors, encode, match_anchors, AnchorGrid, MatchResult};
use crate::geometry::BoxF;
use crate::net::{images_to_tensor, init_weights, DetectorModel, Gradients, ModelConfig, NetError, Scalar, Tensor};
use crate::seed::{derive_seed, task_rng};
use crate::synth::{augment, LabeledBox, TrainingSample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("loss: {0}")]
    Shape(String),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },
    #[error("training needs at least one sample")]
    NoSamples,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{0}: {1}")]
    Csv(String, #[source] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the localization term.
    pub lambda: f64,
    pub match_threshold: f64,
    /// Negatives mined per positive.
    pub neg_pos_ratio: usize,
    /// Negatives mined from a batch with no positives.
    pub min_negatives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            match_threshold: 0.5,
            neg_pos_ratio: 3,
            min_negatives: 8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err("loss.lambda must be positive".into());
        }
        if !(0.0..1.0).contains(&self.match_threshold) {
            return Err("loss.match_threshold must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_drop_iteration: usize,
    pub dropped_lr: f64,
    pub total_iterations: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment_probability: f64,
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale schedule sized for a few CPU minutes.
    fn default() -> Self {
        Self {
            initial_lr: 0.002,
            lr_drop_iteration: 1500,
            dropped_lr: 0.0002,
            total_iterations: 2000,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 8,
            augment_probability: 0.5,
            log_interval: 10,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// The published schedule.
    pub fn published() -> Self {
        Self {
            initial_lr: 0.001,
            lr_drop_iteration: 40_000,
            dropped_lr: 0.0001,
            total_iterations: 70_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.initial_lr > 0.0 && self.dropped_lr > 0.0) {
            return Err("train: learning rates must be positive".into());
        }
        if self.total_iterations > 0 && self.lr_drop_iteration >= self.total_iterations {
            return Err("train.lr_drop_iteration must be below train.total_iterations".into());
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err("train.batch_size and train.log_interval must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return Err("train.augment_probability must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.lr_drop_iteration {
            self.initial_lr
        } else {
            self.dropped_lr
        }
    }
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Loss value, its parts (already divided by `N`) and head gradients.
#[derive(Debug, Clone)]
pub struct LossOutput<T: Scalar = f32> {
    pub loss: f64,
    pub conf_loss: f64,
    pub loc_loss: f64,
    pub matched: usize,
    pub negatives: usize,
    pub grad_conf: Tensor<T>,
    pub grad_loc: Tensor<T>,
}

/// Layout helper for `(B, n·c, F, F)` head tensors.
#[derive(Clone, Copy)]
struct HeadLayout {
    per_cell: usize,
    classes: usize,
    cells: usize,
}

impl HeadLayout {
    fn anchors(&self) -> usize {
        self.cells * self.per_cell
    }

    /// Offset of `(anchor, channel)` inside one sample, with `width` channels per slot.
    fn offset(&self, anchor: usize, channel: usize, width: usize) -> usize {
        let cell = anchor / self.per_cell;
        let slot = anchor % self.per_cell;
        (slot * width + channel) * self.cells + cell
    }
}

fn log_softmax_terms<T: Scalar>(conf: &[T], layout: HeadLayout, anchor: usize) -> (Vec<f64>, f64) {
    let logits: Vec<f64> = (0..layout.classes)
        .map(|k| conf[layout.offset(anchor, k, layout.classes)].to_f64())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (logits, lse)
}

/// Background cross-entropy `-log p_background` per anchor of each sample.
pub fn background_scores<T: Scalar>(conf: &Tensor<T>, per_cell: usize) -> Vec<f64> {
    let cells = conf.height() * conf.width();
    let layout = HeadLayout {
        per_cell,
        classes: conf.channels() / per_cell,
        cells,
    };
    let mut out = Vec::with_capacity(conf.batch() * layout.anchors());
    for b in 0..conf.batch() {
        let sample = conf.sample(b);
        for a in 0..layout.anchors() {
            let (logits, lse) = log_softmax_terms(sample, layout, a);
            out.push(lse - logits[0]);
        }
    }
    out
}

/// The `count` background candidates with the largest scores, ties broken
/// by lower index. Returned in rank order.
pub fn top_negatives(scores: &[f64], is_candidate: &[bool], count: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| is_candidate[i]).collect();
    let order = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let count = count.min(candidates.len());
    if count == 0 {
        return Vec::new();
    }
    if count < candidates.len() {
        candidates.select_nth_unstable_by(count - 1, order);
        candidates.truncate(count);
    }
    candidates.sort_unstable_by(order);
    candidates
}

/// Hard negatives over a batch: background-assigned anchors ranked by
/// `-log p_background`, at most `ratio·N` of them. Indices are
/// `sample · anchors + anchor`.
pub fn hard_negatives<T: Scalar>(conf: &Tensor<T>, matches: &[MatchResult], per_cell: usize, ratio: usize) -> Vec<usize> {
    let positives: usize = matches.iter().map(|m| m.matched_count).sum();
    let scores = background_scores(conf, per_cell);
    let is_candidate: Vec<bool> = matches
        .iter()
        .flat_map(|m| m.assignment.iter().map(Option::is_none))
        .collect();
    top_negatives(&scores, &is_candidate, ratio * positives)
}

/// Eq. 1 multibox loss over a batch, with per-batch hard negative mining.
pub fn multibox_loss<T: Scalar>(
    conf: &Tensor<T>,
    loc: &Tensor<T>,
    grid: &AnchorGrid,
    ground_truth: &[Vec<LabeledBox>],
    config: &LossConfig,
) -> Result<LossOutput<T>, TrainError> {
    let per_cell = grid.boxes_per_cell;
    let side = grid.feature_side;
    let batch = conf.batch();
    if conf.height() != side || conf.width() != side || loc.shape() != [batch, per_cell * 4, side, side] {
        return Err(TrainError::Shape(format!(
            "predictions {:?} / {:?} do not fit a {side}x{side} grid with {per_cell} anchors per cell",
            conf.shape(),
            loc.shape()
        )));
    }
    if conf.channels() % per_cell != 0 || conf.channels() / per_cell < 2 {
        return Err(TrainError::Shape(format!("conf has {} channels", conf.channels())));
    }
    if ground_truth.len() != batch {
        return Err(TrainError::Shape(format!(
            "{} ground-truth lists for a batch of {batch}",
            ground_truth.len()
        )));
    }
    let layout = HeadLayout {
        per_cell,
        classes: conf.channels() / per_cell,
        cells: side * side,
    };
    for gts in ground_truth {
        if let Some(b) = gts.iter().find(|b| b.class_id + 1 >= layout.classes) {
            return Err(TrainError::Shape(format!(
                "ground-truth class {} outside the {} foreground classes",
                b.class_id,
                layout.classes - 1
            )));
        }
    }

    let matches: Vec<MatchResult> = ground_truth
        .iter()
        .map(|gts| {
            let boxes: Vec<BoxF> = gts.iter().map(|b| b.bbox).collect();
            match_anchors(&boxes, grid, config.match_threshold)
        })
        .collect();
    let positives: usize = matches.iter().map(|m| m.matched_count).sum();
    let scores = background_scores(conf, per_cell);
    let is_candidate: Vec<bool> = matches
        .iter()
        .flat_map(|m| m.assignment.iter().map(Option::is_none))
        .collect();
    let wanted = if positives > 0 {
        config.neg_pos_ratio * positives
    } else {
        config.min_negatives
    };
    let negatives = top_negatives(&scores, &is_candidate, wanted);
    let norm = positives.max(1) as f64;

    let mut grad_conf = vec![0.0f64; conf.len()];
    let mut grad_loc = vec![0.0f64; loc.len()];
    let conf_stride = conf.sample_len();
    let loc_stride = loc.sample_len();
    let mut conf_sum = 0.0;
    let mut loc_sum = 0.0;

    let add_ce = |b: usize, a: usize, target: usize, grad: &mut Vec<f64>| {
        let sample = conf.sample(b);
        let (logits, lse) = log_softmax_terms(sample, layout, a);
        for (k, &z) in logits.iter().enumerate() {
            let p = (z - lse).exp();
            let onehot = if k == target { 1.0 } else { 0.0 };
            grad[b * conf_stride + layout.offset(a, k, layout.classes)] += (p - onehot) / norm;
        }
        lse - logits[target]
    };

    for (b, m) in matches.iter().enumerate() {
        let loc_sample = loc.sample(b);
        for (a, assigned) in m.assignment.iter().enumerate() {
            let Some(g) = *assigned else { continue };
            let gt = ground_truth[b][g];
            conf_sum += add_ce(b, a, gt.class_id + 1, &mut grad_conf);
            let target = encode(&gt.bbox, &grid.boxes[a]);
            for (j, t) in target.iter().enumerate() {
                let off = layout.offset(a, j, 4);
                let d = loc_sample[off].to_f64() - t;
                loc_sum += smooth_l1(d);
                grad_loc[b * loc_stride + off] += config.lambda * smooth_l1_grad(d) / norm;
            }
        }
    }
    let anchors = layout.anchors();
    for &n in &negatives {
        conf_sum += add_ce(n / anchors, n % anchors, 0, &mut grad_conf);
    }

    let conf_loss = conf_sum / norm;
    let loc_loss = loc_sum / norm;
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
    Ok(LossOutput {
        loss: conf_loss + config.lambda * loc_loss,
        conf_loss,
        loc_loss,
        matched: positives,
        negatives: negatives.len(),
        grad_conf: Tensor::from_vec(conf.shape(), cast(grad_conf))?,
        grad_loc: Tensor::from_vec(loc.shape(), cast(grad_loc))?,
    })
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocity: Gradients,
}

impl OptState {
    pub fn new(model: &DetectorModel) -> Self {
        Self {
            velocity: Gradients::zeros_like(model),
        }
    }
}

/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(
    model: &mut DetectorModel,
    grads: &Gradients,
    state: &mut OptState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if grads.layers.len() != model.layers.len() || state.velocity.layers.len() != model.layers.len() {
        return Err(TrainError::Shape("gradient and model layer counts differ".into()));
    }
    if !grads.all_finite() {
        return Err(TrainError::NonFinite {
            what: "gradient",
            iteration: 0,
        });
    }
    let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    let update = |p: &mut [f32], g: &[f32], v: &mut [f32]| {
        for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = m * *v + (g + wd * *p);
            *p -= lr * *v;
        }
    };
    for ((layer, (gw, gb)), (vw, vb)) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.velocity.layers.iter_mut())
    {
        if layer.weight.shape() != gw.shape() || layer.bias.len() != gb.len() {
            return Err(TrainError::Shape(format!("gradient shape mismatch in {}", layer.name)));
        }
        update(layer.weight.data_mut(), gw.data(), vw.data_mut());
        update(&mut layer.bias, gb, vb);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub conf_loss: f64,
    pub loc_loss: f64,
    pub matched_anchors: usize,
    /// L2 norm of the batch gradient before weight decay; progress output
    /// only, not part of the CSV log.
    #[serde(skip)]
    pub grad_norm: f64,
}

pub struct TrainOutput {
    pub model: DetectorModel,
    pub log: Vec<LossRecord>,
}

/// Sample indices for every batch slot, reshuffled at each epoch boundary.
struct Schedule {
    seed: u64,
    len: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Schedule {
    fn new(seed: u64, len: usize) -> Self {
        let mut s = Self {
            seed,
            len,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut task_rng(self.seed, "shuffle", &[self.epoch]));
        self.pos = 0;
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.len {
            self.epoch += 1;
            self.shuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One optimization step's worth of work: loss and summed gradients.
pub fn batch_gradients(
    model: &DetectorModel,
    grid: &AnchorGrid,
    batch: &[TrainingSample],
    loss_config: &LossConfig,
) -> Result<(LossOutput, Gradients), TrainError> {
    let traced = batch
        .par_iter()
        .map(|s| model.forward_traced(&images_to_tensor(&[&s.image])?))
        .collect::<Result<Vec<_>, NetError>>()?;
    let (outs, traces): (Vec<_>, Vec<_>) = traced.into_iter().unzip();
    let conf = Tensor::stack(&outs.iter().map(|o| o.conf.clone()).collect::<Vec<_>>())?;
    let loc = Tensor::stack(&outs.into_iter().map(|o| o.loc).collect::<Vec<_>>())?;
    let gts: Vec<Vec<LabeledBox>> = batch.iter().map(|s| s.boxes.clone()).collect();
    let loss = multibox_loss(&conf, &loc, grid, &gts, loss_config)?;

    let per_sample = traces
        .into_par_iter()
        .enumerate()
        .map(|(b, trace)| model.backward(trace, &loss.grad_conf.select(b), &loss.grad_loc.select(b)))
        .collect::<Result<Vec<_>, NetError>>()?;
    // reduce in batch order so the sum does not depend on scheduling
    let mut grads = Gradients::zeros_like(model);
    for g in &per_sample {
        grads.add_assign(g);
    }
    Ok((loss, grads))
}

pub fn train_loop(
    samples: &[TrainingSample],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    loss_config: &LossConfig,
) -> Result<TrainOutput, TrainError> {
    train_loop_with(samples, model_config, train_config, loss_config, |_| {})
}

/// [`train_loop`] with a callback invoked on every logged record.
pub fn train_loop_with(
    samples: &[TrainingSample],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    loss_config: &LossConfig,
    mut on_log: impl FnMut(&LossRecord),
) -> Result<TrainOutput, TrainError> {
    model_config.validate().map_err(TrainError::Config)?;
    train_config.validate().map_err(TrainError::Config)?;
    loss_config.validate().map_err(TrainError::Config)?;
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let seed = train_config.seed;
    let mut model = init_weights(model_config, seed);
    let mut state = OptState::new(&model);
    let grid = build_anchors(&model_config.anchors);
    let mut schedule = Schedule::new(seed, samples.len());
    let mut log = Vec::new();

    for iteration in 0..train_config.total_iterations {
        let picks: Vec<usize> = (0..train_config.batch_size).map(|_| schedule.next_index()).collect();
        let batch: Vec<TrainingSample> = picks
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let key = [iteration as u64, slot as u64];
                let coin: f64 = task_rng(seed, "augment-coin", &key).random();
                if coin < train_config.augment_probability {
                    augment(&samples[i], derive_seed(seed, "augment", &key))
                } else {
                    samples[i].clone()
                }
            })
            .collect();

        let (loss, grads) = batch_gradients(&model, &grid, &batch, loss_config)?;
        if !loss.loss.is_finite() {
            return Err(TrainError::NonFinite { what: "loss", iteration });
        }
        let lr = train_config.lr_at(iteration);
        sgd_step(
            &mut model,
            &grads,
            &mut state,
            lr,
            train_config.momentum,
            train_config.weight_decay,
        )
        .map_err(|e| match e {
            TrainError::NonFinite { what, .. } => TrainError::NonFinite { what, iteration },
            other => other,
        })?;

        if iteration % train_config.log_interval == 0 || iteration + 1 == train_config.total_iterations {
            let record = LossRecord {
                iteration,
                lr,
                loss: loss.loss,
                conf_loss: loss.conf_loss,
                loc_loss: loss.loc_loss,
                matched_anchors: loss.matched,
                grad_norm: grads.l2_norm(),
            };
            on_log(&record);
            log.push(record);
        }
    }
    Ok(TrainOutput { model, log })
}

pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<(), TrainError> {
    let name = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Csv(name.clone(), e))?;
    for r in log {
        w.serialize(r).map_err(|e| TrainError::Csv(name.clone(), e))?;
    }
    w.flush().map_err(|e| TrainError::Io(name, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>, TrainError> {
    let name = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::Csv(name.clone(), e))?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| TrainError::Csv(name, e))
}
