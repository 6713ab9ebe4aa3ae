use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{conv2d, conv2d_backward, maxpool2, maxpool2_backward, relu_backward_in_place, relu_in_place};
use super::tensor::Tensor;
use super::NetError;
use crate::anchors::AnchorSpec;
use crate::raster::{Image, CHANNELS};

/// Name of the generator behind [`init_weights`], recorded in checkpoints.
pub const PRNG_NAME: &str = "xoshiro256++";

/// Number of convolutional stages kept from the base network.
pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Foreground classes `K`; the heads predict `K + 1` scores per anchor.
    pub foreground_classes: usize,
    pub stage_channels: [usize; STAGES],
    pub convs_per_stage: usize,
    pub anchors: AnchorSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            foreground_classes: 5,
            stage_channels: [8, 16, 32, 48],
            convs_per_stage: 2,
            anchors: AnchorSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn classes_with_background(&self) -> usize {
        self.foreground_classes + 1
    }

    pub fn validate(&self) -> Result<(), String> {
        self.anchors.validate()?;
        if self.foreground_classes == 0 {
            return Err("model.foreground_classes must be >= 1".into());
        }
        if self.convs_per_stage == 0 || self.stage_channels.contains(&0) {
            return Err("model: every stage needs at least one conv and one channel".into());
        }
        if self.anchors.cell_stride() != 8 {
            return Err(format!(
                "model: three 2x pools give a feature stride of 8, anchors imply {}",
                self.anchors.cell_stride()
            ));
        }
        Ok(())
    }

    pub fn loc_channels(&self) -> usize {
        self.anchors.boxes_per_cell() * 4
    }

    pub fn conf_channels(&self) -> usize {
        self.anchors.boxes_per_cell() * self.classes_with_background()
    }

    /// Scalar outputs per patch: `(c + 4) · n · w · h`.
    pub fn predictions_per_patch(&self) -> usize {
        (self.classes_with_background() + 4) * self.anchors.anchor_count()
    }

    /// `(name, [out, in, 3, 3])` of every conv layer, trunk first, then the
    /// localization head and the confidence head.
    pub fn layer_shapes(&self) -> Vec<(String, [usize; 4])> {
        let mut shapes = Vec::new();
        let mut in_c = CHANNELS;
        for (s, &out_c) in self.stage_channels.iter().enumerate() {
            for c in 0..self.convs_per_stage {
                shapes.push((format!("stage{}.conv{}", s + 1, c + 1), [out_c, in_c, 3, 3]));
                in_c = out_c;
            }
        }
        shapes.push(("head.loc".into(), [self.loc_channels(), in_c, 3, 3]));
        shapes.push(("head.conf".into(), [self.conf_channels(), in_c, 3, 3]));
        shapes
    }

    /// Side in input pixels of the region that can influence one head output.
    pub fn receptive_field(&self) -> usize {
        let (mut field, mut jump) = (1, 1);
        for s in 0..STAGES {
            field += 2 * jump * self.convs_per_stage;
            if s + 1 < STAGES {
                field += jump;
                jump *= 2;
            }
        }
        field + 2 * jump
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub weight: Tensor<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub init_seed: u64,
    /// Trunk convs in order, then `head.loc`, then `head.conf`.
    pub layers: Vec<ConvLayer>,
}

/// Raw head outputs: `conf` is `(B, n·c, F, F)` and `loc` is `(B, n·4, F, F)`,
/// channels grouped by anchor slot.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub conf: Tensor<f32>,
    pub loc: Tensor<f32>,
}

/// Per-sample activations retained for the backward pass.
pub struct Trace {
    /// Input of each trunk step, then the final feature map.
    acts: Vec<Tensor<f32>>,
    pool_argmax: Vec<Option<Vec<u32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Tensor<f32>, Vec<f32>)>,
}

impl Gradients {
    pub fn zeros_like(model: &DetectorModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (Tensor::zeros(l.weight.shape()), vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in w.data_mut().iter_mut().zip(ow.data()) {
                *x += y;
            }
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.data().iter().chain(b))
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.all_finite() && b.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy)]
enum Step {
    ConvRelu(usize),
    Pool,
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases, drawn in
/// layer order from a single seeded generator.
pub fn init_weights(config: &ModelConfig, seed: u64) -> DetectorModel {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let layers = config
        .layer_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
            ConvLayer {
                name,
                weight: Tensor::from_vec(shape, data).expect("shape product"),
                bias: vec![0.0; shape[0]],
            }
        })
        .collect();
    DetectorModel {
        config: config.clone(),
        init_seed: seed,
        layers,
    }
}

/// Packs patches into a `(B, 3, H, W)` tensor scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor<f32>, NetError> {
    let Some(first) = images.first() else {
        return Err(NetError::Shape("empty batch".into()));
    };
    let (w, h) = (first.width(), first.height());
    let plane = w * h;
    let mut data = vec![0.0f32; images.len() * CHANNELS * plane];
    for (n, img) in images.iter().enumerate() {
        if (img.width(), img.height()) != (w, h) {
            return Err(NetError::Shape("batch images differ in size".into()));
        }
        let dst = &mut data[n * CHANNELS * plane..(n + 1) * CHANNELS * plane];
        for (i, px) in img.pixels().chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                dst[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec([images.len(), CHANNELS, h, w], data)
}

impl DetectorModel {
    fn steps(&self) -> Vec<Step> {
        let mut steps = Vec::new();
        let mut layer = 0;
        for s in 0..STAGES {
            for _ in 0..self.config.convs_per_stage {
                steps.push(Step::ConvRelu(layer));
                layer += 1;
            }
            if s + 1 < STAGES {
                steps.push(Step::Pool);
            }
        }
        steps
    }

    fn loc_head(&self) -> &ConvLayer {
        &self.layers[self.layers.len() - 2]
    }

    fn conf_head(&self) -> &ConvLayer {
        &self.layers[self.layers.len() - 1]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, input: &Tensor<f32>) -> Result<(), NetError> {
        let side = self.config.anchors.input_side;
        if input.channels() != CHANNELS || input.height() != side || input.width() != side {
            return Err(NetError::Shape(format!(
                "detector expects (B, 3, {side}, {side}) input, got {:?}",
                input.shape()
            )));
        }
        Ok(())
    }

    /// Runs one batch entry, keeping what the backward pass needs.
    pub fn forward_traced(&self, sample: &Tensor<f32>) -> Result<(HeadOutputs, Trace), NetError> {
        self.check_input(sample)?;
        if sample.batch() != 1 {
            return Err(NetError::Shape("traced forward takes one sample".into()));
        }
        let steps = self.steps();
        let mut acts = Vec::with_capacity(steps.len() + 1);
        let mut pool_argmax = Vec::with_capacity(steps.len());
        let mut x = sample.clone();
        for step in steps {
            let next = match step {
                Step::ConvRelu(i) => {
                    let l = &self.layers[i];
                    let mut y = conv2d(&x, &l.weight, &l.bias)?;
                    relu_in_place(&mut y);
                    pool_argmax.push(None);
                    y
                }
                Step::Pool => {
                    let (y, idx) = maxpool2(&x)?;
                    pool_argmax.push(Some(idx));
                    y
                }
            };
            acts.push(std::mem::replace(&mut x, next));
        }
        let loc = conv2d(&x, &self.loc_head().weight, &self.loc_head().bias)?;
        let conf = conv2d(&x, &self.conf_head().weight, &self.conf_head().bias)?;
        acts.push(x);
        Ok((HeadOutputs { conf, loc }, Trace { acts, pool_argmax }))
    }

    /// Gradients of all parameters for one sample, given upstream gradients
    /// on its head outputs.
    pub fn backward(
        &self,
        trace: Trace,
        grad_conf: &Tensor<f32>,
        grad_loc: &Tensor<f32>,
    ) -> Result<Gradients, NetError> {
        let Trace {
            mut acts,
            pool_argmax,
        } = trace;
        let n_layers = self.layers.len();
        let mut grads: Vec<Option<(Tensor<f32>, Vec<f32>)>> = vec![None; n_layers];

        let feature = acts.pop().expect("feature map");
        let loc = conv2d_backward(grad_loc, &feature, &self.loc_head().weight, true)?;
        let conf = conv2d_backward(grad_conf, &feature, &self.conf_head().weight, true)?;
        grads[n_layers - 2] = Some((loc.weight, loc.bias));
        grads[n_layers - 1] = Some((conf.weight, conf.bias));
        let mut g = loc.input.expect("requested");
        for (a, b) in g.data_mut().iter_mut().zip(conf.input.expect("requested").data()) {
            *a += b;
        }

        let mut output = feature;
        for (k, step) in self.steps().into_iter().enumerate().rev() {
            let input = acts.pop().expect("one activation per step");
            match step {
                Step::ConvRelu(i) => {
                    relu_backward_in_place(&mut g, &output);
                    let l = &self.layers[i];
                    let cg = conv2d_backward(&g, &input, &l.weight, i > 0)?;
                    grads[i] = Some((cg.weight, cg.bias));
                    if let Some(gi) = cg.input {
                        g = gi;
                    }
                }
                Step::Pool => {
                    let idx = pool_argmax[k].as_ref().expect("pool indices");
                    g = maxpool2_backward(&g, idx, input.shape());
                }
            }
            output = input;
        }
        Ok(Gradients {
            layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        })
    }

    /// Batched inference. Entries are independent, so the result does not
    /// depend on how the batch is split or scheduled.
    pub fn forward(&self, batch: &Tensor<f32>) -> Result<HeadOutputs, NetError> {
        self.check_input(batch)?;
        let outs: Vec<HeadOutputs> = (0..batch.batch())
            .into_par_iter()
            .map(|n| self.forward_traced(&batch.select(n)).map(|(o, _)| o))
            .collect::<Result<_, _>>()?;
        let conf: Vec<_> = outs.iter().map(|o| o.conf.clone()).collect();
        let loc: Vec<_> = outs.into_iter().map(|o| o.loc).collect();
        Ok(HeadOutputs {
            conf: Tensor::stack(&conf)?,
            loc: Tensor::stack(&loc)?,
        })
    }
}

/// Alias for [`DetectorModel::forward`].
pub fn forward_detector(model: &DetectorModel, batch: &Tensor<f32>) -> Result<HeadOutputs, NetError> {
    model.forward(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_geometry() {
        let config = ModelConfig::default();
        let model = init_weights(&config, 1);
        let img = Image::new(200, 200).unwrap();
        let out = model.forward(&images_to_tensor(&[&img, &img]).unwrap()).unwrap();
        assert_eq!(out.conf.shape(), [2, 36, 25, 25]);
        assert_eq!(out.loc.shape(), [2, 24, 25, 25]);
        assert_eq!(out.conf.sample_len() + out.loc.sample_len(), 37_500);
        assert_eq!(config.predictions_per_patch(), 37_500);
        let full_scale = ModelConfig {
            foreground_classes: 45,
            ..ModelConfig::default()
        };
        assert_eq!(full_scale.predictions_per_patch(), 187_500);
        assert_eq!(config.receptive_field(), 84);
    }

    #[test]
    fn rejects_wrong_input_side() {
        let model = init_weights(&ModelConfig::default(), 1);
        let img = Image::new(100, 100).unwrap();
        assert!(model.forward(&images_to_tensor(&[&img]).unwrap()).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::default();
        assert_eq!(init_weights(&c, 3), init_weights(&c, 3));
        assert_ne!(init_weights(&c, 3), init_weights(&c, 4));
        let m = init_weights(&c, 3);
        assert!(m.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        // stage4.conv1 has 48·32·9 = 13 824 weights with fan-in 288
        let c = ModelConfig::default();
        let m = init_weights(&c, 17);
        let layer = m.layers.iter().find(|l| l.name == "stage4.conv1").unwrap();
        assert!(layer.weight.len() >= 10_000);
        let n = layer.weight.len() as f64;
        let mean = layer.weight.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = layer.weight.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let target = 2.0 / 288.0;
        assert!((var / target - 1.0).abs() < 0.2, "variance {var} vs {target}");
    }

    #[test]
    fn traced_and_batched_forward_agree() {
        let model = init_weights(&ModelConfig::default(), 5);
        let mut img = Image::new(200, 200).unwrap();
        for (i, v) in img.pixels_mut().iter_mut().enumerate() {
            *v = (i * 7 % 251) as u8;
        }
        let x = images_to_tensor(&[&img]).unwrap();
        let (traced, _) = model.forward_traced(&x).unwrap();
        let batched = model.forward(&x).unwrap();
        assert_eq!(traced.conf, batched.conf);
        assert_eq!(traced.loc, batched.loc);
    }

    /// Directional derivative of a random projection of both heads, per layer,
    /// against central differences. Single precision and ReLU kinks keep the
    /// usable step small and the tolerance loose.
    #[test]
    fn backward_matches_directional_differences() {
        use rand::Rng;
        let config = ModelConfig {
            stage_channels: [4, 4, 6, 6],
            convs_per_stage: 1,
            ..ModelConfig::default()
        };
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let mut img = Image::new(200, 200).unwrap();
        img.pixels_mut().iter_mut().for_each(|v| *v = rng.random());
        let x = images_to_tensor(&[&img]).unwrap();
        let mut model = init_weights(&config, 2);
        for l in &mut model.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        let (out, trace) = model.forward_traced(&x).unwrap();
        let rand_like = |t: &Tensor<f32>, rng: &mut Xoshiro256PlusPlus| {
            Tensor::from_vec(t.shape(), (0..t.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
        };
        let (rc, rl) = (rand_like(&out.conf, &mut rng), rand_like(&out.loc, &mut rng));
        let objective = |m: &DetectorModel| {
            let o = m.forward(&x).unwrap();
            let dot = |a: &Tensor<f32>, b: &Tensor<f32>| {
                a.data().iter().zip(b.data()).map(|(&p, &q)| p as f64 * q as f64).sum::<f64>()
            };
            dot(&o.conf, &rc) + dot(&o.loc, &rl)
        };
        let grads = model.backward(trace, &rc, &rl).unwrap();

        const H: f32 = 1e-4;
        for (li, (gw, gb)) in grads.layers.iter().enumerate() {
            let dw: Vec<f32> = (0..gw.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let db: Vec<f32> = (0..gb.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic: f64 = gw.data().iter().zip(&dw).map(|(&g, &d)| g as f64 * d as f64).sum::<f64>()
                + gb.iter().zip(&db).map(|(&g, &d)| g as f64 * d as f64).sum::<f64>();
            let shifted = |sign: f32| {
                let mut m = model.clone();
                let l = &mut m.layers[li];
                l.weight.data_mut().iter_mut().zip(&dw).for_each(|(w, d)| *w += sign * H * d);
                l.bias.iter_mut().zip(&db).for_each(|(b, d)| *b += sign * H * d);
                objective(&m)
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * H as f64);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 5e-2, "{}: analytic {analytic} numeric {numeric}", model.layers[li].name);
        }
    }

    /// A pixel perturbation may only reach head outputs whose receptive
    /// field covers it.
    #[test]
    fn perturbation_stays_within_receptive_field() {
        let config = ModelConfig::default();
        let mut model = init_weights(&config, 8);
        // positive biases keep every ReLU active so influence is not masked
        for l in &mut model.layers {
            l.bias.iter_mut().for_each(|b| *b = 0.5);
        }
        let mut img = Image::filled(200, 200, [90, 120, 150]).unwrap();
        let base = model.forward(&images_to_tensor(&[&img]).unwrap()).unwrap();
        let (px, py) = (100usize, 60usize);
        img.put(px, py, [255, 0, 255]);
        let pert = model.forward(&images_to_tensor(&[&img]).unwrap()).unwrap();
        let rf = config.receptive_field() as f64;
        let mut changed_cells = 0;
        for i in 0..25 {
            for j in 0..25 {
                let cell_changed = (0..36).any(|ch| {
                    let k = ch * 625 + i * 25 + j;
                    base.conf.data()[k] != pert.conf.data()[k]
                });
                // receptive field of cell (i,j) centered at 8j+3.5, 8i+3.5
                let (cx, cy) = (8.0 * j as f64 + 3.5, 8.0 * i as f64 + 3.5);
                let inside = (px as f64 - cx).abs() <= rf / 2.0 && (py as f64 - cy).abs() <= rf / 2.0;
                if cell_changed {
                    changed_cells += 1;
                    assert!(inside, "cell ({i},{j}) changed outside its receptive field");
                }
            }
        }
        assert!(changed_cells > 0);
    }
}
