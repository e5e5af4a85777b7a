//! The fixed three-stage CNN: forward pass with an activation cache,
//! fused softmax/cross-entropy backward, and prediction.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg32;

use crate::error::{Error, Result};
use crate::ops::{self, PoolMask};
use crate::tensor::{Scalar, Tensor};

pub const INPUT_CHANNELS: usize = 3;
pub const CONV_FILTERS: [usize; 3] = [32, 32, 64];
pub const HIDDEN_UNITS: usize = 64;
pub const NUM_CLASSES: usize = 2;
pub const DEFAULT_INPUT_SIZE: usize = 128;
/// Smallest square input that survives three conv+pool stages.
pub const MIN_INPUT_SIZE: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv3x3,
    Relu,
    MaxPool2,
    Flatten,
    Dense,
    Softmax,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Conv3x3 => 0,
            LayerKind::Relu => 1,
            LayerKind::MaxPool2 => 2,
            LayerKind::Flatten => 3,
            LayerKind::Dense => 4,
            LayerKind::Softmax => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => LayerKind::Conv3x3,
            1 => LayerKind::Relu,
            2 => LayerKind::MaxPool2,
            3 => LayerKind::Flatten,
            4 => LayerKind::Dense,
            5 => LayerKind::Softmax,
            _ => return None,
        })
    }
}

/// Kind plus in/out channel (or feature) counts of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub inputs: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Scalar = f32> {
    /// Kernels `[out, in, 3, 3]`, bias `[out]`.
    Conv { kernels: Tensor<T>, bias: Tensor<T> },
    Relu { channels: usize },
    MaxPool2 { channels: usize },
    Flatten { channels: usize, features: usize },
    /// Weights `[in, out]`, bias `[out]`.
    Dense { weights: Tensor<T>, bias: Tensor<T> },
    Softmax,
}

impl<T: Scalar> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        let (kind, inputs, outputs) = match self {
            Layer::Conv { kernels, .. } => (LayerKind::Conv3x3, kernels.shape()[1], kernels.shape()[0]),
            Layer::Relu { channels } => (LayerKind::Relu, *channels, *channels),
            Layer::MaxPool2 { channels } => (LayerKind::MaxPool2, *channels, *channels),
            Layer::Flatten { channels, features } => (LayerKind::Flatten, *channels, *features),
            Layer::Dense { weights, .. } => (LayerKind::Dense, weights.shape()[0], weights.shape()[1]),
            Layer::Softmax => (LayerKind::Softmax, NUM_CLASSES, NUM_CLASSES),
        };
        LayerSpec {
            kind,
            inputs,
            outputs,
        }
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv { kernels, bias } => Layer::Conv {
                kernels: kernels.cast(),
                bias: bias.cast(),
            },
            Layer::Relu { channels } => Layer::Relu { channels: *channels },
            Layer::MaxPool2 { channels } => Layer::MaxPool2 { channels: *channels },
            Layer::Flatten { channels, features } => Layer::Flatten {
                channels: *channels,
                features: *features,
            },
            Layer::Dense { weights, bias } => Layer::Dense {
                weights: weights.cast(),
                bias: bias.cast(),
            },
            Layer::Softmax => Layer::Softmax,
        }
    }
}

/// Spatial side after each conv and pool stage, or `None` when a stage
/// would leave no pixels.
pub fn stage_extents(input_size: usize) -> Option<Vec<usize>> {
    let mut side = input_size;
    let mut out = Vec::with_capacity(6);
    for _ in 0..CONV_FILTERS.len() {
        if side < 3 {
            return None;
        }
        side -= 2;
        out.push(side);
        if side < 2 {
            return None;
        }
        side /= 2;
        out.push(side);
    }
    Some(out)
}

/// The layer sequence every model must have for a given input size.
pub fn expected_specs(input_size: usize) -> Result<Vec<LayerSpec>> {
    let extents = stage_extents(input_size).ok_or_else(|| {
        Error::Config(format!(
            "input size {input_size} too small; need at least {MIN_INPUT_SIZE} pixels"
        ))
    })?;
    if input_size > u16::MAX as usize {
        return Err(Error::Config(format!("input size {input_size} exceeds 65535")));
    }
    let spec = |kind, inputs, outputs| LayerSpec {
        kind,
        inputs,
        outputs,
    };
    let mut specs = Vec::with_capacity(14);
    let mut channels = INPUT_CHANNELS;
    for &filters in &CONV_FILTERS {
        specs.push(spec(LayerKind::Conv3x3, channels, filters));
        specs.push(spec(LayerKind::Relu, filters, filters));
        specs.push(spec(LayerKind::MaxPool2, filters, filters));
        channels = filters;
    }
    let side = extents[extents.len() - 1];
    let features = channels * side * side;
    specs.push(spec(LayerKind::Flatten, channels, features));
    specs.push(spec(LayerKind::Dense, features, HIDDEN_UNITS));
    specs.push(spec(LayerKind::Relu, HIDDEN_UNITS, HIDDEN_UNITS));
    specs.push(spec(LayerKind::Dense, HIDDEN_UNITS, NUM_CLASSES));
    specs.push(spec(LayerKind::Softmax, NUM_CLASSES, NUM_CLASSES));
    Ok(specs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    input_size: usize,
    layers: Vec<Layer<T>>,
}

/// He-normal weights, zero biases.
pub fn build_paper_cnn(input_size: usize, seed: u64) -> Result<Model<f32>> {
    build_cnn(input_size, seed)
}

/// [`build_paper_cnn`] at any precision; the same seed yields the same
/// weights up to rounding.
pub fn build_cnn<T: Scalar>(input_size: usize, seed: u64) -> Result<Model<T>> {
    let specs = expected_specs(input_size)?;
    let mut rng = Pcg32::seed_from_u64(seed);
    let mut he = |shape: &[usize], fan_in: usize| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Tensor::from_fn(shape, |_| T::from_f64(normal.sample(&mut rng)))
    };
    let layers = specs
        .iter()
        .map(|s| match s.kind {
            LayerKind::Conv3x3 => Layer::Conv {
                kernels: he(&[s.outputs, s.inputs, 3, 3], s.inputs * 9),
                bias: Tensor::zeros(&[s.outputs]),
            },
            LayerKind::Relu => Layer::Relu { channels: s.inputs },
            LayerKind::MaxPool2 => Layer::MaxPool2 { channels: s.inputs },
            LayerKind::Flatten => Layer::Flatten {
                channels: s.inputs,
                features: s.outputs,
            },
            LayerKind::Dense => Layer::Dense {
                weights: he(&[s.inputs, s.outputs], s.inputs),
                bias: Tensor::zeros(&[s.outputs]),
            },
            LayerKind::Softmax => Layer::Softmax,
        })
        .collect();
    Ok(Model { input_size, layers })
}

/// Activations retained by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar = f32> {
    /// Input of every layer, in layer order.
    inputs: Vec<Tensor<T>>,
    masks: Vec<Option<PoolMask>>,
    probs: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn layer_input(&self, index: usize) -> &Tensor<T> {
        &self.inputs[index]
    }

    /// Pre-softmax class scores.
    pub fn logits(&self) -> &Tensor<T> {
        self.inputs.last().expect("non-empty cache")
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn batch_size(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn pool_mask(&self, index: usize) -> Option<&PoolMask> {
        self.masks[index].as_ref()
    }
}

/// Parameter gradients, aligned with [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    pub tensors: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probability: f32,
}

impl<T: Scalar> Model<T> {
    /// Assembles a model from explicit layers, checking that they form the
    /// supported architecture for `input_size`.
    pub fn from_layers(input_size: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let expected = expected_specs(input_size)?;
        let got: Vec<LayerSpec> = layers.iter().map(Layer::spec).collect();
        if got != expected {
            return Err(Error::Config(format!(
                "layer sequence {got:?} does not match the expected {expected:?}"
            )));
        }
        for layer in &layers {
            match layer {
                Layer::Conv { kernels, bias } if bias.shape() != [kernels.shape()[0]] => {
                    return Err(Error::dim("conv bias", kernels.shape(), bias.shape()));
                }
                Layer::Dense { weights, bias } if bias.shape() != [weights.shape()[1]] => {
                    return Err(Error::dim("dense bias", weights.shape(), bias.shape()));
                }
                _ => {}
            }
        }
        Ok(Self { input_size, layers })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { kernels, bias } => out.extend([kernels, bias]),
                Layer::Dense { weights, bias } => out.extend([weights, bias]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { kernels, bias } => out.extend([kernels, bias]),
                Layer::Dense { weights, bias } => out.extend([weights, bias]),
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            input_size: self.input_size,
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    /// Index of the pooling layer that follows the last convolution. Its
    /// input is the post-ReLU feature stack used for Grad-CAM.
    pub fn last_conv_pool_index(&self) -> usize {
        let last_conv = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Conv { .. }))
            .expect("model has a convolution");
        last_conv + 2
    }

    fn softmax_index(&self) -> usize {
        self.layers.len() - 1
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let s = self.input_size;
        match batch.shape() {
            &[_, INPUT_CHANNELS, h, w] if h == s && w == s => Ok(()),
            other => Err(Error::dim("forward", &[0, INPUT_CHANNELS, s, s], other)),
        }
    }

    fn apply(&self, index: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Option<PoolMask>)> {
        Ok(match &self.layers[index] {
            Layer::Conv { kernels, bias } => (ops::conv2d_valid(x, kernels, bias)?, None),
            Layer::Relu { .. } => (ops::relu(x), None),
            Layer::MaxPool2 { .. } => {
                let (y, mask) = ops::maxpool2(x)?;
                (y, Some(mask))
            }
            Layer::Flatten { features, .. } => {
                let n = x.shape()[0];
                (x.clone().reshape(&[n, *features])?, None)
            }
            Layer::Dense { weights, bias } => {
                let mut y = ops::matmul(x, weights)?;
                let out = bias.len();
                for row in y.data_mut().chunks_mut(out) {
                    for (v, &b) in row.iter_mut().zip(bias.data()) {
                        *v += b;
                    }
                }
                (y, None)
            }
            Layer::Softmax => (ops::softmax2(x)?, None),
        })
    }

    /// Class probabilities `[N,2]` for a `[N,3,S,S]` batch.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_batch(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for i in 0..self.layers.len() {
            let (y, mask) = self.apply(i, &x)?;
            inputs.push(x);
            masks.push(mask);
            x = y;
        }
        let cache = ForwardCache {
            inputs,
            masks,
            probs: x.clone(),
        };
        Ok((x, cache))
    }

    /// Runs layers `start..` up to (not including) the softmax and returns
    /// the logits. `activation` is the input of layer `start`.
    pub fn logits_from(&self, start: usize, activation: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = activation.clone();
        for i in start..self.softmax_index() {
            x = self.apply(i, &x)?.0;
        }
        Ok(x)
    }

    /// Gradients of the mean cross-entropy loss with respect to every
    /// parameter. Softmax and cross-entropy are fused: `dlogits = (p − onehot)/N`.
    pub fn backward(&self, cache: &ForwardCache<T>, labels: &[usize]) -> Result<Gradients<T>> {
        let dlogits = fused_logit_grad(cache.probs(), labels)?;
        let (grads, _) = self.backprop(cache, dlogits, 0, false)?;
        Ok(Gradients {
            tensors: grads.into_iter().map(|g| g.expect("all layers visited")).collect(),
        })
    }

    /// Gradient of `Σ(logits ⊙ dlogits)` with respect to the input of layer
    /// `layer`.
    pub fn input_grad(
        &self,
        cache: &ForwardCache<T>,
        dlogits: Tensor<T>,
        layer: usize,
    ) -> Result<Tensor<T>> {
        Ok(self.backprop(cache, dlogits, layer, true)?.1)
    }

    fn backprop(
        &self,
        cache: &ForwardCache<T>,
        dlogits: Tensor<T>,
        stop: usize,
        stop_input: bool,
    ) -> Result<(Vec<Option<Tensor<T>>>, Tensor<T>)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Argument("forward cache does not match the model".into()));
        }
        if dlogits.shape() != cache.logits().shape() {
            return Err(Error::dim("backward", cache.logits().shape(), dlogits.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.params().len()];
        let mut slot = grads.len();
        let mut g = dlogits;
        for i in (stop..self.softmax_index()).rev() {
            let x = &cache.inputs[i];
            g = match &self.layers[i] {
                Layer::Conv { kernels, .. } => {
                    let cg = ops::conv2d_backward_impl(x, kernels, &g, i > stop || stop_input)?;
                    slot -= 2;
                    grads[slot] = Some(cg.kernels);
                    grads[slot + 1] = Some(cg.bias);
                    cg.input.unwrap_or_else(|| Tensor::zeros(x.shape()))
                }
                Layer::Relu { .. } => ops::relu_backward(x, &g)?,
                Layer::MaxPool2 { .. } => {
                    let mask = cache.masks[i].as_ref().expect("pool mask cached");
                    ops::maxpool2_backward(mask, &g)?
                }
                Layer::Flatten { .. } => g.reshape(x.shape())?,
                Layer::Dense { weights, bias } => {
                    let (n, fin) = (x.shape()[0], x.shape()[1]);
                    let fout = bias.len();
                    let mut dw = vec![T::zero(); fin * fout];
                    ops::gemm_tn_acc(x.data(), g.data(), &mut dw, n, fin, fout);
                    let mut db = vec![T::zero(); fout];
                    for row in g.data().chunks(fout) {
                        for (a, &b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    let mut dx = vec![T::zero(); n * fin];
                    ops::gemm_nt(g.data(), weights.data(), &mut dx, n, fout, fin);
                    slot -= 2;
                    grads[slot] = Some(Tensor::new(weights.shape(), dw)?);
                    grads[slot + 1] = Some(Tensor::new(&[fout], db)?);
                    Tensor::new(&[n, fin], dx)?
                }
                Layer::Softmax => unreachable!("softmax is fused into the loss gradient"),
            };
        }
        Ok((grads, g))
    }

    /// Argmax class of one `[3,S,S]` image; ties go to class 0.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction> {
        let batch = image.clone().reshape(&prepend(1, image.shape()))?;
        let (probs, _) = self.forward(&batch)?;
        Ok(prediction_from_probs(probs.data()[0], probs.data()[1]))
    }
}

fn prepend(n: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(shape);
    s
}

pub fn prediction_from_probs<T: Scalar>(p0: T, p1: T) -> Prediction {
    if p1 > p0 {
        Prediction {
            class: 1,
            probability: p1.as_f64() as f32,
        }
    } else {
        Prediction {
            class: 0,
            probability: p0.as_f64() as f32,
        }
    }
}

/// `(probs − onehot(labels)) / N`.
pub fn fused_logit_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let n = probs.shape()[0];
    if labels.len() != n {
        return Err(Error::dim("labels", probs.shape(), &[labels.len()]));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
        return Err(Error::Label { index, label });
    }
    let scale = T::one() / T::from_f64(n as f64);
    let mut g = probs.clone();
    for (row, &label) in g.data_mut().chunks_mut(NUM_CLASSES).zip(labels) {
        row[label] = row[label] - T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    Ok(g)
}
