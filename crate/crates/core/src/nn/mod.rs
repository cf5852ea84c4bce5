//! Dense and convolutional layers, activations, classification losses and initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Padding, ParamId, ParameterSet, Partition, Tensor};
use crate::{Error, Result};


/// Negative-side slope of every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Standard deviation of a unit normal truncated to `[-2, 2]`.
const TRUNCATED_STD: f64 = 0.879_625_661_034_239_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::None => x,
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Draws a tensor from a truncated normal with standard deviation `gain / sqrt(fan_in)`.
///
/// Samples beyond two standard deviations are redrawn and the result is
/// rescaled so the empirical spread matches the target.
pub fn truncated_normal<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::InvalidInput("initializer fan-in must be positive".into()));
    }
    let scale = gain / (fan_in as f64).sqrt() / TRUNCATED_STD;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            data.push(v * scale);
        }
    }
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// Fully connected layer `activation(x · W + b)` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        partition: Partition,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let w = truncated_normal(&[in_dim, out_dim], in_dim, 1.0, rng)?;
        let weight = params.add(format!("{name}.weight"), partition, w)?;
        let bias = params.add(format!("{name}.bias"), partition, Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        })
    }

    /// Appends the layer to `g`. With `trainable == false` the weights enter as constants.
    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, x: NodeId, trainable: bool) -> Result<NodeId> {
        let w = bind(g, params, self.weight, trainable);
        let b = bind(g, params, self.bias, trainable);
        let h = g.matmul(x, w)?;
        let h = g.add_bias(h, b)?;
        Ok(self.activation.apply(g, h))
    }
}

/// 2-D cross-correlation over `[batch × ch × h × w]` inputs.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        partition: Partition,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::InvalidInput(format!("{name}: kernel and stride must be positive")));
        }
        let fan_in = in_ch * kernel * kernel;
        let k = truncated_normal(&[out_ch, in_ch, kernel, kernel], fan_in, 1.0, rng)?;
        let kernels = params.add(format!("{name}.kernels"), partition, k)?;
        let bias = params.add(format!("{name}.bias"), partition, Tensor::zeros(&[out_ch]))?;
        Ok(Self {
            kernels,
            bias,
            stride,
            padding,
            activation,
            in_ch,
            out_ch,
            kernel,
        })
    }

    /// Spatial output size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        conv_output_hw(h, w, self.kernel, self.stride, self.padding)
    }

    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, x: NodeId, trainable: bool) -> Result<NodeId> {
        let k = bind(g, params, self.kernels, trainable);
        let b = bind(g, params, self.bias, trainable);
        let y = g.conv2d(x, k, b, self.stride, self.padding)?;
        Ok(self.activation.apply(g, y))
    }
}

pub fn conv_output_hw(h: usize, w: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => (h.div_ceil(stride), w.div_ceil(stride)),
        Padding::Valid => ((h.saturating_sub(kernel)) / stride + 1, (w.saturating_sub(kernel)) / stride + 1),
    }
}

pub(crate) fn bind(g: &mut Graph, params: &ParameterSet, id: ParamId, trainable: bool) -> NodeId {
    if trainable {
        g.param(params, id)
    } else {
        g.frozen_param(params, id)
    }
}

/// Classification loss family and its target arity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    SigmoidCe,
    SoftmaxCe { classes: usize },
}

impl LossKind {
    /// Width of the logits layer.
    pub fn arity(self) -> usize {
        match self {
            LossKind::SigmoidCe => 1,
            LossKind::SoftmaxCe { classes } => classes,
        }
    }
}

/// Mean sigmoid cross-entropy of `logits` (`[batch]` or `[batch × 1]`) against 0/1 labels.
pub fn sigmoid_ce_loss(
    g: &mut Graph,
    logits: NodeId,
    labels: &[f64],
    weights: Option<Vec<f64>>,
) -> Result<NodeId> {
    if let Some((i, v)) = labels.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidInput(format!("label {i} is {v}, expected 0 or 1")));
    }
    let shape = g.shape(logits).to_vec();
    let targets = Tensor::new(shape, labels.to_vec())?;
    Ok(g.sigmoid_ce(logits, targets, weights)?)
}

/// Mean softmax cross-entropy of `logits [batch × K]` against class indices.
pub fn softmax_ce_loss(
    g: &mut Graph,
    logits: NodeId,
    classes: &[usize],
    weights: Option<Vec<f64>>,
) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    let k = *shape.last().unwrap_or(&0);
    if let Some((i, c)) = classes.iter().enumerate().find(|(_, c)| **c >= k) {
        return Err(Error::InvalidInput(format!("class {c} of row {i} out of range for {k} logits")));
    }
    let mut onehot = Tensor::zeros(&[classes.len(), k]);
    for (i, &c) in classes.iter().enumerate() {
        onehot.set(&[i, c], 1.0);
    }
    Ok(g.softmax_ce(logits, onehot, weights)?)
}

/// As [`softmax_ce_loss`] with explicit one-hot rows, which are validated.
pub fn softmax_ce_onehot(
    g: &mut Graph,
    logits: NodeId,
    onehot: &Tensor,
    weights: Option<Vec<f64>>,
) -> Result<NodeId> {
    let k = *onehot.shape().last().unwrap_or(&0);
    for (i, row) in onehot.data().chunks(k.max(1)).enumerate() {
        let ones = row.iter().filter(|v| **v == 1.0).count();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::InvalidInput(format!("target row {i} is not one-hot")));
        }
    }
    Ok(g.softmax_ce(logits, onehot.clone(), weights)?)
}

/// Row-wise argmax of a `[batch × K]` tensor; ties resolve to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = *t.shape().last().unwrap();
    t.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Inputs fed to a main network for one batch.
#[derive(Debug, Clone)]
pub struct NetInput {
    /// `[batch × ...]` image or feature tensor.
    pub images: Tensor,
    /// Optional side input, such as one-hot hints `[batch × 10]`.
    pub hints: Option<Tensor>,
}

impl NetInput {
    pub fn images(images: Tensor) -> Self {
        Self { images, hints: None }
    }

    pub fn batch_len(&self) -> usize {
        self.images.shape()[0]
    }
}

/// Graph nodes produced by a main network.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub logits: NodeId,
    /// Named intermediate activations available for probing, in depth order.
    pub taps: Vec<(String, NodeId)>,
}

impl NetOutput {
    pub fn tap(&self, name: &str) -> Option<NodeId> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }
}

/// A tappable layer of a main network and its per-sample activation shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TapInfo {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    /// Number of features after flattening.
    pub fn flat_len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Name of the tap that feeds the logits layer.
pub const PRE_LOGITS: &str = "pre_logits";

/// A main network whose parameters live in a shared [`ParameterSet`].
pub trait Network: Send + Sync {
    /// Layers that can be tapped, in depth order.
    fn taps(&self) -> Vec<TapInfo>;

    /// Loss used for the main task.
    fn loss_kind(&self) -> LossKind;

    /// Builds the network on `g`. With `trainable == false` all parameters enter as constants.
    fn forward(&self, g: &mut Graph, params: &ParameterSet, input: &NetInput, trainable: bool) -> Result<NetOutput>;

    fn tap_info(&self, name: &str) -> Option<TapInfo> {
        self.taps().into_iter().find(|t| t.name == name)
    }
}
