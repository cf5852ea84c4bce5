use rand::Rng;
use serde::{Deserialize, Serialize};

use super::hints::DIGITS;
use crate::autodiff::{Graph, Padding, ParamId, ParameterSet, Partition, Tensor};
use crate::nn::{self, Activation, Conv2dLayer, DenseLayer, LossKind, NetInput, NetOutput, Network, TapInfo};
use crate::{Error, Result};

/// Tap of the hint encoder in the one-hot model.
pub const HINT_ENCODING: &str = "hint_encoding";
pub const IMAGE_ENCODING: &str = "image_encoding";
/// Tap of the first hidden layer in the pixel-hint model.
pub const HIDDEN: &str = "hidden";
const SIDE: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintVariant {
    /// One-hot hint vector fed through a scalar-weight encoder.
    OnehotHint,
    /// Hint class burned into the image pixels.
    PixelHint,
}

impl HintVariant {
    /// Layer the stethoscope reads and the size of its task.
    pub fn probe(self) -> (&'static str, usize) {
        match self {
            HintVariant::OnehotHint => (HINT_ENCODING, DIGITS),
            HintVariant::PixelHint => (HIDDEN, super::hints::HINT_CLASSES),
        }
    }
}

/// Two-stream classifier: a conv image encoder and a one-parameter hint encoder
/// whose outputs are concatenated ahead of a single linear decoder.
#[derive(Debug, Clone)]
pub struct OnehotHintNet {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    dense1: DenseLayer,
    dense2: DenseLayer,
    pub hint_scale: ParamId,
    decoder: DenseLayer,
}

impl OnehotHintNet {
    pub const ENCODING_WIDTH: usize = 256;

    pub fn new<R: Rng + ?Sized>(params: &mut ParameterSet, hint_scale_init: f64, rng: &mut R) -> Result<Self> {
        let enc = Partition::Encoder;
        let act = Activation::LeakyRelu;
        let conv1 = Conv2dLayer::new(params, "image.conv1", enc, 1, 16, 5, 2, Padding::Same, act, rng)?;
        let conv2 = Conv2dLayer::new(params, "image.conv2", enc, 16, 32, 5, 2, Padding::Same, act, rng)?;
        let (h, w) = conv2.output_hw(conv1.output_hw(SIDE, SIDE).0, conv1.output_hw(SIDE, SIDE).1);
        let w_enc = Self::ENCODING_WIDTH;
        let dense1 = DenseLayer::new(params, "image.dense1", enc, 32 * h * w, w_enc, act, rng)?;
        let dense2 = DenseLayer::new(params, "image.dense2", enc, w_enc, w_enc, act, rng)?;
        let hint_scale = params.add("hint.scale", enc, Tensor::filled(&[1], hint_scale_init))?;
        let decoder = DenseLayer::new(
            params,
            "decoder",
            Partition::Decoder,
            w_enc + DIGITS,
            DIGITS,
            Activation::None,
            rng,
        )?;
        Ok(Self {
            conv1,
            conv2,
            dense1,
            dense2,
            hint_scale,
            decoder,
        })
    }

    /// Parameters of the image encoder only.
    pub fn image_encoder_params(&self) -> Vec<ParamId> {
        vec![
            self.conv1.kernels,
            self.conv1.bias,
            self.conv2.kernels,
            self.conv2.bias,
            self.dense1.weight,
            self.dense1.bias,
            self.dense2.weight,
            self.dense2.bias,
        ]
    }
}

impl Network for OnehotHintNet {
    fn taps(&self) -> Vec<TapInfo> {
        vec![
            TapInfo::new(IMAGE_ENCODING, vec![Self::ENCODING_WIDTH]),
            TapInfo::new(HINT_ENCODING, vec![DIGITS]),
            TapInfo::new(nn::PRE_LOGITS, vec![Self::ENCODING_WIDTH + DIGITS]),
        ]
    }

    fn loss_kind(&self) -> LossKind {
        LossKind::SoftmaxCe { classes: DIGITS }
    }

    fn forward(&self, g: &mut Graph, params: &ParameterSet, input: &NetInput, trainable: bool) -> Result<NetOutput> {
        let hints = input
            .hints
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("the one-hot hint model needs hint vectors".into()))?;
        let b = input.batch_len();
        let x = g.constant(input.images.clone().reshape(vec![b, 1, SIDE, SIDE])?);
        let a = self.conv1.forward(g, params, x, trainable)?;
        let a = self.conv2.forward(g, params, a, trainable)?;
        let a = g.flatten(a)?;
        let a = self.dense1.forward(g, params, a, trainable)?;
        let image_enc = self.dense2.forward(g, params, a, trainable)?;

        let h = g.constant(hints.clone());
        let s = nn::bind(g, params, self.hint_scale, trainable);
        let hint_enc = g.scale_by(h, s)?;

        let joined = g.concat(&[image_enc, hint_enc])?;
        let logits = self.decoder.forward(g, params, joined, trainable)?;
        Ok(NetOutput {
            logits,
            taps: vec![
                (IMAGE_ENCODING.into(), image_enc),
                (HINT_ENCODING.into(), hint_enc),
                (nn::PRE_LOGITS.into(), joined),
            ],
        })
    }
}

/// `784 → hidden → 10` perceptron for pixel-hinted digits.
#[derive(Debug, Clone)]
pub struct PixelHintNet {
    hidden: DenseLayer,
    output: DenseLayer,
}

impl PixelHintNet {
    pub fn new<R: Rng + ?Sized>(params: &mut ParameterSet, hidden_width: usize, rng: &mut R) -> Result<Self> {
        let hidden = DenseLayer::new(
            params,
            "hidden",
            Partition::Encoder,
            SIDE * SIDE,
            hidden_width,
            Activation::LeakyRelu,
            rng,
        )?;
        let output = DenseLayer::new(
            params,
            "output",
            Partition::Decoder,
            hidden_width,
            DIGITS,
            Activation::None,
            rng,
        )?;
        Ok(Self { hidden, output })
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.out_dim
    }
}

impl Network for PixelHintNet {
    fn taps(&self) -> Vec<TapInfo> {
        vec![TapInfo::new(HIDDEN, vec![self.hidden.out_dim])]
    }

    fn loss_kind(&self) -> LossKind {
        LossKind::SoftmaxCe { classes: DIGITS }
    }

    fn forward(&self, g: &mut Graph, params: &ParameterSet, input: &NetInput, trainable: bool) -> Result<NetOutput> {
        let b = input.batch_len();
        let x = g.constant(input.images.clone().reshape(vec![b, SIDE * SIDE])?);
        let z = self.hidden.forward(g, params, x, trainable)?;
        let logits = self.output.forward(g, params, z, trainable)?;
        Ok(NetOutput {
            logits,
            taps: vec![(HIDDEN.into(), z)],
        })
    }
}

/// Builds the main network for `variant`.
pub fn build_toy_model<R: Rng + ?Sized>(
    variant: HintVariant,
    params: &mut ParameterSet,
    hidden_width: usize,
    hint_scale_init: f64,
    rng: &mut R,
) -> Result<Box<dyn Network>> {
    Ok(match variant {
        HintVariant::OnehotHint => Box::new(OnehotHintNet::new(params, hint_scale_init, rng)?),
        HintVariant::PixelHint => Box::new(PixelHintNet::new(params, hidden_width, rng)?),
    })
}
