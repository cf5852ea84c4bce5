use rand::Rng;

use super::config::ModelSpec;
use crate::autodiff::{Graph, Padding, ParameterSet, Partition};
use crate::nn::{Activation, Conv2dLayer, DenseLayer, LossKind, NetInput, NetOutput, Network, TapInfo, PRE_LOGITS};
use crate::Result;

/// Compact stability classifier: strided conv blocks, one dense layer
/// (`pre_logits`) and a single global-stability logit.
///
/// Tappable layers are `input`, `conv1..convN` and `pre_logits`.
#[derive(Debug, Clone)]
pub struct TowerNet {
    convs: Vec<Conv2dLayer>,
    dense: DenseLayer,
    logits: DenseLayer,
    taps: Vec<TapInfo>,
}

impl TowerNet {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        spec: &ModelSpec,
        image_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut taps = vec![TapInfo::new("input", vec![3, image_size, image_size])];
        let mut convs = Vec::with_capacity(spec.channels.len());
        let (mut ch, mut h, mut w) = (3, image_size, image_size);
        for (i, &out) in spec.channels.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let conv = Conv2dLayer::new(
                params,
                &name,
                Partition::Encoder,
                ch,
                out,
                spec.kernel,
                spec.stride,
                Padding::Same,
                Activation::LeakyRelu,
                rng,
            )?;
            (h, w) = conv.output_hw(h, w);
            ch = out;
            taps.push(TapInfo::new(name, vec![ch, h, w]));
            convs.push(conv);
        }
        let dense = DenseLayer::new(
            params,
            PRE_LOGITS,
            Partition::Encoder,
            ch * h * w,
            spec.dense_width,
            Activation::LeakyRelu,
            rng,
        )?;
        taps.push(TapInfo::new(PRE_LOGITS, vec![spec.dense_width]));
        let logits = DenseLayer::new(params, "logits", Partition::Decoder, spec.dense_width, 1, Activation::None, rng)?;
        Ok(Self {
            convs,
            dense,
            logits,
            taps,
        })
    }
}

impl Network for TowerNet {
    fn taps(&self) -> Vec<TapInfo> {
        self.taps.clone()
    }

    fn loss_kind(&self) -> LossKind {
        LossKind::SigmoidCe
    }

    fn forward(&self, g: &mut Graph, params: &ParameterSet, input: &NetInput, trainable: bool) -> Result<NetOutput> {
        let x = g.constant(input.images.clone());
        let mut taps = vec![("input".to_string(), x)];
        let mut a = x;
        for (i, conv) in self.convs.iter().enumerate() {
            a = conv.forward(g, params, a, trainable)?;
            taps.push((format!("conv{}", i + 1), a));
        }
        let flat = g.flatten(a)?;
        let z = self.dense.forward(g, params, flat, trainable)?;
        taps.push((PRE_LOGITS.to_string(), z));
        let logits = self.logits.forward(g, params, z, trainable)?;
        Ok(NetOutput { logits, taps })
    }
}
