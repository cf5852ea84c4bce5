//! Probe heads attached to intermediate layers, with λ-controlled gradient routing.
//!
//! A head reads the flattened activation `Z` of one tapped layer and is trained
//! on its own task with its own optimizer. The sign of λ decides how the main
//! network reacts to the head's loss:
//!
//! * `λ = 0` analytic: the head observes `Z` through a stop-gradient.
//! * `λ > 0` auxiliary: the main network also minimizes `λ·L_s`.
//! * `λ < 0` adversarial: the main network minimizes `|λ|·L_s` on flipped labels
//!   for binary tasks, or `λ·L_s` for n-way tasks.
//!
//! The head parameters always descend `∇ψ L_s` only.

mod sparse;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId, ParamId, ParameterSet, Partition, SparseLayout, Tensor};
use crate::nn::{
    self, sigmoid_ce_loss, softmax_ce_loss, Activation, DenseLayer, LossKind, NetInput, Network, TapInfo,
    PRE_LOGITS,
};
use crate::optim::RmsProp;
use crate::{Error, Result};

pub use sparse::build_sparse_pattern;


/// Weighting of the stethoscope loss in the main network's objective.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Lambda(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Analytic,
    Auxiliary,
    Adversarial,
}

impl Lambda {
    pub fn mode(self) -> Mode {
        if self.0 == 0.0 {
            Mode::Analytic
        } else if self.0 > 0.0 {
            Mode::Auxiliary
        } else {
            Mode::Adversarial
        }
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Supervision for a main or stethoscope task.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Binary(Vec<f64>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Binary(v) => v.len(),
            Targets::Classes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean loss of `logits` against these targets.
    pub fn loss(&self, g: &mut Graph, logits: NodeId, weights: Option<Vec<f64>>) -> Result<NodeId> {
        match self {
            Targets::Binary(y) => sigmoid_ce_loss(g, logits, y, weights),
            Targets::Classes(c) => softmax_ce_loss(g, logits, c, weights),
        }
    }

    pub fn matches(&self, kind: LossKind) -> bool {
        matches!(
            (self, kind),
            (Targets::Binary(_), LossKind::SigmoidCe) | (Targets::Classes(_), LossKind::SoftmaxCe { .. })
        )
    }

    /// Accuracy of a logits tensor against these targets, over entries with positive weight.
    pub fn correct(&self, logits: &Tensor) -> Vec<bool> {
        match self {
            Targets::Binary(y) => logits
                .data()
                .iter()
                .zip(y)
                .map(|(z, y)| (*z > 0.0) == (*y == 1.0))
                .collect(),
            Targets::Classes(c) => nn::argmax_rows(logits).iter().zip(c).map(|(p, c)| p == c).collect(),
        }
    }
}

/// Complements binary labels.
pub fn flip_labels(labels: &[f64]) -> Result<Vec<f64>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y == 0.0 || y == 1.0 {
                Ok(1.0 - y)
            } else {
                Err(Error::InvalidInput(format!("label {i} is {y}, expected 0 or 1")))
            }
        })
        .collect()
}

/// Soft targets spreading each row's mass evenly over every class except the labelled one.
pub fn complement_targets(classes: &[usize], k: usize) -> Result<Tensor> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("complement targets need at least 2 classes, got {k}")));
    }
    let mut t = Tensor::filled(&[classes.len(), k], 1.0 / (k - 1) as f64);
    for (i, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(Error::InvalidInput(format!("class {c} of row {i} out of range for {k} logits")));
        }
        t.set(&[i, c], 0.0);
    }
    Ok(t)
}

/// Objective for the main network given the stethoscope term it sees.
///
/// `steth` must already be the flipped-label loss for binary adversarial heads;
/// the caller obtains the right term and weight from [`encoder_side_loss`].
pub fn combined_loss(g: &mut Graph, loss_main: NodeId, steth: Option<(NodeId, f64)>) -> Result<NodeId> {
    match steth {
        None => Ok(loss_main),
        Some((_, w)) if w == 0.0 => Ok(loss_main),
        Some((l, w)) => {
            let scaled = g.scale(l, w);
            Ok(g.add(loss_main, scaled)?)
        }
    }
}

/// Stethoscope term as seen by the encoder, with its weight in the combined loss.
///
/// Returns `None` for λ = 0.
pub fn encoder_side_loss(
    g: &mut Graph,
    logits: NodeId,
    targets: &Targets,
    weights: Option<Vec<f64>>,
    lambda: Lambda,
) -> Result<Option<(NodeId, f64)>> {
    match (lambda.mode(), targets) {
        (Mode::Analytic, _) => Ok(None),
        (Mode::Auxiliary, t) => Ok(Some((t.loss(g, logits, weights)?, lambda.0))),
        (Mode::Adversarial, Targets::Binary(y)) => {
            let flipped = Targets::Binary(flip_labels(y)?);
            Ok(Some((flipped.loss(g, logits, weights)?, lambda.0.abs())))
        }
        (Mode::Adversarial, Targets::Classes(c)) => {
            let k = *g.shape(logits).last().unwrap_or(&0);
            let spread = complement_targets(c, k)?;
            Ok(Some((g.softmax_ce(logits, spread, weights)?, lambda.0.abs())))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// Dense at the layer feeding the logits, sparse elsewhere.
    #[default]
    Auto,
    Sparse,
    Dense,
}

/// Declarative description of a head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSpec {
    pub lambda: Lambda,
    pub loss: LossKind,
    pub attach_layer: String,
    pub hidden_width: usize,
    /// Connector size; defaults to the smallest multiple of `hidden_width` covering the tap.
    pub n_non_zero: Option<usize>,
    pub adapter: AdapterKind,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            lambda: Lambda(0.0),
            loss: LossKind::SigmoidCe,
            attach_layer: PRE_LOGITS.to_string(),
            hidden_width: 256,
            n_non_zero: None,
            adapter: AdapterKind::Auto,
        }
    }
}

/// Smallest multiple of `width` that is at least `len`.
pub fn default_non_zero(len: usize, width: usize) -> usize {
    len.div_ceil(width).max(1) * width
}

/// Sparse affine map `x′ = M·x + b` with a fixed connectivity pattern.
#[derive(Debug, Clone)]
pub struct SparseConnector {
    pub layout: Arc<SparseLayout>,
    pub weights: ParamId,
    pub bias: ParamId,
}

impl SparseConnector {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        n_non_zero: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layout = build_sparse_pattern(in_dim, out_dim, n_non_zero, rng.random())?;
        // each output sums n_non_zero / out_dim inputs
        let fan_in = n_non_zero / out_dim;
        let w = nn::truncated_normal(&[n_non_zero], fan_in, 1.0, rng)?;
        let weights = params.add(format!("{name}.weights"), Partition::Stethoscope, w)?;
        let bias = params.add(format!("{name}.bias"), Partition::Stethoscope, Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            layout: Arc::new(layout),
            weights,
            bias,
        })
    }

    pub fn apply(&self, g: &mut Graph, params: &ParameterSet, x: NodeId, trainable: bool) -> Result<NodeId> {
        let w = nn::bind(g, params, self.weights, trainable);
        let b = nn::bind(g, params, self.bias, trainable);
        let y = g.sparse_linear(x, w, Arc::clone(&self.layout))?;
        Ok(g.add_bias(y, b)?)
    }

    /// Dense `[out_dim × in_dim]` matrix equivalent to the connector weights.
    pub fn densify(&self, params: &ParameterSet) -> Tensor {
        let l = &self.layout;
        let mut m = Tensor::zeros(&[l.out_dim, l.in_dim]);
        for (k, &v) in params.value(self.weights).data().iter().enumerate() {
            m.set(&[l.rows[k], l.cols[k]], v);
        }
        m
    }
}

/// Where a head reads from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attachment {
    pub layer: String,
    pub flat_len: usize,
    pub adapter: AdapterKind,
}

#[derive(Debug, Clone)]
struct HeadLayers {
    attachment: Attachment,
    connector: Option<SparseConnector>,
    hidden: DenseLayer,
    output: DenseLayer,
}

/// A two-layer perceptron probe with an optional sparse input connector.
#[derive(Debug, Clone)]
pub struct StethoscopeHead {
    spec: HeadSpec,
    layers: Option<HeadLayers>,
}

impl StethoscopeHead {
    pub fn new(spec: HeadSpec) -> Self {
        Self { spec, layers: None }
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn lambda(&self) -> Lambda {
        self.spec.lambda
    }

    pub fn set_lambda(&mut self, lambda: Lambda) {
        self.spec.lambda = lambda;
    }

    pub fn mode(&self) -> Mode {
        self.spec.lambda.mode()
    }

    pub fn attachment(&self) -> Option<&Attachment> {
        self.layers.as_ref().map(|l| &l.attachment)
    }

    /// Number of trainable scalars the head owns.
    pub fn scalar_count(&self, params: &ParameterSet) -> usize {
        let Some(l) = &self.layers else { return 0 };
        let mut ids = vec![l.hidden.weight, l.hidden.bias, l.output.weight, l.output.bias];
        if let Some(c) = &l.connector {
            ids.extend([c.weights, c.bias]);
        }
        ids.iter().map(|&id| params.value(id).len()).sum()
    }

    pub fn connector(&self) -> Option<&SparseConnector> {
        self.layers.as_ref().and_then(|l| l.connector.as_ref())
    }

    /// Binds the head to one tap of `net`, creating its parameters under `prefix`.
    pub fn attach<R: Rng + ?Sized>(
        &mut self,
        taps: &[TapInfo],
        params: &mut ParameterSet,
        prefix: &str,
        rng: &mut R,
    ) -> Result<&Attachment> {
        if let Some(l) = &self.layers {
            return Err(Error::Config(format!(
                "head is already attached to layer {:?}",
                l.attachment.layer
            )));
        }
        let spec = &self.spec;
        let tap = taps
            .iter()
            .find(|t| t.name == spec.attach_layer)
            .ok_or_else(|| {
                let names: Vec<_> = taps.iter().map(|t| t.name.as_str()).collect();
                Error::Config(format!("unknown layer {:?}; available: {names:?}", spec.attach_layer))
            })?;
        if spec.hidden_width == 0 {
            return Err(Error::Config("stethoscope hidden width must be positive".into()));
        }
        let adapter = match spec.adapter {
            AdapterKind::Auto if tap.name == PRE_LOGITS => AdapterKind::Dense,
            AdapterKind::Auto => AdapterKind::Sparse,
            other => other,
        };
        let flat = tap.flat_len();
        let h = spec.hidden_width;
        let (connector, hidden_in) = match adapter {
            AdapterKind::Sparse => {
                let nnz = spec.n_non_zero.unwrap_or_else(|| default_non_zero(flat, h));
                if flat > nnz {
                    return Err(Error::Config(format!(
                        "layer {:?} has {flat} features, more than n_non_zero = {nnz}",
                        tap.name
                    )));
                }
                let c = SparseConnector::new(params, &format!("{prefix}.connector"), flat, h, nnz, rng)?;
                (Some(c), h)
            }
            _ => (None, flat),
        };
        let hidden = DenseLayer::new(
            params,
            &format!("{prefix}.hidden"),
            Partition::Stethoscope,
            hidden_in,
            h,
            Activation::Relu,
            rng,
        )?;
        let output = DenseLayer::new(
            params,
            &format!("{prefix}.output"),
            Partition::Stethoscope,
            h,
            spec.loss.arity(),
            Activation::None,
            rng,
        )?;
        self.layers = Some(HeadLayers {
            attachment: Attachment {
                layer: tap.name.clone(),
                flat_len: flat,
                adapter,
            },
            connector,
            hidden,
            output,
        });
        Ok(&self.layers.as_ref().unwrap().attachment)
    }

    /// Appends the head on top of activation `z`, flattening it first.
    pub fn apply(&self, g: &mut Graph, params: &ParameterSet, z: NodeId, trainable: bool) -> Result<NodeId> {
        let l = self
            .layers
            .as_ref()
            .ok_or_else(|| Error::Config("stethoscope head is not attached".into()))?;
        let mut x = if g.shape(z).len() == 2 { z } else { g.flatten(z)? };
        if let Some(c) = &l.connector {
            x = c.apply(g, params, x, trainable)?;
        }
        let h = l.hidden.forward(g, params, x, trainable)?;
        l.output.forward(g, params, h, trainable)
    }

    fn check_targets<'t>(&self, targets: Option<&'t Targets>) -> Result<&'t Targets> {
        let t = targets.ok_or_else(|| Error::InvalidInput("batch carries no stethoscope targets".into()))?;
        if !t.matches(self.spec.loss) {
            return Err(Error::InvalidInput(format!(
                "stethoscope targets do not fit loss {:?}",
                self.spec.loss
            )));
        }
        Ok(t)
    }
}

/// One mini-batch with main and stethoscope supervision.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: NetInput,
    pub main: Targets,
    /// Per-sample weights of the main loss; `None` weighs all samples equally.
    pub main_weights: Option<Vec<f64>>,
    pub steth: Option<Targets>,
    pub steth_weights: Option<Vec<f64>>,
}

/// Loss values observed during one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub loss_main: f64,
    pub loss_steth: Option<f64>,
}

/// Gradients of one step, split by the optimizer that consumes them.
#[derive(Debug, Clone, Default)]
pub struct StepGradients {
    pub theta: Gradients,
    pub psi: Gradients,
    pub report: StepReport,
}

/// Computes the θ and ψ gradients of one step from a single forward pass.
///
/// θ receives the gradient of the combined loss, where the head enters with
/// frozen ψ. ψ receives the gradient of `L_s` evaluated on `stop_gradient(Z)`.
pub fn step_gradients(
    net: &dyn Network,
    head: Option<&StethoscopeHead>,
    params: &ParameterSet,
    batch: &Batch,
) -> Result<StepGradients> {
    if !batch.main.matches(net.loss_kind()) {
        return Err(Error::InvalidInput("main targets do not fit the network's loss".into()));
    }
    let mut g = Graph::new();
    let out = net.forward(&mut g, params, &batch.input, true)?;
    let loss_main = batch.main.loss(&mut g, out.logits, batch.main_weights.clone())?;

    let mut psi_loss = None;
    let mut encoder_term = None;
    if let Some(head) = head {
        let targets = head.check_targets(batch.steth.as_ref())?;
        let layer = &head
            .attachment()
            .ok_or_else(|| Error::Config("stethoscope head is not attached".into()))?
            .layer;
        let z = out
            .tap(layer)
            .ok_or_else(|| Error::Config(format!("network exposes no tap {layer:?}")))?;
        let observed = g.stop_gradient(z);
        let logits = head.apply(&mut g, params, observed, true)?;
        psi_loss = Some(targets.loss(&mut g, logits, batch.steth_weights.clone())?);
        if head.mode() != Mode::Analytic {
            let logits = head.apply(&mut g, params, z, false)?;
            encoder_term = encoder_side_loss(&mut g, logits, targets, batch.steth_weights.clone(), head.lambda())?;
        }
    }
    let objective = combined_loss(&mut g, loss_main, encoder_term)?;
    g.forward([])?;

    let all = g.backward(objective)?;
    let mut theta = Gradients::default();
    for (id, t) in all.iter() {
        if params.get(id).partition.is_main() {
            theta.insert(id, t.clone());
        }
    }
    let mut psi = Gradients::default();
    let mut report = StepReport {
        loss_main: g.value(loss_main).item(),
        loss_steth: None,
    };
    if let Some(ls) = psi_loss {
        report.loss_steth = Some(g.value(ls).item());
        for (id, t) in g.backward(ls)?.iter() {
            if params.get(id).partition == Partition::Stethoscope {
                psi.insert(id, t.clone());
            }
        }
    }
    Ok(StepGradients { theta, psi, report })
}

/// One simultaneous θ/ψ update.
pub fn stethoscope_step(
    net: &dyn Network,
    head: Option<&StethoscopeHead>,
    params: &mut ParameterSet,
    batch: &Batch,
    theta_opt: &mut RmsProp,
    psi_opt: &mut RmsProp,
) -> Result<StepReport> {
    let grads = step_gradients(net, head, params, batch)?;
    theta_opt.step(params, &grads.theta)?;
    psi_opt.step(params, &grads.psi)?;
    Ok(grads.report)
}

/// Trains only ψ on precomputed activations of a frozen network.
pub fn head_only_step(
    head: &StethoscopeHead,
    params: &mut ParameterSet,
    features: Tensor,
    targets: &Targets,
    weights: Option<Vec<f64>>,
    psi_opt: &mut RmsProp,
) -> Result<f64> {
    head.check_targets(Some(targets))?;
    let mut g = Graph::new();
    let z = g.constant(features);
    let logits = head.apply(&mut g, params, z, true)?;
    let loss = targets.loss(&mut g, logits, weights)?;
    g.forward([])?;
    let grads = g.backward(loss)?;
    let mut psi = Gradients::default();
    for (id, t) in grads.iter() {
        if params.get(id).partition == Partition::Stethoscope {
            psi.insert(id, t.clone());
        }
    }
    psi_opt.step(params, &psi)?;
    Ok(g.value(loss).item())
}

/// Head logits for precomputed activations.
pub fn head_logits(head: &StethoscopeHead, params: &ParameterSet, features: Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let z = g.constant(features);
    let logits = head.apply(&mut g, params, z, false)?;
    g.forward([])?;
    Ok(g.value(logits).clone())
}
