use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::gemm::{gemm, View};
use super::tensor::check_shape;
use super::{Error, Gradients, ParamId, ParameterSet, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Coordinate list of a sparse matrix `[out_dim × in_dim]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseLayout {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub out_dim: usize,
    pub in_dim: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Constant,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    SparseLinear {
        x: NodeId,
        values: NodeId,
        layout: Arc<SparseLayout>,
    },
    StopGradient(NodeId),
    SigmoidCe {
        logits: NodeId,
        targets: Tensor,
        weights: Vec<f64>,
    },
    SoftmaxCe {
        logits: NodeId,
        targets: Tensor,
        weights: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::SparseLinear { .. } => "sparse_linear",
            Op::StopGradient(_) => "stop_gradient",
            Op::SigmoidCe { .. } => "sigmoid_ce",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Reshape(a)
            | Op::StopGradient(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Concat(xs) => xs.clone(),
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::SparseLinear { x, values, .. } => vec![*x, *values],
            Op::SigmoidCe { logits, .. } | Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
    value: Option<Tensor>,
    grad: Option<Tensor>,
    // op-specific forward byproducts reused by backward (im2col columns, probabilities)
    cache: Vec<f64>,
}

/// A computation graph built per mini-batch and then evaluated.
///
/// Nodes are appended in construction order, which is a topological order
/// because every op refers only to existing nodes. Shapes are inferred and
/// checked while building; [`Graph::forward`] evaluates every node once and
/// [`Graph::backward`] accumulates gradients in reverse order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .unwrap_or_else(|| panic!("node {id} has not been evaluated"))
    }

    pub fn try_value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    /// Gradient of the last backward's loss with respect to `id`, if any flowed there.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, requires_grad: bool, value: Option<Tensor>) -> NodeId {
        self.evaluated = false;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
            value,
            grad: None,
            cache: Vec::new(),
        });
        id
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    fn mismatch(&self, op: &'static str, expected: &[usize], actual: &[usize]) -> Error {
        Error::ShapeMismatch {
            node: self.next_id(),
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    // ---- leaves ----

    /// Placeholder fed at [`Graph::forward`] time.
    pub fn input(&mut self, shape: &[usize]) -> Result<NodeId, Error> {
        check_shape(shape)?;
        Ok(self.push(Op::Input, shape.to_vec(), false, None))
    }

    /// Placeholder whose gradient is tracked.
    pub fn variable(&mut self, shape: &[usize]) -> Result<NodeId, Error> {
        check_shape(shape)?;
        Ok(self.push(Op::Input, shape.to_vec(), true, None))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant, shape, false, Some(value))
    }

    /// Trainable parameter leaf; its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> NodeId {
        let v = params.value(id).clone();
        let shape = v.shape().to_vec();
        self.push(Op::Param(id), shape, true, Some(v))
    }

    /// Parameter leaf that is read but not differentiated.
    pub fn frozen_param(&mut self, params: &ParameterSet, id: ParamId) -> NodeId {
        let v = params.value(id).clone();
        let shape = v.shape().to_vec();
        self.push(Op::Constant, shape, false, Some(v))
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", &[sa.get(1).copied().unwrap_or(0), sb.get(1).copied().unwrap_or(0)], &sb));
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]], rg, None))
    }

    /// Adds a bias vector `[n]` to every row of `x [.., n]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, Error> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        let last = *sx.last().unwrap();
        if sb != [last] {
            return Err(self.mismatch("add_bias", &[last], &sb));
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Op::AddBias(x, bias), sx, rg, None))
    }

    fn same_shape(&mut self, name: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>, Error> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(self.mismatch(name, &sa, &sb));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let s = self.same_shape("add", a, b)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), s, rg, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let s = self.same_shape("sub", a, b)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Sub(a, b), s, rg, None))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let s = self.same_shape("mul", a, b)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul(a, b), s, rg, None))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Op::Scale(a, factor), s, rg, None)
    }

    /// Multiplies `x` by a one-element node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, Error> {
        let ss = self.shape(s).to_vec();
        if ss.iter().product::<usize>() != 1 {
            return Err(self.mismatch("scale_by", &[1], &ss));
        }
        let sx = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(Op::ScaleBy(x, s), sx, rg, None))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Op::Relu(a), s, rg, None)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Op::LeakyRelu(a, slope), s, rg, None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Op::Sigmoid(a), s, rg, None)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, Error> {
        let sa = self.shape(a).to_vec();
        check_shape(shape)?;
        if sa.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(self.mismatch("reshape", shape, &sa));
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Reshape(a), shape.to_vec(), rg, None))
    }

    /// `[b, ...] -> [b, prod(...)]`.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let sa = self.shape(a).to_vec();
        let rest: usize = sa[1..].iter().product();
        self.reshape(a, &[sa[0], rest.max(1)])
    }

    /// Concatenates 2-D nodes along the feature axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, Error> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero nodes".into()));
        }
        let rows = self.shape(parts[0])[0];
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p).to_vec();
            if s.len() != 2 || s[0] != rows {
                return Err(self.mismatch("concat", &[rows, 0], &s));
            }
            width += s[1];
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), vec![rows, width], rg, None))
    }

    /// Cross-correlation of `x [b, c, h, w]` with `w [o, c, kh, kw]` plus bias `[o]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId, Error> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(self.mismatch("conv2d", &[0, sw.get(1).copied().unwrap_or(0), 0, 0], &sx));
        }
        if sb != [sw[0]] {
            return Err(self.mismatch("conv2d", &[sw[0]], &sb));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let (h, wd, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        let (oh, ow, pt, pl) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = wd.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(wd);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > wd {
                    return Err(Error::Invalid(format!(
                        "conv2d node {}: kernel {kh}x{kw} larger than input {h}x{wd}",
                        self.next_id()
                    )));
                }
                ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
            }
        };
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            h,
            w: wd,
            out_ch: sw[0],
            kh,
            kw,
            stride,
            pad_top: pt,
            pad_left: pl,
            oh,
            ow,
        };
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Op::Conv2d { x, w, b, geom },
            vec![sx[0], sw[0], oh, ow],
            rg,
            None,
        ))
    }

    /// `out[b, r] = Σ values[k] · x[b, cols[k]]` over entries `k` with `rows[k] == r`.
    pub fn sparse_linear(
        &mut self,
        x: NodeId,
        values: NodeId,
        layout: Arc<SparseLayout>,
    ) -> Result<NodeId, Error> {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(values).to_vec();
        if sx.len() != 2 || sx[1] != layout.in_dim {
            return Err(self.mismatch("sparse_linear", &[sx[0], layout.in_dim], &sx));
        }
        if sv != [layout.rows.len()] || layout.rows.len() != layout.cols.len() {
            return Err(self.mismatch("sparse_linear", &[layout.rows.len()], &sv));
        }
        let rg = self.any_grad(&[x, values]);
        let out = vec![sx[0], layout.out_dim];
        Ok(self.push(Op::SparseLinear { x, values, layout }, out, rg, None))
    }

    /// Identity forward; blocks all gradient flow backward.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::StopGradient(a), s, false, None)
    }

    fn loss_weights(&mut self, op: &'static str, batch: usize, weights: Option<Vec<f64>>) -> Result<Vec<f64>, Error> {
        let w = weights.unwrap_or_else(|| vec![1.0; batch]);
        if w.len() != batch {
            return Err(self.mismatch(op, &[batch], &[w.len()]));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!("{op}: weights must be finite and non-negative")));
        }
        Ok(w)
    }

    /// Weighted mean of the elementwise sigmoid cross-entropy. Targets lie in `[0, 1]`.
    pub fn sigmoid_ce(
        &mut self,
        logits: NodeId,
        targets: Tensor,
        weights: Option<Vec<f64>>,
    ) -> Result<NodeId, Error> {
        let sl = self.shape(logits).to_vec();
        if targets.shape() != sl.as_slice() {
            return Err(self.mismatch("sigmoid_ce", &sl, targets.shape()));
        }
        let weights = self.loss_weights("sigmoid_ce", sl[0], weights)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Op::SigmoidCe {
                logits,
                targets,
                weights,
            },
            vec![1],
            rg,
            None,
        ))
    }

    /// Weighted mean over rows of `-Σ_k t_k log softmax(z)_k` for `z [b, k]`.
    pub fn softmax_ce(
        &mut self,
        logits: NodeId,
        targets: Tensor,
        weights: Option<Vec<f64>>,
    ) -> Result<NodeId, Error> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || targets.shape() != sl.as_slice() {
            return Err(self.mismatch("softmax_ce", &sl, targets.shape()));
        }
        let weights = self.loss_weights("softmax_ce", sl[0], weights)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                targets,
                weights,
            },
            vec![1],
            rg,
            None,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let rg = self.any_grad(&[a]);
        self.push(Op::Sum(a), vec![1], rg, None)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let rg = self.any_grad(&[a]);
        self.push(Op::Mean(a), vec![1], rg, None)
    }

    // ---- evaluation ----

    /// Evaluates every node once, in construction order.
    pub fn forward(&mut self, feeds: impl IntoIterator<Item = (NodeId, Tensor)>) -> Result<(), Error> {
        let mut feeds: HashMap<NodeId, Tensor> = feeds.into_iter().collect();
        for i in 0..self.nodes.len() {
            match &self.nodes[i].op {
                Op::Input => {
                    let t = feeds.remove(&NodeId(i)).ok_or(Error::MissingFeed(i))?;
                    if t.shape() != self.nodes[i].shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            node: i,
                            op: "input",
                            expected: self.nodes[i].shape.clone(),
                            actual: t.shape().to_vec(),
                        });
                    }
                    self.nodes[i].value = Some(t);
                }
                Op::Param(_) | Op::Constant => {}
                _ => {
                    let (v, cache) = self.eval(i);
                    let node = &mut self.nodes[i];
                    node.value = Some(v);
                    node.cache = cache;
                }
            }
        }
        if let Some(id) = feeds.keys().next() {
            return Err(Error::NotAnInput(id.0));
        }
        self.evaluated = true;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref().expect("parent evaluated first")
    }

    fn eval(&self, i: usize) -> (Tensor, Vec<f64>) {
        let shape = self.nodes[i].shape.clone();
        let mk = |data: Vec<f64>| Tensor::new(shape.clone(), data).expect("inferred shape");
        let none = Vec::new;
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) | Op::Constant => unreachable!(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, 1.0, View::rows(va.data(), k), View::rows(vb.data(), n), 0.0, &mut out);
                (mk(out), none())
            }
            Op::AddBias(x, b) => {
                let (vx, vb) = (self.val(*x), self.val(*b));
                let n = vb.len();
                let mut out = vx.data().to_vec();
                for row in out.chunks_mut(n) {
                    for (o, bias) in row.iter_mut().zip(vb.data()) {
                        *o += bias;
                    }
                }
                (mk(out), none())
            }
            Op::Add(a, b) => (mk(zip_map(self.val(*a), self.val(*b), |x, y| x + y)), none()),
            Op::Sub(a, b) => (mk(zip_map(self.val(*a), self.val(*b), |x, y| x - y)), none()),
            Op::Mul(a, b) => (mk(zip_map(self.val(*a), self.val(*b), |x, y| x * y)), none()),
            Op::Scale(a, f) => (mk(self.val(*a).data().iter().map(|v| v * f).collect()), none()),
            Op::ScaleBy(x, s) => {
                let s = self.val(*s).data()[0];
                (mk(self.val(*x).data().iter().map(|v| v * s).collect()), none())
            }
            Op::Relu(a) => (
                mk(self.val(*a).data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()),
                none(),
            ),
            Op::LeakyRelu(a, slope) => (
                mk(self
                    .val(*a)
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { slope * v })
                    .collect()),
                none(),
            ),
            Op::Sigmoid(a) => (mk(self.val(*a).data().iter().map(|&v| sigmoid(v)).collect()), none()),
            Op::Reshape(a) | Op::StopGradient(a) => (mk(self.val(*a).data().to_vec()), none()),
            Op::Concat(parts) => {
                let rows = shape[0];
                let mut out = Vec::with_capacity(rows * shape[1]);
                for r in 0..rows {
                    for p in parts {
                        let v = self.val(*p);
                        let c = v.shape()[1];
                        out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
                    }
                }
                (mk(out), none())
            }
            Op::Conv2d { x, w, b, geom } => {
                let (out, cols) = conv_forward(geom, self.val(*x).data(), self.val(*w).data(), self.val(*b).data());
                (mk(out), cols)
            }
            Op::SparseLinear { x, values, layout } => {
                let vx = self.val(*x);
                let vals = self.val(*values).data();
                let batch = vx.shape()[0];
                let mut out = vec![0.0; batch * layout.out_dim];
                for bi in 0..batch {
                    let xr = &vx.data()[bi * layout.in_dim..(bi + 1) * layout.in_dim];
                    let or = &mut out[bi * layout.out_dim..(bi + 1) * layout.out_dim];
                    for k in 0..vals.len() {
                        or[layout.rows[k]] += vals[k] * xr[layout.cols[k]];
                    }
                }
                (mk(out), none())
            }
            Op::SigmoidCe {
                logits,
                targets,
                weights,
            } => {
                let z = self.val(*logits).data();
                let per_row = z.len() / weights.len();
                let denom: f64 = weights.iter().sum::<f64>() * per_row as f64;
                let mut total = 0.0;
                let mut probs = Vec::with_capacity(z.len());
                for (j, (&zj, &yj)) in z.iter().zip(targets.data()).enumerate() {
                    let w = weights[j / per_row];
                    // max(z, 0) - z·y + ln(1 + e^{-|z|})
                    let l = zj.max(0.0) - zj * yj + (-zj.abs()).exp().ln_1p();
                    total += w * l;
                    probs.push(sigmoid(zj));
                }
                let loss = if denom > 0.0 { total / denom } else { 0.0 };
                (mk(vec![loss]), probs)
            }
            Op::SoftmaxCe {
                logits,
                targets,
                weights,
            } => {
                let z = self.val(*logits);
                let k = z.shape()[1];
                let denom: f64 = weights.iter().sum();
                let mut total = 0.0;
                let mut probs = Vec::with_capacity(z.len());
                for (r, row) in z.data().chunks(k).enumerate() {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    let t = &targets.data()[r * k..(r + 1) * k];
                    let l: f64 = row.iter().zip(t).map(|(zv, tv)| if *tv == 0.0 { 0.0 } else { -tv * (zv - lse) }).sum();
                    total += weights[r] * l;
                    probs.extend(row.iter().map(|v| (v - lse).exp()));
                }
                let loss = if denom > 0.0 { total / denom } else { 0.0 };
                (mk(vec![loss]), probs)
            }
            Op::Sum(a) => (mk(vec![self.val(*a).data().iter().sum()]), none()),
            Op::Mean(a) => {
                let v = self.val(*a);
                (mk(vec![v.data().iter().sum::<f64>() / v.len() as f64]), none())
            }
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Returns a gradient for every trainable parameter leaf in the graph;
    /// leaves with no path to `loss` receive zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, Error> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let loss_shape = self.nodes[loss.0].shape.clone();
        self.nodes[loss.0].grad = Some(Tensor::ones(&loss_shape));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }

        let mut grads = Gradients::default();
        for n in &self.nodes {
            if let Op::Param(pid) = n.op {
                match &n.grad {
                    Some(g) => grads.accumulate(pid, g),
                    None => grads.accumulate(pid, &Tensor::zeros(&n.shape)),
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(&mut self, id: NodeId, contrib: Vec<f64>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&contrib),
            None => node.grad = Some(Tensor::new(node.shape.clone(), contrib).expect("grad shape")),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let op = self.nodes[i].op.clone();
        let gd = g.data();
        match op {
            Op::Input | Op::Param(_) | Op::Constant | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let vb = self.val(b);
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, View::rows(gd, n), View::transposed(vb.data(), n), 0.0, &mut da);
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let va = self.val(a);
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, View::transposed(va.data(), k), View::rows(gd, n), 0.0, &mut db);
                    self.accumulate(b, db);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(x) {
                    self.accumulate(x, gd.to_vec());
                }
                if self.wants(b) {
                    let n = self.shape(b)[0];
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, gd.to_vec());
                self.accumulate(b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, gd.to_vec());
                self.accumulate(b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let da = zip_vals(gd, self.val(b).data(), |g, y| g * y);
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let db = zip_vals(gd, self.val(a).data(), |g, x| g * x);
                    self.accumulate(b, db);
                }
            }
            Op::Scale(a, f) => self.accumulate(a, gd.iter().map(|v| v * f).collect()),
            Op::ScaleBy(x, s) => {
                let sv = self.val(s).data()[0];
                if self.wants(x) {
                    self.accumulate(x, gd.iter().map(|v| v * sv).collect());
                }
                if self.wants(s) {
                    let ds: f64 = gd.iter().zip(self.val(x).data()).map(|(g, v)| g * v).sum();
                    self.accumulate(s, vec![ds]);
                }
            }
            Op::Relu(a) => {
                let da = zip_vals(gd, self.val(a).data(), |g, x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let da = zip_vals(gd, self.val(a).data(), |g, x| if x > 0.0 { g } else { slope * g });
                self.accumulate(a, da);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.as_ref().expect("evaluated").data();
                let da = zip_vals(gd, y, |g, s| g * s * (1.0 - s));
                self.accumulate(a, da);
            }
            Op::Reshape(a) => self.accumulate(a, gd.to_vec()),
            Op::Concat(parts) => {
                let rows = self.nodes[i].shape[0];
                let width = self.nodes[i].shape[1];
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * width + offset..r * width + offset + c]);
                        }
                        self.accumulate(p, d);
                    }
                    offset += c;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let cols = std::mem::take(&mut self.nodes[i].cache);
                let want_x = self.wants(x);
                let (dx, dw, db) = conv_backward(&geom, gd, self.val(w).data(), &cols, want_x);
                self.nodes[i].cache = cols;
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                self.accumulate(w, dw);
                self.accumulate(b, db);
            }
            Op::SparseLinear { x, values, layout } => {
                let batch = self.shape(x)[0];
                let (want_v, want_x) = (self.wants(values), self.wants(x));
                let vx = self.val(x).data();
                let vals = self.val(values).data();
                let mut dv = vec![0.0; if want_v { vals.len() } else { 0 }];
                let mut dx = vec![0.0; if want_x { batch * layout.in_dim } else { 0 }];
                for bi in 0..batch {
                    let gr = &gd[bi * layout.out_dim..(bi + 1) * layout.out_dim];
                    if want_v {
                        let xr = &vx[bi * layout.in_dim..(bi + 1) * layout.in_dim];
                        for (k, d) in dv.iter_mut().enumerate() {
                            *d += gr[layout.rows[k]] * xr[layout.cols[k]];
                        }
                    }
                    if want_x {
                        let dr = &mut dx[bi * layout.in_dim..(bi + 1) * layout.in_dim];
                        for k in 0..vals.len() {
                            dr[layout.cols[k]] += vals[k] * gr[layout.rows[k]];
                        }
                    }
                }
                if want_v {
                    self.accumulate(values, dv);
                }
                if want_x {
                    self.accumulate(x, dx);
                }
            }
            Op::SigmoidCe {
                logits,
                targets,
                weights,
            } => {
                let probs = &self.nodes[i].cache;
                let per_row = probs.len() / weights.len();
                let denom: f64 = weights.iter().sum::<f64>() * per_row as f64;
                let scale = if denom > 0.0 { gd[0] / denom } else { 0.0 };
                let dz: Vec<f64> = probs
                    .iter()
                    .zip(targets.data())
                    .enumerate()
                    .map(|(j, (p, y))| weights[j / per_row] * scale * (p - y))
                    .collect();
                self.accumulate(logits, dz);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                weights,
            } => {
                let probs = &self.nodes[i].cache;
                let k = self.shape(logits)[1];
                let denom: f64 = weights.iter().sum();
                let scale = if denom > 0.0 { gd[0] / denom } else { 0.0 };
                let mut dz = Vec::with_capacity(probs.len());
                for (r, (prow, trow)) in probs.chunks(k).zip(targets.data().chunks(k)).enumerate() {
                    let mass: f64 = trow.iter().sum();
                    for (p, t) in prow.iter().zip(trow) {
                        dz.push(weights[r] * scale * (mass * p - t));
                    }
                }
                self.accumulate(logits, dz);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].shape.iter().product();
                self.accumulate(a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n: usize = self.nodes[a.0].shape.iter().product();
                self.accumulate(a, vec![gd[0] / n as f64; n]);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    zip_vals(a.data(), b.data(), f)
}

fn zip_vals(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy as usize >= g.h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        *d = if ix < 0 || ix as usize >= g.w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            line[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (patch, pos) = (g.patch(), g.positions());
    let in_sz = g.in_ch * g.h * g.w;
    let out_sz = g.out_ch * pos;
    let mut cols = vec![0.0; g.batch * patch * pos];
    let mut out = vec![0.0; g.batch * out_sz];
    for bi in 0..g.batch {
        let cb = &mut cols[bi * patch * pos..(bi + 1) * patch * pos];
        im2col(g, &x[bi * in_sz..(bi + 1) * in_sz], cb);
        let ob = &mut out[bi * out_sz..(bi + 1) * out_sz];
        for (o, chunk) in ob.chunks_mut(pos).enumerate() {
            chunk.fill(b[o]);
        }
        gemm(g.out_ch, patch, pos, 1.0, View::rows(w, patch), View::rows(cb, pos), 1.0, ob);
    }
    (out, cols)
}

type ConvGrads = (Option<Vec<f64>>, Vec<f64>, Vec<f64>);

fn conv_backward(g: &ConvGeom, gout: &[f64], w: &[f64], cols: &[f64], want_x: bool) -> ConvGrads {
    let (patch, pos) = (g.patch(), g.positions());
    let in_sz = g.in_ch * g.h * g.w;
    let out_sz = g.out_ch * pos;
    let mut dw = vec![0.0; g.out_ch * patch];
    let mut db = vec![0.0; g.out_ch];
    let mut dx = want_x.then(|| vec![0.0; g.batch * in_sz]);
    let mut dcols = if want_x { vec![0.0; patch * pos] } else { Vec::new() };
    for bi in 0..g.batch {
        let gb = &gout[bi * out_sz..(bi + 1) * out_sz];
        let cb = &cols[bi * patch * pos..(bi + 1) * patch * pos];
        for (o, chunk) in gb.chunks(pos).enumerate() {
            db[o] += chunk.iter().sum::<f64>();
        }
        gemm(g.out_ch, pos, patch, 1.0, View::rows(gb, pos), View::transposed(cb, pos), 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            gemm(patch, g.out_ch, pos, 1.0, View::transposed(w, patch), View::rows(gb, pos), 0.0, &mut dcols);
            col2im(g, &dcols, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
        }
    }
    (dx, dw, db)
}
