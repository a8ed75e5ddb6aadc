//! Layer DAG with parameter bookkeeping, forward evaluation and reverse-mode
//! gradient accumulation.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GradError, Result};
use crate::ops::{self, FuseMode};
use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Where a crop window starts inside the larger map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropOffset {
    /// Same fixed offset on both axes.
    Fixed(usize),
    /// Window centred in the larger map (rounded down).
    Center,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Image batch fed from outside, `[N, channels, H, W]`.
    Input { channels: usize },
    /// Per-pixel class indices fed from outside, `[N, H, W]`.
    Labels,
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    TransposedConv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
        ceil_mode: bool,
    },
    Relu,
    /// Inputs: `[big, reference]`; output has the reference's spatial extents.
    CropAlign { offset: CropOffset },
    Fuse { mode: FuseMode },
    /// Inputs: `[scores, labels]`; output is the scalar mean loss.
    SoftmaxLoss,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Labels => "labels",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::TransposedConv2d { .. } => "transposed_conv2d",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Relu => "relu",
            LayerKind::CropAlign { .. } => "crop_align",
            LayerKind::Fuse { .. } => "fuse",
            LayerKind::SoftmaxLoss => "softmax_loss",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            LayerKind::Input { .. } | LayerKind::Labels => Some(0),
            LayerKind::CropAlign { .. } | LayerKind::SoftmaxLoss => Some(2),
            LayerKind::Fuse { .. } => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

/// Shape and provenance of one learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub node: NodeId,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    nodes: Vec<LayerNode>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a node. Inputs are not checked here; see [`Graph::validate`].
    pub fn add(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[NodeId]) -> NodeId {
        self.nodes.push(LayerNode {
            name: name.into(),
            kind,
            inputs: inputs.to_vec(),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn set_inputs(&mut self, id: NodeId, inputs: &[NodeId]) {
        self.nodes[id.0].inputs = inputs.to_vec();
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Kahn ordering of all nodes; fails if the input references form a cycle.
    pub fn topological_order(&self) -> Result<Vec<NodeId>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                if inp.0 >= n {
                    return Err(GradError::Graph(format!(
                        "node `{}` references missing node #{}",
                        node.name, inp.0
                    )));
                }
                indegree[i] += 1;
                users[inp.0].push(i);
            }
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            order.push(NodeId(i));
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    queue.push_back(u);
                }
            }
        }
        if order.len() != n {
            let stuck: Vec<&str> = (0..n)
                .filter(|&i| indegree[i] > 0)
                .map(|i| self.nodes[i].name.as_str())
                .collect();
            return Err(GradError::Cycle(stuck.join(", ")));
        }
        Ok(order)
    }

    /// Structural checks: acyclic, arities, and channel flow consistent with
    /// every layer's declared channel counts. Returns per-node channel counts.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let order = self.topological_order()?;
        let mut channels = vec![0usize; self.nodes.len()];
        for id in order {
            let node = &self.nodes[id.0];
            if let Some(a) = node.kind.arity() {
                if node.inputs.len() != a {
                    return Err(GradError::Graph(format!(
                        "node `{}` ({}) needs {a} inputs, has {}",
                        node.name,
                        node.kind.as_str(),
                        node.inputs.len()
                    )));
                }
            } else if node.inputs.is_empty() {
                return Err(GradError::Graph(format!("fuse node `{}` has no inputs", node.name)));
            }
            let inc: Vec<usize> = node.inputs.iter().map(|i| channels[i.0]).collect();
            let mismatch = |want: usize, got: usize| {
                GradError::Graph(format!(
                    "node `{}` expects {want} input channels, predecessor provides {got}",
                    node.name
                ))
            };
            channels[id.0] = match &node.kind {
                LayerKind::Input { channels } => *channels,
                LayerKind::Labels => 0,
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    ..
                }
                | LayerKind::TransposedConv2d {
                    in_channels,
                    out_channels,
                    ..
                } => {
                    if inc[0] != *in_channels {
                        return Err(mismatch(*in_channels, inc[0]));
                    }
                    *out_channels
                }
                LayerKind::MaxPool2d { .. } | LayerKind::Relu | LayerKind::CropAlign { .. } => inc[0],
                LayerKind::Fuse { mode } => match mode {
                    FuseMode::Concat => inc.iter().sum(),
                    _ => {
                        if inc.iter().any(|&c| c != inc[0]) {
                            return Err(GradError::Graph(format!(
                                "element-wise fuse `{}` mixes channel counts {inc:?}",
                                node.name
                            )));
                        }
                        inc[0]
                    }
                },
                LayerKind::SoftmaxLoss => 1,
            };
        }
        Ok(channels)
    }

    /// Learnable tensors in node order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match node.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    out.push(ParamSpec {
                        name: format!("{}.weight", node.name),
                        node: NodeId(i),
                        role: ParamRole::Weight,
                        shape: vec![out_channels, in_channels, kernel, kernel],
                        fan_in,
                    });
                    if bias {
                        out.push(ParamSpec {
                            name: format!("{}.bias", node.name),
                            node: NodeId(i),
                            role: ParamRole::Bias,
                            shape: vec![out_channels],
                            fan_in,
                        });
                    }
                }
                LayerKind::TransposedConv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    // Each output pixel sees about (kernel / stride)^2 taps per input channel.
                    let taps = kernel.div_ceil(stride.max(1));
                    out.push(ParamSpec {
                        name: format!("{}.weight", node.name),
                        node: NodeId(i),
                        role: ParamRole::Weight,
                        shape: vec![in_channels, out_channels, kernel, kernel],
                        fan_in: in_channels * taps * taps,
                    });
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Static `(channels, height, width)` of every node for a given input size,
    /// without allocating activations. Nodes that cannot be evaluated (for
    /// example label inputs) are `None`.
    pub fn infer_shapes(&self, input_hw: (usize, usize)) -> Result<Vec<Option<(usize, usize, usize)>>> {
        let channels = self.validate()?;
        let mut shapes: Vec<Option<(usize, usize, usize)>> = vec![None; self.nodes.len()];
        for id in self.topological_order()? {
            let node = &self.nodes[id.0];
            let ins: Vec<Option<(usize, usize, usize)>> = node.inputs.iter().map(|i| shapes[i.0]).collect();
            let c = channels[id.0];
            let ext_err = |detail: String| GradError::Extent {
                op: "infer_shapes",
                detail: format!("node `{}`: {detail}", node.name),
            };
            shapes[id.0] = match &node.kind {
                LayerKind::Input { .. } => Some((c, input_hw.0, input_hw.1)),
                LayerKind::Labels | LayerKind::SoftmaxLoss => None,
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let (_, h, w) = ins[0].ok_or_else(|| ext_err("unknown input".into()))?;
                    let f = |e| ops::conv_out_extent(e, *kernel, *stride, *padding);
                    match (f(h), f(w)) {
                        (Some(oh), Some(ow)) => Some((c, oh, ow)),
                        _ => return Err(ext_err(format!("kernel {kernel} does not fit {h}x{w}"))),
                    }
                }
                LayerKind::TransposedConv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let (_, h, w) = ins[0].ok_or_else(|| ext_err("unknown input".into()))?;
                    let f = |e| ops::conv_transpose_out_extent(e, *kernel, *stride, *padding);
                    match (f(h), f(w)) {
                        (Some(oh), Some(ow)) => Some((c, oh, ow)),
                        _ => return Err(ext_err("non-positive extent".into())),
                    }
                }
                LayerKind::MaxPool2d {
                    window,
                    stride,
                    ceil_mode,
                } => {
                    let (_, h, w) = ins[0].ok_or_else(|| ext_err("unknown input".into()))?;
                    let f = |e| ops::pool_out_extent(e, *window, *stride, *ceil_mode);
                    match (f(h), f(w)) {
                        (Some(oh), Some(ow)) => Some((c, oh, ow)),
                        _ => return Err(ext_err(format!("window {window} larger than {h}x{w}"))),
                    }
                }
                LayerKind::Relu => ins[0],
                LayerKind::CropAlign { offset } => {
                    let (_, h, w) = ins[0].ok_or_else(|| ext_err("unknown input".into()))?;
                    let (_, th, tw) = ins[1].ok_or_else(|| ext_err("unknown reference".into()))?;
                    let (oy, ox) = crop_offset(*offset, (h, w), (th, tw));
                    if oy + th > h || ox + tw > w {
                        return Err(ext_err(format!(
                            "crop {th}x{tw} at ({oy}, {ox}) exceeds {h}x{w}"
                        )));
                    }
                    Some((c, th, tw))
                }
                LayerKind::Fuse { mode } => {
                    let first = ins[0].ok_or_else(|| ext_err("unknown input".into()))?;
                    for s in &ins {
                        let s = s.ok_or_else(|| ext_err("unknown input".into()))?;
                        if (s.1, s.2) != (first.1, first.2) || (*mode != FuseMode::Concat && s.0 != first.0) {
                            return Err(ext_err(format!("fuse operands {first:?} vs {s:?}")));
                        }
                    }
                    Some((c, first.1, first.2))
                }
            };
        }
        Ok(shapes)
    }

    /// Text table of nodes: name, kind, output shape for `input_hw`, params.
    pub fn summary(&self, input_hw: (usize, usize)) -> Result<String> {
        let shapes = self.infer_shapes(input_hw)?;
        let specs = self.param_specs();
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:<18} {:<18} {:>12}", "node", "kind", "shape", "params");
        for (i, node) in self.nodes.iter().enumerate() {
            let shape = shapes[i].map_or("-".to_string(), |(c, h, w)| format!("{c}x{h}x{w}"));
            let params: usize = specs.iter().filter(|s| s.node.0 == i).map(ParamSpec::numel).sum();
            let _ = writeln!(out, "{:<24} {:<18} {:<18} {:>12}", node.name, node.kind.as_str(), shape, params);
        }
        let _ = writeln!(out, "total parameters: {}", self.param_count());
        Ok(out)
    }

    /// Evaluate every node needed to produce `targets`.
    pub fn forward(
        &self,
        params: &ParamStore,
        feeds: &[(NodeId, Tensor)],
        targets: &[NodeId],
    ) -> Result<Activations> {
        let order = self.topological_order()?;
        let n = self.nodes.len();
        let mut needed = vec![false; n];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            if !needed[id.0] {
                needed[id.0] = true;
                stack.extend(self.nodes[id.0].inputs.iter().copied());
            }
        }
        let mut acts = Activations::new(n);
        for id in order {
            if !needed[id.0] {
                continue;
            }
            let node = &self.nodes[id.0];
            let input = |k: usize| -> Result<&Tensor> {
                acts.values[node.inputs[k].0]
                    .as_ref()
                    .ok_or_else(|| GradError::Graph(format!("input {k} of `{}` not evaluated", node.name)))
            };
            let value = match &node.kind {
                LayerKind::Input { channels } => {
                    let t = feed(feeds, id, &node.name)?;
                    let (_, c, _, _) = t.dims4("input")?;
                    if c != *channels {
                        return Err(GradError::Shape {
                            op: "input",
                            detail: format!("`{}` expects {channels} channels, got {c}", node.name),
                        });
                    }
                    t.clone()
                }
                LayerKind::Labels => feed(feeds, id, &node.name)?.clone(),
                LayerKind::Conv2d {
                    stride, padding, bias, ..
                } => {
                    let w = params.get(&format!("{}.weight", node.name))?;
                    let b = if *bias {
                        Some(params.get(&format!("{}.bias", node.name))?)
                    } else {
                        None
                    };
                    ops::conv2d(input(0)?, w, b, *stride, *padding)?
                }
                LayerKind::TransposedConv2d { stride, padding, .. } => {
                    let w = params.get(&format!("{}.weight", node.name))?;
                    ops::transposed_conv2d(input(0)?, w, *stride, *padding)?
                }
                LayerKind::MaxPool2d {
                    window,
                    stride,
                    ceil_mode,
                } => {
                    let (out, arg) = ops::maxpool2d(input(0)?, *window, *stride, *ceil_mode)?;
                    acts.pool_arg[id.0] = Some(arg);
                    out
                }
                LayerKind::Relu => ops::relu(input(0)?),
                LayerKind::CropAlign { offset } => {
                    let big = input(0)?;
                    let reference = input(1)?;
                    let (h, w) = (big.shape()[2], big.shape()[3]);
                    let rs = reference.shape();
                    let (th, tw) = (rs[rs.len() - 2], rs[rs.len() - 1]);
                    let off = crop_offset(*offset, (h, w), (th, tw));
                    acts.crop_off[id.0] = off;
                    ops::crop_align(big, (th, tw), off)?
                }
                LayerKind::Fuse { mode } => {
                    let ins: Vec<&Tensor> = (0..node.inputs.len()).map(input).collect::<Result<_>>()?;
                    let (out, arg) = ops::fuse(&ins, *mode)?;
                    acts.fuse_arg[id.0] = Some(arg);
                    out
                }
                LayerKind::SoftmaxLoss => {
                    let (loss, grad) = ops::softmax_multinomial_loss(input(0)?, input(1)?)?;
                    acts.loss_grad[id.0] = Some(grad);
                    Tensor::scalar(loss)
                }
            };
            acts.values[id.0] = Some(value);
        }
        Ok(acts)
    }

    /// Reverse-mode sweep from `seeds` (upstream gradients of chosen nodes).
    ///
    /// Parameter gradients are accumulated into `params`; every parameter ends
    /// up with a gradient buffer, zero where the seeds do not depend on it.
    /// Returns the gradient reaching each node (notably the inputs).
    pub fn backward(
        &self,
        params: &mut ParamStore,
        acts: &Activations,
        seeds: &[(NodeId, Tensor)],
    ) -> Result<NodeGrads> {
        let order = self.topological_order()?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        for (id, g) in seeds {
            let value = acts.values[id.0]
                .as_ref()
                .ok_or_else(|| GradError::Graph(format!("seed node `{}` was not evaluated", self.nodes[id.0].name)))?;
            if value.shape() != g.shape() {
                return Err(GradError::Shape {
                    op: "backward",
                    detail: format!("seed {:?} vs value {:?}", g.shape(), value.shape()),
                });
            }
            accumulate(&mut grads[id.0], g.clone());
        }
        for t in params.tensors.iter_mut() {
            t.grad_mut();
        }
        for id in order.into_iter().rev() {
            let Some(g) = grads[id.0].take() else { continue };
            let node = &self.nodes[id.0];
            let input = |k: usize| -> Result<&Tensor> {
                acts.values[node.inputs[k].0]
                    .as_ref()
                    .ok_or_else(|| GradError::Graph(format!("input {k} of `{}` missing", node.name)))
            };
            match &node.kind {
                LayerKind::Input { .. } | LayerKind::Labels => {}
                LayerKind::Conv2d {
                    stride, padding, bias, ..
                } => {
                    let wname = format!("{}.weight", node.name);
                    let cg = ops::conv2d_backward(input(0)?, params.get(&wname)?, *stride, *padding, &g)?;
                    params.add_grad(&wname, cg.weight.data())?;
                    if *bias {
                        params.add_grad(&format!("{}.bias", node.name), cg.bias.data())?;
                    }
                    accumulate(&mut grads[node.inputs[0].0], cg.input);
                }
                LayerKind::TransposedConv2d { stride, padding, .. } => {
                    let wname = format!("{}.weight", node.name);
                    let (gx, gw) =
                        ops::transposed_conv2d_backward(input(0)?, params.get(&wname)?, *stride, *padding, &g)?;
                    params.add_grad(&wname, gw.data())?;
                    accumulate(&mut grads[node.inputs[0].0], gx);
                }
                LayerKind::MaxPool2d { .. } => {
                    let arg = acts.pool_arg[id.0].as_ref().expect("pool argmax cached");
                    let gx = ops::maxpool2d_backward(input(0)?.shape(), arg, &g)?;
                    accumulate(&mut grads[node.inputs[0].0], gx);
                }
                LayerKind::Relu => {
                    let gx = ops::relu_backward(input(0)?, &g);
                    accumulate(&mut grads[node.inputs[0].0], gx);
                }
                LayerKind::CropAlign { .. } => {
                    let gx = ops::crop_align_backward(input(0)?.shape(), acts.crop_off[id.0], &g)?;
                    accumulate(&mut grads[node.inputs[0].0], gx);
                }
                LayerKind::Fuse { mode } => {
                    let shapes: Vec<Vec<usize>> = (0..node.inputs.len())
                        .map(|k| input(k).map(|t| t.shape().to_vec()))
                        .collect::<Result<_>>()?;
                    let arg = acts.fuse_arg[id.0].as_deref().unwrap_or(&[]);
                    let gs = ops::fuse_backward(&shapes, *mode, arg, &g)?;
                    for (inp, gx) in node.inputs.iter().zip(gs) {
                        accumulate(&mut grads[inp.0], gx);
                    }
                }
                LayerKind::SoftmaxLoss => {
                    let dscores = acts.loss_grad[id.0].as_ref().expect("loss gradient cached");
                    let scale = g.data()[0];
                    let data = dscores.data().iter().map(|v| v * scale).collect();
                    accumulate(&mut grads[node.inputs[0].0], Tensor::new(dscores.shape(), data)?);
                }
            }
            if matches!(node.kind, LayerKind::Input { .. }) {
                grads[id.0] = Some(g);
            }
        }
        Ok(NodeGrads { grads })
    }
}

fn crop_offset(offset: CropOffset, big: (usize, usize), target: (usize, usize)) -> (usize, usize) {
    match offset {
        CropOffset::Fixed(o) => (o, o),
        CropOffset::Center => (big.0.saturating_sub(target.0) / 2, big.1.saturating_sub(target.1) / 2),
    }
}

fn feed<'a>(feeds: &'a [(NodeId, Tensor)], id: NodeId, name: &str) -> Result<&'a Tensor> {
    feeds
        .iter()
        .find(|(i, _)| *i == id)
        .map(|(_, t)| t)
        .ok_or_else(|| GradError::Graph(format!("no value fed for input `{name}`")))
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Cached forward values plus what backward needs from the forward pass.
#[derive(Debug)]
pub struct Activations {
    values: Vec<Option<Tensor>>,
    pool_arg: Vec<Option<Vec<u32>>>,
    fuse_arg: Vec<Option<Vec<u8>>>,
    crop_off: Vec<(usize, usize)>,
    loss_grad: Vec<Option<Tensor>>,
}

impl Activations {
    fn new(n: usize) -> Self {
        Self {
            values: vec![None; n],
            pool_arg: vec![None; n],
            fuse_arg: vec![None; n],
            crop_off: vec![(0, 0); n],
            loss_grad: vec![None; n],
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.values[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.values[id.0].take()
    }

    /// Scalar value of a loss node.
    pub fn scalar(&self, id: NodeId) -> Option<Real> {
        self.get(id).filter(|t| t.len() == 1).map(|t| t.data()[0])
    }
}

/// Gradients that reached graph nodes during a backward sweep.
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// Learnable tensors of one graph, in [`Graph::param_specs`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// Fan-in scaled uniform weights `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`
    /// drawn from a seeded stream; biases start at zero.
    pub fn init(graph: &Graph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = graph.param_specs();
        let tensors = specs
            .iter()
            .map(|s| match s.role {
                ParamRole::Bias => Tensor::zeros(&s.shape),
                ParamRole::Weight => {
                    let bound = (6.0 / s.fan_in.max(1) as f64).sqrt();
                    let data = (0..s.numel()).map(|_| rng.gen_range(-bound..bound) as Real).collect();
                    Tensor::new(&s.shape, data).expect("spec shape")
                }
            })
            .collect();
        Self::from_parts(specs.into_iter().map(|s| s.name).collect(), tensors)
    }

    pub fn zeros(graph: &Graph) -> Self {
        let specs = graph.param_specs();
        let tensors = specs.iter().map(|s| Tensor::zeros(&s.shape)).collect();
        Self::from_parts(specs.into_iter().map(|s| s.name).collect(), tensors)
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        assert_eq!(names.len(), tensors.len());
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| GradError::Graph(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(GradError::Graph(format!("no parameter named `{name}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    fn add_grad(&mut self, name: &str, g: &[Real]) -> Result<()> {
        let t = self.get_mut(name)?;
        for (a, b) in t.grad_mut().iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(in_c: usize, out_c: usize, k: usize, pad: usize) -> LayerKind {
        LayerKind::Conv2d {
            in_channels: in_c,
            out_channels: out_c,
            kernel: k,
            stride: 1,
            padding: pad,
            bias: true,
        }
    }

    #[test]
    fn cycle_is_detected() {
        let mut g = Graph::new();
        let x = g.add("x", LayerKind::Input { channels: 1 }, &[]);
        let a = g.add("a", LayerKind::Relu, &[x]);
        let b = g.add("b", LayerKind::Relu, &[a]);
        g.set_inputs(a, &[b]);
        let err = g.topological_order().unwrap_err();
        assert!(matches!(err, GradError::Cycle(ref s) if s.contains('a') && s.contains('b')));
        let params = ParamStore::zeros(&g);
        assert!(g.forward(&params, &[(x, Tensor::zeros(&[1, 1, 2, 2]))], &[b]).is_err());
    }

    #[test]
    fn single_conv_param_count() {
        let mut g = Graph::new();
        let x = g.add("x", LayerKind::Input { channels: 1 }, &[]);
        g.add("c", conv(1, 1, 3, 1), &[x]);
        assert_eq!(g.param_count(), 10);
    }

    #[test]
    fn channel_flow_is_validated() {
        let mut g = Graph::new();
        let x = g.add("x", LayerKind::Input { channels: 1 }, &[]);
        g.add("c", conv(2, 4, 3, 1), &[x]);
        assert!(g.validate().is_err());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.add("x", LayerKind::Input { channels: 1 }, &[]);
        let used = g.add("used", conv(1, 1, 1, 0), &[x]);
        let _unused = g.add("unused", conv(1, 1, 1, 0), &[x]);
        let mut params = ParamStore::init(&g, 3);
        let xin = Tensor::full(&[1, 1, 2, 2], 1.5);
        let acts = g.forward(&params, &[(x, xin)], &[used]).unwrap();
        g.backward(&mut params, &acts, &[(used, Tensor::full(&[1, 1, 2, 2], 1.0))]).unwrap();
        assert!(params.get("unused.weight").unwrap().grad().unwrap().iter().all(|&v| v == 0.0));
        assert!(params.get("used.weight").unwrap().grad().unwrap()[0] != 0.0);
    }

    #[test]
    fn two_paths_sum_gradients() {
        // y = relu(w x) + w x summed through an element-wise sum fuse, with
        // w x > 0 everywhere: dy/dw = 2 * sum(x).
        let mut g = Graph::new();
        let x = g.add("x", LayerKind::Input { channels: 1 }, &[]);
        let c = g.add(
            "c",
            LayerKind::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
                bias: false,
            },
            &[x],
        );
        let r = g.add("r", LayerKind::Relu, &[c]);
        let f = g.add("f", LayerKind::Fuse { mode: FuseMode::EltwiseSum }, &[r, c]);
        let mut params = ParamStore::zeros(&g);
        params.get_mut("c.weight").unwrap().data_mut()[0] = 0.5;
        let xin = Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let acts = g.forward(&params, &[(x, xin)], &[f]).unwrap();
        let grads = g.backward(&mut params, &acts, &[(f, Tensor::full(&[1, 1, 1, 3], 1.0))]).unwrap();
        assert_eq!(params.get("c.weight").unwrap().grad().unwrap(), &[12.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn forward_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.add("x", LayerKind::Input { channels: 2 }, &[]);
        let c = g.add("c", conv(2, 3, 3, 1), &[x]);
        let p = g.add("p", LayerKind::MaxPool2d { window: 2, stride: 2, ceil_mode: true }, &[c]);
        let params = ParamStore::init(&g, 11);
        let xin = Tensor::new(&[1, 2, 5, 5], (0..50).map(|v| (v as Real * 0.37).sin()).collect()).unwrap();
        let a = g.forward(&params, &[(x, xin.clone())], &[p]).unwrap();
        let b = g.forward(&params, &[(x, xin)], &[p]).unwrap();
        assert_eq!(a.get(p).unwrap().data(), b.get(p).unwrap().data());
    }

    #[test]
    fn shape_inference_matches_forward() {
        let mut g = Graph::new();
        let x = g.add("x", LayerKind::Input { channels: 1 }, &[]);
        let c = g.add("c", conv(1, 2, 3, 35), &[x]);
        let p = g.add("p", LayerKind::MaxPool2d { window: 2, stride: 2, ceil_mode: true }, &[c]);
        let u = g.add(
            "u",
            LayerKind::TransposedConv2d { in_channels: 2, out_channels: 2, kernel: 4, stride: 2, padding: 0 },
            &[p],
        );
        let k = g.add("k", LayerKind::CropAlign { offset: CropOffset::Center }, &[u, x]);
        let shapes = g.infer_shapes((9, 9)).unwrap();
        let params = ParamStore::init(&g, 0);
        let acts = g.forward(&params, &[(x, Tensor::zeros(&[1, 1, 9, 9]))], &[k]).unwrap();
        for id in [c, p, u, k] {
            let s = acts.get(id).unwrap().shape();
            assert_eq!(shapes[id.0], Some((s[1], s[2], s[3])));
        }
        assert!(g.summary((9, 9)).unwrap().contains("total parameters"));
    }
}
