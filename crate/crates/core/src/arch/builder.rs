//! Naming and wiring helpers shared by the architecture builders.

use volseg_grad::{CropOffset, FuseMode, Graph, LayerKind, NodeId};

use super::Backbone;
use crate::error::Result;

pub(super) struct Builder {
    graph: Graph,
    channels: Vec<usize>,
    pub input: NodeId,
}

impl Builder {
    pub fn new(input_channels: usize) -> Self {
        let mut graph = Graph::new();
        let input = graph.add("data", LayerKind::Input { channels: input_channels }, &[]);
        Self { graph, channels: vec![input_channels], input }
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: &[NodeId], channels: usize) -> NodeId {
        let id = self.graph.add(name, kind, inputs);
        self.channels.push(channels);
        id
    }

    pub fn labels(&mut self) -> NodeId {
        self.push("label", LayerKind::Labels, &[], 0)
    }

    pub fn conv(&mut self, name: &str, x: NodeId, kernel: usize, padding: usize, out: usize) -> NodeId {
        let kind = LayerKind::Conv2d {
            in_channels: self.channels[x.0],
            out_channels: out,
            kernel,
            stride: 1,
            padding,
            bias: true,
        };
        self.push(name, kind, &[x], out)
    }

    pub fn conv_relu(&mut self, name: &str, x: NodeId, kernel: usize, padding: usize, out: usize) -> NodeId {
        let c = self.conv(name, x, kernel, padding, out);
        self.push(&format!("{name}_relu"), LayerKind::Relu, &[c], out)
    }

    /// One trunk stage of 3x3 convolutions; only the network's very first
    /// convolution uses `first_padding`.
    pub fn stage(&mut self, mut x: NodeId, bb: &Backbone, stage: usize, first_padding: usize) -> NodeId {
        for i in 0..bb.convs_per_stage[stage] {
            let pad = if stage == 0 && i == 0 { first_padding } else { 1 };
            x = self.conv_relu(&format!("conv{}_{}", stage + 1, i + 1), x, 3, pad, bb.widths[stage]);
        }
        x
    }

    pub fn pool(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels[x.0];
        self.push(name, LayerKind::MaxPool2d { window: 2, stride: 2, ceil_mode: true }, &[x], c)
    }

    /// Learned upsampling by `stride` with a `2 * stride` kernel.
    pub fn deconv(&mut self, name: &str, x: NodeId, stride: usize, out: usize) -> NodeId {
        let kind = LayerKind::TransposedConv2d {
            in_channels: self.channels[x.0],
            out_channels: out,
            kernel: 2 * stride,
            stride,
            padding: 0,
        };
        self.push(name, kind, &[x], out)
    }

    pub fn crop(&mut self, name: &str, big: NodeId, reference: NodeId, offset: CropOffset) -> NodeId {
        let c = self.channels[big.0];
        self.push(name, LayerKind::CropAlign { offset }, &[big, reference], c)
    }

    pub fn fuse(&mut self, name: &str, inputs: &[NodeId], mode: FuseMode) -> NodeId {
        let c = match mode {
            FuseMode::Concat => inputs.iter().map(|i| self.channels[i.0]).sum(),
            _ => self.channels[inputs[0].0],
        };
        self.push(name, LayerKind::Fuse { mode }, inputs, c)
    }

    pub fn loss(&mut self, name: &str, scores: NodeId, labels: NodeId) -> NodeId {
        self.push(name, LayerKind::SoftmaxLoss, &[scores, labels], 1)
    }

    pub fn finish(self) -> Result<Graph> {
        self.graph.validate()?;
        Ok(self.graph)
    }
}
