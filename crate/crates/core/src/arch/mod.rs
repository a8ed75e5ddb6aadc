//! Network builders: FCN14/26/46, HED, the modified HED and the slice
//! detector, at full or desk scale.

mod builder;
pub mod detection;

use std::fmt;
use std::str::FromStr;

use volseg_grad::ops::softmax_channels;
use volseg_grad::{CropOffset, FuseMode, Graph, LayerKind, NodeId, ParamStore, Real, Tensor};

use crate::error::{invalid, Result};
use builder::Builder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchName {
    Fcn14,
    Fcn26,
    Fcn46,
    Hed,
    ModifiedHed,
    Detector,
}

impl ArchName {
    pub const SEGMENTATION: [ArchName; 5] =
        [ArchName::Fcn14, ArchName::Fcn26, ArchName::Fcn46, ArchName::Hed, ArchName::ModifiedHed];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::Fcn14 => "FCN14",
            ArchName::Fcn26 => "FCN26",
            ArchName::Fcn46 => "FCN46",
            ArchName::Hed => "HED",
            ArchName::ModifiedHed => "MODIFIED_HED",
            ArchName::Detector => "DETECTOR",
        }
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchName {
    type Err = crate::CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Ok(match norm.as_str() {
            "FCN14" => ArchName::Fcn14,
            "FCN26" => ArchName::Fcn26,
            "FCN46" => ArchName::Fcn46,
            "HED" => ArchName::Hed,
            "MODIFIED_HED" | "MHED" => ArchName::ModifiedHed,
            "DETECTOR" => ArchName::Detector,
            _ => return Err(invalid(format!("unknown architecture `{s}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// VGG16-sized trunk on 3-channel input.
    Full,
    /// Narrow trunk on single-channel input that trains on a CPU.
    Desk,
}

/// Trunk layout shared by every architecture at a given scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub widths: [usize; 5],
    pub convs_per_stage: [usize; 5],
    pub input_channels: usize,
    /// Width of the fully connected layers recast as convolutions (FCN).
    pub fc_width: usize,
    /// Kernel and padding of the first of those layers.
    pub fc_kernel: usize,
    pub fc_padding: usize,
    /// Pooling layers in the HED trunk (after stages 1..=n).
    pub hed_pools: usize,
}

impl Backbone {
    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Full => Backbone {
                widths: [64, 128, 256, 512, 512],
                convs_per_stage: [2, 2, 3, 3, 3],
                input_channels: 3,
                fc_width: 4096,
                fc_kernel: 7,
                fc_padding: 0,
                hed_pools: 4,
            },
            Scale::Desk => Backbone {
                widths: [8, 16, 32, 64, 64],
                convs_per_stage: [2, 2, 2, 2, 2],
                input_channels: 1,
                fc_width: 128,
                fc_kernel: 3,
                fc_padding: 1,
                hed_pools: 3,
            },
        }
    }
}

/// Padding of the first convolution in the FCN variants.
pub const FCN_FIRST_PADDING: usize = 35;
/// Default first-layer padding of HED.
pub const HED_FIRST_PADDING: usize = 35;
/// Default grid cell of the detector, in pixels.
pub const DEFAULT_CELL_SIZE: usize = 16;
/// Channels of the detector head: coverage then two corners (x, y).
pub const DETECTOR_OUTPUTS: usize = 5;

/// A built network and the handles needed to feed and read it.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    pub name: ArchName,
    pub scale: Scale,
    pub graph: Graph,
    pub input_channels: usize,
    pub num_classes: usize,
    pub input: NodeId,
    /// Per-pixel label input (segmentation variants only).
    pub labels: Option<NodeId>,
    /// Final class-score map, or the detector head.
    pub output: NodeId,
    /// Loss nodes whose sum is the training objective; the first one scores
    /// `output`, the rest supervise side outputs.
    pub losses: Vec<NodeId>,
    /// Cropped side-output score maps (HED variants).
    pub side_outputs: Vec<NodeId>,
    pub skip_count: usize,
    pub first_padding: usize,
    /// Stride of the last transposed convolution (FCN variants).
    pub final_stride: Option<usize>,
    /// Grid cell in pixels (detector only).
    pub cell_size: Option<usize>,
}

impl NetworkSpec {
    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    pub fn is_segmentation(&self) -> bool {
        self.name != ArchName::Detector
    }

    /// Node handles of every fuse layer.
    pub fn fuse_nodes(&self) -> Vec<NodeId> {
        self.graph
            .ids()
            .filter(|&id| matches!(self.graph.node(id).kind, LayerKind::Fuse { .. }))
            .collect()
    }
}

/// Build any architecture with its default options.
pub fn build(name: ArchName, scale: Scale, num_classes: usize) -> Result<NetworkSpec> {
    match name {
        ArchName::Fcn14 => build_fcn(14, scale, num_classes),
        ArchName::Fcn26 => build_fcn(26, scale, num_classes),
        ArchName::Fcn46 => build_fcn(46, scale, num_classes),
        ArchName::Hed => build_hed(scale, num_classes),
        ArchName::ModifiedHed => build_modified_hed(scale, num_classes),
        ArchName::Detector => build_detector(DEFAULT_CELL_SIZE, scale),
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    Ok(())
}

/// FCN with 0 (14), 1 (26) or 2 (46) skip connections; the suffix is the
/// stride of the last transposed convolution.
pub fn build_fcn(variant: usize, scale: Scale, num_classes: usize) -> Result<NetworkSpec> {
    let skips = match variant {
        14 => 0,
        26 => 1,
        46 => 2,
        _ => return Err(invalid(format!("unsupported FCN variant {variant}; use 14, 26 or 46"))),
    };
    check_classes(num_classes)?;
    let bb = Backbone::for_scale(scale);
    let k = num_classes;
    let mut b = Builder::new(bb.input_channels);
    let input = b.input;
    let labels = b.labels();

    // Stages 1-4 are always followed by pooling; stage 5 only when a skip
    // from pool4 is taken, so FCN14 scores at 1/16 and the others at 1/32.
    let mut x = input;
    let mut pools = Vec::new();
    for stage in 0..5 {
        x = b.stage(x, &bb, stage, FCN_FIRST_PADDING);
        if stage < 4 || skips > 0 {
            x = b.pool(&format!("pool{}", stage + 1), x);
            pools.push(x);
        }
    }
    let fc6 = b.conv_relu("fc6", x, bb.fc_kernel, bb.fc_padding, bb.fc_width);
    let fc7 = b.conv_relu("fc7", fc6, 1, 0, bb.fc_width);
    let mut score = b.conv("score_fr", fc7, 1, 0, k);

    // Each skip doubles the resolution of the running score and adds the
    // score of the next shallower pool.
    for (i, pool) in [3usize, 2].iter().take(skips).enumerate() {
        let up = b.deconv(&format!("upscore{}", i + 1), score, 2, k);
        let side = b.conv(&format!("score_pool{}", pool + 1), pools[*pool], 1, 0, k);
        let crop = b.crop(&format!("upscore{}_crop", i + 1), up, side, CropOffset::Center);
        score = b.fuse(&format!("fuse_pool{}", pool + 1), &[crop, side], FuseMode::EltwiseSum);
    }
    let up = b.deconv("upscore_final", score, variant, k);
    let out = b.crop("score", up, input, CropOffset::Center);
    let loss = b.loss("loss", out, labels);
    let name = match variant {
        14 => ArchName::Fcn14,
        26 => ArchName::Fcn26,
        _ => ArchName::Fcn46,
    };
    Ok(NetworkSpec {
        name,
        scale,
        graph: b.finish()?,
        input_channels: bb.input_channels,
        num_classes,
        input,
        labels: Some(labels),
        output: out,
        losses: vec![loss],
        side_outputs: Vec::new(),
        skip_count: skips,
        first_padding: FCN_FIRST_PADDING,
        final_stride: Some(variant),
        cell_size: None,
    })
}

pub fn build_hed(scale: Scale, num_classes: usize) -> Result<NetworkSpec> {
    build_hed_with_padding(scale, num_classes, HED_FIRST_PADDING)
}

/// HED: a side output after the last convolution of every stage, each scored,
/// upsampled and cropped to the input, then concatenated and fused by a 1x1
/// convolution. Every side output and the fused map are supervised.
pub fn build_hed_with_padding(scale: Scale, num_classes: usize, first_padding: usize) -> Result<NetworkSpec> {
    if first_padding == 0 {
        return Err(invalid("HED needs a first-layer padding of at least 1"));
    }
    hed_family(ArchName::Hed, scale, num_classes, first_padding, &[0, 1, 2, 3, 4])
}

/// HED without the first two side outputs, without first-layer padding,
/// with a 1-pixel crop offset and element-wise max fusion.
pub fn build_modified_hed(scale: Scale, num_classes: usize) -> Result<NetworkSpec> {
    hed_family(ArchName::ModifiedHed, scale, num_classes, 0, &[2, 3, 4])
}

fn hed_family(
    name: ArchName,
    scale: Scale,
    num_classes: usize,
    first_padding: usize,
    side_stages: &[usize],
) -> Result<NetworkSpec> {
    check_classes(num_classes)?;
    let bb = Backbone::for_scale(scale);
    let k = num_classes;
    let modified = name == ArchName::ModifiedHed;
    let mut b = Builder::new(bb.input_channels);
    let input = b.input;
    let labels = b.labels();

    let mut x = input;
    let mut taps = Vec::new();
    let mut strides = Vec::new();
    let mut stride = 1;
    for stage in 0..5 {
        x = b.stage(x, &bb, stage, first_padding);
        taps.push(x);
        strides.push(stride);
        if stage < bb.hed_pools {
            x = b.pool(&format!("pool{}", stage + 1), x);
            stride *= 2;
        }
    }

    let mut sides = Vec::new();
    let mut losses = Vec::new();
    for &stage in side_stages {
        let s = strides[stage];
        let tag = format!("side{}", stage + 1);
        let score = b.conv(&format!("{tag}_score"), taps[stage], 1, 0, k);
        let up = if s > 1 { b.deconv(&format!("{tag}_up"), score, s, k) } else { score };
        // HED crops at the geometric offset of each side's receptive field;
        // the modified network uses a fixed 1-pixel offset throughout.
        let offset = if modified {
            CropOffset::Fixed(1)
        } else {
            CropOffset::Fixed(first_padding - 1 + s / 2)
        };
        let crop = b.crop(&format!("{tag}_crop"), up, input, offset);
        losses.push(b.loss(&format!("{tag}_loss"), crop, labels));
        sides.push(crop);
    }
    let out = if modified {
        b.fuse("fuse", &sides, FuseMode::EltwiseMax)
    } else {
        let cat = b.fuse("fuse", &sides, FuseMode::Concat);
        b.conv("fuse_score", cat, 1, 0, k)
    };
    losses.insert(0, b.loss("loss", out, labels));
    Ok(NetworkSpec {
        name,
        scale,
        graph: b.finish()?,
        input_channels: bb.input_channels,
        num_classes,
        input,
        labels: Some(labels),
        output: out,
        losses,
        side_outputs: sides,
        skip_count: 0,
        first_padding,
        final_stride: None,
        cell_size: None,
    })
}

/// Fully convolutional detector: a trunk pooled down to one position per
/// `cell_size` pixels and a linear head with coverage plus two corners per
/// cell. Corners are emitted in cell units relative to the cell origin.
pub fn build_detector(cell_size: usize, scale: Scale) -> Result<NetworkSpec> {
    if cell_size < 2 || !cell_size.is_power_of_two() || cell_size > 32 {
        return Err(invalid(format!("cell size must be a power of two in [2, 32], got {cell_size}")));
    }
    let pools = cell_size.trailing_zeros() as usize;
    let bb = Backbone::for_scale(scale);
    let mut b = Builder::new(bb.input_channels);
    let input = b.input;
    let mut x = input;
    for stage in 0..5 {
        x = b.stage(x, &bb, stage, 1);
        if stage < pools {
            x = b.pool(&format!("pool{}", stage + 1), x);
        }
    }
    let head = b.conv("head", x, 1, 0, DETECTOR_OUTPUTS);
    Ok(NetworkSpec {
        name: ArchName::Detector,
        scale,
        graph: b.finish()?,
        input_channels: bb.input_channels,
        num_classes: 1,
        input,
        labels: None,
        output: head,
        losses: Vec::new(),
        side_outputs: Vec::new(),
        skip_count: 0,
        first_padding: 1,
        final_stride: None,
        cell_size: Some(cell_size),
    })
}

/// Raw detector head `[N, 5, H / cell, W / cell]` for a batch of slices.
pub fn detector_forward(net: &NetworkSpec, params: &ParamStore, slices: &Tensor) -> Result<Tensor> {
    let cell = net
        .cell_size
        .ok_or_else(|| invalid(format!("{} is not a detector", net.name)))?;
    let (_, _, h, w) = slices.dims4("detector_forward")?;
    if h % cell != 0 || w % cell != 0 {
        return Err(invalid(format!("input {h}x{w} is not divisible by the {cell}-pixel cell")));
    }
    let mut acts = net.graph.forward(params, &[(net.input, slices.clone())], &[net.output])?;
    Ok(acts.take(net.output).expect("head evaluated"))
}

/// Per-pixel class probabilities `[N, K, H, W]`.
pub fn forward_scores(net: &NetworkSpec, params: &ParamStore, slices: &Tensor) -> Result<Tensor> {
    if !net.is_segmentation() {
        return Err(invalid("the detector does not produce per-pixel probabilities"));
    }
    let mut acts = net.graph.forward(params, &[(net.input, slices.clone())], &[net.output])?;
    let scores = acts.take(net.output).expect("output evaluated");
    Ok(softmax_channels(&scores)?)
}

/// Foreground (class 1) probability map `[N, H, W]` of a segmentation net.
pub fn forward_probability(net: &NetworkSpec, params: &ParamStore, slices: &Tensor) -> Result<Tensor> {
    let probs = forward_scores(net, params, slices)?;
    let (n, k, h, w) = probs.dims4("forward_probability")?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        out.extend_from_slice(&probs.data()[(b * k + 1) * plane..(b * k + 2) * plane]);
    }
    Ok(Tensor::new(&[n, h, w], out)?)
}

/// Bilinear interpolation kernel of size `k`, as used to initialize
/// upsampling layers.
pub fn bilinear_kernel(k: usize) -> Vec<Real> {
    let factor = k.div_ceil(2) as Real;
    let center = if k % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
    let mut out = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            let fy = 1.0 - (y as Real - center).abs() / factor;
            let fx = 1.0 - (x as Real - center).abs() / factor;
            out.push(fy * fx);
        }
    }
    out
}

/// Seeded fan-in initialization, except that channel-preserving transposed
/// convolutions start as per-channel bilinear upsampling.
pub fn init_params(net: &NetworkSpec, seed: u64) -> ParamStore {
    let mut params = ParamStore::init(&net.graph, seed);
    for node in net.graph.nodes() {
        if let LayerKind::TransposedConv2d { in_channels, out_channels, kernel, .. } = node.kind {
            if in_channels != out_channels {
                continue;
            }
            let filt = bilinear_kernel(kernel);
            let w = params.get_mut(&format!("{}.weight", node.name)).expect("deconv weight");
            let data = w.data_mut();
            data.iter_mut().for_each(|v| *v = 0.0);
            let kk = kernel * kernel;
            for c in 0..in_channels {
                let at = (c * out_channels + c) * kk;
                data[at..at + kk].copy_from_slice(&filt);
            }
        }
    }
    params
}
