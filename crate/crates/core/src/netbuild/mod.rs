//! Compiles an [`ArchConfig`] into an executable layer graph.
//!
//! Layout of the proposed network:
//!
//! * encoder level `i`: `B_i` residual blocks at `C_i` channels; between
//!   levels a kernel-2 stride-2 convolution doubles the channels;
//! * decoder level `j = l-1..1`: transposed convolution (stride 2 in target
//!   dims, 1 in reducible dims), concatenation with the projectively pooled
//!   encoder output of level `j`, then `B_j` residual blocks;
//! * head: global average pooling over reducible dims, 1x..x1 convolution to
//!   one channel, sigmoid.
//!
//! Residual block: `conv3-IN-ReLU-conv3-IN`, plus an identity shortcut (1x..x1
//! convolution when the channel count changes), ReLU after the sum.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use forward::{forward, forward_pass, ForwardOptions, ForwardPass};

use std::fmt::Write as _;

use crate::rng::SplitMix64;
use crate::shapes::{
    self, decoder_shape, encoder_shape, format_extent, receptive_field_of, skip_kernel, ArchConfig,
    InputExtent, ShapeError, Variant,
};
use crate::tensor::{ConvGeometry, Padding, Scalar, Tensor, TensorError};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid configuration: {}", join_errors(.0))]
    Shape(Vec<ShapeError>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    Input { expected: Vec<usize>, got: Vec<usize> },
    #[error("node `{node}` produced {got:?}, annotated {expected:?}")]
    Annotation {
        node: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join_errors(errs: &[ShapeError]) -> String {
    errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl From<Vec<ShapeError>> for NetError {
    fn from(errs: Vec<ShapeError>) -> Self {
        NetError::Shape(errs)
    }
}

impl From<ShapeError> for NetError {
    fn from(err: ShapeError) -> Self {
        NetError::Shape(vec![err])
    }
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Clone, Debug, PartialEq)]
pub enum NodeOp {
    Input,
    Conv {
        weight: ParamId,
        bias: Option<ParamId>,
        kernel: Vec<usize>,
        stride: Vec<usize>,
        padding: Padding,
    },
    /// Transposed convolution with kernel equal to stride.
    UpConv {
        weight: ParamId,
        bias: ParamId,
        stride: Vec<usize>,
    },
    InstanceNorm {
        gamma: ParamId,
        beta: ParamId,
    },
    Relu,
    Add,
    /// Channel concatenation, decoder features first.
    Concat,
    /// Projective skip: average pooling with kernel equal to stride.
    SkipPool {
        kernel: Vec<usize>,
    },
    /// Global average pooling; `dims` are the 1-based input dimensions removed.
    GlobalPool {
        dims: Vec<usize>,
    },
    Sigmoid,
    /// Drops the (singleton) channel axis, yielding the output mask.
    Squeeze,
}

impl NodeOp {
    pub fn kind(&self) -> &'static str {
        match self {
            NodeOp::Input => "input",
            NodeOp::Conv { .. } => "conv",
            NodeOp::UpConv { .. } => "upconv",
            NodeOp::InstanceNorm { .. } => "inorm",
            NodeOp::Relu => "relu",
            NodeOp::Add => "add",
            NodeOp::Concat => "concat",
            NodeOp::SkipPool { .. } => "skip_pool",
            NodeOp::GlobalPool { .. } => "gap",
            NodeOp::Sigmoid => "sigmoid",
            NodeOp::Squeeze => "squeeze",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    pub inputs: Vec<NodeId>,
    /// Output channels (0 after `Squeeze`).
    pub channels: usize,
    /// Annotated spatial extent of the output.
    pub extent: Vec<usize>,
    /// 1-based input dimension carried by each spatial axis.
    pub dims: Vec<usize>,
}

impl Node {
    /// Full runtime shape for a batch of `batch`.
    pub fn shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        if !matches!(self.op, NodeOp::Squeeze) {
            s.push(self.channels);
        }
        s.extend_from_slice(&self.extent);
        s
    }

    pub fn axis_of(&self, dim: usize) -> Option<usize> {
        self.dims.iter().position(|&d| d == dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Compiled network: nodes in topological order plus the parameter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGraph {
    pub config: ArchConfig,
    pub extent: InputExtent,
    pub nodes: Vec<Node>,
    pub params: Vec<ParamSpec>,
}

impl NetGraph {
    pub fn input(&self) -> NodeId {
        0
    }

    pub fn output(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn output_extent(&self) -> &[usize] {
        &self.nodes[self.output()].extent
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Same topology rebuilt for another input extent.
    pub fn with_extent(&self, extent: &InputExtent) -> Result<NetGraph> {
        build(&self.config, extent)
    }
}

/// Builds the network described by `config.variant`.
pub fn build(config: &ArchConfig, extent: &InputExtent) -> Result<NetGraph> {
    match config.variant {
        Variant::Proposed => build_proposed(config, extent),
        Variant::ThreeDTwoD => build_3d2d(config, extent),
    }
}

pub fn build_proposed(config: &ArchConfig, extent: &InputExtent) -> Result<NetGraph> {
    let mut config = config.clone();
    config.variant = Variant::Proposed;
    shapes::validate(&config, extent)?;
    let mut b = Builder::new(&config, extent);
    let enc = b.encoder()?;
    let l = config.depth;
    let mut y = enc[l - 1];
    for j in (1..l).rev() {
        let up = b.upconv(&format!("dec{j}.up"), y, config.channels[j - 1], &shapes::upsample_stride(&config))?;
        let skip = b.skip_pool(&format!("dec{j}.skip"), enc[j - 1], &skip_kernel(&config, j)?)?;
        let cat = b.concat(&format!("dec{j}.concat"), up, skip)?;
        y = b.level_blocks(&format!("dec{j}"), cat, config.channels[j - 1], config.blocks[j - 1])?;
    }
    let reducible: Vec<usize> = (config.target_dims + 1..=config.n_dims).collect();
    if !reducible.is_empty() {
        y = b.global_pool("head.gap", y, &reducible)?;
    }
    b.head(y)?;
    Ok(b.finish())
}

/// Ablation: every skip and the bottleneck globally pool the reducible
/// dimensions, so the decoder is M-dimensional.
pub fn build_3d2d(config: &ArchConfig, extent: &InputExtent) -> Result<NetGraph> {
    let mut config = config.clone();
    config.variant = Variant::ThreeDTwoD;
    shapes::validate(&config, extent)?;
    let mut b = Builder::new(&config, extent);
    let enc = b.encoder()?;
    let l = config.depth;
    let reducible: Vec<usize> = (config.target_dims + 1..=config.n_dims).collect();
    let mut y = b.global_pool("bottleneck.gap", enc[l - 1], &reducible)?;
    let stride = vec![2; config.target_dims];
    for j in (1..l).rev() {
        let up = b.upconv(&format!("dec{j}.up"), y, config.channels[j - 1], &stride)?;
        let skip = b.global_pool(&format!("dec{j}.skip"), enc[j - 1], &reducible)?;
        let cat = b.concat(&format!("dec{j}.concat"), up, skip)?;
        y = b.level_blocks(&format!("dec{j}"), cat, config.channels[j - 1], config.blocks[j - 1])?;
    }
    b.head(y)?;
    Ok(b.finish())
}

struct Builder {
    config: ArchConfig,
    extent: InputExtent,
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
}

impl Builder {
    fn new(config: &ArchConfig, extent: &InputExtent) -> Self {
        let input = Node {
            name: "input".into(),
            op: NodeOp::Input,
            inputs: vec![],
            channels: 1,
            extent: extent.0.clone(),
            dims: (1..=config.n_dims).collect(),
        };
        Self {
            config: config.clone(),
            extent: extent.clone(),
            nodes: vec![input],
            params: vec![],
        }
    }

    fn finish(self) -> NetGraph {
        NetGraph {
            config: self.config,
            extent: self.extent,
            nodes: self.nodes,
            params: self.params,
        }
    }

    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.params.push(ParamSpec { name, shape, init });
        self.params.len() - 1
    }

    fn push(&mut self, name: &str, op: NodeOp, inputs: Vec<NodeId>, channels: usize, extent: Vec<usize>, dims: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs,
            channels,
            extent,
            dims,
        });
        self.nodes.len() - 1
    }

    fn encoder(&mut self) -> Result<Vec<NodeId>> {
        let cfg = self.config.clone();
        let mut outs = Vec::with_capacity(cfg.depth);
        let mut x = 0;
        for i in 1..=cfg.depth {
            if i > 1 {
                let rank = self.config.n_dims;
                x = self.conv(&format!("down{i}"), x, cfg.channels[i - 1], vec![2; rank], vec![2; rank], Padding::Valid, true)?;
            }
            x = self.level_blocks(&format!("enc{i}"), x, cfg.channels[i - 1], cfg.blocks[i - 1])?;
            outs.push(x);
        }
        Ok(outs)
    }

    fn level_blocks(&mut self, prefix: &str, mut x: NodeId, channels: usize, blocks: usize) -> Result<NodeId> {
        for k in 1..=blocks {
            x = self.residual_block(&format!("{prefix}.block{k}"), x, channels)?;
        }
        Ok(x)
    }

    fn residual_block(&mut self, prefix: &str, x: NodeId, channels: usize) -> Result<NodeId> {
        let rank = self.nodes[x].extent.len();
        let k3 = vec![3; rank];
        let ones = vec![1; rank];
        // No conv bias in front of instance norm: the mean subtraction cancels it.
        let h = self.conv(&format!("{prefix}.conv1"), x, channels, k3.clone(), ones.clone(), Padding::Same, false)?;
        let h = self.norm(&format!("{prefix}.norm1"), h);
        let h = self.unary(&format!("{prefix}.relu1"), NodeOp::Relu, h);
        let h = self.conv(&format!("{prefix}.conv2"), h, channels, k3, ones.clone(), Padding::Same, false)?;
        let h = self.norm(&format!("{prefix}.norm2"), h);
        let shortcut = if self.nodes[x].channels == channels {
            x
        } else {
            self.conv(&format!("{prefix}.proj"), x, channels, ones.clone(), ones, Padding::Valid, true)?
        };
        let (ext, dims) = (self.nodes[h].extent.clone(), self.nodes[h].dims.clone());
        let sum = self.push(&format!("{prefix}.add"), NodeOp::Add, vec![h, shortcut], channels, ext, dims);
        Ok(self.unary(&format!("{prefix}.relu2"), NodeOp::Relu, sum))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        cout: usize,
        kernel: Vec<usize>,
        stride: Vec<usize>,
        padding: Padding,
        bias: bool,
    ) -> Result<NodeId> {
        let cin = self.nodes[x].channels;
        let geom = ConvGeometry::new(kernel.clone(), stride.clone(), padding);
        let extent = geom.output_extent(&self.nodes[x].extent)?;
        let fan_in = cin * kernel.iter().product::<usize>();
        let mut wshape = vec![cout, cin];
        wshape.extend_from_slice(&kernel);
        let weight = self.param(format!("{name}.weight"), wshape, Init::HeNormal { fan_in });
        let bias = bias.then(|| self.param(format!("{name}.bias"), vec![cout], Init::Zeros));
        let dims = self.nodes[x].dims.clone();
        let op = NodeOp::Conv {
            weight,
            bias,
            kernel,
            stride,
            padding,
        };
        Ok(self.push(name, op, vec![x], cout, extent, dims))
    }

    fn upconv(&mut self, name: &str, x: NodeId, cout: usize, stride: &[usize]) -> Result<NodeId> {
        let cin = self.nodes[x].channels;
        let mut wshape = vec![cin, cout];
        wshape.extend_from_slice(stride);
        // Kernel equals stride, so every output sees exactly `cin` inputs.
        let weight = self.param(format!("{name}.weight"), wshape, Init::HeNormal { fan_in: cin });
        let bias = self.param(format!("{name}.bias"), vec![cout], Init::Zeros);
        let extent = self.nodes[x].extent.iter().zip(stride).map(|(n, s)| n * s).collect();
        let dims = self.nodes[x].dims.clone();
        let op = NodeOp::UpConv {
            weight,
            bias,
            stride: stride.to_vec(),
        };
        Ok(self.push(name, op, vec![x], cout, extent, dims))
    }

    fn norm(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.nodes[x].channels;
        let gamma = self.param(format!("{name}.gamma"), vec![c], Init::Ones);
        let beta = self.param(format!("{name}.beta"), vec![c], Init::Zeros);
        let (ext, dims) = (self.nodes[x].extent.clone(), self.nodes[x].dims.clone());
        self.push(name, NodeOp::InstanceNorm { gamma, beta }, vec![x], c, ext, dims)
    }

    fn unary(&mut self, name: &str, op: NodeOp, x: NodeId) -> NodeId {
        let n = &self.nodes[x];
        let (c, ext, dims) = (n.channels, n.extent.clone(), n.dims.clone());
        self.push(name, op, vec![x], c, ext, dims)
    }

    fn concat(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        if na.extent != nb.extent || na.dims != nb.dims {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: na.extent.clone(),
                rhs: nb.extent.clone(),
            }
            .into());
        }
        let (c, ext, dims) = (na.channels + nb.channels, na.extent.clone(), na.dims.clone());
        Ok(self.push(name, NodeOp::Concat, vec![a, b], c, ext, dims))
    }

    fn skip_pool(&mut self, name: &str, x: NodeId, kernel: &[usize]) -> Result<NodeId> {
        let n = &self.nodes[x];
        let mut extent = Vec::with_capacity(kernel.len());
        for (axis, (&e, &k)) in n.extent.iter().zip(kernel).enumerate() {
            if e % k != 0 {
                return Err(TensorError::NotDivisible {
                    op: "skip_pool",
                    axis,
                    extent: e,
                    kernel: k,
                }
                .into());
            }
            extent.push(e / k);
        }
        let (c, dims) = (n.channels, n.dims.clone());
        let op = NodeOp::SkipPool {
            kernel: kernel.to_vec(),
        };
        Ok(self.push(name, op, vec![x], c, extent, dims))
    }

    fn global_pool(&mut self, name: &str, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let n = &self.nodes[x];
        let (mut extent, mut kept) = (Vec::new(), Vec::new());
        for (&e, &d) in n.extent.iter().zip(&n.dims) {
            if !dims.contains(&d) {
                extent.push(e);
                kept.push(d);
            }
        }
        let c = n.channels;
        let op = NodeOp::GlobalPool { dims: dims.to_vec() };
        Ok(self.push(name, op, vec![x], c, extent, kept))
    }

    fn head(&mut self, x: NodeId) -> Result<NodeId> {
        let rank = self.nodes[x].extent.len();
        let ones = vec![1; rank];
        let logits = self.conv("head.conv", x, 1, ones.clone(), ones, Padding::Valid, true)?;
        let p = self.unary("head.sigmoid", NodeOp::Sigmoid, logits);
        let n = &self.nodes[p];
        let (ext, dims) = (n.extent.clone(), n.dims.clone());
        Ok(self.push("output", NodeOp::Squeeze, vec![p], 0, ext, dims))
    }
}

/// Parameter tensors aligned with [`NetGraph::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(graph: &NetGraph, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let tensors = graph
            .params
            .iter()
            .map(|p| match p.init {
                Init::Ones => Tensor::full(&p.shape, T::one()),
                Init::Zeros => Tensor::zeros(&p.shape),
                Init::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    let data = (0..p.numel()).map(|_| T::of(rng.normal() * std)).collect();
                    Tensor::new(p.shape.clone(), data).expect("shape matches numel")
                }
            })
            .collect();
        Self { tensors }
    }

    pub fn zeros_like(graph: &NetGraph) -> Self {
        Self {
            tensors: graph.params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

pub fn count_params(graph: &NetGraph) -> usize {
    graph.params.iter().map(ParamSpec::numel).sum()
}

/// Text table: one row per node with extents, kernels, strides and the
/// node's receptive field with respect to the input.
pub fn summary(graph: &NetGraph) -> String {
    let mut out = String::new();
    let cfg = &graph.config;
    let _ = writeln!(
        out,
        "{} N={} M={} l={} C={:?} B={:?} input={}",
        cfg.variant,
        cfg.n_dims,
        cfg.target_dims,
        cfg.depth,
        cfg.channels,
        cfg.blocks,
        graph.extent
    );
    let _ = writeln!(
        out,
        "{:<24} {:<9} {:>5} {:<16} {:<10} {:<10} rf",
        "node", "op", "ch", "extent", "kernel", "stride"
    );
    for (id, node) in graph.nodes.iter().enumerate() {
        let (kernel, stride) = match &node.op {
            NodeOp::Conv { kernel, stride, .. } => (format_extent(kernel), format_extent(stride)),
            NodeOp::UpConv { stride, .. } => (format_extent(stride), format_extent(stride)),
            NodeOp::SkipPool { kernel } => (format_extent(kernel), format_extent(kernel)),
            NodeOp::GlobalPool { dims } => (format!("gap{dims:?}"), "-".into()),
            _ => ("-".into(), "-".into()),
        };
        let rf = receptive_field_of(graph, id);
        let _ = writeln!(
            out,
            "{:<24} {:<9} {:>5} {:<16} {:<10} {:<10} {}",
            node.name,
            node.op.kind(),
            node.channels,
            format_extent(&node.extent),
            kernel,
            stride,
            rf.describe()
        );
    }
    let _ = writeln!(out, "parameters: {}", count_params(graph));
    out
}

/// Per-level shape table: encoder/decoder extents and skip kernels.
pub fn level_table(graph: &NetGraph) -> std::result::Result<String, ShapeError> {
    let cfg = &graph.config;
    let mut out = String::new();
    for j in 1..=cfg.depth {
        let enc = encoder_shape(cfg, &graph.extent, j)?;
        let _ = writeln!(out, "encoder L{j}: {}, channels {}", format_extent(&enc), cfg.channels[j - 1]);
    }
    for j in (1..=cfg.depth).rev() {
        match cfg.variant {
            Variant::Proposed => {
                let dec = decoder_shape(cfg, &graph.extent, j)?;
                let k = skip_kernel(cfg, j)?;
                let _ = writeln!(out, "decoder L{j}: {}, skip k={}", format_extent(&dec), format_extent(&k));
            }
            Variant::ThreeDTwoD => {
                let dec: Vec<usize> = decoder_shape(cfg, &graph.extent, j)?[..cfg.target_dims].to_vec();
                let _ = writeln!(out, "decoder L{j}: {}, skip gap over d>{}", format_extent(&dec), cfg.target_dims);
            }
        }
    }
    let _ = writeln!(out, "output: {}", format_extent(graph.output_extent()));
    Ok(out)
}
