//! Receptive-field analysis by backward interval propagation.
//!
//! Every op in the graph is separable per dimension, so the support of one
//! output element is a box. Each dimension is handled independently: starting
//! from the element's index, intervals are mapped backwards through the
//! graph (hull at fan-in points), optionally clipped to each node's extent to
//! account for zero padding.

use crate::netbuild::{NetGraph, NodeId, NodeOp};
use crate::tensor::Padding;

use super::format_extent;

/// Receptive field of a node with respect to the network input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    /// Largest support extent over all positions of the node, clipped to the
    /// input (what an input-gradient probe observes).
    pub extent: Vec<usize>,
    /// Support extent on an unbounded input; `None` for dimensions that are
    /// globally pooled before reaching the node.
    pub unbounded: Vec<Option<usize>>,
    /// Input voxels per node voxel along each dimension.
    pub stride: Vec<usize>,
}

impl ReceptiveField {
    /// `5×5×full`-style description of the unbounded field.
    pub fn describe(&self) -> String {
        self.unbounded
            .iter()
            .map(|u| u.map_or_else(|| "full".to_string(), |v| v.to_string()))
            .collect::<Vec<_>>()
            .join("×")
    }

    pub fn clipped(&self) -> String {
        format_extent(&self.extent)
    }
}

type Interval = (i64, i64);

fn hull(a: Option<Interval>, b: Interval) -> Interval {
    match a {
        Some((lo, hi)) => (lo.min(b.0), hi.max(b.1)),
        None => b,
    }
}

/// Maps an interval at the output of `node` (axis `axis`) back to its input.
fn map_back(op: &NodeOp, axis: usize, (lo, hi): Interval) -> Interval {
    match op {
        NodeOp::Conv {
            kernel,
            stride,
            padding,
            ..
        } => {
            let (k, s) = (kernel[axis] as i64, stride[axis] as i64);
            let p = match padding {
                Padding::Valid => 0,
                Padding::Same | Padding::Circular => (k - 1) / 2,
            };
            (s * lo - p, s * hi - p + k - 1)
        }
        NodeOp::UpConv { stride, .. } => {
            let s = stride[axis] as i64;
            (lo.div_euclid(s), hi.div_euclid(s))
        }
        NodeOp::SkipPool { kernel } => {
            let k = kernel[axis] as i64;
            (lo * k, hi * k + k - 1)
        }
        _ => (lo, hi),
    }
}

/// Input interval along 1-based dimension `dim` that influences the element
/// of `node` at `position` (ignored when the node lacks `dim`).
fn support_1d(graph: &NetGraph, node: NodeId, dim: usize, position: usize, clip: bool) -> Option<Interval> {
    let mut needed = vec![false; node + 1];
    let mut iv: Vec<Option<Interval>> = vec![None; node + 1];
    needed[node] = true;
    if graph.nodes[node].axis_of(dim).is_some() {
        iv[node] = Some((position as i64, position as i64));
    }
    for u in (0..=node).rev() {
        if !needed[u] {
            continue;
        }
        let nu = &graph.nodes[u];
        let axis_u = nu.axis_of(dim);
        for &v in &nu.inputs {
            let nv = &graph.nodes[v];
            let Some(axis_v) = nv.axis_of(dim) else {
                needed[v] = true;
                continue;
            };
            let mapped = match axis_u {
                Some(a) => match iv[u] {
                    Some(i) => map_back(&nu.op, a, i),
                    None => continue,
                },
                // `u` pooled this dimension away: all of `v` contributes.
                None => (0, nv.extent[axis_v] as i64 - 1),
            };
            let mapped = if clip {
                let (lo, hi) = (mapped.0.max(0), mapped.1.min(nv.extent[axis_v] as i64 - 1));
                if lo > hi {
                    continue;
                }
                (lo, hi)
            } else {
                mapped
            };
            needed[v] = true;
            iv[v] = Some(hull(iv[v], mapped));
        }
    }
    iv[graph.input()]
}

/// Clipped support box (inclusive, per 1-based input dimension) of the
/// element of `node` at `position` (one index per spatial axis of `node`).
pub fn support_box(graph: &NetGraph, node: NodeId, position: &[usize]) -> Vec<Option<(usize, usize)>> {
    let n = &graph.nodes[node];
    (1..=graph.config.n_dims)
        .map(|d| {
            let p = n.axis_of(d).map_or(0, |a| position[a]);
            support_1d(graph, node, d, p, true).map(|(lo, hi)| (lo as usize, hi as usize))
        })
        .collect()
}

/// Receptive field of the network output.
pub fn receptive_field(graph: &NetGraph) -> ReceptiveField {
    receptive_field_of(graph, graph.output())
}

pub fn receptive_field_of(graph: &NetGraph, node: NodeId) -> ReceptiveField {
    let n = &graph.nodes[node];
    let input = &graph.extent.0;
    let mut extent = Vec::with_capacity(input.len());
    let mut unbounded = Vec::with_capacity(input.len());
    let mut stride = Vec::with_capacity(input.len());
    for (i, &n_d) in input.iter().enumerate() {
        let d = i + 1;
        let width = |iv: Option<Interval>| iv.map_or(0, |(lo, hi)| (hi - lo + 1) as usize);
        match n.axis_of(d) {
            Some(a) => {
                let len = n.extent[a];
                let s = n_d / len.max(1);
                stride.push(s);
                extent.push((0..len).map(|p| width(support_1d(graph, node, d, p, true))).max().unwrap_or(0));
                // Without clipping the field depends only on the position
                // modulo the cumulative stride of the deepest level.
                let period = len.min(1 << graph.config.depth);
                let u = (0..period).map(|p| width(support_1d(graph, node, d, p, false))).max();
                unbounded.push(u);
            }
            None => {
                stride.push(n_d);
                extent.push(width(support_1d(graph, node, d, 0, true)));
                unbounded.push(None);
            }
        }
    }
    ReceptiveField {
        extent,
        unbounded,
        stride,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netbuild::{build, Node};
    use crate::shapes::{ArchConfig, InputExtent, Variant};

    fn conv_chain(kernels: &[usize], n: usize) -> NetGraph {
        let cfg = ArchConfig::new(1, 1, 1, vec![1], Variant::Proposed);
        let mut nodes = vec![Node {
            name: "input".into(),
            op: NodeOp::Input,
            inputs: vec![],
            channels: 1,
            extent: vec![n],
            dims: vec![1],
        }];
        for (i, &k) in kernels.iter().enumerate() {
            nodes.push(Node {
                name: format!("conv{i}"),
                op: NodeOp::Conv {
                    weight: 0,
                    bias: None,
                    kernel: vec![k],
                    stride: vec![1],
                    padding: Padding::Same,
                },
                inputs: vec![i],
                channels: 1,
                extent: vec![n],
                dims: vec![1],
            });
        }
        NetGraph {
            config: cfg,
            extent: InputExtent(vec![n]),
            nodes,
            params: vec![],
        }
    }

    #[test]
    fn single_and_stacked_convs() {
        let rf = receptive_field(&conv_chain(&[3], 16));
        assert_eq!(rf.extent, vec![3]);
        assert_eq!(rf.unbounded, vec![Some(3)]);
        let rf = receptive_field(&conv_chain(&[3, 3], 16));
        assert_eq!(rf.extent, vec![5]);
        assert_eq!(rf.stride, vec![1]);
    }

    #[test]
    fn boundary_clipping() {
        let g = conv_chain(&[3, 3], 16);
        assert_eq!(support_box(&g, g.output(), &[0]), vec![Some((0, 2))]);
        assert_eq!(support_box(&g, g.output(), &[7]), vec![Some((5, 9))]);
    }

    #[test]
    fn odd_for_symmetric_stacks() {
        for k in 1..5 {
            let rf = receptive_field(&conv_chain(&vec![3; k], 32));
            assert_eq!(rf.extent[0] % 2, 1);
            assert_eq!(rf.extent[0], 1 + 2 * k);
        }
    }

    #[test]
    fn reducible_dims_are_global() {
        let cfg = ArchConfig::new(3, 2, 2, vec![1, 1, 1], Variant::Proposed);
        let g = build(&cfg, &InputExtent(vec![16, 16, 16])).unwrap();
        let rf = receptive_field(&g);
        assert_eq!(rf.extent[2], 16);
        assert_eq!(rf.unbounded[2], None);
        assert!(rf.unbounded[0].is_some());
        assert_eq!(rf.stride, vec![1, 1, 16]);
    }
}
