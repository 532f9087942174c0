use super::{NetError, NetGraph, NodeOp, ParamStore, Result};
use crate::tensor::{ConvGeometry, Padding, Scalar, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace zero same-padding by periodic wraparound.
    pub circular: bool,
    /// Linearized pass for support probing: ReLU becomes the identity and
    /// instance-norm statistics are excluded from the adjoint.
    pub probe: bool,
}

/// A recorded forward pass, ready for `tape.backward`.
pub struct ForwardPass<T: Scalar> {
    pub tape: Tape<T>,
    pub input: Var,
    pub output: Var,
    /// One var per graph parameter, in registry order.
    pub params: Vec<Var>,
    /// Runtime shape of every node's output.
    pub node_shapes: Vec<Vec<usize>>,
    /// Tape var holding every node's output, indexed like `graph.nodes`.
    pub nodes: Vec<Var>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.tape.value(self.output)
    }
}

/// Runs the graph on `x: [B, 1, n_1..n_N]`, recording onto a fresh tape.
/// Parameters require gradients iff `train`; the input iff `input_grad`.
pub fn forward_pass<T: Scalar>(
    graph: &NetGraph,
    params: &ParamStore<T>,
    x: Tensor<T>,
    opts: ForwardOptions,
    train: bool,
    input_grad: bool,
) -> Result<ForwardPass<T>> {
    let batch = x.shape().first().copied().unwrap_or(0);
    let expected = graph.nodes[graph.input()].shape(batch);
    if x.shape() != expected.as_slice() || batch == 0 {
        return Err(NetError::Input {
            expected,
            got: x.shape().to_vec(),
        });
    }
    if params.len() != graph.params.len() {
        return Err(NetError::Checkpoint(format!(
            "{} parameter tensors for {} registry entries",
            params.len(),
            graph.params.len()
        )));
    }
    let mut tape = Tape::new();
    let param_vars: Vec<Var> = params.tensors.iter().map(|p| tape.leaf(p.clone(), train)).collect();
    let input = tape.leaf(x, input_grad);
    let mut vars: Vec<Var> = Vec::with_capacity(graph.nodes.len());
    let mut node_shapes = Vec::with_capacity(graph.nodes.len());
    let eps = T::of(NORM_EPS);

    for node in &graph.nodes {
        let arg = |k: usize| vars[node.inputs[k]];
        let v = match &node.op {
            NodeOp::Input => input,
            NodeOp::Conv {
                weight,
                bias,
                kernel,
                stride,
                padding,
            } => {
                let padding = match (padding, opts.circular) {
                    (Padding::Same, true) => Padding::Circular,
                    (p, _) => *p,
                };
                let geom = ConvGeometry::new(kernel.clone(), stride.clone(), padding);
                tape.conv(arg(0), param_vars[*weight], bias.map(|b| param_vars[b]), &geom)?
            }
            NodeOp::UpConv { weight, bias, stride } => {
                tape.conv_transpose(arg(0), param_vars[*weight], Some(param_vars[*bias]), stride)?
            }
            NodeOp::InstanceNorm { gamma, beta } => {
                tape.instance_norm_with(arg(0), param_vars[*gamma], param_vars[*beta], eps, opts.probe)?
            }
            NodeOp::Relu if opts.probe => arg(0),
            NodeOp::Relu => tape.relu(arg(0))?,
            NodeOp::Add => tape.add(arg(0), arg(1))?,
            NodeOp::Concat => tape.concat(arg(0), arg(1))?,
            NodeOp::SkipPool { kernel } => tape.avg_pool(arg(0), kernel)?,
            NodeOp::GlobalPool { dims } => {
                let src = &graph.nodes[node.inputs[0]];
                let axes: Vec<usize> = dims
                    .iter()
                    .filter_map(|&d| src.axis_of(d))
                    .map(|a| a + 2)
                    .collect();
                tape.global_avg_pool(arg(0), &axes)?
            }
            NodeOp::Sigmoid => tape.sigmoid(arg(0))?,
            NodeOp::Squeeze => tape.reshape(arg(0), &node.shape(batch))?,
        };
        let got = tape.value(v).shape().to_vec();
        let want = node.shape(batch);
        if got != want {
            return Err(NetError::Annotation {
                node: node.name.clone(),
                expected: want,
                got,
            });
        }
        node_shapes.push(got);
        vars.push(v);
    }
    let output = *vars.last().expect("graph has nodes");
    Ok(ForwardPass {
        tape,
        input,
        output,
        params: param_vars,
        node_shapes,
        nodes: vars,
    })
}

/// Inference: probability mask `[B, n_1..n_M]`.
pub fn forward<T: Scalar>(graph: &NetGraph, params: &ParamStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
    let pass = forward_pass(graph, params, x, ForwardOptions::default(), false, false)?;
    Ok(pass.output().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netbuild::build;
    use crate::rng::SplitMix64;
    use crate::shapes::{ArchConfig, InputExtent, Variant};

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = SplitMix64::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
    }

    #[test]
    fn output_is_probability_mask() {
        let cfg = ArchConfig::new(3, 2, 2, vec![1, 1], Variant::Proposed);
        let g = build(&cfg, &InputExtent(vec![8, 4, 6])).unwrap();
        let p = ParamStore::init(&g, 1);
        let y = forward(&g, &p, random_input(&[2, 1, 8, 4, 6], 3)).unwrap();
        assert_eq!(y.shape(), &[2, 8, 4]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_weights_give_one_half() {
        let cfg = ArchConfig::new(3, 2, 2, vec![1, 1], Variant::Proposed);
        let g = build(&cfg, &InputExtent(vec![4, 4, 4])).unwrap();
        let p = ParamStore::zeros_like(&g);
        let y = forward(&g, &p, random_input(&[1, 1, 4, 4, 4], 5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn classification_degeneracy() {
        let cfg = ArchConfig::new(3, 0, 2, vec![1, 1], Variant::Proposed);
        let g = build(&cfg, &InputExtent(vec![4, 4, 4])).unwrap();
        let p = ParamStore::init(&g, 2);
        let y = forward(&g, &p, random_input(&[3, 1, 4, 4, 4], 6)).unwrap();
        assert_eq!(y.shape(), &[3]);
    }

    #[test]
    fn rejects_wrong_input_extent() {
        let cfg = ArchConfig::new(3, 2, 2, vec![1, 1], Variant::Proposed);
        let g = build(&cfg, &InputExtent(vec![4, 4, 4])).unwrap();
        let p = ParamStore::init(&g, 2);
        let err = forward(&g, &p, random_input(&[1, 1, 4, 4, 8], 6)).unwrap_err();
        assert!(matches!(err, NetError::Input { .. }));
    }
}
