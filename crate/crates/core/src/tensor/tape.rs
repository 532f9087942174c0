//! Wengert-list autodiff.
//!
//! Every forward op appends one entry holding its output value and, when any
//! input requires a gradient, enough saved state to run its adjoint.
//! [`Tape::backward`] walks the entries in exact reverse order and
//! accumulates gradients additively.

use super::kernels::{self, ConvGeometry, NormStats};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint of a user-defined op.
///
/// `backward` receives the output gradient and the input values, and returns
/// one gradient per input (`None` for inputs that need none).
pub trait Backward<T: Scalar> {
    fn backward(&self, grad_out: &Tensor<T>, inputs: &[&Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Constant,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: Vec<usize>,
    },
    Pool {
        x: Var,
        map: Vec<usize>,
        scale: T,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
        detach_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        adjoint: Box<dyn Backward<T>>,
    },
}

struct Entry<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation graph for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    entries: Vec<Entry<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { Op::Leaf } else { Op::Constant };
        self.entries.push(Entry {
            value,
            requires_grad,
            op,
        });
        Var(self.entries.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.entries[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.entries[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.entries[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.entries.push(Entry {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.entries.len() - 1))
    }

    /// Cross-correlation over the trailing spatial axes.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeometry) -> Result<Var> {
        let y = kernels::conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let op = Op::Conv {
            x,
            w,
            b,
            geom: geom.clone(),
        };
        self.push("conv", y, &inputs, op)
    }

    /// Transposed convolution with kernel equal to stride (1 or 2 per axis).
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: &[usize]) -> Result<Var> {
        let y = kernels::conv_transpose_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let op = Op::ConvTranspose {
            x,
            w,
            b,
            stride: stride.to_vec(),
        };
        self.push("conv_transpose", y, &inputs, op)
    }

    /// Non-overlapping average pooling over spatial axes.
    pub fn avg_pool(&mut self, x: Var, kernel: &[usize]) -> Result<Var> {
        let (y, map) = kernels::avg_pool_forward(self.value(x), kernel)?;
        let scale = T::one() / T::of(kernel.iter().product::<usize>() as f64);
        self.push("avg_pool", y, &[x], Op::Pool { x, map, scale })
    }

    /// Mean over the given tensor axes; those axes are dropped.
    pub fn global_avg_pool(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (y, map) = kernels::mean_axes_forward(self.value(x), axes)?;
        let count = self.value(x).numel() / y.numel().max(1);
        let scale = T::one() / T::of(count as f64);
        self.push("global_avg_pool", y, &[x], Op::Pool { x, map, scale })
    }

    /// Per-sample, per-channel normalization with learned affine.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.instance_norm_with(x, gamma, beta, eps, false)
    }

    /// Instance norm whose adjoint optionally treats the statistics as
    /// constants (used by receptive-field probing).
    pub fn instance_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        detach_stats: bool,
    ) -> Result<Var> {
        let (y, stats) =
            kernels::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let op = Op::InstanceNorm {
            x,
            gamma,
            beta,
            stats,
            detach_stats,
        };
        self.push("instance_norm", y, &[x, gamma, beta], op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", y, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", y, &[x], Op::Sigmoid(x))
    }

    /// Concatenation along axis 1 (channels).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::concat_forward(self.value(a), self.value(b))?;
        self.push("concat", y, &[a, b], Op::Concat(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", y, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", y, &[a, b], Op::Mul(a, b))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push("sum", y, &[x], Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push("reshape", y, &[x], Op::Reshape(x))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, value: Tensor<T>, inputs: &[Var], adjoint: Box<dyn Backward<T>>) -> Result<Var> {
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            adjoint,
        };
        self.push("custom", value, inputs, op)
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Reverse sweep from a scalar root. Gradients from earlier calls are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        self.grads = (0..self.entries.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::full(&root_shape, T::one()));

        for i in (0..=root.0).rev() {
            if !self.entries[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.adjoint(i, &gy)?;
            // Leaves keep their gradient; intermediates are released.
            if matches!(self.entries[i].op, Op::Leaf) {
                self.grads[i] = Some(gy);
            }
            for (v, g) in contributions {
                if !self.entries[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn adjoint(&self, i: usize, gy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let entry = &self.entries[i];
        let val = |v: Var| &self.entries[v.0].value;
        let needs = |v: Var| self.entries[v.0].requires_grad;
        let mut out = Vec::new();
        match &entry.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv_backward(val(*x), val(*w), geom, gy)?;
                out.push((*x, gx));
                out.push((*w, gw));
                if let Some(b) = b {
                    out.push((*b, gb));
                }
            }
            Op::ConvTranspose { x, w, b, stride } => {
                let (gx, gw, gb) = kernels::conv_transpose_backward(val(*x), val(*w), stride, gy)?;
                out.push((*x, gx));
                out.push((*w, gw));
                if let Some(b) = b {
                    out.push((*b, gb));
                }
            }
            Op::Pool { x, map, scale } => {
                if needs(*x) {
                    out.push((*x, kernels::pool_backward(val(*x).shape(), map, *scale, gy)?));
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
                detach_stats,
            } => {
                let (gx, gg, gb) = kernels::instance_norm_backward(
                    val(*x).shape(),
                    val(*gamma),
                    stats,
                    gy,
                    *detach_stats,
                )?;
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gb));
            }
            Op::Relu(x) => {
                let g = val(*x)
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::new(gy.shape().to_vec(), g)?));
            }
            Op::Sigmoid(x) => {
                let g = entry
                    .value
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                out.push((*x, Tensor::new(gy.shape().to_vec(), g)?));
            }
            Op::Concat(a, b) => {
                let (ga, gb) = kernels::concat_backward(val(*a).shape(), val(*b).shape(), gy)?;
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Add(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.clone()));
            }
            Op::Mul(a, b) => {
                let ga = gy.data().iter().zip(val(*b).data()).map(|(&g, &v)| g * v).collect();
                let gb = gy.data().iter().zip(val(*a).data()).map(|(&g, &v)| g * v).collect();
                out.push((*a, Tensor::new(gy.shape().to_vec(), ga)?));
                out.push((*b, Tensor::new(gy.shape().to_vec(), gb)?));
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                out.push((*x, Tensor::full(val(*x).shape(), g)));
            }
            Op::Reshape(x) => {
                out.push((*x, gy.clone().reshape(val(*x).shape())?));
            }
            Op::Custom { inputs, adjoint } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let grads = adjoint.backward(gy, &values)?;
                for (&v, g) in inputs.iter().zip(grads) {
                    if let Some(g) = g {
                        if g.shape() != val(v).shape() {
                            return Err(TensorError::ShapeMismatch {
                                op: "custom adjoint",
                                lhs: g.shape().to_vec(),
                                rhs: val(v).shape().to_vec(),
                            });
                        }
                        out.push((v, g));
                    }
                }
            }
        }
        Ok(out)
    }
}
