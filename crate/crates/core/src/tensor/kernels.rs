//! Forward and adjoint kernels for the primitive ops.
//!
//! These work on plain tensors; [`super::Tape`] wires them into the
//! autodiff graph.

use super::{increment, strides, Result, Scalar, Tensor, TensorError};

/// Boundary handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// No padding; output extent shrinks.
    Valid,
    /// Zero padding of `(k - 1) / 2` on both sides (odd kernels only).
    Same,
    /// Like `Same` but indices wrap around periodically.
    Circular,
}

/// Kernel, stride and padding of a convolution, one entry per spatial axis.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn new(kernel: Vec<usize>, stride: Vec<usize>, padding: Padding) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Leading pad per axis.
    pub fn pad(&self) -> Vec<usize> {
        match self.padding {
            Padding::Valid => vec![0; self.kernel.len()],
            Padding::Same | Padding::Circular => self.kernel.iter().map(|k| (k - 1) / 2).collect(),
        }
    }

    pub fn output_extent(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != self.kernel.len() || self.stride.len() != self.kernel.len() {
            return Err(TensorError::Invalid {
                op: "conv",
                msg: format!(
                    "spatial rank {} vs kernel {:?} / stride {:?}",
                    input.len(),
                    self.kernel,
                    self.stride
                ),
            });
        }
        let pad = self.pad();
        let mut out = Vec::with_capacity(input.len());
        for d in 0..input.len() {
            let (n, k, s) = (input[d], self.kernel[d], self.stride[d]);
            if k == 0 || s == 0 {
                return Err(TensorError::Invalid {
                    op: "conv",
                    msg: "zero kernel or stride".into(),
                });
            }
            if self.padding != Padding::Valid && k % 2 == 0 {
                return Err(TensorError::Invalid {
                    op: "conv",
                    msg: format!("same padding needs odd kernels, got {:?}", self.kernel),
                });
            }
            if n + 2 * pad[d] < k {
                return Err(TensorError::Invalid {
                    op: "conv",
                    msg: format!("extent {n} smaller than kernel {k} on axis {d}"),
                });
            }
            out.push((n + 2 * pad[d] - k) / s + 1);
        }
        Ok(out)
    }
}

const PAD: usize = usize::MAX;

/// Precomputed gather indices: for each kernel tap and output position, the
/// flat input position it reads (or `PAD`).
struct ConvPlan {
    out_spatial: Vec<usize>,
    taps: usize,
    out_len: usize,
    in_len: usize,
    index: Vec<usize>,
    identity: bool,
}

impl ConvPlan {
    fn new(in_spatial: &[usize], geom: &ConvGeometry) -> Result<Self> {
        let out_spatial = geom.output_extent(in_spatial)?;
        let pad = geom.pad();
        let taps: usize = geom.kernel.iter().product();
        let out_len: usize = out_spatial.iter().product();
        let in_len: usize = in_spatial.iter().product();
        let in_strides = strides(in_spatial);
        let rank = in_spatial.len();
        let identity = geom.kernel.iter().all(|&k| k == 1)
            && geom.stride.iter().all(|&s| s == 1)
            && out_spatial == in_spatial;

        let mut index = Vec::with_capacity(if identity { 0 } else { taps * out_len });
        if !identity {
            let mut tap = vec![0usize; rank];
            for _ in 0..taps {
                let mut o = vec![0usize; rank];
                for _ in 0..out_len {
                    let mut flat = 0usize;
                    let mut inside = true;
                    for d in 0..rank {
                        let pos = (o[d] * geom.stride[d] + tap[d]) as isize - pad[d] as isize;
                        let n = in_spatial[d] as isize;
                        let pos = if (0..n).contains(&pos) {
                            pos
                        } else if geom.padding == Padding::Circular {
                            pos.rem_euclid(n)
                        } else {
                            inside = false;
                            break;
                        };
                        flat += pos as usize * in_strides[d];
                    }
                    index.push(if inside { flat } else { PAD });
                    increment(&mut o, &out_spatial);
                }
                increment(&mut tap, &geom.kernel);
            }
        }
        Ok(Self {
            out_spatial,
            taps,
            out_len,
            in_len,
            index,
            identity,
        })
    }

    fn im2col<T: Scalar>(&self, x: &[T], channels: usize, col: &mut [T]) {
        for c in 0..channels {
            let xs = &x[c * self.in_len..(c + 1) * self.in_len];
            for t in 0..self.taps {
                let row = &mut col[(c * self.taps + t) * self.out_len..][..self.out_len];
                let idx = &self.index[t * self.out_len..(t + 1) * self.out_len];
                for (dst, &i) in row.iter_mut().zip(idx) {
                    *dst = if i == PAD { T::zero() } else { xs[i] };
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], channels: usize, gx: &mut [T]) {
        for c in 0..channels {
            let gs = &mut gx[c * self.in_len..(c + 1) * self.in_len];
            for t in 0..self.taps {
                let row = &col[(c * self.taps + t) * self.out_len..][..self.out_len];
                let idx = &self.index[t * self.out_len..(t + 1) * self.out_len];
                for (&v, &i) in row.iter().zip(idx) {
                    if i != PAD {
                        gs[i] += v;
                    }
                }
            }
        }
    }
}

/// `c(m x n) = a(m x k) * b(k x n) + beta * c`, all row-major, optionally
/// reading `a` or `b` transposed from their stored layout.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; `c` is a distinct mutable slice.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

fn check_conv_operands<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    kernel_axis_out: usize,
) -> Result<()> {
    if x.rank() < 2 || w.rank() != x.rank() {
        return Err(TensorError::Invalid {
            op: "conv",
            msg: format!("input {:?} and weight {:?} ranks disagree", x.shape(), w.shape()),
        });
    }
    let cin_axis = 1 - kernel_axis_out;
    if w.shape()[cin_axis] != x.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "conv channels",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if let Some(b) = b {
        if b.shape() != [w.shape()[kernel_axis_out]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv bias",
                lhs: b.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Cross-correlation. `x: [B, Cin, s...]`, `w: [Cout, Cin, k...]`.
pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    check_conv_operands(x, w, b, 0)?;
    if w.shape()[2..] != geom.kernel[..] {
        return Err(TensorError::ShapeMismatch {
            op: "conv kernel",
            lhs: w.shape().to_vec(),
            rhs: geom.kernel.clone(),
        });
    }
    let (batch, cin) = (x.shape()[0], x.shape()[1]);
    let cout = w.shape()[0];
    let plan = ConvPlan::new(&x.shape()[2..], geom)?;
    let rows = cin * plan.taps;
    let mut out = vec![T::zero(); batch * cout * plan.out_len];
    let mut col = vec![T::zero(); if plan.identity { 0 } else { rows * plan.out_len }];
    for s in 0..batch {
        let xs = &x.data()[s * cin * plan.in_len..(s + 1) * cin * plan.in_len];
        let ys = &mut out[s * cout * plan.out_len..(s + 1) * cout * plan.out_len];
        let src = if plan.identity {
            xs
        } else {
            plan.im2col(xs, cin, &mut col);
            &col
        };
        matmul(cout, rows, plan.out_len, w.data(), false, src, false, T::zero(), ys);
        if let Some(b) = b {
            for (co, row) in ys.chunks_exact_mut(plan.out_len).enumerate() {
                let bias = b.data()[co];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    let mut shape = vec![batch, cout];
    shape.extend_from_slice(&plan.out_spatial);
    Tensor::new(shape, out)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeometry,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (batch, cin) = (x.shape()[0], x.shape()[1]);
    let cout = w.shape()[0];
    let plan = ConvPlan::new(&x.shape()[2..], geom)?;
    let rows = cin * plan.taps;
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    let mut gb = vec![T::zero(); cout];
    let mut col = vec![T::zero(); if plan.identity { 0 } else { rows * plan.out_len }];
    let mut gcol = vec![T::zero(); rows * plan.out_len];
    for s in 0..batch {
        let xs = &x.data()[s * cin * plan.in_len..(s + 1) * cin * plan.in_len];
        let gys = &gy.data()[s * cout * plan.out_len..(s + 1) * cout * plan.out_len];
        let src = if plan.identity {
            xs
        } else {
            plan.im2col(xs, cin, &mut col);
            &col
        };
        matmul(cout, plan.out_len, rows, gys, false, src, true, T::one(), &mut gw);
        for (co, row) in gys.chunks_exact(plan.out_len).enumerate() {
            gb[co] += row.iter().copied().sum();
        }
        let gxs = &mut gx[s * cin * plan.in_len..(s + 1) * cin * plan.in_len];
        if plan.identity {
            matmul(rows, cout, plan.out_len, w.data(), true, gys, false, T::one(), gxs);
        } else {
            matmul(rows, cout, plan.out_len, w.data(), true, gys, false, T::zero(), &mut gcol);
            plan.col2im(&gcol, cin, gxs);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![cout], gb)?,
    ))
}

/// Scatter map for a transposed convolution with kernel equal to stride.
struct UpsamplePlan {
    out_spatial: Vec<usize>,
    taps: usize,
    in_len: usize,
    out_len: usize,
    map: Vec<usize>,
}

impl UpsamplePlan {
    fn new(in_spatial: &[usize], kernel: &[usize], stride: &[usize]) -> Result<Self> {
        if kernel != stride
            || stride.len() != in_spatial.len()
            || stride.iter().any(|&s| !(1..=2).contains(&s))
        {
            return Err(TensorError::UnsupportedStride {
                stride: stride.to_vec(),
                kernel: kernel.to_vec(),
            });
        }
        let out_spatial: Vec<usize> = in_spatial.iter().zip(stride).map(|(n, s)| n * s).collect();
        let out_strides = strides(&out_spatial);
        let taps: usize = kernel.iter().product();
        let in_len: usize = in_spatial.iter().product();
        let out_len: usize = out_spatial.iter().product();
        let rank = in_spatial.len();
        let mut map = Vec::with_capacity(taps * in_len);
        let mut tap = vec![0usize; rank];
        for _ in 0..taps {
            let mut i = vec![0usize; rank];
            for _ in 0..in_len {
                let flat = (0..rank)
                    .map(|d| (i[d] * stride[d] + tap[d]) * out_strides[d])
                    .sum();
                map.push(flat);
                increment(&mut i, in_spatial);
            }
            increment(&mut tap, kernel);
        }
        Ok(Self {
            out_spatial,
            taps,
            in_len,
            out_len,
            map,
        })
    }
}

/// `x: [B, Cin, s...]`, `w: [Cin, Cout, k...]` with `k == stride`.
pub(crate) fn conv_transpose_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: &[usize],
) -> Result<Tensor<T>> {
    check_conv_operands(x, w, b, 1)?;
    let plan = UpsamplePlan::new(&x.shape()[2..], &w.shape()[2..], stride)?;
    let (batch, cin) = (x.shape()[0], x.shape()[1]);
    let cout = w.shape()[1];
    let rows = cout * plan.taps;
    let mut out = vec![T::zero(); batch * cout * plan.out_len];
    let mut ycol = vec![T::zero(); rows * plan.in_len];
    for s in 0..batch {
        let xs = &x.data()[s * cin * plan.in_len..(s + 1) * cin * plan.in_len];
        matmul(rows, cin, plan.in_len, w.data(), true, xs, false, T::zero(), &mut ycol);
        let ys = &mut out[s * cout * plan.out_len..(s + 1) * cout * plan.out_len];
        for co in 0..cout {
            let bias = b.map_or(T::zero(), |b| b.data()[co]);
            let dst = &mut ys[co * plan.out_len..(co + 1) * plan.out_len];
            for t in 0..plan.taps {
                let src = &ycol[(co * plan.taps + t) * plan.in_len..][..plan.in_len];
                let map = &plan.map[t * plan.in_len..(t + 1) * plan.in_len];
                for (&v, &o) in src.iter().zip(map) {
                    dst[o] = v + bias;
                }
            }
        }
    }
    let mut shape = vec![batch, cout];
    shape.extend_from_slice(&plan.out_spatial);
    Tensor::new(shape, out)
}

pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: &[usize],
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let plan = UpsamplePlan::new(&x.shape()[2..], &w.shape()[2..], stride)?;
    let (batch, cin) = (x.shape()[0], x.shape()[1]);
    let cout = w.shape()[1];
    let rows = cout * plan.taps;
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    let mut gb = vec![T::zero(); cout];
    let mut gcol = vec![T::zero(); rows * plan.in_len];
    for s in 0..batch {
        let gys = &gy.data()[s * cout * plan.out_len..(s + 1) * cout * plan.out_len];
        for co in 0..cout {
            let src = &gys[co * plan.out_len..(co + 1) * plan.out_len];
            gb[co] += src.iter().copied().sum();
            for t in 0..plan.taps {
                let dst = &mut gcol[(co * plan.taps + t) * plan.in_len..][..plan.in_len];
                let map = &plan.map[t * plan.in_len..(t + 1) * plan.in_len];
                for (d, &o) in dst.iter_mut().zip(map) {
                    *d = src[o];
                }
            }
        }
        let xs = &x.data()[s * cin * plan.in_len..(s + 1) * cin * plan.in_len];
        let gxs = &mut gx[s * cin * plan.in_len..(s + 1) * cin * plan.in_len];
        matmul(cin, rows, plan.in_len, w.data(), false, &gcol, false, T::zero(), gxs);
        matmul(cin, plan.in_len, rows, xs, false, &gcol, true, T::one(), &mut gw);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![cout], gb)?,
    ))
}

/// For every input element, the flat index of the block it falls into when
/// axis `d` is divided into blocks of `block[d]`. Returns the block-grid shape.
fn block_map(shape: &[usize], block: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let grid: Vec<usize> = shape.iter().zip(block).map(|(n, b)| n / b).collect();
    let gstrides = strides(&grid);
    let mut map = Vec::with_capacity(shape.iter().product());
    let mut idx = vec![0usize; shape.len()];
    let total: usize = shape.iter().product();
    for _ in 0..total {
        map.push(
            idx.iter()
                .zip(block)
                .zip(&gstrides)
                .map(|((i, b), s)| i / b * s)
                .sum(),
        );
        increment(&mut idx, shape);
    }
    (grid, map)
}

/// Non-overlapping average pooling over spatial axes (`kernel == stride`).
/// Returns the output and the block map needed by the adjoint.
pub(crate) fn avg_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &[usize],
) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != kernel.len() + 2 {
        return Err(TensorError::Invalid {
            op: "avg_pool",
            msg: format!("kernel {kernel:?} for input {:?}", x.shape()),
        });
    }
    let mut block = vec![1, 1];
    block.extend_from_slice(kernel);
    for (axis, (&n, &k)) in x.shape().iter().zip(&block).enumerate() {
        if k == 0 || n % k != 0 {
            return Err(TensorError::NotDivisible {
                op: "avg_pool",
                axis,
                extent: n,
                kernel: k,
            });
        }
    }
    let (grid, map) = block_map(x.shape(), &block);
    let scale = T::one() / T::of(kernel.iter().product::<usize>() as f64);
    let mut out = vec![T::zero(); grid.iter().product()];
    for (&v, &o) in x.data().iter().zip(&map) {
        out[o] += v;
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Ok((Tensor::new(grid, out)?, map))
}

/// Mean over the listed axes, which are removed from the shape.
pub(crate) fn mean_axes_forward<T: Scalar>(
    x: &Tensor<T>,
    axes: &[usize],
) -> Result<(Tensor<T>, Vec<usize>)> {
    if axes.is_empty() {
        return Err(TensorError::EmptyDims);
    }
    if axes.iter().any(|&a| a >= x.rank()) {
        return Err(TensorError::Invalid {
            op: "global_avg_pool",
            msg: format!("axes {axes:?} out of range for {:?}", x.shape()),
        });
    }
    let block: Vec<usize> = (0..x.rank())
        .map(|a| if axes.contains(&a) { x.shape()[a] } else { 1 })
        .collect();
    let (_, map) = block_map(x.shape(), &block);
    let kept: Vec<usize> = (0..x.rank())
        .filter(|a| !axes.contains(a))
        .map(|a| x.shape()[a])
        .collect();
    let count: usize = block.iter().product();
    let scale = T::one() / T::of(count as f64);
    let mut out = vec![T::zero(); kept.iter().product()];
    for (&v, &o) in x.data().iter().zip(&map) {
        out[o] += v;
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Ok((Tensor::new(kept, out)?, map))
}

/// Adjoint shared by both pooling ops: `gx[i] = gy[map[i]] * scale`.
pub(crate) fn pool_backward<T: Scalar>(
    x_shape: &[usize],
    map: &[usize],
    scale: T,
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let data = map.iter().map(|&o| gy.data()[o] * scale).collect();
    Tensor::new(x_shape.to_vec(), data)
}

/// Saved statistics of an instance-norm forward pass.
pub(crate) struct NormStats<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    if x.rank() < 2 {
        return Err(TensorError::Invalid {
            op: "instance_norm",
            msg: format!("input {:?} lacks a channel axis", x.shape()),
        });
    }
    let channels = x.shape()[1];
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(TensorError::ShapeMismatch {
            op: "instance_norm affine",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if eps <= T::zero() {
        return Err(TensorError::Invalid {
            op: "instance_norm",
            msg: "eps must be positive".into(),
        });
    }
    let spatial: usize = x.shape()[2..].iter().product();
    let groups = x.shape()[0] * channels;
    let n = T::of(spatial as f64);
    let mut out = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let c = g % channels;
        let xs = &x.data()[g * spatial..(g + 1) * spatial];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        let (gm, bt) = (gamma.data()[c], beta.data()[c]);
        for i in 0..spatial {
            let h = (xs[i] - mean) * inv;
            xhat[g * spatial + i] = h;
            out[g * spatial + i] = h * gm + bt;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        NormStats { xhat, inv_std },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`. With `detach_stats` the mean
/// and variance are treated as constants, which makes the op pointwise.
pub(crate) fn instance_norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    gy: &Tensor<T>,
    detach_stats: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let channels = shape[1];
    let spatial: usize = shape[2..].iter().product();
    let groups = shape[0] * channels;
    let n = T::of(spatial as f64);
    let mut gx = vec![T::zero(); gy.numel()];
    let mut gg = vec![T::zero(); channels];
    let mut gbeta = vec![T::zero(); channels];
    for g in 0..groups {
        let c = g % channels;
        let range = g * spatial..(g + 1) * spatial;
        let dy = &gy.data()[range.clone()];
        let xh = &stats.xhat[range.clone()];
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for (&d, &h) in dy.iter().zip(xh) {
            sum_dy += d;
            sum_dy_xh += d * h;
        }
        gg[c] += sum_dy_xh;
        gbeta[c] += sum_dy;
        let scale = gamma.data()[c] * stats.inv_std[g];
        let gxs = &mut gx[range];
        if detach_stats {
            for (o, &d) in gxs.iter_mut().zip(dy) {
                *o = d * scale;
            }
        } else {
            for ((o, &d), &h) in gxs.iter_mut().zip(dy).zip(xh) {
                *o = scale * (d - sum_dy / n - h * sum_dy_xh / n);
            }
        }
    }
    Ok((
        Tensor::new(shape.to_vec(), gx)?,
        Tensor::new(vec![channels], gg)?,
        Tensor::new(vec![channels], gbeta)?,
    ))
}

/// Concatenation along the channel axis.
pub(crate) fn concat_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let compatible = a.rank() >= 2
        && a.rank() == b.rank()
        && a.shape()[0] == b.shape()[0]
        && a.shape()[2..] == b.shape()[2..];
    if !compatible {
        return Err(TensorError::ShapeMismatch {
            op: "concat",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let inner: usize = a.shape()[2..].iter().product();
    let (ca, cb) = (a.shape()[1], b.shape()[1]);
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for s in 0..a.shape()[0] {
        out.extend_from_slice(&a.data()[s * ca * inner..(s + 1) * ca * inner]);
        out.extend_from_slice(&b.data()[s * cb * inner..(s + 1) * cb * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = ca + cb;
    Tensor::new(shape, out)
}

pub(crate) fn concat_backward<T: Scalar>(
    a_shape: &[usize],
    b_shape: &[usize],
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let inner: usize = a_shape[2..].iter().product();
    let (ca, cb) = (a_shape[1], b_shape[1]);
    let mut ga = Vec::with_capacity(a_shape.iter().product());
    let mut gb = Vec::with_capacity(b_shape.iter().product());
    for s in 0..a_shape[0] {
        let base = s * (ca + cb) * inner;
        ga.extend_from_slice(&gy.data()[base..base + ca * inner]);
        gb.extend_from_slice(&gy.data()[base + ca * inner..base + (ca + cb) * inner]);
    }
    Ok((
        Tensor::new(a_shape.to_vec(), ga)?,
        Tensor::new(b_shape.to_vec(), gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, v).unwrap()
    }

    fn conv1d(x: &[f64], w: &[f64], stride: usize, padding: Padding) -> Vec<f64> {
        let geom = ConvGeometry::new(vec![w.len()], vec![stride], padding);
        conv_forward(
            &t(&[1, 1, x.len()], x),
            &t(&[1, 1, w.len()], w),
            Some(&t(&[1], &[0.0])),
            &geom,
        )
        .unwrap()
        .into_data()
    }

    #[test]
    fn conv_examples() {
        let x = [1., 2., 3., 4.];
        assert_eq!(conv1d(&x, &[1.], 1, Padding::Same), vec![1., 2., 3., 4.]);
        assert_eq!(conv1d(&x, &[1., 1., 1.], 1, Padding::Same), vec![3., 6., 9., 7.]);
        assert_eq!(conv1d(&x, &[1., 1.], 2, Padding::Valid), vec![3., 7.]);
        assert_eq!(conv1d(&x, &[1., 1., 1.], 1, Padding::Circular), vec![7., 6., 9., 8.]);
    }

    #[test]
    fn conv_is_cross_correlation() {
        // An asymmetric kernel picks the right neighbour first.
        assert_eq!(conv1d(&[1., 2., 3.], &[0., 0., 1.], 1, Padding::Same), vec![2., 3., 0.]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_same() {
        let geom = ConvGeometry::new(vec![3], vec![1], Padding::Same);
        let x = Tensor::<f64>::zeros(&[1, 2, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3]);
        assert!(conv_forward(&x, &w, None, &geom).is_err());
        let geom = ConvGeometry::new(vec![2], vec![1], Padding::Same);
        let w = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert!(conv_forward(&x, &w, None, &geom).is_err());
    }

    fn up1d(x: &[f64], w: &[f64]) -> Vec<f64> {
        conv_transpose_forward(
            &t(&[1, 1, x.len()], x),
            &t(&[1, 1, w.len()], w),
            None,
            &[w.len()],
        )
        .unwrap()
        .into_data()
    }

    #[test]
    fn transposed_conv_examples() {
        assert_eq!(up1d(&[1., 2.], &[1., 1.]), vec![1., 1., 2., 2.]);
        assert_eq!(up1d(&[1., 2.], &[1.]), vec![1., 2.]);
        assert_eq!(up1d(&[1., 0.], &[2., 3.]), vec![2., 3., 0., 0.]);
    }

    #[test]
    fn transposed_conv_rejects_stride_three() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3]);
        assert!(matches!(
            conv_transpose_forward(&x, &w, None, &[3]),
            Err(TensorError::UnsupportedStride { .. })
        ));
    }

    #[test]
    fn avg_pool_examples() {
        let (y, _) = avg_pool_forward(&t(&[1, 1, 4], &[1., 2., 3., 4.]), &[2]).unwrap();
        assert_eq!(y.data(), &[1.5, 3.5]);
        let (y, _) = avg_pool_forward(&t(&[1, 1, 4], &[1., 2., 3., 4.]), &[1]).unwrap();
        assert_eq!(y.data(), &[1., 2., 3., 4.]);
        let (y, _) = avg_pool_forward(&t(&[1, 1, 2, 2], &[1., 3., 5., 7.]), &[2, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
        assert!(avg_pool_forward(&t(&[1, 1, 3], &[1., 2., 3.]), &[2]).is_err());
    }

    #[test]
    fn mean_axes_examples() {
        let (y, _) = mean_axes_forward(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), &[1]).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert_eq!(y.data(), &[2., 5.]);
        let (y, _) = mean_axes_forward(&t(&[4], &[1., 2., 3., 4.]), &[0]).unwrap();
        assert_eq!(y.shape(), &[] as &[usize]);
        assert_eq!(y.data(), &[2.5]);
        let (y, _) = mean_axes_forward(&Tensor::<f64>::full(&[1, 2, 3, 4], 1.25), &[2, 3]).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.25));
        assert!(matches!(
            mean_axes_forward(&t(&[2], &[1., 2.]), &[]),
            Err(TensorError::EmptyDims)
        ));
    }

    #[test]
    fn instance_norm_examples() {
        let one = t(&[1], &[1.0]);
        let zero = t(&[1], &[0.0]);
        let (y, _) = instance_norm_forward(&t(&[1, 1, 2], &[1., 3.]), &one, &zero, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        let (y, _) = instance_norm_forward(&t(&[1, 1, 3], &[2., 2., 2.]), &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let (y, _) =
            instance_norm_forward(&t(&[1, 1, 3], &[1., 5., 2.]), &zero, &t(&[1], &[5.]), 1e-5)
                .unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn concat_examples() {
        let a = Tensor::<f64>::zeros(&[2, 4, 8, 8]);
        let b = Tensor::<f64>::zeros(&[2, 6, 8, 8]);
        assert_eq!(concat_forward(&a, &b).unwrap().shape(), &[2, 10, 8, 8]);
        let empty = Tensor::<f64>::zeros(&[2, 0, 8, 8]);
        assert_eq!(concat_forward(&a, &empty).unwrap(), a);
        let c = Tensor::<f64>::zeros(&[2, 4, 7, 8]);
        assert!(concat_forward(&a, &c).is_err());
    }
}
