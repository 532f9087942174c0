//! Oracles shared by the integration tests.
#![allow(dead_code)]

use projnet_core::netbuild::{forward_pass, ForwardOptions};
use projnet_core::rng::SplitMix64;
use projnet_core::{NetGraph, ParamStore, Scalar, Tensor};

pub fn random_tensor<T: Scalar>(shape: &[usize], rng: &mut SplitMix64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(rng.normal())).collect()).unwrap()
}

pub fn network_input<T: Scalar>(graph: &NetGraph, batch: usize, rng: &mut SplitMix64) -> Tensor<T> {
    random_tensor(&graph.nodes[graph.input()].shape(batch), rng)
}

/// `sum(r * f(x))` evaluated in f64.
pub fn probe_loss<T: Scalar>(graph: &NetGraph, params: &ParamStore<T>, x: &Tensor<T>, r: &Tensor<T>) -> f64 {
    let pass = forward_pass(graph, params, x.clone(), ForwardOptions::default(), false, false).unwrap();
    pass.output().data().iter().zip(r.data()).map(|(y, r)| y.as_f64() * r.as_f64()).sum()
}

/// Analytic gradient of `sum(r * f(x))` for every parameter.
pub fn analytic_grads<T: Scalar>(graph: &NetGraph, params: &ParamStore<T>, x: &Tensor<T>, r: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut pass = forward_pass(graph, params, x.clone(), ForwardOptions::default(), true, false).unwrap();
    let rv = pass.tape.leaf(r.clone(), false);
    let prod = pass.tape.mul(pass.output, rv).unwrap();
    let loss = pass.tape.sum(prod).unwrap();
    pass.tape.backward(loss).unwrap();
    pass.params
        .iter()
        .zip(&params.tensors)
        .map(|(&v, p)| pass.tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

pub struct GradCheck {
    pub samples: Vec<GradSample>,
    /// Draws discarded because some ReLU input changed sign within `±h`.
    pub kinks: usize,
}

impl GradCheck {
    pub fn max_rel_error(&self, floor: f64) -> f64 {
        self.samples.iter().map(|s| s.rel_error(floor)).fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.samples.iter().map(|s| (s.analytic - s.numeric).abs()).fold(0.0, f64::max)
    }
}

/// Central differences with step `h` on `count` parameter entries drawn
/// uniformly over all scalar parameters. Entries whose `±h` perturbation
/// flips a ReLU are redrawn, since the difference quotient then straddles a
/// kink of the loss.
pub fn gradcheck<T: Scalar>(
    graph: &NetGraph,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    r: &Tensor<T>,
    h: f64,
    count: usize,
    seed: u64,
) -> GradCheck {
    let grads = analytic_grads(graph, params, x, r);
    let sizes: Vec<usize> = params.tensors.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = SplitMix64::new(seed);
    let mut samples = Vec::with_capacity(count);
    let mut kinks = 0;
    while samples.len() < count {
        let mut flat = rng.below(total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let perturbed = |delta: f64| {
            let mut p = params.clone();
            let v = &mut p.tensors[k].data_mut()[flat];
            *v = T::of(v.as_f64() + delta);
            p
        };
        let (up, down) = (perturbed(h), perturbed(-h));
        if relu_pattern(graph, &up, x) != relu_pattern(graph, &down, x) {
            kinks += 1;
            continue;
        }
        let numeric = (probe_loss(graph, &up, x, r) - probe_loss(graph, &down, x, r)) / (2.0 * h);
        samples.push(GradSample {
            param: graph.params[k].name.clone(),
            index: flat,
            analytic: grads[k].data()[flat].as_f64(),
            numeric,
        });
    }
    GradCheck { samples, kinks }
}

/// Input voxels with a non-zero gradient of one output element, as a
/// per-dimension bounding box, in the linearized probe mode with strictly
/// positive parameters (no cancellation can hide a dependency).
pub fn gradient_support(graph: &NetGraph, position: &[usize], seed: u64) -> Vec<Option<(usize, usize)>> {
    let mut rng = SplitMix64::new(seed);
    let params = ParamStore::<f64> {
        tensors: graph
            .params
            .iter()
            .map(|p| {
                let n = p.numel();
                Tensor::new(p.shape.clone(), (0..n).map(|_| rng.uniform(0.5, 1.5)).collect()).unwrap()
            })
            .collect(),
    };
    let in_shape = graph.nodes[graph.input()].shape(1);
    let n: usize = in_shape.iter().product();
    let x = Tensor::new(in_shape.clone(), (0..n).map(|_| rng.uniform(0.5, 1.5)).collect()).unwrap();
    let opts = ForwardOptions {
        circular: false,
        probe: true,
    };
    let mut pass = forward_pass(graph, &params, x, opts, false, true).unwrap();
    // Seeded at the logits: positive weights saturate the sigmoid, whose
    // elementwise derivative would then round to zero.
    let logits = pass.nodes[graph.nodes.iter().position(|n| n.name == "head.conv").expect("head.conv node")];
    let mut onehot = Tensor::<f64>::zeros(pass.tape.value(logits).shape());
    let mut idx = vec![0, 0];
    idx.extend_from_slice(position);
    let off = onehot.offset(&idx);
    onehot.data_mut()[off] = 1.0;
    let r = pass.tape.leaf(onehot, false);
    let prod = pass.tape.mul(logits, r).unwrap();
    let loss = pass.tape.sum(prod).unwrap();
    pass.tape.backward(loss).unwrap();
    let g = pass.tape.grad(pass.input).unwrap();

    let spatial = &in_shape[2..];
    let mut boxes: Vec<Option<(usize, usize)>> = vec![None; spatial.len()];
    let mut index = vec![0usize; spatial.len()];
    for &v in g.data() {
        if v != 0.0 {
            for (d, b) in boxes.iter_mut().enumerate() {
                let i = index[d];
                *b = Some(b.map_or((i, i), |(lo, hi)| (lo.min(i), hi.max(i))));
            }
        }
        for d in (0..spatial.len()).rev() {
            index[d] += 1;
            if index[d] < spatial[d] {
                break;
            }
            index[d] = 0;
        }
    }
    boxes
}

/// All positions of an extent in row-major order.
pub fn positions(extent: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = extent.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; extent.len()];
    for _ in 0..total {
        out.push(idx.clone());
        for d in (0..extent.len()).rev() {
            idx[d] += 1;
            if idx[d] < extent[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Brute-force boundary: foreground with a 4-neighbor outside the mask or
/// off the image.
pub fn brute_boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let on = |i: isize, j: isize| i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w && mask[i as usize * w + j as usize];
    let mut out = Vec::new();
    for i in 0..h as isize {
        for j in 0..w as isize {
            if on(i, j) && !(on(i - 1, j) && on(i + 1, j) && on(i, j - 1) && on(i, j + 1)) {
                out.push((i as usize, j as usize));
            }
        }
    }
    out
}

/// All-pairs directed distances from boundary `a` to boundary `b`.
pub fn brute_directed(a: &[(usize, usize)], b: &[(usize, usize)], spacing: [f64; 2]) -> Vec<f64> {
    a.iter()
        .map(|&(i, j)| {
            b.iter()
                .map(|&(k, l)| {
                    let di = (i as f64 - k as f64) * spacing[0];
                    let dj = (j as f64 - l as f64) * spacing[1];
                    (di * di + dj * dj).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Two-sided exact p-value by listing all 2^n sign patterns.
pub fn brute_wilcoxon(diffs: &[f64]) -> f64 {
    let d: Vec<f64> = diffs.iter().copied().filter(|&x| x != 0.0).collect();
    let n = d.len();
    let mags: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks: Vec<f64> = mags
        .iter()
        .map(|&m| {
            let below = mags.iter().filter(|&&o| o < m).count() as f64;
            let equal = mags.iter().filter(|&&o| o == m).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for pattern in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|&i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
        le += (w <= observed + 1e-9) as u64;
        ge += (w >= observed - 1e-9) as u64;
    }
    (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
}

/// Sign pattern of every ReLU input in the network.
pub fn relu_pattern<T: Scalar>(graph: &NetGraph, params: &ParamStore<T>, x: &Tensor<T>) -> Vec<bool> {
    let pass = forward_pass(graph, params, x.clone(), ForwardOptions::default(), false, false).unwrap();
    let mut out = Vec::new();
    for (node, _) in graph.nodes.iter().zip(&pass.nodes) {
        if matches!(node.op, projnet_core::netbuild::NodeOp::Relu) {
            let pre = pass.tape.value(pass.nodes[node.inputs[0]]);
            out.extend(pre.data().iter().map(|v| v.as_f64() > 0.0));
        }
    }
    out
}
