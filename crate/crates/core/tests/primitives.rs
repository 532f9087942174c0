mod common;

use common::random_tensor;
use projnet_core::rng::SplitMix64;
use projnet_core::tensor::{ConvGeometry, Padding};
use projnet_core::{Scalar, Tape, Tensor, Var};

type Build<T> = fn(&mut Tape<T>, &[Var]) -> Var;

/// Max relative error between the tape gradient of `sum(r * f(inputs))`
/// and central differences, over every input element.
fn check<T: Scalar>(f: Build<T>, inputs: &[Tensor<T>], h: f64, floor: f64, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed).fork(1);
    let eval = |vals: &[Tensor<T>]| -> (Tape<T>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, _, out) = eval(inputs);
    let r: Tensor<T> = random_tensor(tape.value(out).shape(), &mut rng);
    let loss = |vals: &[Tensor<T>]| -> f64 {
        let (tape, _, out) = eval(vals);
        tape.value(out).data().iter().zip(r.data()).map(|(y, r)| y.as_f64() * r.as_f64()).sum()
    };
    let (mut tape, vars, out) = eval(inputs);
    let rv = tape.leaf(r.clone(), false);
    let prod = tape.mul(out, rv).unwrap();
    let total = tape.sum(prod).unwrap();
    tape.backward(total).unwrap();

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let grad = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] = T::of(inputs[k].data()[i].as_f64() + h);
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] = T::of(inputs[k].data()[i].as_f64() - h);
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = grad.data()[i].as_f64();
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

fn both(name: &str, f32_build: Build<f32>, f64_build: Build<f64>, shapes: &[&[usize]], seed: u64) {
    let mut rng = SplitMix64::new(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| away_from_zero(random_tensor(s, &mut rng))).collect();
    let e64 = check(f64_build, &inputs, 1e-6, 1e-6, seed);
    assert!(e64 <= 1e-5, "{name}: f64 rel err {e64}");
    let inputs32: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
    let e32 = check(f32_build, &inputs32, 1e-3, 1e-1, seed);
    assert!(e32 <= 1e-2, "{name}: f32 rel err {e32}");
}

/// Keeps relu inputs clear of the kink for the chosen step sizes.
fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

macro_rules! primitive {
    ($name:ident, $shapes:expr, |$t:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            fn b32($t: &mut Tape<f32>, $v: &[Var]) -> Var {
                $body
            }
            fn b64($t: &mut Tape<f64>, $v: &[Var]) -> Var {
                $body
            }
            both(stringify!($name), b32, b64, $shapes, 11);
        }
    };
}

primitive!(grad_conv_same, &[&[2, 2, 5, 4], &[3, 2, 3, 3], &[3]], |t, v| {
    let g = ConvGeometry::new(vec![3, 3], vec![1, 1], Padding::Same);
    t.conv(v[0], v[1], Some(v[2]), &g).unwrap()
});

primitive!(grad_conv_strided, &[&[1, 2, 4, 4, 2], &[2, 2, 2, 2, 2], &[2]], |t, v| {
    let g = ConvGeometry::new(vec![2, 2, 2], vec![2, 2, 2], Padding::Valid);
    t.conv(v[0], v[1], Some(v[2]), &g).unwrap()
});

primitive!(grad_conv_circular, &[&[1, 1, 4, 5], &[2, 1, 3, 3]], |t, v| {
    let g = ConvGeometry::new(vec![3, 3], vec![1, 1], Padding::Circular);
    t.conv(v[0], v[1], None, &g).unwrap()
});

primitive!(grad_conv_transpose, &[&[2, 3, 2, 3], &[3, 2, 2, 1], &[2]], |t, v| {
    t.conv_transpose(v[0], v[1], Some(v[2]), &[2, 1]).unwrap()
});

primitive!(grad_avg_pool, &[&[2, 2, 4, 6]], |t, v| t.avg_pool(v[0], &[2, 3]).unwrap());

primitive!(grad_global_pool, &[&[2, 2, 3, 4, 2]], |t, v| t.global_avg_pool(v[0], &[3, 4]).unwrap());

primitive!(grad_instance_norm, &[&[2, 3, 3, 4], &[3], &[3]], |t, v| {
    t.instance_norm(v[0], v[1], v[2], Scalar::of(1e-5)).unwrap()
});

primitive!(grad_concat, &[&[2, 1, 3], &[2, 2, 3]], |t, v| t.concat(v[0], v[1]).unwrap());

primitive!(grad_relu, &[&[3, 4]], |t, v| t.relu(v[0]).unwrap());

primitive!(grad_sigmoid, &[&[3, 4]], |t, v| t.sigmoid(v[0]).unwrap());

primitive!(grad_add_mul, &[&[2, 3], &[2, 3]], |t, v| {
    let s = t.add(v[0], v[1]).unwrap();
    t.mul(s, v[0]).unwrap()
});

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.dot(b).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn strided_conv_and_transposed_conv_are_adjoint() {
    let mut rng = SplitMix64::new(3);
    for (spatial, kernel) in &[(vec![4usize, 6, 2], vec![2usize, 2, 1]), (vec![8, 4], vec![2, 1])] {
        let x: Tensor<f64> = random_tensor(&[2, 3, spatial[0], spatial[1], *spatial.get(2).unwrap_or(&1)][..spatial.len() + 2], &mut rng);
        let mut wshape = vec![4, 3];
        wshape.extend(kernel);
        let w: Tensor<f64> = random_tensor(&wshape, &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(x.clone(), false), tape.leaf(w, false));
        let geom = ConvGeometry::new(kernel.clone(), kernel.clone(), Padding::Valid);
        let cx = tape.conv(xv, wv, None, &geom).unwrap();
        let y: Tensor<f64> = random_tensor(tape.value(cx).shape(), &mut rng);
        let yv = tape.leaf(y.clone(), false);
        let ty = tape.conv_transpose(yv, wv, None, kernel).unwrap();
        let lhs = dot(tape.value(cx), &y);
        let rhs = dot(&x, tape.value(ty));
        assert!(close(lhs, rhs, 1e-4), "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_backward_is_adjoint_of_forward() {
    let mut rng = SplitMix64::new(5);
    for padding in [Padding::Same, Padding::Circular, Padding::Valid] {
        let x: Tensor<f64> = random_tensor(&[2, 2, 5, 6], &mut rng);
        let w: Tensor<f64> = random_tensor(&[3, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let wv = tape.leaf(w, false);
        let cx = tape.conv(xv, wv, None, &ConvGeometry::new(vec![3, 3], vec![1, 1], padding)).unwrap();
        let y: Tensor<f64> = random_tensor(tape.value(cx).shape(), &mut rng);
        let lhs = dot(tape.value(cx), &y);
        let yv = tape.leaf(y, false);
        let p = tape.mul(cx, yv).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        let rhs = dot(&x, tape.grad(xv).unwrap());
        assert!(close(lhs, rhs, 1e-10), "{padding:?}: {lhs} vs {rhs}");
    }
}

#[test]
fn pool_then_replicate_preserves_mean() {
    let mut rng = SplitMix64::new(8);
    for (shape, kernel) in [(vec![2, 3, 8, 4, 6], vec![2, 4, 2]), (vec![1, 2, 12, 6], vec![4, 1])] {
        // Dyadic values make every sum exact.
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape.clone(), (0..n).map(|_| rng.below(64) as f64 / 8.0).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone(), false);
        let pooled = tape.avg_pool(xv, &kernel).unwrap();
        let pooled = tape.value(pooled);
        let up: Vec<f64> = common::positions(&shape)
            .iter()
            .map(|idx| {
                let mut src = idx.clone();
                for (d, k) in kernel.iter().enumerate() {
                    src[d + 2] /= k;
                }
                pooled.get(&src)
            })
            .collect();
        let up = Tensor::new(shape.clone(), up).unwrap();
        assert_eq!(up.mean(), x.mean());
        assert_eq!(pooled.mean(), x.mean());
    }
}

#[test]
fn instance_norm_statistics() {
    let mut rng = SplitMix64::new(9);
    let (b, c, n) = (3, 4, 5 * 6 * 7);
    let data: Vec<f32> = (0..b * c * n).map(|i| (rng.normal() * 3.0 + (i / n) as f64) as f32).collect();
    let x = Tensor::new(vec![b, c, 5, 6, 7], data).unwrap();
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x, false);
    let g = tape.leaf(Tensor::full(&[c], 1.0), false);
    let be = tape.leaf(Tensor::zeros(&[c]), false);
    let y = tape.instance_norm(xv, g, be, 1e-5).unwrap();
    for group in tape.value(y).data().chunks(n) {
        let mean = group.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = group.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() <= 1e-3, "var {var}");
    }
}
