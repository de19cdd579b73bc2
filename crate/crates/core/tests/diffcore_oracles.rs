//! Finite-difference and duplicate-implementation oracles for the autodiff core.

#![allow(clippy::needless_range_loop)]

use dissobs::diffcore::{
    mlp_forward, mlp_input_gradient, Activation, DiffError, Graph, Layer, MlpNet, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Builds `f(inputs)` on a fresh graph and returns the root value.
type Build = dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var, DiffError>;

/// Checks the reverse-mode gradient of a scalar function of `inputs`
/// against central differences, returning the worst relative error.
fn fd_check(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = build(&mut g, &vars).unwrap();
    let grads = g.backward(root).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let root = build(&mut g, &vars).unwrap();
        g.value(root).item().unwrap()
    };

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], fd));
        }
    }
    worst
}

#[test]
fn every_primitive_matches_central_differences_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = random_tensor(&mut rng, 3, 2, -1.5, 1.5);
        let b = random_tensor(&mut rng, 3, 2, -1.5, 1.5);
        let pos = random_tensor(&mut rng, 3, 2, 0.5, 2.0);
        let m = random_tensor(&mut rng, 2, 4, -1.0, 1.0);
        let row = random_tensor(&mut rng, 1, 2, -1.0, 1.0);
        let col = random_tensor(&mut rng, 3, 1, -1.0, 1.0);
        // keep smoothed-relu arguments away from the kinks at 0 and d
        let d = 0.5;
        let s = Tensor::new(3, 2, (0..6).map(|i| [-0.7, 0.2, 0.35, 1.3, -0.2, 0.9][i] + rng.gen_range(-0.05..0.05)).collect()).unwrap();
        // and relu/max arguments away from their kinks
        let away = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });

        let cases: Vec<(Vec<Tensor>, Box<Build>)> = vec![
            (vec![a.clone(), m.clone()], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; let t = g.tanh(y)?; g.sum(t) })),
            (vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.matmul_t(v[0], v[1])?; let t = g.tanh(y)?; g.sum(t) })),
            (vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.add(v[0], v[1])?; let t = g.square(y)?; g.sum(t) })),
            (vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.sub(v[0], v[1])?; let t = g.tanh(y)?; g.sum(t) })),
            (vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; let t = g.tanh(y)?; g.sum(t) })),
            (vec![a.clone(), pos.clone()], Box::new(|g, v| { let y = g.div(v[0], v[1])?; let t = g.tanh(y)?; g.sum(t) })),
            (vec![a.clone()], Box::new(|g, v| { let y = g.affine(v[0], -2.5, 0.3)?; let t = g.tanh(y)?; g.sum(t) })),
            (vec![away.clone()], Box::new(|g, v| { let y = g.relu(v[0])?; let t = g.square(y)?; g.sum(t) })),
            (vec![s.clone()], Box::new(move |g, v| { let y = g.smooth_relu(v[0], d)?; let t = g.square(y)?; g.sum(t) })),
            (vec![s.clone()], Box::new(move |g, v| { let y = g.smooth_relu_grad(v[0], d)?; let t = g.square(y)?; g.sum(t) })),
            (vec![a.clone(), b.clone()], Box::new(|g, v| { let t = g.tanh(v[0])?; g.dot(t, v[1]) })),
            (vec![a.clone()], Box::new(|g, v| { let t = g.tanh(v[0])?; g.norm_sq(t) })),
            (vec![a.clone()], Box::new(|g, v| { let r = g.row_sum(v[0])?; let t = g.tanh(r)?; g.sum(t) })),
            (vec![away.clone()], Box::new(|g, v| { let y = g.max_const(v[0], 0.0)?; let t = g.square(y)?; g.sum(t) })),
            (vec![a.clone(), row.clone()], Box::new(|g, v| { let y = g.add_row(v[0], v[1])?; let t = g.tanh(y)?; g.sum(t) })),
            (vec![a.clone(), row.clone()], Box::new(|g, v| { let y = g.mul_row(v[0], v[1])?; let t = g.tanh(y)?; g.sum(t) })),
            (vec![a.clone(), col.clone()], Box::new(|g, v| { let y = g.mul_col(v[0], v[1])?; let t = g.tanh(y)?; g.sum(t) })),
            (vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.concat(&[v[0], v[1], v[0]])?; let t = g.tanh(y)?; let w = g.select(t, &[5, 0, 2, 0])?; g.norm_sq(w) })),
        ];
        for (inputs, build) in &cases {
            worst = worst.max(fd_check(inputs, build.as_ref()));
        }
    }
    assert!(worst <= 1e-5, "worst relative error {worst}");
}

#[test]
fn sum_tanh_affine_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random_tensor(&mut rng, 3, 3, -1.0, 1.0);
    let x = random_tensor(&mut rng, 1, 3, -1.0, 1.0);
    let b = random_tensor(&mut rng, 1, 3, -1.0, 1.0);
    let err = fd_check(&[w, x, b], &|g, v| {
        let wx = g.matmul_t(v[1], v[0])?;
        let pre = g.add(wx, v[2])?;
        let t = g.tanh(pre)?;
        g.sum(t)
    });
    assert!(err <= 1e-5, "relative error {err}");
}

/// Straight-line forward pass written without the graph.
fn reference_forward(net: &MlpNet, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in &net.layers {
        let (out, inp) = layer.weight.shape();
        let mut next = vec![0.0; out];
        for (o, slot) in next.iter_mut().enumerate() {
            let mut acc = layer.bias.data()[o];
            for i in 0..inp {
                acc += layer.weight.data()[o * inp + i] * h[i];
            }
            *slot = match layer.activation {
                Activation::Linear => acc,
                Activation::Tanh => acc.tanh(),
                Activation::Relu => acc.max(0.0),
                Activation::TanhScaled100 => 100.0 * acc.tanh(),
            };
        }
        h = next;
    }
    h
}

#[test]
fn forward_matches_straight_line_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = MlpNet::random(&[2, 4, 1], Activation::Tanh, Activation::Tanh, &mut rng).unwrap();
    for _ in 0..50 {
        let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let mut g = Graph::new();
        let b = net.bind(&mut g, false);
        let xv = g.constant(Tensor::row_vector(&x));
        let y = mlp_forward(&mut g, &b, xv).unwrap();
        let expect = reference_forward(&net, &x);
        assert!((g.value(y).data()[0] - expect[0]).abs() <= 1e-14);
    }
}

fn scalar_net_value(net: &MlpNet, x: &[f64]) -> f64 {
    reference_forward(net, x)[0]
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let net = MlpNet::random(&[3, 16, 1], Activation::Tanh, Activation::Linear, &mut rng).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let mut g = Graph::new();
        let b = net.bind(&mut g, false);
        let xv = g.constant(Tensor::row_vector(&x));
        let d = mlp_input_gradient(&mut g, &b, xv).unwrap();
        for i in 0..3 {
            let mut p = x.clone();
            p[i] += FD_STEP;
            let mut m = x.clone();
            m[i] -= FD_STEP;
            let fd = (scalar_net_value(&net, &p) - scalar_net_value(&net, &m)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.value(d).data()[i], fd));
        }
    }
    assert!(worst <= 1e-5, "worst relative error {worst}");
}

/// `d/dθ [v · ∇_x g_θ(x)]` against differences over every parameter.
fn input_gradient_parameter_check(net: &MlpNet, x: &[f64], v: &[f64]) -> f64 {
    let objective = |net: &MlpNet, trainable: bool| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let b = net.bind(&mut g, trainable);
        let xv = g.constant(Tensor::row_vector(x));
        let vv = g.constant(Tensor::row_vector(v));
        let d = mlp_input_gradient(&mut g, &b, xv).unwrap();
        let s = g.dot(d, vv).unwrap();
        let value = g.value(s).item().unwrap();
        if !trainable {
            return (value, vec![]);
        }
        let grads = g.backward(s).unwrap();
        (value, b.parameter_vars().into_iter().map(|p| grads.wrt(p)).collect())
    };
    let (_, analytic) = objective(net, true);
    let mut worst: f64 = 0.0;
    let n_params = net.parameters().count();
    for k in 0..n_params {
        let len = net.parameters().nth(k).unwrap().len();
        for i in 0..len {
            let mut plus = net.clone();
            plus.parameters_mut().nth(k).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = net.clone();
            minus.parameters_mut().nth(k).unwrap().data_mut()[i] -= FD_STEP;
            let fd = (objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k].data()[i], fd));
        }
    }
    worst
}

#[test]
fn input_gradient_is_differentiable_in_the_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for output in [Activation::Linear, Activation::Tanh, Activation::TanhScaled100] {
        let net = MlpNet::random(&[4, 8, 6, 1], Activation::Tanh, output, &mut rng).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = input_gradient_parameter_check(&net, &x, &v);
        assert!(err <= 1e-4, "{output:?}: relative error {err}");
    }
}

#[test]
fn input_gradient_accounts_for_affine_maps() {
    use dissobs::diffcore::AffineMap;
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let net = MlpNet::random(&[2, 5, 1], Activation::Tanh, Activation::Linear, &mut rng)
        .unwrap()
        .with_input_map(AffineMap::normalizing(&[-25.0, 0.0], &[25.0, 50.0]).unwrap())
        .unwrap()
        .with_output_map(AffineMap::new(&[3.0], &[7.5]).unwrap())
        .unwrap();
    let value = |x: &[f64]| {
        let mut g = Graph::new();
        let b = net.bind(&mut g, false);
        let xv = g.constant(Tensor::row_vector(x));
        let y = mlp_forward(&mut g, &b, xv).unwrap();
        g.value(y).item().unwrap()
    };
    let x = [3.0, 41.0];
    let mut g = Graph::new();
    let b = net.bind(&mut g, false);
    let xv = g.constant(Tensor::row_vector(&x));
    let d = mlp_input_gradient(&mut g, &b, xv).unwrap();
    for i in 0..2 {
        let mut p = x;
        p[i] += FD_STEP;
        let mut m = x;
        m[i] -= FD_STEP;
        let fd = (value(&p) - value(&m)) / (2.0 * FD_STEP);
        assert!(rel_err(g.value(d).data()[i], fd) <= 1e-5);
    }
}

#[test]
fn backward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let net = MlpNet::random(&[3, 16, 16, 1], Activation::Tanh, Activation::TanhScaled100, &mut rng).unwrap();
    let x = random_tensor(&mut rng, 64, 3, -1.0, 1.0);
    let run = || {
        let mut g = Graph::new();
        let b = net.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let d = mlp_input_gradient(&mut g, &b, xv).unwrap();
        let s = g.norm_sq(d).unwrap();
        let grads = g.backward(s).unwrap();
        b.parameter_vars().into_iter().map(|p| grads.wrt(p)).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

fn tiny_layer(w: Vec<f64>, rows: usize, cols: usize, b: Vec<f64>) -> Layer {
    Layer { weight: Tensor::new(rows, cols, w).unwrap(), bias: Tensor::row_vector(&b), activation: Activation::Tanh }
}

proptest! {
    #[test]
    fn batched_forward_rows_are_independent(seed in 0u64..1000, rows in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MlpNet::from_layers(vec![
            tiny_layer((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(), 3, 2, vec![0.1, -0.2, 0.3]),
            tiny_layer((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(), 1, 3, vec![0.05]),
        ]).unwrap();
        let x = random_tensor(&mut rng, rows, 2, -3.0, 3.0);
        let mut g = Graph::new();
        let b = net.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = mlp_forward(&mut g, &b, xv).unwrap();
        for r in 0..rows {
            let single = reference_forward(&net, x.row(r))[0];
            prop_assert!((g.value(y).get(r, 0) - single).abs() <= 1e-14);
        }
    }
}
