mod common;

use common::{numeric_grads, randn, rel_err, uniform};
use mlnet::tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-5;

/// Builds a scalar from `inputs` with `body` and checks every input's
/// gradient against central differences.
fn check(inputs: Vec<Tensor<f64>>, body: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = body(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = body(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let numeric = numeric_grads(&inputs, EPS, eval);
    for (i, (&v, n)) in vars.iter().zip(&numeric).enumerate() {
        let a = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let err = rel_err(a.data(), n.data());
        assert!(err <= TOL, "input {i}: relative error {err:.3e}");
    }
}

#[test]
fn matmul_broadcast_and_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        randn(&mut rng, &[4, 3], 1.0),
        randn(&mut rng, &[3, 5], 1.0),
        randn(&mut rng, &[5], 1.0),
    ];
    check(inputs, |g, v| {
        let h = g.matmul(v[0], v[1]).unwrap();
        let h = g.add(h, v[2]).unwrap();
        let t = g.tanh(h).unwrap();
        let s = g.sigmoid(h).unwrap();
        let m = g.mul(t, s).unwrap();
        let l = g.leaky_relu(m, 0.01).unwrap();
        g.sum(l).unwrap()
    });
}

#[test]
fn matmul_nt_with_column_broadcast_division() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        randn(&mut rng, &[3, 4], 1.0),
        randn(&mut rng, &[6, 4], 1.0),
        uniform(&mut rng, &[3, 1], 1.0, 2.0),
    ];
    check(inputs, |g, v| {
        let h = g.matmul_nt(v[0], v[1]).unwrap();
        let q = g.div(h, v[2]).unwrap();
        let q = g.sub(q, v[2]).unwrap();
        let q = g.mul(q, q).unwrap();
        g.sum(q).unwrap()
    });
}

#[test]
fn reductions_concat_slice_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![randn(&mut rng, &[3, 4], 1.0), randn(&mut rng, &[3, 2], 1.0)];
    check(inputs, |g, v| {
        let c = g.concat(&[v[0], v[1]], 1).unwrap();
        let mean = g.mean_axis(c, 1).unwrap();
        let max = g.max_axis(c, 0).unwrap();
        let s = g.slice(c, 1, 1, 3).unwrap();
        let r = g.reshape(s, &[9]).unwrap();
        let r = g.scale(r, 0.7).unwrap();
        let sm = g.sum(mean).unwrap();
        let sx = g.sum(max).unwrap();
        let sr = g.sum_axis(r, 0).unwrap();
        let a = g.add(sm, sx).unwrap();
        g.add(a, sr).unwrap()
    });
}

#[test]
fn log_clamp_and_scalar_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![uniform(&mut rng, &[2, 5], -2.0, 2.0)];
    check(inputs, |g, v| {
        let s = g.sigmoid(v[0]).unwrap();
        let s = g.add_scalar(s, 0.25).unwrap();
        // bounds well outside the range, so the clamp is the identity
        let s = g.clamp(s, 1e-3, 10.0).unwrap();
        let l = g.log(s).unwrap();
        g.sum(l).unwrap()
    });
}

#[test]
fn fan_out_through_several_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![randn(&mut rng, &[3, 3], 0.5)];
    check(inputs, |g, v| {
        let a = g.matmul(v[0], v[0]).unwrap();
        let b = g.tanh(v[0]).unwrap();
        let c = g.mul(a, b).unwrap();
        let d = g.add(c, v[0]).unwrap();
        g.sum(d).unwrap()
    });
}

/// A random three-layer stack drawn from the op set.
fn composite(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        randn(&mut rng, &[4, 6], 1.0),
        randn(&mut rng, &[5, 6], 0.5),
        randn(&mut rng, &[5], 0.5),
        randn(&mut rng, &[3, 5], 0.5),
        randn(&mut rng, &[3], 0.5),
    ];
    check(inputs, |g, v| {
        let h1 = g.matmul_nt(v[0], v[1]).unwrap();
        let h1 = g.add(h1, v[2]).unwrap();
        let h1 = g.tanh(h1).unwrap();
        let h2 = g.matmul_nt(h1, v[3]).unwrap();
        let h2 = g.add(h2, v[4]).unwrap();
        let h2 = g.leaky_relu(h2, 0.01).unwrap();
        let p = g.sigmoid(h2).unwrap();
        let tot = g.sum_axis(p, 1).unwrap();
        let p = g.div(p, tot).unwrap();
        let lp = g.log(p).unwrap();
        let mx = g.max_axis(lp, 1).unwrap();
        let mean = g.mean_axis(h1, 0).unwrap();
        let a = g.sum(mx).unwrap();
        let b = g.sum(mean).unwrap();
        g.sub(a, b).unwrap()
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_composites_match_finite_differences(seed in any::<u64>()) {
        composite(seed);
    }

    #[test]
    fn broadcast_add_gradient_sums_over_broadcast_axes(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[rows, cols], 1.0);
        let b = randn(&mut rng, &[cols], 1.0);
        let mut g = Graph::new();
        let (xv, bv) = (g.leaf(x), g.leaf(b));
        let y = g.add(xv, bv).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        prop_assert!(grads.get(bv).unwrap().data().iter().all(|&v| v == rows as f64));
        prop_assert!(grads.get(xv).unwrap().data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn sigmoid_derivative_at_zero_is_quarter() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f64>::scalar(0.0));
    let y = g.sigmoid(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(g.value(y).data()[0], 0.5);
    assert_eq!(grads.get(x).unwrap().data()[0], 0.25);
}

#[test]
fn f32_and_f64_graphs_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = randn(&mut rng, &[3, 4], 1.0);
    let b = randn(&mut rng, &[4, 2], 1.0);
    let run64 = {
        let mut g = Graph::<f64>::inference();
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let z = g.matmul(x, y).unwrap();
        let z = g.tanh(z).unwrap();
        g.value(z).data().to_vec()
    };
    let mut g = Graph::<f32>::inference();
    let (x, y) = (g.constant(a.cast()), g.constant(b.cast()));
    let z = g.matmul(x, y).unwrap();
    let z = g.tanh(z).unwrap();
    for (l, r) in g.value(z).data().iter().zip(&run64) {
        assert!((*l as f64 - r).abs() < 1e-5);
    }
}
