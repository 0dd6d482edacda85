use occflow_core::tensor::{grad_check, Graph, Tensor, Var};
use occflow_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const H: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).unwrap()
}

/// `sum(out * w)` for fixed random weights, so every output element
/// carries a distinct upstream gradient.
fn weighted(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = g.shape(out).to_vec();
    let n = shape.iter().product();
    let w = g.constant(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn check_unary(name: &str, lo: f64, hi: f64, op: fn(&mut Graph<f64>, Var) -> Var) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 4], lo, hi);
        let r = grad_check(
            |g, v| {
                let y = op(g, v[0]);
                weighted(g, y, seed)
            },
            &[x],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "{name} seed {seed}: {:?}", r.inputs);
    }
}

fn check_binary(
    name: &str,
    sa: &[usize],
    sb: &[usize],
    b_range: (f64, f64),
    op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, sa, -2.0, 2.0);
        let b = rand_tensor(&mut rng, sb, b_range.0, b_range.1);
        let r = grad_check(
            |g, v| {
                let y = op(g, v[0], v[1])?;
                weighted(g, y, seed)
            },
            &[a, b],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "{name} seed {seed}: {:?}", r.inputs);
    }
}

#[test]
fn elementwise_unary_gradients() {
    check_unary("abs", -2.0, 2.0, |g, x| g.abs(x));
    check_unary("neg", -2.0, 2.0, |g, x| g.neg(x));
    check_unary("log", 0.2, 3.0, |g, x| g.log(x));
    check_unary("exp", -2.0, 2.0, |g, x| g.exp(x));
    check_unary("sigmoid", -4.0, 4.0, |g, x| g.sigmoid(x));
    check_unary("tanh", -3.0, 3.0, |g, x| g.tanh(x));
    check_unary("relu", -2.0, 2.0, |g, x| g.relu(x));
    check_unary("square", -2.0, 2.0, |g, x| g.square(x));
    check_unary("sqrt", 0.2, 3.0, |g, x| g.sqrt(x));
    check_unary("scale", -2.0, 2.0, |g, x| g.scale(x, -1.7));
    check_unary("offset", -2.0, 2.0, |g, x| g.offset(x, 0.3));
    check_unary("clamp", -2.0, 2.0, |g, x| g.clamp(x, -0.5, 0.8));
}

#[test]
fn elementwise_binary_gradients_with_broadcasting() {
    check_binary("add", &[2, 3, 4], &[2, 3, 4], (-2.0, 2.0), |g, a, b| g.add(a, b));
    check_binary("sub", &[2, 3, 4], &[3, 1], (-2.0, 2.0), |g, a, b| g.sub(a, b));
    check_binary("mul", &[2, 3, 4], &[4], (-2.0, 2.0), |g, a, b| g.mul(a, b));
    check_binary("div", &[2, 3, 4], &[2, 1, 4], (0.5, 2.0), |g, a, b| g.div(a, b));
}

#[test]
fn reduction_and_layout_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let y = rand_tensor(&mut rng, &[2, 2, 4], -1.0, 1.0);
        let r = grad_check(
            |g, v| {
                let s = g.sum_axis(v[0], 1)?;
                let m = g.mean(v[0]);
                let c = g.concat(&[v[0], v[1]], 1)?;
                let sl = g.slice(c, 1, 2, 3)?;
                let rs = g.reshape(sl, vec![6, 4])?;
                let a = weighted(g, s, seed)?;
                let b = weighted(g, rs, seed + 1)?;
                let t = g.add(a, b)?;
                g.add(t, m)
            },
            &[x, y],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: {:?}", r.inputs);
    }
}

#[test]
fn conv2d_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stride = 1 + (seed % 2) as usize;
        let k = [1, 3][(seed / 2 % 2) as usize];
        let x = rand_tensor(&mut rng, &[1, 2, 6, 5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, k, k], -1.0, 1.0);
        let r = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], stride, k / 2)?;
                weighted(g, y, seed)
            },
            &[x, w],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed} stride {stride} k {k}: {:?}", r.inputs);
    }
}

#[test]
fn bilinear_sample_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = rand_tensor(&mut rng, &[1, 2, 5, 6], -1.0, 1.0);
        // Interior, non-lattice coordinates keep the lookup differentiable.
        let coords = Tensor::from_fn(vec![1, 2, 3, 4], |i| {
            let hi = if i < 12 { 4.8 } else { 3.8 };
            let c: f64 = rng.random_range(0.2..hi);
            if (c - c.round()).abs() < 0.05 {
                c + 0.1
            } else {
                c
            }
        })
        .unwrap();
        let r = grad_check(
            |g, v| {
                let y = g.bilinear_sample(v[0], v[1])?;
                weighted(g, y, seed)
            },
            &[img, coords],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: {:?}", r.inputs);
    }
}

#[test]
fn gather_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
        let index: Vec<usize> = (0..10).map(|_| rng.random_range(0..18)).collect();
        let sign: Vec<f64> = (0..10).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let r = grad_check(
            |g, v| {
                let y = g.gather(v[0], index.clone(), sign.clone(), vec![2, 5])?;
                weighted(g, y, seed)
            },
            &[x],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: {:?}", r.inputs);
    }
}

#[test]
fn chain_rule_on_shared_subexpression() {
    // f(x) = exp(x) * x^2 + exp(x): both products use the same node.
    let x0 = 0.7f64;
    let mut g = Graph::<f64>::new();
    let x = g.variable(&Tensor::scalar(x0).with_requires_grad(true));
    let e = g.exp(x);
    let s = g.square(x);
    let p = g.mul(e, s).unwrap();
    let f = g.add(p, e).unwrap();
    g.backward(f).unwrap();
    let expected = x0.exp() * (x0 * x0 + 2.0 * x0 + 1.0);
    assert!((g.grad(x).unwrap()[0] - expected).abs() < 1e-12);
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[1, 3, 8, 8], -1.0, 1.0).cast::<f32>().with_requires_grad(true);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0).cast::<f32>().with_requires_grad(true);
        let mut g = Graph::<f32>::new();
        let (xv, wv) = (g.variable(&x), g.variable(&w));
        let y = g.conv2d(xv, wv, 2, 1).unwrap();
        let y = g.tanh(y);
        let l = g.mean(y);
        g.backward(l).unwrap();
        (g.value(y).to_vec(), g.grad(wv).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
