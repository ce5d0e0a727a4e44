//! Finite-difference checks (h = 1e-3, relative error < 1e-2) for every
//! differentiable operation of the tape.

use polypgan_tensor::gradcheck::check_gradients;
use polypgan_tensor::{ConvSpec, Graph, NodeId, ParamStore, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-2;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_grads<F>(name: &str, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let report = check_gradients(inputs, build).unwrap();
    assert!(
        report.max_rel_error() < TOL,
        "{name}: relative errors {:?}",
        report.rel_errors
    );
}

/// Values bounded away from 0 so that kinks (ELU, abs) sit outside the stencil.
fn away_from_zero(shape: [usize; 4], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::rand_uniform(shape, 0.1, 1.5, &mut r).map(|v| {
        let flip: f32 = if (v * 1000.0) as i32 % 2 == 0 { 1.0 } else { -1.0 };
        flip * v
    })
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(1);
    for spec in [ConvSpec::same(3, 1), ConvSpec::same(3, 2), ConvSpec::new(3, 2, 1, 1)] {
        let x = Tensor::randn([2, 2, 4, 4], 1.0, &mut r);
        let w = Tensor::randn([3, 2, 3, 3], 0.5, &mut r);
        let b = Tensor::randn([1, 3, 1, 1], 0.5, &mut r);
        assert_grads("conv2d", &[x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec));
    }
}

#[test]
fn pointwise_conv_gradients() {
    let mut r = rng(2);
    let x = Tensor::randn([1, 4, 4, 4], 1.0, &mut r);
    let w = Tensor::randn([2, 4, 1, 1], 0.5, &mut r);
    assert_grads("conv1x1", &[x, w], |g, v| g.conv2d(v[0], v[1], None, ConvSpec::new(1, 1, 1, 0)));
}

#[test]
fn transposed_conv2d_gradients() {
    let mut r = rng(3);
    let x = Tensor::randn([1, 3, 3, 3], 1.0, &mut r);
    let w = Tensor::randn([3, 2, 3, 3], 0.5, &mut r);
    let b = Tensor::randn([1, 2, 1, 1], 0.5, &mut r);
    assert_grads("transposed_conv2d", &[x, w, b], |g, v| {
        g.transposed_conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(3, 2, 1, 1), 1)
    });
}

#[test]
fn nearest_resize_gradients() {
    let mut r = rng(4);
    let x = Tensor::randn([1, 2, 3, 4], 1.0, &mut r);
    assert_grads("nearest_resize", &[x], |g, v| g.nearest_resize(v[0], 2));
}

#[test]
fn instance_norm_gradients() {
    let mut r = rng(5);
    let x = Tensor::randn([2, 3, 4, 4], 1.0, &mut r);
    let gamma = Tensor::rand_uniform([1, 3, 1, 1], 0.5, 1.5, &mut r);
    let beta = Tensor::randn([1, 3, 1, 1], 0.5, &mut r);
    assert_grads("instance_norm", &[x, gamma, beta], |g, v| g.instance_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn elementwise_gradients() {
    let x = away_from_zero([1, 2, 4, 4], 6);
    assert_grads("elu", &[x.clone()], |g, v| Ok(g.elu(v[0], 1.0)));
    assert_grads("elu alpha 0.7", &[x.clone()], |g, v| Ok(g.elu(v[0], 0.7)));
    assert_grads("tanh", &[x.clone()], |g, v| Ok(g.tanh(v[0])));
    assert_grads("sigmoid", &[x.clone()], |g, v| Ok(g.sigmoid(v[0])));
    assert_grads("abs", &[x.clone()], |g, v| Ok(g.abs(v[0])));
    assert_grads("square", &[x.clone()], |g, v| Ok(g.square(v[0])));
    assert_grads("scale", &[x.clone()], |g, v| Ok(g.scale(v[0], -2.5)));
    assert_grads("add_scalar", &[x], |g, v| Ok(g.add_scalar(v[0], 0.3)));
}

#[test]
fn log_gradients() {
    let mut r = rng(7);
    let p = Tensor::rand_uniform([1, 1, 4, 4], 0.05, 0.95, &mut r);
    assert_grads("log_clamped", &[p], |g, v| Ok(g.log_clamped(v[0], 1e-7, 1.0 - 1e-7).0));
}

#[test]
fn binary_and_reduction_gradients() {
    let mut r = rng(8);
    let a = Tensor::randn([1, 2, 3, 3], 1.0, &mut r);
    let b = Tensor::randn([1, 2, 3, 3], 1.0, &mut r);
    assert_grads("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    assert_grads("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    assert_grads("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    assert_grads("sum", &[a.clone()], |g, v| Ok(g.sum(v[0])));
    assert_grads("mean", &[a], |g, v| Ok(g.mean(v[0])));
}

#[test]
fn dropout_gradients_follow_the_mask() {
    let mut r = rng(9);
    let x = Tensor::randn([1, 2, 4, 4], 1.0, &mut r);
    assert_grads("dropout", &[x], |g, v| {
        let mut local = rng(99);
        g.dropout(v[0], 0.5, &mut local, true)
    });
}

#[test]
fn concat_gradients_route_to_each_slice() {
    let mut r = rng(10);
    let a = Tensor::randn([1, 2, 3, 3], 1.0, &mut r);
    let b = Tensor::randn([1, 3, 3, 3], 1.0, &mut r);
    assert_grads("concat", &[a.clone(), b.clone()], |g, v| g.concat_channels(&[v[0], v[1]]));

    // the same tensor concatenated twice receives the sum of both routes
    let mut g = Graph::new();
    let x = g.variable(a.clone());
    let cat = g.concat_channels(&[x, x]).unwrap();
    let loss = g.sum(cat);
    let grads = g.gradients(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn composed_conv_norm_elu_l1_gradients() {
    let mut r = rng(11);
    let x = Tensor::randn([1, 2, 4, 4], 1.0, &mut r);
    let w = Tensor::randn([3, 2, 3, 3], 0.5, &mut r);
    let b = Tensor::randn([1, 3, 1, 1], 0.1, &mut r);
    let gamma = Tensor::rand_uniform([1, 3, 1, 1], 0.5, 1.5, &mut r);
    let beta = Tensor::randn([1, 3, 1, 1], 0.3, &mut r);
    let target = Tensor::randn([1, 3, 4, 4], 1.0, &mut r);
    assert_grads("conv->norm->elu->l1", &[x, w, b, gamma, beta], move |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::same(3, 2))?;
        let y = g.instance_norm(y, v[3], v[4], 1e-5)?;
        let y = g.elu(y, 1.0);
        let t = g.constant(target.clone());
        let d = g.sub(y, t)?;
        let a = g.abs(d);
        Ok(g.mean(a))
    });
}

#[test]
fn parameter_gradients_match_variable_gradients() {
    let mut r = rng(12);
    let x = Tensor::randn([1, 1, 4, 4], 1.0, &mut r);
    let w0 = Tensor::randn([2, 1, 3, 3], 1.0, &mut r);
    let mut store = ParamStore::new();
    let wid = store.add("w", w0.clone()).unwrap();

    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let wn = g.param(&store, wid);
    let y = g.conv2d(xn, wn, None, ConvSpec::same(3, 1)).unwrap();
    let loss = g.sum(y);
    g.backward(loss, &mut store).unwrap();

    let mut g2 = Graph::new();
    let xn = g2.constant(x);
    let wv = g2.variable(w0);
    let y = g2.conv2d(xn, wv, None, ConvSpec::same(3, 1)).unwrap();
    let loss = g2.sum(y);
    let grads = g2.gradients(loss).unwrap();
    assert_eq!(store.get(wid).grad.as_ref().unwrap(), grads.get(wv).unwrap());
}
