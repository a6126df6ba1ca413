use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    // Keep away from the ReLU kink.
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() < 1e-3 {
                0.5
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(rng, shape).map(|v| v.abs() + 0.2)
}

/// Reduces any node to a scalar with fixed random weights so that every
/// output coordinate contributes a distinct adjoint.
fn weighted_sum<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let w = x.tape().constant(Tensor::new(shape, w)?);
    Ok(x.mul(w)?.sum())
}

const EPS: f64 = 1e-5;

fn check_unary(name: &str, input: Tensor<f64>, f: impl for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>) {
    let err = grad_check(|_, p| weighted_sum(f(p[0])?), &[input], EPS).unwrap();
    assert!(err < 1e-6, "{name}: relative error {err}");
}

fn check_binary(
    name: &str,
    a: Tensor<f64>,
    b: Tensor<f64>,
    f: impl for<'t> Fn(Var<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
) {
    let err = grad_check(|_, p| weighted_sum(f(p[0], p[1])?), &[a, b], EPS).unwrap();
    assert!(err < 1e-6, "{name}: relative error {err}");
}

#[test]
fn square_gradient_is_two_x() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = x.square();
    assert_eq!(tape.backward(y).unwrap().get(x).item(), 6.0);
}

#[test]
fn unreachable_leaf_gets_zero() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let c = tape.param(Tensor::scalar(5.0));
    let y = c.scale(2.0);
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(x).data(), &[0.0, 0.0]);
    assert_eq!(grads.get(c).item(), 2.0);

    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0));
    let k = tape.constant(Tensor::scalar(4.0));
    assert_eq!(tape.backward(k).unwrap().get(x).item(), 0.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x.tanh()), Err(Error::Contract(_))));
}

#[test]
fn backward_discards_adjoint_nodes() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![0.3, -0.2]));
    let y = x.tanh().sum();
    let before = tape.len();
    tape.backward(y).unwrap();
    assert_eq!(tape.len(), before);
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shape = [3, 4];
    check_binary("add", rand_tensor(&mut rng, &shape), rand_tensor(&mut rng, &shape), |a, b| a.add(b));
    check_binary("sub", rand_tensor(&mut rng, &shape), rand_tensor(&mut rng, &shape), |a, b| a.sub(b));
    check_binary("mul", rand_tensor(&mut rng, &shape), rand_tensor(&mut rng, &shape), |a, b| a.mul(b));
    check_binary("div", rand_tensor(&mut rng, &shape), positive_tensor(&mut rng, &shape), |a, b| a.div(b));
    check_unary("neg", rand_tensor(&mut rng, &shape), |a| Ok(a.neg()));
    check_unary("scale", rand_tensor(&mut rng, &shape), |a| Ok(a.scale(-2.5)));
    check_unary("add_scalar", rand_tensor(&mut rng, &shape), |a| Ok(a.add_scalar(1.5)));
    check_unary("tanh", rand_tensor(&mut rng, &shape), |a| Ok(a.tanh()));
    check_unary("relu", rand_tensor(&mut rng, &shape), |a| Ok(a.relu()));
    check_unary("exp", rand_tensor(&mut rng, &shape), |a| Ok(a.exp()));
    check_unary("ln", positive_tensor(&mut rng, &shape), |a| Ok(a.ln()));
    check_unary("sigmoid", rand_tensor(&mut rng, &shape), |a| Ok(a.sigmoid()));
    check_unary("softplus", rand_tensor(&mut rng, &shape), |a| Ok(a.softplus()));
    check_unary("sqrt", positive_tensor(&mut rng, &shape), |a| Ok(a.sqrt()));
    check_unary("square", rand_tensor(&mut rng, &shape), |a| Ok(a.square()));
}

#[test]
fn structural_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    check_binary("matmul", rand_tensor(&mut rng, &[4, 5]), rand_tensor(&mut rng, &[5, 3]), |a, b| a.matmul(b));
    check_unary("transpose", rand_tensor(&mut rng, &[2, 5]), |a| a.transpose());
    check_unary("reshape", rand_tensor(&mut rng, &[2, 6]), |a| a.reshape(vec![3, 4]));
    check_unary("sum", rand_tensor(&mut rng, &[3, 2]), |a| Ok(a.sum()));
    check_unary("mean", rand_tensor(&mut rng, &[3, 2]), |a| Ok(a.mean()));
    check_unary("sum_rows", rand_tensor(&mut rng, &[3, 4]), |a| a.sum_rows());
    check_unary("sum_cols", rand_tensor(&mut rng, &[3, 4]), |a| a.sum_cols());
    check_unary("broadcast_rows", rand_tensor(&mut rng, &[4]), |a| a.broadcast_rows(3));
    check_unary("broadcast_cols", rand_tensor(&mut rng, &[4]), |a| a.broadcast_cols(2));
    check_unary("broadcast_scalar", rand_tensor(&mut rng, &[1]), |a| a.broadcast_scalar(&[2, 3]));
    check_binary("add_row", rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4]), |a, b| a.add_row(b));
    check_binary("mul_row", rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4]), |a, b| a.mul_row(b));
    check_binary("concat_cols", rand_tensor(&mut rng, &[3, 2]), rand_tensor(&mut rng, &[3, 4]), |a, b| {
        Var::concat_cols(&[a, b, a])
    });
    check_binary("concat_rows", rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[4, 3]), |a, b| {
        Var::concat_rows(&[b, a])
    });
    check_unary("slice_cols", rand_tensor(&mut rng, &[3, 6]), |a| a.slice_cols(1, 4));
    check_unary("gather_rows", rand_tensor(&mut rng, &[4, 3]), |a| a.gather_rows(&[3, 0, 0, 2]));
    check_unary("scatter_rows", rand_tensor(&mut rng, &[4, 3]), |a| a.scatter_rows(&[1, 0, 1, 4], 5));
    check_unary("log_softmax", rand_tensor(&mut rng, &[3, 5]), |a| a.log_softmax());
    check_unary("softmax", rand_tensor(&mut rng, &[3, 5]), |a| a.softmax());
    check_unary("pick", rand_tensor(&mut rng, &[3, 5]), |a| a.pick(&[4, 0, 2]));
}

#[test]
fn kernel_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let err = grad_check(|_, p| weighted_sum(p[0].conv2d(p[1], p[2])?), &[x.clone(), w, b], EPS).unwrap();
    assert!(err < 1e-6, "conv2d {err}");

    check_unary("max_pool2", x.clone(), |a| a.max_pool2());

    let gamma = positive_tensor(&mut rng, &[2]);
    let beta = rand_tensor(&mut rng, &[2]);
    let err = grad_check(
        |_, p| weighted_sum(p[0].batch_norm(p[1], p[2], NormMode::Train, None)?.0),
        &[x.clone(), gamma.clone(), beta.clone()],
        EPS,
    )
    .unwrap();
    assert!(err < 1e-5, "batchnorm train {err}");

    let rm = [0.1, -0.2];
    let rv = [0.5, 1.5];
    let err = grad_check(
        |_, p| weighted_sum(p[0].batch_norm(p[1], p[2], NormMode::Eval, Some((&rm, &rv)))?.0),
        &[x, gamma, beta],
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "batchnorm eval {err}");
}

#[test]
fn cross_entropy_of_linear_layer_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let w = rand_tensor(&mut rng, &[3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let labels = [0usize, 2, 1, 2];
    let err = grad_check(
        |_, p| {
            let logits = p[0].matmul(p[1])?.add_row(p[2])?;
            Ok(logits.log_softmax()?.pick(&labels)?.mean().neg())
        },
        &[x, w, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xv = rand_tensor(&mut rng, &[3, 3]);
    let run = |which: u8| {
        let tape = Tape::<f64>::new();
        let x = tape.param(xv.clone());
        let l1 = x.tanh().sum();
        let l2 = x.square().mean();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => l1.add(l2).unwrap(),
        };
        tape.backward(loss).unwrap().get(x)
    };
    let (g1, g2, g12) = (run(0), run(1), run(2));
    for i in 0..9 {
        assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let tape = Tape::<f64>::new();
        let x = tape.param(rand_tensor(&mut rng, &[4, 6]));
        let w = tape.param(rand_tensor(&mut rng, &[6, 3]));
        let loss = x.matmul(w).unwrap().tanh().log_softmax().unwrap().pick(&[0, 1, 2, 0]).unwrap().sum();
        let g = tape.grad(loss, &[x, w]).unwrap();
        (loss.item().to_bits(), g.iter().flat_map(|t| t.to_vec()).map(f64::to_bits).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn jvp_of_linear_map_is_the_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let x = rand_tensor(&mut rng, &[3, 1]);
    let v = rand_tensor(&mut rng, &[3, 1]);
    let jv = jvp(|t, x| t.constant(a.clone()).matmul(x), &x, &v).unwrap();
    let av = a.matmul(&v).unwrap();
    for (p, q) in jv.data().iter().zip(av.data()) {
        assert!((p - q).abs() < 1e-15);
    }

    let id = jvp(|_, x| Ok(x), &x, &v).unwrap();
    assert_eq!(id, v);
}

#[test]
fn jvp_matches_central_differences_on_tanh_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let w1 = rand_tensor(&mut rng, &[3, 8]);
    let b1 = rand_tensor(&mut rng, &[8]);
    let w2 = rand_tensor(&mut rng, &[8, 3]);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let v = rand_tensor(&mut rng, &[2, 3]);
    let net = |t: &Tape<f64>, x: Tensor<f64>| -> Tensor<f64> {
        let x = t.constant(x);
        x.matmul(t.constant(w1.clone()))
            .unwrap()
            .add_row(t.constant(b1.clone()))
            .unwrap()
            .tanh()
            .matmul(t.constant(w2.clone()))
            .unwrap()
            .tanh()
            .value()
    };
    let jv = jvp(
        |t, x| {
            x.matmul(t.constant(w1.clone()))?
                .add_row(t.constant(b1.clone()))?
                .tanh()
                .matmul(t.constant(w2.clone()))
                .map(|y| y.tanh())
        },
        &x,
        &v,
    )
    .unwrap();
    let eps = 1e-5;
    let shift = |s: f64| x.zip_with(&v, "shift", |a, b| a + s * b).unwrap();
    let t = Tape::new();
    let up = net(&t, shift(eps));
    let down = net(&t, shift(-eps));
    for i in 0..jv.len() {
        let fd = (up.data()[i] - down.data()[i]) / (2.0 * eps);
        assert!((jv.data()[i] - fd).abs() < 1e-6, "coordinate {i}");
    }
}

#[test]
fn jvp_rejects_mismatched_tangent() {
    let x = Tensor::<f64>::zeros(vec![3]);
    let v = Tensor::<f64>::zeros(vec![2]);
    assert!(matches!(jvp(|_, x| Ok(x.tanh()), &x, &v), Err(Error::Dimension { .. })));
}

#[test]
fn jvp_result_is_differentiable() {
    // d/dw of the directional derivative of tanh(w x) along v.
    let tape = Tape::<f64>::new();
    let w = tape.param(Tensor::scalar(0.7));
    let x = tape.param(Tensor::scalar(0.4));
    let y = w.mul(x).unwrap().tanh();
    let v = tape.constant(Tensor::scalar(1.0));
    let dy = tape.jvp(y, x, v).unwrap();
    // dy = w (1 - tanh²(wx)); d/dw = (1 - t²) - 2 w x t (1 - t²)
    let t = (0.7f64 * 0.4).tanh();
    let expected = (1.0 - t * t) - 2.0 * 0.7 * 0.4 * t * (1.0 - t * t);
    let g = tape.grad(dy, &[w]).unwrap();
    assert!((g[0].item() - expected).abs() < 1e-14);
}

#[test]
fn second_order_through_graph_gradients() {
    // f(w) = w³; grad = 3w²; grad of grad = 6w.
    let tape = Tape::<f64>::new();
    let w = tape.param(Tensor::scalar(1.5));
    let f = w.mul(w).unwrap().mul(w).unwrap();
    let g = tape.grad_graph(f, &[w]).unwrap()[0];
    assert!((g.item() - 6.75).abs() < 1e-14);
    let gg = tape.grad(g, &[w]).unwrap();
    assert!((gg[0].item() - 9.0).abs() < 1e-14);
}

#[test]
fn second_order_through_kernel_adjoint_fails_loudly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::<f64>::new();
    let x = tape.param(rand_tensor(&mut rng, &[1, 1, 3, 3]));
    let w = tape.param(rand_tensor(&mut rng, &[1, 1, 3, 3]));
    let b = tape.param(Tensor::zeros(vec![1]));
    let y = x.conv2d(w, b).unwrap().square().sum();
    let gw = tape.grad_graph(y, &[w]).unwrap()[0];
    let err = tape.grad(gw.sum(), &[w]).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)), "{err}");
}

#[test]
fn grad_check_propagates_nan() {
    let err: f64 = grad_check(|_, p| Ok(p[0].ln().sum()), &[Tensor::vector(vec![-1.0])], 1e-5).unwrap();
    assert!(err.is_nan());
}

#[test]
fn f32_tape_runs() {
    let tape = Tape::<f32>::new();
    let x = tape.param(Tensor::scalar(2.0f32));
    let y = x.square().scale(0.5);
    assert_eq!(tape.backward(y).unwrap().get(x).item(), 2.0f32);
}
