//! Every differentiable op against central finite differences (h = 1e-5) at
//! ten random points each.

use dmmia_core::numerics::{gradcheck, Graph, Result, Rng, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: u64 = 10;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape.to_vec(), 1.0).unwrap()
}

/// Values bounded away from zero so ReLU/L2 kinks are never straddled by ±h.
fn random_away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.normal();
        v.signum() * (v.abs() + 0.05)
    })
    .unwrap()
}

/// Reduces a non-scalar output to a scalar with fixed random weights so the
/// whole Jacobian is exercised.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = Rng::new(seed).normal_tensor(shape, 1.0)?;
    let w = g.constant(w)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn assert_op<F>(name: &str, make_inputs: impl Fn(&mut Rng) -> Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Copy,
{
    for point in 0..POINTS {
        let mut rng = Rng::derive(0xC0FFEE, point);
        let inputs = make_inputs(&mut rng);
        let report = gradcheck::check(&inputs, H, |g, v| {
            let out = build(g, v)?;
            weighted_sum(g, out, 77 + point)
        })
        .unwrap();
        assert!(
            report.max_relative_error <= TOL,
            "{name} point {point}: relative error {}",
            report.max_relative_error
        );
    }
}

#[test]
fn matmul() {
    assert_op("matmul", |r| vec![random(r, &[3, 4]), random(r, &[4, 2])], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn transpose() {
    assert_op("transpose", |r| vec![random(r, &[3, 4])], |g, v| g.transpose(v[0]));
}

#[test]
fn elementwise_binary() {
    assert_op("add", |r| vec![random(r, &[2, 3]), random(r, &[2, 3])], |g, v| g.add(v[0], v[1]));
    assert_op("sub", |r| vec![random(r, &[2, 3]), random(r, &[2, 3])], |g, v| g.sub(v[0], v[1]));
    assert_op("mul", |r| vec![random(r, &[2, 3]), random(r, &[2, 3])], |g, v| g.mul(v[0], v[1]));
    assert_op("mul_self", |r| vec![random(r, &[2, 3])], |g, v| g.mul(v[0], v[0]));
    assert_op("scale", |r| vec![random(r, &[2, 3])], |g, v| g.scale(v[0], -1.7));
}

#[test]
fn affine() {
    assert_op(
        "affine",
        |r| vec![random(r, &[4, 3]), random(r, &[3, 5]), random(r, &[1, 5])],
        |g, v| g.affine(v[0], v[1], v[2]),
    );
}

#[test]
fn activations() {
    assert_op("relu", |r| vec![random_away_from_zero(r, &[3, 4])], |g, v| g.relu(v[0]));
    assert_op("tanh", |r| vec![random(r, &[3, 4])], |g, v| g.tanh(v[0]));
    assert_op("sigmoid", |r| vec![random(r, &[3, 4])], |g, v| g.sigmoid(v[0]));
    assert_op("softplus", |r| vec![random(r, &[3, 4])], |g, v| g.softplus(v[0]));
}

#[test]
fn softmax_family() {
    assert_op("logsumexp", |r| vec![random(r, &[3, 5])], |g, v| g.logsumexp_rows(v[0]));
    assert_op("softmax", |r| vec![random(r, &[3, 5])], |g, v| g.softmax_rows(v[0]));
    assert_op("log_softmax", |r| vec![random(r, &[3, 5])], |g, v| g.log_softmax_rows(v[0]));
}

#[test]
fn indexing() {
    assert_op("gather", |r| vec![random(r, &[3, 5])], |g, v| g.gather_rows(v[0], &[4, 0, 2]));
    assert_op("slice_cols", |r| vec![random(r, &[3, 5])], |g, v| g.slice_cols(v[0], 1, 4));
    assert_op("select", |r| vec![random(r, &[3, 5])], |g, v| g.select(v[0], 7));
}

#[test]
fn reductions_and_norms() {
    assert_op("sum", |r| vec![random(r, &[3, 5])], |g, v| g.sum(v[0]));
    assert_op("mean", |r| vec![random(r, &[3, 5])], |g, v| g.mean(v[0]));
    assert_op("l2_norm", |r| vec![random_away_from_zero(r, &[3, 5])], |g, v| g.l2_norm_rows(v[0]));
    assert_op("normalize", |r| vec![random_away_from_zero(r, &[3, 5])], |g, v| g.normalize_rows(v[0]));
}

#[test]
fn composed_cross_entropy() {
    assert_op(
        "cross_entropy",
        |r| vec![random(r, &[4, 6]), random(r, &[6, 3]), random(r, &[1, 3])],
        |g, v| {
            let logits = g.affine(v[0], v[1], v[2])?;
            let h = g.tanh(logits)?;
            let lp = g.log_softmax_rows(h)?;
            let picked = g.gather_rows(lp, &[0, 2, 1, 2])?;
            let m = g.mean(picked)?;
            g.scale(m, -1.0)
        },
    );
}

#[test]
fn softmax_rows_sum_to_one_and_are_positive() {
    let mut rng = Rng::new(5);
    for _ in 0..20 {
        let x = rng.normal_tensor::<f64>(vec![4, 7], 30.0).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let s = g.softmax_rows(v).unwrap();
        for row in g.value(s).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
