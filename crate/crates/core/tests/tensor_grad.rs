//! Analytic gradients of every tape op against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sevloss::tensor::{Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const TRIALS: usize = 50;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Reduces any output to a scalar through a fixed random projection so that
/// every output element contributes a distinct coefficient.
fn project(tape: &mut Tape, y: Var, coef: &Tensor) -> Var {
    let c = tape.constant(coef.clone());
    let prod = tape.mul(y, c).unwrap();
    tape.sum(prod).unwrap()
}

/// Builds `f(inputs)` and compares d(c·f)/d(inputs) with finite differences.
fn check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..TRIALS {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let eval = |xs: &[Tensor]| -> (f64, Vec<Option<Tensor>>, Vec<usize>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
            let y = f(&mut tape, &vars);
            let shape = tape.shape(y).to_vec();
            let coef = {
                let mut r = ChaCha8Rng::seed_from_u64(trial as u64);
                rand_tensor(&mut r, &shape)
            };
            let loss = project(&mut tape, y, &coef);
            let v = tape.value(loss).data()[0];
            tape.backward(loss).unwrap();
            (v, vars.iter().map(|&x| tape.grad(x).cloned()).collect(), shape)
        };
        let (_, grads, _) = eval(&inputs);
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads[k].clone().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()).unwrap());
            for j in 0..x.numel() {
                let mut up = inputs.clone();
                up[k].data_mut()[j] += H;
                let mut down = inputs.clone();
                down[k].data_mut()[j] -= H;
                let numeric = (eval(&up).0 - eval(&down).0) / (2.0 * H);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    err < TOL,
                    "{name} trial {trial} input {k} elem {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }
}

#[test]
fn matmul() {
    check("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn add_same_shape_and_broadcast() {
    check("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]).unwrap());
    check("add_row", &[&[3, 4], &[4]], |t, v| t.add(v[0], v[1]).unwrap());
    check("add_scalar", &[&[3, 4], &[1]], |t, v| t.add(v[0], v[1]).unwrap());
}

#[test]
fn mul_same_shape_and_broadcast() {
    check("mul", &[&[2, 5], &[2, 5]], |t, v| t.mul(v[0], v[1]).unwrap());
    check("mul_row", &[&[2, 5], &[5]], |t, v| t.mul(v[0], v[1]).unwrap());
}

#[test]
fn scale_sum_mean() {
    check("scale", &[&[2, 3]], |t, v| t.scale(v[0], -1.7).unwrap());
    check("sum", &[&[2, 3]], |t, v| t.sum(v[0]).unwrap());
    check("mean", &[&[2, 3]], |t, v| t.mean(v[0]).unwrap());
}

#[test]
fn relu_away_from_kink() {
    // Inputs within H of zero make the finite difference straddle the kink.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..TRIALS {
        let x = rand_tensor(&mut rng, &[8]);
        if x.data().iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let y = tape.relu(v).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        for (g, xi) in tape.grad(v).unwrap().data().iter().zip(x.data()) {
            assert_eq!(*g, if *xi > 0.0 { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn gather_rows() {
    check("gather", &[&[5, 3]], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
}

#[test]
fn layer_norm() {
    check("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| {
        t.layer_norm(v[0], v[1], v[2]).unwrap()
    });
}

#[test]
fn log_softmax_and_softmax() {
    check("log_softmax", &[&[3, 5]], |t, v| t.log_softmax(v[0]).unwrap());
    check("softmax", &[&[3, 5]], |t, v| t.softmax(v[0]).unwrap());
}

#[test]
fn transpose_slice_concat() {
    check("transpose", &[&[3, 4]], |t, v| t.transpose(v[0]).unwrap());
    check("slice", &[&[3, 6]], |t, v| t.slice_cols(v[0], 2, 3).unwrap());
    check("concat", &[&[3, 2], &[3, 4]], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap());
}

#[test]
fn causal_mask_then_softmax() {
    check("masked_softmax", &[&[4, 4]], |t, v| {
        let m = t.causal_mask(v[0]).unwrap();
        t.softmax(m).unwrap()
    });
}

#[test]
fn pick() {
    check("pick", &[&[3, 4]], |t, v| t.pick(v[0], &[(0, 3), (2, 1), (0, 3)]).unwrap());
}

#[test]
fn composed_chain_rule() {
    check("chain", &[&[2, 3], &[3, 3], &[3]], |t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add(h, v[2]).unwrap();
        let n = t.layer_norm(h, v[2], v[2]).unwrap();
        t.log_softmax(n).unwrap()
    });
}

#[test]
fn log_softmax_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let x = rand_tensor(&mut rng, &[4, 7]);
        let c: f64 = rng.random_range(-50.0..50.0);
        let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect()).unwrap();
        let a = sevloss::tensor::log_softmax_rows(x.data(), 7);
        let b = sevloss::tensor::log_softmax_rows(shifted.data(), 7);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12, "{p} vs {q}");
        }
    }
}

#[test]
fn scalar_chain_rule_exact() {
    // y = 3 * (x * x): dy/dx = 6x exactly.
    for x in [-1.5, 0.25, 2.0] {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::scalar(x));
        let sq = tape.mul(v, v).unwrap();
        let y = tape.scale(sq, 3.0).unwrap();
        tape.backward(y).unwrap();
        assert!((tape.grad(v).unwrap().data()[0] - 6.0 * x).abs() < 1e-12);
    }
}
