use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck::check_fn;
use crate::tensor::Matrix;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn assert_grad_ok(name: &str, inputs: &[Matrix<f64>], f: impl FnMut(&mut Graph<f64>, &[Var]) -> crate::Result<Var>) {
    let res = check_fn(inputs, f).unwrap();
    assert!(
        res.max_rel_err <= 1e-6,
        "{name}: rel err {} at {}",
        res.max_rel_err,
        res.worst
    );
}

#[test]
fn softmax_of_equal_row_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Matrix::from_vec(1, 2, vec![0.0, 0.0]));
    let s = g.softmax_rows(x);
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn logsumexp_identity() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Matrix::from_vec(1, 2, vec![2f64.ln(), 6f64.ln()]));
    let l = g.logsumexp_rows(x);
    assert!((g.value(l).scalar_value() - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn matmul_shape_contract() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Matrix::zeros(2, 3));
    let b = g.constant(Matrix::zeros(3, 4));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), (2, 4));
    let bad = g.constant(Matrix::zeros(2, 4));
    match g.matmul(a, bad) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!((lhs, rhs), ((2, 3), (2, 4)));
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn sum_gives_all_ones_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Matrix::from_fn(3, 2, |r, c| (r * c) as f64));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert_eq!(g.grad(s).unwrap().scalar_value(), 1.0);
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut g = Graph::<f64>::new();
    let w = g.leaf(Matrix::scalar(0.0));
    let s = g.sigmoid(w);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().scalar_value(), 0.25);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Matrix::zeros(2, 2));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { rows: 2, cols: 2 })));
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Matrix::from_vec(2, 3, vec![0.3, -1.0, 2.0, 1.0, 1.0, 1.0]));
    let mask: Rc<[bool]> = vec![true, false, false, true, true, true].into();
    let m = g.masked_fill(x, mask, f64::NEG_INFINITY).unwrap();
    let s = g.softmax_rows(m);
    let v = g.value(s).clone();
    assert_eq!(v.get(0, 0), 0.0);
    assert!((v.get(0, 1) + v.get(0, 2) - 1.0).abs() < 1e-12);
    assert_eq!(v.row(1), &[0.0, 0.0, 0.0]);
    let w = g.constant(Matrix::from_fn(2, 3, |r, c| (r + 2 * c) as f64));
    let p = g.mul(s, w).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    let d = g.grad(x).unwrap();
    assert!(d.is_finite());
    assert_eq!(d.get(0, 0), 0.0);
    assert_eq!(d.row(1), &[0.0, 0.0, 0.0]);
}

#[test]
fn fully_masked_log_softmax_stays_finite_in_backward() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Matrix::from_vec(2, 2, vec![0.5, 0.1, 0.0, 0.0]));
    let mask: Rc<[bool]> = vec![true, false, true, true].into();
    let m = g.masked_fill(x, mask, f64::NEG_INFINITY).unwrap();
    let ls = g.log_softmax_rows(m);
    assert_eq!(g.value(ls).row(1), &[f64::NEG_INFINITY; 2]);
    let pick = g.gather(ls, &[(0, 1)]).unwrap();
    let l = g.sum(pick);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().is_finite());
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_mat(&mut rng, 3, 4);
    let b = rand_mat(&mut rng, 4, 2);
    let c = rand_mat(&mut rng, 3, 4);
    let row = rand_mat(&mut rng, 1, 4);
    let pos = a.map(|x| x.abs() + 0.5);
    let w = rand_mat(&mut rng, 3, 4);

    // Weighted sums keep the upstream gradient non-uniform.
    let weighted = |g: &mut Graph<f64>, v: Var| -> crate::Result<Var> {
        let (r, cc) = g.shape(v);
        let wv = g.constant(Matrix::from_fn(r, cc, |i, j| 0.3 + (i * 7 + j * 3) as f64 * 0.11));
        let p = g.mul(v, wv)?;
        Ok(g.sum(p))
    };

    assert_grad_ok("matmul", &[a.clone(), b.clone()], |g, x| {
        let y = g.matmul(x[0], x[1])?;
        weighted(g, y)
    });
    assert_grad_ok("matmul_nt", &[a.clone(), c.clone()], |g, x| {
        let y = g.matmul_nt(x[0], x[1])?;
        weighted(g, y)
    });
    assert_grad_ok("transpose", std::slice::from_ref(&a), |g, x| {
        let y = g.transpose(x[0]);
        weighted(g, y)
    });
    assert_grad_ok("add/sub/mul/div", &[a.clone(), pos.clone(), c.clone()], |g, x| {
        let s = g.add(x[0], x[2])?;
        let d = g.sub(s, x[1])?;
        let m = g.mul(d, x[2])?;
        let q = g.div(m, x[1])?;
        weighted(g, q)
    });
    assert_grad_ok("add_row/scale/neg", &[a.clone(), row.clone()], |g, x| {
        let y = g.add_row(x[0], x[1])?;
        let y = g.scale(y, -1.7);
        let y = g.neg(y);
        weighted(g, y)
    });
    assert_grad_ok("exp/ln", &[a.clone(), pos.clone()], |g, x| {
        let e = g.exp(x[0]);
        let l = g.ln(x[1]);
        let y = g.add(e, l)?;
        weighted(g, y)
    });
    assert_grad_ok("sigmoid/log_sigmoid/relu", std::slice::from_ref(&a), |g, x| {
        let s = g.sigmoid(x[0]);
        let ls = g.log_sigmoid(x[0]);
        let r = g.relu(x[0]);
        let y = g.add(s, ls)?;
        let y = g.add(y, r)?;
        weighted(g, y)
    });
    assert_grad_ok("softmax/log_softmax", std::slice::from_ref(&a), |g, x| {
        let s = g.softmax_rows(x[0]);
        let ls = g.log_softmax_rows(x[0]);
        let y = g.add(s, ls)?;
        weighted(g, y)
    });
    assert_grad_ok("masked softmax", std::slice::from_ref(&a), |g, x| {
        let mask: Rc<[bool]> = (0..12).map(|i| i % 5 == 1).collect::<Vec<_>>().into();
        let m = g.masked_fill(x[0], mask, f64::NEG_INFINITY)?;
        let s = g.softmax_rows(m);
        weighted(g, s)
    });
    assert_grad_ok("logsumexp", std::slice::from_ref(&a), |g, x| {
        let l = g.logsumexp_rows(x[0]);
        weighted(g, l)
    });
    assert_grad_ok("layer_norm", &[a.clone(), row.clone(), row.map(|v| v * 0.5)], |g, x| {
        let y = g.layer_norm(x[0], x[1], x[2])?;
        weighted(g, y)
    });
    assert_grad_ok(
        "concat/slice/select/gather",
        &[a.clone(), c.clone(), w.clone()],
        |g, x| {
            let cc = g.concat_cols(&[x[0], x[1]])?;
            let cr = g.concat_rows(&[cc, cc])?;
            let s = g.slice_rows(cr, 2, 3)?;
            let sel = g.select_rows(s, &[2, 0, 2])?;
            let ga = g.gather(x[2], &[(0, 1), (2, 3), (0, 1)])?;
            let t1 = weighted(g, sel)?;
            let t2 = weighted(g, ga)?;
            let y = g.add(t1, t2)?;
            Ok(y)
        },
    );
    assert_grad_ok("mean", std::slice::from_ref(&a), |g, x| {
        let e = g.exp(x[0]);
        Ok(g.mean(e))
    });
}

#[test]
fn composed_expression_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_mat(&mut rng, 4, 6);
    let w1 = rand_mat(&mut rng, 6, 5);
    let w2 = rand_mat(&mut rng, 5, 3);
    let gamma = rand_mat(&mut rng, 1, 5);
    let beta = rand_mat(&mut rng, 1, 5);
    assert_grad_ok("mlp", &[x, w1, w2, gamma, beta], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.layer_norm(h, v[3], v[4])?;
        let h = g.sigmoid(h);
        let att = g.matmul_nt(h, h)?;
        let att = g.softmax_rows(att);
        let h = g.matmul(att, h)?;
        let o = g.matmul(h, v[2])?;
        let o = g.log_softmax_rows(o);
        let pick = g.gather(o, &[(0, 0), (1, 2), (3, 1)])?;
        let s = g.sum(pick);
        Ok(g.neg(s))
    });
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Matrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0)));
        let y = g.matmul(x, x).unwrap();
        let y = g.softmax_rows(y);
        let l = g.sum(y);
        let l2 = g.exp(l);
        g.backward(l2).unwrap();
        g.grad(x)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
