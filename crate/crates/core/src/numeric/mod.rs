//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! Every op is recorded on a [`Graph`]; [`Graph::backward`] replays the tape
//! in reverse and returns per-slot [`Gradients`]. The free functions below
//! are value-in/value-out wrappers for callers that do not need gradients.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f32 = 1e-6;

fn unary(x: &Tensor, op: impl FnOnce(&mut Graph<'_>, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant_ref(x);
    let out = op(&mut g, v)?;
    Ok(g.value(out).clone())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant_ref(a), g.constant_ref(b));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vx, vg, vb) = (g.constant_ref(x), g.constant_ref(gain), g.constant_ref(bias));
    let out = g.layer_norm(vx, vg, vb, eps)?;
    Ok(g.value(out).clone())
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    unary(x, |g, v| g.softmax_rows(v))
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    unary(x, |g, v| g.gelu(v))
}

pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    unary(x, |g, v| g.l2_normalize_rows(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks the gradient of `sum(w ⊙ op(x))` for a fixed random weighting `w`.
    fn check_unary(x: Tensor, op: impl Fn(&mut Graph<'_>, Var) -> Result<Var>) -> f64 {
        finite_diff_check(
            |p| {
                let mut g = Graph::new();
                let v = g.param(&p[0], 0);
                let y = op(&mut g, v)?;
                let wv = g.constant(random(g.shape(y), 99));
                let prod = g.mul(y, wv)?;
                let loss = g.sum(prod)?;
                let value = f64::from(g.value(loss).item());
                Ok((value, g.backward(loss)?))
            },
            &[x],
            1e-3,
        )
        .unwrap()
        .max_rel_error
    }

    #[test]
    fn matmul_examples() {
        let id = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&id, &b).unwrap().data(), b.data());

        let a = Tensor::from_rows(&[&[1.0, 2.0]]);
        let c = Tensor::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_wrt_left() {
        // d/dA sum(A·B) = 1·Bᵀ = [[3, 4]]
        let a = Tensor::from_rows(&[&[1.0, 2.0]]);
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]);
        let mut g = Graph::new();
        let va = g.param(&a, 0);
        let vb = g.constant_ref(&b);
        let c = g.matmul(va, vb).unwrap();
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap(), &[3.0, 4.0]);

        let report = finite_diff_check(
            |p| {
                let mut g = Graph::new();
                let va = g.param(&p[0], 0);
                let vb = g.constant_ref(&b);
                let c = g.matmul(va, vb)?;
                let loss = g.sum(c)?;
                let v = f64::from(g.value(loss).item());
                Ok((v, g.backward(loss)?))
            },
            &[a],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let x = Tensor::from_rows(&[&[1.0, 1.0, 1.0]]);
        assert_eq!(layer_norm(&x, &one, &zero, LAYER_NORM_EPS).unwrap().data(), &[0.0; 3]);

        let x = Tensor::from_rows(&[&[1.0, -1.0]]);
        let y = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-12).unwrap();
        assert_abs_diff_eq!(y.data()[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(y.data()[1], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn layer_norm_rejects_mismatched_gain_and_bad_eps() {
        let x = Tensor::zeros(&[2, 3]);
        let err = layer_norm(&x, &Tensor::zeros(&[4]), &Tensor::zeros(&[3]), 1e-6);
        assert!(matches!(err, Err(Error::Shape { .. })));
        let err = layer_norm(&x, &Tensor::zeros(&[3]), &Tensor::zeros(&[3]), 0.0);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let x = random(&[3, 4], 1);
        let gain = random(&[4], 2);
        let bias = random(&[4], 3);
        let w = random(&[3, 4], 4);
        let report = finite_diff_check(
            |p| {
                let mut g = Graph::new();
                let (vx, vg, vb) = (g.param(&p[0], 0), g.param(&p[1], 1), g.param(&p[2], 2));
                let y = g.layer_norm(vx, vg, vb, LAYER_NORM_EPS)?;
                let wv = g.constant_ref(&w);
                let prod = g.mul(y, wv)?;
                let loss = g.sum(prod)?;
                let v = f64::from(g.value(loss).item());
                Ok((v, g.backward(loss)?))
            },
            &[x, gain, bias],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&Tensor::from_rows(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&Tensor::from_rows(&[&[1000.0, 1000.0]])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&Tensor::from_rows(&[&[0.0, 3.0f32.ln()]])).unwrap();
        assert_abs_diff_eq!(y.data()[0], 0.25, epsilon = 1e-6);
        assert_abs_diff_eq!(y.data()[1], 0.75, epsilon = 1e-6);
    }

    #[test]
    fn softmax_gradient() {
        assert!(check_unary(random(&[3, 5], 7), |g, v| g.softmax_rows(v)) < 1e-3);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(&Tensor::scalar(0.0)).unwrap().item(), 0.0);
        assert_abs_diff_eq!(gelu(&Tensor::scalar(10.0)).unwrap().item(), 10.0, epsilon = 1e-4);
        let x = Tensor::new(&[1], vec![0.5]).unwrap();
        assert!(check_unary(x, |g, v| g.gelu(v)) < 1e-3);
        assert!(check_unary(random(&[4, 4], 8), |g, v| g.gelu(v)) < 1e-3);
    }

    #[test]
    fn l2_normalize_examples() {
        let y = l2_normalize_rows(&Tensor::from_rows(&[&[3.0, 4.0]])).unwrap();
        assert_abs_diff_eq!(y.data()[0], 0.6, epsilon = 1e-7);
        assert_abs_diff_eq!(y.data()[1], 0.8, epsilon = 1e-7);
        let unit = Tensor::from_rows(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(l2_normalize_rows(&unit).unwrap().data(), unit.data());
    }

    #[test]
    fn l2_normalize_gradient() {
        let x = Tensor::from_rows(&[&[1.0, 2.0]]);
        let err = finite_diff_check(
            |p| {
                let mut g = Graph::new();
                let v = g.param(&p[0], 0);
                let y = g.l2_normalize_rows(v)?;
                let loss = g.sum(y)?;
                let value = f64::from(g.value(loss).item());
                Ok((value, g.backward(loss)?))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(err.max_rel_error < 1e-3);
        assert!(check_unary(random(&[3, 6], 9), |g, v| g.l2_normalize_rows(v)) < 1e-3);
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let x = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            l2_normalize_rows(&x),
            Err(Error::DegenerateEmbedding { row: 1, .. })
        ));
    }

    #[test]
    fn structural_op_gradients() {
        let x = random(&[4, 6], 11);
        assert!(check_unary(x.clone(), |g, v| g.transpose(v)) < 1e-3);
        assert!(check_unary(x.clone(), |g, v| g.gather_rows(v, &[3, 0, 3])) < 1e-3);
        assert!(check_unary(x.clone(), |g, v| g.slice_cols(v, 2, 3)) < 1e-3);
        assert!(check_unary(x.clone(), |g, v| {
            let a = g.slice_cols(v, 0, 2)?;
            let b = g.slice_cols(v, 2, 4)?;
            let c = g.concat_cols(&[b, a])?;
            let top = g.gather_rows(c, &[0])?;
            g.concat_rows(top, c)
        }) < 1e-3);
        assert!(check_unary(x, |g, v| {
            let t = g.transpose(v)?;
            let s = g.scale(t, 0.5)?;
            let p = g.matmul(v, s)?;
            g.reshape(p, &[16])
        }) < 1e-3);
    }

    #[test]
    fn add_row_gradient_reaches_bias() {
        let x = random(&[3, 4], 12);
        let b = random(&[4], 13);
        let report = finite_diff_check(
            |p| {
                let mut g = Graph::new();
                let (vx, vb) = (g.param(&p[0], 0), g.param(&p[1], 1));
                let y = g.add_row(vx, vb)?;
                let sq = g.mul(y, y)?;
                let loss = g.sum(sq)?;
                let v = f64::from(g.value(loss).item());
                Ok((v, g.backward(loss)?))
            },
            &[x, b],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3);
    }

    #[test]
    fn backward_examples_and_errors() {
        let x = random(&[2, 3], 5);
        let mut g = Graph::new();
        let v = g.param(&x, 0);
        let s = g.sum(v).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(0).unwrap(), &[1.0; 6]);
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));

        let x = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.param(&x, 0);
        let sq = g.mul(v, v).unwrap();
        let loss = g.sum(sq).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(0).unwrap(), &[2.0, -4.0]);

        let mut g = Graph::new();
        let v = g.param(&x, 0);
        assert!(matches!(g.backward(v), Err(Error::NotScalar(_))));
    }

    #[test]
    fn gradients_accumulate_until_reset() {
        let mut x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        for _ in 0..2 {
            let grads = {
                let mut g = Graph::new();
                let v = g.param(&x, 0);
                let loss = g.sum(v).unwrap();
                g.backward(loss).unwrap()
            };
            grads.accumulate_into(0, &mut x);
        }
        assert_eq!(x.grad.as_deref(), Some(&[2.0, 2.0][..]));
        x.zero_grad();
        assert!(x.grad.is_none());
    }

    #[test]
    fn matmul_counts_macs() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 5]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.mac_count(), 30);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9,
                                   vals in prop::collection::vec(-1e4f32..1e4, 40)) {
            let data: Vec<f32> = vals.iter().cycle().take(rows * cols).copied().collect();
            let y = softmax_rows(&Tensor::new(&[rows, cols], data).unwrap()).unwrap();
            prop_assert_eq!(y.shape(), &[rows, cols][..]);
            for r in 0..rows {
                let s: f64 = y.row(r).iter().map(|&v| f64::from(v)).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn l2_normalize_is_unit_and_idempotent(rows in 1usize..5, cols in 1usize..9,
                                               vals in prop::collection::vec(0.1f32..10.0, 40),
                                               signs in prop::collection::vec(any::<bool>(), 40)) {
            let data: Vec<f32> = vals.iter().zip(&signs)
                .map(|(v, s)| if *s { *v } else { -*v })
                .cycle().take(rows * cols).collect();
            let x = Tensor::new(&[rows, cols], data).unwrap();
            let y = l2_normalize_rows(&x).unwrap();
            let y2 = l2_normalize_rows(&y).unwrap();
            for r in 0..rows {
                let n: f64 = y.row(r).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-6);
            }
            for (a, b) in y.data().iter().zip(y2.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn matmul_shape_algebra(m in 1usize..6, k in 1usize..6, n in 1usize..6) {
            let c = matmul(&Tensor::zeros(&[m, k]), &Tensor::zeros(&[k, n])).unwrap();
            prop_assert_eq!(c.shape(), &[m, n][..]);
            let mut g = Graph::new();
            let a = g.constant(Tensor::zeros(&[m, k]));
            let t = g.transpose(a).unwrap();
            prop_assert_eq!(g.shape(t), &[k, m][..]);
            let s = g.slice_cols(a, 0, k).unwrap();
            let cat = g.concat_cols(&[a, s]).unwrap();
            prop_assert_eq!(g.shape(cat), &[m, 2 * k][..]);
        }

        #[test]
        fn ops_are_deterministic(seed in 0u64..1000) {
            let x = random(&[4, 8], seed);
            let a = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-6).unwrap();
            let b = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-6).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }
}
