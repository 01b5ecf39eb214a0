//! Tape-based reverse-mode differentiation with differentiable backward
//! passes.
//!
//! Values are `f64` arrays recorded on a [`Tape`]. [`Tape::grad`] walks the
//! tape backwards; with `create_graph` the backward pass is itself recorded
//! from the same primitive set, which is what allows differentiating a
//! quantity (such as an attack perturbation) that is defined through
//! gradients of the network.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{check_primitives, finite_difference_check, primitive_cases, probe_point, scalarize, GradCheckReport, Primitive, PrimitiveCheck};
pub use tape::{GradientMap, Op, Tape, Tensor};

pub(crate) use kernels::argmax;

use ndarray::{ArrayD, IxDyn};

/// Builds an `f64` array of the given shape from row-major values.
pub fn array(shape: &[usize], values: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), values).expect("shape must match value count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vals(t: &Tensor) -> Vec<f64> {
        t.value().iter().copied().collect()
    }

    #[test]
    fn matmul_by_hand() {
        let tape = Tape::new();
        let a = tape.constant(array(&[2, 2], vec![1., 2., 3., 4.]));
        let b = tape.constant(array(&[2, 1], vec![1., 1.]));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(vals(&c), vec![3., 7.]);
    }

    #[test]
    fn relu_zeroes_non_positive() {
        let tape = Tape::new();
        let x = tape.constant(array(&[3], vec![-1., 0., 2.]));
        assert_eq!(vals(&x.relu().unwrap()), vec![0., 0., 2.]);
    }

    #[test]
    fn l2_norm_sq_and_gradient() {
        let tape = Tape::new();
        let v = tape.var(array(&[2], vec![3., 4.]));
        let n = v.l2_norm_sq().unwrap();
        assert_eq!(n.item(), 25.0);
        let g = tape.grad(&n, &[&v], false).unwrap();
        assert_eq!(vals(g.get(0)), vec![6., 8.]);
    }

    #[test]
    fn linear_form_gradient() {
        let tape = Tape::new();
        let w = tape.var(array(&[1, 2], vec![2., 3.]));
        let x = tape.constant(array(&[2, 1], vec![5., 7.]));
        let y = w.matmul(&x).unwrap().sum().unwrap();
        assert_eq!(y.item(), 31.0);
        let g = tape.grad(&y, &[&w], false).unwrap();
        assert_eq!(vals(g.get(0)), vec![5., 7.]);
    }

    #[test]
    fn hessian_of_squared_norm() {
        let tape = Tape::new();
        let w = tape.var(array(&[2], vec![3., 4.]));
        let y = w.l2_norm_sq().unwrap();
        let g = tape.grad(&y, &[&w], true).unwrap();
        assert!(g.created_as_graph());
        assert_eq!(vals(g.get(0)), vec![6., 8.]);
        let e0 = tape.constant(array(&[2], vec![1., 0.]));
        let proj = g.get(0).mul(&e0).unwrap().sum().unwrap();
        let h = tape.grad(&proj, &[&w], false).unwrap();
        assert_eq!(vals(h.get(0)), vec![2., 0.]);
    }

    #[test]
    fn relu_subgradient_convention() {
        let tape = Tape::new();
        let w = tape.var(array(&[3], vec![-1., 2., 0.]));
        let y = w.relu().unwrap().sum().unwrap();
        let g = tape.grad(&y, &[&w], false).unwrap();
        assert_eq!(vals(g.get(0)), vec![0., 1., 0.]);
    }

    #[test]
    fn unreachable_gets_zero_gradient() {
        let tape = Tape::new();
        let a = tape.var(array(&[2], vec![1., 2.]));
        let b = tape.var(array(&[2, 2], vec![1., 2., 3., 4.]));
        let y = a.l2_norm_sq().unwrap();
        let g = tape.grad(&y, &[&a, &b], false).unwrap();
        assert_eq!(g.get(1).shape(), &[2, 2]);
        assert!(g.get(1).value().iter().all(|&v| v == 0.0));
        let late = tape.var(array(&[1], vec![5.]));
        let g = tape.grad(&y, &[&late], true).unwrap();
        assert_eq!(vals(g.get(0)), vec![0.]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let tape = Tape::new();
        let a = tape.var(array(&[2], vec![1., 2.]));
        let y = a.exp().unwrap();
        assert!(matches!(tape.grad(&y, &[&a], false), Err(Error::NonScalarOutput { .. })));
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let tape = Tape::new();
        let a = tape.var(array(&[2, 3], vec![0.; 6]));
        let b = tape.var(array(&[2, 3], vec![0.; 6]));
        match a.matmul(&b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let c = tape.var(array(&[3], vec![0.; 3]));
        assert!(matches!(a.add(&c), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn reciprocal_and_sqrt_domain() {
        let tape = Tape::new();
        let z = tape.var(array(&[2], vec![1., 0.]));
        assert!(matches!(z.reciprocal(), Err(Error::Domain { index: 1, .. })));
        let n = tape.var(array(&[2], vec![-1., 4.]));
        assert!(matches!(n.sqrt(), Err(Error::Domain { index: 0, .. })));
    }

    #[test]
    fn foreign_and_stale_tensors_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.var(array(&[1], vec![1.]));
        let b = t2.var(array(&[1], vec![1.]));
        assert!(matches!(a.add(&b), Err(Error::ForeignTensor)));

        let y = a.exp().unwrap().sum().unwrap();
        let before = t1.len();
        let g = t1.grad(&y, &[&a], false).unwrap();
        // backward nodes are discarded; only the constant result remains
        assert_eq!(t1.len(), before + 1);
        assert!(!g.created_as_graph());
        assert!(!g.get(0).requires_grad());
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let tape = Tape::new();
        let x = tape.var(array(&[2], vec![1000., 0.]));
        let v = x.log_sum_exp().unwrap().item();
        assert!((v - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn detach_blocks_gradient_and_is_idempotent() {
        let tape = Tape::new();
        let w = tape.var(array(&[2], vec![1., 2.]));
        let h = w.scale(3.0).unwrap();
        let d = h.detach();
        assert_eq!(vals(&d), vec![3., 6.]);
        let dd = d.detach();
        assert_eq!(vals(&dd), vals(&d));
        let y = d.l2_norm_sq().unwrap();
        let g = tape.grad(&y, &[&w], false).unwrap();
        assert_eq!(vals(g.get(0)), vec![0., 0.]);
    }

    #[test]
    fn select_and_scatter_rows() {
        let tape = Tape::new();
        let x = tape.var(array(&[3, 2], vec![1., 2., 3., 4., 5., 6.]));
        let s = x.select_rows(&[2, 0]).unwrap();
        assert_eq!(vals(&s), vec![5., 6., 1., 2.]);
        let back = s.scatter_rows(&[2, 0], 3).unwrap();
        assert_eq!(vals(&back), vec![1., 2., 0., 0., 5., 6.]);
    }

    #[test]
    fn replay_reproduces_tape() {
        let tape = Tape::new();
        let x = tape.var(array(&[2, 3], vec![0.3, -1.2, 2.0, 0.1, 0.7, -0.4]));
        let w = tape.var(array(&[3, 2], vec![1., -2., 0.5, 0.25, -1., 3.]));
        let h = x.matmul(&w).unwrap().relu().unwrap();
        let y = h.log_sum_exp().unwrap().sum().unwrap();
        let g = tape.grad(&y, &[&w], true).unwrap();
        let z = g.get(0).l2_norm_sq().unwrap().sum().unwrap();
        tape.grad(&z, &[&x, &w], true).unwrap();
        assert_eq!(tape.replay_mismatch(), None);
    }

    #[test]
    fn primitives_match_finite_differences() {
        let checks = check_primitives(11, 10, 1e-5).unwrap();
        assert_eq!(checks.len(), 2 * primitive_cases().len());
        for c in checks {
            assert!(c.max_rel_error < 1e-6, "{} order {}: {}", c.name, c.order, c.max_rel_error);
        }
    }

    #[test]
    fn create_graph_does_not_change_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (name, prim) in primitive_cases() {
            let p = probe_point(&mut rng);
            let tape = Tape::new();
            let x = tape.var(p);
            let y = scalarize(&prim(&x).unwrap()).unwrap();
            let a = tape.grad(&y, &[&x], true).unwrap();
            let b = tape.grad(&y, &[&x], false).unwrap();
            let bits = |t: &Tensor| t.value().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.get(0)), bits(b.get(0)), "{name}");
        }
    }

    #[test]
    fn quadratic_gradcheck_is_tight() {
        let report = finite_difference_check(|w| w.l2_norm_sq(), &array(&[2], vec![3., 4.]), 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn gradcheck_reports_nan_coordinate() {
        let err = finite_difference_check(|w| w.sum()?.scale(f64::NAN), &array(&[2], vec![1., 2.]), 1e-5);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }
}
