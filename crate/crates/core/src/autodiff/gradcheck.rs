use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{array, Tape, Tensor};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |g_analytic - g_fd| / max(1, |g_fd|)`.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks the gradient of a scalar function built on a tape against central
/// differences `(f(x + εe_i) - f(x - εe_i)) / 2ε`.
///
/// `f` receives the point as a differentiable leaf on a fresh tape and must
/// return a single-element tensor. Each evaluation runs on its own tape.
pub fn finite_difference_check<F>(f: F, point: &ArrayD<f64>, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid("finite_difference_check", "epsilon must be positive"));
    }
    let tape = Tape::new();
    let x = tape.var(point.clone());
    let y = f(&x)?;
    let analytic: Vec<f64> = tape.grad(&y, &[&x], false)?.get(0).value().iter().copied().collect();

    let eval = |p: ArrayD<f64>| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.var(p);
        Ok(f(&x)?.item())
    };
    let base: Vec<f64> = point.iter().copied().collect();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += epsilon;
        minus[i] -= epsilon;
        let fp = eval(ArrayD::from_shape_vec(point.raw_dim(), plus).expect("same shape"))?;
        let fm = eval(ArrayD::from_shape_vec(point.raw_dim(), minus).expect("same shape"))?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                what: "finite-difference evaluation".into(),
                index: i,
            });
        }
        numeric.push((fp - fm) / (2.0 * epsilon));
    }
    if let Some(index) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "analytic gradient".into(),
            index,
        });
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .enumerate()
        .fold((0, 0.0_f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

/// A differentiable map exercising one primitive on a `(3, 4)` input.
pub type Primitive = fn(&Tensor) -> Result<Tensor>;

fn weights(tape: &Tape, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * ((i * 7) % 11) as f64 - 0.8).collect();
    tape.constant(array(shape, v))
}

/// `Σ W ⊙ p(x)²`: nonzero Hessian even for linear primitives.
pub fn scalarize(y: &Tensor) -> Result<Tensor> {
    let w = weights(y.tape(), y.shape());
    y.mul(y)?.mul(&w)?.sum()
}

/// One case per primitive (plus self-products), each taking a `(3, 4)`
/// input.
pub fn primitive_cases() -> Vec<(&'static str, Primitive)> {
    fn c(x: &Tensor, shape: &[usize]) -> Tensor {
        weights(x.tape(), shape)
    }
    vec![
        ("matmul", |x| x.matmul(&c(x, &[4, 2]))),
        ("matmul_ta", |x| x.matmul_t(&c(x, &[3, 2]), true, false)),
        ("matmul_tb", |x| c(x, &[2, 4]).matmul_t(x, false, true)),
        ("matmul_self", |x| x.matmul_t(x, false, true)),
        ("add", |x| x.add(&c(x, &[3, 4]))),
        ("sub", |x| c(x, &[3, 4]).sub(x)),
        ("mul", |x| x.mul(x)),
        ("scale", |x| x.scale(-1.7)),
        ("relu", |x| x.relu()),
        ("exp", |x| x.exp()),
        ("reciprocal", |x| x.reciprocal()),
        ("sqrt", |x| x.mul(x)?.sqrt()),
        ("sum", |x| x.sum()),
        ("sum_to", |x| x.sum_to(&[1, 4])),
        ("broadcast_to", |x| x.sum_to(&[4])?.broadcast_to(&[2, 4])),
        ("reshape", |x| x.reshape(&[2, 6])),
        ("max_last", |x| x.max_last()),
        ("gather", |x| x.gather(&[3, 0, 2])),
        ("select_rows", |x| x.select_rows(&[2, 0, 2])),
        ("scatter_rows", |x| x.scatter_rows(&[4, 1, 0], 5)),
        ("l2_norm_sq", |x| x.l2_norm_sq()),
        ("log_sum_exp", |x| x.log_sum_exp()),
        ("mul_rows", |x| x.mul_rows(&x.sum_to(&[3, 1])?.reshape(&[3])?)),
    ]
}

/// A `(3, 4)` point with entries bounded away from zero and from each other,
/// so relu, max and reciprocal are smooth around it.
pub fn probe_point<R: Rng>(rng: &mut R) -> ArrayD<f64> {
    let v: Vec<f64> = (0..12)
        .map(|i| {
            let mag = 0.5 + 0.1 * i as f64 + rng.random_range(0.0..0.05);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    array(&[3, 4], v)
}

/// Worst relative error of one primitive at one derivative order.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PrimitiveCheck {
    pub name: String,
    pub order: u8,
    pub max_rel_error: f64,
}

/// First- and second-order finite-difference checks of every primitive at
/// `points` random points each. The second-order check differentiates
/// `⟨∇(scalarize ∘ p), v⟩` through a recorded backward pass.
pub fn check_primitives(seed: u64, points: usize, epsilon: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, prim) in primitive_cases() {
        let (mut first, mut second) = (0.0f64, 0.0f64);
        for _ in 0..points {
            let p = probe_point(&mut rng);
            first = first.max(finite_difference_check(|x| scalarize(&prim(x)?), &p, epsilon)?.max_rel_error);
            let hvp = |x: &Tensor| {
                let y = scalarize(&prim(x)?)?;
                let g = x.tape().grad(&y, &[x], true)?;
                let v = weights(x.tape(), x.shape()).scale(0.5)?;
                g.get(0).mul(&v)?.sum()
            };
            second = second.max(finite_difference_check(hvp, &p, epsilon)?.max_rel_error);
        }
        out.push(PrimitiveCheck {
            name: name.into(),
            order: 1,
            max_rel_error: first,
        });
        out.push(PrimitiveCheck {
            name: name.into(),
            order: 2,
            max_rel_error: second,
        });
    }
    Ok(out)
}
