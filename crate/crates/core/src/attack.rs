//! Iterative ℓ₂ DeepFool.
//!
//! Each step linearizes the logit gap `g = f_target - f_origin` at the
//! current point and moves to the zero of that linearization,
//! `r = -g / ‖∇g‖² · ∇g`. The perturbation is the running sum of the steps.
//!
//! Two routes share the same step rule:
//!
//! * [`deepfool_batch`] runs on plain arrays using the network's input
//!   Jacobian and decides, per step, the class pair and whether to stop.
//! * [`deepfool_graph`] replays a recorded trajectory on a [`Tape`] so the
//!   perturbation is a graph node that can be differentiated with respect
//!   to the network parameters. Class decisions are piecewise constant in
//!   the parameters and enter only as constants.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tensor};
use crate::error::{Error, Result};
use crate::model::{BoundNetwork, MlpNetwork};

/// Gradient-gap norms below this are treated as a flat logit gap.
pub const DEGENERATE_GRADIENT_NORM: f64 = 1e-12;

/// A logit gap this small relative to the logit scale counts as lying on the
/// decision boundary. A linearization step on a piecewise-linear network
/// lands on the boundary only up to rounding.
pub const BOUNDARY_TOLERANCE: f64 = 1e-9;

/// Default linearization budget `u`.
pub const DEFAULT_MAX_ITERATIONS: usize = 6;

/// Which boundary the attack walks towards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    /// From a correctly classified point to the closest other class.
    Nearest,
    /// From a misclassified point towards its ground-truth class.
    ToGroundTruth,
}

/// How gradients flow through the attack when it is recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientFlow {
    /// Differentiate through `∇g` as well (second-order terms).
    HighOrder,
    /// Treat every `∇g` as a constant; only `g` carries gradient.
    MaskedGradient,
}

/// Output of a detached DeepFool run on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationResult {
    /// `Δx`, the left-to-right sum of `steps`.
    pub delta: Array1<f64>,
    pub steps: Vec<Array1<f64>>,
    /// `(origin, target)` logits whose gap was linearized at each step.
    pub trajectory: Vec<(usize, usize)>,
    /// Whether the stop condition fired within the iteration budget.
    pub fooled: bool,
    pub norm: f64,
}

impl PerturbationResult {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.trajectory.iter().map(|&(_, t)| t).collect()
    }
}

/// Picks the class whose linearized boundary is closest:
/// `argmin_k |gap_k| / norm_k` over `k != current`, ties to the lower index.
///
/// `gaps[k] = f_k - f_current` and `grad_gap_norms[k] = ‖∇f_k - ∇f_current‖`.
/// Classes with degenerate gradient gaps are skipped.
pub fn select_target_class(gaps: &[f64], grad_gap_norms: &[f64], current: usize) -> Result<usize> {
    if gaps.len() < 2 || gaps.len() != grad_gap_norms.len() || current >= gaps.len() {
        return Err(Error::invalid(
            "select_target_class",
            format!("{} gaps, {} norms, current {current}", gaps.len(), grad_gap_norms.len()),
        ));
    }
    let mut best: Option<(usize, f64)> = None;
    for k in (0..gaps.len()).filter(|&k| k != current) {
        if grad_gap_norms[k] < DEGENERATE_GRADIENT_NORM {
            continue;
        }
        let ratio = gaps[k].abs() / grad_gap_norms[k];
        if best.is_none_or(|(_, r)| ratio < r) {
            best = Some((k, ratio));
        }
    }
    match best {
        Some((k, _)) => Ok(k),
        None => Err(Error::DegenerateGradient {
            step: 0,
            norm: grad_gap_norms
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != current)
                .map(|(_, &n)| n)
                .fold(0.0, f64::max),
        }),
    }
}

/// One linearization step on `f_target - f_origin` from `x`.
pub fn deepfool_step(net: &MlpNetwork, x: ArrayView1<f64>, origin: usize, target: usize) -> Result<Array1<f64>> {
    let k = net.num_classes();
    if origin == target || origin >= k || target >= k {
        return Err(Error::invalid("deepfool_step", format!("origin {origin}, target {target}, {k} classes")));
    }
    let (logits, jac) = net.logits_and_input_jacobian(x.insert_axis(Axis(0)))?;
    let gap = logits[[0, target]] - logits[[0, origin]];
    let grad = &jac.slice(ndarray::s![0, target, ..]) - &jac.slice(ndarray::s![0, origin, ..]);
    linear_step(gap, grad, 0)
}

fn linear_step(gap: f64, grad: Array1<f64>, step: usize) -> Result<Array1<f64>> {
    let norm_sq = grad.dot(&grad);
    if norm_sq.sqrt() < DEGENERATE_GRADIENT_NORM {
        return Err(Error::DegenerateGradient {
            step,
            norm: norm_sq.sqrt(),
        });
    }
    Ok(grad * (-gap / norm_sq))
}

/// Runs DeepFool on a single sample without recording a graph.
pub fn deepfool(
    net: &MlpNetwork,
    x: ArrayView1<f64>,
    label: usize,
    mode: AttackMode,
    max_iterations: usize,
) -> Result<PerturbationResult> {
    deepfool_batch(net, x.insert_axis(Axis(0)), &[label], &[mode], max_iterations)
        .pop()
        .expect("one sample in, one result out")
}

/// Whether the stop condition holds for a row of logits.
fn stop_condition(logits: &[f64], label: usize, mode: AttackMode) -> bool {
    let pred = argmax(logits);
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = logits.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let on_boundary = (logits[label] - best_other).abs() <= BOUNDARY_TOLERANCE * scale;
    match mode {
        AttackMode::Nearest => pred != label || on_boundary,
        AttackMode::ToGroundTruth => pred == label || on_boundary,
    }
}

struct SampleState {
    x: Array1<f64>,
    steps: Vec<Array1<f64>>,
    trajectory: Vec<(usize, usize)>,
}

/// Detached DeepFool over a batch. Rows are independent; each gets its own
/// result (errors included) in input order.
pub fn deepfool_batch(
    net: &MlpNetwork,
    x: ArrayView2<f64>,
    labels: &[usize],
    modes: &[AttackMode],
    max_iterations: usize,
) -> Vec<Result<PerturbationResult>> {
    let n = x.nrows();
    if labels.len() != n || modes.len() != n {
        return (0..n)
            .map(|_| Err(Error::invalid("deepfool_batch", "labels/modes length must match the batch")))
            .collect();
    }
    let k = net.num_classes();
    let mut results: Vec<Option<Result<PerturbationResult>>> = (0..n).map(|_| None).collect();
    let mut states: Vec<SampleState> = x
        .rows()
        .into_iter()
        .map(|row| SampleState {
            x: row.to_owned(),
            steps: Vec::new(),
            trajectory: Vec::new(),
        })
        .collect();
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            results[i] = Some(Err(Error::invalid("deepfool", format!("label {label} out of range"))));
        }
    }
    let mut active: Vec<usize> = (0..n).filter(|&i| results[i].is_none()).collect();

    let finish = |state: &mut SampleState, fooled: bool| -> Result<PerturbationResult> {
        let mut delta = Array1::zeros(state.x.len());
        for s in &state.steps {
            delta += s;
        }
        let norm = delta.dot(&delta).sqrt();
        Ok(PerturbationResult {
            delta,
            steps: std::mem::take(&mut state.steps),
            trajectory: std::mem::take(&mut state.trajectory),
            fooled,
            norm,
        })
    };

    for step in 0..=max_iterations {
        if active.is_empty() {
            break;
        }
        let rows = Array2::from_shape_fn((active.len(), x.ncols()), |(r, c)| states[active[r]].x[c]);
        let (logits, jac) = if step < max_iterations {
            match net.logits_and_input_jacobian(rows.view()) {
                Ok((l, j)) => (l, Some(j)),
                Err(e) => {
                    let msg = e.to_string();
                    for &i in &active {
                        results[i] = Some(Err(Error::invalid("deepfool", msg.clone())));
                    }
                    break;
                }
            }
        } else {
            match net.logits(rows.view()) {
                Ok(l) => (l, None),
                Err(e) => {
                    let msg = e.to_string();
                    for &i in &active {
                        results[i] = Some(Err(Error::invalid("deepfool", msg.clone())));
                    }
                    break;
                }
            }
        };

        let mut still = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            let row = logits.row(r);
            let row = row.as_slice().expect("standard layout");
            let (label, mode) = (labels[i], modes[i]);
            let pred = argmax(row);
            if step == 0 {
                let ok = match mode {
                    AttackMode::Nearest => pred == label,
                    AttackMode::ToGroundTruth => pred != label,
                };
                if !ok {
                    results[i] = Some(Err(Error::invalid(
                        "deepfool",
                        format!("{mode:?} mode with prediction {pred} and label {label}"),
                    )));
                    continue;
                }
            }
            if stop_condition(row, label, mode) {
                results[i] = Some(finish(&mut states[i], true));
                continue;
            }
            let Some(jac) = jac.as_ref() else {
                results[i] = Some(finish(&mut states[i], false));
                continue;
            };
            let j = jac.index_axis(Axis(0), r);
            let (origin, target) = match mode {
                AttackMode::Nearest => {
                    let gaps: Vec<f64> = row.iter().map(|&f| f - row[label]).collect();
                    let norms: Vec<f64> = (0..k)
                        .map(|c| {
                            let d = &j.row(c) - &j.row(label);
                            d.dot(&d).sqrt()
                        })
                        .collect();
                    match select_target_class(&gaps, &norms, label) {
                        Ok(t) => (label, t),
                        Err(Error::DegenerateGradient { norm, .. }) => {
                            results[i] = Some(Err(Error::DegenerateGradient { step, norm }));
                            continue;
                        }
                        Err(e) => {
                            results[i] = Some(Err(e));
                            continue;
                        }
                    }
                }
                AttackMode::ToGroundTruth => (pred, label),
            };
            let gap = row[target] - row[origin];
            let grad = &j.row(target) - &j.row(origin);
            match linear_step(gap, grad, step) {
                Ok(r) => {
                    let state = &mut states[i];
                    state.x += &r;
                    state.steps.push(r);
                    state.trajectory.push((origin, target));
                    still.push(i);
                }
                Err(e) => results[i] = Some(Err(e)),
            }
        }
        active = still;
    }
    results
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(Error::InvariantViolation("attack left a sample unresolved".into()))))
        .collect()
}

/// Perturbations recorded on a tape, one row per sample.
pub struct GraphPerturbation {
    /// `(B, D)`; row `b` is `Δx_b`.
    pub delta: Tensor,
}

/// Replays the given class trajectories on the tape of `bound`.
///
/// Row `b` takes `trajectories[b].len()` steps; step `i` linearizes
/// `f_target - f_origin` at `x_b + Σ_{j<i} r_j`. With
/// [`GradientFlow::HighOrder`] every `∇g` is a differentiable node; with
/// [`GradientFlow::MaskedGradient`] it is a constant.
pub fn deepfool_graph(
    bound: &BoundNetwork<'_>,
    x: ArrayView2<f64>,
    trajectories: &[Vec<(usize, usize)>],
    flow: GradientFlow,
) -> Result<GraphPerturbation> {
    let (n, d) = x.dim();
    if trajectories.len() != n {
        return Err(Error::invalid("deepfool_graph", format!("{} trajectories for {n} rows", trajectories.len())));
    }
    let tape = bound.tape();
    let mut current = tape.constant(x.to_owned().into_dyn());
    let mut delta = tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[n, d])));
    let longest = trajectories.iter().map(Vec::len).max().unwrap_or(0);
    for step in 0..longest {
        let rows: Vec<usize> = (0..n).filter(|&b| trajectories[b].len() > step).collect();
        let origins: Vec<usize> = rows.iter().map(|&b| trajectories[b][step].0).collect();
        let targets: Vec<usize> = rows.iter().map(|&b| trajectories[b][step].1).collect();

        let at = current.select_rows(&rows)?;
        let logits = bound.forward(&at)?;
        let gap = logits.gather(&targets)?.sub(&logits.gather(&origins)?)?;
        let grads = tape.grad(&gap.sum()?, &[&at], flow == GradientFlow::HighOrder)?;
        let grad = grads.get(0);
        let norm_sq = grad.l2_norm_sq()?;
        if let Some(pos) = norm_sq.value().iter().position(|v| v.sqrt() < DEGENERATE_GRADIENT_NORM) {
            return Err(Error::DegenerateGradient {
                step,
                norm: norm_sq.value()[pos].sqrt(),
            });
        }
        let coef = gap.mul(&norm_sq.reciprocal()?)?.scale(-1.0)?;
        let r = grad.mul_rows(&coef)?.scatter_rows(&rows, n)?;
        current = current.add(&r)?;
        delta = delta.add(&r)?;
    }
    Ok(GraphPerturbation { delta })
}

/// Per-sample DeepFool margins of a model on a labelled set.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginReport {
    /// ‖Δx‖₂ for correctly classified samples, 0 for misclassified ones.
    pub per_sample: Vec<f64>,
    pub mean: f64,
    /// Among correctly classified samples, the fraction whose attack
    /// reached a boundary within the iteration budget.
    pub fooled_fraction: f64,
    pub correct: usize,
}

/// Mean DeepFool perturbation norm; misclassified samples count as 0.
pub fn margin_estimate(
    net: &MlpNetwork,
    x: ArrayView2<f64>,
    labels: &[usize],
    max_iterations: usize,
) -> Result<MarginReport> {
    if x.nrows() == 0 || x.nrows() != labels.len() {
        return Err(Error::invalid("margin_estimate", "need a nonempty labelled set"));
    }
    const CHUNK: usize = 256;
    let mut per_sample = vec![0.0; x.nrows()];
    let (mut correct, mut fooled) = (0usize, 0usize);
    for start in (0..x.nrows()).step_by(CHUNK) {
        let end = (start + CHUNK).min(x.nrows());
        let chunk = x.slice(ndarray::s![start..end, ..]);
        let preds = net.predict(chunk)?;
        let idx: Vec<usize> = (0..end - start).filter(|&i| preds[i] == labels[start + i]).collect();
        if idx.is_empty() {
            continue;
        }
        let rows = chunk.select(Axis(0), &idx);
        let lab: Vec<usize> = idx.iter().map(|&i| labels[start + i]).collect();
        let modes = vec![AttackMode::Nearest; idx.len()];
        for (&i, res) in idx.iter().zip(deepfool_batch(net, rows.view(), &lab, &modes, max_iterations)) {
            let res = res?;
            correct += 1;
            fooled += res.fooled as usize;
            per_sample[start + i] = res.norm;
        }
    }
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    let fooled_fraction = if correct == 0 { 0.0 } else { fooled as f64 / correct as f64 };
    Ok(MarginReport {
        per_sample,
        mean,
        fooled_fraction,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::array;

    fn binary(w: [f64; 2], b: f64) -> MlpNetwork {
        MlpNetwork::from_layers(vec![(array![[w[0], w[1]]], vec![b])]).unwrap()
    }

    #[test]
    fn linear_binary_step_lands_on_hyperplane() {
        let net = binary([3., 4.], 0.);
        let r = deepfool_step(&net, array![1., 1.].view(), 1, 0).unwrap();
        assert!((r[0] + 0.84).abs() < 1e-15 && (r[1] + 1.12).abs() < 1e-15);
        assert!((r.dot(&r).sqrt() - 1.4).abs() < 1e-15);
    }

    #[test]
    fn step_on_boundary_is_zero() {
        let net = binary([3., 4.], 0.);
        let r = deepfool_step(&net, array![4., -3.].view(), 1, 0).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_rejects_same_class_and_flat_gap() {
        let net = binary([3., 4.], 0.);
        assert!(deepfool_step(&net, array![1., 1.].view(), 1, 1).is_err());
        let flat = binary([0., 0.], 1.);
        assert!(matches!(
            deepfool_step(&flat, array![1., 1.].view(), 1, 0),
            Err(Error::DegenerateGradient { .. })
        ));
    }

    #[test]
    fn target_selection_rules() {
        // current class 0; candidates 1 and 2
        assert_eq!(select_target_class(&[0., -2., -1.], &[0., 1., 1.], 0).unwrap(), 2);
        assert_eq!(select_target_class(&[0., -2., -2.], &[0., 4., 1.], 0).unwrap(), 1);
        assert_eq!(select_target_class(&[0., -1., -1.], &[0., 1., 1.], 0).unwrap(), 1);
        assert!(matches!(
            select_target_class(&[0., -1., -1.], &[0., 0., 0.], 0),
            Err(Error::DegenerateGradient { .. })
        ));
        assert!(select_target_class(&[0.], &[0.], 0).is_err());
    }

    #[test]
    fn linear_binary_converges_in_one_step() {
        let net = binary([3., 4.], -2.);
        for (x, label) in [(array![1., 1.], 1usize), (array![-1., 0.5], 0usize)] {
            let res = deepfool(&net, x.view(), label, AttackMode::Nearest, 6).unwrap();
            let f = 3.0 * x[0] + 4.0 * x[1] - 2.0;
            assert_eq!(res.iterations(), 1);
            assert!(res.fooled);
            assert!((res.norm - f.abs() / 5.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_budget_returns_zero_delta() {
        let net = binary([3., 4.], 0.);
        let res = deepfool(&net, array![1., 1.].view(), 1, AttackMode::Nearest, 0).unwrap();
        assert_eq!(res.iterations(), 0);
        assert!(!res.fooled);
        assert_eq!(res.norm, 0.0);
    }

    #[test]
    fn precondition_violations_are_errors() {
        let net = binary([3., 4.], 0.);
        assert!(deepfool(&net, array![1., 1.].view(), 0, AttackMode::Nearest, 6).is_err());
        assert!(deepfool(&net, array![1., 1.].view(), 1, AttackMode::ToGroundTruth, 6).is_err());
    }

    #[test]
    fn to_ground_truth_moves_towards_label() {
        let net = MlpNetwork::msra_init(&[4, 8, 3], 5).unwrap();
        let x = array![0.5, -0.3, 0.8, 0.1];
        let pred = net.predict(x.view().insert_axis(Axis(0))).unwrap()[0];
        let label = (pred + 1) % 3;
        let res = deepfool(&net, x.view(), label, AttackMode::ToGroundTruth, 6).unwrap();
        assert!(res.iterations() >= 1);
        assert!(res.trajectory.iter().all(|&(_, t)| t == label));
        if res.fooled {
            let moved = &x + &res.delta;
            let l = net.logits(moved.view().insert_axis(Axis(0))).unwrap();
            assert!(l[[0, label]] >= l.row(0).iter().cloned().fold(f64::MIN, f64::max) - 1e-8);
        }
    }

    #[test]
    fn graph_replay_matches_detached_values() {
        let net = MlpNetwork::msra_init(&[5, 7, 6, 3], 17).unwrap();
        let x = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 3 + j * 5) % 7) as f64 * 0.4 - 1.1);
        let preds = net.predict(x.view()).unwrap();
        let modes = vec![AttackMode::Nearest; 4];
        let detached: Vec<_> = deepfool_batch(&net, x.view(), &preds, &modes, 6)
            .into_iter()
            .map(|r| r.unwrap())
            .collect();
        let tape = Tape::new();
        let bound = net.bind(&tape, true);
        let trajectories: Vec<_> = detached.iter().map(|r| r.trajectory.clone()).collect();
        for flow in [GradientFlow::HighOrder, GradientFlow::MaskedGradient] {
            let g = deepfool_graph(&bound, x.view(), &trajectories, flow).unwrap();
            for (b, res) in detached.iter().enumerate() {
                for (p, q) in g.delta.value().index_axis(Axis(0), b).iter().zip(res.delta.iter()) {
                    assert!((p - q).abs() < 1e-10);
                }
            }
        }
    }
}
