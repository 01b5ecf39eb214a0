//! Margin regularizer assembled from per-sample DeepFool perturbations.
//!
//! For a batch of `n` samples split into correctly classified `T` and
//! misclassified `F`:
//!
//! ```text
//! λ/n · [ Σ_{k ∈ sel(T)} R(-c‖Δx_k‖) + Σ_{k ∈ F} R(d‖Δx_k‖) ]
//! ```
//!
//! `sel(T)` is all of `T` under [`Aggregation::Avg`] and the per-class,
//! within-quota minima under [`Aggregation::Min`]. Perturbations of `F` are
//! taken towards the ground-truth class.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackMode, GradientFlow, PerturbationResult};
use crate::autodiff::{argmax, Tensor};
use crate::error::{Error, Result};
use crate::model::BoundNetwork;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Avg,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shrinkage {
    Lin,
    Exp,
    Inv,
}

/// Population over which the MIN quota ("smallest fraction of the batch")
/// is ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuotaScope {
    CorrectOnly,
    WholeBatch,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avg" => Ok(Self::Avg),
            "min" => Ok(Self::Min),
            other => Err(Error::Config(format!("unknown aggregation {other:?} (avg|min)"))),
        }
    }
}

impl std::str::FromStr for Shrinkage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lin" => Ok(Self::Lin),
            "exp" => Ok(Self::Exp),
            "inv" => Ok(Self::Inv),
            other => Err(Error::Config(format!("unknown shrinkage {other:?} (lin|exp|inv)"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Avg => "avg",
            Self::Min => "min",
        })
    }
}

impl std::fmt::Display for Shrinkage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lin => "lin",
            Self::Exp => "exp",
            Self::Inv => "inv",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub lambda: f64,
    pub c: f64,
    pub d: f64,
    pub aggregation: Aggregation,
    pub shrinkage: Shrinkage,
    pub min_fraction: f64,
    pub inv_clamp: f64,
    pub quota_scope: QuotaScope,
    pub gradient_flow: GradientFlow,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            c: 1.0,
            d: 1.0,
            aggregation: Aggregation::Min,
            shrinkage: Shrinkage::Exp,
            min_fraction: 0.2,
            inv_clamp: 0.999,
            quota_scope: QuotaScope::CorrectOnly,
            gradient_flow: GradientFlow::HighOrder,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.c > 0.0) || !(self.d > 0.0) {
            return bad(format!("c and d must be > 0, got c={} d={}", self.c, self.d));
        }
        if !(self.min_fraction > 0.0 && self.min_fraction <= 1.0) {
            return bad(format!("min_fraction must be in (0, 1], got {}", self.min_fraction));
        }
        if !(self.inv_clamp > 0.0 && self.inv_clamp < 1.0) {
            return bad(format!("inv_clamp must be in (0, 1), got {}", self.inv_clamp));
        }
        Ok(())
    }
}

/// `R(t)`: LIN `t`, EXP `exp(t)`, INV `1/(1-t)` (requires `t < 1`).
pub fn shrinkage(kind: Shrinkage, t: f64) -> Result<f64> {
    match kind {
        Shrinkage::Lin => Ok(t),
        Shrinkage::Exp => Ok(t.exp()),
        Shrinkage::Inv if t < 1.0 => Ok(1.0 / (1.0 - t)),
        Shrinkage::Inv => Err(Error::InvariantViolation(format!("INV shrinkage needs t < 1, got {t}"))),
    }
}

fn shrink_tensor(kind: Shrinkage, t: &Tensor) -> Result<Tensor> {
    match kind {
        Shrinkage::Lin => Ok(t.clone()),
        Shrinkage::Exp => t.exp(),
        Shrinkage::Inv => {
            if let Some(&v) = t.value().iter().find(|&&v| v >= 1.0) {
                return Err(Error::InvariantViolation(format!("INV shrinkage needs t < 1, got {v}")));
            }
            let ones = t.tape().constant(ArrayD::ones(IxDyn(t.shape())));
            ones.sub(t)?.reciprocal()
        }
    }
}

/// Correctly (`correct`) and incorrectly (`incorrect`) classified indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchPartition {
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
}

/// Splits a batch by whether the (lowest-index) argmax matches the label.
pub fn partition_batch(logits: &Array2<f64>, labels: &[usize]) -> BatchPartition {
    let mut part = BatchPartition::default();
    for (i, (row, &label)) in logits.axis_iter(Axis(0)).zip(labels).enumerate() {
        let row = row.to_vec();
        if argmax(&row) == label {
            part.correct.push(i);
        } else {
            part.incorrect.push(i);
        }
    }
    part
}

/// A correctly classified sample competing for MIN selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub label: usize,
    pub norm: f64,
}

/// Number of samples inside the MIN quota: `⌈fraction · size⌉`, at least 1.
pub fn quota_size(fraction: f64, size: usize) -> usize {
    if size == 0 {
        return 0;
    }
    ((fraction * size as f64).ceil() as usize).clamp(1, size)
}

fn by_norm_then_index(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// MIN selection: a candidate is kept iff it has the smallest norm among
/// candidates of its label and ranks within the `⌈fraction · |pool|⌉`
/// smallest norms of `pool` (`(index, norm)` pairs). Ties go to the lower
/// sample index. Returns selected indices in ascending order.
pub fn select_min_subset_in_pool(candidates: &[Candidate], fraction: f64, pool: &[(usize, f64)]) -> Vec<usize> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let mut ranked: Vec<(usize, f64)> = pool.to_vec();
    ranked.sort_by(by_norm_then_index);
    ranked.truncate(quota_size(fraction, pool.len()));
    let in_quota: std::collections::HashSet<usize> = ranked.iter().map(|&(i, _)| i).collect();

    let mut best_per_label: std::collections::BTreeMap<usize, (usize, f64)> = Default::default();
    for c in candidates {
        let entry = best_per_label.entry(c.label).or_insert((c.index, c.norm));
        if by_norm_then_index(&(c.index, c.norm), entry).is_lt() {
            *entry = (c.index, c.norm);
        }
    }
    let mut selected: Vec<usize> = best_per_label
        .values()
        .map(|&(i, _)| i)
        .filter(|i| in_quota.contains(i))
        .collect();
    selected.sort_unstable();
    selected
}

/// MIN selection with the quota ranked over the candidates themselves.
pub fn select_min_subset(candidates: &[Candidate], fraction: f64) -> Vec<usize> {
    let pool: Vec<(usize, f64)> = candidates.iter().map(|c| (c.index, c.norm)).collect();
    select_min_subset_in_pool(candidates, fraction, &pool)
}

/// Per-batch bookkeeping of the regularizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegularizerStats {
    pub correct: usize,
    pub incorrect: usize,
    /// Correct samples that received a regularization term.
    pub selected: usize,
    /// Samples dropped because the attack hit a flat logit gap.
    pub degenerate: usize,
    /// Attacks that exhausted the iteration budget without reaching a
    /// boundary (their accumulated norm is still used).
    pub unfooled: usize,
    pub mean_correct_norm: f64,
}

pub struct RegularizerOutput {
    /// Scalar `λ · L`.
    pub value: Tensor,
    pub stats: RegularizerStats,
}

/// Builds the regularization scalar for one batch.
///
/// `logits` are the batch logits at the current parameters (used for the
/// correct/incorrect split). Attack decisions come from a detached run;
/// the selected perturbations are then recorded on the tape of `bound` with
/// those decisions pinned.
pub fn amm_regularizer(
    bound: &BoundNetwork<'_>,
    x: ArrayView2<f64>,
    labels: &[usize],
    logits: &Array2<f64>,
    config: &RegularizerConfig,
    max_iterations: usize,
) -> Result<RegularizerOutput> {
    config.validate()?;
    let n = x.nrows();
    if n == 0 || labels.len() != n || logits.nrows() != n {
        return Err(Error::invalid("amm_regularizer", "batch, labels and logits must align and be nonempty"));
    }
    let tape = bound.tape();
    let part = partition_batch(logits, labels);
    let mut stats = RegularizerStats {
        correct: part.correct.len(),
        incorrect: part.incorrect.len(),
        ..Default::default()
    };
    if config.lambda == 0.0 {
        return Ok(RegularizerOutput {
            value: tape.scalar(0.0),
            stats,
        });
    }

    let modes: Vec<AttackMode> = (0..n)
        .map(|i| if part.correct.binary_search(&i).is_ok() { AttackMode::Nearest } else { AttackMode::ToGroundTruth })
        .collect();
    let mut attacks: Vec<Option<PerturbationResult>> = Vec::with_capacity(n);
    for res in attack::deepfool_batch(bound.network(), x, labels, &modes, max_iterations) {
        match res {
            Ok(r) => {
                stats.unfooled += !r.fooled as usize;
                attacks.push(Some(r));
            }
            Err(Error::DegenerateGradient { .. }) => {
                stats.degenerate += 1;
                attacks.push(None);
            }
            Err(e) => return Err(e),
        }
    }

    let candidates: Vec<Candidate> = part
        .correct
        .iter()
        .filter_map(|&i| attacks[i].as_ref().map(|a| Candidate { index: i, label: labels[i], norm: a.norm }))
        .collect();
    if !candidates.is_empty() {
        stats.mean_correct_norm = candidates.iter().map(|c| c.norm).sum::<f64>() / candidates.len() as f64;
    }
    let selected: Vec<usize> = match config.aggregation {
        Aggregation::Avg => candidates.iter().map(|c| c.index).collect(),
        Aggregation::Min => match config.quota_scope {
            QuotaScope::CorrectOnly => select_min_subset(&candidates, config.min_fraction),
            QuotaScope::WholeBatch => {
                let pool: Vec<(usize, f64)> = (0..n).filter_map(|i| attacks[i].as_ref().map(|a| (i, a.norm))).collect();
                select_min_subset_in_pool(&candidates, config.min_fraction, &pool)
            }
        },
    };
    stats.selected = selected.len();

    // (batch index, signed scale) for every regularized sample
    let mut terms: Vec<(usize, f64)> = selected.iter().map(|&i| (i, -config.c)).collect();
    terms.extend(part.incorrect.iter().filter(|&&i| attacks[i].is_some()).map(|&i| (i, config.d)));
    terms.sort_unstable_by_key(|&(i, _)| i);

    // Zero perturbations have no usable gradient through the norm; they
    // contribute the constant R(0).
    let (graph_terms, flat_terms): (Vec<_>, Vec<_>) =
        terms.into_iter().partition(|&(i, _)| attacks[i].as_ref().is_some_and(|a| a.norm > 0.0));
    let mut constant = 0.0;
    for _ in &flat_terms {
        constant += shrinkage(config.shrinkage, 0.0)?;
    }

    let mut total = tape.scalar(constant);
    if !graph_terms.is_empty() {
        let rows: Vec<usize> = graph_terms.iter().map(|&(i, _)| i).collect();
        let xs = x.select(Axis(0), &rows);
        let trajectories: Vec<_> = rows.iter().map(|&i| attacks[i].as_ref().unwrap().trajectory.clone()).collect();
        let perturbation = attack::deepfool_graph(bound, xs.view(), &trajectories, config.gradient_flow)?;
        let norms = perturbation.delta.l2_norm_sq()?.sqrt()?;
        let scales = tape.constant(ArrayD::from_shape_vec(IxDyn(&[rows.len()]), graph_terms.iter().map(|&(_, s)| s).collect()).unwrap());
        let mut t = norms.mul(&scales)?;
        if config.shrinkage == Shrinkage::Inv {
            t = clamp_above(&t, config.inv_clamp)?;
        }
        total = total.add(&shrink_tensor(config.shrinkage, &t)?.sum()?)?;
    }
    Ok(RegularizerOutput {
        value: total.scale(config.lambda / n as f64)?,
        stats,
    })
}

/// Replaces entries above `limit` by the constant `limit`.
fn clamp_above(t: &Tensor, limit: f64) -> Result<Tensor> {
    if t.value().iter().all(|&v| v <= limit) {
        return Ok(t.clone());
    }
    let keep = t.value().mapv(|v| if v <= limit { 1.0 } else { 0.0 });
    let fill = t.value().mapv(|v| if v <= limit { 0.0 } else { limit });
    let tape = t.tape();
    t.mul(&tape.constant(keep))?.add(&tape.constant(fill))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::MlpNetwork;
    use ndarray::array;

    #[test]
    fn shrinkage_values() {
        assert_eq!(shrinkage(Shrinkage::Lin, 0.7).unwrap(), 0.7);
        assert_eq!(shrinkage(Shrinkage::Exp, 0.0).unwrap(), 1.0);
        assert!((shrinkage(Shrinkage::Exp, -1.5).unwrap() - 0.22313).abs() < 1e-5);
        assert_eq!(shrinkage(Shrinkage::Inv, 0.5).unwrap(), 2.0);
        assert!(matches!(shrinkage(Shrinkage::Inv, 1.0), Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn shrinkages_are_increasing() {
        for kind in [Shrinkage::Lin, Shrinkage::Exp, Shrinkage::Inv] {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..200 {
                let t = -5.0 + i as f64 * 0.029;
                let v = shrinkage(kind, t).unwrap();
                assert!(v > prev, "{kind} at {t}");
                prev = v;
            }
        }
    }

    #[test]
    fn partition_examples() {
        let p = partition_batch(&array![[2., 1.], [0., 3.]], &[0, 0]);
        assert_eq!(p.correct, vec![0]);
        assert_eq!(p.incorrect, vec![1]);
        let p = partition_batch(&array![[2., 1.], [0., 3.]], &[0, 1]);
        assert!(p.incorrect.is_empty());
        let p = partition_batch(&array![[1., 1.]], &[0]);
        assert_eq!(p.correct, vec![0]);
        let p = partition_batch(&array![[1., 1.]], &[1]);
        assert_eq!(p.incorrect, vec![0]);
    }

    fn cands(pairs: &[(usize, f64)]) -> Vec<Candidate> {
        pairs.iter()
            .enumerate()
            .map(|(index, &(label, norm))| Candidate { index, label, norm })
            .collect()
    }

    #[test]
    fn min_subset_two_classes() {
        let a = [0.5, 0.9, 1.2, 2.0, 3.0];
        let b = [0.4, 0.8, 1.5, 2.5, 4.0];
        let pairs: Vec<(usize, f64)> = a.iter().map(|&v| (0, v)).chain(b.iter().map(|&v| (1, v))).collect();
        let sel = select_min_subset(&cands(&pairs), 0.2);
        // indices of 0.5 (class A) and 0.4 (class B)
        assert_eq!(sel, vec![0, 5]);
    }

    #[test]
    fn min_subset_single_class() {
        let pairs: Vec<(usize, f64)> = [0.7, 0.3, 0.9, 0.5, 1.1].iter().map(|&v| (3, v)).collect();
        assert_eq!(select_min_subset(&cands(&pairs), 0.2), vec![1]);
    }

    #[test]
    fn per_class_minimum_outside_quota_is_dropped() {
        // quota = ceil(0.2 * 10) = 2, filled by class 0's two smallest norms
        let mut pairs: Vec<(usize, f64)> = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9].iter().map(|&v| (0, v)).collect();
        pairs.push((1, 1.2));
        let sel = select_min_subset(&cands(&pairs), 0.2);
        assert_eq!(sel, vec![0]);
    }

    #[test]
    fn min_subset_ties_and_empty() {
        assert!(select_min_subset(&[], 0.2).is_empty());
        let pairs = [(0, 0.5), (0, 0.5), (1, 0.5)];
        // quota = 1: lowest index wins both criteria
        assert_eq!(select_min_subset(&cands(&pairs), 0.2), vec![0]);
        assert_eq!(quota_size(0.2, 3), 1);
        assert_eq!(quota_size(0.2, 11), 3);
        assert_eq!(quota_size(0.2, 0), 0);
    }

    /// Brute-force MIN selection straight from the two conditions.
    fn brute_force(c: &[Candidate], fraction: f64) -> Vec<usize> {
        let q = quota_size(fraction, c.len());
        let mut out = Vec::new();
        for a in c {
            let cond_a = c
                .iter()
                .filter(|b| b.label == a.label)
                .all(|b| (a.norm, a.index) <= (b.norm, b.index) || b.index == a.index);
            let rank = c.iter().filter(|b| (b.norm, b.index) < (a.norm, a.index)).count();
            if cond_a && rank < q {
                out.push(a.index);
            }
        }
        out
    }

    #[test]
    fn min_subset_matches_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let n = rng.random_range(1..30);
            let c: Vec<Candidate> = (0..n)
                .map(|index| Candidate {
                    index,
                    label: rng.random_range(0..4),
                    norm: (rng.random_range(0..12) as f64) * 0.25,
                })
                .collect();
            let f = [0.1, 0.2, 0.5, 1.0][rng.random_range(0..4)];
            assert_eq!(select_min_subset(&c, f), brute_force(&c, f));
        }
    }

    fn linear_binary() -> MlpNetwork {
        MlpNetwork::from_layers(vec![(array![[3., 4.]], vec![-1.])]).unwrap()
    }

    #[test]
    fn lambda_zero_is_zero() {
        let net = linear_binary();
        let tape = Tape::new();
        let bound = net.bind(&tape, true);
        let x = array![[1., 1.], [-1., -1.]];
        let logits = net.logits(x.view()).unwrap();
        let cfg = RegularizerConfig { lambda: 0.0, ..Default::default() };
        let out = amm_regularizer(&bound, x.view(), &[1, 0], &logits, &cfg, 6).unwrap();
        assert_eq!(out.value.item(), 0.0);
    }

    #[test]
    fn avg_lin_on_linear_model_is_signed_distance_sum() {
        let net = linear_binary();
        let x = array![[1., 1.], [-1., -1.], [0.5, 0.2], [-0.3, -0.1]];
        let logits = net.logits(x.view()).unwrap();
        let labels: Vec<usize> = crate::model::predictions(&logits);
        let cfg = RegularizerConfig {
            lambda: 1.0,
            c: 0.7,
            aggregation: Aggregation::Avg,
            shrinkage: Shrinkage::Lin,
            ..Default::default()
        };
        let tape = Tape::new();
        let out = amm_regularizer(&net.bind(&tape, true), x.view(), &labels, &logits, &cfg, 6).unwrap();
        let expected: f64 = x
            .rows()
            .into_iter()
            .map(|r| -(0.7 / 4.0) * (3.0 * r[0] + 4.0 * r[1] - 1.0).abs() / 5.0)
            .sum();
        assert!((out.value.item() - expected).abs() < 1e-12);
        assert_eq!(out.stats.selected, 4);
    }

    #[test]
    fn single_misclassified_exp() {
        // f(x) = x0 on a 1-D input: distance of x=-0.3 to the boundary is 0.3
        let net = MlpNetwork::from_layers(vec![(array![[1.0]], vec![0.0])]).unwrap();
        let x = array![[-0.3]];
        let logits = net.logits(x.view()).unwrap();
        let cfg = RegularizerConfig {
            lambda: 1.0,
            d: 1.0,
            shrinkage: Shrinkage::Exp,
            ..Default::default()
        };
        let tape = Tape::new();
        let out = amm_regularizer(&net.bind(&tape, true), x.view(), &[1], &logits, &cfg, 6).unwrap();
        assert!((out.value.item() - 0.3f64.exp()).abs() < 1e-12);
        assert_eq!(out.stats.incorrect, 1);
    }

    #[test]
    fn inv_clamps_large_misclassified_terms() {
        let net = MlpNetwork::from_layers(vec![(array![[1.0]], vec![0.0])]).unwrap();
        let x = array![[-3.0]];
        let logits = net.logits(x.view()).unwrap();
        let cfg = RegularizerConfig {
            lambda: 1.0,
            d: 1.0,
            shrinkage: Shrinkage::Inv,
            ..Default::default()
        };
        let tape = Tape::new();
        let bound = net.bind(&tape, true);
        let out = amm_regularizer(&bound, x.view(), &[1], &logits, &cfg, 6).unwrap();
        assert!((out.value.item() - 1000.0).abs() < 1e-6);
        let g = tape.grad(&out.value, &bound.param_refs(), false).unwrap();
        assert!(g.iter().all(|t| t.value().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            RegularizerConfig { c: 0.0, ..Default::default() },
            RegularizerConfig { lambda: -1.0, ..Default::default() },
            RegularizerConfig { inv_clamp: 1.0, ..Default::default() },
            RegularizerConfig { min_fraction: 0.0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    /// Dropping non-selected correct samples from the batch (keeping n)
    /// must not change the regularizer gradient under MIN.
    #[test]
    fn min_gradient_flows_only_through_selected_and_incorrect() {
        let net = MlpNetwork::msra_init(&[4, 6, 3], 31).unwrap();
        let x = Array2::from_shape_fn((12, 4), |(i, j)| (((i * 7 + j * 3) % 11) as f64 - 5.0) * 0.23);
        let logits = net.logits(x.view()).unwrap();
        let preds = crate::model::predictions(&logits);
        // make two samples misclassified
        let mut labels = preds.clone();
        labels[3] = (labels[3] + 1) % 3;
        labels[8] = (labels[8] + 2) % 3;
        let cfg = RegularizerConfig {
            lambda: 1.0,
            c: 0.5,
            d: 0.5,
            aggregation: Aggregation::Min,
            shrinkage: Shrinkage::Exp,
            ..Default::default()
        };

        let tape = Tape::new();
        let bound = net.bind(&tape, true);
        let out = amm_regularizer(&bound, x.view(), &labels, &logits, &cfg, 6).unwrap();
        let full = tape.grad(&out.value, &bound.param_refs(), false).unwrap().into_values();
        assert!(out.stats.selected >= 1 && out.stats.selected < out.stats.correct);

        // rebuild by hand from the selected and misclassified rows only
        let part = partition_batch(&logits, &labels);
        let modes: Vec<AttackMode> =
            (0..12).map(|i| if part.correct.contains(&i) { AttackMode::Nearest } else { AttackMode::ToGroundTruth }).collect();
        let attacks: Vec<_> = attack::deepfool_batch(&net, x.view(), &labels, &modes, 6)
            .into_iter()
            .map(|r| r.unwrap())
            .collect();
        let cands: Vec<Candidate> = part
            .correct
            .iter()
            .map(|&i| Candidate { index: i, label: labels[i], norm: attacks[i].norm })
            .collect();
        let mut keep: Vec<(usize, f64)> = select_min_subset(&cands, 0.2).into_iter().map(|i| (i, -0.5)).collect();
        keep.extend(part.incorrect.iter().map(|&i| (i, 0.5)));
        keep.sort_unstable_by_key(|k| k.0);

        let tape2 = Tape::new();
        let bound2 = net.bind(&tape2, true);
        let rows: Vec<usize> = keep.iter().map(|k| k.0).collect();
        let trajectories: Vec<_> = rows.iter().map(|&i| attacks[i].trajectory.clone()).collect();
        let g = attack::deepfool_graph(&bound2, x.select(Axis(0), &rows).view(), &trajectories, GradientFlow::HighOrder).unwrap();
        let norms = g.delta.l2_norm_sq().unwrap().sqrt().unwrap();
        let s = tape2.constant(ArrayD::from_shape_vec(IxDyn(&[rows.len()]), keep.iter().map(|k| k.1).collect()).unwrap());
        let manual = norms.mul(&s).unwrap().exp().unwrap().sum().unwrap().scale(1.0 / 12.0).unwrap();
        assert!((manual.item() - out.value.item()).abs() < 1e-12);
        let reduced = tape2.grad(&manual, &bound2.param_refs(), false).unwrap().into_values();
        for (a, b) in full.iter().zip(&reduced) {
            for (p, q) in a.iter().zip(b.iter()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
