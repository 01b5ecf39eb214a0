//! End-to-end experiment runners and their reproducibility manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, synth_2d, Dataset, MnistSplit};
use crate::error::{Error, Result};
use crate::eval::{self, GridPoint, MarginConvention, Separator};
use crate::model::MlpNetwork;
use crate::regularizer::{Aggregation, RegularizerConfig, Shrinkage};
use crate::trainer::{train, EpochRecord, TrainConfig, TrainOptions};

/// Settings of the 2-D rectangles experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub n_per_class: usize,
    /// Seeds data generation; training uses `train.seed`.
    pub data_seed: u64,
    pub grid_resolution: usize,
    pub train: TrainConfig,
    pub regularizer: RegularizerConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            data_seed: 0,
            grid_resolution: 101,
            train: TrainConfig::toy(),
            regularizer: RegularizerConfig {
                lambda: 1.0,
                c: 1.0,
                d: 1.0,
                ..RegularizerConfig::default()
            },
        }
    }
}

impl ToyConfig {
    pub fn with(aggregation: Aggregation, shrinkage: Shrinkage, seed: u64) -> Self {
        let mut cfg = Self::default();
        cfg.regularizer.aggregation = aggregation;
        cfg.regularizer.shrinkage = shrinkage;
        cfg.data_seed = seed;
        cfg.train.seed = seed;
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct ToyResult {
    /// Learned line, `w` normalized to unit length.
    pub separator: Separator,
    pub oracle: Separator,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub history: Vec<EpochRecord>,
    pub grid: Vec<GridPoint>,
    pub net: MlpNetwork,
    pub train_set: Dataset,
    pub test_set: Dataset,
}

/// Trains a linear binary classifier on the rectangles with the configured
/// regularizer and compares it with the exact hard-margin line.
pub fn run_toy(cfg: &ToyConfig) -> Result<ToyResult> {
    let (train_set, test_set) = synth_2d(cfg.n_per_class, cfg.data_seed)?;
    let init = MlpNetwork::msra_init(&[2, 1], cfg.train.seed)?;
    let out = train(init, &train_set, None, &cfg.train, &cfg.regularizer, &TrainOptions::default())?;
    let (w, b) = eval::linear_net_separator(&out.net)?;
    let norm = w[0].hypot(w[1]);
    if norm == 0.0 {
        return Err(Error::InvariantViolation("trained weight vector is zero".into()));
    }
    let margin = eval::geometric_margin(w, b, &train_set)?;
    let separator = Separator {
        w: [w[0] / norm, w[1] / norm],
        b: b / norm,
        margin,
    };
    let oracle = eval::hard_margin_oracle(&train_set)?;
    let grid = eval::boundary_grid(&out.net, (-2.0, 2.0), (-5.0, 5.0), cfg.grid_resolution)?;
    Ok(ToyResult {
        separator,
        oracle,
        train_accuracy: eval::accuracy(&out.net, &train_set)?,
        test_accuracy: eval::accuracy(&out.net, &test_set)?,
        history: out.history,
        grid,
        net: out.net,
        train_set,
        test_set,
    })
}

/// Settings of an MNIST MLP run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnistConfig {
    /// Directory holding the IDX files, relative to the data root.
    pub dataset: String,
    pub dims: Vec<usize>,
    /// Seeds the weight initialization.
    pub init_seed: u64,
    /// Random training subset size (all when absent).
    pub train_size: Option<usize>,
    /// Keep this many clean labels and redraw the rest (no noise when absent).
    pub n_clean: Option<usize>,
    /// Seeds subsampling, label noise and the validation split.
    pub data_seed: u64,
    /// Held out from the training set for model selection (0 disables).
    pub validation_size: usize,
    /// Report the mean DeepFool margin on the test set.
    pub test_margin: bool,
    pub margin_convention: MarginConvention,
    pub train: TrainConfig,
    pub regularizer: RegularizerConfig,
}

impl Default for MnistConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            dims: vec![784, 800, 800, 10],
            init_seed: 0,
            train_size: None,
            n_clean: None,
            data_seed: 0,
            validation_size: 0,
            test_margin: true,
            margin_convention: MarginConvention::AllZeroMisclassified,
            train: TrainConfig::default(),
            regularizer: RegularizerConfig::default(),
        }
    }
}

/// Mean-subtracted splits of one MNIST run.
pub struct MnistData {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
    pub mean: ndarray::Array1<f64>,
    pub inputs: Vec<ManifestInput>,
}

/// Loads, subsamples, corrupts, splits and centers the data for `cfg`.
pub fn prepare_mnist(cfg: &MnistConfig, data_root: &Path) -> Result<MnistData> {
    let dir = data_root.join(&cfg.dataset);
    let raw_train = data::load_mnist_dir(&dir, MnistSplit::Train)?;
    let raw_test = data::load_mnist_dir(&dir, MnistSplit::Test)?;
    let inputs = vec![
        ManifestInput {
            name: format!("{}/train", cfg.dataset),
            sha256: dataset_hash(&raw_train),
        },
        ManifestInput {
            name: format!("{}/test", cfg.dataset),
            sha256: dataset_hash(&raw_test),
        },
    ];
    let (mut train, validation) = if cfg.validation_size > 0 {
        let (t, v) = data::split_validation(&raw_train, cfg.validation_size, cfg.data_seed)?;
        (t, Some(v))
    } else {
        (raw_train, None)
    };
    if let Some(n) = cfg.train_size {
        train = data::subsample(&train, n, cfg.data_seed)?;
    }
    if let Some(n) = cfg.n_clean {
        train = data::corrupt_labels(&train, n, cfg.data_seed)?;
    }
    let mut others = vec![&raw_test];
    if let Some(v) = &validation {
        others.push(v);
    }
    let (train, mut rest, mean) = data::preprocess_mean_subtract(&train, &others)?;
    let validation = if validation.is_some() { rest.pop() } else { None };
    let test = rest.pop().expect("test split");
    Ok(MnistData {
        train,
        validation,
        test,
        mean,
        inputs,
    })
}

#[derive(Clone, Debug)]
pub struct MnistResult {
    pub net: MlpNetwork,
    pub history: Vec<EpochRecord>,
    pub val_error: Option<f64>,
    pub test_error: f64,
    pub test_margin: Option<f64>,
}

/// Trains and evaluates one MNIST configuration. The validation split, when
/// present, is what the per-epoch history reports on.
pub fn run_mnist(cfg: &MnistConfig, data: &MnistData, checkpoint: Option<PathBuf>, verbose: bool) -> Result<MnistResult> {
    let init = MlpNetwork::msra_init(&cfg.dims, cfg.init_seed)?;
    let options = TrainOptions {
        checkpoint,
        extras: vec![("input_mean".into(), data.mean.clone().into_dyn())],
        verbose,
    };
    let monitor = data.validation.as_ref().unwrap_or(&data.test);
    let out = train(init, &data.train, Some(monitor), &cfg.train, &cfg.regularizer, &options)?;
    let val_error = data.validation.as_ref().map(|v| eval::error_rate(&out.net, v)).transpose()?;
    let test_error = eval::error_rate(&out.net, &data.test)?;
    let test_margin = if cfg.test_margin {
        Some(eval::mean_margin(&out.net, &data.test, cfg.train.attack_iterations, cfg.margin_convention)?)
    } else {
        None
    };
    Ok(MnistResult {
        net: out.net,
        history: out.history,
        val_error,
        test_error,
        test_margin,
    })
}

/// Table row for a finished MNIST run.
pub fn result_row(method: &str, cfg: &MnistConfig, data: &MnistData, res: &MnistResult) -> eval::ResultRow {
    let reg = &cfg.regularizer;
    let active = reg.lambda != 0.0;
    eval::ResultRow {
        method: method.into(),
        aggregation: if active { reg.aggregation.to_string() } else { "-".into() },
        shrinkage: if active { reg.shrinkage.to_string() } else { "-".into() },
        lambda: reg.lambda,
        c: reg.c,
        d: reg.d,
        seed: cfg.init_seed,
        train_size: data.train.len(),
        n_clean: cfg.n_clean.unwrap_or(data.train.len()),
        val_error: res.val_error.unwrap_or(f64::NAN),
        test_error: res.test_error,
        mean_margin: res.test_margin.unwrap_or(f64::NAN),
    }
}

/// Runs each `(method, config)` cell in order and collects its table row.
pub fn run_cells(cells: &[(String, MnistConfig)], data_root: &Path, verbose: bool) -> Result<Vec<eval::ResultRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    for (method, cfg) in cells {
        let data = prepare_mnist(cfg, data_root)?;
        let res = run_mnist(cfg, &data, None, verbose)?;
        let row = result_row(method, cfg, &data, &res);
        if verbose {
            eprintln!(
                "{method} {}+{} λ={} c={} d={} n={} val-err {:.4} test-err {:.4}",
                row.aggregation, row.shrinkage, row.lambda, row.c, row.d, row.train_size, row.val_error, row.test_error
            );
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Grid over `λ × c × d` for each aggregation/shrinkage pair, selected on
/// the validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub base: MnistConfig,
    pub lambdas: Vec<f64>,
    pub cs: Vec<f64>,
    pub ds: Vec<f64>,
    pub variants: Vec<(Aggregation, Shrinkage)>,
    pub include_baseline: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        use Aggregation::*;
        use Shrinkage::*;
        Self {
            base: MnistConfig {
                validation_size: 5000,
                test_margin: false,
                ..MnistConfig::default()
            },
            lambdas: vec![0.3, 1.0, 3.0],
            cs: vec![0.3, 1.0, 3.0],
            ds: vec![0.3, 1.0],
            variants: vec![(Avg, Lin), (Avg, Inv), (Avg, Exp), (Min, Lin), (Min, Inv), (Min, Exp)],
            include_baseline: true,
        }
    }
}

impl SweepConfig {
    pub fn cells(&self) -> Vec<(String, MnistConfig)> {
        let mut cells = Vec::new();
        if self.include_baseline {
            let mut cfg = self.base.clone();
            cfg.regularizer.lambda = 0.0;
            cells.push(("baseline".to_string(), cfg));
        }
        for &(aggregation, shrinkage) in &self.variants {
            for &lambda in &self.lambdas {
                for &c in &self.cs {
                    for &d in &self.ds {
                        let mut cfg = self.base.clone();
                        cfg.regularizer = RegularizerConfig {
                            lambda,
                            c,
                            d,
                            aggregation,
                            shrinkage,
                            ..self.base.regularizer.clone()
                        };
                        cells.push(("amm".to_string(), cfg));
                    }
                }
            }
        }
        cells
    }
}

/// Best row per `(method, aggregation, shrinkage)` by validation error, in
/// first-appearance order; ties keep the earlier cell.
pub fn select_best(rows: &[eval::ResultRow]) -> Vec<eval::ResultRow> {
    let mut best: Vec<eval::ResultRow> = Vec::new();
    for r in rows {
        match best.iter_mut().find(|b| b.method == r.method && b.aggregation == r.aggregation && b.shrinkage == r.shrinkage) {
            Some(b) if r.val_error < b.val_error => *b = r.clone(),
            Some(_) => {}
            None => best.push(r.clone()),
        }
    }
    best
}

/// Baseline and one regularized configuration over a list of training-set
/// variations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrendConfig {
    pub base: MnistConfig,
    pub amm: RegularizerConfig,
    /// Training subset sizes (less-data) or clean-label counts (noisy-labels).
    pub points: Vec<usize>,
}

impl Default for TrendConfig {
    fn default() -> Self {
        Self {
            base: MnistConfig::default(),
            amm: RegularizerConfig::default(),
            points: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trend {
    LessData,
    NoisyLabels,
}

impl TrendConfig {
    pub fn cells(&self, trend: Trend) -> Vec<(String, MnistConfig)> {
        let mut cells = Vec::new();
        for &n in &self.points {
            for (method, reg) in [("baseline", RegularizerConfig { lambda: 0.0, ..self.amm.clone() }), ("amm", self.amm.clone())] {
                let mut cfg = self.base.clone();
                match trend {
                    Trend::LessData => cfg.train_size = Some(n),
                    Trend::NoisyLabels => cfg.n_clean = Some(n),
                }
                cfg.regularizer = reg;
                cells.push((method.to_string(), cfg));
            }
        }
        cells
    }
}

/// Finite-difference check of `∂‖Δx‖₂/∂θ` for one parameter tensor of one
/// random network, with the attack's class trajectory held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormGradCheck {
    pub network: usize,
    pub dims: String,
    pub parameter: String,
    pub iterations: usize,
    pub max_rel_error: f64,
}

impl eval::CsvRow for NormGradCheck {
    const HEADER: &'static [&'static str] = &["network", "dims", "parameter", "iterations", "max_rel_error"];
}

/// Minimum `|pre-activation|` along a checked attack trajectory.
pub const KINK_CLEARANCE: f64 = 1e-3;

/// Checks the perturbation-norm gradient on `count` random networks with
/// every layer width at most 10. Draws whose trajectory passes within
/// [`KINK_CLEARANCE`] of a ReLU kink are skipped.
pub fn perturbation_gradcheck(seed: u64, count: usize, epsilon: f64) -> Result<Vec<NormGradCheck>> {
    use crate::attack::{deepfool, deepfool_graph, AttackMode, GradientFlow, DEFAULT_MAX_ITERATIONS};
    use crate::autodiff::{finite_difference_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut network = 0;
    while network < count {
        let hidden = rng.random_range(0..=2);
        let mut dims = vec![rng.random_range(2..=10)];
        for _ in 0..hidden {
            dims.push(rng.random_range(2..=10));
        }
        dims.push(if rng.random_bool(0.25) { 1 } else { rng.random_range(3..=10) });
        let mut net = MlpNetwork::msra_init(&dims, rng.random())?;
        // nonzero biases: a bias-free net is positively homogeneous and its
        // DeepFool steps can land exactly on a ReLU kink
        for (name, v) in net.params_mut().iter_mut() {
            if name.ends_with(".bias") {
                v.mapv_inplace(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
            }
        }
        let x = ndarray::Array1::from_shape_fn(dims[0], |_| StandardNormal.sample(&mut rng));
        let label = net.predict(x.view().insert_axis(ndarray::Axis(0)))?[0];
        let attack = match deepfool(&net, x.view(), label, AttackMode::Nearest, DEFAULT_MAX_ITERATIONS) {
            Ok(a) if a.iterations() > 0 => a,
            // redraw: flat gap or already on a boundary
            _ => continue,
        };
        let mut visited = ndarray::Array2::zeros((attack.iterations() + 1, dims[0]));
        let mut at = x.clone();
        visited.row_mut(0).assign(&at);
        for (i, r) in attack.steps.iter().enumerate() {
            at += r;
            visited.row_mut(i + 1).assign(&at);
        }
        // central differences need every visited point away from ReLU kinks
        if net.min_abs_preactivation(visited.view())? < KINK_CLEARANCE {
            continue;
        }
        let trajectory = vec![attack.trajectory.clone()];
        let xb = x.view().insert_axis(ndarray::Axis(0));
        let values = net.params().values().to_vec();
        for (p, name) in net.params().names().iter().enumerate() {
            let f = |v: &Tensor| -> Result<Tensor> {
                let tape = v.tape();
                let params: Vec<Tensor> =
                    values.iter().enumerate().map(|(i, w)| if i == p { v.clone() } else { tape.constant(w.clone()) }).collect();
                let bound = net.bind_tensors(tape, params)?;
                let g = deepfool_graph(&bound, xb, &trajectory, GradientFlow::HighOrder)?;
                g.delta.l2_norm_sq()?.sqrt()?.sum()
            };
            let report = finite_difference_check(f, &values[p], epsilon)?;
            rows.push(NormGradCheck {
                network,
                dims: dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-"),
                parameter: name.clone(),
                iterations: attack.iterations(),
                max_rel_error: report.max_rel_error,
            });
        }
        network += 1;
    }
    Ok(rows)
}

/// Unit direction of `Σ₊x − Σ₋x` over a two-class dataset.
pub fn class_sum_direction(ds: &Dataset) -> [f64; 2] {
    let mut s = [0.0; 2];
    for (x, &l) in ds.inputs().rows().into_iter().zip(ds.labels()) {
        let sign = if l == 1 { 1.0 } else { -1.0 };
        s[0] += sign * x[0];
        s[1] += sign * x[1];
    }
    let n = s[0].hypot(s[1]);
    [s[0] / n, s[1] / n]
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a dataset: shape, labels, and the exact input bits.
pub fn dataset_hash(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((ds.len() as u64).to_le_bytes());
    h.update((ds.dim() as u64).to_le_bytes());
    for v in ds.inputs().iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    for &l in ds.labels() {
        h.update((l as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestInput {
    pub name: String,
    pub sha256: String,
}

/// Everything needed to rerun an experiment bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Effective configuration after flags, file and defaults were merged.
    pub config: serde_json::Value,
    pub inputs: Vec<ManifestInput>,
    /// SHA-256 over the config and every input hash.
    pub content_hash: String,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C, inputs: Vec<ManifestInput>) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(seed.to_le_bytes());
        h.update(config.to_string().as_bytes());
        for i in &inputs {
            h.update(i.name.as_bytes());
            h.update(i.sha256.as_bytes());
        }
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            inputs,
            content_hash: hex::encode(h.finalize()),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        crate::io::write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturbation_norm_gradient_matches_finite_differences() {
        let rows = perturbation_gradcheck(5, 4, 1e-6).unwrap();
        assert!(rows.len() >= 8);
        for r in rows {
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn class_sum_direction_points_right_and_up() {
        let (train, _) = synth_2d(200, 0).unwrap();
        let d = class_sum_direction(&train);
        assert!(d[0] > 0.5 && d[1] > 0.5);
    }

    #[test]
    fn manifest_hash_tracks_inputs() {
        let (a, _) = synth_2d(5, 0).unwrap();
        let (b, _) = synth_2d(5, 1).unwrap();
        assert_eq!(dataset_hash(&a), dataset_hash(&synth_2d(5, 0).unwrap().0));
        assert_ne!(dataset_hash(&a), dataset_hash(&b));
        let cfg = ToyConfig::default();
        let m1 = Manifest::new("toy", 0, &cfg, vec![ManifestInput { name: "train".into(), sha256: dataset_hash(&a) }]).unwrap();
        let m2 = Manifest::new("toy", 0, &cfg, vec![ManifestInput { name: "train".into(), sha256: dataset_hash(&b) }]).unwrap();
        assert_ne!(m1.content_hash, m2.content_hash);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        m1.write(&p).unwrap();
        let back: Manifest = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(back, m1);
    }

    fn row(method: &str, agg: &str, lambda: f64, val_error: f64) -> eval::ResultRow {
        eval::ResultRow {
            method: method.into(),
            aggregation: agg.into(),
            shrinkage: "exp".into(),
            lambda,
            c: 1.0,
            d: 1.0,
            seed: 0,
            train_size: 10,
            n_clean: 10,
            val_error,
            test_error: 0.0,
            mean_margin: 0.0,
        }
    }

    #[test]
    fn sweep_cells_cover_the_grid_once() {
        let sweep = SweepConfig::default();
        let cells = sweep.cells();
        assert_eq!(cells.len(), 1 + 6 * 3 * 3 * 2);
        assert_eq!(cells[0].1.regularizer.lambda, 0.0);
        let mut keys: Vec<String> = cells[1..]
            .iter()
            .map(|(_, c)| {
                let r = &c.regularizer;
                format!("{}{}{}{}{}", r.aggregation, r.shrinkage, r.lambda, r.c, r.d)
            })
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), cells.len() - 1);
        assert!(cells.iter().all(|(_, c)| c.validation_size == 5000));
    }

    #[test]
    fn select_best_keeps_lowest_validation_error_per_variant() {
        let rows = vec![
            row("baseline", "-", 0.0, 0.03),
            row("amm", "min", 1.0, 0.02),
            row("amm", "avg", 1.0, 0.025),
            row("amm", "min", 3.0, 0.015),
            row("amm", "min", 10.0, 0.015),
        ];
        let best = select_best(&rows);
        assert_eq!(best.len(), 3);
        assert_eq!(best[0].method, "baseline");
        assert_eq!((best[1].aggregation.as_str(), best[1].lambda), ("min", 3.0));
        assert_eq!(best[2].aggregation, "avg");
    }

    #[test]
    fn trend_cells_pair_baseline_with_regularized() {
        let cfg = TrendConfig {
            points: vec![10_000, 20_000],
            amm: RegularizerConfig { lambda: 2.0, ..RegularizerConfig::default() },
            ..TrendConfig::default()
        };
        let cells = cfg.cells(Trend::NoisyLabels);
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0].1.regularizer.lambda, 0.0);
        assert_eq!(cells[1].1.regularizer.lambda, 2.0);
        assert_eq!(cells[3].1.n_clean, Some(20_000));
        assert!(cells.iter().all(|(_, c)| c.train_size.is_none()));
    }
}
