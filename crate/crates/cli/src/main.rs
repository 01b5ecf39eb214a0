//! `amm`: experiments for adversarial margin maximization.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amm_core::attack::GradientFlow;
use amm_core::data;
use amm_core::eval::{self, CsvRow, MarginConvention};
use amm_core::experiment::{
    self, run_cells, select_best, Manifest, ManifestInput, MnistConfig, SweepConfig, ToyConfig, Trend, TrendConfig,
};
use amm_core::model::MlpNetwork;
use amm_core::regularizer::{Aggregation, RegularizerConfig, Shrinkage};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "amm", version, about = "Adversarial margin maximization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Linear classifier on the 2-D rectangles; boundary grid and margin vs the exact optimum.
    Toy(ToyArgs),
    /// Train an MNIST MLP; writes checkpoint, history and result row.
    Train(TrainArgs),
    /// Test error of a checkpoint.
    Eval(EvalArgs),
    /// Mean DeepFool margin of a checkpoint on the test set.
    Margin(EvalArgs),
    /// Grid over λ, c, d per aggregation/shrinkage, selected on the validation split.
    Sweep(GridArgs),
    /// Finite-difference checks of the perturbation-norm gradient and every primitive.
    Gradcheck(GradcheckArgs),
    /// Error vs training-set size, baseline and regularized.
    LessData(GridArgs),
    /// Error vs number of clean labels, baseline and regularized.
    NoisyLabels(GridArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Seeds initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with fields named as in the config structs.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Dataset root (default: $AMM_DATA_DIR, else ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Per-epoch progress on stderr.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Copy, Clone, ValueEnum)]
enum AggArg {
    Avg,
    Min,
}

#[derive(Copy, Clone, ValueEnum)]
enum ShrinkArg {
    Lin,
    Exp,
    Inv,
}

#[derive(Copy, Clone, ValueEnum)]
enum ConventionArg {
    All,
    Correct,
}

#[derive(Args, Clone, Default)]
struct RegFlags {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    d: Option<f64>,
    #[arg(long, value_enum)]
    agg: Option<AggArg>,
    #[arg(long, value_enum)]
    shrink: Option<ShrinkArg>,
    /// Treat ∇g inside the attack as a constant (ablation).
    #[arg(long)]
    no_high_order: bool,
}

impl RegFlags {
    fn apply(&self, reg: &mut RegularizerConfig) {
        if let Some(v) = self.lambda {
            reg.lambda = v;
        }
        if let Some(v) = self.c {
            reg.c = v;
        }
        if let Some(v) = self.d {
            reg.d = v;
        }
        if let Some(a) = self.agg {
            reg.aggregation = match a {
                AggArg::Avg => Aggregation::Avg,
                AggArg::Min => Aggregation::Min,
            };
        }
        if let Some(s) = self.shrink {
            reg.shrinkage = match s {
                ShrinkArg::Lin => Shrinkage::Lin,
                ShrinkArg::Exp => Shrinkage::Exp,
                ShrinkArg::Inv => Shrinkage::Inv,
            };
        }
        if self.no_high_order {
            reg.gradient_flow = GradientFlow::MaskedGradient;
        }
    }
}

#[derive(Args, Clone, Default)]
struct MnistFlags {
    /// Subdirectory of the data root holding the IDX files.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    n_clean: Option<usize>,
    #[arg(long)]
    validation_size: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
}

impl MnistFlags {
    fn apply(&self, cfg: &mut MnistConfig, seed: Option<u64>) {
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.train.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.base_lr = v;
        }
        if let Some(v) = self.train_size {
            cfg.train_size = Some(v);
        }
        if let Some(v) = self.n_clean {
            cfg.n_clean = Some(v);
        }
        if let Some(v) = self.validation_size {
            cfg.validation_size = v;
        }
        if let Some(v) = self.data_seed {
            cfg.data_seed = v;
        }
        if let Some(s) = seed {
            cfg.init_seed = s;
            cfg.train.seed = s;
        }
    }
}

#[derive(Args)]
struct ToyArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    reg: RegFlags,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    reg: RegFlags,
    #[command(flatten)]
    mnist: MnistFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "mnist")]
    dataset: String,
    /// DeepFool iteration budget (margin only).
    #[arg(long, default_value_t = amm_core::attack::DEFAULT_MAX_ITERATIONS)]
    iterations: usize,
    /// Average over all samples (misclassified count 0) or correct ones only.
    #[arg(long, value_enum, default_value = "all")]
    convention: ConventionArg,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    reg: RegFlags,
    #[command(flatten)]
    mnist: MnistFlags,
    /// Subset sizes or clean-label counts (comma separated).
    #[arg(long, value_delimiter = ',')]
    points: Option<Vec<usize>>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 20)]
    networks: usize,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
}

/// Defaults, overridden by the config file when given.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("config {}", p.display()))
        }
    }
}

fn data_root(common: &Common) -> PathBuf {
    data::data_dir(common.data_dir.as_deref())
}

fn prepare_out(common: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(&common.out)
}

fn write_manifest<C: Serialize>(out: &Path, command: &str, seed: u64, cfg: &C, inputs: Vec<ManifestInput>) -> Result<()> {
    Manifest::new(command, seed, cfg, inputs)?.write(&out.join("manifest.json"))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ToySummary {
    aggregation: String,
    shrinkage: String,
    seed: u64,
    w0: f64,
    w1: f64,
    b: f64,
    margin: f64,
    oracle_margin: f64,
    margin_ratio: f64,
    angle_to_class_sum_deg: f64,
    train_accuracy: f64,
    test_accuracy: f64,
}

impl CsvRow for ToySummary {
    const HEADER: &'static [&'static str] = &[
        "aggregation",
        "shrinkage",
        "seed",
        "w0",
        "w1",
        "b",
        "margin",
        "oracle_margin",
        "margin_ratio",
        "angle_to_class_sum_deg",
        "train_accuracy",
        "test_accuracy",
    ];
}

fn toy(args: ToyArgs) -> Result<()> {
    let mut cfg: ToyConfig = load_config(args.common.config.as_deref())?;
    args.reg.apply(&mut cfg.regularizer);
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(s) = args.common.seed {
        cfg.data_seed = s;
        cfg.train.seed = s;
    }
    let out = prepare_out(&args.common)?;
    let res = experiment::run_toy(&cfg)?;
    let summary = ToySummary {
        aggregation: cfg.regularizer.aggregation.to_string(),
        shrinkage: cfg.regularizer.shrinkage.to_string(),
        seed: cfg.train.seed,
        w0: res.separator.w[0],
        w1: res.separator.w[1],
        b: res.separator.b,
        margin: res.separator.margin,
        oracle_margin: res.oracle.margin,
        margin_ratio: res.separator.margin / res.oracle.margin,
        angle_to_class_sum_deg: eval::angle_deg(res.separator.w, experiment::class_sum_direction(&res.train_set)),
        train_accuracy: res.train_accuracy,
        test_accuracy: res.test_accuracy,
    };
    eval::report_csv(&res.grid, &out.join("grid.csv"))?;
    eval::report_csv(&res.history, &out.join("history.csv"))?;
    eval::report_csv(std::slice::from_ref(&summary), &out.join("summary.csv"))?;
    let inputs = vec![ManifestInput {
        name: "synth-2d/train".into(),
        sha256: experiment::dataset_hash(&res.train_set),
    }];
    write_manifest(out, "toy", cfg.train.seed, &cfg, inputs)?;
    println!(
        "{}+{}: margin {:.4} (oracle {:.4}, ratio {:.3}), test accuracy {:.4}",
        summary.aggregation, summary.shrinkage, summary.margin, summary.oracle_margin, summary.margin_ratio, summary.test_accuracy
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg: MnistConfig = load_config(args.common.config.as_deref())?;
    args.reg.apply(&mut cfg.regularizer);
    args.mnist.apply(&mut cfg, args.common.seed);
    let out = prepare_out(&args.common)?;
    let prepared = experiment::prepare_mnist(&cfg, &data_root(&args.common))?;
    let ckpt = out.join("model.ckpt");
    let res = experiment::run_mnist(&cfg, &prepared, Some(ckpt), args.common.verbose)?;
    let method = if cfg.regularizer.lambda == 0.0 { "baseline" } else { "amm" };
    let row = experiment::result_row(method, &cfg, &prepared, &res);
    eval::report_csv(&res.history, &out.join("history.csv"))?;
    eval::report_csv(std::slice::from_ref(&row), &out.join("result.csv"))?;
    write_manifest(out, "train", cfg.init_seed, &cfg, prepared.inputs.clone())?;
    println!(
        "test error {:.4}{}",
        res.test_error,
        res.test_margin.map_or(String::new(), |m| format!(", mean test margin {m:.4}"))
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalRow {
    checkpoint: String,
    dataset: String,
    samples: usize,
    error_rate: f64,
    mean_margin: Option<f64>,
}

impl CsvRow for EvalRow {
    const HEADER: &'static [&'static str] = &["checkpoint", "dataset", "samples", "error_rate", "mean_margin"];
}

#[derive(Serialize)]
struct EvalManifestConfig<'a> {
    checkpoint: &'a Path,
    dataset: &'a str,
    iterations: usize,
    margin: bool,
    convention: MarginConvention,
}

fn evaluate(args: EvalArgs, with_margin: bool) -> Result<()> {
    let out = prepare_out(&args.common)?;
    let (net, extras) = MlpNetwork::load(&args.checkpoint)?;
    let test = data::load_mnist_dir(&data_root(&args.common).join(&args.dataset), data::MnistSplit::Test)?;
    let test = match extras.iter().find(|(k, _)| k == "input_mean") {
        Some((_, mean)) => {
            let mean = mean.clone().into_dimensionality::<ndarray::Ix1>().context("input_mean must be a vector")?;
            data::subtract_mean(&test, &mean)?
        }
        None => test,
    };
    let error_rate = eval::error_rate(&net, &test)?;
    let convention = match args.convention {
        ConventionArg::All => MarginConvention::AllZeroMisclassified,
        ConventionArg::Correct => MarginConvention::CorrectOnly,
    };
    let mean_margin = if with_margin { Some(eval::mean_margin(&net, &test, args.iterations, convention)?) } else { None };
    let row = EvalRow {
        checkpoint: args.checkpoint.display().to_string(),
        dataset: args.dataset.clone(),
        samples: test.len(),
        error_rate,
        mean_margin,
    };
    let name = if with_margin { "margin.csv" } else { "eval.csv" };
    eval::report_csv(std::slice::from_ref(&row), &out.join(name))?;
    let ckpt_bytes = std::fs::read(&args.checkpoint).with_context(|| args.checkpoint.display().to_string())?;
    let inputs = vec![
        ManifestInput {
            name: "checkpoint".into(),
            sha256: experiment::sha256_hex(&ckpt_bytes),
        },
        ManifestInput {
            name: format!("{}/test", args.dataset),
            sha256: experiment::dataset_hash(&test),
        },
    ];
    let cfg = EvalManifestConfig {
        checkpoint: &args.checkpoint,
        dataset: &args.dataset,
        iterations: args.iterations,
        margin: with_margin,
        convention,
    };
    write_manifest(out, if with_margin { "margin" } else { "eval" }, 0, &cfg, inputs)?;
    match mean_margin {
        Some(m) => println!("test error {error_rate:.4}, mean margin {m:.4}"),
        None => println!("test error {error_rate:.4}"),
    }
    Ok(())
}

fn sweep(args: GridArgs) -> Result<()> {
    let mut cfg: SweepConfig = load_config(args.common.config.as_deref())?;
    args.reg.apply(&mut cfg.base.regularizer);
    args.mnist.apply(&mut cfg.base, args.common.seed);
    if cfg.base.validation_size == 0 {
        bail!("sweep needs a validation split (validation_size > 0)");
    }
    let out = prepare_out(&args.common)?;
    let root = data_root(&args.common);
    let inputs = experiment::prepare_mnist(&cfg.base, &root)?.inputs;
    let rows = run_cells(&cfg.cells(), &root, args.common.verbose)?;
    eval::report_csv(&rows, &out.join("sweep.csv"))?;
    let table = select_best(&rows);
    eval::report_csv(&table, &out.join("table.csv"))?;
    write_manifest(out, "sweep", cfg.base.init_seed, &cfg, inputs)?;
    for r in &table {
        println!(
            "{:<8} {:>3}+{:<3} λ={:<6} c={:<6} d={:<6} val {:.4} test {:.4}",
            r.method, r.aggregation, r.shrinkage, r.lambda, r.c, r.d, r.val_error, r.test_error
        );
    }
    Ok(())
}

fn trend(args: GridArgs, kind: Trend) -> Result<()> {
    let mut cfg: TrendConfig = load_config(args.common.config.as_deref())?;
    args.reg.apply(&mut cfg.amm);
    args.mnist.apply(&mut cfg.base, args.common.seed);
    if let Some(p) = &args.points {
        cfg.points = p.clone();
    }
    if cfg.points.is_empty() {
        bail!("no points given (--points or `points` in the config file)");
    }
    if cfg.amm.lambda == 0.0 {
        bail!("the regularized arm needs lambda > 0 (--lambda or `amm.lambda`)");
    }
    let out = prepare_out(&args.common)?;
    let root = data_root(&args.common);
    let inputs = experiment::prepare_mnist(&cfg.base, &root)?.inputs;
    let rows = run_cells(&cfg.cells(kind), &root, args.common.verbose)?;
    eval::report_csv(&rows, &out.join("trend.csv"))?;
    let name = match kind {
        Trend::LessData => "less-data",
        Trend::NoisyLabels => "noisy-labels",
    };
    write_manifest(out, name, cfg.base.init_seed, &cfg, inputs)?;
    for r in &rows {
        println!("{:<8} n={:<6} clean={:<6} test {:.4}", r.method, r.train_size, r.n_clean, r.test_error);
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckManifestConfig {
    networks: usize,
    epsilon: f64,
    seed: u64,
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    const NORM_TOL: f64 = 1e-4;
    const PRIMITIVE_TOL: f64 = 1e-6;
    let out = prepare_out(&args.common)?;
    let seed = args.common.seed.unwrap_or(0);
    let norm_rows = experiment::perturbation_gradcheck(seed, args.networks, args.epsilon)?;
    let prim_rows = amm_core::autodiff::check_primitives(seed, 10, 1e-5)?;
    eval::report_csv(&norm_rows, &out.join("gradcheck.csv"))?;
    eval::report_csv(&prim_rows, &out.join("primitives.csv"))?;
    let cfg = GradcheckManifestConfig {
        networks: args.networks,
        epsilon: args.epsilon,
        seed,
    };
    write_manifest(out, "gradcheck", seed, &cfg, Vec::new())?;
    let worst_norm = norm_rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let worst_prim = prim_rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let ok = worst_norm < NORM_TOL && worst_prim < PRIMITIVE_TOL;
    println!(
        "perturbation-norm gradient: {} checks over {} networks, worst {:.2e} (< {NORM_TOL:e})",
        norm_rows.len(),
        args.networks,
        worst_norm
    );
    println!("primitives: {} checks, worst {:.2e} (< {PRIMITIVE_TOL:e})", prim_rows.len(), worst_prim);
    println!("{}", if ok { "all checks passed" } else { "gradient check FAILED" });
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Toy(a) => toy(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => evaluate(a, false)?,
        Command::Margin(a) => evaluate(a, true)?,
        Command::Sweep(a) => sweep(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::LessData(a) => trend(a, Trend::LessData)?,
        Command::NoisyLabels(a) => trend(a, Trend::NoisyLabels)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
