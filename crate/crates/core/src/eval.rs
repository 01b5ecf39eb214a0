//! Error rates, margin summaries, decision-boundary grids, the exact 2-D
//! hard-margin separator, and CSV reports.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::attack;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{predictions, MlpNetwork};

/// Rows per forward pass when evaluating whole datasets.
const EVAL_CHUNK: usize = 1000;

/// Fraction of samples whose (lowest-index) argmax differs from the label.
pub fn error_rate(net: &MlpNetwork, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("error_rate", "empty dataset"));
    }
    Ok(1.0 - accuracy_count(net, ds)? as f64 / ds.len() as f64)
}

pub fn accuracy(net: &MlpNetwork, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("accuracy", "empty dataset"));
    }
    Ok(accuracy_count(net, ds)? as f64 / ds.len() as f64)
}

fn accuracy_count(net: &MlpNetwork, ds: &Dataset) -> Result<usize> {
    let mut correct = 0;
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(ds.len());
        let preds = net.predict(ds.inputs().slice(ndarray::s![start..end, ..]))?;
        correct += preds.iter().zip(&ds.labels()[start..end]).filter(|(p, l)| p == l).count();
    }
    Ok(correct)
}

/// Which samples enter the mean DeepFool margin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginConvention {
    /// All samples, misclassified ones counting as zero.
    #[default]
    AllZeroMisclassified,
    CorrectOnly,
}

/// Mean DeepFool perturbation norm over `ds`.
pub fn mean_margin(net: &MlpNetwork, ds: &Dataset, max_iterations: usize, convention: MarginConvention) -> Result<f64> {
    let report = attack::margin_estimate(net, ds.inputs().view(), ds.labels(), max_iterations)?;
    Ok(match convention {
        MarginConvention::AllZeroMisclassified => report.mean,
        MarginConvention::CorrectOnly if report.correct == 0 => 0.0,
        MarginConvention::CorrectOnly => report.per_sample.iter().sum::<f64>() / report.correct as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
}

impl CsvRow for GridPoint {
    const HEADER: &'static [&'static str] = &["x", "y", "class"];
}

/// Predicted class on a `resolution × resolution` lattice spanning both
/// ranges inclusively, row-major in `y` then `x`.
pub fn boundary_grid(net: &MlpNetwork, x_range: (f64, f64), y_range: (f64, f64), resolution: usize) -> Result<Vec<GridPoint>> {
    if net.input_dim() != 2 {
        return Err(Error::invalid("boundary_grid", format!("model input dim is {}, need 2", net.input_dim())));
    }
    if resolution < 2 {
        return Err(Error::invalid("boundary_grid", "resolution must be >= 2"));
    }
    let at = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / (resolution - 1) as f64;
    let mut pts = Array2::zeros((resolution * resolution, 2));
    for j in 0..resolution {
        for i in 0..resolution {
            pts[[j * resolution + i, 0]] = at(x_range, i);
            pts[[j * resolution + i, 1]] = at(y_range, j);
        }
    }
    let classes = predictions(&net.logits(pts.view())?);
    Ok(pts
        .rows()
        .into_iter()
        .zip(classes)
        .map(|(p, class)| GridPoint { x: p[0], y: p[1], class })
        .collect())
}

/// A linear separator `w·x + b` with unit `w`; positive side is class 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separator {
    pub w: [f64; 2],
    pub b: f64,
    pub margin: f64,
}

fn signs(ds: &Dataset) -> Result<Vec<f64>> {
    if ds.dim() != 2 || ds.num_classes() != 2 {
        return Err(Error::invalid("hard_margin_oracle", "needs 2-D inputs with 2 classes"));
    }
    Ok(ds.labels().iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect())
}

/// Geometric margin `min_k y_k (w·x_k + b) / ‖w‖` of a line on a 2-D,
/// two-class dataset (negative when it misclassifies).
pub fn geometric_margin(w: [f64; 2], b: f64, ds: &Dataset) -> Result<f64> {
    let y = signs(ds)?;
    let norm = w[0].hypot(w[1]);
    if norm == 0.0 {
        return Err(Error::invalid("geometric_margin", "zero normal vector"));
    }
    Ok(ds
        .inputs()
        .rows()
        .into_iter()
        .zip(&y)
        .map(|(x, s)| s * (w[0] * x[0] + w[1] * x[1] + b) / norm)
        .fold(f64::INFINITY, f64::min))
}

/// Geometric margin of a binary 2-D linear network (`f = w·x + b`).
pub fn linear_net_separator(net: &MlpNetwork) -> Result<([f64; 2], f64)> {
    if net.num_layers() != 1 || !net.is_binary() || net.input_dim() != 2 {
        return Err(Error::invalid("linear_net_separator", "needs a single-layer binary 2-D network"));
    }
    let w = net.weight(0);
    Ok(([w[[0, 0]], w[[0, 1]]], net.bias(0)[0]))
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull vertices (monotone chain, collinear points dropped).
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Margin of the unit normal `w` (best offset for that direction) against
/// the two hulls: `(min_{+} w·x - max_{-} w·x) / 2`, with that offset.
fn margin_for_direction(w: [f64; 2], pos: &[[f64; 2]], neg: &[[f64; 2]]) -> (f64, f64) {
    let dot = |p: &[f64; 2]| w[0] * p[0] + w[1] * p[1];
    let lo_pos = pos.iter().map(dot).fold(f64::INFINITY, f64::min);
    let hi_neg = neg.iter().map(dot).fold(f64::NEG_INFINITY, f64::max);
    ((lo_pos - hi_neg) / 2.0, -(lo_pos + hi_neg) / 2.0)
}

/// Exact maximum-margin separating line of a separable 2-D dataset.
///
/// The optimum is supported either by one point of each class (normal along
/// their difference) or by two points of one class and one of the other
/// (normal orthogonal to the pair). Every such candidate over the two convex
/// hulls is scored and the best feasible one returned.
pub fn hard_margin_oracle(ds: &Dataset) -> Result<Separator> {
    let y = signs(ds)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (x, s) in ds.inputs().rows().into_iter().zip(&y) {
        if *s > 0.0 { &mut pos } else { &mut neg }.push([x[0], x[1]]);
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("hard_margin_oracle", "both classes must be present"));
    }
    let pos = convex_hull(pos);
    let neg = convex_hull(neg);

    let mut directions: Vec<[f64; 2]> = Vec::new();
    for p in &pos {
        for q in &neg {
            directions.push([p[0] - q[0], p[1] - q[1]]);
        }
    }
    for hull in [&pos, &neg] {
        for i in 0..hull.len() {
            for j in i + 1..hull.len() {
                let d = [hull[j][0] - hull[i][0], hull[j][1] - hull[i][1]];
                directions.push([-d[1], d[0]]);
                directions.push([d[1], -d[0]]);
            }
        }
    }
    let mut best: Option<Separator> = None;
    for d in directions {
        let n = d[0].hypot(d[1]);
        if n == 0.0 {
            continue;
        }
        let w = [d[0] / n, d[1] / n];
        let (margin, b) = margin_for_direction(w, &pos, &neg);
        if best.is_none_or(|s| margin > s.margin) {
            best = Some(Separator { w, b, margin });
        }
    }
    match best {
        Some(s) if s.margin > 0.0 => Ok(s),
        _ => Err(Error::Infeasible),
    }
}

/// Types with a fixed CSV header matching their serialized field order.
pub trait CsvRow: Serialize {
    const HEADER: &'static [&'static str];
}

/// Writes `rows` under the type's fixed header (header only when empty).
pub fn report_csv<T: CsvRow>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(T::HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a file written by [`report_csv`], checking the header.
pub fn read_report_csv<T: CsvRow + serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != T::HEADER {
        return Err(Error::invalid("read_report_csv", format!("{}: unexpected header {header:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

impl CsvRow for crate::autodiff::PrimitiveCheck {
    const HEADER: &'static [&'static str] = &["name", "order", "max_rel_error"];
}

/// One experiment cell of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub aggregation: String,
    pub shrinkage: String,
    pub lambda: f64,
    pub c: f64,
    pub d: f64,
    pub seed: u64,
    pub train_size: usize,
    pub n_clean: usize,
    pub val_error: f64,
    pub test_error: f64,
    pub mean_margin: f64,
}

impl CsvRow for ResultRow {
    const HEADER: &'static [&'static str] = &[
        "method",
        "aggregation",
        "shrinkage",
        "lambda",
        "c",
        "d",
        "seed",
        "train_size",
        "n_clean",
        "val_error",
        "test_error",
        "mean_margin",
    ];
}

/// Unit-norm direction of `v` (2-D).
pub fn unit(v: ArrayView1<f64>) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    [v[0] / n, v[1] / n]
}

/// Angle in degrees between two 2-D vectors.
pub fn angle_deg(a: [f64; 2], b: [f64; 2]) -> f64 {
    let cos = (a[0] * b[0] + a[1] * b[1]) / (a[0].hypot(a[1]) * b[0].hypot(b[1]));
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}
