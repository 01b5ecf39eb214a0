//! Dense ReLU classifier, initialization, loss and checkpoints.
//!
//! A network with a single output unit `f` is a binary classifier; it exposes
//! the two logits `(-f/2, f/2)` so that every downstream component can treat
//! it like any other softmax classifier (the logit gap is exactly `f`).

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{argmax, Tape, Tensor};
use crate::error::{Error, Result};

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParameterSet {
    pub fn new(entries: Vec<(String, ArrayD<f64>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for (name, value) in entries {
            if names.contains(&name) {
                return Err(Error::invalid("ParameterSet", format!("duplicate name {name}")));
            }
            names.push(name);
            values.push(value);
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Number of scalar entries across all tensors.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Feed-forward classifier: affine layers with ReLU between hidden layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNetwork {
    dims: Vec<usize>,
    params: ParameterSet,
}

pub(crate) fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

impl MlpNetwork {
    /// Wraps existing parameters, checking them against `dims`.
    pub fn new(dims: Vec<usize>, params: ParameterSet) -> Result<Self> {
        validate_dims(&dims)?;
        if params.len() != 2 * (dims.len() - 1) {
            return Err(Error::invalid(
                "MlpNetwork",
                format!("expected {} tensors, got {}", 2 * (dims.len() - 1), params.len()),
            ));
        }
        for layer in 0..dims.len() - 1 {
            let expect = [
                (weight_name(layer), vec![dims[layer + 1], dims[layer]]),
                (bias_name(layer), vec![dims[layer + 1]]),
            ];
            for (k, (name, shape)) in expect.into_iter().enumerate() {
                let i = 2 * layer + k;
                if params.names[i] != name {
                    return Err(Error::invalid("MlpNetwork", format!("tensor {i} is {}, expected {name}", params.names[i])));
                }
                if params.values[i].shape() != shape.as_slice() {
                    return Err(Error::shape("MlpNetwork", params.values[i].shape(), &shape));
                }
            }
        }
        Ok(Self { dims, params })
    }

    /// Builds a network from explicit `(weight, bias)` pairs.
    pub fn from_layers(layers: Vec<(Array2<f64>, Vec<f64>)>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::invalid("MlpNetwork", "no layers"));
        };
        let mut dims = vec![first.0.ncols()];
        let mut entries = Vec::new();
        for (i, (w, b)) in layers.into_iter().enumerate() {
            dims.push(w.nrows());
            entries.push((weight_name(i), w.into_dyn()));
            entries.push((bias_name(i), ArrayD::from_shape_vec(IxDyn(&[b.len()]), b).unwrap()));
        }
        Self::new(dims, ParameterSet::new(entries)?)
    }

    /// He ("MSRA") initialization: weights ~ N(0, 2/fan_in), zero biases.
    pub fn msra_init(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for layer in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            entries.push((weight_name(layer), ArrayD::from_shape_vec(IxDyn(&[fan_out, fan_in]), w).unwrap()));
            entries.push((bias_name(layer), ArrayD::zeros(IxDyn(&[fan_out]))));
        }
        Self::new(dims.to_vec(), ParameterSet::new(entries)?)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    /// Number of logits (2 for a single-output binary network).
    pub fn num_classes(&self) -> usize {
        (*self.dims.last().unwrap()).max(2)
    }

    pub fn is_binary(&self) -> bool {
        *self.dims.last().unwrap() == 1
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        self.params.values[2 * layer].view().into_dimensionality::<Ix2>().unwrap()
    }

    pub fn bias(&self, layer: usize) -> ndarray::ArrayView1<'_, f64> {
        self.params.values[2 * layer + 1].view().into_dimensionality::<Ix1>().unwrap()
    }

    /// Records the parameters on `tape` as leaves.
    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> BoundNetwork<'_> {
        let params = self.params.values.iter().map(|v| tape.leaf(v.clone(), requires_grad)).collect();
        BoundNetwork {
            net: self,
            tape: tape.clone(),
            params,
        }
    }

    /// Uses caller-recorded tensors as the parameters, in [`ParameterSet`]
    /// order. Shapes must match the network's.
    pub fn bind_tensors(&self, tape: &Tape, params: Vec<Tensor>) -> Result<BoundNetwork<'_>> {
        if params.len() != self.params.values.len() {
            return Err(Error::shape("bind_tensors", &[params.len()], &[self.params.values.len()]));
        }
        for (t, v) in params.iter().zip(&self.params.values) {
            if t.shape() != v.shape() {
                return Err(Error::shape("bind_tensors", t.shape(), v.shape()));
            }
            if !t.tape().same_as(tape) {
                return Err(Error::ForeignTensor);
            }
        }
        Ok(BoundNetwork {
            net: self,
            tape: tape.clone(),
            params,
        })
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("forward", x.shape(), &[x.nrows(), self.input_dim()]));
        }
        Ok(())
    }

    /// Logits without recording anything, shape `(B, classes)`.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for layer in 0..self.num_layers() {
            h = h.dot(&self.weight(layer).t()) + &self.bias(layer);
            if layer + 1 < self.num_layers() {
                h.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            }
        }
        Ok(if self.is_binary() { binary_head(&h) } else { h })
    }

    /// Smallest `|pre-activation|` over all hidden units and rows; the
    /// distance (in activation space) to the nearest ReLU kink.
    pub fn min_abs_preactivation(&self, x: ArrayView2<f64>) -> Result<f64> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        let mut min = f64::INFINITY;
        for layer in 0..self.num_layers() - 1 {
            h = h.dot(&self.weight(layer).t()) + &self.bias(layer);
            min = h.iter().fold(min, |m, v| m.min(v.abs()));
            h.mapv_inplace(|v| v.max(0.0));
        }
        Ok(min)
    }

    /// Predicted class per row; ties go to the lower class index.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(predictions(&self.logits(x)?))
    }

    /// Logits `(B, K)` and their Jacobians with respect to the input
    /// `(B, K, D)`, computed by propagating one seed per class through the
    /// recorded ReLU masks.
    pub fn logits_and_input_jacobian(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array3<f64>)> {
        self.check_input(&x)?;
        let b = x.nrows();
        let layers = self.num_layers();
        let mut masks: Vec<Array2<f64>> = Vec::with_capacity(layers - 1);
        let mut h = x.to_owned();
        for layer in 0..layers {
            h = h.dot(&self.weight(layer).t()) + &self.bias(layer);
            if layer + 1 < layers {
                masks.push(h.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                h.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            }
        }
        let logits = if self.is_binary() { binary_head(&h) } else { h };
        let k = self.num_classes();

        let last = self.weight(layers - 1);
        let top = if self.is_binary() { binary_head(&last.t().to_owned()).t().to_owned() } else { last.to_owned() };
        let width = top.ncols();
        let mut g = Array2::<f64>::zeros((b * k, width));
        for s in 0..b {
            g.slice_mut(ndarray::s![s * k..(s + 1) * k, ..]).assign(&top);
        }
        for layer in (0..layers - 1).rev() {
            let mask = &masks[layer];
            for (row, mut grow) in g.axis_iter_mut(Axis(0)).enumerate() {
                grow *= &mask.row(row / k);
            }
            g = g.dot(&self.weight(layer));
        }
        let d = self.input_dim();
        let jac = g.into_shape_with_order((b, k, d)).expect("B*K rows of width D");
        Ok((logits, jac))
    }

    /// Writes a versioned checkpoint, replacing `path` atomically.
    pub fn save(&self, path: &Path, extras: &[(&str, &ArrayD<f64>)]) -> Result<()> {
        let mut tensors: Vec<(&str, &ArrayD<f64>)> = self.params.iter().collect();
        tensors.extend_from_slice(extras);
        checkpoint::write(path, &tensors)
    }

    /// Loads a checkpoint written by [`MlpNetwork::save`]; returns the network
    /// and any extra tensors stored alongside it.
    pub fn load(path: &Path) -> Result<(Self, Vec<(String, ArrayD<f64>)>)> {
        let tensors = checkpoint::read(path)?;
        let (layers, extras): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| n.starts_with("layer"));
        if layers.is_empty() {
            return Err(Error::invalid("checkpoint", "no layer tensors"));
        }
        let mut dims = vec![layers[0].1.shape().get(1).copied().unwrap_or(0)];
        for (name, v) in layers.iter().step_by(2) {
            if !name.ends_with(".weight") {
                return Err(Error::invalid("checkpoint", format!("unexpected tensor order at {name}")));
            }
            dims.push(v.shape()[0]);
        }
        let net = Self::new(dims, ParameterSet::new(layers)?)?;
        Ok((net, extras))
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::invalid("layer dims", format!("need input and output widths, got {dims:?}")));
    }
    if dims.contains(&0) {
        return Err(Error::invalid("layer dims", format!("zero width in {dims:?}")));
    }
    Ok(())
}

/// `(B, 1) -> (B, 2)`: logits `(-f/2, f/2)`.
fn binary_head(f: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((f.nrows(), 2));
    for (i, &v) in f.column(0).iter().enumerate() {
        out[[i, 0]] = v * -0.5;
        out[[i, 1]] = v * 0.5;
    }
    out
}

pub fn predictions(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("standard layout")))
        .collect()
}

/// Network parameters recorded on a tape.
pub struct BoundNetwork<'a> {
    net: &'a MlpNetwork,
    tape: Tape,
    params: Vec<Tensor>,
}

impl BoundNetwork<'_> {
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_refs(&self) -> Vec<&Tensor> {
        self.params.iter().collect()
    }

    pub fn network(&self) -> &MlpNetwork {
        self.net
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Differentiable logits for a `(B, D)` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.net.input_dim() {
            return Err(Error::shape("forward", shape, &[shape.first().copied().unwrap_or(0), self.net.input_dim()]));
        }
        let layers = self.net.num_layers();
        let mut h = x.clone();
        for layer in 0..layers {
            let w = &self.params[2 * layer];
            let b = &self.params[2 * layer + 1];
            h = h.matmul_t(w, false, true)?.add_broadcast(b)?;
            if layer + 1 < layers {
                h = h.relu()?;
            }
        }
        if self.net.is_binary() {
            let head = self.tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![-0.5, 0.5]).unwrap());
            h = h.matmul(&head)?;
        }
        Ok(h)
    }
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", shape, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {} classes", shape[1])));
    }
    let per_sample = logits.log_sum_exp()?.sub(&logits.gather(labels)?)?;
    per_sample.sum()?.scale(1.0 / labels.len() as f64)
}

/// Binary container for named `f64` tensors.
///
/// Layout (all integers little-endian):
///
/// ```text
/// magic    8 bytes   "AMMCKPT\0"
/// version  u32       currently 1
/// count    u32       number of tensors
/// repeated count times:
///   name_len u32, name (UTF-8), ndim u32, dims u64 × ndim,
///   payload  f64 × prod(dims)
/// ```
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"AMMCKPT\0";
    pub const VERSION: u32 = 1;

    pub fn encode(tensors: &[(&str, &ArrayD<f64>)]) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, value) in tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
            for &d in value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.bytes.len() - self.pos < n {
                return Err(Error::invalid("checkpoint", format!("truncated at byte {}", self.pos)));
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }

        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Vec<(String, ArrayD<f64>)>> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::invalid("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::invalid("checkpoint", format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::invalid("checkpoint", "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::invalid("checkpoint", "tensor too large"))?)?;
            let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            out.push((name, ArrayD::from_shape_vec(IxDyn(&dims), values).unwrap()));
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid("checkpoint", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(out)
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn write(path: &Path, tensors: &[(&str, &ArrayD<f64>)]) -> Result<()> {
        crate::io::write_atomic(path, &encode(tensors))
    }

    pub fn read(path: &Path) -> Result<Vec<(String, ArrayD<f64>)>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode(&bytes)
    }
}
