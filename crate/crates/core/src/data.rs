//! Datasets: the two-rectangle 2-D problem, MNIST IDX files, and the
//! subsampling / label-noise transforms.

use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "AMM_DATA_DIR";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetMeta {
    pub source: String,
    pub preprocessing: Vec<String>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize, meta: DatasetMeta) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::shape("Dataset::new", &[inputs.nrows()], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid("Dataset::new", format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            meta,
        })
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            meta: self.meta.clone(),
        }
    }

    fn with_step(mut self, step: String, seed: Option<u64>) -> Dataset {
        self.meta.preprocessing.push(step);
        if seed.is_some() {
            self.meta.seed = seed;
        }
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Class-0 rectangle `[x0 range] × [x1 range]`.
pub const TOY_NEG_RECT: ([f64; 2], [f64; 2]) = ([-1.01, -0.99], [-4.0, 2.0]);
/// Class-1 rectangle.
pub const TOY_POS_RECT: ([f64; 2], [f64; 2]) = ([0.99, 1.01], [-2.0, 4.0]);

/// Two uniformly filled thin rectangles; label 0 on the left, 1 on the
/// right. Returns independent train and test splits of `n_per_class`
/// samples per class each, interleaved by class.
pub fn synth_2d(n_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_per_class == 0 {
        return Err(Error::invalid("synth_2d", "n_per_class must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |name: &str| {
        let mut x = Array2::zeros((2 * n_per_class, 2));
        let mut y = Vec::with_capacity(2 * n_per_class);
        for i in 0..n_per_class {
            for (class, (rx, ry)) in [TOY_NEG_RECT, TOY_POS_RECT].into_iter().enumerate() {
                let row = 2 * i + class;
                x[[row, 0]] = rng.random_range(rx[0]..=rx[1]);
                x[[row, 1]] = rng.random_range(ry[0]..=ry[1]);
                y.push(class);
            }
        }
        let meta = DatasetMeta {
            source: format!("synth-2d/{name}"),
            preprocessing: Vec::new(),
            seed: Some(seed),
        };
        Dataset::new(x, y, 2, meta)
    };
    let train = split("train")?;
    let test = split("test")?;
    Ok((train, test))
}

/// An unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

fn idx_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Idx {
        offset,
        reason: reason.into(),
    }
}

/// Parses an unsigned-byte IDX buffer (magic `0x0000_08NN`, `NN` dims).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let word = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| idx_err(offset, format!("truncated header: need 4 bytes, file has {}", bytes.len())))
    };
    let magic = word(0)?;
    if magic >> 8 != 0x08 {
        return Err(idx_err(0, format!("bad magic {magic} (expected unsigned-byte IDX, e.g. 2049 or 2051)")));
    }
    let ndim = (magic & 0xff) as usize;
    if ndim == 0 {
        return Err(idx_err(3, "zero dimensions"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(word(4 + 4 * d)? as usize);
    }
    let start = 4 + 4 * ndim;
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| idx_err(4, "dimension product overflows"))?;
    let have = bytes.len() - start;
    if have < count {
        return Err(idx_err(bytes.len(), format!("truncated payload: expected {count} bytes after header, found {have}")));
    }
    if have > count {
        return Err(idx_err(start + count, format!("{} trailing bytes after payload", have - count)));
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..].to_vec(),
    })
}

/// Inverse of [`parse_idx`].
pub fn serialize_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&(0x0800u32 | array.dims.len() as u32).to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

/// Reads a file, inflating it when it starts with the gzip magic.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Builds a dataset from parsed IDX image and label buffers.
pub fn mnist_from_idx(images: &[u8], labels: &[u8], source: &str) -> Result<Dataset> {
    let img = parse_idx(images)?;
    let lab = parse_idx(labels)?;
    if img.dims.len() != 3 {
        return Err(idx_err(3, format!("image file must have 3 dims (magic {IDX_IMAGES_MAGIC}), found {}", img.dims.len())));
    }
    if lab.dims.len() != 1 {
        return Err(idx_err(3, format!("label file must have 1 dim (magic {IDX_LABELS_MAGIC}), found {}", lab.dims.len())));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(idx_err(4, format!("image count {} does not match label count {}", img.dims[0], lab.dims[0])));
    }
    if let Some(pos) = lab.data.iter().position(|&l| l > 9) {
        return Err(idx_err(8 + pos, format!("label {} outside [0, 9]", lab.data[pos])));
    }
    let n = img.dims[0];
    let d = img.dims[1] * img.dims[2];
    let inputs = Array2::from_shape_vec((n, d), img.data.iter().map(|&b| b as f64 / 255.0).collect())
        .expect("payload length checked by parse_idx");
    let meta = DatasetMeta {
        source: source.to_string(),
        preprocessing: vec!["scale-0-1".into()],
        seed: None,
    };
    Dataset::new(inputs, lab.data.iter().map(|&l| l as usize).collect(), 10, meta)
}

/// Loads an MNIST image/label file pair (plain or gzip-compressed).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_maybe_gzip(images_path)?;
    let labels = read_maybe_gzip(labels_path)?;
    mnist_from_idx(&images, &labels, &images_path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (plain or .gz)"),
    ))
}

/// Loads a split from a directory holding the standard MNIST file names.
pub fn load_mnist_dir(dir: &Path, split: MnistSplit) -> Result<Dataset> {
    let prefix = match split {
        MnistSplit::Train => "train",
        MnistSplit::Test => "t10k",
    };
    let images = find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    load_mnist_idx(&images, &labels)
}

/// Dataset cache root: the explicit value, else `$AMM_DATA_DIR`, else `data`.
pub fn data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Subtracts the per-dimension mean of `train` from `train` and `others`.
pub fn preprocess_mean_subtract(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, Array1<f64>)> {
    if train.is_empty() {
        return Err(Error::invalid("preprocess_mean_subtract", "training set is empty"));
    }
    let mean = train.inputs.mean_axis(Axis(0)).expect("nonempty");
    let apply = |ds: &Dataset| -> Result<Dataset> {
        if ds.dim() != mean.len() {
            return Err(Error::shape("preprocess_mean_subtract", &[ds.dim()], &[mean.len()]));
        }
        let mut out = ds.clone();
        out.inputs -= &mean;
        Ok(out.with_step("mean-subtract".into(), None))
    };
    let t = apply(train)?;
    let rest = others.iter().map(|d| apply(d)).collect::<Result<Vec<_>>>()?;
    Ok((t, rest, mean))
}

/// Applies a stored mean (e.g. from a checkpoint) to another dataset.
pub fn subtract_mean(ds: &Dataset, mean: &Array1<f64>) -> Result<Dataset> {
    if ds.dim() != mean.len() {
        return Err(Error::shape("subtract_mean", &[ds.dim()], &[mean.len()]));
    }
    let mut out = ds.clone();
    out.inputs -= mean;
    Ok(out.with_step("mean-subtract".into(), None))
}

/// Redraws the labels of a random `N - n_clean` subset uniformly over all
/// classes (the new label may equal the old one).
pub fn corrupt_labels(ds: &Dataset, n_clean: usize, seed: u64) -> Result<Dataset> {
    let n = ds.len();
    if n_clean > n {
        return Err(Error::invalid("corrupt_labels", format!("n_clean {n_clean} exceeds dataset size {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy: Vec<usize> = index::sample(&mut rng, n, n - n_clean).into_vec();
    noisy.sort_unstable();
    let mut out = ds.clone();
    for i in noisy {
        out.labels[i] = rng.random_range(0..ds.num_classes);
    }
    Ok(out.with_step(format!("corrupt-labels(n_clean={n_clean})"), Some(seed)))
}

/// Seeded uniform subset of `n` rows without replacement, in ascending row
/// order.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::invalid("subsample", format!("requested {n} of {} samples", ds.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = index::sample(&mut rng, ds.len(), n).into_vec();
    rows.sort_unstable();
    Ok(ds.select(&rows).with_step(format!("subsample(n={n})"), Some(seed)))
}

/// Seeded shuffle; the last `n_val` shuffled rows form the validation split.
pub fn split_validation(ds: &Dataset, n_val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_val >= ds.len() {
        return Err(Error::invalid("split_validation", format!("validation size {n_val} leaves no training data")));
    }
    let mut rows: Vec<usize> = (0..ds.len()).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ds.len() - n_val;
    let train = ds.select(&rows[..cut]).with_step("train-part".into(), Some(seed));
    let val = ds.select(&rows[cut..]).with_step("validation-part".into(), Some(seed));
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_images(n: usize, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        serialize_idx(&IdxArray {
            dims: vec![n, 28, 28],
            data: (0..n * 784).map(fill).collect(),
        })
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        serialize_idx(&IdxArray {
            dims: vec![labels.len()],
            data: labels.to_vec(),
        })
    }

    #[test]
    fn synth_bounds_and_sizes() {
        let (train, test) = synth_2d(200, 1).unwrap();
        assert_eq!(train.len(), 400);
        assert_eq!(test.len(), 400);
        assert_ne!(train.inputs(), test.inputs());
        for (row, &l) in train.inputs().rows().into_iter().zip(train.labels()) {
            let (rx, ry) = if l == 0 { TOY_NEG_RECT } else { TOY_POS_RECT };
            assert!(row[0] >= rx[0] && row[0] <= rx[1]);
            assert!(row[1] >= ry[0] && row[1] <= ry[1]);
        }
        assert_eq!(train.class_counts(), vec![200, 200]);
        assert_eq!(synth_2d(200, 1).unwrap().0, train);
        assert!(synth_2d(0, 1).is_err());
    }

    #[test]
    fn idx_header_and_scaling() {
        let images = idx_images(3, |i| if i == 0 { 255 } else { 0 });
        assert_eq!(&images[..4], &IDX_IMAGES_MAGIC.to_be_bytes());
        let parsed = parse_idx(&images).unwrap();
        assert_eq!(parsed.dims, vec![3, 28, 28]);
        let ds = mnist_from_idx(&images, &idx_labels(&[1, 2, 3]), "t").unwrap();
        assert_eq!(ds.inputs()[[0, 0]], 1.0);
        assert_eq!(ds.inputs()[[0, 1]], 0.0);
        assert_eq!(ds.dim(), 784);
        assert_eq!(ds.labels(), &[1, 2, 3]);
        assert_eq!(&idx_labels(&[1])[..4], &IDX_LABELS_MAGIC.to_be_bytes());
    }

    #[test]
    fn idx_errors_name_offsets() {
        let images = idx_images(2, |_| 7);
        match mnist_from_idx(&images, &idx_labels(&[1, 2, 3]), "t") {
            Err(Error::Idx { offset: 4, reason }) => assert!(reason.contains("count")),
            other => panic!("{other:?}"),
        }
        let mut bad = images.clone();
        bad[2] = 0x09;
        assert!(matches!(parse_idx(&bad), Err(Error::Idx { offset: 0, .. })));
        let cut = &images[..images.len() - 5];
        assert!(matches!(parse_idx(cut), Err(Error::Idx { offset, .. }) if offset == cut.len()));
        assert!(matches!(parse_idx(&images[..6]), Err(Error::Idx { offset: 4, .. })));
        // swapped files
        assert!(matches!(mnist_from_idx(&idx_labels(&[1]), &images, "t"), Err(Error::Idx { offset: 3, .. })));
    }

    #[test]
    fn gzip_and_plain_files_load_identically() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let images = idx_images(4, |i| (i % 256) as u8);
        let labels = idx_labels(&[0, 9, 4, 4]);
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), &images).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&labels).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte.gz"), gz.finish().unwrap()).unwrap();
        let ds = load_mnist_dir(dir.path(), MnistSplit::Test).unwrap();
        assert_eq!(ds.labels(), &[0, 9, 4, 4]);
        assert!(matches!(load_mnist_dir(dir.path(), MnistSplit::Train), Err(Error::Io { .. })));
    }

    #[test]
    fn mean_subtraction_uses_train_mean() {
        let meta = DatasetMeta::default();
        let train = Dataset::new(ndarray::array![[1., 10.], [3., 20.]], vec![0, 1], 2, meta.clone()).unwrap();
        let test = Dataset::new(ndarray::array![[100., 100.]], vec![0], 2, meta.clone()).unwrap();
        let (t, rest, mean) = preprocess_mean_subtract(&train, &[&test]).unwrap();
        assert_eq!(mean.to_vec(), vec![2., 15.]);
        for m in t.inputs().mean_axis(Axis(0)).unwrap() {
            assert!(m.abs() < 1e-12);
        }
        assert_eq!(rest[0].inputs().row(0).to_vec(), vec![98., 85.]);
        let constant = Dataset::new(Array2::from_elem((5, 3), 0.4), vec![0; 5], 1, meta).unwrap();
        let (c, _, _) = preprocess_mean_subtract(&constant, &[]).unwrap();
        assert!(c.inputs().iter().all(|&v| v == 0.0));
    }

    fn labelled(n: usize) -> Dataset {
        let x = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        Dataset::new(x, (0..n).map(|i| i % 10).collect(), 10, DatasetMeta::default()).unwrap()
    }

    #[test]
    fn label_noise() {
        let ds = labelled(1000);
        assert_eq!(corrupt_labels(&ds, 1000, 5).unwrap().labels(), ds.labels());
        assert!(corrupt_labels(&ds, 1001, 5).is_err());
        // all noisy: matches ~ Binomial(1000, 0.1) per seed, pooled over seeds
        let mut hits = 0;
        for seed in 0..20 {
            let noisy = corrupt_labels(&ds, 0, seed).unwrap();
            hits += noisy.labels().iter().zip(ds.labels()).filter(|(a, b)| a == b).count();
        }
        let (mean, sd) = (2000.0, (20_000.0f64 * 0.1 * 0.9).sqrt());
        assert!((hits as f64 - mean).abs() < 4.0 * sd, "{hits}");
        let half = corrupt_labels(&ds, 500, 9).unwrap();
        assert_eq!(half, corrupt_labels(&ds, 500, 9).unwrap());
        assert_eq!(half.inputs(), ds.inputs());
    }

    #[test]
    fn subsample_is_seeded_and_proportional() {
        let ds = labelled(60_000);
        let a = subsample(&ds, 20_000, 4).unwrap();
        assert_eq!(a, subsample(&ds, 20_000, 4).unwrap());
        assert_ne!(a.labels(), subsample(&ds, 20_000, 5).unwrap().labels());
        for c in a.class_counts() {
            assert!((c as f64 / 20_000.0 - 0.1).abs() < 0.02);
        }
        let full = subsample(&ds, 60_000, 1).unwrap();
        assert_eq!(full.inputs(), ds.inputs());
        assert!(subsample(&ds, 60_001, 1).is_err());
    }

    #[test]
    fn validation_split_partitions_rows() {
        let ds = labelled(50);
        let (t, v) = split_validation(&ds, 10, 3).unwrap();
        assert_eq!((t.len(), v.len()), (40, 10));
        let mut firsts: Vec<f64> = t.inputs().column(0).iter().chain(v.inputs().column(0).iter()).copied().collect();
        firsts.sort_by(f64::total_cmp);
        assert_eq!(firsts, (0..50).map(|i| (2 * i) as f64).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn idx_roundtrip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u8>()) {
            let n: usize = dims.iter().product();
            let arr = IdxArray { dims, data: (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect() };
            let bytes = serialize_idx(&arr);
            let back = parse_idx(&bytes).unwrap();
            prop_assert_eq!(serialize_idx(&back), bytes);
            prop_assert_eq!(back, arr);
        }
    }
}
