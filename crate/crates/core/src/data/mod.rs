//! MNIST Even/Odd and MNIST Addition.
//!
//! Samples are kept as 8-bit grayscale and expanded to normalized 3-channel
//! `f32` tensors only when a batch is requested.

pub mod archive;
pub mod idx;
pub mod preprocess;

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use preprocess::{preprocess, resize_bilinear};

/// Number of digit concepts annotated on every MNIST variant.
pub const N_DIGITS: usize = 10;
/// Channels images are replicated to.
pub const CHANNELS: usize = 3;
/// Fraction of the original training set held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Environment variable naming the directory with the MNIST IDX files.
pub const DATA_ROOT_ENV: &str = "LCBM_DATA_ROOT";

/// `$LCBM_DATA_ROOT` if set, else `data/mnist` relative to the working directory.
pub fn default_data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Single digit, label = parity (0 even, 1 odd).
    MnistEvenOdd,
    /// Two digits side by side, label = their sum.
    MnistAddition,
}

impl DatasetKind {
    pub fn n_classes(self) -> usize {
        match self {
            DatasetKind::MnistEvenOdd => 2,
            DatasetKind::MnistAddition => 19,
        }
    }

    /// Native `(height, width)` before any resizing.
    pub fn native_hw(self) -> (usize, usize) {
        match self {
            DatasetKind::MnistEvenOdd => (28, 28),
            DatasetKind::MnistAddition => (28, 56),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::MnistEvenOdd => "mnist_even_odd",
            DatasetKind::MnistAddition => "mnist_addition",
        }
    }

    /// Flips and crops change digit identity, so MNIST variants are never augmented.
    pub fn allows_augmentation(self) -> bool {
        false
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist_even_odd" | "even_odd" => Ok(DatasetKind::MnistEvenOdd),
            "mnist_addition" | "addition" => Ok(DatasetKind::MnistAddition),
            other => Err(Error::config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// A batch ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    /// `(B, C, H, W)` in `[0, 1]`.
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    /// `(B, N_DIGITS)` ground-truth concept presence.
    pub concepts: Option<Array2<u8>>,
    /// Positions of the samples within their source.
    pub indices: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Anything that can hand out labeled batches by index.
pub trait SampleSource: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]` of every batch this source produces.
    fn image_shape(&self) -> [usize; 3];

    fn n_classes(&self) -> usize;

    fn has_annotations(&self) -> bool;

    fn label(&self, index: usize) -> usize;

    fn batch(&self, indices: &[usize]) -> Result<LabeledBatch>;
}

/// One part (train, validation or test) of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    /// `train`, `validation` or `test`.
    pub part: String,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    /// Bit `g` set when digit `g` is present.
    annotations: Option<Vec<u16>>,
    /// Addition only: the two digits, in left-to-right order.
    digit_pairs: Option<Vec<[u8; 2]>>,
}

impl Dataset {
    pub fn new(
        kind: DatasetKind,
        part: impl Into<String>,
        (height, width): (usize, usize),
        pixels: Vec<u8>,
        labels: Vec<usize>,
        annotations: Option<Vec<u16>>,
        digit_pairs: Option<Vec<[u8; 2]>>,
    ) -> Result<Self> {
        let n = labels.len();
        if pixels.len() != n * height * width {
            return Err(Error::data(format!(
                "{} pixels for {n} images of {height}x{width}",
                pixels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= kind.n_classes()) {
            return Err(Error::data(format!(
                "label {bad} outside [0, {})",
                kind.n_classes()
            )));
        }
        if annotations.as_ref().is_some_and(|a| a.len() != n)
            || digit_pairs.as_ref().is_some_and(|p| p.len() != n)
        {
            return Err(Error::data("annotation count differs from sample count"));
        }
        Ok(Self {
            kind,
            part: part.into(),
            height,
            width,
            pixels,
            labels,
            annotations,
            digit_pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Raw 8-bit grayscale pixels of sample `i`.
    pub fn raw_image(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn annotation_bits(&self) -> Option<&[u16]> {
        self.annotations.as_deref()
    }

    /// Multi-hot digit presence of sample `i`.
    pub fn annotation(&self, i: usize) -> Option<[u8; N_DIGITS]> {
        let bits = self.annotations.as_ref()?[i];
        Some(std::array::from_fn(|g| ((bits >> g) & 1) as u8))
    }

    pub fn digit_pairs(&self) -> Option<&[[u8; 2]]> {
        self.digit_pairs.as_deref()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], part: impl Into<String>) -> Result<Self> {
        let n = self.height * self.width;
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::data(format!(
                    "index {i} outside dataset of {}",
                    self.len()
                )));
            }
            pixels.extend_from_slice(self.raw_image(i));
        }
        let pick = |v: &Vec<u16>| indices.iter().map(|&i| v[i]).collect();
        Self::new(
            self.kind,
            part,
            (self.height, self.width),
            pixels,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.annotations.as_ref().map(pick),
            self.digit_pairs
                .as_ref()
                .map(|p| indices.iter().map(|&i| p[i]).collect()),
        )
    }

    /// Normalized single-sample image `(C, H, W)`.
    pub fn image(&self, i: usize) -> Result<ndarray::Array3<f32>> {
        let b = self.batch(&[i])?;
        Ok(b.images.index_axis_move(ndarray::Axis(0), 0))
    }
}

impl SampleSource for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn image_shape(&self) -> [usize; 3] {
        [CHANNELS, self.height, self.width]
    }

    fn n_classes(&self) -> usize {
        self.kind.n_classes()
    }

    fn has_annotations(&self) -> bool {
        self.annotations.is_some()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn batch(&self, indices: &[usize]) -> Result<LabeledBatch> {
        let (h, w) = (self.height, self.width);
        let mut images = Array4::<f32>::zeros((indices.len(), CHANNELS, h, w));
        for (b, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::data(format!(
                    "sample {i} outside {} split of {}",
                    self.part,
                    self.len()
                )));
            }
            let raw = self.raw_image(i);
            for c in 0..CHANNELS {
                let mut plane = images.slice_mut(ndarray::s![b, c, .., ..]);
                for (dst, &src) in plane.iter_mut().zip(raw) {
                    *dst = f32::from(src) / 255.0;
                }
            }
        }
        let concepts = self.annotations.as_ref().map(|bits| {
            Array2::from_shape_fn((indices.len(), N_DIGITS), |(b, g)| {
                ((bits[indices[b]] >> g) & 1) as u8
            })
        });
        Ok(LabeledBatch {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            concepts,
            indices: indices.to_vec(),
        })
    }
}

/// Samples already held as normalized `(N, C, H, W)` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSource {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    /// `(N, m)` ground-truth concepts.
    pub concepts: Option<Array2<u8>>,
    pub n_classes: usize,
}

impl TensorSource {
    pub fn new(
        images: Array4<f32>,
        labels: Vec<usize>,
        concepts: Option<Array2<u8>>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = images.dim().0;
        if labels.len() != n || concepts.as_ref().is_some_and(|c| c.nrows() != n) {
            return Err(Error::data(
                "images, labels and concepts disagree on the sample count",
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::data(format!(
                "label {bad} outside {n_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            concepts,
            n_classes,
        })
    }
}

impl SampleSource for TensorSource {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn image_shape(&self) -> [usize; 3] {
        let (_, c, h, w) = self.images.dim();
        [c, h, w]
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn has_annotations(&self) -> bool {
        self.concepts.is_some()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn batch(&self, indices: &[usize]) -> Result<LabeledBatch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::data(format!(
                "sample {bad} outside a source of {}",
                self.len()
            )));
        }
        Ok(LabeledBatch {
            images: self.images.select(ndarray::Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            concepts: self
                .concepts
                .as_ref()
                .map(|c| c.select(ndarray::Axis(0), indices)),
            indices: indices.to_vec(),
        })
    }
}

/// Train, validation and test parts of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub kind: DatasetKind,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub split_seed: u64,
    pub pairing_seed: Option<u64>,
}

impl DatasetSplit {
    pub fn part(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "validation" | "val" => Ok(&self.validation),
            "test" => Ok(&self.test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

/// Raw MNIST digits as stored in the IDX files.
#[derive(Debug, Clone)]
pub struct MnistDigits {
    pub rows: usize,
    pub cols: usize,
    pub train_pixels: Vec<u8>,
    pub train_labels: Vec<u8>,
    pub test_pixels: Vec<u8>,
    pub test_labels: Vec<u8>,
}

impl MnistDigits {
    pub fn load(root: &Path) -> Result<Self> {
        let (train_pixels, train_labels, rows, cols) = load_pair(root, TRAIN_IMAGES, TRAIN_LABELS)?;
        let (test_pixels, test_labels, trows, tcols) = load_pair(root, TEST_IMAGES, TEST_LABELS)?;
        if (rows, cols) != (trows, tcols) {
            return Err(Error::Ingest {
                path: root.join(TEST_IMAGES),
                reason: format!("test images are {trows}x{tcols}, train images {rows}x{cols}"),
            });
        }
        Ok(Self {
            rows,
            cols,
            train_pixels,
            train_labels,
            test_pixels,
            test_labels,
        })
    }

    pub fn digit(pixels: &[u8], rows: usize, cols: usize, i: usize) -> &[u8] {
        &pixels[i * rows * cols..(i + 1) * rows * cols]
    }
}

fn load_pair(root: &Path, images: &str, labels: &str) -> Result<(Vec<u8>, Vec<u8>, usize, usize)> {
    let img_path = idx::locate(root, images)?;
    let lab_path = idx::locate(root, labels)?;
    let imgs = idx::read_images(&img_path)?;
    let labs = idx::read_labels(&lab_path)?;
    if imgs.count != labs.len() {
        return Err(Error::Ingest {
            path: lab_path,
            reason: format!("{} labels for {} images", labs.len(), imgs.count),
        });
    }
    if let Some(&bad) = labs.iter().find(|&&y| y as usize >= N_DIGITS) {
        return Err(Error::Ingest {
            path: lab_path,
            reason: format!("digit label {bad} outside 0..=9"),
        });
    }
    Ok((imgs.pixels, labs, imgs.rows, imgs.cols))
}

/// Seeded 10% validation hold-out: `(train, validation)` index lists, each ascending.
pub fn validation_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * VALIDATION_FRACTION).round() as usize;
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn even_odd_part(
    pixels: Vec<u8>,
    digits: &[u8],
    hw: (usize, usize),
    part: &str,
) -> Result<Dataset> {
    let labels = digits.iter().map(|&d| (d % 2) as usize).collect();
    let bits = digits.iter().map(|&d| 1u16 << d).collect();
    Dataset::new(
        DatasetKind::MnistEvenOdd,
        part,
        hw,
        pixels,
        labels,
        Some(bits),
        None,
    )
}

/// Parity task over single digits, annotated with one-hot digit identity.
pub fn build_mnist_even_odd(root: &Path, split_seed: u64) -> Result<DatasetSplit> {
    even_odd_from_digits(&MnistDigits::load(root)?, split_seed)
}

pub fn even_odd_from_digits(raw: &MnistDigits, split_seed: u64) -> Result<DatasetSplit> {
    let hw = (raw.rows, raw.cols);
    let full = even_odd_part(raw.train_pixels.clone(), &raw.train_labels, hw, "train")?;
    let test = even_odd_part(raw.test_pixels.clone(), &raw.test_labels, hw, "test")?;
    let (train_idx, val_idx) = validation_split(full.len(), split_seed);
    Ok(DatasetSplit {
        kind: DatasetKind::MnistEvenOdd,
        train: full.subset(&train_idx, "train")?,
        validation: full.subset(&val_idx, "validation")?,
        test,
        split_seed,
        pairing_seed: None,
    })
}

/// Pairs `n` digits drawn independently and uniformly (with replacement)
/// and places them side by side.
fn addition_part<R: Rng>(
    pixels: &[u8],
    digits: &[u8],
    rows: usize,
    cols: usize,
    rng: &mut R,
    part: &str,
) -> Result<Dataset> {
    let n = digits.len();
    let wide = 2 * cols;
    let mut out = vec![0u8; n * rows * wide];
    let mut labels = Vec::with_capacity(n);
    let mut bits = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let (da, db) = (digits[a], digits[b]);
        let img = &mut out[i * rows * wide..(i + 1) * rows * wide];
        let left = MnistDigits::digit(pixels, rows, cols, a);
        let right = MnistDigits::digit(pixels, rows, cols, b);
        for r in 0..rows {
            img[r * wide..r * wide + cols].copy_from_slice(&left[r * cols..(r + 1) * cols]);
            img[r * wide + cols..(r + 1) * wide].copy_from_slice(&right[r * cols..(r + 1) * cols]);
        }
        labels.push((da + db) as usize);
        bits.push((1u16 << da) | (1u16 << db));
        pairs.push([da, db]);
    }
    Dataset::new(
        DatasetKind::MnistAddition,
        part,
        (rows, wide),
        out,
        labels,
        Some(bits),
        Some(pairs),
    )
}

/// Sum of two side-by-side digits, annotated with the multi-hot digit set.
pub fn build_mnist_addition(
    root: &Path,
    split_seed: u64,
    pairing_seed: u64,
) -> Result<DatasetSplit> {
    addition_from_digits(&MnistDigits::load(root)?, split_seed, pairing_seed)
}

pub fn addition_from_digits(
    raw: &MnistDigits,
    split_seed: u64,
    pairing_seed: u64,
) -> Result<DatasetSplit> {
    // Separate streams keep train pairings independent of the test set size.
    let mut train_rng = ChaCha8Rng::seed_from_u64(pairing_seed);
    train_rng.set_stream(0);
    let mut test_rng = ChaCha8Rng::seed_from_u64(pairing_seed);
    test_rng.set_stream(1);
    let (r, c) = (raw.rows, raw.cols);
    let full = addition_part(
        &raw.train_pixels,
        &raw.train_labels,
        r,
        c,
        &mut train_rng,
        "train",
    )?;
    let test = addition_part(
        &raw.test_pixels,
        &raw.test_labels,
        r,
        c,
        &mut test_rng,
        "test",
    )?;
    let (train_idx, val_idx) = validation_split(full.len(), split_seed);
    Ok(DatasetSplit {
        kind: DatasetKind::MnistAddition,
        train: full.subset(&train_idx, "train")?,
        validation: full.subset(&val_idx, "validation")?,
        test,
        split_seed,
        pairing_seed: Some(pairing_seed),
    })
}

/// Builds `kind` from the IDX files under `root`.
pub fn build(
    kind: DatasetKind,
    root: &Path,
    split_seed: u64,
    pairing_seed: u64,
) -> Result<DatasetSplit> {
    match kind {
        DatasetKind::MnistEvenOdd => build_mnist_even_odd(root, split_seed),
        DatasetKind::MnistAddition => build_mnist_addition(root, split_seed, pairing_seed),
    }
}
