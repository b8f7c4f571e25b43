//! Labeled datasets: a seeded synthetic fine-grained generator, the
//! packed-binary and tabular-CSV file formats, and epoch batching.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatErrorKind, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DFD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    splits: Splits,
}

impl Dataset {
    /// Validates that splits tile `[0, N)`, labels are in range, and every
    /// class has at least one training sample.
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, splits: Splits) -> Result<Self> {
        let n = features.shape()[0];
        if features.shape().len() < 2 {
            return Err(Error::Data("features need a sample dimension and a feature shape".into()));
        }
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} samples", labels.len())));
        }
        if num_classes == 0 {
            return Err(Error::Data("dataset needs at least one class".into()));
        }
        let mut ranges = [splits.train.clone(), splits.val.clone(), splits.test.clone()];
        ranges.sort_by_key(|r| (r.start, r.end));
        let mut cursor = 0;
        for r in &ranges {
            if r.start != cursor || r.end < r.start {
                return Err(Error::Data(format!(
                    "splits must be disjoint and cover [0, {n}), got {splits:?}"
                )));
            }
            cursor = r.end;
        }
        if cursor != n {
            return Err(Error::Data(format!("splits cover [0, {cursor}) of {n} samples")));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {l} of sample {i} out of range for {num_classes} classes"
            )));
        }
        let mut seen = vec![false; num_classes];
        labels[splits.train.clone()].iter().for_each(|&l| seen[l] = true);
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("class {c} has no training samples")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Per-sample feature shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn has_val(&self) -> bool {
        !self.splits.val.is_empty()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.splits.get(split).len()
    }

    pub fn split_labels(&self, split: Split) -> &[usize] {
        &self.labels[self.splits.get(split)]
    }

    pub fn split_features(&self, split: Split) -> Tensor {
        let idx: Vec<usize> = self.splits.get(split).collect();
        self.features.select_rows(&idx)
    }

    pub fn class_histogram(&self, split: Option<Split>) -> Vec<usize> {
        let labels = match split {
            Some(s) => self.split_labels(s),
            None => &self.labels,
        };
        let mut counts = vec![0; self.num_classes];
        labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    /// Same samples with labels merged `k`-to-1 (`label / k`).
    pub fn coarsen(&self, k: usize) -> Result<Dataset> {
        if k == 0 {
            return Err(Error::Config("label merge factor must be at least 1".into()));
        }
        let labels = self.labels.iter().map(|l| l / k).collect();
        Dataset::new(
            self.features.clone(),
            labels,
            self.num_classes.div_ceil(k),
            self.splits.clone(),
        )
    }

    /// Deterministic ordering of one split's samples for an epoch.
    ///
    /// With `shuffle_seed` set, the permutation depends only on `(seed, epoch)`.
    pub fn batches(
        &self,
        split: Split,
        batch_size: usize,
        shuffle_seed: Option<u64>,
        epoch: u64,
    ) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let range = self.splits.get(split);
        if range.is_empty() {
            return Err(Error::Data(format!("split {split:?} is empty")));
        }
        let mut order: Vec<usize> = range.collect();
        if let Some(seed) = shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        Ok(Batches {
            dataset: self,
            order,
            batch_size,
            cursor: 0,
        })
    }

    /// CRC-32 of the packed-binary encoding.
    pub fn digest(&self) -> u32 {
        crc32fast::hash(&self.to_packed_bytes())
    }

    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let dims = self.sample_shape();
        let mut out = Vec::with_capacity(16 + 4 * (self.features.numel() + self.labels.len() + 6));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [self.len(), self.num_classes, dims.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in self.features.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for r in [&self.splits.train, &self.splits.val, &self.splits.test] {
            out.extend_from_slice(&(r.start as u32).to_le_bytes());
            out.extend_from_slice(&(r.end as u32).to_le_bytes());
        }
        out
    }

    pub fn from_packed_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != DATASET_MAGIC {
            return Err(Error::Format {
                offset: 0,
                kind: FormatErrorKind::BadMagic,
                message: format!("expected {DATASET_MAGIC:?}, found {magic:?}"),
            });
        }
        let n = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        if rank == 0 || dims.contains(&0) || n == 0 {
            return Err(Error::Format {
                offset: 8,
                kind: FormatErrorKind::Malformed,
                message: format!("invalid header: N={n}, dims={dims:?}"),
            });
        }
        let per_sample: usize = dims.iter().product();
        let count = n.checked_mul(per_sample).ok_or_else(|| Error::Format {
            offset: 8,
            kind: FormatErrorKind::Malformed,
            message: "feature count overflows".into(),
        })?;
        r.ensure(count.saturating_mul(4))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.f32()? as f64);
        }
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let offset = r.pos as u64;
            let l = r.u32()? as usize;
            if l >= num_classes {
                return Err(Error::Format {
                    offset,
                    kind: FormatErrorKind::LabelOutOfRange,
                    message: format!("label {l} of sample {i} >= num_classes {num_classes}"),
                });
            }
            labels.push(l);
        }
        let mut ranges = Vec::with_capacity(3);
        for _ in 0..3 {
            let start = r.u32()? as usize;
            let end = r.u32()? as usize;
            ranges.push(start..end);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                kind: FormatErrorKind::Malformed,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let mut shape = vec![n];
        shape.extend(dims);
        let splits = Splits {
            train: ranges[0].clone(),
            val: ranges[1].clone(),
            test: ranges[2].clone(),
        };
        Dataset::new(Tensor::new(shape, data)?, labels, num_classes, splits)
    }

    pub fn save_packed(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_packed_bytes())?;
        Ok(())
    }

    pub fn load_packed(path: &Path) -> Result<Dataset> {
        Dataset::from_packed_bytes(&fs::read(path)?)
    }

    /// Writes `label,f0,f1,...` rows plus a `<path>.splits.json` sidecar.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let width = self.features.numel() / self.len();
        let mut out = String::from("label");
        for j in 0..width {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for (row, &label) in self.features.rows().zip(&self.labels) {
            out.push_str(&label.to_string());
            for &x in row {
                out.push(',');
                out.push_str(&(x as f32).to_string());
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        let sidecar = SplitSidecar {
            num_classes: self.num_classes,
            dims: self.sample_shape().to_vec(),
            train: self.splits.train.clone().collect(),
            val: self.splits.val.clone().collect(),
            test: self.splits.test.clone().collect(),
        };
        fs::write(
            sidecar_path(path),
            serde_json::to_string(&sidecar).expect("sidecar serializes"),
        )?;
        Ok(())
    }

    /// Reads a CSV and its sidecar. Samples are reordered so that each
    /// split occupies a contiguous range (train, then val, then test).
    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let sidecar_file = sidecar_path(path);
        let sidecar: SplitSidecar = serde_json::from_str(&fs::read_to_string(&sidecar_file)?)
            .map_err(|e| Error::Data(format!("{}: {e}", sidecar_file.display())))?;
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let width: usize = sidecar.dims.iter().product();
        let bad = |line: usize, kind, message: String| Error::Csv {
            line,
            kind,
            message,
        };
        let (_, header) = lines
            .next()
            .ok_or_else(|| bad(1, FormatErrorKind::Truncated, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let expected_header = cols.len() == width + 1
            && cols[0] == "label"
            && cols[1..].iter().enumerate().all(|(j, c)| *c == format!("f{j}"));
        if !expected_header {
            return Err(bad(1, FormatErrorKind::BadMagic, format!("expected header label,f0..f{}", width.saturating_sub(1))));
        }
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let label: usize = fields
                .next()
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|e| bad(lineno, FormatErrorKind::Malformed, format!("label: {e}")))?;
            if label >= sidecar.num_classes {
                return Err(bad(
                    lineno,
                    FormatErrorKind::LabelOutOfRange,
                    format!("label {label} >= num_classes {}", sidecar.num_classes),
                ));
            }
            let values = fields
                .map(|f| f.trim().parse::<f32>().map(f64::from))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(lineno, FormatErrorKind::Malformed, e.to_string()))?;
            if values.len() != width {
                return Err(bad(
                    lineno,
                    FormatErrorKind::Truncated,
                    format!("expected {width} features, found {}", values.len()),
                ));
            }
            rows.push((label, values));
        }
        let n = rows.len();
        let mut order = Vec::with_capacity(n);
        order.extend(&sidecar.train);
        order.extend(&sidecar.val);
        order.extend(&sidecar.test);
        let mut used = vec![false; n];
        for &i in &order {
            let i: usize = i;
            if i >= n || std::mem::replace(&mut used[i], true) {
                return Err(Error::Data(format!(
                    "{}: split index {i} is out of range or repeated",
                    sidecar_file.display()
                )));
            }
        }
        if order.len() != n {
            return Err(Error::Data(format!(
                "{}: splits list {} of {n} samples",
                sidecar_file.display(),
                order.len()
            )));
        }
        let mut data = Vec::with_capacity(n * width);
        let mut labels = Vec::with_capacity(n);
        for &i in &order {
            let i: usize = i;
            labels.push(rows[i].0);
            data.extend_from_slice(&rows[i].1);
        }
        let (a, b) = (sidecar.train.len(), sidecar.train.len() + sidecar.val.len());
        let mut shape = vec![n];
        shape.extend(&sidecar.dims);
        Dataset::new(
            Tensor::new(shape, data)?,
            labels,
            sidecar.num_classes,
            Splits {
                train: 0..a,
                val: a..b,
                test: b..n,
            },
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitSidecar {
    num_classes: usize,
    dims: Vec<usize>,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".splits.json");
    PathBuf::from(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    PackedBinary,
    TabularCsv,
}

impl DataFormat {
    /// `.csv` files are tabular; everything else is packed binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => DataFormat::TabularCsv,
            _ => DataFormat::PackedBinary,
        }
    }
}

pub fn load(path: &Path, format: DataFormat) -> Result<Dataset> {
    match format {
        DataFormat::PackedBinary => Dataset::load_packed(path),
        DataFormat::TabularCsv => Dataset::load_csv(path),
    }
}

pub fn save(dataset: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    match format {
        DataFormat::PackedBinary => dataset.save_packed(path),
        DataFormat::TabularCsv => dataset.save_csv(path),
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn ensure(&self, n: usize) -> Result<()> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                kind: FormatErrorKind::Truncated,
                message: format!(
                    "needed {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        self.ensure(n)?;
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let labels = idx.iter().map(|&i| self.dataset.labels[i]).collect();
        Some((self.dataset.features.select_rows(idx), labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Flat feature vectors of length `size`.
    #[default]
    Vector,
    /// Single-channel `size x size` images of rendered blobs.
    Image,
}

fn default_modes() -> usize {
    3
}

fn default_fraction() -> f64 {
    0.1
}

fn default_separation() -> f64 {
    1.0
}

/// Parameters of the synthetic generator.
///
/// Each class is a mixture of `modes_per_class` modes scattered around a class
/// center with `subclass_spread`; samples add isotropic `noise`. The class
/// structure depends on `seed`, the drawn samples on `sample_seed` (defaults
/// to `seed`), so several corpora can share one set of classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub num_classes: usize,
    /// Size of the largest (rank 0) class.
    pub samples_per_class: usize,
    #[serde(default)]
    pub long_tail_exponent: f64,
    #[serde(default)]
    pub layout: Layout,
    /// Feature dimension, or image side for `layout = "image"`.
    pub size: usize,
    #[serde(default = "default_modes")]
    pub modes_per_class: usize,
    #[serde(default)]
    pub subclass_spread: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    /// Fraction of training labels resampled uniformly over classes.
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub sample_seed: Option<u64>,
}

/// Reads a [`GenSpec`] from TOML, rejecting unknown keys.
pub fn parse_gen_spec(text: &str) -> Result<GenSpec> {
    let spec: GenSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.samples_per_class == 0 || self.size == 0 || self.modes_per_class == 0 {
            return err("num_classes, samples_per_class, size and modes_per_class must be positive".into());
        }
        if !(self.long_tail_exponent.is_finite() && self.long_tail_exponent >= 0.0) {
            return err(format!("long_tail_exponent must be >= 0, got {}", self.long_tail_exponent));
        }
        for (name, v) in [
            ("subclass_spread", self.subclass_spread),
            ("noise", self.noise),
            ("class_separation", self.class_separation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return err(format!("label_noise must lie in [0, 1], got {}", self.label_noise));
        }
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return err("val_fraction + test_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Samples per class, nonincreasing in class rank.
    pub fn class_sizes(&self) -> Vec<usize> {
        (0..self.num_classes)
            .map(|k| {
                let scale = ((k + 1) as f64).powf(-self.long_tail_exponent);
                (self.samples_per_class as f64 * scale).round() as usize
            })
            .collect()
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match self.layout {
            Layout::Vector => vec![self.size],
            Layout::Image => vec![1, self.size, self.size],
        }
    }
}

/// One class mode: a point for vectors, a set of blobs for images.
enum Mode {
    Point(Vec<f64>),
    Blobs(Vec<Blob>),
}

#[derive(Clone, Copy)]
struct Blob {
    row: f64,
    col: f64,
    width: f64,
    amplitude: f64,
}

const BLOBS_PER_MODE: usize = 3;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn render(blobs: &[Blob], side: usize, out: &mut [f64]) {
    for r in 0..side {
        for c in 0..side {
            out[r * side + c] = blobs
                .iter()
                .map(|b| {
                    let d2 = (r as f64 - b.row).powi(2) + (c as f64 - b.col).powi(2);
                    b.amplitude * (-d2 / (2.0 * b.width * b.width)).exp()
                })
                .sum();
        }
    }
}

fn class_modes(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Mode>> {
    let sep = spec.class_separation;
    let spread = spec.subclass_spread;
    (0..spec.num_classes)
        .map(|_| match spec.layout {
            Layout::Vector => {
                let center: Vec<f64> = (0..spec.size).map(|_| sep * normal(rng)).collect();
                (0..spec.modes_per_class)
                    .map(|_| Mode::Point(center.iter().map(|c| c + spread * normal(rng)).collect()))
                    .collect()
            }
            Layout::Image => {
                let side = spec.size as f64;
                let base: Vec<Blob> = (0..BLOBS_PER_MODE)
                    .map(|_| Blob {
                        row: rng.random_range(0.0..side),
                        col: rng.random_range(0.0..side),
                        width: side / 8.0 + rng.random_range(0.0..side / 8.0),
                        amplitude: sep * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                    })
                    .collect();
                (0..spec.modes_per_class)
                    .map(|_| {
                        Mode::Blobs(
                            base.iter()
                                .map(|b| Blob {
                                    row: b.row + spread * side / 4.0 * normal(rng),
                                    col: b.col + spread * side / 4.0 * normal(rng),
                                    ..*b
                                })
                                .collect(),
                        )
                    })
                    .collect()
            }
        })
        .collect()
}

/// Draws a dataset from `spec`. Features are rounded to `f32` so the
/// dataset round-trips through the file formats unchanged.
pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let sizes = spec.class_sizes();
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!(
            "class {k} would receive no samples; raise samples_per_class or lower the long-tail exponent"
        )));
    }
    let mut structure_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let modes = class_modes(spec, &mut structure_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.sample_seed.unwrap_or(spec.seed));
    rng.set_stream(1);

    let width: usize = spec.sample_shape().iter().product();
    let mut split_members: [Vec<(usize, Vec<f64>)>; 3] = Default::default();
    let mut sample = vec![0.0; width];
    for (class, (&n, class_modes)) in sizes.iter().zip(&modes).enumerate() {
        let n_val = (n as f64 * spec.val_fraction).round() as usize;
        let n_test = (n as f64 * spec.test_fraction).round() as usize;
        let n_train = n.saturating_sub(n_val + n_test);
        if n_train == 0 {
            return Err(Error::Config(format!(
                "class {class} has {n} samples, leaving none for training"
            )));
        }
        for i in 0..n {
            match &class_modes[rng.random_range(0..class_modes.len())] {
                Mode::Point(center) => sample.copy_from_slice(center),
                Mode::Blobs(blobs) => render(blobs, spec.size, &mut sample),
            }
            for x in sample.iter_mut() {
                *x = (*x + spec.noise * normal(&mut rng)) as f32 as f64;
            }
            let split = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            split_members[split].push((class, sample.clone()));
        }
    }
    for members in split_members.iter_mut() {
        members.shuffle(&mut rng);
    }
    if spec.label_noise > 0.0 {
        for (label, _) in split_members[0].iter_mut() {
            if rng.random_bool(spec.label_noise) {
                *label = rng.random_range(0..spec.num_classes);
            }
        }
    }
    let counts: Vec<usize> = split_members.iter().map(Vec::len).collect();
    let n: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    for members in &split_members {
        for (label, x) in members {
            labels.push(*label);
            data.extend_from_slice(x);
        }
    }
    let mut shape = vec![n];
    shape.extend(spec.sample_shape());
    let (a, b) = (counts[0], counts[0] + counts[1]);
    Dataset::new(
        Tensor::new(shape, data)?,
        labels,
        spec.num_classes,
        Splits {
            train: 0..a,
            val: a..b,
            test: b..n,
        },
    )
}

/// Accuracy of the nearest-class-mean classifier fit on the training split.
pub fn nearest_centroid_accuracy(dataset: &Dataset, split: Split) -> f64 {
    let width = dataset.features.numel() / dataset.len();
    let mut centroids = vec![0.0; dataset.num_classes * width];
    let counts = dataset.class_histogram(Some(Split::Train));
    for i in dataset.splits.train.clone() {
        let l = dataset.labels[i];
        let row = &dataset.features.data()[i * width..(i + 1) * width];
        for (c, x) in centroids[l * width..(l + 1) * width].iter_mut().zip(row) {
            *c += x;
        }
    }
    for (k, &count) in counts.iter().enumerate() {
        centroids[k * width..(k + 1) * width]
            .iter_mut()
            .for_each(|c| *c /= count as f64);
    }
    let range = dataset.splits.get(split);
    let total = range.len();
    let correct = range
        .filter(|&i| {
            let row = &dataset.features.data()[i * width..(i + 1) * width];
            let best = (0..dataset.num_classes)
                .map(|k| {
                    let c = &centroids[k * width..(k + 1) * width];
                    c.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
                .enumerate()
                .fold((0, f64::INFINITY), |best, (k, d)| if d < best.1 { (k, d) } else { best })
                .0;
            best == dataset.labels[i]
        })
        .count();
    correct as f64 / total as f64
}
