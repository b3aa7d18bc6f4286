//! Labelled datasets: synthetic generators, IDX and CSV readers, and the
//! train/validation/pool split protocol.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, UqError};
use crate::rng;
use crate::tensor::Tensor;

/// Label given to out-of-distribution samples. Training code rejects it.
pub const OOD_LABEL: i64 = -1;

/// Equally shaped inputs with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    inputs: Vec<Tensor>,
    labels: Vec<i64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Vec<Tensor>, labels: Vec<i64>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(UqError::Domain(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(first) = inputs.first() {
            for x in &inputs {
                first.check_same_shape(x)?;
            }
        }
        if let Some(l) = labels.iter().find(|&&l| l < OOD_LABEL) {
            return Err(UqError::Domain(format!("invalid label {l}")));
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        self.inputs.first().map(Tensor::shape)
    }

    /// Labels as class indices; fails on the OOD sentinel.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|&l| {
                usize::try_from(l).map_err(|_| {
                    UqError::Domain(format!("dataset {} contains unlabeled OOD samples", self.name))
                })
            })
            .collect()
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| (m + 1).max(0) as usize)
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// This dataset followed by `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut inputs = self.inputs.clone();
        inputs.extend_from_slice(&other.inputs);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(self.name.clone(), inputs, labels)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Dataset {
        self.name = name.into();
        self
    }
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| UqError::Domain(format!("bad standard deviation {std}: {e}")))
}

/// Isotropic Gaussian blobs, one per class, returned in shuffled order.
pub fn gen_gaussian_clusters(
    classes: usize,
    n_per_class: usize,
    means: &[Vec<f64>],
    std: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || means.len() != classes {
        return Err(UqError::Domain(format!(
            "need one mean per class for at least 2 classes, got {} means for {classes} classes",
            means.len()
        )));
    }
    if n_per_class == 0 {
        return Err(UqError::Domain("empty dataset: n_per_class is 0".into()));
    }
    if !(std > 0.0 && std.is_finite()) {
        return Err(UqError::Domain(format!("std must be positive, got {std}")));
    }
    let dim = means[0].len();
    if dim == 0 || means.iter().any(|m| m.len() != dim) {
        return Err(UqError::Domain("means must share a positive dimension".into()));
    }
    for (i, a) in means.iter().enumerate() {
        for b in &means[i + 1..] {
            if a == b {
                return Err(UqError::Domain(format!("duplicate cluster mean {a:?}")));
            }
        }
    }
    let noise = normal(std)?;
    let mut rng = rng::seeded(seed);
    let mut samples = Vec::with_capacity(classes * n_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            let x: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
            samples.push((Tensor::vector(x), c as i64));
        }
    }
    samples.shuffle(&mut rng);
    let (inputs, labels) = samples.into_iter().unzip();
    Dataset::new("gaussian_clusters", inputs, labels)
}

/// Points on a circle of `radius` around the origin with radial Gaussian
/// noise truncated to three standard deviations. Labels are [`OOD_LABEL`].
pub fn gen_ood_ring(radius: f64, n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(UqError::Domain(format!("ring radius must be positive, got {radius}")));
    }
    if n == 0 {
        return Err(UqError::Domain("empty dataset: n is 0".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(UqError::Domain(format!("noise std must be non-negative, got {noise_std}")));
    }
    let mut rng = rng::seeded(seed);
    let noise = (noise_std > 0.0).then(|| normal(noise_std)).transpose()?;
    let inputs = (0..n)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let dr = match &noise {
                Some(d) => loop {
                    let v = d.sample(&mut rng);
                    if v.abs() <= 3.0 * noise_std {
                        break v;
                    }
                },
                None => 0.0,
            };
            let r = radius + dr;
            Tensor::vector(vec![r * angle.cos(), r * angle.sin()])
        })
        .collect();
    Dataset::new("ood_ring", inputs, vec![OOD_LABEL; n])
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

struct IdxReader<'a> {
    field: &'static str,
    bytes: &'a [u8],
    offset: usize,
}

impl IdxReader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let Some(chunk) = self.bytes.get(self.offset..self.offset + 4) else {
            return Err(self.truncated(4));
        };
        self.offset += 4;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn payload(&mut self, len: usize) -> Result<&[u8]> {
        let Some(chunk) = self.bytes.get(self.offset..self.offset + len) else {
            return Err(self.truncated(len));
        };
        self.offset += len;
        Ok(chunk)
    }

    fn truncated(&self, wanted: usize) -> UqError {
        UqError::format(
            self.field,
            format!(
                "truncated at offset {}: needed {wanted} bytes, {} remain",
                self.offset,
                self.bytes.len().saturating_sub(self.offset)
            ),
        )
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(UqError::format(
                self.field,
                format!("offset 0: magic {found:#010x}, expected {expected:#010x}"),
            ));
        }
        Ok(())
    }
}

/// Parses an IDX image file (`n × h × w` unsigned bytes) and its label file.
/// Pixels are scaled to `[0, 1]`; images get shape `(1, h, w)`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut img = IdxReader {
        field: "images",
        bytes: images,
        offset: 0,
    };
    img.magic(IDX_IMAGES)?;
    let n = img.u32()? as usize;
    let h = img.u32()? as usize;
    let w = img.u32()? as usize;
    if h == 0 || w == 0 {
        return Err(UqError::format("images", format!("offset 8: zero image size {h}x{w}")));
    }
    let mut lab = IdxReader {
        field: "labels",
        bytes: labels,
        offset: 0,
    };
    lab.magic(IDX_LABELS)?;
    let n_labels = lab.u32()? as usize;
    if n_labels != n {
        return Err(UqError::format(
            "labels",
            format!("offset 4: {n_labels} labels for {n} images"),
        ));
    }
    let pixels = img.payload(n * h * w)?;
    let label_bytes = lab.payload(n)?;
    let inputs = pixels
        .chunks(h * w)
        .map(|chunk| {
            Tensor::from_parts(vec![1, h, w], chunk.iter().map(|&b| b as f64 / 255.0).collect())
        })
        .collect();
    Dataset::new("idx", inputs, label_bytes.iter().map(|&b| b as i64).collect())
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| UqError::io(p, e));
    parse_idx(&read(images.as_ref())?, &read(labels.as_ref())?)
}

/// Reads a CSV with header `x0,..,xk,label`; inputs become vectors.
pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| UqError::format("header", e.to_string()))?
        .clone();
    let width = headers.len();
    let expected: Vec<String> = (0..width.saturating_sub(1))
        .map(|i| format!("x{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    if width < 2 || headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(UqError::format(
            "header",
            format!("expected columns x0..xk,label, got {:?}", headers.iter().collect::<Vec<_>>()),
        ));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let field = || format!("row {}", row + 1);
        let record = record.map_err(|e| UqError::format(field(), e.to_string()))?;
        let x = record
            .iter()
            .take(width - 1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| UqError::format(field(), e.to_string()))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(UqError::format(field(), "non-finite feature"));
        }
        let label = record[width - 1]
            .trim()
            .parse::<i64>()
            .map_err(|e| UqError::format(field(), format!("label: {e}")))?;
        inputs.push(Tensor::vector(x));
        labels.push(label);
    }
    Dataset::new("csv", inputs, labels)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| UqError::io(path, e))?;
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(read_csv(file)?.with_name(name))
}

/// Writes inputs flattened to `x0..xk` followed by the label.
pub fn write_csv<W: std::io::Write>(data: &Dataset, writer: W) -> Result<()> {
    let to_err = |e: csv::Error| UqError::format("csv", e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    let width = data.inputs.first().map_or(0, Tensor::len);
    let mut header: Vec<String> = (0..width).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(to_err)?;
    for (x, y) in data.inputs.iter().zip(&data.labels) {
        let mut row: Vec<String> = x.data().iter().map(f64::to_string).collect();
        row.push(y.to_string());
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| UqError::format("csv", e.to_string()))
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| UqError::io(path, e))?;
    write_csv(data, std::io::BufWriter::new(file))
}

/// Index ranges of the train, validation and pool partitions. With
/// `initial_labeled` set, only that many train-range samples are kept, an
/// equal number from each class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub pool: Range<usize>,
    pub initial_labeled: Option<usize>,
    pub seed: u64,
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end && !a.is_empty() && !b.is_empty()
}

/// Splits `data` into (train, validation, pool).
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let ranges = [("train", &spec.train), ("val", &spec.val), ("pool", &spec.pool)];
    for (name, r) in ranges {
        if r.start > r.end || r.end > data.len() {
            return Err(UqError::Domain(format!(
                "{name} range {r:?} outside dataset of {} samples",
                data.len()
            )));
        }
    }
    for (i, (na, a)) in ranges.iter().enumerate() {
        for (nb, b) in &ranges[i + 1..] {
            if overlaps(a, b) {
                return Err(UqError::Domain(format!("{na} range {a:?} overlaps {nb} range {b:?}")));
            }
        }
    }
    let mut train_idx: Vec<usize> = spec.train.clone().collect();
    if let Some(m1) = spec.initial_labeled {
        let labels = data.subset(&train_idx).class_labels()?;
        let classes = data.num_classes();
        if classes == 0 || m1 % classes != 0 || m1 == 0 {
            return Err(UqError::Domain(format!(
                "initial labeled count {m1} is not a positive multiple of {classes} classes"
            )));
        }
        let per_class = m1 / classes;
        let mut rng = rng::seeded(spec.seed);
        let mut chosen = Vec::with_capacity(m1);
        for c in 0..classes {
            let mut members: Vec<usize> = train_idx
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(&i, _)| i)
                .collect();
            if members.len() < per_class {
                return Err(UqError::Domain(format!(
                    "class {c} has {} samples in the train range, {per_class} needed",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            chosen.extend_from_slice(&members[..per_class]);
        }
        chosen.sort_unstable();
        train_idx = chosen;
    }
    let val_idx: Vec<usize> = spec.val.clone().collect();
    let pool_idx: Vec<usize> = spec.pool.clone().collect();
    let mut seen = BTreeSet::new();
    for &i in train_idx.iter().chain(&val_idx).chain(&pool_idx) {
        if !seen.insert(i) {
            return Err(UqError::Contract(format!("sample {i} assigned to two partitions")));
        }
    }
    Ok((
        data.subset(&train_idx),
        data.subset(&val_idx),
        data.subset(&pool_idx),
    ))
}

/// Randomly moves `fraction` of the samples (at least one) into a held-out
/// validation set. Returns (train, validation).
pub fn holdout(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(UqError::Domain(format!("holdout fraction must lie in (0, 1), got {fraction}")));
    }
    if data.len() < 2 {
        return Err(UqError::Domain("need at least 2 samples to hold out validation data".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let n_val = ((data.len() as f64 * fraction).round() as usize).clamp(1, data.len() - 1);
    let (val, train) = idx.split_at(n_val);
    let (mut train, mut val) = (train.to_vec(), val.to_vec());
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.subset(&train), data.subset(&val)))
}
