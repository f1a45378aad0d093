//! Labeled data sets: IDX and CIFAR-10 binary loaders, Gaussian-cluster
//! synthesis, splits, standardization and the `NTKD` set format.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3072;
const NTKD_MAGIC: &[u8; 4] = b"NTKD";
const NTKD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    provenance: String,
}

impl LabeledSet {
    pub fn new(
        inputs: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::CountMismatch(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidConfig("class count must be >= 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::OutOfRange(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::InvalidMatrix("non-finite input".into()));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// `N × O` one-hot targets.
    pub fn one_hot(&self) -> Matrix {
        one_hot(&self.labels, self.num_classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::OutOfRange(format!("row {i} of {}", self.len())));
            }
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            inputs: Matrix::from_vec(indices.len(), d, data)?,
            labels,
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        })
    }

    /// Concatenate rows of two sets with the same shape.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.input_dim() != other.input_dim() || self.num_classes != other.num_classes {
            return Err(Error::ShapeMismatch("sets differ in D or O".into()));
        }
        let mut data = self.inputs.as_slice().to_vec();
        data.extend_from_slice(other.inputs.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            inputs: Matrix::from_vec(labels.len(), self.input_dim(), data)?,
            labels,
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        })
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(NTKD_MAGIC)?;
        w.write_all(&NTKD_VERSION.to_le_bytes())?;
        for n in [self.len(), self.input_dim(), self.num_classes] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for v in self.inputs.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &l in &self.labels {
            let l = u16::try_from(l)
                .map_err(|_| Error::Format(format!("label {l} does not fit in u16")))?;
            w.write_all(&l.to_le_bytes())?;
        }
        // Provenance trailer: u64 length + UTF-8 bytes.
        w.write_all(&(self.provenance.len() as u64).to_le_bytes())?;
        w.write_all(self.provenance.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != NTKD_MAGIC {
            return Err(Error::Format(format!("bad set magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        read_exact(r, &mut b4, "version")?;
        let version = u32::from_le_bytes(b4);
        if version != NTKD_VERSION {
            return Err(Error::Format(format!("unsupported set version {version}")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b8 = [0u8; 8];
            read_exact(r, &mut b8, "header")?;
            *d = u64::from_le_bytes(b8) as usize;
        }
        let [n, d, o] = dims;
        let total = n
            .checked_mul(d)
            .ok_or_else(|| Error::Format("header overflows".into()))?;
        let mut raw = vec![0u8; total * 8];
        read_exact(r, &mut raw, "inputs")?;
        let inputs: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut raw = vec![0u8; n * 2];
        read_exact(r, &mut raw, "labels")?;
        let labels = raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect();
        let mut b8 = [0u8; 8];
        read_exact(r, &mut b8, "provenance length")?;
        let mut prov = vec![0u8; u64::from_le_bytes(b8) as usize];
        read_exact(r, &mut prov, "provenance")?;
        let prov = String::from_utf8(prov)
            .map_err(|_| Error::Format("provenance is not UTF-8".into()))?;
        Self::new(Matrix::from_vec(n, d, inputs)?, labels, o, prov)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Matrix {
    let mut y = Matrix::zeros(labels.len(), num_classes);
    for (i, &l) in labels.iter().enumerate() {
        y.set(i, l, 1.0);
    }
    y
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("truncated {what} header")))
}

/// MNIST-style IDX image/label pair; pixels scaled to `[0, 1]`, ten classes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels).map(|s| {
        s.with_provenance(format!(
            "idx:{}+{}; pixels/255",
            images_path.display(),
            labels_path.display()
        ))
    })
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledSet> {
    let magic = be_u32(images, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let magic = be_u32(labels, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(images, 4, "image")? as usize;
    let rows = be_u32(images, 8, "image")? as usize;
    let cols = be_u32(images, 12, "image")? as usize;
    let n_labels = be_u32(labels, 4, "label")? as usize;
    if n != n_labels {
        return Err(Error::CountMismatch(format!(
            "{n} images but {n_labels} labels"
        )));
    }
    if n == 0 {
        return Err(Error::EmptySet);
    }
    let d = rows * cols;
    let pixels = images
        .get(16..16 + n * d)
        .ok_or_else(|| Error::Format("truncated IDX image payload".into()))?;
    let label_bytes = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Format("truncated IDX label payload".into()))?;
    let inputs = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = label_bytes.iter().map(|&l| l as usize).collect::<Vec<_>>();
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Format(format!("IDX label {bad} outside [0, 10)")));
    }
    LabeledSet::new(Matrix::from_vec(n, d, inputs)?, labels, 10, "idx; pixels/255")
}

/// CIFAR-10 binary batches: records of one label byte then 3072 channel-major pixels.
pub fn load_cifar_binary(batch_paths: &[&Path]) -> Result<LabeledSet> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let bytes = std::fs::read(path)?;
        let (x, y) = parse_cifar(&bytes)?;
        inputs.extend(x);
        labels.extend(y);
    }
    if labels.is_empty() {
        return Err(Error::EmptySet);
    }
    let names: Vec<String> = batch_paths.iter().map(|p| p.display().to_string()).collect();
    LabeledSet::new(
        Matrix::from_vec(labels.len(), 3072, inputs)?,
        labels,
        10,
        format!("cifar10:{}; pixels/255", names.join(",")),
    )
}

fn parse_cifar(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR batch length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let mut inputs = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3072);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] >= 10 {
            return Err(Error::Format(format!("CIFAR label {} outside [0, 10)", rec[0])));
        }
        labels.push(rec[0] as usize);
        inputs.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok((inputs, labels))
}

/// `per_class` unit-variance Gaussian samples around each of `O` centers.
///
/// For `D ≥ O` the centers are `separation/√2 · e_c`, so every pair is
/// `separation` apart. Lower dimensions place the centers on a circle in the
/// first two coordinates with neighbouring centers `separation` apart.
pub fn synth_clusters(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledSet> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidConfig(
            "class count, per-class count and dimension must be positive".into(),
        ));
    }
    let centers = cluster_centers(num_classes, dim, separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * per_class;
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        labels.push(c);
        for &mu in &centers[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs.push(mu + z);
        }
    }
    LabeledSet::new(
        Matrix::from_vec(n, dim, inputs)?,
        labels,
        num_classes,
        format!("synth_clusters(O={num_classes}, per_class={per_class}, D={dim}, sep={separation}, seed={seed})"),
    )
}

fn cluster_centers(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut mu = vec![0.0; dim];
            if dim >= num_classes {
                mu[c] = separation / std::f64::consts::SQRT_2;
            } else if num_classes > 1 {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                let radius =
                    separation / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
                mu[0] = radius * angle.cos();
                if dim > 1 {
                    mu[1] = radius * angle.sin();
                }
            }
            mu
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_n: usize,
    pub test_n: usize,
    pub seed: u64,
    #[serde(default)]
    pub stratified: bool,
}

/// Disjoint train/test subsets; rows keep their original relative order.
pub fn split(set: &LabeledSet, spec: &SplitSpec) -> Result<(LabeledSet, LabeledSet)> {
    let (train, test) = split_indices(set, spec)?;
    Ok((set.subset(&train)?, set.subset(&test)?))
}

pub fn split_indices(set: &LabeledSet, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = set.len();
    if spec.train_n + spec.test_n > n {
        return Err(Error::InsufficientData(format!(
            "{} + {} rows requested from a set of {n}",
            spec.train_n, spec.test_n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut test) = if spec.stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.num_classes()];
        for (i, &l) in set.labels().iter().enumerate() {
            by_class[l].push(i);
        }
        for idx in &mut by_class {
            idx.shuffle(&mut rng);
        }
        let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let train_quota = apportion(&counts, spec.train_n);
        let remaining: Vec<usize> = counts.iter().zip(&train_quota).map(|(c, q)| c - q).collect();
        let test_quota = apportion(&remaining, spec.test_n);
        let mut train = Vec::with_capacity(spec.train_n);
        let mut test = Vec::with_capacity(spec.test_n);
        for ((idx, &a), &b) in by_class.iter().zip(&train_quota).zip(&test_quota) {
            train.extend_from_slice(&idx[..a]);
            test.extend_from_slice(&idx[a..a + b]);
        }
        (train, test)
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let test = order[spec.train_n..spec.train_n + spec.test_n].to_vec();
        order.truncate(spec.train_n);
        (order, test)
    };
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Largest-remainder apportionment of `total` across `counts`, capped by each count.
fn apportion(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * total / n).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // Remainders descending; ties by class index.
    order.sort_by_key(|&c| (std::cmp::Reverse((counts[c] * total) % n), c));
    let mut left = total - quota.iter().sum::<usize>();
    while left > 0 {
        let mut progressed = false;
        for &c in &order {
            if left == 0 {
                break;
            }
            if quota[c] < counts[c] {
                quota[c] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    quota
}

/// Per-feature mean and standard deviation fitted on a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics; constant features get unit scale.
    pub fn fit(train: &LabeledSet) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptySet);
        }
        let (n, d) = train.inputs().shape();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &x) in mean.iter_mut().zip(train.inputs().row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((v, &x), &m) in var.iter_mut().zip(train.inputs().row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, set: &LabeledSet) -> Result<LabeledSet> {
        if set.input_dim() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "set has {} features, statistics have {}",
                set.input_dim(),
                self.mean.len()
            )));
        }
        let x = set.inputs();
        let z = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.mean[j]) / self.std[j]
        });
        LabeledSet::new(
            z,
            set.labels().to_vec(),
            set.num_classes(),
            format!("{}; standardized", set.provenance()),
        )
    }
}

/// Standardize a set with its own statistics.
pub fn standardize(set: &LabeledSet) -> Result<LabeledSet> {
    Standardizer::fit(set)?.apply(set)
}
