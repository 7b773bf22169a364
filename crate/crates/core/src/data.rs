//! Dataset ingestion: CIFAR-10 binary batches (with a checksum manifest),
//! synthetic class-cluster data, stratified subsetting and augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{CrcdError, Result};

pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_PER_FILE: usize = 10_000;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";
pub const MANIFEST_FILE: &str = "checksums.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10,
    /// Gaussian class clusters around per-class templates.
    Synthetic,
    /// Two linearly separable classes with a margin.
    Separable,
}

/// Everything needed to reproduce a dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetHandle {
    pub kind: DatasetKind,
    /// Directory holding `data_batch_*.bin` / `test_batch.bin` for CIFAR-10.
    pub path: PathBuf,
    /// Tarball URL fetched when the files are absent.
    pub url: Option<String>,
    pub subset_fraction: f64,
    pub test_subset_fraction: f64,
    pub augment: bool,
    /// Data seed; independent of the run seed so every run sees the same split.
    pub seed: u64,
    pub num_classes: usize,
    pub sample_shape: Vec<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub separation: f64,
}

impl Default for DatasetHandle {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: PathBuf::from("data/cifar-10-batches-bin"),
            url: None,
            subset_fraction: 1.0,
            test_subset_fraction: 1.0,
            augment: false,
            seed: 0,
            num_classes: 4,
            sample_shape: vec![16],
            train_per_class: 100,
            test_per_class: 50,
            noise: 1.0,
            separation: 1.0,
        }
    }
}

impl DatasetHandle {
    pub fn cifar10(path: impl Into<PathBuf>, subset_fraction: f64) -> Self {
        Self {
            kind: DatasetKind::Cifar10,
            path: path.into(),
            subset_fraction,
            augment: true,
            num_classes: 10,
            sample_shape: vec![3, 32, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("subset_fraction", self.subset_fraction),
            ("test_subset_fraction", self.test_subset_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(CrcdError::Schema {
                    field: format!("data.{name}"),
                    message: format!("must be in (0, 1], got {f}"),
                });
            }
        }
        if self.kind != DatasetKind::Cifar10 && (self.num_classes < 2 || self.sample_shape.is_empty())
        {
            return Err(CrcdError::Schema {
                field: "data.num_classes".into(),
                message: "synthetic data needs >= 2 classes and a sample shape".into(),
            });
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            DatasetKind::Cifar10 => vec![3, 32, 32],
            _ => self.sample_shape.clone(),
        }
    }

    pub fn class_count(&self) -> usize {
        match self.kind {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Separable => 2,
            DatasetKind::Synthetic => self.num_classes,
        }
    }
}

/// In-memory labeled split; row `i` of `inputs` is sample `i`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub inputs: Array2<f64>,
    pub sample_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// One mini-batch. `sample_ids` index the training split.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.select(Axis(0), indices),
            sample_shape: self.sample_shape.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Gathers rows into a batch tensor `[B, sample_shape...]`, optionally augmented.
    pub fn batch(&self, indices: &[usize], augment: Option<&mut ChaCha8Rng>) -> Batch {
        let mut rows = self.inputs.select(Axis(0), indices);
        if let Some(rng) = augment {
            if self.sample_shape.len() == 3 {
                for mut row in rows.rows_mut() {
                    let aug = crop_and_flip(
                        row.as_slice().unwrap(),
                        &self.sample_shape,
                        4,
                        rng,
                    );
                    row.assign(&ndarray::ArrayView1::from(&aug));
                }
            }
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        Batch {
            inputs: rows.into_shape_with_order(IxDyn(&shape)).unwrap(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sample_ids: indices.to_vec(),
        }
    }
}

/// Random crop after zero padding by `pad`, then a horizontal flip with probability 1/2.
pub fn crop_and_flip(img: &[f64], shape: &[usize], pad: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let flip = rng.random_bool(0.5);
    let mut out = vec![0.0; img.len()];
    for ci in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = xx as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ci * h + y) * w + x] = img[(ci * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Indices of a class-stratified subset: `round(fraction · count_c)` per class,
/// chosen by a seeded shuffle, returned in ascending order.
pub fn stratified_subset(labels: &[usize], num_classes: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..labels.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let take = (fraction * idx.len() as f64).round() as usize;
        idx.shuffle(&mut rng);
        out.extend_from_slice(&idx[..take.min(idx.len())]);
    }
    out.sort_unstable();
    out
}

/// Shuffled visiting order for one epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = derive_rng(seed, "epoch-order", epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Independent generator for a named purpose.
pub fn derive_rng(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    /// Indices into the full training split that make up `train`.
    pub train_indices: Vec<usize>,
}

pub fn load_dataset(handle: &DatasetHandle) -> Result<LoadedData> {
    handle.validate()?;
    let (full_train, full_test) = match handle.kind {
        DatasetKind::Cifar10 => load_cifar10(&handle.path, handle.url.as_deref())?,
        DatasetKind::Synthetic => synthetic_clusters(handle),
        DatasetKind::Separable => separable(handle),
    };
    let train_indices = stratified_subset(
        &full_train.labels,
        full_train.num_classes,
        handle.subset_fraction,
        handle.seed,
    );
    let test_indices = stratified_subset(
        &full_test.labels,
        full_test.num_classes,
        handle.test_subset_fraction,
        handle.seed.wrapping_add(1),
    );
    Ok(LoadedData {
        train: full_train.subset(&train_indices),
        test: full_test.subset(&test_indices),
        train_indices,
    })
}

fn synthetic_clusters(h: &DatasetHandle) -> (Dataset, Dataset) {
    let mut rng = derive_rng(h.seed, "synthetic-templates", 0);
    let dim: usize = h.sample_shape.iter().product();
    let templates: Vec<Vec<f64>> = (0..h.num_classes)
        .map(|_| {
            if h.sample_shape.len() == 3 {
                smooth_template(&h.sample_shape, &mut rng)
                    .into_iter()
                    .map(|v| v * h.separation)
                    .collect()
            } else {
                (0..dim)
                    .map(|_| h.separation * sample_normal(&mut rng))
                    .collect()
            }
        })
        .collect();
    let draw = |per_class: usize, purpose: &str| {
        let mut rng = derive_rng(h.seed, purpose, 0);
        let n = per_class * h.num_classes;
        let mut inputs = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % h.num_classes;
            for (j, v) in inputs.row_mut(i).iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = templates[c][j] + h.noise * e;
            }
            labels.push(c);
        }
        Dataset {
            name: "synthetic".into(),
            inputs,
            sample_shape: h.sample_shape.clone(),
            labels,
            num_classes: h.num_classes,
        }
    };
    (
        draw(h.train_per_class, "synthetic-train"),
        draw(h.test_per_class, "synthetic-test"),
    )
}

/// Blocky 4×4 random pattern per channel, upsampled to the image size.
fn smooth_template(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (c, hgt, w) = (shape[0], shape[1], shape[2]);
    let coarse: Vec<f64> = (0..c * 16).map(|_| -> f64 { StandardNormal.sample(rng) }).collect();
    let mut out = vec![0.0; c * hgt * w];
    for ci in 0..c {
        for y in 0..hgt {
            for x in 0..w {
                let (cy, cx) = (y * 4 / hgt, x * 4 / w);
                out[(ci * hgt + y) * w + x] = coarse[ci * 16 + cy * 4 + cx];
            }
        }
    }
    out
}

fn separable(h: &DatasetHandle) -> (Dataset, Dataset) {
    let dim: usize = h.sample_shape.iter().product();
    let mut rng = derive_rng(h.seed, "separable-normal", 0);
    let mut normal: Vec<f64> = (0..dim).map(|_| sample_normal(&mut rng)).collect();
    let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
    normal.iter_mut().for_each(|v| *v /= norm);
    let margin = h.separation.max(0.0);
    let draw = |per_class: usize, purpose: &str| {
        let mut rng = derive_rng(h.seed, purpose, 0);
        let n = 2 * per_class;
        let mut inputs = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let mut x: Vec<f64> = (0..dim)
                .map(|_| h.noise * sample_normal(&mut rng))
                .collect();
            let proj: f64 = x.iter().zip(&normal).map(|(a, b)| a * b).sum();
            let shift = sign * (proj.abs() + margin) - proj;
            for (v, nrm) in x.iter_mut().zip(&normal) {
                *v += shift * nrm;
            }
            inputs.row_mut(i).assign(&ndarray::Array1::from(x));
            labels.push(label);
        }
        Dataset {
            name: "separable".into(),
            inputs,
            sample_shape: h.sample_shape.clone(),
            labels,
            num_classes: 2,
        }
    };
    (
        draw(h.train_per_class, "separable-train"),
        draw(h.test_per_class, "separable-test"),
    )
}

pub fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Verifies files against `checksums.json` in `dir`, writing the manifest on first use.
pub fn verify_manifest(dir: &Path, files: &[&str]) -> Result<BTreeMap<String, String>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut actual = BTreeMap::new();
    for f in files {
        actual.insert(f.to_string(), sha256_file(&dir.join(f))?);
    }
    if manifest_path.exists() {
        let recorded: BTreeMap<String, String> =
            serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        for (f, sum) in &actual {
            match recorded.get(f) {
                Some(r) if r == sum => {}
                Some(r) => {
                    return Err(CrcdError::Ingestion(format!(
                        "checksum mismatch for {}: manifest {r}, file {sum}",
                        dir.join(f).display()
                    )))
                }
                None => {
                    return Err(CrcdError::Ingestion(format!(
                        "{} is not listed in {}",
                        f,
                        manifest_path.display()
                    )))
                }
            }
        }
    } else {
        fs::write(&manifest_path, serde_json::to_string_pretty(&actual)?)?;
    }
    Ok(actual)
}

fn download_cifar10(dir: &Path, url: &str) -> Result<()> {
    eprintln!("downloading CIFAR-10 from {url}");
    let response = ureq::get(url)
        .call()
        .map_err(|e| CrcdError::Ingestion(format!("download of {url} failed: {e}")))?;
    let reader = response.into_body().into_reader();
    let gz = flate2::read::GzDecoder::new(reader);
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    tar::Archive::new(gz)
        .unpack(parent)
        .map_err(|e| CrcdError::Ingestion(format!("unpacking {url}: {e}")))?;
    Ok(())
}

fn read_cifar_file(path: &Path, out_inputs: &mut Vec<f64>, out_labels: &mut Vec<usize>) -> Result<()> {
    let bytes = fs::read(path)
        .map_err(|e| CrcdError::Ingestion(format!("reading {}: {e}", path.display())))?;
    if bytes.len() != CIFAR_RECORD * CIFAR_PER_FILE {
        return Err(CrcdError::Ingestion(format!(
            "{} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            CIFAR_RECORD * CIFAR_PER_FILE
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(CrcdError::Ingestion(format!(
                "{}: label {label} out of range",
                path.display()
            )));
        }
        out_labels.push(label);
        for (i, &px) in rec[1..].iter().enumerate() {
            let ch = i / 1024;
            out_inputs.push((px as f64 / 255.0 - CIFAR10_MEAN[ch]) / CIFAR10_STD[ch]);
        }
    }
    Ok(())
}

/// Reads the CIFAR-10 binary release from `dir`, downloading it first when
/// the files are absent and a URL is configured.
pub fn load_cifar10(dir: &Path, url: Option<&str>) -> Result<(Dataset, Dataset)> {
    let mut files: Vec<&str> = CIFAR_TRAIN_FILES.to_vec();
    files.push(CIFAR_TEST_FILE);
    let missing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| !dir.join(f).exists())
        .collect();
    if !missing.is_empty() {
        match url {
            Some(u) => download_cifar10(dir, u)?,
            None => {
                return Err(CrcdError::Ingestion(format!(
                    "CIFAR-10 files missing in {}: {}",
                    dir.display(),
                    missing.join(", ")
                )))
            }
        }
    }
    verify_manifest(dir, &files)?;
    let split = |names: &[&str]| -> Result<Dataset> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for f in names {
            read_cifar_file(&dir.join(f), &mut inputs, &mut labels)?;
        }
        Ok(Dataset {
            name: "cifar10".into(),
            inputs: Array2::from_shape_vec((labels.len(), 3072), inputs).unwrap(),
            sample_shape: vec![3, 32, 32],
            labels,
            num_classes: 10,
        })
    };
    Ok((split(&CIFAR_TRAIN_FILES)?, split(&[CIFAR_TEST_FILE])?))
}
