//! Labeled feature-vector datasets: external embedding files and synthetic
//! Gaussian mixtures.
//!
//! On-disk embedding format (little-endian): magic `FLDE`, `u32` version = 1,
//! `u64` record count, `u32` feature dimension, then one record per sample of
//! `u32` class id followed by `dim` `f32` values. A JSON manifest declares the
//! role of every class: `{"classes": [{"id": 0, "role": "pretrain"}, ...]}`.
//!
//! Values are stored as 32-bit floats on disk and promoted to 64-bit for all
//! in-memory math.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"FLDE";
pub const EMBEDDING_VERSION: u32 = 1;

/// Dense class identifier; ids form a contiguous range `[0, num_classes)`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Whether a class participates in the pretraining phase or only appears in
/// the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassRole {
    Pretrain,
    Novel,
}

/// One labeled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: ClassId,
}

/// Immutable collection of samples with class roles and a reserved
/// pretraining pool.
///
/// Samples of pretrain classes are split half and half between the
/// pretraining pool and the stream pool (first ⌈n/2⌉ of each class, in
/// dataset order, go to pretraining), so pretrain classes also appear in the
/// stream. Novel-class samples are all streamable.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    dim: usize,
    class_roles: BTreeMap<ClassId, ClassRole>,
    pretrain_pool: Vec<usize>,
    stream_pool: BTreeMap<ClassId, Vec<usize>>,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        dim: usize,
        class_roles: BTreeMap<ClassId, ClassRole>,
    ) -> Result<Self> {
        if class_roles.is_empty() {
            return Err(Error::InvalidSpec("dataset declares no classes".into()));
        }
        let n_classes = class_roles.len() as u32;
        for (i, id) in class_roles.keys().enumerate() {
            if id.0 != i as u32 {
                return Err(Error::InvalidSpec(format!(
                    "class ids must form a contiguous range [0, {n_classes}); missing id {i}"
                )));
            }
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: s.features.len(),
                });
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "sample {i} contains a non-finite feature value"
                )));
            }
            if !class_roles.contains_key(&s.label) {
                return Err(Error::MissingRole(s.label.0));
            }
        }

        // Per pretrain class: first ceil(n/2) samples (dataset order) are
        // reserved for pretraining, the rest stream.
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_class.entry(s.label).or_default().push(i);
        }
        let mut pretrain_pool = Vec::new();
        let mut stream_pool: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (&class, indices) in &by_class {
            match class_roles[&class] {
                ClassRole::Pretrain => {
                    let cut = indices.len().div_ceil(2);
                    pretrain_pool.extend_from_slice(&indices[..cut]);
                    if indices.len() > cut {
                        stream_pool.insert(class, indices[cut..].to_vec());
                    }
                }
                ClassRole::Novel => {
                    stream_pool.insert(class, indices.clone());
                }
            }
        }
        pretrain_pool.sort_unstable();

        Ok(Dataset {
            samples,
            dim,
            class_roles,
            pretrain_pool,
            stream_pool,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_roles.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> Option<&Sample> {
        self.samples.get(index)
    }

    pub fn role(&self, class: ClassId) -> Option<ClassRole> {
        self.class_roles.get(&class).copied()
    }

    pub fn class_roles(&self) -> &BTreeMap<ClassId, ClassRole> {
        &self.class_roles
    }

    pub fn pretrain_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.class_roles
            .iter()
            .filter(|(_, r)| **r == ClassRole::Pretrain)
            .map(|(c, _)| *c)
    }

    /// Sample indices reserved for the pretraining phase.
    pub fn pretrain_pool(&self) -> &[usize] {
        &self.pretrain_pool
    }

    /// Streamable sample indices per class (pretraining pool excluded).
    pub fn stream_pool(&self) -> &BTreeMap<ClassId, Vec<usize>> {
        &self.stream_pool
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    pub classes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: u32,
    pub role: ClassRole,
}

impl Manifest {
    pub fn from_roles(roles: &BTreeMap<ClassId, ClassRole>) -> Self {
        Manifest {
            classes: roles
                .iter()
                .map(|(c, r)| ManifestEntry { id: c.0, role: *r })
                .collect(),
        }
    }

    pub fn roles(&self) -> Result<BTreeMap<ClassId, ClassRole>> {
        let mut roles = BTreeMap::new();
        for entry in &self.classes {
            if roles.insert(ClassId(entry.id), entry.role).is_some() {
                return Err(Error::InvalidSpec(format!(
                    "manifest declares class {} twice",
                    entry.id
                )));
            }
        }
        Ok(roles)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads an embedding file and its role manifest. Sample order is preserved
/// from the file.
pub fn load_embeddings(path: &Path, manifest_path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(manifest_path)?;
    let roles = manifest.roles()?;

    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {EMBEDDING_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {EMBEDDING_VERSION}"
        )));
    }
    let n = read_u64(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    if dim == 0 {
        return Err(Error::Format("feature dimension is zero".into()));
    }

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let class = ClassId(read_u32(&mut r)?);
        if !roles.contains_key(&class) {
            return Err(Error::MissingRole(class.0));
        }
        let mut features = Vec::with_capacity(dim);
        for _ in 0..dim {
            features.push(read_f32(&mut r)? as f64);
        }
        samples.push(Sample {
            features,
            label: class,
        });
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Format(
                "trailing bytes after declared record count (record length mismatch?)".into(),
            ))
        }
        Err(e) => return Err(Error::io(path, e)),
    }

    Dataset::new(samples, dim, roles)
}

/// Writes a dataset in the binary embedding format (features truncated to
/// f32).
pub fn write_embeddings(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&EMBEDDING_MAGIC).map_err(io)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(dataset.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&(dataset.dim() as u32).to_le_bytes())
        .map_err(io)?;
    for s in dataset.samples() {
        w.write_all(&s.label.0.to_le_bytes()).map_err(io)?;
        for &v in &s.features {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("unexpected end of file while reading {what}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "u32")?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, "u64")?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "f32")?;
    Ok(f32::from_le_bytes(b))
}

/// Synthetic Gaussian-mixture dataset specification.
///
/// `cluster_separation` is the pairwise distance between class means in units
/// of the per-coordinate noise standard deviation (which is 1).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GaussianMixtureSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub cluster_separation: f64,
    pub samples_per_class: usize,
    pub pretrain_fraction: f64,
    pub seed: u64,
}

impl GaussianMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be >= 2".into()));
        }
        if self.dim < 1 {
            return Err(Error::InvalidSpec("dim must be >= 1".into()));
        }
        if self.samples_per_class < 1 {
            return Err(Error::InvalidSpec("samples_per_class must be >= 1".into()));
        }
        if !(self.pretrain_fraction > 0.0 && self.pretrain_fraction <= 1.0) {
            return Err(Error::InvalidSpec(
                "pretrain_fraction must lie in (0, 1]".into(),
            ));
        }
        if !(self.cluster_separation >= 0.0 && self.cluster_separation.is_finite()) {
            return Err(Error::InvalidSpec(
                "cluster_separation must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn num_pretrain_classes(&self) -> usize {
        ((self.pretrain_fraction * self.num_classes as f64).ceil() as usize)
            .clamp(1, self.num_classes)
    }
}

/// Class mean placement. For `k <= dim` the means are scaled standard basis
/// vectors and for `k == dim + 1` the extra vertex of the regular simplex, so
/// all pairwise distances equal the separation exactly. For `k > dim + 1`
/// means are random unit directions scaled to `separation / sqrt(2)`; the
/// placement is rejected if any pair ends up closer than half the requested
/// separation.
pub(crate) fn place_means(spec: &GaussianMixtureSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let k = spec.num_classes;
    let d = spec.dim;
    let scale = spec.cluster_separation / 2f64.sqrt();

    let mut means = Vec::with_capacity(k);
    if k <= d + 1 {
        let basis_count = k.min(d);
        for i in 0..basis_count {
            let mut m = vec![0.0; d];
            m[i] = scale;
            means.push(m);
        }
        if k == d + 1 {
            // Remaining vertex of the regular simplex: alpha * (1, ..., 1).
            let alpha = (1.0 - ((d + 1) as f64).sqrt()) / d as f64;
            means.push(vec![alpha * scale; d]);
        }
    } else {
        for _ in 0..k {
            let mut m: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = linalg::norm(&m);
            if n == 0.0 {
                return Err(Error::InvalidSpec(
                    "degenerate random direction while placing means".into(),
                ));
            }
            for v in &mut m {
                *v *= scale / n;
            }
            means.push(m);
        }
        if spec.cluster_separation > 0.0 {
            for i in 0..k {
                for j in (i + 1)..k {
                    if linalg::euclidean(&means[i], &means[j]) < 0.5 * spec.cluster_separation {
                        return Err(Error::InvalidSpec(format!(
                            "dim {d} too small to place {k} means at separation {}",
                            spec.cluster_separation
                        )));
                    }
                }
            }
        }
    }
    Ok(means)
}

/// Deterministically synthesizes a Gaussian-mixture dataset. The first
/// ⌈pretrain_fraction × num_classes⌉ class ids are tagged `Pretrain`.
pub fn synth_gaussian(spec: &GaussianMixtureSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = place_means(spec, &mut rng)?;

    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let features = mean
                .iter()
                .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample {
                features,
                label: ClassId(c as u32),
            });
        }
    }

    let n_pre = spec.num_pretrain_classes();
    let roles = (0..spec.num_classes)
        .map(|c| {
            let role = if c < n_pre {
                ClassRole::Pretrain
            } else {
                ClassRole::Novel
            };
            (ClassId(c as u32), role)
        })
        .collect();

    Dataset::new(samples, spec.dim, roles)
}
