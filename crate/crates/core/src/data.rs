//! Datasets of labelled feature vectors, the synthetic generator, and the
//! on-disk dataset and embedding formats.
//!
//! Dataset file (UTF-8 text, `\n` line endings):
//!
//! ```text
//! reid-dataset version=1 dim=<D>
//! <identity>,<camera>,<split>,<x_0>,...,<x_{D-1}>
//! ```
//!
//! `split` is one of `train`, `query`, `gallery`. Floats are written in the
//! shortest form that parses back to the same `f64`.
//!
//! Embedding file: one text line `reid-embeddings version=1 count=<N> dim=<F>`
//! terminated by `\n`, then `N` records of `3 + F` little-endian 8-byte words:
//! identity (u64), camera (u64), split code (u64: 0 train, 1 query,
//! 2 gallery), then the `F` embedding values as f64.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{squared_distance, Matrix};
use crate::rng;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const EMBEDDING_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "gallery" => Some(Split::Gallery),
            _ => None,
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Gallery => 2,
        }
    }

    fn from_code(c: u64) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Query),
            2 => Some(Split::Gallery),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub feature: Vec<f64>,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.feature.len() != dim {
                return Err(Error::Shape(format!("sample {i} has {} features, expected {dim}", s.feature.len())));
            }
            if s.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sample {i}")));
            }
        }
        Ok(Self { dim, samples })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn identities(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    pub fn identity_count(&self) -> usize {
        self.identities().len()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn features(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].feature);
        }
        Matrix::from_vec(indices.len(), self.dim, data).expect("rows share the dataset dimension")
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.samples[i].identity).collect()
    }

    /// Raw features of one split as an embedding set.
    pub fn raw_embeddings(&self, split: Split) -> EmbeddingSet {
        let idx = self.indices_of(split);
        EmbeddingSet::from_samples(&self.samples, &idx, self.features(&idx))
    }
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_string(dataset))?;
    Ok(())
}

pub fn dataset_to_string(dataset: &Dataset) -> String {
    let mut out = format!("reid-dataset version={DATASET_FORMAT_VERSION} dim={}\n", dataset.dim);
    for s in &dataset.samples {
        let _ = write!(out, "{},{},{}", s.identity, s.camera, s.split.name());
        for v in &s.feature {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_dataset(&fs::read_to_string(path)?)
}

fn header_field<'a>(fields: &[&'a str], key: &str) -> Option<&'a str> {
    fields.iter().find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
    let (_, header) = lines.next().ok_or_else(|| bad(0, "empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&"reid-dataset") {
        return Err(bad(0, "missing reid-dataset header".into()));
    }
    match header_field(&fields, "version").and_then(|v| v.parse::<u32>().ok()) {
        Some(DATASET_FORMAT_VERSION) => {}
        other => return Err(bad(0, format!("unsupported format version {other:?}"))),
    }
    let dim: usize = header_field(&fields, "dim")
        .and_then(|v| v.parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| bad(0, "header lacks a positive dim".into()))?;

    let mut samples = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 + dim {
            return Err(bad(n, format!("expected {} columns, found {}", 3 + dim, cols.len())));
        }
        let identity = cols[0].parse().map_err(|_| bad(n, format!("bad identity {:?}", cols[0])))?;
        let camera = cols[1].parse().map_err(|_| bad(n, format!("bad camera {:?}", cols[1])))?;
        let split = Split::parse(cols[2]).ok_or_else(|| bad(n, format!("bad split {:?}", cols[2])))?;
        let mut feature = Vec::with_capacity(dim);
        for c in &cols[3..] {
            let v: f64 = c.parse().map_err(|_| bad(n, format!("bad feature value {c:?}")))?;
            if !v.is_finite() {
                return Err(bad(n, format!("non-finite feature value {c:?}")));
            }
            feature.push(v);
        }
        samples.push(Sample { feature, identity, camera, split });
    }
    Dataset::new(dim, samples)
}

/// Synthetic identity clusters seen from a few shared viewpoints.
///
/// Each identity gets a centroid drawn from `N(0, sigma_id^2 I)`. The
/// `viewpoints` offsets, drawn from `N(0, sigma_view^2 I)`, are shared by
/// all identities. Sample `s` of an identity is seen from viewpoint
/// `s % viewpoints`, recorded by camera `viewpoint % cameras_per_identity`,
/// and equals centroid + viewpoint offset + `N(0, sigma_noise^2 I)` noise.
///
/// The first `identities` identities form the train split. The following
/// `held_out_identities` are split into one query per viewpoint (samples
/// `0..viewpoints`) and gallery (the rest).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub identities: usize,
    pub held_out_identities: usize,
    pub samples_per_identity: usize,
    pub dim: usize,
    pub viewpoints: usize,
    pub sigma_id: f64,
    pub sigma_view: f64,
    pub sigma_noise: f64,
    pub cameras_per_identity: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            identities: 32,
            held_out_identities: 32,
            samples_per_identity: 12,
            dim: 16,
            viewpoints: 3,
            sigma_id: 1.0,
            sigma_view: 1.0,
            sigma_noise: 0.1,
            cameras_per_identity: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.identities + self.held_out_identities == 0 {
            return bad("synthetic data needs at least one identity");
        }
        if self.samples_per_identity == 0 || self.dim == 0 || self.viewpoints == 0 || self.cameras_per_identity == 0 {
            return bad("samples_per_identity, dim, viewpoints and cameras_per_identity must be positive");
        }
        if !self.sigma_id.is_finite() || self.sigma_id <= 0.0 {
            return bad("sigma_id must be positive");
        }
        for s in [self.sigma_view, self.sigma_noise] {
            if !s.is_finite() || s < 0.0 {
                return bad("sigma_view and sigma_noise must be finite and non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub dataset: Dataset,
    pub centroids: Vec<Vec<f64>>,
    pub view_offsets: Vec<Vec<f64>>,
}

impl Synthesis {
    pub fn min_centroid_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.centroids.len() {
            for j in i + 1..self.centroids.len() {
                best = best.min(squared_distance(&self.centroids[i], &self.centroids[j]).sqrt());
            }
        }
        best
    }
}

fn gaussian_vec(rng: &mut rng::StreamRng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect()
}

pub fn synthesize(spec: &SynthSpec) -> Result<Synthesis> {
    spec.validate()?;
    let total = spec.identities + spec.held_out_identities;
    let mut centroid_rng = rng::stream(spec.seed, 0);
    let mut view_rng = rng::stream(spec.seed, 1);
    let mut noise_rng = rng::stream(spec.seed, 2);

    let centroids: Vec<Vec<f64>> = (0..total).map(|_| gaussian_vec(&mut centroid_rng, spec.dim, spec.sigma_id)).collect();
    let view_offsets: Vec<Vec<f64>> =
        (0..spec.viewpoints).map(|_| gaussian_vec(&mut view_rng, spec.dim, spec.sigma_view)).collect();

    let mut samples = Vec::with_capacity(total * spec.samples_per_identity);
    for (id, centroid) in centroids.iter().enumerate() {
        for s in 0..spec.samples_per_identity {
            let view = s % spec.viewpoints;
            let noise = gaussian_vec(&mut noise_rng, spec.dim, spec.sigma_noise);
            let feature = (0..spec.dim).map(|k| centroid[k] + view_offsets[view][k] + noise[k]).collect();
            let split = if id < spec.identities {
                Split::Train
            } else if s < spec.viewpoints {
                Split::Query
            } else {
                Split::Gallery
            };
            samples.push(Sample {
                feature,
                identity: id as u32,
                camera: (view % spec.cameras_per_identity) as u32,
                split,
            });
        }
    }
    Ok(Synthesis { dataset: Dataset::new(spec.dim, samples)?, centroids, view_offsets })
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    Ok(synthesize(spec)?.dataset)
}

/// Embeddings with the metadata of the samples they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub embeddings: Matrix,
    pub identities: Vec<u32>,
    pub cameras: Vec<u32>,
    pub splits: Vec<Split>,
}

impl EmbeddingSet {
    pub fn new(embeddings: Matrix, identities: Vec<u32>, cameras: Vec<u32>, splits: Vec<Split>) -> Result<Self> {
        let n = embeddings.rows();
        if identities.len() != n || cameras.len() != n || splits.len() != n {
            return Err(Error::Shape(format!(
                "{n} embeddings with {}/{}/{} metadata entries",
                identities.len(),
                cameras.len(),
                splits.len()
            )));
        }
        Ok(Self { embeddings, identities, cameras, splits })
    }

    pub fn from_samples(samples: &[Sample], indices: &[usize], embeddings: Matrix) -> Self {
        Self {
            embeddings,
            identities: indices.iter().map(|&i| samples[i].identity).collect(),
            cameras: indices.iter().map(|&i| samples[i].camera).collect(),
            splits: indices.iter().map(|&i| samples[i].split).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            embeddings: self.embeddings.select_rows(indices),
            identities: indices.iter().map(|&i| self.identities[i]).collect(),
            cameras: indices.iter().map(|&i| self.cameras[i]).collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    pub fn split(&self, split: Split) -> EmbeddingSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        self.subset(&idx)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "reid-embeddings version={EMBEDDING_FORMAT_VERSION} count={} dim={}\n",
            self.len(),
            self.dim()
        )
        .into_bytes();
        for i in 0..self.len() {
            out.extend_from_slice(&u64::from(self.identities[i]).to_le_bytes());
            out.extend_from_slice(&u64::from(self.cameras[i]).to_le_bytes());
            out.extend_from_slice(&self.splits[i].code().to_le_bytes());
            for v in self.embeddings.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, msg: String| Error::Corrupt { offset: offset as u64, msg };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt(0, "missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt(0, "header is not UTF-8".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.first() != Some(&"reid-embeddings") {
            return Err(corrupt(0, "missing reid-embeddings header".into()));
        }
        match header_field(&fields, "version").and_then(|v| v.parse::<u32>().ok()) {
            Some(EMBEDDING_FORMAT_VERSION) => {}
            other => return Err(corrupt(0, format!("unsupported format version {other:?}"))),
        }
        let count: usize = header_field(&fields, "count")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt(0, "header lacks count".into()))?;
        let dim: usize = header_field(&fields, "dim")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt(0, "header lacks dim".into()))?;

        let start = nl + 1;
        let record = (3 + dim) * 8;
        let expected = count
            .checked_mul(record)
            .ok_or_else(|| corrupt(0, "count * dim overflows".into()))?;
        let payload = &bytes[start..];
        if payload.len() < expected {
            let whole = payload.len() / record;
            return Err(corrupt(
                start + whole * record,
                format!("truncated: record {whole} of {count} is incomplete"),
            ));
        }
        if payload.len() > expected {
            return Err(corrupt(start + expected, "trailing bytes after the last record".into()));
        }

        let word = |at: usize| -> [u8; 8] { payload[at..at + 8].try_into().expect("8-byte slice") };
        let mut identities = Vec::with_capacity(count);
        let mut cameras = Vec::with_capacity(count);
        let mut splits = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count * dim);
        for r in 0..count {
            let base = r * record;
            let id = u64::from_le_bytes(word(base));
            let cam = u64::from_le_bytes(word(base + 8));
            let code = u64::from_le_bytes(word(base + 16));
            let id = u32::try_from(id).map_err(|_| corrupt(start + base, format!("identity {id} out of range")))?;
            let cam = u32::try_from(cam).map_err(|_| corrupt(start + base + 8, format!("camera {cam} out of range")))?;
            let split = Split::from_code(code).ok_or_else(|| corrupt(start + base + 16, format!("bad split code {code}")))?;
            identities.push(id);
            cameras.push(cam);
            splits.push(split);
            for k in 0..dim {
                let at = base + 24 + 8 * k;
                let v = f64::from_le_bytes(word(at));
                if !v.is_finite() {
                    return Err(corrupt(start + at, "non-finite embedding value".into()));
                }
                values.push(v);
            }
        }
        EmbeddingSet::new(Matrix::from_vec(count, dim, values)?, identities, cameras, splits)
    }
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, set.to_bytes())?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    EmbeddingSet::from_bytes(&fs::read(path)?)
}
