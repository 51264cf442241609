//! Bijective feature codec.
//!
//! High-dimensional region embeddings are reduced with PCA to a small code
//! that the rasterizer can blend, and every registered embedding is kept in
//! a lookup table next to its code. Encoding is a table lookup and decoding
//! is a nearest-code search, so a rendered code that lands on a registered
//! code returns the original embedding bit for bit.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::Granularity;

/// Step added to the last code coordinate until colliding codes separate.
pub const COLLISION_STEP: f64 = 1e-6;

const MAGIC: &[u8; 4] = b"SLGC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("reduction dimension exceeds input ({code_dim} > {input_dim})")]
    DimensionTooLarge { code_dim: usize, input_dim: usize },
    #[error("code dimension must be at least 1")]
    ZeroDimension,
    #[error("no features to fit")]
    Empty,
    #[error("feature has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown feature")]
    UnknownFeature,
    #[error("codec table is empty")]
    EmptyTable,
    #[error("code is not finite")]
    NonFiniteCode,
    #[error("malformed codec file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Sidecar metadata written next to a persisted codec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecMetadata {
    pub input_dim: usize,
    pub code_dim: usize,
    pub granularity: Option<Granularity>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct Decoded<'a> {
    pub index: usize,
    pub feature: &'a [f64],
    pub distance: f64,
}

#[derive(Clone, Debug)]
pub struct FeatureCodec {
    pub granularity: Option<Granularity>,
    input_dim: usize,
    code_dim: usize,
    mean: Vec<f64>,
    /// d×D, rows orthonormal.
    components: Vec<f64>,
    code_min: Vec<f64>,
    code_max: Vec<f64>,
    codes: Vec<f64>,
    originals: Vec<f64>,
    index: HashMap<Vec<u64>, usize>,
}

fn key(v: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 are the same feature
    v.iter().map(|x| if *x == 0.0 { 0 } else { x.to_bits() }).collect()
}

/// Top-`d` principal directions of the rows of `x` (already centered),
/// completed to `d` orthonormal rows when the data has lower rank.
fn principal_components(x: &DMatrix<f64>, d: usize) -> Vec<DVector<f64>> {
    let (n, dim) = x.shape();
    let mut dirs: Vec<(f64, DVector<f64>)> = if n < dim {
        let gram = x * x.transpose();
        let eig = gram.symmetric_eigen();
        (0..n)
            .map(|i| {
                let lambda = eig.eigenvalues[i];
                let u = x.transpose() * eig.eigenvectors.column(i);
                let norm = u.norm();
                (lambda, if norm > 0.0 { u / norm } else { u })
            })
            .collect()
    } else {
        let cov = x.transpose() * x;
        let eig = cov.symmetric_eigen();
        (0..dim).map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned())).collect()
    };
    dirs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = dirs.first().map(|d| d.0).unwrap_or(0.0).max(0.0);
    let tol = top * 1e-12;

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(d);
    let push_orthogonal = |v: DVector<f64>, basis: &mut Vec<DVector<f64>>| {
        let mut v = v;
        for _ in 0..2 {
            for b in basis.iter() {
                let dot = b.dot(&v);
                v -= b * dot;
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            basis.push(v / norm);
        }
    };
    for (lambda, v) in dirs {
        if basis.len() == d || lambda <= tol {
            break;
        }
        push_orthogonal(v, &mut basis);
    }
    let mut axis = 0;
    while basis.len() < d && axis < dim {
        push_orthogonal(DVector::from_fn(dim, |i, _| if i == axis { 1.0 } else { 0.0 }), &mut basis);
        axis += 1;
    }
    for b in basis.iter_mut() {
        // deterministic sign: largest-magnitude coordinate positive
        let (imax, _) = b.iter().enumerate().fold((0, 0.0), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        if b[imax] < 0.0 {
            *b = -b.clone();
        }
    }
    basis
}

impl FeatureCodec {
    /// Fits PCA on the distinct rows of `features` and registers each of
    /// them. Exact duplicates share one table entry.
    pub fn fit(features: &[Vec<f64>], code_dim: usize) -> Result<Self, CodecError> {
        let first = features.first().ok_or(CodecError::Empty)?;
        let input_dim = first.len();
        if code_dim == 0 {
            return Err(CodecError::ZeroDimension);
        }
        if code_dim > input_dim {
            return Err(CodecError::DimensionTooLarge { code_dim, input_dim });
        }
        let mut index = HashMap::new();
        let mut distinct: Vec<&[f64]> = Vec::new();
        for f in features {
            if f.len() != input_dim {
                return Err(CodecError::DimensionMismatch { expected: input_dim, got: f.len() });
            }
            index.entry(key(f)).or_insert_with(|| {
                distinct.push(f);
                distinct.len() - 1
            });
        }
        let n = distinct.len();
        let mut mean = vec![0.0; input_dim];
        for f in &distinct {
            for (m, v) in mean.iter_mut().zip(f.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, input_dim, |r, c| distinct[r][c] - mean[c]);
        let basis = principal_components(&centered, code_dim);
        let components: Vec<f64> = basis.iter().flat_map(|b| b.iter().copied()).collect();

        let mut codec = FeatureCodec {
            granularity: None,
            input_dim,
            code_dim,
            mean,
            components,
            code_min: vec![0.0; code_dim],
            code_max: vec![0.0; code_dim],
            codes: Vec::with_capacity(n * code_dim),
            originals: distinct.iter().flat_map(|f| f.iter().copied()).collect(),
            index,
        };
        let raw: Vec<Vec<f64>> = distinct.iter().map(|f| codec.project(f)).collect();
        for k in 0..code_dim {
            codec.code_min[k] = raw.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
            codec.code_max[k] = raw.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
        }
        let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(n);
        for r in &raw {
            let mut code = codec.normalize(r);
            while seen.contains(&key(&code)) {
                *code.last_mut().expect("code_dim >= 1") += COLLISION_STEP;
            }
            seen.insert(key(&code));
            codec.codes.extend(code);
        }
        Ok(codec)
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = Some(granularity);
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn len(&self) -> usize {
        self.originals.len() / self.input_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn code(&self, index: usize) -> &[f64] {
        &self.codes[index * self.code_dim..(index + 1) * self.code_dim]
    }

    pub fn original(&self, index: usize) -> &[f64] {
        &self.originals[index * self.input_dim..(index + 1) * self.input_dim]
    }

    pub fn component(&self, row: usize) -> &[f64] {
        &self.components[row * self.input_dim..(row + 1) * self.input_dim]
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Raw PCA coordinates of any D-vector.
    pub fn project(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.code_dim)
            .map(|r| self.component(r).iter().zip(feature).zip(&self.mean).map(|((c, f), m)| c * (f - m)).sum())
            .collect()
    }

    /// PCA reconstruction `mean + Cᵀ C (f - mean)`; lossy unless d = D.
    pub fn reconstruct(&self, feature: &[f64]) -> Vec<f64> {
        let coords = self.project(feature);
        let mut out = self.mean.clone();
        for (r, c) in coords.iter().enumerate() {
            for (o, comp) in out.iter_mut().zip(self.component(r)) {
                *o += c * comp;
            }
        }
        out
    }

    /// Maps raw PCA coordinates into [-1, 1] per dimension.
    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(k, v)| {
                let range = self.code_max[k] - self.code_min[k];
                if range > 1e-300 {
                    2.0 * (v - self.code_min[k]) / range - 1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Inverse of [`normalize`](Self::normalize).
    pub fn denormalize(&self, code: &[f64]) -> Vec<f64> {
        code.iter()
            .enumerate()
            .map(|(k, v)| self.code_min[k] + (v + 1.0) * 0.5 * (self.code_max[k] - self.code_min[k]))
            .collect()
    }

    /// Stored code of a registered feature.
    pub fn encode(&self, feature: &[f64]) -> Result<&[f64], CodecError> {
        self.index_of(feature).map(|i| self.code(i))
    }

    pub fn index_of(&self, feature: &[f64]) -> Result<usize, CodecError> {
        if feature.len() != self.input_dim {
            return Err(CodecError::DimensionMismatch { expected: self.input_dim, got: feature.len() });
        }
        self.index.get(&key(feature)).copied().ok_or(CodecError::UnknownFeature)
    }

    /// Nearest registered code by Euclidean distance; ties go to the lower
    /// table index.
    pub fn decode(&self, code: &[f64]) -> Result<Decoded<'_>, CodecError> {
        if self.is_empty() {
            return Err(CodecError::EmptyTable);
        }
        if code.len() != self.code_dim {
            return Err(CodecError::DimensionMismatch { expected: self.code_dim, got: code.len() });
        }
        if !code.iter().all(|v| v.is_finite()) {
            return Err(CodecError::NonFiniteCode);
        }
        let mut best = (0, f64::INFINITY);
        for i in 0..self.len() {
            let d2: f64 = self.code(i).iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        Ok(Decoded { index: best.0, feature: self.original(best.0), distance: best.1.sqrt() })
    }

    /// Smallest distance between two table codes, infinity for fewer than
    /// two entries.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let d2: f64 = self.code(i).iter().zip(self.code(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min(d2);
            }
        }
        best.sqrt()
    }

    pub fn metadata(&self) -> CodecMetadata {
        CodecMetadata {
            input_dim: self.input_dim,
            code_dim: self.code_dim,
            granularity: self.granularity,
            count: self.len(),
        }
    }

    /// Writes the binary codec and a `.json` sidecar next to it. Mean and
    /// components are stored as f32; table codes and originals keep full
    /// precision so the bijection survives a round trip.
    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [VERSION, self.input_dim as u32, self.code_dim as u32, self.len() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.granularity.map(|g| g.index()).unwrap_or(0) as u32).to_le_bytes());
        for v in self.mean.iter().chain(&self.components) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for v in self.code_min.iter().chain(&self.code_max).chain(&self.codes).chain(&self.originals) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        crate::io::write_atomic(path, &buf)?;
        let sidecar = serde_json::to_vec_pretty(&self.metadata())?;
        crate::io::write_atomic(&path.with_extension("json"), &sidecar)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CodecError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CodecError::Format(format!("unsupported version {version}")));
        }
        let input_dim = r.u32()? as usize;
        let code_dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let granularity = match r.u32()? {
            0 => None,
            g => Some(Granularity::from_index(g as usize).ok_or_else(|| CodecError::Format("bad granularity".into()))?),
        };
        let mean = r.f32s(input_dim)?;
        let components = r.f32s(code_dim * input_dim)?;
        let code_min = r.f64s(code_dim)?;
        let code_max = r.f64s(code_dim)?;
        let codes = r.f64s(count * code_dim)?;
        let originals = r.f64s(count * input_dim)?;
        if r.pos != bytes.len() {
            return Err(CodecError::Format("trailing bytes".into()));
        }
        let index = (0..count)
            .map(|i| (key(&originals[i * input_dim..(i + 1) * input_dim]), i))
            .collect();
        Ok(FeatureCodec { granularity, input_dim, code_dim, mean, components, code_min, code_max, codes, originals, index })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CodecError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| CodecError::Format("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, CodecError> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CodecError> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
