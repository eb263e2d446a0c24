//! Discrete probability measures and labeled collections of them.
//!
//! A [`DiscreteMeasure`] is a weighted point cloud in ℝ^d. Construction
//! drops zero-weight atoms and renormalizes the remaining weights, so every
//! value of this type is a valid probability vector with strictly positive
//! entries.

mod images;
mod io;
mod synthetic;

pub use images::{glcm, glcm_averaged, image_to_cloud, read_gray_grid};
pub use io::{load_manifest, load_measure, write_manifest, write_measure, Manifest, ManifestItem};
pub use synthetic::{
    sample_toy_dataset, sample_toy_dataset_with_params, sample_two_class_dataset, toy_field, ToyParams,
};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighted point cloud representing a probability measure.
///
/// Points are stored row-major: atom `i` occupies `points[i*dim..(i+1)*dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
}

impl DiscreteMeasure {
    /// Builds a measure from row-major points and raw (unnormalized) weights.
    pub fn new(points: Vec<f64>, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("measure dimension must be at least 1"));
        }
        if points.len() != weights.len() * dim {
            return Err(Error::validation(format!(
                "{} coordinates cannot form {} points of dimension {}",
                points.len(),
                weights.len(),
                dim
            )));
        }
        if let Some(i) = points.iter().position(|c| !c.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite coordinate in atom {}",
                i / dim
            )));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::validation(format!("non-finite weight in atom {i}")));
            }
            if w < 0.0 {
                return Err(Error::validation(format!("negative weight {w} in atom {i}")));
            }
        }

        let keep: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        if keep.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        let (points, mut weights) = if keep.len() == weights.len() {
            (points, weights)
        } else {
            let mut kept_points = Vec::with_capacity(keep.len() * dim);
            for &i in &keep {
                kept_points.extend_from_slice(&points[i * dim..(i + 1) * dim]);
            }
            (kept_points, keep.iter().map(|&i| weights[i]).collect())
        };

        let total: f64 = weights.iter().sum();
        // Already-normalized inputs are left bit-for-bit unchanged.
        if (total - 1.0).abs() > 1e-14 {
            for w in &mut weights {
                *w /= total;
            }
        }
        Ok(Self { points, weights, dim })
    }

    /// Builds a measure from a list of point rows.
    pub fn from_rows(rows: &[Vec<f64>], weights: Vec<f64>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch(dim, bad.len()));
        }
        Self::new(rows.concat(), dim, weights)
    }

    /// Uniform weights on the given row-major points.
    pub fn uniform(points: Vec<f64>, dim: usize) -> Result<Self> {
        let n = points.len().checked_div(dim).unwrap_or(0);
        Self::new(points, dim, vec![1.0 / n.max(1) as f64; n])
    }

    /// Dirac mass at a single point.
    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::new(point.to_vec(), point.len(), vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    /// Always false: measures hold at least one atom.
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted mean of the support.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (i, &w) in self.weights.iter().enumerate() {
            for (mk, &x) in m.iter_mut().zip(self.point(i)) {
                *mk += w * x;
            }
        }
        m
    }

    /// Applies `f` to every support point, keeping weights.
    pub fn map_points(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut points = Vec::with_capacity(self.points.len());
        let mut out_dim = None;
        for i in 0..self.len() {
            let p = f(self.point(i));
            match out_dim {
                None => out_dim = Some(p.len()),
                Some(d) if d != p.len() => return Err(Error::DimensionMismatch(d, p.len())),
                _ => {}
            }
            points.extend(p);
        }
        Self::new(points, out_dim.unwrap_or(self.dim), self.weights.clone())
    }

    /// Adds `shift` to every support point.
    pub fn translated(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::DimensionMismatch(self.dim, shift.len()));
        }
        self.map_points(|p| p.iter().zip(shift).map(|(a, b)| a + b).collect())
    }

    /// Multiplies every support point by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        self.map_points(|p| p.iter().map(|a| a * factor).collect())
    }
}

/// Responses attached to a dataset of measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Responses {
    Targets(Vec<f64>),
    Labels(Vec<u8>),
}

impl Responses {
    pub fn len(&self) -> usize {
        match self {
            Responses::Targets(t) => t.len(),
            Responses::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Responses::Labels(_))
    }

    /// Keeps only the entries at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            Responses::Targets(t) => Responses::Targets(indices.iter().map(|&i| t[i]).collect()),
            Responses::Labels(l) => Responses::Labels(indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Measures paired with regression targets or binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    measures: Vec<DiscreteMeasure>,
    responses: Responses,
    dim: usize,
}

impl LabeledDataset {
    pub fn new(measures: Vec<DiscreteMeasure>, responses: Responses, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("dataset dimension must be at least 1"));
        }
        if measures.len() != responses.len() {
            return Err(Error::validation(format!(
                "{} measures but {} responses",
                measures.len(),
                responses.len()
            )));
        }
        if let Some(m) = measures.iter().find(|m| m.dim() != dim) {
            return Err(Error::DimensionMismatch(dim, m.dim()));
        }
        match &responses {
            Responses::Targets(t) => {
                if let Some(i) = t.iter().position(|v| !v.is_finite()) {
                    return Err(Error::validation(format!("target {i} is not finite")));
                }
            }
            Responses::Labels(l) => {
                if let Some(i) = l.iter().position(|&v| v > 1) {
                    return Err(Error::validation(format!(
                        "label {i} is {} but labels must be 0 or 1",
                        l[i]
                    )));
                }
            }
        }
        Ok(Self {
            measures,
            responses,
            dim,
        })
    }

    pub fn measures(&self) -> &[DiscreteMeasure] {
        &self.measures
    }

    pub fn responses(&self) -> &Responses {
        &self.responses
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }

    /// Sub-dataset at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            measures: indices.iter().map(|&i| self.measures[i].clone()).collect(),
            responses: self.responses.select(indices),
            dim: self.dim,
        }
    }

    /// Splits into the first `n` items and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }
}

/// Per-coordinate affine map `x ↦ (x − shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineMap {
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(x, (s, c))| (x - s) / c)
            .collect()
    }

    pub fn invert(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(x, (s, c))| x * c + s)
            .collect()
    }

    pub fn apply_measure(&self, m: &DiscreteMeasure) -> Result<DiscreteMeasure> {
        m.map_points(|p| self.apply(p))
    }
}

/// Standardizes the pooled point set of a dataset (clouds equally weighted)
/// to zero mean and unit variance per coordinate.
pub fn normalize_dataset(ds: &LabeledDataset) -> Result<(LabeledDataset, AffineMap)> {
    if ds.is_empty() {
        return Err(Error::validation("cannot normalize an empty dataset"));
    }
    let d = ds.dim();
    let n = ds.len() as f64;
    let mut mean = vec![0.0; d];
    for m in ds.measures() {
        for (acc, v) in mean.iter_mut().zip(m.mean()) {
            *acc += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for m in ds.measures() {
        for (i, &w) in m.weights().iter().enumerate() {
            for (k, &x) in m.point(i).iter().enumerate() {
                var[k] += w * (x - mean[k]).powi(2) / n;
            }
        }
    }
    if let Some(k) = var.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::validation(format!(
            "coordinate x{} has zero pooled variance",
            k + 1
        )));
    }
    let map = AffineMap {
        shift: mean,
        scale: var.iter().map(|v| v.sqrt()).collect(),
    };
    let measures = ds
        .measures()
        .iter()
        .map(|m| map.apply_measure(m))
        .collect::<Result<Vec<_>>>()?;
    Ok((LabeledDataset::new(measures, ds.responses().clone(), d)?, map))
}

/// Draws `k` atoms i.i.d. from `m` and returns their empirical measure.
///
/// Repeated draws of the same atom are merged; atoms keep the original order.
pub fn subsample(m: &DiscreteMeasure, k: usize, seed: u64) -> Result<DiscreteMeasure> {
    if k == 0 {
        return Err(Error::validation("subsample size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist =
        WeightedIndex::new(m.weights()).map_err(|e| Error::validation(format!("invalid weights: {e}")))?;
    let mut counts = vec![0usize; m.len()];
    for _ in 0..k {
        counts[dist.sample(&mut rng)] += 1;
    }
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 {
            points.extend_from_slice(m.point(i));
            weights.push(c as f64 / k as f64);
        }
    }
    DiscreteMeasure::new(points, m.dim(), weights)
}
