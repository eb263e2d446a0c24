//! Potential embeddings of measures against a trainable reference.
//!
//! The reference is stored unconstrained: atoms are `S·tanh(x̃)` and weights
//! `softmax(w̃)`. A measure's embedding is the centered `g` potential of its
//! entropic transport onto the realized reference, one coordinate per
//! reference atom.

use std::collections::HashMap;
use std::fmt;
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, LabeledDataset};
use crate::sinkhorn::{self, cost_between, DualPotentials, SinkhornConfig, UnrolledSolve};

/// Unconstrained parameters of the reference measure.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceParams {
    /// `q×d` raw coordinates, row-major.
    pub x_raw: Vec<f64>,
    pub w_raw: Vec<f64>,
    pub scale: f64,
    pub dim: usize,
}

impl ReferenceParams {
    pub fn new(x_raw: Vec<f64>, dim: usize, w_raw: Vec<f64>, scale: f64) -> Result<Self> {
        let rp = Self {
            x_raw,
            w_raw,
            scale,
            dim,
        };
        rp.validate()?;
        Ok(rp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.w_raw.is_empty() {
            return Err(Error::validation("reference needs q ≥ 1 atoms and d ≥ 1"));
        }
        if self.x_raw.len() != self.w_raw.len() * self.dim {
            return Err(Error::validation(format!(
                "reference has {} raw coordinates for {} atoms of dimension {}",
                self.x_raw.len(),
                self.w_raw.len(),
                self.dim
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::validation(format!(
                "reference scale must be positive, got {}",
                self.scale
            )));
        }
        if self.x_raw.iter().chain(&self.w_raw).any(|v| !v.is_finite()) {
            return Err(Error::validation("reference parameters must be finite"));
        }
        Ok(())
    }

    /// `q` atoms with raw coordinates drawn from `U[-1, 1]` and uniform
    /// weights.
    pub fn random(q: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_raw = (0..q * dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self::new(x_raw, dim, vec![0.0; q], scale)
    }

    pub fn q(&self) -> usize {
        self.w_raw.len()
    }

    /// Number of free parameters (`q·d + q`).
    pub fn num_params(&self) -> usize {
        self.x_raw.len() + self.w_raw.len()
    }

    /// Flat parameter vector `[x̃ (row-major), w̃]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.x_raw.clone();
        v.extend_from_slice(&self.w_raw);
        v
    }

    /// Same shape and scale with parameters taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let nx = self.x_raw.len();
        Self {
            x_raw: flat[..nx].to_vec(),
            w_raw: flat[nx..nx + self.q()].to_vec(),
            scale: self.scale,
            dim: self.dim,
        }
    }

    pub fn realized_weights(&self) -> Vec<f64> {
        let m = self.w_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.w_raw.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn realized_points(&self) -> Vec<f64> {
        self.x_raw.iter().map(|v| self.scale * v.tanh()).collect()
    }

    /// Chain rule from realized atoms/weights back to raw parameters.
    pub fn pullback(&self, realized: &RealizedGradient) -> RawGradient {
        let x_raw = self
            .x_raw
            .iter()
            .zip(&realized.points)
            .map(|(x, g)| g * self.scale * (1.0 - x.tanh().powi(2)))
            .collect();
        let w = self.realized_weights();
        let dot: f64 = w.iter().zip(&realized.weights).map(|(a, b)| a * b).sum();
        let w_raw = w
            .iter()
            .zip(&realized.weights)
            .map(|(wk, gk)| wk * (gk - dot))
            .collect();
        RawGradient { x_raw, w_raw }
    }
}

/// Realized reference: atoms `S·tanh(x̃)`, weights `softmax(w̃)`.
pub fn realize_reference(rp: &ReferenceParams) -> Result<DiscreteMeasure> {
    rp.validate()?;
    let weights = rp.realized_weights();
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Numeric(
            "reference weight underflowed to zero; raw weights are too spread".into(),
        ));
    }
    DiscreteMeasure::new(rp.realized_points(), rp.dim, weights)
}

/// Gradient with respect to realized reference atoms and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedGradient {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RealizedGradient {
    pub fn zeros(q: usize, dim: usize) -> Self {
        Self {
            points: vec![0.0; q * dim],
            weights: vec![0.0; q],
        }
    }

    pub fn add_assign(&mut self, other: &RealizedGradient) {
        for (a, b) in self.points.iter_mut().zip(&other.points) {
            *a += b;
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
    }
}

/// Gradient with respect to raw reference parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGradient {
    pub x_raw: Vec<f64>,
    pub w_raw: Vec<f64>,
}

impl RawGradient {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.x_raw.clone();
        v.extend_from_slice(&self.w_raw);
        v
    }
}

/// Content hash of a realized reference and ε. Embeddings are comparable
/// only when their versions match.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RefVersion(String);

impl RefVersion {
    pub fn of(reference: &DiscreteMeasure, epsilon: f64) -> Self {
        let mut h = Sha256::new();
        h.update((reference.dim() as u64).to_le_bytes());
        for v in reference.points().iter().chain(reference.weights()) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(epsilon.to_bits().to_le_bytes());
        let digest = h.finalize();
        RefVersion(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn from_string(s: impl Into<String>) -> Self {
        RefVersion(s.into())
    }
}

impl fmt::Display for RefVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub ref_version: RefVersion,
    pub converged: bool,
}

/// Stable identity of a measure's content, used as a cache key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MeasureKey(u64);

impl MeasureKey {
    pub fn of(m: &DiscreteMeasure) -> Self {
        let mut h = Sha256::new();
        h.update((m.dim() as u64).to_le_bytes());
        for v in m.points().iter().chain(m.weights()) {
            h.update(v.to_bits().to_le_bytes());
        }
        let d = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&d[..8]);
        MeasureKey(u64::from_le_bytes(b))
    }
}

/// Last known potentials per measure, used only to warm-start solves.
#[derive(Debug, Default)]
pub struct PotentialCache {
    entries: RwLock<HashMap<MeasureKey, DualPotentials>>,
}

impl PotentialCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Warm start for `key` if one with matching support sizes exists.
    pub fn get(&self, key: MeasureKey, n: usize, q: usize) -> Option<DualPotentials> {
        let entries = self.entries.read().unwrap_or_else(|e| e.into_inner());
        entries
            .get(&key)
            .filter(|p| p.f.len() == n && p.g.len() == q)
            .cloned()
    }

    pub fn insert(&self, key: MeasureKey, potentials: DualPotentials) {
        let mut entries = self.entries.write().unwrap_or_else(|e| e.into_inner());
        entries.insert(key, potentials);
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.write().unwrap_or_else(|e| e.into_inner()).clear();
    }
}

/// Embeds `p` against a realized reference, warm-starting from `cache`.
pub fn embed(
    p: &DiscreteMeasure,
    reference: &DiscreteMeasure,
    cfg: &SinkhornConfig,
    cache: Option<&PotentialCache>,
) -> Result<Embedding> {
    if p.dim() != reference.dim() {
        return Err(Error::DimensionMismatch(reference.dim(), p.dim()));
    }
    let key = MeasureKey::of(p);
    let warm = cache.and_then(|c| c.get(key, p.len(), reference.len()));
    let pot = sinkhorn::solve(p, reference, cfg, warm.as_ref())?;
    let emb = Embedding {
        values: pot.g.clone(),
        ref_version: RefVersion::of(reference, cfg.epsilon),
        converged: pot.converged,
    };
    if let Some(c) = cache {
        c.insert(key, pot);
    }
    Ok(emb)
}

/// `√(Σ_j w_j (a_j − b_j)²)` under the reference weights `w`.
pub fn embedding_distance(a: &Embedding, b: &Embedding, reference: &DiscreteMeasure) -> Result<f64> {
    if a.ref_version != b.ref_version {
        return Err(Error::RefVersionMismatch(
            a.ref_version.to_string(),
            b.ref_version.to_string(),
        ));
    }
    let q = reference.len();
    if a.values.len() != q || b.values.len() != q {
        return Err(Error::validation(format!(
            "embeddings of length {} and {} for a reference with {q} atoms",
            a.values.len(),
            b.values.len()
        )));
    }
    Ok(weighted_sq_distance(&a.values, &b.values, reference.weights()).sqrt())
}

pub(crate) fn weighted_sq_distance(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(w)
        .map(|((x, y), wk)| wk * (x - y) * (x - y))
        .sum()
}

/// Embeds every measure in parallel; output order matches input order.
pub fn embed_all(
    measures: &[DiscreteMeasure],
    reference: &DiscreteMeasure,
    cfg: &SinkhornConfig,
    cache: Option<&PotentialCache>,
) -> Result<Vec<Embedding>> {
    let results: Vec<Result<Embedding>> = measures
        .par_iter()
        .map(|m| embed(m, reference, cfg, cache))
        .collect();
    collect_indexed(results)
}

pub(crate) fn collect_indexed<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => out.push(v),
            Err(e) => failures.push((i, e)),
        }
    }
    match failures.len() {
        0 => Ok(out),
        1 => {
            let (i, e) = failures.pop().expect("one failure");
            if e.is_numeric() {
                Err(Error::Numeric(format!("measure {i}: {e}")))
            } else {
                Err(Error::Validation(format!("measure {i}: {e}")))
            }
        }
        _ => {
            let numeric = failures.iter().all(|(_, e)| e.is_numeric());
            let msg = failures
                .iter()
                .map(|(i, e)| format!("measure {i}: {e}"))
                .collect::<Vec<_>>()
                .join("; ");
            Err(if numeric {
                Error::Numeric(msg)
            } else {
                Error::Validation(msg)
            })
        }
    }
}

/// Embeds a dataset against the reference realized from `rp`.
pub fn embed_dataset(
    ds: &LabeledDataset,
    rp: &ReferenceParams,
    cfg: &SinkhornConfig,
    cache: Option<&PotentialCache>,
) -> Result<Vec<Embedding>> {
    if ds.dim() != rp.dim {
        return Err(Error::DimensionMismatch(rp.dim, ds.dim()));
    }
    let reference = realize_reference(rp)?;
    embed_all(ds.measures(), &reference, cfg, cache)
}

/// A solve against the realized reference that can be differentiated with
/// respect to the reference atoms and weights.
#[derive(Debug, Clone)]
pub struct DifferentiableEmbedding {
    solve: UnrolledSolve,
    source_points: Vec<f64>,
    ref_points: Vec<f64>,
    dim: usize,
    pub embedding: Embedding,
}

impl DifferentiableEmbedding {
    pub fn new(
        p: &DiscreteMeasure,
        reference: &DiscreteMeasure,
        cfg: &SinkhornConfig,
        warm: Option<&DualPotentials>,
    ) -> Result<Self> {
        let cost = cost_between(p, reference)?;
        let solve = sinkhorn::solve_recorded(p.weights(), reference.weights(), &cost, cfg, warm)?;
        let embedding = Embedding {
            values: solve.potentials.g.clone(),
            ref_version: RefVersion::of(reference, cfg.epsilon),
            converged: solve.potentials.converged,
        };
        Ok(Self {
            solve,
            source_points: p.points().to_vec(),
            ref_points: reference.points().to_vec(),
            dim: p.dim(),
            embedding,
        })
    }

    pub fn potentials(&self) -> &DualPotentials {
        &self.solve.potentials
    }

    /// True when the forward solve ran longer than the unroll cap.
    pub fn truncated(&self) -> bool {
        self.solve.tape().truncated()
    }

    /// Pulls a cotangent on the embedding back to realized atoms and weights.
    pub fn pullback(&self, g_bar: &[f64]) -> RealizedGradient {
        let grad = self.solve.vjp(g_bar);
        let d = self.dim;
        let q = self.ref_points.len() / d;
        let n = self.source_points.len() / d;
        let mut points = vec![0.0; q * d];
        for i in 0..n {
            let x = &self.source_points[i * d..(i + 1) * d];
            for j in 0..q {
                let c = grad.cost[i * q + j];
                if c == 0.0 {
                    continue;
                }
                // ∂C_ij/∂y_j = y_j − x_i
                for k in 0..d {
                    points[j * d + k] += c * (self.ref_points[j * d + k] - x[k]);
                }
            }
        }
        RealizedGradient {
            points,
            weights: grad.weights,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    Unrolled,
    FiniteDiff,
}

/// Row-major `q × (q·d + q)` Jacobian of the centered embedding with respect
/// to `[x̃, w̃]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Jacobian {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// Jacobian of the embedding of `p` with respect to the raw reference
/// parameters. Both modes start Sinkhorn from zero potentials.
pub fn embedding_jacobian(
    p: &DiscreteMeasure,
    rp: &ReferenceParams,
    cfg: &SinkhornConfig,
    mode: JacobianMode,
) -> Result<Jacobian> {
    if p.dim() != rp.dim {
        return Err(Error::DimensionMismatch(rp.dim, p.dim()));
    }
    let q = rp.q();
    let cols = rp.num_params();
    let mut values = vec![0.0; q * cols];
    match mode {
        JacobianMode::Unrolled => {
            let reference = realize_reference(rp)?;
            let de = DifferentiableEmbedding::new(p, &reference, cfg, None)?;
            if de.truncated() {
                return Err(Error::UnrollCapExceeded {
                    iterations: de.potentials().iterations,
                    cap: cfg.unroll_cap,
                });
            }
            let mut e = vec![0.0; q];
            for r in 0..q {
                e.iter_mut().for_each(|v| *v = 0.0);
                e[r] = 1.0;
                let raw = rp.pullback(&de.pullback(&e)).to_flat();
                values[r * cols..(r + 1) * cols].copy_from_slice(&raw);
            }
        }
        JacobianMode::FiniteDiff => {
            let h = 1e-5;
            let base = rp.to_flat();
            for c in 0..cols {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[c] += h;
                minus[c] -= h;
                let ep = embed(p, &realize_reference(&rp.with_flat(&plus))?, cfg, None)?;
                let em = embed(p, &realize_reference(&rp.with_flat(&minus))?, cfg, None)?;
                for r in 0..q {
                    values[r * cols + c] = (ep.values[r] - em.values[r]) / (2.0 * h);
                }
            }
        }
    }
    Ok(Jacobian {
        values,
        rows: q,
        cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tight(eps: f64) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: eps,
            max_iter: 100_000,
            tol: 1e-13,
            unroll_cap: 100_000,
        }
    }

    #[test]
    fn realize_examples() {
        let rp = ReferenceParams::new(vec![0.0; 6], 2, vec![0.3; 3], 0.7).unwrap();
        let r = realize_reference(&rp).unwrap();
        assert!(r.points().iter().all(|&x| x == 0.0));
        for w in r.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let rp = ReferenceParams::new(vec![10.0], 1, vec![0.0], 0.5).unwrap();
        let r = realize_reference(&rp).unwrap();
        assert!((r.point(0)[0] - 0.5).abs() < 1e-8);
        assert!(r.point(0)[0] <= 0.5);
        assert!(ReferenceParams::new(vec![0.0], 1, vec![0.0], 0.0).is_err());
        assert!(ReferenceParams::new(vec![0.0, 1.0], 1, vec![0.0], 1.0).is_err());
    }

    #[test]
    fn embedding_of_reference_is_zero() {
        // Self-transport potentials are constant only up to terms of order
        // ε·exp(−min C/ε), so use uniform weights and well-separated atoms.
        let r = DiscreteMeasure::uniform(vec![0.0, 0.5, 1.0], 1).unwrap();
        let e = embed(&r, &r, &tight(0.004), None).unwrap();
        for v in &e.values {
            assert!(v.abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn embeddings_are_deterministic_and_centered() {
        let r = DiscreteMeasure::new(vec![0.0, 0.5, 1.0], 1, vec![0.2, 0.5, 0.3]).unwrap();
        let p = DiscreteMeasure::new(vec![0.1, 0.3, 0.35, 0.9], 1, vec![1.0; 4]).unwrap();
        let cfg = SinkhornConfig::with_epsilon(0.05);
        let a = embed(&p, &r, &cfg, None).unwrap();
        let b = embed(&p.clone(), &r, &cfg, None).unwrap();
        assert_eq!(a, b);
        let mean: f64 = a.values.iter().zip(r.weights()).map(|(x, w)| x * w).sum();
        assert!(mean.abs() <= 1e-10);
    }

    #[test]
    fn shifted_cloud_moves_embedding() {
        let r = DiscreteMeasure::new(vec![0.0, 0.5, 1.0], 1, vec![1.0; 3]).unwrap();
        let p = DiscreteMeasure::uniform(vec![0.2, 0.3, 0.45, 0.6], 1).unwrap();
        let cfg = SinkhornConfig::with_epsilon(0.05);
        let a = embed(&p, &r, &cfg, None).unwrap();
        let b = embed(&p.translated(&[1.0]).unwrap(), &r, &cfg, None).unwrap();
        assert!(embedding_distance(&a, &b, &r).unwrap() > 1e-3);
    }

    #[test]
    fn distance_examples() {
        let r = DiscreteMeasure::new(vec![0.0, 1.0], 1, vec![0.5, 0.5]).unwrap();
        let v = RefVersion::of(&r, 0.1);
        let a = Embedding {
            values: vec![1.0, -1.0],
            ref_version: v.clone(),
            converged: true,
        };
        let b = Embedding {
            values: vec![0.0, 0.0],
            ref_version: v,
            converged: true,
        };
        assert_eq!(embedding_distance(&a, &a, &r).unwrap(), 0.0);
        assert!((embedding_distance(&a, &b, &r).unwrap() - 1.0).abs() < 1e-15);
        let c = Embedding {
            ref_version: RefVersion::of(&r, 0.2),
            ..b
        };
        assert!(matches!(
            embedding_distance(&a, &c, &r),
            Err(Error::RefVersionMismatch(..))
        ));
    }

    #[test]
    fn cache_only_changes_iteration_counts() {
        let r = DiscreteMeasure::new(vec![0.0, 0.5, 1.0], 1, vec![0.2, 0.5, 0.3]).unwrap();
        let r2 = DiscreteMeasure::new(vec![0.01, 0.5, 1.02], 1, vec![0.21, 0.5, 0.29]).unwrap();
        let p = DiscreteMeasure::new(vec![0.1, 0.3, 0.35, 0.9], 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cfg = SinkhornConfig::with_epsilon(0.02);
        let cache = PotentialCache::new();
        embed(&p, &r, &cfg, Some(&cache)).unwrap();
        assert_eq!(cache.len(), 1);
        let cold = sinkhorn::solve(&p, &r2, &cfg, None).unwrap();
        let warm_start = cache.get(MeasureKey::of(&p), p.len(), r2.len()).unwrap();
        let warm = sinkhorn::solve(&p, &r2, &cfg, Some(&warm_start)).unwrap();
        assert!(warm.iterations <= cold.iterations);
        let with = embed(&p, &r2, &cfg, Some(&cache)).unwrap();
        let without = embed(&p, &r2, &cfg, None).unwrap();
        for (a, b) in with.values.iter().zip(&without.values) {
            assert!((a - b).abs() <= 10.0 * cfg.tol);
        }
    }

    #[test]
    fn dataset_embedding_order_and_edge_cases() {
        let rp = ReferenceParams::new(vec![-0.9, 0.0, 0.9], 1, vec![0.0; 3], 1.0).unwrap();
        let reference = realize_reference(&rp).unwrap();
        let cfg = SinkhornConfig::with_epsilon(0.05);
        assert!(embed_all(&[], &reference, &cfg, None).unwrap().is_empty());

        let ds = LabeledDataset::new(
            vec![reference.clone()],
            crate::measures::Responses::Targets(vec![1.0]),
            1,
        )
        .unwrap();
        let e = embed_dataset(&ds, &rp, &tight(0.005), None).unwrap();
        assert!(e[0].values.iter().all(|v| v.abs() < 1e-10));

        let ms: Vec<DiscreteMeasure> = (0..5)
            .map(|k| DiscreteMeasure::uniform(vec![k as f64 * 0.2, 0.1 + k as f64 * 0.1], 1).unwrap())
            .collect();
        let fwd = embed_all(&ms, &reference, &cfg, None).unwrap();
        let rev: Vec<DiscreteMeasure> = ms.iter().rev().cloned().collect();
        let bwd = embed_all(&rev, &reference, &cfg, None).unwrap();
        for (a, b) in fwd.iter().zip(bwd.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_atom_reference_has_zero_jacobian() {
        let rp = ReferenceParams::new(vec![0.3, -0.2], 2, vec![0.0], 1.0).unwrap();
        let p = DiscreteMeasure::uniform(vec![0.0, 0.0, 1.0, 0.5], 2).unwrap();
        let j = embedding_jacobian(&p, &rp, &tight(0.1), JacobianMode::Unrolled).unwrap();
        assert!(j.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn unrolled_matches_finite_differences() {
        let rp = ReferenceParams::new(vec![-0.4, 0.1, 0.3, 0.5], 2, vec![0.2, -0.3], 0.8).unwrap();
        let p = DiscreteMeasure::new(vec![0.0, 0.1, 0.4, -0.2, -0.3, 0.6], 2, vec![1.0, 2.0, 1.5]).unwrap();
        let cfg = tight(0.1);
        let ju = embedding_jacobian(&p, &rp, &cfg, JacobianMode::Unrolled).unwrap();
        let jf = embedding_jacobian(&p, &rp, &cfg, JacobianMode::FiniteDiff).unwrap();
        let scale = jf.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in ju.values.iter().zip(&jf.values) {
            assert!((a - b).abs() <= 1e-4 * scale.max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn unroll_cap_is_enforced() {
        let rp = ReferenceParams::new(vec![-0.4, 0.5], 1, vec![0.0, 0.0], 1.0).unwrap();
        let p = DiscreteMeasure::uniform(vec![0.0, 0.1, 0.7], 1).unwrap();
        let cfg = SinkhornConfig {
            unroll_cap: 2,
            ..tight(0.01)
        };
        assert!(matches!(
            embedding_jacobian(&p, &rp, &cfg, JacobianMode::Unrolled),
            Err(Error::UnrollCapExceeded { .. })
        ));
    }

    #[test]
    fn reflection_symmetry_of_jacobian() {
        // Mirroring P and the reference through the origin maps the problem
        // onto itself with atoms reversed.
        let rp = ReferenceParams::new(vec![-0.6, 0.6], 1, vec![0.0, 0.0], 1.0).unwrap();
        let p = DiscreteMeasure::uniform(vec![-0.5, 0.1, 0.5, -0.1], 1).unwrap();
        let cfg = tight(0.1);
        let j = embedding_jacobian(&p, &rp, &cfg, JacobianMode::Unrolled).unwrap();
        // columns: x̃0, x̃1, w̃0, w̃1
        for r in 0..2 {
            let mirror = 1 - r;
            assert!((j.get(r, 0) + j.get(mirror, 1)).abs() < 1e-10);
            assert!((j.get(r, 2) - j.get(mirror, 3)).abs() < 1e-10);
        }
    }

    #[test]
    fn pullback_applies_reparameterization() {
        let rp = ReferenceParams::new(vec![0.3, -1.2], 1, vec![0.5, -0.5], 2.0).unwrap();
        let g = RealizedGradient {
            points: vec![1.0, -2.0],
            weights: vec![0.7, 0.1],
        };
        let raw = rp.pullback(&g);
        for k in 0..2 {
            let t = rp.x_raw[k].tanh();
            assert!((raw.x_raw[k] - g.points[k] * 2.0 * (1.0 - t * t)).abs() < 1e-15);
        }
        let w = rp.realized_weights();
        let expected0 = w[0] * (1.0 - w[0]) * 0.7 - w[0] * w[1] * 0.1;
        assert!((raw.w_raw[0] - expected0).abs() < 1e-15);
    }
}
