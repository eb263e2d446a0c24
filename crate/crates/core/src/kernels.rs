//! Stationary kernels on embedding distances, Gram matrices and the MMD
//! baseline.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed, weighted_sq_distance, Embedding, RefVersion, ReferenceParams};
use crate::error::{Error, Result};
use crate::measures::{subsample, DiscreteMeasure};
use crate::sinkhorn::SinkhornConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `l·exp(−d²/(2σ²))`
    #[default]
    Sqexp,
    /// `l·exp(−d/(2σ²))`
    ExpNorm,
    Matern32,
    Matern52,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Sqexp,
        KernelFamily::ExpNorm,
        KernelFamily::Matern32,
        KernelFamily::Matern52,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Sqexp => "sqexp",
            KernelFamily::ExpNorm => "exp_norm",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Matern52 => "matern52",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelFamily::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::validation(format!(
                    "unknown kernel family {s:?} (expected sqexp, exp_norm, matern32 or matern52)"
                ))
            })
    }
}

/// Kernel family with prefactor `variance` (l) and `lengthscale` (σ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    pub lengthscale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, variance: f64, lengthscale: f64) -> Result<Self> {
        let spec = Self {
            family,
            variance,
            lengthscale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::validation(format!(
                "kernel variance must be positive, got {}",
                self.variance
            )));
        }
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(Error::validation(format!(
                "kernel lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        Ok(())
    }
}

/// Kernel value and its partial derivatives at squared distance `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelTerms {
    pub value: f64,
    /// ∂K/∂s. For `exp_norm` this is unbounded at `s = 0` and reported as 0.
    pub d_sq_dist: f64,
    /// ∂K/∂log σ. The derivative in log l equals `value`.
    pub d_log_lengthscale: f64,
}

/// Evaluates the kernel at squared distance `s ≥ 0`.
pub fn kernel_terms(spec: &KernelSpec, s: f64) -> KernelTerms {
    let l = spec.variance;
    let sig = spec.lengthscale;
    let s = s.max(0.0);
    let d = s.sqrt();
    match spec.family {
        KernelFamily::Sqexp => {
            let value = l * (-s / (2.0 * sig * sig)).exp();
            KernelTerms {
                value,
                d_sq_dist: -value / (2.0 * sig * sig),
                d_log_lengthscale: value * s / (sig * sig),
            }
        }
        KernelFamily::ExpNorm => {
            let value = l * (-d / (2.0 * sig * sig)).exp();
            KernelTerms {
                value,
                d_sq_dist: if d > 0.0 {
                    -value / (4.0 * sig * sig * d)
                } else {
                    0.0
                },
                d_log_lengthscale: value * d / (sig * sig),
            }
        }
        KernelFamily::Matern32 => {
            let r = 3f64.sqrt() * d / sig;
            let e = (-r).exp();
            KernelTerms {
                value: l * (1.0 + r) * e,
                d_sq_dist: -l * 3.0 / (2.0 * sig * sig) * e,
                d_log_lengthscale: l * r * r * e,
            }
        }
        KernelFamily::Matern52 => {
            let r = 5f64.sqrt() * d / sig;
            let e = (-r).exp();
            KernelTerms {
                value: l * (1.0 + r + r * r / 3.0) * e,
                d_sq_dist: -l * 5.0 / (6.0 * sig * sig) * (1.0 + r) * e,
                d_log_lengthscale: l * r * r / 3.0 * (1.0 + r) * e,
            }
        }
    }
}

/// `F(distance)` for the given family.
pub fn kernel_value(spec: &KernelSpec, distance: f64) -> Result<f64> {
    if distance < 0.0 || distance.is_nan() {
        return Err(Error::validation(format!(
            "kernel distance must be nonnegative, got {distance}"
        )));
    }
    Ok(kernel_terms(spec, distance * distance).value)
}

/// Dense symmetric Gram matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub values: Vec<f64>,
    pub n: usize,
    pub spec: KernelSpec,
    pub ref_version: RefVersion,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.values)
    }

    pub fn check_psd(&self, tol: f64) -> Result<PsdReport> {
        check_psd(&self.values, self.n, tol)
    }
}

pub(crate) fn shared_version(embeddings: &[&Embedding]) -> Result<Option<RefVersion>> {
    let Some(first) = embeddings.first() else {
        return Ok(None);
    };
    for e in embeddings {
        if e.ref_version != first.ref_version {
            return Err(Error::RefVersionMismatch(
                first.ref_version.to_string(),
                e.ref_version.to_string(),
            ));
        }
    }
    Ok(Some(first.ref_version.clone()))
}

fn check_lengths(embeddings: &[&Embedding], q: usize) -> Result<()> {
    match embeddings.iter().find(|e| e.values.len() != q) {
        Some(e) => Err(Error::validation(format!(
            "embedding of length {} for a reference with {q} atoms",
            e.values.len()
        ))),
        None => Ok(()),
    }
}

/// Pairwise squared embedding distances, row-major `n×n`; only the upper
/// triangle is computed and then mirrored.
pub fn sq_distance_matrix(embeddings: &[Embedding], reference: &DiscreteMeasure) -> Result<Vec<f64>> {
    let refs: Vec<&Embedding> = embeddings.iter().collect();
    shared_version(&refs)?;
    check_lengths(&refs, reference.len())?;
    let n = embeddings.len();
    let w = reference.weights();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| weighted_sq_distance(&embeddings[i].values, &embeddings[j].values, w))
                .collect()
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let j = i + off;
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Ok(out)
}

/// `K_ij = F(‖e_i − e_j‖)`, symmetric by construction.
pub fn gram(embeddings: &[Embedding], reference: &DiscreteMeasure, spec: &KernelSpec) -> Result<GramMatrix> {
    spec.validate()?;
    let s = sq_distance_matrix(embeddings, reference)?;
    let n = embeddings.len();
    let ref_version = embeddings
        .first()
        .map(|e| e.ref_version.clone())
        .unwrap_or_else(|| RefVersion::of(reference, f64::NAN));
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = spec.variance;
        for j in i + 1..n {
            let k = kernel_terms(spec, s[i * n + j]).value;
            values[i * n + j] = k;
            values[j * n + i] = k;
        }
    }
    Ok(GramMatrix {
        values,
        n,
        spec: *spec,
        ref_version,
    })
}

/// Cross-kernel `K(test_i, train_j)`, row-major `test.len() × train.len()`.
pub fn cross_gram(
    test: &[Embedding],
    train: &[Embedding],
    reference: &DiscreteMeasure,
    spec: &KernelSpec,
) -> Result<Vec<f64>> {
    let all: Vec<&Embedding> = train.iter().chain(test).collect();
    shared_version(&all)?;
    check_lengths(&all, reference.len())?;
    let w = reference.weights();
    Ok(test
        .par_iter()
        .flat_map_iter(|t| {
            train
                .iter()
                .map(move |x| kernel_terms(spec, weighted_sq_distance(&t.values, &x.values, w)).value)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsdReport {
    pub min_eig: f64,
    pub trace: f64,
    pub ok: bool,
}

/// Smallest eigenvalue of a symmetric `n×n` matrix; `ok` iff it is at least
/// `−tol·trace`.
pub fn check_psd(values: &[f64], n: usize, tol: f64) -> Result<PsdReport> {
    if values.len() != n * n {
        return Err(Error::validation(format!(
            "{} entries do not form a {n}×{n} matrix",
            values.len()
        )));
    }
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (values[i * n + j], values[j * n + i]);
            if (a - b).abs() > 1e-10 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::validation(format!(
                    "matrix is not symmetric at ({i},{j}): {a} vs {b}"
                )));
            }
        }
    }
    let trace: f64 = (0..n).map(|i| values[i * n + i]).sum();
    if n == 0 {
        return Ok(PsdReport {
            min_eig: f64::INFINITY,
            trace,
            ok: true,
        });
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, values));
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(PsdReport {
        min_eig,
        trace,
        ok: min_eig >= -tol * trace,
    })
}

fn point_kernel(x: &[f64], y: &[f64], inv_two_sig2: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 * inv_two_sig2).exp()
}

fn weighted_kernel_sum(p: &DiscreteMeasure, q: &DiscreteMeasure, inv_two_sig2: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let x = p.point(i);
        let mut row = 0.0;
        for j in 0..q.len() {
            row += q.weights()[j] * point_kernel(x, q.point(j), inv_two_sig2);
        }
        total += p.weights()[i] * row;
    }
    total
}

fn check_sigma(rbf_sigma: f64) -> Result<f64> {
    if !(rbf_sigma > 0.0 && rbf_sigma.is_finite()) {
        return Err(Error::validation(format!(
            "rbf_sigma must be positive, got {rbf_sigma}"
        )));
    }
    Ok(1.0 / (2.0 * rbf_sigma * rbf_sigma))
}

/// Biased (V-statistic) squared MMD with a unit-variance Gaussian point
/// kernel, clamped at 0.
pub fn mmd_sq(p: &DiscreteMeasure, q: &DiscreteMeasure, rbf_sigma: f64) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch(p.dim(), q.dim()));
    }
    let c = check_sigma(rbf_sigma)?;
    let v = weighted_kernel_sum(p, p, c) + weighted_kernel_sum(q, q, c) - 2.0 * weighted_kernel_sum(p, q, c);
    Ok(v.max(0.0))
}

/// `hat_sigma·exp(−MMD²(P, Q))`.
pub fn mmd_kernel(p: &DiscreteMeasure, q: &DiscreteMeasure, rbf_sigma: f64, hat_sigma: f64) -> Result<f64> {
    if !(hat_sigma > 0.0) {
        return Err(Error::validation(format!(
            "hat_sigma must be positive, got {hat_sigma}"
        )));
    }
    Ok(hat_sigma * (-mmd_sq(p, q, rbf_sigma)?).exp())
}

/// MMD kernel Gram matrix; each cloud's self term is computed once.
pub fn mmd_gram(measures: &[DiscreteMeasure], rbf_sigma: f64, hat_sigma: f64) -> Result<Vec<f64>> {
    let n = measures.len();
    if let Some(m) = measures.iter().find(|m| m.dim() != measures[0].dim()) {
        return Err(Error::DimensionMismatch(measures[0].dim(), m.dim()));
    }
    let c = check_sigma(rbf_sigma)?;
    let selfs: Vec<f64> = measures
        .par_iter()
        .map(|m| weighted_kernel_sum(m, m, c))
        .collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| weighted_kernel_sum(&measures[i], &measures[j], c))
                .collect()
        })
        .collect();
    Ok(assemble_mmd(n, &selfs, &rows, hat_sigma))
}

/// MMD Gram for clouds sharing one set of coordinates with different
/// weights. The point-kernel matrix is computed once; every pair still runs
/// the full double sum.
pub fn mmd_gram_shared(
    points: &[f64],
    dim: usize,
    weights: &[Vec<f64>],
    rbf_sigma: f64,
    hat_sigma: f64,
) -> Result<Vec<f64>> {
    let m = points.len() / dim.max(1);
    if dim == 0 || points.len() != m * dim || weights.iter().any(|w| w.len() != m) {
        return Err(Error::validation("weights must match the shared coordinates"));
    }
    let c = check_sigma(rbf_sigma)?;
    let kmat: Vec<f64> = (0..m * m)
        .map(|t| {
            let (i, j) = (t / m, t % m);
            point_kernel(
                &points[i * dim..(i + 1) * dim],
                &points[j * dim..(j + 1) * dim],
                c,
            )
        })
        .collect();
    let pair = |a: &[f64], b: &[f64]| -> f64 {
        let mut total = 0.0;
        for i in 0..m {
            let row = &kmat[i * m..(i + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                acc += b[j] * row[j];
            }
            total += a[i] * acc;
        }
        total
    };
    let n = weights.len();
    let selfs: Vec<f64> = weights.par_iter().map(|w| pair(w, w)).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| pair(&weights[i], &weights[j])).collect())
        .collect();
    Ok(assemble_mmd(n, &selfs, &rows, hat_sigma))
}

fn assemble_mmd(n: usize, selfs: &[f64], rows: &[Vec<f64>], hat_sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = hat_sigma;
        for (off, cross) in rows[i].iter().enumerate() {
            let j = i + 1 + off;
            let mmd = (selfs[i] + selfs[j] - 2.0 * cross).max(0.0);
            let k = hat_sigma * (-mmd).exp();
            out[i * n + j] = k;
            out[j * n + i] = k;
        }
    }
    out
}

/// One row of a consistency study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsistencyPoint {
    pub k: usize,
    pub mean_abs_error: f64,
}

/// Mean `|K(P_k, Q_k) − K(P, Q)|` over `seeds` for each subsample size `k`.
pub fn consistency_curve(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    rp: &ReferenceParams,
    cfg: &SinkhornConfig,
    spec: &KernelSpec,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<ConsistencyPoint>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation("sizes must be strictly increasing"));
    }
    if seeds.is_empty() {
        return Err(Error::validation("at least one seed is required"));
    }
    let reference = crate::embedding::realize_reference(rp)?;
    let pair_kernel = |a: &DiscreteMeasure, b: &DiscreteMeasure| -> Result<f64> {
        let ea = embed(a, &reference, cfg, None)?;
        let eb = embed(b, &reference, cfg, None)?;
        Ok(kernel_terms(
            spec,
            weighted_sq_distance(&ea.values, &eb.values, reference.weights()),
        )
        .value)
    };
    let full = pair_kernel(p, q)?;
    sizes
        .iter()
        .map(|&k| {
            let errors: Vec<Result<f64>> = seeds
                .par_iter()
                .map(|&seed| {
                    let pk = subsample(p, k, seed)?;
                    let qk = subsample(q, k, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
                    Ok((pair_kernel(&pk, &qk)? - full).abs())
                })
                .collect();
            let errors = errors.into_iter().collect::<Result<Vec<f64>>>()?;
            Ok(ConsistencyPoint {
                k,
                mean_abs_error: errors.iter().sum::<f64>() / errors.len() as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: KernelFamily) -> KernelSpec {
        KernelSpec::new(family, 1.0, 1.0).unwrap()
    }

    #[test]
    fn value_examples() {
        for f in KernelFamily::ALL {
            let s = KernelSpec::new(f, 2.5, 0.7).unwrap();
            assert_eq!(kernel_value(&s, 0.0).unwrap(), 2.5);
        }
        let v = kernel_value(&spec(KernelFamily::Sqexp), 2f64.sqrt()).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!(kernel_value(&spec(KernelFamily::Matern32), 1e4).unwrap() < 1e-300);
        assert!(kernel_value(&spec(KernelFamily::Sqexp), -1.0).is_err());
        assert!(KernelSpec::new(KernelFamily::Sqexp, 0.0, 1.0).is_err());
        assert!(KernelSpec::new(KernelFamily::Sqexp, 1.0, -1.0).is_err());
    }

    #[test]
    fn families_are_monotone() {
        for f in KernelFamily::ALL {
            let s = KernelSpec::new(f, 1.3, 0.4).unwrap();
            let mut prev = f64::INFINITY;
            for k in 0..500 {
                let v = kernel_value(&s, k as f64 * 0.01).unwrap();
                assert!(v <= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for f in KernelFamily::ALL {
            let s = KernelSpec::new(f, 1.7, 0.6).unwrap();
            for sq in [0.05, 0.3, 1.2] {
                let t = kernel_terms(&s, sq);
                let fd = (kernel_terms(&s, sq + h).value - kernel_terms(&s, sq - h).value) / (2.0 * h);
                assert!((t.d_sq_dist - fd).abs() < 1e-7, "{f} ds");
                let up = KernelSpec {
                    lengthscale: s.lengthscale * h.exp(),
                    ..s
                };
                let dn = KernelSpec {
                    lengthscale: s.lengthscale * (-h).exp(),
                    ..s
                };
                let fd = (kernel_terms(&up, sq).value - kernel_terms(&dn, sq).value) / (2.0 * h);
                assert!((t.d_log_lengthscale - fd).abs() < 1e-7, "{f} dσ");
            }
        }
    }

    #[test]
    fn family_names_round_trip() {
        for f in KernelFamily::ALL {
            assert_eq!(f.name().parse::<KernelFamily>().unwrap(), f);
            let json = serde_json::to_string(&f).unwrap();
            assert_eq!(json, format!("\"{}\"", f.name()));
        }
        assert!("rbf".parse::<KernelFamily>().is_err());
    }

    fn emb(values: Vec<f64>, v: &RefVersion) -> Embedding {
        Embedding {
            values,
            ref_version: v.clone(),
            converged: true,
        }
    }

    #[test]
    fn gram_examples() {
        let r = DiscreteMeasure::uniform(vec![0.0, 1.0], 1).unwrap();
        let v = RefVersion::of(&r, 0.1);
        let s = KernelSpec::new(KernelFamily::Sqexp, 2.0, 1.0).unwrap();
        let same = vec![emb(vec![0.5, -0.5], &v); 3];
        let g = gram(&same, &r, &s).unwrap();
        assert!(g.values.iter().all(|&x| x == 2.0));
        let g = gram(&same[..1], &r, &s).unwrap();
        assert_eq!(g.values, vec![2.0]);

        let other = RefVersion::of(&r, 0.2);
        let mixed = vec![emb(vec![0.0, 0.0], &v), emb(vec![0.0, 0.0], &other)];
        assert!(matches!(gram(&mixed, &r, &s), Err(Error::RefVersionMismatch(..))));
    }

    #[test]
    fn cross_gram_matches_gram() {
        let r = DiscreteMeasure::uniform(vec![0.0, 1.0, 2.0], 1).unwrap();
        let v = RefVersion::of(&r, 0.1);
        let es: Vec<Embedding> = (0..4)
            .map(|k| emb(vec![k as f64 * 0.1, -0.2, 0.3 - k as f64 * 0.05], &v))
            .collect();
        let s = KernelSpec::new(KernelFamily::Matern52, 1.5, 0.3).unwrap();
        let g = gram(&es, &r, &s).unwrap();
        let c = cross_gram(&es, &es, &r, &s).unwrap();
        for (a, b) in g.values.iter().zip(&c) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn psd_examples() {
        let r = check_psd(&[1.0, 0.0, 0.0, 1.0], 2, 1e-8).unwrap();
        assert!((r.min_eig - 1.0).abs() < 1e-14 && r.ok);
        let r = check_psd(&[1.0, 1.0, 1.0, 1.0], 2, 1e-8).unwrap();
        assert!(r.min_eig.abs() < 1e-14 && r.ok);
        let r = check_psd(&[1.0, 2.0, 2.0, 1.0], 2, 1e-8).unwrap();
        assert!((r.min_eig + 1.0).abs() < 1e-14 && !r.ok);
        assert!(check_psd(&[1.0, 0.5, 0.4, 1.0], 2, 1e-8).is_err());
    }

    #[test]
    fn mmd_examples() {
        let p = DiscreteMeasure::new(vec![0.0, 0.0, 1.0, 0.5], 2, vec![0.3, 0.7]).unwrap();
        assert!(mmd_sq(&p, &p, 0.5).unwrap().abs() < 1e-15);
        let x = DiscreteMeasure::dirac(&[0.0, 0.0]).unwrap();
        let y = DiscreteMeasure::dirac(&[1.0, 1.0]).unwrap();
        let k = (-2.0f64 / (2.0 * 0.7 * 0.7)).exp();
        assert!((mmd_sq(&x, &y, 0.7).unwrap() - 2.0 * (1.0 - k)).abs() < 1e-15);
        assert_eq!(mmd_kernel(&p, &p, 0.5, 3.0).unwrap(), 3.0);
        let a = mmd_kernel(&p, &x, 0.4, 1.0).unwrap();
        let b = mmd_kernel(&x, &p, 0.4, 1.0).unwrap();
        assert!((a - b).abs() < 1e-15);
        let z = DiscreteMeasure::dirac(&[0.0]).unwrap();
        assert!(matches!(mmd_sq(&x, &z, 1.0), Err(Error::DimensionMismatch(..))));
    }

    #[test]
    fn mmd_grams_agree() {
        let pts: Vec<f64> = (0..9)
            .flat_map(|k| [(k % 3) as f64 / 2.0, (k / 3) as f64 / 2.0])
            .collect();
        let ws: Vec<Vec<f64>> = (0..4)
            .map(|c| (0..9).map(|k| 1.0 + ((k * 7 + c * 3) % 5) as f64).collect())
            .collect();
        let ms: Vec<DiscreteMeasure> = ws
            .iter()
            .map(|w| DiscreteMeasure::new(pts.clone(), 2, w.clone()).unwrap())
            .collect();
        let normalized: Vec<Vec<f64>> = ms.iter().map(|m| m.weights().to_vec()).collect();
        let a = mmd_gram(&ms, 0.4, 1.2).unwrap();
        let b = mmd_gram_shared(&pts, 2, &normalized, 0.4, 1.2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let direct = mmd_kernel(&ms[i], &ms[j], 0.4, 1.2).unwrap();
                assert!((a[i * 4 + j] - direct).abs() < 1e-12);
                assert!((b[i * 4 + j] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn consistency_of_single_atom_measures_is_exact() {
        let p = DiscreteMeasure::dirac(&[0.1, 0.2]).unwrap();
        let q = DiscreteMeasure::dirac(&[-0.3, 0.0]).unwrap();
        let rp = ReferenceParams::new(vec![0.2, -0.1, -0.4, 0.3, 0.5, 0.5], 2, vec![0.0; 3], 1.0).unwrap();
        let cfg = SinkhornConfig::with_epsilon(0.05);
        let curve =
            consistency_curve(&p, &q, &rp, &cfg, &spec(KernelFamily::Sqexp), &[1, 4], &[0, 1]).unwrap();
        assert!(curve.iter().all(|c| c.mean_abs_error == 0.0));
        assert!(consistency_curve(&p, &q, &rp, &cfg, &spec(KernelFamily::Sqexp), &[4, 1], &[0]).is_err());
    }
}
