//! Gaussian-process regression and Laplace-approximated binary
//! classification on precomputed Gram matrices.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::kernels::{cross_gram, gram, kernel_terms, shared_version, GramMatrix, KernelSpec};
use crate::measures::{DiscreteMeasure, Responses};

/// Relative jitter ladder tried, in order, when a factorization fails.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

const NEWTON_MAX_ITERS: usize = 100;
const NEWTON_TOL: f64 = 1e-8;

/// Observation noise used when none is given: `1e-6·l`.
pub fn default_noise(spec: &KernelSpec) -> f64 {
    1e-6 * spec.variance
}

/// Cholesky of `k + shift·I`, escalating through the jitter ladder (scaled
/// by `scale`) on failure. Returns the factor and the jitter that worked.
pub fn cholesky_with_jitter(k: &DMatrix<f64>, shift: f64, scale: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mut tried = Vec::with_capacity(JITTER_LADDER.len() + 1);
    for jitter in std::iter::once(0.0).chain(JITTER_LADDER.iter().map(|j| j * scale)) {
        tried.push(jitter);
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += shift + jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            if c.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok((c, jitter));
            }
        }
    }
    Err(Error::Cholesky { jitters: tried })
}

/// Factorization of `K + noise·I` together with `α = (K + noise·I)⁻¹y`.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    chol: Cholesky<f64, Dyn>,
    pub alpha: DVector<f64>,
    pub noise: f64,
    pub jitter: f64,
    pub log_marginal: f64,
}

impl RegressionFit {
    pub fn new(k: &DMatrix<f64>, y: &[f64], noise: f64, scale: f64) -> Result<Self> {
        let n = k.nrows();
        if y.len() != n {
            return Err(Error::validation(format!(
                "{} targets for a {n}×{n} Gram matrix",
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("targets must be finite"));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::validation(format!(
                "noise must be nonnegative, got {noise}"
            )));
        }
        let (chol, jitter) = cholesky_with_jitter(k, noise, scale)?;
        let y = DVector::from_column_slice(y);
        let alpha = chol.solve(&y);
        let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        let log_marginal = -0.5 * y.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * PI).ln();
        Ok(Self {
            chol,
            alpha,
            noise,
            jitter,
            log_marginal,
        })
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// ∂(−LML)/∂K = ½((K+noise·I)⁻¹ − ααᵀ), also the derivative in noise
    /// along the diagonal.
    pub fn nll_grad_k(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        (inv - &self.alpha * self.alpha.transpose()) * 0.5
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

/// Log marginal likelihood of `y` under a zero-mean GP with covariance
/// `G + noise·I`.
pub fn log_marginal_likelihood(g: &GramMatrix, y: &[f64], noise: f64) -> Result<f64> {
    let k = g.to_dmatrix();
    Ok(RegressionFit::new(&k, y, noise, g.spec.variance)?.log_marginal)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

fn sign(label: u8) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

fn log_likelihood(f: &[f64], labels: &[u8]) -> f64 {
    f.iter()
        .zip(labels)
        .map(|(&fi, &y)| log_sigmoid(sign(y) * fi))
        .sum()
}

/// Laplace approximation at the posterior mode of the latent function.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    /// MAP latent values f̂.
    pub latent: Vec<f64>,
    /// `a` with `f̂ = K a`.
    pub a: Vec<f64>,
    /// ∇ log p(y | f̂) = y − σ(f̂).
    pub grad_log_lik: Vec<f64>,
    pub w_sqrt: Vec<f64>,
    /// Cholesky of `B = I + W^½ K W^½`.
    chol_b: Cholesky<f64, Dyn>,
    pub log_marginal: f64,
    pub iterations: usize,
}

struct NewtonState {
    w_sqrt: Vec<f64>,
    grad: Vec<f64>,
    chol_b: Cholesky<f64, Dyn>,
}

fn newton_state(k: &DMatrix<f64>, f: &[f64], labels: &[u8]) -> Result<NewtonState> {
    let n = f.len();
    let pi: Vec<f64> = f.iter().map(|&v| sigmoid(v)).collect();
    let w_sqrt: Vec<f64> = pi.iter().map(|p| (p * (1.0 - p)).sqrt()).collect();
    let grad: Vec<f64> = labels.iter().zip(&pi).map(|(&y, p)| y as f64 - p).collect();
    let mut b = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] += w_sqrt[i] * k[(i, j)] * w_sqrt[j];
        }
    }
    let chol_b =
        Cholesky::new(b).ok_or_else(|| Error::Numeric("I + W^½KW^½ is not positive definite".into()))?;
    Ok(NewtonState { w_sqrt, grad, chol_b })
}

fn laplace_objective(a: &[f64], f: &[f64], labels: &[u8]) -> f64 {
    let quad: f64 = a.iter().zip(f).map(|(x, y)| x * y).sum();
    -0.5 * quad + log_likelihood(f, labels)
}

impl LaplaceFit {
    /// Newton iterations for the mode with step halving.
    pub fn new(k: &DMatrix<f64>, labels: &[u8]) -> Result<Self> {
        let n = k.nrows();
        if labels.len() != n {
            return Err(Error::validation(format!(
                "{} labels for a {n}×{n} Gram matrix",
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::validation("labels must be 0 or 1"));
        }
        if n > 0 && (labels.iter().all(|&y| y == 0) || labels.iter().all(|&y| y == 1)) {
            log::warn!("all training labels belong to one class");
        }
        let mut a = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut psi = laplace_objective(&a, &f, labels);
        let mut iterations = 0;
        while iterations < NEWTON_MAX_ITERS {
            iterations += 1;
            let st = newton_state(k, &f, labels)?;
            let fv = DVector::from_column_slice(&f);
            let b: DVector<f64> =
                DVector::from_iterator(n, (0..n).map(|i| st.w_sqrt[i] * st.w_sqrt[i] * f[i] + st.grad[i]));
            let kb = k * &b;
            let rhs = DVector::from_iterator(n, (0..n).map(|i| st.w_sqrt[i] * kb[i]));
            let solved = st.chol_b.solve(&rhs);
            let a_full: Vec<f64> = (0..n).map(|i| b[i] - st.w_sqrt[i] * solved[i]).collect();
            let dir: Vec<f64> = a_full.iter().zip(&a).map(|(x, y)| x - y).collect();

            let mut step = 1.0;
            let (a_new, f_new, psi_new) = loop {
                let a_try: Vec<f64> = a.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
                let f_try = (k * DVector::from_column_slice(&a_try)).as_slice().to_vec();
                let psi_try = laplace_objective(&a_try, &f_try, labels);
                if psi_try.is_finite() && psi_try >= psi - 1e-12 * psi.abs().max(1.0) {
                    break (a_try, f_try, psi_try);
                }
                step *= 0.5;
                if step < 1e-10 {
                    return Err(Error::Numeric(
                        "Laplace Newton iteration failed to increase the objective".into(),
                    ));
                }
            };
            let change = f_new
                .iter()
                .zip(fv.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            a = a_new;
            f = f_new;
            psi = psi_new;
            if change <= NEWTON_TOL {
                break;
            }
        }
        let st = newton_state(k, &f, labels)?;
        let log_det_half: f64 = st.chol_b.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        Ok(Self {
            latent: f,
            a,
            grad_log_lik: st.grad,
            w_sqrt: st.w_sqrt,
            chol_b: st.chol_b,
            log_marginal: psi - log_det_half,
            iterations,
        })
    }

    /// ∂(−log q(y|X))/∂K including the implicit dependence of the mode on K.
    pub fn nll_grad_k(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.latent.len();
        let sw = &self.w_sqrt;
        let b_inv = self.chol_b.inverse();
        let r = DMatrix::from_fn(n, n, |i, j| sw[i] * b_inv[(i, j)] * sw[j]);
        let swk = DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)]);
        let c = self
            .chol_b
            .l_dirty()
            .lower_triangle()
            .solve_lower_triangular(&swk)
            .expect("factor has a positive diagonal");
        // ∂log q/∂f̂ = ½ diag((K⁻¹ + W)⁻¹) ⊙ ∇³log p, with W = −∇²log p
        let s2 = DVector::from_fn(n, |i, _| {
            let p = sigmoid(self.latent[i]);
            let third = -p * (1.0 - p) * (1.0 - 2.0 * p);
            let ctc: f64 = c.column(i).iter().map(|v| v * v).sum();
            0.5 * (k[(i, i)] - ctc) * third
        });
        let u = &s2 - &r * (k * &s2);
        let a = DVector::from_column_slice(&self.a);
        let g = DVector::from_column_slice(&self.grad_log_lik);
        let explicit = (&a * a.transpose() - &r) * 0.5;
        let implicit = (&u * g.transpose() + &g * u.transpose()) * 0.5;
        -(explicit + implicit)
    }
}

/// MAP latent vector and Laplace approximation for a Gram matrix.
pub fn laplace_fit_classification(g: &GramMatrix, labels: &[u8]) -> Result<LaplaceFit> {
    LaplaceFit::new(&g.to_dmatrix(), labels)
}

/// Nodes and weights of the 32-point Gauss–Hermite rule (weight e^{−x²}).
pub fn gauss_hermite_32() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(32))
}

/// Golub–Welsch: nodes are eigenvalues of the Jacobi matrix of the Hermite
/// recurrence, weights `√π·v₀²`.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        j[(k - 1, k)] = off;
        j[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], PI.sqrt() * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E[σ(Z)]` for `Z ~ N(mean, variance)`.
pub fn expected_sigmoid(mean: f64, variance: f64) -> f64 {
    let (nodes, weights) = gauss_hermite_32();
    let s = (2.0 * variance.max(0.0)).sqrt();
    let v: f64 = nodes
        .iter()
        .zip(weights)
        .map(|(x, w)| w * sigmoid(mean + s * x))
        .sum::<f64>()
        / PI.sqrt();
    v.clamp(0.0, 1.0)
}

/// `1 − Var(y_true − y_pred)/Var(y_true)`.
pub fn evs(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::validation(format!(
            "evs needs equal nonzero lengths, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
    };
    let vt = var(y_true);
    if !(vt > 0.0) {
        return Err(Error::validation("target variance is zero"));
    }
    let resid: Vec<f64> = y_true.iter().zip(y_pred).map(|(a, b)| a - b).collect();
    Ok(1.0 - var(&resid) / vt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpKind {
    Regression,
    Classification,
}

/// Posterior summary at one query. For classification `mean`/`variance`
/// describe the latent function and `probability` is P(y = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictionResult {
    pub mean: f64,
    pub variance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

#[derive(Debug, Clone)]
enum Posterior {
    Regression(RegressionFit),
    Classification(LaplaceFit),
}

/// A fitted GP over embeddings against a fixed realized reference.
#[derive(Debug, Clone)]
pub struct GPModel {
    pub spec: KernelSpec,
    pub noise: f64,
    pub reference: DiscreteMeasure,
    pub embeddings: Vec<Embedding>,
    pub responses: Responses,
    posterior: Posterior,
}

fn training_gram(
    embeddings: &[Embedding],
    reference: &DiscreteMeasure,
    spec: &KernelSpec,
    n: usize,
) -> Result<GramMatrix> {
    if embeddings.len() != n {
        return Err(Error::validation(format!(
            "{} embeddings for {n} responses",
            embeddings.len()
        )));
    }
    gram(embeddings, reference, spec)
}

/// Fits GP regression with observation noise variance `noise`.
pub fn fit_regression(
    embeddings: &[Embedding],
    reference: &DiscreteMeasure,
    y: &[f64],
    spec: &KernelSpec,
    noise: f64,
) -> Result<GPModel> {
    let g = training_gram(embeddings, reference, spec, y.len())?;
    let fit = RegressionFit::new(&g.to_dmatrix(), y, noise, spec.variance)?;
    Ok(GPModel {
        spec: *spec,
        noise,
        reference: reference.clone(),
        embeddings: embeddings.to_vec(),
        responses: Responses::Targets(y.to_vec()),
        posterior: Posterior::Regression(fit),
    })
}

/// Fits Laplace-approximated GP classification with a logistic likelihood.
pub fn fit_classification(
    embeddings: &[Embedding],
    reference: &DiscreteMeasure,
    labels: &[u8],
    spec: &KernelSpec,
) -> Result<GPModel> {
    let g = training_gram(embeddings, reference, spec, labels.len())?;
    let fit = laplace_fit_classification(&g, labels)?;
    Ok(GPModel {
        spec: *spec,
        noise: 0.0,
        reference: reference.clone(),
        embeddings: embeddings.to_vec(),
        responses: Responses::Labels(labels.to_vec()),
        posterior: Posterior::Classification(fit),
    })
}

/// Fits whichever model matches the response kind. `noise` is ignored for
/// classification.
pub fn fit(
    embeddings: &[Embedding],
    reference: &DiscreteMeasure,
    responses: &Responses,
    spec: &KernelSpec,
    noise: f64,
) -> Result<GPModel> {
    match responses {
        Responses::Targets(y) => fit_regression(embeddings, reference, y, spec, noise),
        Responses::Labels(l) => fit_classification(embeddings, reference, l, spec),
    }
}

impl GPModel {
    pub fn kind(&self) -> GpKind {
        match self.posterior {
            Posterior::Regression(_) => GpKind::Regression,
            Posterior::Classification(_) => GpKind::Classification,
        }
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        match &self.posterior {
            Posterior::Regression(r) => r.log_marginal,
            Posterior::Classification(c) => c.log_marginal,
        }
    }

    pub fn latent_map(&self) -> Option<&[f64]> {
        match &self.posterior {
            Posterior::Classification(c) => Some(&c.latent),
            Posterior::Regression(_) => None,
        }
    }

    /// Weight vector of the posterior mean (`α` or `∇log p(y|f̂)`).
    pub fn weights(&self) -> Vec<f64> {
        match &self.posterior {
            Posterior::Regression(r) => r.alpha.as_slice().to_vec(),
            Posterior::Classification(c) => c.grad_log_lik.clone(),
        }
    }

    pub fn regression_fit(&self) -> Option<&RegressionFit> {
        match &self.posterior {
            Posterior::Regression(r) => Some(r),
            Posterior::Classification(_) => None,
        }
    }

    pub fn predict(&self, queries: &[Embedding]) -> Result<Vec<PredictionResult>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let all: Vec<&Embedding> = self.embeddings.iter().chain(queries).collect();
        shared_version(&all)?;
        let n = self.embeddings.len();
        let cross = cross_gram(queries, &self.embeddings, &self.reference, &self.spec)?;
        let prior = kernel_terms(&self.spec, 0.0).value;
        let weights = self.weights();
        queries
            .iter()
            .enumerate()
            .map(|(t, _)| {
                let k = DVector::from_column_slice(&cross[t * n..(t + 1) * n]);
                let mean: f64 = k.iter().zip(&weights).map(|(a, b)| a * b).sum();
                let (explained, probability_needed) = match &self.posterior {
                    Posterior::Regression(r) => (k.dot(&r.solve(&k)), false),
                    Posterior::Classification(c) => {
                        let swk = DVector::from_fn(n, |i, _| c.w_sqrt[i] * k[i]);
                        let v = c
                            .chol_b
                            .l_dirty()
                            .lower_triangle()
                            .solve_lower_triangular(&swk)
                            .ok_or_else(|| Error::Numeric("singular Laplace factor".into()))?;
                        (v.norm_squared(), true)
                    }
                };
                let variance = (prior - explained).max(0.0);
                Ok(PredictionResult {
                    mean,
                    variance,
                    probability: probability_needed.then(|| expected_sigmoid(mean, variance)),
                })
            })
            .collect()
    }
}

pub fn predict_regression(model: &GPModel, queries: &[Embedding]) -> Result<Vec<PredictionResult>> {
    if model.kind() != GpKind::Regression {
        return Err(Error::validation("model is a classifier"));
    }
    model.predict(queries)
}

pub fn predict_classification(model: &GPModel, queries: &[Embedding]) -> Result<Vec<PredictionResult>> {
    if model.kind() != GpKind::Classification {
        return Err(Error::validation("model is a regressor"));
    }
    model.predict(queries)
}
