//! Joint training of the reference measure and kernel hyperparameters by
//! minimizing the negative log marginal likelihood with L-BFGS.

mod lbfgs;

pub use lbfgs::{finite_diff_grad, lbfgs_minimize, IterRecord, Minimum, Objective, OptimizeConfig, Status};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::embedding::{
    embed_all, realize_reference, DifferentiableEmbedding, Embedding, MeasureKey, PotentialCache,
    RealizedGradient, ReferenceParams,
};
use crate::error::{Error, Result};
use crate::gp::{default_noise, fit, GPModel, LaplaceFit, RegressionFit};
use crate::kernels::{kernel_terms, KernelFamily, KernelSpec};
use crate::measures::{LabeledDataset, Responses};
use crate::sinkhorn::{DualPotentials, SinkhornConfig};

/// Everything L-BFGS optimizes. Flat layout: `[x̃ (row-major), w̃, log l,
/// log σ, log noise?]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperState {
    pub reference: ReferenceParams,
    pub log_variance: f64,
    pub log_lengthscale: f64,
    /// Trained noise. When `None` the noise is not optimized.
    pub log_noise: Option<f64>,
    /// Untrained noise used when `log_noise` is `None`; defaults to `1e-6·l`.
    pub fixed_noise: Option<f64>,
}

impl HyperState {
    pub fn num_params(&self) -> usize {
        self.reference.num_params() + 2 + usize::from(self.log_noise.is_some())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.reference.to_flat();
        v.push(self.log_variance);
        v.push(self.log_lengthscale);
        v.extend(self.log_noise);
        v
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let r = self.reference.num_params();
        Self {
            reference: self.reference.with_flat(&flat[..r]),
            log_variance: flat[r],
            log_lengthscale: flat[r + 1],
            log_noise: self.log_noise.map(|_| flat[r + 2]),
            fixed_noise: self.fixed_noise,
        }
    }

    pub fn spec(&self, family: KernelFamily) -> KernelSpec {
        KernelSpec {
            family,
            variance: self.log_variance.exp(),
            lengthscale: self.log_lengthscale.exp(),
        }
    }

    pub fn noise(&self, family: KernelFamily) -> f64 {
        match (self.log_noise, self.fixed_noise) {
            (Some(v), _) => v.exp(),
            (None, Some(n)) => n,
            (None, None) => default_noise(&self.spec(family)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.reference.validate()?;
        let finite = self.log_variance.is_finite()
            && self.log_lengthscale.is_finite()
            && self.log_noise.is_none_or(f64::is_finite);
        if !finite {
            return Err(Error::validation("hyperparameters must be finite"));
        }
        if let Some(n) = self.fixed_noise {
            if self.log_noise.is_some() {
                return Err(Error::validation("noise cannot be both fixed and trained"));
            }
            if !(n >= 0.0 && n.is_finite()) {
                return Err(Error::validation("fixed noise must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Objective value and gradient at one state.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    /// Same layout as [`HyperState::to_flat`].
    pub gradient: Vec<f64>,
    pub embeddings: Vec<Embedding>,
    /// False if any Sinkhorn solve stopped at `max_iter`.
    pub all_converged: bool,
    /// True if any backward pass used a truncated tape.
    pub truncated: bool,
    potentials: Vec<DualPotentials>,
}

/// ∂NLL/∂K and the value for the model matching the responses.
fn likelihood_terms(
    k: &DMatrix<f64>,
    responses: &Responses,
    noise: f64,
    scale: f64,
) -> Result<(f64, DMatrix<f64>)> {
    match responses {
        Responses::Targets(y) => {
            let fit = RegressionFit::new(k, y, noise, scale)?;
            Ok((-fit.log_marginal, fit.nll_grad_k()))
        }
        Responses::Labels(l) => {
            let fit = LaplaceFit::new(k, l)?;
            Ok((-fit.log_marginal, fit.nll_grad_k(k)))
        }
    }
}

/// Negative log marginal likelihood (Laplace-approximate for labels) and its
/// gradient through kernel, embeddings and unrolled Sinkhorn.
///
/// The cache is only read; potentials from this evaluation are returned for
/// the caller to commit.
pub fn nll_objective(
    ds: &LabeledDataset,
    state: &HyperState,
    family: KernelFamily,
    cfg: &SinkhornConfig,
    cache: Option<&PotentialCache>,
) -> Result<Evaluation> {
    state.validate()?;
    if ds.dim() != state.reference.dim {
        return Err(Error::DimensionMismatch(state.reference.dim, ds.dim()));
    }
    if ds.is_empty() {
        return Err(Error::validation("cannot train on an empty dataset"));
    }
    let reference = realize_reference(&state.reference)?;
    let q = reference.len();
    let d = reference.dim();
    let w = reference.weights();

    let solves: Vec<Result<DifferentiableEmbedding>> = ds
        .measures()
        .par_iter()
        .map(|m| {
            let warm = cache.and_then(|c| c.get(MeasureKey::of(m), m.len(), q));
            DifferentiableEmbedding::new(m, &reference, cfg, warm.as_ref())
        })
        .collect();
    let solves = crate::embedding::collect_indexed(solves)?;
    let all_converged = solves.iter().all(|s| s.embedding.converged);
    let truncated = solves.iter().any(|s| s.truncated());
    if truncated {
        log::warn!(
            "Sinkhorn needed more than {} iterations; gradient uses a truncated unroll",
            cfg.unroll_cap
        );
    }
    if !all_converged {
        log::warn!(
            "some Sinkhorn solves did not converge within {} iterations",
            cfg.max_iter
        );
    }

    let n = solves.len();
    let e: Vec<&[f64]> = solves.iter().map(|s| s.embedding.values.as_slice()).collect();
    let spec = state.spec(family);
    let mut k = DMatrix::zeros(n, n);
    let mut k_s = DMatrix::zeros(n, n);
    let mut k_sigma = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s = crate::embedding::weighted_sq_distance(e[i], e[j], w);
            let t = kernel_terms(&spec, if i == j { 0.0 } else { s });
            for (m, v) in [
                (&mut k, t.value),
                (&mut k_s, t.d_sq_dist),
                (&mut k_sigma, t.d_log_lengthscale),
            ] {
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
    }
    let noise = state.noise(family);
    let (value, g) = likelihood_terms(&k, ds.responses(), noise, spec.variance)?;

    let mut d_log_variance = g.component_mul(&k).sum();
    let d_log_lengthscale = g.component_mul(&k_sigma).sum();
    let d_noise = g.trace() * noise;
    let is_regression = matches!(ds.responses(), Responses::Targets(_));
    if is_regression && state.log_noise.is_none() && state.fixed_noise.is_none() {
        d_log_variance += d_noise;
    }

    // Cotangents of the squared embedding distances, then of the embeddings.
    let m = g.component_mul(&k_s);
    let mut realized = RealizedGradient::zeros(q, d);
    for i in 0..n {
        for j in 0..n {
            let mij = m[(i, j)];
            if i == j || mij == 0.0 {
                continue;
            }
            for kk in 0..q {
                let diff = e[i][kk] - e[j][kk];
                realized.weights[kk] += mij * diff * diff;
            }
        }
    }
    let pulled: Vec<RealizedGradient> = solves
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut e_bar = vec![0.0; q];
            for j in 0..n {
                let mij = m[(i, j)];
                if i == j || mij == 0.0 {
                    continue;
                }
                for kk in 0..q {
                    e_bar[kk] += 4.0 * w[kk] * mij * (e[i][kk] - e[j][kk]);
                }
            }
            s.pullback(&e_bar)
        })
        .collect();
    for p in &pulled {
        realized.add_assign(p);
    }
    let mut gradient = state.reference.pullback(&realized).to_flat();
    gradient.push(d_log_variance);
    gradient.push(d_log_lengthscale);
    if state.log_noise.is_some() {
        gradient.push(if is_regression { d_noise } else { 0.0 });
    }

    Ok(Evaluation {
        value,
        gradient,
        embeddings: solves.iter().map(|s| s.embedding.clone()).collect(),
        all_converged,
        truncated,
        potentials: solves.iter().map(|s| s.potentials().clone()).collect(),
    })
}

/// Default starting point: reference atoms uniform in raw space, equal
/// weights, scale spanning the data, `l = Var(y)` and `σ` the median
/// pairwise embedding distance.
pub fn default_init(ds: &LabeledDataset, q: usize, cfg: &SinkhornConfig, seed: u64) -> Result<HyperState> {
    if q == 0 {
        return Err(Error::validation("reference needs at least one atom"));
    }
    if ds.is_empty() {
        return Err(Error::validation("cannot initialize from an empty dataset"));
    }
    let d = ds.dim();
    let span = ds
        .measures()
        .iter()
        .flat_map(|m| m.points().iter())
        .fold(0.0f64, |a, x| a.max(x.abs()));
    let scale = if span > 0.0 { span } else { 1.0 };
    let reference = ReferenceParams::random(q, d, scale, seed)?;

    let variance = match ds.responses() {
        Responses::Targets(y) => {
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64
        }
        Responses::Labels(_) => 1.0,
    };
    let variance = if variance > 0.0 { variance } else { 1.0 };

    let realized = realize_reference(&reference)?;
    let embeddings = embed_all(ds.measures(), &realized, cfg, None)?;
    let mut dists = Vec::with_capacity(embeddings.len() * embeddings.len() / 2);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            dists.push(
                crate::embedding::weighted_sq_distance(
                    &embeddings[i].values,
                    &embeddings[j].values,
                    realized.weights(),
                )
                .sqrt(),
            );
        }
    }
    dists.sort_by(f64::total_cmp);
    let median = if dists.is_empty() {
        0.0
    } else if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    let lengthscale = if median > 0.0 { median } else { 1.0 };
    Ok(HyperState {
        reference,
        log_variance: variance.ln(),
        log_lengthscale: lengthscale.ln(),
        log_noise: None,
        fixed_noise: None,
    })
}

/// Wraps [`nll_objective`] for L-BFGS, committing warm starts only for
/// accepted iterates.
struct TrainingObjective<'a> {
    ds: &'a LabeledDataset,
    template: HyperState,
    family: KernelFamily,
    cfg: &'a SinkhornConfig,
    cache: PotentialCache,
    pending: Vec<(Vec<f64>, Vec<DualPotentials>)>,
    accepted_any: bool,
}

impl Objective for TrainingObjective<'_> {
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let state = self.template.with_flat(x);
        let ev = nll_objective(self.ds, &state, self.family, self.cfg, Some(&self.cache))?;
        self.pending.push((x.to_vec(), ev.potentials));
        Ok((ev.value, ev.gradient))
    }

    fn accept(&mut self, x: &[f64]) {
        if let Some((_, pots)) = self.pending.iter().rev().find(|(px, _)| px == x) {
            for (m, p) in self.ds.measures().iter().zip(pots) {
                self.cache.insert(MeasureKey::of(m), p.clone());
            }
        }
        self.accepted_any = true;
        self.pending.clear();
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GPModel,
    pub state: HyperState,
    pub trace: Vec<IterRecord>,
    pub status: Status,
    pub initial_nll: f64,
    pub final_nll: f64,
    /// False if the final embeddings include a non-converged solve.
    pub converged_embeddings: bool,
}

/// Runs L-BFGS over [`nll_objective`] and refits the model at the optimum.
pub fn train(
    ds: &LabeledDataset,
    init: &HyperState,
    family: KernelFamily,
    opt: &OptimizeConfig,
    cfg: &SinkhornConfig,
) -> Result<TrainOutcome> {
    train_with(ds, init, family, opt, cfg, |_, _| {})
}

/// [`train`] with a callback invoked on every accepted iterate.
pub fn train_with(
    ds: &LabeledDataset,
    init: &HyperState,
    family: KernelFamily,
    opt: &OptimizeConfig,
    cfg: &SinkhornConfig,
    mut on_iter: impl FnMut(&IterRecord, &HyperState),
) -> Result<TrainOutcome> {
    init.validate()?;
    cfg.validate()?;
    let mut obj = TrainingObjective {
        ds,
        template: init.clone(),
        family,
        cfg,
        cache: PotentialCache::new(),
        pending: Vec::new(),
        accepted_any: false,
    };
    let template = init.clone();
    let min = lbfgs_minimize(&mut obj, &init.to_flat(), opt, |rec, x| {
        on_iter(rec, &template.with_flat(x))
    })?;
    let state = init.with_flat(&min.x);
    if !obj.accepted_any {
        return Err(Error::Numeric("optimizer accepted no iterate".into()));
    }
    // Cold solves, so the stored embeddings match what prediction recomputes.
    let reference = realize_reference(&state.reference)?;
    let embeddings = embed_all(ds.measures(), &reference, cfg, None)?;
    let converged_embeddings = embeddings.iter().all(|e| e.converged);
    let spec = state.spec(family);
    let model = fit(
        &embeddings,
        &reference,
        ds.responses(),
        &spec,
        state.noise(family),
    )?;
    Ok(TrainOutcome {
        model,
        state,
        initial_nll: min.trace[0].nll,
        final_nll: min.value,
        trace: min.trace,
        status: min.status,
        converged_embeddings,
    })
}
