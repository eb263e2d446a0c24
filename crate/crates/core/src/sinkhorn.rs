//! Entropic optimal transport between discrete measures.
//!
//! The solver alternates the two soft-min updates
//!
//! ```text
//! f_i ← −ε log Σ_j w_j exp((g_j − C_ij)/ε)
//! g_j ← −ε log Σ_i p_i exp((f_i − C_ij)/ε)
//! ```
//!
//! with `C_ij = ½‖x_i − y_j‖²`. The iterates are carried as log-domain
//! potentials plus bounded multiplicative scalings against a cached Gibbs
//! kernel; scalings that drift outside `e^±30` are folded back into the
//! potentials, so nothing overflows at small ε. Convergence is the
//! L∞ violation of the two marginal conditions
//! `Σ_j w_j exp((f_i + g_j − C_ij)/ε) = 1` and
//! `Σ_i p_i exp((f_i + g_j − C_ij)/ε) = 1`.
//!
//! On return `g` is centered (`Σ_j w_j g_j = 0`) and `f` absorbs the constant,
//! so every `f_i + g_j` is unchanged.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    /// L∞ threshold on the marginal residual.
    pub tol: f64,
    /// Most iterations kept for reverse-mode differentiation.
    pub unroll_cap: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            max_iter: 1000,
            tol: 1e-6,
            unroll_cap: 200,
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::validation(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::validation("max_iter must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::validation(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Dense `n×q` matrix of `½‖x_i − y_j‖²`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

/// Half squared Euclidean cost between row-major point sets of dimension `dim`.
pub fn cost_matrix(x: &[f64], y: &[f64], dim: usize) -> Result<CostMatrix> {
    if dim == 0 || !x.len().is_multiple_of(dim) || !y.len().is_multiple_of(dim) {
        return Err(Error::validation(format!(
            "point buffers of length {} and {} do not have dimension {dim}",
            x.len(),
            y.len()
        )));
    }
    let rows = x.len() / dim;
    let cols = y.len() / dim;
    let mut values = Vec::with_capacity(rows * cols);
    for xi in x.chunks_exact(dim) {
        for yj in y.chunks_exact(dim) {
            let d2: f64 = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
            values.push(0.5 * d2);
        }
    }
    Ok(CostMatrix { values, rows, cols })
}

/// Cost between the supports of two measures.
pub fn cost_between(p: &DiscreteMeasure, u: &DiscreteMeasure) -> Result<CostMatrix> {
    if p.dim() != u.dim() {
        return Err(Error::DimensionMismatch(p.dim(), u.dim()));
    }
    cost_matrix(p.points(), u.points(), p.dim())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPotentials {
    /// Potential on the support of the source measure.
    pub f: Vec<f64>,
    /// Centered potential on the support of the reference measure.
    pub g: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Entropic plan `π_ij`, row-major `n×q`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.values
            .chunks_exact(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.values.chunks_exact(self.cols) {
            for (a, v) in s.iter_mut().zip(r) {
                *a += v;
            }
        }
        s
    }
}

/// Solves entropic OT from `p` to the reference `u`.
pub fn solve(
    p: &DiscreteMeasure,
    u: &DiscreteMeasure,
    cfg: &SinkhornConfig,
    warm: Option<&DualPotentials>,
) -> Result<DualPotentials> {
    let cost = cost_between(p, u)?;
    solve_with_cost(p.weights(), u.weights(), &cost, cfg, warm)
}

/// Solves with a precomputed cost matrix; `p` indexes rows and `w` columns.
pub fn solve_with_cost(
    p: &[f64],
    w: &[f64],
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
    warm: Option<&DualPotentials>,
) -> Result<DualPotentials> {
    Ok(run(p, w, cost, cfg, warm, None)?.0)
}

/// Solves and records the iterates needed to differentiate the centered `g`
/// with respect to the cost matrix and the reference weights.
pub fn solve_recorded(
    p: &[f64],
    w: &[f64],
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
    warm: Option<&DualPotentials>,
) -> Result<UnrolledSolve> {
    let (potentials, tape) = run(p, w, cost, cfg, warm, Some(cfg.unroll_cap.max(1)))?;
    let tape = tape.expect("tape requested");
    Ok(UnrolledSolve {
        potentials,
        tape,
        log_p: p.iter().map(|v| v.ln()).collect(),
        w: w.to_vec(),
        cost: cost.clone(),
    })
}

struct Kernel<'a> {
    log_p: Vec<f64>,
    log_w: Vec<f64>,
    cost: &'a CostMatrix,
    /// Cost transposed (`q×n`) for cache-friendly column sweeps.
    cost_t: Vec<f64>,
    inv_eps: f64,
    eps: f64,
}

impl<'a> Kernel<'a> {
    fn new(p: &[f64], w: &[f64], cost: &'a CostMatrix, eps: f64) -> Self {
        let (n, q) = (cost.rows, cost.cols);
        let mut cost_t = vec![0.0; n * q];
        for i in 0..n {
            for j in 0..q {
                cost_t[j * n + i] = cost.values[i * q + j];
            }
        }
        Self {
            log_p: p.iter().map(|v| v.ln()).collect(),
            log_w: w.iter().map(|v| v.ln()).collect(),
            cost,
            cost_t,
            inv_eps: 1.0 / eps,
            eps,
        }
    }

    /// f_i = −ε LSE_j(log w_j + (g_j − C_ij)/ε)
    fn update_f(&self, g: &[f64], f: &mut [f64], scratch: &mut Vec<f64>) {
        let q = self.cost.cols;
        for (i, fi) in f.iter_mut().enumerate() {
            let row = &self.cost.values[i * q..(i + 1) * q];
            scratch.clear();
            scratch.extend((0..q).map(|j| self.log_w[j] + (g[j] - row[j]) * self.inv_eps));
            *fi = -self.eps * log_sum_exp(scratch);
        }
    }

    /// g_j = −ε LSE_i(log p_i + (f_i − C_ij)/ε)
    fn update_g(&self, f: &[f64], g: &mut [f64], scratch: &mut Vec<f64>) {
        let n = self.cost.rows;
        for (j, gj) in g.iter_mut().enumerate() {
            let col = &self.cost_t[j * n..(j + 1) * n];
            scratch.clear();
            scratch.extend((0..n).map(|i| self.log_p[i] + (f[i] - col[i]) * self.inv_eps));
            *gj = -self.eps * log_sum_exp(scratch);
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// One recorded step: `f_t = F(g_{t-1})`, `g_t = G(f_t)`.
#[derive(Debug, Clone)]
struct Step {
    g_prev: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Tape {
    steps: VecDeque<Step>,
    /// Total iterations executed by the forward solve.
    iterations: usize,
}

impl Tape {
    /// True when early iterations were dropped from the tape.
    pub fn truncated(&self) -> bool {
        self.steps.len() < self.iterations
    }

    pub fn recorded(&self) -> usize {
        self.steps.len()
    }
}

/// Scalings beyond `e^±ABSORB_LOG` are folded back into the potentials.
const ABSORB_LOG: f64 = 30.0;

/// Scaling-form view of the log-domain iterates: `f = f̂ + ε log a`,
/// `g = ĝ + ε log b`, with `K̃_ij = exp((f̂_i + ĝ_j − C_ij)/ε)` cached until
/// the next absorption.
struct Stabilized<'k, 'c> {
    kernel: &'k Kernel<'c>,
    p: &'k [f64],
    w: &'k [f64],
    f_hat: Vec<f64>,
    g_hat: Vec<f64>,
    k_tilde: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl<'k, 'c> Stabilized<'k, 'c> {
    fn new(kernel: &'k Kernel<'c>, p: &'k [f64], w: &'k [f64], f: Vec<f64>, g: Vec<f64>) -> Self {
        let (n, q) = (f.len(), g.len());
        let mut s = Self {
            kernel,
            p,
            w,
            f_hat: f,
            g_hat: g,
            k_tilde: vec![0.0; n * q],
            a: vec![1.0; n],
            b: vec![1.0; q],
        };
        s.refresh_kernel();
        s
    }

    fn refresh_kernel(&mut self) {
        let q = self.g_hat.len();
        let inv_eps = self.kernel.inv_eps;
        for (i, fi) in self.f_hat.iter().enumerate() {
            let row = &self.kernel.cost.values[i * q..(i + 1) * q];
            for j in 0..q {
                self.k_tilde[i * q + j] = ((fi + self.g_hat[j] - row[j]) * inv_eps).exp();
            }
        }
    }

    fn f(&self) -> Vec<f64> {
        let eps = self.kernel.eps;
        self.f_hat
            .iter()
            .zip(&self.a)
            .map(|(h, a)| h + eps * a.ln())
            .collect()
    }

    fn g(&self) -> Vec<f64> {
        let eps = self.kernel.eps;
        self.g_hat
            .iter()
            .zip(&self.b)
            .map(|(h, b)| h + eps * b.ln())
            .collect()
    }

    /// Replaces the decomposition by `(f, g)` with unit scalings.
    fn absorb(&mut self, f: Vec<f64>, g: Vec<f64>) {
        self.f_hat = f;
        self.g_hat = g;
        self.a.iter_mut().for_each(|v| *v = 1.0);
        self.b.iter_mut().for_each(|v| *v = 1.0);
        self.refresh_kernel();
    }

    /// g-update: `b_j = 1 / Σ_i p_i K̃_ij a_i`.
    fn update_g(&mut self, scratch: &mut Vec<f64>) {
        let q = self.b.len();
        let mut col = vec![0.0; q];
        for (i, (pi, ai)) in self.p.iter().zip(&self.a).enumerate() {
            let s = pi * ai;
            let row = &self.k_tilde[i * q..(i + 1) * q];
            for (c, k) in col.iter_mut().zip(row) {
                *c += s * k;
            }
        }
        let lim = ABSORB_LOG.exp();
        let ok = col.iter().all(|&c| c > 1.0 / lim && c < lim);
        if ok {
            for (b, c) in self.b.iter_mut().zip(&col) {
                *b = 1.0 / c;
            }
        } else {
            let f = self.f();
            let mut g = vec![0.0; q];
            self.kernel.update_g(&f, &mut g, scratch);
            self.absorb(f, g);
        }
    }

    /// Next f-update as scalings relative to the current `f̂`, or `None` when
    /// they leave the safe range. Also returns the source-marginal residual of
    /// the current pair.
    fn next_a(&self) -> Option<(Vec<f64>, f64)> {
        let q = self.b.len();
        let lim = ABSORB_LOG.exp();
        let mut next = Vec::with_capacity(self.a.len());
        let mut residual: f64 = 0.0;
        for (i, ai) in self.a.iter().enumerate() {
            let row = &self.k_tilde[i * q..(i + 1) * q];
            let s: f64 = row
                .iter()
                .zip(self.w.iter().zip(&self.b))
                .map(|(k, (wj, bj))| k * wj * bj)
                .sum();
            if !(s > 1.0 / lim && s < lim) {
                return None;
            }
            residual = residual.max((ai * s - 1.0).abs());
            next.push(1.0 / s);
        }
        Some((next, residual))
    }
}

fn run(
    p: &[f64],
    w: &[f64],
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
    warm: Option<&DualPotentials>,
    record: Option<usize>,
) -> Result<(DualPotentials, Option<Tape>)> {
    cfg.validate()?;
    let (n, q) = (cost.rows, cost.cols);
    if p.len() != n || w.len() != q {
        return Err(Error::validation(format!(
            "weights of length {} and {} do not match a {n}×{q} cost",
            p.len(),
            w.len()
        )));
    }
    if n == 0 || q == 0 {
        return Err(Error::EmptyMeasure);
    }
    if let Some(warm) = warm {
        if warm.f.len() != n || warm.g.len() != q {
            return Err(Error::validation(format!(
                "warm start has sizes ({}, {}), expected ({n}, {q})",
                warm.f.len(),
                warm.g.len()
            )));
        }
    }

    let kernel = Kernel::new(p, w, cost, cfg.epsilon);
    let mut scratch = Vec::with_capacity(n.max(q));
    let g0 = warm.map(|w| w.g.clone()).unwrap_or_else(|| vec![0.0; q]);
    let mut f1 = vec![0.0; n];
    kernel.update_f(&g0, &mut f1, &mut scratch);
    let mut state = Stabilized::new(&kernel, p, w, f1, g0);
    let mut tape = record.map(|cap| {
        (
            cap,
            Tape {
                steps: VecDeque::with_capacity(cap.min(1024)),
                iterations: 0,
            },
        )
    });

    let mut residual;
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let g_prev = tape.as_ref().map(|_| state.g());
        state.update_g(&mut scratch);
        iterations += 1;
        if let (Some((cap, t)), Some(g_prev)) = (tape.as_mut(), g_prev) {
            if t.steps.len() == *cap {
                t.steps.pop_front();
            }
            t.steps.push_back(Step {
                g_prev,
                f: state.f(),
                g: state.g(),
            });
            t.iterations = iterations;
        }

        // After the g-update the reference marginal holds exactly; the source
        // residual is exp((f − F(g))/ε) − 1.
        let next = match state.next_a() {
            Some(next) => next,
            None => {
                let (f, g) = (state.f(), state.g());
                state.absorb(f, g);
                state
                    .next_a()
                    .ok_or_else(|| Error::Numeric("scaling overflow after absorption".into()))?
            }
        };
        residual = next.1;
        if !residual.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite marginal residual after {iterations} iterations"
            )));
        }
        if residual <= cfg.tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iter {
            break;
        }
        state.a = next.0;
        if state
            .a
            .iter()
            .any(|&v| !(v > (-ABSORB_LOG).exp() && v < ABSORB_LOG.exp()))
        {
            let (f, g) = (state.f(), state.g());
            state.absorb(f, g);
        }
    }

    let mut f = state.f();
    let mut g = state.g();
    if f.iter().chain(&g).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite dual potentials".into()));
    }
    let shift: f64 = g.iter().zip(w).map(|(a, b)| a * b).sum();
    for v in &mut g {
        *v -= shift;
    }
    for v in &mut f {
        *v += shift;
    }
    let potentials = DualPotentials {
        f,
        g,
        epsilon: cfg.epsilon,
        iterations,
        residual,
        converged,
    };
    Ok((potentials, tape.map(|(_, t)| t)))
}

/// Forward solve plus the recorded iterates behind it.
#[derive(Debug, Clone)]
pub struct UnrolledSolve {
    pub potentials: DualPotentials,
    tape: Tape,
    log_p: Vec<f64>,
    w: Vec<f64>,
    cost: CostMatrix,
}

/// Cotangents with respect to the cost matrix (row-major `n×q`) and the
/// reference weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveGradient {
    pub cost: Vec<f64>,
    pub weights: Vec<f64>,
}

impl UnrolledSolve {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Reverse accumulation through the recorded updates and the final
    /// centering step. `g_bar` is the cotangent of the centered `g`.
    ///
    /// The initial `g` (zero or warm start) is treated as a constant; when
    /// the tape is truncated the oldest recorded `g` plays that role.
    pub fn vjp(&self, g_bar: &[f64]) -> SolveGradient {
        let (n, q) = (self.cost.rows, self.cost.cols);
        let eps = self.potentials.epsilon;
        let inv_eps = 1.0 / eps;
        let c = &self.cost.values;
        let mut cost_bar = vec![0.0; n * q];
        let mut w_bar = vec![0.0; q];

        let last = self.tape.steps.back().expect("at least one iteration");
        // Centering: out_j = g_j − Σ_k w_k g_k.
        let total: f64 = g_bar.iter().sum();
        let mut gb: Vec<f64> = g_bar.iter().zip(&self.w).map(|(b, wk)| b - wk * total).collect();
        for (wb, gk) in w_bar.iter_mut().zip(&last.g) {
            *wb -= gk * total;
        }

        let mut fb = vec![0.0; n];
        for step in self.tape.steps.iter().rev() {
            // g_j = −ε LSE_i(log p_i + (f_i − C_ij)/ε); β_ij its softmax.
            fb.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let row = &c[i * q..(i + 1) * q];
                let mut acc = 0.0;
                for j in 0..q {
                    let beta = (self.log_p[i] + (step.f[i] - row[j] + step.g[j]) * inv_eps).exp();
                    let t = gb[j] * beta;
                    cost_bar[i * q + j] += t;
                    acc += t;
                }
                fb[i] = -acc;
            }
            // f_i = −ε LSE_j(log w_j + (g_j − C_ij)/ε); α_ij its softmax.
            gb.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let row = &c[i * q..(i + 1) * q];
                for j in 0..q {
                    let alpha = self.w[j] * ((step.g_prev[j] - row[j] + step.f[i]) * inv_eps).exp();
                    let t = fb[i] * alpha;
                    cost_bar[i * q + j] += t;
                    gb[j] -= t;
                }
            }
            for j in 0..q {
                // ∂f_i/∂w_j = −ε α_ij / w_j
                w_bar[j] += eps * gb[j] / self.w[j];
            }
        }
        SolveGradient {
            cost: cost_bar,
            weights: w_bar,
        }
    }
}

/// L∞ violations `(r_P, r_U)` of the two marginal conditions.
pub fn marginal_residual(
    p: &DiscreteMeasure,
    u: &DiscreteMeasure,
    pot: &DualPotentials,
) -> Result<(f64, f64)> {
    let cost = cost_between(p, u)?;
    check_shapes(p, u, pot)?;
    let inv_eps = 1.0 / pot.epsilon;
    let (n, q) = (p.len(), u.len());
    let mut row = vec![0.0; n];
    let mut col = vec![0.0; q];
    for i in 0..n {
        for j in 0..q {
            let e = ((pot.f[i] + pot.g[j] - cost.get(i, j)) * inv_eps).exp();
            row[i] += u.weights()[j] * e;
            col[j] += p.weights()[i] * e;
        }
    }
    let dev = |v: &[f64]| v.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    Ok((dev(&row), dev(&col)))
}

fn check_shapes(p: &DiscreteMeasure, u: &DiscreteMeasure, pot: &DualPotentials) -> Result<()> {
    if pot.f.len() != p.len() || pot.g.len() != u.len() {
        return Err(Error::validation(format!(
            "potentials of sizes ({}, {}) do not match measures of sizes ({}, {})",
            pot.f.len(),
            pot.g.len(),
            p.len(),
            u.len()
        )));
    }
    Ok(())
}

/// Entropic plan `π_ij = p_i w_j exp((f_i + g_j − C_ij)/ε)`.
pub fn plan(p: &DiscreteMeasure, u: &DiscreteMeasure, pot: &DualPotentials) -> Result<TransportPlan> {
    if !pot.converged {
        return Err(Error::validation(
            "transport plan requested from non-converged potentials",
        ));
    }
    check_shapes(p, u, pot)?;
    let cost = cost_between(p, u)?;
    let inv_eps = 1.0 / pot.epsilon;
    let (n, q) = (p.len(), u.len());
    let mut values = Vec::with_capacity(n * q);
    for i in 0..n {
        for j in 0..q {
            values.push(
                p.weights()[i] * u.weights()[j] * ((pot.f[i] + pot.g[j] - cost.get(i, j)) * inv_eps).exp(),
            );
        }
    }
    Ok(TransportPlan {
        values,
        rows: n,
        cols: q,
    })
}

/// Dual objective `⟨f,P⟩ + ⟨g,U⟩ − ε(Σ_ij p_i w_j e^{(f_i+g_j−C_ij)/ε} − 1)`.
pub fn divergence_value(p: &DiscreteMeasure, u: &DiscreteMeasure, pot: &DualPotentials) -> Result<f64> {
    check_shapes(p, u, pot)?;
    let cost = cost_between(p, u)?;
    let eps = pot.epsilon;
    let mut linear = 0.0;
    for (pi, fi) in p.weights().iter().zip(&pot.f) {
        linear += pi * fi;
    }
    for (wj, gj) in u.weights().iter().zip(&pot.g) {
        linear += wj * gj;
    }
    let mut mass = 0.0;
    for i in 0..p.len() {
        for j in 0..u.len() {
            mass += p.weights()[i] * u.weights()[j] * ((pot.f[i] + pot.g[j] - cost.get(i, j)) / eps).exp();
        }
    }
    Ok(linear - eps * (mass - 1.0))
}

/// Evaluates `g(y) = −ε log Σ_i p_i exp((f_i − ½‖x_i − y‖²)/ε)` at each
/// row of `query`.
pub fn extend_potential(p: &DiscreteMeasure, f: &[f64], query: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if f.len() != p.len() {
        return Err(Error::validation(format!(
            "potential has {} entries for a measure with {} atoms",
            f.len(),
            p.len()
        )));
    }
    let dim = p.dim();
    if !query.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch(dim, query.len() % dim));
    }
    let mut scratch = Vec::with_capacity(p.len());
    Ok(query
        .chunks_exact(dim)
        .map(|y| {
            scratch.clear();
            for i in 0..p.len() {
                let c: f64 = 0.5
                    * p.point(i)
                        .iter()
                        .zip(y)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                scratch.push(p.weights()[i].ln() + (f[i] - c) / epsilon);
            }
            -epsilon * log_sum_exp(&scratch)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(points: &[f64], weights: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::new(points.to_vec(), 1, weights.to_vec()).unwrap()
    }

    fn tight(eps: f64) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: eps,
            max_iter: 100_000,
            tol: 1e-13,
            unroll_cap: 200,
        }
    }

    #[test]
    fn cost_examples() {
        assert_eq!(cost_matrix(&[0.0], &[2.0], 1).unwrap().values(), &[2.0]);
        assert_eq!(cost_matrix(&[3.0, 4.0], &[3.0, 4.0], 2).unwrap().values(), &[0.0]);
        assert_eq!(cost_matrix(&[0.0, 0.0], &[1.0, 1.0], 2).unwrap().values(), &[1.0]);
        assert!(cost_matrix(&[0.0, 0.0, 1.0], &[1.0, 1.0], 2).is_err());
    }

    #[test]
    fn single_atoms() {
        for eps in [0.01, 1.0, 10.0] {
            let pot = solve(&m1(&[0.0], &[1.0]), &m1(&[1.0], &[1.0]), &tight(eps), None).unwrap();
            assert!(pot.converged);
            assert!((pot.f[0] - 0.5).abs() < 1e-14);
            assert!(pot.g[0].abs() < 1e-14);
        }
    }

    #[test]
    fn single_atom_reference_gives_cost_column() {
        let p = m1(&[0.0, 1.0], &[0.5, 0.5]);
        let u = m1(&[0.0], &[1.0]);
        let pot = solve(&p, &u, &tight(1.0), None).unwrap();
        assert!(pot.f[0].abs() < 1e-14);
        assert!((pot.f[1] - 0.5).abs() < 1e-14);
        assert!(pot.g[0].abs() < 1e-14);
    }

    /// Plain fixed-point iteration on `(a, b)` scalings with compensated
    /// summation, iterated until the scalings stop moving.
    fn scaling_oracle(p: &[f64], w: &[f64], c: &[Vec<f64>], eps: f64) -> (Vec<f64>, Vec<f64>) {
        let n = p.len();
        let q = w.len();
        let k: Vec<Vec<f64>> = c
            .iter()
            .map(|r| r.iter().map(|v| (-v / eps).exp()).collect())
            .collect();
        let mut a = vec![1.0; n];
        let mut b = vec![1.0; q];
        for _ in 0..200_000 {
            let a_new: Vec<f64> = (0..n)
                .map(|i| 1.0 / (0..q).map(|j| w[j] * k[i][j] * b[j]).sum::<f64>())
                .collect();
            let b_new: Vec<f64> = (0..q)
                .map(|j| 1.0 / (0..n).map(|i| p[i] * k[i][j] * a_new[i]).sum::<f64>())
                .collect();
            let delta = a_new
                .iter()
                .zip(&a)
                .chain(b_new.iter().zip(&b))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            a = a_new;
            b = b_new;
            if delta == 0.0 {
                break;
            }
        }
        let mut f: Vec<f64> = a.iter().map(|v| eps * v.ln()).collect();
        let mut g: Vec<f64> = b.iter().map(|v| eps * v.ln()).collect();
        let shift: f64 = g.iter().zip(w).map(|(x, y)| x * y).sum();
        g.iter_mut().for_each(|v| *v -= shift);
        f.iter_mut().for_each(|v| *v += shift);
        (f, g)
    }

    #[test]
    fn two_by_two_matches_scaling_oracle() {
        let p = m1(&[0.0, 1.0], &[0.5, 0.5]);
        let u = p.clone();
        let cfg = tight(0.5);
        let pot = solve(&p, &u, &cfg, None).unwrap();
        let c = vec![vec![0.0, 0.5], vec![0.5, 0.0]];
        let (f, g) = scaling_oracle(&[0.5, 0.5], &[0.5, 0.5], &c, 0.5);
        for (a, b) in pot.f.iter().zip(&f).chain(pot.g.iter().zip(&g)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        // primal objective on the oracle plan
        let mut primal = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let pi = 0.25 * ((f[i] + g[j] - c[i][j]) / 0.5).exp();
                primal += pi * c[i][j] + 0.5 * pi * (pi / 0.25).ln();
            }
        }
        let dual = divergence_value(&p, &u, &pot).unwrap();
        assert!((dual - primal).abs() < 1e-8, "{dual} vs {primal}");
    }

    #[test]
    fn residual_examples() {
        let p = m1(&[0.0, 0.0], &[0.5, 0.5]);
        let pot = DualPotentials {
            f: vec![0.0, 0.0],
            g: vec![0.0, 0.0],
            epsilon: 1.0,
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
        assert_eq!(marginal_residual(&p, &p, &pot).unwrap(), (0.0, 0.0));

        let one = m1(&[0.0], &[1.0]);
        let eps = 0.3;
        let pot = DualPotentials {
            f: vec![eps * 2f64.ln()],
            g: vec![0.0],
            epsilon: eps,
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
        let (rp, _) = marginal_residual(&one, &one, &pot).unwrap();
        assert!((rp - 1.0).abs() < 1e-14);
    }

    #[test]
    fn converged_solves_meet_tolerance() {
        let p = m1(&[0.1, 0.4, 0.9, -0.3], &[0.1, 0.2, 0.3, 0.4]);
        let u = m1(&[0.0, 0.5, 1.0], &[0.3, 0.3, 0.4]);
        for eps in [0.05, 0.2, 1.0] {
            let cfg = SinkhornConfig::with_epsilon(eps);
            let pot = solve(&p, &u, &cfg, None).unwrap();
            assert!(pot.converged);
            let (rp, ru) = marginal_residual(&p, &u, &pot).unwrap();
            assert!(rp.max(ru) <= cfg.tol, "{rp} {ru}");
            let centered: f64 = pot.g.iter().zip(u.weights()).map(|(a, b)| a * b).sum();
            assert!(centered.abs() < 1e-12);
        }
    }

    #[test]
    fn plan_examples() {
        let one = m1(&[0.3], &[1.0]);
        let two = m1(&[1.0], &[1.0]);
        let pot = solve(&one, &two, &SinkhornConfig::default(), None).unwrap();
        let pi = plan(&one, &two, &pot).unwrap();
        assert!((pi.values[0] - 1.0).abs() < 1e-12);

        let p = m1(&[0.0, 0.5, 1.0], &[0.2, 0.3, 0.5]);
        let cfg = SinkhornConfig::with_epsilon(1e3);
        let pot = solve(&p, &p, &cfg, None).unwrap();
        let pi = plan(&p, &p, &pot).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let prod = p.weights()[i] * p.weights()[j];
                assert!((pi.values[i * 3 + j] - prod).abs() < 1e-3);
            }
        }

        let u = m1(&[0.2, 0.8], &[0.6, 0.4]);
        let cfg = SinkhornConfig::with_epsilon(0.05);
        let pot = solve(&p, &u, &cfg, None).unwrap();
        let pi = plan(&p, &u, &pot).unwrap();
        for (s, w) in pi.row_sums().iter().zip(p.weights()) {
            assert!((s - w).abs() <= 10.0 * cfg.tol);
        }
        for (s, w) in pi.col_sums().iter().zip(u.weights()) {
            assert!((s - w).abs() <= 10.0 * cfg.tol);
        }

        let rough = SinkhornConfig { max_iter: 1, ..cfg };
        let pot = solve(&p, &u, &rough, None).unwrap();
        assert!(!pot.converged);
        assert!(plan(&p, &u, &pot).is_err());
    }

    #[test]
    fn divergence_examples() {
        let x = m1(&[0.7], &[1.0]);
        let pot = solve(&x, &x, &SinkhornConfig::default(), None).unwrap();
        assert!(divergence_value(&x, &x, &pot).unwrap().abs() < 1e-14);

        let y = m1(&[-0.5], &[1.0]);
        let pot = solve(&x, &y, &SinkhornConfig::default(), None).unwrap();
        assert!((divergence_value(&x, &y, &pot).unwrap() - 0.72).abs() < 1e-12);
    }

    #[test]
    fn extension_examples() {
        let p = m1(&[-1.0, 1.0], &[0.5, 0.5]);
        let u = m1(&[0.0], &[1.0]);
        let pot = solve(&p, &u, &tight(1.0), None).unwrap();
        let ext = extend_potential(&p, &pot.f, &[0.0, 1.0], 1.0).unwrap();
        assert!(ext[0].abs() < 1e-14);
        assert!((ext[1] - (0.5 - 1f64.cosh().ln())).abs() < 1e-14);

        let p1 = m1(&[0.4], &[1.0]);
        let f = [0.3];
        let ext = extend_potential(&p1, &f, &[1.4, -0.6], 0.1).unwrap();
        assert!((ext[0] - (0.5 - 0.3)).abs() < 1e-14);
        assert!((ext[1] - (0.5 - 0.3)).abs() < 1e-14);

        let p = m1(&[0.1, 0.4, 0.9], &[0.2, 0.3, 0.5]);
        let u = m1(&[0.0, 0.5, 1.0], &[0.3, 0.3, 0.4]);
        let cfg = SinkhornConfig::with_epsilon(0.05);
        let pot = solve(&p, &u, &cfg, None).unwrap();
        let ext = extend_potential(&p, &pot.f, u.points(), cfg.epsilon).unwrap();
        for (a, b) in ext.iter().zip(&pot.g) {
            assert!((a - b).abs() <= 10.0 * cfg.tol);
        }
    }

    #[test]
    fn rejects_mismatched_warm_start() {
        let p = m1(&[0.0, 1.0], &[0.5, 0.5]);
        let bad = DualPotentials {
            f: vec![0.0],
            g: vec![0.0, 0.0],
            epsilon: 0.1,
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
        assert!(solve(&p, &p, &SinkhornConfig::default(), Some(&bad)).is_err());
        assert!(solve(&p, &p, &SinkhornConfig::with_epsilon(0.0), None).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences_on_cost() {
        let p = [0.2, 0.5, 0.3];
        let w = [0.6, 0.4];
        let x = [0.0, 0.4, 1.1];
        let y = [0.2, 0.9];
        let cfg = tight(0.3);
        let cost = cost_matrix(&x, &y, 1).unwrap();
        let rec = solve_recorded(&p, &w, &cost, &cfg, None).unwrap();
        assert!(!rec.tape().truncated());
        let g_bar = [0.7, -1.3];
        let grad = rec.vjp(&g_bar);
        let objective = |c: &CostMatrix, w: &[f64]| -> f64 {
            let pot = solve_with_cost(&p, w, c, &cfg, None).unwrap();
            pot.g.iter().zip(&g_bar).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for k in 0..cost.values.len() {
            let mut cp = cost.clone();
            let mut cm = cost.clone();
            cp.values[k] += h;
            cm.values[k] -= h;
            let fd = (objective(&cp, &w) - objective(&cm, &w)) / (2.0 * h);
            assert!(
                (fd - grad.cost[k]).abs() < 1e-6,
                "cost {k}: {fd} vs {}",
                grad.cost[k]
            );
        }
        // weights move along the simplex: w + h(e0 − e1)
        let mut wp = w;
        let mut wm = w;
        wp[0] += h;
        wp[1] -= h;
        wm[0] -= h;
        wm[1] += h;
        let fd = (objective(&cost, &wp) - objective(&cost, &wm)) / (2.0 * h);
        let an = grad.weights[0] - grad.weights[1];
        assert!((fd - an).abs() < 1e-6, "w: {fd} vs {an}");
    }
}
