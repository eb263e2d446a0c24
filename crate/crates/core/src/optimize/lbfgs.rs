//! L-BFGS with a strong-Wolfe zoom line search (Nocedal & Wright,
//! Algorithms 3.5 and 3.6).

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ZOOM_ITERS: usize = 25;
const MAX_BRACKET_ITERS: usize = 25;
const MAX_STEP: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    /// Number of curvature pairs kept.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the L∞ norm of the gradient falls below this.
    pub grad_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 100,
            grad_tol: 1e-6,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::validation("L-BFGS memory must be at least 1"));
        }
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::validation(format!(
                "Wolfe constants need 0 < c1 < c2 < 1, got c1={} c2={}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::validation("grad_tol must be nonnegative"));
        }
        Ok(())
    }
}

/// Something L-BFGS can minimize.
pub trait Objective {
    /// Value and gradient at `x`.
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Called once per accepted iterate, after the evaluation at `x`.
    fn accept(&mut self, _x: &[f64]) {}
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// Gradient norm below `grad_tol`.
    Converged,
    MaxIters,
    /// The line search could not satisfy the Wolfe conditions; the best
    /// point seen is returned.
    LineSearchFailed,
}

/// One accepted iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub nll: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub wallclock_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
    /// Record 0 is the starting point.
    pub trace: Vec<IterRecord>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `−H·g`.
fn direction(g: &[f64], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (p, a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[derive(Clone)]
struct Trial {
    alpha: f64,
    x: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
    slope: f64,
}

enum Search {
    Wolfe(Trial),
    /// Best point with sufficient decrease, if any.
    Failed(Option<Trial>),
}

struct LineSearch<'a, O: Objective> {
    obj: &'a mut O,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    evaluations: usize,
    best: Option<Trial>,
}

impl<O: Objective> LineSearch<'_, O> {
    fn eval(&mut self, alpha: f64) -> Result<Trial> {
        self.evaluations += 1;
        let x = axpy(self.x, alpha, self.d);
        let (value, grad) = match self.obj.evaluate(&x) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => (v, g),
            // Trial points that break the model are treated as infinitely bad.
            Ok(_) => (f64::INFINITY, vec![f64::NAN; x.len()]),
            Err(e) if e.is_numeric() => (f64::INFINITY, vec![f64::NAN; x.len()]),
            Err(e) => return Err(e),
        };
        let slope = dot(&grad, self.d);
        let t = Trial {
            alpha,
            x,
            value,
            grad,
            slope,
        };
        if t.value.is_finite()
            && t.value <= self.f0 + self.c1 * alpha * self.slope0
            && self.best.as_ref().is_none_or(|b| t.value < b.value)
        {
            self.best = Some(t.clone());
        }
        Ok(t)
    }

    fn armijo_fails(&self, t: &Trial) -> bool {
        !(t.value <= self.f0 + self.c1 * t.alpha * self.slope0)
    }

    fn curvature_holds(&self, t: &Trial) -> bool {
        t.slope.abs() <= -self.c2 * self.slope0
    }

    fn run(mut self, alpha0: f64) -> Result<(Search, usize)> {
        let mut prev = Trial {
            alpha: 0.0,
            x: self.x.to_vec(),
            value: self.f0,
            grad: Vec::new(),
            slope: self.slope0,
        };
        let mut alpha = alpha0;
        for i in 0..MAX_BRACKET_ITERS {
            let t = self.eval(alpha)?;
            if self.armijo_fails(&t) || (i > 0 && t.value >= prev.value) {
                return self.zoom(prev, t);
            }
            if self.curvature_holds(&t) {
                return Ok((Search::Wolfe(t), self.evaluations));
            }
            if t.slope >= 0.0 {
                return self.zoom(t, prev);
            }
            alpha = (2.0 * alpha).min(MAX_STEP);
            prev = t;
        }
        Ok((Search::Failed(self.best), self.evaluations))
    }

    fn zoom(mut self, mut lo: Trial, mut hi: Trial) -> Result<(Search, usize)> {
        for _ in 0..MAX_ZOOM_ITERS {
            let alpha = interpolate(&lo, &hi);
            let t = self.eval(alpha)?;
            if self.armijo_fails(&t) || t.value >= lo.value {
                hi = t;
            } else {
                if self.curvature_holds(&t) {
                    return Ok((Search::Wolfe(t), self.evaluations));
                }
                if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
            if (hi.alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1.0) {
                break;
            }
        }
        Ok((Search::Failed(self.best), self.evaluations))
    }
}

/// Cubic interpolation between the bracket ends, safeguarded into the
/// middle 80% of the interval; bisection when the cubic is unusable.
fn interpolate(lo: &Trial, hi: &Trial) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    let (left, right) = (a.min(b), a.max(b));
    let margin = 0.1 * (right - left);
    if !hi.value.is_finite() || !hi.slope.is_finite() {
        return mid;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = hi.slope - lo.slope + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let c = b - (b - a) * (hi.slope + d2 - d1) / denom;
    if c.is_finite() && c >= left + margin && c <= right - margin {
        c
    } else {
        mid
    }
}

/// Minimizes `obj` from `x0`. `on_iter` sees every accepted iterate.
pub fn lbfgs_minimize<O: Objective>(
    obj: &mut O,
    x0: &[f64],
    cfg: &OptimizeConfig,
    mut on_iter: impl FnMut(&IterRecord, &[f64]),
) -> Result<Minimum> {
    cfg.validate()?;
    let start = Instant::now();
    let elapsed = || start.elapsed().as_secs_f64() * 1e3;
    let mut x = x0.to_vec();
    let (mut f, mut g) = obj.evaluate(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "objective is not finite at the starting point (value {f})"
        )));
    }
    obj.accept(&x);
    let mut evaluations = 1;
    let mut trace = vec![IterRecord {
        iter: 0,
        nll: f,
        grad_norm: inf_norm(&g),
        step: 0.0,
        wallclock_ms: elapsed(),
    }];
    on_iter(&trace[0], &x);

    let mut history: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut status = Status::MaxIters;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        if inf_norm(&g) <= cfg.grad_tol {
            status = Status::Converged;
            break;
        }
        let mut d = direction(&g, &history);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // Curvature history gave an ascent direction; restart.
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let alpha0 = if history.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let search = LineSearch {
            obj,
            x: &x,
            d: &d,
            f0: f,
            slope0: slope,
            c1: cfg.wolfe_c1,
            c2: cfg.wolfe_c2,
            evaluations: 0,
            best: None,
        };
        let (outcome, used) = search.run(alpha0)?;
        evaluations += used;
        let (t, failed) = match outcome {
            Search::Wolfe(t) => (t, false),
            Search::Failed(Some(t)) => (t, true),
            Search::Failed(None) => {
                status = Status::LineSearchFailed;
                break;
            }
        };
        debug_assert!(t.value <= f + cfg.wolfe_c1 * t.alpha * slope);
        let s: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = t.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        x = t.x;
        f = t.value;
        g = t.grad;
        iterations += 1;
        obj.accept(&x);
        let rec = IterRecord {
            iter: iterations,
            nll: f,
            grad_norm: inf_norm(&g),
            step: t.alpha,
            wallclock_ms: elapsed(),
        };
        on_iter(&rec, &x);
        trace.push(rec);
        if failed {
            status = Status::LineSearchFailed;
            break;
        }
    }
    if status == Status::MaxIters && inf_norm(&g) <= cfg.grad_tol {
        status = Status::Converged;
    }
    Ok(Minimum {
        x,
        value: f,
        grad: g,
        iterations,
        evaluations,
        status,
        trace,
    })
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((0.5 * dot(x, x), x.to_vec()))
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((v, g))
    }

    #[test]
    fn quadratic_converges_quickly() {
        let m = lbfgs_minimize(&mut quadratic, &[1.0, 1.0], &OptimizeConfig::default(), |_, _| {}).unwrap();
        assert_eq!(m.status, Status::Converged);
        assert!(m.iterations <= 3);
        assert!(inf_norm(&m.grad) <= 1e-6);
    }

    #[test]
    fn rosenbrock_reaches_optimum() {
        let cfg = OptimizeConfig {
            max_iters: 200,
            grad_tol: 1e-10,
            ..Default::default()
        };
        let m = lbfgs_minimize(&mut rosenbrock, &[-1.2, 1.0], &cfg, |_, _| {}).unwrap();
        assert!(m.iterations <= 200);
        assert!(
            (m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5,
            "{:?}",
            m.x
        );
        for w in m.trace.windows(2) {
            assert!(w[1].nll <= w[0].nll);
        }
    }

    #[test]
    fn starting_at_optimum_takes_no_steps() {
        let m = lbfgs_minimize(&mut quadratic, &[0.0, 0.0], &OptimizeConfig::default(), |_, _| {}).unwrap();
        assert_eq!(m.iterations, 0);
        assert_eq!(m.status, Status::Converged);
        assert_eq!(m.trace.len(), 1);
    }

    #[test]
    fn nan_start_is_an_error() {
        let mut f = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(lbfgs_minimize(&mut f, &[0.0], &OptimizeConfig::default(), |_, _| {}).is_err());
    }

    #[test]
    fn trial_points_outside_the_domain_are_backtracked() {
        // log barrier: undefined for x ≤ 0
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            if x[0] <= 0.0 {
                return Err(Error::Numeric("outside domain".into()));
            }
            Ok((x[0] - 2.0 * x[0].ln(), vec![1.0 - 2.0 / x[0]]))
        };
        let m = lbfgs_minimize(&mut f, &[0.1], &OptimizeConfig::default(), |_, _| {}).unwrap();
        assert!((m.x[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_wolfe_constants() {
        let cfg = OptimizeConfig {
            wolfe_c1: 0.9,
            wolfe_c2: 0.1,
            ..Default::default()
        };
        assert!(lbfgs_minimize(&mut quadratic, &[1.0], &cfg, |_, _| {}).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_diff_grad(|x| dot(x, x), &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        assert_eq!(finite_diff_grad(|_| 3.0, &[1.0, 2.0], 1e-5), vec![0.0, 0.0]);
        let g = finite_diff_grad(|x| x[0].sin(), &[0.0], 1e-5);
        assert!((g[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn accept_hook_sees_each_iterate() {
        struct Counting {
            accepted: Vec<Vec<f64>>,
        }
        impl Objective for Counting {
            fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
                rosenbrock(x)
            }
            fn accept(&mut self, x: &[f64]) {
                self.accepted.push(x.to_vec());
            }
        }
        let mut obj = Counting { accepted: vec![] };
        let cfg = OptimizeConfig {
            max_iters: 5,
            ..Default::default()
        };
        let m = lbfgs_minimize(&mut obj, &[-1.2, 1.0], &cfg, |_, _| {}).unwrap();
        assert_eq!(obj.accepted.len(), m.iterations + 1);
        assert_eq!(obj.accepted.last().unwrap(), &m.x);
    }
}
