//! Dense BFGS with a strong-Wolfe line search.
//!
//! The objective returns `None` for infeasible points (for example a pose that
//! puts a keypoint behind the camera); the line search treats those as `+inf`
//! and backtracks instead of failing.

use nalgebra::{SMatrix, SVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsConfig {
    /// Convergence threshold on the infinity norm of the gradient.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self { grad_tol: 1e-8, max_iter: 200, c1: 1e-4, c2: 0.9, max_line_search: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Gradient infinity norm fell below `grad_tol`.
    GradientTolerance,
    MaxIterations,
    /// The line search could not make progress even along steepest descent.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct BfgsResult<const N: usize> {
    pub x: SVector<f64, N>,
    pub f: f64,
    pub gradient: SVector<f64, N>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

impl<const N: usize> BfgsResult<N> {
    pub fn converged(&self) -> bool {
        self.termination == Termination::GradientTolerance
    }
}

#[derive(Clone, Copy)]
struct Probe<const N: usize> {
    alpha: f64,
    f: f64,
    g: SVector<f64, N>,
    slope: f64,
}

struct LineSearch<'a, F, const N: usize> {
    fun: &'a mut F,
    x: SVector<f64, N>,
    dir: SVector<f64, N>,
    f0: f64,
    slope0: f64,
    cfg: &'a BfgsConfig,
    evaluations: usize,
}

impl<F, const N: usize> LineSearch<'_, F, N>
where
    F: FnMut(&SVector<f64, N>) -> Option<(f64, SVector<f64, N>)>,
{
    fn eval(&mut self, alpha: f64) -> Probe<N> {
        self.evaluations += 1;
        let x = self.x + self.dir * alpha;
        match (self.fun)(&x) {
            Some((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
                Probe { alpha, f, slope: g.dot(&self.dir), g }
            }
            _ => Probe { alpha, f: f64::INFINITY, g: SVector::zeros(), slope: f64::NAN },
        }
    }

    fn armijo_ok(&self, p: &Probe<N>) -> bool {
        p.f <= self.f0 + self.cfg.c1 * p.alpha * self.slope0
    }

    fn curvature_ok(&self, p: &Probe<N>) -> bool {
        p.slope.abs() <= -self.cfg.c2 * self.slope0
    }

    /// Returns a step satisfying the strong Wolfe conditions, or the best
    /// sufficient-decrease step seen if the budget runs out.
    fn search(&mut self, alpha_init: f64) -> Option<Probe<N>> {
        let mut prev = Probe { alpha: 0.0, f: self.f0, g: SVector::zeros(), slope: self.slope0 };
        let mut alpha = alpha_init;
        for i in 0..self.cfg.max_line_search {
            let cur = self.eval(alpha);
            if !self.armijo_ok(&cur) || (i > 0 && cur.f >= prev.f) {
                return self.zoom(prev, cur);
            }
            if self.curvature_ok(&cur) {
                return Some(cur);
            }
            if cur.slope >= 0.0 {
                return self.zoom(cur, prev);
            }
            alpha = cur.alpha * 2.0;
            prev = cur;
        }
        (prev.alpha > 0.0).then_some(prev)
    }

    fn zoom(&mut self, mut lo: Probe<N>, mut hi: Probe<N>) -> Option<Probe<N>> {
        for _ in 0..self.cfg.max_line_search {
            let width = hi.alpha - lo.alpha;
            if width.abs() <= f64::EPSILON * lo.alpha.abs().max(1e-300) {
                break;
            }
            let alpha = interpolate(&lo, &hi);
            let cur = self.eval(alpha);
            if !self.armijo_ok(&cur) || cur.f >= lo.f {
                hi = cur;
            } else {
                if self.curvature_ok(&cur) {
                    return Some(cur);
                }
                if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        (lo.alpha > 0.0 && lo.f < self.f0).then_some(lo)
    }
}

/// Minimizer of the quadratic through `lo` (value + slope) and `hi` (value),
/// kept at least 10% away from either end; bisection when `hi` is infeasible.
fn interpolate<const N: usize>(lo: &Probe<N>, hi: &Probe<N>) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let d = b - a;
    let fallback = a + 0.5 * d;
    if !hi.f.is_finite() || !lo.slope.is_finite() {
        return fallback;
    }
    let denom = 2.0 * (hi.f - lo.f - lo.slope * d);
    if denom <= 0.0 {
        return fallback;
    }
    let t = -lo.slope * d * d / denom;
    let lo_bound = 0.1 * d.abs();
    let t = t.abs().clamp(lo_bound, 0.9 * d.abs());
    a + t * d.signum()
}

/// Minimizes `fun` starting at `x0`. `fun` returns the value and gradient, or
/// `None` where the objective is undefined. Returns `None` if the start point
/// itself is infeasible or non-finite.
pub fn minimize<F, const N: usize>(mut fun: F, x0: SVector<f64, N>, cfg: &BfgsConfig) -> Option<BfgsResult<N>>
where
    F: FnMut(&SVector<f64, N>) -> Option<(f64, SVector<f64, N>)>,
{
    let (mut f, mut g) = fun(&x0)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut x = x0;
    let mut h = SMatrix::<f64, N, N>::identity();
    let mut fresh_h = true;
    let mut evaluations = 1;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < cfg.max_iter {
        if g.amax() < cfg.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut dir = -(h * g);
        let mut slope = dir.dot(&g);
        if !(slope < 0.0) {
            h = SMatrix::identity();
            fresh_h = true;
            dir = -g;
            slope = dir.dot(&g);
        }
        // With an unscaled identity the first trial step would move by |g|,
        // which is meaningless when g carries pixel^2 units.
        let alpha_init = if fresh_h { (1.0 / dir.amax()).min(1.0) } else { 1.0 };
        let mut ls = LineSearch { fun: &mut fun, x, dir, f0: f, slope0: slope, cfg, evaluations: 0 };
        let step = ls.search(alpha_init);
        evaluations += ls.evaluations;
        let Some(step) = step else {
            if fresh_h {
                termination = Termination::Stalled;
                break;
            }
            h = SMatrix::identity();
            fresh_h = true;
            continue;
        };

        let s = dir * step.alpha;
        let y = step.g - g;
        x += s;
        f = step.f;
        g = step.g;
        iterations += 1;

        let ys = y.dot(&s);
        if ys > 1e-300 {
            if fresh_h {
                h = SMatrix::identity() * (ys / y.dot(&y));
                fresh_h = false;
            }
            let rho = 1.0 / ys;
            let i = SMatrix::<f64, N, N>::identity();
            let left = i - s * y.transpose() * rho;
            let right = i - y * s.transpose() * rho;
            h = left * h * right + s * s.transpose() * rho;
        }
    }
    if termination == Termination::MaxIterations && g.amax() < cfg.grad_tol {
        termination = Termination::GradientTolerance;
    }

    Some(BfgsResult { x, f, gradient: g, iterations, evaluations, termination })
}
