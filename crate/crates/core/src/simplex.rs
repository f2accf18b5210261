//! Bounded Nelder–Mead simplex search.
//!
//! Candidates outside the bounds, or whose objective fails or is not finite,
//! receive a fixed penalty instead of being repaired.

use serde::{Deserialize, Serialize};

use crate::exec::{self, Workers};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimplexOptions {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Initial simplex edge as a fraction of each bound range.
    pub initial_spread: f64,
    /// Stop when the simplex diameter, measured in units of the bound ranges, drops below this.
    pub tolerance: f64,
    pub max_evaluations: usize,
    pub penalty: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            initial_spread: 0.05,
            tolerance: 1e-4,
            max_evaluations: 2000,
            penalty: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub evaluation: usize,
    pub value: f64,
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub evaluation: usize,
    pub params: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimplexResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    pub history: Vec<HistoryEntry>,
    pub failures: Vec<Failure>,
    pub converged: bool,
    pub iterations: usize,
}

impl SimplexResult {
    pub fn evaluations(&self) -> usize {
        self.history.len()
    }
}

struct Search<'a, F> {
    f: &'a F,
    lower: &'a [f64],
    upper: &'a [f64],
    opts: &'a SimplexOptions,
    workers: Workers,
    history: Vec<HistoryEntry>,
    failures: Vec<Failure>,
    best: f64,
}

impl<F> Search<'_, F>
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    fn in_bounds(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lower.iter().zip(self.upper)).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Evaluates a batch (possibly in parallel) and records it in input order.
    fn eval_batch(&mut self, points: &[Vec<f64>]) -> Vec<f64> {
        let f = self.f;
        let lower = self.lower;
        let upper = self.upper;
        let penalty = self.opts.penalty;
        let results: Vec<Result<f64, String>> = exec::map(self.workers, points, |x| {
            let inside = x.iter().zip(lower.iter().zip(upper)).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi);
            if !inside {
                return Err("outside parameter bounds".to_string());
            }
            match f(x) {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(v) => Err(format!("objective returned {v}")),
                Err(e) => Err(e),
            }
        });
        let mut values = Vec::with_capacity(points.len());
        for (x, r) in points.iter().zip(results) {
            let evaluation = self.history.len();
            let value = match r {
                Ok(v) => v,
                Err(reason) => {
                    log::debug!("simplex evaluation {evaluation} penalized: {reason}");
                    self.failures.push(Failure { evaluation, params: x.clone(), reason });
                    penalty
                }
            };
            self.best = self.best.min(value);
            self.history.push(HistoryEntry { evaluation, value, best: self.best });
            values.push(value);
        }
        values
    }

    fn eval(&mut self, x: &[f64]) -> f64 {
        self.eval_batch(&[x.to_vec()])[0]
    }

    fn budget_left(&self) -> bool {
        self.history.len() < self.opts.max_evaluations
    }
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
///
/// `f` returning `Err` marks an invalid candidate; it is penalized and logged.
pub fn minimize<F>(
    f: &F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &SimplexOptions,
    workers: Workers,
) -> SimplexResult
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    let n = x0.len();
    assert!(lower.len() == n && upper.len() == n, "bounds must match the parameter count");
    let mut s = Search { f, lower, upper, opts, workers, history: Vec::new(), failures: Vec::new(), best: f64::INFINITY };
    let range: Vec<f64> = (0..n).map(|k| (upper[k] - lower[k]).max(f64::MIN_POSITIVE)).collect();

    if n == 0 {
        let v = s.eval(x0);
        return SimplexResult {
            best: Vec::new(),
            best_value: v,
            history: s.history,
            failures: s.failures,
            converged: true,
            iterations: 0,
        };
    }

    let mut pts = vec![x0.to_vec()];
    for k in 0..n {
        let mut p = x0.to_vec();
        let h = opts.initial_spread * range[k];
        p[k] = if p[k] + h <= upper[k] { p[k] + h } else { p[k] - h };
        pts.push(p);
    }
    let vals = s.eval_batch(&pts);
    let mut simplex: Vec<(Vec<f64>, f64)> = pts.into_iter().zip(vals).collect();

    let diameter = |sx: &[(Vec<f64>, f64)]| {
        sx.iter()
            .skip(1)
            .flat_map(|(p, _)| p.iter().zip(&sx[0].0).zip(&range).map(|((a, b), r)| (a - b).abs() / r))
            .fold(0.0, f64::max)
    };

    let mut converged = false;
    let mut iterations = 0;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if diameter(&simplex) < opts.tolerance {
            converged = true;
            break;
        }
        if !s.budget_left() {
            break;
        }
        iterations += 1;
        let worst = simplex[n].clone();
        let mut centroid = vec![0.0; n];
        for (p, _) in &simplex[..n] {
            for k in 0..n {
                centroid[k] += p[k] / n as f64;
            }
        }
        let xr = lerp(&centroid, &worst.0, -opts.reflection);
        let fr = s.eval(&xr);
        let f_best = simplex[0].1;
        let f_second = simplex[n - 1].1;
        if fr < f_best {
            let xe = lerp(&centroid, &worst.0, -opts.reflection * opts.expansion);
            if s.budget_left() {
                let fe = s.eval(&xe);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else {
                simplex[n] = (xr, fr);
            }
            continue;
        }
        if fr < f_second {
            simplex[n] = (xr, fr);
            continue;
        }
        if !s.budget_left() {
            break;
        }
        let accepted = if fr < worst.1 {
            let xc = lerp(&centroid, &xr, opts.contraction);
            let fc = s.eval(&xc);
            if fc <= fr {
                simplex[n] = (xc, fc);
                true
            } else {
                false
            }
        } else {
            let xc = lerp(&centroid, &worst.0, opts.contraction);
            let fc = s.eval(&xc);
            if fc < worst.1 {
                simplex[n] = (xc, fc);
                true
            } else {
                false
            }
        };
        if !accepted {
            let best = simplex[0].0.clone();
            let shrunk: Vec<Vec<f64>> = simplex[1..].iter().map(|(p, _)| lerp(&best, p, opts.shrink)).collect();
            let vals = s.eval_batch(&shrunk);
            for (slot, (p, v)) in simplex[1..].iter_mut().zip(shrunk.into_iter().zip(vals)) {
                *slot = (p, v);
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (best, best_value) = simplex.swap_remove(0);
    debug_assert!(s.in_bounds(&best) || best_value == opts.penalty);
    SimplexResult { best, best_value, history: s.history, failures: s.failures, converged, iterations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<f64, String> {
        Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
    }

    #[test]
    fn finds_rosenbrock_minimum() {
        let opts = SimplexOptions { tolerance: 1e-8, max_evaluations: 5000, ..Default::default() };
        let r = minimize(&rosenbrock, &[-1.2, 1.0], &[-2.0, -2.0], &[2.0, 2.0], &opts, Workers::SEQUENTIAL);
        assert!(r.converged);
        assert!((r.best[0] - 1.0).abs() < 1e-4 && (r.best[1] - 1.0).abs() < 1e-4, "{:?}", r.best);
        assert!(r.history.windows(2).all(|w| w[1].best <= w[0].best));
    }

    #[test]
    fn bounds_and_failures_are_penalized() {
        // Unconstrained minimum at x = 3 lies outside the box.
        let f = |x: &[f64]| if x[0] < 0.2 { Err("invalid".to_string()) } else { Ok((x[0] - 3.0).powi(2)) };
        let r = minimize(&f, &[0.5], &[0.0], &[1.0], &SimplexOptions::default(), Workers::SEQUENTIAL);
        assert!(r.best[0] <= 1.0 && r.best[0] > 0.99, "{:?}", r.best);
        assert!(r.failures.iter().any(|f| f.reason.contains("bounds")));
    }

    #[test]
    fn zero_dimensional_problem_evaluates_once() {
        let r = minimize(&|_: &[f64]| Ok(4.0), &[], &[], &[], &SimplexOptions::default(), Workers::SEQUENTIAL);
        assert_eq!(r.evaluations(), 1);
        assert_eq!(r.best_value, 4.0);
    }

    #[test]
    fn evaluation_budget_is_respected() {
        let opts = SimplexOptions { max_evaluations: 50, tolerance: 0.0, ..Default::default() };
        let r = minimize(&rosenbrock, &[-1.2, 1.0], &[-2.0, -2.0], &[2.0, 2.0], &opts, Workers::SEQUENTIAL);
        assert!(!r.converged);
        assert!(r.evaluations() <= 50 + 2);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let opts = SimplexOptions::default();
        let a = minimize(&rosenbrock, &[0.0, 0.0], &[-2.0, -2.0], &[2.0, 2.0], &opts, Workers::SEQUENTIAL);
        let b = minimize(&rosenbrock, &[0.0, 0.0], &[-2.0, -2.0], &[2.0, 2.0], &opts, Workers::default());
        assert_eq!(a, b);
    }
}
