//! Gradient descent with a fixed learning rate, and a bounded L-BFGS.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A scalar objective over a flat parameter vector.
pub trait Objective {
    fn dimension(&self) -> usize;
    fn value(&mut self, x: &[f64]) -> Result<f64>;
    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Closure-backed [`Objective`].
pub struct FnObjective<F, G> {
    dim: usize,
    f: F,
    g: G,
}

impl<F, G> FnObjective<F, G>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    pub fn new(dim: usize, f: F, g: G) -> Self {
        FnObjective { dim, f, g }
    }
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    fn dimension(&self) -> usize {
        self.dim
    }

    fn value(&mut self, x: &[f64]) -> Result<f64> {
        Ok((self.f)(x))
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        Ok((self.g)(x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub final_params: Vec<f64>,
    pub final_value: f64,
    pub initial_value: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Objective value after each accepted iteration, starting with the
    /// initial value.
    pub trace: Vec<f64>,
}

fn finite_value(v: f64, iteration: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteObjective {
            iteration,
            what: format!("value {v}"),
        })
    }
}

fn finite_gradient(g: Vec<f64>, dim: usize, iteration: usize) -> Result<Vec<f64>> {
    if g.len() != dim {
        return Err(Error::ParameterLength {
            expected: dim,
            got: g.len(),
        });
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective {
            iteration,
            what: format!("gradient component {i} = {}", g[i]),
        });
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientDescentOptions {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step changes the value by less than this.
    pub tol: f64,
    pub max_halvings: usize,
}

impl GradientDescentOptions {
    pub fn new(learning_rate: f64, max_iterations: usize, tol: f64) -> Self {
        GradientDescentOptions {
            learning_rate,
            max_iterations,
            tol,
            max_halvings: 5,
        }
    }
}

/// `p ← p − lr·g`. A step that raises the value is halved (for that
/// iteration only) up to `max_halvings` times; if it still raises the value
/// the run stops at the current point.
pub fn gradient_descent(
    obj: &mut dyn Objective,
    init: &[f64],
    learning_rate: f64,
    max_iterations: usize,
    tol: f64,
) -> Result<OptimizerReport> {
    gradient_descent_projected(
        obj,
        init,
        &GradientDescentOptions::new(learning_rate, max_iterations, tol),
        &mut |_| {},
    )
}

/// As [`gradient_descent`], with `project` applied to every trial point.
pub fn gradient_descent_projected(
    obj: &mut dyn Objective,
    init: &[f64],
    opts: &GradientDescentOptions,
    project: &mut dyn FnMut(&mut [f64]),
) -> Result<OptimizerReport> {
    if !(opts.learning_rate > 0.0) || !opts.learning_rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            opts.learning_rate
        )));
    }
    let dim = obj.dimension();
    if init.len() != dim {
        return Err(Error::ParameterLength {
            expected: dim,
            got: init.len(),
        });
    }
    let mut x = init.to_vec();
    let mut f = finite_value(obj.value(&x)?, 0)?;
    let initial_value = f;
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;
    let mut trial = vec![0.0; dim];
    while iterations < opts.max_iterations {
        iterations += 1;
        let g = finite_gradient(obj.gradient(&x)?, dim, iterations)?;
        let mut step = opts.learning_rate;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            for i in 0..dim {
                trial[i] = x[i] - step * g[i];
            }
            project(&mut trial);
            let ft = finite_value(obj.value(&trial)?, iterations)?;
            if ft <= f {
                accepted = Some(ft);
                break;
            }
            step *= 0.5;
        }
        let Some(ft) = accepted else {
            converged = true;
            break;
        };
        let change = f - ft;
        x.copy_from_slice(&trial);
        f = ft;
        trace.push(f);
        if change.abs() < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(OptimizerReport {
        final_params: x,
        final_value: f,
        initial_value,
        iterations_used: iterations,
        converged,
        trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsbOptions {
    pub max_iterations: usize,
    pub memory: usize,
    /// Projected-gradient infinity-norm threshold.
    pub tol: f64,
    /// Largest component of the very first step.
    pub initial_step: f64,
}

impl Default for LbfgsbOptions {
    fn default() -> Self {
        LbfgsbOptions {
            max_iterations: 100,
            memory: 10,
            tol: 1e-6,
            initial_step: 1.0,
        }
    }
}

/// Bounded L-BFGS with the options' defaults for memory and first step.
pub fn lbfgsb(
    obj: &mut dyn Objective,
    init: &[f64],
    lower: &[f64],
    upper: &[f64],
    max_iterations: usize,
    memory: usize,
    tol: f64,
) -> Result<OptimizerReport> {
    let opts = LbfgsbOptions {
        max_iterations,
        memory,
        tol,
        ..LbfgsbOptions::default()
    };
    lbfgsb_with(obj, init, lower, upper, &opts)
}

fn project_box(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// Components held at a bound by a gradient pushing outward.
fn active_set(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<bool> {
    (0..x.len())
        .map(|i| (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-loop recursion restricted to the free components.
fn two_loop(g: &[f64], free: &[bool], mem: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(free).map(|(x, &f)| if f { *x } else { 0.0 }).collect() };
    let mut q = mask(g);
    let mut alpha = vec![0.0; mem.len()];
    for (k, (s, y, rho)) in mem.iter().enumerate().rev() {
        let a = rho * dot(&mask(s), &q);
        alpha[k] = a;
        for (qi, (yi, &f)) in q.iter_mut().zip(y.iter().zip(free)) {
            if f {
                *qi -= a * yi;
            }
        }
    }
    if let Some((s, y, _)) = mem.last() {
        let (sm, ym) = (mask(s), mask(y));
        let yy = dot(&ym, &ym);
        let gamma = if yy > 0.0 { dot(&sm, &ym) / yy } else { 1.0 };
        let gamma = if gamma > 0.0 && gamma.is_finite() { gamma } else { 1.0 };
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (k, (s, y, rho)) in mem.iter().enumerate() {
        let b = rho * dot(&mask(y), &q);
        for (qi, (si, &f)) in q.iter_mut().zip(s.iter().zip(free)) {
            if f {
                *qi += (alpha[k] - b) * si;
            }
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// L-BFGS on the free variables with projection onto `[lower, upper]` and
/// Armijo backtracking (`c1 = 1e-4`, halving, at most 20 trials). Iterates
/// always lie inside the box.
pub fn lbfgsb_with(
    obj: &mut dyn Objective,
    init: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &LbfgsbOptions,
) -> Result<OptimizerReport> {
    let dim = obj.dimension();
    for (what, v) in [("init", init), ("lower", lower), ("upper", upper)] {
        if v.len() != dim {
            return Err(Error::InvalidArgument(format!("{what} has length {}, expected {dim}", v.len())));
        }
    }
    for i in 0..dim {
        if !(lower[i] <= init[i] && init[i] <= upper[i]) {
            return Err(Error::Infeasible {
                index: i,
                value: init[i],
                lower: lower[i],
                upper: upper[i],
            });
        }
    }
    const C1: f64 = 1e-4;
    let mut x = init.to_vec();
    let mut f = finite_value(obj.value(&x)?, 0)?;
    let initial_value = f;
    let mut g = finite_gradient(obj.gradient(&x)?, dim, 0)?;
    let mut trace = vec![f];
    let mut memory: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let active = active_set(&x, &g, lower, upper);
        let pg_norm = (0..dim)
            .filter(|&i| !active[i])
            .fold(0.0f64, |m, i| m.max(g[i].abs()));
        if pg_norm < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let free: Vec<bool> = active.iter().map(|a| !a).collect();
        let mut accepted = None;
        for attempt in 0..2 {
            let mut d = if memory.is_empty() {
                let scale = opts.initial_step / pg_norm;
                (0..dim).map(|i| if free[i] { -g[i] * scale } else { 0.0 }).collect()
            } else {
                two_loop(&g, &free, &memory)
            };
            if dot(&d, &g) >= 0.0 {
                let scale = opts.initial_step / pg_norm;
                d = (0..dim).map(|i| if free[i] { -g[i] * scale } else { 0.0 }).collect();
            }
            let mut step = 1.0;
            let mut trial = vec![0.0; dim];
            for _ in 0..20 {
                for i in 0..dim {
                    trial[i] = x[i] + step * d[i];
                }
                project_box(&mut trial, lower, upper);
                let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                let decrease = dot(&g, &moved);
                let ft = finite_value(obj.value(&trial)?, iterations)?;
                if decrease < 0.0 && ft <= f + C1 * decrease {
                    accepted = Some((trial.clone(), ft));
                    break;
                }
                step *= 0.5;
            }
            if accepted.is_some() || memory.is_empty() || attempt == 1 {
                break;
            }
            // Stale curvature pairs: retry from a steepest-descent step.
            memory.clear();
        }
        let Some((xn, fnew)) = accepted else {
            converged = true;
            break;
        };
        let gn = finite_gradient(obj.gradient(&xn)?, dim, iterations)?;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            if memory.len() == opts.memory.max(1) {
                memory.remove(0);
            }
            memory.push((s, y, 1.0 / sy));
        }
        let change = f - fnew;
        x = xn;
        g = gn;
        f = fnew;
        trace.push(f);
        if change <= 1e-15 * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(OptimizerReport {
        final_params: x,
        final_value: f,
        initial_value,
        iterations_used: iterations,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parabola() -> impl Objective {
        FnObjective::new(1, |p: &[f64]| (p[0] - 3.0).powi(2), |p: &[f64]| vec![2.0 * (p[0] - 3.0)])
    }

    fn rosenbrock() -> impl Objective {
        FnObjective::new(
            2,
            |p: &[f64]| (1.0 - p[0]).powi(2) + 100.0 * (p[1] - p[0] * p[0]).powi(2),
            |p: &[f64]| {
                vec![
                    -2.0 * (1.0 - p[0]) - 400.0 * p[0] * (p[1] - p[0] * p[0]),
                    200.0 * (p[1] - p[0] * p[0]),
                ]
            },
        )
    }

    /// `0.5 (x−a)ᵀ diag(1, 10) (x−a)`: condition number 10.
    fn ill_conditioned() -> impl Objective {
        FnObjective::new(
            2,
            |p: &[f64]| 0.5 * ((p[0] - 1.0).powi(2) + 10.0 * (p[1] + 2.0).powi(2)),
            |p: &[f64]| vec![p[0] - 1.0, 10.0 * (p[1] + 2.0)],
        )
    }

    #[test]
    fn gd_parabola() {
        let r = gradient_descent(&mut parabola(), &[0.0], 0.1, 200, 1e-14).unwrap();
        assert!((r.final_params[0] - 3.0).abs() < 1e-4);
        assert!(r.final_value <= r.initial_value);
    }

    #[test]
    fn gd_constant_stops_at_first_iteration() {
        let mut obj = FnObjective::new(2, |_: &[f64]| 5.0, |_: &[f64]| vec![0.0, 0.0]);
        let r = gradient_descent(&mut obj, &[1.0, -1.0], 0.01, 100, 1e-7).unwrap();
        assert_eq!(r.iterations_used, 1);
        assert!(r.converged);
        assert_eq!(r.final_params, vec![1.0, -1.0]);
    }

    #[test]
    fn gd_condition_ten_quadratic() {
        let r = gradient_descent(&mut ill_conditioned(), &[5.0, 5.0], 0.1, 500, 1e-14).unwrap();
        assert!(r.iterations_used <= 500);
        assert!((r.final_params[0] - 1.0).abs() < 1e-3);
        assert!((r.final_params[1] + 2.0).abs() < 1e-3);
    }

    #[test]
    fn gd_halving_rescues_large_rate() {
        // lr 1.5 overshoots f = x² (factor |1 − 3| = 2); halving brings it back.
        let mut obj = FnObjective::new(1, |p: &[f64]| p[0] * p[0], |p: &[f64]| vec![2.0 * p[0]]);
        let r = gradient_descent(&mut obj, &[1.0], 1.5, 50, 1e-12).unwrap();
        assert!(r.final_params[0].abs() < 1e-3);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn gd_rejects_non_finite() {
        let mut obj = FnObjective::new(1, |p: &[f64]| if p[0] > 0.5 { f64::NAN } else { p[0] }, |_: &[f64]| vec![-10.0]);
        assert!(matches!(
            gradient_descent(&mut obj, &[0.0], 0.1, 10, 1e-9),
            Err(Error::NonFiniteObjective { .. })
        ));
        assert!(gradient_descent(&mut parabola(), &[0.0], 0.0, 10, 1e-9).is_err());
    }

    #[test]
    fn lbfgsb_parabola_and_active_bound() {
        let r = lbfgsb(&mut parabola(), &[0.0], &[-10.0], &[10.0], 100, 10, 1e-9).unwrap();
        assert!((r.final_params[0] - 3.0).abs() < 1e-6);
        let r = lbfgsb(&mut parabola(), &[0.0], &[-10.0], &[2.0], 100, 10, 1e-9).unwrap();
        assert_eq!(r.final_params[0], 2.0);
    }

    #[test]
    fn lbfgsb_rosenbrock() {
        let r = lbfgsb(&mut rosenbrock(), &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], 200, 10, 1e-8).unwrap();
        assert!(r.iterations_used <= 200);
        assert!((r.final_params[0] - 1.0).abs() < 1e-3, "{:?}", r.final_params);
        assert!((r.final_params[1] - 1.0).abs() < 1e-3, "{:?}", r.final_params);
    }

    #[test]
    fn lbfgsb_rejects_infeasible_start() {
        assert!(matches!(
            lbfgsb(&mut parabola(), &[11.0], &[-10.0], &[10.0], 10, 5, 1e-6),
            Err(Error::Infeasible { index: 0, .. })
        ));
    }

    #[test]
    fn optimizers_are_deterministic() {
        let a = lbfgsb(&mut rosenbrock(), &[-1.2, 1.0], &[-5.0; 2], &[5.0; 2], 50, 10, 1e-8).unwrap();
        let b = lbfgsb(&mut rosenbrock(), &[-1.2, 1.0], &[-5.0; 2], &[5.0; 2], 50, 10, 1e-8).unwrap();
        assert_eq!(a, b);
        let a = gradient_descent(&mut ill_conditioned(), &[3.0, 3.0], 0.05, 100, 1e-9).unwrap();
        let b = gradient_descent(&mut ill_conditioned(), &[3.0, 3.0], 0.05, 100, 1e-9).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn lbfgsb_iterates_stay_in_box(x0 in -2.0f64..2.0, y0 in -2.0f64..2.0, lo in -3.0f64..-2.0, hi in 0.2f64..0.9) {
            let seen = std::cell::RefCell::new(Vec::new());
            let mut obj = FnObjective::new(
                2,
                |p: &[f64]| { seen.borrow_mut().push(p.to_vec()); (1.0 - p[0]).powi(2) + 100.0 * (p[1] - p[0] * p[0]).powi(2) },
                |p: &[f64]| vec![-2.0 * (1.0 - p[0]) - 400.0 * p[0] * (p[1] - p[0] * p[0]), 200.0 * (p[1] - p[0] * p[0])],
            );
            let x0 = x0.clamp(lo, hi);
            let y0 = y0.clamp(lo, hi);
            let r = lbfgsb(&mut obj, &[x0, y0], &[lo, lo], &[hi, hi], 60, 5, 1e-8).unwrap();
            for p in seen.borrow().iter() {
                prop_assert!(p.iter().all(|v| *v >= lo && *v <= hi));
            }
            prop_assert!(r.final_value <= r.initial_value);
        }

        #[test]
        fn tighter_tol_never_worse_on_convex(x0 in -10.0f64..10.0, y0 in -10.0f64..10.0) {
            let loose = gradient_descent(&mut ill_conditioned(), &[x0, y0], 0.05, 400, 1e-3).unwrap();
            let tight = gradient_descent(&mut ill_conditioned(), &[x0, y0], 0.05, 400, 1e-9).unwrap();
            prop_assert!(tight.final_value <= loose.final_value);
            let loose = lbfgsb(&mut ill_conditioned(), &[x0, y0], &[-20.0; 2], &[20.0; 2], 100, 10, 1e-2).unwrap();
            let tight = lbfgsb(&mut ill_conditioned(), &[x0, y0], &[-20.0; 2], &[20.0; 2], 100, 10, 1e-8).unwrap();
            prop_assert!(tight.final_value <= loose.final_value);
        }
    }
}
