//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! The objective is minimized. Every accepted step satisfies the Armijo
//! condition, so the recorded value trace is non-increasing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub armijo_c: f64,
    /// Step halvings tried before the search gives up.
    pub max_halvings: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-8,
            armijo_c: 1e-4,
            max_halvings: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    /// No decrease along steepest descent after `max_halvings` halvings.
    LineSearchStalled,
    /// The value stopped moving beyond round-off over a full memory window.
    Stagnated,
}

/// Relative change of the objective treated as round-off.
pub const ROUNDOFF: f64 = 1e3 * f64::EPSILON;

/// Whether two objective values agree to within round-off.
pub fn within_roundoff(a: f64, b: f64) -> bool {
    (a - b).abs() <= ROUNDOFF * a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

impl Minimum {
    pub fn converged(&self) -> bool {
        self.termination == Termination::GradientTolerance
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `−H g`.
fn direction(history: &VecDeque<Pair>, g: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        q.iter_mut().zip(&p.y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|qi| *qi *= gamma);
    }
    for (p, a) in history.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        q.iter_mut().zip(&p.s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|qi| *qi = -*qi);
    q
}

/// Minimize `f`, which returns the value and gradient at a point.
///
/// Evaluation errors during the line search count as rejected trial steps.
/// Fails with [`Error::LineSearchFailed`] only when no step at all could be
/// accepted from a non-stationary start.
pub fn minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if cfg.memory == 0 || !(cfg.grad_tol > 0.0) || !(cfg.armijo_c > 0.0 && cfg.armijo_c < 1.0) {
        return Err(Error::InvalidArgument(format!("invalid L-BFGS settings {cfg:?}")));
    }
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { node: 0 });
    }
    let mut trace = vec![fx];
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;

    let termination = loop {
        if norm(&g) <= cfg.grad_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= cfg.max_iters {
            break Termination::MaxIterations;
        }
        // Below round-off the Armijo test is decided by noise and the
        // iterates wander without progress.
        if trace.len() > cfg.memory && within_roundoff(trace[trace.len() - 1 - cfg.memory], fx) {
            break Termination::Stagnated;
        }
        let mut d = direction(&history, &g);
        if !(dot(&d, &g) < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let step = match line_search(&mut f, &x, fx, &g, &d, cfg) {
            Some(s) => s,
            None if !history.is_empty() => {
                history.clear();
                let sd: Vec<f64> = g.iter().map(|v| -v).collect();
                match line_search(&mut f, &x, fx, &g, &sd, cfg) {
                    Some(s) => s,
                    None => break Termination::LineSearchStalled,
                }
            }
            None => break Termination::LineSearchStalled,
        };
        let (x_new, f_new, g_new) = step;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        // Without a curvature condition in the search, negative curvature
        // can freeze a stale model; drop it and restart from steepest descent.
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back(Pair { s, y, rho: 1.0 / sy });
        } else {
            history.clear();
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
        iterations += 1;
    };

    if termination == Termination::LineSearchStalled && iterations == 0 {
        return Err(Error::LineSearchFailed { trace });
    }
    Ok(Minimum {
        grad_norm: norm(&g),
        x,
        value: fx,
        trace,
        iterations,
        termination,
    })
}

type Step = (Vec<f64>, f64, Vec<f64>);

fn line_search<F>(f: &mut F, x: &[f64], fx: f64, g: &[f64], d: &[f64], cfg: &LbfgsConfig) -> Option<Step>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let slope = dot(g, d);
    let mut t = 1.0;
    for _ in 0..=cfg.max_halvings {
        let trial: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
        if let Ok((ft, gt)) = f(&trial) {
            if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= fx + cfg.armijo_c * t * slope {
                return Some((trial, ft, gt));
            }
        }
        t *= 0.5;
    }
    None
}
