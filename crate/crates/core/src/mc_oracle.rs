//! Feynman–Kac Monte Carlo point values, used as an independent check on the
//! finite-difference solvers.
//!
//! Paths are Euler–Maruyama discretizations stopped at the first exit from
//! the unit box; the exit point and the last partial time step come from
//! linear interpolation between the last interior position and the first
//! exterior one. Time integrals use the left-point rule.
//!
//! * Schrödinger `½Δu = f u`, `u = g` on the boundary:
//!   `u(x) = E[g(X_τ) exp(−∫₀^τ f(X_s) ds)]` with `X` a standard Brownian motion.
//! * Darcy `div(f∇u) = g`, `u = 0` on the boundary: `u(x) = −E[∫₀^τ g(X_s) ds]`
//!   where `dX = ∇f dt + √(2f) dW` has generator `div(f∇·)`.
//!
//! Paths are split into fixed chunks. Each chunk draws a Xoshiro256++ seed
//! from its own ChaCha substream, so the estimate does not depend on the
//! number of worker threads; Xoshiro keeps the per-step cost of the normal
//! draws low enough for `10⁵` paths at `dt = 10⁻⁵`.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnspace::{nodal_derivative, GridFunction};
use crate::rng::substream;

type PathRng = Xoshiro256PlusPlus;

/// Paths per RNG substream.
pub const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    /// Time step; `dt ≤ h²` keeps the discretization below the grid scale.
    pub dt: f64,
    pub seed: u64,
    /// Steps after which a path is censored.
    pub max_steps: usize,
}

impl McConfig {
    /// A horizon of 10 time units.
    pub fn new(n_paths: usize, dt: f64, seed: u64) -> Self {
        Self {
            n_paths,
            dt,
            seed,
            max_steps: (10.0 / dt).ceil() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.max_steps as f64 * self.dt >= 10.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon max_steps·dt = {} is below 10",
                self.max_steps as f64 * self.dt
            )));
        }
        Ok(())
    }
}

impl Default for McConfig {
    fn default() -> Self {
        Self::new(100_000, 1e-5, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Sample standard deviation over `√n_exited`.
    pub std_error: f64,
    pub n_exited: usize,
    pub n_censored: usize,
}

impl McEstimate {
    pub fn n_paths(&self) -> usize {
        self.n_exited + self.n_censored
    }

    pub fn censored_fraction(&self) -> f64 {
        self.n_censored as f64 / self.n_paths() as f64
    }

    /// `|mean − reference| ≤ 3·SE + bias`.
    pub fn agrees_with(&self, reference: f64, bias: f64) -> bool {
        (self.mean - reference).abs() <= 3.0 * self.std_error + bias
    }
}

/// Multilinear interpolation of `K` nodal fields at points of the closed
/// box, sharing one cell lookup.
struct Sampler<const K: usize> {
    scale: f64,
    last: i64,
    stride: usize,
    values: Vec<[f64; K]>,
}

impl<const K: usize> Sampler<K> {
    fn new(fields: [&GridFunction; K]) -> Self {
        let g = fields[0].grid();
        let values = (0..g.len()).map(|p| fields.map(|f| f.values()[p])).collect();
        Self {
            scale: (g.n() + 1) as f64,
            last: g.n() as i64,
            stride: g.nodes_per_axis(),
            values,
        }
    }

    #[inline(always)]
    fn cell(&self, x: f64) -> (usize, f64) {
        let s = x * self.scale;
        // truncation is floor on the nonnegative axis; the i64 conversion is
        // much cheaper than f64 → usize on x86-64
        let i = (s as i64).min(self.last) as usize;
        (i, s - i as f64)
    }

    #[inline(always)]
    fn at<const D: usize>(&self, x: &[f64; D]) -> [f64; K] {
        let v = &self.values;
        let (i, a) = self.cell(x[0]);
        if D == 1 {
            let (l, r) = (v[i], v[i + 1]);
            return std::array::from_fn(|k| l[k] * (1.0 - a) + r[k] * a);
        }
        let (j, b) = self.cell(x[1]);
        let lo = i + self.stride * j;
        let hi = lo + self.stride;
        let (p, q, r, t) = (v[lo], v[lo + 1], v[hi], v[hi + 1]);
        std::array::from_fn(|k| (1.0 - b) * ((1.0 - a) * p[k] + a * q[k]) + b * ((1.0 - a) * r[k] + a * t[k]))
    }
}

#[derive(Clone, Copy)]
struct Lane<const D: usize> {
    x: [f64; D],
    integral: f64,
    steps: usize,
}

/// Advances one path by a time step. `local(x)` returns the drift, the
/// diffusion scale and the integrand at `x`; the integrand is accumulated
/// along the path. Returns the exit point once the path leaves the box.
#[inline(always)]
fn step<const D: usize>(
    lane: &mut Lane<D>,
    dt: f64,
    sqdt: f64,
    rng: &mut PathRng,
    local: &impl Fn(&[f64; D]) -> ([f64; D], f64, f64),
) -> Option<[f64; D]> {
    let x = lane.x;
    let (drift, scale, density) = local(&x);
    let mut y = x;
    let mut outside = false;
    for a in 0..D {
        let z: f64 = StandardNormal.sample(rng);
        y[a] = x[a] + drift[a] * dt + scale * sqdt * z;
        outside |= !(y[a] > 0.0 && y[a] < 1.0);
    }
    lane.steps += 1;
    if !outside {
        lane.integral += density * dt;
        lane.x = y;
        return None;
    }
    // earliest wall crossing along the straight segment x → y
    let mut frac = 1.0f64;
    let mut axis = 0;
    let mut wall = 0.0;
    for a in 0..D {
        let (t, w) = if y[a] <= 0.0 {
            (x[a] / (x[a] - y[a]), 0.0)
        } else if y[a] >= 1.0 {
            ((1.0 - x[a]) / (y[a] - x[a]), 1.0)
        } else {
            continue;
        };
        if t <= frac {
            frac = t;
            axis = a;
            wall = w;
        }
    }
    lane.integral += density * dt * frac;
    let mut exit = [0.0; D];
    for a in 0..D {
        exit[a] = (x[a] + frac * (y[a] - x[a])).clamp(0.0, 1.0);
    }
    exit[axis] = wall;
    Some(exit)
}

/// Independent paths advanced in lockstep; the loop is latency bound, so
/// interleaving lanes roughly doubles throughput.
const LANES: usize = 4;

/// Runs `len` paths from `x0`; `value(integral, exit)` maps an exited path
/// to its sample.
#[inline(always)]
fn run_chunk<const D: usize>(
    len: usize,
    x0: [f64; D],
    cfg: &McConfig,
    rng: &mut PathRng,
    local: &impl Fn(&[f64; D]) -> ([f64; D], f64, f64),
    value: &impl Fn(f64, &[f64; D]) -> f64,
) -> Tally {
    let fresh = Lane {
        x: x0,
        integral: 0.0,
        steps: 0,
    };
    let (dt, sqdt) = (cfg.dt, cfg.dt.sqrt());
    let mut lanes = [fresh; LANES];
    let mut active = [false; LANES];
    let mut started = len.min(LANES);
    active[..started].iter_mut().for_each(|a| *a = true);
    let mut live = started;
    let mut t = Tally::default();
    while live > 0 {
        for l in 0..LANES {
            if !active[l] {
                continue;
            }
            let lane = &mut lanes[l];
            let done = match step(lane, dt, sqdt, rng, local) {
                Some(exit) => {
                    let v = value(lane.integral, &exit);
                    t.sum += v;
                    t.sum_sq += v * v;
                    t.exited += 1;
                    true
                }
                None if lane.steps >= cfg.max_steps => {
                    t.censored += 1;
                    true
                }
                None => false,
            };
            if done {
                if started < len {
                    *lane = fresh;
                    started += 1;
                } else {
                    active[l] = false;
                    live -= 1;
                }
            }
        }
    }
    t
}

#[derive(Default, Clone, Copy)]
struct Tally {
    sum: f64,
    sum_sq: f64,
    exited: usize,
    censored: usize,
}

/// Splits the paths into chunks, runs them in parallel, and reduces the
/// chunk tallies in chunk order.
fn estimate(cfg: &McConfig, label: &str, chunk: impl Fn(usize, &mut PathRng) -> Tally + Sync) -> Result<McEstimate> {
    cfg.validate()?;
    let n_chunks = cfg.n_paths.div_ceil(CHUNK);
    let tallies: Vec<Tally> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = PathRng::from_rng(&mut substream(cfg.seed, label, c as u64));
            chunk(CHUNK.min(cfg.n_paths - c * CHUNK), &mut rng)
        })
        .collect();
    let total = tallies.iter().fold(Tally::default(), |a, t| Tally {
        sum: a.sum + t.sum,
        sum_sq: a.sum_sq + t.sum_sq,
        exited: a.exited + t.exited,
        censored: a.censored + t.censored,
    });
    if total.exited == 0 {
        return Err(Error::AllCensored { n_paths: cfg.n_paths });
    }
    let n = total.exited as f64;
    let mean = total.sum / n;
    let var = if total.exited > 1 {
        ((total.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        n_exited: total.exited,
        n_censored: total.censored,
    })
}

fn start_point<const D: usize>(x: &[f64]) -> Result<[f64; D]> {
    if x.len() != D || x.iter().any(|c| !(*c > 0.0 && *c < 1.0)) {
        return Err(Error::OutsideDomain { point: x.to_vec() });
    }
    let mut p = [0.0; D];
    p.copy_from_slice(x);
    Ok(p)
}

fn check_nonnegative(f: &GridFunction, strict: bool) -> Result<()> {
    for (node, v) in f.values().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { node });
        }
        if *v < 0.0 || (strict && *v == 0.0) {
            return Err(Error::BelowFloor {
                node,
                value: *v,
                floor: 0.0,
            });
        }
    }
    Ok(())
}

/// `u(x) = E[g(X_τ) exp(−∫ f(X_s) ds)]` for `½Δu = f u`; only the boundary
/// values of `g` are used.
pub fn fk_schrodinger(f: &GridFunction, g: &GridFunction, x: &[f64], cfg: &McConfig) -> Result<McEstimate> {
    f.grid().check_same(g.grid())?;
    check_nonnegative(f, false)?;
    match f.grid().dim() {
        1 => schrodinger_paths::<1>(f, g, start_point(x)?, cfg),
        _ => schrodinger_paths::<2>(f, g, start_point(x)?, cfg),
    }
}

fn schrodinger_paths<const D: usize>(f: &GridFunction, g: &GridFunction, x0: [f64; D], cfg: &McConfig) -> Result<McEstimate> {
    let (fs, gs) = (Sampler::new([f]), Sampler::new([g]));
    let local = |p: &[f64; D]| ([0.0; D], 1.0, fs.at(p)[0]);
    let value = |integral: f64, exit: &[f64; D]| gs.at(exit)[0] * (-integral).exp();
    estimate(cfg, "fk-schrodinger", |len, rng| {
        run_chunk(len, x0, cfg, rng, &local, &value)
    })
}

/// `u(x) = −E[∫ g(X_s) ds]` for `div(f∇u) = g` with zero boundary values.
pub fn fk_darcy(f: &GridFunction, g: &GridFunction, x: &[f64], cfg: &McConfig) -> Result<McEstimate> {
    f.grid().check_same(g.grid())?;
    check_nonnegative(f, true)?;
    let dim = f.grid().dim();
    if x.len() != dim {
        return Err(Error::OutsideDomain { point: x.to_vec() });
    }
    if g.values().iter().all(|v| *v == 0.0) {
        start_point::<1>(&x[..1])?;
        cfg.validate()?;
        return Ok(McEstimate {
            mean: 0.0,
            std_error: 0.0,
            n_exited: cfg.n_paths,
            n_censored: 0,
        });
    }
    match dim {
        1 => darcy_paths::<1>(f, g, start_point(x)?, cfg),
        _ => darcy_paths::<2>(f, g, start_point(x)?, cfg),
    }
}

fn darcy_paths<const D: usize>(f: &GridFunction, g: &GridFunction, x0: [f64; D], cfg: &McConfig) -> Result<McEstimate> {
    let dx = nodal_derivative(f, 0);
    // the y-derivative slot is unused in 1D
    let dy = if D == 2 { nodal_derivative(f, 1) } else { dx.clone() };
    // [f, ∂x f, ∂y f, g]
    let table = Sampler::new([f, &dx, &dy, g]);
    let local = |p: &[f64; D]| {
        let v = table.at(p);
        (std::array::from_fn(|a| v[1 + a]), (2.0 * v[0]).sqrt(), v[3])
    };
    let value = |integral: f64, _: &[f64; D]| -integral;
    estimate(cfg, "fk-darcy", |len, rng| run_chunk(len, x0, cfg, rng, &local, &value))
}
