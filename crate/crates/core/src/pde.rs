//! Finite-difference solvers for the Darcy and stationary Schrödinger
//! boundary-value problems, and adjoint-state gradients of the data misfit.
//!
//! Darcy: `div(f ∇u) = g` in the domain, `u = 0` on the boundary, discretized
//! in flux form with arithmetic-mean edge coefficients
//! `f_{i+½} = (f_i + f_{i+1})/2`. Schrödinger: `½Δu − f u = 0` with `u = g`
//! on the boundary, five-point (three-point in 1D) Laplacian. Both systems are
//! assembled as symmetric positive-definite matrices on the interior nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnspace::{Grid, GridFunction, Stencil};
use crate::linalg::{OperatorBuilder, SolverKind, SparseOperator};
use crate::model::Dataset;

/// Relative residual accepted from the linear solve.
pub const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PdeKind {
    Darcy,
    Schrodinger,
}

impl PdeKind {
    /// Smoothing order of the forward map, entering the rate exponent.
    pub fn ill_posedness(self) -> f64 {
        match self {
            PdeKind::Darcy => 1.0,
            PdeKind::Schrodinger => 2.0,
        }
    }

    /// Hölder exponent of the inverse continuity modulus at smoothness `alpha`.
    pub fn stability_exponent(self, alpha: f64) -> f64 {
        match self {
            PdeKind::Darcy => (alpha - 1.0) / (alpha + 1.0),
            PdeKind::Schrodinger => alpha / (alpha + 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DarcyProblem {
    grid: Grid,
    source: GridFunction,
    f_min: f64,
}

impl DarcyProblem {
    pub fn new(source: GridFunction, f_min: f64) -> Result<Self> {
        if !(f_min > 0.0) {
            return Err(Error::InvalidArgument(format!("f_min must be positive, got {f_min}")));
        }
        if let Some(p) = source.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node: p });
        }
        Ok(Self {
            grid: *source.grid(),
            source,
            f_min,
        })
    }

    /// `g = amplitude · Π_a sin(π x_a)`.
    pub fn sine_source(grid: Grid, amplitude: f64) -> GridFunction {
        GridFunction::from_fn(grid, |x| {
            amplitude * x.iter().map(|c| (std::f64::consts::PI * c).sin()).product::<f64>()
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn source(&self) -> &GridFunction {
        &self.source
    }

    pub fn f_min(&self) -> f64 {
        self.f_min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchrodingerProblem {
    grid: Grid,
    /// Only boundary nodes are read.
    boundary: GridFunction,
}

impl SchrodingerProblem {
    pub fn new(boundary: GridFunction) -> Result<Self> {
        let grid = *boundary.grid();
        for p in (0..grid.len()).filter(|p| grid.is_boundary(*p)) {
            let v = boundary.values()[p];
            if !v.is_finite() {
                return Err(Error::NonFinite { node: p });
            }
            if v < 0.0 {
                return Err(Error::BelowFloor { node: p, value: v, floor: 0.0 });
            }
        }
        Ok(Self { grid, boundary })
    }

    pub fn constant_boundary(grid: Grid, value: f64) -> Result<Self> {
        Self::new(GridFunction::constant(grid, value))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn boundary(&self) -> &GridFunction {
        &self.boundary
    }

    pub fn boundary_max(&self) -> f64 {
        (0..self.grid.len())
            .filter(|p| self.grid.is_boundary(*p))
            .map(|p| self.boundary.values()[p])
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PdeProblem {
    Darcy(DarcyProblem),
    Schrodinger(SchrodingerProblem),
}

/// Bijection between interior nodes and unknowns of the linear system.
#[derive(Debug, Clone)]
struct InteriorMap {
    to_flat: Vec<usize>,
    to_unknown: Vec<Option<usize>>,
}

impl InteriorMap {
    fn new(grid: &Grid) -> Self {
        let mut to_unknown = vec![None; grid.len()];
        let mut to_flat = Vec::with_capacity(grid.interior_len());
        for (p, slot) in to_unknown.iter_mut().enumerate() {
            if !grid.is_boundary(p) {
                *slot = Some(to_flat.len());
                to_flat.push(p);
            }
        }
        Self { to_flat, to_unknown }
    }
}

/// Neighbours of a flat node along each axis (both directions).
fn neighbours(grid: &Grid, p: usize) -> impl Iterator<Item = usize> {
    let (ix, iy) = grid.multi(p);
    let g = *grid;
    let last = g.n() + 1;
    let mut out = [usize::MAX; 4];
    if ix > 0 {
        out[0] = g.flat(ix - 1, iy);
    }
    if ix < last {
        out[1] = g.flat(ix + 1, iy);
    }
    if g.dim() == 2 {
        if iy > 0 {
            out[2] = g.flat(ix, iy - 1);
        }
        if iy < last {
            out[3] = g.flat(ix, iy + 1);
        }
    }
    out.into_iter().filter(|q| *q != usize::MAX)
}

struct Assembled {
    map: InteriorMap,
    op: SparseOperator,
    rhs: Vec<f64>,
}

impl PdeProblem {
    pub fn kind(&self) -> PdeKind {
        match self {
            PdeProblem::Darcy(_) => PdeKind::Darcy,
            PdeProblem::Schrodinger(_) => PdeKind::Schrodinger,
        }
    }

    pub fn grid(&self) -> &Grid {
        match self {
            PdeProblem::Darcy(p) => p.grid(),
            PdeProblem::Schrodinger(p) => p.grid(),
        }
    }

    /// Largest absolute datum (source for Darcy, boundary values for
    /// Schrödinger).
    pub fn data_sup(&self) -> f64 {
        match self {
            PdeProblem::Darcy(p) => p.source().sup_norm(),
            PdeProblem::Schrodinger(p) => p.boundary_max(),
        }
    }

    fn check_coefficient(&self, f: &GridFunction) -> Result<()> {
        self.grid().check_same(f.grid())?;
        let floor = match self {
            PdeProblem::Darcy(p) => p.f_min,
            PdeProblem::Schrodinger(_) => 0.0,
        };
        for (node, v) in f.values().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { node });
            }
            if *v < floor {
                return Err(Error::BelowFloor { node, value: *v, floor });
            }
        }
        Ok(())
    }

    fn assemble(&self, f: &GridFunction) -> Assembled {
        let grid = *self.grid();
        let map = InteriorMap::new(&grid);
        let h2 = grid.h() * grid.h();
        let fv = f.values();
        let mut b = OperatorBuilder::new(map.to_flat.len());
        let mut rhs = vec![0.0; map.to_flat.len()];
        match self {
            PdeProblem::Darcy(prob) => {
                let g = prob.source.values();
                for (q, &p) in map.to_flat.iter().enumerate() {
                    rhs[q] = -g[p];
                    for nb in neighbours(&grid, p) {
                        let coef = 0.5 * (fv[p] + fv[nb]) / h2;
                        b.add(q, q, coef);
                        if let Some(qn) = map.to_unknown[nb] {
                            b.add(q, qn, -coef);
                        }
                    }
                }
            }
            PdeProblem::Schrodinger(prob) => {
                let g = prob.boundary.values();
                let off = 0.5 / h2;
                for (q, &p) in map.to_flat.iter().enumerate() {
                    b.add(q, q, fv[p]);
                    for nb in neighbours(&grid, p) {
                        b.add(q, q, off);
                        match map.to_unknown[nb] {
                            Some(qn) => b.add(q, qn, -off),
                            None => rhs[q] += off * g[nb],
                        }
                    }
                }
            }
        }
        Assembled {
            map,
            op: b.build(),
            rhs,
        }
    }

    /// System matrix for coefficient `f` on the interior unknowns.
    pub fn operator(&self, f: &GridFunction) -> Result<SparseOperator> {
        self.check_coefficient(f)?;
        Ok(self.assemble(f).op)
    }

    pub fn solve(&self, f: &GridFunction) -> Result<GridFunction> {
        self.solve_with(f, SolverKind::Auto)
    }

    pub fn solve_with(&self, f: &GridFunction, kind: SolverKind) -> Result<GridFunction> {
        self.check_coefficient(f)?;
        let sys = self.assemble(f);
        let interior = solve_checked(&sys.op, &sys.rhs, kind)?;
        Ok(self.scatter(&sys.map, &interior))
    }

    fn scatter(&self, map: &InteriorMap, interior: &[f64]) -> GridFunction {
        let grid = *self.grid();
        let mut u = match self {
            PdeProblem::Darcy(_) => GridFunction::zeros(grid),
            PdeProblem::Schrodinger(p) => p.boundary.with_boundary_only(),
        };
        for (q, &p) in map.to_flat.iter().enumerate() {
            u.values_mut()[p] = interior[q];
        }
        u
    }

    /// Misfit `(1/(2σ²N)) Σ (u_f(X_i) − Y_i)²` and its gradient density with
    /// respect to nodal `f`, by one forward and one adjoint solve.
    ///
    /// The returned field holds `∂J/∂f_j / h^d`, so the directional derivative
    /// along `δf` is `h^d Σ_j grad_j δf_j`.
    pub fn misfit_and_gradient(
        &self,
        f: &GridFunction,
        obs: &ObservationOperator,
        responses: &[f64],
        noise_scale: f64,
    ) -> Result<(f64, GridFunction, GridFunction)> {
        self.check_coefficient(f)?;
        if obs.len() == 0 {
            return Err(Error::EmptyDataset);
        }
        let grid = *self.grid();
        let sys = self.assemble(f);
        let interior = solve_checked(&sys.op, &sys.rhs, SolverKind::Auto)?;
        let u = self.scatter(&sys.map, &interior);

        let weight = 1.0 / (noise_scale * noise_scale * obs.len() as f64);
        let residuals: Vec<f64> = obs
            .apply(u.values())
            .iter()
            .zip(responses)
            .map(|(m, y)| m - y)
            .collect();
        let misfit = 0.5 * weight * residuals.iter().map(|r| r * r).sum::<f64>();

        let scaled: Vec<f64> = residuals.iter().map(|r| weight * r).collect();
        let nodal_source = obs.adjoint(&scaled);
        let adj_rhs: Vec<f64> = sys.map.to_flat.iter().map(|p| nodal_source[*p]).collect();
        let lambda_int = solve_checked(&sys.op, &adj_rhs, SolverKind::Auto)?;
        let mut lambda = vec![0.0; grid.len()];
        for (q, &p) in sys.map.to_flat.iter().enumerate() {
            lambda[p] = lambda_int[q];
        }

        let vol = grid.cell_volume();
        let mut grad = vec![0.0; grid.len()];
        let uv = u.values();
        match self {
            PdeProblem::Darcy(_) => {
                let h2 = grid.h() * grid.h();
                // each edge appears once from each endpoint
                for p in 0..grid.len() {
                    let mut acc = 0.0;
                    for nb in neighbours(&grid, p) {
                        acc += (lambda[p] - lambda[nb]) * (uv[p] - uv[nb]);
                    }
                    grad[p] = -0.5 * acc / h2 / vol;
                }
            }
            PdeProblem::Schrodinger(_) => {
                for &p in &sys.map.to_flat {
                    grad[p] = -lambda[p] * uv[p] / vol;
                }
            }
        }
        Ok((misfit, GridFunction::new(grid, grad)?, u))
    }
}

fn solve_checked(op: &SparseOperator, rhs: &[f64], kind: SolverKind) -> Result<Vec<f64>> {
    let (x, stats) = op.solve(rhs, kind)?;
    if !(stats.relative_residual <= RESIDUAL_TOL) {
        return Err(Error::SolverDiverged {
            iterations: stats.iterations,
            residual: stats.relative_residual,
        });
    }
    Ok(x)
}

pub fn solve_darcy(prob: &DarcyProblem, f: &GridFunction) -> Result<GridFunction> {
    PdeProblem::Darcy(prob.clone()).solve(f)
}

pub fn solve_schrodinger(prob: &SchrodingerProblem, f: &GridFunction) -> Result<GridFunction> {
    PdeProblem::Schrodinger(prob.clone()).solve(f)
}

/// Multilinear interpolation of nodal values at a point of the closed domain.
pub fn point_eval(u: &GridFunction, x: &[f64]) -> Result<f64> {
    u.interpolate(x)
}

/// Point evaluation at a fixed set of design points, and its transpose.
#[derive(Debug, Clone)]
pub struct ObservationOperator {
    grid: Grid,
    stencils: Vec<Stencil>,
}

impl ObservationOperator {
    /// `coords` holds the points back to back, `dim` values each.
    pub fn new(grid: Grid, coords: &[f64]) -> Result<Self> {
        let stencils = coords
            .chunks(grid.dim())
            .map(|x| grid.stencil(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, stencils })
    }

    pub fn for_dataset(grid: Grid, data: &Dataset) -> Result<Self> {
        if data.dim() != grid.dim() {
            return Err(Error::InvalidArgument(format!(
                "dataset is {}D but the grid is {}D",
                data.dim(),
                grid.dim()
            )));
        }
        Self::new(grid, data.coords())
    }

    pub fn len(&self) -> usize {
        self.stencils.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stencils.is_empty()
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.stencils.iter().map(|s| s.apply(values)).collect()
    }

    /// Spread per-point weights back onto the nodes (exact transpose of
    /// [`ObservationOperator::apply`]).
    pub fn adjoint(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for (s, w) in self.stencils.iter().zip(weights) {
            for (p, sw) in s.iter() {
                out[p] += sw * w;
            }
        }
        out
    }
}

/// Gradient density of the data misfit with respect to nodal `f`.
pub fn misfit_gradient(prob: &PdeProblem, f: &GridFunction, data: &Dataset) -> Result<GridFunction> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let obs = ObservationOperator::for_dataset(*prob.grid(), data)?;
    prob.misfit_and_gradient(f, &obs, data.responses(), data.noise_scale())
        .map(|(_, g, _)| g)
}
