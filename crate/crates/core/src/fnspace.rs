//! Uniform grids on the unit interval/square, nodal fields, and the Dirichlet
//! sine basis used to represent parameters.
//!
//! The Dirichlet Laplacian on `(0,1)^d` has eigenfunctions
//! `φ_k(x) = √2 sin(kπx)` (tensor products in 2D) with eigenvalues
//! `λ_k = (kπ)²`. A [`SpectralField`] stores coefficients in that basis and
//! measures smoothness with `‖θ‖²_{H^s} = Σ_k (1+λ_k)^s c_k²`; negative `s`
//! gives the dual-norm weighting. On the grid `x_i = i/(n+1)` the sampled sine
//! vectors are exactly orthonormal under the trapezoid rule, so analysis after
//! synthesis is the identity up to round-off.

use std::f64::consts::{PI, SQRT_2};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when deciding whether a boundary value counts as zero.
const TRACE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    n: usize,
}

impl Grid {
    /// `n` interior nodes per axis, `dim` ∈ {1, 2}.
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if n < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 interior nodes per axis, got {n}")));
        }
        Ok(Self { dim, n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Interior nodes per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n + 1) as f64
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.n + 2
    }

    /// Total node count, boundary included.
    pub fn len(&self) -> usize {
        self.nodes_per_axis().pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn interior_len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Coordinate of node `i` along an axis. Computed by division so that the
    /// last node is exactly 1.
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        i as f64 / (self.n + 1) as f64
    }

    #[inline]
    pub fn flat(&self, ix: usize, iy: usize) -> usize {
        ix + self.nodes_per_axis() * iy
    }

    #[inline]
    pub fn multi(&self, flat: usize) -> (usize, usize) {
        if self.dim == 1 {
            (flat, 0)
        } else {
            let m = self.nodes_per_axis();
            (flat % m, flat / m)
        }
    }

    pub fn point(&self, flat: usize) -> [f64; 2] {
        let (ix, iy) = self.multi(flat);
        [self.coord(ix), if self.dim == 2 { self.coord(iy) } else { 0.0 }]
    }

    #[inline]
    pub fn is_boundary(&self, flat: usize) -> bool {
        let last = self.n + 1;
        let (ix, iy) = self.multi(flat);
        ix == 0 || ix == last || (self.dim == 2 && (iy == 0 || iy == last))
    }

    /// Trapezoid-rule weights for every node.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let h = self.h();
        let last = self.n + 1;
        let axis = |i: usize| if i == 0 || i == last { 0.5 * h } else { h };
        (0..self.len())
            .map(|p| {
                let (ix, iy) = self.multi(p);
                if self.dim == 1 {
                    axis(ix)
                } else {
                    axis(ix) * axis(iy)
                }
            })
            .collect()
    }

    /// `h^dim`, the volume attached to an interior node.
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                left: format!("{self:?}"),
                right: format!("{other:?}"),
            })
        }
    }

    /// Multilinear interpolation stencil of a point in the closed domain.
    pub fn stencil(&self, x: &[f64]) -> Result<Stencil> {
        if x.len() != self.dim || x.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::OutsideDomain { point: x.to_vec() });
        }
        let scale = (self.n + 1) as f64;
        let locate = |c: f64| {
            let t = c * scale;
            let i = (t.floor() as usize).min(self.n);
            (i, t - i as f64)
        };
        let (ix, fx) = locate(x[0]);
        if self.dim == 1 {
            return Ok(Stencil {
                nodes: [ix, ix + 1, 0, 0],
                weights: [1.0 - fx, fx, 0.0, 0.0],
                len: 2,
            });
        }
        let (iy, fy) = locate(x[1]);
        Ok(Stencil {
            nodes: [
                self.flat(ix, iy),
                self.flat(ix + 1, iy),
                self.flat(ix, iy + 1),
                self.flat(ix + 1, iy + 1),
            ],
            weights: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
            len: 4,
        })
    }
}

pub fn build_grid(dim: usize, n: usize) -> Result<Grid> {
    Grid::new(dim, n)
}

/// Nodes and multilinear weights of an interpolation stencil.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
    pub len: usize,
}

impl Stencil {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes[..self.len]
            .iter()
            .copied()
            .zip(self.weights[..self.len].iter().copied())
    }

    #[inline]
    pub fn apply(&self, values: &[f64]) -> f64 {
        self.iter().map(|(p, w)| w * values[p]).sum()
    }
}

/// Nodal values on a grid, boundary included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "grid has {} nodes but {} values were given",
                grid.len(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// Sample `f` at every node; `f` receives a slice of length `dim`.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|p| {
                let x = grid.point(p);
                f(&x[..grid.dim()])
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    /// First boundary node whose value is not zero (relative to the field's
    /// magnitude), if any.
    pub fn trace_violation(&self) -> Option<(usize, f64)> {
        let mag = self.values.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        (0..self.values.len())
            .filter(|p| self.grid.is_boundary(*p))
            .map(|p| (p, self.values[p]))
            .find(|(_, v)| v.abs() > TRACE_TOL * mag)
    }

    pub fn has_zero_trace(&self) -> bool {
        self.trace_violation().is_none()
    }

    /// Copy with boundary values set to zero.
    pub fn with_zero_trace(&self) -> Self {
        let mut out = self.clone();
        for p in 0..out.values.len() {
            if self.grid.is_boundary(p) {
                out.values[p] = 0.0;
            }
        }
        out
    }

    /// Copy keeping boundary values and zeroing the interior.
    pub fn with_boundary_only(&self) -> Self {
        let mut out = self.clone();
        for p in 0..out.values.len() {
            if !self.grid.is_boundary(p) {
                out.values[p] = 0.0;
            }
        }
        out
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Value at an arbitrary point by multilinear interpolation.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64> {
        Ok(self.grid.stencil(x)?.apply(&self.values))
    }

    /// One row per node: coordinates then value.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.grid.dim() == 1 {
            w.write_record(["x", "value"])?;
        } else {
            w.write_record(["x", "y", "value"])?;
        }
        for (p, v) in self.values.iter().enumerate() {
            let x = self.grid.point(p);
            if self.grid.dim() == 1 {
                w.write_record([x[0].to_string(), v.to_string()])?;
            } else {
                w.write_record([x[0].to_string(), x[1].to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Read a field written by [`GridFunction::write_csv`] on a known grid.
    pub fn read_csv<R: Read>(grid: Grid, input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut values = Vec::with_capacity(grid.len());
        for rec in r.records() {
            let rec = rec?;
            let field = rec.get(grid.dim()).ok_or_else(|| {
                Error::InvalidArgument(format!("row with {} columns, expected {}", rec.len(), grid.dim() + 1))
            })?;
            values.push(field.trim().parse::<f64>().map_err(|e| {
                Error::InvalidArgument(format!("bad value {field:?}: {e}"))
            })?);
        }
        Self::new(grid, values)
    }
}

/// Coefficients of a zero-trace field in the Dirichlet sine basis, modes
/// `1..=K` per axis (row-major `(j, k)` in 2D, `j` along x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpectralRepr", into = "SpectralRepr")]
pub struct SpectralField {
    grid: Grid,
    modes: usize,
    coeffs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SpectralRepr {
    dim: usize,
    n: usize,
    #[serde(rename = "K")]
    modes: usize,
    coeffs: Vec<f64>,
}

impl From<SpectralField> for SpectralRepr {
    fn from(sf: SpectralField) -> Self {
        Self {
            dim: sf.grid.dim(),
            n: sf.grid.n(),
            modes: sf.modes,
            coeffs: sf.coeffs,
        }
    }
}

impl TryFrom<SpectralRepr> for SpectralField {
    type Error = Error;

    fn try_from(r: SpectralRepr) -> Result<Self> {
        SpectralField::new(Grid::new(r.dim, r.n)?, r.modes, r.coeffs)
    }
}

impl SpectralField {
    pub fn new(grid: Grid, modes: usize, coeffs: Vec<f64>) -> Result<Self> {
        if modes == 0 || modes > grid.n() {
            return Err(Error::InvalidArgument(format!(
                "mode count {modes} must lie in 1..={}",
                grid.n()
            )));
        }
        let expected = modes.pow(grid.dim() as u32);
        if coeffs.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "{modes} modes in {}D need {expected} coefficients, got {}",
                grid.dim(),
                coeffs.len()
            )));
        }
        Ok(Self { grid, modes, coeffs })
    }

    pub fn zeros(grid: Grid, modes: usize) -> Result<Self> {
        Self::new(grid, modes, vec![0.0; modes.pow(grid.dim() as u32)])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Same field with coefficients replaced.
    pub fn with_coeffs(&self, coeffs: Vec<f64>) -> Result<Self> {
        Self::new(self.grid, self.modes, coeffs)
    }

    /// Dirichlet eigenvalues matching `coeffs` entry by entry.
    pub fn eigenvalues(&self) -> Vec<f64> {
        eigenvalues(self.grid.dim(), self.modes)
    }

    /// Truncate or zero-pad to `modes` modes per axis.
    pub fn resized(&self, modes: usize) -> Result<Self> {
        let mut out = Self::zeros(self.grid, modes)?;
        let keep = modes.min(self.modes);
        if self.grid.dim() == 1 {
            out.coeffs[..keep].copy_from_slice(&self.coeffs[..keep]);
        } else {
            for j in 0..keep {
                for k in 0..keep {
                    out.coeffs[j * modes + k] = self.coeffs[j * self.modes + k];
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        if self.modes != other.modes {
            return Err(Error::InvalidArgument(format!(
                "mode counts differ: {} vs {}",
                self.modes, other.modes
            )));
        }
        self.with_coeffs(self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a - b).collect())
    }
}

/// `λ = π²(j² + k²)` for every retained mode, in coefficient order.
pub fn eigenvalues(dim: usize, modes: usize) -> Vec<f64> {
    let one = |k: usize| (k as f64 * PI).powi(2);
    if dim == 1 {
        (1..=modes).map(one).collect()
    } else {
        (1..=modes)
            .flat_map(|j| (1..=modes).map(move |k| one(j) + one(k)))
            .collect()
    }
}

/// Tabulated sine basis for one grid and mode count.
#[derive(Debug, Clone)]
pub struct SineBasis {
    grid: Grid,
    modes: usize,
    /// `table[k * (n+2) + i] = √2 sin((k+1)π x_i)`
    table: Vec<f64>,
}

impl SineBasis {
    pub fn new(grid: Grid, modes: usize) -> Result<Self> {
        if modes == 0 || modes > grid.n() {
            return Err(Error::InvalidArgument(format!(
                "mode count {modes} must lie in 1..={}",
                grid.n()
            )));
        }
        let m = grid.nodes_per_axis();
        let mut table = vec![0.0; modes * m];
        for k in 0..modes {
            // endpoints stay exactly zero
            for i in 1..m - 1 {
                table[k * m + i] = SQRT_2 * ((k + 1) as f64 * PI * grid.coord(i)).sin();
            }
        }
        Ok(Self { grid, modes, table })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    #[inline]
    fn row(&self, k: usize) -> &[f64] {
        let m = self.grid.nodes_per_axis();
        &self.table[k * m..(k + 1) * m]
    }

    /// Nodal values of `Σ c φ`; boundary values are exactly zero.
    pub fn synthesize(&self, coeffs: &[f64]) -> GridFunction {
        let g = self.grid;
        let m = g.nodes_per_axis();
        let kk = self.modes;
        let mut values = vec![0.0; g.len()];
        if g.dim() == 1 {
            for (k, c) in coeffs.iter().enumerate().take(kk) {
                if *c != 0.0 {
                    for (v, s) in values.iter_mut().zip(self.row(k)) {
                        *v += c * s;
                    }
                }
            }
        } else {
            // a[j][iy] = Σ_k c_jk S_k(iy)
            let mut a = vec![0.0; kk * m];
            for j in 0..kk {
                for k in 0..kk {
                    let c = coeffs[j * kk + k];
                    if c != 0.0 {
                        for (dst, s) in a[j * m..(j + 1) * m].iter_mut().zip(self.row(k)) {
                            *dst += c * s;
                        }
                    }
                }
            }
            for iy in 1..m - 1 {
                for j in 0..kk {
                    let aj = a[j * m + iy];
                    if aj != 0.0 {
                        let sj = self.row(j);
                        for ix in 1..m - 1 {
                            values[ix + m * iy] += aj * sj[ix];
                        }
                    }
                }
            }
        }
        GridFunction { grid: g, values }
    }

    /// Trapezoid inner products with every basis function; boundary values
    /// are ignored (the basis vanishes there).
    pub fn project(&self, values: &[f64]) -> Vec<f64> {
        let g = self.grid;
        let m = g.nodes_per_axis();
        let h = g.h();
        let kk = self.modes;
        if g.dim() == 1 {
            (0..kk)
                .map(|k| h * self.row(k).iter().zip(values).map(|(s, v)| s * v).sum::<f64>())
                .collect()
        } else {
            // b[ix][k] = Σ_iy v(ix, iy) S_k(iy)
            let mut b = vec![0.0; m * kk];
            for iy in 1..m - 1 {
                for k in 0..kk {
                    let s = self.row(k)[iy];
                    for ix in 1..m - 1 {
                        b[ix * kk + k] += values[ix + m * iy] * s;
                    }
                }
            }
            let mut out = vec![0.0; kk * kk];
            for j in 0..kk {
                let sj = self.row(j);
                for ix in 1..m - 1 {
                    for k in 0..kk {
                        out[j * kk + k] += sj[ix] * b[ix * kk + k];
                    }
                }
            }
            out.iter_mut().for_each(|c| *c *= h * h);
            out
        }
    }

    pub fn synthesize_field(&self, sf: &SpectralField) -> Result<GridFunction> {
        self.check_field(sf)?;
        Ok(self.synthesize(&sf.coeffs))
    }

    pub fn analyze(&self, gf: &GridFunction) -> Result<SpectralField> {
        self.grid.check_same(gf.grid())?;
        if let Some((node, value)) = gf.trace_violation() {
            return Err(Error::NonZeroTrace { node, value });
        }
        SpectralField::new(self.grid, self.modes, self.project(gf.values()))
    }

    fn check_field(&self, sf: &SpectralField) -> Result<()> {
        self.grid.check_same(sf.grid())?;
        if sf.modes() != self.modes {
            return Err(Error::InvalidArgument(format!(
                "basis has {} modes, field has {}",
                self.modes,
                sf.modes()
            )));
        }
        Ok(())
    }
}

/// Spectral coefficients of a zero-trace grid function, `K` modes per axis.
pub fn analyze(gf: &GridFunction, modes: usize) -> Result<SpectralField> {
    SineBasis::new(*gf.grid(), modes)?.analyze(gf)
}

pub fn synthesize(sf: &SpectralField) -> GridFunction {
    SineBasis::new(*sf.grid(), sf.modes())
        .expect("a valid SpectralField always has a valid mode count")
        .synthesize(sf.coeffs())
}

/// `(Σ_k (1+λ_k)^s c_k²)^{1/2}`; `s < 0` is the dual weighting.
pub fn sobolev_norm(sf: &SpectralField, s: f64) -> f64 {
    sf.eigenvalues()
        .iter()
        .zip(sf.coeffs())
        .map(|(l, c)| (1.0 + l).powf(s) * c * c)
        .sum::<f64>()
        .sqrt()
}

/// Trapezoid `∫ a b`.
pub fn l2_inner(a: &GridFunction, b: &GridFunction) -> Result<f64> {
    a.grid.check_same(&b.grid)?;
    Ok(a.grid
        .quadrature_weights()
        .iter()
        .zip(a.values.iter().zip(&b.values))
        .map(|(w, (x, y))| w * x * y)
        .sum())
}

pub fn l2_norm(a: &GridFunction) -> f64 {
    a.grid
        .quadrature_weights()
        .iter()
        .zip(&a.values)
        .map(|(w, x)| w * x * x)
        .sum::<f64>()
        .sqrt()
}

pub fn l2_distance(a: &GridFunction, b: &GridFunction) -> Result<f64> {
    a.grid.check_same(&b.grid)?;
    Ok(a.grid
        .quadrature_weights()
        .iter()
        .zip(a.values.iter().zip(&b.values))
        .map(|(w, (x, y))| w * (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

pub fn sup_distance(a: &GridFunction, b: &GridFunction) -> Result<f64> {
    a.grid.check_same(&b.grid)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs())))
}

/// Nodal partial derivative along `axis`: centered in the interior,
/// one-sided on the boundary.
pub fn nodal_derivative(gf: &GridFunction, axis: usize) -> GridFunction {
    let g = *gf.grid();
    let h = g.h();
    let last = g.n() + 1;
    let v = gf.values();
    let values = (0..g.len())
        .map(|p| {
            let (ix, iy) = g.multi(p);
            let i = if axis == 0 { ix } else { iy };
            let idx = |i: usize| if axis == 0 { g.flat(i, iy) } else { g.flat(ix, i) };
            if i == 0 {
                (v[idx(1)] - v[idx(0)]) / h
            } else if i == last {
                (v[idx(last)] - v[idx(last - 1)]) / h
            } else {
                (v[idx(i + 1)] - v[idx(i - 1)]) / (2.0 * h)
            }
        })
        .collect();
    GridFunction { grid: g, values }
}

/// `sup|v| + max_axis sup|∂v|` with nodal centered differences.
pub fn c1_norm(gf: &GridFunction) -> f64 {
    let grad = (0..gf.grid().dim())
        .map(|a| nodal_derivative(gf, a).sup_norm())
        .fold(0.0, f64::max);
    gf.sup_norm() + grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn phi(k: f64) -> impl Fn(&[f64]) -> f64 {
        move |x: &[f64]| SQRT_2 * (k * PI * x[0]).sin()
    }

    #[test]
    fn grid_sizes() {
        let g = build_grid(1, 3).unwrap();
        assert_eq!(g.h(), 0.25);
        assert_eq!(g.len(), 5);
        let g = build_grid(2, 7).unwrap();
        assert_eq!(g.h(), 0.125);
        assert_eq!(g.len(), 81);
        assert!(build_grid(1, 2).is_err());
        assert!(build_grid(3, 8).is_err());
        assert!(build_grid(0, 8).is_err());
    }

    #[test]
    fn grid_spacing_closes_the_interval() {
        for n in [3, 7, 15, 63, 127, 255] {
            let g = build_grid(1, n).unwrap();
            assert_eq!(g.h() * (n + 1) as f64, 1.0);
        }
        for n in 3..400 {
            let g = build_grid(1, n).unwrap();
            assert_eq!(g.coord(n + 1), 1.0);
            assert!((g.h() * (n + 1) as f64 - 1.0).abs() <= f64::EPSILON);
        }
    }

    #[test]
    fn boundary_flags_2d() {
        let g = build_grid(2, 3).unwrap();
        let boundary = (0..g.len()).filter(|p| g.is_boundary(*p)).count();
        assert_eq!(boundary, 25 - 9);
        assert_eq!(g.interior_len(), 9);
    }

    #[test]
    fn analyze_first_mode() {
        let g = build_grid(1, 64).unwrap();
        let sf = analyze(&GridFunction::from_fn(g, phi(1.0)), 4).unwrap();
        assert_abs_diff_eq!(sf.coeffs()[0], 1.0, epsilon = 1e-12);
        for c in &sf.coeffs()[1..] {
            assert_abs_diff_eq!(*c, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn analyze_zero_and_scaled_mode() {
        let g = build_grid(1, 256).unwrap();
        let sf = analyze(&GridFunction::zeros(g), 6).unwrap();
        assert!(sf.coeffs().iter().all(|c| *c == 0.0));

        let two_phi3 = GridFunction::from_fn(g, |x| 2.0 * phi(3.0)(x));
        let sf = analyze(&two_phi3, 6).unwrap();
        assert!((sf.coeffs()[2] - 2.0).abs() <= 1e-3);
        for (k, c) in sf.coeffs().iter().enumerate() {
            if k != 2 {
                assert!(c.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn analyze_rejects_nonzero_trace() {
        let g = build_grid(1, 16).unwrap();
        let gf = GridFunction::constant(g, 1.0);
        assert!(matches!(analyze(&gf, 4), Err(Error::NonZeroTrace { .. })));
    }

    #[test]
    fn synthesize_basics() {
        let g = build_grid(1, 32).unwrap();
        let mut c = vec![0.0; 5];
        c[0] = 1.0;
        let sf = SpectralField::new(g, 5, c).unwrap();
        let gf = synthesize(&sf);
        let expected = GridFunction::from_fn(g, phi(1.0));
        assert!(sup_distance(&gf, &expected).unwrap() < 1e-14);
        assert_eq!(gf.values()[0], 0.0);
        assert_eq!(gf.values()[33], 0.0);

        let zero = synthesize(&SpectralField::zeros(g, 5).unwrap());
        assert!(zero.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn round_trip_2d() {
        let g = build_grid(2, 20).unwrap();
        let coeffs: Vec<f64> = (0..36).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let sf = SpectralField::new(g, 6, coeffs).unwrap();
        let back = analyze(&synthesize(&sf), 6).unwrap();
        for (a, b) in back.coeffs().iter().zip(sf.coeffs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sobolev_norm_closed_forms() {
        let g = build_grid(1, 16).unwrap();
        let sf = SpectralField::new(g, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(sobolev_norm(&sf, 0.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sobolev_norm(&sf, 1.0), (1.0 + PI * PI).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(sobolev_norm(&sf, 1.0), 3.2969, epsilon = 1e-4);
        assert_abs_diff_eq!(sobolev_norm(&sf, -1.0), 0.3033, epsilon = 1e-4);
    }

    #[test]
    fn l2_and_sup_distances() {
        let g = build_grid(1, 256).unwrap();
        let zero = GridFunction::zeros(g);
        let p1 = GridFunction::from_fn(g, phi(1.0));
        assert_eq!(l2_distance(&p1, &p1).unwrap(), 0.0);
        assert_abs_diff_eq!(l2_distance(&p1, &zero).unwrap(), 1.0, epsilon = 1e-10);
        let bump = GridFunction::from_fn(g, |x| x[0] * (1.0 - x[0]));
        assert_abs_diff_eq!(l2_distance(&bump, &zero).unwrap(), (1.0f64 / 30.0).sqrt(), epsilon = 1e-5);

        assert_eq!(sup_distance(&p1, &p1).unwrap(), 0.0);
        assert_abs_diff_eq!(sup_distance(&p1, &zero).unwrap(), SQRT_2, epsilon = 1e-4);
        // odd n puts x = 1/2 on a node
        let g = build_grid(1, 255).unwrap();
        let parabola = GridFunction::from_fn(g, |x| x[0] * x[0] - x[0]);
        assert_abs_diff_eq!(sup_distance(&parabola, &GridFunction::zeros(g)).unwrap(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn distances_reject_grid_mismatch() {
        let a = GridFunction::zeros(build_grid(1, 8).unwrap());
        let b = GridFunction::zeros(build_grid(1, 9).unwrap());
        assert!(matches!(l2_distance(&a, &b), Err(Error::GridMismatch { .. })));
        assert!(matches!(sup_distance(&a, &b), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn stencil_reproduces_linears() {
        let g = build_grid(1, 4).unwrap();
        let u = GridFunction::from_fn(g, |x| x[0]);
        assert_abs_diff_eq!(u.interpolate(&[0.3]).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(u.interpolate(&[1.0]).unwrap(), 1.0);
        assert!(u.interpolate(&[1.5]).is_err());
        assert!(u.interpolate(&[-0.1]).is_err());

        let g2 = build_grid(2, 5).unwrap();
        let u2 = GridFunction::from_fn(g2, |x| 2.0 * x[0] - x[1] + 0.5);
        assert_abs_diff_eq!(u2.interpolate(&[0.37, 0.81]).unwrap(), 2.0 * 0.37 - 0.81 + 0.5, epsilon = 1e-14);
    }

    #[test]
    fn nodal_derivative_exact_on_quadratics_interior() {
        let g = build_grid(1, 10).unwrap();
        let u = GridFunction::from_fn(g, |x| x[0] * x[0]);
        let du = nodal_derivative(&u, 0);
        for i in 1..=10 {
            assert_abs_diff_eq!(du.values()[i], 2.0 * g.coord(i), epsilon = 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let g = build_grid(2, 4).unwrap();
        let u = GridFunction::from_fn(g, |x| x[0] - 0.3 * x[1]);
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,y,value\n"));
        let back = GridFunction::read_csv(g, buf.as_slice()).unwrap();
        assert_eq!(back, u);
    }

    #[test]
    fn spectral_json_layout() {
        let g = build_grid(1, 8).unwrap();
        let sf = SpectralField::new(g, 2, vec![0.5, -1.0]).unwrap();
        let json = serde_json::to_value(&sf).unwrap();
        assert_eq!(json["dim"], 1);
        assert_eq!(json["n"], 8);
        assert_eq!(json["K"], 2);
        let back: SpectralField = serde_json::from_value(json).unwrap();
        assert_eq!(back, sf);
        let bad = serde_json::json!({"dim": 1, "n": 8, "K": 2, "coeffs": [1.0]});
        assert!(serde_json::from_value::<SpectralField>(bad).is_err());
    }
}
