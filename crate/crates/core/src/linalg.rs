//! Symmetric sparse systems on the interior unknowns of a grid.
//!
//! Two solvers sit behind one type: Jacobi-preconditioned conjugate gradients
//! and a banded Cholesky factorization. The banded solve is exact to round-off
//! and smooth in the matrix entries, which the finite-difference gradient
//! checks rely on; CG is used when the band is too wide to factor cheaply.

use crate::error::{Error, Result};

/// Relative residual target for conjugate gradients.
pub const CG_TOL: f64 = 1e-12;
/// Iteration cap is this factor times the number of unknowns.
pub const CG_CAP_FACTOR: usize = 20;
/// Above this many flops (unknowns × bandwidth²) the automatic choice is CG.
const DIRECT_FLOP_BUDGET: f64 = 5e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    /// Banded Cholesky when affordable, CG otherwise.
    #[default]
    Auto,
    Direct,
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Symmetric matrix in compressed-row form.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    size: usize,
    bandwidth: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Row-by-row assembly helper; entries within a row may repeat and are summed.
#[derive(Debug)]
pub struct OperatorBuilder {
    size: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl OperatorBuilder {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            rows: vec![Vec::with_capacity(5); size],
        }
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        self.rows[row].push((col, value));
    }

    pub fn build(self) -> SparseOperator {
        let mut row_ptr = Vec::with_capacity(self.size + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut bandwidth = 0;
        row_ptr.push(0);
        for (r, mut entries) in self.rows.into_iter().enumerate() {
            entries.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in entries {
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                    bandwidth = bandwidth.max(r.abs_diff(c));
                }
            }
            row_ptr.push(cols.len());
        }
        SparseOperator {
            size: self.size,
            bandwidth,
            row_ptr,
            cols,
            vals,
        }
    }
}

impl SparseOperator {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.size)
            .map(|r| self.row(r).find(|(c, _)| *c == r).map_or(0.0, |(_, v)| v))
            .collect()
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.size) {
            *o = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.size).all(|r| {
            self.row(r).all(|(c, v)| {
                let vt = self.row(c).find(|(cc, _)| *cc == r).map_or(0.0, |(_, v)| v);
                (v - vt).abs() <= tol * v.abs().max(1.0)
            })
        })
    }

    pub fn relative_residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.size];
        self.matvec(x, &mut ax);
        let num: f64 = ax.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    pub fn solve(&self, b: &[f64], kind: SolverKind) -> Result<(Vec<f64>, SolveStats)> {
        match self.resolve_kind(kind) {
            SolverKind::ConjugateGradient => self.solve_cg(b),
            _ => {
                let x = BandedCholesky::factor(self)?.solve(b);
                let relative_residual = self.relative_residual(&x, b);
                Ok((
                    x,
                    SolveStats {
                        iterations: 1,
                        relative_residual,
                    },
                ))
            }
        }
    }

    fn resolve_kind(&self, kind: SolverKind) -> SolverKind {
        match kind {
            SolverKind::Auto => {
                let cost = self.size as f64 * (self.bandwidth as f64 + 1.0).powi(2);
                if cost <= DIRECT_FLOP_BUDGET {
                    SolverKind::Direct
                } else {
                    SolverKind::ConjugateGradient
                }
            }
            k => k,
        }
    }

    /// Jacobi-preconditioned conjugate gradients from a zero start.
    pub fn solve_cg(&self, b: &[f64]) -> Result<(Vec<f64>, SolveStats)> {
        let n = self.size;
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut x = vec![0.0; n];
        if bnorm == 0.0 {
            return Ok((
                x,
                SolveStats {
                    iterations: 0,
                    relative_residual: 0.0,
                },
            ));
        }
        let inv_diag: Vec<f64> = self
            .diagonal()
            .iter()
            .map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 })
            .collect();
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let cap = CG_CAP_FACTOR * n.max(1);
        let mut rel = 1.0;
        for it in 1..=cap {
            self.matvec(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                return Err(Error::NotPositiveDefinite { row: 0, pivot: pap });
            }
            let step = rz / pap;
            for i in 0..n {
                x[i] += step * p[i];
                r[i] -= step * ap[i];
            }
            rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
            if rel <= CG_TOL {
                return Ok((
                    x,
                    SolveStats {
                        iterations: it,
                        relative_residual: rel,
                    },
                ));
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(Error::SolverDiverged {
            iterations: cap,
            residual: rel,
        })
    }
}

/// Lower-triangular band factor `A = L Lᵀ`.
struct BandedCholesky {
    size: usize,
    bw: usize,
    /// `band[i * (bw+1) + (bw - (i - j))] = L[i][j]` for `i - bw <= j <= i`
    band: Vec<f64>,
}

impl BandedCholesky {
    fn factor(a: &SparseOperator) -> Result<Self> {
        let n = a.size;
        let bw = a.bandwidth;
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    band[i * w + (bw - (i - j))] = v;
                }
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                // L[i][j] = (A[i][j] - Σ_k L[i][k] L[j][k]) / L[j][j]
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = band[i * w + (bw - (i - j))];
                for k in k0..j {
                    s -= band[i * w + (bw - (i - k))] * band[j * w + (bw - (j - k))];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { row: i, pivot: s });
                    }
                    band[i * w + bw] = s.sqrt();
                } else {
                    band[i * w + (bw - (i - j))] = s / band[j * w + bw];
                }
            }
        }
        Ok(Self { size: n, bw, band })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.size, self.bw, self.bw + 1);
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.band[i * w + (bw - (i - k))] * y[k];
            }
            y[i] = s / self.band[i * w + bw];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.band[k * w + (bw - (k - i))] * y[k];
            }
            y[i] = s / self.band[i * w + bw];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> SparseOperator {
        let mut b = OperatorBuilder::new(n);
        for i in 0..n {
            b.add(i, i, 2.0);
            if i > 0 {
                b.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                b.add(i, i + 1, -1.0);
            }
        }
        b.build()
    }

    fn laplacian_2d(m: usize) -> SparseOperator {
        let mut b = OperatorBuilder::new(m * m);
        for j in 0..m {
            for i in 0..m {
                let p = i + m * j;
                b.add(p, p, 4.0);
                if i > 0 {
                    b.add(p, p - 1, -1.0);
                }
                if i + 1 < m {
                    b.add(p, p + 1, -1.0);
                }
                if j > 0 {
                    b.add(p, p - m, -1.0);
                }
                if j + 1 < m {
                    b.add(p, p + m, -1.0);
                }
            }
        }
        b.build()
    }

    #[test]
    fn builder_sums_duplicates_and_tracks_band() {
        let mut b = OperatorBuilder::new(3);
        b.add(0, 0, 1.0);
        b.add(0, 0, 2.0);
        b.add(2, 0, 0.5);
        b.add(0, 2, 0.5);
        let a = b.build();
        assert_eq!(a.diagonal()[0], 3.0);
        assert_eq!(a.bandwidth(), 2);
        assert!(a.is_symmetric(0.0));
    }

    #[test]
    fn direct_and_cg_agree() {
        for a in [laplacian_1d(50), laplacian_2d(12)] {
            let b: Vec<f64> = (0..a.size()).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect();
            let (xd, sd) = a.solve(&b, SolverKind::Direct).unwrap();
            let (xc, sc) = a.solve(&b, SolverKind::ConjugateGradient).unwrap();
            assert!(sd.relative_residual < 1e-12);
            assert!(sc.relative_residual <= CG_TOL);
            let diff = xd.iter().zip(&xc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-8, "diff {diff}");
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut b = OperatorBuilder::new(2);
        b.add(0, 0, 1.0);
        b.add(1, 1, -1.0);
        let a = b.build();
        assert!(matches!(a.solve(&[1.0, 1.0], SolverKind::Direct), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = laplacian_1d(10);
        let (x, stats) = a.solve_cg(&[0.0; 10]).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
        assert_eq!(stats.iterations, 0);
    }
}
