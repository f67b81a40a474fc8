//! The statistical layer: forward map `θ ↦ u_{Ψ∘θ}`, random-design data,
//! ground-truth synthesis and the `d_r²` loss.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnspace::{self, Grid, GridFunction, SineBasis, SpectralField};
use crate::link::LinkFunction;
use crate::pde::{DarcyProblem, ObservationOperator, PdeKind, PdeProblem, SchrodingerProblem};
use crate::rng::substream;

/// Default Darcy source amplitude: `g = 10 sin(πx)` (`10 sin(πx) sin(πy)` in 2D).
pub const DEFAULT_SOURCE_AMPLITUDE: f64 = 10.0;
pub const DEFAULT_DARCY_FLOOR: f64 = 0.5;
pub const DEFAULT_SCHRODINGER_FLOOR: f64 = 0.05;

/// Forward map `G(θ) = G_PDE(Ψ∘θ)` on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardProblem {
    pde: PdeProblem,
    link: LinkFunction,
}

impl ForwardProblem {
    pub fn new(pde: PdeProblem, link: LinkFunction) -> Result<Self> {
        if let PdeProblem::Darcy(p) = &pde {
            if link.f_min() < p.f_min() {
                return Err(Error::InvalidArgument(format!(
                    "link floor {} is below the Darcy admissibility floor {}",
                    link.f_min(),
                    p.f_min()
                )));
            }
        }
        Ok(Self { pde, link })
    }

    /// Darcy with a sine source of the given amplitude.
    pub fn darcy(grid: Grid, amplitude: f64, link: LinkFunction) -> Result<Self> {
        let source = DarcyProblem::sine_source(grid, amplitude);
        Self::new(PdeProblem::Darcy(DarcyProblem::new(source, link.f_min())?), link)
    }

    /// Schrödinger with constant boundary values.
    pub fn schrodinger(grid: Grid, boundary_value: f64, link: LinkFunction) -> Result<Self> {
        Self::new(
            PdeProblem::Schrodinger(SchrodingerProblem::constant_boundary(grid, boundary_value)?),
            link,
        )
    }

    pub fn default_darcy(grid: Grid) -> Result<Self> {
        Self::darcy(grid, DEFAULT_SOURCE_AMPLITUDE, LinkFunction::with_floor(DEFAULT_DARCY_FLOOR)?)
    }

    pub fn default_schrodinger(grid: Grid) -> Result<Self> {
        Self::schrodinger(grid, 1.0, LinkFunction::with_floor(DEFAULT_SCHRODINGER_FLOOR)?)
    }

    pub fn pde(&self) -> &PdeProblem {
        &self.pde
    }

    pub fn kind(&self) -> PdeKind {
        self.pde.kind()
    }

    pub fn link(&self) -> &LinkFunction {
        &self.link
    }

    pub fn grid(&self) -> &Grid {
        self.pde.grid()
    }

    /// `f = Ψ∘θ` on the grid.
    pub fn coefficient(&self, theta: &SpectralField) -> Result<GridFunction> {
        self.grid().check_same(theta.grid())?;
        Ok(self.link.apply_field(&fnspace::synthesize(theta)))
    }

    pub fn forward(&self, theta: &SpectralField) -> Result<GridFunction> {
        self.pde.solve(&self.coefficient(theta)?)
    }

    /// Forward map using a pre-tabulated basis.
    pub fn forward_with(&self, basis: &SineBasis, coeffs: &[f64]) -> Result<GridFunction> {
        self.pde.solve(&self.link.apply_field(&basis.synthesize(coeffs)))
    }
}

pub fn forward(fp: &ForwardProblem, theta: &SpectralField) -> Result<GridFunction> {
    fp.forward(theta)
}

/// Design points with noisy responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    /// Points stored back to back, `dim` coordinates each.
    coords: Vec<f64>,
    responses: Vec<f64>,
    sigma: f64,
    seed: u64,
}

/// JSON sidecar written next to the CSV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub dim: usize,
    pub n_obs: usize,
    pub sigma: f64,
    pub seed: u64,
    pub kind: PdeKind,
}

impl Dataset {
    pub fn new(dim: usize, coords: Vec<f64>, responses: Vec<f64>, sigma: f64, seed: u64) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidArgument(format!("dimension must be 1 or 2, got {dim}")));
        }
        if coords.len() != dim * responses.len() {
            return Err(Error::InvalidArgument(format!(
                "{} coordinates do not match {} responses in {dim}D",
                coords.len(),
                responses.len()
            )));
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be nonnegative, got {sigma}")));
        }
        if let Some(c) = coords.iter().find(|c| !(**c > 0.0 && **c < 1.0)) {
            return Err(Error::InvalidArgument(format!("design coordinate {c} is not strictly interior")));
        }
        Ok(Self {
            dim,
            coords,
            responses,
            sigma,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// σ used to weight the misfit; noiseless data fall back to 1.
    pub fn noise_scale(&self) -> f64 {
        if self.sigma > 0.0 {
            self.sigma
        } else {
            1.0
        }
    }

    pub fn with_responses(&self, responses: Vec<f64>) -> Result<Self> {
        Self::new(self.dim, self.coords.clone(), responses, self.sigma, self.seed)
    }

    pub fn meta(&self, kind: PdeKind) -> DatasetMeta {
        DatasetMeta {
            dim: self.dim,
            n_obs: self.len(),
            sigma: self.sigma,
            seed: self.seed,
            kind,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.dim == 1 {
            w.write_record(["x", "response"])?;
        } else {
            w.write_record(["x", "y", "response"])?;
        }
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.point(i).iter().map(|c| c.to_string()).collect();
            rec.push(self.responses[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, meta: &DatasetMeta) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut coords = Vec::new();
        let mut responses = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != meta.dim + 1 {
                return Err(Error::InvalidArgument(format!(
                    "dataset row has {} columns, expected {}",
                    rec.len(),
                    meta.dim + 1
                )));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
            };
            for j in 0..meta.dim {
                coords.push(parse(&rec[j])?);
            }
            responses.push(parse(&rec[meta.dim])?);
        }
        if responses.len() != meta.n_obs {
            return Err(Error::InvalidArgument(format!(
                "sidecar declares {} observations, table has {}",
                meta.n_obs,
                responses.len()
            )));
        }
        Self::new(meta.dim, coords, responses, meta.sigma, meta.seed)
    }

    /// Write `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str, kind: PdeKind) -> Result<()> {
        let dir = dir.as_ref();
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        let meta = serde_json::to_string_pretty(&self.meta(kind))?;
        std::fs::write(dir.join(format!("{stem}.json")), meta + "\n")?;
        Ok(())
    }

    pub fn load(csv_path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        Self::read_csv(std::fs::File::open(csv_path)?, &meta)
    }
}

/// Draw `N` uniform design points and noisy responses from `truth`.
pub fn generate_dataset(
    fp: &ForwardProblem,
    truth: &GroundTruth,
    n_obs: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_obs == 0 {
        return Err(Error::InvalidArgument("need at least one observation".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be nonnegative, got {sigma}")));
    }
    let grid = *fp.grid();
    let dim = grid.dim();
    let mut design = substream(seed, "design", 0);
    let mut coords = Vec::with_capacity(n_obs * dim);
    for _ in 0..n_obs * dim {
        // uniform on the open interval
        let c = loop {
            let c: f64 = design.random();
            if c > 0.0 {
                break c;
            }
        };
        coords.push(c);
    }
    let u = fp.forward(&truth.theta)?;
    let obs = ObservationOperator::new(grid, &coords)?;
    let mut noise = substream(seed, "noise", 0);
    let responses = obs
        .apply(u.values())
        .into_iter()
        .map(|m| {
            let e: f64 = noise.sample(StandardNormal);
            if sigma > 0.0 {
                m + sigma * e
            } else {
                m
            }
        })
        .collect();
    Dataset::new(dim, coords, responses, sigma, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub theta: SpectralField,
    pub f: GridFunction,
    pub alpha: f64,
    pub norm_bound: f64,
}

impl GroundTruth {
    pub fn from_theta(fp: &ForwardProblem, theta: SpectralField, alpha: f64) -> Result<Self> {
        let f = fp.coefficient(&theta)?;
        let norm_bound = fnspace::sobolev_norm(&theta, alpha);
        Ok(Self {
            theta,
            f,
            alpha,
            norm_bound,
        })
    }

    /// `Π_K θ_o`, zero-padded or truncated to `modes`.
    pub fn projected(&self, modes: usize) -> Result<SpectralField> {
        self.theta.resized(modes)
    }

    /// `‖θ_o − Π_K θ_o‖_{L²}`.
    pub fn truncation_error(&self, modes: usize) -> Result<f64> {
        let back = self.projected(modes)?.resized(self.theta.modes())?;
        Ok(fnspace::sobolev_norm(&self.theta.sub(&back)?, 0.0))
    }
}

/// Ground truth with coefficients `s_k (1+λ_k)^{−(α+0.51)/2}`, random signs,
/// rescaled to `‖θ_o‖_{H^α} = radius`.
pub fn synthesize_truth(
    fp: &ForwardProblem,
    alpha: f64,
    modes: usize,
    seed: u64,
    radius: f64,
) -> Result<GroundTruth> {
    let grid = *fp.grid();
    if !(alpha > grid.dim() as f64 / 2.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha = {alpha} must exceed d/2 = {}",
            grid.dim() as f64 / 2.0
        )));
    }
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be nonnegative, got {radius}")));
    }
    let mut rng = substream(seed, "truth", 0);
    let decay = -(alpha + 0.5 + 0.01) / 2.0;
    let coeffs: Vec<f64> = fnspace::eigenvalues(grid.dim(), modes)
        .iter()
        .map(|l| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * (1.0 + l).powf(decay)
        })
        .collect();
    let mut theta = SpectralField::new(grid, modes, coeffs)?;
    let norm = fnspace::sobolev_norm(&theta, alpha);
    let scale = radius / norm;
    theta.coeffs_mut().iter_mut().for_each(|c| *c *= scale);
    let mut truth = GroundTruth::from_theta(fp, theta, alpha)?;
    truth.norm_bound = radius;
    Ok(truth)
}

/// `‖G(θ₁) − G(θ₂)‖²_{L²} + r² ‖θ₁‖²_{H^α}`.
pub fn d_r2(fp: &ForwardProblem, theta1: &SpectralField, theta2: &SpectralField, r: f64, alpha: f64) -> Result<f64> {
    let pred = fnspace::l2_distance(&fp.forward(theta1)?, &fp.forward(theta2)?)?;
    Ok(pred * pred + r * r * fnspace::sobolev_norm(theta1, alpha).powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fnspace::{build_grid, sobolev_norm, sup_distance};

    fn darcy_1d(n: usize) -> ForwardProblem {
        ForwardProblem::default_darcy(build_grid(1, n).unwrap()).unwrap()
    }

    #[test]
    fn forward_at_zero_is_unit_coefficient_solve() {
        let fp = darcy_1d(32);
        let zero = SpectralField::zeros(*fp.grid(), 4).unwrap();
        let u = fp.forward(&zero).unwrap();
        let direct = fp.pde().solve(&GridFunction::constant(*fp.grid(), 1.0)).unwrap();
        assert_eq!(u, direct);
    }

    #[test]
    fn forward_is_deterministic() {
        let fp = darcy_1d(40);
        let theta = SpectralField::new(*fp.grid(), 3, vec![0.3, -0.2, 0.1]).unwrap();
        let a = fp.forward(&theta).unwrap();
        let b = fp.forward(&theta).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn schrodinger_small_potential_near_harmonic() {
        let grid = build_grid(1, 64).unwrap();
        let fp = ForwardProblem::default_schrodinger(grid).unwrap();
        // very negative θ drives Ψ∘θ towards the floor 0.05
        let theta = SpectralField::new(grid, 1, vec![-1.0]).unwrap();
        let f = fp.coefficient(&theta).unwrap();
        let u = fp.forward(&theta).unwrap();
        let harmonic = fp.pde().solve(&GridFunction::zeros(grid)).unwrap();
        // ½u'' = f u, |u − 1| ≤ ‖f‖_∞ · max_x x(1−x) = ‖f‖_∞ / 4 for g ≡ 1
        let gap = sup_distance(&u, &harmonic).unwrap();
        assert!(gap <= f.sup_norm() / 4.0 + 1e-12, "gap {gap}");
    }

    #[test]
    fn noiseless_dataset_matches_forward() {
        let fp = darcy_1d(32);
        let truth = synthesize_truth(&fp, 2.0, 4, 3, 1.0).unwrap();
        let data = generate_dataset(&fp, &truth, 50, 0.0, 11).unwrap();
        let u = fp.forward(&truth.theta).unwrap();
        for i in 0..data.len() {
            assert_eq!(data.responses()[i], u.interpolate(data.point(i)).unwrap());
        }
        assert_eq!(data, generate_dataset(&fp, &truth, 50, 0.0, 11).unwrap());
        assert_ne!(data, generate_dataset(&fp, &truth, 50, 0.0, 12).unwrap());
    }

    #[test]
    fn noise_mean_within_clt_bound() {
        let fp = darcy_1d(32);
        let truth = synthesize_truth(&fp, 2.0, 4, 3, 1.0).unwrap();
        let n = 100_000;
        let sigma = 0.3;
        let clean = generate_dataset(&fp, &truth, n, 0.0, 5).unwrap();
        let noisy = generate_dataset(&fp, &truth, n, sigma, 5).unwrap();
        assert_eq!(clean.coords(), noisy.coords());
        let mean = noisy
            .responses()
            .iter()
            .zip(clean.responses())
            .map(|(a, b)| a - b)
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() <= 4.0 * sigma / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn truth_construction() {
        let fp = darcy_1d(64);
        let zero = synthesize_truth(&fp, 2.0, 8, 1, 0.0).unwrap();
        assert!(zero.theta.coeffs().iter().all(|c| *c == 0.0));
        assert!(zero.f.values().iter().all(|v| *v == 1.0));

        let t = synthesize_truth(&fp, 2.0, 8, 1, 1.7).unwrap();
        assert!((sobolev_norm(&t.theta, 2.0) - 1.7).abs() < 1e-10);
        assert!(t.f.min() > fp.link().f_min());

        let norms: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|k| sobolev_norm(&synthesize_truth(&fp, 2.0, *k, 1, 1.0).unwrap().theta, 3.0))
            .collect();
        assert!(norms[0] < norms[1] && norms[1] < norms[2], "{norms:?}");
    }

    #[test]
    fn truth_requires_smoothness_above_half_dimension() {
        let fp = ForwardProblem::default_darcy(build_grid(2, 8).unwrap()).unwrap();
        assert!(synthesize_truth(&fp, 1.0, 4, 1, 1.0).is_err());
        assert!(synthesize_truth(&fp, 1.5, 4, 1, 1.0).is_ok());
    }

    #[test]
    fn d_r2_cases() {
        let fp = darcy_1d(32);
        let g = *fp.grid();
        let a = SpectralField::new(g, 3, vec![0.2, 0.1, -0.05]).unwrap();
        let b = SpectralField::new(g, 3, vec![-0.1, 0.0, 0.02]).unwrap();
        let na = sobolev_norm(&a, 2.0);
        assert!((d_r2(&fp, &a, &a, 0.3, 2.0).unwrap() - 0.09 * na * na).abs() < 1e-14);
        let pred = fnspace::l2_distance(&fp.forward(&a).unwrap(), &fp.forward(&b).unwrap()).unwrap();
        assert!((d_r2(&fp, &a, &b, 0.0, 2.0).unwrap() - pred * pred).abs() < 1e-15);
        assert_ne!(d_r2(&fp, &a, &b, 0.3, 2.0).unwrap(), d_r2(&fp, &b, &a, 0.3, 2.0).unwrap());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let data = Dataset::new(2, vec![0.1, 0.2, 0.3, 0.4], vec![1.5, -2.0], 0.1, 9).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x,y,response\n"));
        let back = Dataset::read_csv(buf.as_slice(), &data.meta(PdeKind::Darcy)).unwrap();
        assert_eq!(back, data);
        assert!(Dataset::new(1, vec![0.0], vec![1.0], 0.1, 0).is_err());
    }
}
