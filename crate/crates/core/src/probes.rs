//! Empirical checks of the forward-map regularity conditions.
//!
//! Each ratio probe samples pairs `(θ₁, θ₂)` from an `H^α` ball, with
//! separations spread log-uniformly over four decades, and reports the
//! largest normalized ratio. A bounded ratio that does not grow as the pairs
//! get closer is the observable content of a Lipschitz-type condition.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::loglog_fit;
use crate::fnspace::{self, c1_norm, sobolev_norm, SineBasis, SpectralField};
use crate::model::ForwardProblem;
use crate::pde::PdeKind;
use crate::rng::{substream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub alpha: f64,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_modes", rename = "K")]
    pub modes: usize,
    /// `H^α` radius of the sampling ball.
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_pairs() -> usize {
    200
}

fn default_modes() -> usize {
    8
}

fn default_radius() -> f64 {
    1.0
}

impl ProbeConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            pairs: default_pairs(),
            modes: default_modes(),
            radius: default_radius(),
            seed: 0,
        }
    }
}

/// One sampled pair: separation in the probe's norm and the normalized ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSample {
    pub distance: f64,
    pub ratio: f64,
}

/// Most negative tolerated log-log slope of ratio against separation.
pub const MAX_TREND: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioProbe {
    pub name: String,
    pub max_ratio: f64,
    /// Largest ratio among the closest tenth of the pairs.
    pub closest_decile_max: f64,
    /// Largest ratio among the other pairs.
    pub rest_max: f64,
    /// Slope of `log ratio` against `log distance`; clearly negative when the
    /// ratio grows as pairs approach each other.
    pub trend: f64,
    pub samples: Vec<RatioSample>,
}

impl RatioProbe {
    fn from_samples(name: &str, mut samples: Vec<RatioSample>) -> Result<Self> {
        if samples.len() < 10 {
            return Err(Error::InvalidArgument(format!("{name} probe needs at least 10 pairs")));
        }
        if let Some(s) = samples.iter().find(|s| !s.ratio.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{name} probe produced a non-finite ratio at distance {}",
                s.distance
            )));
        }
        samples.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        let cut = samples.len().div_ceil(10);
        let max = |s: &[RatioSample]| s.iter().map(|s| s.ratio).fold(0.0, f64::max);
        let positive: Vec<&RatioSample> = samples.iter().filter(|s| s.ratio > 0.0 && s.distance > 0.0).collect();
        let trend = if positive.len() >= 2 {
            let d: Vec<f64> = positive.iter().map(|s| s.distance).collect();
            let r: Vec<f64> = positive.iter().map(|s| s.ratio).collect();
            loglog_fit(&d, &r).map(|f| f.0).unwrap_or(0.0)
        } else {
            0.0
        };
        Ok(Self {
            trend,
            name: name.to_string(),
            max_ratio: max(&samples),
            closest_decile_max: max(&samples[..cut]),
            rest_max: max(&samples[cut..]),
            samples,
        })
    }

    /// Finite maximum, closest decile within twice the overall maximum, and
    /// no growth of the ratio as the separation shrinks.
    pub fn bounded(&self) -> bool {
        self.max_ratio.is_finite() && self.closest_decile_max <= 2.0 * self.max_ratio && self.trend >= -MAX_TREND
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeProbe {
    /// Least-squares slope of `log ‖f₁ − f₂‖` against `log δ`.
    pub slope: f64,
    pub tau: f64,
    pub deltas: Vec<f64>,
    pub coefficient_gaps: Vec<f64>,
}

impl SlopeProbe {
    pub fn passes(&self) -> bool {
        self.slope >= self.tau - 0.15
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationProbe {
    pub alpha: f64,
    pub fields: usize,
    /// Largest `‖u‖_{H^β} / (‖u‖^{1−β/(α+1)} ‖u‖_{H^{α+1}}^{β/(α+1)})` over
    /// samples and `β ∈ {1, 2}`.
    pub max_constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropsReport {
    pub kind: PdeKind,
    pub alpha: f64,
    pub c1: RatioProbe,
    /// `sup |G(θ)| / ‖data‖_∞` over sampled `θ`.
    pub c2_max_ratio: f64,
    pub c3: RatioProbe,
    pub c7: SlopeProbe,
    pub interpolation: InterpolationProbe,
}

impl PropsReport {
    pub fn passes(&self) -> bool {
        self.c1.bounded()
            && self.c2_max_ratio.is_finite()
            && self.c3.bounded()
            && self.c7.passes()
            && self.interpolation.max_constant <= 1.0 + 1e-9
    }
}

/// Random field with `‖θ‖_{H^α} = radius`, spectrum decaying slightly faster
/// than the `H^α` borderline.
fn random_field(rng: &mut StreamRng, lambdas: &[f64], alpha: f64, radius: f64) -> Vec<f64> {
    let mut c: Vec<f64> = lambdas
        .iter()
        .map(|l| {
            let z: f64 = StandardNormal.sample(rng);
            z * (1.0 + l).powf(-(alpha + 0.51) / 2.0)
        })
        .collect();
    let norm = c
        .iter()
        .zip(lambdas)
        .map(|(c, l)| (1.0 + l).powf(alpha) * c * c)
        .sum::<f64>()
        .sqrt();
    c.iter_mut().for_each(|v| *v *= radius / norm);
    c
}

struct Pair {
    a: SpectralField,
    b: SpectralField,
}

fn sample_pairs(fp: &ForwardProblem, cfg: &ProbeConfig) -> Result<Vec<Pair>> {
    let grid = *fp.grid();
    let lambdas = fnspace::eigenvalues(grid.dim(), cfg.modes);
    let mut rng = substream(cfg.seed, "probe-pairs", 0);
    (0..cfg.pairs)
        .map(|_| {
            let r1 = cfg.radius * rng.random::<f64>();
            let base = random_field(&mut rng, &lambdas, cfg.alpha, r1);
            // separation log-uniform in [1e-4, 1] · radius
            let eps = cfg.radius * 10f64.powf(-4.0 * rng.random::<f64>());
            let dir = random_field(&mut rng, &lambdas, cfg.alpha, eps);
            let other = base.iter().zip(&dir).map(|(a, d)| a + d).collect();
            Ok(Pair {
                a: SpectralField::new(grid, cfg.modes, base)?,
                b: SpectralField::new(grid, cfg.modes, other)?,
            })
        })
        .collect()
}

/// C1: `‖G(θ₁)−G(θ₂)‖_{L²} / [(1 + max ‖θ‖⁴_{H^α}) ‖θ₁−θ₂‖_{(H^κ)*}]`.
pub fn c1_probe(fp: &ForwardProblem, cfg: &ProbeConfig) -> Result<RatioProbe> {
    let kappa = fp.kind().ill_posedness();
    let samples = sample_pairs(fp, cfg)?
        .iter()
        .map(|p| {
            let gap = fnspace::l2_distance(&fp.forward(&p.a)?, &fp.forward(&p.b)?)?;
            let size = sobolev_norm(&p.a, cfg.alpha).max(sobolev_norm(&p.b, cfg.alpha));
            let distance = sobolev_norm(&p.a.sub(&p.b)?, -kappa);
            Ok(RatioSample {
                distance,
                ratio: gap / ((1.0 + size.powi(4)) * distance),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RatioProbe::from_samples("C1", samples)
}

/// C2: `sup |G(θ)|` over both members of every pair, relative to `‖data‖_∞`.
pub fn c2_probe(fp: &ForwardProblem, cfg: &ProbeConfig) -> Result<f64> {
    let scale = fp.pde().data_sup();
    let mut worst = 0.0f64;
    for p in sample_pairs(fp, cfg)? {
        for theta in [&p.a, &p.b] {
            worst = worst.max(fp.forward(theta)?.sup_norm() / scale);
        }
    }
    Ok(worst)
}

/// C3: `‖G(θ₁)−G(θ₂)‖_∞ / [(1 + max ‖θ‖⁴_{C¹}) ‖θ₁−θ₂‖_{C¹}]` with nodal
/// values and finite-difference derivatives.
pub fn c3_probe(fp: &ForwardProblem, cfg: &ProbeConfig) -> Result<RatioProbe> {
    let basis = SineBasis::new(*fp.grid(), cfg.modes)?;
    let samples = sample_pairs(fp, cfg)?
        .iter()
        .map(|p| {
            let (ta, tb) = (basis.synthesize(p.a.coeffs()), basis.synthesize(p.b.coeffs()));
            let gap = fnspace::sup_distance(&fp.forward(&p.a)?, &fp.forward(&p.b)?)?;
            let size = c1_norm(&ta).max(c1_norm(&tb));
            let distance = c1_norm(&ta.zip_map(&tb, |x, y| x - y)?);
            Ok(RatioSample {
                distance,
                ratio: gap / ((1.0 + size.powi(4)) * distance),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RatioProbe::from_samples("C3", samples)
}

/// C7: single-mode perturbations `a_k φ_k` of random base fields, with
/// `a_k` on the `H^α` sphere of radius `radius/2` and amplitudes scaled over
/// two decades, so the ladder spans both frequency and size. The slope of
/// `log ‖f₁−f₂‖_{L²}` against `log ‖G(θ₁)−G(θ₂)‖_{L²}` is compared with `τ`.
pub fn c7_probe(fp: &ForwardProblem, cfg: &ProbeConfig) -> Result<SlopeProbe> {
    let grid = *fp.grid();
    let lambdas = fnspace::eigenvalues(grid.dim(), cfg.modes);
    let mut rng = substream(cfg.seed, "probe-c7", 0);
    let mut deltas = Vec::new();
    let mut gaps = Vec::new();
    for _ in 0..4 {
        let base = random_field(&mut rng, &lambdas, cfg.alpha, 0.5 * cfg.radius);
        let theta = SpectralField::new(grid, cfg.modes, base.clone())?;
        let (f1, u1) = (fp.coefficient(&theta)?, fp.forward(&theta)?);
        for (k, l) in lambdas.iter().enumerate() {
            for scale in [1.0, 0.1, 0.01] {
                let mut c = base.clone();
                c[k] += scale * 0.5 * cfg.radius * (1.0 + l).powf(-cfg.alpha / 2.0);
                let other = SpectralField::new(grid, cfg.modes, c)?;
                deltas.push(fnspace::l2_distance(&u1, &fp.forward(&other)?)?);
                gaps.push(fnspace::l2_distance(&f1, &fp.coefficient(&other)?)?);
            }
        }
    }
    let (slope, _) = loglog_fit(&deltas, &gaps)?;
    Ok(SlopeProbe {
        slope,
        tau: fp.kind().stability_exponent(cfg.alpha),
        deltas,
        coefficient_gaps: gaps,
    })
}

/// Interpolation inequality `‖u‖_{H^β} ≤ C ‖u‖^{1−β/(α+1)} ‖u‖_{H^{α+1}}^{β/(α+1)}`
/// over 100 random spectral fields with heavy-tailed spectra.
pub fn interpolation_probe(fp: &ForwardProblem, cfg: &ProbeConfig) -> Result<InterpolationProbe> {
    let grid = *fp.grid();
    let mut rng = substream(cfg.seed, "probe-interpolation", 0);
    let a1 = cfg.alpha + 1.0;
    let mut worst = 0.0f64;
    let fields = 100;
    for _ in 0..fields {
        let decay = rng.random_range(0.0..3.0);
        let c = (0..cfg.modes.pow(grid.dim() as u32))
            .map(|k| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / (1.0 + k as f64).powf(decay)
            })
            .collect();
        let u = SpectralField::new(grid, cfg.modes, c)?;
        let l2 = sobolev_norm(&u, 0.0);
        let top = sobolev_norm(&u, a1);
        for beta in [1.0, 2.0] {
            let bound = l2.powf((a1 - beta) / a1) * top.powf(beta / a1);
            worst = worst.max(sobolev_norm(&u, beta) / bound);
        }
    }
    Ok(InterpolationProbe {
        alpha: cfg.alpha,
        fields,
        max_constant: worst,
    })
}

pub fn run_props(fp: &ForwardProblem, cfg: &ProbeConfig) -> Result<PropsReport> {
    if cfg.modes == 0 || cfg.modes > fp.grid().n() {
        return Err(Error::InvalidArgument(format!("K = {} must lie in 1..={}", cfg.modes, fp.grid().n())));
    }
    Ok(PropsReport {
        kind: fp.kind(),
        alpha: cfg.alpha,
        c1: c1_probe(fp, cfg)?,
        c2_max_ratio: c2_probe(fp, cfg)?,
        c3: c3_probe(fp, cfg)?,
        c7: c7_probe(fp, cfg)?,
        interpolation: interpolation_probe(fp, cfg)?,
    })
}
