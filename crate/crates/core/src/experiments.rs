//! Replication campaigns: convergence-rate fits, concentration frequencies
//! and the stability bound, with CSV, JSON and SVG output.
//!
//! Every replicate draws its data from a seed derived from the campaign seed
//! and its `(N, rep)` label, so tables do not depend on scheduling or on the
//! number of workers.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{self, map_estimate, objective, MapConfig};
use crate::fnspace::sobolev_norm;
use crate::model::{self, generate_dataset, synthesize_truth, ForwardProblem, GroundTruth};
use crate::pde::PdeKind;
use crate::rng::{child_seed, substream};

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.05;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct RateCampaign {
    pub fp: ForwardProblem,
    pub alpha: f64,
    pub n_ladder: Vec<usize>,
    pub reps: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Modes and `H^α` radius of the sampled ground truth.
    pub truth_modes: usize,
    pub truth_radius: f64,
    /// Constant in front of `r_N`.
    pub r_multiplier: f64,
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
}

impl RateCampaign {
    pub fn new(fp: ForwardProblem, alpha: f64, n_ladder: Vec<usize>, reps: usize, sigma: f64, seed: u64) -> Self {
        Self {
            fp,
            alpha,
            n_ladder,
            reps,
            sigma,
            seed,
            truth_modes: 8,
            truth_radius: 2.0,
            r_multiplier: 1.0,
            restarts: 3,
            max_iters: 500,
            grad_tol: 1e-8,
            workers: None,
        }
    }

    pub fn kappa(&self) -> f64 {
        self.fp.kind().ill_posedness()
    }

    pub fn dim(&self) -> usize {
        self.fp.grid().dim()
    }

    /// `(α+κ)/(2(α+κ)+d)`.
    pub fn rate_exponent(&self) -> f64 {
        let s = self.alpha + self.kappa();
        s / (2.0 * s + self.dim() as f64)
    }

    pub fn r_for(&self, n_obs: usize) -> f64 {
        self.r_multiplier * estimator::rate_schedule(n_obs, self.alpha, self.kappa(), self.dim())
    }

    pub fn truth(&self) -> Result<GroundTruth> {
        synthesize_truth(
            &self.fp,
            self.alpha,
            self.truth_modes,
            child_seed(self.seed, "truth", 0),
            self.truth_radius,
        )
    }

    fn map_config(&self, n_obs: usize, data_seed: u64) -> MapConfig {
        let mut cfg = MapConfig::scheduled(&self.fp, n_obs, self.alpha, self.r_multiplier);
        cfg.restarts = self.restarts;
        cfg.max_iters = self.max_iters;
        cfg.grad_tol = self.grad_tol;
        cfg.seed = child_seed(data_seed, "restarts", 0);
        cfg
    }

    fn data_seed(&self, n_obs: usize, rep: usize) -> u64 {
        child_seed(child_seed(self.seed, "data", n_obs as u64), "rep", rep as u64)
    }

    fn validate_basic(&self) -> Result<()> {
        if self.n_ladder.is_empty() || self.n_ladder.windows(2).any(|w| w[0] >= w[1]) || self.n_ladder[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "N ladder {:?} must be positive and strictly increasing",
                self.n_ladder
            )));
        }
        if self.reps == 0 {
            return Err(Error::InvalidArgument("reps must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidArgument("workers must be at least 1".into()));
        }
        Ok(())
    }

    fn validate_rates(&self) -> Result<()> {
        self.validate_basic()?;
        if self.n_ladder.len() < 4 {
            return Err(Error::InvalidArgument("a rate campaign needs at least 4 sample sizes".into()));
        }
        if self.reps < 10 {
            return Err(Error::InvalidArgument("a rate campaign needs at least 10 replicates per N".into()));
        }
        Ok(())
    }
}

/// One replicate's metrics and estimator diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Replicate {
    pub n_obs: usize,
    pub rep: usize,
    pub r: f64,
    #[serde(rename = "K")]
    pub modes: usize,
    pub prediction_error: f64,
    pub estimation_error: f64,
    pub d_r2: f64,
    /// `‖θ̂‖_{H^α}`.
    pub theta_norm: f64,
    pub objective: f64,
    pub objective_at_zero: f64,
    pub objective_at_truth_projection: f64,
    pub converged: bool,
    pub trace_monotone: bool,
    pub iterations: usize,
    pub restart_index: usize,
}

impl Replicate {
    /// Metrics only, for injected replicates.
    pub fn from_metrics(n_obs: usize, rep: usize, prediction_error: f64, estimation_error: f64, d_r2: f64) -> Self {
        Self {
            n_obs,
            rep,
            prediction_error,
            estimation_error,
            d_r2,
            ..Self::default()
        }
    }
}

/// Fresh data, MAP fit and metrics for one `(N, rep)`.
pub fn run_replicate(c: &RateCampaign, truth: &GroundTruth, n_obs: usize, rep: usize) -> Result<Replicate> {
    let seed = c.data_seed(n_obs, rep);
    let data = generate_dataset(&c.fp, truth, n_obs, c.sigma, seed)?;
    let cfg = c.map_config(n_obs, seed);
    let fit = map_estimate(&c.fp, &data, &cfg)?;
    let zero = fit.theta_hat.with_coeffs(vec![0.0; fit.theta_hat.coeffs().len()])?;
    let projection = truth.projected(cfg.modes)?;
    Ok(Replicate {
        n_obs,
        rep,
        r: cfg.r,
        modes: cfg.modes,
        prediction_error: estimator::prediction_error(&c.fp, &fit.theta_hat, &truth.theta)?,
        estimation_error: estimator::estimation_error(&fit.f_hat, &truth.f)?,
        d_r2: model::d_r2(&c.fp, &fit.theta_hat, &truth.theta, cfg.r, c.alpha)?,
        theta_norm: sobolev_norm(&fit.theta_hat, c.alpha),
        objective: fit.objective,
        objective_at_zero: objective(&c.fp, &data, &zero, &cfg)?,
        objective_at_truth_projection: objective(&c.fp, &data, &projection, &cfg)?,
        converged: fit.converged,
        trace_monotone: fit.objective_trace.windows(2).all(|w| w[1] <= w[0]),
        iterations: fit.iterations,
        restart_index: fit.restart_index,
    })
}

fn with_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(job()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot start {w} workers: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

/// Runs every `(N, rep)` through `replicate` in the worker pool. Failed
/// replicates are dropped and counted; more than 5% failures is an error.
fn collect<F>(c: &RateCampaign, replicate: F) -> Result<(Vec<Replicate>, usize)>
where
    F: Fn(usize, usize) -> Result<Replicate> + Sync,
{
    let jobs: Vec<(usize, usize)> = c
        .n_ladder
        .iter()
        .flat_map(|&n| (0..c.reps).map(move |rep| (n, rep)))
        .collect();
    let results: Vec<Result<Replicate>> =
        with_pool(c.workers, || jobs.par_iter().map(|&(n, rep)| replicate(n, rep)).collect())?;
    let total = results.len();
    let mut rows = Vec::with_capacity(total);
    let mut first = None;
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                first.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let failed = total - rows.len();
    if failed as f64 > MAX_FAILURE_SHARE * total as f64 {
        return Err(Error::CampaignFailed {
            failed,
            total,
            first: first.unwrap_or_default(),
        });
    }
    Ok((rows, failed))
}

/// Least-squares fit of `log y = slope · log x + intercept`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("log-log fit needs two or more matched points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("log-log fit needs distinct abscissae".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Percentile bootstrap interval over replicate resampling, widened to
    /// contain the point slope.
    pub slope_ci: [f64; 2],
    /// Theoretical exponent, negative for decay.
    pub theory: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerN {
    pub n_obs: usize,
    pub r: f64,
    pub replicates: usize,
    pub mean_prediction_error: f64,
    pub mean_estimation_error: f64,
    pub mean_d_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub kind: PdeKind,
    pub alpha: f64,
    pub kappa: f64,
    pub d: usize,
    pub sigma: f64,
    pub reps: usize,
    pub seed: u64,
    pub truth_norm: f64,
    pub failures: usize,
    pub per_n: Vec<PerN>,
    pub prediction: SlopeFit,
    pub estimation: SlopeFit,
    #[serde(skip)]
    pub rows: Vec<Replicate>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Slope of per-N means with a bootstrap interval.
fn fit_with_bootstrap(groups: &[(usize, Vec<f64>)], theory: f64, seed: u64) -> Result<SlopeFit> {
    let ns: Vec<f64> = groups.iter().map(|(n, _)| *n as f64).collect();
    let means: Vec<f64> = groups.iter().map(|(_, v)| mean(v.iter().copied())).collect();
    let (slope, intercept) = loglog_fit(&ns, &means)?;
    let mut rng = substream(seed, "bootstrap", 0);
    let mut slopes = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let resampled: Vec<f64> = groups
            .iter()
            .map(|(_, v)| mean((0..v.len()).map(|_| v[rng.random_range(0..v.len())])))
            .collect();
        slopes.push(loglog_fit(&ns, &resampled)?.0);
    }
    slopes.sort_by(f64::total_cmp);
    let lo = quantile(&slopes, 0.025).min(slope);
    let hi = quantile(&slopes, 0.975).max(slope);
    Ok(SlopeFit {
        slope,
        intercept,
        slope_ci: [lo, hi],
        theory,
    })
}

fn group_by_n(c: &RateCampaign, rows: &[Replicate], metric: impl Fn(&Replicate) -> f64) -> Result<Vec<(usize, Vec<f64>)>> {
    c.n_ladder
        .iter()
        .map(|&n| {
            let v: Vec<f64> = rows.iter().filter(|r| r.n_obs == n).map(&metric).collect();
            if v.is_empty() {
                return Err(Error::InvalidArgument(format!("no successful replicates at N = {n}")));
            }
            Ok((n, v))
        })
        .collect()
}

pub fn run_rate_campaign(c: &RateCampaign) -> Result<RateReport> {
    c.validate_rates()?;
    let truth = c.truth()?;
    let (rows, failures) = collect(c, |n, rep| run_replicate(c, &truth, n, rep))?;
    assemble_rate_report(c, rows, failures, truth.norm_bound)
}

/// As [`run_rate_campaign`] with the per-replicate work supplied by the
/// caller; `replicate(N, rep)` replaces data generation and estimation.
pub fn run_rate_campaign_with<F>(c: &RateCampaign, replicate: F) -> Result<RateReport>
where
    F: Fn(usize, usize) -> Result<Replicate> + Sync,
{
    c.validate_rates()?;
    let (rows, failures) = collect(c, replicate)?;
    assemble_rate_report(c, rows, failures, c.truth_radius)
}

fn assemble_rate_report(c: &RateCampaign, rows: Vec<Replicate>, failures: usize, truth_norm: f64) -> Result<RateReport> {
    let pred = group_by_n(c, &rows, |r| r.prediction_error)?;
    let est = group_by_n(c, &rows, |r| r.estimation_error)?;
    let dr2 = group_by_n(c, &rows, |r| r.d_r2)?;
    let per_n = c
        .n_ladder
        .iter()
        .enumerate()
        .map(|(i, &n)| PerN {
            n_obs: n,
            r: c.r_for(n),
            replicates: pred[i].1.len(),
            mean_prediction_error: mean(pred[i].1.iter().copied()),
            mean_estimation_error: mean(est[i].1.iter().copied()),
            mean_d_r2: mean(dr2[i].1.iter().copied()),
        })
        .collect();
    let rate = c.rate_exponent();
    let tau = c.fp.kind().stability_exponent(c.alpha);
    Ok(RateReport {
        kind: c.fp.kind(),
        alpha: c.alpha,
        kappa: c.kappa(),
        d: c.dim(),
        sigma: c.sigma,
        reps: c.reps,
        seed: c.seed,
        truth_norm,
        failures,
        per_n,
        prediction: fit_with_bootstrap(&pred, -rate, child_seed(c.seed, "bootstrap-prediction", 0))?,
        estimation: fit_with_bootstrap(&est, -tau * rate, child_seed(c.seed, "bootstrap-estimation", 0))?,
        rows,
    })
}

/// Share of adjacent pairs along the ladder where the sequence does not
/// increase.
pub fn non_increasing_share(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 1.0;
    }
    let ok = v.windows(2).filter(|w| w[1] <= w[0]).count();
    ok as f64 / (v.len() - 1) as f64
}

impl RateReport {
    pub fn mean_prediction(&self) -> Vec<f64> {
        self.per_n.iter().map(|p| p.mean_prediction_error).collect()
    }

    pub fn mean_estimation(&self) -> Vec<f64> {
        self.per_n.iter().map(|p| p.mean_estimation_error).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(&self.rows, out)
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Log-log plot of the per-N means with fitted and theoretical slopes.
    pub fn svg(&self) -> String {
        let ns: Vec<f64> = self.per_n.iter().map(|p| p.n_obs as f64).collect();
        let series = [
            ("prediction error", self.mean_prediction(), &self.prediction, "#1f77b4"),
            ("estimation error", self.mean_estimation(), &self.estimation, "#d62728"),
        ];
        loglog_svg(
            &format!("{:?} d={} alpha={}", self.kind, self.d, self.alpha),
            &ns,
            &series.iter().map(|(l, v, f, c)| (*l, v.as_slice(), *f, *c)).collect::<Vec<_>>(),
        )
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.svg` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.summary_json()?)?;
        std::fs::write(dir.join(format!("{stem}.svg")), self.svg())?;
        Ok(())
    }
}

pub fn write_rows<W: Write>(rows: &[Replicate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn loglog_svg(title: &str, xs: &[f64], series: &[(&str, &[f64], &SlopeFit, &str)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const PAD: f64 = 60.0;
    let lx: Vec<f64> = xs.iter().map(|v| v.log10()).collect();
    let ly: Vec<f64> = series
        .iter()
        .flat_map(|(_, v, _, _)| v.iter().map(|y| y.log10()))
        .filter(|v| v.is_finite())
        .collect();
    let (x0, x1) = (lx.iter().copied().fold(f64::INFINITY, f64::min), lx.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (mut y0, mut y1) = (ly.iter().copied().fold(f64::INFINITY, f64::min), ly.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    if !(y1 > y0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (y0, y1) = (y0 - 0.1 * (y1 - y0), y1 + 0.1 * (y1 - y0));
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let px = |v: f64| PAD + (v - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">log10 N</text>"#, W / 2.0, H - 15.0);
    for (i, v) in lx.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            px(*v),
            H - PAD + 16.0,
            xs[i]
        );
    }
    for k in 0..=4 {
        let v = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{:.2}</text>"#,
            PAD - 6.0,
            py(v) + 4.0,
            v
        );
    }
    for (idx, (label, ys, fit, color)) in series.iter().enumerate() {
        let pts: Vec<String> = lx
            .iter()
            .zip(ys.iter())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(y.log10())))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}"/>"#, pts.join(" "));
        for p in &pts {
            let (cx, cy) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        // fitted line in log10 coordinates
        let fit_at = |x: f64| (fit.intercept + fit.slope * x * std::f64::consts::LN_10) / std::f64::consts::LN_10;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-dasharray="6 3"/>"#,
            px(x0),
            py(fit_at(x0)),
            px(x1),
            py(fit_at(x1))
        );
        // theoretical slope anchored at the first mean
        let anchor = ys[0].log10();
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-dasharray="2 3" opacity="0.6"/>"#,
            px(x0),
            py(anchor),
            px(x1),
            py(anchor + fit.theory * (x1 - x0))
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{label}: slope {:.3} (theory {:.3})</text>"#,
            PAD + 10.0,
            PAD + 16.0 * idx as f64,
            fit.slope,
            fit.theory
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub n_obs: usize,
    pub r: f64,
    pub reps: usize,
    pub failures: usize,
    pub m_ladder: Vec<f64>,
    /// Share of replicates with `d_r² ≥ M r_N²`, one per `M`.
    pub frequencies: Vec<f64>,
    /// `d_r² / r_N²` per replicate.
    pub normalized_d_r2: Vec<f64>,
}

impl ConcentrationReport {
    pub fn frequency_at(&self, m: f64) -> Option<f64> {
        self.m_ladder.iter().position(|v| *v == m).map(|i| self.frequencies[i])
    }
}

pub fn concentration_from_rows(n_obs: usize, r: f64, rows: &[Replicate], m_ladder: &[f64], failures: usize) -> ConcentrationReport {
    let r2 = r * r;
    let normalized: Vec<f64> = rows.iter().map(|row| row.d_r2 / r2).collect();
    let frequencies = m_ladder
        .iter()
        .map(|m| rows.iter().filter(|row| row.d_r2 >= m * r2).count() as f64 / rows.len() as f64)
        .collect();
    ConcentrationReport {
        n_obs,
        r,
        reps: rows.len(),
        failures,
        m_ladder: m_ladder.to_vec(),
        frequencies,
        normalized_d_r2: normalized,
    }
}

/// Exceedance frequencies of `{d_r² ≥ M r_N²}` at the campaign's single `N`.
pub fn run_concentration(c: &RateCampaign, m_ladder: &[f64]) -> Result<ConcentrationReport> {
    c.validate_basic()?;
    if c.n_ladder.len() != 1 {
        return Err(Error::InvalidArgument("a concentration campaign uses a single N".into()));
    }
    if c.reps < 50 {
        return Err(Error::InvalidArgument("a concentration campaign needs at least 50 replicates".into()));
    }
    if m_ladder.iter().any(|m| !(*m >= 0.0)) {
        return Err(Error::InvalidArgument("M values must be nonnegative".into()));
    }
    let truth = c.truth()?;
    let (rows, failures) = collect(c, |n, rep| run_replicate(c, &truth, n, rep))?;
    let n = c.n_ladder[0];
    Ok(concentration_from_rows(n, c.r_for(n), &rows, m_ladder, failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub n_obs: usize,
    pub rep: usize,
    pub estimation_error: f64,
    /// `r_N^τ`.
    pub bound: f64,
    pub ratio: f64,
    pub theta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub tau: f64,
    pub truth_norm: f64,
    /// 95th percentile of `‖f̂ − f_o‖ / r_N^τ` over all replicates.
    pub fitted_constant: f64,
    /// Share of replicates with ratio at or below the fitted constant.
    pub fraction_below: f64,
    /// 95th percentile of the ratio at each N.
    pub per_n_p95: Vec<(usize, f64)>,
    /// Share of replicates with `‖θ̂‖_{H^α} ≤ 3‖θ_o‖_{H^α}`.
    pub fraction_norm_controlled: f64,
    pub max_theta_norm: f64,
    pub rows: Vec<StabilityRow>,
}

pub fn stability_from(report: &RateReport, tau: f64) -> StabilityReport {
    let rows: Vec<StabilityRow> = report
        .rows
        .iter()
        .map(|r| {
            let bound = r.r.powf(tau);
            StabilityRow {
                n_obs: r.n_obs,
                rep: r.rep,
                estimation_error: r.estimation_error,
                bound,
                ratio: r.estimation_error / bound,
                theta_norm: r.theta_norm,
            }
        })
        .collect();
    let sorted = |v: Vec<f64>| {
        let mut v = v;
        v.sort_by(f64::total_cmp);
        v
    };
    let all = sorted(rows.iter().map(|r| r.ratio).collect());
    let fitted = quantile(&all, 0.95);
    let per_n_p95 = report
        .per_n
        .iter()
        .map(|p| {
            let v = sorted(rows.iter().filter(|r| r.n_obs == p.n_obs).map(|r| r.ratio).collect());
            (p.n_obs, if v.is_empty() { f64::NAN } else { quantile(&v, 0.95) })
        })
        .collect();
    let n = rows.len() as f64;
    StabilityReport {
        tau,
        truth_norm: report.truth_norm,
        fitted_constant: fitted,
        fraction_below: rows.iter().filter(|r| r.ratio <= fitted).count() as f64 / n,
        per_n_p95,
        fraction_norm_controlled: rows.iter().filter(|r| r.theta_norm <= 3.0 * report.truth_norm).count() as f64 / n,
        max_theta_norm: rows.iter().map(|r| r.theta_norm).fold(0.0, f64::max),
        rows,
    }
}

/// Estimation error against `r_N^τ` across the campaign's replicates.
pub fn run_stability_check(c: &RateCampaign) -> Result<StabilityReport> {
    c.validate_basic()?;
    let truth = c.truth()?;
    let (rows, failures) = collect(c, |n, rep| run_replicate(c, &truth, n, rep))?;
    let report = if c.n_ladder.len() >= 2 {
        assemble_rate_report(c, rows, failures, truth.norm_bound)?
    } else {
        // a single N has no slope; only the per-row quantities are needed
        let n = c.n_ladder[0];
        RateReport {
            kind: c.fp.kind(),
            alpha: c.alpha,
            kappa: c.kappa(),
            d: c.dim(),
            sigma: c.sigma,
            reps: c.reps,
            seed: c.seed,
            truth_norm: truth.norm_bound,
            failures,
            per_n: vec![PerN {
                n_obs: n,
                r: c.r_for(n),
                replicates: rows.len(),
                mean_prediction_error: mean(rows.iter().map(|r| r.prediction_error)),
                mean_estimation_error: mean(rows.iter().map(|r| r.estimation_error)),
                mean_d_r2: mean(rows.iter().map(|r| r.d_r2)),
            }],
            prediction: SlopeFit {
                slope: f64::NAN,
                intercept: f64::NAN,
                slope_ci: [f64::NAN; 2],
                theory: -c.rate_exponent(),
            },
            estimation: SlopeFit {
                slope: f64::NAN,
                intercept: f64::NAN,
                slope_ci: [f64::NAN; 2],
                theory: f64::NAN,
            },
            rows,
        }
    };
    Ok(stability_from(&report, c.fp.kind().stability_exponent(c.alpha)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fnspace::build_grid;

    fn campaign(ladder: Vec<usize>, reps: usize) -> RateCampaign {
        let fp = ForwardProblem::default_darcy(build_grid(1, 64).unwrap()).unwrap();
        RateCampaign::new(fp, 2.0, ladder, reps, 0.05, 3)
    }

    #[test]
    fn exact_power_law_recovers_slope() {
        let c = campaign(vec![100, 200, 400, 800, 1600], 10);
        let report = run_rate_campaign_with(&c, |n, rep| {
            let m = (n as f64).powf(-0.5);
            Ok(Replicate::from_metrics(n, rep, m, 2.0 * m, m * m))
        })
        .unwrap();
        assert!((report.prediction.slope + 0.5).abs() < 1e-12);
        assert!((report.estimation.slope + 0.5).abs() < 1e-12);
        let [lo, hi] = report.prediction.slope_ci;
        assert!(lo <= report.prediction.slope && report.prediction.slope <= hi);
    }

    #[test]
    fn theoretical_exponents_stored() {
        let c = campaign(vec![100, 200, 400, 800], 10);
        let report = run_rate_campaign_with(&c, |n, rep| Ok(Replicate::from_metrics(n, rep, 1.0, 1.0, 1.0))).unwrap();
        assert!((report.prediction.theory + 3.0 / 7.0).abs() < 1e-15);
        assert!((report.estimation.theory + 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn failures_counted_and_capped() {
        let c = campaign(vec![100, 200, 400, 800], 25);
        // one failure in 100 replicates is tolerated
        let report = run_rate_campaign_with(&c, |n, rep| {
            if n == 200 && rep == 3 {
                Err(Error::LineSearchFailed { trace: vec![] })
            } else {
                Ok(Replicate::from_metrics(n, rep, 1.0, 1.0, 1.0))
            }
        })
        .unwrap();
        assert_eq!(report.failures, 1);
        assert_eq!(report.per_n[1].replicates, 24);
        // six in 100 are not
        let err = run_rate_campaign_with(&c, |n, rep| {
            if rep < 2 && n < 800 {
                Err(Error::LineSearchFailed { trace: vec![] })
            } else {
                Ok(Replicate::from_metrics(n, rep, 1.0, 1.0, 1.0))
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::CampaignFailed { failed: 6, total: 100, .. }));
    }

    #[test]
    fn campaign_preconditions() {
        assert!(run_rate_campaign(&campaign(vec![100, 200, 400], 10)).is_err());
        assert!(run_rate_campaign(&campaign(vec![100, 200, 400, 400], 10)).is_err());
        assert!(run_rate_campaign(&campaign(vec![100, 200, 400, 800], 9)).is_err());
        assert!(run_concentration(&campaign(vec![100], 49), &[1.0]).is_err());
    }

    #[test]
    fn concentration_frequencies_are_nested() {
        let rows: Vec<Replicate> = (0..100)
            .map(|i| Replicate::from_metrics(1024, i, 0.0, 0.0, 0.01 * (i % 17) as f64))
            .collect();
        let rep = concentration_from_rows(1024, 0.1, &rows, &[0.0, 1.0, 2.0, 4.0, 8.0], 0);
        assert_eq!(rep.frequencies[0], 1.0);
        assert!(rep.frequencies.windows(2).all(|w| w[1] <= w[0]));
        assert!(rep.frequencies.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn loglog_fit_rejects_bad_input() {
        assert!(loglog_fit(&[1.0], &[1.0]).is_err());
        assert!(loglog_fit(&[1.0, 2.0], &[1.0, 0.0]).is_err());
        assert!(loglog_fit(&[2.0, 2.0], &[1.0, 3.0]).is_err());
        let (s, b) = loglog_fit(&[1.0, 10.0, 100.0], &[3.0, 0.3, 0.03]).unwrap();
        assert!((s + 1.0).abs() < 1e-12 && (b - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn small_campaign_is_reproducible_and_worker_independent() {
        let mut c = campaign(vec![64, 128, 256, 512], 10);
        c.workers = Some(1);
        let a = run_rate_campaign(&c).unwrap();
        c.workers = Some(3);
        let b = run_rate_campaign(&c).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.failures, 0);
        assert!(a.rows.iter().all(|r| r.trace_monotone && r.objective >= r.objective_at_zero));
        let svg = a.svg();
        assert!(svg.starts_with("<svg") && svg.contains("theory") && !svg.contains("href"));
    }

    #[test]
    fn noiseless_stability_fraction() {
        let mut c = campaign(vec![256, 512], 3);
        c.sigma = 0.0;
        let s = run_stability_check(&c).unwrap();
        assert_eq!(s.rows.len(), 6);
        assert!(s.rows.iter().all(|r| r.estimation_error < r.bound));
        assert!(s.fitted_constant.is_finite());
        assert!(s.fraction_norm_controlled == 1.0);
    }
}
