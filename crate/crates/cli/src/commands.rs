//! Subcommand bodies. Each returns the summary object written to
//! `summary.json`; artifacts go into the output directory.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use pdemap::estimator::{self, map_estimate, MapConfig};
use pdemap::experiments::{self, RateCampaign};
use pdemap::fnspace::{build_grid, GridFunction};
use pdemap::link::LinkFunction;
use pdemap::mc_oracle::{fk_darcy, fk_schrodinger, McConfig};
use pdemap::model::{
    generate_dataset, synthesize_truth, Dataset, ForwardProblem, GroundTruth, DEFAULT_DARCY_FLOOR,
    DEFAULT_SCHRODINGER_FLOOR,
};
use pdemap::pde::{DarcyProblem, PdeKind, PdeProblem, SchrodingerProblem};
use pdemap::probes::{run_props, ProbeConfig};
use pdemap::rng::child_seed;

use crate::config::{CampaignConfig, EstimatorConfig, Loaded, ModelConfig, RunConfig, TruthConfig};
use crate::error::CliError;

type CmdResult = Result<Value, CliError>;

fn require<'a, T>(block: &'a Option<T>, name: &str, command: &str) -> Result<&'a T, CliError> {
    block.as_ref().ok_or_else(|| CliError::missing_block(name, command))
}

pub fn forward_problem(m: &ModelConfig) -> Result<ForwardProblem, CliError> {
    let grid = build_grid(m.dim, m.n)?;
    let floor = m.f_min.unwrap_or(match m.kind {
        PdeKind::Darcy => DEFAULT_DARCY_FLOOR,
        PdeKind::Schrodinger => DEFAULT_SCHRODINGER_FLOOR,
    });
    let link = LinkFunction::with_floor(floor)?;
    Ok(match m.kind {
        PdeKind::Darcy => ForwardProblem::darcy(grid, m.source_amplitude, link)?,
        PdeKind::Schrodinger => ForwardProblem::schrodinger(grid, m.boundary_value, link)?,
    })
}

fn truth_for(cfg: &RunConfig, fp: &ForwardProblem) -> Result<GroundTruth, CliError> {
    let t = cfg.truth.clone().unwrap_or_default();
    Ok(synthesize_truth(fp, cfg.alpha, t.modes, child_seed(cfg.seed, "truth", 0), t.radius)?)
}

fn write_gridfunction(path: &Path, gf: &GridFunction) -> Result<(), CliError> {
    gf.write_csv(std::fs::File::create(path)?)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(v).map_err(pdemap::Error::from)? + "\n")?;
    Ok(())
}

fn truth_json(t: &GroundTruth) -> Value {
    json!({
        "alpha": t.alpha,
        "modes": t.theta.modes(),
        "norm": t.norm_bound,
        "coeffs": t.theta.coeffs(),
    })
}

pub fn simulate(loaded: &Loaded, out: &Path) -> CmdResult {
    let cfg = &loaded.config;
    let sim = require(&cfg.simulate, "simulate", "simulate")?;
    let fp = forward_problem(&cfg.model)?;
    let truth = truth_for(cfg, &fp)?;
    let data = generate_dataset(&fp, &truth, sim.n_obs, sim.sigma, child_seed(cfg.seed, "simulate", 0))?;
    data.save(out, "data", fp.kind())?;
    write_json(&out.join("truth.json"), &truth_json(&truth))?;
    write_gridfunction(&out.join("truth_f.csv"), &truth.f)?;
    Ok(json!({
        "kind": fp.kind(),
        "n_obs": data.len(),
        "sigma": data.sigma(),
        "truth_norm": truth.norm_bound,
        "artifacts": ["data.csv", "data.json", "truth.json", "truth_f.csv"],
    }))
}

fn map_config(est: &EstimatorConfig, fp: &ForwardProblem, alpha: f64, n_obs: usize, seed: u64) -> MapConfig {
    let mut m = MapConfig::scheduled(fp, n_obs, alpha, est.r_multiplier);
    if let Some(r) = est.r {
        m.r = r;
    }
    if let Some(k) = est.modes {
        m.modes = k;
    }
    m.max_iters = est.max_iters;
    m.grad_tol = est.grad_tol;
    m.restarts = est.restarts;
    m.seed = child_seed(seed, "estimator", 0);
    m
}

pub fn estimate(loaded: &Loaded, out: &Path) -> CmdResult {
    let cfg = &loaded.config;
    let fp = forward_problem(&cfg.model)?;
    let (data, truth) = match (&cfg.data, &cfg.simulate) {
        (Some(d), _) => (Dataset::load(loaded.resolve(&d.csv), loaded.resolve(&d.meta))?, None),
        (None, Some(sim)) => {
            let truth = truth_for(cfg, &fp)?;
            let data = generate_dataset(&fp, &truth, sim.n_obs, sim.sigma, child_seed(cfg.seed, "simulate", 0))?;
            (data, Some(truth))
        }
        (None, None) => {
            return Err(CliError::Config {
                key: Some("data".into()),
                line: None,
                message: "`estimate` requires a `data` block or a `simulate` block".into(),
            })
        }
    };
    if data.dim() != fp.grid().dim() {
        return Err(CliError::Config {
            key: Some("model.dim".into()),
            line: None,
            message: format!("data are {}-dimensional, model is {}-dimensional", data.dim(), fp.grid().dim()),
        });
    }
    let est = cfg.estimator.clone().unwrap_or_default();
    let mcfg = map_config(&est, &fp, cfg.alpha, data.len(), cfg.seed);
    let fit = map_estimate(&fp, &data, &mcfg)?;

    std::fs::write(out.join("fit.json"), fit.to_json()? + "\n")?;
    write_gridfunction(&out.join("f_hat.csv"), &fit.f_hat)?;
    let mut trace = String::from("iteration,neg_objective\n");
    for (i, v) in fit.objective_trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{v}");
    }
    std::fs::write(out.join("trace.csv"), trace)?;

    let mut summary = json!({
        "kind": fp.kind(),
        "n_obs": data.len(),
        "alpha": mcfg.alpha,
        "r": mcfg.r,
        "K": mcfg.modes,
        "converged": fit.converged,
        "termination": fit.termination,
        "iterations": fit.iterations,
        "restart_index": fit.restart_index,
        "failed_restarts": fit.failed_restarts,
        "objective": fit.objective,
        "grad_norm_final": fit.grad_norm_final,
        "theta_hat": fit.theta_hat.coeffs(),
        "artifacts": ["fit.json", "f_hat.csv", "trace.csv"],
    });
    if let Some(t) = truth {
        summary["prediction_error"] = json!(estimator::prediction_error(&fp, &fit.theta_hat, &t.theta)?);
        summary["estimation_error"] = json!(estimator::estimation_error(&fit.f_hat, &t.f)?);
    }
    Ok(summary)
}

fn campaign(cfg: &RunConfig, command: &str) -> Result<RateCampaign, CliError> {
    let c: &CampaignConfig = require(&cfg.campaign, "campaign", command)?;
    let est = cfg.estimator.clone().unwrap_or_default();
    for (key, set) in [("estimator.r", est.r.is_some()), ("estimator.K", est.modes.is_some())] {
        if set {
            return Err(CliError::Config {
                key: Some(key.into()),
                line: None,
                message: "campaigns schedule r and K per sample size; use estimator.r_multiplier".into(),
            });
        }
    }
    let t: TruthConfig = cfg.truth.clone().unwrap_or_default();
    let mut rc = RateCampaign::new(forward_problem(&cfg.model)?, cfg.alpha, c.n_ladder.clone(), c.reps, c.sigma, cfg.seed);
    rc.truth_modes = t.modes;
    rc.truth_radius = t.radius;
    rc.r_multiplier = est.r_multiplier;
    rc.restarts = est.restarts;
    rc.max_iters = est.max_iters;
    rc.grad_tol = est.grad_tol;
    rc.workers = c.workers;
    Ok(rc)
}

pub fn rates(loaded: &Loaded, out: &Path) -> CmdResult {
    let rc = campaign(&loaded.config, "rates")?;
    let report = experiments::run_rate_campaign(&rc)?;
    report.save(out, "rates")?;
    let mut summary = serde_json::to_value(&report).map_err(pdemap::Error::from)?;
    summary["prediction_non_increasing_share"] = json!(experiments::non_increasing_share(&report.mean_prediction()));
    summary["estimation_non_increasing_share"] = json!(experiments::non_increasing_share(&report.mean_estimation()));
    summary["artifacts"] = json!(["rates.csv", "rates.json", "rates.svg"]);
    Ok(summary)
}

pub fn concentration(loaded: &Loaded, out: &Path) -> CmdResult {
    let cfg = &loaded.config;
    let rc = campaign(cfg, "concentration")?;
    let m_ladder = &require(&cfg.campaign, "campaign", "concentration")?.m_ladder;
    let report = experiments::run_concentration(&rc, m_ladder)?;
    let mut csv = String::from("M,frequency\n");
    for (m, f) in report.m_ladder.iter().zip(&report.frequencies) {
        let _ = writeln!(csv, "{m},{f}");
    }
    std::fs::write(out.join("concentration.csv"), csv)?;
    write_json(&out.join("concentration.json"), &report)?;
    Ok(json!({
        "n_obs": report.n_obs,
        "r": report.r,
        "reps": report.reps,
        "failures": report.failures,
        "m_ladder": report.m_ladder,
        "frequencies": report.frequencies,
        "non_increasing": report.frequencies.windows(2).all(|w| w[1] <= w[0]),
        "artifacts": ["concentration.csv", "concentration.json"],
    }))
}

pub fn stability(loaded: &Loaded, out: &Path) -> CmdResult {
    let rc = campaign(&loaded.config, "stability")?;
    let report = experiments::run_stability_check(&rc)?;
    let mut csv = String::from("n_obs,rep,estimation_error,bound,ratio,theta_norm\n");
    for r in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.n_obs, r.rep, r.estimation_error, r.bound, r.ratio, r.theta_norm
        );
    }
    std::fs::write(out.join("stability.csv"), csv)?;
    write_json(&out.join("stability.json"), &report)?;
    Ok(json!({
        "tau": report.tau,
        "truth_norm": report.truth_norm,
        "fitted_constant": report.fitted_constant,
        "fraction_below": report.fraction_below,
        "per_n_p95": report.per_n_p95,
        "fraction_norm_controlled": report.fraction_norm_controlled,
        "max_theta_norm": report.max_theta_norm,
        "artifacts": ["stability.csv", "stability.json"],
    }))
}

pub fn props(loaded: &Loaded, out: &Path) -> CmdResult {
    let cfg = &loaded.config;
    let p = cfg.props.clone().unwrap_or_default();
    let fp = forward_problem(&cfg.model)?;
    let probe = ProbeConfig {
        alpha: cfg.alpha,
        pairs: p.pairs,
        modes: p.modes,
        radius: p.radius,
        seed: child_seed(cfg.seed, "props", 0),
    };
    let report = run_props(&fp, &probe)?;
    for probe in [&report.c1, &report.c3] {
        let mut csv = String::from("distance,ratio\n");
        for s in &probe.samples {
            let _ = writeln!(csv, "{},{}", s.distance, s.ratio);
        }
        std::fs::write(out.join(format!("{}.csv", probe.name.to_lowercase())), csv)?;
    }
    let mut csv = String::from("forward_gap,coefficient_gap\n");
    for (d, g) in report.c7.deltas.iter().zip(&report.c7.coefficient_gaps) {
        let _ = writeln!(csv, "{d},{g}");
    }
    std::fs::write(out.join("c7.csv"), csv)?;

    let under = |v: f64, ceiling: Option<f64>| v.is_finite() && ceiling.is_none_or(|c| v <= c);
    let c1 = report.c1.bounded() && under(report.c1.max_ratio, p.c1_ceiling);
    let c2 = under(report.c2_max_ratio, p.c2_ceiling);
    let c3 = report.c3.bounded() && under(report.c3.max_ratio, p.c3_ceiling);
    let c7 = report.c7.slope >= report.c7.tau - p.c7_tolerance;
    let interpolation = report.interpolation.max_constant <= p.interpolation_ceiling;
    Ok(json!({
        "kind": report.kind,
        "alpha": report.alpha,
        "c1": {"max": report.c1.max_ratio, "closest_decile_max": report.c1.closest_decile_max, "trend": report.c1.trend, "pass": c1},
        "c2": {"max": report.c2_max_ratio, "pass": c2},
        "c3": {"max": report.c3.max_ratio, "closest_decile_max": report.c3.closest_decile_max, "trend": report.c3.trend, "pass": c3},
        "c7": {"slope": report.c7.slope, "tau": report.c7.tau, "pass": c7},
        "interpolation": {"constant": report.interpolation.max_constant, "pass": interpolation},
        "all_pass": c1 && c2 && c3 && c7 && interpolation,
        "artifacts": ["c1.csv", "c3.csv", "c7.csv"],
    }))
}

pub fn oracle_check(loaded: &Loaded, out: &Path) -> CmdResult {
    let cfg = &loaded.config;
    let o = require(&cfg.oracle, "oracle", "oracle-check")?;
    let grid = build_grid(cfg.model.dim, cfg.model.n)?;
    let f = GridFunction::constant(grid, o.coefficient);
    let (g, reference) = match cfg.model.kind {
        PdeKind::Darcy => {
            let g = GridFunction::constant(grid, o.source);
            let u = PdeProblem::Darcy(DarcyProblem::new(g.clone(), o.coefficient.min(DEFAULT_DARCY_FLOOR))?).solve(&f)?;
            (g, u)
        }
        PdeKind::Schrodinger => {
            let g = GridFunction::constant(grid, cfg.model.boundary_value);
            let u = PdeProblem::Schrodinger(SchrodingerProblem::new(g.clone())?).solve(&f)?;
            (g, u)
        }
    };
    let mc = McConfig::new(o.n_paths, o.dt, child_seed(cfg.seed, "oracle", 0));
    let mut csv = String::from("point,fd,mc_mean,mc_std_error,n_censored,agrees\n");
    let mut points = Vec::new();
    let mut all = true;
    for x in &o.points {
        let est = match cfg.model.kind {
            PdeKind::Darcy => fk_darcy(&f, &g, x, &mc)?,
            PdeKind::Schrodinger => fk_schrodinger(&f, &g, x, &mc)?,
        };
        let fd = reference.interpolate(x)?;
        let agrees = est.agrees_with(fd, o.bias);
        all &= agrees;
        let label = x.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        let _ = writeln!(csv, "{label},{fd},{},{},{},{agrees}", est.mean, est.std_error, est.n_censored);
        points.push(json!({
            "point": x,
            "fd": fd,
            "mc_mean": est.mean,
            "mc_std_error": est.std_error,
            "n_censored": est.n_censored,
            "agrees": agrees,
        }));
    }
    std::fs::write(out.join("oracle.csv"), csv)?;
    Ok(json!({
        "kind": cfg.model.kind,
        "points": points,
        "all_agree": all,
        "artifacts": ["oracle.csv"],
    }))
}
