//! Run configuration: one JSON document, optional `--set key.path=value`
//! overrides, strict key checking.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use pdemap::pde::PdeKind;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the working directory.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Smoothness `α` of the parameter space.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub model: ModelConfig,
    pub truth: Option<TruthConfig>,
    pub simulate: Option<SimulateConfig>,
    pub data: Option<DataConfig>,
    pub estimator: Option<EstimatorConfig>,
    pub campaign: Option<CampaignConfig>,
    pub props: Option<PropsConfig>,
    pub oracle: Option<OracleConfig>,
}

fn default_output() -> PathBuf {
    PathBuf::from("pdemap-out")
}

fn default_alpha() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: PdeKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Intervals per axis.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Link floor; defaults to 0.5 for Darcy and 0.05 for Schrödinger.
    pub f_min: Option<f64>,
    /// Darcy source `g = A sin(πx)…`.
    #[serde(default = "default_amplitude")]
    pub source_amplitude: f64,
    /// Schrödinger boundary value.
    #[serde(default = "default_boundary")]
    pub boundary_value: f64,
}

fn default_dim() -> usize {
    1
}

fn default_n() -> usize {
    128
}

fn default_amplitude() -> f64 {
    pdemap::model::DEFAULT_SOURCE_AMPLITUDE
}

fn default_boundary() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    #[serde(default = "default_truth_modes")]
    pub modes: usize,
    #[serde(default = "default_truth_radius")]
    pub radius: f64,
}

fn default_truth_modes() -> usize {
    8
}

fn default_truth_radius() -> f64 {
    2.0
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            modes: default_truth_modes(),
            radius: default_truth_radius(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_obs: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Paths relative to the config file.
    pub csv: PathBuf,
    pub meta: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Regularization weight; defaults to `r_multiplier · r_N`.
    pub r: Option<f64>,
    #[serde(default = "default_r_multiplier")]
    pub r_multiplier: f64,
    /// Sine modes per axis; defaults to the sieve rule.
    #[serde(rename = "K")]
    pub modes: Option<usize>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_r_multiplier() -> f64 {
    1.0
}

fn default_max_iters() -> usize {
    500
}

fn default_grad_tol() -> f64 {
    1e-8
}

fn default_restarts() -> usize {
    3
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            r: None,
            r_multiplier: default_r_multiplier(),
            modes: None,
            max_iters: default_max_iters(),
            grad_tol: default_grad_tol(),
            restarts: default_restarts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub n_ladder: Vec<usize>,
    pub reps: usize,
    pub sigma: f64,
    /// Replication pool size; defaults to the available parallelism.
    pub workers: Option<usize>,
    /// Thresholds `M` for the concentration run.
    #[serde(default = "default_m_ladder")]
    pub m_ladder: Vec<f64>,
}

fn default_m_ladder() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 4.0, 8.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropsConfig {
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(rename = "K", default = "default_truth_modes")]
    pub modes: usize,
    #[serde(default = "default_probe_radius")]
    pub radius: f64,
    /// Ceilings on the C1, C2 and C3 maxima; absent means finiteness only.
    pub c1_ceiling: Option<f64>,
    pub c2_ceiling: Option<f64>,
    pub c3_ceiling: Option<f64>,
    /// Allowed shortfall of the C7 slope below `τ`.
    #[serde(default = "default_c7_tolerance")]
    pub c7_tolerance: f64,
    #[serde(default = "default_interpolation_ceiling")]
    pub interpolation_ceiling: f64,
}

fn default_pairs() -> usize {
    200
}

fn default_probe_radius() -> f64 {
    1.0
}

fn default_c7_tolerance() -> f64 {
    0.15
}

fn default_interpolation_ceiling() -> f64 {
    1.0 + 1e-9
}

impl Default for PropsConfig {
    fn default() -> Self {
        Self {
            pairs: default_pairs(),
            modes: default_truth_modes(),
            radius: default_probe_radius(),
            c1_ceiling: None,
            c2_ceiling: None,
            c3_ceiling: None,
            c7_tolerance: default_c7_tolerance(),
            interpolation_ceiling: default_interpolation_ceiling(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Start points, each of length `model.dim`.
    pub points: Vec<Vec<f64>>,
    /// Constant coefficient `f`.
    #[serde(default = "default_coefficient")]
    pub coefficient: f64,
    /// Constant Darcy source `g`; Schrödinger uses `model.boundary_value`.
    #[serde(default = "default_source")]
    pub source: f64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Allowed discretization bias on top of three standard errors.
    #[serde(default = "default_bias")]
    pub bias: f64,
}

fn default_coefficient() -> f64 {
    2.0
}

fn default_source() -> f64 {
    2.0
}

fn default_paths() -> usize {
    100_000
}

fn default_dt() -> f64 {
    1e-5
}

fn default_bias() -> f64 {
    0.01
}

/// Key reference shown by `--help`.
pub const KEYS_COMMON: &str = "\
Config keys (JSON document; override with --set key.path=value):
  seed                      u64, root of all random streams [0]
  output                    output directory [pdemap-out]
  alpha                     smoothness of the parameter space [2.0]
  model.kind                \"darcy\" | \"schrodinger\" (required)
  model.dim                 1 | 2 [1]
  model.n                   grid intervals per axis [128]
  model.f_min               link floor [0.5 darcy, 0.05 schrodinger]
  model.source_amplitude    Darcy source amplitude [10]
  model.boundary_value      Schrodinger boundary value [1]";

pub const KEYS_TRUTH: &str = "\
  truth.modes               sine modes per axis of the ground truth [8]
  truth.radius              H^alpha norm of the ground truth [2.0]";

pub const KEYS_SIMULATE: &str = "\
  simulate.n_obs            number of observations (required)
  simulate.sigma            noise standard deviation (required)";

pub const KEYS_DATA: &str = "\
  data.csv                  observation CSV, relative to the config file
  data.meta                 dataset JSON sidecar, relative to the config file";

pub const KEYS_ESTIMATOR: &str = "\
  estimator.r               regularization weight [r_multiplier * r_N]
  estimator.r_multiplier    constant in front of r_N [1.0]
  estimator.K               sine modes per axis [ceil(N^(1/(2 alpha + d)))]
  estimator.max_iters       L-BFGS iteration cap [500]
  estimator.grad_tol        gradient-norm tolerance [1e-8]
  estimator.restarts        number of starting points [3]";

pub const KEYS_CAMPAIGN: &str = "\
  campaign.n_ladder         strictly increasing sample sizes (required)
  campaign.reps             replicates per sample size (required)
  campaign.sigma            noise standard deviation (required)
  campaign.workers          replication pool size [available parallelism]
  campaign.m_ladder         concentration thresholds M [0, 1, 2, 4, 8]";

pub const KEYS_PROPS: &str = "\
  props.pairs               random pairs per ratio probe [200]
  props.K                   sine modes per axis of probe fields [8]
  props.radius              H^alpha radius of the sampling ball [1.0]
  props.c1_ceiling          optional ceiling on the C1 maximum
  props.c2_ceiling          optional ceiling on the C2 maximum
  props.c3_ceiling          optional ceiling on the C3 maximum
  props.c7_tolerance        allowed shortfall of the C7 slope below tau [0.15]
  props.interpolation_ceiling  ceiling on the interpolation constant [1 + 1e-9]";

pub const KEYS_ORACLE: &str = "\
  oracle.points             start points, e.g. [[0.5]] (required)
  oracle.coefficient        constant coefficient f [2.0]
  oracle.source             constant Darcy source g [2.0]
  oracle.n_paths            Monte Carlo paths per point [100000]
  oracle.dt                 Euler step [1e-5]
  oracle.bias               allowed bias beyond 3 standard errors [0.01]";

/// Parsed configuration plus the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Reads the file, applies overrides and deserializes strictly.
pub fn load(path: &Path, overrides: &[String]) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        key: None,
        line: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let config = parse(&text, overrides)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base_dir })
}

pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| CliError::Config {
        key: None,
        line: Some(e.line()),
        message: e.to_string(),
    })?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    match serde_path_to_error::deserialize::<_, RunConfig>(&value) {
        Ok(c) => Ok(c),
        Err(err) => {
            let path = err.path().to_string();
            let message = err.inner().to_string();
            // Locate the line in the original text when the same error occurs there.
            let mut de = serde_json::Deserializer::from_str(text);
            let line = match serde_path_to_error::deserialize::<_, RunConfig>(&mut de) {
                Err(e) if e.path().to_string() == path => Some(e.inner().line()),
                _ => None,
            };
            Err(CliError::Config {
                key: Some(error_key(&path, &message)),
                line,
                message,
            })
        }
    }
}

/// The dotted key an error refers to. A missing field is reported at its
/// parent path, so its name is appended.
fn error_key(path: &str, message: &str) -> String {
    let field = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match (path, field) {
        (".", Some(f)) => f.to_string(),
        (p, Some(f)) => format!("{p}.{f}"),
        (p, None) => p.to_string(),
    }
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| CliError::Config {
        key: Some(assignment.to_string()),
        line: None,
        message: "override must have the form key.path=value".into(),
    })?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Config {
                key: Some(key.to_string()),
                line: None,
                message: "empty path segment in override".into(),
            });
        }
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(CliError::Config {
                    key: Some(key.to_string()),
                    line: None,
                    message: format!("`{}` is not an object", parts[..i].join(".")),
                });
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}
