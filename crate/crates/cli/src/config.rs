//! The JSON run configuration shared by `simulate`, `population` and `predict`.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use spikeflow::dynamics::FlowConfig;
use spikeflow::experiments::InitMode;
use spikeflow::model::{ModelParams, DEFAULT_MEMORY_BUDGET};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub p: usize,
    pub r: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub lambdas: Vec<f64>,
    pub sqrt_m: Option<f64>,
    #[serde(rename = "M")]
    pub m: Option<f64>,
    /// `M = N^alpha`.
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub memory_budget: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    Uniform,
    ConditionedPositive,
    Explicit,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default)]
    pub mode: InitKind,
    pub seed: Option<u64>,
    /// Row-major initial correlations, required by `explicit`.
    pub m0: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSection {
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Defaults to the finite-`N` suppression scale (population: 0.05).
    pub eps_prime: Option<f64>,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            eps: default_eps(),
            eps_prime: None,
        }
    }
}

fn default_eps() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_true")]
    pub emit_svg: bool,
    #[serde(default)]
    pub log_time: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            emit_svg: true,
            log_time: false,
        }
    }
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

/// Reads a JSON document, reporting syntax and type errors with their
/// line and column.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!(
            "{}:{}:{}: {}",
            path.display(),
            e.line(),
            e.column(),
            e
        ))
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        let given = [m.sqrt_m.is_some(), m.m.is_some(), m.alpha.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if given != 1 {
            return Err(CliError::Config(format!(
                "model needs exactly one of sqrt_m, M, alpha (got {given})"
            )));
        }
        if m.lambdas.len() != m.r {
            return Err(CliError::Config(format!(
                "model.r = {} but {} lambdas given",
                m.r,
                m.lambdas.len()
            )));
        }
        if let Some(v) = m.m.filter(|v| !(*v >= 0.0)) {
            return Err(CliError::Config(format!("model.M = {v} must be non-negative")));
        }
        match (self.init.mode, &self.init.m0) {
            (InitKind::Explicit, None) => {
                return Err(CliError::Config("init.mode explicit needs init.m0".into()))
            }
            (InitKind::Explicit, Some(rows)) => {
                if rows.len() != m.r || rows.iter().any(|row| row.len() != m.r) {
                    return Err(CliError::Config(format!("init.m0 must be {0}×{0}", m.r)));
                }
            }
            (_, Some(_)) => return Err(CliError::Config("init.m0 is only allowed with mode explicit".into())),
            _ => {}
        }
        if !(self.detect.eps > 0.0 && self.detect.eps < 1.0) {
            return Err(CliError::Config(format!("detect.eps = {} must lie in (0, 1)", self.detect.eps)));
        }
        self.flow.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.params().validate_shape().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn sqrt_m(&self) -> f64 {
        let m = &self.model;
        match (m.sqrt_m, m.m, m.alpha) {
            (Some(s), _, _) => s,
            (_, Some(v), _) => v.sqrt(),
            (_, _, Some(a)) => (m.n as f64).powf(a / 2.0),
            _ => unreachable!("validated"),
        }
    }

    pub fn params(&self) -> ModelParams {
        let m = &self.model;
        let mut params = ModelParams::new(m.p, m.n, m.lambdas.clone(), self.sqrt_m());
        params.memory_budget = m.memory_budget.unwrap_or(DEFAULT_MEMORY_BUDGET);
        params
    }

    pub fn init_mode(&self) -> InitMode {
        match self.init.mode {
            InitKind::Uniform => InitMode::Uniform,
            InitKind::ConditionedPositive => InitMode::ConditionedPositive,
            InitKind::Explicit => InitMode::Explicit {
                m0: self.init.m0.clone().unwrap_or_default(),
            },
        }
    }
}
