//! Experiment configuration: JSON schema, validation with field paths, and
//! conversion into the library types.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use stochinf::gare::{PolicyPair, SystemModel};
use stochinf::robust::ErrorSchedule;
use stochinf::sde::SimConfig;
use stochinf::symlin::SymMat;

/// A configuration problem, reported with the offending field path.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBlock {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub a: Option<Matrix>,
    pub a1: Matrix,
    pub b: Option<Matrix>,
    pub e: Option<Matrix>,
    pub c: Matrix,
    pub d: Matrix,
    pub gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveBlock {
    #[serde(default)]
    pub p0: Option<Matrix>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_max_iter() -> usize {
    30
}

fn default_tol() -> f64 {
    1e-12
}

impl Default for SolveBlock {
    fn default() -> Self {
        Self {
            p0: None,
            max_iter: default_max_iter(),
            tol: default_tol(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainsBlock {
    pub l: Matrix,
    pub f: Matrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnBlock {
    pub mode: stochinf::offpolicy::LearnMode,
    pub n_iter: usize,
    /// Window length of each collection interval.
    pub interval_width: f64,
    /// Sub-steps per window; the integration step is width / sub_steps.
    pub sub_steps: usize,
    /// Number of windows; defaults to twice the unknown count.
    #[serde(default)]
    pub num_intervals: Option<usize>,
    pub initial_gains: GainsBlock,
    #[serde(default)]
    pub p0_hat: Option<Matrix>,
    #[serde(default)]
    pub stop_tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleBlock {
    pub kind: String,
    #[serde(default = "default_decay_factor")]
    pub factor: f64,
}

fn default_decay_factor() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustBlock {
    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_iter: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub schedule: ScheduleBlock,
}

fn default_rho() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelBlock,
    pub sim: SimConfig,
    #[serde(default)]
    pub solve: SolveBlock,
    #[serde(default)]
    pub learn: Option<LearnBlock>,
    #[serde(default)]
    pub robust: Option<RobustBlock>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_output_dir() -> String {
    "out".into()
}

fn to_dmatrix(m: &Matrix, rows: usize, cols: usize, field: &str) -> Result<DMatrix<f64>, ConfigError> {
    if m.len() != rows {
        return Err(ConfigError(format!(
            "{field}: expected {rows} rows, found {}",
            m.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (i, row) in m.iter().enumerate() {
        if row.len() != cols {
            return Err(ConfigError(format!(
                "{field}[{i}]: expected {cols} columns, found {}",
                row.len()
            )));
        }
        for &v in row {
            if !v.is_finite() {
                return Err(ConfigError(format!("{field}[{i}]: non-finite entry")));
            }
            data.push(v);
        }
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn required<'a>(m: &'a Option<Matrix>, field: &str) -> Result<&'a Matrix, ConfigError> {
    m.as_ref().ok_or_else(|| {
        ConfigError(format!(
            "{field}: missing; this placeholder must be filled with the externally-sourced matrix"
        ))
    })
}

impl ExperimentConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    /// Builds the system model, checking every declared dimension.
    pub fn build_model(&self) -> Result<SystemModel, ConfigError> {
        let mb = &self.model;
        if mb.n == 0 || mb.m == 0 || mb.p == 0 {
            return Err(ConfigError("model.n/m/p: must all be >= 1".into()));
        }
        let a = to_dmatrix(required(&mb.a, "model.a")?, mb.n, mb.n, "model.a")?;
        let a1 = to_dmatrix(&mb.a1, mb.n, mb.n, "model.a1")?;
        let b = to_dmatrix(required(&mb.b, "model.b")?, mb.n, mb.m, "model.b")?;
        let e = to_dmatrix(required(&mb.e, "model.e")?, mb.n, mb.p, "model.e")?;
        if mb.c.is_empty() {
            return Err(ConfigError("model.c: must have at least one row".into()));
        }
        let c = to_dmatrix(&mb.c, mb.c.len(), mb.n, "model.c")?;
        if mb.d.is_empty() {
            return Err(ConfigError("model.d: must have at least one row".into()));
        }
        let d = to_dmatrix(&mb.d, mb.d.len(), mb.m, "model.d")?;
        if !(mb.gamma > 0.0) {
            return Err(ConfigError("model.gamma: must be positive".into()));
        }
        SystemModel::new(a, a1, b, e, c, d, mb.gamma)
            .map_err(|e| ConfigError(format!("model: {e}")))
    }

    pub fn validated_sim(&self) -> Result<SimConfig, ConfigError> {
        if self.sim.x0.len() != self.model.n {
            return Err(ConfigError(format!(
                "sim.x0: expected length {}, found {}",
                self.model.n,
                self.sim.x0.len()
            )));
        }
        self.sim
            .validate()
            .map_err(|e| ConfigError(format!("sim: {e}")))?;
        Ok(self.sim.clone())
    }

    pub fn solve_p0(&self) -> Result<Option<SymMat>, ConfigError> {
        match &self.solve.p0 {
            None => Ok(None),
            Some(m) => {
                let mat = to_dmatrix(m, self.model.n, self.model.n, "solve.p0")?;
                Ok(Some(SymMat::new(mat).map_err(|e| {
                    ConfigError(format!("solve.p0: {e}"))
                })?))
            }
        }
    }

    pub fn learn_block(&self) -> Result<&LearnBlock, ConfigError> {
        self.learn
            .as_ref()
            .ok_or_else(|| ConfigError("learn: block missing".into()))
    }

    pub fn robust_block(&self) -> Result<&RobustBlock, ConfigError> {
        self.robust
            .as_ref()
            .ok_or_else(|| ConfigError("robust: block missing".into()))
    }

    pub fn initial_gains(&self, lb: &LearnBlock) -> Result<PolicyPair, ConfigError> {
        let l = to_dmatrix(
            &lb.initial_gains.l,
            self.model.m,
            self.model.n,
            "learn.initial_gains.l",
        )?;
        let f = to_dmatrix(
            &lb.initial_gains.f,
            self.model.p,
            self.model.n,
            "learn.initial_gains.f",
        )?;
        Ok(PolicyPair::new(l, f))
    }

    pub fn p0_hat(&self, lb: &LearnBlock) -> Result<Option<SymMat>, ConfigError> {
        match &lb.p0_hat {
            None => Ok(None),
            Some(m) => {
                let mat = to_dmatrix(m, self.model.n, self.model.n, "learn.p0_hat")?;
                Ok(Some(SymMat::new(mat).map_err(|e| {
                    ConfigError(format!("learn.p0_hat: {e}"))
                })?))
            }
        }
    }

    /// Number of regression unknowns for the declared dimensions.
    pub fn unknowns(&self) -> usize {
        let (n, m, p) = (self.model.n, self.model.m, self.model.p);
        n * (n + 1) / 2 + n * m + n * p
    }

    pub fn schedule_for(&self, rb: &RobustBlock, delta: f64) -> Result<ErrorSchedule, ConfigError> {
        match rb.schedule.kind.as_str() {
            "constant" => Ok(ErrorSchedule::Constant { magnitude: delta }),
            "decaying" => Ok(ErrorSchedule::Decaying {
                magnitude: delta,
                factor: rb.schedule.factor,
            }),
            other => Err(ConfigError(format!(
                "robust.schedule.kind: unknown kind {other:?} (expected \"constant\" or \"decaying\")"
            ))),
        }
    }
}
