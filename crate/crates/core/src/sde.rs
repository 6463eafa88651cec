//! Euler-Maruyama simulation of the linear Ito system
//! `dx = (Ax + Bu + Ev) dt + A1 x dW` under behavior policies with
//! exploration, producing reproducible trajectory batches.
//!
//! Determinism contract: every path draws from its own ChaCha stream seeded
//! by `seed ^ path_index`, so a batch is bit-identical across reruns and
//! thread schedules; paths are assembled in index order.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gare::{PolicyPair, SystemModel};
use crate::ioutil;

/// Exploration dither added to the behavior policies during data collection.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExplorationSpec {
    pub kind: ExplorationKind,
    pub amplitude: f64,
    /// Sinusoid frequencies in rad/time; when absent, ten frequencies per
    /// channel are drawn from [0.1, 5] using the batch seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequencies: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ExplorationKind {
    Sinusoids,
    White,
}

impl ExplorationSpec {
    pub fn sinusoids(amplitude: f64) -> Self {
        Self {
            kind: ExplorationKind::Sinusoids,
            amplitude,
            frequencies: None,
        }
    }

    pub fn white(amplitude: f64) -> Self {
        Self {
            kind: ExplorationKind::White,
            amplitude,
            frequencies: None,
        }
    }

    pub fn none() -> Self {
        Self::sinusoids(0.0)
    }

    fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0) {
            return Err(Error::InvalidArgument(
                "exploration amplitude must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ExplorationSpec {
    fn default() -> Self {
        Self::sinusoids(0.1)
    }
}

const DEFAULT_SINUSOID_TERMS: usize = 10;
const EXPLORATION_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Realized sinusoid parameters for one simulation: per input channel, a
/// bank of (frequency, phase) pairs derived from the batch seed.
#[derive(Debug, Clone)]
pub struct ExplorationSignal {
    kind: ExplorationKind,
    amplitude: f64,
    channels: Vec<Vec<(f64, f64)>>,
}

impl ExplorationSignal {
    pub fn realize(spec: &ExplorationSpec, seed: u64, num_channels: usize) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ EXPLORATION_SEED_SALT);
        let channels = (0..num_channels)
            .map(|_| match &spec.frequencies {
                Some(freqs) => freqs
                    .iter()
                    .map(|&w| (w, rng.gen_range(0.0..std::f64::consts::TAU)))
                    .collect(),
                None => (0..DEFAULT_SINUSOID_TERMS)
                    .map(|_| {
                        (
                            rng.gen_range(0.1..5.0),
                            rng.gen_range(0.0..std::f64::consts::TAU),
                        )
                    })
                    .collect(),
            })
            .collect();
        Self {
            kind: spec.kind,
            amplitude: spec.amplitude,
            channels,
        }
    }

    /// Deterministic component of channel `c` at time `t`. White exploration
    /// has no deterministic component; its draws come from the path stream.
    pub fn eval(&self, channel: usize, t: f64) -> f64 {
        match self.kind {
            ExplorationKind::Sinusoids => {
                self.amplitude
                    * self.channels[channel]
                        .iter()
                        .map(|&(w, phi)| (w * t + phi).sin())
                        .sum::<f64>()
            }
            ExplorationKind::White => 0.0,
        }
    }

    fn is_white(&self) -> bool {
        matches!(self.kind, ExplorationKind::White)
    }
}

/// Simulation parameters: initial state, horizon, integration step, number
/// of sample paths, master seed, and exploration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimConfig {
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub dt_fine: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub exploration: ExplorationSpec,
    /// Antithetic variance reduction: paths 2k and 2k+1 share a noise
    /// stream with negated Gaussian draws, cancelling the first-order
    /// Brownian contribution to ensemble averages.
    #[serde(default)]
    pub antithetic: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_fine > 0.0) {
            return Err(Error::InvalidArgument("dt_fine must be positive".into()));
        }
        if !(self.t_end >= self.dt_fine) {
            return Err(Error::InvalidArgument("t_end must be >= dt_fine".into()));
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
        }
        if self.x0.is_empty() {
            return Err(Error::InvalidArgument("x0 must be non-empty".into()));
        }
        self.exploration.validate()?;
        self.num_steps()?;
        Ok(())
    }

    /// Number of integration steps; the horizon must sit on the step grid.
    pub fn num_steps(&self) -> Result<usize> {
        let ratio = self.t_end / self.dt_fine;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) || steps < 1.0 {
            return Err(Error::GridAlignment(format!(
                "t_end {} is not an integer multiple of dt_fine {}",
                self.t_end, self.dt_fine
            )));
        }
        Ok(steps as usize)
    }

    pub fn x0_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x0)
    }
}

/// One batch of simulated sample paths on a shared uniform time grid,
/// immutable after creation. Inputs are recorded exactly as applied.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    times: Vec<f64>,
    /// Per path: (steps+1) x n states.
    states: Vec<DMatrix<f64>>,
    /// Per path: (steps+1) x m applied controls (last row evaluated, not applied).
    controls: Vec<DMatrix<f64>>,
    /// Per path: (steps+1) x p applied disturbances.
    disturbances: Vec<DMatrix<f64>>,
    config: SimConfig,
}

impl TrajectoryBatch {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn num_paths(&self) -> usize {
        self.states.len()
    }

    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].ncols()
    }

    pub fn control_dim(&self) -> usize {
        self.controls[0].ncols()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.disturbances[0].ncols()
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn state(&self, path: usize, step: usize) -> DVector<f64> {
        self.states[path].row(step).transpose()
    }

    pub fn control(&self, path: usize, step: usize) -> DVector<f64> {
        self.controls[path].row(step).transpose()
    }

    pub fn disturbance(&self, path: usize, step: usize) -> DVector<f64> {
        self.disturbances[path].row(step).transpose()
    }

    pub fn states_of(&self, path: usize) -> &DMatrix<f64> {
        &self.states[path]
    }
}

/// Simulates `cfg.n_paths` Euler-Maruyama paths under the behavior policies
/// `u = -Lx + e_u(t)`, `v = -Fx + e_v(t)`.
pub fn simulate_batch(
    model: &SystemModel,
    gains: &PolicyPair,
    cfg: &SimConfig,
) -> Result<TrajectoryBatch> {
    simulate_batch_from(model, gains, cfg, 0.0)
}

/// [`simulate_batch`] with the clock started at `t_start`: the exploration
/// signal is evaluated at global time while the recorded grid stays local.
/// Used to respawn window continuations from a recorded state.
pub fn simulate_batch_from(
    model: &SystemModel,
    gains: &PolicyPair,
    cfg: &SimConfig,
    t_start: f64,
) -> Result<TrajectoryBatch> {
    cfg.validate()?;
    gains.check_dims(model)?;
    let n = model.state_dim();
    if cfg.x0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "x0 has length {} but the state dimension is {}",
            cfg.x0.len(),
            n
        )));
    }
    let steps = cfg.num_steps()?;
    let h = cfg.dt_fine;
    let m = model.control_dim();
    let p = model.disturbance_dim();
    let signal = ExplorationSignal::realize(&cfg.exploration, cfg.seed, m + p);
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();

    type PathArrays = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);
    let paths: Result<Vec<PathArrays>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            let (stream, sign) = if cfg.antithetic {
                ((path / 2) as u64, if path % 2 == 0 { 1.0 } else { -1.0 })
            } else {
                (path as u64, 1.0)
            };
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ stream);
            let mut x = cfg.x0_vector();
            let mut xs = DMatrix::zeros(steps + 1, n);
            let mut us = DMatrix::zeros(steps + 1, m);
            let mut vs = DMatrix::zeros(steps + 1, p);
            let sqrt_h = h.sqrt();
            for (k, time) in times.iter().enumerate() {
                if !x.iter().all(|c| c.is_finite()) {
                    return Err(Error::PathDiverged { path, step: k });
                }
                let t = t_start + time;
                let mut u = -(&gains.l * &x);
                let mut v = -(&gains.f * &x);
                // fixed draw order per step: exploration first, then the
                // Brownian increment
                if signal.is_white() {
                    for c in 0..m {
                        let z: f64 = rng.sample(StandardNormal);
                        u[c] += signal.amplitude * sign * z;
                    }
                    for c in 0..p {
                        let z: f64 = rng.sample(StandardNormal);
                        v[c] += signal.amplitude * sign * z;
                    }
                } else {
                    for c in 0..m {
                        u[c] += signal.eval(c, t);
                    }
                    for c in 0..p {
                        v[c] += signal.eval(m + c, t);
                    }
                }
                xs.row_mut(k).copy_from(&x.transpose());
                us.row_mut(k).copy_from(&u.transpose());
                vs.row_mut(k).copy_from(&v.transpose());
                if k == steps {
                    break;
                }
                let dw: f64 = rng.sample::<f64, _>(StandardNormal) * sign * sqrt_h;
                let drift = model.a() * &x + model.b() * &u + model.e() * &v;
                x += drift * h + model.a1() * &x * dw;
            }
            Ok((xs, us, vs))
        })
        .collect();
    let paths = paths?;

    let mut states = Vec::with_capacity(cfg.n_paths);
    let mut controls = Vec::with_capacity(cfg.n_paths);
    let mut disturbances = Vec::with_capacity(cfg.n_paths);
    for (xs, us, vs) in paths {
        states.push(xs);
        controls.push(us);
        disturbances.push(vs);
    }
    Ok(TrajectoryBatch {
        times,
        states,
        controls,
        disturbances,
        config: cfg.clone(),
    })
}

/// Ensemble second-moment curve `t -> mean ||x(t)||^2`, the empirical probe
/// for internal (mean-square) stability.
pub fn ms_decay_probe(batch: &TrajectoryBatch) -> Vec<(f64, f64)> {
    let paths = batch.num_paths() as f64;
    batch
        .times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mean = batch
                .states
                .iter()
                .map(|xs| xs.row(k).norm_squared())
                .sum::<f64>()
                / paths;
            (t, mean)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct BatchMeta {
    config: SimConfig,
    state_dim: usize,
    control_dim: usize,
    disturbance_dim: usize,
}

fn write_array_csv(path: &Path, arrays: &[DMatrix<f64>]) -> Result<()> {
    let mut out = String::from("path,step,component,value\n");
    for (l, arr) in arrays.iter().enumerate() {
        for k in 0..arr.nrows() {
            for c in 0..arr.ncols() {
                out.push_str(&format!(
                    "{l},{k},{c},{}\n",
                    ioutil::format_f64(arr[(k, c)])
                ));
            }
        }
    }
    ioutil::atomic_write(path, out.as_bytes())
}

fn read_array_csv(
    path: &Path,
    n_paths: usize,
    n_rows: usize,
    n_cols: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let (header, rows) = ioutil::read_numeric_csv(path)?;
    if header != "path,step,component,value" {
        return Err(Error::Parse(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let mut arrays = vec![DMatrix::zeros(n_rows, n_cols); n_paths];
    for row in rows {
        if row.len() != 4 {
            return Err(Error::Parse(format!(
                "{}: expected 4 columns",
                path.display()
            )));
        }
        let (l, k, c) = (row[0] as usize, row[1] as usize, row[2] as usize);
        if l >= n_paths || k >= n_rows || c >= n_cols {
            return Err(Error::Parse(format!(
                "{}: index ({l},{k},{c}) out of bounds",
                path.display()
            )));
        }
        arrays[l][(k, c)] = row[3];
    }
    Ok(arrays)
}

/// Exports a batch as a CSV bundle (one file per array) plus a JSON sidecar
/// echoing the configuration and seed.
pub fn export_batch(batch: &TrajectoryBatch, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = BatchMeta {
        config: batch.config.clone(),
        state_dim: batch.state_dim(),
        control_dim: batch.control_dim(),
        disturbance_dim: batch.disturbance_dim(),
    };
    ioutil::write_json_17(&dir.join("meta.json"), &meta)?;

    let mut times = String::from("step,time\n");
    for (k, t) in batch.times.iter().enumerate() {
        times.push_str(&format!("{k},{}\n", ioutil::format_f64(*t)));
    }
    ioutil::atomic_write(&dir.join("times.csv"), times.as_bytes())?;

    write_array_csv(&dir.join("states.csv"), &batch.states)?;
    write_array_csv(&dir.join("controls.csv"), &batch.controls)?;
    write_array_csv(&dir.join("disturbances.csv"), &batch.disturbances)?;
    Ok(())
}

/// Reads back a bundle written by [`export_batch`].
pub fn import_batch(dir: &Path) -> Result<TrajectoryBatch> {
    let meta_text = std::fs::read_to_string(dir.join("meta.json"))?;
    let meta: BatchMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::Parse(format!("meta.json: {e}")))?;
    let (header, time_rows) = ioutil::read_numeric_csv(&dir.join("times.csv"))?;
    if header != "step,time" {
        return Err(Error::Parse(format!("times.csv: unexpected header {header:?}")));
    }
    let mut times = vec![0.0; time_rows.len()];
    for row in &time_rows {
        times[row[0] as usize] = row[1];
    }
    let n_rows = times.len();
    let n_paths = meta.config.n_paths;
    let states = read_array_csv(&dir.join("states.csv"), n_paths, n_rows, meta.state_dim)?;
    let controls = read_array_csv(&dir.join("controls.csv"), n_paths, n_rows, meta.control_dim)?;
    let disturbances = read_array_csv(
        &dir.join("disturbances.csv"),
        n_paths,
        n_rows,
        meta.disturbance_dim,
    )?;
    Ok(TrajectoryBatch {
        times,
        states,
        controls,
        disturbances,
        config: meta.config,
    })
}
