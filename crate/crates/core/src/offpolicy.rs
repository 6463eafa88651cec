//! Off-policy learning loops: data is collected once under fixed behavior
//! policies, then target gains are improved iteratively by least-squares
//! policy evaluation. The learning phase sees only the data, the cost
//! weights Q and R and the attenuation level gamma; the dynamics matrices
//! are touched exclusively by the simulator (or the exact-moment oracle).

use std::path::Path;

use crate::datamat::{
    assemble, estimate_stats, exact_stats, rank_check, solve_ls, CostSpec, DataMatrices,
    IntervalSpec, RankReport,
};
use crate::error::{Error, Result};
use crate::gare::{PolicyPair, SystemModel};
use crate::ioutil;
use crate::sde::{simulate_batch, ms_decay_probe, ExplorationSpec, SimConfig, TrajectoryBatch};
use crate::symlin::SymMat;

/// How the interval statistics are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnMode {
    /// Exact conditional expectations from the moment ODEs (noise-free).
    Exact,
    /// Ensemble averages over simulated sample paths.
    MonteCarlo,
}

/// Configuration of one learning run.
#[derive(Debug, Clone)]
pub struct LearnConfig {
    /// Initial behavior gains, applied to the plant for data collection.
    pub initial_gains: PolicyPair,
    /// Optional value-matrix guess behind the initial gains; metadata only,
    /// the loop never reads it.
    pub p0_hat: Option<SymMat>,
    /// Iteration budget N.
    pub n_iter: usize,
    pub spec: IntervalSpec,
    pub sim: SimConfig,
    pub mode: LearnMode,
    /// Early stop once consecutive value iterates differ by less than this;
    /// zero disables the early stop.
    pub stop_tol: f64,
    /// Skip the pre-run stabilizing probe of the behavior policy.
    pub skip_probe: bool,
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::InvalidArgument("iteration budget must be >= 1".into()));
        }
        if let Some(p0) = &self.p0_hat {
            if p0.min_eigenvalue() < -1e-10 * p0.norm().max(1.0) {
                return Err(Error::InvalidArgument(
                    "initial value guess must be positive semidefinite".into(),
                ));
            }
        }
        self.spec.validate()?;
        self.sim.validate()?;
        if self.sim.t_end + 1e-12 < self.spec.last_end() {
            return Err(Error::InvalidArgument(format!(
                "simulation horizon {} does not cover the last interval end {}",
                self.sim.t_end,
                self.spec.last_end()
            )));
        }
        Ok(())
    }
}

/// One recorded learning iterate (post policy improvement).
#[derive(Debug, Clone)]
pub struct LearnIterate {
    pub index: usize,
    pub p_hat: SymMat,
    pub gains: PolicyPair,
    pub ls_residual: f64,
    pub rank_ok: bool,
}

/// Iteration history and final estimates of one learning run.
#[derive(Debug, Clone)]
pub struct LearnTrace {
    pub iterates: Vec<LearnIterate>,
    pub rank_report: RankReport,
}

impl LearnTrace {
    pub fn final_p(&self) -> &SymMat {
        &self.iterates.last().expect("trace is never empty").p_hat
    }

    pub fn final_gains(&self) -> &PolicyPair {
        &self.iterates.last().expect("trace is never empty").gains
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }
}

/// The learning phase proper: iterates policy evaluation and improvement on
/// a fixed set of interval statistics. Model-free by construction; the
/// signature admits no dynamics matrices.
pub fn learn_from_data(
    dm: &DataMatrices,
    costs: &CostSpec,
    initial_gains: PolicyPair,
    n_iter: usize,
    stop_tol: f64,
) -> Result<LearnTrace> {
    if n_iter == 0 {
        return Err(Error::InvalidArgument("iteration budget must be >= 1".into()));
    }
    let (n, m, p) = dm.dims();
    let rank_report = rank_check(dm);
    if !rank_report.ok {
        return Err(Error::RankDeficient {
            rank: rank_report.rank,
            required: rank_report.required,
            sigma_ratio: rank_report.sigma_ratio,
        });
    }
    let r_inv = costs
        .r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Model("R is singular".into()))?;
    let gamma2 = costs.gamma * costs.gamma;

    let mut gains = initial_gains;
    let mut iterates: Vec<LearnIterate> = Vec::with_capacity(n_iter);
    for i in 0..n_iter {
        let (phi, upsilon) = assemble(dm, &gains, costs)?;
        let reg = solve_ls(&phi, &upsilon, n, m, p)?;
        if !reg.p_next.is_finite()
            || reg.theta2.iter().any(|x| !x.is_finite())
            || reg.theta3.iter().any(|x| !x.is_finite())
        {
            return Err(Error::NonFiniteIterate { iteration: i + 1 });
        }
        gains = PolicyPair::new(&r_inv * &reg.theta2, &reg.theta3 * (-1.0 / gamma2));
        let p_hat = reg.p_next;
        let done = stop_tol > 0.0
            && iterates
                .last()
                .map(|prev: &LearnIterate| (&p_hat - &prev.p_hat).norm() < stop_tol)
                .unwrap_or(false);
        iterates.push(LearnIterate {
            index: i + 1,
            p_hat,
            gains: gains.clone(),
            ls_residual: reg.residual_norm,
            rank_ok: rank_report.ok,
        });
        if done {
            break;
        }
    }
    Ok(LearnTrace {
        iterates,
        rank_report,
    })
}

/// Classification returned by [`behavior_probe`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOutcome {
    pub stabilizing: bool,
    pub initial_moment: f64,
    pub final_moment: f64,
}

/// Default contraction factor the probe requires over its horizon.
pub const PROBE_DECAY_FACTOR: f64 = 0.5;

/// Empirical stability check of a policy pair: simulates a short
/// exploration-free batch and compares the terminal ensemble second moment
/// against the initial one. The verdict is vacuous from a zero initial
/// state; probe from a nonzero x0.
pub fn behavior_probe(
    model: &SystemModel,
    gains: &PolicyPair,
    sim: &SimConfig,
) -> Result<ProbeOutcome> {
    behavior_probe_with_factor(model, gains, sim, PROBE_DECAY_FACTOR)
}

pub fn behavior_probe_with_factor(
    model: &SystemModel,
    gains: &PolicyPair,
    sim: &SimConfig,
    factor: f64,
) -> Result<ProbeOutcome> {
    let mut quiet = sim.clone();
    quiet.exploration = ExplorationSpec::none();
    let batch = match simulate_batch(model, gains, &quiet) {
        Ok(b) => b,
        // an exploding path is itself a "not stabilizing" verdict
        Err(Error::PathDiverged { .. }) => {
            return Ok(ProbeOutcome {
                stabilizing: false,
                initial_moment: f64::NAN,
                final_moment: f64::INFINITY,
            })
        }
        Err(e) => return Err(e),
    };
    let probe = ms_decay_probe(&batch);
    let initial = probe.first().map(|&(_, v)| v).unwrap_or(0.0);
    let fin = probe.last().map(|&(_, v)| v).unwrap_or(0.0);
    Ok(ProbeOutcome {
        stabilizing: fin <= factor * initial,
        initial_moment: initial,
        final_moment: fin,
    })
}

/// Full off-policy run: collect data once under the behavior policies
/// (phase 1), then learn target gains from the frozen statistics (phase 2).
///
/// Returns the trace plus the batch when one was simulated.
pub fn run_learning(
    model_for_sim: &SystemModel,
    cfg: &LearnConfig,
) -> Result<(LearnTrace, Option<TrajectoryBatch>)> {
    cfg.validate()?;
    cfg.initial_gains.check_dims(model_for_sim)?;
    if !cfg.skip_probe {
        let probe = behavior_probe(model_for_sim, &cfg.initial_gains, &cfg.sim)?;
        if !probe.stabilizing {
            return Err(Error::NotStabilizing(format!(
                "ensemble second moment went from {:.3e} to {:.3e} over the probe horizon; \
                 pick different initial gains",
                probe.initial_moment, probe.final_moment
            )));
        }
    }
    let (dm, batch) = match cfg.mode {
        LearnMode::Exact => (
            exact_stats(model_for_sim, &cfg.initial_gains, &cfg.spec, &cfg.sim)?,
            None,
        ),
        LearnMode::MonteCarlo => {
            let batch = simulate_batch(model_for_sim, &cfg.initial_gains, &cfg.sim)?;
            (estimate_stats(&batch, &cfg.spec)?, Some(batch))
        }
    };
    // phase 2 sees only data and cost weights
    let costs = CostSpec::from_model(model_for_sim);
    let trace = learn_from_data(&dm, &costs, cfg.initial_gains.clone(), cfg.n_iter, cfg.stop_tol)?;
    Ok((trace, batch))
}

/// Writes the trace as CSV with the distance-to-reference columns; absent
/// references produce NaN columns.
pub fn export_learn_trace(
    trace: &LearnTrace,
    refs: Option<(&SymMat, &PolicyPair)>,
    path: &Path,
) -> Result<()> {
    let mut out = String::from("iteration,p_err,l_err,f_err,ls_residual\n");
    for it in &trace.iterates {
        let (pe, le, fe) = match refs {
            Some((p_ref, g_ref)) => (
                (&it.p_hat - p_ref).norm(),
                (&it.gains.l - &g_ref.l).norm(),
                (&it.gains.f - &g_ref.f).norm(),
            ),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            it.index,
            ioutil::format_f64(pe),
            ioutil::format_f64(le),
            ioutil::format_f64(fe),
            ioutil::format_f64(it.ls_residual)
        ));
    }
    ioutil::atomic_write(path, out.as_bytes())
}
