//! Subcommand implementations: each consumes a validated configuration and
//! writes its artifacts atomically under the output directory.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rayon::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use stochinf::datamat::IntervalSpec;
use stochinf::gare::{spu_solve, spu_solve_ramp, PolicyPair, SpuTrace, DEFAULT_RAMP};
use stochinf::ioutil;
use stochinf::offpolicy::{export_learn_trace, run_learning, LearnConfig, LearnMode};
use stochinf::robust::{export_sweep, random_symmetric_direction, run_robust_spu};
use stochinf::sde::{export_batch, simulate_batch};
use stochinf::symlin::SymMat;

use crate::config::{ConfigError, ExperimentConfig};

/// Errors split by exit code: configuration problems exit 2, numerical
/// failures exit 3.
#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Numerical(stochinf::Error),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Numerical(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<stochinf::Error> for CliError {
    fn from(e: stochinf::Error) -> Self {
        CliError::Numerical(e)
    }
}

pub type CmdResult = Result<(), CliError>;

#[derive(Serialize)]
struct ValueArtifact {
    p: Vec<Vec<f64>>,
    residual_norm: f64,
    iterations: usize,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn write_spu_trace(trace: &SpuTrace, path: &Path) -> CmdResult {
    let mut out = String::from("iteration,residual_norm,error_to_ref\n");
    for it in &trace.iterates {
        out.push_str(&format!(
            "{},{},{}\n",
            it.index,
            ioutil::format_f64(it.residual_norm),
            ioutil::format_f64(it.error_to_ref.unwrap_or(f64::NAN))
        ));
    }
    ioutil::atomic_write(path, out.as_bytes()).map_err(CliError::Numerical)
}

fn run_solver(cfg: &ExperimentConfig) -> Result<SpuTrace, CliError> {
    let model = cfg.build_model()?;
    let trace = match cfg.solve_p0()? {
        Some(p0) => spu_solve(&model, &p0, cfg.solve.max_iter, cfg.solve.tol, None)?,
        None => spu_solve_ramp(&model, &DEFAULT_RAMP, cfg.solve.max_iter, cfg.solve.tol, None)?,
    };
    Ok(trace)
}

/// Model-based solve: writes `spu_trace.csv` and `P_star.json`.
pub fn cmd_solve(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    cfg.validated_sim()?;
    let trace = run_solver(cfg)?;
    std::fs::create_dir_all(out).map_err(CliError::Io)?;
    write_spu_trace(&trace, &out.join("spu_trace.csv"))?;
    let artifact = ValueArtifact {
        p: matrix_rows(trace.final_p().as_matrix()),
        residual_norm: trace.final_residual(),
        iterations: trace.len() - 1,
    };
    ioutil::write_json_17(&out.join("P_star.json"), &artifact).map_err(CliError::Numerical)?;
    println!(
        "solve: converged in {} iterations, residual {:.3e}",
        trace.len() - 1,
        trace.final_residual()
    );
    Ok(())
}

fn learn_config(
    cfg: &ExperimentConfig,
    mode_override: Option<LearnMode>,
) -> Result<LearnConfig, CliError> {
    let lb = cfg.learn_block()?;
    if lb.sub_steps == 0 {
        return Err(ConfigError("learn.sub_steps: must be >= 1".into()).into());
    }
    if !(lb.interval_width > 0.0) {
        return Err(ConfigError("learn.interval_width: must be positive".into()).into());
    }
    let s = lb.num_intervals.unwrap_or(2 * cfg.unknowns());
    let spec = IntervalSpec::contiguous(s, lb.interval_width);
    let mut sim = cfg.validated_sim()?;
    // every collection sub-instant must land on the integration grid
    sim.dt_fine = lb.interval_width / lb.sub_steps as f64;
    sim.t_end = spec.last_end();
    Ok(LearnConfig {
        initial_gains: cfg.initial_gains(lb)?,
        p0_hat: cfg.p0_hat(lb)?,
        n_iter: lb.n_iter,
        spec,
        sim,
        mode: mode_override.unwrap_or(lb.mode),
        stop_tol: lb.stop_tol,
        skip_probe: false,
    })
}

/// Off-policy learning: writes `learn_trace.csv`, `P_hat.json` and (in
/// Monte-Carlo mode) the trajectory bundle under `batch/`.
pub fn cmd_learn(
    cfg: &ExperimentConfig,
    out: &Path,
    mode_override: Option<LearnMode>,
) -> CmdResult {
    let model = cfg.build_model()?;
    let lc = learn_config(cfg, mode_override)?;
    let (trace, batch) = run_learning(&model, &lc)?;

    println!(
        "learn: rank {}/{} ({}), {} iterations, final least-squares residual {:.3e}",
        trace.rank_report.rank,
        trace.rank_report.required,
        if trace.rank_report.ok { "ok" } else { "DEFICIENT" },
        trace.len(),
        trace.iterates.last().map(|it| it.ls_residual).unwrap_or(f64::NAN)
    );

    // reference solution for the error columns, when the model admits one
    let reference = spu_solve_ramp(&model, &DEFAULT_RAMP, cfg.solve.max_iter, cfg.solve.tol, None)
        .ok()
        .map(|t| {
            let gains = PolicyPair::from_value(&model, t.final_p()).expect("dims agree");
            (t.final_p().clone(), gains)
        });

    std::fs::create_dir_all(out).map_err(CliError::Io)?;
    export_learn_trace(
        &trace,
        reference.as_ref().map(|(p, g)| (p, g)),
        &out.join("learn_trace.csv"),
    )?;
    let artifact = ValueArtifact {
        p: matrix_rows(trace.final_p().as_matrix()),
        residual_norm: trace
            .iterates
            .last()
            .map(|it| it.ls_residual)
            .unwrap_or(f64::NAN),
        iterations: trace.len(),
    };
    ioutil::write_json_17(&out.join("P_hat.json"), &artifact).map_err(CliError::Numerical)?;
    if let Some(batch) = batch {
        export_batch(&batch, &out.join("batch"))?;
    }
    if let Some((p_ref, _)) = &reference {
        println!(
            "learn: distance to model-based solution {:.3e}",
            (trace.final_p() - p_ref).norm()
        );
    }
    Ok(())
}

/// Robustness sweep: writes `iss_sweep.csv` with one row per
/// (delta, seed, iteration).
pub fn cmd_robust(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let rb = cfg.robust_block()?.clone();
    if rb.deltas.is_empty() || rb.seeds.is_empty() {
        return Err(ConfigError("robust.deltas/seeds: must be non-empty".into()).into());
    }
    let model = cfg.build_model()?;
    let solve = run_solver(cfg)?;
    let p_star = solve.final_p().clone();

    let mut cases = Vec::new();
    for &delta in &rb.deltas {
        let schedule = cfg.schedule_for(&rb, delta)?;
        for &seed in &rb.seeds {
            cases.push((delta, schedule.clone(), seed));
        }
    }
    // runs are independent and pure; rows are flattened in case order
    type SweepRow = (f64, u64, usize, f64);
    let per_case: Result<Vec<Vec<SweepRow>>, stochinf::Error> = cases
        .par_iter()
        .map(|(delta, schedule, seed)| {
            let mut dir_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed_0001);
            let dir = random_symmetric_direction(&mut dir_rng, model.state_dim(), 1.0);
            let p0_hat = SymMat::new(p_star.as_matrix() + dir * (rb.rho * p_star.norm()))
                .expect("square by construction");
            let trace = run_robust_spu(&model, &p0_hat, schedule, rb.n_iter, *seed, &p_star)?;
            Ok(trace
                .iterates
                .iter()
                .map(|it| (*delta, *seed, it.index, it.error_norm))
                .collect())
        })
        .collect();
    let rows: Vec<(f64, u64, usize, f64)> = per_case?.into_iter().flatten().collect();
    std::fs::create_dir_all(out).map_err(CliError::Io)?;
    export_sweep(&rows, &out.join("iss_sweep.csv"))?;
    println!(
        "robust: swept {} levels x {} seeds over {} iterations",
        rb.deltas.len(),
        rb.seeds.len(),
        rb.n_iter
    );
    Ok(())
}

/// Plain simulation under the configured behavior policy; writes the
/// trajectory bundle under `batch/`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let model = cfg.build_model()?;
    let sim = cfg.validated_sim()?;
    let gains = match &cfg.learn {
        Some(lb) => cfg.initial_gains(lb)?,
        None => PolicyPair::new(
            DMatrix::zeros(model.control_dim(), model.state_dim()),
            DMatrix::zeros(model.disturbance_dim(), model.state_dim()),
        ),
    };
    let batch = simulate_batch(&model, &gains, &sim)?;
    export_batch(&batch, &out.join("batch"))?;
    println!(
        "simulate: {} paths x {} steps x {} states written",
        batch.num_paths(),
        batch.num_steps(),
        batch.state_dim()
    );
    Ok(())
}

/// Fixed artifact schemas, one block per output file.
pub fn print_schema() {
    println!("spu_trace.csv:      iteration,residual_norm,error_to_ref");
    println!("learn_trace.csv:    iteration,p_err,l_err,f_err,ls_residual");
    println!("iss_sweep.csv:      delta,seed,iteration,error_norm");
    println!("batch/times.csv:    step,time");
    println!("batch/states.csv:   path,step,component,value");
    println!("batch/controls.csv: path,step,component,value");
    println!("batch/disturbances.csv: path,step,component,value");
    println!("batch/meta.json:    {{config, state_dim, control_dim, disturbance_dim}}");
    println!("P_star.json / P_hat.json: {{p, residual_norm, iterations}}");
    println!();
    println!("floats are serialized with 17 significant digits (lossless f64)");
}

/// Resolved output directory: the --out flag wins over the config.
pub fn output_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
}
