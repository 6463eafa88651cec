//! Interval statistics for policy evaluation from data: the increment and
//! integral matrices over collection windows, the rank gate for unique
//! least-squares identifiability, the regression assembly, and a noise-free
//! oracle that evaluates the same statistics from the exact moment ODEs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gare::{closed_loop_gains, PolicyPair, SystemModel};
use crate::ioutil;
use crate::sde::{simulate_batch, ExplorationKind, ExplorationSignal, SimConfig, TrajectoryBatch};
use crate::symlin::{tri_len, xtilde, SymMat};

/// Relative singular-value threshold for the numerical rank decisions.
pub const RANK_RTOL: f64 = 1e-10;

/// Collection windows `[t_j, t_j + width]`, non-overlapping and ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSpec {
    pub starts: Vec<f64>,
    pub width: f64,
}

impl IntervalSpec {
    /// `count` contiguous windows of length `width` starting at t = 0.
    pub fn contiguous(count: usize, width: f64) -> Self {
        Self {
            starts: (0..count).map(|j| j as f64 * width).collect(),
            width,
        }
    }

    pub fn count(&self) -> usize {
        self.starts.len()
    }

    pub fn last_end(&self) -> f64 {
        self.starts.last().map(|t| t + self.width).unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.starts.is_empty() {
            return Err(Error::InvalidArgument("interval list must be non-empty".into()));
        }
        if !(self.width > 0.0) {
            return Err(Error::InvalidArgument("interval width must be positive".into()));
        }
        if self.starts[0] < 0.0 {
            return Err(Error::InvalidArgument("intervals must start at t >= 0".into()));
        }
        for w in self.starts.windows(2) {
            if w[0] + self.width > w[1] + 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "intervals overlap: [{}, {}] and [{}, ...]",
                    w[0],
                    w[0] + self.width,
                    w[1]
                )));
            }
        }
        Ok(())
    }

    fn to_grid(&self, h: f64, max_step: usize) -> Result<Vec<(usize, usize)>> {
        let snap = |t: f64, what: &str| -> Result<usize> {
            let ratio = t / h;
            let k = ratio.round();
            if (ratio - k).abs() > 1e-9 * ratio.abs().max(1.0) {
                return Err(Error::GridAlignment(format!(
                    "{what} {t} does not sit on the step grid (dt = {h})"
                )));
            }
            Ok(k as usize)
        };
        let kbar = snap(self.width, "interval width")?;
        if kbar == 0 {
            return Err(Error::GridAlignment("interval width shorter than one step".into()));
        }
        let mut out = Vec::with_capacity(self.starts.len());
        for &t in &self.starts {
            let k0 = snap(t, "interval start")?;
            if k0 + kbar > max_step {
                return Err(Error::GridAlignment(format!(
                    "interval [{t}, {}] extends past the simulated horizon",
                    t + self.width
                )));
            }
            out.push((k0, kbar));
        }
        Ok(out)
    }
}

/// Cost ingredients available to the model-free learner: Q, R and gamma.
/// Deliberately excludes the dynamics matrices.
#[derive(Debug, Clone)]
pub struct CostSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub gamma: f64,
}

impl CostSpec {
    pub fn from_model(model: &SystemModel) -> Self {
        Self {
            q: model.q().clone(),
            r: model.r().clone(),
            gamma: model.gamma(),
        }
    }
}

/// Interval statistics for one policy-evaluation round: per window, the
/// averaged increment of `vecs(xx')` and the averaged integrals of
/// `vecs(xx')`, `x (x) x`, `x (x) u` and `x (x) v`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    pub delta_xt: DMatrix<f64>,
    pub i_xt: DMatrix<f64>,
    pub i_xx: DMatrix<f64>,
    pub i_xu: DMatrix<f64>,
    pub i_xv: DMatrix<f64>,
    n: usize,
    m: usize,
    p: usize,
}

impl DataMatrices {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        delta_xt: DMatrix<f64>,
        i_xt: DMatrix<f64>,
        i_xx: DMatrix<f64>,
        i_xu: DMatrix<f64>,
        i_xv: DMatrix<f64>,
        n: usize,
        m: usize,
        p: usize,
    ) -> Result<Self> {
        let s = delta_xt.nrows();
        let nn = tri_len(n);
        let checks = [
            (delta_xt.shape(), (s, nn), "delta_xt"),
            (i_xt.shape(), (s, nn), "i_xt"),
            (i_xx.shape(), (s, n * n), "i_xx"),
            (i_xu.shape(), (s, n * m), "i_xu"),
            (i_xv.shape(), (s, n * p), "i_xv"),
        ];
        for (got, want, name) in checks {
            if got != want {
                return Err(Error::DimensionMismatch(format!(
                    "{name} must be {}x{}, got {}x{}",
                    want.0, want.1, got.0, got.1
                )));
            }
        }
        let dm = Self {
            delta_xt,
            i_xt,
            i_xx,
            i_xu,
            i_xv,
            n,
            m,
            p,
        };
        if !dm.all_finite() {
            return Err(Error::InvalidArgument("data matrices contain non-finite entries".into()));
        }
        Ok(dm)
    }

    pub fn num_intervals(&self) -> usize {
        self.delta_xt.nrows()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.p)
    }

    /// Number of regression unknowns n(n+1)/2 + nm + np.
    pub fn unknowns(&self) -> usize {
        tri_len(self.n) + self.n * self.m + self.n * self.p
    }

    fn all_finite(&self) -> bool {
        self.delta_xt.iter().all(|x| x.is_finite())
            && self.i_xt.iter().all(|x| x.is_finite())
            && self.i_xx.iter().all(|x| x.is_finite())
            && self.i_xu.iter().all(|x| x.is_finite())
            && self.i_xv.iter().all(|x| x.is_finite())
    }
}

fn kron_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[i * b.len() + j] = a[i] * b[j];
        }
    }
    out
}

/// Quadrature rule for the window integrals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuadratureRule {
    /// The per-sub-step sums `sum_k f(t_{j_k}) (t_{j_k} - t_{j_{k-1}})`.
    #[default]
    SubStepSum,
    /// Trapezoidal weights over the same partition.
    Trapezoid,
}

/// Estimates the interval statistics from a simulated batch: ensemble
/// averages over paths, with the integrals taken as the per-sub-step sums
/// over the window partition.
pub fn estimate_stats(batch: &TrajectoryBatch, spec: &IntervalSpec) -> Result<DataMatrices> {
    estimate_stats_with_rule(batch, spec, QuadratureRule::SubStepSum)
}

/// [`estimate_stats`] with an explicit quadrature rule.
pub fn estimate_stats_with_rule(
    batch: &TrajectoryBatch,
    spec: &IntervalSpec,
    rule: QuadratureRule,
) -> Result<DataMatrices> {
    spec.validate()?;
    let h = batch.config().dt_fine;
    let grid = spec.to_grid(h, batch.num_steps())?;
    let (n, m, p) = (batch.state_dim(), batch.control_dim(), batch.disturbance_dim());
    let s = grid.len();
    let d = tri_len(n) + n * m + n * p;
    if s < d {
        return Err(Error::InvalidArgument(format!(
            "{s} intervals cannot identify {d} unknowns; use at least {d}"
        )));
    }
    let paths = batch.num_paths() as f64;

    type StatRow = (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>);
    let rows: Vec<StatRow> = grid
        .par_iter()
        .map(|&(k0, kbar)| {
            let mut delta = DVector::zeros(tri_len(n));
            let mut acc_xt = DVector::zeros(tri_len(n));
            let mut acc_xx = DVector::zeros(n * n);
            let mut acc_xu = DVector::zeros(n * m);
            let mut acc_xv = DVector::zeros(n * p);
            for l in 0..batch.num_paths() {
                delta += xtilde(&batch.state(l, k0 + kbar)) - xtilde(&batch.state(l, k0));
                let weight = |k: usize| match rule {
                    QuadratureRule::SubStepSum => {
                        if k == 0 {
                            0.0
                        } else {
                            h
                        }
                    }
                    QuadratureRule::Trapezoid => {
                        if k == 0 || k == kbar {
                            0.5 * h
                        } else {
                            h
                        }
                    }
                };
                for k in 0..=kbar {
                    let w = weight(k);
                    if w == 0.0 {
                        continue;
                    }
                    let x = batch.state(l, k0 + k);
                    acc_xt.axpy(w, &xtilde(&x), 1.0);
                    acc_xx.axpy(w, &kron_vec(&x, &x), 1.0);
                    acc_xu.axpy(w, &kron_vec(&x, &batch.control(l, k0 + k)), 1.0);
                    acc_xv.axpy(w, &kron_vec(&x, &batch.disturbance(l, k0 + k)), 1.0);
                }
            }
            (
                delta / paths,
                acc_xt / paths,
                acc_xx / paths,
                acc_xu / paths,
                acc_xv / paths,
            )
        })
        .collect();

    let mut delta_xt = DMatrix::zeros(s, tri_len(n));
    let mut i_xt = DMatrix::zeros(s, tri_len(n));
    let mut i_xx = DMatrix::zeros(s, n * n);
    let mut i_xu = DMatrix::zeros(s, n * m);
    let mut i_xv = DMatrix::zeros(s, n * p);
    for (j, (d0, xt, xx, xu, xv)) in rows.into_iter().enumerate() {
        delta_xt.row_mut(j).copy_from(&d0.transpose());
        i_xt.row_mut(j).copy_from(&xt.transpose());
        i_xx.row_mut(j).copy_from(&xx.transpose());
        i_xu.row_mut(j).copy_from(&xu.transpose());
        i_xv.row_mut(j).copy_from(&xv.transpose());
    }
    DataMatrices::new(delta_xt, i_xt, i_xx, i_xu, i_xv, n, m, p)
}

/// Per-window stream offset for the branching estimator.
const BRANCH_SEED_STRIDE: u64 = 0x9e37_79b9_7f4a_7c15;

/// Conditional-expectation variant of [`estimate_stats`] for fidelity
/// studies: one base path is recorded under the behavior policy, and each
/// window respawns `sim.n_paths` fresh Brownian continuations from the
/// recorded state at the window start. Window statistics then estimate the
/// expectations conditioned on that state rather than ensemble averages.
pub fn branching_stats(
    model: &SystemModel,
    gains: &PolicyPair,
    spec: &IntervalSpec,
    sim: &SimConfig,
) -> Result<DataMatrices> {
    spec.validate()?;
    sim.validate()?;
    let h = sim.dt_fine;
    let grid = {
        let steps = sim.num_steps()?;
        spec.to_grid(h, steps)?
    };
    let (n, m, p) = (
        model.state_dim(),
        model.control_dim(),
        model.disturbance_dim(),
    );
    let s = grid.len();
    let d = tri_len(n) + n * m + n * p;
    if s < d {
        return Err(Error::InvalidArgument(format!(
            "{s} intervals cannot identify {d} unknowns; use at least {d}"
        )));
    }

    let mut base_cfg = sim.clone();
    base_cfg.n_paths = 1;
    let base = simulate_batch(model, gains, &base_cfg)?;

    let mut delta_xt = DMatrix::zeros(s, tri_len(n));
    let mut i_xt = DMatrix::zeros(s, tri_len(n));
    let mut i_xx = DMatrix::zeros(s, n * n);
    let mut i_xu = DMatrix::zeros(s, n * m);
    let mut i_xv = DMatrix::zeros(s, n * p);
    for (j, &(k0, kbar)) in grid.iter().enumerate() {
        let t_j = k0 as f64 * h;
        let x_j = base.state(0, k0);
        let win_cfg = SimConfig {
            x0: x_j.iter().copied().collect(),
            t_end: kbar as f64 * h,
            dt_fine: h,
            n_paths: sim.n_paths,
            seed: sim
                .seed
                .wrapping_add((j as u64 + 1).wrapping_mul(BRANCH_SEED_STRIDE)),
            exploration: sim.exploration.clone(),
            antithetic: sim.antithetic,
        };
        let win = crate::sde::simulate_batch_from(model, gains, &win_cfg, t_j)?;
        let paths = win.num_paths() as f64;
        let mut delta = DVector::zeros(tri_len(n));
        let mut acc_xt = DVector::zeros(tri_len(n));
        let mut acc_xx = DVector::zeros(n * n);
        let mut acc_xu = DVector::zeros(n * m);
        let mut acc_xv = DVector::zeros(n * p);
        for l in 0..win.num_paths() {
            delta += xtilde(&win.state(l, kbar)) - xtilde(&x_j);
            for k in 1..=kbar {
                let x = win.state(l, k);
                acc_xt.axpy(h, &xtilde(&x), 1.0);
                acc_xx.axpy(h, &kron_vec(&x, &x), 1.0);
                acc_xu.axpy(h, &kron_vec(&x, &win.control(l, k)), 1.0);
                acc_xv.axpy(h, &kron_vec(&x, &win.disturbance(l, k)), 1.0);
            }
        }
        delta_xt.row_mut(j).copy_from(&(delta / paths).transpose());
        i_xt.row_mut(j).copy_from(&(acc_xt / paths).transpose());
        i_xx.row_mut(j).copy_from(&(acc_xx / paths).transpose());
        i_xu.row_mut(j).copy_from(&(acc_xu / paths).transpose());
        i_xv.row_mut(j).copy_from(&(acc_xv / paths).transpose());
    }
    DataMatrices::new(delta_xt, i_xt, i_xx, i_xu, i_xv, n, m, p)
}

/// Outcome of the identifiability gate on `[I_xt, I_xu, I_xv]`.
#[derive(Debug, Clone)]
pub struct RankReport {
    pub rank: usize,
    pub required: usize,
    pub singular_values: Vec<f64>,
    /// Ratio of the smallest kept-or-dropped boundary values,
    /// sigma_required / sigma_max (0 when fewer values exist).
    pub sigma_ratio: f64,
    pub ok: bool,
}

/// Numerical rank of the concatenated excitation matrix; full rank is the
/// persistent-excitation analogue guaranteeing a unique evaluation.
pub fn rank_check(dm: &DataMatrices) -> RankReport {
    let s = dm.num_intervals();
    let required = dm.unknowns();
    let mut concat = DMatrix::zeros(s, required);
    let nn = tri_len(dm.n);
    concat.columns_mut(0, nn).copy_from(&dm.i_xt);
    concat
        .columns_mut(nn, dm.n * dm.m)
        .copy_from(&dm.i_xu);
    concat
        .columns_mut(nn + dm.n * dm.m, dm.n * dm.p)
        .copy_from(&dm.i_xv);
    let svd = concat.svd(false, false);
    let mut singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
    singular_values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let rank = singular_values
        .iter()
        .filter(|&&x| x > RANK_RTOL * sigma_max)
        .count();
    let sigma_ratio = if sigma_max > 0.0 && singular_values.len() >= required {
        singular_values[required - 1] / sigma_max
    } else {
        0.0
    };
    RankReport {
        rank,
        required,
        singular_values,
        sigma_ratio,
        ok: rank == required,
    }
}

/// Builds the regression system for the current target gains:
/// `Phi = [delta_xt, -2 I_xx (I (x) L') - 2 I_xu, -2 I_xx (I (x) F') - 2 I_xv]`
/// and `Upsilon = I_xt vecs(gamma^2 F'F - Q - L'RL)`.
pub fn assemble(
    dm: &DataMatrices,
    gains: &PolicyPair,
    costs: &CostSpec,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (n, m, p) = dm.dims();
    if gains.l.shape() != (m, n) || gains.f.shape() != (p, n) {
        return Err(Error::DimensionMismatch(format!(
            "gains must be {m}x{n} and {p}x{n}, got {:?} and {:?}",
            gains.l.shape(),
            gains.f.shape()
        )));
    }
    if costs.q.shape() != (n, n) || costs.r.shape() != (m, m) {
        return Err(Error::DimensionMismatch("cost weights do not match the data dims".into()));
    }
    let s = dm.num_intervals();
    let d = dm.unknowns();
    let nn = tri_len(n);
    let eye = DMatrix::<f64>::identity(n, n);

    let block_u = -2.0 * (&dm.i_xx * eye.kronecker(&gains.l.transpose()) + &dm.i_xu);
    let block_v = -2.0 * (&dm.i_xx * eye.kronecker(&gains.f.transpose()) + &dm.i_xv);

    let mut phi = DMatrix::zeros(s, d);
    phi.columns_mut(0, nn).copy_from(&dm.delta_xt);
    phi.columns_mut(nn, n * m).copy_from(&block_u);
    phi.columns_mut(nn + n * m, n * p).copy_from(&block_v);

    let gamma2 = costs.gamma * costs.gamma;
    let shifted_cost = SymMat::new(
        gains.f.transpose() * &gains.f * gamma2
            - &costs.q
            - gains.l.transpose() * &costs.r * &gains.l,
    )?;
    let upsilon = &dm.i_xt * shifted_cost.vecs();
    Ok((phi, upsilon))
}

/// Solution of the policy-evaluation regression, unpacked into the value
/// matrix and the two gain-bearing blocks.
#[derive(Debug, Clone)]
pub struct RegressionResult {
    pub p_next: SymMat,
    /// Estimate of `B'P` (m x n).
    pub theta2: DMatrix<f64>,
    /// Estimate of `E'P` (p x n).
    pub theta3: DMatrix<f64>,
    pub residual_norm: f64,
    pub condition_estimate: f64,
}

/// Least-squares solve of `Phi Xi = Upsilon` through the singular value
/// decomposition (orthogonal factorization; equal to the normal-equation
/// solution at full column rank, without squaring the condition number).
pub fn solve_ls(
    phi: &DMatrix<f64>,
    upsilon: &DVector<f64>,
    n: usize,
    m: usize,
    p: usize,
) -> Result<RegressionResult> {
    let d = tri_len(n) + n * m + n * p;
    if phi.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "Phi has {} columns, expected {d}",
            phi.ncols()
        )));
    }
    if phi.nrows() != upsilon.len() {
        return Err(Error::DimensionMismatch("Phi and Upsilon row counts differ".into()));
    }
    let svd = phi.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let sigma_min = svd.singular_values.min();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&x| x > RANK_RTOL * sigma_max)
        .count();
    if rank < d {
        return Err(Error::RankDeficient {
            rank,
            required: d,
            sigma_ratio: if sigma_max > 0.0 { sigma_min / sigma_max } else { 0.0 },
        });
    }
    let xi = svd
        .solve(upsilon, 0.0)
        .map_err(|e| Error::Parse(format!("least-squares solve: {e}")))?;
    let residual_norm = (phi * &xi - upsilon).norm();
    let condition_estimate = sigma_max / sigma_min;

    let nn = tri_len(n);
    let p_next = SymMat::from_vecs(&DVector::from_column_slice(&xi.as_slice()[0..nn]))?;
    let theta2 = DMatrix::from_column_slice(m, n, &xi.as_slice()[nn..nn + n * m]);
    let theta3 = DMatrix::from_column_slice(p, n, &xi.as_slice()[nn + n * m..nn + n * m + n * p]);
    Ok(RegressionResult {
        p_next,
        theta2,
        theta3,
        residual_norm,
        condition_estimate,
    })
}

/// Refinement of the moment-ODE integrator relative to the batch step.
const EXACT_ODE_REFINE: usize = 10;

#[derive(Clone)]
struct MomentState {
    mean: DVector<f64>,
    second: DMatrix<f64>,
    acc_xt: DVector<f64>,
    acc_xx: DVector<f64>,
    acc_xu: DVector<f64>,
    acc_xv: DVector<f64>,
}

impl MomentState {
    fn zeros_like(n: usize, m: usize, p: usize) -> Self {
        Self {
            mean: DVector::zeros(n),
            second: DMatrix::zeros(n, n),
            acc_xt: DVector::zeros(tri_len(n)),
            acc_xx: DVector::zeros(n * n),
            acc_xu: DVector::zeros(n * m),
            acc_xv: DVector::zeros(n * p),
        }
    }

    fn axpy(&mut self, c: f64, other: &Self) {
        self.mean.axpy(c, &other.mean, 1.0);
        self.second += &other.second * c;
        self.acc_xt.axpy(c, &other.acc_xt, 1.0);
        self.acc_xx.axpy(c, &other.acc_xx, 1.0);
        self.acc_xu.axpy(c, &other.acc_xu, 1.0);
        self.acc_xv.axpy(c, &other.acc_xv, 1.0);
    }

    fn is_finite(&self) -> bool {
        self.mean.iter().all(|x| x.is_finite()) && self.second.iter().all(|x| x.is_finite())
    }
}

/// Noise-free oracle for [`estimate_stats`]: propagates the exact first and
/// second moments of the closed behavior loop
/// (`mean' = Abar mean + B e_u + E e_v`,
///  `M' = Abar M + M Abar' + A1 M A1' + forcing`) with the deterministic
/// exploration as a known input, and accumulates the window integrals by
/// Runge-Kutta quadrature. Monte-Carlo estimates converge to these values
/// as the path count grows.
pub fn exact_stats(
    model: &SystemModel,
    gains_behavior: &PolicyPair,
    spec: &IntervalSpec,
    sim: &SimConfig,
) -> Result<DataMatrices> {
    spec.validate()?;
    sim.validate()?;
    gains_behavior.check_dims(model)?;
    if matches!(sim.exploration.kind, ExplorationKind::White) && sim.exploration.amplitude > 0.0 {
        return Err(Error::InvalidArgument(
            "exact-expectation mode needs a deterministic (sinusoidal) exploration signal".into(),
        ));
    }
    let (n, m, p) = (
        model.state_dim(),
        model.control_dim(),
        model.disturbance_dim(),
    );
    if sim.x0.len() != n {
        return Err(Error::DimensionMismatch("x0 does not match the state dimension".into()));
    }
    let h_int = sim.dt_fine / EXACT_ODE_REFINE as f64;
    let grid = spec.to_grid(h_int, usize::MAX)?;
    let signal = ExplorationSignal::realize(&sim.exploration, sim.seed, m + p);
    let a_bar = closed_loop_gains(model, gains_behavior)?;

    let deriv = |t: f64, s: &MomentState| -> MomentState {
        let mut eu = DVector::zeros(m);
        for c in 0..m {
            eu[c] = signal.eval(c, t);
        }
        let mut ev = DVector::zeros(p);
        for c in 0..p {
            ev[c] = signal.eval(m + c, t);
        }
        let forcing = model.b() * &eu + model.e() * &ev;
        let mean_dot = &a_bar * &s.mean + &forcing;
        let cross = &forcing * s.mean.transpose();
        let second_dot = &a_bar * &s.second
            + &s.second * a_bar.transpose()
            + model.a1() * &s.second * model.a1().transpose()
            + &cross
            + cross.transpose();
        // E[x (x) u] = vec(E[u x']) with E[u x'] = -L M + e_u mean'
        let w_u = -(&gains_behavior.l * &s.second) + &eu * s.mean.transpose();
        let w_v = -(&gains_behavior.f * &s.second) + &ev * s.mean.transpose();
        let second_sym = SymMat::new(s.second.clone()).expect("second moment is square");
        MomentState {
            mean: mean_dot,
            second: second_dot,
            acc_xt: second_sym.vecs(),
            acc_xx: DVector::from_column_slice(s.second.as_slice()),
            acc_xu: DVector::from_column_slice(w_u.as_slice()),
            acc_xv: DVector::from_column_slice(w_v.as_slice()),
        }
    };

    let x0 = sim.x0_vector();
    let mut state = MomentState::zeros_like(n, m, p);
    state.mean = x0.clone();
    state.second = &x0 * x0.transpose();

    let last_step = grid.iter().map(|&(k0, kb)| k0 + kb).max().unwrap();
    let mut snapshots: std::collections::BTreeMap<usize, MomentState> = Default::default();
    let mut wanted: std::collections::BTreeSet<usize> = Default::default();
    for &(k0, kb) in &grid {
        wanted.insert(k0);
        wanted.insert(k0 + kb);
    }
    if wanted.contains(&0) {
        snapshots.insert(0, state.clone());
    }
    for k in 0..last_step {
        let t = k as f64 * h_int;
        let k1 = deriv(t, &state);
        let mut y2 = state.clone();
        y2.axpy(h_int / 2.0, &k1);
        let k2 = deriv(t + h_int / 2.0, &y2);
        let mut y3 = state.clone();
        y3.axpy(h_int / 2.0, &k2);
        let k3 = deriv(t + h_int / 2.0, &y3);
        let mut y4 = state.clone();
        y4.axpy(h_int, &k3);
        let k4 = deriv(t + h_int, &y4);
        state.axpy(h_int / 6.0, &k1);
        state.axpy(h_int / 3.0, &k2);
        state.axpy(h_int / 3.0, &k3);
        state.axpy(h_int / 6.0, &k4);
        if !state.is_finite() {
            return Err(Error::MomentOde(format!(
                "moments diverged near t = {:.4}; behavior loop may be unstable",
                t + h_int
            )));
        }
        if wanted.contains(&(k + 1)) {
            snapshots.insert(k + 1, state.clone());
        }
    }

    let s_count = grid.len();
    let mut delta_xt = DMatrix::zeros(s_count, tri_len(n));
    let mut i_xt = DMatrix::zeros(s_count, tri_len(n));
    let mut i_xx = DMatrix::zeros(s_count, n * n);
    let mut i_xu = DMatrix::zeros(s_count, n * m);
    let mut i_xv = DMatrix::zeros(s_count, n * p);
    for (j, &(k0, kb)) in grid.iter().enumerate() {
        let beg = &snapshots[&k0];
        let end = &snapshots[&(k0 + kb)];
        let vecs_of = |mm: &DMatrix<f64>| SymMat::new(mm.clone()).expect("square").vecs();
        delta_xt
            .row_mut(j)
            .copy_from(&(vecs_of(&end.second) - vecs_of(&beg.second)).transpose());
        i_xt.row_mut(j)
            .copy_from(&(&end.acc_xt - &beg.acc_xt).transpose());
        i_xx.row_mut(j)
            .copy_from(&(&end.acc_xx - &beg.acc_xx).transpose());
        i_xu.row_mut(j)
            .copy_from(&(&end.acc_xu - &beg.acc_xu).transpose());
        i_xv.row_mut(j)
            .copy_from(&(&end.acc_xv - &beg.acc_xv).transpose());
    }
    DataMatrices::new(delta_xt, i_xt, i_xx, i_xu, i_xv, n, m, p)
}

/// Writes one CSV per matrix (long format `interval,component,value`).
pub fn export_data_matrices(dm: &DataMatrices, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let items: [(&str, &DMatrix<f64>); 5] = [
        ("delta_xt.csv", &dm.delta_xt),
        ("i_xt.csv", &dm.i_xt),
        ("i_xx.csv", &dm.i_xx),
        ("i_xu.csv", &dm.i_xu),
        ("i_xv.csv", &dm.i_xv),
    ];
    for (name, mat) in items {
        let mut out = String::from("interval,component,value\n");
        for j in 0..mat.nrows() {
            for c in 0..mat.ncols() {
                out.push_str(&format!("{j},{c},{}\n", ioutil::format_f64(mat[(j, c)])));
            }
        }
        ioutil::atomic_write(&dir.join(name), out.as_bytes())?;
    }
    Ok(())
}
