//! Robustness harness for the SPU loop: each policy evaluation is followed
//! by a controlled symmetric perturbation of the block evaluation matrix,
//! and the gains are read back from the perturbed blocks. Sweeping the
//! perturbation magnitude exposes the input-to-state-stability behaviour of
//! the iteration: the error settles on a plateau proportional to the
//! injected error level, and vanishing perturbations recover convergence.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gare::{closed_loop_gains, PolicyPair, SystemModel};
use crate::ioutil;
use crate::symlin::{solve_gle, LyapPencil, SymMat};

/// Relative singular-value threshold below which a gain block counts as
/// singular.
const BLOCK_SINGULARITY_RTOL: f64 = 1e-12;

/// The (n+m+p)-dimensional evaluation matrix with named blocks
/// `[[Q + A'P + PA + A1'PA1, PB, PE], [B'P, R, 0], [E'P, 0, -gamma^2 I]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockM {
    value: DMatrix<f64>,
    n: usize,
    m: usize,
    p: usize,
}

impl BlockM {
    pub fn from_parts(value: DMatrix<f64>, n: usize, m: usize, p: usize) -> Result<Self> {
        let total = n + m + p;
        if value.nrows() != total || value.ncols() != total {
            return Err(Error::DimensionMismatch(format!(
                "block matrix must be {total}x{total}, got {}x{}",
                value.nrows(),
                value.ncols()
            )));
        }
        Ok(Self { value, n, m, p })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.value
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.p)
    }

    pub fn block11(&self) -> DMatrix<f64> {
        self.value.view((0, 0), (self.n, self.n)).into()
    }

    pub fn block21(&self) -> DMatrix<f64> {
        self.value.view((self.n, 0), (self.m, self.n)).into()
    }

    pub fn block22(&self) -> DMatrix<f64> {
        self.value.view((self.n, self.n), (self.m, self.m)).into()
    }

    pub fn block31(&self) -> DMatrix<f64> {
        self.value.view((self.n + self.m, 0), (self.p, self.n)).into()
    }

    pub fn block33(&self) -> DMatrix<f64> {
        self.value
            .view((self.n + self.m, self.n + self.m), (self.p, self.p))
            .into()
    }

    /// Adds a symmetric perturbation of matching size.
    pub fn perturbed(&self, dm: &DMatrix<f64>) -> Result<Self> {
        if dm.shape() != self.value.shape() {
            return Err(Error::DimensionMismatch("perturbation size mismatch".into()));
        }
        Ok(Self {
            value: &self.value + dm,
            n: self.n,
            m: self.m,
            p: self.p,
        })
    }
}

/// Assembles the evaluation matrix of a value candidate P.
pub fn m_of_p(model: &SystemModel, p: &SymMat) -> Result<BlockM> {
    let (n, m, pd) = (
        model.state_dim(),
        model.control_dim(),
        model.disturbance_dim(),
    );
    if p.dim() != n {
        return Err(Error::DimensionMismatch("P does not match the state dimension".into()));
    }
    let total = n + m + pd;
    let mut v = DMatrix::zeros(total, total);
    let pm = p.as_matrix();
    let block11 = model.q()
        + model.a().transpose() * pm
        + pm * model.a()
        + model.a1().transpose() * pm * model.a1();
    v.view_mut((0, 0), (n, n)).copy_from(&block11);
    v.view_mut((0, n), (n, m)).copy_from(&(pm * model.b()));
    v.view_mut((n, 0), (m, n))
        .copy_from(&(model.b().transpose() * pm));
    v.view_mut((n, n), (m, m)).copy_from(model.r());
    v.view_mut((0, n + m), (n, pd)).copy_from(&(pm * model.e()));
    v.view_mut((n + m, 0), (pd, n))
        .copy_from(&(model.e().transpose() * pm));
    let gamma2 = model.gamma() * model.gamma();
    v.view_mut((n + m, n + m), (pd, pd))
        .copy_from(&(-gamma2 * DMatrix::<f64>::identity(pd, pd)));
    BlockM::from_parts(v, n, m, pd)
}

/// Congruence compression `[I, -L', -F'] Z [I, -L', -F']'`.
pub fn r_op(z: &BlockM, gains: &PolicyPair) -> Result<SymMat> {
    let (n, m, p) = z.dims();
    if gains.l.shape() != (m, n) || gains.f.shape() != (p, n) {
        return Err(Error::DimensionMismatch(format!(
            "gains must be {m}x{n} and {p}x{n} for this block matrix"
        )));
    }
    let mut selector = DMatrix::zeros(n, n + m + p);
    selector
        .view_mut((0, 0), (n, n))
        .copy_from(&DMatrix::identity(n, n));
    selector
        .view_mut((0, n), (n, m))
        .copy_from(&(-gains.l.transpose()));
    selector
        .view_mut((0, n + m), (n, p))
        .copy_from(&(-gains.f.transpose()));
    SymMat::new(&selector * z.matrix() * selector.transpose())
}

/// Magnitude schedule of the injected evaluation errors; directions are
/// fresh random symmetric matrices from the seeded stream.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ErrorSchedule {
    /// Same Frobenius norm at every iteration.
    Constant { magnitude: f64 },
    /// `magnitude * factor^i` at iteration i.
    Decaying { magnitude: f64, factor: f64 },
    /// Explicit per-iteration magnitudes; zero past the end of the list.
    Custom { magnitudes: Vec<f64> },
}

impl ErrorSchedule {
    pub fn zero() -> Self {
        Self::Constant { magnitude: 0.0 }
    }

    pub fn magnitude_at(&self, iteration: usize) -> f64 {
        match self {
            Self::Constant { magnitude } => *magnitude,
            Self::Decaying { magnitude, factor } => magnitude * factor.powi(iteration as i32),
            Self::Custom { magnitudes } => magnitudes.get(iteration).copied().unwrap_or(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Constant { magnitude } => *magnitude >= 0.0,
            Self::Decaying { magnitude, factor } => *magnitude >= 0.0 && *factor >= 0.0,
            Self::Custom { magnitudes } => magnitudes.iter().all(|&x| x >= 0.0),
        };
        ok.then_some(()).ok_or_else(|| {
            Error::InvalidArgument("error schedule magnitudes must be >= 0".into())
        })
    }
}

/// Random symmetric matrix with the requested Frobenius norm.
pub fn random_symmetric_direction(rng: &mut impl Rng, dim: usize, norm: f64) -> DMatrix<f64> {
    if norm == 0.0 {
        return DMatrix::zeros(dim, dim);
    }
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = (&g + g.transpose()) * 0.5;
    let current = s.norm();
    s * (norm / current)
}

fn check_block_invertible(block: &DMatrix<f64>, name: &'static str) -> Result<()> {
    let svd = block.clone().svd(false, false);
    let sigma_max = svd.singular_values.max();
    let sigma_min = svd.singular_values.min();
    if !(sigma_min > BLOCK_SINGULARITY_RTOL * sigma_max) {
        return Err(Error::BlockSingular {
            block: name,
            sigma_min,
        });
    }
    Ok(())
}

/// One perturbed SPU round: evaluates the current gains exactly (the value
/// matrix solving the compressed equation), perturbs the evaluation matrix
/// by `delta_m`, and reads the improved gains from the perturbed blocks.
pub fn robust_spu_step(
    model: &SystemModel,
    gains_hat: &PolicyPair,
    delta_m: &DMatrix<f64>,
) -> Result<(SymMat, PolicyPair)> {
    robust_spu_step_indexed(model, gains_hat, delta_m, 0)
}

fn robust_spu_step_indexed(
    model: &SystemModel,
    gains_hat: &PolicyPair,
    delta_m: &DMatrix<f64>,
    iteration: usize,
) -> Result<(SymMat, PolicyPair)> {
    let a_bar = closed_loop_gains(model, gains_hat)?;
    let pencil = LyapPencil::new(a_bar, model.a1().clone())?;
    let abscissa = pencil.spectral_abscissa();
    if !(abscissa < 0.0) {
        return Err(Error::StepUnstable {
            iteration,
            max_real: abscissa,
        });
    }
    let gamma2 = model.gamma() * model.gamma();
    let qbar = SymMat::new(
        model.q() + gains_hat.l.transpose() * model.r() * &gains_hat.l
            - gains_hat.f.transpose() * &gains_hat.f * gamma2,
    )?;
    let p_next = solve_gle(&pencil, &qbar.scale(-1.0))?;

    let m_bar = m_of_p(model, &p_next)?;
    let m_hat = m_bar.perturbed(delta_m)?;
    let b22 = m_hat.block22();
    let b33 = m_hat.block33();
    check_block_invertible(&b22, "22")?;
    check_block_invertible(&b33, "33")?;
    let l_next = b22
        .lu()
        .solve(&m_hat.block21())
        .ok_or(Error::BlockSingular {
            block: "22",
            sigma_min: 0.0,
        })?;
    let f_next = b33
        .lu()
        .solve(&m_hat.block31())
        .ok_or(Error::BlockSingular {
            block: "33",
            sigma_min: 0.0,
        })?;
    Ok((p_next, PolicyPair::new(l_next, f_next)))
}

/// One row of the robust-iteration history.
#[derive(Debug, Clone)]
pub struct RobustIterate {
    pub index: usize,
    pub p_hat: SymMat,
    pub error_norm: f64,
    pub delta_norm: f64,
}

#[derive(Debug, Clone)]
pub struct RobustTrace {
    pub iterates: Vec<RobustIterate>,
}

impl RobustTrace {
    pub fn error_norms(&self) -> Vec<f64> {
        self.iterates.iter().map(|it| it.error_norm).collect()
    }

    pub fn delta_norms(&self) -> Vec<f64> {
        self.iterates.iter().map(|it| it.delta_norm).collect()
    }

    /// Median error over the trailing quarter of the trace, the empirical
    /// plateau level.
    pub fn plateau(&self) -> f64 {
        let errs = self.error_norms();
        let tail = &errs[errs.len() - (errs.len() / 4).max(1)..];
        let mut sorted = tail.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted[sorted.len() / 2]
    }
}

/// Runs the perturbed SPU iteration for `n_iter` rounds from `p0_hat`,
/// recording the distance to the reference solution `p_ref` and the
/// injected error norms.
pub fn run_robust_spu(
    model: &SystemModel,
    p0_hat: &SymMat,
    schedule: &ErrorSchedule,
    n_iter: usize,
    seed: u64,
    p_ref: &SymMat,
) -> Result<RobustTrace> {
    schedule.validate()?;
    if n_iter == 0 {
        return Err(Error::InvalidArgument("n_iter must be >= 1".into()));
    }
    if p0_hat.dim() != model.state_dim() || p_ref.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch(
            "initial and reference matrices must match the state dimension".into(),
        ));
    }
    let total = model.state_dim() + model.control_dim() + model.disturbance_dim();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut gains = PolicyPair::from_value(model, p0_hat)?;
    let mut p_hat = p0_hat.clone();
    let mut iterates = vec![RobustIterate {
        index: 0,
        p_hat: p_hat.clone(),
        error_norm: (&p_hat - p_ref).norm(),
        delta_norm: 0.0,
    }];
    for i in 0..n_iter {
        let magnitude = schedule.magnitude_at(i);
        let delta_m = random_symmetric_direction(&mut rng, total, magnitude);
        let (p_next, gains_next) = robust_spu_step_indexed(model, &gains, &delta_m, i)?;
        if !p_next.is_finite() {
            return Err(Error::NonFiniteIterate { iteration: i + 1 });
        }
        p_hat = p_next;
        gains = gains_next;
        iterates.push(RobustIterate {
            index: i + 1,
            p_hat: p_hat.clone(),
            error_norm: (&p_hat - p_ref).norm(),
            delta_norm: magnitude,
        });
    }
    Ok(RobustTrace { iterates })
}

/// Empirical fit of the one-step error recursion
/// `e_{i+1} <= eps e_i + k3 ||dM_i||`: least squares on the recorded pairs,
/// clamped to a contraction. Returns the fitted contraction factor, the
/// error gain, and the implied asymptotic gain `k3 / (1 - eps)`.
#[derive(Debug, Clone, Copy)]
pub struct IssFit {
    pub eps: f64,
    pub k3: f64,
    pub gain: f64,
}

pub fn fit_iss_recursion(errors: &[f64], delta_norms: &[f64]) -> Option<IssFit> {
    // delta_norms[i+1] is the error injected while producing iterate i+1
    if errors.len() < 3 || delta_norms.len() != errors.len() {
        return None;
    }
    let plateau = {
        let tail = &errors[errors.len() - (errors.len() / 4).max(1)..];
        let mut sorted = tail.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted[sorted.len() / 2]
    };
    // contraction factor from the transient, where the injected-error term
    // is negligible against the current error
    let mut eps: f64 = 0.0;
    let mut saw_transient = false;
    for i in 0..errors.len() - 1 {
        if errors[i] > 4.0 * plateau && errors[i] > 0.0 {
            saw_transient = true;
            eps = eps.max(((errors[i + 1] - plateau).max(0.0)) / errors[i]);
        }
    }
    if !saw_transient {
        eps = 0.5;
    }
    let eps = eps.clamp(0.0, 0.999);
    // error gain from the worst one-step recursion residual
    let mut k3: f64 = 0.0;
    for i in 0..errors.len() - 1 {
        let d = delta_norms[i + 1];
        if d > 0.0 {
            k3 = k3.max((errors[i + 1] - eps * errors[i]).max(0.0) / d);
        }
    }
    Some(IssFit {
        eps,
        k3,
        gain: k3 / (1.0 - eps),
    })
}

/// Writes sweep rows `(delta, seed, iteration, error_norm)` as CSV.
pub fn export_sweep(rows: &[(f64, u64, usize, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("delta,seed,iteration,error_norm\n");
    for &(delta, seed, iteration, err) in rows {
        out.push_str(&format!(
            "{},{seed},{iteration},{}\n",
            ioutil::format_f64(delta),
            ioutil::format_f64(err)
        ));
    }
    ioutil::atomic_write(path, out.as_bytes())
}
