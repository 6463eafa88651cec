//! Residual, Frechet derivative, and the model-based simultaneous-policy-update
//! (SPU) solver for the generalized algebraic Riccati equation
//!
//! `PA + A'P + A1'PA1 - P B R^{-1} B' P + gamma^{-2} P E E' P + Q = 0`.
//!
//! Each SPU round evaluates the current policy pair through one generalized
//! Lyapunov solve and improves both gains simultaneously; the sequence is a
//! Newton iteration on the residual map, so convergence is locally quadratic.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::symlin::{solve_gle, LyapPencil, SymMat};

/// System matrices of the linear Ito plant
/// `dx = (Ax + Bu + Ev) dt + A1 x dW`, `z = [Cx; Du]`,
/// with the derived cost weights `Q = C'C`, `R = D'D` and the attenuation
/// level `gamma`.
#[derive(Debug, Clone)]
pub struct SystemModel {
    a: DMatrix<f64>,
    a1: DMatrix<f64>,
    b: DMatrix<f64>,
    e: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    gamma: f64,
}

impl SystemModel {
    pub fn new(
        a: DMatrix<f64>,
        a1: DMatrix<f64>,
        b: DMatrix<f64>,
        e: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || n == 0 {
            return Err(Error::DimensionMismatch("A must be square and non-empty".into()));
        }
        if a1.nrows() != n || a1.ncols() != n {
            return Err(Error::DimensionMismatch("A1 must match the dimension of A".into()));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::DimensionMismatch("B must have n rows and at least one column".into()));
        }
        if e.nrows() != n || e.ncols() == 0 {
            return Err(Error::DimensionMismatch("E must have n rows and at least one column".into()));
        }
        if c.ncols() != n {
            return Err(Error::DimensionMismatch("C must have n columns".into()));
        }
        if d.ncols() != b.ncols() {
            return Err(Error::DimensionMismatch("D must have m columns".into()));
        }
        if !(gamma > 0.0) {
            return Err(Error::Model("gamma must be positive".into()));
        }
        let q = c.transpose() * &c;
        let r = d.transpose() * &d;
        // R = D'D positive definite iff D has full column rank
        let r_eigs = r.clone().symmetric_eigen().eigenvalues;
        if !(r_eigs.min() > 1e-12 * r_eigs.max().max(f64::MIN_POSITIVE)) {
            return Err(Error::Model(
                "R = D'D is not positive definite; D must have full column rank".into(),
            ));
        }
        let chol = nalgebra::Cholesky::new(r.clone())
            .ok_or_else(|| Error::Model("R = D'D is not positive definite".into()))?;
        let r_inv = chol.inverse();
        Ok(Self {
            a,
            a1,
            b,
            e,
            c,
            d,
            q,
            r,
            r_inv,
            gamma,
        })
    }

    /// Builds a model directly from cost weights, using any C with C'C = Q
    /// (matrix square root) and D with D'D = R.
    pub fn from_weights(
        a: DMatrix<f64>,
        a1: DMatrix<f64>,
        b: DMatrix<f64>,
        e: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::DimensionMismatch("Q must be n x n".into()));
        }
        let c = sym_sqrt(&q).ok_or_else(|| Error::Model("Q must be symmetric positive semidefinite".into()))?;
        let d = sym_sqrt(&r).ok_or_else(|| Error::Model("R must be symmetric positive definite".into()))?;
        Self::new(a, a1, b, e, c, d, gamma)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.e.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn a1(&self) -> &DMatrix<f64> {
        &self.a1
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    fn check_p(&self, p: &SymMat) -> Result<()> {
        if p.dim() != self.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "P is {}x{} but the state dimension is {}",
                p.dim(),
                p.dim(),
                self.state_dim()
            )));
        }
        Ok(())
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return None;
    }
    if (m - m.transpose()).amax() > 1e-10 * m.amax().max(1.0) {
        return None;
    }
    let eig = m.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-10 * scale {
            return None;
        }
        *v = v.max(0.0).sqrt();
    }
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Control gain L (u = -Lx) and disturbance gain F (v = -Fx).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPair {
    pub l: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

impl PolicyPair {
    pub fn new(l: DMatrix<f64>, f: DMatrix<f64>) -> Self {
        Self { l, f }
    }

    /// Gains coupled to a value matrix: `L = R^{-1} B' P`, `F = -gamma^{-2} E' P`.
    pub fn from_value(model: &SystemModel, p: &SymMat) -> Result<Self> {
        model.check_p(p)?;
        let l = model.r_inv() * model.b().transpose() * p.as_matrix();
        let f = model.e().transpose() * p.as_matrix() * (-1.0 / (model.gamma() * model.gamma()));
        Ok(Self { l, f })
    }

    pub fn check_dims(&self, model: &SystemModel) -> Result<()> {
        let (n, m, p) = (model.state_dim(), model.control_dim(), model.disturbance_dim());
        if self.l.nrows() != m || self.l.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "control gain must be {}x{}, got {}x{}",
                m,
                n,
                self.l.nrows(),
                self.l.ncols()
            )));
        }
        if self.f.nrows() != p || self.f.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "disturbance gain must be {}x{}, got {}x{}",
                p,
                n,
                self.f.nrows(),
                self.f.ncols()
            )));
        }
        Ok(())
    }
}

/// Riccati residual `F(P) = PA + A'P + A1'PA1 - PBR^{-1}B'P + gamma^{-2}PEE'P + Q`.
pub fn gare_residual(model: &SystemModel, p: &SymMat) -> Result<SymMat> {
    model.check_p(p)?;
    let pm = p.as_matrix();
    let gamma2 = model.gamma() * model.gamma();
    let lin = pm * model.a() + model.a().transpose() * pm
        + model.a1().transpose() * pm * model.a1();
    let quad_b = pm * model.b() * model.r_inv() * model.b().transpose() * pm;
    let quad_e = pm * model.e() * model.e().transpose() * pm / gamma2;
    SymMat::new(lin - quad_b + quad_e + model.q())
}

/// Closed-loop drift `A - B R^{-1} B' P + gamma^{-2} E E' P` under the gains
/// coupled to P.
pub fn closed_loop(model: &SystemModel, p: &SymMat) -> Result<DMatrix<f64>> {
    model.check_p(p)?;
    let gamma2 = model.gamma() * model.gamma();
    Ok(model.a() - model.b() * model.r_inv() * model.b().transpose() * p.as_matrix()
        + model.e() * model.e().transpose() * p.as_matrix() / gamma2)
}

/// Closed-loop drift under explicit gains: `A - BL - EF`.
pub fn closed_loop_gains(model: &SystemModel, gains: &PolicyPair) -> Result<DMatrix<f64>> {
    gains.check_dims(model)?;
    Ok(model.a() - model.b() * &gains.l - model.e() * &gains.f)
}

/// Whether P is a stabilizing solution candidate: the closed-loop pair
/// `(A(P), A1)` is mean-square stable.
pub fn is_stabilizing(model: &SystemModel, p: &SymMat) -> Result<bool> {
    let pencil = LyapPencil::new(closed_loop(model, p)?, model.a1().clone())?;
    Ok(pencil.is_ms_stable())
}

/// Frechet differential of the residual map at P in direction dP:
/// `dP A(P) + A(P)' dP + A1' dP A1`.
pub fn frechet_apply(model: &SystemModel, p: &SymMat, dp: &SymMat) -> Result<SymMat> {
    model.check_p(dp)?;
    let pencil = LyapPencil::new(closed_loop(model, p)?, model.a1().clone())?;
    pencil.apply(dp)
}

/// Shifted cost `Q + L'RL - gamma^2 F'F` for the gains coupled to P.
fn policy_cost(model: &SystemModel, p: &SymMat) -> Result<SymMat> {
    let gamma2 = model.gamma() * model.gamma();
    let pm = p.as_matrix();
    let quad_b = pm * model.b() * model.r_inv() * model.b().transpose() * pm;
    let quad_e = pm * model.e() * model.e().transpose() * pm / gamma2;
    SymMat::new(model.q() + quad_b - quad_e)
}

/// One policy-evaluation round: solves the generalized Lyapunov equation of
/// the current policy pair for the next value matrix.
///
/// Fails with [`Error::StepUnstable`] when the closed-loop pencil leaves the
/// stable region, in which case the caller should restart from a different
/// initial matrix.
pub fn spu_step(model: &SystemModel, p: &SymMat) -> Result<SymMat> {
    spu_step_indexed(model, p, 0)
}

fn spu_step_indexed(model: &SystemModel, p: &SymMat, iteration: usize) -> Result<SymMat> {
    let a_bar = closed_loop(model, p)?;
    let pencil = LyapPencil::new(a_bar, model.a1().clone())?;
    let abscissa = pencil.spectral_abscissa();
    if !(abscissa < 0.0) {
        return Err(Error::StepUnstable {
            iteration,
            max_real: abscissa,
        });
    }
    let rhs = policy_cost(model, p)?.scale(-1.0);
    solve_gle(&pencil, &rhs)
}

/// One recorded SPU iterate.
#[derive(Debug, Clone)]
pub struct SpuIterate {
    pub index: usize,
    pub p: SymMat,
    pub gains: PolicyPair,
    pub residual_norm: f64,
    pub error_to_ref: Option<f64>,
}

/// Full iteration history of one SPU run.
#[derive(Debug, Clone)]
pub struct SpuTrace {
    pub iterates: Vec<SpuIterate>,
}

impl SpuTrace {
    pub fn final_p(&self) -> &SymMat {
        &self.iterates.last().expect("trace is never empty").p
    }

    pub fn final_residual(&self) -> f64 {
        self.iterates.last().expect("trace is never empty").residual_norm
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }
}

/// Runs the SPU iteration from `p0` until the residual norm drops below
/// `tol` or `max_iter` evaluation rounds have been spent.
///
/// `p_ref`, when given, populates the per-iterate `error_to_ref` column.
pub fn spu_solve(
    model: &SystemModel,
    p0: &SymMat,
    max_iter: usize,
    tol: f64,
    p_ref: Option<&SymMat>,
) -> Result<SpuTrace> {
    model.check_p(p0)?;
    if let Some(r) = p_ref {
        model.check_p(r)?;
    }
    let mut iterates = Vec::with_capacity(max_iter + 1);
    let mut p = p0.clone();
    for i in 0..=max_iter {
        if !p.is_finite() {
            return Err(Error::NonFiniteIterate { iteration: i });
        }
        let residual_norm = gare_residual(model, &p)?.norm();
        iterates.push(SpuIterate {
            index: i,
            p: p.clone(),
            gains: PolicyPair::from_value(model, &p)?,
            residual_norm,
            error_to_ref: p_ref.map(|r| (&p - r).norm()),
        });
        if residual_norm < tol {
            return Ok(SpuTrace { iterates });
        }
        if i == max_iter {
            break;
        }
        p = spu_step_indexed(model, &p, i)?;
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: iterates.last().map(|it| it.residual_norm).unwrap_or(f64::NAN),
    })
}

/// Initialization ramp: tries `P0 = c I` for each `c` in turn and returns
/// the first converging run. Useful when no problem-specific initial matrix
/// is known; a stable open loop converges from c = 0.
pub fn spu_solve_ramp(
    model: &SystemModel,
    ramp: &[f64],
    max_iter: usize,
    tol: f64,
    p_ref: Option<&SymMat>,
) -> Result<SpuTrace> {
    let mut last_err = Error::InvalidArgument("initialization ramp must not be empty".into());
    for &c in ramp {
        let p0 = SymMat::scaled_identity(model.state_dim(), c);
        match spu_solve(model, &p0, max_iter, tol, p_ref) {
            Ok(trace) => return Ok(trace),
            Err(e) => last_err = e,
        }
    }
    Err(last_err)
}

/// Default ramp of identity scales for [`spu_solve_ramp`].
pub const DEFAULT_RAMP: [f64; 9] = [0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 100.0];

/// Convergence-order diagnostic: the ratios
/// `||P_{i+1} - P_ref|| / ||P_i - P_ref||^2`, which stay bounded near the
/// solution for a quadratically convergent sequence. Iterates with squared
/// distance below 1e-15 are skipped to avoid dividing by noise.
pub fn quadratic_rate_ratios(trace: &SpuTrace, p_ref: &SymMat) -> Result<Vec<f64>> {
    if trace.len() < 3 {
        return Err(Error::InvalidArgument(
            "rate check needs at least 3 iterates".into(),
        ));
    }
    if trace.iterates[0].p.dim() != p_ref.dim() {
        return Err(Error::DimensionMismatch(
            "reference matrix does not match the trace dimension".into(),
        ));
    }
    let mut ratios = Vec::new();
    for w in trace.iterates.windows(2) {
        let num = (&w[1].p - p_ref).norm();
        let den = (&w[0].p - p_ref).norm().powi(2);
        if den >= 1e-15 {
            ratios.push(num / den);
        }
    }
    Ok(ratios)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn scalar_model(a: f64, a1: f64, b: f64, e: f64, q: f64, r: f64, gamma: f64) -> SystemModel {
        SystemModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, a1),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, e),
            DMatrix::from_element(1, 1, q.sqrt()),
            DMatrix::from_element(1, 1, r.sqrt()),
            gamma,
        )
        .unwrap()
    }

    /// Deterministic scalar instance: residual root sqrt(2) - 1.
    fn scalar_det() -> SystemModel {
        scalar_model(-1.0, 0.0, 1.0, 1e-12, 1.0, 1.0, 1.0)
    }

    /// Stochastic scalar instance: residual -0.75 P^2 - P + 1, root 2/3.
    fn scalar_stoch() -> SystemModel {
        scalar_model(-1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0)
    }

    /// A random n-dimensional instance with stable open loop, so the SPU
    /// run from P0 = 0 converges.
    fn random_model(rng: &mut impl Rng, n: usize, m: usize, p: usize) -> SystemModel {
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a1 = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3));
        let trial = LyapPencil::new(g.clone(), a1.clone()).unwrap();
        let shift = trial.spectral_abscissa() / 2.0 + 0.5;
        let a = g - DMatrix::identity(n, n) * shift;
        let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let e = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-0.5..0.5));
        SystemModel::new(
            a,
            a1,
            b,
            e,
            DMatrix::identity(n, n),
            DMatrix::identity(m, m),
            5.0,
        )
        .unwrap()
    }

    #[test]
    fn rejects_rank_deficient_d() {
        let err = SystemModel::new(
            DMatrix::identity(2, 2) * -1.0,
            DMatrix::zeros(2, 2),
            DMatrix::from_element(2, 2, 1.0),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            1.0,
        );
        assert!(matches!(err, Err(Error::Model(_))));
    }

    #[test]
    fn residual_vanishes_at_closed_form_root() {
        let model = scalar_det();
        let p_star = SymMat::scalar(std::f64::consts::SQRT_2 - 1.0);
        assert!(gare_residual(&model, &p_star).unwrap().norm() < 1e-12);
    }

    #[test]
    fn residual_at_zero_is_q() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 3, 2, 1);
        let res = gare_residual(&model, &SymMat::zeros(3)).unwrap();
        assert!((res.as_matrix() - model.q()).amax() < 1e-14);
    }

    #[test]
    fn closed_loop_at_zero_is_a() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let model = random_model(&mut rng, 3, 1, 1);
        let cl = closed_loop(&model, &SymMat::zeros(3)).unwrap();
        assert!((cl - model.a()).amax() < 1e-14);
    }

    #[test]
    fn closed_loop_scalar_stabilizing() {
        let model = scalar_stoch();
        let p = SymMat::scalar(2.0 / 3.0);
        let cl = closed_loop(&model, &p).unwrap();
        // -1 - P + 0.25 P at P = 2/3
        assert_relative_eq!(cl[(0, 0)], -1.5, max_relative = 1e-14);
        let pencil = LyapPencil::new(cl, model.a1().clone()).unwrap();
        assert_relative_eq!(pencil.ms_spectrum()[0].re, -2.0, max_relative = 1e-14);
        assert!(is_stabilizing(&model, &p).unwrap());
    }

    #[test]
    fn frechet_zero_direction() {
        let model = scalar_stoch();
        let out = frechet_apply(&model, &SymMat::scalar(0.3), &SymMat::scalar(0.0)).unwrap();
        assert_eq!(out.norm(), 0.0);
    }

    #[test]
    fn frechet_scalar_closed_form() {
        let model = scalar_stoch();
        let p = SymMat::scalar(0.4);
        let dp = SymMat::scalar(0.7);
        let expect = 2.0 * closed_loop(&model, &p).unwrap()[(0, 0)] * 0.7 + 1.0 * 0.7;
        let got = frechet_apply(&model, &p, &dp).unwrap().entry(0, 0);
        assert_relative_eq!(got, expect, max_relative = 1e-14);
    }

    #[test]
    fn frechet_matches_central_differences() {
        // The residual map is quadratic in P, so the central difference is
        // exact up to roundoff; assert the O(h^2) envelope.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let model = random_model(&mut rng, 3, 2, 2);
        let p = SymMat::new(DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.5..0.5))).unwrap();
        let dp = SymMat::new(DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0))).unwrap();
        let exact = frechet_apply(&model, &p, &dp).unwrap();
        for h in [1e-3, 1e-4] {
            let plus = gare_residual(&model, &(&p + &dp.scale(h))).unwrap();
            let minus = gare_residual(&model, &(&p - &dp.scale(h))).unwrap();
            let fd = (&plus - &minus).scale(0.5 / h);
            let err = (&fd - &exact).norm();
            assert!(err < h * h, "h={h}: err {err}");
        }
    }

    #[test]
    fn spu_step_fixed_point() {
        let model = scalar_det();
        let p_star = SymMat::scalar(std::f64::consts::SQRT_2 - 1.0);
        let next = spu_step(&model, &p_star).unwrap();
        assert!((&next - &p_star).norm() < 1e-12);
    }

    #[test]
    fn spu_step_hand_computed() {
        let model = scalar_det();
        let next = spu_step(&model, &SymMat::scalar(0.0)).unwrap();
        assert_relative_eq!(next.entry(0, 0), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn spu_converges_to_two_thirds() {
        let model = scalar_stoch();
        let trace = spu_solve(&model, &SymMat::scalar(0.0), 20, 1e-13, None).unwrap();
        assert_relative_eq!(trace.final_p().entry(0, 0), 2.0 / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn spu_scalar_quadratic_convergence() {
        let model = scalar_det();
        let trace = spu_solve(&model, &SymMat::scalar(0.0), 10, 1e-12, None).unwrap();
        assert!(trace.len() <= 9, "took {} iterates", trace.len());
        assert!(trace.final_residual() < 1e-12);
        assert!(is_stabilizing(&model, trace.final_p()).unwrap());
    }

    #[test]
    fn spu_terminates_immediately_at_solution() {
        let model = scalar_stoch();
        let p_star = SymMat::scalar(2.0 / 3.0);
        let trace = spu_solve(&model, &p_star, 10, 1e-10, None).unwrap();
        assert!(trace.len() <= 2);
    }

    #[test]
    fn spu_reports_nonconvergence_for_small_gamma() {
        // gamma far below the attainable attenuation level: no PSD solution.
        let model = scalar_model(1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.2);
        let out = spu_solve(&model, &SymMat::scalar(1.0), 25, 1e-12, None);
        assert!(out.is_err(), "expected failure, got {out:?}");
    }

    #[test]
    fn spu_step_equals_newton_step() {
        // Dual route check: policy evaluation vs explicit Newton update
        // P - F'(P)^{-1} F(P) through the reduced-coordinate solve.
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for n in 1..=4 {
            let model = random_model(&mut rng, n, 2.min(n), 1);
            let mut p = SymMat::zeros(n);
            // walk a couple of steps to land strictly inside the stable region
            p = spu_step(&model, &p).unwrap();

            let via_spu = spu_step(&model, &p).unwrap();

            let res = gare_residual(&model, &p).unwrap();
            let pencil = LyapPencil::new(closed_loop(&model, &p).unwrap(), model.a1().clone()).unwrap();
            let delta = solve_gle(&pencil, &res).unwrap();
            let via_newton = &p - &delta;

            assert!(
                (&via_spu - &via_newton).norm() < 1e-10,
                "n={n}: {}",
                (&via_spu - &via_newton).norm()
            );
        }
    }

    #[test]
    fn residual_contraction_near_solution() {
        let model = scalar_stoch();
        let p_star = SymMat::scalar(2.0 / 3.0);
        let trace = spu_solve(&model, &SymMat::scalar(0.2), 20, 1e-13, Some(&p_star)).unwrap();
        let errs: Vec<f64> = trace.iterates.iter().map(|it| it.error_to_ref.unwrap()).collect();
        for w in errs.windows(2) {
            if w[0] < 0.1 && w[0] > 1e-12 {
                assert!(w[1] <= 0.9 * w[0], "no contraction: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn rate_ratios_bounded_for_newton_run() {
        let model = scalar_det();
        let trace = spu_solve(&model, &SymMat::scalar(0.0), 12, 1e-13, None).unwrap();
        let p_star = SymMat::scalar(std::f64::consts::SQRT_2 - 1.0);
        let ratios = quadratic_rate_ratios(&trace, &p_star).unwrap();
        assert!(ratios.len() >= 3);
        let tail = &ratios[ratios.len().saturating_sub(4)..];
        for r in tail {
            assert!(*r <= 2.0, "ratio {r} out of bound; all: {ratios:?}");
        }
    }

    #[test]
    fn rate_ratios_diverge_for_linear_sequence() {
        // Negative control: a linearly converging sequence has unbounded
        // quadratic-rate ratios.
        let p_ref = SymMat::identity(2);
        let dir = SymMat::new(DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.2])).unwrap();
        let iterates: Vec<SpuIterate> = (0..12)
            .map(|i| {
                let p = &p_ref + &dir.scale(0.5f64.powi(i as i32));
                SpuIterate {
                    index: i,
                    p,
                    gains: PolicyPair::new(DMatrix::zeros(1, 2), DMatrix::zeros(1, 2)),
                    residual_norm: f64::NAN,
                    error_to_ref: None,
                }
            })
            .collect();
        let trace = SpuTrace { iterates };
        let ratios = quadratic_rate_ratios(&trace, &p_ref).unwrap();
        assert!(ratios.last().unwrap() > &(8.0 * ratios[0]));
        for w in ratios.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn ramp_recovers_from_unstable_zero_start() {
        // Open loop unstable: c = 0 fails, a larger ramp value succeeds.
        let model = scalar_model(0.5, 0.2, 1.0, 0.5, 1.0, 1.0, 5.0);
        assert!(spu_solve(&model, &SymMat::scalar(0.0), 25, 1e-12, None).is_err());
        let trace = spu_solve_ramp(&model, &DEFAULT_RAMP, 25, 1e-12, None).unwrap();
        assert!(trace.final_residual() < 1e-12);
        assert!(is_stabilizing(&model, trace.final_p()).unwrap());
    }

    #[test]
    fn random_instance_solves_and_stabilizes() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        for trial in 0..5 {
            let model = random_model(&mut rng, 3, 1, 1);
            let trace = spu_solve_ramp(&model, &DEFAULT_RAMP, 30, 1e-12, None)
                .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
            assert!(trace.final_residual() < 1e-12);
            assert!(is_stabilizing(&model, trace.final_p()).unwrap());
            let vx: DVector<f64> = DVector::from_fn(3, |i, _| 0.1 * (i as f64 + 1.0));
            // value matrix should be PSD at the stabilizing solution
            assert!(
                (vx.transpose() * trace.final_p().as_matrix() * &vx)[(0, 0)] >= -1e-10
            );
        }
    }
}
