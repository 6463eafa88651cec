//! Shared fixtures for the integration and acceptance suites.
#![allow(dead_code)] // each test target uses its own subset

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use stochinf::gare::SystemModel;
use stochinf::symlin::LyapPencil;

/// Full-vectorization form of the generalized Lyapunov operator,
/// assembled independently of the library's reduced representation:
/// `vec(L(X)) = (A' (x) I + I (x) A' + A1' (x) A1') vec(X)`.
pub fn kron_oracle(a: &DMatrix<f64>, a1: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    a.transpose().kronecker(&eye)
        + eye.kronecker(&a.transpose())
        + a1.transpose().kronecker(&a1.transpose())
}

pub fn vec_col_major(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Random mean-square-stable pencil: a spectral shift of the drift moves
/// every operator eigenvalue left by twice the shift.
pub fn random_stable_pencil(rng: &mut impl Rng, n: usize) -> LyapPencil {
    let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let a1 = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.4..0.4));
    let trial = LyapPencil::new(g.clone(), a1.clone()).unwrap();
    let shift = trial.spectral_abscissa() / 2.0 + 0.3;
    let a = g - DMatrix::identity(n, n) * shift;
    LyapPencil::new(a, a1).unwrap()
}

pub fn scalar_model(a: f64, a1: f64, b: f64, e: f64, q: f64, r: f64, gamma: f64) -> SystemModel {
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

/// Deterministic scalar instance with solution sqrt(2) - 1.
pub fn scalar_deterministic() -> SystemModel {
    scalar_model(-1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0)
}

/// Stochastic scalar instance with solution 2/3.
pub fn scalar_stochastic() -> SystemModel {
    scalar_model(-1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0)
}

/// Fixed synthetic three-state single-input single-disturbance instance
/// with a mean-square-stable open loop.
pub fn synthetic_n3() -> SystemModel {
    SystemModel::new(
        DMatrix::from_row_slice(3, 3, &[-1.5, 0.3, 0.0, 0.2, -1.0, 0.4, -0.1, 0.2, -0.8]),
        DMatrix::from_row_slice(3, 3, &[0.1, 0.0, 0.05, -0.15, 0.2, 0.0, 0.0, 0.1, 0.1]),
        DMatrix::from_column_slice(3, 1, &[0.5, 1.0, 0.3]),
        DMatrix::from_column_slice(3, 1, &[0.4, -0.3, 0.2]),
        DMatrix::identity(3, 3),
        DMatrix::identity(1, 1),
        5.0,
    )
    .unwrap()
}

/// Random instance with a mean-square-stable open loop, identity cost
/// weights and a generous attenuation level.
pub fn random_model(rng: &mut impl Rng, n: usize, m: usize, p: usize) -> SystemModel {
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

/// Spread sinusoid bank used by the learning scenarios; fast enough to vary
/// within 0.25-wide windows.
pub fn frequency_bank() -> Vec<f64> {
    vec![
        0.7, 0.95, 1.3, 1.7, 2.1, 2.55, 3.05, 3.6, 4.2, 4.85, 5.5, 6.3, 7.1, 8.0, 8.9, 9.8,
        10.8, 11.8, 12.9, 14.1,
    ]
}

/// Master-seed stride large enough that per-path streams (seeded by
/// `seed ^ path`) never collide across runs.
pub const SEED_STRIDE: u64 = 1_000_003;
