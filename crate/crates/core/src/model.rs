//! Discrete LTI plant with disturbance channels and its noisy simulator.
//!
//! ```text
//! x[k+1] = A x[k] + B u[k] + E d[k] + w[k],   w ~ N(0, Q)
//! y[k]   = C x[k] + D u[k] + F d[k] + v[k],   v ~ N(0, R)
//! ```

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, min_eigenvalue, psd_cholesky};
use crate::rng::{sample_mvn, RngStream};

const SYM_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    q_chol: DMatrix<f64>,
    r_chol: DMatrix<f64>,
    detectable: bool,
}

fn expect_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::DimensionMismatch(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_covariance(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    let asym = max_asymmetry(m);
    if asym > SYM_TOL * scale {
        return Err(Error::NotSymmetric { name: name.into(), asym });
    }
    if m.nrows() > 0 {
        let min_eig = min_eigenvalue(m);
        if min_eig < -PSD_TOL * scale {
            return Err(Error::NotPsd { name: name.into(), min_eig });
        }
    }
    Ok(())
}

impl SystemModel {
    /// Validates dimensions and noise covariances, factors `Q` and `R` once,
    /// and records whether `(A, C)` is detectable. A non-detectable pair is
    /// reported through [`SystemModel::is_detectable`], not as an error.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
        f: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = c.nrows();
        let p = b.ncols();
        let h = e.ncols();
        expect_shape("A", &a, n, n)?;
        expect_shape("B", &b, n, p)?;
        expect_shape("C", &c, m, n)?;
        expect_shape("D", &d, m, p)?;
        expect_shape("E", &e, n, h)?;
        expect_shape("F", &f, m, h)?;
        expect_shape("Q", &q, n, n)?;
        expect_shape("R", &r, m, m)?;
        check_covariance("Q", &q)?;
        check_covariance("R", &r)?;
        if m > 0 && min_eigenvalue(&r) <= PSD_TOL * r.amax().max(1.0) {
            return Err(Error::NotPositiveDefinite { name: "R".into() });
        }
        let detectable = pbh_detectable(&a, &c);
        let q_chol = psd_cholesky(&q);
        let r_chol = psd_cholesky(&r);
        Ok(Self { a, b, c, d, e, f, q, r, q_chol, r_chol, detectable })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.c.nrows()
    }
    pub fn p(&self) -> usize {
        self.b.ncols()
    }
    pub fn h(&self) -> usize {
        self.e.ncols()
    }

    pub fn is_detectable(&self) -> bool {
        self.detectable
    }

    pub fn q_chol(&self) -> &DMatrix<f64> {
        &self.q_chol
    }

    pub fn r_chol(&self) -> &DMatrix<f64> {
        &self.r_chol
    }

    /// Copy whose simulator draws no noise. `Q` and `R` are kept, so a filter
    /// built on the copy is tuned exactly as before.
    pub fn noiseless(&self) -> Self {
        Self {
            q_chol: DMatrix::zeros(self.n(), self.n()),
            r_chol: DMatrix::zeros(self.m(), self.m()),
            ..self.clone()
        }
    }
}

/// PBH test: `rank [A − λI; C] = n` for every eigenvalue with `|λ| ≥ 1`.
fn pbh_detectable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    if n == 0 {
        return true;
    }
    let m = c.nrows();
    let eigs = a.complex_eigenvalues();
    let scale = a.amax().max(c.amax()).max(1.0);
    eigs.iter().filter(|l| l.norm() >= 1.0 - 1e-9).all(|&lambda| {
        let mut stacked = DMatrix::<Complex<f64>>::zeros(n + m, n);
        for i in 0..n {
            for j in 0..n {
                let shift = if i == j { lambda } else { Complex::new(0.0, 0.0) };
                stacked[(i, j)] = Complex::new(a[(i, j)], 0.0) - shift;
            }
        }
        for i in 0..m {
            for j in 0..n {
                stacked[(n + i, j)] = Complex::new(c[(i, j)], 0.0);
            }
        }
        let sv = stacked.singular_values();
        let rank = sv.iter().filter(|&&s| s > 1e-7 * scale).count();
        rank == n
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub x_seq: Vec<DVector<f64>>,
    pub y_seq: Vec<DVector<f64>>,
    pub u_seq: Vec<DVector<f64>>,
    pub d_seq: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.x_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_seq.is_empty()
    }
}

/// Simulates `T+1 = u_seq.len()` samples. For each step the measurement
/// noise `v[k]` is drawn before the process noise `w[k]`, so the noise
/// realization depends only on the seed and never on `u` or `d`.
pub fn simulate(
    model: &SystemModel,
    u_seq: &[DVector<f64>],
    d_seq: &[DVector<f64>],
    x0: &DVector<f64>,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let len = u_seq.len();
    if d_seq.len() != len {
        return Err(Error::DimensionMismatch(format!(
            "u_seq has {len} samples but d_seq has {}",
            d_seq.len()
        )));
    }
    if x0.len() != model.n() {
        return Err(Error::DimensionMismatch(format!("x0 has length {}, expected {}", x0.len(), model.n())));
    }
    if let Some(u) = u_seq.iter().find(|u| u.len() != model.p()) {
        return Err(Error::DimensionMismatch(format!("input of length {}, expected {}", u.len(), model.p())));
    }
    if let Some(d) = d_seq.iter().find(|d| d.len() != model.h()) {
        return Err(Error::DimensionMismatch(format!(
            "disturbance of length {}, expected {}",
            d.len(),
            model.h()
        )));
    }

    let mut x_seq = Vec::with_capacity(len);
    let mut y_seq = Vec::with_capacity(len);
    let mut x = x0.clone();
    for k in 0..len {
        let v = sample_mvn(model.r_chol(), rng);
        let w = sample_mvn(model.q_chol(), rng);
        let y = &model.c * &x + &model.d * &u_seq[k] + &model.f * &d_seq[k] + v;
        let next = &model.a * &x + &model.b * &u_seq[k] + &model.e * &d_seq[k] + w;
        x_seq.push(x);
        y_seq.push(y);
        x = next;
    }
    Ok(Trajectory {
        x_seq,
        y_seq,
        u_seq: u_seq.to_vec(),
        d_seq: d_seq.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::build_cv_model;

    fn zeros(len: usize, dim: usize) -> Vec<DVector<f64>> {
        vec![DVector::zeros(dim); len]
    }

    fn noiseless_cv() -> SystemModel {
        build_cv_model(5.0, 1e-2, 5.0).unwrap().noiseless()
    }

    #[test]
    fn cv_model_is_detectable() {
        let cv = build_cv_model(5.0, 1e-2, 5.0).unwrap();
        assert!(cv.is_detectable());
    }

    #[test]
    fn zero_r_is_rejected() {
        let cv = build_cv_model(5.0, 1e-2, 5.0).unwrap();
        let err = SystemModel::new(
            cv.a.clone(),
            cv.b.clone(),
            cv.c.clone(),
            cv.d.clone(),
            cv.e.clone(),
            cv.f.clone(),
            cv.q.clone(),
            DMatrix::zeros(2, 2),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn negative_q_is_rejected() {
        let err = SystemModel::new(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 0),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 0),
            DMatrix::zeros(1, 0),
            DMatrix::zeros(1, 0),
            DMatrix::from_element(1, 1, -1e-3),
            DMatrix::identity(1, 1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotPsd { .. }));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = SystemModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(3, 1),
            DMatrix::identity(1, 2),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(2, 0),
            DMatrix::zeros(1, 0),
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn unobserved_marginal_mode_is_not_detectable() {
        let model = SystemModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 0),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 0),
            DMatrix::zeros(2, 0),
            DMatrix::zeros(1, 0),
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        assert!(!model.is_detectable());
    }

    #[test]
    fn zero_everything_gives_zero_trajectory() {
        let zero_noise = build_cv_model(5.0, 1e-2, 5.0).unwrap().noiseless();
        let mut rng = RngStream::new(1);
        let traj = simulate(&zero_noise, &zeros(11, 2), &zeros(11, 2), &DVector::zeros(4), &mut rng).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.x_seq.iter().chain(traj.y_seq.iter()).all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn velocity_impulse_moves_position_by_ts_per_step() {
        let silent = noiseless_cv();
        let mut d = zeros(8, 2);
        d[0][0] = 1.0;
        let traj = simulate(&silent, &zeros(8, 2), &d, &DVector::zeros(4), &mut RngStream::new(0)).unwrap();
        assert_eq!(traj.x_seq[0][0], 0.0);
        for k in 1..8 {
            assert!((traj.x_seq[k][0] - 5.0 * (k - 1) as f64).abs() < 1e-12);
            assert_eq!(traj.x_seq[k][2], 1.0);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cv = build_cv_model(5.0, 1e-2, 5.0).unwrap();
        let run = || simulate(&cv, &zeros(50, 2), &zeros(50, 2), &DVector::zeros(4), &mut RngStream::new(99)).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn length_mismatch_errors() {
        let cv = build_cv_model(5.0, 1e-2, 5.0).unwrap();
        let err = simulate(&cv, &zeros(5, 2), &zeros(4, 2), &DVector::zeros(4), &mut RngStream::new(0)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn process_noise_covariance_matches_q() {
        let cv = build_cv_model(5.0, 1e-2, 5.0).unwrap();
        let mut rng = RngStream::new(5);
        let steps = 20_000;
        let mut acc = DMatrix::zeros(4, 4);
        for _ in 0..steps {
            let w = sample_mvn(cv.q_chol(), &mut rng);
            acc += &w * w.transpose();
        }
        acc /= steps as f64;
        let rel = (&acc - &cv.q).norm() / cv.q.norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn zero_noise_simulation_is_linear_in_disturbance(
            d1 in proptest::collection::vec(-1.0f64..1.0, 20),
            d2 in proptest::collection::vec(-1.0f64..1.0, 20),
        ) {
            let silent = noiseless_cv();
            let to_seq = |v: &[f64]| -> Vec<DVector<f64>> {
                v.chunks(2).map(|c| DVector::from_row_slice(c)).collect()
            };
            let u: Vec<_> = (0..10).map(|k| DVector::from_vec(vec![1e-3, 1e-3 * k as f64])).collect();
            let x0 = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
            let seq1 = to_seq(&d1);
            let seq2 = to_seq(&d2);
            let sum: Vec<_> = seq1.iter().zip(&seq2).map(|(a, b)| a + b).collect();
            let run = |d: &[DVector<f64>]| simulate(&silent, &u, d, &x0, &mut RngStream::new(0)).unwrap();
            let base = run(&zeros(10, 2));
            let (t1, t2, t12) = (run(&seq1), run(&seq2), run(&sum));
            for k in 0..10 {
                let lhs = &t12.x_seq[k] - &base.x_seq[k];
                let rhs = (&t1.x_seq[k] - &base.x_seq[k]) + (&t2.x_seq[k] - &base.x_seq[k]);
                proptest::prop_assert!((lhs - rhs).amax() < 1e-9);
            }
        }
    }
}
