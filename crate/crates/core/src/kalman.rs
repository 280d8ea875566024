//! Time-varying Kalman filter producing innovations and whitened
//! innovations `z[k] = L[k]⁻¹ e[k]` with `S[k] = L[k] L[k]ᵀ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, min_eigenvalue, symmetrize};
use crate::model::{SystemModel, Trajectory};

/// Filter state *before* the measurement update at index `k`: the
/// predicted estimate `x̂_{k|k−1}` and covariance `P_{k|k−1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationRecord {
    pub e: DVector<f64>,
    pub s: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub z: DVector<f64>,
    pub gain: DMatrix<f64>,
    /// Posterior estimate `x̂_{k|k}`.
    pub x_post: DVector<f64>,
}

pub fn kf_init(model: &SystemModel, x0: &DVector<f64>, p0: &DMatrix<f64>) -> Result<FilterState> {
    let n = model.n();
    if x0.len() != n || p0.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!("x0/P0 must have dimension {n}")));
    }
    let scale = p0.amax().max(1.0);
    let asym = max_asymmetry(p0);
    if asym > 1e-10 * scale {
        return Err(Error::NotSymmetric { name: "P0".into(), asym });
    }
    if n > 0 {
        let min_eig = min_eigenvalue(p0);
        if min_eig < -1e-10 * scale {
            return Err(Error::NotPsd { name: "P0".into(), min_eig });
        }
    }
    Ok(FilterState { x_hat: x0.clone(), p: p0.clone(), k: 0 })
}

/// Innovation covariance, its Cholesky factor and the gain for a predicted
/// covariance.
fn gain_terms(model: &SystemModel, p_pred: &DMatrix<f64>, step: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let mut s = &model.c * p_pred * model.c.transpose() + &model.r;
    symmetrize(&mut s);
    let chol = s.clone().cholesky().ok_or(Error::SingularS { step })?;
    let l = chol.l();
    // K = P Cᵀ S⁻¹, solved as (S⁻¹ C P)ᵀ
    let gain = chol.solve(&(&model.c * p_pred)).transpose();
    Ok((s, l, gain))
}

fn whiten(l: &DMatrix<f64>, e: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(e).expect("Cholesky factor has a positive diagonal")
}

/// One measurement update at `state.k` followed by the time update to `k+1`.
pub fn kf_step(
    state: &FilterState,
    model: &SystemModel,
    y: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(FilterState, InnovationRecord)> {
    let (s, l, gain) = gain_terms(model, &state.p, state.k)?;
    let e = y - &model.c * &state.x_hat - &model.d * u;
    let z = whiten(&l, &e);

    let x_post = &state.x_hat + &gain * &e;
    let n = model.n();
    let mut p_post = (DMatrix::identity(n, n) - &gain * &model.c) * &state.p;
    symmetrize(&mut p_post);

    let x_next = &model.a * &x_post + &model.b * u;
    let mut p_next = &model.a * &p_post * model.a.transpose() + &model.q;
    symmetrize(&mut p_next);

    let next = FilterState { x_hat: x_next, p: p_next, k: state.k + 1 };
    Ok((next, InnovationRecord { e, s, l, z, gain, x_post }))
}

/// Runs the filter over every measurement of `traj`.
pub fn run_filter(
    model: &SystemModel,
    traj: &Trajectory,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<Vec<InnovationRecord>> {
    let mut state = kf_init(model, x0, p0)?;
    let mut records = Vec::with_capacity(traj.len());
    for (y, u) in traj.y_seq.iter().zip(&traj.u_seq) {
        let (next, rec) = kf_step(&state, model, y, u)?;
        records.push(rec);
        state = next;
    }
    Ok(records)
}

/// Gains and whitening factors `(K[k], L[k])` used to linearize the
/// filter around a nominal pass. They do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSchedule {
    pub gains: Vec<DMatrix<f64>>,
    pub factors: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    /// Time-varying schedule of the filter started at `P0`.
    pub fn time_varying(model: &SystemModel, p0: &DMatrix<f64>, len: usize) -> Result<Self> {
        let mut p = p0.clone();
        let mut gains = Vec::with_capacity(len);
        let mut factors = Vec::with_capacity(len);
        for k in 0..len {
            let (_, l, gain) = gain_terms(model, &p, k)?;
            p = riccati_step(model, &p, &gain);
            gains.push(gain);
            factors.push(l);
        }
        Ok(Self { gains, factors })
    }

    /// Constant schedule from the converged Riccati recursion started at `P0`.
    pub fn steady_state(model: &SystemModel, p0: &DMatrix<f64>, len: usize) -> Result<Self> {
        let p = steady_state_covariance(model, p0, 1e-12, 100_000)?;
        let (_, l, gain) = gain_terms(model, &p, 0)?;
        Ok(Self { gains: vec![gain; len], factors: vec![l; len] })
    }
}

fn riccati_step(model: &SystemModel, p_pred: &DMatrix<f64>, gain: &DMatrix<f64>) -> DMatrix<f64> {
    let n = model.n();
    let p_post = (DMatrix::identity(n, n) - gain * &model.c) * p_pred;
    let mut next = &model.a * p_post * model.a.transpose() + &model.q;
    symmetrize(&mut next);
    next
}

/// Iterates the prediction Riccati recursion until successive covariances
/// differ by less than `tol` in Frobenius norm.
pub fn steady_state_covariance(model: &SystemModel, p0: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    let mut p = p0.clone();
    for k in 0..max_iter {
        let (_, _, gain) = gain_terms(model, &p, k)?;
        let next = riccati_step(model, &p, &gain);
        let delta = (&next - &p).norm();
        p = next;
        if delta < tol {
            break;
        }
    }
    Ok(p)
}
