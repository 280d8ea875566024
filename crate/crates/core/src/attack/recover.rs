//! Covariance-fit recovery of an implementable FIR filter.
//!
//! Minimizes `‖T Tᵀ − Σ*‖_F² + ζ ‖Q_G^{1/2} T‖_F²` over block-Toeplitz `T`
//! of order `r` subject to `‖T‖_F² ≤ D`, parameterized by the taps.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channels::{taps_from_toeplitz, toeplitz_from_taps, FirTaps};
use crate::error::Result;
use crate::linalg::{frob_inner, sym_eigen};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOptions {
    pub max_iter: usize,
    /// Stop when the relative objective decrease stays below this.
    pub rel_tol: f64,
    pub patience: usize,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self { max_iter: 50_000, rel_tol: 1e-13, patience: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub taps: FirTaps,
    #[serde(skip)]
    pub sigma: DMatrix<f64>,
    /// `⟨Q_H, Σ̂⟩` before any amplitude scaling.
    pub j_rec_unscaled: f64,
    /// Final fit objective.
    pub fit: f64,
    /// `‖T̂T̂ᵀ − Σ*‖_F`.
    pub residual: f64,
    /// Rank retained in the initializing factorization.
    pub init_rank: usize,
    pub iterations: usize,
    pub converged: bool,
}

pub struct RecoveryProblem<'a> {
    pub sigma_star: &'a DMatrix<f64>,
    pub q_h: &'a DMatrix<f64>,
    pub q_g: &'a DMatrix<f64>,
    pub out_dim: usize,
    pub seed_dim: usize,
    pub order: usize,
    pub energy: f64,
    pub zeta: f64,
}

impl RecoveryProblem<'_> {
    fn samples(&self) -> usize {
        self.sigma_star.nrows() / self.out_dim
    }

    fn operator(&self, taps: &FirTaps) -> DMatrix<f64> {
        toeplitz_from_taps(taps, self.samples()).expect("order checked before fitting").matrix
    }

    fn objective(&self, op: &DMatrix<f64>) -> f64 {
        let residual = op * op.transpose() - self.sigma_star;
        let mut value = residual.norm_squared();
        if self.zeta > 0.0 {
            value += self.zeta * frob_inner(&(self.q_g * op), op);
        }
        value
    }

    /// Gradient with respect to each tap: block-diagonal sums of the
    /// operator gradient `4 (TTᵀ − Σ*) T + 2ζ Q_G T`.
    fn tap_gradient(&self, op: &DMatrix<f64>) -> FirTaps {
        let residual = op * op.transpose() - self.sigma_star;
        let mut grad = residual * op * 4.0;
        if self.zeta > 0.0 {
            grad += self.q_g * op * (2.0 * self.zeta);
        }
        let samples = self.samples();
        let (h, s) = (self.out_dim, self.seed_dim);
        let taps = (0..=self.order)
            .map(|tau| {
                let mut acc = DMatrix::zeros(h, s);
                for i in tau..samples {
                    acc += grad.view((h * i, s * (i - tau)), (h, s));
                }
                acc
            })
            .collect();
        FirTaps { taps }
    }

    fn clamp_energy(&self, taps: FirTaps) -> FirTaps {
        let e = taps.operator_energy(self.samples());
        if e > self.energy && e > 0.0 {
            taps.scaled((self.energy / e).sqrt())
        } else {
            taps
        }
    }

    /// Toeplitz projection of the dominant rank-`k` factor `V_k Λ_k^{1/2}`,
    /// zero-padded to the operator's width.
    fn initial_taps(&self) -> Result<(FirTaps, usize)> {
        let samples = self.samples();
        let (vals, vecs) = sym_eigen(self.sigma_star);
        let top = vals.iter().copied().fold(0.0, f64::max);
        let rank = vals.iter().filter(|&&v| v > 1e-9 * top && v > 0.0).count();
        let k = (self.seed_dim * (self.order + 1)).min(rank).min(self.seed_dim * samples);
        let n = vals.len();
        let mut factor = DMatrix::zeros(self.sigma_star.nrows(), self.seed_dim * samples);
        for c in 0..k {
            let idx = n - 1 - c;
            let scale = vals[idx].sqrt();
            factor.set_column(c, &(vecs.column(idx) * scale));
        }
        let extraction = taps_from_toeplitz(&factor, self.out_dim, self.seed_dim, self.order)?;
        Ok((self.clamp_energy(extraction.taps), k))
    }
}

fn axpy(taps: &FirTaps, dir: &FirTaps, alpha: f64) -> FirTaps {
    FirTaps { taps: taps.taps.iter().zip(&dir.taps).map(|(t, d)| t + d * alpha).collect() }
}

fn dot(a: &FirTaps, b: &FirTaps) -> f64 {
    a.taps.iter().zip(&b.taps).map(|(x, y)| frob_inner(x, y)).sum()
}

/// Gradient descent on the taps with Barzilai–Borwein trial steps and
/// Armijo backtracking; the energy constraint is enforced by rescaling each
/// accepted iterate.
pub fn recover_fir(problem: &RecoveryProblem<'_>, options: &RecoveryOptions) -> Result<Recovery> {
    let samples = problem.samples();
    if problem.order >= samples {
        return Err(crate::Error::OrderExceedsHorizon { order: problem.order, horizon: samples - 1 });
    }
    let (mut taps, init_rank) = problem.initial_taps()?;
    let mut op = problem.operator(&taps);
    let mut value = problem.objective(&op);
    let mut grad = problem.tap_gradient(&op);
    let mut step = 1.0 / (1.0 + problem.sigma_star.norm());
    let mut stalled = 0;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < options.max_iter {
        iterations += 1;
        let grad_sq = dot(&grad, &grad);
        if grad_sq == 0.0 {
            converged = true;
            break;
        }
        let mut trial_step = step;
        let (next_taps, next_op, next_value) = loop {
            let candidate = problem.clamp_energy(axpy(&taps, &grad, -trial_step));
            let cand_op = problem.operator(&candidate);
            let cand_value = problem.objective(&cand_op);
            let moved = axpy(&candidate, &taps, -1.0);
            // Armijo on the projected step
            if cand_value <= value + 1e-4 * dot(&grad, &moved) || trial_step < 1e-30 {
                break (candidate, cand_op, cand_value);
            }
            trial_step *= 0.5;
        };
        let next_grad = problem.tap_gradient(&next_op);
        let s_vec = axpy(&next_taps, &taps, -1.0);
        let y_vec = axpy(&next_grad, &grad, -1.0);
        let sy = dot(&s_vec, &y_vec);
        step = if sy > 0.0 { dot(&s_vec, &s_vec) / sy } else { trial_step * 2.0 };

        let decrease = (value - next_value) / value.abs().max(1e-300);
        taps = next_taps;
        op = next_op;
        grad = next_grad;
        value = next_value;
        if decrease.abs() < options.rel_tol {
            stalled += 1;
            if stalled >= options.patience {
                converged = true;
                break;
            }
        } else {
            stalled = 0;
        }
    }

    let sigma = &op * op.transpose();
    let residual = (&sigma - problem.sigma_star).norm();
    Ok(Recovery {
        j_rec_unscaled: frob_inner(problem.q_h, &sigma),
        fit: value,
        residual,
        init_rank,
        iterations,
        converged,
        taps,
        sigma,
    })
}
