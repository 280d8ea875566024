//! Stealthy disturbance design: the AR(1) baseline, the covariance
//! relaxation, FIR recovery, amplitude scaling and the gap certificate.

mod recover;
mod relax;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channels::{build_channels, whiteness_functional, ChannelPair, FirTaps};
use crate::error::{Error, Result};
use crate::kalman::GainSchedule;
use crate::linalg::{frob_inner, kernel_basis, nuclear_norm_sym, spectral_norm, sym_eigen, symmetrized};
pub use crate::linalg::psd_clip;
use crate::model::SystemModel;
use crate::rng::RngStream;
use crate::sds::excess_nis_budget;
use crate::statkit::chi2_quantile;

pub use recover::{recover_fir, Recovery, RecoveryOptions, RecoveryProblem};
pub use relax::{solve_relaxation, RelaxationProblem, RelaxationSolution, SolverOptions};

/// Detector-side budgets of the attacker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudgets {
    /// Allowed increase of the expected aggregate NIS.
    pub eps_cov: f64,
    /// Bound on the weighted lagged-covariance energy of the whitened
    /// innovation deviation.
    pub eps_white: f64,
    /// Total disturbance energy `tr Σ`.
    pub energy: f64,
    pub lags: usize,
    pub alpha: f64,
}

impl AttackBudgets {
    pub fn new(eps_cov: f64, eps_white: f64, energy: f64, lags: usize, alpha: f64) -> Result<Self> {
        for (name, v) in [("eps_cov", eps_cov), ("eps_white", eps_white), ("energy", energy)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Domain(format!("alpha must lie in (0,1), got {alpha}")));
        }
        Ok(Self { eps_cov, eps_white, energy, lags, alpha })
    }

    /// Budgets matched to a detector running at level `alpha` with `lags`
    /// portmanteau lags on `samples` innovations of dimension `m`:
    /// the excess-NIS margin and the `χ²_{m²L}` whiteness threshold.
    pub fn from_detector(alpha: f64, m: usize, samples: usize, lags: usize, energy: f64) -> Result<Self> {
        let eps_cov = excess_nis_budget(alpha, m, samples)?;
        let eps_white = chi2_quantile(1.0 - alpha, (m * m * lags) as f64)?;
        Self::new(eps_cov, eps_white, energy, lags, alpha)
    }

    pub fn zero(lags: usize, alpha: f64) -> Self {
        Self { eps_cov: 0.0, eps_white: 0.0, energy: 0.0, lags, alpha }
    }
}

/// Half-open sample range `[start, start + len)` where an attack is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackWindow {
    pub start: usize,
    pub len: usize,
}

impl AttackWindow {
    pub fn contains(&self, k: usize) -> bool {
        k >= self.start && k < self.start + self.len
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// `d[k] = ω d[k−1] + ψ ξ[k]` inside the window (starting from rest),
/// zero elsewhere.
pub fn ar1_attack(
    omega: f64,
    psi: f64,
    window: AttackWindow,
    horizon: usize,
    h: usize,
    rng: &mut RngStream,
) -> Result<Vec<DVector<f64>>> {
    if !(0.0..1.0).contains(&omega) {
        return Err(Error::Domain(format!("AR(1) coefficient must lie in [0,1), got {omega}")));
    }
    if !(psi > 0.0) || !psi.is_finite() {
        return Err(Error::Domain(format!("AR(1) innovation scale must be positive, got {psi}")));
    }
    let mut state = DVector::zeros(h);
    Ok((0..horizon)
        .map(|k| {
            if window.contains(k) {
                state = &state * omega + rng.standard_normal_vec(h) * psi;
                state.clone()
            } else {
                DVector::zeros(h)
            }
        })
        .collect())
}

/// Uncapped amplitude bound `min(√(ε_cov/T_NIS), (ε_white/T_P)^{1/4})`;
/// a zero statistic imposes no bound.
pub fn scaling_bound(t_nis: f64, t_p: f64, eps_cov: f64, eps_white: f64) -> f64 {
    let nis = if t_nis > 0.0 { (eps_cov / t_nis).sqrt() } else { f64::INFINITY };
    let white = if t_p > 0.0 { (eps_white / t_p).powf(0.25) } else { f64::INFINITY };
    nis.min(white)
}

/// Scaling applied by the pipeline: [`scaling_bound`] capped at 1.
pub fn compute_scaling(t_nis: f64, t_p: f64, eps_cov: f64, eps_white: f64) -> f64 {
    scaling_bound(t_nis, t_p, eps_cov, eps_white).min(1.0)
}

/// `‖Q_H‖₂ ‖Σ* − Σ̂‖_*`, which bounds `|⟨Q_H, Σ*⟩ − ⟨Q_H, Σ̂⟩|`.
pub fn certify_gap(q_h: &DMatrix<f64>, sigma_star: &DMatrix<f64>, sigma_hat: &DMatrix<f64>) -> Result<f64> {
    let n = q_h.nrows();
    if q_h.ncols() != n || sigma_star.shape() != (n, n) || sigma_hat.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "certificate needs matching square matrices, got {:?}, {:?}, {:?}",
            q_h.shape(),
            sigma_star.shape(),
            sigma_hat.shape()
        )));
    }
    let diff = symmetrized(&(sigma_star - sigma_hat));
    Ok(spectral_norm(q_h, 1e-9) * nuclear_norm_sym(&diff))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelAnalysis {
    pub kernel_dim: usize,
    /// `λ_max(P Q_H P)` with `P` the projector onto `ker G`.
    pub lambda_max: f64,
    /// `D λ_max(P Q_H P)`.
    pub value: f64,
    /// Optimal rank-one covariance `D v vᵀ`.
    pub sigma: DMatrix<f64>,
}

/// Best damage achievable with disturbances invisible to the detector.
pub fn kernel_analysis(g: &DMatrix<f64>, q_h: &DMatrix<f64>, energy: f64) -> KernelAnalysis {
    let dim = g.ncols();
    let basis = kernel_basis(g, 1e-9);
    if basis.ncols() == 0 {
        return KernelAnalysis { kernel_dim: 0, lambda_max: 0.0, value: 0.0, sigma: DMatrix::zeros(dim, dim) };
    }
    // Eigenpairs of P Q_H P on ker G are those of Nᵀ Q_H N.
    let reduced = basis.transpose() * q_h * &basis;
    let (vals, vecs) = sym_eigen(&symmetrized(&reduced));
    let top = vals.len() - 1;
    let lambda_max = vals[top].max(0.0);
    let v = &basis * vecs.column(top);
    KernelAnalysis {
        kernel_dim: basis.ncols(),
        lambda_max,
        value: energy * lambda_max,
        sigma: &v * v.transpose() * energy,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    /// FIR order `r`.
    pub order: usize,
    /// Seed dimension `s`; `None` uses the disturbance dimension.
    pub seed_dim: Option<usize>,
    /// Weight of the detection-channel penalty in the recovery fit.
    pub zeta: f64,
    pub solver: SolverOptions,
    pub recovery: RecoveryOptions,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self { order: 2, seed_dim: None, zeta: 0.0, solver: SolverOptions::default(), recovery: RecoveryOptions::default() }
    }
}

/// Result of the relaxation, recovery and scaling chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    /// Scaled taps `γ M[τ]`.
    pub taps: FirTaps,
    /// Taps before scaling.
    pub unscaled_taps: FirTaps,
    #[serde(skip)]
    pub sigma_star: DMatrix<f64>,
    /// `T̂ T̂ᵀ` before scaling.
    #[serde(skip)]
    pub sigma_hat: DMatrix<f64>,
    pub gamma: f64,
    pub j_relax: f64,
    pub j_rec_unscaled: f64,
    pub j_rec: f64,
    pub certificate: f64,
    /// `|J_relax − J_rec_unscaled|`.
    pub gap: f64,
    /// `tr(Q_G Σ̂)` and the whiteness functional before scaling.
    pub t_nis: f64,
    pub t_p: f64,
    pub budgets: AttackBudgets,
    pub samples: usize,
    pub seed: u64,
    pub relaxation: RelaxationSolution,
    pub recovery_iterations: usize,
    pub recovery_residual: f64,
    pub init_rank: usize,
    pub converged: bool,
}

impl AttackPlan {
    /// NIS and whiteness loads of the scaled plan.
    pub fn scaled_loads(&self) -> (f64, f64) {
        let g2 = self.gamma * self.gamma;
        (g2 * self.t_nis, g2 * g2 * self.t_p)
    }
}

/// Runs the full design chain over a `samples`-long window and draws one
/// disturbance realization `d[k] = Σ_τ γ M[τ] ξ[k−τ]` from `rng`.
pub fn synthesize_attack(
    model: &SystemModel,
    schedule: &GainSchedule,
    budgets: &AttackBudgets,
    samples: usize,
    options: &SynthesisOptions,
    rng: &mut RngStream,
) -> Result<(AttackPlan, Vec<DVector<f64>>)> {
    if samples == 0 {
        return Err(Error::Domain("design window must contain at least one sample".into()));
    }
    if options.order >= samples {
        return Err(Error::OrderExceedsHorizon { order: options.order, horizon: samples - 1 });
    }
    let channels = build_channels(model, schedule, samples)?;
    design_from_channels(&channels, budgets, options, rng)
}

/// [`synthesize_attack`] on precomputed channels.
pub fn design_from_channels(
    channels: &ChannelPair,
    budgets: &AttackBudgets,
    options: &SynthesisOptions,
    rng: &mut RngStream,
) -> Result<(AttackPlan, Vec<DVector<f64>>)> {
    let samples = channels.samples;
    let h = channels.dist_dim;
    let seed_dim = options.seed_dim.unwrap_or(h);
    if options.order >= samples {
        return Err(Error::OrderExceedsHorizon { order: options.order, horizon: samples - 1 });
    }
    let relaxation = solve_relaxation(
        &RelaxationProblem {
            q_h: &channels.q_h,
            q_g: &channels.q_g,
            g: &channels.g,
            meas_dim: channels.meas_dim,
            budgets,
        },
        &options.solver,
    );
    let recovery = recover_fir(
        &RecoveryProblem {
            sigma_star: &relaxation.sigma,
            q_h: &channels.q_h,
            q_g: &channels.q_g,
            out_dim: h,
            seed_dim,
            order: options.order,
            energy: budgets.energy,
            zeta: options.zeta,
        },
        &options.recovery,
    )?;
    let sigma_hat = psd_clip(&recovery.sigma);
    let t_nis = frob_inner(&channels.q_g, &sigma_hat).max(0.0);
    let sigma_dz = &channels.g * &sigma_hat * channels.g.transpose();
    let t_p = whiteness_functional(&sigma_dz, channels.meas_dim, budgets.lags)?;
    let gamma = compute_scaling(t_nis, t_p, budgets.eps_cov, budgets.eps_white);
    let nonzero = recovery.taps.taps.iter().any(|m| m.iter().any(|&v| v != 0.0));
    if gamma <= 0.0 && nonzero {
        return Err(Error::InfeasibleBudgets(format!(
            "recovered filter loads the detector (T_NIS = {t_nis:.3e}, T_P = {t_p:.3e}) but the budgets are \
             eps_cov = {}, eps_white = {}",
            budgets.eps_cov, budgets.eps_white
        )));
    }
    let j_rec_unscaled = frob_inner(&channels.q_h, &sigma_hat);
    let certificate = certify_gap(&channels.q_h, &relaxation.sigma, &sigma_hat)?;
    let taps = recovery.taps.scaled(gamma);

    let seed: Vec<DVector<f64>> = (0..samples).map(|_| rng.standard_normal_vec(seed_dim)).collect();
    let disturbance = taps.filter(&seed);

    let plan = AttackPlan {
        unscaled_taps: recovery.taps,
        taps,
        gamma,
        j_relax: relaxation.j_relax,
        j_rec_unscaled,
        j_rec: gamma * gamma * j_rec_unscaled,
        certificate,
        gap: (relaxation.j_relax - j_rec_unscaled).abs(),
        t_nis,
        t_p,
        budgets: *budgets,
        samples,
        seed: rng.seed(),
        recovery_iterations: recovery.iterations,
        recovery_residual: recovery.residual,
        init_rank: recovery.init_rank,
        converged: relaxation.converged && recovery.converged,
        sigma_star: relaxation.sigma.clone(),
        sigma_hat,
        relaxation,
    };
    Ok((plan, disturbance))
}
