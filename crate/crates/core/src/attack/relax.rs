//! First-order solver for the covariance relaxation
//!
//! ```text
//! max ⟨Q_H, Σ⟩  s.t.  Σ ⪰ 0,  tr Σ ≤ D,  ⟨Q_G, Σ⟩ ≤ ε_cov,
//!                     Σ_τ w_τ ‖L_τ(G Σ Gᵀ)‖_F² ≤ ε_white
//! ```
//!
//! With `ε_cov = 0` the problem lives on `ker(G)` and is solved in closed
//! form. Otherwise iterates stay in `{Σ ⪰ 0, tr Σ ≤ D}` through an eigenvalue projection;
//! the NIS and whiteness constraints are handled by an augmented
//! Lagrangian whose subproblems are solved by accelerated projected
//! gradient with backtracking. The returned matrix is rescaled onto the
//! feasible set, so it satisfies every constraint exactly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channels::{whiteness_functional, whiteness_functional_gradient};
use crate::linalg::{frob_inner, kernel_basis, max_eigenvalue, project_psd_trace, sym_eigen, symmetrize};

use super::AttackBudgets;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Relative objective change regarded as stalled.
    pub rel_tol: f64,
    /// Consecutive stalled iterations before an inner solve stops.
    pub patience: usize,
    /// Relative constraint violation accepted before the final rescale.
    pub feas_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iter: 200_000, rel_tol: 1e-8, patience: 20, feas_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxationSolution {
    #[serde(skip)]
    pub sigma: DMatrix<f64>,
    pub j_relax: f64,
    /// `⟨Q_G, Σ*⟩`.
    pub nis_load: f64,
    /// Whiteness functional of `G Σ* Gᵀ`.
    pub whiteness_load: f64,
    pub trace: f64,
    /// Largest relative constraint violation before the final rescale.
    pub max_violation: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Problem data shared by the solver routines.
pub struct RelaxationProblem<'a> {
    pub q_h: &'a DMatrix<f64>,
    pub q_g: &'a DMatrix<f64>,
    pub g: &'a DMatrix<f64>,
    pub meas_dim: usize,
    pub budgets: &'a AttackBudgets,
}

impl RelaxationProblem<'_> {
    fn nis_load(&self, sigma: &DMatrix<f64>) -> f64 {
        frob_inner(self.q_g, sigma)
    }

    fn whiteness_load(&self, sigma: &DMatrix<f64>) -> f64 {
        let sigma_dz = self.g * sigma * self.g.transpose();
        whiteness_functional(&sigma_dz, self.meas_dim, self.budgets.lags).expect("G rows tile by m")
    }

    fn evaluate(&self, sigma: DMatrix<f64>, iterations: usize, converged: bool, max_violation: f64) -> RelaxationSolution {
        RelaxationSolution {
            j_relax: frob_inner(self.q_h, &sigma),
            nis_load: self.nis_load(&sigma),
            whiteness_load: self.whiteness_load(&sigma),
            trace: sigma.trace(),
            max_violation,
            iterations,
            converged,
            sigma,
        }
    }
}

pub fn solve_relaxation(problem: &RelaxationProblem<'_>, options: &SolverOptions) -> RelaxationSolution {
    let dim = problem.q_h.nrows();
    let budget = problem.budgets.energy;
    let q_h_scale = if dim > 0 { max_eigenvalue(problem.q_h) } else { 0.0 };
    if dim == 0 || budget <= 0.0 || q_h_scale <= 0.0 {
        return problem.evaluate(DMatrix::zeros(dim, dim), 0, true, 0.0);
    }
    if problem.budgets.eps_cov <= 0.0 {
        // ⟨Q_G, Σ⟩ ≤ 0 with Σ ⪰ 0 forces range(Σ) ⊆ ker(G): solve there exactly.
        return solve_in_kernel(problem);
    }
    solve_augmented_lagrangian(problem, options, q_h_scale)
}

/// On `ker(G)` both detector loads vanish, so the problem reduces to a
/// linear objective over `{S ⪰ 0, tr S ≤ D}`, maximized by `D v vᵀ` for the
/// top eigenvector `v` of the reduced objective.
fn solve_in_kernel(problem: &RelaxationProblem<'_>) -> RelaxationSolution {
    let dim = problem.q_h.nrows();
    let basis = kernel_basis(problem.g, 1e-9);
    if basis.ncols() == 0 {
        return problem.evaluate(DMatrix::zeros(dim, dim), 0, true, 0.0);
    }
    let mut reduced = basis.transpose() * problem.q_h * &basis;
    symmetrize(&mut reduced);
    let (vals, vecs) = sym_eigen(&reduced);
    let top = vals.len() - 1;
    if vals[top] <= 0.0 {
        return problem.evaluate(DMatrix::zeros(dim, dim), 0, true, 0.0);
    }
    let v = &basis * vecs.column(top);
    let mut sigma = &v * v.transpose() * problem.budgets.energy;
    symmetrize(&mut sigma);
    problem.evaluate(sigma, 1, true, 0.0)
}

/// Normalized constraint values and gradients. The decision variable is
/// `X = Σ / D`, so the feasible region is `{X ⪰ 0, tr X ≤ 1}`.
struct Scaled<'a> {
    problem: &'a RelaxationProblem<'a>,
    objective: DMatrix<f64>,
    nis_grad: DMatrix<f64>,
    nis_scale: f64,
    white_scale: f64,
}

impl<'a> Scaled<'a> {
    fn new(problem: &'a RelaxationProblem<'a>, q_h_scale: f64) -> Self {
        let d = problem.budgets.energy;
        let nis_scale = problem.budgets.eps_cov;
        let white_scale = if problem.budgets.eps_white > 0.0 { problem.budgets.eps_white } else { 1.0 };
        Self {
            problem,
            objective: problem.q_h / q_h_scale,
            nis_grad: problem.q_g * (d / nis_scale),
            nis_scale,
            white_scale,
        }
    }

    /// `(g_nis, g_white)` where `g ≤ 0` means feasible.
    fn constraints(&self, x: &DMatrix<f64>) -> [f64; 2] {
        let d = self.problem.budgets.energy;
        let nis = d * frob_inner(self.problem.q_g, x) / self.nis_scale - 1.0;
        let white = d * d * self.problem.whiteness_load(x) / self.white_scale - self.problem.budgets.eps_white / self.white_scale;
        [nis, white]
    }

    fn white_grad(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.problem.budgets.energy;
        let g = self.problem.g;
        let sigma_dz = g * x * g.transpose();
        let inner = whiteness_functional_gradient(&sigma_dz, self.problem.meas_dim, self.problem.budgets.lags);
        let mut grad = g.transpose() * inner * g * (d * d / self.white_scale);
        symmetrize(&mut grad);
        grad
    }

    /// Augmented Lagrangian value (to be minimized).
    fn merit(&self, x: &DMatrix<f64>, mult: &[f64; 2], rho: &[f64; 2]) -> f64 {
        let cons = self.constraints(x);
        let mut value = -frob_inner(&self.objective, x);
        for i in 0..2 {
            let shifted = (cons[i] + mult[i] / rho[i]).max(0.0);
            value += 0.5 * rho[i] * (shifted * shifted - (mult[i] / rho[i]).powi(2));
        }
        value
    }

    fn merit_grad(&self, x: &DMatrix<f64>, mult: &[f64; 2], rho: &[f64; 2]) -> DMatrix<f64> {
        let cons = self.constraints(x);
        let mut grad = -&self.objective;
        let w_nis = rho[0] * (cons[0] + mult[0] / rho[0]).max(0.0);
        if w_nis > 0.0 {
            grad += &self.nis_grad * w_nis;
        }
        let w_white = rho[1] * (cons[1] + mult[1] / rho[1]).max(0.0);
        if w_white > 0.0 {
            grad += self.white_grad(x) * w_white;
        }
        grad
    }
}

fn solve_augmented_lagrangian(problem: &RelaxationProblem<'_>, options: &SolverOptions, q_h_scale: f64) -> RelaxationSolution {
    let dim = problem.q_h.nrows();
    let scaled = Scaled::new(problem, q_h_scale);
    let mut x = DMatrix::<f64>::zeros(dim, dim);
    let mut mult = [0.0f64; 2];
    let mut rho = [10.0f64; 2];
    let mut prev_violation = [f64::INFINITY; 2];
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut last_objective = f64::NAN;

    while iterations < options.max_iter {
        // inner: FISTA on the augmented Lagrangian over {X ⪰ 0, tr X ≤ 1}
        let mut y = x.clone();
        let mut t_momentum = 1.0f64;
        let mut merit_prev = scaled.merit(&x, &mult, &rho);
        let mut stalled = 0;
        let inner_cap = (options.max_iter - iterations).min(20_000);
        for _ in 0..inner_cap {
            iterations += 1;
            let grad = scaled.merit_grad(&y, &mult, &rho);
            let merit_y = scaled.merit(&y, &mult, &rho);
            let mut x_next;
            loop {
                x_next = project_psd_trace(&(&y - &grad * step), 1.0);
                let diff = &x_next - &y;
                let bound = merit_y + frob_inner(&grad, &diff) + diff.norm_squared() / (2.0 * step);
                if scaled.merit(&x_next, &mult, &rho) <= bound + 1e-15 * bound.abs() || step < 1e-16 {
                    break;
                }
                step *= 0.5;
            }
            let merit_next = scaled.merit(&x_next, &mult, &rho);
            // restart momentum when the merit goes up
            if merit_next > merit_prev {
                t_momentum = 1.0;
                y = x.clone();
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_momentum * t_momentum).sqrt());
            y = &x_next + (&x_next - &x) * ((t_momentum - 1.0) / t_next);
            t_momentum = t_next;
            let change = (merit_prev - merit_next).abs() / merit_next.abs().max(1e-12);
            x = x_next;
            merit_prev = merit_next;
            step *= 1.5;
            if change < options.rel_tol * 1e-2 {
                stalled += 1;
                if stalled >= options.patience {
                    break;
                }
            } else {
                stalled = 0;
            }
        }

        let cons = scaled.constraints(&x);
        let violation = [cons[0].max(0.0), cons[1].max(0.0)];
        let objective = frob_inner(&scaled.objective, &x);
        let objective_change = (objective - last_objective).abs() / objective.abs().max(1e-12);
        last_objective = objective;
        if violation.iter().all(|&v| v <= options.feas_tol) && objective_change < options.rel_tol {
            converged = true;
            break;
        }
        for i in 0..2 {
            mult[i] = (mult[i] + rho[i] * cons[i]).max(0.0);
            if violation[i] > options.feas_tol && violation[i] > 0.25 * prev_violation[i] {
                rho[i] = (rho[i] * 10.0).min(1e10);
            }
            prev_violation[i] = violation[i];
        }
    }

    let cons = scaled.constraints(&x);
    let max_violation = cons[0].max(cons[1]).max(0.0);
    let sigma = restore_feasibility(problem, x * problem.budgets.energy);
    problem.evaluate(sigma, iterations, converged, max_violation)
}

/// Shrinks `sigma` onto the feasible set (both detector constraints are
/// positively homogeneous, of degree 1 and 2).
fn restore_feasibility(problem: &RelaxationProblem<'_>, mut sigma: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut sigma);
    let b = problem.budgets;
    let mut factor: f64 = 1.0;
    let trace = sigma.trace();
    if trace > b.energy {
        factor = factor.min(b.energy / trace);
    }
    let nis = problem.nis_load(&sigma);
    if nis > b.eps_cov {
        factor = factor.min(b.eps_cov / nis);
    }
    let white = problem.whiteness_load(&sigma);
    if white > b.eps_white {
        factor = factor.min((b.eps_white / white).sqrt());
    }
    sigma * factor
}
