//! Statistical Detection Suite: bias, NIS, Mardia kurtosis and multivariate
//! portmanteau tests on a window of whitened innovations, plus Fisher fusion.
//!
//! Every test is an upper-tail test on its statistic except Mardia, whose
//! standardized kurtosis is referred to a two-sided normal.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statkit::{chi2_quantile, chi2_sf, normal_sf};

/// Whitened innovations `z[0..=T]`, each of dimension `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationWindow {
    samples: Vec<DVector<f64>>,
    dim: usize,
}

impl InnovationWindow {
    pub fn new(samples: Vec<DVector<f64>>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::WindowTooShort(format!("{} samples, need at least 2", samples.len())));
        }
        let dim = samples[0].len();
        if dim == 0 {
            return Err(Error::DimensionMismatch("innovations must have positive dimension".into()));
        }
        if samples.iter().any(|z| z.len() != dim) {
            return Err(Error::DimensionMismatch("innovations have inconsistent dimensions".into()));
        }
        Ok(Self { samples, dim })
    }

    /// Window over the inclusive index range `[k0, k1]`.
    pub fn slice(&self, k0: usize, k1: usize) -> Result<Self> {
        if k1 >= self.samples.len() || k0 > k1 {
            return Err(Error::Domain(format!("window [{k0}, {k1}] outside 0..{}", self.samples.len())));
        }
        Self::new(self.samples[k0..=k1].to_vec())
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of samples `T + 1`.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        for z in &self.samples {
            acc += z;
        }
        acc / self.len() as f64
    }

    /// Copy with every sample multiplied by `gamma`.
    pub fn scaled(&self, gamma: f64) -> Self {
        Self { samples: self.samples.iter().map(|z| z * gamma).collect(), dim: self.dim }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasTest {
    pub t_mu: f64,
    pub p_mean: f64,
}

pub fn bias_test(window: &InnovationWindow) -> BiasTest {
    let mean = window.mean();
    let t_mu = window.len() as f64 * mean.norm_squared();
    let p_mean = chi2_sf(t_mu, window.dim() as f64).expect("valid chi-square arguments").value();
    BiasTest { t_mu, p_mean }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NisTest {
    pub q_nis: f64,
    pub dof: f64,
    pub p_nis: f64,
}

/// Aggregate NIS `Σ‖z[k]‖²`.
pub fn nis_statistic(window: &InnovationWindow) -> f64 {
    window.samples().iter().map(|z| z.norm_squared()).sum()
}

pub fn nis_test(window: &InnovationWindow) -> NisTest {
    let q_nis = nis_statistic(window);
    let dof = (window.dim() * window.len()) as f64;
    let p_nis = chi2_sf(q_nis, dof).expect("valid chi-square arguments").value();
    NisTest { q_nis, dof, p_nis }
}

/// Largest admissible increase of the expected NIS before rejection at
/// level `alpha`: `χ²_ν(1−α) − ν` with `ν = m·(T+1)`.
pub fn excess_nis_budget(alpha: f64, m: usize, samples: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("significance level must lie in (0, 1), got {alpha}")));
    }
    let dof = (m * samples) as f64;
    Ok(chi2_quantile(1.0 - alpha, dof)? - dof)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MardiaTest {
    pub b2m: f64,
    pub z_kurt: f64,
    pub p_norm: f64,
    /// The sample covariance was singular and a ridge was added.
    pub regularized: bool,
}

pub fn mardia_kurtosis_test(window: &InnovationWindow) -> MardiaTest {
    let m = window.dim();
    let count = window.len() as f64;
    let mean = window.mean();
    let centered: Vec<DVector<f64>> = window.samples().iter().map(|z| z - &mean).collect();
    let mut cov = DMatrix::zeros(m, m);
    for c in &centered {
        cov += c * c.transpose();
    }
    cov /= count;

    let mut regularized = false;
    let chol = match cov.clone().cholesky() {
        Some(ch) if window.len() > m => ch,
        _ => {
            regularized = true;
            let trace = cov.trace();
            let ridge = if trace > 0.0 { 1e-8 * trace / m as f64 } else { 1e-8 };
            (cov + DMatrix::identity(m, m) * ridge)
                .cholesky()
                .expect("ridge-regularized covariance is positive definite")
        }
    };

    let b2m = centered
        .iter()
        .map(|c| {
            let w = chol.l().solve_lower_triangular(c).expect("positive diagonal");
            w.norm_squared().powi(2)
        })
        .sum::<f64>()
        / count;
    let mf = m as f64;
    let sigma = (8.0 * mf * (mf + 2.0) / count).sqrt();
    let z_kurt = (b2m - mf * (mf + 2.0)) / sigma;
    let p_norm = (2.0 * normal_sf(z_kurt.abs()).value()).min(1.0);
    MardiaTest { b2m, z_kurt, p_norm, regularized }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortmanteauTest {
    pub w_l: f64,
    pub dof: f64,
    pub p_white: f64,
}

/// Centered sample autocovariance at lag `tau` with `1/(T+1)` normalization.
pub fn sample_autocovariance(window: &InnovationWindow, tau: usize) -> DMatrix<f64> {
    let m = window.dim();
    let mean = window.mean();
    let z = window.samples();
    let mut acc = DMatrix::zeros(m, m);
    for k in tau..z.len() {
        acc += (&z[k] - &mean) * (&z[k - tau] - &mean).transpose();
    }
    acc / z.len() as f64
}

/// Multivariate portmanteau statistic
/// `W_L = (T+1)(T+3) Σ_{τ=1}^{L} tr(R̂(τ)ᵀR̂(τ)) / (T+1−τ)`.
pub fn portmanteau_statistic(window: &InnovationWindow, lags: usize) -> f64 {
    let n = window.len() as f64;
    (1..=lags.min(window.len() - 1))
        .map(|tau| sample_autocovariance(window, tau).norm_squared() / (n - tau as f64))
        .sum::<f64>()
        * n
        * (n + 2.0)
}

pub fn portmanteau_test(window: &InnovationWindow, lags: usize) -> Result<PortmanteauTest> {
    if lags == 0 {
        return Err(Error::Domain("portmanteau test needs at least one lag".into()));
    }
    if 3 * lags > window.len() {
        return Err(Error::WindowTooShort(format!(
            "{} lags need at least {} samples, window has {}",
            lags,
            3 * lags,
            window.len()
        )));
    }
    let w_l = portmanteau_statistic(window, lags);
    let m = window.dim();
    let dof = (m * m * lags) as f64;
    let p_white = chi2_sf(w_l, dof)?.value();
    Ok(PortmanteauTest { w_l, dof, p_white })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherFusion {
    pub statistic: f64,
    pub p_fused: f64,
    /// Some input p-value was zero and was clamped to `1e-300`.
    pub clamped: bool,
}

pub const FISHER_P_FLOOR: f64 = 1e-300;

pub fn fisher_fuse(p_values: &[f64]) -> Result<FisherFusion> {
    if p_values.is_empty() {
        return Err(Error::Domain("Fisher fusion needs at least one p-value".into()));
    }
    let mut clamped = false;
    let mut statistic = 0.0;
    for &p in p_values {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
        }
        let p = if p < FISHER_P_FLOOR {
            clamped = true;
            FISHER_P_FLOOR
        } else {
            p
        };
        statistic -= 2.0 * p.ln();
    }
    let dof = 2.0 * p_values.len() as f64;
    let p_fused = chi2_sf(statistic, dof)?.value();
    Ok(FisherFusion { statistic, p_fused, clamped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectFlags {
    pub mean: bool,
    pub nis: bool,
    pub gaussianity: bool,
    pub whiteness: bool,
    pub fused: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdsReport {
    pub alpha: f64,
    pub lags: usize,
    pub samples: usize,
    pub bias: BiasTest,
    pub nis: NisTest,
    pub mardia: MardiaTest,
    pub whiteness: PortmanteauTest,
    pub fused: FisherFusion,
    pub reject: RejectFlags,
}

impl SdsReport {
    /// `[p_mean, p_nis, p_norm, p_white]`.
    pub fn p_values(&self) -> [f64; 4] {
        [self.bias.p_mean, self.nis.p_nis, self.mardia.p_norm, self.whiteness.p_white]
    }

    pub fn min_p(&self) -> f64 {
        self.p_values().into_iter().fold(1.0, f64::min)
    }

    /// No individual test rejects.
    pub fn all_accept(&self) -> bool {
        !(self.reject.mean || self.reject.nis || self.reject.gaussianity || self.reject.whiteness)
    }
}

pub fn run_suite(window: &InnovationWindow, alpha: f64, lags: usize) -> Result<SdsReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("significance level must lie in (0, 1), got {alpha}")));
    }
    let bias = bias_test(window);
    let nis = nis_test(window);
    let mardia = mardia_kurtosis_test(window);
    let whiteness = portmanteau_test(window, lags)?;
    let fused = fisher_fuse(&[bias.p_mean, nis.p_nis, mardia.p_norm, whiteness.p_white])?;
    let reject = RejectFlags {
        mean: bias.p_mean < alpha,
        nis: nis.p_nis < alpha,
        gaussianity: mardia.p_norm < alpha,
        whiteness: whiteness.p_white < alpha,
        fused: fused.p_fused < alpha,
    };
    Ok(SdsReport { alpha, lags, samples: window.len(), bias, nis, mardia, whiteness, fused, reject })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn window_from(rows: &[[f64; 2]]) -> InnovationWindow {
        InnovationWindow::new(rows.iter().map(|r| DVector::from_row_slice(r)).collect()).unwrap()
    }

    fn gaussian_window(rng: &mut RngStream, len: usize, m: usize) -> InnovationWindow {
        InnovationWindow::new((0..len).map(|_| rng.standard_normal_vec(m)).collect()).unwrap()
    }

    #[test]
    fn window_validation() {
        assert!(InnovationWindow::new(vec![DVector::zeros(2)]).is_err());
        assert!(InnovationWindow::new(vec![DVector::zeros(2), DVector::zeros(3)]).is_err());
        let w = window_from(&[[0.0; 2]; 10]);
        assert_eq!(w.slice(2, 5).unwrap().len(), 4);
        assert!(w.slice(5, 10).is_err());
    }

    #[test]
    fn bias_examples() {
        let zero = window_from(&[[0.0; 2]; 5]);
        let b = bias_test(&zero);
        assert_eq!(b.t_mu, 0.0);
        assert_eq!(b.p_mean, 1.0);

        // two identical samples (1,1): mean (1,1), T_mu = 2·2 = 4, p = e^{-2}
        let w = window_from(&[[1.0, 1.0], [1.0, 1.0]]);
        let b = bias_test(&w);
        assert!((b.t_mu - 4.0).abs() < 1e-15);
        assert!((b.p_mean - (-2.0f64).exp()).abs() < 1e-12);

        // mean (1, 0): T_mu = 2, p = e^{-1} on 2 dof
        let w = window_from(&[[1.0, 1.0], [1.0, -1.0]]);
        let b = bias_test(&w);
        assert!((b.t_mu - 2.0).abs() < 1e-15);
        assert!((b.p_mean - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn nis_examples() {
        let zero = window_from(&[[0.0; 2]; 31]);
        let n = nis_test(&zero);
        assert_eq!(n.q_nis, 0.0);
        assert_eq!(n.p_nis, 1.0);
        // Q = 81.38 on 62 dof sits at the 5% point
        let p = chi2_sf(81.38, 62.0).unwrap().value();
        assert!((p - 0.050007852646710274).abs() < 1e-10);
    }

    #[test]
    fn excess_budget_examples() {
        let eps = excess_nis_budget(0.05, 2, 31).unwrap();
        assert!((eps - 19.3810151888991).abs() < 1e-8);
        let median_gap = excess_nis_budget(0.5, 2, 5000).unwrap();
        assert!(median_gap.abs() < 1.0);
        assert!(excess_nis_budget(0.01, 2, 31).unwrap() > eps);
        assert!(excess_nis_budget(0.0, 2, 31).is_err());
    }

    #[test]
    fn mardia_examples() {
        let mut rng = RngStream::new(8);
        let w = gaussian_window(&mut rng, 10_000, 2);
        let t = mardia_kurtosis_test(&w);
        let sigma = (8.0 * 2.0 * 4.0 / 10_000.0f64).sqrt();
        assert!((t.b2m - 8.0).abs() < 3.0 * sigma, "b2m {}", t.b2m);
        assert!(!t.regularized);

        let zero = window_from(&[[0.0; 2]; 6]);
        let t = mardia_kurtosis_test(&zero);
        assert!(t.regularized);
        assert_eq!(t.b2m, 0.0);
        assert!((2.0 * normal_sf(0.0).value() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mardia_detects_heavy_tails() {
        // Student-t with 3 dof via z / sqrt(χ²_3 / 3)
        let mut hits = 0;
        let seeds = 40;
        for seed in 0..seeds {
            let mut rng = RngStream::new(1000 + seed);
            let samples = (0..1000)
                .map(|_| {
                    let chi: f64 = (0..3).map(|_| rng.standard_normal().powi(2)).sum();
                    rng.standard_normal_vec(2) / (chi / 3.0).sqrt()
                })
                .collect();
            let t = mardia_kurtosis_test(&InnovationWindow::new(samples).unwrap());
            if t.p_norm < 0.05 {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * seeds as f64, "{hits}/{seeds}");
    }

    #[test]
    fn portmanteau_examples() {
        let zero = window_from(&[[0.0; 2]; 31]);
        let t = portmanteau_test(&zero, 10).unwrap();
        assert_eq!(t.w_l, 0.0);
        assert_eq!(t.p_white, 1.0);
        assert_eq!(t.dof, 40.0);
        assert!(matches!(portmanteau_test(&zero, 11), Err(Error::WindowTooShort(_))));
        assert!(portmanteau_test(&zero, 0).is_err());
    }

    #[test]
    fn portmanteau_by_hand() {
        // m = 1 analogue on z = (1, -1, 1, -1, 1, -1), lag 1
        let samples: Vec<_> = (0..6).map(|k| DVector::from_element(1, if k % 2 == 0 { 1.0 } else { -1.0 })).collect();
        let w = InnovationWindow::new(samples).unwrap();
        let r1 = sample_autocovariance(&w, 1)[(0, 0)];
        assert!((r1 + 5.0 / 6.0).abs() < 1e-15);
        let expected = 6.0 * 8.0 * r1 * r1 / 5.0;
        assert!((portmanteau_statistic(&w, 1) - expected).abs() < 1e-12);
    }

    #[test]
    fn ar1_colored_window_is_not_white() {
        let mut rejections = 0;
        let seeds = 50;
        for seed in 0..seeds {
            let mut rng = RngStream::new(500 + seed);
            let mut state = DVector::zeros(2);
            let samples = (0..301)
                .map(|_| {
                    state = &state * 0.98 + rng.standard_normal_vec(2) * (1.0 - 0.98f64 * 0.98).sqrt();
                    state.clone()
                })
                .collect();
            let t = portmanteau_test(&InnovationWindow::new(samples).unwrap(), 10).unwrap();
            if t.p_white < 0.05 {
                rejections += 1;
            }
        }
        assert!(rejections as f64 >= 0.9 * seeds as f64);
    }

    #[test]
    fn fisher_examples() {
        let f = fisher_fuse(&[1.0; 4]).unwrap();
        assert_eq!(f.statistic, 0.0);
        assert_eq!(f.p_fused, 1.0);
        let f = fisher_fuse(&[0.5; 4]).unwrap();
        assert!((f.statistic - 5.545177444479562).abs() < 1e-12);
        assert!((f.p_fused - 0.6980297367583733).abs() < 1e-10);
        let f = fisher_fuse(&[0.0, 0.9, 0.9, 0.9]).unwrap();
        assert!(f.clamped);
        assert!(f.p_fused < 1e-290);
        let tiny = fisher_fuse(&[1e-12, 0.9, 0.9, 0.9]).unwrap();
        assert!(tiny.p_fused < fisher_fuse(&[1e-6, 0.9, 0.9, 0.9]).unwrap().p_fused);
    }

    #[test]
    fn suite_is_deterministic_and_flags_follow_alpha() {
        let mut rng = RngStream::new(3);
        let w = gaussian_window(&mut rng, 301, 2);
        let a = run_suite(&w, 0.05, 10).unwrap();
        let b = run_suite(&w, 0.05, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.reject.nis, a.nis.p_nis < 0.05);
        assert!(a.p_values().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn scaling_laws_are_exact_for_centered_windows() {
        let mut rng = RngStream::new(21);
        let raw = gaussian_window(&mut rng, 120, 2);
        let mean = raw.mean();
        let centered = InnovationWindow::new(raw.samples().iter().map(|z| z - &mean).collect()).unwrap();
        for &gamma in &[0.181, 0.5, 3.0] {
            let scaled = centered.scaled(gamma);
            let q_ratio = nis_statistic(&scaled) / nis_statistic(&centered);
            let w_ratio = portmanteau_statistic(&scaled, 10) / portmanteau_statistic(&centered, 10);
            assert!((q_ratio / gamma.powi(2) - 1.0).abs() < 1e-12);
            assert!((w_ratio / gamma.powi(4) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_and_nis_are_rotation_invariant() {
        let mut rng = RngStream::new(77);
        let w = gaussian_window(&mut rng, 50, 2);
        let angle: f64 = 0.7;
        let rot = DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()]);
        let rotated = InnovationWindow::new(w.samples().iter().map(|z| &rot * z).collect()).unwrap();
        assert!((bias_test(&w).t_mu - bias_test(&rotated).t_mu).abs() < 1e-9);
        assert!((nis_statistic(&w) - nis_statistic(&rotated)).abs() < 1e-9);
    }
}
