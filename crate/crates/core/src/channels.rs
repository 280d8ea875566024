//! Finite-horizon linear operators between stacked disturbances and the
//! quantities the detector and the attacker care about.
//!
//! Stacking convention: sample `k` of an `m`-dimensional sequence occupies
//! rows `m·k .. m·k + m`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::GainSchedule;
use crate::model::SystemModel;

/// Detection channel `G_T` (disturbance → whitened-innovation deviation) and
/// damage channel `H_T` (disturbance → plant-state deviation) over `T+1`
/// samples, with their Gram matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPair {
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q_g: DMatrix<f64>,
    pub q_h: DMatrix<f64>,
    /// Measurement dimension `m`.
    pub meas_dim: usize,
    /// Disturbance dimension `h`.
    pub dist_dim: usize,
    /// Number of samples `T + 1`.
    pub samples: usize,
}

/// Deviation of the whitened innovations and plant states caused by the
/// stacked disturbance `d`, with gains frozen to `schedule` and noise off.
fn propagate_deviation(
    model: &SystemModel,
    schedule: &GainSchedule,
    samples: usize,
    start: usize,
    disturbance: impl Fn(usize) -> Option<DVector<f64>>,
    mut sink: impl FnMut(usize, &DVector<f64>, &DVector<f64>),
) {
    let n = model.n();
    let mut dx = DVector::zeros(n);
    let mut dx_pred = DVector::zeros(n);
    for k in start..samples {
        let d = disturbance(k);
        let mut dy = &model.c * &dx;
        if let Some(d) = &d {
            dy += &model.f * d;
        }
        let de = dy - &model.c * &dx_pred;
        let dz = schedule.factors[k].solve_lower_triangular(&de).expect("positive diagonal");
        sink(k, &dz, &dx);
        let dx_post = &dx_pred + &schedule.gains[k] * &de;
        dx_pred = &model.a * dx_post;
        let mut next = &model.a * &dx;
        if let Some(d) = &d {
            next += &model.e * d;
        }
        dx = next;
    }
}

/// Builds `G_T` and `H_T` column by column from unit impulses.
///
/// With `F = 0` an impulse at `k` reaches the measurements from `k+1`, so
/// the diagonal blocks of `G_T` vanish; `H_T` is always strictly block lower
/// triangular.
pub fn build_channels(model: &SystemModel, schedule: &GainSchedule, samples: usize) -> Result<ChannelPair> {
    if schedule.len() < samples {
        return Err(Error::DimensionMismatch(format!(
            "gain schedule covers {} samples, horizon needs {samples}",
            schedule.len()
        )));
    }
    let (n, m, h) = (model.n(), model.m(), model.h());
    let mut g = DMatrix::zeros(m * samples, h * samples);
    let mut hm = DMatrix::zeros(n * samples, h * samples);
    for j in 0..samples {
        for c in 0..h {
            let col = h * j + c;
            let impulse = |k: usize| {
                (k == j).then(|| {
                    let mut v = DVector::zeros(h);
                    v[c] = 1.0;
                    v
                })
            };
            propagate_deviation(model, schedule, samples, j, impulse, |k, dz, dx| {
                g.view_mut((m * k, col), (m, 1)).copy_from(dz);
                hm.view_mut((n * k, col), (n, 1)).copy_from(dx);
            });
        }
    }
    let q_g = g.transpose() * &g;
    let q_h = hm.transpose() * &hm;
    Ok(ChannelPair { g, h: hm, q_g, q_h, meas_dim: m, dist_dim: h, samples })
}

/// Direct recursion for a whole disturbance sequence; returns the stacked
/// whitened-innovation and state deviations. Equivalent to `(G_T d, H_T d)`.
pub fn deviation_response(
    model: &SystemModel,
    schedule: &GainSchedule,
    d_seq: &[DVector<f64>],
) -> (DVector<f64>, DVector<f64>) {
    let samples = d_seq.len();
    let (n, m) = (model.n(), model.m());
    let mut dz_all = DVector::zeros(m * samples);
    let mut dx_all = DVector::zeros(n * samples);
    propagate_deviation(model, schedule, samples, 0, |k| Some(d_seq[k].clone()), |k, dz, dx| {
        dz_all.rows_mut(m * k, m).copy_from(dz);
        dx_all.rows_mut(n * k, n).copy_from(dx);
    });
    (dz_all, dx_all)
}

pub fn stack(seq: &[DVector<f64>]) -> DVector<f64> {
    let dim = seq.first().map_or(0, |v| v.len());
    DVector::from_iterator(dim * seq.len(), seq.iter().flat_map(|v| v.iter().copied()))
}

pub fn unstack(v: &DVector<f64>, dim: usize) -> Vec<DVector<f64>> {
    v.as_slice().chunks(dim).map(DVector::from_column_slice).collect()
}

/// FIR taps `M[0..=r]`, each `h × s`. Serialized as nested row arrays,
/// `[[[M0 row 0], [M0 row 1], ...], ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<Vec<f64>>>", into = "Vec<Vec<Vec<f64>>>")]
pub struct FirTaps {
    pub taps: Vec<DMatrix<f64>>,
}

impl FirTaps {
    pub fn new(taps: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = taps.first().ok_or_else(|| Error::Domain("FIR needs at least one tap".into()))?;
        let shape = first.shape();
        if taps.iter().any(|t| t.shape() != shape) {
            return Err(Error::DimensionMismatch("FIR taps must share one shape".into()));
        }
        if taps.iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::Domain("FIR taps must be finite".into()));
        }
        Ok(Self { taps })
    }

    pub fn zeros(order: usize, h: usize, s: usize) -> Self {
        Self { taps: vec![DMatrix::zeros(h, s); order + 1] }
    }

    pub fn order(&self) -> usize {
        self.taps.len() - 1
    }

    pub fn out_dim(&self) -> usize {
        self.taps[0].nrows()
    }

    pub fn seed_dim(&self) -> usize {
        self.taps[0].ncols()
    }

    pub fn scaled(&self, gamma: f64) -> Self {
        Self { taps: self.taps.iter().map(|t| t * gamma).collect() }
    }

    /// `‖T_M‖_F²` over `samples` without building the operator.
    pub fn operator_energy(&self, samples: usize) -> f64 {
        self.taps
            .iter()
            .enumerate()
            .filter(|(tau, _)| *tau < samples)
            .map(|(tau, m)| (samples - tau) as f64 * m.norm_squared())
            .sum()
    }

    /// `d[k] = Σ_τ M[τ] ξ[k−τ]` with `ξ[j] = 0` for `j < 0`.
    pub fn filter(&self, seed: &[DVector<f64>]) -> Vec<DVector<f64>> {
        (0..seed.len())
            .map(|k| {
                let mut d = DVector::zeros(self.out_dim());
                for (tau, m) in self.taps.iter().enumerate().take(k + 1) {
                    d += m * &seed[k - tau];
                }
                d
            })
            .collect()
    }
}

impl From<FirTaps> for Vec<Vec<Vec<f64>>> {
    fn from(f: FirTaps) -> Self {
        f.taps
            .iter()
            .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
            .collect()
    }
}

impl TryFrom<Vec<Vec<Vec<f64>>>> for FirTaps {
    type Error = Error;

    fn try_from(rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let taps = rows
            .into_iter()
            .map(|tap| {
                let ncols = tap.first().map_or(0, Vec::len);
                if tap.is_empty() || ncols == 0 || tap.iter().any(|r| r.len() != ncols) {
                    return Err(Error::DimensionMismatch("each tap must be a nonempty rectangular matrix".into()));
                }
                Ok(DMatrix::from_row_iterator(tap.len(), ncols, tap.into_iter().flatten()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(taps)
    }
}

/// Dense block-Toeplitz convolution matrix of a FIR filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToeplitzOperator {
    pub matrix: DMatrix<f64>,
    pub out_dim: usize,
    pub seed_dim: usize,
    pub samples: usize,
}

/// `(T_M)_{ij} = M[i−j]` for `0 ≤ i−j ≤ r`, zero otherwise.
pub fn toeplitz_from_taps(taps: &FirTaps, samples: usize) -> Result<ToeplitzOperator> {
    if samples == 0 || taps.order() >= samples {
        return Err(Error::OrderExceedsHorizon { order: taps.order(), horizon: samples.saturating_sub(1) });
    }
    let (h, s) = (taps.out_dim(), taps.seed_dim());
    let mut matrix = DMatrix::zeros(h * samples, s * samples);
    for i in 0..samples {
        for (tau, m) in taps.taps.iter().enumerate().take(i + 1) {
            let j = i - tau;
            matrix.view_mut((h * i, s * j), (h, s)).copy_from(m);
        }
    }
    Ok(ToeplitzOperator { matrix, out_dim: h, seed_dim: s, samples })
}

/// Result of reading taps back out of a (possibly non-Toeplitz) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TapExtraction {
    pub taps: FirTaps,
    /// The input was not exactly banded block-Toeplitz and was projected.
    pub projected: bool,
}

/// Least-squares projection onto order-`order` block-Toeplitz operators:
/// each tap is the average of the blocks on its block diagonal.
pub fn taps_from_toeplitz(
    matrix: &DMatrix<f64>,
    out_dim: usize,
    seed_dim: usize,
    order: usize,
) -> Result<TapExtraction> {
    if out_dim == 0 || seed_dim == 0 || matrix.nrows() % out_dim != 0 || matrix.ncols() % seed_dim != 0 {
        return Err(Error::DimensionMismatch("matrix is not tiled by the block shape".into()));
    }
    let samples = matrix.nrows() / out_dim;
    if matrix.ncols() / seed_dim != samples {
        return Err(Error::DimensionMismatch("operator must have as many block rows as block columns".into()));
    }
    if order >= samples {
        return Err(Error::OrderExceedsHorizon { order, horizon: samples - 1 });
    }
    let block = |i: usize, j: usize| matrix.view((out_dim * i, seed_dim * j), (out_dim, seed_dim));
    let taps: Vec<DMatrix<f64>> = (0..=order)
        .map(|tau| {
            let mut acc = DMatrix::zeros(out_dim, seed_dim);
            for i in tau..samples {
                acc += block(i, i - tau);
            }
            acc / (samples - tau) as f64
        })
        .collect();
    let scale = matrix.amax().max(1.0);
    let mut projected = false;
    'outer: for i in 0..samples {
        for j in 0..samples {
            let expected = if i >= j && i - j <= order { Some(&taps[i - j]) } else { None };
            let dev = match expected {
                Some(t) => (block(i, j) - t).amax(),
                None => block(i, j).amax(),
            };
            if dev > 1e-9 * scale {
                projected = true;
                break 'outer;
            }
        }
    }
    Ok(TapExtraction { taps: FirTaps { taps }, projected })
}

/// Model-implied lag-`tau` autocovariance of a stacked covariance:
/// `(1/(T+1)) Σ_{k=τ}^{T} Σ[k, k−τ]` over `m × m` blocks.
pub fn lag_extract(sigma: &DMatrix<f64>, m: usize, tau: usize) -> Result<DMatrix<f64>> {
    if m == 0 || sigma.nrows() % m != 0 || !sigma.is_square() {
        return Err(Error::DimensionMismatch("covariance is not tiled by m × m blocks".into()));
    }
    let samples = sigma.nrows() / m;
    if tau == 0 || tau >= samples {
        return Err(Error::Domain(format!("lag {tau} outside 1..={}", samples - 1)));
    }
    Ok(lag_extract_unchecked(sigma, m, samples, tau))
}

fn lag_extract_unchecked(sigma: &DMatrix<f64>, m: usize, samples: usize, tau: usize) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(m, m);
    for k in tau..samples {
        acc += sigma.view((m * k, m * (k - tau)), (m, m));
    }
    acc / samples as f64
}

/// Portmanteau weight `w_τ = (T+1)(T+3)/((T+1) − τ)`.
pub fn whiteness_weight(samples: usize, tau: usize) -> f64 {
    let n = samples as f64;
    n * (n + 2.0) / (n - tau as f64)
}

/// `Σ_{τ=1}^{L} w_τ ‖L_τ(Σ)‖_F²`; lags at or beyond the horizon contribute nothing.
pub fn whiteness_functional(sigma_dz: &DMatrix<f64>, m: usize, lags: usize) -> Result<f64> {
    if m == 0 || sigma_dz.nrows() % m != 0 || !sigma_dz.is_square() {
        return Err(Error::DimensionMismatch("covariance is not tiled by m × m blocks".into()));
    }
    let samples = sigma_dz.nrows() / m;
    Ok((1..=lags.min(samples.saturating_sub(1)))
        .map(|tau| whiteness_weight(samples, tau) * lag_extract_unchecked(sigma_dz, m, samples, tau).norm_squared())
        .sum())
}

/// Gradient of [`whiteness_functional`] with respect to `Σ_Δz` (not
/// symmetrized): `Σ_τ 2 w_τ L_τ*(L_τ(Σ_Δz))`.
pub fn whiteness_functional_gradient(sigma_dz: &DMatrix<f64>, m: usize, lags: usize) -> DMatrix<f64> {
    let samples = sigma_dz.nrows() / m;
    let mut grad = DMatrix::zeros(sigma_dz.nrows(), sigma_dz.ncols());
    for tau in 1..=lags.min(samples.saturating_sub(1)) {
        let lag = lag_extract_unchecked(sigma_dz, m, samples, tau);
        let coeff = 2.0 * whiteness_weight(samples, tau) / samples as f64;
        let block = lag * coeff;
        for k in tau..samples {
            let mut view = grad.view_mut((m * k, m * (k - tau)), (m, m));
            view += &block;
        }
    }
    grad
}
