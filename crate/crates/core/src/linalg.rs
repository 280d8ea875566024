//! Dense linear-algebra helpers shared by the filter, channel and attack code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    symmetrize(&mut s);
    s
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigen-decomposition of the symmetric part, eigenvalues sorted ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrized(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(m);
    vals.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(m);
    vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Reassembles `V diag(values) Vᵀ`.
pub fn from_eigen(values: &DVector<f64>, vectors: &DMatrix<f64>) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, &v) in values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(v);
    }
    let mut out = scaled * vectors.transpose();
    symmetrize(&mut out);
    out
}

/// Lower-triangular factor of a symmetric PSD matrix.
///
/// Pivots at or below `1e-14 · max diag` are treated as zero and their
/// column is dropped, so rank-deficient covariances (velocity-only process
/// noise, a zero matrix) factor exactly without leaking jitter into
/// zero-variance channels.
pub fn psd_cholesky(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-14 * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol {
            continue;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / pivot;
        }
    }
    l
}

/// Zeroes the negative part of the spectrum of the symmetric part of `m`.
pub fn psd_clip(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (mut vals, vecs) = sym_eigen(m);
    if vals.iter().all(|&v| v >= 0.0) {
        return symmetrized(m);
    }
    vals.iter_mut().for_each(|v| *v = v.max(0.0));
    from_eigen(&vals, &vecs)
}

/// Euclidean projection of eigenvalues onto `{λ ≥ 0, Σλ ≤ budget}`.
pub fn project_capped_simplex(values: &mut [f64], budget: f64) {
    for v in values.iter_mut() {
        *v = v.max(0.0);
    }
    let total: f64 = values.iter().sum();
    if total <= budget {
        return;
    }
    // find θ with Σ max(λ−θ, 0) = budget
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let t = (cumsum - budget) / (i + 1) as f64;
        if i + 1 == sorted.len() || sorted[i + 1] <= t {
            theta = t;
            break;
        }
    }
    for v in values.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
}

/// Projection onto `{Σ ⪰ 0, tr Σ ≤ budget}` in the Frobenius metric.
pub fn project_psd_trace(m: &DMatrix<f64>, budget: f64) -> DMatrix<f64> {
    let (mut vals, vecs) = sym_eigen(m);
    project_capped_simplex(vals.as_mut_slice(), budget);
    from_eigen(&vals, &vecs)
}

/// Nuclear norm of the symmetric part (sum of absolute eigenvalues).
pub fn nuclear_norm_sym(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(m);
    vals.iter().map(|v| v.abs()).sum()
}

/// Spectral norm by power iteration on `mᵀm`, stopped when successive
/// estimates agree to `rel_tol`.
pub fn spectral_norm(m: &DMatrix<f64>, rel_tol: f64) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let gram = m.transpose() * m;
    // deterministic, non-degenerate start
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919) % 97) as f64 / 97.0);
    v.normalize_mut();
    let mut estimate = 0.0;
    for _ in 0..100_000 {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let rayleigh = v.dot(&w);
        v = w / norm;
        if (rayleigh - estimate).abs() <= rel_tol * rayleigh.abs() {
            estimate = rayleigh;
            break;
        }
        estimate = rayleigh;
    }
    estimate.max(0.0).sqrt()
}

/// Orthonormal basis (as columns) of `ker(g)`; singular values below
/// `rel_tol · σ_max` count as zero.
pub fn kernel_basis(g: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (rows, cols) = g.shape();
    if cols == 0 {
        return DMatrix::zeros(0, 0);
    }
    // pad to square so the SVD returns a full set of right singular vectors
    let size = rows.max(cols);
    let mut padded = DMatrix::zeros(size, cols);
    padded.view_mut((0, 0), (rows, cols)).copy_from(g);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = rel_tol * sigma_max;
    let null_rows: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| sigma_max == 0.0 || svd.singular_values[i] < cutoff)
        .collect();
    DMatrix::from_fn(cols, null_rows.len(), |r, c| v_t[(null_rows[c], r)])
}

/// Frobenius inner product `⟨a, b⟩ = tr(aᵀb)`.
pub fn frob_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn psd_cholesky_rank_deficient_is_exact() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 1e-4, 1e-4]));
        let l = psd_cholesky(&q);
        assert_relative_eq!(&l * l.transpose(), q, epsilon = 1e-18);
        assert_eq!(l[(0, 0)], 0.0);
    }

    #[test]
    fn psd_cholesky_matches_full_rank() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0]);
        let l = psd_cholesky(&m);
        let reference = m.clone().cholesky().unwrap().l();
        assert_relative_eq!(l, reference, epsilon = 1e-12);
    }

    #[test]
    fn clip_examples() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let c = psd_clip(&m);
        assert_relative_eq!(c, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])), epsilon = 1e-12);
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert_relative_eq!(psd_clip(&p), p, epsilon = 1e-12);
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 2.0, -1.0, 0.5, 0.0, 0.5, 0.2]);
        let once = psd_clip(&x);
        assert_relative_eq!(psd_clip(&once), once, epsilon = 1e-12);
    }

    #[test]
    fn capped_simplex_projection() {
        let mut v = vec![3.0, 1.0, -2.0];
        project_capped_simplex(&mut v, 2.0);
        assert_relative_eq!(v[0], 2.0, epsilon = 1e-12);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        let mut w = vec![1.0, 1.0, 1.0];
        project_capped_simplex(&mut w, 1.5);
        assert!(w.iter().all(|&x| (x - 0.5).abs() < 1e-12));
        let mut inside = vec![0.2, 0.3];
        project_capped_simplex(&mut inside, 1.0);
        assert_eq!(inside, vec![0.2, 0.3]);
    }

    #[test]
    fn spectral_norm_matches_eigen() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0]);
        assert_relative_eq!(spectral_norm(&m, 1e-13), max_eigenvalue(&m), epsilon = 1e-6);
    }

    #[test]
    fn kernel_of_wide_matrix() {
        let g = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let k = kernel_basis(&g, 1e-9);
        assert_eq!(k.ncols(), 2);
        assert!((&g * &k).norm() < 1e-12);
        assert_relative_eq!(k.transpose() * &k, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn kernel_of_tall_matrix() {
        let g = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 0.0, 0.0]);
        let k = kernel_basis(&g, 1e-9);
        assert_eq!(k.ncols(), 1);
        assert!((&g * &k).norm() < 1e-12);
    }

    #[test]
    fn nuclear_norm_of_indefinite() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -3.0, 0.5]));
        assert_relative_eq!(nuclear_norm_sym(&m), 5.5, epsilon = 1e-12);
    }
}
