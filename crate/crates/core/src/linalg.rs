//! Small dense helpers shared by the filter and the steady-state analysis.

use nalgebra::{DMatrix, DVector};

/// Replaces `p` by `(p + pᵀ) / 2` in place.
pub fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = avg;
            p[(j, i)] = avg;
        }
    }
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.amax().max(1.0);
    let n = a.nrows();
    (0..n).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol * scale))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = a.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Symmetric square root `V·sqrt(max(Λ, 0))` of a PSD matrix, so that
/// `S·Sᵀ = A` (negative round-off eigenvalues are clipped).
pub fn psd_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-stacking vectorization.
pub fn vec_of(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec_of`] for a square `n×n` matrix.
pub fn unvec(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, v.as_slice())
}

/// Block-diagonal matrix assembled from square or rectangular blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Spectral radius of a general square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Spectral radius of a positive linear map on square matrices (one that
/// sends PSD matrices to PSD matrices), found by restarted Arnoldi.
///
/// The Perron root of such a map is a real eigenvalue equal to the spectral
/// radius, so the largest real Ritz value is tracked and its Ritz vector
/// seeds the next restart. `max_restarts` bounds the number of cycles.
pub fn positive_map_spectral_radius<F>(dim: usize, map: F, tol: f64, max_restarts: usize) -> f64
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    const KRYLOV_DIM: usize = 40;
    let total = dim * dim;
    if total == 0 {
        return 0.0;
    }
    let m = KRYLOV_DIM.min(total);
    let mut start = vec_of(&DMatrix::identity(dim, dim));
    start /= start.norm();
    let mut theta = 0.0;
    for _ in 0..max_restarts.max(1) {
        let mut basis: Vec<DVector<f64>> = vec![start.clone()];
        let mut h = DMatrix::<f64>::zeros(m + 1, m);
        let mut size = m;
        for j in 0..m {
            let mut w = vec_of(&map(&unvec(&basis[j], dim)));
            let scale = w.norm();
            // Two passes of modified Gram-Schmidt.
            for _ in 0..2 {
                for (i, v) in basis.iter().enumerate() {
                    let c = v.dot(&w);
                    h[(i, j)] += c;
                    w.axpy(-c, v, 1.0);
                }
            }
            let beta = w.norm();
            h[(j + 1, j)] = beta;
            if beta <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
                size = j + 1;
                break;
            }
            basis.push(w / beta);
        }
        let hm = h.view((0, 0), (size, size)).into_owned();
        let eig = hm.complex_eigenvalues();
        theta = eig
            .iter()
            .filter(|z| z.im.abs() <= 1e-10 * z.norm().max(1e-300))
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max);
        if !theta.is_finite() {
            theta = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
        }
        if theta <= 0.0 {
            return 0.0;
        }
        let y = ritz_vector(&hm, theta);
        let residual = h[(size, size - 1)] * y[size - 1].abs();
        if size < m || residual <= tol * theta {
            break;
        }
        let mut next = DVector::zeros(total);
        for (v, c) in basis.iter().zip(y.iter()) {
            next.axpy(*c, v, 1.0);
        }
        let norm = next.norm();
        start = next / norm;
    }
    theta
}

/// Unit eigenvector of `h` for the real eigenvalue `theta`, by inverse
/// iteration with a slightly perturbed shift.
fn ritz_vector(h: &DMatrix<f64>, theta: f64) -> DVector<f64> {
    let n = h.nrows();
    let shift = theta * (1.0 + 1e-10) + 1e-300;
    let lu = (h - DMatrix::identity(n, n) * shift).lu();
    let mut y = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    for _ in 0..3 {
        match lu.solve(&y) {
            Some(z) if z.norm().is_finite() && z.norm() > 0.0 => y = &z / z.norm(),
            _ => break,
        }
    }
    y
}
