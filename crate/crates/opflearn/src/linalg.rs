//! Thin safe wrappers over the LAPACK routines the crate needs: symmetric
//! eigensolves for PCA, Cholesky solves for ridge systems and LU solves for
//! Newton steps. Dense storage throughout; cases stay desk-scale.

use ndarray::{Array1, Array2};
use std::sync::Once;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (dpotrf info={0})")]
    NotPositiveDefinite(i32),
    #[error("singular system (info={0})")]
    Singular(i32),
    #[error("LAPACK error (info={0})")]
    Lapack(i32),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

static BLAS_INIT: Once = Once::new();

/// Pin the BLAS runtime before the first call: one thread (we control
/// parallelism above BLAS and need bit-reproducible runs) and, when the
/// hypervisor masks the CPU model so OpenBLAS falls back to generic
/// kernels, an explicit core type matching the actual ISA.
pub fn init_blas_runtime() {
    BLAS_INIT.call_once(|| {
        if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
            std::env::set_var("OPENBLAS_NUM_THREADS", "1");
        }
        if std::env::var_os("OPENBLAS_CORETYPE").is_none() {
            if is_x86_feature_detected!("avx512f") {
                std::env::set_var("OPENBLAS_CORETYPE", "SKYLAKEX");
            } else if is_x86_feature_detected!("avx2") {
                std::env::set_var("OPENBLAS_CORETYPE", "HASWELL");
            }
        }
    });
}

fn to_col_major(a: &Array2<f64>) -> Vec<f64> {
    let (rows, cols) = a.dim();
    let mut v = Vec::with_capacity(rows * cols);
    for j in 0..cols {
        for i in 0..rows {
            v.push(a[[i, j]]);
        }
    }
    v
}

fn from_col_major(v: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| v[j * rows + i])
}

/// Top-`k` eigenpairs of a symmetric matrix, eigenvalues in descending
/// order, via `dsyevr` with an index range (cheap when `k << n`).
pub fn symmetric_top_eigs(a: &Array2<f64>, k: usize) -> Result<(Array1<f64>, Array2<f64>), LinalgError> {
    init_blas_runtime();
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::Dimension(format!("{}x{} not square", n, a.ncols())));
    }
    if k == 0 || k > n {
        return Err(LinalgError::Dimension(format!("k={} out of 1..={}", k, n)));
    }
    let ni = n as i32;
    let mut a_cm = to_col_major(a);
    let il = ni - k as i32 + 1;
    let iu = ni;
    let mut w = vec![0.0f64; n];
    let mut z = vec![0.0f64; n * k];
    let mut m = 0i32;
    let mut isuppz = vec![0i32; 2 * k.max(1)];
    let mut info = 0i32;
    let mut work = vec![0.0f64; 1];
    let mut iwork = vec![0i32; 1];
    unsafe {
        lapack::dsyevr(
            b'V', b'I', b'U', ni, &mut a_cm, ni, 0.0, 0.0, il, iu, 0.0, &mut m, &mut w, &mut z,
            ni, &mut isuppz, &mut work, -1, &mut iwork, -1, &mut info,
        );
        if info != 0 {
            return Err(LinalgError::Lapack(info));
        }
        let lwork = work[0] as usize;
        let liwork = iwork[0] as usize;
        work = vec![0.0f64; lwork];
        iwork = vec![0i32; liwork];
        lapack::dsyevr(
            b'V', b'I', b'U', ni, &mut a_cm, ni, 0.0, 0.0, il, iu, 0.0, &mut m, &mut w, &mut z,
            ni, &mut isuppz, &mut work, lwork as i32, &mut iwork, liwork as i32, &mut info,
        );
    }
    if info != 0 {
        return Err(LinalgError::Lapack(info));
    }
    // dsyevr returns the k smallest-index-from-IL eigenvalues ascending;
    // reverse to descending.
    let mut vals = Array1::zeros(k);
    let mut vecs = Array2::zeros((n, k));
    for j in 0..k {
        let src = k - 1 - j;
        vals[j] = w[src];
        for i in 0..n {
            vecs[[i, j]] = z[src * n + i];
        }
    }
    Ok((vals, vecs))
}

/// Solve `A X = B` for symmetric positive definite `A` by Cholesky (`dposv`).
pub fn cholesky_solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    init_blas_runtime();
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(LinalgError::Dimension(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let nrhs = b.ncols() as i32;
    let mut a_cm = to_col_major(a);
    let mut b_cm = to_col_major(b);
    let mut info = 0i32;
    unsafe {
        lapack::dposv(b'U', n as i32, nrhs, &mut a_cm, n as i32, &mut b_cm, n as i32, &mut info);
    }
    if info > 0 {
        return Err(LinalgError::NotPositiveDefinite(info));
    }
    if info < 0 {
        return Err(LinalgError::Lapack(info));
    }
    Ok(from_col_major(&b_cm, n, b.ncols()))
}

/// Solve `A x = b` for general square `A` by LU with partial pivoting (`dgesv`).
pub fn lu_solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>, LinalgError> {
    init_blas_runtime();
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(LinalgError::Dimension(format!(
            "A is {}x{}, b has {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let mut a_cm = to_col_major(a);
    let mut b_v = b.to_vec();
    let mut ipiv = vec![0i32; n];
    let mut info = 0i32;
    unsafe {
        lapack::dgesv(n as i32, 1, &mut a_cm, n as i32, &mut ipiv, &mut b_v, n as i32, &mut info);
    }
    if info > 0 {
        return Err(LinalgError::Singular(info));
    }
    if info < 0 {
        return Err(LinalgError::Lapack(info));
    }
    Ok(Array1::from(b_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn top_eigs_match_nalgebra_on_random_symmetric() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        let n = 30;
        let m = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let sym = &m + &m.t();
        let (vals, vecs) = symmetric_top_eigs(&sym, 5).unwrap();

        let na = nalgebra::DMatrix::from_fn(n, n, |i, j| sym[[i, j]]);
        let eig = na.symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for i in 0..5 {
            assert_abs_diff_eq!(vals[i], ev[i], epsilon = 1e-10);
        }
        // eigenvector property: A v = lambda v
        for j in 0..5 {
            for i in 0..n {
                let av: f64 = (0..n).map(|k| sym[[i, k]] * vecs[[k, j]]).sum();
                assert_abs_diff_eq!(av, vals[j] * vecs[[i, j]], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![[1.0], [2.0]];
        let x = cholesky_solve(&a, &b).unwrap();
        assert_abs_diff_eq!(4.0 * x[[0, 0]] + x[[1, 0]], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[[0, 0]] + 3.0 * x[[1, 0]], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        let b = array![[1.0], [1.0]];
        assert!(matches!(
            cholesky_solve(&a, &b),
            Err(LinalgError::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn lu_solve_roundtrip() {
        let a = array![[2.0, 1.0, 0.0], [1.0, -1.0, 3.0], [0.0, 2.0, -1.0]];
        let b = array![1.0, 0.0, 2.0];
        let x = lu_solve(&a, &b).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn lu_solve_detects_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        let b = array![1.0, 2.0];
        assert!(matches!(lu_solve(&a, &b), Err(LinalgError::Singular(_))));
    }
}
