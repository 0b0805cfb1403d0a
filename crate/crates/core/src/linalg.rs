//! Dense kernels sized for this workbench: cyclic-Jacobi symmetric
//! eigendecomposition (n ≤ 2048), top-K right singular vectors of short-fat
//! row matrices via the Gram trick (n up to the 131072-dim attention slice),
//! energy-threshold effective rank, and random orthonormal frames.

use ndarray::{Array1, Array2};

use crate::rng::RngStream;

#[derive(Debug, thiserror::Error)]
pub enum LinalgError {
    #[error("matrix is not symmetric (max asymmetry {max_asym:e} exceeds tolerance)")]
    NonSymmetric { max_asym: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is zero; no singular directions exist")]
    ZeroMatrix,
    #[error("requested k={k} exceeds limit {limit}")]
    KTooLarge { k: usize, limit: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("spectrum is identically zero")]
    ZeroSpectrum,
    #[error("fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("singular values must be non-negative and descending")]
    BadSpectrum,
    #[error("jacobi sweep limit reached before convergence")]
    NoConvergence,
    #[error("matrix has no rows")]
    Empty,
}

/// Dot product with four independent accumulators; the fixed summation order
/// keeps results bit-reproducible regardless of call site.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y += alpha * x
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of the second output. Convergence: off-diagonal Frobenius norm
/// below `1e-12 * ||A||_F`, at most 100 sweeps.
pub fn sym_eigh(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>), LinalgError> {
    let (rows, cols) = a.dim();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    let n = rows;
    if n == 0 {
        return Err(LinalgError::Empty);
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    if scale > 0.0 && max_asym > 1e-10 * scale {
        return Err(LinalgError::NonSymmetric { max_asym });
    }

    // Work on the symmetrized copy; asymmetry within tolerance is noise.
    let mut m = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let fro = frobenius(a);
    let tol = 1e-12 * fro;
    let mut converged = fro == 0.0;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // tan of the rotation angle, smaller root for stability
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        // One final check: the sweep loop may have converged on its last pass.
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if (2.0 * off).sqrt() > tol {
            return Err(LinalgError::NoConvergence);
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            vectors[[row, new_col]] = v[row * n + old_col];
        }
    }
    Ok((eigenvalues, vectors))
}

/// Top-k right singular vectors of a row-stacked matrix.
pub struct TopKResult {
    /// `k_eff x n`; each row is one unit direction, ordered by singular value.
    pub directions: Array2<f64>,
    /// Descending, length `k_eff`.
    pub singular_values: Vec<f64>,
    /// True when the matrix rank was below the requested k and fewer
    /// directions were returned.
    pub rank_deficient: bool,
}

/// Top-k right singular vectors via eigendecomposition of the m×m Gram
/// matrix, so the column count n may be large (the attention slice has
/// n = 131072). Rows are borrowed slices to avoid stacking copies.
pub fn topk_right_singular_rows(
    rows: &[&[f64]],
    k: usize,
) -> Result<TopKResult, LinalgError> {
    let m = rows.len();
    if m == 0 {
        return Err(LinalgError::Empty);
    }
    let n = rows[0].len();
    for r in rows {
        if r.len() != n {
            return Err(LinalgError::DimensionMismatch {
                expected: n,
                got: r.len(),
            });
        }
    }
    if k == 0 || k > m.min(n) {
        return Err(LinalgError::KTooLarge { k, limit: m.min(n) });
    }

    let mut gram = Array2::zeros((m, m));
    for i in 0..m {
        for j in i..m {
            let g = dot(rows[i], rows[j]);
            if !g.is_finite() {
                return Err(LinalgError::NonFinite);
            }
            gram[[i, j]] = g;
            gram[[j, i]] = g;
        }
    }
    let total: f64 = (0..m).map(|i| gram[[i, i]]).sum();
    if total == 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }

    let (evals, evecs) = sym_eigh(&gram)?;
    // Numerical rank cutoff relative to the top eigenvalue.
    let cutoff = evals[0].max(0.0) * 1e-12;
    let rank = evals.iter().take_while(|&&l| l > cutoff).count();
    let k_eff = k.min(rank);
    if k_eff == 0 {
        return Err(LinalgError::ZeroMatrix);
    }

    let mut directions = Array2::zeros((k_eff, n));
    let mut singular_values = Vec::with_capacity(k_eff);
    for i in 0..k_eff {
        let sigma = evals[i].max(0.0).sqrt();
        singular_values.push(sigma);
        let mut dir = vec![0.0f64; n];
        for (r, row) in rows.iter().enumerate() {
            let w = evecs[[r, i]] / sigma;
            if w != 0.0 {
                axpy(&mut dir, w, row);
            }
        }
        // Re-orthonormalize against earlier directions; the correction is at
        // rounding level except for near-degenerate singular values.
        for prev in 0..i {
            let prev_row = directions.row(prev);
            let proj = dot(dir.as_slice(), prev_row.as_slice().unwrap());
            let prev_slice = prev_row.as_slice().unwrap().to_vec();
            axpy(&mut dir, -proj, &prev_slice);
        }
        let nrm = norm(&dir);
        if nrm == 0.0 {
            return Err(LinalgError::ZeroMatrix);
        }
        for x in dir.iter_mut() {
            *x /= nrm;
        }
        directions.row_mut(i).assign(&Array1::from_vec(dir));
    }

    Ok(TopKResult {
        directions,
        singular_values,
        rank_deficient: k_eff < k,
    })
}

/// Convenience wrapper over a dense row matrix.
pub fn topk_right_singular(mat: &Array2<f64>, k: usize) -> Result<TopKResult, LinalgError> {
    let rows: Vec<&[f64]> = mat
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("row-major matrix"))
        .collect();
    // Hold row views alive for the call.
    let refs: Vec<&[f64]> = rows.to_vec();
    topk_right_singular_rows(&refs, k)
}

/// All singular values of a row matrix (descending), via the Gram matrix on
/// the smaller side.
pub fn singular_values(mat: &Array2<f64>) -> Result<Vec<f64>, LinalgError> {
    let (m, n) = mat.dim();
    if m == 0 || n == 0 {
        return Err(LinalgError::Empty);
    }
    let gram = if m <= n {
        mat.dot(&mat.t())
    } else {
        mat.t().dot(mat)
    };
    let (evals, _) = sym_eigh(&gram)?;
    Ok(evals.into_iter().map(|l| l.max(0.0).sqrt()).collect())
}

/// Smallest r such that the top-r squared singular values reach `fraction`
/// of the total squared mass (energy / variance-captured convention).
pub fn rank_at_energy(singular_values: &[f64], fraction: f64) -> Result<usize, LinalgError> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(LinalgError::BadFraction(fraction));
    }
    if singular_values.is_empty() {
        return Err(LinalgError::ZeroSpectrum);
    }
    let mut prev = f64::INFINITY;
    for &s in singular_values {
        if s < 0.0 || s > prev + 1e-9 * prev.abs().max(1.0) {
            return Err(LinalgError::BadSpectrum);
        }
        prev = s;
    }
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(LinalgError::ZeroSpectrum);
    }
    let target = fraction * total;
    let mut acc = 0.0;
    for (i, &s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc >= target {
            return Ok(i + 1);
        }
    }
    Ok(singular_values.len())
}

/// k orthonormal rows of dimension `dim`, Gaussian-then-Gram-Schmidt, so the
/// span is rotation invariant.
pub fn random_orthonormal(
    dim: usize,
    k: usize,
    rng: &mut RngStream,
) -> Result<Array2<f64>, LinalgError> {
    if k > dim {
        return Err(LinalgError::KTooLarge { k, limit: dim });
    }
    let mut frame = Array2::zeros((k, dim));
    let mut row = vec![0.0f64; dim];
    for i in 0..k {
        loop {
            rng.fill_normal(&mut row);
            for prev in 0..i {
                let prev_slice = frame.row(prev).to_owned();
                let proj = dot(&row, prev_slice.as_slice().unwrap());
                axpy(&mut row, -proj, prev_slice.as_slice().unwrap());
            }
            let nrm = norm(&row);
            if nrm > 1e-8 {
                for x in row.iter_mut() {
                    *x /= nrm;
                }
                frame.row_mut(i).assign(&Array1::from_vec(row.clone()));
                break;
            }
            // Degenerate draw; redraw (probability ~0 at these dimensions).
        }
    }
    Ok(frame)
}

/// One Gaussian direction normalized to unit length (not orthogonalized
/// against anything); used for the random sensitivity baselines.
pub fn random_unit_vector(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut v = vec![0.0f64; dim];
    loop {
        rng.fill_normal(&mut v);
        let nrm = norm(&v);
        if nrm > 1e-8 {
            for x in v.iter_mut() {
                *x /= nrm;
            }
            return v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_symmetric(n: usize, rng: &mut RngStream) -> Array2<f64> {
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let x = rng.normal_f64();
                a[[i, j]] = x;
                a[[j, i]] = x;
            }
        }
        a
    }

    #[test]
    fn eigh_identity() {
        let a = Array2::eye(2);
        let (vals, _) = sym_eigh(&a).unwrap();
        assert_eq!(vals, vec![1.0, 1.0]);
    }

    #[test]
    fn eigh_diagonal_is_axis_aligned() {
        let a = array![[3.0, 0.0], [0.0, 1.0]];
        let (vals, vecs) = sym_eigh(&a).unwrap();
        assert_eq!(vals, vec![3.0, 1.0]);
        assert!((vecs[[0, 0]].abs() - 1.0).abs() < 1e-12);
        assert!((vecs[[1, 1]].abs() - 1.0).abs() < 1e-12);
        assert!(vecs[[1, 0]].abs() < 1e-12);
    }

    #[test]
    fn eigh_reconstructs_random_matrices() {
        let mut rng = RngStream::derive(11, "eigh-test");
        for trial in 0..1000 {
            let n = 2 + (trial % 7);
            let a = random_symmetric(n, &mut rng);
            let (vals, vecs) = sym_eigh(&a).unwrap();
            // A = V diag(vals) V^T
            let mut recon = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += vecs[[i, k]] * vals[k] * vecs[[j, k]];
                    }
                    recon[[i, j]] = s;
                }
            }
            let err = frobenius(&(&recon - &a)) / frobenius(&a);
            assert!(err < 1e-10, "trial {trial}: reconstruction error {err}");
            // Orthonormal columns.
            for i in 0..n {
                for j in 0..n {
                    let mut d = 0.0;
                    for k in 0..n {
                        d += vecs[[k, i]] * vecs[[k, j]];
                    }
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn eigh_reconstruction_on_8x8() {
        let mut rng = RngStream::derive(5, "eigh8");
        let a = random_symmetric(8, &mut rng);
        let (vals, vecs) = sym_eigh(&a).unwrap();
        let mut recon = Array2::zeros((8, 8));
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for k in 0..8 {
                    s += vecs[[i, k]] * vals[k] * vecs[[j, k]];
                }
                recon[[i, j]] = s;
            }
        }
        let err = frobenius(&(&recon - &a)) / frobenius(&a);
        assert!(err < 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn eigh_rejects_asymmetric() {
        let a = array![[1.0, 2.0], [0.5, 1.0]];
        assert!(matches!(
            sym_eigh(&a),
            Err(LinalgError::NonSymmetric { .. })
        ));
    }

    #[test]
    fn eigh_rejects_non_finite() {
        let a = array![[1.0, f64::NAN], [f64::NAN, 1.0]];
        assert!(matches!(sym_eigh(&a), Err(LinalgError::NonFinite)));
    }

    #[test]
    fn topk_single_row_is_normalized_row() {
        let v = vec![3.0, 0.0, 4.0];
        let rows: Vec<&[f64]> = vec![&v];
        let r = topk_right_singular_rows(&rows, 1).unwrap();
        assert!((r.singular_values[0] - 5.0).abs() < 1e-12);
        let d = r.directions.row(0);
        assert!((d[0] - 0.6).abs() < 1e-12);
        assert!((d[2] - 0.8).abs() < 1e-12);
        assert!(!r.rank_deficient);
    }

    #[test]
    fn topk_identical_rows_collapse_to_rank_one() {
        let v = vec![1.0, -2.0, 0.5, 3.0];
        let rows: Vec<&[f64]> = vec![&v; 5];
        let r = topk_right_singular_rows(&rows, 1).unwrap();
        let nrm = norm(&v);
        let cos = dot(r.directions.row(0).as_slice().unwrap(), &v) / nrm;
        assert!((cos.abs() - 1.0).abs() < 1e-10);
        // Asking for k=2 must flag rank deficiency and return one direction.
        let r2 = topk_right_singular_rows(&rows, 2).unwrap();
        assert!(r2.rank_deficient);
        assert_eq!(r2.directions.nrows(), 1);
    }

    #[test]
    fn topk_zero_matrix_errors() {
        let z = vec![0.0; 6];
        let rows: Vec<&[f64]> = vec![&z, &z];
        assert!(matches!(
            topk_right_singular_rows(&rows, 1),
            Err(LinalgError::ZeroMatrix)
        ));
    }

    /// Independent oracle: nalgebra's dense SVD.
    fn dense_svd_right_vectors(mat: &Array2<f64>, k: usize) -> Vec<Vec<f64>> {
        let (m, n) = mat.dim();
        let na = nalgebra::DMatrix::from_fn(m, n, |i, j| mat[[i, j]]);
        let svd = na.svd(false, true);
        let vt = svd.v_t.unwrap();
        (0..k).map(|i| vt.row(i).iter().cloned().collect()).collect()
    }

    /// Largest principal angle (radians) between the spans of two direction sets.
    fn max_principal_angle(a: &[Vec<f64>], b: &Array2<f64>) -> f64 {
        let k = a.len();
        // Overlap matrix M[i][j] = <a_i, b_j>; singular values of M are the
        // cosines of the principal angles.
        let mut overlap = Array2::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                overlap[[i, j]] = dot(&a[i], b.row(j).as_slice().unwrap());
            }
        }
        let svals = singular_values(&overlap).unwrap();
        let min_cos = svals.last().cloned().unwrap_or(0.0).min(1.0);
        min_cos.acos()
    }

    #[test]
    fn topk_matches_dense_svd_oracle() {
        let mut rng = RngStream::derive(77, "svd-oracle");
        for trial in 0..100 {
            let m = 2 + rng.uniform_usize(15);
            let n = 2 + rng.uniform_usize(15);
            let k = 1 + rng.uniform_usize(m.min(n).min(3));
            let mut mat = Array2::zeros((m, n));
            for x in mat.iter_mut() {
                *x = rng.normal_f64();
            }
            let ours = topk_right_singular(&mat, k).unwrap();
            if ours.rank_deficient {
                continue;
            }
            // Skip near-degenerate spectral gaps where the subspace is ill-defined.
            let all = singular_values(&mat).unwrap();
            if all.len() > k && (all[k - 1] - all[k]) < 1e-6 * all[0] {
                continue;
            }
            let oracle = dense_svd_right_vectors(&mat, k);
            let angle = max_principal_angle(&oracle, &ours.directions);
            assert!(
                angle < 1e-6,
                "trial {trial}: principal angle {angle} for {m}x{n}, k={k}"
            );
            for (i, &s) in ours.singular_values.iter().enumerate() {
                assert!((s - all[i]).abs() <= 1e-8 * all[0].max(1.0));
            }
        }
    }

    #[test]
    fn topk_4x6_k2_alignment() {
        let mut rng = RngStream::derive(123, "svd-4x6");
        let mut mat = Array2::zeros((4, 6));
        for x in mat.iter_mut() {
            *x = rng.normal_f64();
        }
        let ours = topk_right_singular(&mat, 2).unwrap();
        let oracle = dense_svd_right_vectors(&mat, 2);
        let angle = max_principal_angle(&oracle, &ours.directions);
        assert!(1.0 - angle.cos() < 1e-8, "alignment {}", angle.cos());
    }

    #[test]
    fn rank_at_energy_examples() {
        assert_eq!(rank_at_energy(&[5.0, 0.0, 0.0], 0.9).unwrap(), 1);
        assert_eq!(rank_at_energy(&[1.0; 10], 0.9).unwrap(), 9);
        assert!(matches!(
            rank_at_energy(&[0.0, 0.0], 0.9),
            Err(LinalgError::ZeroSpectrum)
        ));
        assert!(matches!(
            rank_at_energy(&[1.0], 1.0),
            Err(LinalgError::BadFraction(_))
        ));
    }

    #[test]
    fn random_orthonormal_full_frame() {
        let mut rng = RngStream::derive(2, "frame");
        let f = random_orthonormal(3, 3, &mut rng).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(
                    f.row(i).as_slice().unwrap(),
                    f.row(j).as_slice().unwrap(),
                );
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10);
            }
        }
        assert!(matches!(
            random_orthonormal(2, 3, &mut rng),
            Err(LinalgError::KTooLarge { .. })
        ));
    }

    #[test]
    fn random_orthonormal_high_dim() {
        let mut rng = RngStream::derive(4, "frame-big");
        let f = random_orthonormal(131072, 3, &mut rng).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(
                    f.row(i).as_slice().unwrap(),
                    f.row(j).as_slice().unwrap(),
                );
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10, "({i},{j}): {d}");
            }
        }
    }

    #[test]
    fn random_frames_are_reproducible_per_label() {
        let mut a = RngStream::derive(6, "frames");
        let mut b = RngStream::derive(6, "frames");
        let mut c = RngStream::derive(6, "other");
        let fa = random_orthonormal(64, 2, &mut a).unwrap();
        let fb = random_orthonormal(64, 2, &mut b).unwrap();
        let fc = random_orthonormal(64, 2, &mut c).unwrap();
        assert_eq!(fa, fb);
        assert_ne!(fa, fc);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn rank_at_energy_monotone_in_fraction(
                raw in proptest::collection::vec(0.0f64..10.0, 1..20),
                f1 in 0.05f64..0.95,
                f2 in 0.05f64..0.95,
            ) {
                let mut sv = raw;
                sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
                prop_assume!(sv.iter().any(|&s| s > 0.0));
                let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
                let r_lo = rank_at_energy(&sv, lo).unwrap();
                let r_hi = rank_at_energy(&sv, hi).unwrap();
                prop_assert!(r_lo <= r_hi);
            }

            #[test]
            fn gram_topk_spans_match_dense_oracle(
                seed in 0u64..1000,
                m in 2usize..8,
                n in 2usize..8,
            ) {
                let mut rng = RngStream::derive(seed, "prop-svd");
                let k = 1 + rng.uniform_usize(m.min(n).min(2));
                let mut mat = Array2::zeros((m, n));
                for x in mat.iter_mut() {
                    *x = rng.normal_f64();
                }
                let ours = topk_right_singular(&mat, k).unwrap();
                prop_assume!(!ours.rank_deficient);
                let all = singular_values(&mat).unwrap();
                prop_assume!(all.len() <= k || (all[k - 1] - all[k]) > 1e-6 * all[0]);
                let oracle = dense_svd_right_vectors(&mat, k);
                let angle = max_principal_angle(&oracle, &ours.directions);
                prop_assert!(angle < 1e-6, "angle {}", angle);
            }
        }
    }
}
