//! Dense linear-algebra substrate: truncated SVD, rank-limited pseudo-inverse,
//! PSD square roots, tensor flattenings, projector distances, and the two
//! relative spectral-boundedness measures used throughout the pipeline.
//!
//! Everything here is a pure function of its inputs; nothing holds shared
//! mutable state, so all operations may be called concurrently.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Dense double-precision matrix used by every stage.
pub type Matrix = DMatrix<f64>;
/// Dense double-precision column vector.
pub type Vector = DVector<f64>;

/// Numeric tolerances used by every spectral routine.
///
/// The values live in one place so the whole crate agrees on what
/// "orthonormal", "symmetric" and "rank deficient" mean.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Max-norm slack allowed in `U^T U - Id` for an orthonormal basis.
    pub orthonormality: f64,
    /// A singular value below `cutoff * sigma_1` counts as zero.
    pub relative_rank_cutoff: f64,
    /// Slack allowed when checking semidefinite inequalities.
    pub psd_slack: f64,
    /// Max-norm slack allowed in `Q - Q^T` for a symmetric input.
    pub symmetry: f64,
}

/// Crate-wide tolerance configuration.
pub const TOL: Tolerances = Tolerances {
    orthonormality: 1e-8,
    relative_rank_cutoff: 1e-12,
    psd_slack: 1e-6,
    symmetry: 1e-8,
};

/// Top-`m` singular triplets of a matrix.
///
/// `u` and `v` hold orthonormal columns; `singular_values` is nonincreasing
/// and nonnegative.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vector,
    pub v: Matrix,
}

impl SvdResult {
    /// `U diag(sigma) V^T`, the best rank-`m` approximation of the input.
    pub fn reconstruct(&self) -> Matrix {
        let scaled = Matrix::from_fn(self.u.nrows(), self.u.ncols(), |i, j| {
            self.u[(i, j)] * self.singular_values[j]
        });
        scaled * self.v.transpose()
    }
}

fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

fn ensure_symmetric(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = 1.0 + max_abs(m);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > TOL.symmetry * scale {
                return Err(Error::InvalidInput(format!(
                    "{what} is not symmetric: entry ({i},{j}) differs from ({j},{i}) by {:.3e}",
                    (m[(i, j)] - m[(j, i)]).abs()
                )));
            }
        }
    }
    Ok(())
}

// ---- Jacobi backends ------------------------------------------------------
//
// Both decompositions run plain Jacobi iterations. They are slower than
// blocked bidiagonal solvers but keep full accuracy on matrices with
// repeated or exactly zero singular values, which the spectral-boundedness
// measures and projector tests produce all the time.

/// One-sided (Hestenes) Jacobi SVD of a matrix with `nrows >= ncols`.
/// Returns thin `U` (orthonormal columns for nonzero sigma), descending
/// `sigma`, and square `V`.
fn one_sided_jacobi_tall(a: &Matrix) -> Result<(Matrix, Vector, Matrix)> {
    let m = a.nrows();
    let n = a.ncols();
    debug_assert!(m >= n);
    let mut work = a.clone();
    let mut v = Matrix::identity(n, n);

    let max_sweeps = 60;
    let tol = 1e-15;
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for r in 0..m {
                    let x = work[(r, p)];
                    let y = work[(r, q)];
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = {
                    let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let x = work[(r, p)];
                    let y = work[(r, q)];
                    work[(r, p)] = c * x - s * y;
                    work[(r, q)] = s * x + c * y;
                }
                for r in 0..n {
                    let x = v[(r, p)];
                    let y = v[(r, q)];
                    v[(r, p)] = c * x - s * y;
                    v[(r, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric("SVD did not converge".into()));
    }

    let mut sigma = Vector::zeros(n);
    for j in 0..n {
        sigma[j] = work.column(j).norm();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).expect("finite sigma"));

    let mut u = Matrix::zeros(m, n);
    let mut s_sorted = Vector::zeros(n);
    let mut v_sorted = Matrix::zeros(n, n);
    let scale = sigma[order[0]].max(f64::MIN_POSITIVE);
    let mut filled = Vec::with_capacity(n);
    for (col, &src) in order.iter().enumerate() {
        s_sorted[col] = sigma[src];
        v_sorted.set_column(col, &v.column(src));
        if sigma[src] > scale * 1e-300 && sigma[src] > 0.0 {
            let un = work.column(src) / sigma[src];
            u.set_column(col, &un);
            filled.push(col);
        }
    }
    // Null-space columns of U get an orthonormal completion so callers can
    // rely on U^T U = Id regardless of rank.
    for col in 0..n {
        if filled.contains(&col) {
            continue;
        }
        'basis: for e in 0..m {
            let mut cand = Vector::zeros(m);
            cand[e] = 1.0;
            for &f in &filled {
                let proj = u.column(f).dot(&cand);
                for r in 0..m {
                    cand[r] -= proj * u[(r, f)];
                }
            }
            let norm = cand.norm();
            if norm > 1e-6 {
                cand /= norm;
                u.set_column(col, &cand);
                filled.push(col);
                break 'basis;
            }
        }
    }
    Ok((u, s_sorted, v_sorted))
}

fn jacobi_svd(a: &Matrix) -> Result<(Matrix, Vector, Matrix)> {
    if a.nrows() >= a.ncols() {
        one_sided_jacobi_tall(a)
    } else {
        let (u, s, v) = one_sided_jacobi_tall(&a.transpose())?;
        Ok((v, s, u))
    }
}

/// Top-`rank` singular triplets of `m`, sorted by descending singular value.
pub fn truncated_svd(m: &Matrix, rank: usize) -> Result<SvdResult> {
    ensure_finite(m, "svd input")?;
    let min_dim = m.nrows().min(m.ncols());
    if rank == 0 || rank > min_dim {
        return Err(Error::InvalidInput(format!(
            "rank {rank} out of range for a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let (u_full, sigma, v_full) = jacobi_svd(m)?;
    let mut u = Matrix::zeros(m.nrows(), rank);
    let mut v = Matrix::zeros(m.ncols(), rank);
    let mut s = Vector::zeros(rank);
    for col in 0..rank {
        u.set_column(col, &u_full.column(col));
        v.set_column(col, &v_full.column(col));
        s[col] = sigma[col];
    }
    Ok(SvdResult {
        u,
        singular_values: s,
        v,
    })
}

/// Largest singular value of `m`.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let (_, sigma, _) = jacobi_svd(m).expect("Jacobi SVD converges on finite input");
    sigma[0]
}

/// All singular values of `m`, descending.
pub fn singular_values(m: &Matrix) -> Vector {
    let (_, sigma, _) = jacobi_svd(m).expect("Jacobi SVD converges on finite input");
    sigma
}

/// Eigenvalues of a symmetric matrix, descending. The input is symmetrized
/// as `(M + M^T)/2` first.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vector> {
    let (vals, _) = sorted_symmetric_eigen(m)?;
    Ok(vals)
}

/// Sorted symmetric eigen-decomposition by cyclic Jacobi rotations;
/// eigenvalues descending, eigenvectors as matching columns.
pub(crate) fn sorted_symmetric_eigen(m: &Matrix) -> Result<(Vector, Matrix)> {
    ensure_finite(m, "eigen input")?;
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!(
            "eigen input must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let n = m.nrows();
    let mut a = (m + m.transpose()) * 0.5;
    let mut vecs = Matrix::identity(n, n);
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if frob == 0.0 {
        return Ok((Vector::zeros(n), vecs));
    }

    let off_sq = |a: &Matrix| -> f64 {
        let mut acc = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                acc += a[(p, q)] * a[(p, q)];
            }
        }
        acc
    };

    let target = (1e-14 * frob) * (1e-14 * frob);
    let max_sweeps = 100;
    let mut converged = false;
    for _ in 0..max_sweeps {
        if off_sq(&a) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..n {
                    let x = a[(r, p)];
                    let y = a[(r, q)];
                    a[(r, p)] = c * x - s * y;
                    a[(r, q)] = s * x + c * y;
                }
                for col in 0..n {
                    let x = a[(p, col)];
                    let y = a[(q, col)];
                    a[(p, col)] = c * x - s * y;
                    a[(q, col)] = s * x + c * y;
                }
                for r in 0..n {
                    let x = vecs[(r, p)];
                    let y = vecs[(r, q)];
                    vecs[(r, p)] = c * x - s * y;
                    vecs[(r, q)] = s * x + c * y;
                }
            }
        }
    }
    if !converged && off_sq(&a) > target * 1e6 {
        return Err(Error::Numeric(
            "symmetric eigen-decomposition did not converge".into(),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(y, y)].partial_cmp(&a[(x, x)]).expect("finite eigenvalue"));
    let mut vals = Vector::zeros(n);
    let mut sorted_vecs = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        vals[col] = a[(src, src)];
        sorted_vecs.set_column(col, &vecs.column(src));
    }
    Ok((vals, sorted_vecs))
}

/// Moore-Penrose pseudo-inverse restricted to the top `rank` singular
/// triplets, `V_m diag(1/sigma) U_m^T`.
pub fn rank_m_pinv(m: &Matrix, rank: usize) -> Result<Matrix> {
    let svd = truncated_svd(m, rank)?;
    let sigma_1 = svd.singular_values[0];
    let sigma_m = svd.singular_values[rank - 1];
    if sigma_m <= TOL.relative_rank_cutoff * sigma_1 {
        return Err(Error::RankDeficient {
            index: rank,
            value: sigma_m,
            threshold: TOL.relative_rank_cutoff * sigma_1,
        });
    }
    let scaled = Matrix::from_fn(svd.v.nrows(), rank, |i, j| {
        svd.v[(i, j)] / svd.singular_values[j]
    });
    Ok(scaled * svd.u.transpose())
}

fn psd_eigen_power(q: &Matrix, rank: usize, exponent: f64) -> Result<Matrix> {
    ensure_finite(q, "psd input")?;
    ensure_symmetric(q, "psd input")?;
    if rank == 0 || rank > q.nrows() {
        return Err(Error::InvalidInput(format!(
            "rank {rank} out of range for a {}x{} matrix",
            q.nrows(),
            q.ncols()
        )));
    }
    let (vals, vecs) = sorted_symmetric_eigen(q)?;
    let lead = vals[0].max(0.0);
    let kth = vals[rank - 1];
    if kth <= TOL.relative_rank_cutoff * lead || kth <= 0.0 {
        return Err(Error::RankDeficient {
            index: rank,
            value: kth,
            threshold: TOL.relative_rank_cutoff * lead,
        });
    }
    let n = q.nrows();
    let mut out = Matrix::zeros(n, n);
    for j in 0..rank {
        let w = vals[j].powf(exponent);
        let v = vecs.column(j);
        // out += w * v v^T
        for r in 0..n {
            let vr = v[r] * w;
            for c in 0..n {
                out[(r, c)] += vr * v[c];
            }
        }
    }
    Ok(out)
}

/// `(Q^+)^{1/2}` restricted to the top-`rank` eigenspace of the symmetric
/// PSD matrix `Q`. Trailing (possibly negative) eigenvalues are dropped.
pub fn psd_inv_sqrt(q: &Matrix, rank: usize) -> Result<Matrix> {
    psd_eigen_power(q, rank, -0.5)
}

/// `Q^{1/2}` restricted to the top-`rank` eigenspace of the symmetric PSD
/// matrix `Q`.
pub fn psd_sqrt(q: &Matrix, rank: usize) -> Result<Matrix> {
    psd_eigen_power(q, rank, 0.5)
}

fn ensure_orthonormal_columns(b: &Matrix, what: &str) -> Result<()> {
    let gram = b.transpose() * b;
    let k = b.ncols();
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            if (gram[(i, j)] - target).abs() > TOL.orthonormality * 10.0 {
                return Err(Error::InvalidInput(format!(
                    "{what} does not have orthonormal columns (Gram entry ({i},{j}) = {:.3e})",
                    gram[(i, j)]
                )));
            }
        }
    }
    Ok(())
}

/// Spectral norm of the difference of the orthogonal projectors spanned by
/// the two column bases. For equal-dimension subspaces the value lies in
/// `[0, 1]` and equals the sine of the largest principal angle.
pub fn projector_distance(basis1: &Matrix, basis2: &Matrix) -> Result<f64> {
    ensure_finite(basis1, "basis1")?;
    ensure_finite(basis2, "basis2")?;
    if basis1.nrows() != basis2.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "bases live in different ambient dimensions: {} vs {}",
            basis1.nrows(),
            basis2.nrows()
        )));
    }
    ensure_orthonormal_columns(basis1, "basis1")?;
    ensure_orthonormal_columns(basis2, "basis2")?;
    let p1 = basis1 * basis1.transpose();
    let p2 = basis2 * basis2.transpose();
    Ok(spectral_norm(&(p1 - p2)))
}

/// How a third-order tensor is unfolded into a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeSplit {
    /// Rows indexed by mode 1, columns by (mode 2, mode 3): `{1}{2,3}`.
    One23,
    /// Rows indexed by mode 2, columns by (mode 1, mode 3): `{2}{1,3}`.
    Two13,
    /// Rows indexed by (mode 1, mode 2), columns by mode 3: `{1,2}{3}`.
    Twelve3,
}

impl ModeSplit {
    pub const ALL: [ModeSplit; 3] = [ModeSplit::One23, ModeSplit::Two13, ModeSplit::Twelve3];
}

/// Dense third-order tensor with entries stored in lexicographic index order
/// (last index fastest).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor3 {
    pub dims: (usize, usize, usize),
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d1: usize, d2: usize, d3: usize) -> Self {
        Tensor3 {
            dims: (d1, d2, d3),
            data: vec![0.0; d1 * d2 * d3],
        }
    }

    pub fn from_fn(d1: usize, d2: usize, d3: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor3::zeros(d1, d2, d3);
        let mut idx = 0;
        for i in 0..d1 {
            for j in 0..d2 {
                for k in 0..d3 {
                    t.data[idx] = f(i, j, k);
                    idx += 1;
                }
            }
        }
        t
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims.1 + j) * self.dims.2 + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for x in &mut self.data {
            *x *= factor;
        }
    }

    /// Adds `coeff * a (x) b (x) c` in place.
    pub fn add_rank1(&mut self, coeff: f64, a: &Vector, b: &Vector, c: &Vector) {
        assert_eq!(a.len(), self.dims.0, "mode-1 length mismatch");
        assert_eq!(b.len(), self.dims.1, "mode-2 length mismatch");
        assert_eq!(c.len(), self.dims.2, "mode-3 length mismatch");
        let mut idx = 0;
        for i in 0..self.dims.0 {
            let ca = coeff * a[i];
            for j in 0..self.dims.1 {
                let cab = ca * b[j];
                for k in 0..self.dims.2 {
                    self.data[idx] += cab * c[k];
                    idx += 1;
                }
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Unfolds the tensor into a matrix along the given mode split.
    pub fn unfold(&self, split: ModeSplit) -> Matrix {
        let (d1, d2, d3) = self.dims;
        match split {
            ModeSplit::One23 => Matrix::from_row_slice(d1, d2 * d3, &self.data),
            ModeSplit::Twelve3 => Matrix::from_row_slice(d1 * d2, d3, &self.data),
            ModeSplit::Two13 => {
                let mut m = Matrix::zeros(d2, d1 * d3);
                for i in 0..d1 {
                    for j in 0..d2 {
                        for k in 0..d3 {
                            m[(j, i * d3 + k)] = self.get(i, j, k);
                        }
                    }
                }
                m
            }
        }
    }

    /// Multiplies `mat` into the tensor along mode 1:
    /// `out[r,j,k] = sum_i mat[r,i] * t[i,j,k]`.
    pub fn mode1_multiply(&self, mat: &Matrix) -> Tensor3 {
        let (d1, d2, d3) = self.dims;
        assert_eq!(mat.ncols(), d1, "mode-1 dimension mismatch");
        let slab = d2 * d3;
        let mut out = Tensor3::zeros(mat.nrows(), d2, d3);
        for i in 0..d1 {
            let src = &self.data[i * slab..(i + 1) * slab];
            for r in 0..mat.nrows() {
                let w = mat[(r, i)];
                if w == 0.0 {
                    continue;
                }
                let dst = &mut out.data[r * slab..(r + 1) * slab];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Multiplies `mat` into the tensor along mode 2:
    /// `out[i,r,k] = sum_j mat[r,j] * t[i,j,k]`.
    pub fn mode2_multiply(&self, mat: &Matrix) -> Tensor3 {
        let (d1, d2, d3) = self.dims;
        assert_eq!(mat.ncols(), d2, "mode-2 dimension mismatch");
        let mut out = Tensor3::zeros(d1, mat.nrows(), d3);
        for i in 0..d1 {
            for j in 0..d2 {
                let src = &self.data[(i * d2 + j) * d3..(i * d2 + j + 1) * d3];
                for r in 0..mat.nrows() {
                    let w = mat[(r, j)];
                    if w == 0.0 {
                        continue;
                    }
                    let dst_base = (i * mat.nrows() + r) * d3;
                    let dst = &mut out.data[dst_base..dst_base + d3];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        out
    }

    /// Multiplies `mat` into the tensor along mode 3:
    /// `out[i,j,r] = sum_k mat[r,k] * t[i,j,k]`.
    pub fn mode3_multiply(&self, mat: &Matrix) -> Tensor3 {
        let (d1, d2, d3) = self.dims;
        assert_eq!(mat.ncols(), d3, "mode-3 dimension mismatch");
        let nr = mat.nrows();
        let mut out = Tensor3::zeros(d1, d2, nr);
        for fiber in 0..d1 * d2 {
            let src = &self.data[fiber * d3..(fiber + 1) * d3];
            let dst = &mut out.data[fiber * nr..(fiber + 1) * nr];
            for (r, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..d3 {
                    acc += mat[(r, k)] * src[k];
                }
                *d = acc;
            }
        }
        out
    }
}

impl std::ops::Add for &Tensor3 {
    type Output = Tensor3;
    fn add(self, rhs: &Tensor3) -> Tensor3 {
        assert_eq!(self.dims, rhs.dims, "tensor dimension mismatch");
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl std::ops::Sub for &Tensor3 {
    type Output = Tensor3;
    fn sub(self, rhs: &Tensor3) -> Tensor3 {
        assert_eq!(self.dims, rhs.dims, "tensor dimension mismatch");
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Spectral norm of the unfolding of `t` along `split`.
pub fn flatten_norm(t: &Tensor3, split: ModeSplit) -> f64 {
    spectral_norm(&t.unfold(split))
}

/// Smallest `tau` with `E <= tau * (SS^T + sigma_m(SS^T) Id)` in the
/// semidefinite order, for symmetric `E` and full-column-rank `S`. Computed
/// as the top eigenvalue of `M^{-1/2} E M^{-1/2}` with
/// `M = SS^T + sigma_m(SS^T) Id`; a negative value clamps to zero.
pub fn spectral_tau(e: &Matrix, s: &Matrix) -> Result<f64> {
    spectral_tau_with_rank(e, s, s.ncols())
}

/// [`spectral_tau`] with an explicit rank for the `sigma_m` shift, for
/// signal matrices that are rank deficient by construction (the convention
/// is that `sigma_min` means the least nonzero singular value).
pub fn spectral_tau_with_rank(e: &Matrix, s: &Matrix, m: usize) -> Result<f64> {
    ensure_finite(e, "error matrix")?;
    ensure_finite(s, "signal matrix")?;
    ensure_symmetric(e, "error matrix")?;
    if e.nrows() != s.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "error is {}x{} but signal has {} rows",
            e.nrows(),
            e.ncols(),
            s.nrows()
        )));
    }
    if m == 0 || m > s.ncols().min(s.nrows()) {
        return Err(Error::InvalidInput(format!(
            "rank {m} out of range for a {}x{} signal",
            s.nrows(),
            s.ncols()
        )));
    }
    let sigma = singular_values(s);
    let sigma_m = sigma[m - 1];
    if sigma_m <= TOL.relative_rank_cutoff * sigma[0] || sigma_m <= 0.0 {
        return Err(Error::RankDeficient {
            index: m,
            value: sigma_m,
            threshold: TOL.relative_rank_cutoff * sigma[0],
        });
    }
    let shift = sigma_m * sigma_m;
    let n = s.nrows();
    let mut gram = s * s.transpose();
    for i in 0..n {
        gram[(i, i)] += shift;
    }
    // gram is SPD with eigenvalues >= shift, so full-rank inverse sqrt.
    let inv_sqrt = psd_inv_sqrt(&gram, n)?;
    let congruence = &inv_sqrt * e * &inv_sqrt;
    let eigs = symmetric_eigenvalues(&congruence)?;
    Ok(eigs[0].max(0.0))
}

/// Asymmetric spectral-boundedness measure of `E` with respect to `(B, C)`.
///
/// Splits `E` into the four projections determined by the column spans of
/// `B` and `C` and returns the largest of the four normalized norms
/// `max(|D1|, |D2|/s_min(C), |D3|/s_min(B), |D4|/(s_min(B) s_min(C)))`.
pub fn asym_spectral_eps(e: &Matrix, b: &Matrix, c: &Matrix) -> Result<f64> {
    ensure_finite(e, "error matrix")?;
    ensure_finite(b, "B")?;
    ensure_finite(c, "C")?;
    if e.nrows() != b.nrows() || e.ncols() != c.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "error is {}x{} but B has {} rows and C has {} rows",
            e.nrows(),
            e.ncols(),
            b.nrows(),
            c.nrows()
        )));
    }
    let mb = b.ncols();
    let mc = c.ncols();
    let svd_b = truncated_svd(b, mb)?;
    let svd_c = truncated_svd(c, mc)?;
    let smin_b = svd_b.singular_values[mb - 1];
    let smin_c = svd_c.singular_values[mc - 1];
    for (name, smin, s1) in [
        ("B", smin_b, svd_b.singular_values[0]),
        ("C", smin_c, svd_c.singular_values[0]),
    ] {
        if smin <= TOL.relative_rank_cutoff * s1 || smin <= 0.0 {
            return Err(Error::RankDeficient {
                index: if name == "B" { mb } else { mc },
                value: smin,
                threshold: TOL.relative_rank_cutoff * s1,
            });
        }
    }

    let pinv_b = rank_m_pinv(b, mb)?;
    // (C^T)^+ = (C^+)^T
    let pinv_ct = rank_m_pinv(c, mc)?.transpose();
    let proj_b_perp = Matrix::identity(b.nrows(), b.nrows()) - &svd_b.u * svd_b.u.transpose();
    let proj_c_perp = Matrix::identity(c.nrows(), c.nrows()) - &svd_c.u * svd_c.u.transpose();

    let d1 = &pinv_b * e * &pinv_ct;
    let d2_t = &pinv_b * e * &proj_c_perp;
    let d3 = &proj_b_perp * e * &pinv_ct;
    let d4 = &proj_b_perp * e * &proj_c_perp;

    let eps = spectral_norm(&d1)
        .max(spectral_norm(&d2_t) / smin_c)
        .max(spectral_norm(&d3) / smin_b)
        .max(spectral_norm(&d4) / (smin_b * smin_c));
    Ok(eps)
}

/// Serde adapter for `Matrix` fields: row-major `{ rows, cols, data }`.
pub mod mat_serde {
    use super::Matrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct MatrixRepr {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &Matrix, ser: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixRepr {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Matrix, D::Error> {
        let repr = MatrixRepr::deserialize(de)?;
        if repr.data.len() != repr.rows * repr.cols {
            return Err(D::Error::custom(format!(
                "matrix payload has {} entries, expected {}x{}",
                repr.data.len(),
                repr.rows,
                repr.cols
            )));
        }
        Ok(Matrix::from_row_slice(repr.rows, repr.cols, &repr.data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn truncated_svd_identity() {
        let id = Matrix::identity(4, 4);
        let svd = truncated_svd(&id, 2).unwrap();
        assert_relative_eq!(svd.singular_values[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(svd.singular_values[1], 1.0, epsilon = 1e-12);
        // Columns of U span a 2-dim coordinate subspace of R^4.
        let gram = svd.u.transpose() * &svd.u;
        assert_relative_eq!(gram, Matrix::identity(2, 2), epsilon = 1e-10);
    }

    #[test]
    fn truncated_svd_diagonal() {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 2.0, 1.0]));
        let svd = truncated_svd(&d, 1).unwrap();
        assert_relative_eq!(svd.singular_values[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(svd.u[(0, 0)].abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(svd.v[(0, 0)].abs(), 1.0, epsilon = 1e-12);
        // u and v agree in sign for a positive diagonal entry.
        assert!(svd.u[(0, 0)] * svd.v[(0, 0)] > 0.0);
    }

    #[test]
    fn truncated_svd_rejects_bad_input() {
        let mut m = Matrix::zeros(2, 2);
        m[(0, 0)] = f64::NAN;
        assert!(matches!(
            truncated_svd(&m, 1),
            Err(Error::InvalidInput(_))
        ));
        let ok = Matrix::identity(2, 2);
        assert!(truncated_svd(&ok, 3).is_err());
        assert!(truncated_svd(&ok, 0).is_err());
    }

    #[test]
    fn rank_m_pinv_diagonal() {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 1.0, 0.0]));
        let p = rank_m_pinv(&d, 2).unwrap();
        let expected =
            Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 1.0, 0.0]));
        assert_relative_eq!(p, expected, epsilon = 1e-12);
    }

    #[test]
    fn rank_m_pinv_projector_is_own_pinv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = random_matrix(&mut rng, 6, 3);
        let u = truncated_svd(&raw, 3).unwrap().u;
        let proj = &u * u.transpose();
        let p = rank_m_pinv(&proj, 3).unwrap();
        assert_relative_eq!(p, proj, epsilon = 1e-9);
    }

    #[test]
    fn rank_m_pinv_reports_rank_deficiency() {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0, 0.0]));
        match rank_m_pinv(&d, 2) {
            Err(Error::RankDeficient { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn psd_inv_sqrt_diagonal() {
        let q = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 1.0]));
        let r = psd_inv_sqrt(&q, 2).unwrap();
        let expected = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 1.0]));
        assert_relative_eq!(r, expected, epsilon = 1e-12);
    }

    #[test]
    fn psd_inv_sqrt_identity() {
        let q = Matrix::identity(5, 5);
        let r = psd_inv_sqrt(&q, 5).unwrap();
        assert_relative_eq!(r, Matrix::identity(5, 5), epsilon = 1e-12);
    }

    #[test]
    fn psd_inv_sqrt_rejects_asymmetric() {
        let mut q = Matrix::identity(3, 3);
        q[(0, 1)] = 0.5;
        assert!(matches!(psd_inv_sqrt(&q, 2), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw = random_matrix(&mut rng, 6, 4);
        let q = &raw * raw.transpose();
        let s = psd_sqrt(&q, 4).unwrap();
        assert_relative_eq!(&s * &s, q, epsilon = 1e-8);
    }

    #[test]
    fn projector_distance_cases() {
        let e1 = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let e2 = Matrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert_relative_eq!(projector_distance(&e1, &e1).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(projector_distance(&e1, &e2).unwrap(), 1.0, epsilon = 1e-12);

        let theta: f64 = 0.3;
        let rot = Matrix::from_column_slice(2, 1, &[theta.cos(), theta.sin()]);
        assert_relative_eq!(
            projector_distance(&e1, &rot).unwrap(),
            theta.sin(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn projector_distance_rejects_non_orthonormal() {
        let bad = Matrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let e1 = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!(projector_distance(&bad, &e1).is_err());
    }

    #[test]
    fn flatten_norm_cases() {
        let zero = Tensor3::zeros(3, 3, 3);
        for split in ModeSplit::ALL {
            assert_eq!(flatten_norm(&zero, split), 0.0);
        }

        let e = |i: usize| {
            let mut v = Vector::zeros(3);
            v[i] = 1.0;
            v
        };
        let mut t = Tensor3::zeros(3, 3, 3);
        t.add_rank1(1.0, &e(0), &e(0), &e(0));
        for split in ModeSplit::ALL {
            assert_relative_eq!(flatten_norm(&t, split), 1.0, epsilon = 1e-12);
        }

        t.add_rank1(1.0, &e(1), &e(1), &e(1));
        for split in ModeSplit::ALL {
            assert_relative_eq!(flatten_norm(&t, split), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mode_multiplies_match_rank1_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Vector::from_fn(4, |_, _| rng.gen::<f64>());
        let b = Vector::from_fn(3, |_, _| rng.gen::<f64>());
        let c = Vector::from_fn(5, |_, _| rng.gen::<f64>());
        let mut t = Tensor3::zeros(4, 3, 5);
        t.add_rank1(2.0, &a, &b, &c);

        let m = random_matrix(&mut rng, 2, 4);
        let out = t.mode1_multiply(&m);
        let ma = &m * &a;
        let mut expected = Tensor3::zeros(2, 3, 5);
        expected.add_rank1(2.0, &ma, &b, &c);
        for (x, y) in out.data.iter().zip(&expected.data) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }

        let m2 = random_matrix(&mut rng, 2, 3);
        let out2 = t.mode2_multiply(&m2);
        let mb = &m2 * &b;
        let mut expected2 = Tensor3::zeros(4, 2, 5);
        expected2.add_rank1(2.0, &a, &mb, &c);
        for (x, y) in out2.data.iter().zip(&expected2.data) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }

        let m3 = random_matrix(&mut rng, 2, 5);
        let out3 = t.mode3_multiply(&m3);
        let mc = &m3 * &c;
        let mut expected3 = Tensor3::zeros(4, 3, 2);
        expected3.add_rank1(2.0, &a, &b, &mc);
        for (x, y) in out3.data.iter().zip(&expected3.data) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn spectral_tau_cases() {
        let s = Matrix::identity(4, 4);
        let zero = Matrix::zeros(4, 4);
        assert_relative_eq!(spectral_tau(&zero, &s).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(
            spectral_tau(&Matrix::identity(4, 4), &s).unwrap(),
            0.5,
            epsilon = 1e-10
        );
    }

    #[test]
    fn spectral_tau_of_gram_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_matrix(&mut rng, 20, 4);
        let gram = &s * s.transpose();
        let tau = spectral_tau(&gram, &s).unwrap();
        let sv = singular_values(&s);
        let top = sv[0] * sv[0];
        let bottom = sv[3] * sv[3];
        assert_relative_eq!(tau, top / (top + bottom), epsilon = 1e-9);
    }

    #[test]
    fn asym_spectral_eps_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_matrix(&mut rng, 20, 4);
        let c = random_matrix(&mut rng, 20, 4);
        let zero = Matrix::zeros(20, 20);
        assert_relative_eq!(asym_spectral_eps(&zero, &b, &c).unwrap(), 0.0, epsilon = 1e-12);

        let e = &b * c.transpose() * 0.1;
        assert_relative_eq!(asym_spectral_eps(&e, &b, &c).unwrap(), 0.1, epsilon = 1e-9);
    }

    #[test]
    fn asym_spectral_eps_rejects_rank_deficient() {
        let b = Matrix::from_column_slice(4, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let c = Matrix::zeros(4, 2);
        let e = Matrix::zeros(4, 4);
        assert!(matches!(
            asym_spectral_eps(&e, &b, &c),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn unfold_two13_matches_definition() {
        let t = Tensor3::from_fn(2, 3, 4, |i, j, k| (100 * i + 10 * j + k) as f64);
        let m = t.unfold(ModeSplit::Two13);
        assert_eq!(m.nrows(), 3);
        assert_eq!(m.ncols(), 8);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(m[(j, i * 4 + k)], t.get(i, j, k));
                }
            }
        }
    }
}
