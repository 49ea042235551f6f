// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spectral kernel: second moments, rank-`r` subspaces and the distances
//! between them.
//!
//! All matrices are dense `f64`. Activation batches are stored one sample
//! per row. Eigen- and singular vectors follow a fixed sign convention (the
//! largest-magnitude entry of every column is positive, lowest index wins a
//! magnitude tie) so that bases and checkpoints are reproducible.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{GaeError, Result};

/// Rows per chunk when accumulating outer products. The reduction order over
/// chunks is fixed, so results do not depend on the thread count.
pub const MOMENT_CHUNK_ROWS: usize = 2048;

/// Eigengaps below this are reported as degenerate.
pub const DEGENERATE_GAP: f64 = 1e-12;

/// Decoders wider than this multiple of their height go through the Gram matrix.
const GRAM_ROUTE_RATIO: usize = 8;

/// Symmetric PSD `d x d` matrix with its descending eigendecomposition.
#[derive(Debug, Clone)]
pub struct SecondMoment {
    matrix: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SecondMoment {
    /// Uncentered estimate `(1/N) sum_i h_i h_i^T` over the rows of `batch`.
    pub fn estimate(batch: &DMatrix<f64>) -> Result<Self> {
        let n = batch.nrows();
        if n == 0 {
            return Err(GaeError::EmptyBatch);
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(GaeError::NonFinite("activation batch"));
        }
        let d = batch.ncols();
        let chunks = n.div_ceil(MOMENT_CHUNK_ROWS);
        let partials: Vec<DMatrix<f64>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let start = c * MOMENT_CHUNK_ROWS;
                let len = MOMENT_CHUNK_ROWS.min(n - start);
                let rows = batch.rows(start, len);
                rows.tr_mul(&rows)
            })
            .collect();
        let mut acc = DMatrix::zeros(d, d);
        for p in &partials {
            acc += p;
        }
        acc /= n as f64;
        Self::from_matrix(acc)
    }

    /// Wraps an explicit matrix. The input is symmetrized as `(M + M^T)/2`
    /// before decomposition.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(GaeError::dims("second moment (square)", matrix.nrows(), matrix.ncols()));
        }
        if matrix.nrows() == 0 {
            return Err(GaeError::InvalidParameter("second moment of dimension 0".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GaeError::NonFinite("second-moment matrix"));
        }
        let matrix = symmetrize(&matrix);
        let (eigenvalues, eigenvectors) = sorted_symmetric_eigen(&matrix);
        Ok(Self {
            matrix,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Eigenvalues, descending.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors as columns, paired with [`Self::eigenvalues`].
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// `lambda_r - lambda_{r+1}` (1-based `r`), requires `1 <= r < d`.
    pub fn eigengap(&self, r: usize) -> Result<f64> {
        let d = self.dim();
        if r == 0 || r >= d {
            return Err(GaeError::RankOutOfRange {
                rank: r,
                max: d.saturating_sub(1),
            });
        }
        Ok(self.eigenvalues[r - 1] - self.eigenvalues[r])
    }

    /// Spread `lambda_1 - lambda_d`.
    pub fn spectral_spread(&self) -> f64 {
        self.eigenvalues[0] - self.eigenvalues[self.dim() - 1]
    }

    /// Span of the top-`r` eigenvectors.
    pub fn top_r_eigenbasis(&self, r: usize) -> Result<Subspace> {
        let d = self.dim();
        if r == 0 || r > d {
            return Err(GaeError::RankOutOfRange { rank: r, max: d });
        }
        let basis = self.eigenvectors.columns(0, r).into_owned();
        let mut warning = None;
        if r < d {
            let gap = self.eigenvalues[r - 1] - self.eigenvalues[r];
            if gap < DEGENERATE_GAP {
                warning = Some(format!(
                    "eigengap at rank {r} is {gap:.3e}; the top-{r} eigenspace is ill-defined"
                ));
            }
        }
        Ok(Subspace { basis, warning })
    }
}

/// Rank-`r` subspace of `R^d` held as a `d x r` orthonormal basis.
#[derive(Debug, Clone)]
pub struct Subspace {
    basis: DMatrix<f64>,
    warning: Option<String>,
}

impl Subspace {
    /// Accepts a basis whose columns are already orthonormal to 1e-10.
    pub fn from_orthonormal(basis: DMatrix<f64>) -> Result<Self> {
        let r = basis.ncols();
        if r == 0 || r > basis.nrows() {
            return Err(GaeError::RankOutOfRange {
                rank: r,
                max: basis.nrows(),
            });
        }
        let err = (basis.tr_mul(&basis) - DMatrix::<f64>::identity(r, r)).norm();
        if !(err <= 1e-10) {
            return Err(GaeError::InvalidParameter(format!(
                "basis columns are not orthonormal (||B^T B - I||_F = {err:.3e})"
            )));
        }
        Ok(Self {
            basis,
            warning: None,
        })
    }

    /// Orthonormalizes the columns of `m` (thin QR). Columns must be linearly
    /// independent.
    pub fn span_of(m: &DMatrix<f64>) -> Result<Self> {
        let (d, r) = m.shape();
        if r == 0 || r > d {
            return Err(GaeError::RankOutOfRange { rank: r, max: d });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GaeError::NonFinite("subspace generator"));
        }
        let qr = m.clone().qr();
        let rr = qr.r();
        let scale = rr.diagonal().amax().max(f64::MIN_POSITIVE);
        if (0..r).any(|j| rr[(j, j)].abs() <= scale * 1e-12 * d as f64) {
            return Err(GaeError::InvalidParameter(
                "generator columns are linearly dependent".into(),
            ));
        }
        let mut basis = qr.q().columns(0, r).into_owned();
        orient_columns(&mut basis);
        Ok(Self {
            basis,
            warning: None,
        })
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Degeneracy note attached during construction, if any.
    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    pub fn is_degenerate(&self) -> bool {
        self.warning.is_some()
    }

    /// Dense `d x d` projector `U U^T`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// `P x` for a `d x m` block, computed as `U (U^T x)`.
    pub fn project(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.basis * self.basis.tr_mul(x)
    }
}

/// Top-`r` left singular subspace of a `d x k` decoder matrix.
pub fn explainer_subspace(w_dec: &DMatrix<f64>, r: usize) -> Result<Subspace> {
    let (d, k) = w_dec.shape();
    let max = d.min(k);
    if r == 0 || r > max {
        return Err(GaeError::RankOutOfRange { rank: r, max });
    }
    if w_dec.iter().any(|v| !v.is_finite()) {
        return Err(GaeError::NonFinite("decoder matrix"));
    }
    if w_dec.iter().all(|v| *v == 0.0) {
        return Err(GaeError::InvalidParameter("decoder matrix is zero".into()));
    }
    let (u, sv, tol) = left_singular(w_dec);
    let mut basis = u.columns(0, r).into_owned();
    orient_columns(&mut basis);

    let mut warning = None;
    if sv[r - 1] <= tol {
        warning = Some(format!(
            "rank {r} exceeds the numerical rank of the decoder (sigma_{r} = {:.3e})",
            sv[r - 1]
        ));
    } else if r < sv.len() && sv[r - 1] - sv[r] < DEGENERATE_GAP {
        warning = Some(format!(
            "singular-value gap at rank {r} is {:.3e}; the top-{r} subspace is ill-defined",
            sv[r - 1] - sv[r]
        ));
    }
    Ok(Subspace { basis, warning })
}

/// Frobenius distance `||P_a - P_b||_F` between the two projectors.
pub fn projector_distance(a: &Subspace, b: &Subspace) -> Result<f64> {
    same_ambient(a, b)?;
    let diff = a.projector() - b.projector();
    Ok(diff.norm())
}

/// Principal angles in radians, ascending.
pub fn principal_angles(a: &Subspace, b: &Subspace) -> Result<Vec<f64>> {
    same_ambient(a, b)?;
    same_rank(a, b)?;
    let cross = a.basis.tr_mul(&b.basis);
    let mut cosines: Vec<f64> = cross.singular_values().iter().copied().collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    Ok(cosines.into_iter().map(|c| c.clamp(0.0, 1.0).acos()).collect())
}

/// `(1/r) ||U_a^T U_b||_F^2`, in `[0, 1]`.
pub fn subspace_overlap(a: &Subspace, b: &Subspace) -> Result<f64> {
    same_ambient(a, b)?;
    same_rank(a, b)?;
    if a.basis == b.basis {
        return Ok(1.0);
    }
    let cross = a.basis.tr_mul(&b.basis);
    Ok((cross.norm_squared() / a.rank() as f64).clamp(0.0, 1.0))
}

/// `||M_ood - M_id||_F`.
pub fn second_moment_shift(m_id: &SecondMoment, m_ood: &SecondMoment) -> Result<f64> {
    if m_id.dim() != m_ood.dim() {
        return Err(GaeError::dims("second-moment shift", m_id.dim(), m_ood.dim()));
    }
    Ok((m_ood.matrix() - m_id.matrix()).norm())
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigen-decomposition with descending eigenvalues and oriented columns.
pub(crate) fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let d = m.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let values = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    orient_columns(&mut vectors);
    (values, vectors)
}

/// Left singular vectors (as columns) and singular values, both sorted by
/// descending singular value. Wide inputs are first reduced by a QR of the
/// transpose, which leaves the left singular vectors unchanged.
/// Left singular vectors and values, descending, plus the level below which
/// a singular value is numerically zero.
pub(crate) fn left_singular(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, f64) {
    let (d, k) = m.shape();
    let eps = (d.max(k) as f64) * f64::EPSILON;
    if k > GRAM_ROUTE_RATIO * d {
        // Eigenvectors of m m^T; resolution is limited to sqrt(eps) relative.
        let (values, vectors) = sorted_symmetric_eigen(&(m * m.transpose()));
        let sv: Vec<f64> = values.iter().map(|v| v.max(0.0).sqrt()).collect();
        let tol = sv[0] * eps.sqrt();
        return (vectors, sv, tol);
    }
    let svd = if k > 2 * d {
        // m = R^T Q^T, so the left singular vectors of m are those of R^T.
        let r = m.transpose().qr().r();
        SVD::new(r.transpose(), true, false)
    } else {
        SVD::new(m.clone(), true, false)
    };
    let u = svd.u.expect("left singular vectors requested");
    let n = svd.singular_values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .total_cmp(&svd.singular_values[i])
            .then(i.cmp(&j))
    });
    let mut sorted = DMatrix::zeros(u.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        sorted.set_column(dst, &u.column(src));
    }
    let values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let tol = values[0] * eps;
    (sorted, values, tol)
}

/// Flips each column so its largest-magnitude entry is positive; the lowest
/// index wins a magnitude tie.
pub fn orient_columns(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..m.nrows() {
            let a = m[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if m[(best, j)] < 0.0 {
            m.column_mut(j).neg_mut();
        }
    }
}

fn same_ambient(a: &Subspace, b: &Subspace) -> Result<()> {
    if a.ambient_dim() != b.ambient_dim() {
        return Err(GaeError::dims("subspace ambient dimension", a.ambient_dim(), b.ambient_dim()));
    }
    Ok(())
}

fn same_rank(a: &Subspace, b: &Subspace) -> Result<()> {
    if a.rank() != b.rank() {
        return Err(GaeError::dims("subspace rank", a.rank(), b.rank()));
    }
    Ok(())
}

/// Serializable summary of a subspace comparison, used in reports.
#[derive(Debug, Clone, Serialize)]
pub struct SubspaceComparison {
    pub distance: f64,
    pub overlap: f64,
    pub principal_angles: Vec<f64>,
}

impl SubspaceComparison {
    pub fn between(a: &Subspace, b: &Subspace) -> Result<Self> {
        Ok(Self {
            distance: projector_distance(a, b)?,
            overlap: subspace_overlap(a, b)?,
            principal_angles: principal_angles(a, b)?,
        })
    }
}
