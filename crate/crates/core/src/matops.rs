//! Dense symmetric linear algebra used by every model.
//!
//! The eigensolver is nalgebra's symmetric QR iteration; everything else
//! (square roots, inverse roots, pseudo-inverses, clipping) is built on top
//! of [`sym_eig`] so that a single sign/sort convention applies everywhere.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative asymmetry accepted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalues above `-PSD_TOL * lambda_max` are treated as round-off and clipped to zero.
pub const PSD_TOL: f64 = 1e-12;

/// Eigenvalues below `ROUNDOFF_FLOOR * lambda_max` carry no information at double
/// precision; square roots map them to zero instead of amplifying noise to
/// `sqrt(eps)`.
pub const ROUNDOFF_FLOOR: f64 = 64.0 * f64::EPSILON;

/// Square symmetric matrix. Construction through [`SymMatrix::new`] checks
/// symmetry and then stores the exactly symmetrized value.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Shape(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::Shape("empty matrix".into()));
        }
        let scale = m.amax();
        let asym = (&m - m.transpose()).amax();
        let rel = if scale > 0.0 { asym / scale } else { 0.0 };
        if rel > SYMMETRY_TOL || !rel.is_finite() {
            return Err(Error::SymmetryViolation { asymmetry: rel });
        }
        Ok(Self::symmetrize(m))
    }

    /// Returns `(m + m^T) / 2` without checking how asymmetric `m` was.
    /// Meant for results that are symmetric in exact arithmetic.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "symmetrize needs a square matrix");
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    /// Builds from a row-major slice, checking symmetry.
    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, n, data))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// `A M A^T`, symmetrized.
    pub fn congruence(&self, a: &DMatrix<f64>) -> SymMatrix {
        SymMatrix::symmetrize(a * &self.0 * a.transpose())
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix(&self.0 * c)
    }

    /// Square roots of the diagonal entries (negative round-off is clamped to 0).
    pub fn diag_sqrt(&self) -> DVector<f64> {
        self.0.diagonal().map(|x| x.max(0.0).sqrt())
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Eigendecomposition `M = sum_a s_a lambda_a s_a^T` with eigenvalues sorted
/// descending and each eigenvector's first non-negligible component positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EigDecomp {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigDecomp {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.dim() - 1]
    }

    /// Eigenvector `a` as a column vector.
    pub fn vector(&self, a: usize) -> DVector<f64> {
        self.eigenvectors.column(a).into_owned()
    }

    /// `sum_a s_a f(lambda_a) s_a^T`.
    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> SymMatrix {
        let n = self.dim();
        let mut scaled = self.eigenvectors.clone();
        for a in 0..n {
            let w = f(self.eigenvalues[a]);
            scaled.column_mut(a).scale_mut(w);
        }
        SymMatrix::symmetrize(scaled * self.eigenvectors.transpose())
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map(|l| l)
    }

    /// Largest eigenvalue clamped at zero, used as the scale for relative
    /// eigenvalue tolerances.
    fn scale(&self) -> f64 {
        self.max_eigenvalue().max(0.0)
    }
}

pub fn sym_eig(m: &SymMatrix) -> EigDecomp {
    let n = m.dim();
    let eig = m.matrix().clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col.iter().copied().find(|x| x.abs() > 1e-10).unwrap_or(0.0);
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    EigDecomp {
        eigenvalues: values,
        eigenvectors: vectors,
    }
}

/// Checks that `eig` is PSD within [`PSD_TOL`].
fn require_psd(eig: &EigDecomp) -> Result<()> {
    let max = eig.scale();
    let min = eig.min_eigenvalue();
    if min < -PSD_TOL * max || (max == 0.0 && min < 0.0) || !min.is_finite() {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
            max_eigenvalue: eig.max_eigenvalue(),
        });
    }
    Ok(())
}

/// Eigendecomposition of a matrix required to be positive definite.
pub fn pd_eig(m: &SymMatrix) -> Result<EigDecomp> {
    let eig = sym_eig(m);
    let max = eig.max_eigenvalue();
    let min = eig.min_eigenvalue();
    if !(min > ROUNDOFF_FLOOR * max) || !max.is_finite() {
        return Err(Error::NotPd {
            min_eigenvalue: min,
            max_eigenvalue: max,
        });
    }
    Ok(eig)
}

/// Square root of an eigenvalue with round-off clipping relative to `scale`.
pub(crate) fn root_of(lambda: f64, scale: f64) -> f64 {
    if lambda <= ROUNDOFF_FLOOR * scale {
        0.0
    } else {
        lambda.sqrt()
    }
}

/// The unique symmetric PSD square root.
pub fn sqrt_psd(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(m);
    require_psd(&eig)?;
    Ok(sqrt_from_eig(&eig))
}

pub(crate) fn sqrt_from_eig(eig: &EigDecomp) -> SymMatrix {
    let scale = eig.scale();
    eig.map(|l| root_of(l, scale))
}

/// `(sqrt M)^{-1}` for positive definite `M`.
pub fn inv_sqrt_pd(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = pd_eig(m)?;
    Ok(eig.map(|l| 1.0 / l.sqrt()))
}

/// `M^{-1}` for positive definite `M`, via its eigendecomposition.
pub fn inv_pd(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = pd_eig(m)?;
    Ok(eig.map(|l| 1.0 / l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    SymmetricRoot,
    Triangular,
}

/// A factor `L` with `L L^T = M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub l: DMatrix<f64>,
    pub kind: FactorKind,
}

impl Factor {
    /// `L^{-1}`. Only defined when the factored matrix is positive definite.
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        let n = self.l.nrows();
        let inv = match self.kind {
            FactorKind::Triangular => self
                .l
                .solve_lower_triangular(&DMatrix::identity(n, n)),
            FactorKind::SymmetricRoot => self.l.clone().try_inverse(),
        };
        inv.ok_or(Error::NotPd {
            min_eigenvalue: 0.0,
            max_eigenvalue: self.l.amax().powi(2),
        })
    }
}

pub fn factorize(m: &SymMatrix, kind: FactorKind) -> Result<Factor> {
    match kind {
        FactorKind::SymmetricRoot => Ok(Factor {
            l: sqrt_psd(m)?.into_inner(),
            kind,
        }),
        FactorKind::Triangular => {
            let chol = m.matrix().clone().cholesky().ok_or_else(|| {
                let eig = sym_eig(m);
                Error::NotPd {
                    min_eigenvalue: eig.min_eigenvalue(),
                    max_eigenvalue: eig.max_eigenvalue(),
                }
            })?;
            Ok(Factor {
                l: chol.l(),
                kind,
            })
        }
    }
}

/// Moore-Penrose pseudo-inverse restricted to eigenvalues above
/// `rel_cutoff * lambda_max`. The zero matrix maps to the zero matrix.
pub fn pinv_psd(m: &SymMatrix, rel_cutoff: f64) -> SymMatrix {
    let eig = sym_eig(m);
    let cut = rel_cutoff * eig.scale();
    eig.map(|l| if l > cut && l > 0.0 { 1.0 / l } else { 0.0 })
}

/// Replaces every eigenvalue by `max(lambda, floor)`. Matrices already above
/// the floor are returned unchanged.
pub fn clip_psd(m: &SymMatrix, floor: f64) -> SymMatrix {
    let eig = sym_eig(m);
    if eig.min_eigenvalue() >= floor {
        return m.clone();
    }
    eig.map(|l| l.max(floor))
}

/// Orthogonal projector onto the span of an orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub p: SymMatrix,
    pub basis: DMatrix<f64>,
}

impl Projector {
    pub fn dim(&self) -> usize {
        self.p.dim()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// `id - P`.
    pub fn complement(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) - self.p.matrix()
    }

    /// `(id - P) + eps * P`, the liquidity/price scaling along the subspace.
    pub fn blend(&self, eps: f64) -> DMatrix<f64> {
        if eps == 1.0 {
            return DMatrix::identity(self.dim(), self.dim());
        }
        self.complement() + self.p.matrix() * eps
    }

    /// Projector onto the coordinates listed in `indices`.
    pub fn coordinate(n: usize, indices: &[usize]) -> Result<Projector> {
        let mut basis = DMatrix::zeros(n, indices.len());
        for (c, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(Error::Basis(format!("coordinate {i} out of range for n={n}")));
            }
            basis[(i, c)] = 1.0;
        }
        projector(&basis)
    }
}

pub fn projector(basis: &DMatrix<f64>) -> Result<Projector> {
    let k = basis.ncols();
    let gram = basis.transpose() * basis;
    let err = (gram - DMatrix::<f64>::identity(k, k)).amax();
    if err > 1e-10 || !err.is_finite() {
        return Err(Error::Basis(format!(
            "columns are not orthonormal (max Gram error {err:.3e})"
        )));
    }
    if k > basis.nrows() {
        return Err(Error::Basis(format!(
            "{k} basis vectors in dimension {}",
            basis.nrows()
        )));
    }
    Ok(Projector {
        p: SymMatrix::symmetrize(basis * basis.transpose()),
        basis: basis.clone(),
    })
}

/// `||a - b||_F / ||b||_F`, or the absolute distance when `b` vanishes.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d = (a - b).norm();
    let s = b.norm();
    if s > 0.0 {
        d / s
    } else {
        d
    }
}
