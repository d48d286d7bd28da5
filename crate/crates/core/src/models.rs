//! The cross-impact model catalogue: pure maps `(Sigma, Omega, R) -> Lambda`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{
    self, factorize, inv_sqrt_pd, pd_eig, sqrt_psd, sym_eig, FactorKind, SymMatrix, PSD_TOL,
    ROUNDOFF_FLOOR,
};

/// Sufficient statistics of one market state: price-change covariance,
/// order-flow covariance and response (cross-covariance) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTriple {
    sigma: SymMatrix,
    omega: SymMatrix,
    response: DMatrix<f64>,
}

impl CovarianceTriple {
    /// Checks dimensions and that both covariances are PSD. Positive
    /// definiteness of `omega` is enforced by the models that invert it.
    pub fn new(sigma: SymMatrix, omega: SymMatrix, response: DMatrix<f64>) -> Result<Self> {
        let n = sigma.dim();
        if omega.dim() != n || response.nrows() != n || response.ncols() != n {
            return Err(Error::Shape(format!(
                "sigma is {n}x{n}, omega {}x{}, response {}x{}",
                omega.dim(),
                omega.dim(),
                response.nrows(),
                response.ncols()
            )));
        }
        for (name, m) in [("sigma", &sigma), ("omega", &omega)] {
            let eig = sym_eig(m);
            let max = eig.max_eigenvalue().max(0.0);
            if eig.min_eigenvalue() < -PSD_TOL * max || !eig.min_eigenvalue().is_finite() {
                return Err(Error::Validation(format!(
                    "{name} is not PSD (min eigenvalue {:.3e})",
                    eig.min_eigenvalue()
                )));
            }
        }
        if response.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("response has non-finite entries".into()));
        }
        Ok(Self {
            sigma,
            omega,
            response,
        })
    }

    /// Convenience constructor from plain matrices, checking symmetry.
    pub fn from_matrices(
        sigma: DMatrix<f64>,
        omega: DMatrix<f64>,
        response: DMatrix<f64>,
    ) -> Result<Self> {
        Self::new(SymMatrix::new(sigma)?, SymMatrix::new(omega)?, response)
    }

    pub fn n(&self) -> usize {
        self.sigma.dim()
    }

    pub fn sigma(&self) -> &SymMatrix {
        &self.sigma
    }

    pub fn omega(&self) -> &SymMatrix {
        &self.omega
    }

    pub fn response(&self) -> &DMatrix<f64> {
        &self.response
    }

    pub fn scales(&self) -> ScaleVectors {
        ScaleVectors {
            sigma: self.sigma.diag_sqrt(),
            omega: self.omega.diag_sqrt(),
        }
    }

    /// Largest `||R^T v|| / (||R|| ||v||)` over unit `v` spanning the numerical
    /// kernel of sigma (eigenvalues below `rel_tol * lambda_max`). Zero when
    /// sigma is non-singular.
    pub fn kernel_residual(&self, rel_tol: f64) -> f64 {
        let eig = sym_eig(&self.sigma);
        let cut = rel_tol * eig.max_eigenvalue().max(0.0);
        let rnorm = self.response.norm();
        if rnorm == 0.0 {
            return 0.0;
        }
        (0..self.n())
            .filter(|&a| eig.eigenvalues[a] <= cut)
            .map(|a| (self.response.transpose() * eig.vector(a)).norm() / rnorm)
            .fold(0.0, f64::max)
    }

    /// Restricts the triple to the listed assets.
    pub fn select(&self, idx: &[usize]) -> CovarianceTriple {
        let k = idx.len();
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(k, k, |i, j| m[(idx[i], idx[j])]);
        CovarianceTriple {
            sigma: SymMatrix::symmetrize(pick(&self.sigma)),
            omega: SymMatrix::symmetrize(pick(&self.omega)),
            response: pick(&self.response),
        }
    }

    /// Applies the same transform to all three statistics without
    /// re-validating. Callers guarantee the transform preserves PSD-ness.
    pub(crate) fn from_parts_unchecked(
        sigma: SymMatrix,
        omega: SymMatrix,
        response: DMatrix<f64>,
    ) -> Self {
        Self {
            sigma,
            omega,
            response,
        }
    }
}

/// Per-asset volatilities `sigma_i = sqrt(Sigma_ii)` and `omega_i = sqrt(Omega_ii)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVectors {
    pub sigma: DVector<f64>,
    pub omega: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// `diag(sigma) diag(omega)^{-1}`
    Direct,
    /// `diag(sigma)^{1/2} diag(omega)^{-1/2}`
    DirectSqrt,
    Whitening,
    El,
    Kyle,
    /// `diag(R_ii) diag(omega)^{-2}`
    RDirect,
    /// `diag(R_ii) diag(omega)^{-1}`
    RDirectLiteral,
    Ml,
    REl,
    RKyle,
}

impl Family {
    pub const ALL: [Family; 10] = [
        Family::Direct,
        Family::DirectSqrt,
        Family::Whitening,
        Family::El,
        Family::Kyle,
        Family::RDirect,
        Family::RDirectLiteral,
        Family::Ml,
        Family::REl,
        Family::RKyle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Direct => "direct",
            Family::DirectSqrt => "direct-sqrt",
            Family::Whitening => "whitening",
            Family::El => "el",
            Family::Kyle => "kyle",
            Family::RDirect => "r-direct",
            Family::RDirectLiteral => "r-direct-literal",
            Family::Ml => "ml",
            Family::REl => "r-el",
            Family::RKyle => "r-kyle",
        }
    }

    /// Families whose output is symmetric for every input.
    pub fn is_symmetric(self) -> bool {
        !matches!(self, Family::Whitening | Family::Ml)
    }

    /// Families with `Lambda Pi_V = 0` whenever `V` lies in ker(Sigma); the
    /// star transform can then drop zero-volatility assets.
    pub fn drops_zero_volatility(self) -> bool {
        matches!(self, Family::El | Family::Kyle | Family::REl | Family::RKyle)
    }

    /// Whether the family is unchanged by the star transform.
    pub fn is_split_invariant(self) -> bool {
        matches!(
            self,
            Family::Direct | Family::Kyle | Family::RDirect | Family::Ml | Family::RKyle
        )
    }
}

/// A model of the catalogue, optionally wrapped in the star transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelId {
    pub family: Family,
    pub starred: bool,
}

impl ModelId {
    pub const fn plain(family: Family) -> Self {
        Self {
            family,
            starred: false,
        }
    }

    pub const fn star(family: Family) -> Self {
        Self {
            family,
            starred: true,
        }
    }

    /// The eleven models of the reference axiom table, in table order.
    pub fn catalogue() -> Vec<ModelId> {
        use Family::*;
        vec![
            Self::plain(Direct),
            Self::plain(Whitening),
            Self::star(Whitening),
            Self::plain(El),
            Self::star(El),
            Self::plain(Kyle),
            Self::plain(RDirect),
            Self::plain(Ml),
            Self::plain(REl),
            Self::star(REl),
            Self::plain(RKyle),
        ]
    }

    /// Catalogue plus the literal-print diagonal variants.
    pub fn extended_catalogue() -> Vec<ModelId> {
        let mut v = Self::catalogue();
        v.insert(1, Self::plain(Family::DirectSqrt));
        v.insert(8, Self::plain(Family::RDirectLiteral));
        v
    }

    pub fn is_symmetric(self) -> bool {
        self.family.is_symmetric()
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.family.name(), if self.starred { "*" } else { "" })
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (base, starred) = if let Some(b) = s.strip_suffix('*') {
            (b, true)
        } else if let Some(b) = s.strip_suffix("-star") {
            (b, true)
        } else {
            (s, false)
        };
        let family = Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == base)
            .ok_or_else(|| Error::Validation(format!("unknown model '{s}'")))?;
        Ok(ModelId { family, starred })
    }
}

impl Serialize for ModelId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A model evaluated on one triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactMatrix {
    pub lambda: DMatrix<f64>,
    pub model: ModelId,
}

impl ImpactMatrix {
    pub fn n(&self) -> usize {
        self.lambda.nrows()
    }
}

/// Literal printed form versus the form consistent with the cash and split
/// symmetries, for the two diagonal models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagonalForm {
    Consistent,
    Literal,
}

fn positive_omega(t: &CovarianceTriple) -> Result<DVector<f64>> {
    let w = t.scales().omega;
    if let Some(i) = w.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::DegenerateLiquidity { asset: i });
    }
    Ok(w)
}

pub fn direct(t: &CovarianceTriple, form: DiagonalForm) -> Result<DMatrix<f64>> {
    let w = positive_omega(t)?;
    let s = t.scales().sigma;
    let d = DVector::from_fn(t.n(), |i, _| match form {
        DiagonalForm::Consistent => s[i] / w[i],
        DiagonalForm::Literal => (s[i] / w[i]).sqrt(),
    });
    Ok(DMatrix::from_diagonal(&d))
}

pub fn whitening(t: &CovarianceTriple) -> Result<DMatrix<f64>> {
    let root = sqrt_psd(t.sigma())?;
    let inv_root = inv_sqrt_pd(t.omega())?;
    Ok(root.matrix() * inv_root.matrix())
}

pub fn el(t: &CovarianceTriple) -> Result<DMatrix<f64>> {
    pd_eig(t.omega())?;
    let eig = sym_eig(t.sigma());
    let scale = eig.max_eigenvalue().max(0.0);
    let mut out = DMatrix::zeros(t.n(), t.n());
    for a in 0..t.n() {
        let root = matops::root_of(eig.eigenvalues[a], scale);
        if root == 0.0 {
            continue;
        }
        let s = eig.vector(a);
        let liquidity = (s.transpose() * t.omega().matrix() * &s)[(0, 0)];
        out += &s * s.transpose() * (root / liquidity.sqrt());
    }
    Ok(SymMatrix::symmetrize(out).into_inner())
}

/// `L^{-T} sqrt(L^T Sigma L) L^{-1}` for `Omega = L L^T`.
pub fn kyle(t: &CovarianceTriple) -> Result<DMatrix<f64>> {
    kyle_with(t, FactorKind::SymmetricRoot)
}

pub fn kyle_with(t: &CovarianceTriple, kind: FactorKind) -> Result<DMatrix<f64>> {
    pd_eig(t.omega())?;
    let f = factorize(t.omega(), kind)?;
    let inv = f.inverse()?;
    let inner = t.sigma().congruence(&f.l.transpose());
    let root = sqrt_psd(&inner)?;
    Ok(SymMatrix::symmetrize(inv.transpose() * root.matrix() * &inv).into_inner())
}

pub fn r_direct(t: &CovarianceTriple, form: DiagonalForm) -> Result<DMatrix<f64>> {
    let w = positive_omega(t)?;
    let r = t.response();
    let d = DVector::from_fn(t.n(), |i, _| match form {
        DiagonalForm::Consistent => r[(i, i)] / (w[i] * w[i]),
        DiagonalForm::Literal => r[(i, i)] / w[i],
    });
    Ok(DMatrix::from_diagonal(&d))
}

pub fn ml(t: &CovarianceTriple) -> Result<DMatrix<f64>> {
    let inv = matops::inv_pd(t.omega())?;
    Ok(t.response() * inv.matrix())
}

pub fn r_el(t: &CovarianceTriple) -> Result<DMatrix<f64>> {
    pd_eig(t.omega())?;
    let eig = sym_eig(t.sigma());
    let mut out = DMatrix::zeros(t.n(), t.n());
    for a in 0..t.n() {
        let s = eig.vector(a);
        let num = (s.transpose() * t.response() * &s)[(0, 0)];
        let den = (s.transpose() * t.omega().matrix() * &s)[(0, 0)];
        out += &s * s.transpose() * (num / den);
    }
    Ok(SymMatrix::symmetrize(out).into_inner())
}

/// `L^{-T} sqrt(L^T R Omega^{-1} R^T L) L^{-1}`. The inner matrix is `G G^T`
/// with `G = L^T R L^{-T}`. Its root is `sum_i s_i u_i u_i^T` over the
/// eigenvectors `u_i` of `G G^T`, with `s_i = |G^T u_i|` rather than the root
/// of the eigenvalue: small roots then keep full relative precision instead
/// of half of it.
pub fn r_kyle(t: &CovarianceTriple) -> Result<DMatrix<f64>> {
    r_kyle_with(t, FactorKind::SymmetricRoot)
}

pub fn r_kyle_with(t: &CovarianceTriple, kind: FactorKind) -> Result<DMatrix<f64>> {
    pd_eig(t.omega())?;
    let f = factorize(t.omega(), kind)?;
    let inv = f.inverse()?;
    let g = f.l.transpose() * t.response() * inv.transpose();
    let eig = sym_eig(&SymMatrix::symmetrize(&g * g.transpose()));
    let u = &eig.eigenvectors;
    let s = DVector::from_fn(u.ncols(), |i, _| (g.transpose() * u.column(i)).norm());
    let top = s.max();
    let s = s.map(|x| if x <= ROUNDOFF_FLOOR * top { 0.0 } else { x });
    let root = u * DMatrix::from_diagonal(&s) * u.transpose();
    Ok(SymMatrix::symmetrize(inv.transpose() * root * &inv).into_inner())
}

fn evaluate_family(family: Family, t: &CovarianceTriple) -> Result<DMatrix<f64>> {
    match family {
        Family::Direct => direct(t, DiagonalForm::Consistent),
        Family::DirectSqrt => direct(t, DiagonalForm::Literal),
        Family::Whitening => whitening(t),
        Family::El => el(t),
        Family::Kyle => kyle(t),
        Family::RDirect => r_direct(t, DiagonalForm::Consistent),
        Family::RDirectLiteral => r_direct(t, DiagonalForm::Literal),
        Family::Ml => ml(t),
        Family::REl => r_el(t),
        Family::RKyle => r_kyle(t),
    }
}

/// `diag(sigma) Lambda(rho, Omega*, R*) diag(sigma)` with
/// `Omega* = diag(sigma) Omega diag(sigma)` and `R* = diag(sigma)^{-1} R diag(sigma)`.
///
/// Zero-volatility assets are removed before rescaling when the base family
/// annihilates zero-volatility directions; their rows and columns of the
/// result are zero. Other families report [`Error::ZeroVolatility`].
pub fn star_transform(base: Family, t: &CovarianceTriple) -> Result<DMatrix<f64>> {
    let sig = t.scales().sigma;
    let scale = sig.amax();
    let live: Vec<usize> = (0..t.n()).filter(|&i| sig[i] > 1e-150 * scale.max(1e-300)).collect();
    if live.len() < t.n() {
        if !base.drops_zero_volatility() {
            let asset = (0..t.n()).find(|i| !live.contains(i)).unwrap_or(0);
            return Err(Error::ZeroVolatility { asset });
        }
        let mut out = DMatrix::zeros(t.n(), t.n());
        if live.is_empty() {
            return Ok(out);
        }
        let sub = star_transform(base, &t.select(&live))?;
        for (a, &i) in live.iter().enumerate() {
            for (b, &j) in live.iter().enumerate() {
                out[(i, j)] = sub[(a, b)];
            }
        }
        return Ok(out);
    }
    let d = DMatrix::from_diagonal(&sig);
    let d_inv = DMatrix::from_diagonal(&sig.map(|x| 1.0 / x));
    let rho = t.sigma().congruence(&d_inv);
    let omega_star = t.omega().congruence(&d);
    let r_star = &d_inv * t.response() * &d;
    let inner = CovarianceTriple::from_parts_unchecked(rho, omega_star, r_star);
    let lam = evaluate_family(base, &inner)?;
    Ok(&d * lam * &d)
}

pub fn evaluate(model: ModelId, t: &CovarianceTriple) -> Result<ImpactMatrix> {
    let lambda = if model.starred {
        star_transform(model.family, t)?
    } else {
        evaluate_family(model.family, t)?
    };
    if lambda.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation(format!("{model} produced non-finite entries")));
    }
    Ok(ImpactMatrix { lambda, model })
}

/// Predicted price change `Lambda q`.
pub fn predict(lambda: &ImpactMatrix, q: &DVector<f64>) -> Result<DVector<f64>> {
    if q.len() != lambda.n() {
        return Err(Error::Shape(format!(
            "flow vector has {} entries, impact matrix is {}x{}",
            q.len(),
            lambda.n(),
            lambda.n()
        )));
    }
    Ok(&lambda.lambda * q)
}

/// Expected impact cost `xi^T Lambda xi` of trading the portfolio `xi`.
pub fn expected_cost(lambda: &ImpactMatrix, xi: &DVector<f64>) -> Result<f64> {
    if xi.len() != lambda.n() {
        return Err(Error::Shape(format!(
            "portfolio has {} entries, impact matrix is {}x{}",
            xi.len(),
            lambda.n(),
            lambda.n()
        )));
    }
    Ok(xi.dot(&(&lambda.lambda * xi)))
}

/// True when two eigenvalues of sigma are closer than `1e-10 * lambda_max`,
/// in which case r-el depends on the eigenbasis chosen inside the tie.
pub fn degenerate_spectrum(sigma: &SymMatrix) -> bool {
    let eig = sym_eig(sigma);
    let tol = 1e-10 * eig.max_eigenvalue().abs();
    eig.eigenvalues
        .as_slice()
        .windows(2)
        .any(|w| (w[0] - w[1]).abs() < tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matops::rel_diff;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    fn triple(s: DMatrix<f64>, o: DMatrix<f64>, r: DMatrix<f64>) -> CovarianceTriple {
        CovarianceTriple::from_matrices(s, o, r).unwrap()
    }

    #[test]
    fn direct_variants() {
        let t = triple(diag(&[16.0, 1.0]), diag(&[1.0, 1.0]), diag(&[1.0, 1.0]));
        assert_eq!(direct(&t, DiagonalForm::Consistent).unwrap(), diag(&[4.0, 1.0]));
        assert_eq!(direct(&t, DiagonalForm::Literal).unwrap(), diag(&[2.0, 1.0]));
        let t = triple(diag(&[1.0, 1.0]), diag(&[16.0, 1.0]), diag(&[1.0, 1.0]));
        assert_eq!(direct(&t, DiagonalForm::Consistent).unwrap(), diag(&[0.25, 1.0]));
    }

    #[test]
    fn zero_liquidity_is_degenerate() {
        let t = triple(diag(&[1.0, 1.0]), diag(&[1.0, 0.0]), diag(&[1.0, 1.0]));
        assert!(matches!(
            direct(&t, DiagonalForm::Consistent),
            Err(Error::DegenerateLiquidity { asset: 1 })
        ));
        assert!(matches!(ml(&t), Err(Error::NotPd { .. })));
        assert!(matches!(kyle(&t), Err(Error::NotPd { .. })));
    }

    #[test]
    fn whitening_examples() {
        let t = triple(diag(&[4.0, 1.0]), diag(&[1.0, 1.0]), diag(&[0.0, 0.0]));
        assert!(rel_diff(&whitening(&t).unwrap(), &diag(&[2.0, 1.0])) < 1e-15);
        let t = triple(diag(&[1.0, 1.0]), diag(&[4.0, 1.0]), diag(&[0.0, 0.0]));
        assert!(rel_diff(&whitening(&t).unwrap(), &diag(&[0.5, 1.0])) < 1e-15);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let t = triple(s.clone(), diag(&[1.0, 1.0]), diag(&[0.0, 0.0]));
        let root = sqrt_psd(&SymMatrix::new(s).unwrap()).unwrap();
        assert!(rel_diff(&whitening(&t).unwrap(), &root) < 1e-14);
    }

    #[test]
    fn el_examples() {
        let t = triple(diag(&[4.0, 1.0]), diag(&[1.0, 1.0]), diag(&[0.0, 0.0]));
        assert!(rel_diff(&el(&t).unwrap(), &diag(&[2.0, 1.0])) < 1e-15);
        // eigenpairs 3 along (1,1)/sqrt2 and 1 along (1,-1)/sqrt2
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let t = triple(s, diag(&[1.0, 1.0]), diag(&[0.0, 0.0]));
        let (a, b) = ((3f64.sqrt() + 1.0) / 2.0, (3f64.sqrt() - 1.0) / 2.0);
        let want = DMatrix::from_row_slice(2, 2, &[a, b, b, a]);
        assert!(rel_diff(&el(&t).unwrap(), &want) < 1e-14);
        // kernel direction is annihilated
        let v = DVector::from_vec(vec![1.0, -1.0]) / 2f64.sqrt();
        let s = DMatrix::from_element(2, 2, 1.0);
        let o = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let t = triple(s, o, diag(&[0.0, 0.0]));
        assert!((el(&t).unwrap() * v).norm() < 1e-15);
    }

    #[test]
    fn kyle_examples() {
        let t = triple(diag(&[4.0, 1.0]), diag(&[1.0, 1.0]), diag(&[0.0, 0.0]));
        assert!(rel_diff(&kyle(&t).unwrap(), &diag(&[2.0, 1.0])) < 1e-15);
        let t = triple(diag(&[1.0, 1.0]), diag(&[4.0, 1.0]), diag(&[0.0, 0.0]));
        assert!(rel_diff(&kyle(&t).unwrap(), &diag(&[0.5, 1.0])) < 1e-15);
    }

    #[test]
    fn r_direct_examples() {
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 5.0, -7.0, 3.0]);
        let t = triple(diag(&[1.0, 1.0]), diag(&[1.0, 1.0]), r.clone());
        assert_eq!(r_direct(&t, DiagonalForm::Consistent).unwrap(), diag(&[2.0, 3.0]));
        assert_eq!(r_direct(&t, DiagonalForm::Literal).unwrap(), diag(&[2.0, 3.0]));
        let t = triple(diag(&[1.0, 1.0]), diag(&[4.0, 9.0]), diag(&[2.0, 3.0]));
        assert_eq!(r_direct(&t, DiagonalForm::Literal).unwrap(), diag(&[1.0, 1.0]));
        let c = r_direct(&t, DiagonalForm::Consistent).unwrap();
        assert!(rel_diff(&c, &diag(&[0.5, 1.0 / 3.0])) < 1e-15);
    }

    #[test]
    fn ml_examples() {
        let t = triple(diag(&[1.0, 1.0]), diag(&[4.0, 1.0]), diag(&[1.0, 1.0]));
        assert!(rel_diff(&ml(&t).unwrap(), &diag(&[0.25, 1.0])) < 1e-15);
        let lam = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, -0.2, 2.0]);
        let o = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let t = triple(diag(&[1.0, 1.0]), o.clone(), &lam * &o);
        assert!(rel_diff(&ml(&t).unwrap(), &lam) < 1e-14);
    }

    #[test]
    fn r_el_examples() {
        let t = triple(diag(&[4.0, 1.0]), diag(&[1.0, 1.0]), diag(&[2.0, 3.0]));
        assert!(rel_diff(&r_el(&t).unwrap(), &diag(&[2.0, 3.0])) < 1e-15);
        let o = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let t = triple(s, o.clone(), o);
        assert!(rel_diff(&r_el(&t).unwrap(), &DMatrix::identity(2, 2)) < 1e-14);
        // all diagonal: r-el coincides with ml
        let t = triple(diag(&[3.0, 1.0, 2.0]), diag(&[2.0, 5.0, 1.0]), diag(&[1.0, -2.0, 0.5]));
        assert!(rel_diff(&r_el(&t).unwrap(), &ml(&t).unwrap()) < 1e-15);
    }

    #[test]
    fn r_kyle_examples() {
        let t = triple(diag(&[1.0, 1.0]), diag(&[1.0, 1.0]), diag(&[2.0, 3.0]));
        assert!(rel_diff(&r_kyle(&t).unwrap(), &diag(&[2.0, 3.0])) < 1e-15);
        // symmetric R with identity Omega gives |R|
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let t = triple(diag(&[1.0, 1.0]), diag(&[1.0, 1.0]), r.clone());
        let abs = sqrt_psd(&SymMatrix::symmetrize(&r * &r)).unwrap();
        assert!(rel_diff(&r_kyle(&t).unwrap(), &abs) < 1e-14);
    }

    #[test]
    fn star_el_diagonal_case() {
        let t = triple(diag(&[4.0, 1.0]), diag(&[1.0, 1.0]), diag(&[0.0, 0.0]));
        let got = evaluate(ModelId::star(Family::El), &t).unwrap();
        assert!(rel_diff(&got.lambda, &diag(&[2.0, 1.0])) < 1e-15);
    }

    #[test]
    fn star_zero_volatility() {
        let t = triple(diag(&[4.0, 0.0]), diag(&[1.0, 2.0]), diag(&[1.0, 0.0]));
        assert!(matches!(
            star_transform(Family::Whitening, &t),
            Err(Error::ZeroVolatility { asset: 1 })
        ));
        let k = star_transform(Family::Kyle, &t).unwrap();
        assert!(rel_diff(&k, &kyle(&t).unwrap()) < 1e-14);
    }

    #[test]
    fn predict_and_cost() {
        let l = ImpactMatrix {
            lambda: diag(&[2.0, 1.0]),
            model: ModelId::plain(Family::Kyle),
        };
        let q = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(predict(&l, &q).unwrap(), DVector::from_vec(vec![2.0, 0.0]));
        assert_eq!(predict(&l, &DVector::zeros(2)).unwrap(), DVector::zeros(2));
        let id = ImpactMatrix {
            lambda: DMatrix::identity(2, 2),
            model: l.model,
        };
        assert_eq!(
            predict(&id, &DVector::from_vec(vec![1.0, 2.0])).unwrap(),
            DVector::from_vec(vec![1.0, 2.0])
        );
        assert_eq!(expected_cost(&l, &DVector::from_vec(vec![1.0, 1.0])).unwrap(), 3.0);
        assert_eq!(expected_cost(&l, &DVector::zeros(2)).unwrap(), 0.0);
        assert!(matches!(predict(&l, &DVector::zeros(3)), Err(Error::Shape(_))));
        assert!(matches!(expected_cost(&l, &DVector::zeros(1)), Err(Error::Shape(_))));
    }

    #[test]
    fn model_names_round_trip() {
        for m in ModelId::extended_catalogue() {
            assert_eq!(m.to_string().parse::<ModelId>().unwrap(), m);
        }
        assert_eq!("el-star".parse::<ModelId>().unwrap(), ModelId::star(Family::El));
        assert!("bogus".parse::<ModelId>().is_err());
    }

    #[test]
    fn degenerate_spectrum_flag() {
        assert!(degenerate_spectrum(&SymMatrix::identity(3)));
        assert!(!degenerate_spectrum(&SymMatrix::from_diagonal(&[3.0, 2.0, 1.0])));
    }
}
