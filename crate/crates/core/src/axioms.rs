//! Numerical axiom checks: each axiom is tested on randomized triples drawn
//! from per-trial seeds, and a verdict records the worst residual seen.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{
    factorize, projector, rel_diff, sym_eig, FactorKind, Projector, SymMatrix,
};
use crate::models::{self, CovarianceTriple, Family, ModelId};
use crate::sampling::{
    derive_seed, gaussian_matrix, gaussian_vector, haar_orthogonal, log_uniform, permutation,
    random_psd, rng, spectrum,
};

/// Residuals at or below this level are indistinguishable from round-off.
pub const NOISE_FLOOR: f64 = 1e-10;

/// Block-norm slopes below `-SLOPE_THRESHOLD` count as divergent.
pub const SLOPE_THRESHOLD: f64 = 0.2;

#[allow(clippy::upper_case_acronyms)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AxiomId {
    PI,
    DI,
    CI,
    SI,
    RI,
    SA,
    DA,
    WFI,
    SSFI,
    SFI,
    WCS,
    SCS,
    SS,
    PCC,
}

impl AxiomId {
    pub const ALL: [AxiomId; 14] = [
        AxiomId::PI,
        AxiomId::DI,
        AxiomId::CI,
        AxiomId::SI,
        AxiomId::RI,
        AxiomId::SA,
        AxiomId::DA,
        AxiomId::WFI,
        AxiomId::SSFI,
        AxiomId::SFI,
        AxiomId::WCS,
        AxiomId::SCS,
        AxiomId::SS,
        AxiomId::PCC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AxiomId::PI => "PI",
            AxiomId::DI => "DI",
            AxiomId::CI => "CI",
            AxiomId::SI => "SI",
            AxiomId::RI => "RI",
            AxiomId::SA => "SA",
            AxiomId::DA => "DA",
            AxiomId::WFI => "WFI",
            AxiomId::SSFI => "SSFI",
            AxiomId::SFI => "SFI",
            AxiomId::WCS => "WCS",
            AxiomId::SCS => "SCS",
            AxiomId::SS => "SS",
            AxiomId::PCC => "PCC",
        }
    }

    fn index(self) -> u64 {
        AxiomId::ALL.iter().position(|&a| a == self).unwrap_or(0) as u64
    }

    fn is_stability(self) -> bool {
        matches!(self, AxiomId::WCS | AxiomId::SCS | AxiomId::SS)
    }
}

impl fmt::Display for AxiomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AxiomId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AxiomId::ALL
            .iter()
            .copied()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Validation(format!("unknown axiom '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumProfile {
    Well,
    Ill,
}

impl SpectrumProfile {
    pub fn condition(self) -> f64 {
        match self {
            SpectrumProfile::Well => 10.0,
            SpectrumProfile::Ill => 1e6,
        }
    }

    fn for_trial(k: usize) -> Self {
        if k.is_multiple_of(2) {
            SpectrumProfile::Well
        } else {
            SpectrumProfile::Ill
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub n: usize,
    pub trials: usize,
    pub tol: f64,
    pub seed: u64,
    pub eps_ladder: Vec<f64>,
    pub kernel_dim: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            n: 4,
            trials: 100,
            tol: 1e-8,
            seed: 0,
            eps_ladder: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            kernel_dim: 1,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Validation("n must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Validation("trials must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Validation(format!("tol must be positive, got {}", self.tol)));
        }
        let l = &self.eps_ladder;
        if l.len() < 4 {
            return Err(Error::Validation("eps ladder needs at least 4 points".into()));
        }
        if l.windows(2).any(|w| !(w[1] < w[0])) || l[0] > 1.0 {
            return Err(Error::Validation(
                "eps ladder must be strictly decreasing and at most 1".into(),
            ));
        }
        if *l.last().unwrap() < 1e-8 {
            return Err(Error::Validation("smallest eps must be at least 1e-8".into()));
        }
        if self.kernel_dim == 0 {
            return Err(Error::Validation("kernel_dim must be at least 1".into()));
        }
        Ok(())
    }

    fn trial_seed(&self, axiom: AxiomId, trial: usize) -> u64 {
        derive_seed(self.seed, (axiom.index() << 32) | trial as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Satisfied,
    Violated,
    Inconclusive,
}

/// Enough to regenerate the worst trial: the trial index and its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub trial: usize,
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomVerdict {
    pub model: ModelId,
    pub axiom: AxiomId,
    pub verdict: Verdict,
    pub worst_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl AxiomVerdict {
    pub fn satisfied(&self) -> bool {
        self.verdict == Verdict::Satisfied
    }
}

/// Random triple with PD `Sigma` (condition set by `profile`), PD `Omega`
/// (condition 10) and
/// `R = Lambda0 Omega` for a random non-symmetric `Lambda0`, adjusted so that
/// every asset's own response `R_ii` is positive.
pub fn gen_triple(n: usize, seed: u64, profile: SpectrumProfile) -> CovarianceTriple {
    let mut r = rng(seed);
    let cond = profile.condition();
    let s_top = log_uniform(&mut r, 0.5, 2.0);
    let s_spec = spectrum(&mut r, n, s_top, cond);
    let sigma = random_psd(&mut r, &s_spec);
    let o_top = log_uniform(&mut r, 0.5, 2.0);
    let o_spec = spectrum(&mut r, n, o_top, SpectrumProfile::Well.condition());
    let omega = random_psd(&mut r, &o_spec);
    let lambda0 = gaussian_matrix(&mut r, n, n);
    let mut response = lambda0 * &omega;
    for i in 0..n {
        response[(i, i)] = response[(i, i)].abs();
    }
    CovarianceTriple::from_parts_unchecked(
        SymMatrix::symmetrize(sigma),
        SymMatrix::symmetrize(omega),
        response,
    )
}

/// Triple whose `Sigma` vanishes exactly on the given subspace, with
/// `R = (id - P) Lambda0 Omega` so that `ker(Sigma)` lies in `ker(R^T)`.
pub fn kernel_triple_for(proj: &Projector, seed: u64) -> Result<CovarianceTriple> {
    let n = proj.dim();
    let k = proj.rank();
    if k == 0 || k >= n {
        return Err(Error::Basis(format!("kernel dimension {k} must lie in [1, {n})")));
    }
    let mut r = rng(seed);
    // orthonormal basis of the complement
    let comp = proj.complement();
    let eig = sym_eig(&SymMatrix::symmetrize(comp.clone()));
    let b = eig.eigenvectors.columns(0, n - k).into_owned();
    let top = log_uniform(&mut r, 0.5, 2.0);
    let lam = spectrum(&mut r, n - k, top, 10.0);
    let sigma = &b * DMatrix::from_diagonal(&DVector::from_vec(lam)) * b.transpose();
    let top = log_uniform(&mut r, 0.5, 2.0);
    let o_spec = spectrum(&mut r, n, top, 10.0);
    let omega = random_psd(&mut r, &o_spec);
    let response = &comp * gaussian_matrix(&mut r, n, n) * &omega;
    Ok(CovarianceTriple::from_parts_unchecked(
        SymMatrix::symmetrize(sigma),
        SymMatrix::symmetrize(omega),
        response,
    ))
}

/// Random `kernel_dim`-dimensional `V` in general position and a triple with
/// `V` inside `ker(Sigma)`.
pub fn gen_kernel_triple(
    n: usize,
    kernel_dim: usize,
    seed: u64,
) -> Result<(CovarianceTriple, Projector)> {
    if kernel_dim == 0 || kernel_dim >= n {
        return Err(Error::Basis(format!(
            "kernel dimension {kernel_dim} must lie in [1, {n})"
        )));
    }
    let mut r = rng(derive_seed(seed, 0));
    let q = haar_orthogonal(&mut r, n);
    let proj = projector(&q.columns(0, kernel_dim).into_owned())?;
    let t = kernel_triple_for(&proj, derive_seed(seed, 1))?;
    Ok((t, proj))
}

/// Multiplies the liquidity along `V` by `eps`: `Omega -> D Omega D`,
/// `R -> R D` with `D = (id - P) + eps P`.
pub fn scale_flow_liquidity(
    t: &CovarianceTriple,
    p: &Projector,
    eps: f64,
) -> Result<CovarianceTriple> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Precondition(format!("eps must lie in (0, 1], got {eps}")));
    }
    let d = p.blend(eps);
    Ok(CovarianceTriple::from_parts_unchecked(
        t.sigma().clone(),
        t.omega().congruence(&d),
        t.response() * d,
    ))
}

/// Multiplies the price fluctuations along `V` by `eps`: `Sigma -> D Sigma D`,
/// `R -> D R`.
pub fn scale_price(t: &CovarianceTriple, p: &Projector, eps: f64) -> Result<CovarianceTriple> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Precondition(format!("eps must lie in (0, 1], got {eps}")));
    }
    let d = p.blend(eps);
    Ok(CovarianceTriple::from_parts_unchecked(
        t.sigma().congruence(&d),
        t.omega().clone(),
        &d * t.response(),
    ))
}

/// `(Pbar Sigma Pbar, Pbar Omega Pbar + delta P, Pbar R Pbar)`. The `delta P`
/// term keeps `Omega` invertible; `delta` defaults to the mean variance of
/// `Omega` so the regularized matrix is as well conditioned as the input.
pub fn projected_triple(
    t: &CovarianceTriple,
    p: &Projector,
    delta: Option<f64>,
) -> CovarianceTriple {
    let n = t.n();
    let comp = p.complement();
    let delta = delta.unwrap_or_else(|| t.omega().trace() / n as f64);
    let omega = t.omega().congruence(&comp).into_inner() + p.p.matrix() * delta;
    CovarianceTriple::from_parts_unchecked(
        t.sigma().congruence(&comp),
        SymMatrix::symmetrize(omega),
        &comp * t.response() * &comp,
    )
}

/// Group actions used by the symmetry axioms.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupAction {
    Permutation(DMatrix<f64>),
    Cash(f64),
    Split(DVector<f64>),
    Rotation(DMatrix<f64>),
}

fn eval(model: ModelId, t: &CovarianceTriple) -> Result<DMatrix<f64>> {
    Ok(models::evaluate(model, t)?.lambda)
}

/// Symmetric relative distance, zero when both sides vanish.
fn rel_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

/// Relative residual of the symmetry identity for one transform.
pub fn transform_residual(
    model: ModelId,
    t: &CovarianceTriple,
    action: &GroupAction,
) -> Result<f64> {
    let base = eval(model, t)?;
    let (lhs, rhs) = match action {
        GroupAction::Permutation(o) | GroupAction::Rotation(o) => {
            let moved = CovarianceTriple::from_parts_unchecked(
                t.sigma().congruence(o),
                t.omega().congruence(o),
                o * t.response() * o.transpose(),
            );
            (eval(model, &moved)?, o * base * o.transpose())
        }
        GroupAction::Cash(alpha) => {
            let moved = CovarianceTriple::from_parts_unchecked(
                t.sigma().scale(alpha * alpha),
                t.omega().clone(),
                t.response() * *alpha,
            );
            (eval(model, &moved)?, base * *alpha)
        }
        GroupAction::Split(d) => {
            let dm = DMatrix::from_diagonal(d);
            let di = DMatrix::from_diagonal(&d.map(|x| 1.0 / x));
            let moved = CovarianceTriple::from_parts_unchecked(
                t.sigma().congruence(&di),
                t.omega().congruence(&dm),
                &di * t.response() * &dm,
            );
            (eval(model, &moved)?, &di * base * &di)
        }
    };
    Ok(rel_gap(&lhs, &rhs))
}

/// Residual of direct invariance on a fully diagonal triple: the joint
/// evaluation against the sum of single-asset evaluations.
pub fn direct_invariance_residual(
    model: ModelId,
    sigma2: &[f64],
    omega2: &[f64],
    r: &[f64],
) -> Result<f64> {
    let n = sigma2.len();
    let t = CovarianceTriple::from_parts_unchecked(
        SymMatrix::from_diagonal(sigma2),
        SymMatrix::from_diagonal(omega2),
        DMatrix::from_diagonal(&DVector::from_column_slice(r)),
    );
    let joint = eval(model, &t)?;
    let mut sum = DMatrix::zeros(n, n);
    for i in 0..n {
        let single = CovarianceTriple::from_parts_unchecked(
            SymMatrix::from_diagonal(&[sigma2[i]]),
            SymMatrix::from_diagonal(&[omega2[i]]),
            DMatrix::from_element(1, 1, r[i]),
        );
        sum[(i, i)] += eval(model, &single)?[(0, 0)];
    }
    Ok(rel_gap(&joint, &sum))
}

/// Static-arbitrage residual: how negative the quadratic form `x^T Lambda x`
/// can get, relative to the spectral scale of the symmetric part.
pub fn psd_residual(lambda: &DMatrix<f64>) -> f64 {
    let sym = SymMatrix::symmetrize(lambda.clone());
    let eig = sym_eig(&sym);
    let scale = eig.eigenvalues.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (-eig.min_eigenvalue() / scale).max(0.0)
}

pub fn asymmetry_residual(lambda: &DMatrix<f64>) -> f64 {
    let s = lambda.norm();
    if s == 0.0 {
        0.0
    } else {
        (lambda - lambda.transpose()).norm() / s
    }
}

/// Best-constant covariance-consistency residual
/// `min_c ||Sigma - c Lambda Omega Lambda^T|| / ||Sigma||` and the minimizing `c`.
pub fn pcc_residual(t: &CovarianceTriple, lambda: &DMatrix<f64>) -> (f64, f64) {
    let implied = lambda * t.omega().matrix() * lambda.transpose();
    let mm = implied.dot(&implied);
    let sn = t.sigma().norm();
    if mm == 0.0 || sn == 0.0 {
        return (1.0, 0.0);
    }
    let c = t.sigma().matrix().dot(&implied) / mm;
    ((t.sigma().matrix() - implied * c).norm() / sn, c)
}

struct Trial {
    residual: f64,
    slope: Option<f64>,
    detail: String,
    violated: Option<bool>,
}

fn finish(
    model: ModelId,
    axiom: AxiomId,
    cfg: &TrialConfig,
    results: Vec<(usize, u64, Result<Trial>)>,
    mut notes: Vec<String>,
) -> AxiomVerdict {
    let mut worst: Option<(usize, u64, Trial)> = None;
    let mut errors = Vec::new();
    let mut any_violation = false;
    for (k, seed, res) in results {
        match res {
            Ok(tr) => {
                let v = tr.violated.unwrap_or(tr.residual > cfg.tol);
                any_violation |= v;
                let replace = match &worst {
                    None => true,
                    Some((_, _, w)) => match (tr.violated, w.violated) {
                        (Some(true), Some(false)) => true,
                        (Some(false), Some(true)) => false,
                        _ => tr.residual > w.residual || tr.residual.is_nan(),
                    },
                };
                if replace {
                    worst = Some((k, seed, tr));
                }
            }
            Err(e) => errors.push((k, seed, e)),
        }
    }
    if !errors.is_empty() {
        let (k, seed, e) = &errors[0];
        notes.push(format!(
            "{} of {} trials failed to evaluate; first failure (trial {k}): {e}",
            errors.len(),
            cfg.trials
        ));
        return AxiomVerdict {
            model,
            axiom,
            verdict: Verdict::Inconclusive,
            worst_residual: worst.as_ref().map_or(f64::NAN, |w| w.2.residual),
            slope: worst.as_ref().and_then(|w| w.2.slope),
            witness: Some(Witness {
                trial: *k,
                seed: *seed,
                detail: "evaluation error".into(),
            }),
            notes,
        };
    }
    let (k, seed, tr) = worst.expect("at least one trial");
    let mut verdict = if any_violation {
        Verdict::Violated
    } else {
        Verdict::Satisfied
    };
    if verdict == Verdict::Violated
        && tr.violated.is_none()
        && tr.residual <= NOISE_FLOOR
    {
        verdict = Verdict::Inconclusive;
        notes.push(format!(
            "worst residual {:.3e} exceeds tol {:.1e} but lies below the round-off floor {:.0e}",
            tr.residual, cfg.tol, NOISE_FLOOR
        ));
    }
    AxiomVerdict {
        model,
        axiom,
        verdict,
        worst_residual: tr.residual,
        slope: tr.slope,
        witness: Some(Witness {
            trial: k,
            seed,
            detail: tr.detail,
        }),
        notes,
    }
}

fn plain(residual: f64, detail: String) -> Trial {
    Trial {
        residual,
        slope: None,
        detail,
        violated: None,
    }
}

fn run_trials<F>(model: ModelId, axiom: AxiomId, cfg: &TrialConfig, f: F) -> AxiomVerdict
where
    F: Fn(usize, u64) -> Result<Trial>,
{
    let results: Vec<_> = (0..cfg.trials)
        .map(|k| {
            let seed = cfg.trial_seed(axiom, k);
            (k, seed, f(k, seed))
        })
        .collect();
    finish(model, axiom, cfg, results, Vec::new())
}

/// Permutation, direct, cash, split and rotation invariance.
pub fn check_symmetry_axiom(model: ModelId, axiom: AxiomId, cfg: &TrialConfig) -> Result<AxiomVerdict> {
    cfg.validate()?;
    if !matches!(
        axiom,
        AxiomId::PI | AxiomId::DI | AxiomId::CI | AxiomId::SI | AxiomId::RI
    ) {
        return Err(Error::Validation(format!("{axiom} is not a symmetry axiom")));
    }
    let n = cfg.n;
    Ok(run_trials(model, axiom, cfg, |k, seed| {
        let mut r = rng(derive_seed(seed, 0));
        if axiom == AxiomId::DI {
            let s: Vec<f64> = (0..n).map(|_| log_uniform(&mut r, 0.1, 10.0)).collect();
            let o: Vec<f64> = (0..n).map(|_| log_uniform(&mut r, 0.1, 10.0)).collect();
            let rr: Vec<f64> = gaussian_vector(&mut r, n).iter().copied().collect();
            let res = direct_invariance_residual(model, &s, &o, &rr)?;
            return Ok(plain(res, "diagonal triple".into()));
        }
        let profile = SpectrumProfile::for_trial(k);
        let t = gen_triple(n, derive_seed(seed, 1), profile);
        let action = match axiom {
            AxiomId::PI => GroupAction::Permutation(permutation(&mut r, n)),
            AxiomId::CI => GroupAction::Cash(log_uniform(&mut r, 0.1, 10.0)),
            AxiomId::SI => {
                GroupAction::Split(DVector::from_fn(n, |_, _| log_uniform(&mut r, 0.1, 10.0)))
            }
            _ => GroupAction::Rotation(haar_orthogonal(&mut r, n)),
        };
        let res = transform_residual(model, &t, &action)?;
        Ok(plain(res, format!("{profile:?} triple")))
    }))
}

/// Static (PSD) and dynamic (symmetric) no-arbitrage.
pub fn check_arbitrage_axiom(model: ModelId, axiom: AxiomId, cfg: &TrialConfig) -> Result<AxiomVerdict> {
    cfg.validate()?;
    if !matches!(axiom, AxiomId::SA | AxiomId::DA) {
        return Err(Error::Validation(format!("{axiom} is not an arbitrage axiom")));
    }
    let mut v = run_trials(model, axiom, cfg, |k, seed| {
        let profile = SpectrumProfile::for_trial(k);
        let t = gen_triple(cfg.n, derive_seed(seed, 1), profile);
        let lam = eval(model, &t)?;
        let res = match axiom {
            AxiomId::SA => psd_residual(&lam),
            _ => asymmetry_residual(&lam),
        };
        Ok(plain(res, format!("{profile:?} triple")))
    });
    if axiom == AxiomId::SA && !model.is_symmetric() {
        v.notes.push("impact matrix is asymmetric; tested on its symmetric part".into());
    }
    Ok(v)
}

/// Weak, semi-strong and strong fragmentation invariance on triples with a
/// random kernel subspace `V`.
pub fn check_fragmentation_axiom(
    model: ModelId,
    axiom: AxiomId,
    cfg: &TrialConfig,
) -> Result<AxiomVerdict> {
    cfg.validate()?;
    if !matches!(axiom, AxiomId::WFI | AxiomId::SSFI | AxiomId::SFI) {
        return Err(Error::Validation(format!("{axiom} is not a fragmentation axiom")));
    }
    if cfg.kernel_dim >= cfg.n {
        return Err(Error::Precondition(format!(
            "fragmentation needs kernel_dim < n (got {} and {})",
            cfg.kernel_dim, cfg.n
        )));
    }
    Ok(run_trials(model, axiom, cfg, |_, seed| {
        let (t, p) = gen_kernel_triple(cfg.n, cfg.kernel_dim, seed)?;
        let lam = eval(model, &t)?;
        let scale = lam.norm().max(f64::MIN_POSITIVE);
        let left = (p.p.matrix() * &lam).norm() / scale;
        let mut res = left;
        let mut detail = format!("left {left:.2e}");
        if matches!(axiom, AxiomId::SSFI | AxiomId::SFI) {
            let right = (&lam * p.p.matrix()).norm() / scale;
            res = res.max(right);
            detail.push_str(&format!(", right {right:.2e}"));
        }
        if axiom == AxiomId::SFI {
            let delta = t.omega().trace() / t.n() as f64;
            let a = eval(model, &projected_triple(&t, &p, Some(delta)))?;
            let b = eval(model, &projected_triple(&t, &p, Some(0.5 * delta)))?;
            let proj = rel_diff(&lam, &a).max(rel_diff(&lam, &b));
            res = res.max(proj);
            detail.push_str(&format!(", projected {proj:.2e}"));
        }
        Ok(plain(res, detail))
    }))
}

/// Which block of `Lambda` a stability check follows as liquidity along `V`
/// vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    /// `Pbar Lambda P` and `P Lambda Pbar`
    CrossOffdiag,
    /// `Pbar Lambda Pbar` minus its limit on the projected statistics
    LiquidBlock,
    /// `P Lambda P`
    SelfBlock,
}

/// Log-log slope and the block norms along the ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// Least-squares slope over the whole ladder.
    pub slope: f64,
    /// Least-squares slope over the three smallest `eps`, which is what the
    /// verdicts use: a block that grows only until `eps` passes some
    /// triple-dependent crossover is still `O(1)`.
    pub tail_slope: f64,
    /// Slope between the two smallest `eps`. A block that dips through a
    /// near-zero and recovers to a finite limit has a steep tail but a flat
    /// end.
    pub end_slope: f64,
    pub norms: Vec<f64>,
    /// Every norm is at round-off level.
    pub vanishing: bool,
}

impl SlopeFit {
    pub fn divergent(&self) -> bool {
        !self.vanishing && self.tail_slope < -SLOPE_THRESHOLD && self.end_slope < -SLOPE_THRESHOLD
    }
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Fits `log ||block|| ~ slope * log eps`. Norms at or below
/// `1e-14 * reference` are treated as exact zeros.
pub fn fit_slope(ladder: &[f64], norms: &[f64], reference: f64) -> SlopeFit {
    let floor = 1e-14 * reference.max(f64::MIN_POSITIVE);
    let vanishing = norms.iter().all(|&x| x <= floor);
    if vanishing {
        return SlopeFit {
            slope: 0.0,
            tail_slope: 0.0,
            end_slope: 0.0,
            norms: norms.to_vec(),
            vanishing,
        };
    }
    let xs: Vec<f64> = ladder.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = norms.iter().map(|x| x.max(floor).ln()).collect();
    let tail = xs.len().saturating_sub(3);
    let end = xs.len().saturating_sub(2);
    SlopeFit {
        slope: least_squares_slope(&xs, &ys),
        tail_slope: least_squares_slope(&xs[tail..], &ys[tail..]),
        end_slope: least_squares_slope(&xs[end..], &ys[end..]),
        norms: norms.to_vec(),
        vanishing,
    }
}

fn block_norm(lam: &DMatrix<f64>, p: &Projector, block: Block) -> f64 {
    let pm = p.p.matrix();
    let c = p.complement();
    match block {
        Block::CrossOffdiag => (&c * lam * pm).norm().max((pm * lam * &c).norm()),
        Block::SelfBlock => (pm * lam * pm).norm(),
        Block::LiquidBlock => (&c * lam * &c).norm(),
    }
}

/// Stability measurements on one triple and subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityProbe {
    pub cross: SlopeFit,
    pub self_block: SlopeFit,
    /// Relative distance of `Pbar Lambda Pbar` from its projected-statistics
    /// limit, per ladder point; an error when the model is undefined on the
    /// projected statistics.
    pub liquid_gap: std::result::Result<SlopeFit, String>,
    /// Slope of `||Lambda||` itself; the regularity hypothesis
    /// `eps^2 Lambda -> 0` needs it above `-2`.
    pub total: SlopeFit,
}

pub fn stability_probe(
    model: ModelId,
    t: &CovarianceTriple,
    p: &Projector,
    ladder: &[f64],
) -> Result<StabilityProbe> {
    let base = eval(model, t)?;
    let reference = base.norm();
    let c = p.complement();
    let target = eval(model, &projected_triple(t, p, None))
        .map(|lim| &c * lim * &c)
        .map_err(|e| e.to_string());
    let tnorm = target.as_ref().map_or(0.0, |t| t.norm());
    let mut cross = Vec::new();
    let mut selfb = Vec::new();
    let mut gap = Vec::new();
    let mut total = Vec::new();
    for &eps in ladder {
        let lam = eval(model, &scale_flow_liquidity(t, p, eps)?)?;
        cross.push(block_norm(&lam, p, Block::CrossOffdiag));
        selfb.push(block_norm(&lam, p, Block::SelfBlock));
        let liquid = &c * &lam * &c;
        if let Ok(target) = &target {
            gap.push(if tnorm > 0.0 {
                (liquid - target).norm() / tnorm
            } else {
                liquid.norm() / reference.max(f64::MIN_POSITIVE)
            });
        }
        total.push(lam.norm());
    }
    Ok(StabilityProbe {
        cross: fit_slope(ladder, &cross, reference),
        self_block: fit_slope(ladder, &selfb, reference),
        liquid_gap: target.map(|_| fit_slope(ladder, &gap, 1.0)),
        total: fit_slope(ladder, &total, reference),
    })
}

/// The liquid block converges to its limit: either it is already within `tol`
/// at the smallest `eps`, or the gap shrinks at least like `eps^0.5`.
fn converges(gap: &SlopeFit, tol: f64) -> bool {
    let last = *gap.norms.last().unwrap_or(&0.0);
    gap.vanishing || last <= tol || gap.tail_slope >= 0.5
}

/// Smallest liquid component `||Pbar s_a||` over the eigenvectors of `Sigma`.
/// When it is tiny, a block can keep growing until `eps` drops below it, so
/// a finite ladder cannot see the `eps -> 0` behaviour.
fn liquid_alignment(t: &CovarianceTriple, p: &Projector) -> f64 {
    let eig = sym_eig(t.sigma());
    let c = p.complement();
    (0..t.n())
        .map(|a| (&c * eig.vector(a)).norm())
        .fold(f64::INFINITY, f64::min)
}

/// Minimal liquid component required of a stability trial.
pub const MIN_ALIGNMENT: f64 = 0.05;

/// Triple and illiquid subspace of the stability trial with witness seed
/// `seed`.
pub fn stability_trial_setup(cfg: &TrialConfig, seed: u64) -> Result<(CovarianceTriple, Projector)> {
    let n = cfg.n;
    let kd = cfg.kernel_dim.min(n.saturating_sub(1)).max(1);
    if n < 2 {
        return Err(Error::Precondition("stability needs n >= 2".into()));
    }
    let mut r = rng(derive_seed(seed, 0));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut r);
    idx.truncate(kd);
    idx.sort_unstable();
    let p = Projector::coordinate(n, &idx)?;
    for attempt in 1..=64u64 {
        let t = gen_triple(n, derive_seed(seed, attempt), SpectrumProfile::Well);
        if liquid_alignment(&t, &p) >= MIN_ALIGNMENT {
            return Ok((t, p));
        }
    }
    Err(Error::Precondition(
        "no triple in general position with the illiquid subspace".into(),
    ))
}

/// Slope of one block for one model, as a standalone measurement on a
/// trial-0 triple of `cfg`.
pub fn stability_slope(model: ModelId, block: Block, cfg: &TrialConfig) -> Result<SlopeFit> {
    cfg.validate()?;
    let seed = cfg.trial_seed(AxiomId::SS, 0);
    let (t, p) = stability_trial_setup(cfg, seed)?;
    let probe = stability_probe(model, &t, &p, &cfg.eps_ladder)?;
    Ok(match block {
        Block::CrossOffdiag => probe.cross,
        Block::SelfBlock => probe.self_block,
        Block::LiquidBlock => probe.liquid_gap.map_err(Error::Precondition)?,
    })
}

/// Weak and strong cross-stability and self-stability.
///
/// `V` is spanned by randomly chosen coordinates so that the diagonal models
/// see a genuinely illiquid asset. Triples are well conditioned and every
/// eigenvector of `Sigma` keeps a liquid component of at least
/// [`MIN_ALIGNMENT`].
pub fn check_stability_axiom(
    model: ModelId,
    axiom: AxiomId,
    cfg: &TrialConfig,
) -> Result<AxiomVerdict> {
    cfg.validate()?;
    if !axiom.is_stability() {
        return Err(Error::Validation(format!("{axiom} is not a stability axiom")));
    }
    let mut v = run_trials(model, axiom, cfg, |_, seed| {
        let (t, p) = stability_trial_setup(cfg, seed)?;
        let probe = stability_probe(model, &t, &p, &cfg.eps_ladder)?;
        Ok(match axiom {
            AxiomId::WCS => Trial {
                residual: (-probe.cross.tail_slope).max(0.0),
                slope: Some(probe.cross.tail_slope),
                detail: format!(
                    "cross-block slope {:.3} (tail {:.3}, end {:.3})",
                    probe.cross.slope, probe.cross.tail_slope, probe.cross.end_slope
                ),
                violated: Some(probe.cross.divergent()),
            },
            AxiomId::SS => Trial {
                residual: (-probe.self_block.tail_slope).max(0.0),
                slope: Some(probe.self_block.tail_slope),
                detail: format!(
                    "self-block slope {:.3} (tail {:.3}, end {:.3})",
                    probe.self_block.slope, probe.self_block.tail_slope, probe.self_block.end_slope
                ),
                violated: Some(probe.self_block.divergent()),
            },
            _ => match &probe.liquid_gap {
                Ok(fit) => {
                    let gap = *fit.norms.last().unwrap_or(&0.0);
                    let ok = !probe.cross.divergent() && converges(fit, cfg.tol);
                    Trial {
                        residual: gap,
                        slope: Some(fit.tail_slope),
                        detail: format!(
                            "liquid-block gap {gap:.2e} at smallest eps, gap tail slope {:.3}, cross tail slope {:.3}",
                            fit.tail_slope, probe.cross.tail_slope
                        ),
                        violated: Some(!ok),
                    }
                }
                Err(e) => Trial {
                    residual: f64::INFINITY,
                    slope: None,
                    detail: format!("limit undefined on the projected statistics: {e}"),
                    violated: Some(true),
                },
            },
        })
    });
    v.notes.push(match axiom {
        AxiomId::SCS => "residual is the liquid-block gap at the smallest eps; convergence judged by the gap trend".into(),
        _ => format!("residual is the divergence exponent; divergent when the tail and end slopes are both below -{SLOPE_THRESHOLD}"),
    });
    Ok(v)
}

/// Return covariance consistency up to a constant.
pub fn check_pcc(model: ModelId, cfg: &TrialConfig) -> Result<AxiomVerdict> {
    cfg.validate()?;
    Ok(run_trials(model, AxiomId::PCC, cfg, |k, seed| {
        let profile = SpectrumProfile::for_trial(k);
        let t = gen_triple(cfg.n, derive_seed(seed, 1), profile);
        let lam = eval(model, &t)?;
        let (res, c) = pcc_residual(&t, &lam);
        Ok(plain(res, format!("{profile:?} triple, best constant {c:.4}")))
    }))
}

pub fn check_axiom(model: ModelId, axiom: AxiomId, cfg: &TrialConfig) -> Result<AxiomVerdict> {
    match axiom {
        AxiomId::PI | AxiomId::DI | AxiomId::CI | AxiomId::SI | AxiomId::RI => {
            check_symmetry_axiom(model, axiom, cfg)
        }
        AxiomId::SA | AxiomId::DA => check_arbitrage_axiom(model, axiom, cfg),
        AxiomId::WFI | AxiomId::SSFI | AxiomId::SFI => {
            check_fragmentation_axiom(model, axiom, cfg)
        }
        AxiomId::WCS | AxiomId::SCS | AxiomId::SS => check_stability_axiom(model, axiom, cfg),
        AxiomId::PCC => check_pcc(model, cfg),
    }
}

/// Residuals of the two finite-eps expansions relating liquidity scaling to
/// price scaling along `V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaResidual {
    /// `Lambda(q-scaled) = Pbar X Pbar + (Pbar X P + P X Pbar)/eps + P X P/eps^2`
    /// with `X = Lambda(p-scaled)`.
    pub liquidity_expansion: f64,
    /// The inverse relation `Lambda(p-scaled) = Pbar Y Pbar + eps (Pbar Y P + P Y Pbar) + eps^2 P Y P`
    /// with `Y = Lambda(q-scaled)`.
    pub price_expansion: f64,
}

impl LemmaResidual {
    pub fn max(&self) -> f64 {
        self.liquidity_expansion.max(self.price_expansion)
    }
}

fn expand(x: &DMatrix<f64>, p: &Projector, a: f64, b: f64) -> DMatrix<f64> {
    if a == 1.0 && b == 1.0 {
        return x.clone();
    }
    let pm = p.p.matrix();
    let c = p.complement();
    &c * x * &c + (&c * x * pm + pm * x * &c) * a + pm * x * pm * b
}

/// Expansion identities for one triple and subspace.
pub fn lemma_residual(
    model: ModelId,
    t: &CovarianceTriple,
    p: &Projector,
    eps: f64,
) -> Result<LemmaResidual> {
    let y = eval(model, &scale_flow_liquidity(t, p, eps)?)?;
    let x = eval(model, &scale_price(t, p, eps)?)?;
    let inv = 1.0 / eps;
    Ok(LemmaResidual {
        liquidity_expansion: rel_gap(&y, &expand(&x, p, inv, inv * inv)),
        price_expansion: rel_gap(&x, &expand(&y, p, eps, eps * eps)),
    })
}

/// Models whose reference axiom row has both split and rotation invariance.
pub fn split_and_rotation_invariant(model: ModelId) -> bool {
    matches!(expected(model, AxiomId::SI), Some(true))
        && matches!(expected(model, AxiomId::RI), Some(true))
}

/// Worst expansion residual over `cfg.trials` random triples and random
/// subspaces of dimension `cfg.kernel_dim`.
pub fn lemma_expansion_check(model: ModelId, cfg: &TrialConfig, eps: f64) -> Result<LemmaResidual> {
    cfg.validate()?;
    if !split_and_rotation_invariant(model) {
        return Err(Error::Precondition(format!(
            "{model} is not both split and rotation invariant"
        )));
    }
    if cfg.n < 2 || cfg.kernel_dim >= cfg.n {
        return Err(Error::Precondition("expansion needs 1 <= kernel_dim < n".into()));
    }
    let mut worst = LemmaResidual {
        liquidity_expansion: 0.0,
        price_expansion: 0.0,
    };
    for k in 0..cfg.trials {
        let seed = derive_seed(cfg.seed, 0x1_e44a_0000 + k as u64);
        let mut r = rng(derive_seed(seed, 0));
        let q = haar_orthogonal(&mut r, cfg.n);
        let p = projector(&q.columns(0, cfg.kernel_dim).into_owned())?;
        let t = gen_triple(cfg.n, derive_seed(seed, 1), SpectrumProfile::Well);
        let res = lemma_residual(model, &t, &p, eps)?;
        worst.liquidity_expansion = worst.liquidity_expansion.max(res.liquidity_expansion);
        worst.price_expansion = worst.price_expansion.max(res.price_expansion);
    }
    Ok(worst)
}

/// Residual of the canonical form `L^{-T} U diag(mu)^{1/2} U^T L^{-1}`, with
/// `U^T L^T Sigma L U = diag(mu)` and `L` the triangular factor of `Omega`,
/// against kyle computed with the symmetric root.
pub fn kyle_canonical_form_residual(t: &CovarianceTriple) -> Result<f64> {
    let f = factorize(t.omega(), FactorKind::Triangular)?;
    let inv = f.inverse()?;
    let inner = t.sigma().congruence(&f.l.transpose());
    let eig = sym_eig(&inner);
    let scale = eig.max_eigenvalue().max(0.0);
    let root_mu = DMatrix::from_diagonal(
        &eig.eigenvalues.map(|m| crate::matops::root_of(m, scale)),
    );
    let u = &eig.eigenvectors;
    let canonical = inv.transpose() * u * root_mu * u.transpose() * &inv;
    Ok(rel_diff(&canonical, &models::kyle(t)?))
}

/// `||Sigma - Lambda Omega Lambda^T|| / ||Sigma||` for kyle.
pub fn kyle_consistency_residual(t: &CovarianceTriple) -> Result<f64> {
    let lam = models::kyle(t)?;
    let implied = &lam * t.omega().matrix() * lam.transpose();
    Ok(rel_diff(&implied, t.sigma()))
}

pub fn kyle_factor_residual(t: &CovarianceTriple) -> Result<f64> {
    let a = models::kyle_with(t, FactorKind::SymmetricRoot)?;
    let b = models::kyle_with(t, FactorKind::Triangular)?;
    Ok(rel_diff(&b, &a))
}

/// Distance of each model from kyle on one generic triple, relative to kyle.
pub fn distance_from_kyle(models: &[ModelId], t: &CovarianceTriple) -> Result<Vec<(ModelId, f64)>> {
    let k = models::kyle(t)?;
    models
        .iter()
        .map(|&m| Ok((m, rel_diff(&eval(m, t)?, &k))))
        .collect()
}

/// The reference satisfaction grid: `expected(model, axiom)` is `Some(true)`
/// when the axiom holds. Models outside the reference catalogue have no row,
/// except `direct-sqrt`, compared against the `direct` row.
pub fn expected(model: ModelId, axiom: AxiomId) -> Option<bool> {
    use Family::*;
    let row: &str = match (model.family, model.starred) {
        (Direct, false) | (DirectSqrt, false) => "11110 11 000 110 0",
        (Whitening, false) => "11101 00 100 000 1",
        (Whitening, true) => "11110 00 100 000 1",
        (El, false) => "11101 11 111 111 0",
        (El, true) => "11110 11 111 111 0",
        (Kyle, false) => "11111 11 111 110 1",
        (RDirect, false) => "11110 10 000 110 0",
        (Ml, false) => "11111 00 100 000 0",
        (REl, false) => "11101 01 111 111 0",
        (REl, true) => "11110 01 111 111 0",
        (RKyle, false) => "11111 11 111 110 0",
        _ => return None,
    };
    let bits: Vec<bool> = row.chars().filter(|c| !c.is_whitespace()).map(|c| c == '1').collect();
    Some(bits[axiom.index() as usize])
}

/// Cells where the shipped variant departs from the reference row for a
/// reason stated in the model definitions: the literal square-root diagonal
/// model breaks cash and split invariance.
pub fn documented_exception(model: ModelId, axiom: AxiomId) -> Option<&'static str> {
    match (model.family, model.starred, axiom) {
        (Family::DirectSqrt, false, AxiomId::CI | AxiomId::SI) => {
            Some("literal square-root diagonal form is not cash or split invariant")
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub model: ModelId,
    pub axiom: AxiomId,
    pub expected: bool,
    pub observed: Verdict,
    pub worst_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub documented: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityLog {
    pub model: ModelId,
    /// Most negative slope of `||Lambda||` over the stability trials.
    pub worst_slope: f64,
    /// `eps^2 ||Lambda|| -> 0` in every trial.
    pub regular: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    pub config: TrialConfig,
    pub models: Vec<ModelId>,
    pub axioms: Vec<AxiomId>,
    pub cells: Vec<AxiomVerdict>,
    pub discrepancies: Vec<Discrepancy>,
    /// Violations of "split + rotation invariant and semi-strong (strong)
    /// fragmentation invariant implies weak (strong) cross-stability".
    pub implication_counterexamples: Vec<String>,
    pub regularity: Vec<RegularityLog>,
}

impl AxiomReport {
    pub fn cell(&self, model: ModelId, axiom: AxiomId) -> Option<&AxiomVerdict> {
        self.cells.iter().find(|c| c.model == model && c.axiom == axiom)
    }

    /// Undocumented mismatches with the reference grid.
    pub fn mismatches(&self) -> Vec<&Discrepancy> {
        self.discrepancies.iter().filter(|d| d.documented.is_none()).collect()
    }

    pub fn inconclusive(&self) -> Vec<&AxiomVerdict> {
        self.cells
            .iter()
            .filter(|c| c.verdict == Verdict::Inconclusive)
            .collect()
    }

    pub fn matches_reference(&self) -> bool {
        self.mismatches().is_empty() && self.inconclusive().is_empty()
    }
}

fn regularity_log(model: ModelId, cfg: &TrialConfig) -> RegularityLog {
    let mut worst = f64::INFINITY;
    for k in 0..cfg.trials {
        let seed = cfg.trial_seed(AxiomId::SS, k);
        let Ok((t, p)) = stability_trial_setup(cfg, seed) else {
            continue;
        };
        if let Ok(probe) = stability_probe(model, &t, &p, &cfg.eps_ladder) {
            if !probe.total.vanishing {
                worst = worst.min(probe.total.tail_slope);
            }
        }
    }
    if !worst.is_finite() {
        worst = 0.0;
    }
    RegularityLog {
        model,
        worst_slope: worst,
        regular: worst > -2.0 + SLOPE_THRESHOLD,
    }
}

/// Full verdict grid with a diff against the reference grid.
pub fn axiom_matrix(models: &[ModelId], axioms: &[AxiomId], cfg: &TrialConfig) -> Result<AxiomReport> {
    cfg.validate()?;
    let jobs: Vec<(ModelId, AxiomId)> = models
        .iter()
        .flat_map(|&m| axioms.iter().map(move |&a| (m, a)))
        .collect();
    let cells: Vec<AxiomVerdict> = jobs
        .par_iter()
        .map(|&(m, a)| {
            check_axiom(m, a, cfg).unwrap_or_else(|e| AxiomVerdict {
                model: m,
                axiom: a,
                verdict: Verdict::Inconclusive,
                worst_residual: f64::NAN,
                slope: None,
                witness: None,
                notes: vec![e.to_string()],
            })
        })
        .collect();

    let mut discrepancies = Vec::new();
    for c in &cells {
        let Some(exp) = expected(c.model, c.axiom) else {
            continue;
        };
        let agrees = match c.verdict {
            Verdict::Satisfied => exp,
            Verdict::Violated => !exp,
            Verdict::Inconclusive => false,
        };
        if !agrees {
            discrepancies.push(Discrepancy {
                model: c.model,
                axiom: c.axiom,
                expected: exp,
                observed: c.verdict,
                worst_residual: c.worst_residual,
                witness: c.witness.clone(),
                documented: documented_exception(c.model, c.axiom).map(str::to_owned),
            });
        }
    }

    let sat = |m: ModelId, a: AxiomId| {
        cells
            .iter()
            .find(|c| c.model == m && c.axiom == a)
            .map(|c| c.satisfied())
    };
    let mut implication_counterexamples = Vec::new();
    for &m in models {
        let base = sat(m, AxiomId::SI) == Some(true) && sat(m, AxiomId::RI) == Some(true);
        if base && sat(m, AxiomId::SSFI) == Some(true) && sat(m, AxiomId::WCS) == Some(false) {
            implication_counterexamples.push(format!("{m}: SI+RI+SSFI hold but WCS fails"));
        }
        if base && sat(m, AxiomId::SFI) == Some(true) && sat(m, AxiomId::SCS) == Some(false) {
            implication_counterexamples.push(format!("{m}: SI+RI+SFI hold but SCS fails"));
        }
    }

    let regularity = if axioms.iter().any(|a| a.is_stability()) && cfg.n >= 2 {
        models.par_iter().map(|&m| regularity_log(m, cfg)).collect()
    } else {
        Vec::new()
    };

    Ok(AxiomReport {
        config: cfg.clone(),
        models: models.to_vec(),
        axioms: axioms.to_vec(),
        cells,
        discrepancies,
        implication_counterexamples,
        regularity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, trials: usize) -> TrialConfig {
        TrialConfig {
            n,
            trials,
            ..TrialConfig::default()
        }
    }

    fn m(s: &str) -> ModelId {
        s.parse().unwrap()
    }

    #[test]
    fn gen_triple_is_deterministic_and_valid() {
        let a = gen_triple(3, 11, SpectrumProfile::Ill);
        let b = gen_triple(3, 11, SpectrumProfile::Ill);
        assert_eq!(a, b);
        let one = gen_triple(1, 5, SpectrumProfile::Well);
        assert!(one.sigma()[(0, 0)] > 0.0 && one.omega()[(0, 0)] > 0.0);
        CovarianceTriple::new(a.sigma().clone(), a.omega().clone(), a.response().clone()).unwrap();
    }

    #[test]
    fn kernel_triples_respect_the_kernel() {
        for seed in 0..20 {
            let (t, p) = gen_kernel_triple(3, 1, seed).unwrap();
            let eig = sym_eig(t.sigma());
            assert!(eig.eigenvalues[1] > 1e-3 * eig.eigenvalues[0]);
            assert!(eig.eigenvalues[2].abs() < 1e-12 * eig.eigenvalues[0]);
            let v = p.basis.column(0).into_owned();
            assert!((t.sigma().matrix() * &v).norm() < 1e-12);
            assert!((t.response().transpose() * &v).norm() < 1e-12 * t.response().norm());
            assert!(t.kernel_residual(1e-10) < 1e-12);
        }
        assert!(matches!(gen_kernel_triple(3, 3, 0), Err(Error::Basis(_))));
    }

    #[test]
    fn calendar_spread_kernel() {
        let v = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]) / 2f64.sqrt();
        let p = projector(&v).unwrap();
        let t = kernel_triple_for(&p, 3).unwrap();
        assert!((t.sigma().matrix() * v.column(0)).norm() < 1e-14);
    }

    #[test]
    fn liquidity_scaling_examples() {
        let t = gen_triple(2, 1, SpectrumProfile::Well);
        let p = Projector::coordinate(2, &[1]).unwrap();
        assert_eq!(scale_flow_liquidity(&t, &p, 1.0).unwrap(), t);
        let s = scale_flow_liquidity(&t, &p, 0.5).unwrap();
        assert!((s.omega()[(1, 1)] - 0.25 * t.omega()[(1, 1)]).abs() < 1e-15);
        assert!((s.omega()[(0, 1)] - 0.5 * t.omega()[(0, 1)]).abs() < 1e-15);
        assert!((s.omega()[(0, 0)] - t.omega()[(0, 0)]).abs() < 1e-15);
        for i in 0..2 {
            assert!((s.response()[(i, 1)] - 0.5 * t.response()[(i, 1)]).abs() < 1e-15);
            assert_eq!(s.response()[(i, 0)], t.response()[(i, 0)]);
        }
        let full = Projector::coordinate(2, &[0, 1]).unwrap();
        let s = scale_flow_liquidity(&t, &full, 0.1).unwrap();
        assert!(rel_diff(s.omega(), &(t.omega().matrix() * 0.01)) < 1e-15);
        assert!(rel_diff(s.response(), &(t.response() * 0.1)) < 1e-15);
    }

    #[test]
    fn identity_permutation_has_zero_residual() {
        let t = gen_triple(4, 2, SpectrumProfile::Well);
        for model in ModelId::catalogue() {
            let r = transform_residual(model, &t, &GroupAction::Permutation(DMatrix::identity(4, 4)))
                .unwrap();
            assert_eq!(r, 0.0, "{model}");
        }
    }

    #[test]
    fn spec_verdict_examples() {
        let c = cfg(4, 20);
        assert!(check_axiom(m("kyle"), AxiomId::RI, &c).unwrap().satisfied());
        assert_eq!(check_axiom(m("whitening"), AxiomId::SI, &c).unwrap().verdict, Verdict::Violated);
        assert_eq!(check_axiom(m("ml"), AxiomId::DA, &c).unwrap().verdict, Verdict::Violated);
        assert_eq!(check_axiom(m("r-el"), AxiomId::SA, &c).unwrap().verdict, Verdict::Violated);
        assert!(check_axiom(m("r-el"), AxiomId::DA, &c).unwrap().satisfied());
        assert_eq!(check_axiom(m("direct"), AxiomId::WFI, &c).unwrap().verdict, Verdict::Violated);
        assert!(check_axiom(m("kyle"), AxiomId::SFI, &c).unwrap().satisfied());
        assert!(check_axiom(m("ml"), AxiomId::WFI, &c).unwrap().satisfied());
        assert!(check_pcc(m("kyle"), &c).unwrap().satisfied());
        assert!(check_pcc(m("whitening"), &c).unwrap().satisfied());
        assert_eq!(check_pcc(m("el"), &c).unwrap().verdict, Verdict::Violated);
    }

    #[test]
    fn single_asset_is_psd() {
        let c = cfg(1, 10);
        for model in ModelId::catalogue() {
            assert!(check_axiom(model, AxiomId::SA, &c).unwrap().satisfied(), "{model}");
        }
    }

    #[test]
    fn pcc_constant_is_one_for_kyle() {
        let t = gen_triple(4, 9, SpectrumProfile::Well);
        let (res, c) = pcc_residual(&t, &models::kyle(&t).unwrap());
        assert!(res < 1e-12);
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slopes() {
        let c = cfg(4, 1);
        let k = stability_slope(m("kyle"), Block::SelfBlock, &c).unwrap();
        assert!((k.slope + 1.0).abs() < 0.1, "{}", k.slope);
        let e = stability_slope(m("el"), Block::SelfBlock, &c).unwrap();
        assert!(e.slope.abs() < 0.1, "{}", e.slope);
        let d = stability_slope(m("direct"), Block::CrossOffdiag, &c).unwrap();
        assert!(d.vanishing && d.norms.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lemma_examples() {
        let c = cfg(4, 5);
        assert!(lemma_expansion_check(m("kyle"), &c, 1e-3).unwrap().max() < 1e-8);
        let one = lemma_expansion_check(m("ml"), &c, 1.0).unwrap();
        assert_eq!(one.max(), 0.0);
        assert!(matches!(
            lemma_expansion_check(m("el"), &c, 1e-3),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn tiny_tolerance_is_inconclusive() {
        let c = TrialConfig {
            tol: 1e-30,
            ..cfg(4, 10)
        };
        let v = check_axiom(m("kyle"), AxiomId::RI, &c).unwrap();
        assert_eq!(v.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn expected_grid_shape() {
        assert_eq!(expected(m("kyle"), AxiomId::PCC), Some(true));
        assert_eq!(expected(m("ml"), AxiomId::DA), Some(false));
        assert_eq!(expected(m("r-el*"), AxiomId::SI), Some(true));
        assert_eq!(expected(m("kyle*"), AxiomId::SI), None);
    }
}
