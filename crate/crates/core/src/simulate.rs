//! Synthetic panels from `dp = Lambda q + eta` with a known impact matrix.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{impose_spread_constraint, MarketPanel, SessionDay, SpreadSpec, DEFAULT_DELTA_T};
use crate::gof::{weight_matrix, WeightSpec};
use crate::matops::{sqrt_psd, sym_eig, SymMatrix, PSD_TOL};
use crate::models::{kyle, CovarianceTriple};
use crate::sampling::{derive_seed, gaussian_vector, rng};
use crate::serde_rows;

fn default_periods() -> Vec<String> {
    vec!["A".into(), "B".into()]
}

fn default_delta_t() -> f64 {
    DEFAULT_DELTA_T
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n: usize,
    #[serde(with = "serde_rows")]
    pub lambda_true: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub omega_true: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub noise_cov: DMatrix<f64>,
    pub days: usize,
    /// Price increments per day; each day carries one more price row.
    pub bins_per_day: usize,
    /// days x assets multipliers applied jointly to price changes and flows.
    /// Rescaled to unit root mean square per asset before use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day_scale_profiles: Option<Vec<Vec<f64>>>,
    pub seed: u64,
    /// Days are spread evenly over these labels, in order.
    #[serde(default = "default_periods")]
    pub periods: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assets: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread: Option<SpreadSpec>,
    #[serde(default = "default_delta_t")]
    pub delta_t: f64,
}

fn check_psd(name: &str, m: &DMatrix<f64>, strict: bool) -> Result<SymMatrix> {
    let s = SymMatrix::new(m.clone())?;
    let eig = sym_eig(&s);
    let top = eig.max_eigenvalue().max(0.0);
    let min = eig.min_eigenvalue();
    if strict && !(min > PSD_TOL * top) {
        return Err(Error::NotPd {
            min_eigenvalue: min,
            max_eigenvalue: top,
        });
    }
    if min < -PSD_TOL * top {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
            max_eigenvalue: top,
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation(format!("{name} has non-finite entries")));
    }
    Ok(s)
}

impl SimSpec {
    pub fn asset_names(&self) -> Vec<String> {
        self.assets
            .clone()
            .unwrap_or_else(|| (0..self.n).map(|i| format!("A{i}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Err(Error::Validation("n must be positive".into()));
        }
        for (name, m) in [
            ("lambda_true", &self.lambda_true),
            ("omega_true", &self.omega_true),
            ("noise_cov", &self.noise_cov),
        ] {
            if m.shape() != (n, n) {
                return Err(Error::Shape(format!("{name} is {:?}, expected {n}x{n}", m.shape())));
            }
        }
        if self.lambda_true.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("lambda_true has non-finite entries".into()));
        }
        check_psd("omega_true", &self.omega_true, true)?;
        check_psd("noise_cov", &self.noise_cov, false)?;
        if self.days == 0 {
            return Err(Error::Validation("days must be positive".into()));
        }
        if self.bins_per_day == 0 {
            return Err(Error::Validation("bins_per_day must be positive".into()));
        }
        if self.periods.is_empty() {
            return Err(Error::Validation("at least one period label is needed".into()));
        }
        if self.periods.iter().any(|p| p.is_empty() || p.contains(',')) {
            return Err(Error::Validation("period labels must be non-empty without commas".into()));
        }
        if !(self.delta_t > 0.0) {
            return Err(Error::Validation("delta_t must be positive".into()));
        }
        if let Some(names) = &self.assets {
            if names.len() != n {
                return Err(Error::Shape(format!("{} asset names for {n} assets", names.len())));
            }
        }
        if let Some(p) = &self.day_scale_profiles {
            if p.len() != self.days || p.iter().any(|row| row.len() != n) {
                return Err(Error::Shape("day_scale_profiles must be days x n".into()));
            }
            if p.iter().flatten().any(|&m| !(m > 0.0 && m.is_finite())) {
                return Err(Error::Validation("day multipliers must be positive".into()));
            }
        }
        Ok(())
    }

    fn normalized_profiles(&self) -> Option<Vec<Vec<f64>>> {
        let p = self.day_scale_profiles.as_ref()?;
        let n = self.n;
        let rms: Vec<f64> = (0..n)
            .map(|i| (p.iter().map(|row| row[i] * row[i]).sum::<f64>() / p.len() as f64).sqrt())
            .collect();
        Some(p.iter().map(|row| (0..n).map(|i| row[i] / rms[i]).collect()).collect())
    }
}

/// Population moments implied by a spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(with = "serde_rows")]
    pub lambda_true: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub omega_true: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub noise_cov: DMatrix<f64>,
    /// `Lambda Omega Lambda^T + noise_cov`
    #[serde(with = "serde_rows")]
    pub sigma_total: DMatrix<f64>,
    /// `Lambda Omega`
    #[serde(with = "serde_rows")]
    pub response: DMatrix<f64>,
    /// Normalized day multipliers actually used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day_scale_profiles: Option<Vec<Vec<f64>>>,
    /// Population score of the true predictor for the standard weights.
    pub analytic_r2: BTreeMap<String, f64>,
}

impl GroundTruth {
    pub fn from_spec(spec: &SimSpec) -> Result<Self> {
        let lam = &spec.lambda_true;
        let omega = &spec.omega_true;
        let sigma_total = SymMatrix::symmetrize(lam * omega * lam.transpose() + &spec.noise_cov);
        let mut gt = GroundTruth {
            lambda_true: lam.clone(),
            omega_true: omega.clone(),
            noise_cov: spec.noise_cov.clone(),
            sigma_total: sigma_total.into_inner(),
            response: lam * omega,
            day_scale_profiles: spec.normalized_profiles(),
            analytic_r2: BTreeMap::new(),
        };
        let t = gt.population_triple()?;
        for w in [WeightSpec::Idio, WeightSpec::Global, WeightSpec::Modes] {
            if let Ok(m) = weight_matrix(&w, &t) {
                if let Ok(v) = analytic_r2(&gt, &m) {
                    gt.analytic_r2.insert(w.to_string(), v);
                }
            }
        }
        Ok(gt)
    }

    pub fn population_triple(&self) -> Result<CovarianceTriple> {
        CovarianceTriple::from_matrices(
            self.sigma_total.clone(),
            SymMatrix::symmetrize(self.omega_true.clone()).into_inner(),
            self.response.clone(),
        )
    }

    /// True impact on day `k`: `D Lambda D^{-1}` with that day's multipliers.
    pub fn day_lambda(&self, k: usize) -> DMatrix<f64> {
        match &self.day_scale_profiles {
            None => self.lambda_true.clone(),
            Some(p) => {
                let d = &p[k];
                DMatrix::from_fn(d.len(), d.len(), |i, j| d[i] * self.lambda_true[(i, j)] / d[j])
            }
        }
    }
}

/// `1 - tr(M noise_cov) / tr(M sigma_total)`.
pub fn analytic_r2(gt: &GroundTruth, m: &SymMatrix) -> Result<f64> {
    let n = gt.sigma_total.nrows();
    if m.dim() != n {
        return Err(Error::InvalidWeight(format!("weight is {}x{}, expected {n}x{n}", m.dim(), m.dim())));
    }
    if m.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidWeight("weight matrix is zero".into()));
    }
    let eig = sym_eig(m);
    if eig.min_eigenvalue() < -PSD_TOL * eig.max_eigenvalue().abs() {
        return Err(Error::InvalidWeight("weight matrix is not PSD".into()));
    }
    let den = (m.matrix() * &gt.sigma_total).trace();
    if !(den > 0.0) {
        return Err(Error::DegenerateDenominator);
    }
    Ok(1.0 - (m.matrix() * &gt.noise_cov).trace() / den)
}

fn day_ids(spec: &SimSpec) -> Vec<(String, String)> {
    let np = spec.periods.len();
    let mut counters = vec![0usize; np];
    (0..spec.days)
        .map(|k| {
            let p = (k * np / spec.days).min(np - 1);
            counters[p] += 1;
            let label = spec.periods[p].clone();
            (format!("{label}-{:04}", counters[p]), label)
        })
        .collect()
}

/// Draws the panel. Each day uses its own stream derived from the seed, so
/// the output does not depend on scheduling.
pub fn simulate_panel(spec: &SimSpec) -> Result<(MarketPanel, GroundTruth)> {
    spec.validate()?;
    let gt = GroundTruth::from_spec(spec)?;
    let n = spec.n;
    let lq = sqrt_psd(&check_psd("omega_true", &spec.omega_true, true)?)?.into_inner();
    let le = sqrt_psd(&check_psd("noise_cov", &spec.noise_cov, false)?)?.into_inner();
    let bins = spec.bins_per_day;
    let profiles = gt.day_scale_profiles.clone();
    let peak: Vec<f64> = (0..n)
        .map(|i| {
            profiles
                .as_ref()
                .map_or(1.0, |p| p.iter().map(|row| row[i]).fold(0.0, f64::max))
        })
        .collect();
    // ten standard deviations of a day's random walk keeps prices positive
    let start: Vec<f64> = (0..n)
        .map(|i| 100.0 + (10.0 * peak[i] * (bins as f64 * gt.sigma_total[(i, i)]).sqrt()).ceil())
        .collect();
    let ids = day_ids(spec);
    let days: Vec<Result<SessionDay>> = (0..spec.days)
        .into_par_iter()
        .map(|k| {
            let mut r = rng(derive_seed(spec.seed, k as u64));
            let mult = profiles
                .as_ref()
                .map_or_else(|| DVector::from_element(n, 1.0), |p| DVector::from_vec(p[k].clone()));
            let mut prices = DMatrix::zeros(bins + 1, n);
            let mut flows = DMatrix::zeros(bins + 1, n);
            for i in 0..n {
                prices[(0, i)] = start[i];
            }
            for b in 0..bins {
                let z1 = gaussian_vector(&mut r, n);
                let z2 = gaussian_vector(&mut r, n);
                let q0 = &lq * z1;
                let dp = (&spec.lambda_true * &q0 + &le * z2).component_mul(&mult);
                let q = q0.component_mul(&mult);
                for i in 0..n {
                    prices[(b + 1, i)] = prices[(b, i)] + dp[i];
                    flows[(b, i)] = q[i];
                }
            }
            let (id, period) = ids[k].clone();
            SessionDay::new(id, period, prices, flows, vec![false; (bins + 1) * n])
        })
        .collect();
    let days = days.into_iter().collect::<Result<Vec<_>>>()?;
    let mut panel = MarketPanel::new(spec.asset_names(), spec.delta_t, days)?;
    if let Some(s) = &spec.spread {
        panel = impose_spread_constraint(&panel, s)?;
    }
    Ok((panel, gt))
}

/// Two futures legs and their calendar spread. The spread's price change is
/// exactly `dp(leg1) - dp(leg0)`, legs are 0.99 correlated and the spread
/// trades at 1% of the legs' flow volatility.
pub fn make_crude_scenario(seed: u64) -> SimSpec {
    let legs = DMatrix::from_row_slice(2, 2, &[1.0, 0.99, 0.99, 1.0]);
    let t = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 1.0]);
    let sigma = SymMatrix::symmetrize(&t * legs * t.transpose());
    let omega = SymMatrix::from_diagonal(&[1.0, 1.0, 1e-4]);
    let triple = CovarianceTriple::new(sigma.clone(), omega.clone(), DMatrix::zeros(3, 3))
        .expect("static scenario is valid");
    let lambda = kyle(&triple).expect("static scenario is valid");
    SimSpec {
        n: 3,
        lambda_true: lambda,
        omega_true: omega.into_inner(),
        noise_cov: sigma.into_inner(),
        days: 200,
        bins_per_day: 500,
        day_scale_profiles: None,
        seed,
        periods: default_periods(),
        assets: Some(vec!["leg0".into(), "leg1".into(), "spread".into()]),
        spread: Some(SpreadSpec {
            spread: "spread".into(),
            leg_plus: "leg1".into(),
            leg_minus: "leg0".into(),
        }),
        delta_t: DEFAULT_DELTA_T,
    }
}

/// Universe whose impact is kyle on a one-factor price covariance with
/// pairwise correlations of at least `min_corr`. Flow volatilities spread
/// over a decade and a half. `noise_ratio` sets `noise_cov` relative to the
/// impact-driven covariance.
pub fn make_correlated_universe(n: usize, min_corr: f64, noise_ratio: f64, seed: u64) -> Result<SimSpec> {
    if n == 0 || !(0.0..1.0).contains(&min_corr) || !(noise_ratio >= 0.0) {
        return Err(Error::Validation("n > 0, 0 <= min_corr < 1, noise_ratio >= 0".into()));
    }
    use rand::Rng;
    let mut r = rng(derive_seed(seed, 0xC0));
    let lo = min_corr.sqrt();
    let beta: Vec<f64> = (0..n).map(|_| r.random_range(lo..=lo.max(0.95))).collect();
    let vol: Vec<f64> = (0..n).map(|_| crate::sampling::log_uniform(&mut r, 0.5, 2.0)).collect();
    let liq: Vec<f64> = (0..n).map(|_| crate::sampling::log_uniform(&mut r, 0.2, 5.0)).collect();
    let corr = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { beta[i] * beta[j] });
    let sigma = DMatrix::from_fn(n, n, |i, j| vol[i] * corr[(i, j)] * vol[j]);
    let fc = 0.2;
    let omega = DMatrix::from_fn(n, n, |i, j| liq[i] * liq[j] * if i == j { 1.0 } else { fc });
    let sigma = SymMatrix::new(sigma)?;
    let omega = SymMatrix::new(omega)?;
    let t = CovarianceTriple::new(sigma.clone(), omega.clone(), DMatrix::zeros(n, n))?;
    Ok(SimSpec {
        n,
        lambda_true: kyle(&t)?,
        omega_true: omega.into_inner(),
        noise_cov: sigma.into_inner() * noise_ratio,
        days: 100,
        bins_per_day: 500,
        day_scale_profiles: None,
        seed,
        periods: default_periods(),
        assets: None,
        spread: None,
        delta_t: DEFAULT_DELTA_T,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::stack_increments;

    fn diag_spec() -> SimSpec {
        let lam = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        SimSpec {
            n: 2,
            noise_cov: &lam * lam.transpose(),
            lambda_true: lam,
            omega_true: DMatrix::identity(2, 2),
            days: 4,
            bins_per_day: 50,
            day_scale_profiles: None,
            seed: 1,
            periods: default_periods(),
            assets: None,
            spread: None,
            delta_t: 60.0,
        }
    }

    #[test]
    fn analytic_examples() {
        let gt = GroundTruth::from_spec(&diag_spec()).unwrap();
        for v in gt.analytic_r2.values() {
            assert!((v - 0.5).abs() < 1e-14);
        }
        let noiseless = SimSpec {
            noise_cov: DMatrix::zeros(2, 2),
            ..diag_spec()
        };
        let gt0 = GroundTruth::from_spec(&noiseless).unwrap();
        assert_eq!(analytic_r2(&gt0, &SymMatrix::identity(2)).unwrap(), 1.0);
        assert!(matches!(analytic_r2(&gt0, &SymMatrix::zeros(2)), Err(Error::InvalidWeight(_))));
        let zero = SimSpec {
            lambda_true: DMatrix::zeros(2, 2),
            ..diag_spec()
        };
        let gtz = GroundTruth::from_spec(&zero).unwrap();
        assert_eq!(analytic_r2(&gtz, &SymMatrix::identity(2)).unwrap(), 0.0);
    }

    #[test]
    fn panel_shape_and_determinism() {
        let (p, _) = simulate_panel(&diag_spec()).unwrap();
        assert_eq!(p.days.len(), 4);
        assert_eq!(p.days[0].bins(), 51);
        assert_eq!(p.days[0].id, "A-0001");
        assert_eq!(p.days[3].id, "B-0002");
        assert_eq!(p.periods(), vec!["A", "B"]);
        let (p2, _) = simulate_panel(&diag_spec()).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn noiseless_increments_are_exact() {
        let spec = SimSpec {
            noise_cov: DMatrix::zeros(2, 2),
            ..diag_spec()
        };
        let (p, gt) = simulate_panel(&spec).unwrap();
        let inc = stack_increments(&p, &[0, 1]);
        for t in 0..inc.len() {
            let pred = &gt.lambda_true * inc.q_row(t);
            assert!((pred - inc.dp_row(t)).norm() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let zero_days = SimSpec { days: 0, ..diag_spec() };
        assert!(simulate_panel(&zero_days).is_err());
        let bad = SimSpec {
            noise_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0])),
            ..diag_spec()
        };
        assert!(matches!(simulate_panel(&bad), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn crude_geometry() {
        let spec = make_crude_scenario(3);
        let gt = GroundTruth::from_spec(&spec).unwrap();
        let eig = sym_eig(&SymMatrix::new(gt.sigma_total.clone()).unwrap());
        assert!(eig.min_eigenvalue() <= 1e-4 * eig.max_eigenvalue());
        let v = DVector::from_vec(vec![1.0, -1.0, 1.0]) / 3f64.sqrt();
        let lam = &gt.lambda_true;
        assert!((v.transpose() * lam).norm() <= 1e-8 * lam.norm());
    }
}
