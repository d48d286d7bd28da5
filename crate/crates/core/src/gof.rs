//! Goodness of fit: weighted generalized R², calibration/evaluation splits,
//! per-asset liquidity curves and sweeps.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::estimation::{
    apply_split, assemble_triple, constrain_assembled, daily_scales, pooled_scales, stationary_correlations,
    year_split, EstimationConfig, Increments, MarketPanel, SplitPlan, SplitSpec, SpreadSpec,
};
use crate::matops::{clip_psd, pinv_psd, sym_eig, SymMatrix, PSD_TOL};
use crate::models::{evaluate, CovarianceTriple, ModelId};
use crate::sampling::{derive_seed, rng};

/// Scores at or below this are reported as minus infinity.
pub const DIVERGENCE_SENTINEL: f64 = -1e6;

/// Eigenvalue floor used before inverting `Sigma` for the modes weight.
pub const MODES_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec {
    /// `diag(sigma)^-2`
    Idio,
    /// `diag(sigma)^-1`
    IdioLiteral,
    /// `sigma_i^-1 sigma_j^-1`
    Global,
    /// Inverse of `Sigma` with eigenvalues clipped at [`MODES_FLOOR`].
    Modes,
    /// Projector on one asset.
    Asset(usize),
    Custom(SymMatrix),
}

impl WeightSpec {
    pub const STANDARD: [WeightSpec; 3] = [WeightSpec::Idio, WeightSpec::Global, WeightSpec::Modes];
}

impl fmt::Display for WeightSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightSpec::Idio => f.write_str("idio"),
            WeightSpec::IdioLiteral => f.write_str("idio-literal"),
            WeightSpec::Global => f.write_str("global"),
            WeightSpec::Modes => f.write_str("modes"),
            WeightSpec::Asset(i) => write!(f, "asset:{i}"),
            WeightSpec::Custom(_) => f.write_str("custom"),
        }
    }
}

impl FromStr for WeightSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "idio" => Ok(WeightSpec::Idio),
            "idio-literal" => Ok(WeightSpec::IdioLiteral),
            "global" => Ok(WeightSpec::Global),
            "modes" => Ok(WeightSpec::Modes),
            other => match other.strip_prefix("asset:").map(str::parse::<usize>) {
                Some(Ok(i)) => Ok(WeightSpec::Asset(i)),
                _ => Err(Error::InvalidWeight(format!("unknown weight {other:?}"))),
            },
        }
    }
}

impl Serialize for WeightSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for WeightSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn inverse_scales(sigma: &DVector<f64>, power: i32) -> DVector<f64> {
    sigma.map(|s| if s > 0.0 { s.powi(-power) } else { 0.0 })
}

/// Realizes a weight on a triple. Zero-volatility assets get zero weight in
/// the diagonal and global forms.
pub fn weight_matrix(spec: &WeightSpec, t: &CovarianceTriple) -> Result<SymMatrix> {
    let n = t.n();
    let sigma = t.scales().sigma;
    let needs_scales = matches!(spec, WeightSpec::Idio | WeightSpec::IdioLiteral | WeightSpec::Global);
    if needs_scales && sigma.iter().all(|&s| s == 0.0) {
        return Err(Error::InvalidWeight("all volatilities are zero".into()));
    }
    match spec {
        WeightSpec::Idio => Ok(SymMatrix::from_diagonal(inverse_scales(&sigma, 2).as_slice())),
        WeightSpec::IdioLiteral => Ok(SymMatrix::from_diagonal(inverse_scales(&sigma, 1).as_slice())),
        WeightSpec::Global => {
            let inv = inverse_scales(&sigma, 1);
            Ok(SymMatrix::symmetrize(&inv * inv.transpose()))
        }
        WeightSpec::Modes => {
            if t.sigma().iter().all(|&x| x == 0.0) {
                return Err(Error::InvalidWeight("sigma is zero".into()));
            }
            Ok(pinv_psd(&clip_psd(t.sigma(), MODES_FLOOR), 0.0))
        }
        WeightSpec::Asset(i) => {
            if *i >= n {
                return Err(Error::InvalidWeight(format!("asset {i} out of range for n = {n}")));
            }
            let mut m = DMatrix::zeros(n, n);
            m[(*i, *i)] = 1.0;
            Ok(SymMatrix::symmetrize(m))
        }
        WeightSpec::Custom(m) => {
            validate_weight(m)?;
            if m.dim() != n {
                return Err(Error::InvalidWeight(format!("custom weight is {0}x{0}, expected {n}x{n}", m.dim())));
            }
            Ok(m.clone())
        }
    }
}

fn validate_weight(m: &SymMatrix) -> Result<()> {
    if m.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidWeight("weight matrix is zero".into()));
    }
    let eig = sym_eig(m);
    if eig.min_eigenvalue() < -PSD_TOL * eig.max_eigenvalue().abs() {
        return Err(Error::InvalidWeight("weight matrix is not PSD".into()));
    }
    Ok(())
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, o: &CompensatedSum) {
        self.add(o.sum);
        self.add(o.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Residual and realized energy accumulated for one R².
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct R2Sums {
    pub residual: CompensatedSum,
    pub realized: CompensatedSum,
    pub samples: usize,
}

impl R2Sums {
    pub fn add(&mut self, realized: &DVector<f64>, predicted: &DVector<f64>, m: &DMatrix<f64>) {
        let e = realized - predicted;
        self.residual.add(e.dot(&(m * &e)));
        self.realized.add(realized.dot(&(m * realized)));
        self.samples += 1;
    }

    pub fn merge(&mut self, o: &R2Sums) {
        self.residual.merge(&o.residual);
        self.realized.merge(&o.realized);
        self.samples += o.samples;
    }

    /// Raw ratio, without the divergence sentinel.
    pub fn raw(&self) -> Result<f64> {
        let den = self.realized.value();
        if !(den > 0.0) {
            return Err(Error::DegenerateDenominator);
        }
        Ok(1.0 - self.residual.value() / den)
    }

    pub fn score(&self) -> Result<f64> {
        self.raw().map(sentinel)
    }
}

/// Maps scores at or below [`DIVERGENCE_SENTINEL`] to minus infinity.
pub fn sentinel(x: f64) -> f64 {
    if x <= DIVERGENCE_SENTINEL {
        f64::NEG_INFINITY
    } else {
        x
    }
}

/// `1 - sum (dp - dp_hat)^T M (dp - dp_hat) / sum dp^T M dp`.
pub fn r2(predictions: &[DVector<f64>], realizations: &[DVector<f64>], m: &SymMatrix) -> Result<f64> {
    if predictions.len() != realizations.len() || predictions.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} realizations",
            predictions.len(),
            realizations.len()
        )));
    }
    validate_weight(m)?;
    let mut acc = R2Sums::default();
    for (p, r) in predictions.iter().zip(realizations) {
        if p.len() != m.dim() || r.len() != m.dim() {
            return Err(Error::Shape("vector and weight dimensions differ".into()));
        }
        acc.add(r, p, m.matrix());
    }
    acc.score()
}

/// Score of a fixed impact matrix on a sample.
pub fn r2_of_impact(lambda: &DMatrix<f64>, inc: &Increments, m: &SymMatrix) -> Result<f64> {
    validate_weight(m)?;
    let mut acc = R2Sums::default();
    for t in 0..inc.len() {
        acc.add(&inc.dp_row(t), &(lambda * inc.q_row(t)), m.matrix());
    }
    acc.score()
}

/// Writes minus infinity as the string `"-inf"` and NaN as null.
pub fn serialize_score<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_infinite() {
        s.serialize_str(if *x < 0.0 { "-inf" } else { "inf" })
    } else if x.is_nan() {
        s.serialize_none()
    } else {
        s.serialize_f64(*x)
    }
}

fn serialize_opt_score<S: Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) => serialize_score(v, s),
        None => s.serialize_none(),
    }
}

pub fn format_score(x: f64) -> String {
    if x == f64::NEG_INFINITY {
        "-inf".into()
    } else if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub estimation: EstimationConfig,
    /// Spread identity re-imposed on every prediction triple.
    pub spread: Option<SpreadSpec>,
    /// Predict with calibration-period scales instead of each evaluation
    /// day's own scales.
    pub strict_scales: bool,
    /// Also accumulate single-asset scores.
    pub per_asset: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            estimation: EstimationConfig::default(),
            spread: None,
            strict_scales: false,
            per_asset: true,
        }
    }
}

/// One (model, weight, directed pair) score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreCell {
    pub model: ModelId,
    pub weight: WeightSpec,
    pub calibration: String,
    pub evaluation: String,
    #[serde(serialize_with = "serialize_opt_score")]
    pub r2: Option<f64>,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub model: ModelId,
    pub weight: WeightSpec,
    #[serde(serialize_with = "serialize_opt_score")]
    pub r2_in: Option<f64>,
    #[serde(serialize_with = "serialize_opt_score")]
    pub r2_out: Option<f64>,
    /// `r2_out / r2_in`
    #[serde(serialize_with = "serialize_opt_score")]
    pub overfit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssetScore {
    pub asset: String,
    pub omega: f64,
    #[serde(serialize_with = "serialize_score")]
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssetScores {
    pub model: ModelId,
    /// Out-of-sample when available, in-sample otherwise.
    pub sample: String,
    pub scores: Vec<AssetScore>,
}

/// Published scores measured on proprietary 2016-2017 exchange data.
/// They cannot be reproduced without that data and are shown for context
/// only, never compared against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceContext {
    pub note: &'static str,
    pub dataset: &'static str,
    pub weight: &'static str,
    pub values: Vec<ReferenceValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceValue {
    pub model: &'static str,
    pub r2_in: f64,
    pub r2_out: f64,
}

const STOCK_REFERENCE: [(&str, f64, f64); 11] = [
    ("direct", 0.038, 0.038),
    ("whitening", -0.025, -0.031),
    ("whitening*", 0.059, 0.047),
    ("el", -0.631, -0.642),
    ("el*", -0.128, -0.133),
    ("kyle", 0.343, 0.336),
    ("r-direct", 0.276, 0.274),
    ("ml", 0.373, 0.358),
    ("r-el", 0.257, 0.249),
    ("r-el*", 0.236, 0.227),
    ("r-kyle", 0.239, 0.232),
];

pub fn reference_context() -> ReferenceContext {
    ReferenceContext {
        note: "reference context only: published values from proprietary 2016-2017 exchange data, \
               not reproducible from public or simulated data and never used as a pass/fail target",
        dataset: "stocks, one-minute bins",
        weight: "idio",
        values: STOCK_REFERENCE
            .iter()
            .map(|&(model, r2_in, r2_out)| ReferenceValue { model, r2_in, r2_out })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub delta_t: f64,
    pub universe: Vec<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    /// Estimator and scoring conventions in force.
    pub conventions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub metadata: RunMetadata,
    pub pairs: SplitPlan,
    pub cells: Vec<ScoreCell>,
    pub aggregates: Vec<Aggregate>,
    pub per_asset: Vec<AssetScores>,
    pub reference_context: ReferenceContext,
}

impl ScoreReport {
    pub fn aggregate(&self, model: ModelId, weight: &WeightSpec) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.model == model && &a.weight == weight)
    }

    /// True when no cell produced a score.
    pub fn total_failure(&self) -> bool {
        self.cells.iter().all(|c| c.r2.is_none())
    }
}

pub fn conventions(cfg: &ScoreConfig) -> Vec<String> {
    let mut out = vec![
        "idio weight is diag(sigma)^-2; idio-literal is diag(sigma)^-1".to_string(),
        "response correlation is diag(sigma)^-1 R diag(omega)^-1, assumed stationary like rho and rho_omega"
            .to_string(),
        format!("scores <= {DIVERGENCE_SENTINEL:e} are reported as -inf"),
        format!("modes weight inverts Sigma after clipping eigenvalues at {MODES_FLOOR:e}"),
    ];
    out.push(if cfg.strict_scales {
        "prediction triples use calibration-period scales".to_string()
    } else {
        "prediction triples use calibration correlations and evaluation-day scales".to_string()
    });
    if let Some(s) = &cfg.spread {
        out.push(format!("spread identity {s} imposed on prices and on every prediction triple"));
    }
    out.push(if cfg.estimation.centered {
        "second moments are centered per day".to_string()
    } else {
        "second moments are uncentered".to_string()
    });
    out
}

struct DayScore {
    /// models x weights
    sums: Vec<Vec<R2Sums>>,
    /// models x assets (panel indices)
    assets: Vec<Vec<R2Sums>>,
    errors: Vec<Option<String>>,
}

struct PairScore {
    sums: Vec<Vec<R2Sums>>,
    assets: Vec<Vec<R2Sums>>,
    errors: Vec<Option<String>>,
    fatal: Option<String>,
}

fn score_day(
    panel: &MarketPanel,
    day: usize,
    triple_scales: &crate::estimation::DailyScales,
    corr: &crate::estimation::StationaryCorrelations,
    models: &[ModelId],
    weights: &[WeightSpec],
    cfg: &ScoreConfig,
) -> Result<DayScore> {
    let n = panel.n();
    let mut assembled = assemble_triple(triple_scales, corr, &cfg.estimation)?;
    if let Some(spec) = &cfg.spread {
        assembled = constrain_assembled(assembled, panel, spec)?;
    }
    let keep = &assembled.assets;
    let t = &assembled.triple;
    let ms: Vec<Result<SymMatrix>> = weights
        .iter()
        .map(|w| match w {
            WeightSpec::Asset(i) => match keep.iter().position(|k| k == i) {
                Some(a) => weight_matrix(&WeightSpec::Asset(a), t),
                None => Err(Error::InvalidWeight(format!("asset {i} dropped on this day"))),
            },
            _ => weight_matrix(w, t),
        })
        .collect();
    let inc = panel.days[day].increments();
    let sub = |row: DVector<f64>| DVector::from_iterator(keep.len(), keep.iter().map(|&i| row[i]));
    let samples: Vec<(DVector<f64>, DVector<f64>)> =
        (0..inc.len()).map(|s| (sub(inc.dp_row(s)), sub(inc.q_row(s)))).collect();
    let mut out = DayScore {
        sums: vec![vec![R2Sums::default(); weights.len()]; models.len()],
        assets: vec![vec![R2Sums::default(); n]; models.len()],
        errors: vec![None; models.len()],
    };
    for (a, &model) in models.iter().enumerate() {
        let lam = match evaluate(model, t) {
            Ok(l) => l.lambda,
            Err(e) => {
                out.errors[a] = Some(e.to_string());
                continue;
            }
        };
        for (dp, q) in &samples {
            let pred = &lam * q;
            for (w, m) in ms.iter().enumerate() {
                if let Ok(m) = m {
                    out.sums[a][w].add(dp, &pred, m.matrix());
                }
            }
            if cfg.per_asset {
                for (k, &i) in keep.iter().enumerate() {
                    let e = dp[k] - pred[k];
                    let acc = &mut out.assets[a][i];
                    acc.residual.add(e * e);
                    acc.realized.add(dp[k] * dp[k]);
                    acc.samples += 1;
                }
            }
        }
    }
    for (w, m) in ms.iter().enumerate() {
        if let Err(e) = m {
            for a in 0..models.len() {
                if out.errors[a].is_none() {
                    out.errors[a] = Some(format!("weight {}: {e}", weights[w]));
                }
            }
        }
    }
    Ok(out)
}

fn score_pair(
    panel: &MarketPanel,
    calibration: &str,
    evaluation: &str,
    models: &[ModelId],
    weights: &[WeightSpec],
    cfg: &ScoreConfig,
) -> PairScore {
    let n = panel.n();
    let mut out = PairScore {
        sums: vec![vec![R2Sums::default(); weights.len()]; models.len()],
        assets: vec![vec![R2Sums::default(); n]; models.len()],
        errors: vec![None; models.len()],
        fatal: None,
    };
    let cal_days = panel.day_indices(calibration);
    let corr = match stationary_correlations(panel, &cal_days, &cfg.estimation) {
        Ok(c) => c,
        Err(e) => {
            out.fatal = Some(e.to_string());
            return out;
        }
    };
    let strict = if cfg.strict_scales {
        match pooled_scales(panel, &cal_days, &cfg.estimation, calibration) {
            Ok(s) => Some(s),
            Err(e) => {
                out.fatal = Some(e.to_string());
                return out;
            }
        }
    } else {
        None
    };
    let eval_days = panel.day_indices(evaluation);
    let per_day: Vec<Option<DayScore>> = eval_days
        .par_iter()
        .map(|&k| {
            let own;
            let scales = match &strict {
                Some(s) => s,
                None => match daily_scales(panel, k, &cfg.estimation) {
                    Ok(s) => {
                        own = s;
                        &own
                    }
                    Err(e) => {
                        warn!("skipping evaluation day {}: {e}", panel.days[k].id);
                        return None;
                    }
                },
            };
            match score_day(panel, k, scales, &corr, models, weights, cfg) {
                Ok(d) => Some(d),
                Err(e) => {
                    warn!("skipping evaluation day {}: {e}", panel.days[k].id);
                    None
                }
            }
        })
        .collect();
    for d in per_day.iter().flatten() {
        for a in 0..models.len() {
            for w in 0..weights.len() {
                out.sums[a][w].merge(&d.sums[a][w]);
            }
            for i in 0..n {
                out.assets[a][i].merge(&d.assets[a][i]);
            }
            if out.errors[a].is_none() {
                out.errors[a] = d.errors[a].clone();
            }
        }
    }
    out
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Calibrates on each pair's first period and scores on its second.
/// Failures are recorded per cell and the run continues.
pub fn score_models(
    panel: &MarketPanel,
    models: &[ModelId],
    weights: &[WeightSpec],
    plan: &SplitPlan,
    cfg: &ScoreConfig,
) -> Result<ScoreReport> {
    if models.is_empty() || weights.is_empty() {
        return Err(Error::Validation("at least one model and one weight are needed".into()));
    }
    if plan.pairs.is_empty() {
        return Err(Error::Validation("split has no pairs".into()));
    }
    let n = panel.n();
    let pair_scores: Vec<PairScore> = plan
        .pairs
        .par_iter()
        .map(|p| score_pair(panel, &p.calibration, &p.evaluation, models, weights, cfg))
        .collect();

    let mut cells = Vec::new();
    for (p, ps) in plan.pairs.iter().zip(&pair_scores) {
        for (a, &model) in models.iter().enumerate() {
            for (w, weight) in weights.iter().enumerate() {
                let sums = &ps.sums[a][w];
                let (r2, error) = match (&ps.fatal, sums.score()) {
                    (Some(e), _) => (None, Some(e.clone())),
                    (None, Ok(v)) if sums.samples > 0 => (Some(v), None),
                    (None, Ok(_)) | (None, Err(_)) => (
                        None,
                        Some(ps.errors[a].clone().unwrap_or_else(|| "no scorable samples".into())),
                    ),
                };
                cells.push(ScoreCell {
                    model,
                    weight: weight.clone(),
                    calibration: p.calibration.clone(),
                    evaluation: p.evaluation.clone(),
                    r2,
                    samples: sums.samples,
                    error,
                });
            }
        }
    }

    let mut aggregates = Vec::new();
    for &model in models {
        for weight in weights {
            let pick = |inside: bool| -> Option<f64> {
                let sel: Vec<&ScoreCell> = cells
                    .iter()
                    .filter(|c| {
                        c.model == model && &c.weight == weight && (c.calibration == c.evaluation) == inside
                    })
                    .collect();
                if sel.is_empty() || sel.iter().any(|c| c.r2.is_none()) {
                    return None;
                }
                mean(&sel.iter().map(|c| c.r2.unwrap()).collect::<Vec<_>>())
            };
            let r2_in = pick(true);
            let r2_out = pick(false);
            let overfit = match (r2_in, r2_out) {
                (Some(i), Some(o)) if i != 0.0 && i.is_finite() && o.is_finite() => Some(o / i),
                _ => None,
            };
            aggregates.push(Aggregate {
                model,
                weight: weight.clone(),
                r2_in,
                r2_out,
                overfit,
            });
        }
    }

    let mut per_asset = Vec::new();
    if cfg.per_asset {
        let all: Vec<usize> = (0..panel.days.len()).collect();
        let omega = pooled_scales(panel, &all, &cfg.estimation, "all").map(|s| s.omega);
        let use_out = !plan.in_sample_only;
        if let Ok(omega) = omega {
            for (a, &model) in models.iter().enumerate() {
                let mut scores = Vec::with_capacity(n);
                for i in 0..n {
                    let vals: Vec<f64> = plan
                        .pairs
                        .iter()
                        .zip(&pair_scores)
                        .filter(|(p, ps)| p.in_sample() != use_out && ps.fatal.is_none())
                        .filter_map(|(_, ps)| ps.assets[a][i].score().ok())
                        .collect();
                    if let Some(r2) = mean(&vals) {
                        scores.push(AssetScore {
                            asset: panel.assets[i].clone(),
                            omega: omega[i],
                            r2,
                        });
                    }
                }
                per_asset.push(AssetScores {
                    model,
                    sample: if use_out { "out" } else { "in" }.into(),
                    scores,
                });
            }
        }
    }

    Ok(ScoreReport {
        metadata: RunMetadata {
            delta_t: panel.delta_t,
            universe: panel.assets.clone(),
            seed: None,
            config_hash: None,
            conventions: conventions(cfg),
        },
        pairs: plan.clone(),
        cells,
        aggregates,
        per_asset,
        reference_context: reference_context(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiquidityBin {
    pub lo: f64,
    pub hi: f64,
    /// Mean liquidity of the member assets.
    pub center: Option<f64>,
    #[serde(serialize_with = "serialize_opt_score")]
    pub mean: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiquidityCurve {
    pub bins: Vec<LiquidityBin>,
    pub omega_q10: f64,
    pub omega_q90: f64,
    pub single_asset: bool,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (h - lo as f64)
}

/// Mean single-asset score per liquidity quantile bin. Assets with equal
/// liquidity always share a bin.
pub fn liquidity_curve(scores: &[AssetScore], n_bins: usize) -> Result<LiquidityCurve> {
    if n_bins == 0 {
        return Err(Error::Validation("n_bins must be positive".into()));
    }
    if scores.is_empty() {
        return Err(Error::InsufficientData("no per-asset scores".into()));
    }
    let mut omega: Vec<f64> = scores.iter().map(|s| s.omega).collect();
    omega.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (0..=n_bins).map(|k| quantile(&omega, k as f64 / n_bins as f64)).collect();
    let mut members: Vec<Vec<&AssetScore>> = vec![Vec::new(); n_bins];
    for s in scores {
        let b = edges[1..n_bins].iter().filter(|&&e| e < s.omega).count();
        members[b].push(s);
    }
    let bins = (0..n_bins)
        .map(|b| {
            let m = &members[b];
            let avg = |f: &dyn Fn(&AssetScore) -> f64| {
                if m.is_empty() {
                    None
                } else {
                    Some(m.iter().map(|s| f(s)).sum::<f64>() / m.len() as f64)
                }
            };
            LiquidityBin {
                lo: edges[b],
                hi: edges[b + 1],
                center: avg(&|s| s.omega),
                mean: avg(&|s| s.r2),
                count: m.len(),
            }
        })
        .collect();
    if scores.len() == 1 {
        warn!("liquidity curve over a single asset");
    }
    Ok(LiquidityCurve {
        bins,
        omega_q10: quantile(&omega, 0.1),
        omega_q90: quantile(&omega, 0.9),
        single_asset: scores.len() == 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Random sub-universes of each size.
    Assets,
    /// Bin length in seconds, a multiple of the panel's.
    DeltaT,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub model: ModelId,
    pub weight: WeightSpec,
    #[serde(serialize_with = "serialize_opt_score")]
    pub r2_out: Option<f64>,
    #[serde(serialize_with = "serialize_opt_score")]
    pub overfit: Option<f64>,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    pub notes: Vec<String>,
}

/// Repetitions for a sub-universe of `n` out of `total` assets.
pub fn repetitions(n: usize, total: usize) -> usize {
    if n >= total {
        1
    } else {
        (4 * total).div_ceil(n)
    }
}

/// Scores the panel along one axis. Infeasible grid points are skipped
/// with a note.
pub fn sweep(
    panel: &MarketPanel,
    axis: SweepAxis,
    grid: &[f64],
    models: &[ModelId],
    weights: &[WeightSpec],
    split: SplitSpec,
    cfg: &ScoreConfig,
    seed: u64,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Validation("sweep grid is empty".into()));
    }
    let mut cfg = cfg.clone();
    cfg.per_asset = false;
    let total = panel.n();
    let full_spread = cfg.spread.clone();
    let mut points = Vec::new();
    let mut notes = Vec::new();
    for &value in grid {
        let runs: Vec<MarketPanel> = match axis {
            SweepAxis::Assets => {
                let k = value as usize;
                if value.fract() != 0.0 || k == 0 || k > total {
                    notes.push(format!("skipped {value}: not a universe size in 1..={total}"));
                    continue;
                }
                let reps = repetitions(k, total);
                let mut out = Vec::with_capacity(reps);
                for r in 0..reps {
                    let mut g = rng(derive_seed(seed, ((k as u64) << 32) | r as u64));
                    let mut idx = if k == total {
                        (0..total).collect()
                    } else {
                        rand::seq::index::sample(&mut g, total, k).into_vec()
                    };
                    idx.sort_unstable();
                    out.push(panel.select(&idx)?);
                }
                out
            }
            SweepAxis::DeltaT => {
                let ratio = value / panel.delta_t;
                let factor = ratio.round() as usize;
                if factor == 0 || (ratio - factor as f64).abs() > 1e-9 {
                    notes.push(format!("skipped {value}: not a multiple of {}", panel.delta_t));
                    continue;
                }
                let coarse = panel.coarsen(factor)?;
                let longest = coarse.days.iter().map(|d| d.bins()).max().unwrap_or(0);
                if longest < cfg.estimation.min_bins + 1 {
                    notes.push(format!("skipped {value}: fewer than {} bins per day", cfg.estimation.min_bins + 1));
                    continue;
                }
                vec![coarse]
            }
        };
        let reps = runs.len();
        let reports: Vec<Result<ScoreReport>> = runs
            .iter()
            .map(|p| {
                let mut cfg = cfg.clone();
                cfg.spread = full_spread
                    .clone()
                    .filter(|s| [&s.spread, &s.leg_plus, &s.leg_minus].iter().all(|a| p.asset_index(a).is_ok()));
                let p = apply_split(p, split);
                let plan = year_split(&p)?;
                score_models(&p, models, weights, &plan, &cfg)
            })
            .collect();
        for &model in models {
            for weight in weights {
                let mut outs = Vec::new();
                let mut ratios = Vec::new();
                for rep in reports.iter().flatten() {
                    if let Some(a) = rep.aggregate(model, weight) {
                        outs.extend(a.r2_out);
                        ratios.extend(a.overfit);
                    }
                }
                points.push(SweepPoint {
                    value,
                    model,
                    weight: weight.clone(),
                    r2_out: mean(&outs),
                    overfit: mean(&ratios),
                    repetitions: reps,
                });
            }
        }
        for e in reports.iter().filter_map(|r| r.as_ref().err()) {
            notes.push(format!("{value}: {e}"));
        }
    }
    Ok(SweepReport { axis, points, notes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(s: &[f64]) -> CovarianceTriple {
        let n = s.len();
        CovarianceTriple::from_matrices(
            DMatrix::from_diagonal(&DVector::from_vec(s.iter().map(|x| x * x).collect())),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
        )
        .unwrap()
    }

    #[test]
    fn weight_examples() {
        let t = triple(&[2.0, 1.0]);
        let idio = weight_matrix(&WeightSpec::Idio, &t).unwrap();
        assert_eq!(idio.matrix(), &DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 1.0]));
        let g = weight_matrix(&WeightSpec::Global, &t).unwrap();
        assert_eq!(g.matrix(), &DMatrix::from_row_slice(2, 2, &[0.25, 0.5, 0.5, 1.0]));
        let modes = weight_matrix(&WeightSpec::Modes, &triple(&[2.0, 0.0])).unwrap();
        assert!((modes[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((modes[(1, 1)] / 1e15 - 1.0).abs() < 1e-9);
        assert!(matches!(
            weight_matrix(&WeightSpec::Idio, &triple(&[0.0, 0.0])),
            Err(Error::InvalidWeight(_))
        ));
    }

    #[test]
    fn r2_examples() {
        let m = SymMatrix::identity(2);
        let real = vec![DVector::from_vec(vec![1.0, -2.0]), DVector::from_vec(vec![0.5, 0.3])];
        assert_eq!(r2(&real, &real, &m).unwrap(), 1.0);
        let zero = vec![DVector::zeros(2); 2];
        assert_eq!(r2(&zero, &real, &m).unwrap(), 0.0);
        assert!(matches!(r2(&real, &zero, &m), Err(Error::DegenerateDenominator)));
        let huge = vec![DVector::from_vec(vec![1e4, 0.0]); 2];
        assert_eq!(r2(&huge, &real, &m).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn weight_names_round_trip() {
        for s in ["idio", "idio-literal", "global", "modes", "asset:3"] {
            assert_eq!(s.parse::<WeightSpec>().unwrap().to_string(), s);
        }
        assert!("bogus".parse::<WeightSpec>().is_err());
    }

    fn score(omega: f64, r2: f64) -> AssetScore {
        AssetScore {
            asset: String::new(),
            omega,
            r2,
        }
    }

    #[test]
    fn curve_examples() {
        let same = [score(1.0, 0.1), score(1.0, 0.3), score(1.0, 0.5)];
        let c = liquidity_curve(&same, 3).unwrap();
        assert_eq!(c.bins.iter().filter(|b| b.count > 0).count(), 1);
        let spread = [score(1.0, 0.1), score(2.0, 0.3), score(3.0, 0.5), score(4.0, 0.7)];
        let one = liquidity_curve(&spread, 1).unwrap();
        assert!((one.bins[0].mean.unwrap() - 0.4).abs() < 1e-15);
        let two = liquidity_curve(&spread, 2).unwrap();
        assert_eq!(two.bins[0].count, 2);
        assert!(liquidity_curve(&[score(1.0, 0.0)], 2).unwrap().single_asset);
    }

    #[test]
    fn repetition_counts() {
        assert_eq!(repetitions(10, 10), 1);
        assert_eq!(repetitions(3, 10), 14);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::default();
        s.add(1e16);
        for _ in 0..10 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 10.0);
    }
}
