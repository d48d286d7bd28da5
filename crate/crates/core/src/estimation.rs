//! Binned market panels and the daily-scale / stationary-correlation
//! estimator that turns them into per-day covariance triples.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{clip_psd, SymMatrix};
use crate::models::CovarianceTriple;

pub const DEFAULT_DELTA_T: f64 = 60.0;

/// Fewest price increments a day needs before its scales are trusted.
pub const MIN_BINS: usize = 30;

/// Eigenvalue floor applied to the pooled correlation matrices.
pub const CORRELATION_FLOOR: f64 = 1e-15;

/// One trading session: opening prices and net signed flows per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionDay {
    pub id: String,
    /// Label used to group days into calibration / evaluation sets.
    pub period: String,
    /// bins x assets
    pub prices: DMatrix<f64>,
    pub flows: DMatrix<f64>,
    /// Row-major bins x assets; `true` where the bin carried no observation.
    /// Such bins hold a forward-filled price and zero flow.
    pub missing: Vec<bool>,
}

/// Price changes `p_{t+1} - p_t` paired with the flow of bin `t`. Rows are
/// samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub dp: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl Increments {
    pub fn len(&self) -> usize {
        self.dp.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n(&self) -> usize {
        self.dp.ncols()
    }

    pub fn dp_row(&self, t: usize) -> DVector<f64> {
        self.dp.row(t).transpose()
    }

    pub fn q_row(&self, t: usize) -> DVector<f64> {
        self.q.row(t).transpose()
    }

    fn centered(&self) -> Increments {
        let center = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            if m.nrows() == 0 {
                return out;
            }
            for j in 0..m.ncols() {
                let mean = m.column(j).mean();
                out.column_mut(j).add_scalar_mut(-mean);
            }
            out
        };
        Increments {
            dp: center(&self.dp),
            q: center(&self.q),
        }
    }
}

impl SessionDay {
    pub fn new(
        id: impl Into<String>,
        period: impl Into<String>,
        prices: DMatrix<f64>,
        flows: DMatrix<f64>,
        missing: Vec<bool>,
    ) -> Result<Self> {
        let id = id.into();
        if prices.shape() != flows.shape() || missing.len() != prices.len() {
            return Err(Error::Shape(format!(
                "day {id}: prices {:?}, flows {:?}, {} missing flags",
                prices.shape(),
                flows.shape(),
                missing.len()
            )));
        }
        if let Some(p) = prices.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::Validation(format!("day {id}: price {p} is not positive")));
        }
        if flows.iter().any(|q| !q.is_finite()) {
            return Err(Error::Validation(format!("day {id}: non-finite flow")));
        }
        Ok(Self {
            id,
            period: period.into(),
            prices,
            flows,
            missing,
        })
    }

    pub fn bins(&self) -> usize {
        self.prices.nrows()
    }

    pub fn n(&self) -> usize {
        self.prices.ncols()
    }

    pub fn is_missing(&self, bin: usize, asset: usize) -> bool {
        self.missing[bin * self.n() + asset]
    }

    fn bin_complete(&self, bin: usize) -> bool {
        (0..self.n()).all(|i| !self.is_missing(bin, i))
    }

    /// Samples touching a missing bin of any asset are left out.
    pub fn increments(&self) -> Increments {
        let n = self.n();
        let rows: Vec<usize> = (0..self.bins().saturating_sub(1))
            .filter(|&t| self.bin_complete(t) && self.bin_complete(t + 1))
            .collect();
        let dp = DMatrix::from_fn(rows.len(), n, |r, i| {
            let t = rows[r];
            self.prices[(t + 1, i)] - self.prices[(t, i)]
        });
        let q = DMatrix::from_fn(rows.len(), n, |r, i| self.flows[(rows[r], i)]);
        Increments { dp, q }
    }

    fn select(&self, idx: &[usize]) -> SessionDay {
        let n = self.n();
        let b = self.bins();
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(b, idx.len(), |t, j| m[(t, idx[j])]);
        let missing = (0..b)
            .flat_map(|t| idx.iter().map(move |&i| self.missing[t * n + i]))
            .collect();
        SessionDay {
            id: self.id.clone(),
            period: self.period.clone(),
            prices: pick(&self.prices),
            flows: pick(&self.flows),
            missing,
        }
    }
}

/// Period label of a day id of the form `<period>-<index>`.
pub fn period_of(day_id: &str) -> &str {
    match day_id.rfind('-') {
        Some(k) if k > 0 => &day_id[..k],
        _ => day_id,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketPanel {
    pub assets: Vec<String>,
    /// Bin length in seconds.
    pub delta_t: f64,
    pub days: Vec<SessionDay>,
}

impl MarketPanel {
    pub fn new(assets: Vec<String>, delta_t: f64, days: Vec<SessionDay>) -> Result<Self> {
        if !(delta_t > 0.0 && delta_t.is_finite()) {
            return Err(Error::Validation(format!("bin length {delta_t} must be positive")));
        }
        let mut seen = HashMap::new();
        for (i, a) in assets.iter().enumerate() {
            if seen.insert(a.as_str(), i).is_some() {
                return Err(Error::Validation(format!("duplicate asset {a}")));
            }
        }
        let mut ids = HashMap::new();
        for d in &days {
            if d.n() != assets.len() {
                return Err(Error::Shape(format!(
                    "day {} has {} assets, panel has {}",
                    d.id,
                    d.n(),
                    assets.len()
                )));
            }
            if ids.insert(d.id.as_str(), ()).is_some() {
                return Err(Error::Validation(format!("duplicate day {}", d.id)));
            }
        }
        Ok(Self {
            assets,
            delta_t,
            days,
        })
    }

    pub fn n(&self) -> usize {
        self.assets.len()
    }

    pub fn asset_index(&self, name: &str) -> Result<usize> {
        self.assets
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::UnknownAsset(name.to_string()))
    }

    /// Period labels in order of first appearance.
    pub fn periods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for d in &self.days {
            if !out.contains(&d.period) {
                out.push(d.period.clone());
            }
        }
        out
    }

    pub fn day_indices(&self, period: &str) -> Vec<usize> {
        (0..self.days.len())
            .filter(|&k| self.days[k].period == period)
            .collect()
    }

    pub fn total_samples(&self) -> usize {
        self.days.iter().map(|d| d.increments().len()).sum()
    }

    /// Sub-universe with the listed assets, in the listed order.
    pub fn select(&self, idx: &[usize]) -> Result<MarketPanel> {
        if let Some(&i) = idx.iter().find(|&&i| i >= self.n()) {
            return Err(Error::Shape(format!("asset index {i} out of range")));
        }
        Ok(MarketPanel {
            assets: idx.iter().map(|&i| self.assets[i].clone()).collect(),
            delta_t: self.delta_t,
            days: self.days.iter().map(|d| d.select(idx)).collect(),
        })
    }

    /// Re-bins to `factor * delta_t`: opens of every `factor`-th bin, flows
    /// summed over each group. A trailing partial group is dropped.
    pub fn coarsen(&self, factor: usize) -> Result<MarketPanel> {
        if factor == 0 {
            return Err(Error::Validation("coarsening factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let n = self.n();
        let days = self
            .days
            .iter()
            .map(|d| {
                let b = d.bins() / factor;
                let prices = DMatrix::from_fn(b, n, |k, i| d.prices[(k * factor, i)]);
                let flows = DMatrix::from_fn(b, n, |k, i| {
                    (0..factor).map(|s| d.flows[(k * factor + s, i)]).sum()
                });
                let missing = (0..b)
                    .flat_map(|k| {
                        (0..n).map(move |i| (0..factor).any(|s| d.is_missing(k * factor + s, i)))
                    })
                    .collect();
                SessionDay {
                    id: d.id.clone(),
                    period: d.period.clone(),
                    prices,
                    flows,
                    missing,
                }
            })
            .collect();
        Ok(MarketPanel {
            assets: self.assets.clone(),
            delta_t: self.delta_t * factor as f64,
            days,
        })
    }
}

/// One trade or quote update. Quotes carry zero volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub day: String,
    pub asset: String,
    /// Seconds since midnight.
    pub time: f64,
    pub mid: f64,
    /// Buys positive, sells negative.
    pub signed_volume: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionWindow {
    pub start: f64,
    pub end: f64,
}

/// Bins a tick stream into a panel. Days appear in order of first tick.
pub fn bin_events(
    ticks: &[Tick],
    assets: &[String],
    delta_t: f64,
    window: SessionWindow,
) -> Result<MarketPanel> {
    if !(delta_t > 0.0) || !(window.end > window.start) {
        return Err(Error::Validation(format!(
            "bin length {delta_t} and window [{}, {}) are inconsistent",
            window.start, window.end
        )));
    }
    let n = assets.len();
    let bins = ((window.end - window.start) / delta_t + 1e-9).floor() as usize;
    if bins == 0 {
        return Err(Error::Validation("session shorter than one bin".into()));
    }
    let index: HashMap<&str, usize> = assets.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();

    let mut day_order: Vec<String> = Vec::new();
    let mut per_day: HashMap<String, Vec<&Tick>> = HashMap::new();
    let mut last_time: HashMap<(String, usize), f64> = HashMap::new();
    for tk in ticks {
        let i = *index
            .get(tk.asset.as_str())
            .ok_or_else(|| Error::UnknownAsset(tk.asset.clone()))?;
        let key = (tk.day.clone(), i);
        if let Some(&prev) = last_time.get(&key) {
            if tk.time < prev {
                return Err(Error::Ordering(format!(
                    "{} on {}: time {} after {}",
                    tk.asset, tk.day, tk.time, prev
                )));
            }
        }
        last_time.insert(key, tk.time);
        if !per_day.contains_key(&tk.day) {
            day_order.push(tk.day.clone());
        }
        per_day.entry(tk.day.clone()).or_default().push(tk);
    }

    let end = window.start + bins as f64 * delta_t;
    let mut days = Vec::with_capacity(day_order.len());
    for day in day_order {
        let events: Vec<&Tick> = per_day[&day]
            .iter()
            .copied()
            .filter(|t| t.time >= window.start && t.time < end)
            .collect();
        if events.is_empty() {
            return Err(Error::EmptySession(day));
        }
        let mut flows = DMatrix::zeros(bins, n);
        let mut first_mid: Vec<Vec<Option<f64>>> = vec![vec![None; n]; bins];
        let mut last_mid: Vec<Vec<Option<f64>>> = vec![vec![None; n]; bins];
        for tk in &events {
            let i = index[tk.asset.as_str()];
            let b = (((tk.time - window.start) / delta_t).floor() as usize).min(bins - 1);
            flows[(b, i)] += tk.signed_volume;
            if first_mid[b][i].is_none() {
                first_mid[b][i] = Some(tk.mid);
            }
            last_mid[b][i] = Some(tk.mid);
        }
        let mut prices = DMatrix::zeros(bins, n);
        let mut missing = vec![false; bins * n];
        for i in 0..n {
            let mut known: Option<f64> = None;
            let mut leading = 0;
            for b in 0..bins {
                // the open is the last quote before the bin starts, else the
                // first quote inside it
                let open = known.or(first_mid[b][i]);
                match open {
                    Some(p) => prices[(b, i)] = p,
                    None => {
                        missing[b * n + i] = true;
                        leading += 1;
                    }
                }
                if let Some(p) = last_mid[b][i] {
                    known = Some(p);
                }
            }
            let fill = (0..bins).find_map(|b| first_mid[b][i]);
            match fill {
                Some(p) => {
                    for b in 0..leading {
                        prices[(b, i)] = p;
                    }
                }
                None => {
                    return Err(Error::EmptySession(format!("{day} ({})", assets[i])));
                }
            }
        }
        let period = period_of(&day).to_string();
        days.push(SessionDay::new(day, period, prices, flows, missing)?);
    }
    MarketPanel::new(assets.to_vec(), delta_t, days)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    /// Subtract per-day means before taking second moments.
    pub centered: bool,
    /// Drop assets with zero flow volatility from a day's triple instead of
    /// failing.
    pub drop_illiquid: bool,
    pub min_bins: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            centered: false,
            drop_illiquid: true,
            min_bins: MIN_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyScales {
    pub day: String,
    pub sigma: Vec<f64>,
    pub omega: Vec<f64>,
    /// Assets whose flow volatility is zero on this day.
    pub degenerate: Vec<usize>,
    pub samples: usize,
}

fn day_increments(day: &SessionDay, cfg: &EstimationConfig) -> Increments {
    let inc = day.increments();
    if cfg.centered {
        inc.centered()
    } else {
        inc
    }
}

fn rms(m: &DMatrix<f64>, j: usize) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    (m.column(j).norm_squared() / m.nrows() as f64).sqrt()
}

/// Root mean square price change and flow per asset over one day.
pub fn daily_scales(panel: &MarketPanel, day: usize, cfg: &EstimationConfig) -> Result<DailyScales> {
    let d = panel
        .days
        .get(day)
        .ok_or_else(|| Error::Validation(format!("day index {day} out of range")))?;
    let inc = day_increments(d, cfg);
    if inc.len() < cfg.min_bins {
        return Err(Error::InsufficientData(format!(
            "day {} has {} usable increments, need {}",
            d.id,
            inc.len(),
            cfg.min_bins
        )));
    }
    let n = panel.n();
    let sigma: Vec<f64> = (0..n).map(|j| rms(&inc.dp, j)).collect();
    let omega: Vec<f64> = (0..n).map(|j| rms(&inc.q, j)).collect();
    let degenerate = (0..n).filter(|&j| omega[j] == 0.0).collect();
    Ok(DailyScales {
        day: d.id.clone(),
        sigma,
        omega,
        degenerate,
        samples: inc.len(),
    })
}

/// Correlation-level statistics assumed constant across a calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryCorrelations {
    pub rho: SymMatrix,
    pub rho_omega: SymMatrix,
    /// `diag(sigma)^{-1} R diag(omega)^{-1}`
    pub rho_response: DMatrix<f64>,
    pub samples: usize,
    pub days: usize,
}

#[derive(Clone)]
struct Moments {
    xx: DMatrix<f64>,
    yy: DMatrix<f64>,
    xy: DMatrix<f64>,
    nxx: DMatrix<f64>,
    nyy: DMatrix<f64>,
    nxy: DMatrix<f64>,
    samples: usize,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        let z = DMatrix::zeros(n, n);
        Self {
            xx: z.clone(),
            yy: z.clone(),
            xy: z.clone(),
            nxx: z.clone(),
            nyy: z.clone(),
            nxy: z,
            samples: 0,
        }
    }

    fn add(&mut self, o: &Moments) {
        self.xx += &o.xx;
        self.yy += &o.yy;
        self.xy += &o.xy;
        self.nxx += &o.nxx;
        self.nyy += &o.nyy;
        self.nxy += &o.nxy;
        self.samples += o.samples;
    }
}

fn rescaled_moments(inc: &Increments, s: &DailyScales) -> Moments {
    let n = inc.n();
    let m = inc.len();
    let inv = |v: &[f64]| -> Vec<Option<f64>> {
        v.iter().map(|&x| if x > 0.0 { Some(1.0 / x) } else { None }).collect()
    };
    let (is, io) = (inv(&s.sigma), inv(&s.omega));
    let x = DMatrix::from_fn(m, n, |t, i| is[i].map_or(0.0, |k| inc.dp[(t, i)] * k));
    let y = DMatrix::from_fn(m, n, |t, i| io[i].map_or(0.0, |k| inc.q[(t, i)] * k));
    let live = |v: &[Option<f64>]| {
        DVector::from_iterator(n, v.iter().map(|k| if k.is_some() { m as f64 } else { 0.0 }))
    };
    let (lx, ly) = (live(&is), live(&io));
    let outer = |a: &DVector<f64>, b: &DVector<f64>| {
        DMatrix::from_fn(n, n, |i, j| if a[i] > 0.0 && b[j] > 0.0 { m as f64 } else { 0.0 })
    };
    Moments {
        xx: x.transpose() * &x,
        yy: y.transpose() * &y,
        xy: x.transpose() * &y,
        nxx: outer(&lx, &lx),
        nyy: outer(&ly, &ly),
        nxy: outer(&lx, &ly),
        samples: m,
    }
}

fn normalize(sum: &DMatrix<f64>, count: &DMatrix<f64>) -> DMatrix<f64> {
    sum.zip_map(count, |s, c| if c > 0.0 { s / c } else { 0.0 })
}

/// Pools price changes and flows rescaled by each day's scales and returns
/// their correlation matrices.
pub fn stationary_correlations(
    panel: &MarketPanel,
    calibration_days: &[usize],
    cfg: &EstimationConfig,
) -> Result<StationaryCorrelations> {
    if calibration_days.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} calibration days, need at least 2",
            calibration_days.len()
        )));
    }
    let n = panel.n();
    let parts: Vec<Option<Moments>> = calibration_days
        .par_iter()
        .map(|&k| {
            let s = match daily_scales(panel, k, cfg) {
                Ok(s) => s,
                Err(e) => {
                    warn!("skipping calibration day: {e}");
                    return None;
                }
            };
            Some(rescaled_moments(&day_increments(&panel.days[k], cfg), &s))
        })
        .collect();
    let mut total = Moments::zeros(n);
    let mut used = 0;
    for p in parts.iter().flatten() {
        total.add(p);
        used += 1;
    }
    if used < 2 {
        return Err(Error::InsufficientData(format!(
            "{used} usable calibration days, need at least 2"
        )));
    }
    let mxx = normalize(&total.xx, &total.nxx);
    let myy = normalize(&total.yy, &total.nyy);
    let mxy = normalize(&total.xy, &total.nxy);
    let dx: Vec<f64> = (0..n).map(|i| mxx[(i, i)]).collect();
    let dy: Vec<f64> = (0..n).map(|i| myy[(i, i)]).collect();
    let corr = |m: &DMatrix<f64>, a: &[f64], b: &[f64], unit: bool| {
        DMatrix::from_fn(n, n, |i, j| {
            if unit && i == j {
                1.0
            } else if a[i] > 0.0 && b[j] > 0.0 {
                m[(i, j)] / (a[i] * b[j]).sqrt()
            } else {
                0.0
            }
        })
    };
    let rho = clip_psd(&SymMatrix::symmetrize(corr(&mxx, &dx, &dx, true)), CORRELATION_FLOOR);
    let rho_omega = clip_psd(&SymMatrix::symmetrize(corr(&myy, &dy, &dy, true)), CORRELATION_FLOOR);
    Ok(StationaryCorrelations {
        rho,
        rho_omega,
        rho_response: corr(&mxy, &dx, &dy, false),
        samples: total.samples,
        days: used,
    })
}

/// A day's triple together with the panel indices of the assets it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledTriple {
    pub triple: CovarianceTriple,
    pub assets: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// `Sigma = D_s rho D_s`, `Omega = D_w rho_Omega D_w`, `R = D_s rho_R D_w`.
pub fn assemble_triple(
    scales: &DailyScales,
    corr: &StationaryCorrelations,
    cfg: &EstimationConfig,
) -> Result<AssembledTriple> {
    let n = corr.rho.dim();
    if scales.sigma.len() != n || scales.omega.len() != n {
        return Err(Error::Shape(format!(
            "scales have {} entries, correlations are {n}x{n}",
            scales.sigma.len()
        )));
    }
    let mut keep = Vec::with_capacity(n);
    let mut dropped = Vec::new();
    for i in 0..n {
        if scales.omega[i] > 0.0 {
            keep.push(i);
        } else if cfg.drop_illiquid {
            warn!("day {}: dropping asset {i} with zero flow volatility", scales.day);
            dropped.push(i);
        } else {
            return Err(Error::DegenerateLiquidity { asset: i });
        }
    }
    let k = keep.len();
    let s = DVector::from_iterator(k, keep.iter().map(|&i| scales.sigma[i]));
    let w = DVector::from_iterator(k, keep.iter().map(|&i| scales.omega[i]));
    let pick = |m: &DMatrix<f64>| DMatrix::from_fn(k, k, |a, b| m[(keep[a], keep[b])]);
    let ds = DMatrix::from_diagonal(&s);
    let dw = DMatrix::from_diagonal(&w);
    let sigma = SymMatrix::symmetrize(&ds * pick(corr.rho.matrix()) * &ds);
    let omega = SymMatrix::symmetrize(&dw * pick(corr.rho_omega.matrix()) * &dw);
    let response = &ds * pick(&corr.rho_response) * &dw;
    Ok(AssembledTriple {
        triple: CovarianceTriple::new(sigma, omega, response)?,
        assets: keep,
        dropped,
    })
}

/// Inverse of [`assemble_triple`] for a triple with positive scales.
pub fn decompose_triple(t: &CovarianceTriple) -> Result<(Vec<f64>, Vec<f64>, StationaryCorrelations)> {
    let sc = t.scales();
    if sc.sigma.iter().chain(sc.omega.iter()).any(|&x| !(x > 0.0)) {
        return Err(Error::Validation("decomposition needs positive scales".into()));
    }
    let ds = DMatrix::from_diagonal(&sc.sigma.map(|x| 1.0 / x));
    let dw = DMatrix::from_diagonal(&sc.omega.map(|x| 1.0 / x));
    let corr = StationaryCorrelations {
        rho: t.sigma().congruence(&ds),
        rho_omega: t.omega().congruence(&dw),
        rho_response: &ds * t.response() * &dw,
        samples: 0,
        days: 0,
    };
    Ok((sc.sigma.as_slice().to_vec(), sc.omega.as_slice().to_vec(), corr))
}

/// Root mean square of the daily scales over a set of days, labelled `label`.
/// Days that cannot be scaled are skipped.
pub fn pooled_scales(
    panel: &MarketPanel,
    days: &[usize],
    cfg: &EstimationConfig,
    label: &str,
) -> Result<DailyScales> {
    let n = panel.n();
    let mut s2 = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut used = 0usize;
    let mut samples = 0usize;
    for &k in days {
        match daily_scales(panel, k, cfg) {
            Ok(s) => {
                for i in 0..n {
                    s2[i] += s.sigma[i] * s.sigma[i];
                    w2[i] += s.omega[i] * s.omega[i];
                }
                used += 1;
                samples += s.samples;
            }
            Err(e) => warn!("skipping day in pooled scales: {e}"),
        }
    }
    if used == 0 {
        return Err(Error::InsufficientData("no usable days for pooled scales".into()));
    }
    let sigma: Vec<f64> = s2.iter().map(|v| (v / used as f64).sqrt()).collect();
    let omega: Vec<f64> = w2.iter().map(|v| (v / used as f64).sqrt()).collect();
    let degenerate = (0..n).filter(|&j| omega[j] == 0.0).collect();
    Ok(DailyScales {
        day: label.to_string(),
        sigma,
        omega,
        degenerate,
        samples,
    })
}

/// Uncentered sample moments `(dp^T dp, q^T q, dp^T q) / T` of one sample.
pub fn empirical_triple(inc: &Increments) -> Result<CovarianceTriple> {
    if inc.is_empty() {
        return Err(Error::InsufficientData("empty sample".into()));
    }
    let m = inc.len() as f64;
    let sigma = SymMatrix::symmetrize(inc.dp.transpose() * &inc.dp / m);
    let omega = SymMatrix::symmetrize(inc.q.transpose() * &inc.q / m);
    let response = inc.dp.transpose() * &inc.q / m;
    CovarianceTriple::new(sigma, omega, response)
}

/// Every increment of the listed days stacked in day order.
pub fn stack_increments(panel: &MarketPanel, days: &[usize]) -> Increments {
    let parts: Vec<Increments> = days.iter().map(|&k| panel.days[k].increments()).collect();
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let n = panel.n();
    let mut dp = DMatrix::zeros(total, n);
    let mut q = DMatrix::zeros(total, n);
    let mut r = 0;
    for p in &parts {
        dp.rows_mut(r, p.len()).copy_from(&p.dp);
        q.rows_mut(r, p.len()).copy_from(&p.q);
        r += p.len();
    }
    Increments { dp, q }
}

/// Spread asset and the two legs whose price difference defines it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpreadSpec {
    pub spread: String,
    pub leg_plus: String,
    pub leg_minus: String,
}

impl FromStr for SpreadSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [a, b, c] if !a.is_empty() && !b.is_empty() && !c.is_empty() => Ok(SpreadSpec {
                spread: a.to_string(),
                leg_plus: b.to_string(),
                leg_minus: c.to_string(),
            }),
            _ => Err(Error::Validation(format!(
                "spread spec {s:?} is not spread:legplus:legminus"
            ))),
        }
    }
}

impl fmt::Display for SpreadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.spread, self.leg_plus, self.leg_minus)
    }
}

/// Rewrites the spread's prices so that every bin's price change equals
/// `dp(leg_plus) - dp(leg_minus)`. Flows are untouched. A per-day constant
/// keeps the rebuilt prices positive.
pub fn impose_spread_constraint(panel: &MarketPanel, spec: &SpreadSpec) -> Result<MarketPanel> {
    let s = panel.asset_index(&spec.spread)?;
    let a = panel.asset_index(&spec.leg_plus)?;
    let b = panel.asset_index(&spec.leg_minus)?;
    let n = panel.n();
    let mut out = panel.clone();
    for d in &mut out.days {
        let bins = d.bins();
        if bins == 0 {
            continue;
        }
        let diff: Vec<f64> = (0..bins).map(|t| d.prices[(t, a)] - d.prices[(t, b)]).collect();
        let lowest = diff.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut offset = d.prices[(0, s)] - diff[0];
        if offset + lowest <= 0.0 {
            offset = 1.0 - lowest;
        }
        for t in 0..bins {
            d.prices[(t, s)] = offset + diff[t];
            let m = d.missing[t * n + a] || d.missing[t * n + b];
            d.missing[t * n + s] |= m;
        }
    }
    Ok(out)
}

/// Applies the spread identity at covariance level: with `A` the identity
/// whose spread row is replaced by `e_plus - e_minus`, returns
/// `(A Sigma A^T, Omega, A R)`. Pooled correlations mix days with different
/// scales, so the identity imposed on prices alone does not survive
/// assembly exactly.
pub fn constrain_triple(
    t: &CovarianceTriple,
    spread: usize,
    plus: usize,
    minus: usize,
) -> Result<CovarianceTriple> {
    let n = t.n();
    if spread >= n || plus >= n || minus >= n || spread == plus || spread == minus || plus == minus {
        return Err(Error::Validation(format!(
            "spread {spread}, legs {plus} and {minus} must be distinct assets below {n}"
        )));
    }
    let mut a = DMatrix::identity(n, n);
    a[(spread, spread)] = 0.0;
    a[(spread, plus)] = 1.0;
    a[(spread, minus)] = -1.0;
    CovarianceTriple::new(t.sigma().congruence(&a), t.omega().clone(), &a * t.response())
}

/// [`constrain_triple`] on an assembled triple, addressed by panel asset
/// names. Returns the triple unchanged when one of the three assets was
/// dropped.
pub fn constrain_assembled(
    at: AssembledTriple,
    panel: &MarketPanel,
    spec: &SpreadSpec,
) -> Result<AssembledTriple> {
    let local = |name: &str| -> Result<Option<usize>> {
        let i = panel.asset_index(name)?;
        Ok(at.assets.iter().position(|&k| k == i))
    };
    match (local(&spec.spread)?, local(&spec.leg_plus)?, local(&spec.leg_minus)?) {
        (Some(s), Some(a), Some(b)) => Ok(AssembledTriple {
            triple: constrain_triple(&at.triple, s, a, b)?,
            ..at
        }),
        _ => {
            warn!("spread {spec} not applied: an asset was dropped");
            Ok(at)
        }
    }
}

/// How days are grouped into periods before splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSpec {
    /// Use the period labels carried by the day ids.
    Periods,
    /// First and second half of the days, labelled `H1` and `H2`.
    Halves,
}

impl FromStr for SplitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periods" => Ok(SplitSpec::Periods),
            "halves" => Ok(SplitSpec::Halves),
            _ => Err(Error::Validation(format!(
                "unknown split {s:?} (expected periods or halves)"
            ))),
        }
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitSpec::Periods => "periods",
            SplitSpec::Halves => "halves",
        })
    }
}

/// Relabels the panel's periods according to `spec`.
pub fn apply_split(panel: &MarketPanel, spec: SplitSpec) -> MarketPanel {
    let mut out = panel.clone();
    if spec == SplitSpec::Halves {
        let half = out.days.len().div_ceil(2);
        for (k, d) in out.days.iter_mut().enumerate() {
            d.period = if k < half { "H1" } else { "H2" }.to_string();
        }
    }
    out
}

/// Calibrate on `calibration`, evaluate on `evaluation`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectedPair {
    pub calibration: String,
    pub evaluation: String,
}

impl DirectedPair {
    pub fn in_sample(&self) -> bool {
        self.calibration == self.evaluation
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub pairs: Vec<DirectedPair>,
    /// Only one period: no out-of-sample pair exists.
    pub in_sample_only: bool,
}

/// All directed period pairs: in-sample pairs first, then out-of-sample
/// pairs in period order.
pub fn year_split(panel: &MarketPanel) -> Result<SplitPlan> {
    let periods = panel.periods();
    if periods.is_empty() {
        return Err(Error::InsufficientData("panel has no days".into()));
    }
    let mut pairs: Vec<DirectedPair> = periods
        .iter()
        .map(|p| DirectedPair {
            calibration: p.clone(),
            evaluation: p.clone(),
        })
        .collect();
    for x in &periods {
        for y in &periods {
            if x != y {
                pairs.push(DirectedPair {
                    calibration: x.clone(),
                    evaluation: y.clone(),
                });
            }
        }
    }
    if periods.len() == 1 {
        warn!("single period {}: only in-sample scores are available", periods[0]);
    }
    Ok(SplitPlan {
        pairs,
        in_sample_only: periods.len() == 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{gaussian_matrix, rng};

    fn day(id: &str, prices: DMatrix<f64>, flows: DMatrix<f64>) -> SessionDay {
        let m = vec![false; prices.len()];
        SessionDay::new(id, period_of(id), prices, flows, m).unwrap()
    }

    fn tick(asset: &str, time: f64, mid: f64, v: f64) -> Tick {
        Tick {
            day: "A-0001".into(),
            asset: asset.into(),
            time,
            mid,
            signed_volume: v,
        }
    }

    #[test]
    fn binning_signed_sums_and_fill() {
        let assets = vec!["x".to_string()];
        let w = SessionWindow { start: 0.0, end: 180.0 };
        let ticks = vec![
            tick("x", 1.0, 10.0, 5.0),
            tick("x", 30.0, 10.5, -2.0),
            tick("x", 130.0, 11.0, 1.0),
        ];
        let p = bin_events(&ticks, &assets, 60.0, w).unwrap();
        let d = &p.days[0];
        assert_eq!(d.bins(), 3);
        assert_eq!(d.flows[(0, 0)], 3.0);
        assert_eq!(d.flows[(1, 0)], 0.0);
        assert_eq!(d.prices[(1, 0)], 10.5);
        assert_eq!(d.prices[(2, 0)], 10.5);
        assert!(!d.missing.iter().any(|&m| m));
    }

    #[test]
    fn binning_counts_and_errors() {
        let assets = vec!["x".to_string()];
        let w = SessionWindow { start: 0.0, end: 6.0 * 3600.0 };
        let p = bin_events(&[tick("x", 5.0, 1.0, 1.0)], &assets, 60.0, w).unwrap();
        assert_eq!(p.days[0].bins(), 360);
        let bad = [tick("x", 5.0, 1.0, 1.0), tick("x", 4.0, 1.0, 1.0)];
        assert!(matches!(bin_events(&bad, &assets, 60.0, w), Err(Error::Ordering(_))));
        let out = [tick("x", 1e6, 1.0, 1.0)];
        assert!(matches!(bin_events(&out, &assets, 60.0, w), Err(Error::EmptySession(_))));
    }

    #[test]
    fn leading_bins_are_marked_missing() {
        let assets = vec!["x".to_string()];
        let w = SessionWindow { start: 0.0, end: 180.0 };
        let p = bin_events(&[tick("x", 70.0, 3.0, 1.0)], &assets, 60.0, w).unwrap();
        let d = &p.days[0];
        assert!(d.is_missing(0, 0) && !d.is_missing(1, 0));
        assert_eq!(d.prices[(0, 0)], 3.0);
        assert_eq!(d.increments().len(), 1);
    }

    #[test]
    fn scale_examples() {
        let b = 41;
        let prices = DMatrix::from_fn(b, 2, |t, i| if i == 0 { 5.0 } else { 5.0 + (t % 2) as f64 });
        let flows = DMatrix::from_fn(b, 2, |t, _| t as f64 + 1.0);
        let p = MarketPanel::new(vec!["a".into(), "b".into()], 60.0, vec![day("A-0001", prices, flows)])
            .unwrap();
        let s = daily_scales(&p, 0, &EstimationConfig::default()).unwrap();
        assert_eq!(s.sigma[0], 0.0);
        assert_eq!(s.sigma[1], 1.0);
    }

    #[test]
    fn flow_scale_monte_carlo() {
        let mut r = rng(4);
        let b = 10_001;
        let z = gaussian_matrix(&mut r, b, 1);
        let prices = DMatrix::from_fn(b, 1, |t, _| 100.0 + (t % 2) as f64);
        let p = MarketPanel::new(vec!["a".into()], 60.0, vec![day("A-0001", prices, z * 2.0)]).unwrap();
        let s = daily_scales(&p, 0, &EstimationConfig::default()).unwrap();
        assert!((s.omega[0] - 2.0).abs() < 0.05, "{}", s.omega[0]);
        assert!(s.degenerate.is_empty());
    }

    #[test]
    fn too_few_bins() {
        let prices = DMatrix::from_element(10, 1, 1.0);
        let p = MarketPanel::new(
            vec!["a".into()],
            60.0,
            vec![day("A-0001", prices, DMatrix::from_element(10, 1, 1.0))],
        )
        .unwrap();
        assert!(matches!(
            daily_scales(&p, 0, &EstimationConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    fn corr(n: usize) -> StationaryCorrelations {
        StationaryCorrelations {
            rho: SymMatrix::identity(n),
            rho_omega: SymMatrix::identity(n),
            rho_response: DMatrix::identity(n, n) * 0.5,
            samples: 0,
            days: 0,
        }
    }

    fn scales(s: &[f64], w: &[f64]) -> DailyScales {
        DailyScales {
            day: "d".into(),
            sigma: s.to_vec(),
            omega: w.to_vec(),
            degenerate: vec![],
            samples: 100,
        }
    }

    #[test]
    fn assemble_examples() {
        let cfg = EstimationConfig::default();
        let a = assemble_triple(&scales(&[2.0, 3.0], &[1.0, 1.0]), &corr(2), &cfg).unwrap();
        assert_eq!(a.triple.sigma().matrix(), &DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0])));
        let ones = assemble_triple(&scales(&[1.0, 1.0], &[1.0, 1.0]), &corr(2), &cfg).unwrap();
        assert_eq!(ones.triple.omega().matrix(), &DMatrix::identity(2, 2));
        let dropped = assemble_triple(&scales(&[1.0, 1.0], &[1.0, 0.0]), &corr(2), &cfg).unwrap();
        assert_eq!(dropped.triple.n(), 1);
        assert_eq!(dropped.dropped, vec![1]);
        let strict = EstimationConfig {
            drop_illiquid: false,
            ..cfg
        };
        assert!(matches!(
            assemble_triple(&scales(&[1.0, 1.0], &[1.0, 0.0]), &corr(2), &strict),
            Err(Error::DegenerateLiquidity { asset: 1 })
        ));
    }

    #[test]
    fn spread_examples() {
        let prices = DMatrix::from_row_slice(2, 3, &[50.0, 10.0, 9.0, 50.0, 12.0, 10.0]);
        let p = MarketPanel::new(
            vec!["s".into(), "a".into(), "b".into()],
            60.0,
            vec![day("A-0001", prices, DMatrix::zeros(2, 3))],
        )
        .unwrap();
        let spec: SpreadSpec = "s:a:b".parse().unwrap();
        let out = impose_spread_constraint(&p, &spec).unwrap();
        let inc = out.days[0].increments();
        assert_eq!(inc.dp[(0, 0)], 1.0);
        let missing = SpreadSpec {
            spread: "zz".into(),
            ..spec
        };
        assert!(matches!(impose_spread_constraint(&p, &missing), Err(Error::UnknownAsset(_))));
    }

    #[test]
    fn split_counts() {
        let mk = |ids: &[&str]| {
            let days = ids
                .iter()
                .map(|id| day(id, DMatrix::from_element(2, 1, 1.0), DMatrix::zeros(2, 1)))
                .collect();
            MarketPanel::new(vec!["a".into()], 60.0, days).unwrap()
        };
        let two = year_split(&mk(&["2016-0001", "2017-0001"])).unwrap();
        assert_eq!(two.pairs.iter().filter(|p| p.in_sample()).count(), 2);
        assert_eq!(two.pairs.len(), 4);
        let three = year_split(&mk(&["a-1", "b-1", "c-1"])).unwrap();
        assert_eq!(three.pairs.iter().filter(|p| !p.in_sample()).count(), 6);
        let one = year_split(&mk(&["a-1", "a-2"])).unwrap();
        assert!(one.in_sample_only && one.pairs.len() == 1);
    }

    #[test]
    fn coarsen_sums_flows() {
        let prices = DMatrix::from_fn(5, 1, |t, _| 1.0 + t as f64);
        let flows = DMatrix::from_fn(5, 1, |t, _| t as f64);
        let p = MarketPanel::new(vec!["a".into()], 60.0, vec![day("A-1", prices, flows)]).unwrap();
        let c = p.coarsen(2).unwrap();
        assert_eq!(c.delta_t, 120.0);
        assert_eq!(c.days[0].bins(), 2);
        assert_eq!(c.days[0].flows[(1, 0)], 5.0);
        assert_eq!(c.days[0].prices[(1, 0)], 3.0);
    }
}
