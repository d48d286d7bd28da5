//! Command-line front end: `simulate`, `axioms`, `estimate`, `score` and
//! `cost`.
//!
//! Every command resolves its settings from an optional `--config` JSON file
//! overlaid with command-line flags, writes the resolved settings to
//! `resolved_config.json` in the output directory together with their
//! SHA-256, and can be rerun from that file alone.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::axioms::{axiom_matrix, AxiomId, AxiomReport, TrialConfig, Verdict};
use crate::error::{Error, Result};
use crate::estimation::{
    apply_split, assemble_triple, constrain_assembled, daily_scales, impose_spread_constraint,
    period_of, stationary_correlations, EstimationConfig, MarketPanel, SessionDay, SplitSpec,
    SpreadSpec, DEFAULT_DELTA_T,
};
use crate::gof::{
    format_score, liquidity_curve, score_models, sweep, LiquidityCurve, ScoreConfig, ScoreReport,
    SweepAxis, SweepReport, WeightSpec,
};
use crate::matops::SymMatrix;
use crate::models::{evaluate, expected_cost, CovarianceTriple, ModelId};
use crate::serde_rows;
use crate::simulate::{make_correlated_universe, make_crude_scenario, simulate_panel, SimSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ximpact", version, about = "Cross-impact models, axiom checks and scoring")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON file with settings; flags override it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated model names, e.g. kyle,ml,el*
    #[arg(long, global = true)]
    pub models: Option<String>,
    /// Comma-separated weights: idio, idio-literal, global, modes, asset:<i>
    #[arg(long, global = true)]
    pub weights: Option<String>,
    /// Re-bin the panel to this many seconds
    #[arg(long = "delta-t", global = true)]
    pub delta_t: Option<f64>,
    /// spread:legplus:legminus
    #[arg(long, global = true)]
    pub spread: Option<String>,
    /// periods or halves
    #[arg(long, global = true)]
    pub split: Option<String>,
    /// Write only the JSON document or only the CSV table
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Doc,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a panel from a spec file or a built-in scenario
    Simulate {
        /// SimSpec JSON, or {"scenario": "crude" | "correlated" | "diagonal", ...}
        spec: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Check every model against every axiom and diff with the reference grid
    Axioms {
        /// Comma-separated universe sizes
        #[arg(long)]
        n: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long = "kernel-dim")]
        kernel_dim: Option<usize>,
        /// Comma-separated axiom names (default: all)
        #[arg(long)]
        axioms: Option<String>,
        /// Write the report here instead of <out>/axioms.json
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Estimate per-day triples from a panel CSV
    Estimate {
        panel: Option<PathBuf>,
    },
    /// Score models on a panel CSV
    Score {
        panel: Option<PathBuf>,
        /// Predict with calibration-period scales
        #[arg(long = "strict-scales")]
        strict_scales: bool,
        /// Number of liquidity bins for the per-asset curve
        #[arg(long = "liquidity-bins")]
        liquidity_bins: Option<usize>,
        /// assets:<n1,n2,..> or delta-t:<s1,s2,..>
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Expected cost of trading a portfolio under one model
    Cost {
        triple: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        portfolio: Option<PathBuf>,
    },
}

fn default_out() -> PathBuf {
    PathBuf::from("ximpact-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub spec: SimSpec,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub format: Option<Format>,
}

fn default_ns() -> Vec<usize> {
    vec![4]
}

fn default_trials() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-8
}

fn default_kernel_dim() -> usize {
    1
}

fn default_models() -> Vec<String> {
    ModelId::catalogue().iter().map(ToString::to_string).collect()
}

fn default_axioms() -> Vec<String> {
    AxiomId::ALL.iter().map(ToString::to_string).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomsConfig {
    #[serde(default = "default_models")]
    pub models: Vec<String>,
    #[serde(default = "default_axioms")]
    pub axioms: Vec<String>,
    #[serde(default = "default_ns")]
    pub n: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_kernel_dim")]
    pub kernel_dim: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<Format>,
}

fn default_split() -> SplitSpec {
    SplitSpec::Periods
}

fn default_panel_delta_t() -> f64 {
    DEFAULT_DELTA_T
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub panel: PathBuf,
    /// Bin length of the panel file in seconds.
    #[serde(default = "default_panel_delta_t")]
    pub panel_delta_t: f64,
    #[serde(default)]
    pub delta_t: Option<f64>,
    #[serde(default = "default_split")]
    pub split: SplitSpec,
    #[serde(default)]
    pub spread: Option<SpreadSpec>,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_weights() -> Vec<String> {
    WeightSpec::STANDARD.iter().map(ToString::to_string).collect()
}

fn default_liquidity_bins() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRunConfig {
    pub panel: PathBuf,
    #[serde(default = "default_panel_delta_t")]
    pub panel_delta_t: f64,
    #[serde(default)]
    pub delta_t: Option<f64>,
    #[serde(default = "default_models")]
    pub models: Vec<String>,
    #[serde(default = "default_weights")]
    pub weights: Vec<String>,
    #[serde(default = "default_split")]
    pub split: SplitSpec,
    #[serde(default)]
    pub spread: Option<SpreadSpec>,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub strict_scales: bool,
    #[serde(default = "default_liquidity_bins")]
    pub liquidity_bins: usize,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub format: Option<Format>,
}

fn default_cost_model() -> String {
    "kyle".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub triple: PathBuf,
    #[serde(default = "default_cost_model")]
    pub model: String,
    pub portfolio: PathBuf,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

/// SHA-256 of the compact JSON serialization with sorted keys, hex encoded.
/// Output locations are left out so a run is identified by what it computes.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let mut v = serde_json::to_value(cfg)?;
    if let Value::Object(m) = &mut v {
        m.remove("out");
        m.remove("report");
    }
    let bytes = serde_json::to_vec(&v)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv buffer: {e}")))?;
    write_atomic(path, &bytes)
}

/// The resolved settings with their hash, as written next to the outputs.
#[derive(Debug, Serialize)]
struct Echo<'a, T: Serialize> {
    command: &'a str,
    hash: &'a str,
    #[serde(flatten)]
    config: &'a T,
}

fn echo<T: Serialize>(command: &str, cfg: &T, out: &Path) -> Result<String> {
    let hash = config_hash(cfg)?;
    write_json(
        &out.join("resolved_config.json"),
        &Echo {
            command,
            hash: &hash,
            config: cfg,
        },
    )?;
    println!("config {hash}");
    Ok(hash)
}

fn load_config_object(path: Option<&Path>, command: &str) -> Result<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)?;
    let Value::Object(mut map) = value else {
        return Err(Error::Validation(format!("{} is not a JSON object", path.display())));
    };
    if let Some(c) = map.remove("command") {
        if c.as_str() != Some(command) {
            return Err(Error::Validation(format!(
                "config {} is for command {c}, not {command}",
                path.display()
            )));
        }
    }
    map.remove("hash");
    Ok(map)
}

fn resolve<T: DeserializeOwned>(map: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Validation(format!("config: {e}")))
}

fn set<T: Serialize>(map: &mut Map<String, Value>, key: &str, v: Option<T>) -> Result<()> {
    if let Some(v) = v {
        map.insert(key.to_string(), serde_json::to_value(v)?);
    }
    Ok(())
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_models(names: &[String]) -> Result<Vec<ModelId>> {
    if names.is_empty() {
        return Err(Error::Validation("no models given".into()));
    }
    names.iter().map(|s| s.parse()).collect()
}

fn parse_weights(names: &[String]) -> Result<Vec<WeightSpec>> {
    if names.is_empty() {
        return Err(Error::Validation("no weights given".into()));
    }
    names.iter().map(|s| s.parse()).collect()
}

fn parse_spread(s: Option<&String>) -> Result<Option<SpreadSpec>> {
    s.map(|s| s.parse()).transpose()
}

fn parse_split(s: Option<&String>) -> Result<Option<SplitSpec>> {
    s.map(|s| s.parse()).transpose()
}

/// Reads a panel CSV with header `day,bin_index,asset,price,flow`. Assets and
/// days keep their order of first appearance. Absent (day, bin, asset) rows
/// are missing bins; a day on which an asset has no rows at all is dropped.
pub fn read_panel(path: &Path, delta_t: f64) -> Result<MarketPanel> {
    let text = fs::read_to_string(path)?;
    parse_panel(&text, delta_t)
}

pub fn parse_panel(text: &str, delta_t: f64) -> Result<MarketPanel> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != ["day", "bin_index", "asset", "price", "flow"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("header must be day,bin_index,asset,price,flow, got {}", header.join(",")),
        });
    }
    let mut assets: Vec<String> = Vec::new();
    let mut asset_ix: HashMap<String, usize> = HashMap::new();
    let mut days: Vec<String> = Vec::new();
    let mut day_ix: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<HashMap<(usize, usize), (f64, f64)>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != 5 {
            return Err(Error::Parse {
                line,
                message: format!("expected 5 fields, got {}", rec.len()),
            });
        }
        let bad = |what: &str, v: &str| Error::Parse {
            line,
            message: format!("invalid {what} {v:?}"),
        };
        let day = rec[0].trim();
        let asset = rec[2].trim();
        if day.is_empty() {
            return Err(bad("day", day));
        }
        if asset.is_empty() {
            return Err(bad("asset", asset));
        }
        let bin: usize = rec[1].trim().parse().map_err(|_| bad("bin_index", &rec[1]))?;
        let price: f64 = rec[3].trim().parse().map_err(|_| bad("price", &rec[3]))?;
        let flow: f64 = rec[4].trim().parse().map_err(|_| bad("flow", &rec[4]))?;
        if !(price.is_finite() && price > 0.0) {
            return Err(bad("price", &rec[3]));
        }
        if !flow.is_finite() {
            return Err(bad("flow", &rec[4]));
        }
        let a = *asset_ix.entry(asset.to_string()).or_insert_with(|| {
            assets.push(asset.to_string());
            assets.len() - 1
        });
        let d = *day_ix.entry(day.to_string()).or_insert_with(|| {
            days.push(day.to_string());
            cells.push(HashMap::new());
            days.len() - 1
        });
        if cells[d].insert((bin, a), (price, flow)).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate row for day {day}, bin {bin}, asset {asset}"),
            });
        }
    }
    let n = assets.len();
    let mut out = Vec::with_capacity(days.len());
    for (d, id) in days.iter().enumerate() {
        let c = &cells[d];
        let bins = c.keys().map(|&(b, _)| b + 1).max().unwrap_or(0);
        let absent: Vec<&String> = (0..n)
            .filter(|&a| !(0..bins).any(|b| c.contains_key(&(b, a))))
            .map(|a| &assets[a])
            .collect();
        if !absent.is_empty() {
            warn!("dropping day {id}: no data for {:?}", absent);
            continue;
        }
        let mut prices = DMatrix::zeros(bins, n);
        let mut flows = DMatrix::zeros(bins, n);
        let mut missing = vec![false; bins * n];
        for a in 0..n {
            let first = (0..bins).find_map(|b| c.get(&(b, a))).map(|v| v.0).unwrap_or(1.0);
            let mut last = first;
            for b in 0..bins {
                match c.get(&(b, a)) {
                    Some(&(p, q)) => {
                        prices[(b, a)] = p;
                        flows[(b, a)] = q;
                        last = p;
                    }
                    None => {
                        prices[(b, a)] = last;
                        missing[b * n + a] = true;
                    }
                }
            }
        }
        out.push(SessionDay::new(id.clone(), period_of(id), prices, flows, missing)?);
    }
    if out.is_empty() {
        return Err(Error::InsufficientData("panel has no complete days".into()));
    }
    MarketPanel::new(assets, delta_t, out)
}

/// Inverse of [`parse_panel`]; missing bins are not written.
pub fn panel_to_csv(panel: &MarketPanel) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["day", "bin_index", "asset", "price", "flow"])?;
    for d in &panel.days {
        for b in 0..d.bins() {
            for (a, name) in panel.assets.iter().enumerate() {
                if d.is_missing(b, a) {
                    continue;
                }
                w.write_record([
                    d.id.as_str(),
                    &b.to_string(),
                    name,
                    &d.prices[(b, a)].to_string(),
                    &d.flows[(b, a)].to_string(),
                ])?;
            }
        }
    }
    w.into_inner()
        .map_err(|e| Error::Validation(format!("csv buffer: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleProvenance {
    pub source_period: String,
    pub day: String,
    pub config_hash: String,
}

/// On-disk triple: row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleFile {
    pub n: usize,
    pub assets: Vec<String>,
    pub sigma: Vec<f64>,
    pub omega: Vec<f64>,
    pub response: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<TripleProvenance>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect()
}

impl TripleFile {
    pub fn from_triple(t: &CovarianceTriple, assets: Vec<String>, provenance: Option<TripleProvenance>) -> Self {
        TripleFile {
            n: t.n(),
            assets,
            sigma: row_major(t.sigma().matrix()),
            omega: row_major(t.omega().matrix()),
            response: row_major(t.response()),
            provenance,
        }
    }

    pub fn to_triple(&self) -> Result<CovarianceTriple> {
        let n = self.n;
        for (name, v) in [("sigma", &self.sigma), ("omega", &self.omega), ("response", &self.response)] {
            if v.len() != n * n {
                return Err(Error::Shape(format!("{name} has {} entries, expected {}", v.len(), n * n)));
            }
        }
        if !self.assets.is_empty() && self.assets.len() != n {
            return Err(Error::Shape(format!("{} asset names for n = {n}", self.assets.len())));
        }
        CovarianceTriple::new(
            SymMatrix::from_row_slice(n, &self.sigma)?,
            SymMatrix::from_row_slice(n, &self.omega)?,
            DMatrix::from_row_slice(n, n, &self.response),
        )
    }
}

/// JSON array of numbers, or numbers separated by commas and whitespace.
pub fn parse_portfolio(text: &str) -> Result<DVector<f64>> {
    let trimmed = text.trim();
    let values: Vec<f64> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed)?
    } else {
        trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .enumerate()
            .map(|(k, s)| {
                s.parse().map_err(|_| Error::Parse {
                    line: 1,
                    message: format!("portfolio entry {k} is not a number: {s:?}"),
                })
            })
            .collect::<Result<_>>()?
    };
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("portfolio has non-finite entries".into()));
    }
    Ok(DVector::from_vec(values))
}

fn wants(format: Option<Format>, f: Format) -> bool {
    format.is_none() || format == Some(f)
}

/// Built-in simulation scenarios, optionally overridden.
#[derive(Debug, Deserialize)]
struct ScenarioStub {
    scenario: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    days: Option<usize>,
    #[serde(default)]
    bins_per_day: Option<usize>,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    min_corr: Option<f64>,
    #[serde(default)]
    noise_ratio: Option<f64>,
}

fn scenario_spec(stub: &ScenarioStub) -> Result<SimSpec> {
    let seed = stub.seed.unwrap_or(0);
    let mut spec = match stub.scenario.as_str() {
        "crude" => make_crude_scenario(seed),
        "correlated" => make_correlated_universe(
            stub.n.unwrap_or(10),
            stub.min_corr.unwrap_or(0.3),
            stub.noise_ratio.unwrap_or(1.0),
            seed,
        )?,
        "diagonal" => {
            let lam = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
            SimSpec {
                n: 2,
                noise_cov: &lam * lam.transpose(),
                lambda_true: lam,
                omega_true: DMatrix::identity(2, 2),
                days: 200,
                bins_per_day: 500,
                day_scale_profiles: None,
                seed,
                periods: vec!["A".into(), "B".into()],
                assets: None,
                spread: None,
                delta_t: DEFAULT_DELTA_T,
            }
        }
        other => {
            return Err(Error::Validation(format!(
                "unknown scenario {other:?} (crude, correlated, diagonal)"
            )))
        }
    };
    if let Some(d) = stub.days {
        spec.days = d;
    }
    if let Some(b) = stub.bins_per_day {
        spec.bins_per_day = b;
    }
    Ok(spec)
}

fn resolve_simulate(common: &CommonArgs, spec_path: Option<&Path>, scenario: Option<&String>, days: Option<usize>, bins: Option<usize>) -> Result<SimulateConfig> {
    let mut map = load_config_object(common.config.as_deref(), "simulate")?;
    let spec_value = if let Some(p) = spec_path {
        Some(serde_json::from_str::<Value>(&fs::read_to_string(p)?)?)
    } else if let Some(s) = scenario {
        Some(serde_json::json!({ "scenario": s }))
    } else {
        map.remove("spec")
    };
    let Some(mut spec_value) = spec_value else {
        return Err(Error::Validation("simulate needs a spec file, --scenario or a config with a spec".into()));
    };
    if let Value::Object(o) = &mut spec_value {
        if let Some(d) = days {
            o.insert("days".into(), d.into());
            o.remove("day_scale_profiles");
        }
        if let Some(b) = bins {
            o.insert("bins_per_day".into(), b.into());
        }
        if let Some(s) = common.seed {
            o.insert("seed".into(), s.into());
        }
    }
    let mut spec: SimSpec = if spec_value.get("scenario").is_some() {
        let stub: ScenarioStub =
            serde_json::from_value(spec_value).map_err(|e| Error::Validation(format!("spec: {e}")))?;
        scenario_spec(&stub)?
    } else {
        serde_json::from_value(spec_value).map_err(|e| Error::Validation(format!("spec: {e}")))?
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if let Some(dt) = common.delta_t {
        spec.delta_t = dt;
    }
    if let Some(s) = parse_spread(common.spread.as_ref())? {
        spec.spread = Some(s);
    }
    map.insert("spec".into(), serde_json::to_value(&spec)?);
    set(&mut map, "out", common.out.as_ref())?;
    set(&mut map, "format", common.format)?;
    let cfg: SimulateConfig = resolve(map)?;
    cfg.spec.validate()?;
    Ok(cfg)
}

fn run_simulate(cfg: &SimulateConfig) -> Result<i32> {
    let (panel, gt) = simulate_panel(&cfg.spec)?;
    fs::create_dir_all(&cfg.out)?;
    let hash = echo("simulate", cfg, &cfg.out)?;
    write_atomic(&cfg.out.join("panel.csv"), &panel_to_csv(&panel)?)?;
    #[derive(Serialize)]
    struct Sidecar<'a> {
        config_hash: &'a str,
        assets: &'a [String],
        #[serde(flatten)]
        truth: &'a crate::simulate::GroundTruth,
    }
    write_json(
        &cfg.out.join("ground_truth.json"),
        &Sidecar {
            config_hash: &hash,
            assets: &panel.assets,
            truth: &gt,
        },
    )?;
    if wants(cfg.format, Format::Csv) {
        let rows: Vec<Vec<String>> = (0..cfg.spec.n)
            .flat_map(|i| {
                let gt = &gt;
                let names = &panel.assets;
                (0..cfg.spec.n).map(move |j| {
                    vec![
                        names[i].clone(),
                        names[j].clone(),
                        gt.lambda_true[(i, j)].to_string(),
                        gt.sigma_total[(i, j)].to_string(),
                        gt.omega_true[(i, j)].to_string(),
                    ]
                })
            })
            .collect();
        write_csv(
            &cfg.out.join("ground_truth.csv"),
            &["row", "col", "lambda_true", "sigma_total", "omega_true"],
            &rows,
        )?;
    }
    println!(
        "simulated {} days x {} bins for {} assets into {}",
        cfg.spec.days,
        cfg.spec.bins_per_day,
        cfg.spec.n,
        cfg.out.display()
    );
    Ok(EXIT_OK)
}

fn resolve_axioms(
    common: &CommonArgs,
    n: Option<&String>,
    trials: Option<usize>,
    kernel_dim: Option<usize>,
    axioms: Option<&String>,
    report: Option<&PathBuf>,
) -> Result<AxiomsConfig> {
    let mut map = load_config_object(common.config.as_deref(), "axioms")?;
    if let Some(n) = n {
        let ns = split_list(n)
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| Error::Validation(format!("bad n {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        set(&mut map, "n", Some(ns))?;
    }
    set(&mut map, "trials", trials)?;
    set(&mut map, "kernel_dim", kernel_dim)?;
    set(&mut map, "axioms", axioms.map(|s| split_list(s)))?;
    set(&mut map, "report", report)?;
    set(&mut map, "models", common.models.as_ref().map(|s| split_list(s)))?;
    set(&mut map, "tol", common.tol)?;
    set(&mut map, "seed", common.seed)?;
    set(&mut map, "out", common.out.as_ref())?;
    set(&mut map, "format", common.format)?;
    let cfg: AxiomsConfig = resolve(map)?;
    parse_models(&cfg.models)?;
    for a in &cfg.axioms {
        a.parse::<AxiomId>()?;
    }
    if cfg.n.is_empty() {
        return Err(Error::Validation("no universe sizes given".into()));
    }
    Ok(cfg)
}

fn axiom_rows(reports: &[AxiomReport]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in reports {
        for c in &r.cells {
            let exp = crate::axioms::expected(c.model, c.axiom);
            rows.push(vec![
                r.config.n.to_string(),
                c.model.to_string(),
                c.axiom.to_string(),
                format!("{:?}", c.verdict).to_lowercase(),
                exp.map_or(String::new(), |e| e.to_string()),
                c.worst_residual.to_string(),
                c.slope.map_or(String::new(), |s| s.to_string()),
            ]);
        }
    }
    rows
}

fn run_axioms(cfg: &AxiomsConfig) -> Result<i32> {
    let models = parse_models(&cfg.models)?;
    let axioms = cfg
        .axioms
        .iter()
        .map(|a| a.parse())
        .collect::<Result<Vec<AxiomId>>>()?;
    let mut reports = Vec::new();
    for &n in &cfg.n {
        let tc = TrialConfig {
            n,
            trials: cfg.trials,
            tol: cfg.tol,
            seed: cfg.seed,
            kernel_dim: cfg.kernel_dim,
            ..TrialConfig::default()
        };
        reports.push(axiom_matrix(&models, &axioms, &tc)?);
    }
    fs::create_dir_all(&cfg.out)?;
    let hash = echo("axioms", cfg, &cfg.out)?;
    #[derive(Serialize)]
    struct Doc<'a> {
        config_hash: &'a str,
        matches_reference: bool,
        reports: &'a [AxiomReport],
    }
    let ok = reports.iter().all(AxiomReport::matches_reference);
    if wants(cfg.format, Format::Doc) {
        let path = cfg.report.clone().unwrap_or_else(|| cfg.out.join("axioms.json"));
        write_json(
            &path,
            &Doc {
                config_hash: &hash,
                matches_reference: ok,
                reports: &reports,
            },
        )?;
    }
    if wants(cfg.format, Format::Csv) {
        write_csv(
            &cfg.out.join("axioms.csv"),
            &["n", "model", "axiom", "verdict", "expected", "worst_residual", "slope"],
            &axiom_rows(&reports),
        )?;
    }
    for r in &reports {
        let mism = r.mismatches();
        let inc = r.inconclusive();
        println!(
            "n={}: {} cells, {} mismatches, {} inconclusive, {} documented exceptions",
            r.config.n,
            r.cells.len(),
            mism.len(),
            inc.len(),
            r.discrepancies.len() - mism.len()
        );
        for d in &mism {
            println!(
                "  mismatch {} {}: expected {}, observed {:?} (worst residual {:.3e})",
                d.model,
                d.axiom,
                if d.expected { "satisfied" } else { "violated" },
                d.observed,
                d.worst_residual
            );
        }
        for c in inc.iter().filter(|c| c.verdict == Verdict::Inconclusive) {
            println!(
                "  inconclusive {} {}: {}",
                c.model,
                c.axiom,
                c.notes.first().map_or("", String::as_str)
            );
        }
    }
    Ok(if ok { EXIT_OK } else { EXIT_MISMATCH })
}

fn prepare_panel(
    path: &Path,
    panel_delta_t: f64,
    delta_t: Option<f64>,
    spread: Option<&SpreadSpec>,
    split: SplitSpec,
) -> Result<MarketPanel> {
    let mut panel = read_panel(path, panel_delta_t)?;
    if let Some(s) = spread {
        panel = impose_spread_constraint(&panel, s)?;
    }
    if let Some(dt) = delta_t {
        let ratio = dt / panel.delta_t;
        let factor = ratio.round() as usize;
        if factor == 0 || (ratio - factor as f64).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "--delta-t {dt} is not a multiple of the panel bin length {}",
                panel.delta_t
            )));
        }
        panel = panel.coarsen(factor)?;
    }
    Ok(apply_split(&panel, split))
}

fn resolve_estimate(common: &CommonArgs, panel: Option<&PathBuf>) -> Result<EstimateConfig> {
    let mut map = load_config_object(common.config.as_deref(), "estimate")?;
    set(&mut map, "panel", panel)?;
    set(&mut map, "delta_t", common.delta_t)?;
    set(&mut map, "split", parse_split(common.split.as_ref())?)?;
    set(&mut map, "spread", parse_spread(common.spread.as_ref())?)?;
    set(&mut map, "out", common.out.as_ref())?;
    if !map.contains_key("panel") {
        return Err(Error::Validation("estimate needs a panel file".into()));
    }
    resolve(map)
}

fn run_estimate(cfg: &EstimateConfig) -> Result<i32> {
    let panel = prepare_panel(&cfg.panel, cfg.panel_delta_t, cfg.delta_t, cfg.spread.as_ref(), cfg.split)?;
    fs::create_dir_all(&cfg.out)?;
    let hash = echo("estimate", cfg, &cfg.out)?;
    let mut rows = Vec::new();
    for period in panel.periods() {
        let days = panel.day_indices(&period);
        let corr = match stationary_correlations(&panel, &days, &cfg.estimation) {
            Ok(c) => c,
            Err(e) => {
                warn!("period {period}: {e}");
                continue;
            }
        };
        #[derive(Serialize)]
        struct CorrDoc<'a> {
            period: &'a str,
            assets: &'a [String],
            samples: usize,
            days: usize,
            #[serde(with = "serde_rows")]
            rho: DMatrix<f64>,
            #[serde(with = "serde_rows")]
            rho_omega: DMatrix<f64>,
            #[serde(with = "serde_rows")]
            rho_response: DMatrix<f64>,
            config_hash: &'a str,
        }
        write_json(
            &cfg.out.join(format!("correlations_{period}.json")),
            &CorrDoc {
                period: &period,
                assets: &panel.assets,
                samples: corr.samples,
                days: corr.days,
                rho: corr.rho.matrix().clone(),
                rho_omega: corr.rho_omega.matrix().clone(),
                rho_response: corr.rho_response.clone(),
                config_hash: &hash,
            },
        )?;
        for &k in &days {
            let day = &panel.days[k];
            let scales = match daily_scales(&panel, k, &cfg.estimation) {
                Ok(s) => s,
                Err(e) => {
                    warn!("day {}: {e}", day.id);
                    continue;
                }
            };
            let mut at = assemble_triple(&scales, &corr, &cfg.estimation)?;
            if let Some(s) = &cfg.spread {
                at = constrain_assembled(at, &panel, s)?;
            }
            let names: Vec<String> = at.assets.iter().map(|&i| panel.assets[i].clone()).collect();
            let file = TripleFile::from_triple(
                &at.triple,
                names,
                Some(TripleProvenance {
                    source_period: period.clone(),
                    day: day.id.clone(),
                    config_hash: hash.clone(),
                }),
            );
            write_json(&cfg.out.join("triples").join(format!("{}.json", day.id)), &file)?;
            rows.push(vec![
                day.id.clone(),
                period.clone(),
                scales.samples.to_string(),
                at.dropped.len().to_string(),
            ]);
        }
    }
    write_csv(&cfg.out.join("estimate.csv"), &["day", "period", "samples", "dropped_assets"], &rows)?;
    println!("estimated {} daily triples into {}", rows.len(), cfg.out.display());
    Ok(EXIT_OK)
}

fn parse_sweep(s: &str) -> Result<SweepConfig> {
    let (axis, grid) = s
        .split_once(':')
        .ok_or_else(|| Error::Validation(format!("sweep {s:?} is not axis:v1,v2,..")))?;
    let axis = match axis {
        "assets" => SweepAxis::Assets,
        "delta-t" => SweepAxis::DeltaT,
        other => return Err(Error::Validation(format!("unknown sweep axis {other:?}"))),
    };
    let grid = split_list(grid)
        .iter()
        .map(|v| v.parse::<f64>().map_err(|_| Error::Validation(format!("bad grid value {v:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepConfig { axis, grid })
}

fn resolve_score(
    common: &CommonArgs,
    panel: Option<&PathBuf>,
    strict: bool,
    bins: Option<usize>,
    sweep_arg: Option<&String>,
) -> Result<ScoreRunConfig> {
    let mut map = load_config_object(common.config.as_deref(), "score")?;
    set(&mut map, "panel", panel)?;
    set(&mut map, "delta_t", common.delta_t)?;
    set(&mut map, "models", common.models.as_ref().map(|s| split_list(s)))?;
    set(&mut map, "weights", common.weights.as_ref().map(|s| split_list(s)))?;
    set(&mut map, "split", parse_split(common.split.as_ref())?)?;
    set(&mut map, "spread", parse_spread(common.spread.as_ref())?)?;
    set(&mut map, "seed", common.seed)?;
    set(&mut map, "out", common.out.as_ref())?;
    set(&mut map, "format", common.format)?;
    set(&mut map, "liquidity_bins", bins)?;
    if strict {
        map.insert("strict_scales".into(), Value::Bool(true));
    }
    set(&mut map, "sweep", sweep_arg.map(|s| parse_sweep(s)).transpose()?)?;
    if !map.contains_key("panel") {
        return Err(Error::Validation("score needs a panel file".into()));
    }
    let cfg: ScoreRunConfig = resolve(map)?;
    parse_models(&cfg.models)?;
    parse_weights(&cfg.weights)?;
    if cfg.liquidity_bins == 0 {
        return Err(Error::Validation("liquidity_bins must be positive".into()));
    }
    Ok(cfg)
}

fn score_rows(report: &ScoreReport) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                c.model.to_string(),
                c.weight.to_string(),
                c.calibration.clone(),
                c.evaluation.clone(),
                c.r2.map_or(String::new(), format_score),
                c.samples.to_string(),
            ]
        })
        .collect();
    for a in &report.aggregates {
        for (label, v) in [("in", a.r2_in), ("out", a.r2_out), ("overfit", a.overfit)] {
            rows.push(vec![
                a.model.to_string(),
                a.weight.to_string(),
                label.to_string(),
                label.to_string(),
                v.map_or(String::new(), format_score),
                String::new(),
            ]);
        }
    }
    rows
}

fn run_score(cfg: &ScoreRunConfig) -> Result<i32> {
    let models = parse_models(&cfg.models)?;
    let weights = parse_weights(&cfg.weights)?;
    let panel = prepare_panel(&cfg.panel, cfg.panel_delta_t, cfg.delta_t, cfg.spread.as_ref(), cfg.split)?;
    let plan = crate::estimation::year_split(&panel)?;
    let sc = ScoreConfig {
        estimation: cfg.estimation,
        spread: cfg.spread.clone(),
        strict_scales: cfg.strict_scales,
        per_asset: true,
    };
    let mut report = score_models(&panel, &models, &weights, &plan, &sc)?;
    fs::create_dir_all(&cfg.out)?;
    let hash = echo("score", cfg, &cfg.out)?;
    report.metadata.seed = Some(cfg.seed);
    report.metadata.config_hash = Some(hash.clone());

    let curves: Vec<(ModelId, LiquidityCurve)> = report
        .per_asset
        .iter()
        .filter_map(|s| liquidity_curve(&s.scores, cfg.liquidity_bins).ok().map(|c| (s.model, c)))
        .collect();
    let sweep_report: Option<SweepReport> = match &cfg.sweep {
        Some(sw) => {
            let raw = read_panel(&cfg.panel, cfg.panel_delta_t)?;
            let raw = match &cfg.spread {
                Some(s) => impose_spread_constraint(&raw, s)?,
                None => raw,
            };
            Some(sweep(&raw, sw.axis, &sw.grid, &models, &weights, cfg.split, &sc, cfg.seed)?)
        }
        None => None,
    };

    if wants(cfg.format, Format::Doc) {
        #[derive(Serialize)]
        struct CurveDoc<'a> {
            model: ModelId,
            #[serde(flatten)]
            curve: &'a LiquidityCurve,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            report: &'a ScoreReport,
            liquidity_curves: Vec<CurveDoc<'a>>,
            #[serde(skip_serializing_if = "Option::is_none")]
            sweep: Option<&'a SweepReport>,
        }
        write_json(
            &cfg.out.join("score.json"),
            &Doc {
                report: &report,
                liquidity_curves: curves.iter().map(|(m, c)| CurveDoc { model: *m, curve: c }).collect(),
                sweep: sweep_report.as_ref(),
            },
        )?;
    }
    if wants(cfg.format, Format::Csv) {
        write_csv(
            &cfg.out.join("score.csv"),
            &["model", "weight", "calibration", "evaluation", "r2", "samples"],
            &score_rows(&report),
        )?;
        let mut rows = Vec::new();
        for (m, c) in &curves {
            for b in &c.bins {
                rows.push(vec![
                    m.to_string(),
                    b.lo.to_string(),
                    b.hi.to_string(),
                    b.center.map_or(String::new(), |x| x.to_string()),
                    b.mean.map_or(String::new(), format_score),
                    b.count.to_string(),
                ]);
            }
        }
        write_csv(&cfg.out.join("liquidity.csv"), &["model", "omega_lo", "omega_hi", "omega_center", "r2", "count"], &rows)?;
        if let Some(sw) = &sweep_report {
            let rows: Vec<Vec<String>> = sw
                .points
                .iter()
                .map(|p| {
                    vec![
                        p.value.to_string(),
                        p.model.to_string(),
                        p.weight.to_string(),
                        p.r2_out.map_or(String::new(), format_score),
                        p.overfit.map_or(String::new(), format_score),
                        p.repetitions.to_string(),
                    ]
                })
                .collect();
            write_csv(&cfg.out.join("sweep.csv"), &["value", "model", "weight", "r2_out", "overfit", "repetitions"], &rows)?;
        }
    }
    for a in &report.aggregates {
        println!(
            "{:<12} {:<13} in {:>10} out {:>10}",
            a.model.to_string(),
            a.weight.to_string(),
            a.r2_in.map_or("-".into(), |v| format!("{:.4}", v)),
            a.r2_out.map_or("-".into(), |v| format!("{:.4}", v)),
        );
    }
    for c in report.cells.iter().filter(|c| c.error.is_some()) {
        warn!(
            "{} {} {}->{}: {}",
            c.model,
            c.weight,
            c.calibration,
            c.evaluation,
            c.error.as_deref().unwrap_or("")
        );
    }
    Ok(if report.total_failure() { EXIT_MISMATCH } else { EXIT_OK })
}

fn resolve_cost(common: &CommonArgs, triple: Option<&PathBuf>, model: Option<&String>, portfolio: Option<&PathBuf>) -> Result<CostConfig> {
    let mut map = load_config_object(common.config.as_deref(), "cost")?;
    set(&mut map, "triple", triple)?;
    set(&mut map, "model", model)?;
    set(&mut map, "portfolio", portfolio)?;
    set(&mut map, "out", common.out.as_ref())?;
    if !map.contains_key("triple") || !map.contains_key("portfolio") {
        return Err(Error::Validation("cost needs a triple file and --portfolio".into()));
    }
    let cfg: CostConfig = resolve(map)?;
    cfg.model.parse::<ModelId>()?;
    Ok(cfg)
}

fn run_cost(cfg: &CostConfig) -> Result<i32> {
    let model: ModelId = cfg.model.parse()?;
    let file: TripleFile = serde_json::from_str(&fs::read_to_string(&cfg.triple)?)
        .map_err(|e| Error::Validation(format!("{}: {e}", cfg.triple.display())))?;
    let t = file.to_triple()?;
    let xi = parse_portfolio(&fs::read_to_string(&cfg.portfolio)?)?;
    if xi.len() != t.n() {
        return Err(Error::Shape(format!(
            "portfolio has {} entries, triple has {} assets",
            xi.len(),
            t.n()
        )));
    }
    let lam = evaluate(model, &t)?;
    let cost = expected_cost(&lam, &xi)?;
    fs::create_dir_all(&cfg.out)?;
    let hash = echo("cost", cfg, &cfg.out)?;
    #[derive(Serialize)]
    struct Doc<'a> {
        model: ModelId,
        assets: &'a [String],
        cost: f64,
        #[serde(with = "serde_rows")]
        lambda: DMatrix<f64>,
        config_hash: &'a str,
    }
    write_json(
        &cfg.out.join("impact.json"),
        &Doc {
            model,
            assets: &file.assets,
            cost,
            lambda: lam.lambda.clone(),
            config_hash: &hash,
        },
    )?;
    println!("cost {cost}");
    Ok(EXIT_OK)
}

fn configure_threads() {
    if let Some(n) = std::env::var("XIMPACT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("thread pool already initialized; XIMPACT_THREADS ignored");
        }
    }
}

pub fn execute(cli: Cli) -> Result<i32> {
    let c = &cli.common;
    match &cli.command {
        Command::Simulate {
            spec,
            scenario,
            days,
            bins,
        } => run_simulate(&resolve_simulate(c, spec.as_deref(), scenario.as_ref(), *days, *bins)?),
        Command::Axioms {
            n,
            trials,
            kernel_dim,
            axioms,
            report,
        } => run_axioms(&resolve_axioms(c, n.as_ref(), *trials, *kernel_dim, axioms.as_ref(), report.as_ref())?),
        Command::Estimate { panel } => run_estimate(&resolve_estimate(c, panel.as_ref())?),
        Command::Score {
            panel,
            strict_scales,
            liquidity_bins,
            sweep,
        } => run_score(&resolve_score(c, panel.as_ref(), *strict_scales, *liquidity_bins, sweep.as_ref())?),
        Command::Cost {
            triple,
            model,
            portfolio,
        } => run_cost(&resolve_cost(c, triple.as_ref(), model.as_ref(), portfolio.as_ref())?),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_csv_round_trip_and_missing_rows() {
        let text = "day,bin_index,asset,price,flow\n\
                    A-0001,0,x,10,1\nA-0001,0,y,5,-1\n\
                    A-0001,1,x,11,2\n\
                    A-0001,2,x,12,0\nA-0001,2,y,6,3\n";
        let p = parse_panel(text, 60.0).unwrap();
        assert_eq!(p.assets, vec!["x", "y"]);
        let d = &p.days[0];
        assert!(d.is_missing(1, 1));
        assert_eq!(d.prices[(1, 1)], 5.0);
        assert_eq!(d.flows[(1, 1)], 0.0);
        let back = String::from_utf8(panel_to_csv(&p).unwrap()).unwrap();
        assert_eq!(back.replace(".0", ""), text.replace(".0", ""));
    }

    #[test]
    fn panel_errors_carry_line_numbers() {
        let text = "day,bin_index,asset,price,flow\nA-1,0,x,10,1\nA-1,zero,x,10,1\n";
        match parse_panel(text, 60.0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_panel("a,b\n", 60.0), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn day_without_an_asset_is_dropped() {
        let text = "day,bin_index,asset,price,flow\n\
                    A-1,0,x,10,1\nA-1,0,y,5,1\nA-2,0,x,10,1\n";
        let p = parse_panel(text, 60.0).unwrap();
        assert_eq!(p.days.len(), 1);
    }

    #[test]
    fn portfolio_formats() {
        assert_eq!(parse_portfolio("[1, 2.5]").unwrap().as_slice(), &[1.0, 2.5]);
        assert_eq!(parse_portfolio("1, 2\n3").unwrap().len(), 3);
        assert!(parse_portfolio("1, x").is_err());
    }

    #[test]
    fn triple_file_round_trip() {
        let t = CovarianceTriple::from_matrices(
            DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
        )
        .unwrap();
        let f = TripleFile::from_triple(&t, vec!["a".into(), "b".into()], None);
        assert_eq!(f.response, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.to_triple().unwrap(), t);
    }
}
