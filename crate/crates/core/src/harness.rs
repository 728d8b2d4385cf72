//! Experiment orchestration: spec ingestion, seeded sweeps over location
//! realizations, CSV/JSON emission, fronthaul and complexity bookkeeping.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closedform;
use crate::error::{Error, Result};
use crate::fcp::{self, CollectiveEstimate, PrecoderSet};
use crate::lsfd::{self, Combiner, LocalMoments, RealizationPool};
use crate::model::{self, dbm_to_watt, CorrelationSet, NetworkConfig, PathlossModel};
use crate::pilots::{self, EstimationStats, PilotBook};
use crate::rng::{self, tag};
use crate::wmmse::{self, IwmmseConfig, IwmmseTrajectory, MomentSource};

/// Version tag written in the first CSV column.
pub const SCHEMA: &str = "v1";

pub const CSV_COLUMNS: [&str; 22] = [
    "schema",
    "scheme",
    "precoding",
    "sweep_variable",
    "sweep_value",
    "location",
    "location_seed",
    "M",
    "K",
    "L",
    "N",
    "tau_c",
    "tau_p",
    "realizations",
    "metric",
    "metric_value",
    "sum_se",
    "per_ue_se",
    "iterations",
    "stop_reasons",
    "fronthaul_scalars",
    "status",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Fcp,
    LsfdMr,
    LsfdLmmse,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Fcp => "fcp",
            Scheme::LsfdMr => "lsfd_mr",
            Scheme::LsfdLmmse => "lsfd_lmmse",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precoding {
    Identity,
    Iwmmse,
}

impl fmt::Display for Precoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precoding::Identity => "identity",
            Precoding::Iwmmse => "iwmmse",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SumSe,
    AvgSe,
    /// Per-UE average without the pilot pre-log factor.
    AvgRate,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::SumSe => "sum_se",
            Metric::AvgSe => "avg_se",
            Metric::AvgRate => "avg_rate",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepVariable {
    L,
    N,
    M,
    #[serde(rename = "tau_c")]
    TauC,
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepVariable::L => "L",
            SweepVariable::N => "N",
            SweepVariable::M => "M",
            SweepVariable::TauC => "tau_c",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<usize>,
}

/// Network parameters in engineering units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(alias = "M")]
    pub aps: usize,
    #[serde(alias = "K")]
    pub ues: usize,
    #[serde(alias = "L")]
    pub ap_antennas: usize,
    #[serde(alias = "N")]
    pub ue_antennas: usize,
    pub area_side: f64,
    pub bandwidth: f64,
    pub noise_dbm: f64,
    pub ue_power_mw: f64,
    pub tau_c: usize,
    /// Defaults to `N·ceil(K/2)`.
    pub tau_p: Option<usize>,
    pub pathloss: PathlossModel,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        let r = NetworkConfig::reference();
        Self {
            aps: r.aps,
            ues: r.ues,
            ap_antennas: r.ap_antennas,
            ue_antennas: r.ue_antennas,
            area_side: r.area_side,
            bandwidth: r.bandwidth,
            noise_dbm: -94.0,
            ue_power_mw: 200.0,
            tau_c: r.tau_c,
            tau_p: None,
            pathloss: PathlossModel::default(),
        }
    }
}

impl NetworkSpec {
    pub fn to_config(&self, seed: u64) -> NetworkConfig {
        NetworkConfig {
            aps: self.aps,
            ues: self.ues,
            ap_antennas: self.ap_antennas,
            ue_antennas: self.ue_antennas,
            area_side: self.area_side,
            bandwidth: self.bandwidth,
            noise_power: dbm_to_watt(self.noise_dbm),
            ue_power: self.ue_power_mw * 1e-3,
            tau_c: self.tau_c,
            tau_p: self
                .tau_p
                .unwrap_or_else(|| NetworkConfig::half_load_tau_p(self.ues, self.ue_antennas)),
            seed,
            pathloss: self.pathloss.clone(),
        }
    }

    fn with_sweep(&self, var: SweepVariable, value: usize) -> Self {
        let mut s = self.clone();
        match var {
            SweepVariable::L => s.ap_antennas = value,
            SweepVariable::N => s.ue_antennas = value,
            SweepVariable::M => s.aps = value,
            SweepVariable::TauC => s.tau_c = value,
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    /// Directory for the binary correlation cache.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub master_seed: u64,
    pub network: NetworkSpec,
    pub sweep: Option<Sweep>,
    pub schemes: Vec<Scheme>,
    pub precoding: Vec<Precoding>,
    pub n_locations: usize,
    /// Channel realizations per location for the centralized scheme.
    pub n_channel_realizations: usize,
    /// Pool size for sample-based LSFD statistics.
    pub n_moment_realizations: usize,
    /// Use the analytical statistics for LSFD with MR combining.
    pub mr_closed_form: bool,
    pub metric: Metric,
    pub iwmmse: IwmmseConfig,
    pub output: OutputSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            master_seed: 1,
            network: NetworkSpec::default(),
            sweep: None,
            schemes: vec![Scheme::Fcp, Scheme::LsfdMr, Scheme::LsfdLmmse],
            precoding: vec![Precoding::Identity, Precoding::Iwmmse],
            n_locations: 10,
            n_channel_realizations: 100,
            n_moment_realizations: 200,
            mr_closed_form: true,
            metric: Metric::SumSe,
            iwmmse: IwmmseConfig::default(),
            output: OutputSpec::default(),
        }
    }
}

impl ExperimentSpec {
    /// Parses TOML or JSON; the format is picked from the first
    /// non-blank character (`{` means JSON).
    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("JSON: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("TOML: {e}")))?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut spec = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut spec.output.csv,
            &mut spec.output.json,
            &mut spec.output.trajectories,
            &mut spec.output.cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(spec)
    }

    pub fn sweep_points(&self) -> Vec<(Option<SweepVariable>, usize, NetworkSpec)> {
        match &self.sweep {
            Some(s) => s
                .values
                .iter()
                .map(|&v| (Some(s.variable), v, self.network.with_sweep(s.variable, v)))
                .collect(),
            None => vec![(None, 0, self.network.clone())],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.schemes.is_empty() || self.precoding.is_empty() {
            return bad("schemes and precoding lists must be nonempty".into());
        }
        if self.n_locations == 0 {
            return bad("n_locations must be at least 1".into());
        }
        if self.schemes.contains(&Scheme::Fcp) && self.n_channel_realizations == 0 {
            return bad("n_channel_realizations must be at least 1".into());
        }
        let needs_pool = self.schemes.contains(&Scheme::LsfdLmmse)
            || (self.schemes.contains(&Scheme::LsfdMr) && !self.mr_closed_form);
        if needs_pool && self.n_moment_realizations == 0 {
            return bad("n_moment_realizations must be at least 1".into());
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return bad("sweep values must be nonempty".into());
            }
        }
        for (_, v, net) in self.sweep_points() {
            net.to_config(0)
                .validate()
                .map_err(|e| Error::InvalidConfig(format!("sweep value {v}: {e}")))?;
        }
        self.iwmmse.validate()?;
        if !self.iwmmse.mu.is_empty() && self.iwmmse.mu.len() != self.network.ues {
            return bad(format!(
                "{} priorities for {} UEs",
                self.iwmmse.mu.len(),
                self.network.ues
            ));
        }
        Ok(())
    }
}

/// Complex-scalar counts, held exactly as twice the value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScalarCount {
    pub twice: u128,
}

impl ScalarCount {
    pub fn value(&self) -> f64 {
        self.twice as f64 / 2.0
    }

    pub fn is_integer(&self) -> bool {
        self.twice.is_multiple_of(2)
    }
}

impl fmt::Display for ScalarCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integer() {
            write!(f, "{}", self.twice / 2)
        } else {
            write!(f, "{}.5", self.twice / 2)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FronthaulParams {
    pub aps: u64,
    pub ues: u64,
    pub ap_antennas: u64,
    pub ue_antennas: u64,
    pub tau_c: u64,
    pub tau_p: u64,
    /// Coherence blocks per location realization.
    pub n_r: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FronthaulScheme {
    Fcp,
    Lsfd,
}

impl std::str::FromStr for FronthaulScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcp" => Ok(Self::Fcp),
            "lsfd" | "lsfd_mr" | "lsfd_lmmse" => Ok(Self::Lsfd),
            other => Err(Error::InvalidConfig(format!(
                "unknown fronthaul scheme tag {other:?}"
            ))),
        }
    }
}

/// Breakdown of fronthaul scalars per location realization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FronthaulCount {
    pub uplink: ScalarCount,
    pub feedback: ScalarCount,
    pub total: ScalarCount,
}

/// Complex scalars exchanged over the fronthaul for one location realization.
///
/// Centralized: `τc M L N_r + M K L² N²/2` uplink, plus `K N² N_r` feedback
/// with precoding. LSFD: `(τc-τp) M K N N_r + M K N² + M² K² N^x/2` uplink
/// with `x = 4` (fourth moments) with precoding and `x = 2` without, plus
/// `K N²` feedback with precoding.
pub fn fronthaul_accounting(
    p: FronthaulParams,
    scheme: FronthaulScheme,
    precoding: bool,
) -> Result<FronthaulCount> {
    let [m, k, l, n, tc, tp, nr] = [
        p.aps,
        p.ues,
        p.ap_antennas,
        p.ue_antennas,
        p.tau_c,
        p.tau_p,
        p.n_r,
    ]
    .map(u128::from);
    if m == 0 || k == 0 || l == 0 || n == 0 || tc == 0 {
        return Err(Error::InvalidConfig(
            "fronthaul parameters must be positive".into(),
        ));
    }
    if tp > tc {
        return Err(Error::InvalidConfig("tau_p must not exceed tau_c".into()));
    }
    let (uplink, feedback) = match scheme {
        FronthaulScheme::Fcp => {
            let up = 2 * tc * m * l * nr + m * k * l * l * n * n;
            let fb = if precoding { 2 * k * n * n * nr } else { 0 };
            (up, fb)
        }
        FronthaulScheme::Lsfd => {
            let nx = if precoding { n.pow(4) } else { n * n };
            let up = 2 * (tc - tp) * m * k * n * nr + 2 * m * k * n * n + m * m * k * k * nx;
            let fb = if precoding { 2 * k * n * n } else { 0 };
            (up, fb)
        }
    };
    Ok(FronthaulCount {
        uplink: ScalarCount { twice: uplink },
        feedback: ScalarCount { twice: feedback },
        total: ScalarCount {
            twice: uplink + feedback,
        },
    })
}

/// One monomial `M^m K^k N^n N_r^r` of a per-iteration complexity order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Monomial {
    pub m: u32,
    pub k: u32,
    pub n: u32,
    pub n_r: u32,
}

impl Monomial {
    pub const fn new(m: u32, k: u32, n: u32, n_r: u32) -> Self {
        Self { m, k, n, n_r }
    }

    pub fn eval(&self, m: u64, k: u64, n: u64, n_r: u64) -> f64 {
        (m as f64).powi(self.m as i32)
            * (k as f64).powi(self.k as i32)
            * (n as f64).powi(self.n as i32)
            * (n_r as f64).powi(self.n_r as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputePath {
    Fcp,
    LsfdLmmseSampled,
    LsfdMrSampled,
    LsfdMrAnalytical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityEstimate {
    pub path: ComputePath,
    pub terms: Vec<Monomial>,
    /// Sum of the monomials at the given sizes.
    pub leading_count: f64,
}

pub fn complexity_terms(path: ComputePath) -> Vec<Monomial> {
    match path {
        ComputePath::Fcp => vec![Monomial::new(3, 2, 5, 1)],
        ComputePath::LsfdLmmseSampled => vec![Monomial::new(2, 2, 3, 1)],
        ComputePath::LsfdMrSampled => vec![Monomial::new(2, 2, 3, 1), Monomial::new(3, 1, 3, 0)],
        ComputePath::LsfdMrAnalytical => vec![Monomial::new(3, 2, 5, 0)],
    }
}

/// Per-iteration order of the precoder algorithm for one location realization.
pub fn complexity_estimate(
    m: u64,
    k: u64,
    n: u64,
    n_r: u64,
    path: ComputePath,
) -> ComplexityEstimate {
    let terms = complexity_terms(path);
    let leading_count = terms.iter().map(|t| t.eval(m, k, n, n_r)).sum();
    ComplexityEstimate {
        path,
        terms,
        leading_count,
    }
}

fn compute_path(scheme: Scheme, mr_closed_form: bool) -> ComputePath {
    match scheme {
        Scheme::Fcp => ComputePath::Fcp,
        Scheme::LsfdLmmse => ComputePath::LsfdLmmseSampled,
        Scheme::LsfdMr if mr_closed_form => ComputePath::LsfdMrAnalytical,
        Scheme::LsfdMr => ComputePath::LsfdMrSampled,
    }
}

/// Result for one (scheme, precoding, sweep value, location).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub scheme: Scheme,
    pub precoding: Precoding,
    pub sweep_variable: Option<SweepVariable>,
    pub sweep_value: usize,
    pub location: usize,
    pub location_seed: u64,
    pub aps: usize,
    pub ues: usize,
    pub ap_antennas: usize,
    pub ue_antennas: usize,
    pub tau_c: usize,
    pub tau_p: usize,
    /// Channel realizations (centralized) or pool size (sampled LSFD); 0 for analytical.
    pub realizations: usize,
    pub metric: Metric,
    pub metric_value: f64,
    pub sum_se: f64,
    pub per_ue_se: Vec<f64>,
    /// Iterations of the precoder algorithm, summed over realizations.
    pub iterations: usize,
    /// Stop reasons with counts, e.g. `converged:3;decreased:1`.
    pub stop_reasons: String,
    pub fronthaul: ScalarCount,
    /// `ok` or the failure message.
    pub status: String,
    /// Seconds; reported in the JSON sidecar only.
    pub wall_time: f64,
}

impl Record {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn csv_row(&self) -> Vec<String> {
        let f = |x: f64| format!("{x:.17e}");
        vec![
            SCHEMA.to_string(),
            self.scheme.to_string(),
            self.precoding.to_string(),
            self.sweep_variable
                .map(|v| v.to_string())
                .unwrap_or_default(),
            self.sweep_value.to_string(),
            self.location.to_string(),
            self.location_seed.to_string(),
            self.aps.to_string(),
            self.ues.to_string(),
            self.ap_antennas.to_string(),
            self.ue_antennas.to_string(),
            self.tau_c.to_string(),
            self.tau_p.to_string(),
            self.realizations.to_string(),
            self.metric.to_string(),
            f(self.metric_value),
            f(self.sum_se),
            self.per_ue_se
                .iter()
                .map(|&x| f(x))
                .collect::<Vec<_>>()
                .join(";"),
            self.iterations.to_string(),
            self.stop_reasons.clone(),
            self.fronthaul.to_string(),
            self.status.clone(),
        ]
    }
}

/// One trajectory row, keyed by record and realization.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub scheme: Scheme,
    pub sweep_value: usize,
    pub location: usize,
    pub realization: usize,
    pub fields: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub scheme: Scheme,
    pub precoding: Precoding,
    pub sweep_value: usize,
    pub count: usize,
    pub failures: usize,
    pub median_sum_se: f64,
    pub mean_sum_se: f64,
    pub median_metric: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub scheme: Scheme,
    pub sweep_value: usize,
    /// `median(I-WMMSE sum SE) / median(identity sum SE) - 1`.
    pub median_ratio_minus_one: f64,
}

#[derive(Clone, Debug)]
pub struct SeReport {
    pub spec: ExperimentSpec,
    pub records: Vec<Record>,
    pub trajectories: Vec<TrajectoryRow>,
    pub summaries: Vec<GroupSummary>,
    pub improvements: Vec<Improvement>,
    pub wall_time: f64,
    pub threads: usize,
}

impl SeReport {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.ok()).count()
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(CSV_COLUMNS).map_err(io)?;
        for r in &self.records {
            w.write_record(r.csv_row()).map_err(io)?;
        }
        w.into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    pub fn trajectory_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record([
            "schema",
            "scheme",
            "sweep_value",
            "location",
            "realization",
            "iteration",
            "weighted_sum_se",
            "per_ue_se",
            "per_ue_power",
            "lambda",
            "stop_reason",
        ])
        .map_err(io)?;
        for t in &self.trajectories {
            let mut row = vec![
                SCHEMA.to_string(),
                t.scheme.to_string(),
                t.sweep_value.to_string(),
                t.location.to_string(),
                t.realization.to_string(),
            ];
            row.extend(t.fields.iter().cloned());
            w.write_record(row).map_err(io)?;
        }
        w.into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// Sidecar: spec echo, content hash of the CSV, summaries, timing, complexity.
    pub fn json(&self) -> Result<serde_json::Value> {
        let csv = self.csv_bytes()?;
        let hash = hex::encode(Sha256::digest(&csv));
        let mut complexity = Vec::new();
        let mut fronthaul = Vec::new();
        for (_, value, net) in self.spec.sweep_points() {
            let cfg = net.to_config(0);
            for &scheme in &self.spec.schemes {
                let n_r = match scheme {
                    Scheme::Fcp => self.spec.n_channel_realizations,
                    _ if scheme == Scheme::LsfdMr && self.spec.mr_closed_form => 0,
                    _ => self.spec.n_moment_realizations,
                } as u64;
                complexity.push(serde_json::json!({
                    "sweep_value": value,
                    "scheme": scheme,
                    "estimate": complexity_estimate(cfg.aps as u64, cfg.ues as u64, cfg.ue_antennas as u64, n_r, compute_path(scheme, self.spec.mr_closed_form)),
                }));
                for &pre in &self.spec.precoding {
                    let fh = fronthaul_for(&cfg, scheme, pre, self.spec.n_channel_realizations)?;
                    fronthaul.push(serde_json::json!({
                        "sweep_value": value,
                        "scheme": scheme,
                        "precoding": pre,
                        "uplink": fh.uplink.to_string(),
                        "feedback": fh.feedback.to_string(),
                        "total": fh.total.to_string(),
                    }));
                }
            }
        }
        let wall: Vec<serde_json::Value> = self
            .records
            .iter()
            .map(|r| {
                serde_json::json!({
                    "scheme": r.scheme, "precoding": r.precoding, "sweep_value": r.sweep_value,
                    "location": r.location, "seconds": r.wall_time,
                })
            })
            .collect();
        Ok(serde_json::json!({
            "schema": SCHEMA,
            "spec": self.spec,
            "csv_sha256": hash,
            "records": self.records.len(),
            "failures": self.failures(),
            "threads": self.threads,
            "wall_time_seconds": self.wall_time,
            "summaries": self.summaries,
            "improvements": self.improvements,
            "fronthaul": fronthaul,
            "complexity": complexity,
            "record_wall_times": wall,
        }))
    }

    pub fn write_outputs(&self) -> Result<()> {
        let out = &self.spec.output;
        if let Some(p) = &out.csv {
            write_file(p, &self.csv_bytes()?)?;
        }
        if let Some(p) = &out.json {
            let v = self.json()?;
            write_file(
                p,
                serde_json::to_string_pretty(&v).expect("json").as_bytes(),
            )?;
        }
        if let Some(p) = &out.trajectories {
            write_file(p, &self.trajectory_csv_bytes()?)?;
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = path.parent() {
        if !d.as_os_str().is_empty() {
            std::fs::create_dir_all(d)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn fronthaul_for(
    cfg: &NetworkConfig,
    scheme: Scheme,
    pre: Precoding,
    n_r: usize,
) -> Result<FronthaulCount> {
    let params = FronthaulParams {
        aps: cfg.aps as u64,
        ues: cfg.ues as u64,
        ap_antennas: cfg.ap_antennas as u64,
        ue_antennas: cfg.ue_antennas as u64,
        tau_c: cfg.tau_c as u64,
        tau_p: cfg.tau_p as u64,
        n_r: n_r as u64,
    };
    let fs = if scheme == Scheme::Fcp {
        FronthaulScheme::Fcp
    } else {
        FronthaulScheme::Lsfd
    };
    fronthaul_accounting(params, fs, pre == Precoding::Iwmmse)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Threads from `CFMIMO_THREADS`, else the available parallelism.
pub fn default_threads() -> usize {
    std::env::var("CFMIMO_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Everything shared by the schemes at one location realization.
pub struct LocationSetup {
    pub config: NetworkConfig,
    pub corr: CorrelationSet,
    pub book: PilotBook,
    pub precoders: PrecoderSet,
    pub stats: EstimationStats,
}

pub fn location_setup(config: NetworkConfig, cache_dir: Option<&Path>) -> Result<LocationSetup> {
    config.validate()?;
    let seed = config.seed;
    let layout = model::place_network(&config, seed);
    let corr = match cache_dir {
        Some(dir) => crate::cache::correlation_cached(dir, &config, seed, || {
            model::synthesize_correlation(&layout, &config, seed)
        })?,
        None => model::synthesize_correlation(&layout, &config, seed),
    };
    let (assignment, _) = pilots::assign_pilots(&layout, config.tau_p, config.ue_antennas)?;
    let book = PilotBook::new(config.tau_p, config.ue_antennas, assignment)?;
    let precoders = PrecoderSet::identity(config.ues, config.ue_antennas, config.ue_power);
    let stats = pilots::estimation_stats(&corr, &book, &precoders.f_p, config.noise_power)?;
    Ok(LocationSetup {
        config,
        corr,
        book,
        precoders,
        stats,
    })
}

fn stop_summary(trajs: &[&IwmmseTrajectory]) -> (usize, String) {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut iters = 0;
    for t in trajs {
        iters += t.iterations();
        *counts.entry(t.stop_reason.to_string()).or_default() += 1;
    }
    let s = counts
        .iter()
        .map(|(k, v)| format!("{k}:{v}"))
        .collect::<Vec<_>>()
        .join(";");
    (iters, s)
}

/// Per-UE SE of one scheme at a location, with and without precoder design.
struct SchemeOutcome {
    per_ue: BTreeMap<Precoding, Vec<f64>>,
    trajectories: Vec<IwmmseTrajectory>,
    realizations: usize,
}

fn run_fcp(setup: &LocationSetup, spec: &ExperimentSpec, loc_seed: u64) -> Result<SchemeOutcome> {
    let cfg = &setup.config;
    let k_count = cfg.ues;
    let nr = spec.n_channel_realizations;
    let prelog = cfg.prelog();
    let mut sums: BTreeMap<Precoding, Vec<f64>> = BTreeMap::new();
    let mut trajectories = Vec::new();
    for r in 0..nr {
        let mut rng = rng::stream(loc_seed, &[tag::FCP_CHANNEL, r as u64]);
        let (_, local) = pilots::draw_with_estimates(
            &setup.corr,
            &setup.stats,
            &setup.precoders,
            &setup.book,
            cfg.noise_power,
            &mut rng,
        )?;
        let coll = CollectiveEstimate::new(&local, &setup.stats);
        for &pre in &spec.precoding {
            let se = match pre {
                Precoding::Identity => {
                    let load = fcp::error_loading(&setup.stats, &setup.precoders.f_u);
                    fcp::fcp_se_opt_all(
                        &coll,
                        &setup.precoders.f_u,
                        &load,
                        cfg.noise_power,
                        prelog,
                    )?
                }
                Precoding::Iwmmse => {
                    let t = wmmse::run_iwmmse_fcp(
                        &coll,
                        &setup.precoders.f_u,
                        &setup.precoders.power,
                        cfg.noise_power,
                        prelog,
                        &spec.iwmmse,
                    )?;
                    let se = t.selected_record().se.clone();
                    trajectories.push(t);
                    se
                }
            };
            let acc = sums.entry(pre).or_insert_with(|| vec![0.0; k_count]);
            for (a, s) in acc.iter_mut().zip(se) {
                *a += s;
            }
        }
    }
    for v in sums.values_mut() {
        v.iter_mut().for_each(|x| *x /= nr as f64);
    }
    Ok(SchemeOutcome {
        per_ue: sums,
        trajectories,
        realizations: nr,
    })
}

fn run_lsfd(
    setup: &LocationSetup,
    spec: &ExperimentSpec,
    loc_seed: u64,
    scheme: Scheme,
) -> Result<SchemeOutcome> {
    let cfg = &setup.config;
    let prelog = cfg.prelog();
    let sigma2 = cfg.noise_power;
    let f0 = &setup.precoders.f_u;
    let mut per_ue = BTreeMap::new();
    let mut trajectories = Vec::new();
    let pool_seed = rng::derive_seed(loc_seed, &[tag::MOMENT_POOL]);
    let (fixed, pool, realizations): (Option<LocalMoments>, Option<RealizationPool>, usize) =
        match scheme {
            Scheme::LsfdMr if spec.mr_closed_form => (
                Some(closedform::mr_local_moments(
                    &setup.corr,
                    &setup.stats,
                    &setup.book,
                )),
                None,
                0,
            ),
            Scheme::LsfdMr => {
                let pool = RealizationPool::draw(
                    &setup.corr,
                    &setup.stats,
                    &setup.precoders,
                    &setup.book,
                    sigma2,
                    spec.n_moment_realizations,
                    pool_seed,
                )?;
                let lm = LocalMoments::from_pool(&pool, Combiner::Mr, f0, None, sigma2)?;
                (Some(lm), None, spec.n_moment_realizations)
            }
            _ => {
                let pool = RealizationPool::draw(
                    &setup.corr,
                    &setup.stats,
                    &setup.precoders,
                    &setup.book,
                    sigma2,
                    spec.n_moment_realizations,
                    pool_seed,
                )?;
                (None, Some(pool), spec.n_moment_realizations)
            }
        };
    let source = match (&fixed, &pool) {
        (Some(lm), _) => MomentSource::Fixed(lm),
        (None, Some(p)) => MomentSource::Pool {
            pool: p,
            combiner: Combiner::Lmmse,
            stats: &setup.stats,
        },
        _ => unreachable!(),
    };
    for &pre in &spec.precoding {
        let se = match pre {
            Precoding::Identity => {
                let lm = source.local(f0, sigma2)?;
                lsfd::lsfd_se_opt_all(&lm.stat_moments(f0), f0, sigma2, prelog)?
            }
            Precoding::Iwmmse => {
                let t = wmmse::run_iwmmse_lsfd(
                    source,
                    f0,
                    &setup.precoders.power,
                    sigma2,
                    prelog,
                    &spec.iwmmse,
                )?;
                let se = t.selected_record().se.clone();
                trajectories.push(t);
                se
            }
        };
        per_ue.insert(pre, se);
    }
    Ok(SchemeOutcome {
        per_ue,
        trajectories,
        realizations,
    })
}

fn metric_value(metric: Metric, per_ue: &[f64], prelog: f64) -> f64 {
    let sum: f64 = per_ue.iter().sum();
    let k = per_ue.len() as f64;
    match metric {
        Metric::SumSe => sum,
        Metric::AvgSe => sum / k,
        Metric::AvgRate => sum / k / prelog,
    }
}

/// All records for one (sweep point, location).
fn run_location(
    spec: &ExperimentSpec,
    var: Option<SweepVariable>,
    value: usize,
    net: &NetworkSpec,
    loc: usize,
) -> (Vec<Record>, Vec<TrajectoryRow>) {
    let loc_seed = rng::derive_seed(spec.master_seed, &[tag::LOCATION, loc as u64]);
    let cfg = net.to_config(loc_seed);
    let setup = location_setup(cfg.clone(), spec.output.cache_dir.as_deref());
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for &scheme in &spec.schemes {
        let start = Instant::now();
        let outcome = setup
            .as_ref()
            .map_err(clone_err)
            .and_then(|s| match scheme {
                Scheme::Fcp => run_fcp(s, spec, loc_seed),
                _ => run_lsfd(s, spec, loc_seed, scheme),
            });
        let elapsed = start.elapsed().as_secs_f64();
        let base = |pre: Precoding| Record {
            scheme,
            precoding: pre,
            sweep_variable: var,
            sweep_value: value,
            location: loc,
            location_seed: loc_seed,
            aps: cfg.aps,
            ues: cfg.ues,
            ap_antennas: cfg.ap_antennas,
            ue_antennas: cfg.ue_antennas,
            tau_c: cfg.tau_c,
            tau_p: cfg.tau_p,
            realizations: 0,
            metric: spec.metric,
            metric_value: f64::NAN,
            sum_se: f64::NAN,
            per_ue_se: Vec::new(),
            iterations: 0,
            stop_reasons: String::new(),
            fronthaul: fronthaul_for(&cfg, scheme, pre, spec.n_channel_realizations)
                .map(|f| f.total)
                .unwrap_or(ScalarCount { twice: 0 }),
            status: "ok".into(),
            wall_time: elapsed / spec.precoding.len() as f64,
        };
        match outcome {
            Ok(out) => {
                for &pre in &spec.precoding {
                    let se = out.per_ue[&pre].clone();
                    let mut r = base(pre);
                    r.realizations = out.realizations;
                    r.sum_se = se.iter().sum();
                    r.metric_value = metric_value(spec.metric, &se, cfg.prelog());
                    r.per_ue_se = se;
                    if pre == Precoding::Iwmmse {
                        let refs: Vec<&IwmmseTrajectory> = out.trajectories.iter().collect();
                        let (it, reasons) = stop_summary(&refs);
                        r.iterations = it;
                        r.stop_reasons = reasons;
                    }
                    records.push(r);
                }
                for (i, t) in out.trajectories.iter().enumerate() {
                    for fields in t.csv_rows() {
                        rows.push(TrajectoryRow {
                            scheme,
                            sweep_value: value,
                            location: loc,
                            realization: i,
                            fields,
                        });
                    }
                }
            }
            Err(e) => {
                log::error!("{scheme} at location {loc} (sweep value {value}) failed: {e}");
                for &pre in &spec.precoding {
                    let mut r = base(pre);
                    r.status = format!(
                        "{}: {e}",
                        if e.is_numerical() {
                            "numerical"
                        } else {
                            "failed"
                        }
                    );
                    records.push(r);
                }
            }
        }
    }
    (records, rows)
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::InvalidConfig(s) => Error::InvalidConfig(s.clone()),
        Error::NotPd(s) => Error::NotPd(s.clone()),
        Error::NotPsd(v) => Error::NotPsd(*v),
        Error::NotHermitian(v) => Error::NotHermitian(*v),
        Error::Bisection(s) => Error::Bisection(s.clone()),
        Error::Power(s) => Error::Power(s.clone()),
        other => Error::Dimension(other.to_string()),
    }
}

fn summarize(spec: &ExperimentSpec, records: &[Record]) -> (Vec<GroupSummary>, Vec<Improvement>) {
    let mut groups: BTreeMap<(usize, Scheme, Precoding), Vec<&Record>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.sweep_value, r.scheme, r.precoding))
            .or_default()
            .push(r);
    }
    let mut summaries = Vec::new();
    for ((value, scheme, pre), rs) in &groups {
        let ok: Vec<&&Record> = rs.iter().filter(|r| r.ok()).collect();
        let sums: Vec<f64> = ok.iter().map(|r| r.sum_se).collect();
        let metrics: Vec<f64> = ok.iter().map(|r| r.metric_value).collect();
        summaries.push(GroupSummary {
            scheme: *scheme,
            precoding: *pre,
            sweep_value: *value,
            count: ok.len(),
            failures: rs.len() - ok.len(),
            median_sum_se: median(&sums),
            mean_sum_se: if sums.is_empty() {
                f64::NAN
            } else {
                sums.iter().sum::<f64>() / sums.len() as f64
            },
            median_metric: median(&metrics),
            wall_time: rs.iter().map(|r| r.wall_time).sum(),
        });
    }
    let mut improvements = Vec::new();
    if spec.precoding.contains(&Precoding::Identity) && spec.precoding.contains(&Precoding::Iwmmse)
    {
        for s in summaries
            .iter()
            .filter(|s| s.precoding == Precoding::Iwmmse)
        {
            if let Some(base) = summaries.iter().find(|b| {
                b.precoding == Precoding::Identity
                    && b.scheme == s.scheme
                    && b.sweep_value == s.sweep_value
            }) {
                improvements.push(Improvement {
                    scheme: s.scheme,
                    sweep_value: s.sweep_value,
                    median_ratio_minus_one: s.median_sum_se / base.median_sum_se - 1.0,
                });
            }
        }
    }
    (summaries, improvements)
}

/// Runs the experiment on a pool of `threads` workers (`None` reads `CFMIMO_THREADS`).
pub fn run_experiment_with(spec: &ExperimentSpec, threads: Option<usize>) -> Result<SeReport> {
    spec.validate()?;
    let threads = threads.unwrap_or_else(default_threads).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let points = spec.sweep_points();
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..spec.n_locations).map(move |l| (p, l)))
        .collect();
    let results: Vec<(Vec<Record>, Vec<TrajectoryRow>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, loc)| {
                let (var, value, net) = &points[p];
                run_location(spec, *var, *value, net, loc)
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut trajectories = Vec::new();
    for (r, t) in results {
        records.extend(r);
        trajectories.extend(t);
    }
    let (summaries, improvements) = summarize(spec, &records);
    Ok(SeReport {
        spec: spec.clone(),
        records,
        trajectories,
        summaries,
        improvements,
        wall_time: start.elapsed().as_secs_f64(),
        threads,
    })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<SeReport> {
    run_experiment_with(spec, None)
}

/// Per-UE SE at identity precoding for a single centralized realization,
/// computed directly; used to cross-check the harness plumbing.
pub fn direct_fcp_identity(spec: &ExperimentSpec, loc: usize) -> Result<Vec<f64>> {
    let loc_seed = rng::derive_seed(spec.master_seed, &[tag::LOCATION, loc as u64]);
    let setup = location_setup(spec.network.to_config(loc_seed), None)?;
    let cfg = &setup.config;
    let mut rng = rng::stream(loc_seed, &[tag::FCP_CHANNEL, 0]);
    let (_, local) = pilots::draw_with_estimates(
        &setup.corr,
        &setup.stats,
        &setup.precoders,
        &setup.book,
        cfg.noise_power,
        &mut rng,
    )?;
    let coll = CollectiveEstimate::new(&local, &setup.stats);
    let load = fcp::error_loading(&setup.stats, &setup.precoders.f_u);
    fcp::fcp_se_opt_all(
        &coll,
        &setup.precoders.f_u,
        &load,
        cfg.noise_power,
        cfg.prelog(),
    )
}
