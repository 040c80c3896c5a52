//! Experiment specs, seed sweeps, ablations and CSV output.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::environment::{EnvConfig, EnvError, EnvKind, Environment};
use crate::orchestrator::{
    run_protocol, Mechanism, ProtocolConfig, ProtocolError, RunMetrics, Threshold,
};
use crate::server::Ablations;
use crate::stats::ModelParams;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config key `{key}`: {message}")]
    Key { key: String, message: String },
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("seed {seed}: {source}")]
    Protocol {
        seed: u64,
        #[source]
        source: ProtocolError,
    },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn key_err(key: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Key {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Run,
    Ablate,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvSource {
    Synthetic,
    Dataset(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Emit {
    pub per_step_csv: bool,
    pub summary: bool,
    pub epoch_log: bool,
}

impl Default for Emit {
    fn default() -> Self {
        Self {
            per_step_csv: true,
            summary: true,
            epoch_log: true,
        }
    }
}

/// Fully resolved experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub source: EnvSource,
    /// For dataset sources only `seed` is meaningful; the rest is read from
    /// the file header.
    pub env: EnvConfig,
    pub protocol: ProtocolConfig,
    pub n_seeds: usize,
    pub output_dir: PathBuf,
    pub emit: Emit,
}

/// Experiment settings as written in a config file or on the command line.
/// Every field is optional; [`RawSpec::resolve`] fills defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSpec {
    pub mode: Option<String>,
    pub env: Option<String>,
    #[serde(rename = "N")]
    pub n_clients: Option<i64>,
    #[serde(rename = "T")]
    pub horizon: Option<i64>,
    pub d: Option<i64>,
    #[serde(rename = "K")]
    pub pool_size: Option<i64>,
    pub sigma: Option<f64>,
    pub lambda: Option<f64>,
    pub delta: Option<f64>,
    pub mechanism: Option<String>,
    pub beta: Option<f64>,
    pub dc: Option<String>,
    pub costs: Option<String>,
    pub seeds: Option<u64>,
    pub n_seeds: Option<i64>,
    pub out: Option<PathBuf>,
    pub skip_zero_uploads: Option<bool>,
}

pub const DEFAULT_N: usize = 50;
pub const DEFAULT_T: usize = 5000;
pub const DEFAULT_D: usize = 25;
pub const DEFAULT_K: usize = 25;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_BETA: f64 = 1.0;

impl RawSpec {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::File {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| ExperimentError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Fields set in `over` replace fields in `self`.
    pub fn overlay(self, over: RawSpec) -> RawSpec {
        RawSpec {
            mode: over.mode.or(self.mode),
            env: over.env.or(self.env),
            n_clients: over.n_clients.or(self.n_clients),
            horizon: over.horizon.or(self.horizon),
            d: over.d.or(self.d),
            pool_size: over.pool_size.or(self.pool_size),
            sigma: over.sigma.or(self.sigma),
            lambda: over.lambda.or(self.lambda),
            delta: over.delta.or(self.delta),
            mechanism: over.mechanism.or(self.mechanism),
            beta: over.beta.or(self.beta),
            dc: over.dc.or(self.dc),
            costs: over.costs.or(self.costs),
            seeds: over.seeds.or(self.seeds),
            n_seeds: over.n_seeds.or(self.n_seeds),
            out: over.out.or(self.out),
            skip_zero_uploads: over.skip_zero_uploads.or(self.skip_zero_uploads),
        }
    }

    /// Validates every field and fills defaults. For dataset sources the
    /// client count comes from the file header, so the file is peeked here.
    pub fn resolve(&self) -> Result<ExperimentSpec, ExperimentError> {
        let mode = match self.mode.as_deref().unwrap_or("run") {
            "run" => Mode::Run,
            "ablate" => Mode::Ablate,
            other => {
                return Err(key_err(
                    "mode",
                    format!("expected run|ablate, got `{other}`"),
                ))
            }
        };
        let source = match self.env.as_deref().unwrap_or("synthetic") {
            "synthetic" => EnvSource::Synthetic,
            other => match other.strip_prefix("dataset:") {
                Some(p) if !p.is_empty() => EnvSource::Dataset(PathBuf::from(p)),
                _ => {
                    return Err(key_err(
                        "env",
                        format!("expected synthetic|dataset:<path>, got `{other}`"),
                    ))
                }
            },
        };
        let count = |key: &str, v: Option<i64>, default: usize| -> Result<usize, ExperimentError> {
            match v {
                None => Ok(default),
                Some(x) if x >= 1 => Ok(x as usize),
                Some(x) => Err(key_err(key, format!("must be at least 1, got {x}"))),
            }
        };
        let positive = |key: &str, v: Option<f64>, default: f64| -> Result<f64, ExperimentError> {
            let x = v.unwrap_or(default);
            if x.is_finite() && x > 0.0 {
                Ok(x)
            } else {
                Err(key_err(key, format!("must be a positive number, got {x}")))
            }
        };

        let mut env = EnvConfig {
            n_clients: count("N", self.n_clients, DEFAULT_N)?,
            horizon: count("T", self.horizon, DEFAULT_T)?,
            dim: count("d", self.d, DEFAULT_D)?,
            pool_size: count("K", self.pool_size, DEFAULT_K)?,
            noise_sigma: positive("sigma", self.sigma, DEFAULT_SIGMA)?,
            seed: self.seeds.unwrap_or(0),
        };
        if let EnvSource::Dataset(path) = &source {
            let data = Environment::load_dataset(path)?;
            env.n_clients = data.n_clients();
            env.horizon = data.horizon();
            env.dim = data.dim();
            env.pool_size = data.pool_size();
        }

        let lambda = positive("lambda", self.lambda, DEFAULT_LAMBDA)?;
        let delta = self.delta.unwrap_or(DEFAULT_DELTA);
        if !(delta > 0.0 && delta < 1.0) {
            return Err(key_err("delta", format!("must lie in (0, 1), got {delta}")));
        }
        let model = ModelParams {
            lambda,
            sigma: env.noise_sigma,
            delta,
        };

        let mechanism = match self.mechanism.as_deref().unwrap_or("pe") {
            "pf" => Mechanism::PaymentFree,
            "pe" => Mechanism::PaymentEfficient,
            "dislinucb" => Mechanism::DislinucbBaseline,
            "none" => Mechanism::NoCommunication,
            other => {
                return Err(key_err(
                    "mechanism",
                    format!("expected pf|pe|dislinucb|none, got `{other}`"),
                ))
            }
        };
        let beta = self.beta.unwrap_or(DEFAULT_BETA);
        if !(0.0..=1.0).contains(&beta) {
            return Err(key_err("beta", format!("must lie in [0, 1], got {beta}")));
        }
        let d_c = match self.dc.as_deref().unwrap_or("auto") {
            "auto" => {
                if beta == 0.0 {
                    return Err(key_err(
                        "dc",
                        "`auto` needs beta > 0; give an explicit threshold",
                    ));
                }
                Threshold::Theoretical
            }
            s => match s.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => Threshold::Explicit(v),
                _ => {
                    return Err(key_err(
                        "dc",
                        format!("expected auto or a non-negative number, got `{s}`"),
                    ))
                }
            },
        };
        let costs = parse_costs(self.costs.as_deref().unwrap_or("0"), env.n_clients)?;
        let n_seeds = count("n-seeds", self.n_seeds, 1)?;

        Ok(ExperimentSpec {
            mode,
            source,
            env,
            protocol: ProtocolConfig {
                mechanism,
                beta,
                d_c,
                model,
                costs,
                ablations: Ablations::default(),
                skip_zero_uploads: self.skip_zero_uploads.unwrap_or(false),
            },
            n_seeds,
            output_dir: self.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            emit: Emit::default(),
        })
    }
}

/// A scalar is broadcast to every client; a comma list must name each client.
pub fn parse_costs(text: &str, n_clients: usize) -> Result<Vec<f64>, ExperimentError> {
    let vals = text
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            match tok.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
                _ => Err(key_err(
                    "costs",
                    format!("`{tok}` is not a non-negative number"),
                )),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    match vals.len() {
        1 => Ok(vec![vals[0]; n_clients]),
        n if n == n_clients => Ok(vals),
        n => Err(key_err(
            "costs",
            format!("{n} values for {n_clients} clients (give one value or one per client)"),
        )),
    }
}

impl ExperimentSpec {
    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_seeds as u64).map(move |k| self.env.seed + k)
    }

    pub fn environment(&self, seed: u64) -> Result<Environment, ExperimentError> {
        Ok(match &self.source {
            EnvSource::Synthetic => Environment::gen_synthetic(&EnvConfig { seed, ..self.env })?,
            EnvSource::Dataset(path) => Environment::load_dataset(path)?,
        })
    }

    fn mechanism_tag(&self) -> &'static str {
        match self.protocol.mechanism {
            Mechanism::PaymentFree => "pf",
            Mechanism::PaymentEfficient => "pe",
            Mechanism::DislinucbBaseline => "dislinucb",
            Mechanism::NoCommunication => "none",
        }
    }
}

/// One variant's per-seed results.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantRuns {
    pub variant: String,
    pub runs: Vec<(u64, RunMetrics)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub mean_final: f64,
    pub std_final: f64,
    pub mean_comm: f64,
    pub mean_payment: f64,
    pub n_seeds: usize,
}

impl VariantRuns {
    pub fn summary(&self) -> SummaryRow {
        let finals: Vec<f64> = self.runs.iter().map(|(_, m)| m.final_value()).collect();
        let n = finals.len();
        let mean = |xs: &mut dyn Iterator<Item = f64>| xs.sum::<f64>() / n as f64;
        let mean_final = mean(&mut finals.iter().copied());
        let std_final = if n > 1 {
            (finals.iter().map(|x| (x - mean_final).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        SummaryRow {
            variant: self.variant.clone(),
            mean_final,
            std_final,
            mean_comm: mean(&mut self.runs.iter().map(|(_, m)| m.final_comm() as f64)),
            mean_payment: mean(&mut self.runs.iter().map(|(_, m)| m.final_payment())),
            n_seeds: n,
        }
    }
}

/// Runs every seed of one protocol configuration, in parallel across seeds.
pub fn run_variant(
    spec: &ExperimentSpec,
    variant: &str,
    protocol: &ProtocolConfig,
) -> Result<VariantRuns, ExperimentError> {
    let seeds: Vec<u64> = spec.seeds().collect();
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let env = spec.environment(seed)?;
            run_protocol(&env, protocol)
                .map(|m| (seed, m))
                .map_err(|source| ExperimentError::Protocol { seed, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VariantRuns {
        variant: variant.to_string(),
        runs,
    })
}

/// Runs the configured mechanism over all seeds and writes its artifacts.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<VariantRuns>, ExperimentError> {
    let runs = vec![run_variant(spec, spec.mechanism_tag(), &spec.protocol)?];
    write_artifacts(spec, &runs)?;
    Ok(runs)
}

/// The four heuristic-search variants, in output order.
pub fn ablation_variants() -> [(&'static str, Ablations); 4] {
    let a = |pf, is| Ablations {
        disable_payment_free_absorption: pf,
        disable_iterative_search: is,
    };
    [
        ("full", a(false, false)),
        ("wo_pf", a(true, false)),
        ("wo_is", a(false, true)),
        ("wo_pf_is", a(true, true)),
    ]
}

/// Runs the payment-efficient mechanism with each ablation on matched seeds.
pub fn run_ablation(spec: &ExperimentSpec) -> Result<Vec<VariantRuns>, ExperimentError> {
    let runs = ablation_variants()
        .into_iter()
        .map(|(name, ablations)| {
            let protocol = ProtocolConfig {
                mechanism: Mechanism::PaymentEfficient,
                ablations,
                ..spec.protocol.clone()
            };
            run_variant(spec, name, &protocol)
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_artifacts(spec, &runs)?;
    Ok(runs)
}

pub fn execute(spec: &ExperimentSpec) -> Result<Vec<VariantRuns>, ExperimentError> {
    match spec.mode {
        Mode::Run => run_experiment(spec),
        Mode::Ablate => run_ablation(spec),
    }
}

/// `%.12g`-style formatting: 12 significant digits, trailing zeros trimmed.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub const STEP_HEADER: &str = "step,cum_regret_or_reward,cum_comm_scalars,cum_payment";
pub const EPOCH_HEADER: &str =
    "step,trigger_client,n_participants,round_payment,round_scalars,beta_gap_logratio";
pub const SUMMARY_HEADER: &str =
    "variant,mean_final_regret_or_reward,std,mean_comm,mean_payment,n_seeds";

pub fn step_csv(m: &RunMetrics) -> String {
    let mut out = String::with_capacity(32 * (m.steps.len() + 1));
    out.push_str(STEP_HEADER);
    out.push('\n');
    for s in &m.steps {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.step,
            fmt_sig(s.cum_value),
            s.cum_comm,
            fmt_sig(s.cum_payment)
        ));
    }
    out
}

/// Trigger clients are written 1-based, matching dataset files.
pub fn epoch_csv(m: &RunMetrics) -> String {
    let mut out = String::new();
    out.push_str(EPOCH_HEADER);
    out.push('\n');
    for e in &m.epochs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.step,
            e.trigger_client + 1,
            e.n_participants,
            fmt_sig(e.round_payment),
            e.round_scalars,
            fmt_sig(e.beta_gap_log_ratio)
        ));
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            fmt_sig(r.mean_final),
            fmt_sig(r.std_final),
            fmt_sig(r.mean_comm),
            fmt_sig(r.mean_payment),
            r.n_seeds
        ));
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    let io_err = |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(contents.as_bytes()).map_err(io_err)
}

pub fn step_csv_path(dir: &Path, variant: &str, seed: u64) -> PathBuf {
    dir.join(variant).join(format!("seed_{seed}_steps.csv"))
}

pub fn epoch_csv_path(dir: &Path, variant: &str, seed: u64) -> PathBuf {
    dir.join(variant).join(format!("seed_{seed}_epochs.csv"))
}

pub fn write_artifacts(
    spec: &ExperimentSpec,
    variants: &[VariantRuns],
) -> Result<(), ExperimentError> {
    let dir = &spec.output_dir;
    for v in variants {
        let vdir = dir.join(&v.variant);
        fs::create_dir_all(&vdir).map_err(|source| ExperimentError::Io {
            path: vdir.display().to_string(),
            source,
        })?;
        for (seed, m) in &v.runs {
            if spec.emit.per_step_csv {
                write_file(&step_csv_path(dir, &v.variant, *seed), &step_csv(m))?;
            }
            if spec.emit.epoch_log {
                write_file(&epoch_csv_path(dir, &v.variant, *seed), &epoch_csv(m))?;
            }
        }
    }
    if spec.emit.summary {
        let rows: Vec<_> = variants.iter().map(VariantRuns::summary).collect();
        write_file(&dir.join("summary.csv"), &summary_csv(&rows))?;
    }
    Ok(())
}

/// Whether the runs report pseudo-regret or realized reward.
pub fn value_label(kind: EnvKind) -> &'static str {
    match kind {
        EnvKind::Synthetic => "regret",
        EnvKind::Dataset => "reward",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let spec = RawSpec::default().resolve().unwrap();
        assert_eq!(spec.mode, Mode::Run);
        assert_eq!(spec.source, EnvSource::Synthetic);
        assert_eq!(
            spec.env,
            EnvConfig {
                n_clients: 50,
                horizon: 5000,
                dim: 25,
                pool_size: 25,
                noise_sigma: 0.1,
                seed: 0
            }
        );
        assert_eq!(
            spec.protocol.model,
            ModelParams::new(1.0, 0.1, 0.01).unwrap()
        );
        assert_eq!(spec.protocol.beta, 1.0);
        assert_eq!(spec.protocol.d_c, Threshold::Theoretical);
        assert_eq!(spec.protocol.mechanism, Mechanism::PaymentEfficient);
        assert_eq!(spec.protocol.costs, vec![0.0; 50]);
        assert_eq!(spec.n_seeds, 1);
    }

    fn key_of(r: Result<ExperimentSpec, ExperimentError>) -> String {
        match r {
            Err(ExperimentError::Key { key, .. }) => key,
            other => panic!("expected key error, got {other:?}"),
        }
    }

    #[test]
    fn range_errors_name_the_key() {
        let raw = |f: fn(&mut RawSpec)| {
            let mut r = RawSpec::default();
            f(&mut r);
            r.resolve()
        };
        assert_eq!(key_of(raw(|r| r.beta = Some(1.5))), "beta");
        assert_eq!(key_of(raw(|r| r.n_clients = Some(0))), "N");
        assert_eq!(key_of(raw(|r| r.delta = Some(1.0))), "delta");
        assert_eq!(
            key_of(raw(|r| r.mechanism = Some("vcg".into()))),
            "mechanism"
        );
        assert_eq!(key_of(raw(|r| r.dc = Some("-1".into()))), "dc");
        assert_eq!(key_of(raw(|r| r.costs = Some("1,2".into()))), "costs");
        assert_eq!(key_of(raw(|r| r.env = Some("dataset:".into()))), "env");
    }

    #[test]
    fn costs_parse() {
        assert_eq!(parse_costs("1,1,1", 3).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(parse_costs("2.5", 4).unwrap(), vec![2.5; 4]);
        assert_eq!(parse_costs("1, 2,3", 3).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(parse_costs("1,-2,3", 3).is_err());
    }

    #[test]
    fn toml_rejects_unknown_keys_and_type_mismatch() {
        let ok = RawSpec::from_toml("N = 3\nbeta = 0.5\ncosts = \"1,2,3\"\n").unwrap();
        assert_eq!(ok.n_clients, Some(3));
        assert!(RawSpec::from_toml("gamma = 1\n").is_err());
        assert!(RawSpec::from_toml("N = \"three\"\n").is_err());
    }

    #[test]
    fn overlay_prefers_flags() {
        let file = RawSpec::from_toml("N = 3\nbeta = 0.5\n").unwrap();
        let flags = RawSpec {
            beta: Some(0.7),
            ..RawSpec::default()
        };
        let merged = file.overlay(flags);
        assert_eq!(merged.n_clients, Some(3));
        assert_eq!(merged.beta, Some(0.7));
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(1.5), "1.5");
        assert_eq!(fmt_sig(-2.25), "-2.25");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_sig(123456.789), "123456.789");
        assert_eq!(fmt_sig(1e-7), "1e-7");
        assert_eq!(fmt_sig(2.0f64.sqrt() * 1e13), "1.41421356237e13");
        assert_eq!(fmt_sig(65000.0), "65000");
    }

    #[test]
    fn single_seed_std_is_zero() {
        let spec = RawSpec {
            n_clients: Some(3),
            horizon: Some(50),
            d: Some(2),
            pool_size: Some(3),
            ..RawSpec::default()
        }
        .resolve()
        .unwrap();
        let v = run_variant(&spec, "pe", &spec.protocol).unwrap();
        let row = v.summary();
        assert_eq!(row.n_seeds, 1);
        assert_eq!(row.std_final, 0.0);
    }
}
