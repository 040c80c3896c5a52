//! The bandit world: active-client schedule, arm pools and rewards.
//!
//! Two sources are supported. Synthetic environments draw `θ*` and every arm
//! uniformly on the unit sphere and the active client uniformly from `[N]`.
//! Dataset environments replay a logged file. Both are materialized eagerly,
//! so every accessor is a pure read and repeated calls return identical data.
//!
//! Synthetic randomness is split into independent ChaCha streams keyed by
//! round: stream 0 draws `θ*`, stream `t` draws round `t` (client, arms, and
//! per-arm noise). Noise is therefore committed per `(round, arm)` before any
//! policy runs.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("step {t} out of range 1..={horizon}")]
    StepOutOfRange { t: usize, horizon: usize },
    #[error("arm index {index} out of range for a pool of {pool}")]
    ArmOutOfRange { index: usize, pool: usize },
    #[error("expected rewards are unavailable for logged data")]
    UnsupportedMode,
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnvConfig {
    pub n_clients: usize,
    pub horizon: usize,
    pub dim: usize,
    pub pool_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        for (name, v) in [
            ("n_clients", self.n_clients),
            ("horizon", self.horizon),
            ("dim", self.dim),
            ("pool_size", self.pool_size),
        ] {
            if v == 0 {
                return Err(EnvError::InvalidConfig(format!(
                    "{name} must be at least 1"
                )));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(EnvError::InvalidConfig(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// One round as seen by the active client. `step` is 1-based, `active_client`
/// is a 0-based client index.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundObservation<'a> {
    pub step: usize,
    pub active_client: usize,
    pub arms: &'a [DVector<f64>],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub theta_star: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Synthetic,
    Dataset,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvKind::Synthetic => f.write_str("synthetic"),
            EnvKind::Dataset => f.write_str("dataset"),
        }
    }
}

#[derive(Debug, Clone)]
struct Round {
    client: usize,
    arms: Vec<DVector<f64>>,
    /// Realized reward per arm: `xᵀθ* + η` (synthetic) or the logged value.
    rewards: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Environment {
    n_clients: usize,
    dim: usize,
    pool_size: usize,
    truth: Option<GroundTruth>,
    rounds: Vec<Round>,
}

fn unit_sphere(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    loop {
        let v: DVector<f64> = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn round_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Environment {
    /// Synthetic environment, a pure function of `cfg`.
    pub fn gen_synthetic(cfg: &EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let theta_star = unit_sphere(&mut round_rng(cfg.seed, 0), cfg.dim);
        let noise = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
        let rounds = (1..=cfg.horizon)
            .map(|t| {
                let mut rng = round_rng(cfg.seed, t as u64);
                let client = rng.random_range(0..cfg.n_clients);
                let arms: Vec<_> = (0..cfg.pool_size)
                    .map(|_| unit_sphere(&mut rng, cfg.dim))
                    .collect();
                let rewards = arms
                    .iter()
                    .map(|x| {
                        let eta = if cfg.noise_sigma > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                        x.dot(&theta_star) + eta
                    })
                    .collect();
                Round {
                    client,
                    arms,
                    rewards,
                }
            })
            .collect();
        Ok(Self {
            n_clients: cfg.n_clients,
            dim: cfg.dim,
            pool_size: cfg.pool_size,
            truth: Some(GroundTruth { theta_star }),
            rounds,
        })
    }

    /// Parses a logged dataset.
    ///
    /// Format: header `N T d K`, then for each round a line `t client_id`
    /// (client ids 1-based) followed by `K` lines `f_1 .. f_d reward`.
    /// Blank lines are ignored.
    pub fn parse_dataset(text: &str) -> Result<Self, EnvError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());

        let (hline, header) = lines.next().ok_or(EnvError::Parse {
            line: 1,
            message: "missing header `N T d K`".into(),
        })?;
        let header = parse_usizes(hline, header)?;
        let [n, t_total, d, k] = header[..] else {
            return Err(EnvError::Parse {
                line: hline,
                message: format!("header needs 4 fields `N T d K`, found {}", header.len()),
            });
        };
        if n == 0 || t_total == 0 || d == 0 || k == 0 {
            return Err(EnvError::Parse {
                line: hline,
                message: "header counts must all be at least 1".into(),
            });
        }

        let mut rounds = Vec::with_capacity(t_total);
        let mut last_line = hline;
        for expected_t in 1..=t_total {
            let (line, text) = lines.next().ok_or(EnvError::Parse {
                line: last_line + 1,
                message: format!("truncated: round {expected_t} of {t_total} missing"),
            })?;
            let fields = parse_usizes(line, text)?;
            let [t, client] = fields[..] else {
                return Err(EnvError::Parse {
                    line,
                    message: "round line needs `t client_id`".into(),
                });
            };
            if t != expected_t {
                return Err(EnvError::Parse {
                    line,
                    message: format!("expected round {expected_t}, found {t}"),
                });
            }
            if client == 0 || client > n {
                return Err(EnvError::Parse {
                    line,
                    message: format!("client id {client} outside 1..={n}"),
                });
            }
            let mut arms = Vec::with_capacity(k);
            let mut rewards = Vec::with_capacity(k);
            for _ in 0..k {
                let (line, text) = lines.next().ok_or(EnvError::Parse {
                    line: line + 1,
                    message: format!("truncated: round {t} has fewer than {k} arms"),
                })?;
                let vals = parse_f64s(line, text)?;
                if vals.len() != d + 1 {
                    return Err(EnvError::Parse {
                        line,
                        message: format!(
                            "expected {} values (d features + reward), found {}",
                            d + 1,
                            vals.len()
                        ),
                    });
                }
                arms.push(DVector::from_column_slice(&vals[..d]));
                rewards.push(vals[d]);
                last_line = line;
            }
            rounds.push(Round {
                client: client - 1,
                arms,
                rewards,
            });
        }
        if let Some((line, _)) = lines.next() {
            return Err(EnvError::Parse {
                line,
                message: format!("trailing content after {t_total} rounds"),
            });
        }
        Ok(Self {
            n_clients: n,
            dim: d,
            pool_size: k,
            truth: None,
            rounds,
        })
    }

    pub fn load_dataset(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| EnvError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_dataset(&text)
    }

    pub fn kind(&self) -> EnvKind {
        if self.truth.is_some() {
            EnvKind::Synthetic
        } else {
            EnvKind::Dataset
        }
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn horizon(&self) -> usize {
        self.rounds.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    fn round(&self, t: usize) -> Result<&Round, EnvError> {
        if t == 0 || t > self.rounds.len() {
            return Err(EnvError::StepOutOfRange {
                t,
                horizon: self.rounds.len(),
            });
        }
        Ok(&self.rounds[t - 1])
    }

    pub fn step(&self, t: usize) -> Result<RoundObservation<'_>, EnvError> {
        let r = self.round(t)?;
        Ok(RoundObservation {
            step: t,
            active_client: r.client,
            arms: &r.arms,
        })
    }

    /// Realized reward of arm `arm` (0-based) at step `t`.
    pub fn draw_reward(&self, t: usize, arm: usize) -> Result<f64, EnvError> {
        let r = self.round(t)?;
        r.rewards.get(arm).copied().ok_or(EnvError::ArmOutOfRange {
            index: arm,
            pool: r.arms.len(),
        })
    }

    /// `xᵀθ*` for arm `arm` at step `t`.
    pub fn expected_reward(&self, t: usize, arm: usize) -> Result<f64, EnvError> {
        let truth = self.truth.as_ref().ok_or(EnvError::UnsupportedMode)?;
        let r = self.round(t)?;
        let x = r.arms.get(arm).ok_or(EnvError::ArmOutOfRange {
            index: arm,
            pool: r.arms.len(),
        })?;
        Ok(x.dot(&truth.theta_star))
    }

    /// `max_{x ∈ A_t} xᵀθ*`.
    pub fn best_expected(&self, t: usize) -> Result<f64, EnvError> {
        let truth = self.truth.as_ref().ok_or(EnvError::UnsupportedMode)?;
        let r = self.round(t)?;
        Ok(r.arms
            .iter()
            .map(|x| x.dot(&truth.theta_star))
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

fn parse_usizes(line: usize, text: &str) -> Result<Vec<usize>, EnvError> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>().map_err(|_| EnvError::Parse {
                line,
                message: format!("expected a non-negative integer, found `{tok}`"),
            })
        })
        .collect()
}

fn parse_f64s(line: usize, text: &str) -> Result<Vec<f64>, EnvError> {
    text.split_whitespace()
        .map(|tok| match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(EnvError::Parse {
                line,
                message: format!("expected a finite decimal number, found `{tok}`"),
            }),
        })
        .collect()
}
