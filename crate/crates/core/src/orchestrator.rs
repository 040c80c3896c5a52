//! End-to-end protocol runner and metering.
//!
//! Each step the active client plays its UCB arm and updates its statistics.
//! If its event trigger fires, every client uploads `ΔV`, the configured
//! mechanism picks the participants, participants upload `Δb`, and the server
//! sends every client its staged download. Regret (or reward), transferred
//! scalars and payments are accumulated per step.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::client::{ClientError, ClientState};
use crate::environment::{EnvError, EnvKind, Environment};
use crate::server::{
    payment_efficient_select, payment_free_select, Ablations, IncentiveOutcome, Offer, ServerState,
    Valuation,
};
use crate::stats::{log_det_reg, ModelParams, StatsError, SuffStats};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid protocol config: {0}")]
    Config(String),
    #[error("step {step}: {source}")]
    Env {
        step: usize,
        #[source]
        source: EnvError,
    },
    #[error("step {step}: {source}")]
    Client {
        step: usize,
        #[source]
        source: ClientError,
    },
    #[error("step {step}: {source}")]
    Stats {
        step: usize,
        #[source]
        source: StatsError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    PaymentFree,
    PaymentEfficient,
    /// Everyone shares at every triggered round, nobody is paid.
    DislinucbBaseline,
    /// The trigger never fires.
    NoCommunication,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Threshold {
    Explicit(f64),
    /// [`theoretical_dc`] evaluated for the run's horizon, size and β.
    Theoretical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub mechanism: Mechanism,
    pub beta: f64,
    pub d_c: Threshold,
    pub model: ModelParams,
    /// Per-client base sharing cost.
    pub costs: Vec<f64>,
    pub ablations: Ablations,
    /// Exempt clients with `ΔV = 0` from the valuation-upload count.
    pub skip_zero_uploads: bool,
}

impl ProtocolConfig {
    pub fn validate(&self, n_clients: usize) -> Result<(), ProtocolError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(ProtocolError::Config(format!(
                "beta {} outside [0, 1]",
                self.beta
            )));
        }
        if self.costs.len() != n_clients {
            return Err(ProtocolError::Config(format!(
                "{} costs for {} clients",
                self.costs.len(),
                n_clients
            )));
        }
        if let Some(c) = self.costs.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(ProtocolError::Config(format!(
                "cost {c} is not a finite non-negative number"
            )));
        }
        if let Threshold::Explicit(d) = self.d_c {
            if !(d.is_finite() && d >= 0.0) {
                return Err(ProtocolError::Config(format!(
                    "D_c {d} must be finite and non-negative"
                )));
            }
        }
        self.model
            .validate()
            .map_err(|e| ProtocolError::Config(e.to_string()))
    }
}

/// Communication threshold that bounds the number of epochs:
/// `T/(N²d log T) − sqrt(T²/(N²dR log T))·log β` with
/// `R = ⌈d log(1 + T/(λd))⌉`.
pub fn theoretical_dc(
    horizon: usize,
    n_clients: usize,
    dim: usize,
    lambda: f64,
    beta: f64,
) -> Result<f64, ProtocolError> {
    if horizon < 2 {
        return Err(ProtocolError::Config("theoretical D_c needs T >= 2".into()));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(ProtocolError::Config(format!(
            "theoretical D_c needs beta in (0, 1], got {beta}"
        )));
    }
    if lambda.is_nan() || lambda <= 0.0 || n_clients == 0 || dim == 0 {
        return Err(ProtocolError::Config(
            "theoretical D_c needs lambda > 0, N >= 1, d >= 1".into(),
        ));
    }
    let t = horizon as f64;
    let n = n_clients as f64;
    let d = dim as f64;
    let log_t = t.ln();
    let r = (d * (1.0 + t / (lambda * d)).ln()).ceil();
    let base = t / (n * n * d * log_t);
    if beta == 1.0 {
        return Ok(base);
    }
    Ok(base - (t * t / (n * n * d * r * log_t)).sqrt() * beta.ln())
}

/// Scalars moved in one round when every client uploads `ΔV`.
pub fn round_comm_cost(n_clients: usize, n_participants: usize, dim: usize) -> u64 {
    round_comm_cost_counted(n_clients, n_clients, n_participants, dim)
}

/// `uploaders·d² + participants·d + N·(d² + d)`.
pub fn round_comm_cost_counted(
    n_clients: usize,
    n_uploaders: usize,
    n_participants: usize,
    dim: usize,
) -> u64 {
    let (n, u, p, d) = (
        n_clients as u64,
        n_uploaders as u64,
        n_participants as u64,
        dim as u64,
    );
    u * d * d + p * d + n * (d * d + d)
}

/// Cumulative meters after one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Pseudo-regret (synthetic) or realized reward (dataset).
    pub cum_value: f64,
    pub cum_comm: u64,
    pub cum_payment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub step: usize,
    /// 0-based id of the client whose trigger fired.
    pub trigger_client: usize,
    pub n_participants: usize,
    pub round_payment: f64,
    pub round_scalars: u64,
    /// `log det(V_g + λI) − log det(Ṽ + λI)` after the exchange.
    pub beta_gap_log_ratio: f64,
    /// Smallest `data incentive + payment − cost` over participants; `None`
    /// when nobody participated or the baseline skipped valuation.
    pub min_ir_slack: Option<f64>,
    pub used_last_resort: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub kind: EnvKind,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Arm index chosen at each step.
    pub arms: Vec<usize>,
    pub d_c: f64,
}

impl RunMetrics {
    pub fn final_value(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cum_value)
    }

    pub fn final_comm(&self) -> u64 {
        self.steps.last().map_or(0, |s| s.cum_comm)
    }

    pub fn final_payment(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cum_payment)
    }
}

/// What happened in one call to [`ProtocolRun::advance`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepEvent {
    pub step: usize,
    pub client: usize,
    pub arm: usize,
    pub outcome: Option<IncentiveOutcome>,
}

/// A protocol execution that can be stepped and inspected.
#[derive(Debug)]
pub struct ProtocolRun<'e> {
    env: &'e Environment,
    cfg: ProtocolConfig,
    d_c: f64,
    clients: Vec<ClientState>,
    server: ServerState,
    oracle: SuffStats,
    next_step: usize,
    metrics: RunMetrics,
}

impl<'e> ProtocolRun<'e> {
    pub fn new(env: &'e Environment, cfg: ProtocolConfig) -> Result<Self, ProtocolError> {
        let n = env.n_clients();
        let d = env.dim();
        cfg.validate(n)?;
        let d_c = match cfg.d_c {
            Threshold::Explicit(v) => v,
            Threshold::Theoretical => {
                theoretical_dc(env.horizon(), n, d, cfg.model.lambda, cfg.beta)?
            }
        };
        let clients = cfg
            .costs
            .iter()
            .enumerate()
            .map(|(i, &c)| ClientState::new(i, d, c))
            .collect();
        Ok(Self {
            env,
            d_c,
            clients,
            server: ServerState::new(n, d),
            oracle: SuffStats::zeros(d),
            next_step: 1,
            metrics: RunMetrics {
                kind: env.kind(),
                steps: Vec::with_capacity(env.horizon()),
                epochs: Vec::new(),
                arms: Vec::with_capacity(env.horizon()),
                d_c,
            },
            cfg,
        })
    }

    pub fn d_c(&self) -> f64 {
        self.d_c
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    /// All data observed so far, `Ṽ_t = Σ_s x_s x_sᵀ`.
    pub fn oracle_covariance(&self) -> &SuffStats {
        &self.oracle
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn is_done(&self) -> bool {
        self.next_step > self.env.horizon()
    }

    /// Executes the next step; `None` once the horizon is exhausted.
    pub fn advance(&mut self) -> Result<Option<StepEvent>, ProtocolError> {
        if self.is_done() {
            return Ok(None);
        }
        let t = self.next_step;
        let env_err = |source| ProtocolError::Env { step: t, source };
        let client_err = |source| ProtocolError::Client { step: t, source };

        let obs = self.env.step(t).map_err(env_err)?;
        let i = obs.active_client;
        let arm = self.clients[i]
            .select_arm(obs.arms, &self.cfg.model)
            .map_err(client_err)?;
        let x = &obs.arms[arm];
        let y = self.env.draw_reward(t, arm).map_err(env_err)?;
        self.clients[i].observe(x, y).map_err(client_err)?;
        self.oracle
            .add_observation(x, y)
            .map_err(|source| ProtocolError::Stats { step: t, source })?;

        let value = match self.env.kind() {
            EnvKind::Synthetic => {
                self.env.best_expected(t).map_err(env_err)?
                    - self.env.expected_reward(t, arm).map_err(env_err)?
            }
            EnvKind::Dataset => y,
        };
        let prev = self.metrics.steps.last().copied().unwrap_or(StepRecord {
            step: 0,
            cum_value: 0.0,
            cum_comm: 0,
            cum_payment: 0.0,
        });

        let fires = self.cfg.mechanism != Mechanism::NoCommunication
            && self.clients[i]
                .trigger_fires(self.d_c, self.cfg.model.lambda)
                .map_err(client_err)?;
        let outcome = if fires {
            Some(self.exchange(t, i)?)
        } else {
            None
        };
        let (round_comm, round_pay) = match self.metrics.epochs.last() {
            Some(e) if fires => (e.round_scalars, e.round_payment),
            _ => (0, 0.0),
        };

        self.metrics.steps.push(StepRecord {
            step: t,
            cum_value: prev.cum_value + value,
            cum_comm: prev.cum_comm + round_comm,
            cum_payment: prev.cum_payment + round_pay,
        });
        self.metrics.arms.push(arm);
        self.next_step += 1;
        Ok(Some(StepEvent {
            step: t,
            client: i,
            arm,
            outcome,
        }))
    }

    fn exchange(&mut self, t: usize, trigger: usize) -> Result<IncentiveOutcome, ProtocolError> {
        let stats_err = |source| ProtocolError::Stats { step: t, source };
        let n = self.clients.len();
        let offer = Offer::from_clients(&self.clients);
        let outcome = match self.cfg.mechanism {
            Mechanism::DislinucbBaseline | Mechanism::NoCommunication => IncentiveOutcome {
                participants: (0..n).collect(),
                data_incentive: vec![0.0; n],
                payment: vec![0.0; n],
                total_payment: 0.0,
                used_last_resort: false,
            },
            Mechanism::PaymentFree | Mechanism::PaymentEfficient => {
                let client_vs: Vec<DMatrix<f64>> =
                    self.clients.iter().map(|c| c.synced.v().clone()).collect();
                let val = Valuation::new(&offer, &self.server, &client_vs, self.cfg.model.lambda)
                    .map_err(stats_err)?;
                if self.cfg.mechanism == Mechanism::PaymentFree {
                    payment_free_select(&val)
                } else {
                    payment_efficient_select(&val, self.cfg.beta, self.cfg.ablations)
                }
                .map_err(stats_err)?
            }
        };
        let min_ir_slack = match self.cfg.mechanism {
            Mechanism::DislinucbBaseline | Mechanism::NoCommunication => None,
            _ => outcome
                .participants
                .iter()
                .map(|&p| outcome.data_incentive[p] + outcome.payment[p] - offer.costs[p])
                .reduce(f64::min),
        };

        let uploaders = if self.cfg.skip_zero_uploads {
            offer
                .uploads
                .iter()
                .filter(|v| v.iter().any(|x| *x != 0.0))
                .count()
        } else {
            n
        };
        let round_scalars =
            round_comm_cost_counted(n, uploaders, outcome.participants.len(), self.env.dim());

        self.server
            .commit_exchange(&outcome.participants, &mut self.clients);

        let lambda = self.cfg.model.lambda;
        let beta_gap_log_ratio = log_det_reg(&self.server.global, lambda).map_err(stats_err)?
            - log_det_reg(&self.oracle, lambda).map_err(stats_err)?;

        self.metrics.epochs.push(EpochRecord {
            step: t,
            trigger_client: trigger,
            n_participants: outcome.participants.len(),
            round_payment: outcome.total_payment,
            round_scalars,
            beta_gap_log_ratio,
            min_ir_slack,
            used_last_resort: outcome.used_last_resort,
        });
        Ok(outcome)
    }

    pub fn finish(mut self) -> Result<RunMetrics, ProtocolError> {
        while self.advance()?.is_some() {}
        Ok(self.metrics)
    }
}

/// Runs the protocol over the full horizon.
pub fn run_protocol(env: &Environment, cfg: &ProtocolConfig) -> Result<RunMetrics, ProtocolError> {
    ProtocolRun::new(env, cfg.clone())?.finish()
}
