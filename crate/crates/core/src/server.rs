//! Server state and the participation mechanisms.
//!
//! When a round is triggered every client reveals its local Gram update `ΔV_i`
//! and the server decides who shares. Two mechanisms are provided:
//!
//! * [`payment_free_select`] pays only in data. A client's data incentive is
//!   the relative growth of its regularized determinant when it receives what
//!   the other participants (plus anything already staged for it) contribute.
//!   Clients whose incentive falls short of their cost are dropped one at a time
//!   until the set is stable.
//! * [`payment_efficient_select`] starts from the payment-free set and buys
//!   extra participation until the shared pool is within a factor `β` of the
//!   all-data determinant, ranking candidates by their marginal determinant
//!   gain and comparing a greedy search against a single-client last resort.
//!
//! All determinants are of `V + λI` and compared in the log domain.

use nalgebra::DMatrix;

use crate::client::ClientState;
use crate::stats::{log_det_reg_matrix, StatsError, SuffStats};

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: SuffStats,
    /// Shared data not yet delivered to each client.
    pub pending_down: Vec<SuffStats>,
}

impl ServerState {
    pub fn new(n_clients: usize, dim: usize) -> Self {
        Self {
            global: SuffStats::zeros(dim),
            pending_down: vec![SuffStats::zeros(dim); n_clients],
        }
    }

    pub fn n_clients(&self) -> usize {
        self.pending_down.len()
    }

    pub fn dim(&self) -> usize {
        self.global.dim()
    }

    /// Aggregates the participants' local deltas, stages them for everyone
    /// else, then delivers every client's staged download.
    ///
    /// Participants have their local deltas cleared. Every client's elapsed
    /// counter is reset by the download, including clients whose download is
    /// zero.
    pub fn commit_exchange(&mut self, participants: &[usize], clients: &mut [ClientState]) {
        assert_eq!(clients.len(), self.n_clients(), "client count mismatch");
        for &i in participants {
            let delta = &clients[i].pending;
            self.global.add_assign(delta);
            for (j, down) in self.pending_down.iter_mut().enumerate() {
                if j != i {
                    down.add_assign(delta);
                }
            }
        }
        for &i in participants {
            clients[i].mark_shared();
        }
        for (client, down) in clients.iter_mut().zip(self.pending_down.iter_mut()) {
            client.synced.add_assign(down);
            client.elapsed = 0;
            down.reset();
        }
    }
}

/// What the clients reveal when a round is triggered.
#[derive(Debug, Clone, PartialEq)]
pub struct Offer {
    /// Each client's unshared Gram update `ΔV_i`.
    pub uploads: Vec<DMatrix<f64>>,
    /// Each client's effective sharing cost this round.
    pub costs: Vec<f64>,
}

impl Offer {
    pub fn from_clients(clients: &[ClientState]) -> Self {
        Self {
            uploads: clients.iter().map(|c| c.pending.v().clone()).collect(),
            costs: clients.iter().map(ClientState::effective_cost).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.uploads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uploads.is_empty()
    }
}

/// Membership over client indices `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClientSet(Vec<bool>);

impl ClientSet {
    pub fn empty(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn full(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn from_members(n: usize, members: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(n);
        for i in members {
            s.insert(i);
        }
        s
    }

    /// Subset encoded by the low `n` bits of `mask`.
    pub fn from_mask(n: usize, mask: u64) -> Self {
        Self((0..n).map(|i| mask >> i & 1 == 1).collect())
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn insert(&mut self, i: usize) {
        self.0[i] = true;
    }

    pub fn remove(&mut self, i: usize) {
        self.0[i] = false;
    }

    pub fn len(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|b| *b)
    }

    pub fn capacity(&self) -> usize {
        self.0.len()
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| i)
    }

    pub fn non_members(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, b)| !**b)
            .map(|(i, _)| i)
    }
}

/// Result of one mechanism invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct IncentiveOutcome {
    /// Participants in ascending id order.
    pub participants: Vec<usize>,
    /// Data incentive of every client evaluated against the final set.
    pub data_incentive: Vec<f64>,
    /// Monetary top-up per client; zero for non-participants.
    pub payment: Vec<f64>,
    pub total_payment: f64,
    pub used_last_resort: bool,
}

impl IncentiveOutcome {
    pub fn participant_set(&self) -> ClientSet {
        ClientSet::from_members(self.payment.len(), self.participants.iter().copied())
    }
}

/// Flags for the heuristic-search ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Ablations {
    /// Skip the data-only participant set and free-rider absorption; every
    /// participant is bought.
    pub disable_payment_free_absorption: bool,
    /// Rank candidates once against the data-incentivized set and never re-rank.
    pub disable_iterative_search: bool,
}

/// Cheapest single client whose addition alone meets the β gap.
#[derive(Debug, Clone, PartialEq)]
pub enum LastResort {
    Available {
        client: usize,
        payment: f64,
    },
    /// No single addition meets β.
    Absent,
}

impl LastResort {
    pub fn cost(&self) -> Option<f64> {
        match self {
            LastResort::Available { payment, .. } => Some(*payment),
            LastResort::Absent => None,
        }
    }
}

/// Frozen snapshot of one triggered round: the offer, the server state and
/// every client's current Gram matrix, with the log-determinants that do not
/// depend on the candidate set precomputed.
#[derive(Debug)]
pub struct Valuation<'a> {
    offer: &'a Offer,
    server: &'a ServerState,
    client_vs: &'a [DMatrix<f64>],
    lambda: f64,
    own_log_det: Vec<f64>,
    all_log_det: f64,
}

impl<'a> Valuation<'a> {
    pub fn new(
        offer: &'a Offer,
        server: &'a ServerState,
        client_vs: &'a [DMatrix<f64>],
        lambda: f64,
    ) -> Result<Self, StatsError> {
        let n = offer.len();
        assert_eq!(offer.costs.len(), n, "offer cost count mismatch");
        assert_eq!(client_vs.len(), n, "client covariance count mismatch");
        assert_eq!(server.n_clients(), n, "server client count mismatch");
        let own_log_det = client_vs
            .iter()
            .map(|v| log_det_reg_matrix(v, lambda))
            .collect::<Result<Vec<_>, _>>()?;
        let mut v = Self {
            offer,
            server,
            client_vs,
            lambda,
            own_log_det,
            all_log_det: 0.0,
        };
        v.all_log_det = log_det_reg_matrix(&v.pooled(&ClientSet::full(n)), lambda)?;
        Ok(v)
    }

    pub fn n_clients(&self) -> usize {
        self.offer.len()
    }

    pub fn cost(&self, i: usize) -> f64 {
        self.offer.costs[i]
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `V_g(S) = V_g + Σ_{j∈S} ΔV_j`, summed in ascending id order.
    pub fn pooled(&self, set: &ClientSet) -> DMatrix<f64> {
        let mut v = self.server.global.v().clone();
        for j in set.members() {
            v += &self.offer.uploads[j];
        }
        v
    }

    /// `log det(V_g(S) + λI) − log det(V_g(all) + λI)`.
    pub fn gap_log_ratio(&self, set: &ClientSet) -> Result<f64, StatsError> {
        Ok(log_det_reg_matrix(&self.pooled(set), self.lambda)? - self.all_log_det)
    }

    pub fn meets_beta(&self, set: &ClientSet, beta: f64) -> Result<bool, StatsError> {
        Ok(self.gap_log_ratio(set)? >= beta.ln())
    }

    /// `det(D + V_i + λI) / det(V_i + λI) − 1` where `D` is the other members'
    /// uploads plus whatever is staged for client `i`.
    pub fn data_incentive(&self, i: usize, set: &ClientSet) -> Result<f64, StatsError> {
        let mut m = self.client_vs[i].clone();
        m += self.server.pending_down[i].v();
        for j in set.members().filter(|&j| j != i) {
            m += &self.offer.uploads[j];
        }
        let gain = log_det_reg_matrix(&m, self.lambda)? - self.own_log_det[i];
        Ok(gain.exp_m1().max(0.0))
    }

    /// `log(det(ΔV_i + V_g(S) + λI) / det(V_g(S) + λI))`.
    pub fn log_marginal_contribution(&self, i: usize, set: &ClientSet) -> Result<f64, StatsError> {
        let mut base = set.clone();
        base.remove(i);
        let v = self.pooled(&base);
        let with = &v + &self.offer.uploads[i];
        Ok(log_det_reg_matrix(&with, self.lambda)? - log_det_reg_matrix(&v, self.lambda)?)
    }

    /// Marginal determinant gain of adding client `i` to `set`; at least 1.
    pub fn marginal_contribution(&self, i: usize, set: &ClientSet) -> Result<f64, StatsError> {
        Ok(self.log_marginal_contribution(i, set)?.exp().max(1.0))
    }

    /// `candidates` sorted by marginal contribution against `set`, largest
    /// first, ties to the lower id.
    fn rank(&self, candidates: &[usize], set: &ClientSet) -> Result<Vec<usize>, StatsError> {
        let mut scored = candidates
            .iter()
            .map(|&i| Ok((i, self.log_marginal_contribution(i, set)?)))
            .collect::<Result<Vec<_>, StatsError>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored.into_iter().map(|(i, _)| i).collect())
    }

    /// Payment needed for `i` to break even when `set` is committed.
    fn top_up(&self, i: usize, set: &ClientSet) -> Result<f64, StatsError> {
        Ok((self.cost(i) - self.data_incentive(i, set)?).max(0.0))
    }

    /// Builds the outcome for `set`, paying only the clients in `bought`.
    fn outcome(
        &self,
        set: &ClientSet,
        bought: &[usize],
        used_last_resort: bool,
    ) -> Result<IncentiveOutcome, StatsError> {
        let n = self.n_clients();
        let data_incentive = (0..n)
            .map(|i| self.data_incentive(i, set))
            .collect::<Result<Vec<_>, _>>()?;
        let mut payment = vec![0.0; n];
        for &i in bought {
            payment[i] = (self.cost(i) - data_incentive[i]).max(0.0);
        }
        Ok(IncentiveOutcome {
            participants: set.members().collect(),
            data_incentive,
            total_payment: payment.iter().sum(),
            payment,
            used_last_resort,
        })
    }
}

/// Largest set in which every member's data incentive covers its cost.
///
/// Starts from everyone and repeatedly removes the lowest-id member that is
/// short, rescanning after each removal.
pub fn payment_free_set(val: &Valuation<'_>) -> Result<ClientSet, StatsError> {
    let n = val.n_clients();
    let mut set = ClientSet::full(n);
    'scan: while !set.is_empty() {
        for i in set.members().collect::<Vec<_>>() {
            if val.data_incentive(i, &set)? < val.cost(i) {
                set.remove(i);
                continue 'scan;
            }
        }
        break;
    }
    Ok(set)
}

pub fn payment_free_select(val: &Valuation<'_>) -> Result<IncentiveOutcome, StatsError> {
    let set = payment_free_set(val)?;
    val.outcome(&set, &[], false)
}

/// Data-incentivized set, ranked candidate list, and the last resort.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchPlan {
    pub data_set: ClientSet,
    /// Candidates that cannot meet β alone, in contribution order.
    pub invalid: Vec<usize>,
    pub last_resort: LastResort,
}

/// Ranks the clients outside the data-incentivized set and splits the list at
/// the first client whose sole addition meets β.
pub fn plan_search(
    val: &Valuation<'_>,
    data_set: ClientSet,
    beta: f64,
) -> Result<SearchPlan, StatsError> {
    let outside: Vec<usize> = data_set.non_members().collect();
    let ranked = val.rank(&outside, &data_set)?;
    for (pos, &i) in ranked.iter().enumerate() {
        let mut with = data_set.clone();
        with.insert(i);
        if val.meets_beta(&with, beta)? {
            let payment = val.top_up(i, &with)?;
            return Ok(SearchPlan {
                invalid: ranked[..pos].to_vec(),
                last_resort: LastResort::Available { client: i, payment },
                data_set,
            });
        }
    }
    Ok(SearchPlan {
        invalid: ranked,
        last_resort: LastResort::Absent,
        data_set,
    })
}

fn last_resort_outcome(
    val: &Valuation<'_>,
    data_set: &ClientSet,
    last_resort: &LastResort,
) -> Result<IncentiveOutcome, StatsError> {
    match *last_resort {
        LastResort::Available { client, .. } => {
            let mut set = data_set.clone();
            set.insert(client);
            val.outcome(&set, &[client], true)
        }
        // The search only exhausts its list without meeting β when a last
        // resort exists; buying everyone is the β = 1 fallback.
        LastResort::Absent => {
            let set = ClientSet::full(val.n_clients());
            let bought: Vec<usize> = data_set.non_members().collect();
            val.outcome(&set, &bought, false)
        }
    }
}

/// Greedy search over the invalid list.
///
/// Each round buys the top remaining contributor (re-ranked against the
/// current set unless iterative search is disabled), then absorbs every
/// outsider whose data incentive now covers its cost. The search gives up on
/// the first round whose total payment exceeds the last resort, and succeeds
/// on the first round that meets β.
pub fn heuristic_search(
    val: &Valuation<'_>,
    plan: &SearchPlan,
    beta: f64,
    ablations: Ablations,
) -> Result<IncentiveOutcome, StatsError> {
    let mut set = plan.data_set.clone();
    let mut remaining = plan.invalid.clone();
    let mut bought = Vec::new();
    let limit = plan.last_resort.cost();

    while !remaining.is_empty() {
        if !ablations.disable_iterative_search {
            remaining = val.rank(&remaining, &set)?;
        }
        let top = remaining.remove(0);
        set.insert(top);
        bought.push(top);

        if !ablations.disable_payment_free_absorption {
            absorb_free_riders(val, &mut set)?;
            remaining.retain(|&i| !set.contains(i));
        }

        let total: f64 = bought
            .iter()
            .map(|&i| val.top_up(i, &set))
            .sum::<Result<f64, _>>()?;
        if limit.is_some_and(|cap| total > cap) {
            return last_resort_outcome(val, &plan.data_set, &plan.last_resort);
        }
        if val.meets_beta(&set, beta)? {
            return val.outcome(&set, &bought, false);
        }
    }
    last_resort_outcome(val, &plan.data_set, &plan.last_resort)
}

/// Adds outsiders whose data incentive covers their cost until none is left.
fn absorb_free_riders(val: &Valuation<'_>, set: &mut ClientSet) -> Result<(), StatsError> {
    loop {
        let mut grew = false;
        for j in set.non_members().collect::<Vec<_>>() {
            if val.data_incentive(j, set)? >= val.cost(j) {
                set.insert(j);
                grew = true;
            }
        }
        if !grew {
            return Ok(());
        }
    }
}

/// β-constrained selection with monetary top-ups.
pub fn payment_efficient_select(
    val: &Valuation<'_>,
    beta: f64,
    ablations: Ablations,
) -> Result<IncentiveOutcome, StatsError> {
    assert!((0.0..=1.0).contains(&beta), "beta must lie in [0, 1]");
    let data_set = if ablations.disable_payment_free_absorption {
        ClientSet::empty(val.n_clients())
    } else {
        payment_free_set(val)?
    };
    if val.meets_beta(&data_set, beta)? {
        return val.outcome(&data_set, &[], false);
    }
    let plan = plan_search(val, data_set, beta)?;
    heuristic_search(val, &plan, beta, ablations)
}
