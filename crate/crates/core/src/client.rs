//! Per-client protocol state.

use nalgebra::DVector;
use thiserror::Error;

use crate::stats::{log_det_reg, ModelParams, StatsError, SuffStats, UcbScorer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("empty arm set")]
    EmptyArms,
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Everything this client knows: last server sync plus its own unshared data.
    pub synced: SuffStats,
    /// Local data not yet shared with the server.
    pub pending: SuffStats,
    /// Steps since this client last communicated.
    pub elapsed: u64,
    /// Cost of sharing when there is something to share.
    pub base_cost: f64,
}

impl ClientState {
    pub fn new(id: usize, dim: usize, base_cost: f64) -> Self {
        Self {
            id,
            synced: SuffStats::zeros(dim),
            pending: SuffStats::zeros(dim),
            elapsed: 0,
            base_cost,
        }
    }

    /// Sharing cost this round: zero when there is no local update.
    pub fn effective_cost(&self) -> f64 {
        if self.pending.gram_is_zero() {
            0.0
        } else {
            self.base_cost
        }
    }

    /// Index of the arm with the highest UCB score; ties go to the lowest index.
    pub fn select_arm(&self, arms: &[DVector<f64>], p: &ModelParams) -> Result<usize, ClientError> {
        if arms.is_empty() {
            return Err(ClientError::EmptyArms);
        }
        let scorer = UcbScorer::new(&self.synced, p)?;
        let mut best = (0, f64::NEG_INFINITY);
        for (k, x) in arms.iter().enumerate() {
            let s = scorer.score(x)?;
            if s > best.1 {
                best = (k, s);
            }
        }
        Ok(best.0)
    }

    pub fn observe(&mut self, x: &DVector<f64>, y: f64) -> Result<(), ClientError> {
        // validate before touching either copy so a rejection leaves no trace
        let mut synced = self.synced.clone();
        synced.add_observation(x, y)?;
        self.pending.add_observation(x, y)?;
        self.synced = synced;
        self.elapsed += 1;
        Ok(())
    }

    /// `Δt · log(det(V + λI) / det(V − ΔV + λI)) > D_c`.
    pub fn trigger_fires(&self, d_c: f64, lambda: f64) -> Result<bool, ClientError> {
        if self.elapsed == 0 || self.pending.gram_is_zero() {
            return Ok(false);
        }
        let base = self.synced.subtracted(&self.pending);
        let gain = log_det_reg(&self.synced, lambda)? - log_det_reg(&base, lambda)?;
        Ok(self.elapsed as f64 * gain > d_c)
    }

    /// Merges a server download; every download resets `elapsed`.
    pub fn apply_download(&mut self, dv: &SuffStats) -> Result<(), ClientError> {
        if !dv.gram_is_zero() {
            dv.ensure_psd()?;
        }
        self.synced.add_assign(dv);
        self.elapsed = 0;
        Ok(())
    }

    /// Clears local deltas after the client's upload is accepted.
    pub fn mark_shared(&mut self) {
        self.pending.reset();
        self.elapsed = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_row_slice(&[x])
    }

    #[test]
    fn effective_cost_indicator() {
        let mut c = ClientState::new(0, 2, 100.0);
        assert_eq!(c.effective_cost(), 0.0);
        c.observe(&DVector::from_row_slice(&[0.6, 0.8]), 1.0)
            .unwrap();
        assert_eq!(c.effective_cost(), 100.0);
        c.base_cost = 0.0;
        assert_eq!(c.effective_cost(), 0.0);
    }

    #[test]
    fn cold_start_picks_longest_arm_lowest_index() {
        let p = ModelParams::new(1.0, 1.0, 0.1).unwrap();
        let c = ClientState::new(0, 2, 0.0);
        let arms = vec![
            DVector::from_row_slice(&[0.5, 0.0]),
            DVector::from_row_slice(&[0.0, 1.0]),
            DVector::from_row_slice(&[1.0, 0.0]),
        ];
        assert_eq!(c.select_arm(&arms, &p).unwrap(), 1);
        assert_eq!(c.select_arm(&arms[..1], &p).unwrap(), 0);
        assert_eq!(c.select_arm(&[], &p), Err(ClientError::EmptyArms));
    }

    #[test]
    fn scalar_selection() {
        // V=[3], b=[6]: scores 3.2239 for [1] and 0.2239 for [-1]
        let p = ModelParams::new(1.0, 1.0, 0.1).unwrap();
        let mut c = ClientState::new(0, 1, 0.0);
        c.synced = SuffStats::from_parts(DMatrix::from_element(1, 1, 3.0), v1(6.0)).unwrap();
        assert_eq!(c.select_arm(&[v1(-1.0), v1(1.0)], &p).unwrap(), 1);
        assert_eq!(c.select_arm(&[v1(1.0), v1(-1.0)], &p).unwrap(), 0);
    }

    #[test]
    fn observe_updates_both_copies() {
        let mut c = ClientState::new(0, 1, 0.0);
        c.observe(&v1(0.0), 5.0).unwrap();
        assert!(c.synced.gram_is_zero());
        assert_eq!(c.elapsed, 1);
        c.observe(&v1(2.0), 3.0).unwrap();
        assert_eq!(c.synced.v()[(0, 0)], 4.0);
        assert_eq!(c.synced.b()[0], 6.0);
        assert_eq!(c.pending.v()[(0, 0)], 4.0);
        assert_eq!(c.pending.b()[0], 6.0);
        assert_eq!(c.elapsed, 2);
        assert!(c.observe(&v1(f64::NAN), 1.0).is_err());
        assert!(c.observe(&v1(1.0), f64::INFINITY).is_err());
        assert_eq!(c.synced.v()[(0, 0)], 4.0);
    }

    #[test]
    fn observation_order_commutes_on_gram() {
        let x1 = DVector::from_row_slice(&[0.5, -1.0]);
        let x2 = DVector::from_row_slice(&[2.0, 0.25]);
        let mut a = ClientState::new(0, 2, 0.0);
        let mut b = ClientState::new(0, 2, 0.0);
        a.observe(&x1, 1.0).unwrap();
        a.observe(&x2, 2.0).unwrap();
        b.observe(&x2, 2.0).unwrap();
        b.observe(&x1, 1.0).unwrap();
        assert_eq!(a.synced, b.synced);
    }

    #[test]
    fn trigger_cases() {
        let mut c = ClientState::new(0, 1, 0.0);
        assert!(!c.trigger_fires(0.0, 1.0).unwrap());
        c.synced = SuffStats::from_gram(DMatrix::from_element(1, 1, 3.0)).unwrap();
        c.pending = c.synced.clone();
        assert!(!c.trigger_fires(0.0, 1.0).unwrap(), "elapsed = 0");
        c.elapsed = 2;
        // 2 ln 4 = 2.7726
        assert!(c.trigger_fires(2.0, 1.0).unwrap());
        assert!(c.trigger_fires(2.77, 1.0).unwrap());
        assert!(!c.trigger_fires(2.78, 1.0).unwrap());
        c.pending = SuffStats::zeros(1);
        assert!(!c.trigger_fires(0.0, 1.0).unwrap());
    }

    #[test]
    fn downloads_compose_and_reset_elapsed() {
        let mut c = ClientState::new(0, 1, 0.0);
        c.synced = SuffStats::from_gram(DMatrix::from_element(1, 1, 1.0)).unwrap();
        c.elapsed = 4;
        c.apply_download(&SuffStats::zeros(1)).unwrap();
        assert_eq!(c.elapsed, 0);
        assert_eq!(c.synced.v()[(0, 0)], 1.0);
        c.apply_download(&SuffStats::from_gram(DMatrix::from_element(1, 1, 5.0)).unwrap())
            .unwrap();
        assert_eq!(c.synced.v()[(0, 0)], 6.0);
        c.apply_download(&SuffStats::from_gram(DMatrix::from_element(1, 1, 2.0)).unwrap())
            .unwrap();
        assert_eq!(c.synced.v()[(0, 0)], 8.0);
        let bad = SuffStats::from_gram(DMatrix::from_element(1, 1, -1.0)).unwrap();
        assert!(c.apply_download(&bad).is_err());
    }

    fn arm() -> impl Strategy<Value = DVector<f64>> {
        proptest::collection::vec(-1.0f64..1.0, 3).prop_map(DVector::from_vec)
    }

    proptest! {
        #[test]
        fn trigger_monotone_in_threshold(
            xs in proptest::collection::vec((arm(), -1.0f64..1.0), 1..20),
            lo in 0.0f64..5.0,
            extra in 0.0f64..5.0,
        ) {
            let mut c = ClientState::new(0, 3, 1.0);
            for (x, y) in &xs {
                c.observe(x, *y).unwrap();
            }
            if c.trigger_fires(lo + extra, 1.0).unwrap() {
                prop_assert!(c.trigger_fires(lo, 1.0).unwrap());
            }
        }

        #[test]
        fn duplicating_arms_keeps_the_chosen_feature(
            hist in proptest::collection::vec((arm(), -1.0f64..1.0), 0..10),
            arms in proptest::collection::vec(arm(), 1..8),
            dup in 0usize..8,
        ) {
            let p = ModelParams::new(1.0, 0.5, 0.1).unwrap();
            let mut c = ClientState::new(0, 3, 1.0);
            for (x, y) in &hist {
                c.observe(x, *y).unwrap();
            }
            let before = c.select_arm(&arms, &p).unwrap();
            let mut dupd = arms.clone();
            dupd.push(arms[dup % arms.len()].clone());
            let after = c.select_arm(&dupd, &p).unwrap();
            prop_assert_eq!(&arms[before], &dupd[after]);
        }

        #[test]
        fn effective_cost_bounded(cost in 0.0f64..1e6, x in arm()) {
            let mut c = ClientState::new(0, 3, cost);
            prop_assert!(c.effective_cost() <= c.base_cost);
            c.observe(&x, 0.0).unwrap();
            prop_assert!(c.effective_cost() <= c.base_cost);
        }
    }
}
