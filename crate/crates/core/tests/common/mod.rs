//! Reference computations that avoid the library's Cholesky/log-domain path.
//!
//! Determinants are taken by cofactor expansion (small matrices) and compared
//! as plain ratios; subset questions are answered by enumerating every subset.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Laplace expansion along the first row.
pub fn cofactor_det(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    match n {
        0 => 1.0,
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        _ => (0..n)
            .map(|j| {
                let minor = m.clone().remove_row(0).remove_column(j);
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[(0, j)] * cofactor_det(&minor)
            })
            .sum(),
    }
}

pub fn det_reg(v: &DMatrix<f64>, lambda: f64) -> f64 {
    let n = v.nrows();
    cofactor_det(&(v + DMatrix::identity(n, n) * lambda))
}

pub fn random_psd(rng: &mut ChaCha8Rng, d: usize, rank: usize, scale: f64) -> DMatrix<f64> {
    let mut v = DMatrix::zeros(d, d);
    for _ in 0..rank {
        let x = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0) * scale);
        v += &x * x.transpose();
    }
    v
}

/// One mechanism instance in plain data: `uploads[i]` is `ΔV_i`, `vs[i]` the
/// client's own Gram matrix, `down[i]` the staged download.
#[derive(Debug, Clone)]
pub struct Instance {
    pub global: DMatrix<f64>,
    pub uploads: Vec<DMatrix<f64>>,
    pub vs: Vec<DMatrix<f64>>,
    pub down: Vec<DMatrix<f64>>,
    pub costs: Vec<f64>,
    pub lambda: f64,
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Self {
        let lambda = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let rank = rng.random_range(0..6);
        let global = random_psd(rng, d, rank, 1.0);
        let mut uploads = Vec::new();
        let mut vs = Vec::new();
        let mut costs = Vec::new();
        for _ in 0..n {
            let dv = if rng.random_bool(0.15) {
                DMatrix::zeros(d, d)
            } else {
                let rank = rng.random_range(1..5);
                random_psd(rng, d, rank, 1.0)
            };
            vs.push(&global + &dv);
            let base: f64 = match rng.random_range(0..4) {
                0 => 0.0,
                1 => rng.random_range(0.0..0.5),
                2 => rng.random_range(0.0..3.0),
                _ => rng.random_range(0.0..20.0),
            };
            costs.push(if dv.iter().all(|x| *x == 0.0) {
                0.0
            } else {
                base
            });
            uploads.push(dv);
        }
        Self {
            global,
            uploads,
            vs,
            down: vec![DMatrix::zeros(d, d); n],
            costs,
            lambda,
        }
    }

    pub fn n(&self) -> usize {
        self.uploads.len()
    }

    pub fn members(&self, mask: u64) -> impl Iterator<Item = usize> {
        let n = self.n();
        (0..n).filter(move |i| mask >> i & 1 == 1)
    }

    pub fn pooled(&self, mask: u64) -> DMatrix<f64> {
        let mut v = self.global.clone();
        for j in self.members(mask) {
            v += &self.uploads[j];
        }
        v
    }

    pub fn full_mask(&self) -> u64 {
        (1u64 << self.n()) - 1
    }

    /// `det(V_g(S)+λI) / det(V_g(all)+λI)`.
    pub fn gap_ratio(&self, mask: u64) -> f64 {
        det_reg(&self.pooled(mask), self.lambda)
            / det_reg(&self.pooled(self.full_mask()), self.lambda)
    }

    pub fn data_incentive(&self, i: usize, mask: u64) -> f64 {
        let mut m = &self.vs[i] + &self.down[i];
        for j in self.members(mask).filter(|&j| j != i) {
            m += &self.uploads[j];
        }
        det_reg(&m, self.lambda) / det_reg(&self.vs[i], self.lambda) - 1.0
    }

    pub fn contribution(&self, i: usize, mask: u64) -> f64 {
        let base = self.pooled(mask & !(1 << i));
        det_reg(&(&base + &self.uploads[i]), self.lambda) / det_reg(&base, self.lambda)
    }

    pub fn is_stable(&self, mask: u64, tol: f64) -> bool {
        self.members(mask)
            .all(|i| self.data_incentive(i, mask) >= self.costs[i] - tol)
    }

    /// Union of all stable sets, computed by enumeration.
    pub fn maximal_stable(&self, tol: f64) -> u64 {
        (0..=self.full_mask())
            .filter(|&m| self.is_stable(m, tol))
            .fold(0, |acc, m| acc | m)
    }

    /// Cheapest β-feasible set when every member is paid its shortfall
    /// against the set's own data incentives.
    pub fn exhaustive_min_payment(&self, beta: f64) -> (u64, f64) {
        (0..=self.full_mask())
            .filter(|&m| self.gap_ratio(m) >= beta * (1.0 - 1e-12))
            .map(|m| {
                let pay: f64 = self
                    .members(m)
                    .map(|i| (self.costs[i] - self.data_incentive(i, m)).max(0.0))
                    .sum();
                (m, pay)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("the full set is always feasible")
    }
}

impl Instance {
    /// First outsider, in descending marginal contribution to `s_hat` (ties to
    /// the lower index), whose sole addition meets β; with its top-up payment.
    pub fn last_resort(&self, s_hat: u64, beta: f64) -> Option<(usize, f64)> {
        let mut outside: Vec<usize> = (0..self.n()).filter(|i| s_hat >> i & 1 == 0).collect();
        outside.sort_by(|&a, &b| {
            self.contribution(b, s_hat)
                .total_cmp(&self.contribution(a, s_hat))
                .then(a.cmp(&b))
        });
        outside.into_iter().find_map(|i| {
            let with = s_hat | 1 << i;
            (self.gap_ratio(with) >= beta * (1.0 - 1e-12))
                .then(|| (i, (self.costs[i] - self.data_incentive(i, with)).max(0.0)))
        })
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
