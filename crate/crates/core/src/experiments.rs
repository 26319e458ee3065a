//! Study drivers shared by the command line and the acceptance suite.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{gaussian_matrix, RngStream, Vector};
use crate::rloo::{enumerate_selections, estimator_variance, unbiasedness_check, LayerRouter, UNBIASEDNESS_TUPLE_BUDGET};
use crate::routing::Selection;
use crate::theory::{ess_upper_bound, BoundInputs, EssSamples};
use crate::trainer::{bandit_fixture, train_collect, TrainConfig, TrainMode};

/// Exceedance slack: `δ + 3√(δ(1−δ)/T)`.
pub fn exceedance_limit(delta: f64, trials: usize) -> f64 {
    delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub delta: f64,
    pub bound: f64,
    pub exceedance: f64,
    pub limit: f64,
    pub within: bool,
}

pub fn bound_table(samples: &EssSamples, sigma: f64, n: usize, x_norm: f64, deltas: &[f64]) -> Result<Vec<BoundRow>> {
    deltas
        .iter()
        .map(|&delta| {
            let bound = ess_upper_bound(&BoundInputs::new(sigma, n, x_norm, delta)?);
            let exceedance = samples.exceedance(bound);
            let limit = exceedance_limit(delta, samples.samples.len());
            Ok(BoundRow { delta, bound, exceedance, limit, within: exceedance <= limit })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessCell {
    pub n: usize,
    pub k: usize,
    pub layers: usize,
    pub m: usize,
    pub selections: u64,
    pub tuples: u64,
    pub deviation: f64,
}

/// Exhaustive `E[Ĝ]` versus the exact gradient over every `(n, k, L, M)`
/// cell whose tuple space fits the enumeration budget. Routers are
/// `N(0, 1)` in `D = 2`; losses are i.i.d. uniform per selection.
pub fn unbiasedness_grid(seed: u64, ns: &[usize], ks: &[usize], layers: &[usize], ms: &[usize]) -> Result<Vec<UnbiasednessCell>> {
    let mut cells = Vec::new();
    let mut index = 0u64;
    for &n in ns {
        for &k in ks.iter().filter(|&&k| k <= n) {
            for &l in layers {
                for &m in ms {
                    index += 1;
                    let mut rng = RngStream::new(seed, "unbiasedness", index);
                    let routers = (0..l)
                        .map(|_| {
                            Ok(LayerRouter {
                                params: gaussian_matrix(&mut rng, n, 2, 1.0)?,
                                input: Vector(vec![rng.normal(), rng.normal()]),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let selections = enumerate_selections(&routers, k)?;
                    let s = selections.len() as u64;
                    let tuples = (s as u128).pow(m as u32);
                    if tuples > UNBIASEDNESS_TUPLE_BUDGET {
                        continue;
                    }
                    let table: BTreeMap<Selection, f64> = selections.into_iter().map(|sel| (sel, rng.uniform())).collect();
                    let deviation = unbiasedness_check(&|sel: &Selection| table[sel], &routers, k, m)?;
                    cells.push(UnbiasednessCell { n, k, layers: l, m, selections: s, tuples: tuples as u64, deviation });
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub seed: u64,
    pub m: usize,
    pub trials: usize,
    /// Frobenius norm of the entrywise variance.
    pub frobenius: f64,
    /// Sum of entrywise variances.
    pub total: f64,
}

/// Router-gradient variance on the bandit fixture at initialization, for
/// every seed and rollout count.
pub fn bandit_variance(seeds: &[u64], ms: &[usize], trials: usize, n: usize, k: usize) -> Result<Vec<VarianceRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let bandit = bandit_fixture(n, k, 1.0, seed)?;
        let router = [bandit.router()];
        for &m in ms {
            let mut rng = RngStream::new(seed, "variance", m as u64);
            let v = estimator_variance(&|s: &Selection| bandit.loss(s), &router, k, m, trials, &mut rng)?;
            rows.push(VarianceRow { seed, m, trials, frobenius: v.frobenius(), total: v.total() });
        }
    }
    Ok(rows)
}

/// Per seed, whether variance strictly decreases along `ms` order.
pub fn variance_strictly_decreasing(rows: &[VarianceRow]) -> BTreeMap<u64, bool> {
    let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_seed.entry(r.seed).or_default().push(r.frobenius);
    }
    by_seed.into_iter().map(|(s, v)| (s, v.windows(2).all(|w| w[1] < w[0]))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditRun {
    pub seed: u64,
    pub planted: Vec<usize>,
    pub greedy_before: Vec<usize>,
    pub greedy_after: Vec<usize>,
    pub expected_loss_before: f64,
    pub expected_loss_after: f64,
}

/// Router-only training on the bandit fixture with frozen adapters.
pub fn bandit_convergence(seed: u64, n: usize, k: usize, steps: usize, base: &TrainConfig) -> Result<BanditRun> {
    let mut bandit = bandit_fixture(n, k, base.router_sigma, seed)?;
    let cfg = TrainConfig { mode: TrainMode::Remix, n, k, rank: 1, steps, seed, freeze_adapters: true, ..base.clone() };
    let greedy_before = bandit.greedy()?;
    let expected_loss_before = bandit.expected_loss()?;
    let data = vec![bandit.example.clone()];
    train_collect(&mut bandit.model, &data, &cfg)?;
    Ok(BanditRun {
        seed,
        planted: bandit.planted.clone(),
        greedy_before,
        greedy_after: bandit.greedy()?,
        expected_loss_before,
        expected_loss_after: bandit.expected_loss()?,
    })
}
