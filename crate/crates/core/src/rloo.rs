//! Leave-one-out REINFORCE gradient for router parameters.
//!
//! With `M` sampled selections and losses `Lₘ`, the estimate for layer `l` is
//!
//! ```text
//! Ĝ = 1/(M−1) · Σₘ (Lₘ − L̄) · ∇_P log Q(selectionₘ)
//! ```
//!
//! The centered losses are formed from pairwise differences,
//! `Lₘ − L̄ = (1/M) Σ_{m'} (Lₘ − L_{m'})`, so a common shift of the losses only
//! enters through exact differences.
//!
//! The module also holds the enumeration oracle: the exact surrogate gradient
//! `∇_P E[L]` over every selection and the exact expectation of `Ĝ` over every
//! `M`-tuple of selections.

use crate::error::{RemixError, Result};
use crate::numerics::{Matrix, RngStream, Vector};
use crate::routing::{
    ordered_selection_logprob, ordered_tuples, route, sample_without_replacement, selection_score_grad,
    RoutingDistribution, Selection,
};

pub const EXACT_SELECTION_BUDGET: u128 = 100_000;
pub const UNBIASEDNESS_TUPLE_BUDGET: u128 = 1_000_000;

/// Router of one layer at a fixed input: `q = softmax(params · input)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRouter {
    pub params: Matrix,
    pub input: Vector,
}

impl LayerRouter {
    pub fn distribution(&self) -> Result<RoutingDistribution> {
        route(&self.params, &self.input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub selection: Selection,
    pub loss: f64,
    /// `∇_P log Q` per layer, each `n × D`.
    pub score_grads: Vec<Matrix>,
}

impl Rollout {
    pub fn new(selection: Selection, loss: f64, score_grads: Vec<Matrix>) -> Result<Self> {
        if !loss.is_finite() {
            return Err(RemixError::NonFinite(format!("rollout loss {loss}")));
        }
        if score_grads.iter().any(|g| !g.is_finite()) {
            return Err(RemixError::NonFinite("rollout score gradient".into()));
        }
        Ok(Rollout { selection, loss, score_grads })
    }

    /// Rollout whose score gradients are computed from fixed per-layer routers.
    pub fn scored(routers: &[LayerRouter], selection: Selection, loss: f64) -> Result<Self> {
        let grads = score_grads(routers, &selection)?;
        Rollout::new(selection, loss, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSet {
    rollouts: Vec<Rollout>,
    mean_loss: f64,
}

impl RolloutSet {
    pub fn new(rollouts: Vec<Rollout>) -> Result<Self> {
        if rollouts.len() < 2 {
            return Err(RemixError::TooFewRollouts(rollouts.len()));
        }
        let layers = rollouts[0].score_grads.len();
        if rollouts.iter().any(|r| r.score_grads.len() != layers) {
            return Err(RemixError::Shape("rollouts disagree on layer count".into()));
        }
        let mean_loss = rollouts.iter().map(|r| r.loss).sum::<f64>() / rollouts.len() as f64;
        Ok(RolloutSet { rollouts, mean_loss })
    }

    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }

    pub fn mean_loss(&self) -> f64 {
        self.mean_loss
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }
}

/// `Lₘ − L̄` for every rollout, via pairwise differences.
pub fn centered_losses(losses: &[f64]) -> Vec<f64> {
    let m = losses.len() as f64;
    losses.iter().map(|&a| losses.iter().map(|&b| a - b).sum::<f64>() / m).collect()
}

/// Leave-one-out estimate of the router gradient, one matrix per layer.
pub fn rloo_router_grad(set: &RolloutSet) -> Result<Vec<Matrix>> {
    let losses: Vec<f64> = set.rollouts.iter().map(|r| r.loss).collect();
    let adv = centered_losses(&losses);
    let scale = 1.0 / (set.len() - 1) as f64;
    let mut out: Vec<Matrix> = set.rollouts[0].score_grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
    for (r, a) in set.rollouts.iter().zip(&adv) {
        if *a == 0.0 {
            continue;
        }
        for (acc, g) in out.iter_mut().zip(&r.score_grads) {
            acc.axpy(a * scale, g);
        }
    }
    Ok(out)
}

/// `∇_P log Q` of a selection, per layer.
pub fn score_grads(routers: &[LayerRouter], selection: &Selection) -> Result<Vec<Matrix>> {
    if routers.len() != selection.layers() {
        return Err(RemixError::Shape(format!("{} routers for a {}-layer selection", routers.len(), selection.layers())));
    }
    routers
        .iter()
        .zip(&selection.per_layer)
        .map(|(r, s)| selection_score_grad(&r.distribution()?, &r.input, s))
        .collect()
}

fn selection_space_size(routers: &[LayerRouter], k: usize) -> u128 {
    routers
        .iter()
        .map(|r| {
            let n = r.params.rows() as u128;
            (0..k as u128).map(|j| n.saturating_sub(j)).product::<u128>()
        })
        .fold(1u128, |a, b| a.saturating_mul(b))
}

/// Every multi-layer selection with `k` ordered draws per layer.
pub fn enumerate_selections(routers: &[LayerRouter], k: usize) -> Result<Vec<Selection>> {
    let size = selection_space_size(routers, k);
    if size > EXACT_SELECTION_BUDGET {
        return Err(RemixError::EnumerationBudget { size, budget: EXACT_SELECTION_BUDGET });
    }
    let mut out = vec![Selection::new(Vec::new())];
    for r in routers {
        let tuples = ordered_tuples(r.params.rows(), k);
        out = out
            .into_iter()
            .flat_map(|s| {
                tuples.iter().map(move |t| {
                    let mut per_layer = s.per_layer.clone();
                    per_layer.push(t.clone());
                    Selection::new(per_layer)
                })
            })
            .collect();
    }
    Ok(out)
}

struct Enumerated {
    prob: f64,
    loss: f64,
    grads: Vec<Matrix>,
}

fn enumerate_scored<F>(loss: &F, routers: &[LayerRouter], k: usize) -> Result<Vec<Enumerated>>
where
    F: Fn(&Selection) -> f64,
{
    let dists = routers.iter().map(LayerRouter::distribution).collect::<Result<Vec<_>>>()?;
    enumerate_selections(routers, k)?
        .into_iter()
        .map(|s| {
            let logq: f64 = dists
                .iter()
                .zip(&s.per_layer)
                .map(|(q, t)| ordered_selection_logprob(q, t))
                .sum::<Result<f64>>()?;
            let grads = routers
                .iter()
                .zip(&dists)
                .zip(&s.per_layer)
                .map(|((r, q), t)| selection_score_grad(q, &r.input, t))
                .collect::<Result<Vec<_>>>()?;
            Ok(Enumerated { prob: logq.exp(), loss: loss(&s), grads })
        })
        .collect()
}

fn zero_like(routers: &[LayerRouter]) -> Vec<Matrix> {
    routers.iter().map(|r| Matrix::zeros(r.params.rows(), r.params.cols())).collect()
}

/// `E_{selection ~ Q}[L(selection)]` by enumeration.
pub fn expected_loss<F>(loss: &F, routers: &[LayerRouter], k: usize) -> Result<f64>
where
    F: Fn(&Selection) -> f64,
{
    Ok(enumerate_scored(loss, routers, k)?.iter().map(|e| e.prob * e.loss).sum())
}

/// The exact surrogate gradient `Σ Q·L·∇_P log Q` over every selection.
pub fn exact_surrogate_grad<F>(loss: &F, routers: &[LayerRouter], k: usize) -> Result<Vec<Matrix>>
where
    F: Fn(&Selection) -> f64,
{
    let table = enumerate_scored(loss, routers, k)?;
    let mut out = zero_like(routers);
    for e in &table {
        for (acc, g) in out.iter_mut().zip(&e.grads) {
            acc.axpy(e.prob * e.loss, g);
        }
    }
    Ok(out)
}

/// Exact `E[Ĝ]` over every ordered `M`-tuple of selections, compared to the
/// exact surrogate gradient. Returns the largest entrywise deviation.
pub fn unbiasedness_check<F>(loss: &F, routers: &[LayerRouter], k: usize, m: usize) -> Result<f64>
where
    F: Fn(&Selection) -> f64,
{
    if m < 2 {
        return Err(RemixError::TooFewRollouts(m));
    }
    let s = selection_space_size(routers, k);
    let tuples = s.checked_pow(m as u32).unwrap_or(u128::MAX);
    if tuples > UNBIASEDNESS_TUPLE_BUDGET {
        return Err(RemixError::EnumerationBudget { size: tuples, budget: UNBIASEDNESS_TUPLE_BUDGET });
    }
    let table = enumerate_scored(loss, routers, k)?;
    let mut exact = zero_like(routers);
    for e in &table {
        for (acc, g) in exact.iter_mut().zip(&e.grads) {
            acc.axpy(e.prob * e.loss, g);
        }
    }

    let mut expectation = zero_like(routers);
    let mut idx = vec![0usize; m];
    let scale = 1.0 / (m - 1) as f64;
    let mut losses = vec![0.0; m];
    loop {
        let weight: f64 = idx.iter().map(|&i| table[i].prob).product();
        for (l, &i) in losses.iter_mut().zip(&idx) {
            *l = table[i].loss;
        }
        let adv = centered_losses(&losses);
        for (&i, a) in idx.iter().zip(&adv) {
            for (acc, g) in expectation.iter_mut().zip(&table[i].grads) {
                acc.axpy(weight * a * scale, g);
            }
        }
        // odometer over M-tuples
        let mut pos = 0;
        loop {
            if pos == m {
                let dev = expectation.iter().zip(&exact).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
                return Ok(dev);
            }
            idx[pos] += 1;
            if idx[pos] < table.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Draw one selection layer by layer from fixed routers.
pub fn sample_selection(dists: &[RoutingDistribution], k: usize, rng: &mut RngStream) -> Result<Selection> {
    Ok(Selection::new(dists.iter().map(|q| sample_without_replacement(q, k, rng)).collect::<Result<Vec<_>>>()?))
}

/// Monte Carlo spread of the estimator across independent rollout sets.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSummary {
    pub m: usize,
    pub trials: usize,
    /// Entrywise sample variance, per layer.
    pub variance: Vec<Matrix>,
    /// Entrywise sample mean, per layer.
    pub mean: Vec<Matrix>,
}

impl VarianceSummary {
    /// Frobenius norm of the stacked variance matrices.
    pub fn frobenius(&self) -> f64 {
        self.variance.iter().map(Matrix::frobenius_sq).sum::<f64>().sqrt()
    }

    /// Sum of entrywise variances.
    pub fn total(&self) -> f64 {
        self.variance.iter().map(|v| v.data().iter().sum::<f64>()).sum()
    }
}

pub fn estimator_variance<F>(
    loss: &F,
    routers: &[LayerRouter],
    k: usize,
    m: usize,
    trials: usize,
    rng: &mut RngStream,
) -> Result<VarianceSummary>
where
    F: Fn(&Selection) -> f64,
{
    if trials < 1000 {
        return Err(RemixError::InvalidArgument(format!("variance study needs >= 1000 trials, got {trials}")));
    }
    if m < 2 {
        return Err(RemixError::TooFewRollouts(m));
    }
    let dists = routers.iter().map(LayerRouter::distribution).collect::<Result<Vec<_>>>()?;
    let mut mean = zero_like(routers);
    let mut m2 = zero_like(routers);
    for t in 0..trials {
        let rollouts = (0..m)
            .map(|_| {
                let s = sample_selection(&dists, k, rng)?;
                let l = loss(&s);
                Rollout::scored(routers, s, l)
            })
            .collect::<Result<Vec<_>>>()?;
        let est = rloo_router_grad(&RolloutSet::new(rollouts)?)?;
        // Welford
        let count = (t + 1) as f64;
        for ((mu, s2), g) in mean.iter_mut().zip(m2.iter_mut()).zip(&est) {
            for ((a, b), &x) in mu.data_mut().iter_mut().zip(s2.data_mut().iter_mut()).zip(g.data()) {
                let delta = x - *a;
                *a += delta / count;
                *b += delta * (x - *a);
            }
        }
    }
    let variance = m2.iter().map(|s| s.scaled(1.0 / (trials - 1) as f64)).collect();
    Ok(VarianceSummary { m, trials, variance, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, gaussian_matrix};

    fn routers(seed: u64, n: usize, d: usize, layers: usize) -> Vec<LayerRouter> {
        let mut rng = RngStream::new(seed, "rloo-routers", 0);
        (0..layers)
            .map(|_| LayerRouter {
                params: gaussian_matrix(&mut rng, n, d, 0.7).unwrap(),
                input: Vector((0..d).map(|_| rng.normal()).collect()),
            })
            .collect()
    }

    /// Deterministic pseudo-random loss per selection.
    fn hashed_loss(s: &Selection) -> f64 {
        let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
        for layer in &s.per_layer {
            for &i in layer {
                h = (h ^ (i as u64 + 1)).wrapping_mul(0x100_0000_01b3);
            }
            h = h.rotate_left(17);
        }
        (h % 1000) as f64 / 250.0
    }

    fn rollout(loss: f64, grad: f64) -> Rollout {
        Rollout::new(Selection::new(vec![vec![0]]), loss, vec![Matrix::from_vec(1, 2, vec![grad, -grad]).unwrap()]).unwrap()
    }

    #[test]
    fn too_few_rollouts() {
        assert_eq!(RolloutSet::new(vec![rollout(1.0, 1.0)]).unwrap_err(), RemixError::TooFewRollouts(1));
    }

    #[test]
    fn equal_losses_give_zero() {
        let set = RolloutSet::new(vec![rollout(0.7, 1.0), rollout(0.7, -2.0), rollout(0.7, 3.0)]).unwrap();
        let g = rloo_router_grad(&set).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shift_leaves_estimate_bit_identical() {
        // dyadic losses keep the shifted values exactly representable
        let losses = [0.625, 1.25, 0.09375, 2.5];
        let grads = [0.3, -1.7, 2.2, 0.05];
        let base: Vec<Rollout> = losses.iter().zip(&grads).map(|(&l, &g)| rollout(l, g)).collect();
        let shifted: Vec<Rollout> = losses.iter().zip(&grads).map(|(&l, &g)| rollout(l + 3.0, g)).collect();
        let a = rloo_router_grad(&RolloutSet::new(base).unwrap()).unwrap();
        let b = rloo_router_grad(&RolloutSet::new(shifted).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_rollouts_closed_form() {
        let set = RolloutSet::new(vec![rollout(1.5, 0.4), rollout(-0.25, -1.1)]).unwrap();
        let g = rloo_router_grad(&set).unwrap();
        let expected = (1.5 - -0.25) / 2.0 * (0.4 - -1.1);
        assert!((g[0][(0, 0)] - expected).abs() < 1e-15);
        assert!((g[0][(0, 1)] + expected).abs() < 1e-15);
    }

    #[test]
    fn permutation_invariance() {
        let losses = [0.31, 1.7, -0.4, 2.2, 0.9];
        let grads = [0.3, -1.7, 2.2, 0.05, 1.1];
        let fwd: Vec<Rollout> = losses.iter().zip(&grads).map(|(&l, &g)| rollout(l, g)).collect();
        let rev: Vec<Rollout> = fwd.iter().rev().cloned().collect();
        let a = rloo_router_grad(&RolloutSet::new(fwd).unwrap()).unwrap();
        let b = rloo_router_grad(&RolloutSet::new(rev).unwrap()).unwrap();
        assert!(a[0].max_abs_diff(&b[0]) <= 1e-12);
    }

    #[test]
    fn exact_grad_constant_loss_is_zero() {
        let r = routers(1, 3, 2, 2);
        let g = exact_surrogate_grad(&|_: &Selection| 2.5, &r, 2).unwrap();
        assert!(g.iter().all(|m| m.frobenius() <= 1e-14));
    }

    #[test]
    fn exact_grad_two_arm_closed_form() {
        let r = vec![LayerRouter { params: Matrix::zeros(2, 1), input: Vector(vec![1.0]) }];
        let loss = |s: &Selection| if s.per_layer[0][0] == 0 { 1.0 } else { 0.0 };
        let g = exact_surrogate_grad(&loss, &r, 1).unwrap();
        assert!((g[0][(0, 0)] - 0.25).abs() < 1e-15);
        assert!((g[0][(1, 0)] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn exact_grad_matches_finite_differences() {
        for (layers, k) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            let r = routers(2 + layers as u64, 3, 2, layers);
            let g = exact_surrogate_grad(&hashed_loss, &r, k).unwrap();
            for l in 0..layers {
                let flat = Vector(r[l].params.data().to_vec());
                let fd = finite_diff_grad(
                    |v| {
                        let mut rr = r.clone();
                        rr[l].params = Matrix::from_vec(3, 2, v.0.clone()).unwrap();
                        expected_loss(&hashed_loss, &rr, k).unwrap()
                    },
                    &flat,
                    1e-5,
                );
                for (a, b) in g[l].data().iter().zip(fd.iter()) {
                    assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn unbiased_on_small_cases() {
        let r = routers(5, 3, 2, 1);
        assert!(unbiasedness_check(&hashed_loss, &r, 1, 2).unwrap() <= 1e-10);
        assert!(unbiasedness_check(&hashed_loss, &r, 2, 2).unwrap() <= 1e-10);
        assert!(unbiasedness_check(&|_: &Selection| 1.0, &r, 2, 2).unwrap() <= 1e-15);
    }

    #[test]
    fn budgets_are_enforced() {
        let r = routers(6, 12, 2, 2);
        assert!(matches!(exact_surrogate_grad(&hashed_loss, &r, 3), Err(RemixError::EnumerationBudget { .. })));
        let r = routers(6, 3, 2, 2);
        assert!(matches!(unbiasedness_check(&hashed_loss, &r, 2, 4), Err(RemixError::EnumerationBudget { .. })));
    }

    #[test]
    fn variance_basics() {
        let r = routers(7, 3, 2, 1);
        let mut rng = RngStream::new(7, "variance", 0);
        let flat = estimator_variance(&|_: &Selection| 1.0, &r, 1, 4, 1000, &mut rng).unwrap();
        assert_eq!(flat.frobenius(), 0.0);
        assert!(estimator_variance(&hashed_loss, &r, 1, 4, 10, &mut rng).is_err());
    }
}
