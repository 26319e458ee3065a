//! Routing distributions and selections.
//!
//! Probabilities of ordered selections are handled in the log domain: with
//! `L` layers of `k` factors each the probability-domain product underflows
//! quickly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{RemixError, Result};
use crate::numerics::{softmax, Matrix, RngStream, Vector};

/// Residual mass below which a renormalized draw is rejected.
pub const RESIDUAL_FLOOR: f64 = 1e-12;

/// Largest `n` for which unordered probabilities are enumerated.
pub const MAX_ENUMERATION_N: usize = 12;

/// Categorical distribution over the `n` adapters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDistribution {
    logits: Vector,
    probs: Vector,
}

impl RoutingDistribution {
    pub fn from_logits(logits: Vector) -> Result<Self> {
        let probs = softmax(&logits)?;
        Ok(RoutingDistribution { logits, probs })
    }

    pub fn logits(&self) -> &Vector {
        &self.logits
    }

    pub fn probs(&self) -> &Vector {
        &self.probs
    }

    pub fn n(&self) -> usize {
        self.probs.dim()
    }
}

/// Ordered activated-adapter lists, one per layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Selection {
    pub per_layer: Vec<Vec<usize>>,
}

impl Selection {
    pub fn new(per_layer: Vec<Vec<usize>>) -> Self {
        Selection { per_layer }
    }

    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }

    /// Checks distinctness, range and a common length per layer.
    pub fn validate(&self, n: usize) -> Result<()> {
        let k = self.per_layer.first().map_or(0, Vec::len);
        for (l, list) in self.per_layer.iter().enumerate() {
            if list.len() != k {
                return Err(RemixError::Shape(format!("layer {l} has {} indices, expected {k}", list.len())));
            }
            check_ordered(list, n)?;
        }
        Ok(())
    }
}

fn check_ordered(ordered: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in ordered {
        if i >= n {
            return Err(RemixError::InvalidArgument(format!("index {i} out of range for n={n}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(RemixError::InvalidArgument(format!("duplicate index {i}")));
        }
    }
    Ok(())
}

/// `softmax(P · x)`.
pub fn route(p: &Matrix, x: &Vector) -> Result<RoutingDistribution> {
    RoutingDistribution::from_logits(p.matvec(x)?)
}

/// Effective support size `(Σ|wᵢ|)² / Σwᵢ²`.
pub fn ess(weights: &Vector) -> Result<f64> {
    let l1: f64 = weights.iter().map(|w| w.abs()).sum();
    let l2: f64 = weights.iter().map(|w| w * w).sum();
    if l2 == 0.0 {
        return Err(RemixError::EssUndefined);
    }
    Ok(l1 * l1 / l2)
}

/// Sequential categorical draws, renormalizing over the indices not yet drawn.
pub fn sample_without_replacement(q: &RoutingDistribution, k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let n = q.n();
    if k == 0 || k > n {
        return Err(RemixError::InvalidArgument(format!("cannot draw k={k} of n={n}")));
    }
    let probs = q.probs().as_slice();
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let residual: f64 = probs.iter().zip(&taken).filter(|(_, &t)| !t).map(|(p, _)| p).sum();
        let target = rng.uniform() * residual;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, (&p, &t)) in probs.iter().zip(&taken).enumerate() {
            if t {
                continue;
            }
            acc += p;
            pick = Some(i);
            if target < acc {
                break;
            }
        }
        // Rounding can leave `target` past the final partial sum; the last
        // untaken index absorbs it.
        let i = pick.expect("k <= n leaves an untaken index");
        taken[i] = true;
        out.push(i);
    }
    Ok(out)
}

/// Residual masses `Σ_{b not yet drawn} q_b` seen before each draw.
fn residuals(probs: &[f64], ordered: &[usize]) -> Result<Vec<f64>> {
    let mut taken = vec![false; probs.len()];
    let mut out = Vec::with_capacity(ordered.len());
    for (drawn, &i) in ordered.iter().enumerate() {
        let residual: f64 = probs.iter().zip(&taken).filter(|(_, &t)| !t).map(|(p, _)| p).sum();
        if residual < RESIDUAL_FLOOR {
            return Err(RemixError::DegenerateResidual { residual, drawn });
        }
        out.push(residual);
        taken[i] = true;
    }
    Ok(out)
}

/// `log Π_j q_{i_j} / (1 − Σ_{j'<j} q_{i_j'})` for a single layer.
pub fn ordered_selection_logprob(q: &RoutingDistribution, ordered: &[usize]) -> Result<f64> {
    check_ordered(ordered, q.n())?;
    let probs = q.probs().as_slice();
    let res = residuals(probs, ordered)?;
    Ok(ordered.iter().zip(&res).map(|(&i, r)| probs[i].ln() - r.ln()).sum())
}

/// Log-probability of a multi-layer selection: the sum of per-layer terms.
pub fn selection_logprob(routers: &[RoutingDistribution], selection: &Selection) -> Result<f64> {
    if routers.len() != selection.layers() {
        return Err(RemixError::Shape(format!(
            "{} routers for a {}-layer selection",
            routers.len(),
            selection.layers()
        )));
    }
    routers.iter().zip(&selection.per_layer).map(|(q, s)| ordered_selection_logprob(q, s)).sum()
}

/// Probability of drawing `subset` in any order: the sum over its `k!` orderings.
pub fn unordered_subset_prob(q: &RoutingDistribution, subset: &[usize]) -> Result<f64> {
    let n = q.n();
    if n > MAX_ENUMERATION_N || subset.len() > n {
        return Err(RemixError::EnumerationBudget {
            size: n as u128,
            budget: MAX_ENUMERATION_N as u128,
        });
    }
    check_ordered(subset, n)?;
    let mut total = 0.0;
    let mut order = subset.to_vec();
    order.sort_unstable();
    for_each_permutation(&mut order, &mut |perm| -> Result<()> {
        total += ordered_selection_logprob(q, perm)?.exp();
        Ok(())
    })?;
    Ok(total)
}

/// Heap's algorithm.
fn for_each_permutation<F>(items: &mut [usize], visit: &mut F) -> Result<()>
where
    F: FnMut(&[usize]) -> Result<()>,
{
    let k = items.len();
    let mut c = vec![0usize; k];
    visit(items)?;
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            visit(items)?;
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(())
}

/// Indices of the `k` largest probabilities in ascending index order. Ties
/// go to the lower index.
pub fn top_k(q: &RoutingDistribution, k: usize) -> Result<Vec<usize>> {
    let n = q.n();
    if k == 0 || k > n {
        return Err(RemixError::InvalidArgument(format!("cannot take top-{k} of n={n}")));
    }
    let probs = q.probs().as_slice();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Gradient of the single-layer `log Q` with respect to the logits:
/// `Σ_j (e_{i_j} − q ⊙ 1[not yet drawn] / residual_j)`.
pub fn selection_logit_grad(q: &RoutingDistribution, ordered: &[usize]) -> Result<Vector> {
    check_ordered(ordered, q.n())?;
    let probs = q.probs().as_slice();
    let res = residuals(probs, ordered)?;
    let mut grad = Vector::zeros(q.n());
    let mut taken = vec![false; q.n()];
    for (&i, r) in ordered.iter().zip(&res) {
        for (b, (&p, &t)) in probs.iter().zip(&taken).enumerate() {
            if !t {
                grad[b] -= p / r;
            }
        }
        grad[i] += 1.0;
        taken[i] = true;
    }
    Ok(grad)
}

/// Gradient of the single-layer `log Q` with respect to the router matrix `P`
/// of `q = softmax(P x)`.
pub fn selection_score_grad(q: &RoutingDistribution, x: &Vector, ordered: &[usize]) -> Result<Matrix> {
    Ok(Matrix::outer(&selection_logit_grad(q, ordered)?, x))
}

/// All ordered `k`-tuples of distinct indices from `0..n`, lexicographic.
pub fn ordered_tuples(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(n, k, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut Vec::with_capacity(k), &mut vec![false; n], &mut out);
    out
}

/// All `k`-subsets of `0..n` as ascending lists, lexicographic.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Canonical (ascending) form of an ordered index list.
pub fn as_subset(ordered: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = ordered.iter().copied().collect();
    set.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> RoutingDistribution {
        RoutingDistribution::from_logits(Vector(p.iter().map(|v| v.ln()).collect())).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn route_examples() {
        let x = Vector(vec![0.3, -1.2, 2.0]);
        let q = route(&Matrix::zeros(4, 3), &x).unwrap();
        assert!(q.probs().iter().all(|&p| close(p, 0.25, 1e-15)));
        let p = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        let q = route(&p, &Vector::zeros(3)).unwrap();
        assert_eq!(q.probs().0, vec![0.5, 0.5]);
        let q = route(&Matrix::identity(2), &Vector(vec![2f64.ln(), 1f64.ln()])).unwrap();
        assert!(close(q.probs()[0], 2.0 / 3.0, 1e-15) && close(q.probs()[1], 1.0 / 3.0, 1e-15));
        assert!(route(&Matrix::identity(2), &Vector::zeros(3)).is_err());
    }

    #[test]
    fn ess_examples() {
        assert_eq!(ess(&Vector(vec![0.0, 1.0, 0.0, 0.0])).unwrap(), 1.0);
        assert!(close(ess(&Vector(vec![0.125; 8])).unwrap(), 8.0, 1e-12));
        assert!(close(ess(&Vector(vec![0.6, 0.2, 0.2])).unwrap(), 1.0 / 0.44, 1e-12));
        assert_eq!(ess(&Vector(vec![0.0; 3])).unwrap_err(), RemixError::EssUndefined);
    }

    #[test]
    fn logprob_examples() {
        let q = dist(&[0.5, 0.3, 0.2]);
        assert!(close(ordered_selection_logprob(&q, &[2]).unwrap(), 0.2f64.ln(), 1e-14));
        assert!(close(ordered_selection_logprob(&q, &[0, 1]).unwrap(), 0.3f64.ln(), 1e-14));
        let u = dist(&[1.0 / 3.0; 3]);
        assert!(close(ordered_selection_logprob(&u, &[0, 1, 2]).unwrap(), (1.0f64 / 6.0).ln(), 1e-14));
        assert!(ordered_selection_logprob(&q, &[0, 0]).is_err());
        assert!(ordered_selection_logprob(&q, &[3]).is_err());
    }

    #[test]
    fn degenerate_residual_is_rejected() {
        let q = RoutingDistribution::from_logits(Vector(vec![0.0, -60.0, -60.0])).unwrap();
        let err = ordered_selection_logprob(&q, &[0, 1]).unwrap_err();
        assert!(matches!(err, RemixError::DegenerateResidual { drawn: 1, .. }));
        assert!(selection_logit_grad(&q, &[0, 1]).is_err());
    }

    #[test]
    fn unordered_examples() {
        let q = dist(&[0.5, 0.3, 0.2]);
        assert!(close(unordered_subset_prob(&q, &[0, 1, 2]).unwrap(), 1.0, 1e-14));
        assert!(close(unordered_subset_prob(&q, &[0, 1]).unwrap(), 0.3 + 0.15 / 0.7, 1e-14));
        assert!(close(unordered_subset_prob(&q, &[0, 2]).unwrap(), 0.325, 1e-14));
        let big = RoutingDistribution::from_logits(Vector::zeros(13)).unwrap();
        assert!(matches!(unordered_subset_prob(&big, &[0]), Err(RemixError::EnumerationBudget { .. })));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&dist(&[0.1, 0.7, 0.2]), 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k(&dist(&[0.25; 4]), 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k(&dist(&[0.25, 0.25, 0.5]), 1).unwrap(), vec![2]);
        assert!(top_k(&dist(&[0.5, 0.5]), 3).is_err());
    }

    #[test]
    fn sampling_examples() {
        let mut rng = RngStream::new(5, "sample", 0);
        let q = dist(&[0.1, 0.2, 0.3, 0.4]);
        let mut perm = sample_without_replacement(&q, 4, &mut rng).unwrap();
        perm.sort_unstable();
        assert_eq!(perm, vec![0, 1, 2, 3]);
        assert!(sample_without_replacement(&q, 5, &mut rng).is_err());

        let one_hot = RoutingDistribution::from_logits(Vector(vec![-40.0, 40.0, -40.0])).unwrap();
        let hits = (0..10_000).filter(|_| sample_without_replacement(&one_hot, 1, &mut rng).unwrap() == [1]).count();
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn ordered_pair_frequency() {
        let q = dist(&[0.5, 0.3, 0.2]);
        let mut rng = RngStream::new(9, "pair-frequency", 0);
        let trials = 1_000_000;
        let hits = (0..trials).filter(|_| sample_without_replacement(&q, 2, &mut rng).unwrap() == [0, 1]).count();
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.3).abs() <= 0.002, "freq {freq}");
    }

    /// χ² goodness of fit of ordered draws, n=4, k=2 (12 cells, 11 dof).
    #[test]
    fn ordered_draws_follow_q() {
        let q = dist(&[0.4, 0.3, 0.2, 0.1]);
        let tuples = ordered_tuples(4, 2);
        let mut counts = vec![0usize; tuples.len()];
        let mut rng = RngStream::new(21, "chi-square", 0);
        let trials = 1_000_000;
        for _ in 0..trials {
            let s = sample_without_replacement(&q, 2, &mut rng).unwrap();
            counts[tuples.iter().position(|t| *t == s).unwrap()] += 1;
        }
        let chi2: f64 = tuples
            .iter()
            .zip(&counts)
            .map(|(t, &c)| {
                let e = trials as f64 * ordered_selection_logprob(&q, t).unwrap().exp();
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // 0.999 quantile of χ²(11)
        assert!(chi2 < 31.264, "chi2 {chi2}");
    }

    #[test]
    fn score_grad_examples() {
        let q = dist(&[0.5, 0.5]);
        let x = Vector(vec![1.0, 0.0, 0.0]);
        let g = selection_score_grad(&q, &x, &[0]).unwrap();
        assert_eq!(g.row(0), &[0.5, 0.0, 0.0]);
        assert_eq!(g.row(1), &[-0.5, 0.0, 0.0]);
        // the second factor q₁/(1−q₀) ≡ 1 when k = n = 2
        let full = selection_logit_grad(&q, &[0, 1]).unwrap();
        let first = selection_logit_grad(&q, &[0]).unwrap();
        for i in 0..2 {
            assert!(close(full[i], first[i], 1e-15));
        }
    }

    #[test]
    fn score_grad_matches_finite_differences() {
        let mut rng = RngStream::new(77, "score-fd", 0);
        for trial in 0..100 {
            let n = 2 + trial % 4;
            let k = 1 + rng.below(n.min(3));
            let d = 1 + rng.below(4);
            let p = crate::numerics::gaussian_matrix(&mut rng, n, d, 0.8).unwrap();
            let x = Vector((0..d).map(|_| rng.normal()).collect());
            let q = route(&p, &x).unwrap();
            let ordered = sample_without_replacement(&q, k, &mut rng).unwrap();
            let analytic = selection_score_grad(&q, &x, &ordered).unwrap();
            let flat = Vector(p.data().to_vec());
            let fd = finite_diff_grad(
                |v| {
                    let pm = Matrix::from_vec(n, d, v.0.clone()).unwrap();
                    ordered_selection_logprob(&route(&pm, &x).unwrap(), &ordered).unwrap()
                },
                &flat,
                1e-5,
            );
            for (a, b) in analytic.data().iter().zip(fd.iter()) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "trial {trial}: {a} vs {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn ordered_mass_sums_to_one(logits in prop::collection::vec(-3.0f64..3.0, 1..=6), kk in 1usize..=6) {
            let n = logits.len();
            let k = 1 + (kk - 1) % n;
            let q = RoutingDistribution::from_logits(Vector(logits)).unwrap();
            let total: f64 = ordered_tuples(n, k).iter()
                .map(|t| ordered_selection_logprob(&q, t).unwrap().exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-10);
            let total: f64 = subsets(n, k).iter()
                .map(|s| unordered_subset_prob(&q, s).unwrap()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn ess_range_and_scale_invariance(w in prop::collection::vec(0.0f64..10.0, 1..16), c in 1e-3f64..1e3) {
            let w = Vector(w);
            prop_assume!(w.norm_sq() > 0.0);
            let e = ess(&w).unwrap();
            prop_assert!(e >= 1.0 - 1e-12 && e <= w.dim() as f64 + 1e-12);
            prop_assert!((ess(&w.scaled(c)).unwrap() - e).abs() <= 1e-12 * e);
        }

        #[test]
        fn samples_are_distinct(logits in prop::collection::vec(-5.0f64..5.0, 1..10), kk in 1usize..10, seed in 0u64..1000) {
            let n = logits.len();
            let k = 1 + (kk - 1) % n;
            let q = RoutingDistribution::from_logits(Vector(logits)).unwrap();
            let mut rng = RngStream::new(seed, "distinct", 0);
            let s = sample_without_replacement(&q, k, &mut rng).unwrap();
            prop_assert_eq!(s.len(), k);
            prop_assert_eq!(as_subset(&s).len(), k);
        }
    }
}
