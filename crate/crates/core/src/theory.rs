//! Numerical checks of the collapse bound, top-k optimality, the
//! swap lemma, and the Gaussian lemmas behind the collapse bound.

use std::f64::consts::{LN_2, PI, SQRT_2};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RemixError, Result};
use crate::numerics::{
    gaussian_matrix, integrate, ln_gamma, std_normal_cdf, std_normal_inv_cdf, std_normal_pdf, RngStream, UpperBound,
    Vector,
};
use crate::routing::{ess, route, subsets, top_k, unordered_subset_prob, RoutingDistribution};

/// Worst margin at or above this counts as a pass.
pub const MARGIN_FLOOR: f64 = -1e-9;
/// Slack allowed on swap monotonicity.
pub const SWAP_TOLERANCE: f64 = 1e-12;
/// Tolerance of identity checks.
pub const IDENTITY_TOLERANCE: f64 = 1e-8;

const QUAD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub sigma: f64,
    pub n: usize,
    pub x_norm: f64,
    pub delta: f64,
}

impl BoundInputs {
    pub fn new(sigma: f64, n: usize, x_norm: f64, delta: f64) -> Result<Self> {
        let b = BoundInputs { sigma, n, x_norm, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(RemixError::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.n < 2 {
            return Err(RemixError::InvalidArgument(format!("n must be at least 2, got {}", self.n)));
        }
        if !(self.x_norm > 0.0 && self.x_norm.is_finite()) {
            return Err(RemixError::InvalidArgument(format!("x_norm must be positive, got {}", self.x_norm)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(RemixError::InvalidArgument(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// `(3/2)√(π/ln3 · ln n) + 1/(√(2π) · 2^(n − log₂n − 1))`.
pub fn bound_denominator(n: usize) -> f64 {
    let nf = n as f64;
    1.5 * (PI / 3f64.ln() * nf.ln()).sqrt() + 1.0 / ((2.0 * PI).sqrt() * 2f64.powf(nf - nf.log2() - 1.0))
}

/// The ESS level exceeded with probability at most `delta` at initialization.
pub fn ess_upper_bound(b: &BoundInputs) -> f64 {
    let exponent = b.delta * b.sigma * b.x_norm / bound_denominator(b.n) - ((b.n - 1) as f64).ln();
    (1.0 + (-exponent).exp()).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EssSamples {
    /// ESS per trial, in trial order.
    pub samples: Vec<f64>,
    pub sorted: Vec<f64>,
}

pub const REPORTED_QUANTILES: [f64; 7] = [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95];

impl EssSamples {
    /// Linear interpolation between order statistics.
    pub fn quantile(&self, p: f64) -> f64 {
        let s = &self.sorted;
        let pos = p.clamp(0.0, 1.0) * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    /// Fraction of samples strictly above `threshold`.
    pub fn exceedance(&self, threshold: f64) -> f64 {
        let below = self.sorted.partition_point(|&v| v <= threshold);
        (self.sorted.len() - below) as f64 / self.sorted.len() as f64
    }

    pub fn quantile_table(&self) -> Vec<(f64, f64)> {
        REPORTED_QUANTILES.iter().map(|&p| (p, self.quantile(p))).collect()
    }
}

/// ESS of `softmax(P x)` for fresh Gaussian routers `P` and one fixed
/// Rademacher input `x ∈ {±1}^D`.
///
/// Only `‖x‖₂ = √D` matters: the rows of `P` are isotropic, so every direction
/// gives the same distribution of logits.
pub fn monte_carlo_ess(sigma: f64, n: usize, dim: usize, trials: usize, seed: u64) -> Result<EssSamples> {
    if trials < 10_000 {
        return Err(RemixError::InvalidArgument(format!("monte carlo needs >= 10000 trials, got {trials}")));
    }
    if n < 2 || dim == 0 {
        return Err(RemixError::InvalidArgument(format!("need n >= 2 and dim >= 1, got n={n}, dim={dim}")));
    }
    let mut xr = RngStream::new(seed, "rademacher", 0);
    let x = Vector((0..dim).map(|_| xr.rademacher()).collect());
    let samples = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = RngStream::new(seed, "collapse", t as u64);
            let p = gaussian_matrix(&mut rng, n, dim, sigma)?;
            ess(route(&p, &x)?.probs())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(EssSamples { samples, sorted })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CheckId {
    L0,
    L1,
    L2,
    L3,
    L4,
    L5,
    L6,
    #[serde(rename = "top-k")]
    TopK,
    #[serde(rename = "swap")]
    Swap,
}

impl CheckId {
    pub const ALL: [CheckId; 9] =
        [CheckId::L0, CheckId::L1, CheckId::L2, CheckId::L3, CheckId::L4, CheckId::L5, CheckId::L6, CheckId::TopK, CheckId::Swap];
    pub const LEMMAS: [CheckId; 7] = [CheckId::L0, CheckId::L1, CheckId::L2, CheckId::L3, CheckId::L4, CheckId::L5, CheckId::L6];
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CheckId::L0 => "L0",
            CheckId::L1 => "L1",
            CheckId::L2 => "L2",
            CheckId::L3 => "L3",
            CheckId::L4 => "L4",
            CheckId::L5 => "L5",
            CheckId::L6 => "L6",
            CheckId::TopK => "top-k",
            CheckId::Swap => "swap",
        };
        f.write_str(s)
    }
}

/// One verification record. `margin` is the worst value of `bound − value`
/// over the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub id: CheckId,
    pub grid: String,
    pub margin: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trials: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub triggered: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub violations: Option<u64>,
}

impl LemmaReport {
    fn from_margins(id: CheckId, grid: String, margins: impl IntoIterator<Item = f64>, flip: bool) -> Self {
        let sign = if flip { -1.0 } else { 1.0 };
        let margin = margins.into_iter().map(|m| sign * m).fold(f64::INFINITY, f64::min);
        LemmaReport { id, grid, margin, pass: margin >= MARGIN_FLOOR, trials: None, triggered: None, violations: None }
    }
}

/// Grids for the lemma checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LemmaGrids {
    pub z_step: f64,
    pub alphas: Vec<f64>,
    pub l2_params: Vec<f64>,
    pub l3_alphas: Vec<f64>,
    pub l3_steps: usize,
    pub v_min: f64,
    pub v_points: usize,
    pub n_min: usize,
    pub n_max: usize,
}

impl Default for LemmaGrids {
    fn default() -> Self {
        LemmaGrids {
            z_step: 0.01,
            alphas: vec![0.01, 0.1, 1.0, 5.0],
            l2_params: vec![0.5, 1.0, 2.0],
            l3_alphas: vec![1.0, 2.0, 8.0, 32.0],
            l3_steps: 20,
            v_min: 0.001,
            v_points: 60,
            n_min: 3,
            n_max: 64,
        }
    }
}

fn z_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step).round() as usize;
    (0..=count).map(|i| lo + i as f64 * step).collect()
}

/// `√π / (4√2)`.
pub fn gamma_special_value() -> f64 {
    PI.sqrt() / (4.0 * SQRT_2)
}

/// Gap of the cdf over `[z, z + α]` is at most `α/√(2π)`.
pub fn l0_margin(z: f64, alpha: f64) -> f64 {
    alpha / (2.0 * PI).sqrt() - (std_normal_cdf(z + alpha) - std_normal_cdf(z))
}

/// For `z ≥ 0`: gap ≤ `√(2π)(Φ(α) − Φ(0))φ(z)` ≤ `αφ(z)`. Returns the smaller
/// of the two margins.
pub fn l1_margin(z: f64, alpha: f64) -> f64 {
    let gap = std_normal_cdf(z + alpha) - std_normal_cdf(z);
    let mid = (2.0 * PI).sqrt() * (std_normal_cdf(alpha) - 0.5) * std_normal_pdf(z);
    (mid - gap).min(alpha * std_normal_pdf(z) - mid)
}

/// `∫₀¹ t^(α−1) (ln 1/t)^(β−1) dt` by quadrature. The interval is split at ½
/// and each half is mapped through a square so that power singularities at
/// either end become integrable without blow-up.
pub fn gamma_integral(alpha: f64, beta: f64, tol: f64) -> Result<f64> {
    let f = |t: f64, ln_inv: f64| t.powf(alpha - 1.0) * ln_inv.powf(beta - 1.0);
    let split = std::f64::consts::FRAC_1_SQRT_2;
    // t = u², u ∈ (0, √½]
    let left = integrate(
        |u| {
            let t = u * u;
            if t == 0.0 {
                return 0.0;
            }
            2.0 * u * f(t, -t.ln())
        },
        0.0,
        UpperBound::Finite(split),
        tol / 2.0,
    )?;
    // t = 1 − w², w ∈ (0, √½]
    let right = integrate(
        |w| {
            let w2 = w * w;
            if w2 == 0.0 {
                return 0.0;
            }
            2.0 * w * f(1.0 - w2, -(-w2).ln_1p())
        },
        0.0,
        UpperBound::Finite(split),
        tol / 2.0,
    )?;
    Ok(left.value + right.value)
}

/// `|∫ − Γ(β)/α^β|` margins against the identity tolerance, plus the special
/// case `α = 2, β = 3/2`.
fn l2_margins(params: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let special = integrate(
        |t| if t <= 0.0 { 0.0 } else { t * (-t.ln()).max(0.0).sqrt() },
        0.0,
        UpperBound::Finite(1.0),
        QUAD_TOL,
    )?;
    out.push(IDENTITY_TOLERANCE - (special.value - gamma_special_value()).abs());
    for &a in params {
        for &b in params {
            let exact = (ln_gamma(b) - b * a.ln()).exp();
            let value = gamma_integral(a, b, 1e-11)?;
            out.push(IDENTITY_TOLERANCE - (value - exact).abs());
        }
    }
    Ok(out)
}

/// `∫₀^β t e^{−t} √(ln(α/t)) dt ≤ √(ln α)(1 − e^{−β + ln(β+1)}) + √π/(4√2)`.
pub fn l3_margin(alpha: f64, beta: f64) -> Result<f64> {
    let lhs = integrate(
        |t| if t <= 0.0 { 0.0 } else { t * (-t).exp() * (alpha / t).ln().max(0.0).sqrt() },
        0.0,
        UpperBound::Finite(beta),
        QUAD_TOL,
    )?;
    let rhs = alpha.ln().sqrt() * (1.0 - (-beta + (beta + 1.0).ln()).exp()) + gamma_special_value();
    Ok(rhs - lhs.value)
}

/// `φ(Φ⁻¹(1 − v)) ≤ v √(2 ln(1/v))` for `0 < v ≤ ½`.
pub fn l4_margin(v: f64) -> f64 {
    let z = -std_normal_inv_cdf(v);
    v * (2.0 * (1.0 / v).ln()).sqrt() - std_normal_pdf(z)
}

/// Right side shared by the integer bound and the Gaussian integral bound:
/// `(3/2)√(π/ln3) · √(ln n) / (n(n−1))`.
pub fn integer_rhs(n: usize) -> f64 {
    let nf = n as f64;
    1.5 * (PI / 3f64.ln()).sqrt() * nf.ln().sqrt() / (nf * (nf - 1.0))
}

/// Left side of the integer bound with exponent `−n/2 + 1 + ln(n/2)`, i.e.
/// `∫₀^{n/2−1} t e^{−t} dt` evaluated in closed form.
pub fn integer_lhs(n: usize) -> f64 {
    let nf = n as f64;
    let m = (nf - 2.0).powi(2);
    SQRT_2 / m * ((nf - 2.0).ln().sqrt() * (1.0 - (-nf / 2.0 + 1.0 + (nf / 2.0).ln()).exp()) + gamma_special_value())
}

pub fn l5_margin(n: usize) -> f64 {
    integer_rhs(n) - integer_lhs(n)
}

/// `∫₀^∞ Φ(z)^(n−2) φ(z)² dz`.
pub fn gaussian_order_integral(n: usize) -> Result<f64> {
    let power = (n - 2) as i32;
    let f = |z: f64| std_normal_cdf(z).powi(power) * std_normal_pdf(z).powi(2);
    Ok(integrate(f, 0.0, UpperBound::GaussianTail { scale: std_normal_pdf(0.0) }, QUAD_TOL)?.value)
}

pub fn l6_margin(n: usize) -> Result<f64> {
    Ok(integer_rhs(n) - gaussian_order_integral(n)?)
}

fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| {
            if i + 1 == points {
                hi
            } else {
                (a + (b - a) * i as f64 / (points - 1) as f64).exp()
            }
        })
        .collect()
}

pub fn verify_lemma(id: CheckId, grids: &LemmaGrids, flip: bool) -> Result<LemmaReport> {
    let g = grids;
    let fmt_list = |v: &[f64]| v.iter().map(|a| format!("{a}")).collect::<Vec<_>>().join(",");
    let report = match id {
        CheckId::L0 => {
            let zs = z_grid(-6.0, 6.0, g.z_step);
            let margins = zs.iter().flat_map(|&z| g.alphas.iter().map(move |&a| l0_margin(z, a)));
            LemmaReport::from_margins(id, format!("z in [-6,6] step {}; alpha in {{{}}}", g.z_step, fmt_list(&g.alphas)), margins, flip)
        }
        CheckId::L1 => {
            let zs = z_grid(0.0, 6.0, g.z_step);
            let margins = zs.iter().flat_map(|&z| g.alphas.iter().map(move |&a| l1_margin(z, a)));
            LemmaReport::from_margins(id, format!("z in [0,6] step {}; alpha in {{{}}}", g.z_step, fmt_list(&g.alphas)), margins, flip)
        }
        CheckId::L2 => LemmaReport::from_margins(
            id,
            format!("special case alpha=2, beta=3/2; (alpha,beta) in {{{}}}^2; tolerance {IDENTITY_TOLERANCE}", fmt_list(&g.l2_params)),
            l2_margins(&g.l2_params)?,
            flip,
        ),
        CheckId::L3 => {
            let mut margins = Vec::new();
            for &a in &g.l3_alphas {
                for j in 1..=g.l3_steps {
                    margins.push(l3_margin(a, a * j as f64 / g.l3_steps as f64)?);
                }
            }
            LemmaReport::from_margins(
                id,
                format!("alpha in {{{}}}; beta = alpha*j/{} for j=1..{}", fmt_list(&g.l3_alphas), g.l3_steps, g.l3_steps),
                margins,
                flip,
            )
        }
        CheckId::L4 => LemmaReport::from_margins(
            id,
            format!("v on {}-point log grid [{}, 0.5]", g.v_points, g.v_min),
            log_grid(g.v_min, 0.5, g.v_points).into_iter().map(l4_margin),
            flip,
        ),
        CheckId::L5 => LemmaReport::from_margins(
            id,
            format!("integer n in [{}, {}]", g.n_min, g.n_max),
            (g.n_min..=g.n_max).map(l5_margin),
            flip,
        ),
        CheckId::L6 => LemmaReport::from_margins(
            id,
            format!("integer n in [{}, {}]", g.n_min, g.n_max),
            (g.n_min..=g.n_max).map(l6_margin).collect::<Result<Vec<_>>>()?,
            flip,
        ),
        CheckId::TopK | CheckId::Swap => {
            return Err(RemixError::InvalidArgument(format!("{id} is not a lemma check")));
        }
    };
    Ok(report)
}

/// Random routing distribution: softmax of standard Gaussian logits.
pub fn random_distribution(n: usize, rng: &mut RngStream) -> Result<RoutingDistribution> {
    RoutingDistribution::from_logits(Vector((0..n).map(|_| rng.normal()).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BruteForceOutcome {
    pub trials: u64,
    /// Trials in which the premise held.
    pub triggered: u64,
    pub violations: u64,
}

impl BruteForceOutcome {
    fn merge(self, o: BruteForceOutcome) -> BruteForceOutcome {
        BruteForceOutcome {
            trials: self.trials + o.trials,
            triggered: self.triggered + o.triggered,
            violations: self.violations + o.violations,
        }
    }
}

fn check_small(n: usize, k: usize) -> Result<()> {
    if n > 8 || k > 4 || k == 0 || k > n {
        return Err(RemixError::InvalidArgument(format!("brute force needs n <= 8, 1 <= k <= min(4, n); got n={n}, k={k}")));
    }
    Ok(())
}

/// Whenever some `k`-subset has unordered probability above ½, it must be the
/// top-k set.
pub fn topk_trial(q: &RoutingDistribution, k: usize) -> Result<(bool, bool)> {
    let mut best: Option<Vec<usize>> = None;
    for s in subsets(q.n(), k) {
        if unordered_subset_prob(q, &s)? > 0.5 {
            best = Some(s);
            break;
        }
    }
    match best {
        Some(s) => Ok((true, s != top_k(q, k)?)),
        None => Ok((false, false)),
    }
}

pub fn check_topk_optimality(n: usize, k: usize, trials: usize, rng: &mut RngStream) -> Result<BruteForceOutcome> {
    check_small(n, k)?;
    let mut out = BruteForceOutcome { trials: trials as u64, triggered: 0, violations: 0 };
    for _ in 0..trials {
        let q = random_distribution(n, rng)?;
        let (triggered, violated) = topk_trial(&q, k)?;
        out.triggered += triggered as u64;
        out.violations += violated as u64;
    }
    Ok(out)
}

/// Change in unordered probability when `out_idx ∈ subset` is replaced by
/// `in_idx ∉ subset`.
pub fn swap_gain(q: &RoutingDistribution, subset: &[usize], out_idx: usize, in_idx: usize) -> Result<f64> {
    let before = unordered_subset_prob(q, subset)?;
    let swapped: Vec<usize> = subset.iter().map(|&i| if i == out_idx { in_idx } else { i }).collect();
    Ok(unordered_subset_prob(q, &swapped)? - before)
}

/// Random subset and a random pair across its boundary, oriented so the
/// incoming index has the larger probability. Returns the worst gain seen.
pub fn check_swap_lemma(n: usize, k: usize, trials: usize, rng: &mut RngStream) -> Result<(BruteForceOutcome, f64)> {
    check_small(n, k)?;
    if k == n {
        return Ok((BruteForceOutcome { trials: 0, triggered: 0, violations: 0 }, f64::INFINITY));
    }
    let mut out = BruteForceOutcome { trials: trials as u64, triggered: 0, violations: 0 };
    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let q = random_distribution(n, rng)?;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let inside = perm[rng.below(k)];
        let outside = perm[k + rng.below(n - k)];
        let probs = q.probs();
        let mut subset: Vec<usize> = perm[..k].to_vec();
        let (out_idx, in_idx) = if probs[inside] <= probs[outside] {
            (inside, outside)
        } else {
            // Start from the set holding `outside` instead of `inside`.
            for s in subset.iter_mut() {
                if *s == inside {
                    *s = outside;
                }
            }
            (outside, inside)
        };
        let gain = swap_gain(&q, &subset, out_idx, in_idx)?;
        out.triggered += 1;
        worst = worst.min(gain);
        if gain < -SWAP_TOLERANCE {
            out.violations += 1;
        }
    }
    Ok((out, worst))
}

/// Options for the full verification suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub grids: LemmaGrids,
    pub n_values: Vec<usize>,
    pub k_values: Vec<usize>,
    pub trials: usize,
    /// Test hook: evaluate this check with its inequality reversed.
    pub sabotage: Option<CheckId>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            grids: LemmaGrids::default(),
            n_values: vec![3, 4, 5, 6],
            k_values: vec![1, 2, 3],
            trials: 10_000,
            sabotage: None,
        }
    }
}

fn brute_force_report(
    id: CheckId,
    cfg: &VerifyConfig,
    run: impl Fn(usize, usize, &mut RngStream) -> Result<(BruteForceOutcome, f64)> + Sync,
) -> Result<LemmaReport> {
    let cells: Vec<(usize, usize)> =
        cfg.n_values.iter().flat_map(|&n| cfg.k_values.iter().filter(move |&&k| k <= n).map(move |&k| (n, k))).collect();
    let purpose = format!("verify-{id}");
    let results = cells
        .par_iter()
        .enumerate()
        .map(|(i, &(n, k))| run(n, k, &mut RngStream::new(cfg.seed, &purpose, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let total = results.iter().fold(BruteForceOutcome { trials: 0, triggered: 0, violations: 0 }, |a, r| a.merge(r.0));
    let mut margin = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let mut violations = total.violations;
    if cfg.sabotage == Some(id) {
        margin = -margin.abs().max(1.0);
        violations = violations.max(1);
    }
    Ok(LemmaReport {
        id,
        grid: format!(
            "n in {:?}, k in {:?} (k <= n), {} trials per cell, q = softmax of N(0,1) logits",
            cfg.n_values, cfg.k_values, cfg.trials
        ),
        margin,
        pass: violations == 0,
        trials: Some(total.trials),
        triggered: Some(total.triggered),
        violations: Some(violations),
    })
}

/// Runs all nine checks in a fixed order.
pub fn verify_all(cfg: &VerifyConfig) -> Result<Vec<LemmaReport>> {
    let mut reports = CheckId::LEMMAS
        .par_iter()
        .map(|&id| verify_lemma(id, &cfg.grids, cfg.sabotage == Some(id)))
        .collect::<Result<Vec<_>>>()?;
    reports.push(brute_force_report(CheckId::TopK, cfg, |n, k, rng| {
        // Margin is the negated violation count.
        let o = check_topk_optimality(n, k, cfg.trials, rng)?;
        Ok((o, 0.0 - o.violations as f64))
    })?);
    reports.push(brute_force_report(CheckId::Swap, cfg, |n, k, rng| check_swap_lemma(n, k, cfg.trials, rng))?);
    Ok(reports)
}

/// `ln 2 − 1/π`, the value of the inverse-estimate auxiliary at zero.
pub fn inverse_estimate_floor() -> f64 {
    LN_2 - 1.0 / PI
}
