//! The mixture-of-LoRAs layer.
//!
//! `y = W x + Σᵢ πᵢ Bᵢ Aᵢ x` with a frozen `W`. In remix mode `π` is the
//! constant ω on the activated adapters and zero elsewhere, so only the
//! activated low-rank products are computed. In dense mode `π = softmax(P x)`
//! over all `n` adapters and everything, including `P`, is differentiable.

use serde::{Deserialize, Serialize};

use crate::error::{RemixError, Result};
use crate::numerics::{gaussian_matrix, softmax, Matrix, RngStream, Vector};
use crate::routing::{route, RoutingDistribution};

#[cfg(test)]
thread_local! {
    static LOW_RANK_PRODUCTS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

#[cfg(test)]
fn count_low_rank_product() {
    LOW_RANK_PRODUCTS.with(|c| c.set(c.get() + 1));
}

#[cfg(not(test))]
#[inline(always)]
fn count_low_rank_product() {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Remix,
    DenseBaseline,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Remix => "remix",
            Mode::DenseBaseline => "dense-baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmegaScheme {
    Lora,
    #[default]
    Rslora,
}

pub const DEFAULT_OMEGA_NUMERATOR: f64 = 2.0;

/// Constant routing weight: `2/(k r)` (LoRA-type) or `2/√(k r)` (rsLoRA-type).
pub fn omega(scheme: OmegaScheme, k: usize, rank: usize) -> f64 {
    omega_with_numerator(scheme, k, rank, DEFAULT_OMEGA_NUMERATOR)
}

pub fn omega_with_numerator(scheme: OmegaScheme, k: usize, rank: usize, numerator: f64) -> f64 {
    let kr = (k * rank) as f64;
    match scheme {
        OmegaScheme::Lora => numerator / kr,
        OmegaScheme::Rslora => numerator / kr.sqrt(),
    }
}

/// One adapter: `ΔW = B A` with `A: r×D_in`, `B: D_out×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

/// Per-adapter routing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingWeights {
    pub pi: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub n: usize,
    pub k: usize,
    pub rank: usize,
    pub mode: Mode,
    pub omega_scheme: OmegaScheme,
    pub omega_numerator: f64,
    /// Router init std-dev; `None` means `√(2/D_in)`.
    pub router_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureLayer {
    w: Matrix,
    loras: Vec<LoraPair>,
    router: Matrix,
    mode: Mode,
    omega_scheme: OmegaScheme,
    omega_numerator: f64,
    k: usize,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub x: Vector,
    /// Adapters that contributed, in forward order.
    pub active: Vec<usize>,
    /// `Aᵢ x` for each entry of `active`.
    pub ax: Vec<Vector>,
    /// `Bᵢ Aᵢ x` for each entry of `active`; only kept in dense mode.
    pub bax: Vec<Vector>,
    pub weights: RoutingWeights,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrad {
    pub index: usize,
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemixGrads {
    /// One entry per activated adapter; inactive adapters get no gradient.
    pub loras: Vec<LoraGrad>,
    pub x: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub loras: Vec<LoraGrad>,
    pub router: Matrix,
    pub x: Vector,
}

impl MixtureLayer {
    pub fn new(
        w: Matrix,
        loras: Vec<LoraPair>,
        router: Matrix,
        mode: Mode,
        omega_scheme: OmegaScheme,
        omega_numerator: f64,
        k: usize,
    ) -> Result<Self> {
        let (d_out, d_in) = w.shape();
        let n = loras.len();
        if n == 0 || k == 0 || k > n {
            return Err(RemixError::InvalidArgument(format!("need 1 <= k <= n, got k={k}, n={n}")));
        }
        let rank = loras[0].rank();
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(RemixError::InvalidArgument(format!("rank {rank} outside [1, {}]", d_in.min(d_out))));
        }
        for (i, l) in loras.iter().enumerate() {
            if l.a.shape() != (rank, d_in) || l.b.shape() != (d_out, rank) {
                return Err(RemixError::Shape(format!(
                    "adapter {i}: A {:?}, B {:?}, expected A ({rank}, {d_in}) and B ({d_out}, {rank})",
                    l.a.shape(),
                    l.b.shape()
                )));
            }
        }
        if router.shape() != (n, d_in) {
            return Err(RemixError::Shape(format!("router {:?}, expected ({n}, {d_in})", router.shape())));
        }
        if !(omega_numerator > 0.0 && omega_numerator.is_finite()) {
            return Err(RemixError::InvalidArgument(format!("omega numerator {omega_numerator}")));
        }
        Ok(MixtureLayer { w, loras, router, mode, omega_scheme, omega_numerator, k })
    }

    /// Fresh layer around a frozen `w`: `A ~ N(0, 1/D_in)`, `B = 0`,
    /// `P ~ N(0, σ²)`. Adapter `i` of layer `layer` draws from stream
    /// `("lora_a", layer·n + i)`, the router from `("router", layer)`.
    pub fn init(w: Matrix, cfg: &LayerConfig, seed: u64, layer: usize) -> Result<Self> {
        let (d_out, d_in) = w.shape();
        let a_sigma = 1.0 / (d_in as f64).sqrt();
        let loras = (0..cfg.n)
            .map(|i| {
                let mut rng = RngStream::new(seed, "lora_a", (layer * cfg.n + i) as u64);
                Ok(LoraPair { a: gaussian_matrix(&mut rng, cfg.rank, d_in, a_sigma)?, b: Matrix::zeros(d_out, cfg.rank) })
            })
            .collect::<Result<Vec<_>>>()?;
        let sigma = cfg.router_sigma.unwrap_or_else(|| (2.0 / d_in as f64).sqrt());
        let router = gaussian_matrix(&mut RngStream::new(seed, "router", layer as u64), cfg.n, d_in, sigma)?;
        MixtureLayer::new(w, loras, router, cfg.mode, cfg.omega_scheme, cfg.omega_numerator, cfg.k)
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn loras(&self) -> &[LoraPair] {
        &self.loras
    }

    pub fn loras_mut(&mut self) -> &mut [LoraPair] {
        &mut self.loras
    }

    pub fn router(&self) -> &Matrix {
        &self.router
    }

    pub fn router_mut(&mut self) -> &mut Matrix {
        &mut self.router
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn omega_scheme(&self) -> OmegaScheme {
        self.omega_scheme
    }

    pub fn omega_numerator(&self) -> f64 {
        self.omega_numerator
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.loras.len()
    }

    pub fn rank(&self) -> usize {
        self.loras[0].rank()
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    /// The constant weight given to every activated adapter.
    pub fn omega(&self) -> f64 {
        omega_with_numerator(self.omega_scheme, self.k, self.rank(), self.omega_numerator)
    }

    pub fn route(&self, x: &Vector) -> Result<RoutingDistribution> {
        route(&self.router, x)
    }

    /// Remix-mode weights for an activated list: ω on each entry, 0 elsewhere.
    pub fn remix_weights(&self, active: &[usize]) -> RoutingWeights {
        let mut pi = Vector::zeros(self.n());
        for &i in active {
            pi[i] = self.omega();
        }
        RoutingWeights { pi }
    }

    fn check_input(&self, x: &Vector) -> Result<()> {
        if x.dim() != self.d_in() {
            return Err(RemixError::Shape(format!("input dim {} for a layer with D_in={}", x.dim(), self.d_in())));
        }
        Ok(())
    }

    fn check_active(&self, active: &[usize]) -> Result<()> {
        if active.is_empty() {
            return Err(RemixError::InvalidArgument("empty activation list".into()));
        }
        let mut seen = vec![false; self.n()];
        for &i in active {
            if i >= self.n() {
                return Err(RemixError::InvalidArgument(format!("adapter {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(RemixError::InvalidArgument(format!("duplicate active adapter {i}")));
            }
        }
        Ok(())
    }

    /// `W x + Σ_{(i, πᵢ)} πᵢ Bᵢ Aᵢ x` over the listed adapters only.
    fn weighted_sum(&self, x: &Vector, terms: &[(usize, f64)], keep_bax: bool) -> (Vector, Vec<Vector>, Vec<Vector>) {
        let mut y = self.w.mul_vec(x);
        let mut ax_all = Vec::with_capacity(terms.len());
        let mut bax_all = Vec::new();
        for &(i, weight) in terms {
            let lora = &self.loras[i];
            count_low_rank_product();
            let ax = lora.a.mul_vec(x);
            let bax = lora.b.mul_vec(&ax);
            y.axpy(weight, &bax);
            ax_all.push(ax);
            if keep_bax {
                bax_all.push(bax);
            }
        }
        (y, ax_all, bax_all)
    }

    /// `y = W x + ω Σⱼ B_{iⱼ} A_{iⱼ} x` over the activated adapters.
    ///
    /// The list is normally of length `k`; evaluation with a different count
    /// keeps the layer's trained ω. Adapters are summed in ascending index
    /// order, so the result does not depend on the order of `active`.
    pub fn forward_remix(&self, x: &Vector, active: &[usize]) -> Result<(Vector, LayerCache)> {
        self.check_input(x)?;
        self.check_active(active)?;
        let w = self.omega();
        let mut active = active.to_vec();
        active.sort_unstable();
        let terms: Vec<(usize, f64)> = active.iter().map(|&i| (i, w)).collect();
        let (y, ax, _) = self.weighted_sum(x, &terms, false);
        let cache = LayerCache {
            x: x.clone(),
            weights: self.remix_weights(&active),
            active,
            ax,
            bax: Vec::new(),
            mode: Mode::Remix,
        };
        Ok((y, cache))
    }

    /// `y = W x + Σᵢ πᵢ Bᵢ Aᵢ x` for caller-supplied weights, summing every adapter.
    pub fn forward_fixed_weights(&self, x: &Vector, weights: &RoutingWeights) -> Result<Vector> {
        self.check_input(x)?;
        if weights.pi.dim() != self.n() {
            return Err(RemixError::Shape(format!("{} weights for {} adapters", weights.pi.dim(), self.n())));
        }
        let terms: Vec<(usize, f64)> = weights.pi.iter().copied().enumerate().collect();
        Ok(self.weighted_sum(x, &terms, false).0)
    }

    /// Dense learnable-softmax forward over all `n` adapters.
    pub fn forward_dense(&self, x: &Vector) -> Result<(Vector, LayerCache)> {
        if self.mode != Mode::DenseBaseline {
            return Err(RemixError::InvalidArgument("forward_dense on a remix-mode layer".into()));
        }
        self.check_input(x)?;
        let pi = softmax(&self.router.mul_vec(x))?;
        let terms: Vec<(usize, f64)> = pi.iter().copied().enumerate().collect();
        let (y, ax, bax) = self.weighted_sum(x, &terms, true);
        let cache = LayerCache {
            x: x.clone(),
            active: (0..self.n()).collect(),
            ax,
            bax,
            weights: RoutingWeights { pi },
            mode: Mode::DenseBaseline,
        };
        Ok((y, cache))
    }

    fn check_upstream(&self, cache: &LayerCache, g: &Vector, expected: Mode) -> Result<()> {
        if cache.mode != expected {
            return Err(RemixError::CacheMode { expected: expected.name(), found: cache.mode.name() });
        }
        if g.dim() != self.d_out() {
            return Err(RemixError::Shape(format!("upstream dim {} for D_out={}", g.dim(), self.d_out())));
        }
        Ok(())
    }

    /// Backward pass of a remix forward:
    /// `∂B = ω g ⊗ (A x)`, `∂A = ω (Bᵀ g) ⊗ x`, `∂x = Wᵀ g + ω Σ Aᵀ Bᵀ g`.
    pub fn backward_lora(&self, cache: &LayerCache, g: &Vector) -> Result<RemixGrads> {
        self.check_upstream(cache, g, Mode::Remix)?;
        let w = self.omega();
        let mut grad_x = self.w.mul_t_vec(g);
        let mut loras = Vec::with_capacity(cache.active.len());
        for (&i, ax) in cache.active.iter().zip(&cache.ax) {
            let lora = &self.loras[i];
            let btg = lora.b.mul_t_vec(g);
            let mut gb = Matrix::zeros(self.d_out(), self.rank());
            gb.add_outer(w, g, ax);
            let mut ga = Matrix::zeros(self.rank(), self.d_in());
            ga.add_outer(w, &btg, &cache.x);
            grad_x.axpy(w, &lora.a.mul_t_vec(&btg));
            loras.push(LoraGrad { index: i, a: ga, b: gb });
        }
        Ok(RemixGrads { loras, x: grad_x })
    }

    /// Backward pass of a dense forward, including the softmax path into `P`.
    pub fn backward_dense(&self, cache: &LayerCache, g: &Vector) -> Result<DenseGrads> {
        self.check_upstream(cache, g, Mode::DenseBaseline)?;
        let pi = &cache.weights.pi;
        let mut grad_x = self.w.mul_t_vec(g);
        let mut loras = Vec::with_capacity(self.n());
        let mut sens = Vector::zeros(self.n());
        for (i, lora) in self.loras.iter().enumerate() {
            let btg = lora.b.mul_t_vec(g);
            let mut gb = Matrix::zeros(self.d_out(), self.rank());
            gb.add_outer(pi[i], g, &cache.ax[i]);
            let mut ga = Matrix::zeros(self.rank(), self.d_in());
            ga.add_outer(pi[i], &btg, &cache.x);
            grad_x.axpy(pi[i], &lora.a.mul_t_vec(&btg));
            sens[i] = g.dot(&cache.bax[i]);
            loras.push(LoraGrad { index: i, a: ga, b: gb });
        }
        // ∂ξ_a = π_a (s_a − Σ_b π_b s_b)
        let mean = pi.dot(&sens);
        let dlogits = Vector(pi.iter().zip(sens.iter()).map(|(p, s)| p * (s - mean)).collect());
        let router = Matrix::outer(&dlogits, &cache.x);
        grad_x.axpy(1.0, &self.router.mul_t_vec(&dlogits));
        Ok(DenseGrads { loras, router, x: grad_x })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use crate::routing::ess;

    fn random_layer(seed: u64, d: usize, n: usize, k: usize, r: usize, mode: Mode) -> MixtureLayer {
        let mut rng = RngStream::new(seed, "test-layer", 0);
        let w = gaussian_matrix(&mut rng, d, d, 0.5).unwrap();
        let loras = (0..n)
            .map(|_| LoraPair {
                a: gaussian_matrix(&mut rng, r, d, 0.7).unwrap(),
                b: gaussian_matrix(&mut rng, d, r, 0.7).unwrap(),
            })
            .collect();
        let router = gaussian_matrix(&mut rng, n, d, 0.9).unwrap();
        MixtureLayer::new(w, loras, router, mode, OmegaScheme::Rslora, 2.0, k).unwrap()
    }

    fn random_vec(rng: &mut RngStream, d: usize) -> Vector {
        Vector((0..d).map(|_| rng.normal()).collect())
    }

    fn rel_close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn omega_values() {
        assert_eq!(omega(OmegaScheme::Lora, 4, 8), 0.0625);
        assert_eq!(omega(OmegaScheme::Rslora, 1, 4), 1.0);
        assert!((omega(OmegaScheme::Rslora, 4, 8) - 0.353_553_4).abs() < 1e-7);
    }

    #[test]
    fn constructor_validates() {
        let layer = random_layer(1, 4, 3, 2, 2, Mode::Remix);
        let bad_k = MixtureLayer::new(
            layer.w.clone(),
            layer.loras.clone(),
            layer.router.clone(),
            Mode::Remix,
            OmegaScheme::Lora,
            2.0,
            4,
        );
        assert!(bad_k.is_err());
        let bad_router =
            MixtureLayer::new(layer.w.clone(), layer.loras.clone(), Matrix::zeros(2, 4), Mode::Remix, OmegaScheme::Lora, 2.0, 1);
        assert!(matches!(bad_router, Err(RemixError::Shape(_))));
    }

    #[test]
    fn zero_b_is_identity_perturbation() {
        let w = Matrix::identity(5).scaled(0.5);
        let cfg = LayerConfig {
            n: 4,
            k: 2,
            rank: 2,
            mode: Mode::Remix,
            omega_scheme: OmegaScheme::Rslora,
            omega_numerator: 2.0,
            router_sigma: None,
        };
        let layer = MixtureLayer::init(w.clone(), &cfg, 3, 0).unwrap();
        let mut rng = RngStream::new(2, "x", 0);
        for active in [vec![0, 1], vec![3, 2], vec![1, 3]] {
            let x = random_vec(&mut rng, 5);
            let (y, _) = layer.forward_remix(&x, &active).unwrap();
            assert_eq!(y, w.matvec(&x).unwrap());
        }
    }

    #[test]
    fn single_adapter_matches_plain_lora() {
        let layer = random_layer(4, 6, 1, 1, 2, Mode::Remix);
        let x = random_vec(&mut RngStream::new(4, "x", 0), 6);
        let (y, _) = layer.forward_remix(&x, &[0]).unwrap();
        // plain LoRA written out entry by entry
        let (a, b) = (&layer.loras[0].a, &layer.loras[0].b);
        let scale = omega(OmegaScheme::Rslora, 1, 2);
        for o in 0..6 {
            let mut expected = 0.0;
            for j in 0..6 {
                expected += layer.w[(o, j)] * x[j];
            }
            let mut lora = 0.0;
            for s in 0..2 {
                let mut ax = 0.0;
                for j in 0..6 {
                    ax += a[(s, j)] * x[j];
                }
                lora += b[(o, s)] * ax;
            }
            expected += scale * lora;
            assert!((y[o] - expected).abs() <= 1e-12, "{o}");
        }
    }

    #[test]
    fn full_activation_matches_uniform_weights() {
        let layer = random_layer(5, 6, 3, 3, 2, Mode::Remix);
        let x = random_vec(&mut RngStream::new(5, "x", 0), 6);
        let (y, cache) = layer.forward_remix(&x, &[2, 0, 1]).unwrap();
        let uniform = RoutingWeights { pi: Vector(vec![layer.omega(); 3]) };
        let dense = layer.forward_fixed_weights(&x, &uniform).unwrap();
        for (a, b) in y.iter().zip(dense.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(ess(&cache.weights.pi).unwrap(), 3.0);
    }

    #[test]
    fn remix_weights_have_ess_exactly_k() {
        let layer = random_layer(6, 4, 8, 3, 2, Mode::Remix);
        for active in [vec![0, 4, 7], vec![5, 1, 2]] {
            let w = layer.remix_weights(&active);
            assert_eq!(ess(&w.pi).unwrap(), 3.0);
            assert_eq!(w.pi.iter().filter(|&&p| p == layer.omega()).count(), 3);
            assert_eq!(w.pi.iter().filter(|&&p| p == 0.0).count(), 5);
        }
    }

    #[test]
    fn duplicate_active_rejected() {
        let layer = random_layer(7, 4, 3, 2, 2, Mode::Remix);
        assert!(layer.forward_remix(&Vector::zeros(4), &[1, 1]).is_err());
        assert!(layer.forward_remix(&Vector::zeros(4), &[3]).is_err());
    }

    #[test]
    fn remix_cost_scales_with_k() {
        let layer = random_layer(8, 6, 8, 2, 2, Mode::Remix);
        LOW_RANK_PRODUCTS.with(|c| c.set(0));
        layer.forward_remix(&Vector::zeros(6), &[3, 5]).unwrap();
        assert_eq!(LOW_RANK_PRODUCTS.with(|c| c.get()), 2);
    }

    #[test]
    fn dense_examples() {
        let single = random_layer(9, 5, 1, 1, 2, Mode::DenseBaseline);
        let x = random_vec(&mut RngStream::new(9, "x", 0), 5);
        let (y, cache) = single.forward_dense(&x).unwrap();
        assert_eq!(cache.weights.pi.0, vec![1.0]);
        let (y_plain, _) = {
            let mut plain = single.clone();
            plain.mode = Mode::Remix;
            let unit = RoutingWeights { pi: Vector(vec![1.0]) };
            (plain.forward_fixed_weights(&x, &unit).unwrap(), ())
        };
        assert_eq!(y, y_plain);
        let grads = single.backward_dense(&cache, &random_vec(&mut RngStream::new(9, "g", 0), 5)).unwrap();
        assert!(grads.router.data().iter().all(|&v| v == 0.0));

        let mut zero_b = random_layer(10, 5, 4, 2, 2, Mode::DenseBaseline);
        for l in &mut zero_b.loras {
            l.b = Matrix::zeros(5, 2);
        }
        assert_eq!(zero_b.forward_dense(&x).unwrap().0, zero_b.w.matvec(&x).unwrap());
    }

    #[test]
    fn dense_matches_branch_sum() {
        let layer = random_layer(11, 5, 4, 2, 2, Mode::DenseBaseline);
        let x = random_vec(&mut RngStream::new(11, "x", 0), 5);
        let (y, _) = layer.forward_dense(&x).unwrap();
        let logits: Vec<f64> = (0..4).map(|i| layer.router.row(i).iter().zip(x.iter()).map(|(p, v)| p * v).sum()).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mut expected = layer.w.matvec(&x).unwrap();
        for (i, lora) in layer.loras.iter().enumerate() {
            let branch = lora.b.matvec(&lora.a.matvec(&x).unwrap()).unwrap();
            expected.axpy(logits[i].exp() / z, &branch);
        }
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_branches_give_zero_router_grad() {
        let mut layer = random_layer(12, 4, 3, 1, 2, Mode::DenseBaseline);
        let shared = layer.loras[0].clone();
        for l in &mut layer.loras {
            *l = shared.clone();
        }
        let x = random_vec(&mut RngStream::new(12, "x", 0), 4);
        let (_, cache) = layer.forward_dense(&x).unwrap();
        let grads = layer.backward_dense(&cache, &random_vec(&mut RngStream::new(12, "g", 0), 4)).unwrap();
        assert!(grads.router.frobenius() <= 1e-14);
    }

    #[test]
    fn backward_trivial_cases() {
        let mut layer = random_layer(13, 4, 3, 2, 2, Mode::Remix);
        layer.loras[1].b = Matrix::zeros(4, 2);
        let x = random_vec(&mut RngStream::new(13, "x", 0), 4);
        let (_, cache) = layer.forward_remix(&x, &[1, 2]).unwrap();
        let g = random_vec(&mut RngStream::new(13, "g", 0), 4);
        let grads = layer.backward_lora(&cache, &g).unwrap();
        assert_eq!(grads.loras.len(), 2);
        assert!(grads.loras[0].a.data().iter().all(|&v| v == 0.0));
        let zero = layer.backward_lora(&cache, &Vector::zeros(4)).unwrap();
        assert!(zero.x.iter().all(|&v| v == 0.0));
        assert!(zero.loras.iter().all(|l| l.a.frobenius() == 0.0 && l.b.frobenius() == 0.0));
        assert!(matches!(layer.backward_dense(&cache, &g), Err(RemixError::CacheMode { .. })));
    }

    /// ½‖y − t‖² through a layer, with one parameter block replaced by `theta`.
    #[derive(Clone, Copy)]
    enum Block {
        A(usize),
        B(usize),
        Router,
        Input,
    }

    fn perturbed(layer: &MixtureLayer, block: Block, theta: &Vector) -> MixtureLayer {
        let mut l = layer.clone();
        match block {
            Block::A(i) => l.loras[i].a = Matrix::from_vec(l.rank(), l.d_in(), theta.0.clone()).unwrap(),
            Block::B(i) => l.loras[i].b = Matrix::from_vec(l.d_out(), l.rank(), theta.0.clone()).unwrap(),
            Block::Router => l.router = Matrix::from_vec(l.n(), l.d_in(), theta.0.clone()).unwrap(),
            Block::Input => {}
        }
        l
    }

    fn check_block(
        layer: &MixtureLayer,
        x: &Vector,
        t: &Vector,
        block: Block,
        analytic: &[f64],
        forward: &dyn Fn(&MixtureLayer, &Vector) -> Vector,
    ) {
        let start = match block {
            Block::A(i) => Vector(layer.loras[i].a.data().to_vec()),
            Block::B(i) => Vector(layer.loras[i].b.data().to_vec()),
            Block::Router => Vector(layer.router.data().to_vec()),
            Block::Input => x.clone(),
        };
        let loss = |theta: &Vector| {
            let (l, input) = match block {
                Block::Input => (layer.clone(), theta.clone()),
                _ => (perturbed(layer, block, theta), x.clone()),
            };
            0.5 * forward(&l, &input).sub(t).norm_sq()
        };
        let fd = finite_diff_grad(loss, &start, 1e-5);
        for (a, b) in analytic.iter().zip(fd.iter()) {
            assert!(rel_close(*a, *b, 1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn remix_gradients_match_finite_differences() {
        let mut rng = RngStream::new(14, "gradcheck-remix", 0);
        for trial in 0..50 {
            let layer = random_layer(100 + trial, 6, 4, 2, 2, Mode::Remix);
            let x = random_vec(&mut rng, 6);
            let t = random_vec(&mut rng, 6);
            let first = rng.below(4);
            let second = (first + 1 + rng.below(3)) % 4;
            let active = vec![first, second];
            let (y, cache) = layer.forward_remix(&x, &active).unwrap();
            let g = y.sub(&t);
            let grads = layer.backward_lora(&cache, &g).unwrap();
            let fwd = |l: &MixtureLayer, v: &Vector| l.forward_remix(v, &active).unwrap().0;
            for lg in &grads.loras {
                check_block(&layer, &x, &t, Block::A(lg.index), lg.a.data(), &fwd);
                check_block(&layer, &x, &t, Block::B(lg.index), lg.b.data(), &fwd);
            }
            check_block(&layer, &x, &t, Block::Input, grads.x.as_slice(), &fwd);
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = RngStream::new(15, "gradcheck-dense", 0);
        for trial in 0..50 {
            let layer = random_layer(200 + trial, 5, 3, 1, 2, Mode::DenseBaseline);
            let x = random_vec(&mut rng, 5);
            let t = random_vec(&mut rng, 5);
            let (y, cache) = layer.forward_dense(&x).unwrap();
            let grads = layer.backward_dense(&cache, &y.sub(&t)).unwrap();
            let fwd = |l: &MixtureLayer, v: &Vector| l.forward_dense(v).unwrap().0;
            for lg in &grads.loras {
                check_block(&layer, &x, &t, Block::A(lg.index), lg.a.data(), &fwd);
                check_block(&layer, &x, &t, Block::B(lg.index), lg.b.data(), &fwd);
            }
            check_block(&layer, &x, &t, Block::Router, grads.router.data(), &fwd);
            check_block(&layer, &x, &t, Block::Input, grads.x.as_slice(), &fwd);
        }
    }
}
