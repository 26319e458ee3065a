//! Desk-scale finetuning on synthetic clustered regression.
//!
//! A frozen base network (`L` square layers, tanh between them, a linear head)
//! defines the shared map. Each cluster adds its own low-rank correction to
//! every base layer, and the adapters must learn those corrections. Three
//! modes are trained on the same data:
//!
//! * `remix`: constant-weight mixture, `M` sampled selections per example,
//!   router trained by the leave-one-out estimator;
//! * `dense-baseline`: learnable softmax weights over all adapters;
//! * `single-lora`: one adapter per layer, i.e. the dense mixture with `n = 1`.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RemixError, Result};
use crate::mixture::{LayerCache, LayerConfig, LoraPair, Mode, MixtureLayer, OmegaScheme, DEFAULT_OMEGA_NUMERATOR};
use crate::numerics::{gaussian_matrix, Matrix, RngStream, Vector};
use crate::rloo::{rloo_router_grad, Rollout, RolloutSet};
use crate::routing::{ess, sample_without_replacement, selection_score_grad, top_k, Selection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub dim: usize,
    pub clusters: usize,
    /// Norm of the cluster centers relative to the within-cluster spread.
    pub separation: f64,
    pub correction_rank: usize,
    /// Size of each correction relative to the base layer, `‖Δx‖ ≈ scale·‖x‖`.
    pub correction_scale: f64,
    pub noise: f64,
    /// Root-mean-square input norm.
    pub input_scale: f64,
    pub train_size: usize,
    pub eval_size: usize,
    pub layers: usize,
    pub output_dim: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            dim: 32,
            clusters: 4,
            separation: 2.0,
            correction_rank: 4,
            correction_scale: 1.0,
            noise: 0.01,
            input_scale: 2.0,
            train_size: 4096,
            eval_size: 1024,
            layers: 2,
            output_dim: 32,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(RemixError::InvalidArgument(format!("task.{field}: {why}")));
        if self.dim == 0 {
            return bad("dim", "must be at least 1");
        }
        if self.clusters < 2 {
            return bad("clusters", "must be at least 2");
        }
        if self.correction_rank > self.dim {
            return bad("correction_rank", "must not exceed dim");
        }
        if self.train_size == 0 {
            return bad("train_size", "must be at least 1");
        }
        if self.eval_size == 0 {
            return bad("eval_size", "must be at least 1");
        }
        if self.layers == 0 {
            return bad("layers", "must be at least 1");
        }
        if self.output_dim == 0 {
            return bad("output_dim", "must be at least 1");
        }
        for (name, v) in [("separation", self.separation), ("noise", self.noise), ("correction_scale", self.correction_scale), ("input_scale", self.input_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be finite and non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vector,
    pub target: Vector,
    pub cluster: usize,
}

/// The generating network.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub base: Vec<Matrix>,
    pub head: Matrix,
    /// `corrections[l][c]`, added to `base[l]` for inputs from cluster `c`.
    pub corrections: Vec<Vec<Matrix>>,
    pub centers: Vec<Vector>,
}

impl GroundTruth {
    /// Noise-free target for an input from `cluster`.
    pub fn output(&self, x: &Vector, cluster: usize) -> Vector {
        let mut h = x.clone();
        let last = self.base.len() - 1;
        for (l, w) in self.base.iter().enumerate() {
            let mut y = w.mul_vec(&h);
            y.axpy(1.0, &self.corrections[l][cluster].mul_vec(&h));
            h = if l < last { activation(&y) } else { y };
        }
        self.head.mul_vec(&h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub truth: GroundTruth,
}

/// Inputs are `a·(μ_c + ε)/√(1 + s²)` with `‖μ_c‖ ≈ s`, `‖ε‖ ≈ 1` and
/// `a = input_scale`, so `E‖x‖² = a²`. Every draw comes from a named stream of `seed`.
pub fn gen_cluster_task(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.dim;
    let unit = 1.0 / (d as f64).sqrt();
    let base = (0..spec.layers)
        .map(|l| gaussian_matrix(&mut RngStream::new(seed, "task-base", l as u64), d, d, unit))
        .collect::<Result<Vec<_>>>()?;
    let head = gaussian_matrix(&mut RngStream::new(seed, "task-head", 0), spec.output_dim, d, unit)?;
    let corrections = (0..spec.layers)
        .map(|l| {
            (0..spec.clusters)
                .map(|c| {
                    if spec.correction_rank == 0 || spec.correction_scale == 0.0 {
                        return Ok(Matrix::zeros(d, d));
                    }
                    let r = spec.correction_rank;
                    let mut rng = RngStream::new(seed, "task-correction", (l * spec.clusters + c) as u64);
                    let u = gaussian_matrix(&mut rng, d, r, unit)?;
                    let v = gaussian_matrix(&mut rng, d, r, 1.0 / (r as f64).sqrt())?;
                    let mut delta = Matrix::zeros(d, d);
                    for j in 0..r {
                        let uj = Vector((0..d).map(|i| u[(i, j)]).collect());
                        let vj = Vector((0..d).map(|i| v[(i, j)]).collect());
                        delta.add_outer(spec.correction_scale, &uj, &vj);
                    }
                    Ok(delta)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut crng = RngStream::new(seed, "task-centers", 0);
    let centers: Vec<Vector> =
        (0..spec.clusters).map(|_| Vector((0..d).map(|_| spec.separation * unit * crng.normal()).collect())).collect();
    let truth = GroundTruth { base, head, corrections, centers };
    let norm = spec.input_scale / (1.0 + spec.separation * spec.separation).sqrt();
    let draw = |purpose: &str, i: usize| {
        let mut rng = RngStream::new(seed, purpose, i as u64);
        let cluster = rng.below(spec.clusters);
        let mut x = truth.centers[cluster].clone();
        for v in x.0.iter_mut() {
            *v += unit * rng.normal();
        }
        let x = x.scaled(norm);
        let mut target = truth.output(&x, cluster);
        if spec.noise > 0.0 {
            for v in target.0.iter_mut() {
                *v += spec.noise * rng.normal();
            }
        }
        Example { x, target, cluster }
    };
    let train = (0..spec.train_size).map(|i| draw("task-train", i)).collect();
    let eval = (0..spec.eval_size).map(|i| draw("task-eval", i)).collect();
    Ok(Dataset { train, eval, truth })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Remix,
    DenseBaseline,
    SingleLora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Sampled selections per example (remix only).
    pub rollouts: usize,
    pub k: usize,
    pub n: usize,
    pub rank: usize,
    pub omega_scheme: OmegaScheme,
    pub omega_numerator: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub bit_exact: bool,
    /// Std-dev of the router initialization.
    pub router_sigma: f64,
    /// Keep adapters and head fixed; only routers train.
    pub freeze_adapters: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Remix,
            rollouts: 4,
            k: 2,
            n: 8,
            rank: 4,
            omega_scheme: OmegaScheme::Rslora,
            omega_numerator: DEFAULT_OMEGA_NUMERATOR,
            learning_rate: 10.0,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            bit_exact: false,
            router_sigma: 1.0,
            freeze_adapters: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(RemixError::InvalidArgument(format!("train.{field}: {why}")));
        if self.mode == TrainMode::Remix && self.rollouts < 2 {
            return bad("rollouts", format!("remix mode needs at least 2, got {}", self.rollouts));
        }
        if self.mode != TrainMode::SingleLora {
            if self.n == 0 {
                return bad("n", "must be at least 1".into());
            }
            if self.k == 0 || self.k > self.n {
                return bad("k", format!("must lie in [1, n={}], got {}", self.n, self.k));
            }
        }
        if self.rank == 0 {
            return bad("rank", "must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.router_sigma > 0.0 && self.router_sigma.is_finite()) {
            return bad("router_sigma", format!("must be positive, got {}", self.router_sigma));
        }
        if !(self.omega_numerator > 0.0 && self.omega_numerator.is_finite()) {
            return bad("omega_numerator", format!("must be positive, got {}", self.omega_numerator));
        }
        Ok(())
    }

    /// Adapter count, active count and layer mode actually built.
    pub fn layer_shape(&self) -> (usize, usize, Mode) {
        match self.mode {
            TrainMode::Remix => (self.n, self.k, Mode::Remix),
            TrainMode::DenseBaseline => (self.n, self.k, Mode::DenseBaseline),
            TrainMode::SingleLora => (1, 1, Mode::DenseBaseline),
        }
    }
}

/// Stack of mixture layers with tanh in between and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<MixtureLayer>,
    pub head: Matrix,
}

pub fn activation(y: &Vector) -> Vector {
    Vector(y.iter().map(|v| v.tanh()).collect())
}

impl Model {
    pub fn new(layers: Vec<MixtureLayer>, head: Matrix) -> Result<Self> {
        if layers.is_empty() {
            return Err(RemixError::InvalidArgument("model needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(RemixError::Shape(format!("layer {l} outputs {} but layer {} takes {}", pair[0].d_out(), l + 1, pair[1].d_in())));
            }
        }
        let last = layers.last().map(MixtureLayer::d_out).unwrap_or(0);
        if head.cols() != last {
            return Err(RemixError::Shape(format!("head takes {} inputs, last layer gives {last}", head.cols())));
        }
        Ok(Model { layers, head })
    }

    /// Frozen base layers and head from the ground truth, fresh adapters and routers.
    pub fn init(truth: &GroundTruth, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, k, mode) = cfg.layer_shape();
        let layer_cfg = LayerConfig {
            n,
            k,
            rank: cfg.rank,
            mode,
            omega_scheme: cfg.omega_scheme,
            omega_numerator: cfg.omega_numerator,
            router_sigma: Some(cfg.router_sigma),
        };
        let layers = truth
            .base
            .iter()
            .enumerate()
            .map(|(l, w)| MixtureLayer::init(w.clone(), &layer_cfg, cfg.seed, l))
            .collect::<Result<Vec<_>>>()?;
        Model::new(layers, truth.head.clone())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.head.rows()
    }

    pub fn mode(&self) -> Mode {
        self.layers[0].mode()
    }
}

/// Intermediates of one forward pass through the model.
#[derive(Debug, Clone)]
pub struct Pass {
    pub caches: Vec<LayerCache>,
    pub last: Vector,
    pub out: Vector,
}

/// Forward where `choose(l, layer, x)` returns the activated list of layer
/// `l`, or `None` for a dense layer.
fn forward_with<F>(model: &Model, x: &Vector, mut choose: F) -> Result<Pass>
where
    F: FnMut(usize, &MixtureLayer, &Vector) -> Result<Option<Vec<usize>>>,
{
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(model.layers.len());
    let last_idx = model.layers.len() - 1;
    let mut last = Vector::zeros(0);
    for (l, layer) in model.layers.iter().enumerate() {
        let (y, cache) = match choose(l, layer, &h)? {
            Some(active) => layer.forward_remix(&h, &active)?,
            None => layer.forward_dense(&h)?,
        };
        caches.push(cache);
        if l < last_idx {
            h = activation(&y);
        } else {
            last = y;
        }
    }
    let out = model.head.matvec(&last)?;
    Ok(Pass { caches, last, out })
}

pub fn forward_selection(model: &Model, x: &Vector, selection: &Selection) -> Result<Pass> {
    if selection.layers() != model.num_layers() {
        return Err(RemixError::Shape(format!("{}-layer selection for a {}-layer model", selection.layers(), model.num_layers())));
    }
    forward_with(model, x, |l, _, _| Ok(Some(selection.per_layer[l].clone())))
}

pub fn forward_dense_model(model: &Model, x: &Vector) -> Result<Pass> {
    forward_with(model, x, |_, _, _| Ok(None))
}

/// Top-k routing at every layer; returns the pass and the chosen subsets.
pub fn forward_top_k(model: &Model, x: &Vector, k: usize) -> Result<(Pass, Selection)> {
    let mut chosen = Vec::new();
    let pass = forward_with(model, x, |_, layer, h| {
        let s = top_k(&layer.route(h)?, k)?;
        chosen.push(s.clone());
        Ok(Some(s))
    })?;
    Ok((pass, Selection::new(chosen)))
}

/// One sampled rollout: selection layer by layer from each layer's router
/// at its actual input, plus `∇_P log Q` per layer.
pub fn forward_sampled(model: &Model, x: &Vector, k: usize, rng: &mut RngStream) -> Result<(Pass, Selection, Vec<Matrix>)> {
    let mut chosen = Vec::new();
    let mut scores = Vec::new();
    let pass = forward_with(model, x, |_, layer, h| {
        let q = layer.route(h)?;
        let s = sample_without_replacement(&q, k, rng)?;
        scores.push(selection_score_grad(&q, h, &s)?);
        chosen.push(s.clone());
        Ok(Some(s))
    })?;
    Ok((pass, Selection::new(chosen), scores))
}

/// `½ · mean((ŷ − t)²)` and its gradient with respect to `ŷ`.
pub fn squared_loss(out: &Vector, target: &Vector) -> Result<(f64, Vector)> {
    if out.dim() != target.dim() {
        return Err(RemixError::Shape(format!("output dim {} vs target dim {}", out.dim(), target.dim())));
    }
    let o = out.dim() as f64;
    let diff = out.sub(target);
    Ok((0.5 * diff.norm_sq() / o, diff.scaled(1.0 / o)))
}

pub fn sft_loss(model: &Model, example: &Example, selection: &Selection) -> Result<f64> {
    let pass = forward_selection(model, &example.x, selection)?;
    Ok(squared_loss(&pass.out, &example.target)?.0)
}

/// Gradients for every trainable parameter of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    /// `a[l][i]`, `b[l][i]` per layer and adapter.
    pub a: Vec<Vec<Matrix>>,
    pub b: Vec<Vec<Matrix>>,
    pub router: Vec<Matrix>,
    pub head: Matrix,
}

impl ModelGrads {
    pub fn zeros(model: &Model) -> Self {
        let a = model.layers.iter().map(|l| l.loras().iter().map(|p| Matrix::zeros(p.a.rows(), p.a.cols())).collect()).collect();
        let b = model.layers.iter().map(|l| l.loras().iter().map(|p| Matrix::zeros(p.b.rows(), p.b.cols())).collect()).collect();
        let router = model.layers.iter().map(|l| Matrix::zeros(l.router().rows(), l.router().cols())).collect();
        ModelGrads { a, b, router, head: Matrix::zeros(model.head.rows(), model.head.cols()) }
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &ModelGrads) {
        for (x, y) in self.a.iter_mut().flatten().zip(other.a.iter().flatten()) {
            x.axpy(s, y);
        }
        for (x, y) in self.b.iter_mut().flatten().zip(other.b.iter().flatten()) {
            x.axpy(s, y);
        }
        for (x, y) in self.router.iter_mut().zip(&other.router) {
            x.axpy(s, y);
        }
        self.head.axpy(s, &other.head);
    }

    pub fn router_norm(&self) -> f64 {
        self.router.iter().map(Matrix::frobenius_sq).sum::<f64>().sqrt()
    }

    pub fn lora_norm(&self) -> f64 {
        self.a.iter().chain(&self.b).flatten().map(Matrix::frobenius_sq).sum::<f64>().sqrt()
    }
}

/// Backpropagate `g_out = ∂loss/∂ŷ` through the head and every layer,
/// adding `scale ×` each parameter gradient into `grads`.
pub fn backward(model: &Model, pass: &Pass, g_out: &Vector, scale: f64, grads: &mut ModelGrads) -> Result<()> {
    grads.head.add_outer(scale, g_out, &pass.last);
    let mut g = model.head.matvec_t(g_out)?;
    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let cache = &pass.caches[l];
        let gx = match cache.mode {
            Mode::Remix => {
                let r = layer.backward_lora(cache, &g)?;
                for lg in r.loras {
                    grads.a[l][lg.index].axpy(scale, &lg.a);
                    grads.b[l][lg.index].axpy(scale, &lg.b);
                }
                r.x
            }
            Mode::DenseBaseline => {
                let r = layer.backward_dense(cache, &g)?;
                for lg in r.loras {
                    grads.a[l][lg.index].axpy(scale, &lg.a);
                    grads.b[l][lg.index].axpy(scale, &lg.b);
                }
                grads.router[l].axpy(scale, &r.router);
                r.x
            }
        };
        if l > 0 {
            // layer input is tanh of the previous output
            g = Vector(gx.iter().zip(cache.x.iter()).map(|(d, h)| d * (1.0 - h * h)).collect());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub ess_min: f64,
    pub ess_mean: f64,
    pub router_grad_norm: f64,
    pub lora_grad_norm: f64,
    pub wallclock_ms: f64,
    /// Batch-mean ESS per layer.
    pub ess_layers: Vec<f64>,
}

impl MetricsRow {
    pub fn csv_header(layers: usize) -> String {
        let mut h = String::from("step,split,loss,ess_min,ess_mean,router_grad_norm,lora_grad_norm,wallclock_ms");
        for l in 0..layers {
            h.push_str(&format!(",ess_layer_{l}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.split, self.loss, self.ess_min, self.ess_mean, self.router_grad_norm, self.lora_grad_norm, self.wallclock_ms
        );
        for e in &self.ess_layers {
            r.push_str(&format!(",{e}"));
        }
        r
    }

    /// Smallest per-layer batch-mean ESS.
    pub fn worst_layer_ess(&self) -> f64 {
        self.ess_layers.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

struct ExampleOutcome {
    grads: ModelGrads,
    loss: f64,
    /// ESS per layer for every pass of this example.
    ess: Vec<Vec<f64>>,
}

fn pass_ess(pass: &Pass) -> Result<Vec<f64>> {
    pass.caches.iter().map(|c| ess(&c.weights.pi)).collect()
}

fn remix_example(model: &Model, ex: &Example, cfg: &TrainConfig, rng: &mut RngStream) -> Result<ExampleOutcome> {
    let m = cfg.rollouts;
    let mut grads = ModelGrads::zeros(model);
    let mut rollouts = Vec::with_capacity(m);
    let mut ess_all = Vec::with_capacity(m);
    let mut loss_sum = 0.0;
    for _ in 0..m {
        let (pass, selection, scores) = forward_sampled(model, &ex.x, cfg.k, rng)?;
        let (loss, g) = squared_loss(&pass.out, &ex.target)?;
        backward(model, &pass, &g, 1.0 / m as f64, &mut grads)?;
        ess_all.push(pass_ess(&pass)?);
        loss_sum += loss;
        rollouts.push(Rollout { selection, loss, score_grads: scores });
    }
    if !loss_sum.is_finite() {
        return Ok(ExampleOutcome { grads, loss: f64::NAN, ess: ess_all });
    }
    grads.router = rloo_router_grad(&RolloutSet::new(rollouts)?)?;
    Ok(ExampleOutcome { grads, loss: loss_sum / m as f64, ess: ess_all })
}

fn dense_example(model: &Model, ex: &Example) -> Result<ExampleOutcome> {
    let mut grads = ModelGrads::zeros(model);
    let pass = forward_dense_model(model, &ex.x)?;
    let (loss, g) = squared_loss(&pass.out, &ex.target)?;
    backward(model, &pass, &g, 1.0, &mut grads)?;
    Ok(ExampleOutcome { grads, loss, ess: vec![pass_ess(&pass)?] })
}

fn apply_update(model: &mut Model, grads: &ModelGrads, lr: f64, freeze_adapters: bool) {
    for (l, layer) in model.layers.iter_mut().enumerate() {
        if !freeze_adapters {
            for (i, pair) in layer.loras_mut().iter_mut().enumerate() {
                pair.a.axpy(-lr, &grads.a[l][i]);
                pair.b.axpy(-lr, &grads.b[l][i]);
            }
        }
        layer.router_mut().axpy(-lr, &grads.router[l]);
    }
    if !freeze_adapters {
        model.head.axpy(-lr, &grads.head);
    }
}

fn reduce_step(
    model: &mut Model,
    outcomes: Vec<ExampleOutcome>,
    cfg: &TrainConfig,
    step: usize,
    started: Instant,
) -> Result<MetricsRow> {
    let b = outcomes.len() as f64;
    let loss = outcomes.iter().map(|o| o.loss).sum::<f64>() / b;
    if !loss.is_finite() {
        return Err(RemixError::Divergence { step });
    }
    let mut grads = ModelGrads::zeros(model);
    for o in &outcomes {
        grads.axpy(1.0 / b, &o.grads);
    }
    let layers = model.num_layers();
    let mut per_layer = vec![0.0; layers];
    let mut count = 0usize;
    let mut ess_min = f64::INFINITY;
    for row in outcomes.iter().flat_map(|o| &o.ess) {
        for (acc, &e) in per_layer.iter_mut().zip(row) {
            *acc += e;
            ess_min = ess_min.min(e);
        }
        count += 1;
    }
    let ess_layers: Vec<f64> = per_layer.iter().map(|s| s / count as f64).collect();
    let ess_mean = ess_layers.iter().sum::<f64>() / layers as f64;
    apply_update(model, &grads, cfg.learning_rate, cfg.freeze_adapters);
    let wallclock_ms = if cfg.bit_exact { 0.0 } else { started.elapsed().as_secs_f64() * 1e3 };
    Ok(MetricsRow {
        step,
        split: "train".into(),
        loss,
        ess_min,
        ess_mean,
        router_grad_norm: grads.router_norm(),
        lora_grad_norm: grads.lora_norm(),
        wallclock_ms,
        ess_layers,
    })
}

fn rollout_stream(cfg: &TrainConfig, step: usize, b: usize) -> RngStream {
    RngStream::new(cfg.seed, "rollout", (step * cfg.batch_size + b) as u64)
}

/// One SGD step of remix training on `batch`. Per example: `M` sampled
/// selections, leave-one-out router gradient, adapter and head gradients
/// averaged over the rollouts; the batch gradient is the mean over examples,
/// reduced in batch order.
pub fn train_step_remix(model: &mut Model, batch: &[Example], cfg: &TrainConfig, step: usize) -> Result<MetricsRow> {
    if model.mode() != Mode::Remix {
        return Err(RemixError::InvalidArgument("train_step_remix on a dense model".into()));
    }
    if cfg.rollouts < 2 {
        return Err(RemixError::TooFewRollouts(cfg.rollouts));
    }
    let started = Instant::now();
    let frozen: &Model = model;
    let outcomes = batch
        .par_iter()
        .enumerate()
        .map(|(b, ex)| remix_example(frozen, ex, cfg, &mut rollout_stream(cfg, step, b)))
        .collect::<Result<Vec<_>>>()?;
    reduce_step(model, outcomes, cfg, step, started)
}

/// One SGD step through the dense forward and backward passes.
pub fn train_step_dense(model: &mut Model, batch: &[Example], cfg: &TrainConfig, step: usize) -> Result<MetricsRow> {
    if model.mode() != Mode::DenseBaseline {
        return Err(RemixError::InvalidArgument("train_step_dense on a remix model".into()));
    }
    let started = Instant::now();
    let frozen: &Model = model;
    let outcomes = batch.par_iter().map(|ex| dense_example(frozen, ex)).collect::<Result<Vec<_>>>()?;
    reduce_step(model, outcomes, cfg, step, started)
}

/// Minibatch of step `step`, drawn with replacement.
pub fn batch_indices(cfg: &TrainConfig, len: usize, step: usize) -> Vec<usize> {
    let mut rng = RngStream::new(cfg.seed, "batch", step as u64);
    (0..cfg.batch_size).map(|_| rng.below(len)).collect()
}

/// Runs `cfg.steps` steps, handing each row to `sink` as soon as it exists.
pub fn train<F>(model: &mut Model, data: &[Example], cfg: &TrainConfig, mut sink: F) -> Result<()>
where
    F: FnMut(&MetricsRow) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(RemixError::InvalidArgument("empty training set".into()));
    }
    for step in 0..cfg.steps {
        let batch: Vec<Example> = batch_indices(cfg, data.len(), step).into_iter().map(|i| data[i].clone()).collect();
        let row = match model.mode() {
            Mode::Remix => train_step_remix(model, &batch, cfg, step),
            Mode::DenseBaseline => train_step_dense(model, &batch, cfg, step),
        }
        .map_err(|e| match e {
            RemixError::NonFinite(_) | RemixError::DegenerateResidual { .. } | RemixError::EssUndefined => RemixError::Divergence { step },
            other => other,
        })?;
        sink(&row)?;
    }
    Ok(())
}

/// Collects every row in memory.
pub fn train_collect(model: &mut Model, data: &[Example], cfg: &TrainConfig) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(cfg.steps);
    train(model, data, cfg, |r| {
        rows.push(r.clone());
        Ok(())
    })?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub loss: f64,
    /// Active count used at evaluation (remix only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    /// Per layer: frequency of each activated subset, keyed like `"1,5"`.
    pub histogram: Vec<BTreeMap<String, f64>>,
}

impl EvalSummary {
    /// Subsets of `layer` chosen at least `min_freq` of the time.
    pub fn frequent_subsets(&self, layer: usize, min_freq: f64) -> usize {
        self.histogram.get(layer).map_or(0, |h| h.values().filter(|&&f| f >= min_freq).count())
    }
}

fn subset_key(s: &[usize]) -> String {
    let mut s = s.to_vec();
    s.sort_unstable();
    s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

/// Mean eval loss. Remix models route top-k (with `k` overridable; the
/// trained ω is kept); dense models use the full weighted sum.
pub fn evaluate(model: &Model, data: &[Example], k_override: Option<usize>) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(RemixError::InvalidArgument("empty evaluation set".into()));
    }
    let remix = model.mode() == Mode::Remix;
    let k = k_override.unwrap_or(model.layers[0].k());
    let per_example = data
        .par_iter()
        .map(|ex| {
            if remix {
                let (pass, sel) = forward_top_k(model, &ex.x, k)?;
                Ok((squared_loss(&pass.out, &ex.target)?.0, Some(sel)))
            } else {
                let pass = forward_dense_model(model, &ex.x)?;
                Ok((squared_loss(&pass.out, &ex.target)?.0, None))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = per_example.iter().map(|p| p.0).sum::<f64>() / data.len() as f64;
    let mut histogram = Vec::new();
    if remix {
        let mut counts: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); model.num_layers()];
        for sel in per_example.iter().filter_map(|p| p.1.as_ref()) {
            for (c, s) in counts.iter_mut().zip(&sel.per_layer) {
                *c.entry(subset_key(s)).or_default() += 1;
            }
        }
        let total = data.len() as f64;
        histogram = counts.into_iter().map(|c| c.into_iter().map(|(key, v)| (key, v as f64 / total)).collect()).collect();
    }
    Ok(EvalSummary { loss, k: remix.then_some(k), histogram })
}

/// Router-only fixture. One layer with `W = 0`, rank-1 adapters
/// `Aᵢ = e₀ᵀ`, `Bᵢ = e_{i+1}`, identity head and the constant input `e₀`, so
/// adapter `i` writes `ω` into output coordinate `i+1`. The target plants a
/// subset `I*`; the loss of a selection is `ω²·|I △ I*| / (2D)`, minimized
/// only at `I*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandit {
    pub model: Model,
    pub example: Example,
    pub planted: Vec<usize>,
}

pub fn bandit_fixture(n: usize, k: usize, router_sigma: f64, seed: u64) -> Result<Bandit> {
    if k == 0 || k >= n {
        return Err(RemixError::InvalidArgument(format!("bandit needs 1 <= k < n, got k={k}, n={n}")));
    }
    let d = n + 1;
    let loras = (0..n)
        .map(|i| {
            let mut a = Matrix::zeros(1, d);
            a.data_mut()[0] = 1.0;
            let mut b = Matrix::zeros(d, 1);
            b.data_mut()[i + 1] = 1.0;
            LoraPair { a, b }
        })
        .collect();
    let router = gaussian_matrix(&mut RngStream::new(seed, "bandit-router", 0), n, d, router_sigma)?;
    let layer = MixtureLayer::new(Matrix::zeros(d, d), loras, router, Mode::Remix, OmegaScheme::Rslora, DEFAULT_OMEGA_NUMERATOR, k)?;
    let omega = layer.omega();
    let mut rng = RngStream::new(seed, "bandit-plant", 0);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.below(i + 1));
    }
    let mut planted = perm[..k].to_vec();
    planted.sort_unstable();
    let mut target = Vector::zeros(d);
    for &i in &planted {
        target[i + 1] = omega;
    }
    let model = Model::new(vec![layer], Matrix::identity(d))?;
    Ok(Bandit { model, example: Example { x: Vector::basis(d, 0), target, cluster: 0 }, planted })
}

impl Bandit {
    pub fn loss(&self, selection: &Selection) -> f64 {
        sft_loss(&self.model, &self.example, selection).unwrap_or(f64::NAN)
    }

    pub fn router(&self) -> crate::rloo::LayerRouter {
        crate::rloo::LayerRouter { params: self.model.layers[0].router().clone(), input: self.example.x.clone() }
    }

    /// Exact expected loss under the current router.
    pub fn expected_loss(&self) -> Result<f64> {
        let k = self.model.layers[0].k();
        crate::rloo::expected_loss(&|s: &Selection| self.loss(s), &[self.router()], k)
    }

    /// Top-k subset of the current router.
    pub fn greedy(&self) -> Result<Vec<usize>> {
        top_k(&self.model.layers[0].route(&self.example.x)?, self.model.layers[0].k())
    }
}
