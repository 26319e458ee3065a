use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use remix_core::checkpoint::{load_model, save_model};
use remix_core::experiments::{bandit_variance, bound_table, unbiasedness_grid, variance_strictly_decreasing, BoundRow, UnbiasednessCell, VarianceRow};
use remix_core::mixture::Mode;
use remix_core::theory::{monte_carlo_ess, verify_all, BoundInputs, LemmaReport};
use remix_core::trainer::{evaluate, gen_cluster_task, train, EvalSummary, MetricsRow, Model, TrainMode};
use remix_core::RemixError;
use serde::Serialize;

use crate::config::{load_collapse, load_rloo, load_run, load_verify, RunConfig};
use crate::error::{CliError, CliResult};

pub struct Paths<'a> {
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub checkpoint: Option<&'a Path>,
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: PathBuf, text: &str) -> CliResult<()> {
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

#[derive(Serialize)]
struct QuantileRow {
    p: f64,
    ess: f64,
}

#[derive(Serialize)]
struct BoundReport {
    sigma: f64,
    n: usize,
    dim: usize,
    x_norm: f64,
    trials: usize,
    seed: u64,
    median: f64,
    quantiles: Vec<QuantileRow>,
    rows: Vec<BoundRow>,
}

pub fn collapse(paths: &Paths) -> CliResult<()> {
    let cfg = load_collapse(paths.config)?;
    if cfg.deltas.is_empty() {
        return Err(CliError::Config("deltas: must list at least one value".into()));
    }
    let x_norm = (cfg.dim as f64).sqrt();
    for &delta in &cfg.deltas {
        BoundInputs::new(cfg.sigma, cfg.n, x_norm, delta)?;
    }
    ensure_dir(paths.out)?;
    let samples = monte_carlo_ess(cfg.sigma, cfg.n, cfg.dim, cfg.trials, cfg.seed)?;
    let mut csv = String::from("trial,ess\n");
    for (t, e) in samples.samples.iter().enumerate() {
        csv.push_str(&format!("{t},{e}\n"));
    }
    write_text(paths.out.join("ess_samples.csv"), &csv)?;
    let report = BoundReport {
        sigma: cfg.sigma,
        n: cfg.n,
        dim: cfg.dim,
        x_norm,
        trials: cfg.trials,
        seed: cfg.seed,
        median: samples.median(),
        quantiles: samples.quantile_table().into_iter().map(|(p, ess)| QuantileRow { p, ess }).collect(),
        rows: bound_table(&samples, cfg.sigma, cfg.n, x_norm, &cfg.deltas)?,
    };
    write_json(paths.out.join("bound_table.json"), &report)
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    seed: u64,
    all_pass: bool,
    records: &'a [LemmaReport],
}

pub fn verify(paths: &Paths) -> CliResult<()> {
    let cfg = load_verify(paths.config)?;
    ensure_dir(paths.out)?;
    let records = verify_all(&cfg)?;
    let all_pass = records.iter().all(|r| r.pass);
    write_json(paths.out.join("verification_report.json"), &VerifyReport { seed: cfg.seed, all_pass, records: &records })?;
    if all_pass {
        Ok(())
    } else {
        let failed: Vec<String> = records.iter().filter(|r| !r.pass).map(|r| format!("{} (margin {:e})", r.id, r.margin)).collect();
        Err(CliError::Verification(failed.join(", ")))
    }
}

#[derive(Serialize)]
struct RlooReport {
    seed: u64,
    tolerance: f64,
    max_deviation: f64,
    unbiased: bool,
    cells: Vec<UnbiasednessCell>,
    variance: Vec<VarianceRow>,
    variance_ordered: bool,
    pass: bool,
}

pub fn rloo_check(paths: &Paths) -> CliResult<()> {
    let cfg = load_rloo(paths.config)?;
    if cfg.tolerance.is_nan() || cfg.tolerance < 0.0 {
        return Err(CliError::Config(format!("tolerance: must be non-negative, got {}", cfg.tolerance)));
    }
    if cfg.variance_ms.len() < 2 || cfg.variance_seeds.is_empty() {
        return Err(CliError::Config("variance_ms needs two or more values and variance_seeds at least one".into()));
    }
    ensure_dir(paths.out)?;
    let cells = unbiasedness_grid(cfg.seed, &cfg.ns, &cfg.ks, &cfg.layers, &cfg.ms)?;
    let max_deviation = cells.iter().map(|c| c.deviation).fold(0.0, f64::max);
    let unbiased = cells.iter().all(|c| c.deviation <= cfg.tolerance);
    let variance = bandit_variance(&cfg.variance_seeds, &cfg.variance_ms, cfg.variance_trials, cfg.bandit_n, cfg.bandit_k)?;
    let variance_ordered = variance_strictly_decreasing(&variance).values().all(|&b| b);
    let pass = unbiased && variance_ordered;
    let report = RlooReport { seed: cfg.seed, tolerance: cfg.tolerance, max_deviation, unbiased, cells, variance, variance_ordered, pass };
    write_json(paths.out.join("rloo_report.json"), &report)?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Verification(format!("max deviation {max_deviation:e}, variance ordered: {variance_ordered}")))
    }
}

#[derive(Serialize)]
struct EvalReport {
    mode: TrainMode,
    #[serde(flatten)]
    eval: EvalSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    k_override: Option<EvalSummary>,
}

fn eval_report(model: &Model, cfg: &RunConfig, eval_k: Option<usize>) -> CliResult<EvalReport> {
    let data = gen_cluster_task(&cfg.task, cfg.train.seed)?;
    let eval = evaluate(model, &data.eval, None)?;
    let k_override = match (model.mode(), eval_k) {
        (Mode::Remix, Some(k)) => Some(evaluate(model, &data.eval, Some(k))?),
        _ => None,
    };
    Ok(EvalReport { mode: cfg.train.mode, eval, k_override })
}

pub fn train_cmd(paths: &Paths, bit_exact: bool) -> CliResult<()> {
    let mut cfg = load_run(paths.config)?;
    cfg.train.bit_exact |= bit_exact;
    let data = gen_cluster_task(&cfg.task, cfg.train.seed)?;
    let mut model = Model::init(&data.truth, &cfg.train)?;
    ensure_dir(paths.out)?;
    let csv_path = paths.out.join("metrics.csv");
    let file = File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    let mut io_failure = None;
    writeln!(csv, "{}", MetricsRow::csv_header(model.num_layers())).map_err(|e| CliError::io(&csv_path, e))?;
    let outcome = train(&mut model, &data.train, &cfg.train, |row| {
        writeln!(csv, "{}", row.csv_row()).and_then(|_| csv.flush()).map_err(|e| {
            io_failure = Some(e);
            RemixError::InvalidArgument("metrics write failed".into())
        })
    });
    if let Some(e) = io_failure {
        return Err(CliError::io(&csv_path, e));
    }
    csv.flush().map_err(|e| CliError::io(&csv_path, e))?;
    outcome?;
    write_text(paths.out.join("checkpoint.json"), &save_model(&model))?;
    write_json(paths.out.join("eval_summary.json"), &eval_report(&model, &cfg, cfg.eval_k)?)
}

fn check_compatible(model: &Model, cfg: &RunConfig) -> CliResult<()> {
    let (n, _, mode) = cfg.train.layer_shape();
    let mismatch = |what: &str, ckpt: String, conf: String| Err(CliError::Config(format!("checkpoint {what} {ckpt} does not match config {conf}")));
    if model.num_layers() != cfg.task.layers {
        return mismatch("layers", model.num_layers().to_string(), cfg.task.layers.to_string());
    }
    if model.input_dim() != cfg.task.dim {
        return mismatch("input dim", model.input_dim().to_string(), cfg.task.dim.to_string());
    }
    if model.output_dim() != cfg.task.output_dim {
        return mismatch("output dim", model.output_dim().to_string(), cfg.task.output_dim.to_string());
    }
    if model.mode() != mode {
        return mismatch("mode", format!("{:?}", model.mode()), format!("{:?}", mode));
    }
    if model.layers[0].n() != n {
        return mismatch("adapter count", model.layers[0].n().to_string(), n.to_string());
    }
    Ok(())
}

pub fn eval_cmd(paths: &Paths, k: Option<usize>) -> CliResult<()> {
    let ckpt = paths.checkpoint.ok_or_else(|| CliError::Config("eval needs --checkpoint".into()))?;
    let mut cfg = load_run(paths.config)?;
    if k.is_some() {
        cfg.eval_k = k;
        cfg.validate()?;
    }
    let text = fs::read_to_string(ckpt).map_err(|e| CliError::io(ckpt, e))?;
    let model = load_model(&text)?;
    check_compatible(&model, &cfg)?;
    ensure_dir(paths.out)?;
    write_json(paths.out.join("eval_summary.json"), &eval_report(&model, &cfg, cfg.eval_k)?)
}
