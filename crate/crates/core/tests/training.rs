use remix_core::experiments::{bandit_variance, unbiasedness_grid, variance_strictly_decreasing};
use remix_core::trainer::{evaluate, gen_cluster_task, train_collect, Model, TaskSpec, TrainConfig, TrainMode};

fn small_task() -> TaskSpec {
    TaskSpec { dim: 8, output_dim: 8, train_size: 256, eval_size: 64, ..TaskSpec::default() }
}

fn run(mode: TrainMode, seed: u64, steps: usize) -> (Vec<remix_core::trainer::MetricsRow>, f64, f64) {
    let data = gen_cluster_task(&small_task(), seed).unwrap();
    let cfg = TrainConfig { mode, n: 4, k: 2, rank: 2, steps, batch_size: 16, learning_rate: 0.5, seed, bit_exact: true, ..TrainConfig::default() };
    let mut model = Model::init(&data.truth, &cfg).unwrap();
    let before = evaluate(&model, &data.eval, None).unwrap().loss;
    let rows = train_collect(&mut model, &data.train, &cfg).unwrap();
    (rows, before, evaluate(&model, &data.eval, None).unwrap().loss)
}

#[test]
fn every_mode_reduces_eval_loss() {
    for mode in [TrainMode::Remix, TrainMode::DenseBaseline, TrainMode::SingleLora] {
        let (rows, before, after) = run(mode, 4, 150);
        assert_eq!(rows.len(), 150);
        assert!(after < before, "{mode:?}: {before} -> {after}");
    }
}

#[test]
fn remix_ess_is_k_and_dense_ess_in_range() {
    let (rows, _, _) = run(TrainMode::Remix, 5, 40);
    assert!(rows.iter().all(|r| r.ess_layers.iter().all(|&e| e == 2.0)));
    let (rows, _, _) = run(TrainMode::DenseBaseline, 5, 40);
    assert!(rows.iter().all(|r| r.ess_layers.iter().all(|&e| (1.0..=4.0).contains(&e))));
}

#[test]
fn training_is_replayable() {
    let (a, _, la) = run(TrainMode::Remix, 6, 30);
    let (b, _, lb) = run(TrainMode::Remix, 6, 30);
    assert_eq!(a.iter().map(|r| r.csv_row()).collect::<Vec<_>>(), b.iter().map(|r| r.csv_row()).collect::<Vec<_>>());
    assert_eq!(la.to_bits(), lb.to_bits());
}

#[test]
fn unbiasedness_over_the_full_grid() {
    let cells = unbiasedness_grid(11, &[2, 3], &[1, 2], &[1, 2], &[2, 3]).unwrap();
    assert_eq!(cells.len(), 16);
    for c in &cells {
        assert!(c.tuples <= 1_000_000);
        assert!(c.deviation <= 1e-10, "{c:?}");
    }
}

#[test]
fn variance_drops_as_rollouts_grow() {
    let rows = bandit_variance(&[1, 2, 3], &[2, 4, 16], 2000, 6, 2).unwrap();
    assert!(variance_strictly_decreasing(&rows).values().all(|&b| b));
    let ratio = rows[0].frobenius / rows[2].frobenius;
    assert!(ratio > 4.0, "{ratio}");
}
