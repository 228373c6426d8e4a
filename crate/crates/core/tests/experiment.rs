use std::collections::HashSet;
use std::fs;
use std::path::Path;

use fairsearch::data::{GroupProfile, SyntheticBiasConfig};
use fairsearch::evaluator::{EvalReport, FairnessConfig};
use fairsearch::experiment::*;
use fairsearch::search_space::*;
use fairsearch::surrogate::build_table;
use fairsearch::trainer::TrainConfig;

fn tiny_training(groups: usize) -> ExperimentConfig {
    let profile = |count, val_count| GroupProfile {
        count,
        val_count,
        shift: 1.5,
        noise: 0.5,
        distinct: 0.0,
    };
    let all = [profile(48, 24), profile(24, 12)];
    let mut cfg = ExperimentConfig {
        space: SearchSpaceConfig {
            depth: 2,
            channels: vec![4],
            kernels: vec![1, 3],
            stem_channels: 4,
            ..SearchSpaceConfig::default()
        },
        train: TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        },
        iterations: 1,
        ..ExperimentConfig::default()
    };
    cfg.reinforce.episodes = 1;
    cfg.data.synthetic = SyntheticBiasConfig {
        groups: all[..groups].to_vec(),
        ..SyntheticBiasConfig::default()
    };
    cfg
}

fn surrogate_cfg(iterations: usize) -> ExperimentConfig {
    ExperimentConfig {
        iterations,
        ..ExperimentConfig::preset("surrogate").unwrap()
    }
}

#[test]
fn training_smoke_run_writes_one_complete_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_search(&tiny_training(2), 0, dir.path()).unwrap();
    let rows = read_trace(&dir.path().join(TRACE_FILE)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows, out.rows);
    let r = &rows[0];
    assert_eq!(r.status, "ok");
    assert_eq!(r.token_vec().unwrap().len(), 1 + 4 * 2);
    assert!(r.encoding.starts_with("blocks=["));
    assert_eq!(r.group_accuracies().unwrap().len(), 2);
    assert_eq!(r.counts().unwrap(), vec![24, 12]);
    assert!(r.accuracy.is_finite() && r.reward.is_finite() && r.grad_norm.is_finite());
    let header = fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
    let fields = header.lines().next().unwrap().split(',').count();
    assert_eq!(fields, 15);
    for file in [BEST_FILE, CHECKPOINT_FILE, LOSS_TRACE_FILE, TIMINGS_FILE] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let losses = fs::read_to_string(dir.path().join(LOSS_TRACE_FILE)).unwrap();
    assert_eq!(losses.lines().count(), 2);
}

fn recompute(r: &TraceRow) -> EvalReport {
    EvalReport::from_group_accuracies(
        &r.group_accuracies().unwrap(),
        &r.counts().unwrap(),
        &FairnessConfig::default(),
    )
    .unwrap()
}

fn assert_recomputable(rows: &[TraceRow]) {
    for r in rows {
        let e = recompute(r);
        assert!((e.overall_acc - r.accuracy).abs() <= 1e-9, "{r:?}");
        assert!((e.unfairness - r.unfairness).abs() <= 1e-9, "{r:?}");
        assert!((e.spd - r.spd).abs() <= 1e-9, "{r:?}");
        match (e.di, r.di) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-9),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn trace_rows_are_recomputable_from_group_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_training(2);
    cfg.reinforce.episodes = 2;
    cfg.iterations = 2;
    let out = run_search(&cfg, 1, &dir.path().join("train")).unwrap();
    assert_recomputable(&out.rows);
    let out = run_search(&surrogate_cfg(5), 1, &dir.path().join("surrogate")).unwrap();
    assert_recomputable(&out.rows);
}

#[test]
fn resume_continues_without_duplicates() {
    let root = tempfile::tempdir().unwrap();
    let straight = root.path().join("straight");
    let resumed = root.path().join("resumed");
    run_search(&surrogate_cfg(6), 2, &straight).unwrap();

    run_search(&surrogate_cfg(2), 2, &resumed).unwrap();
    let ckpt = fs::read(resumed.join(CHECKPOINT_FILE)).unwrap();
    // Rows of a third update reach the trace, then the run dies before its
    // checkpoint is written.
    run_search(&surrogate_cfg(3), 2, &resumed).unwrap();
    fs::write(resumed.join(CHECKPOINT_FILE), ckpt).unwrap();

    let out = run_search(&surrogate_cfg(6), 2, &resumed).unwrap();
    assert_eq!(out.resumed_from, 2);
    let rows = read_trace(&resumed.join(TRACE_FILE)).unwrap();
    let iterations: HashSet<u64> = rows.iter().map(|r| r.iteration).collect();
    assert_eq!(iterations.len(), rows.len());
    assert_eq!(rows.len(), 6 * 5);
    let read = |d: &Path| fs::read(d.join(TRACE_FILE)).unwrap();
    assert_eq!(read(&straight), read(&resumed));
    assert_eq!(
        fs::read(straight.join(BEST_FILE)).unwrap(),
        fs::read(resumed.join(BEST_FILE)).unwrap()
    );
}

#[test]
fn plot_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_search(&surrogate_cfg(4), 0, dir.path()).unwrap();
    let rows = read_trace(&dir.path().join(TRACE_FILE)).unwrap();
    let (scatter, curve) = emit_plot_data(&rows, &dir.path().join("plots")).unwrap();

    #[derive(serde::Deserialize)]
    struct Scatter {
        iteration: u64,
        accuracy: f64,
        unfairness: f64,
        reward: f64,
        encoding: String,
    }
    let mut rd = csv::Reader::from_path(&scatter).unwrap();
    let points: Vec<Scatter> = rd.deserialize().map(Result::unwrap).collect();
    assert_eq!(points.len(), out.rows.len());
    for (p, r) in points.iter().zip(&rows) {
        assert_eq!(p.iteration, r.iteration);
        assert_eq!(p.accuracy.to_bits(), r.accuracy.to_bits());
        assert_eq!(p.unfairness.to_bits(), r.unfairness.to_bits());
        assert_eq!(p.reward.to_bits(), r.reward.to_bits());
        assert_eq!(p.encoding, r.encoding);
    }

    let mut rd = csv::Reader::from_path(&curve).unwrap();
    let recs: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(recs.len(), rows.len());
    let iters: Vec<u64> = recs.iter().map(|r| r[0].parse().unwrap()).collect();
    assert!(iters.windows(2).all(|w| w[0] < w[1]));
    let best: Vec<f64> = recs.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(best.windows(2).all(|w| w[0] <= w[1]));

    let one = emit_plot_data(&rows[..1], &dir.path().join("one")).unwrap();
    assert_eq!(fs::read_to_string(one.0).unwrap().lines().count(), 2);
    assert!(emit_plot_data(&[], &dir.path().join("none")).is_err());
}

#[test]
fn surrogate_search_finds_the_planted_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = surrogate_cfg(200);
    let sizes: Vec<usize> = cfg
        .data
        .synthetic
        .groups
        .iter()
        .map(|g| g.val_count)
        .collect();
    let mut hits = 0;
    for seed in 0..5 {
        let out = run_search(&cfg, seed, &dir.path().join(seed.to_string())).unwrap();
        let table = build_table(&cfg.space, &sizes, seed).unwrap();
        if Some(out.best.encoding.as_str()) == table.optimum() {
            hits += 1;
        }
    }
    assert!(hits >= 3, "optimum found in {hits} of 5 seeds");
}

#[test]
fn single_group_ablation_is_perfectly_fair() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_training(1);
    cfg.space.groups = 1;
    cfg.mode = Mode::Ablation;
    let report = run_ablation(&cfg, dir.path()).unwrap();
    assert_eq!(report.runs.len(), ARMS.len());
    for r in &report.runs {
        assert_eq!(r.unfairness, 0.0, "{}", r.arm);
        assert_eq!(r.composite, r.accuracy);
    }
    let mut by_rank: Vec<&ArmSummary> = report.summary.iter().collect();
    by_rank.sort_by_key(|s| s.ranking);
    assert!(by_rank
        .windows(2)
        .all(|w| w[0].median_accuracy >= w[1].median_accuracy));
    for file in ["ablation.csv", "ablation_runs.csv", "ablation.json"] {
        assert!(dir.path().join(file).exists());
    }
}

#[test]
fn rank_ties_keep_arm_order() {
    assert_eq!(rank_arms(&[0.5, 0.7, 0.5, 0.1]), vec![2, 1, 3, 4]);
    assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
}

#[test]
fn diverging_children_are_recorded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_training(2);
    cfg.mode = Mode::Ablation;
    cfg.train.learning_rate = 1e12;
    let report = run_ablation(&cfg, dir.path()).unwrap();
    for r in &report.runs {
        assert_eq!(r.status, "diverged", "{}", r.arm);
        assert_eq!(r.accuracy, 0.0);
    }
    let rows = read_trace(&dir.path().join("full/seed-0").join(TRACE_FILE)).unwrap();
    assert!(rows
        .iter()
        .all(|r| r.status == "diverged" && r.reward == -1.0));
}
