use std::collections::HashSet;
use std::fs;

use fairsearch::data::*;
use fairsearch::evaluator::evaluate;
use fairsearch::experiment::{median, train_and_evaluate, ExperimentConfig};
use fairsearch::nn::ChildNetwork;
use fairsearch::search_space::*;
use fairsearch::Error;

fn two_groups(major: usize, minor: usize, seed: u64) -> (GroupedDataset, GroupedDataset) {
    let mut cfg = SyntheticBiasConfig {
        seed,
        ..SyntheticBiasConfig::default()
    };
    cfg.groups[0].count = major;
    cfg.groups[1].count = minor;
    generate_synthetic(&cfg).unwrap()
}

#[test]
fn single_group_model_is_perfectly_fair() {
    let mut cfg = SyntheticBiasConfig::default();
    cfg.groups.truncate(1);
    let (train, val) = generate_synthetic(&cfg).unwrap();
    assert_eq!(train.num_groups(), 1);
    let space = SearchSpaceConfig {
        depth: 1,
        num_classes: 3,
        channels: vec![4],
        kernels: vec![3],
        ..SearchSpaceConfig::default()
    };
    let arch = fixed_point("all-CB", &space).unwrap();
    for seed in 0..3 {
        let mut net = ChildNetwork::compile(&arch, train.shape(), seed).unwrap();
        let r = evaluate(&mut net, &val).unwrap();
        assert_eq!(r.unfairness, 0.0);
        assert_eq!(r.group_acc, vec![r.overall_acc]);
    }
}

#[test]
fn generation_is_deterministic_and_sized() {
    let a = two_groups(900, 100, 4);
    let b = two_groups(900, 100, 4);
    assert_eq!(a, b);
    assert_eq!(a.0.group_sizes(), vec![900, 100]);
    assert_eq!(a.1.group_sizes(), vec![600, 200]);
    assert_eq!(a.0.split(), Split::Train);
    assert_eq!(a.1.split(), Split::Validation);
    let c = two_groups(900, 100, 5);
    assert_ne!(a.0, c.0);
}

#[test]
fn batch_counts_follow_largest_remainder() {
    let (train, _) = two_groups(900, 100, 0);
    for (ratios, expect) in [
        (vec![0.5, 0.5], [16, 16]),
        (vec![0.75, 0.25], [24, 8]),
        (vec![2.0 / 3.0, 1.0 / 3.0], [21, 11]),
    ] {
        let bgm = BgmSpec::new(ratios).unwrap();
        assert_eq!(BatchPlan::new(&bgm, 32).unwrap().counts, expect.to_vec());
        for batch in make_batches(&train, &bgm, 32, 3).unwrap() {
            let minor = batch.iter().filter(|&&i| train.groups()[i] == 1).count();
            assert_eq!([batch.len() - minor, minor], expect);
        }
    }
}

#[test]
fn batches_are_reproducible_and_cover_the_majority() {
    let (train, _) = two_groups(900, 100, 0);
    let bgm = BgmSpec::new(vec![0.5, 0.5]).unwrap();
    let a = make_batches(&train, &bgm, 32, 11).unwrap();
    assert_eq!(a, make_batches(&train, &bgm, 32, 11).unwrap());
    assert_ne!(a, make_batches(&train, &bgm, 32, 12).unwrap());
    let seen: HashSet<usize> = a.iter().flatten().copied().collect();
    for g in 0..2 {
        for i in train.indices_of_group(g) {
            assert!(seen.contains(&i), "sample {i} of group {g} never batched");
        }
    }
}

#[test]
fn proportional_batches_match_shuffled_composition() {
    let (train, _) = two_groups(900, 100, 0);
    let share = 100.0 / 1000.0;
    let bgm = BgmSpec::proportional(&train.group_sizes()).unwrap();
    for (bs, tol) in [(100, 1e-12), (32, 1.0 / 32.0), (50, 1e-12)] {
        let mut minor = 0usize;
        let mut total = 0usize;
        for seed in 0..4 {
            for batch in make_batches(&train, &bgm, bs, seed).unwrap() {
                minor += batch.iter().filter(|&&i| train.groups()[i] == 1).count();
                total += batch.len();
            }
        }
        let freq = minor as f64 / total as f64;
        assert!(
            (freq - share).abs() <= tol,
            "batch size {bs}: minority share {freq}"
        );
    }
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = two_groups(30, 9, 2);
    let manifest = dir.path().join("manifest.csv");
    write_dataset(dir.path(), &manifest, &[&train, &val]).unwrap();
    assert_eq!(
        load_dataset(dir.path(), &manifest, Split::Train).unwrap(),
        train
    );
    assert_eq!(
        load_dataset(dir.path(), &manifest, Split::Validation).unwrap(),
        val
    );
}

#[test]
fn manifest_with_one_row_per_group() {
    let dir = tempfile::tempdir().unwrap();
    let values = |v: f32| -> Vec<u8> { (0..4).flat_map(|_| v.to_le_bytes()).collect() };
    fs::write(dir.path().join("a.f32"), values(0.5)).unwrap();
    fs::write(dir.path().join("b.f32"), values(-0.5)).unwrap();
    let manifest = dir.path().join("m.csv");
    fs::write(
        &manifest,
        "#shape=1,2,2\nid,group,label,split,path\na,0,1,train,a.f32\nb,1,0,train,b.f32\n",
    )
    .unwrap();
    let ds = load_dataset(dir.path(), &manifest, Split::Train).unwrap();
    assert_eq!(ds.group_sizes(), vec![1, 1]);
    assert_eq!(ds.labels(), &[1, 0]);
    assert_eq!(ds.features(1), &[-0.5; 4]);
}

#[test]
fn empty_manifest_has_no_samples() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    fs::write(&manifest, "#shape=1,2,2\nid,group,label,split,path\n").unwrap();
    match load_dataset(dir.path(), &manifest, Split::Train) {
        Err(Error::Ingestion { reason, .. }) => assert!(reason.contains("no samples")),
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn tiny_groups_are_rejected() {
    let mut cfg = SyntheticBiasConfig::default();
    cfg.groups[1].count = 2;
    assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
}

/// Plain training of the fixed all-CB network on proportional batches leaves
/// the minority group at least 10 points behind, median over 5 seeds.
#[test]
fn default_data_shows_a_group_gap() {
    let base = ExperimentConfig::preset("baseline").unwrap();
    let mut gaps = Vec::new();
    for seed in 0..5 {
        let mut cfg = base.clone();
        cfg.data.synthetic.seed = seed;
        cfg.train.seed = seed;
        let (train, val) = cfg.load_data().unwrap();
        let arch = cfg.fixed_architecture(&train).unwrap();
        let bgm = BgmSpec::proportional(&train.group_sizes()).unwrap();
        let (r, _) =
            train_and_evaluate(&arch, &bgm, &train, &val, &cfg.train, &cfg.fairness).unwrap();
        gaps.push(r.group_acc[0] - r.group_acc[1]);
    }
    assert!(median(&gaps) >= 0.10, "gaps {gaps:?}");
}
