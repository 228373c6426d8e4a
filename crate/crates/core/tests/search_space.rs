use std::collections::HashSet;

use fairsearch::search_space::*;
use fairsearch::Error;
use proptest::prelude::*;

fn small_cfg() -> SearchSpaceConfig {
    SearchSpaceConfig {
        depth: 2,
        channels: vec![4, 8],
        kernels: vec![1, 3],
        ratio_grid: vec![RatioCandidate::Equal],
        ..SearchSpaceConfig::default()
    }
}

/// Brute-force count: Cartesian product of raw block tokens, normalized and
/// deduplicated, without the all-SKIP architecture.
fn brute_force_count(cfg: &SearchSpaceConfig, ratios: usize) -> usize {
    let mut per_block = HashSet::new();
    for &t in &cfg.block_types {
        for &c2 in &cfg.channels {
            for &c3 in &cfg.channels {
                for &k in &cfg.kernels {
                    per_block.insert(BlockChoice::new(t, c2, c3, k));
                }
            }
        }
    }
    let opts: Vec<BlockChoice> = per_block.into_iter().collect();
    let mut archs: Vec<Vec<BlockChoice>> = vec![vec![]];
    for _ in 0..cfg.depth {
        archs = archs
            .into_iter()
            .flat_map(|a| {
                opts.iter().map(move |o| {
                    let mut a = a.clone();
                    a.push(*o);
                    a
                })
            })
            .collect();
    }
    archs
        .iter()
        .filter(|a| a.iter().any(|b| !b.is_skip()))
        .count()
        * ratios
}

#[test]
fn count_matches_filtered_cartesian_product() {
    let cfg = small_cfg();
    let n = enumerate_space(&cfg, &[900, 100]).unwrap();
    assert_eq!(n as usize, brute_force_count(&cfg, 1));
    // 3 types x 8 + DB x 4 + SKIP = 29 options per block.
    assert_eq!(n, 29 * 29 - 1);

    let two = SearchSpaceConfig {
        block_types: vec![BlockType::Cb, BlockType::Skip],
        channels: vec![8],
        kernels: vec![3],
        ..small_cfg()
    };
    assert_eq!(enumerate_space(&two, &[900, 100]).unwrap(), 3);
    let one = SearchSpaceConfig {
        depth: 1,
        block_types: vec![BlockType::Cb],
        ..two
    };
    assert_eq!(enumerate_space(&one, &[900, 100]).unwrap(), 1);
}

#[test]
fn enumeration_is_distinct_and_satisfies_invariants() {
    let cfg = SearchSpaceConfig {
        ratio_grid: vec![
            RatioCandidate::Proportional,
            RatioCandidate::MinorityShare(0.25),
            RatioCandidate::Equal,
        ],
        ..small_cfg()
    };
    let sizes = [900, 100];
    let space = SearchSpace::new(cfg.clone(), &sizes).unwrap();
    let mut seen = HashSet::new();
    for (bgm, arch) in space.iter().unwrap() {
        let sum: f64 = bgm.ratios().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);
        assert!(bgm.ratios()[1] <= bgm.ratios()[0]);
        assert!(bgm.check_ordering(&sizes).is_ok());
        assert!(arch.active_blocks() >= 1);
        let mut prev = cfg.stem_channels;
        for (b, ch1) in arch.blocks.iter().zip(arch.input_channels()) {
            if b.is_skip() {
                assert_eq!(ch1, None);
            } else {
                assert_eq!(ch1, Some(prev));
                prev = b.ch3;
            }
        }
        assert!(seen.insert(point_text(&bgm, &arch)));
    }
    assert_eq!(seen.len() as u64, space.count().unwrap());
    assert_eq!(seen.len(), brute_force_count(&cfg, 3));
}

#[test]
fn equal_group_sizes_accept_any_grid_point() {
    let cfg = SearchSpaceConfig {
        ratio_grid: vec![
            RatioCandidate::Explicit(vec![0.75, 0.25]),
            RatioCandidate::Explicit(vec![0.25, 0.75]),
            RatioCandidate::Explicit(vec![0.6, 0.4]),
        ],
        ..small_cfg()
    };
    let space = SearchSpace::new(cfg.clone(), &[500, 500]).unwrap();
    assert_eq!(space.valid_ratios().len(), 3);
    assert!(space.schema().static_mask[0].iter().all(|&m| m));

    let skewed = SearchSpace::new(cfg, &[100, 900]).unwrap();
    assert_eq!(skewed.valid_ratios().len(), 1);
    assert_eq!(skewed.schema().static_mask[0], vec![false, true, false]);
}

#[test]
fn masked_ratio_token_decodes_to_constraint_error() {
    let cfg = SearchSpaceConfig {
        ratio_grid: vec![
            RatioCandidate::Explicit(vec![0.75, 0.25]),
            RatioCandidate::Equal,
        ],
        ..small_cfg()
    };
    let sizes = [100, 900];
    let mut tokens = vec![0; cfg.schema_len()];
    tokens[1] = 1;
    let err = decode_tokens(&tokens, &cfg, &sizes).unwrap_err();
    match err {
        Error::Constraint {
            smaller, larger, ..
        } => assert_eq!((smaller, larger), (0, 1)),
        other => panic!("expected constraint error, got {other}"),
    }
    tokens[0] = 1;
    let (bgm, _) = decode_tokens(&tokens, &cfg, &sizes).unwrap();
    assert_eq!(bgm.ratios(), &[0.5, 0.5]);
}

#[test]
fn preimages_all_decode_to_the_same_point() {
    let cfg = small_cfg();
    let space = SearchSpace::new(cfg.clone(), &[900, 100]).unwrap();
    let skip = cfg
        .block_types
        .iter()
        .position(|&t| t == BlockType::Skip)
        .unwrap();
    let db = cfg
        .block_types
        .iter()
        .position(|&t| t == BlockType::Db)
        .unwrap();
    let tokens = vec![0, skip, 1, 1, 1, db, 1, 0, 1];
    let pre = space.preimages(&tokens).unwrap();
    // SKIP frees 2 x 2 x 2 tokens, DB frees ch2's 2 tokens.
    assert_eq!(pre.len(), 16);
    let target = space.decode(&tokens).unwrap();
    let distinct: HashSet<Vec<usize>> = pre.iter().cloned().collect();
    assert_eq!(distinct.len(), pre.len());
    for p in &pre {
        assert_eq!(space.decode(p).unwrap(), target);
    }
}

fn token_strategy(cfg: SearchSpaceConfig, sizes: Vec<usize>) -> impl Strategy<Value = Vec<usize>> {
    let space = SearchSpace::new(cfg, &sizes).unwrap();
    let schema = space.schema();
    let parts: Vec<BoxedStrategy<usize>> = schema
        .slots
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if i == 0 {
                let allowed: Vec<usize> = (0..n).filter(|&t| schema.static_mask[0][t]).collect();
                proptest::sample::select(allowed).boxed()
            } else {
                (0..n).boxed()
            }
        })
        .collect();
    parts
}

proptest! {
    #[test]
    fn decode_encode_round_trip(tokens in token_strategy(SearchSpaceConfig::default(), vec![900, 100])) {
        let cfg = SearchSpaceConfig::default();
        let space = SearchSpace::new(cfg.clone(), &[900, 100]).unwrap();
        let skip = cfg.block_types.iter().position(|&t| t == BlockType::Skip).unwrap();
        let all_skip = (0..cfg.depth).all(|b| tokens[1 + b * SLOTS_PER_BLOCK] == skip);
        prop_assume!(!all_skip);
        let (bgm, arch) = space.decode(&tokens).unwrap();
        let again = space.encode(&bgm, &arch).unwrap();
        prop_assert_eq!(space.decode(&again).unwrap(), (bgm.clone(), arch.clone()));
        prop_assert_eq!(space.normalize(&again).unwrap(), again.clone());
        prop_assert_eq!(again[0], tokens[0]);
        for b in 0..cfg.depth {
            let base = 1 + b * SLOTS_PER_BLOCK;
            let t = cfg.block_types[tokens[base]];
            prop_assert_eq!(again[base], tokens[base]);
            if t != BlockType::Skip {
                prop_assert_eq!(again[base + 2], tokens[base + 2]);
                prop_assert_eq!(again[base + 3], tokens[base + 3]);
                if t.uses_ch2() {
                    prop_assert_eq!(again[base + 1], tokens[base + 1]);
                }
            }
        }
        let text = point_text(&bgm, &arch);
        let parsed = parse_point(&text, cfg.stem_channels, cfg.num_classes).unwrap();
        prop_assert_eq!(parsed, (bgm, arch));
    }

    #[test]
    fn scaled_weights_give_the_same_spec(w in proptest::collection::vec(0.01f64..10.0, 1..5), scale in 0.1f64..100.0) {
        let a = BgmSpec::from_weights(&w).unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let b = BgmSpec::from_weights(&scaled).unwrap();
        for (x, y) in a.ratios().iter().zip(b.ratios()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
