use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stanet::backbone::{build_model, count_flops, count_params, ArchSpec, ModelConfig, Variant};
use stanet::nas::*;
use stanet::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn sampling_is_seeded() {
    let space = SearchSpace::default();
    assert_eq!(
        sample_arch(&space, &mut rng(3)),
        sample_arch(&space, &mut rng(3))
    );
    let draws: Vec<ArchSpec> = (0..5).map(|s| sample_arch(&space, &mut rng(s))).collect();
    assert!(draws.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn thousand_samples_are_valid() {
    let space = SearchSpace::default();
    let mut r = rng(0);
    for _ in 0..1000 {
        let spec = sample_arch(&space, &mut r);
        spec.validate().unwrap();
        assert_eq!(spec.total_stride(), 32);
        assert_eq!(ArchSpec::parse(&spec.to_text()).unwrap(), spec);
    }
}

#[test]
fn mutations_stay_valid_and_change_one_choice() {
    let space = SearchSpace::default();
    let mut r = rng(1);
    let mut g = Genome::sample(&space, &mut r);
    for _ in 0..1000 {
        let m = g.mutate(&space, &mut r);
        assert_ne!(m, g);
        let spec = m.to_spec(&space);
        spec.validate().unwrap();
        assert_eq!(spec.total_stride(), 32);
        g = m;
    }
}

#[test]
fn entropy_matches_hand_tally_of_shipped_table() {
    // fan-in c_in·k²/groups per conv, read row by row off the layer table
    let mut fan_in = vec![27.0, 8.0, 25.0, 16.0, 8.0, 25.0, 32.0];
    fan_in.extend([24.0, 25.0, 32.0, 24.0, 25.0, 32.0, 24.0, 25.0, 80.0]);
    for _ in 0..7 {
        fan_in.extend([56.0, 25.0, 80.0]);
    }
    fan_in.extend([56.0, 25.0, 144.0]);
    for _ in 0..3 {
        fan_in.extend([72.0, 25.0, 144.0]);
    }
    fan_in.extend([72.0, 512.0, 128.0]);
    let logs: Vec<f64> = fan_in.iter().map(|f: &f64| f.ln()).collect();
    let n = logs.len() as f64;
    let sum: f64 = logs.iter().sum();
    let sd = (logs.iter().map(|l| (l - sum / n).powi(2)).sum::<f64>() / n).sqrt();
    let spec = ArchSpec::stanet();
    assert_eq!(entropy_terms(&spec).len(), 52);
    assert!((entropy_score(&spec, 0.5) - (sum - 0.5 * sd)).abs() < 1e-9);
}

#[test]
fn widening_raises_the_sum() {
    let base = ArchSpec::stanet();
    let total = |s: &ArchSpec| entropy_terms(s).iter().sum::<f64>();
    for i in 0..base.blocks.len() {
        let mut wide = base.clone();
        wide.blocks[i].exp += 8;
        assert!(total(&wide) > total(&base), "exp {i}");
        let mut wide = base.clone();
        wide.blocks[i].out += 8;
        wide.blocks[i].exp += 8;
        assert!(total(&wide) > total(&base), "out {i}");
    }
}

#[test]
fn score_ignores_classes_and_attention_flags() {
    let base = ArchSpec::stanet();
    let mut bare = base.clone().with_classes(3);
    for b in &mut bare.blocks {
        b.se = false;
        b.stam = false;
    }
    assert_eq!(entropy_score(&base, 0.5), entropy_score(&bare, 0.5));
    assert_eq!(
        entropy_score(&base, 0.5),
        entropy_score(&base.clone().with_classes(1000), 0.5)
    );
}

#[test]
fn shipped_backbone_fits_its_budget() {
    let spec = ArchSpec::stanet();
    assert!(check_constraints(&spec, &Budget::new(320_000, 45_000_000)).is_empty());
    let v = check_constraints(&spec, &Budget::new(300_000, 30_000_000));
    assert_eq!(v.len(), 2);
    assert_eq!(v[0].limit, Limit::Params);
    assert_eq!(v[0].measured, 302_678);
    assert_eq!(v[0].to_string(), "params 302678 > limit 300000");
    assert_eq!(v[1].limit, Limit::Macs);
}

#[test]
fn absurd_widths_breach_params() {
    let mut spec = ArchSpec::stanet();
    for b in &mut spec.blocks {
        b.out = 1024;
        b.exp = 1024;
    }
    let v = check_constraints(&spec, &Budget::new(320_000, u64::MAX));
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].limit, Limit::Params);
    assert!(v[0].measured > v[0].bound);
}

#[test]
fn search_contract_holds() {
    let space = SearchSpace::default();
    let budget = Budget::new(320_000, 45_000_000);
    let out = search(&space, &budget, &SearchConfig::new(500, 42)).unwrap();
    assert_eq!(out.log.len(), 500);
    let top = out
        .log
        .iter()
        .filter(|c| c.feasible)
        .map(|c| c.score)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(top, out.best_score);
    assert_eq!(entropy_score(&out.best, DEFAULT_BETA), out.best_score);

    // independent re-verification on a built model
    let spec = out.best.clone().with_classes(budget.classes);
    let model = build_model(&spec, Variant::Baseline, &ModelConfig::default(), 0).unwrap();
    let params = count_params(&model).total_params();
    let macs = count_flops(&spec, Variant::Baseline, &ModelConfig::default(), 224).total_macs();
    assert!(params <= budget.max_params, "{params}");
    assert!(macs <= budget.max_macs, "{macs}");
    assert_eq!((params, macs), (out.best_params, out.best_macs));

    let again = search(&space, &budget, &SearchConfig::new(500, 42)).unwrap();
    assert_eq!(again.best, out.best);
    assert_eq!(again.log_csv(), out.log_csv());
    assert!(out
        .log_csv()
        .starts_with("iter,score,params,macs,feasible\n"));
}

#[test]
fn searched_spec_carries_attention_on_stride_one_rows() {
    let out = search(
        &SearchSpace::default(),
        &Budget::new(320_000, 45_000_000),
        &SearchConfig::new(50, 1),
    )
    .unwrap();
    let stam: Vec<_> = out.best.blocks.iter().filter(|b| b.stam).collect();
    assert_eq!(stam.len(), 2);
    assert!(stam.iter().all(|b| b.stride == 1));
    assert!(out.best.blocks.iter().all(|b| b.se));
}

#[test]
fn budget_below_the_smallest_candidate_is_infeasible() {
    let space = SearchSpace::default();
    let (floor, _) = baseline_cost(&minimal_spec(&space), 22);
    let budget = Budget::new(floor - 1, u64::MAX);
    match search(&space, &budget, &SearchConfig::new(200, 0)) {
        Err(Error::InfeasibleBudget(200)) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn search_space_toml_round_trip() {
    let space = SearchSpace::default();
    let text = space.to_toml();
    assert_eq!(SearchSpace::from_toml(&text).unwrap(), space);
    let mut three = space.clone();
    three.stages.pop();
    assert!(SearchSpace::from_toml(&three.to_toml()).is_err());
}
