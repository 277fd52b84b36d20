mod common;

use std::collections::BTreeMap;

use natlas_core::corpus::Classifier;
use natlas_core::harness::{
    default_order, question_set, run_fallback, run_forcing, set_map, ForcingOptions, Strategy, FALLBACK_PROMPTS,
};
use natlas_core::lape::{accumulate, compute_lape, select, AccumulateConfig, ActivationStats, SelectConfig};
use natlas_core::lens::{profile_suite, LensMode};
use natlas_core::model::GenerationSettings;

fn stats_for(p: &common::Planted) -> ActivationStats {
    accumulate(&p.ckpt, &p.corpus, &p.registry, AccumulateConfig::default()).unwrap()
}

#[test]
fn full_budget_recovers_the_ledger() {
    for seed in [7, 1] {
        let p = common::planted(seed);
        let mut table = compute_lape(&stats_for(&p)).unwrap();
        // 3.125% of 4 * 256 neurons is exactly the 32 planted ones.
        let sel = select(&mut table, &SelectConfig::new(3.125)).unwrap();
        let got: BTreeMap<String, Vec<(usize, usize)>> =
            sel.sets.iter().map(|s| (s.language.clone(), s.neurons.clone())).collect();
        assert_eq!(got, p.ledger, "seed {seed}");
        assert_eq!(sel.multiplicity.get(&1), Some(&32));
    }
}

#[test]
fn one_percent_budget_selects_only_planted_neurons() {
    let p = common::planted(7);
    let mut table = compute_lape(&stats_for(&p)).unwrap();
    let sel = select(&mut table, &SelectConfig::new(1.0)).unwrap();
    let total: usize = sel.sets.iter().map(|s| s.len()).sum();
    assert_eq!(total, 10);
    for s in &sel.sets {
        for n in &s.neurons {
            assert!(p.ledger[&s.language].contains(n), "{n:?} is not planted for {}", s.language);
        }
    }
}

#[test]
fn forcing_succeeds_and_dominates_activation_only() {
    let p = common::planted(7);
    let stats = stats_for(&p);
    let mut table = compute_lape(&stats).unwrap();
    let sets = set_map(select(&mut table, &SelectConfig::new(3.125)).unwrap().sets);
    let classifier = Classifier::new(&p.registry);
    let questions = question_set(&p.registry, 6, 1);
    let mut opts = ForcingOptions { generation: GenerationSettings::default().with_max_tokens(64), ..Default::default() };
    let both = run_forcing(&p.ckpt, &sets, &stats, &questions, &classifier, &opts).unwrap();
    assert_eq!(both.outcomes.len(), 4 * 4 * 6);
    assert_eq!(both.overall, 1.0);
    opts.strategy = Strategy::Activate;
    let act = run_forcing(&p.ckpt, &sets, &stats, &questions, &classifier, &opts).unwrap();
    assert!(act.overall <= both.overall);
}

#[test]
fn fallback_walks_down_the_priority_chain() {
    let p = common::planted(7);
    let mut table = compute_lape(&stats_for(&p)).unwrap();
    let sets = set_map(select(&mut table, &SelectConfig::new(3.125)).unwrap().sets);
    let priority = p.registry.by_priority();
    let prompts = question_set(&p.registry, FALLBACK_PROMPTS, 3)[&priority[0]].clone();
    let settings = GenerationSettings::default().with_max_tokens(64);
    let order = default_order(&p.registry);
    let fb = run_fallback(&p.ckpt, &sets, &order, -1.0, &prompts, &Classifier::new(&p.registry), &settings).unwrap();
    assert_eq!(fb.steps.len(), 4);
    for (s, step) in fb.steps.iter().enumerate() {
        assert_eq!(step.top_language.as_deref(), Some(priority[s].as_str()));
        assert!(step.distribution[&priority[s]] >= 0.95, "step {s}: {:?}", step.distribution);
    }
}

#[test]
fn lens_target_probability_rises_through_planted_layers() {
    let p = common::planted(7);
    let prompts = question_set(&p.registry, 4, 2);
    let pivot = p.registry.by_priority()[0].clone();
    let suite = profile_suite(&p.ckpt, &prompts, &pivot, &Classifier::new(&p.registry), LensMode::Mass).unwrap();
    let t = &suite.mean.target_prob;
    assert!(t[3] > t[2] && t[2] > t[1], "{t:?}");
    assert!(t[3] > 0.5);
}
