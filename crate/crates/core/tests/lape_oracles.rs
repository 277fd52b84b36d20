mod common;

use natlas_core::corpus::{tokenize, Corpus, Document, Provenance};
use natlas_core::lape::{
    accumulate, compute_lape, merge, neuron_count_table, select, AccumulateConfig, ActivationStats, SelectConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct Oracle {
    groups: Vec<Group>,
}

#[derive(Deserialize)]
struct Group {
    totals: Vec<u64>,
    neurons: Vec<OracleNeuron>,
}

#[derive(Deserialize)]
struct OracleNeuron {
    active: Vec<u64>,
    entropy: String,
}

fn stats_from_counts(totals: &[u64], active: &[Vec<u64>]) -> ActivationStats {
    let langs: Vec<String> = (0..totals.len()).map(|i| format!("l{i}")).collect();
    let mut s = ActivationStats::empty(1, active.len(), langs, "oracle".into(), AccumulateConfig::default());
    s.totals = totals.to_vec();
    for (j, row) in active.iter().enumerate() {
        for (l, &a) in row.iter().enumerate() {
            let c = s.cell(0, j, l);
            s.active[c] = a;
        }
    }
    s
}

// Fixture written by fixtures/gen_entropy_oracle.py with 60-digit arithmetic.
#[test]
fn entropy_matches_high_precision_oracle() {
    let oracle: Oracle = serde_json::from_str(include_str!("fixtures/entropy_oracle.json")).unwrap();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for g in &oracle.groups {
        let active: Vec<Vec<u64>> = g.neurons.iter().map(|n| n.active.clone()).collect();
        let table = compute_lape(&stats_from_counts(&g.totals, &active)).unwrap();
        for (j, n) in g.neurons.iter().enumerate() {
            let want: f64 = n.entropy.parse().unwrap();
            let got = table.get(0, j).entropy;
            worst = worst.max((got - want).abs());
            assert!((got - want).abs() <= 1e-12, "neuron {j}: {got} vs {want}");
            checked += 1;
        }
    }
    assert_eq!(checked, 1000);
    println!("worst entropy error {worst:e}");
}

#[test]
fn one_hot_and_uniform_are_exact() {
    for n in 2..=9usize {
        let totals: Vec<u64> = (1..=n as u64).map(|i| 100 * i).collect();
        let uniform: Vec<u64> = (1..=n as u64).map(|i| 10 * i).collect();
        let mut one_hot = vec![0; n];
        one_hot[n - 1] = 37;
        let table = compute_lape(&stats_from_counts(&totals, &[uniform, one_hot])).unwrap();
        assert!((table.get(0, 0).entropy - (n as f64).ln()).abs() <= 1e-15);
        assert!(table.get(0, 1).entropy.abs() <= 1e-15);
    }
}

fn split_corpus(docs: &[(String, Document)], idx: &[usize]) -> Corpus {
    let mut c = Corpus::new(Provenance::Mixed);
    for &i in idx {
        c.push(&docs[i].0, docs[i].1.clone()).unwrap();
    }
    c
}

/// Fraction of `sorted` strictly below and at most `v`.
fn rank_range(sorted: &[f32], v: f32) -> (f64, f64) {
    let lo = sorted.partition_point(|&x| x < v) as f64;
    let hi = sorted.partition_point(|&x| x <= v) as f64;
    (lo / sorted.len() as f64, hi / sorted.len() as f64)
}

#[test]
fn merge_equals_accumulating_the_concatenation() {
    let ckpt = common::small_model(5);
    let (registry, corpus) = common::small_corpus(5, 4, 40);
    let config = AccumulateConfig { context_len: 64, stride: 64 };
    let docs: Vec<(String, Document)> = corpus.documents().map(|(l, d)| (l.to_string(), d.clone())).collect();

    // Documents fit in one window, so every tap value is a plain forward pass.
    let mut exact: Vec<f32> = Vec::new();
    for (_, d) in &docs {
        for tap in ckpt.taps(&tokenize(&d.text)).unwrap() {
            exact.extend_from_slice(&tap.values);
        }
    }
    exact.sort_by(f32::total_cmp);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for split in 0..100 {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut rng);
        let cut = rng.gen_range(1..docs.len());
        let a = accumulate(&ckpt, &split_corpus(&docs, &order[..cut]), &registry, config).unwrap();
        let b = accumulate(&ckpt, &split_corpus(&docs, &order[cut..]), &registry, config).unwrap();
        let whole = accumulate(&ckpt, &split_corpus(&docs, &order), &registry, config).unwrap();
        let m = merge(&a, &b).unwrap();

        assert_eq!(m.totals, whole.totals, "split {split}");
        assert_eq!(m.active, whole.active, "split {split}");
        assert_eq!(m.value_sum, whole.value_sum, "split {split}");
        assert_eq!(m.active_sum, whole.active_sum, "split {split}");
        assert_eq!(m.value_sketch.count() as usize, exact.len());
        for q in 1..=99 {
            let v = m.value_sketch.percentile(q as f64).unwrap();
            let (lo, hi) = rank_range(&exact, v);
            let p = q as f64 / 100.0;
            assert!(p >= lo - 0.01 && p <= hi + 0.01, "split {split}, q {q}: rank [{lo}, {hi}]");
        }
    }
}

#[test]
fn selections_are_nested_in_k() {
    let p = common::planted(3);
    let small = common::small_model(8);
    let (registry, corpus) = common::small_corpus(8, 6, 60);
    let stats_list = [
        accumulate(&p.ckpt, &p.corpus, &p.registry, AccumulateConfig::default()).unwrap(),
        accumulate(&small, &corpus, &registry, AccumulateConfig { context_len: 64, stride: 32 }).unwrap(),
    ];
    for stats in &stats_list {
        let mut table = compute_lape(stats).unwrap();
        let mut prev: Option<Vec<Vec<(usize, usize)>>> = None;
        for k in 1..=5 {
            let sel = select(&mut table, &SelectConfig::new(k as f64)).unwrap();
            let sets: Vec<Vec<(usize, usize)>> = sel.sets.iter().map(|s| s.neurons.clone()).collect();
            if let Some(prev) = &prev {
                for (small_set, big_set) in prev.iter().zip(&sets) {
                    assert!(small_set.iter().all(|n| big_set.contains(n)), "k={k} does not contain k={}", k - 1);
                }
            }
            prev = Some(sets);
        }
        let counts = neuron_count_table(&table, &SelectConfig::new(1.0), &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let csv = counts.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "language,top1%,top2%,top3%,top4%,top5%");
        assert_eq!(lines.count(), stats.n_langs());
    }
}
