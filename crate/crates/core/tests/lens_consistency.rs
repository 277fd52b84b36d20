mod common;

use natlas_core::corpus::{tokenize, Classifier};
use natlas_core::harness::question_set;
use natlas_core::lens::{language_mass, lens_distributions, LensMode};
use natlas_core::model::{generate, GenerationSettings};

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[test]
fn final_layer_lens_agrees_with_greedy_first_token() {
    let p = common::planted(4);
    let classifier = Classifier::new(&p.registry);
    let prompts: Vec<String> = question_set(&p.registry, 25, 17).into_values().flatten().collect();
    assert_eq!(prompts.len(), 100);
    // No repetition penalty and no stop ids, so the first emitted token is the raw argmax.
    let settings = GenerationSettings { max_tokens: 1, repetition_penalty: 1.0, stop_ids: vec![], ..Default::default() };
    for text in &prompts {
        let tokens = tokenize(text);
        let dists = lens_distributions(&p.ckpt, &tokens, &[]).unwrap();
        assert_eq!(dists.len(), p.ckpt.config.n_layers);
        let first = generate(&p.ckpt, &tokens, &[], &settings).unwrap();
        assert_eq!(first, vec![argmax(dists.last().unwrap()) as u32], "prompt {text:?}");
        for d in &dists {
            for mode in [LensMode::Mass, LensMode::Top1] {
                let m = language_mass(d, &classifier, mode);
                assert!((m.total() - 1.0).abs() <= 1e-6, "mass sums to {}", m.total());
            }
        }
    }
}

#[test]
fn lens_agrees_on_an_untrained_model_too() {
    let ckpt = common::small_model(21);
    let settings = GenerationSettings { max_tokens: 1, repetition_penalty: 1.0, stop_ids: vec![], ..Default::default() };
    for i in 0..20u32 {
        let tokens: Vec<u32> = (0..=i % 7).map(|t| (t * 37 + i * 11) % 256).collect();
        let dists = lens_distributions(&ckpt, &tokens, &[]).unwrap();
        let first = generate(&ckpt, &tokens, &[], &settings).unwrap();
        assert_eq!(first, vec![argmax(dists.last().unwrap()) as u32]);
    }
}
