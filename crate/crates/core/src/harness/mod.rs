//! Experiment runners: language forcing, fallback cascades and prompted evals.

mod eval;
mod fallback;
mod forcing;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use eval::{char_f1, exact_match, load_tasks, run_eval, EvalItem, EvalResult, EvalTask, Metric};
pub use fallback::{default_order, run_fallback, FallbackReport, FallbackStep};
pub use forcing::{run_forcing, ForcingFamily, ForcingOptions, ForcingOutcome, ForcingReport, Strategy};

use crate::corpus::{LanguageSpec, Registry};
use crate::error::Result;
use crate::lape::NeuronSet;

pub const QUESTIONS_PER_LANGUAGE: usize = 6;
pub const FALLBACK_PROMPTS: usize = 70;

/// A short question in `spec`'s language inside the shared `Q: ... A:` frame.
pub fn question(spec: &LanguageSpec, rng: &mut ChaCha8Rng) -> String {
    let chain = spec.chain();
    let n_words = rng.gen_range(3..=5);
    let words: Vec<String> = (0..n_words)
        .map(|_| {
            let len = rng.gen_range(2..=6);
            chain.sample(len, rng)
        })
        .collect();
    format!("Q: {}? A:", words.join(" "))
}

/// `n` questions per registered language, keyed by language id.
pub fn question_set(registry: &Registry, n: usize, seed: u64) -> BTreeMap<String, Vec<String>> {
    registry
        .languages
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xA5A5_0000 + i as u64));
            (spec.id.clone(), (0..n).map(|_| question(spec, &mut rng)).collect())
        })
        .collect()
}

/// Neuron sets keyed by language.
pub type SetMap = BTreeMap<String, NeuronSet>;

pub fn set_map(sets: impl IntoIterator<Item = NeuronSet>) -> SetMap {
    sets.into_iter().map(|s| (s.language.clone(), s)).collect()
}

/// The neurons of `a` that are not in `b`, under `a`'s language.
pub fn set_difference(a: &NeuronSet, b: &NeuronSet) -> NeuronSet {
    NeuronSet {
        neurons: a.neurons.iter().copied().filter(|&(l, j)| !b.contains(l, j)).collect(),
        ..a.clone()
    }
}

/// The union of several sets, labelled with the joined language ids.
pub fn set_union<'a>(sets: impl IntoIterator<Item = &'a NeuronSet>) -> Option<NeuronSet> {
    let mut it = sets.into_iter();
    let first = it.next()?.clone();
    let mut out = first;
    for s in it {
        out.language = format!("{}+{}", out.language, s.language);
        out.neurons.extend(s.neurons.iter().copied());
    }
    out.neurons.sort_unstable();
    out.neurons.dedup();
    Some(out)
}

/// The set of `lang`, or a validation error naming it.
pub fn require_sets<'a>(sets: &'a SetMap, lang: &str) -> Result<&'a NeuronSet> {
    sets.get(lang).ok_or_else(|| crate::Error::invalid(format!("no neuron set for `{lang}`")))
}
