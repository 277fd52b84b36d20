//! Deterministic language identification over registered alphabets.
//!
//! Each language scores `0.7 * membership + 0.3 * tanh(bigram LLR)`, where
//! membership is the share of known characters inside its alphabet and the LLR is
//! the mean log-likelihood ratio of its bigram chain against a uniform draw from
//! the same alphabet, taken over consecutive character pairs. Scores go through a
//! softmax at temperature 0.1; characters outside every alphabet feed the
//! separate "unknown" mass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{token_char, BigramChain, Registry};

const MEMBERSHIP_WEIGHT: f64 = 0.7;
const BIGRAM_WEIGHT: f64 = 0.3;
const TEMPERATURE: f64 = 0.1;
/// Texts shorter than this many bytes are scored on membership only.
const MIN_BIGRAM_BYTES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageDistribution {
    pub probs: BTreeMap<String, f64>,
    pub unknown: f64,
}

impl LanguageDistribution {
    pub fn all_unknown(ids: impl IntoIterator<Item = String>) -> Self {
        LanguageDistribution { probs: ids.into_iter().map(|i| (i, 0.0)).collect(), unknown: 1.0 }
    }

    /// The most likely language, or `None` when unknown carries at least as much mass.
    pub fn top1(&self) -> Option<&str> {
        let mut best: Option<(&str, f64)> = None;
        for (id, &p) in &self.probs {
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((id, p));
            }
        }
        match best {
            Some((id, p)) if p > self.unknown => Some(id),
            _ => None,
        }
    }

    pub fn prob(&self, id: &str) -> f64 {
        self.probs.get(id).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum::<f64>() + self.unknown
    }

    /// Shannon entropy (nats) with "unknown" as its own outcome.
    pub fn entropy(&self) -> f64 {
        self.probs
            .values()
            .chain(std::iter::once(&self.unknown))
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

struct Entry {
    id: String,
    chain: BigramChain,
}

pub struct Classifier {
    /// Sorted by id so results do not depend on registration order.
    entries: Vec<Entry>,
}

impl Classifier {
    pub fn new(registry: &Registry) -> Self {
        let mut entries: Vec<Entry> =
            registry.languages.iter().map(|l| Entry { id: l.id.clone(), chain: l.chain() }).collect();
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Classifier { entries }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    fn known(&self, c: char) -> bool {
        self.entries.iter().any(|e| e.chain.index(c).is_some())
    }

    pub fn classify(&self, text: &str) -> LanguageDistribution {
        let chars: Vec<char> = text.chars().collect();
        let n_known = chars.iter().filter(|&&c| self.known(c)).count();
        if n_known == 0 {
            return LanguageDistribution::all_unknown(self.ids().map(str::to_string));
        }
        let unknown = (chars.len() - n_known) as f64 / chars.len() as f64;
        let use_bigrams = text.len() >= MIN_BIGRAM_BYTES && chars.len() >= 2;

        let scores: Vec<f64> = self
            .entries
            .iter()
            .map(|e| {
                let members = chars.iter().filter(|&&c| e.chain.index(c).is_some()).count();
                let membership = members as f64 / n_known as f64;
                let llr = if use_bigrams {
                    let uniform = (e.chain.len() as f64).ln();
                    let mut total = 0.0;
                    for w in chars.windows(2) {
                        if let (Some(a), Some(b)) = (e.chain.index(w[0]), e.chain.index(w[1])) {
                            total += e.chain.prob(a, b).ln() + uniform;
                        }
                    }
                    (total / (chars.len() - 1) as f64).tanh()
                } else {
                    0.0
                };
                MEMBERSHIP_WEIGHT * membership + BIGRAM_WEIGHT * llr
            })
            .collect();

        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / TEMPERATURE).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs = self.entries.iter().zip(exps).map(|(e, x)| (e.id.clone(), (1.0 - unknown) * x / z)).collect();
        LanguageDistribution { probs, unknown }
    }

    /// Fractional membership of a single token: each language whose alphabet holds
    /// the token's character gets an equal share; other tokens are unknown.
    pub fn token_membership(&self, token: u32) -> Vec<(usize, f64)> {
        let Some(c) = token_char(token) else { return Vec::new() };
        let hits: Vec<usize> =
            self.entries.iter().enumerate().filter(|(_, e)| e.chain.index(c).is_some()).map(|(i, _)| i).collect();
        let w = 1.0 / hits.len().max(1) as f64;
        hits.into_iter().map(|i| (i, w)).collect()
    }

    pub fn id_at(&self, idx: usize) -> &str {
        &self.entries[idx].id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::{generate_corpus, synth_family, synth_languages};

    fn disjoint() -> Registry {
        Registry::new(synth_family(4, 0.0, 10, 3).unwrap()).unwrap()
    }

    #[test]
    fn empty_text_is_unknown() {
        let c = Classifier::new(&disjoint());
        let d = c.classify("");
        assert_eq!(d.unknown, 1.0);
        assert_eq!(d.top1(), None);
        assert_eq!(c.classify("::  ").unknown, 1.0);
    }

    #[test]
    fn generated_text_is_recognized() {
        let reg = disjoint();
        let c = Classifier::new(&reg);
        for l in &reg.languages {
            for doc in generate_corpus(l, 20, 30, 77).unwrap() {
                let d = c.classify(&doc);
                assert_eq!(d.top1(), Some(l.id.as_str()));
                assert!(d.prob(&l.id) >= 0.9, "{}: {}", l.id, d.prob(&l.id));
            }
        }
    }

    #[test]
    fn same_family_members_are_separable() {
        let reg = Registry::new(synth_languages(2, 3, 0.6, 10, 5).unwrap()).unwrap();
        let c = Classifier::new(&reg);
        let mut hits = 0;
        let mut total = 0;
        for l in &reg.languages {
            for doc in generate_corpus(l, 20, 60, 8).unwrap() {
                total += 1;
                hits += usize::from(c.classify(&doc).top1() == Some(l.id.as_str()));
            }
        }
        assert!(hits as f64 / total as f64 > 0.95, "{hits}/{total}");
    }

    #[test]
    fn even_mix_of_two_disjoint_languages_scores_equal() {
        let reg = disjoint();
        let c = Classifier::new(&reg);
        let a: Vec<char> = reg.languages[0].alphabet.iter().copied().collect();
        let b: Vec<char> = reg.languages[1].alphabet.iter().copied().collect();
        let text: String = (0..40).map(|i| if i % 2 == 0 { a[i % a.len()] } else { b[(i * 3) % b.len()] }).collect();
        let d = c.classify(&text);
        assert!((d.prob(&reg.languages[0].id) - d.prob(&reg.languages[1].id)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn distribution_is_normalized_and_order_free(seed in 0u64..500, len in 0usize..40) {
            let reg = disjoint();
            let c = Classifier::new(&reg);
            let pool: Vec<char> = reg.languages.iter().flat_map(|l| l.alphabet.iter().copied()).chain([' ', ':']).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let text: String = (0..len).map(|_| pool[rand::Rng::gen_range(&mut rng, 0..pool.len())]).collect();
            let d = c.classify(&text);
            prop_assert!((d.total() - 1.0).abs() < 1e-9);
            prop_assert!(d.probs.values().all(|&p| p >= 0.0) && d.unknown >= 0.0);

            let mut shuffled = reg.clone();
            shuffled.languages.reverse();
            let d2 = Classifier::new(&shuffled).classify(&text);
            prop_assert_eq!(d, d2);
        }
    }
}
