use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A registered language: its alphabet, family tag, and the seed of its bigram chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: String,
    pub family: String,
    #[serde(with = "codepoint_ranges")]
    pub alphabet: BTreeSet<char>,
    pub bigram_seed: u64,
    /// 1 is the highest priority.
    pub priority: u32,
}

impl LanguageSpec {
    pub fn contains(&self, c: char) -> bool {
        self.alphabet.contains(&c)
    }

    pub fn chain(&self) -> BigramChain {
        BigramChain::new(self)
    }
}

mod codepoint_ranges {
    use std::collections::BTreeSet;

    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(set: &BTreeSet<char>, s: S) -> Result<S::Ok, S::Error> {
        let mut ranges: Vec<[u32; 2]> = Vec::new();
        for &c in set {
            let c = c as u32;
            match ranges.last_mut() {
                Some(r) if r[1] + 1 == c => r[1] = c,
                _ => ranges.push([c, c]),
            }
        }
        s.collect_seq(ranges)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeSet<char>, D::Error> {
        let ranges = Vec::<[u32; 2]>::deserialize(d)?;
        let mut out = BTreeSet::new();
        for [lo, hi] in ranges {
            if lo > hi {
                return Err(D::Error::custom(format!("empty codepoint range [{lo}, {hi}]")));
            }
            for c in lo..=hi {
                out.insert(char::from_u32(c).ok_or_else(|| D::Error::custom(format!("invalid codepoint {c}")))?);
            }
        }
        Ok(out)
    }
}

/// The set of languages an experiment knows about, ordered by registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub languages: Vec<LanguageSpec>,
}

impl Registry {
    pub fn new(languages: Vec<LanguageSpec>) -> Result<Self> {
        let r = Registry { languages };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for l in &self.languages {
            if l.alphabet.is_empty() {
                return Err(Error::invalid(format!("language `{}` has an empty alphabet", l.id)));
            }
            if l.id.is_empty() || !seen.insert(&l.id) {
                return Err(Error::invalid(format!("duplicate or empty language id `{}`", l.id)));
            }
        }
        if self.languages.is_empty() {
            return Err(Error::invalid("registry has no languages"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r: Registry = serde_json::from_slice(&fs::read(path)?)?;
        r.validate()?;
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&LanguageSpec> {
        self.languages.iter().find(|l| l.id == id).ok_or_else(|| Error::UnknownLanguage(id.to_string()))
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.languages.iter().position(|l| l.id == id).ok_or_else(|| Error::UnknownLanguage(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.languages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.languages.is_empty()
    }

    /// Language ids sorted by ascending priority rank (ties by id).
    pub fn by_priority(&self) -> Vec<String> {
        let mut v: Vec<&LanguageSpec> = self.languages.iter().collect();
        v.sort_by(|a, b| a.priority.cmp(&b.priority).then_with(|| a.id.cmp(&b.id)));
        v.into_iter().map(|l| l.id.clone()).collect()
    }

    pub fn families(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for l in &self.languages {
            out.entry(l.family.clone()).or_default().push(l.id.clone());
        }
        out
    }
}

/// First-order Markov chain over a language's alphabet.
#[derive(Debug, Clone)]
pub struct BigramChain {
    pub symbols: Vec<char>,
    /// Row-stochastic `[n, n]` transition matrix.
    pub transitions: Vec<f64>,
}

impl BigramChain {
    fn new(spec: &LanguageSpec) -> Self {
        let symbols: Vec<char> = spec.alphabet.iter().copied().collect();
        let n = symbols.len();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.bigram_seed);
        let mut transitions = vec![0.0; n * n];
        for row in transitions.chunks_exact_mut(n) {
            for w in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = (1.5 * z).exp();
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= s);
        }
        BigramChain { symbols, transitions }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn index(&self, c: char) -> Option<usize> {
        self.symbols.binary_search(&c).ok()
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * self.len() + to]
    }

    /// A sample of `len` codepoints; the first symbol is uniform.
    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> String {
        let n = self.len();
        let mut out = String::with_capacity(len);
        let mut cur = rng.gen_range(0..n);
        for i in 0..len {
            if i > 0 {
                let u: f64 = rng.gen();
                let row = &self.transitions[cur * n..(cur + 1) * n];
                let mut acc = 0.0;
                cur = n - 1;
                for (j, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        cur = j;
                        break;
                    }
                }
            }
            out.push(self.symbols[cur]);
        }
        out
    }
}

/// Codepoints available to synthetic alphabets: ASCII alphanumerics except the
/// prompt-frame letters `A` and `Q`, then Greek and Cyrillic lowercase.
pub fn synth_pool() -> Vec<char> {
    let mut pool: Vec<char> = ('a'..='z').collect();
    pool.extend(('B'..='Z').filter(|&c| c != 'Q'));
    pool.extend('0'..='9');
    pool.extend(('α'..='ω').filter(|&c| c != 'ς'));
    pool.extend('а'..='я');
    pool
}

/// Number of single-byte codepoints at the front of [`synth_pool`].
pub const SINGLE_BYTE_POOL: usize = 26 + 24 + 10;

/// Synthetic languages grouped in families.
///
/// Within a family every pair shares exactly `floor(fraction * alphabet_size)`
/// codepoints; alphabets of different families are disjoint. Codepoints come
/// from the single-byte part of the pool first, in a seed-dependent order.
pub fn synth_languages(
    n_families: usize,
    per_family: usize,
    shared_fraction: f64,
    alphabet_size: usize,
    seed: u64,
) -> Result<Vec<LanguageSpec>> {
    if !(0.0..=1.0).contains(&shared_fraction) {
        return Err(Error::invalid(format!("shared fraction {shared_fraction} outside [0, 1]")));
    }
    if alphabet_size == 0 || per_family == 0 || n_families == 0 {
        return Err(Error::invalid("alphabet size, family size and family count must be positive"));
    }
    let shared = (shared_fraction * alphabet_size as f64).floor() as usize;
    let unique = alphabet_size - shared;
    let per_family_need = shared + unique * per_family;
    let need = per_family_need * n_families;

    let pool = synth_pool();
    if need > pool.len() {
        return Err(Error::invalid(format!(
            "{need} codepoints needed but only {} available for disjoint alphabets",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<char> = if need <= SINGLE_BYTE_POOL {
        pool[..SINGLE_BYTE_POOL].to_vec()
    } else {
        pool.clone()
    };
    order.shuffle(&mut rng);

    let mut next = order.into_iter();
    let mut out = Vec::new();
    for f in 0..n_families {
        let family_tag = format!("fam{}", (b'a' + f as u8) as char);
        let common: Vec<char> = next.by_ref().take(shared).collect();
        for i in 0..per_family {
            let mut alphabet: BTreeSet<char> = common.iter().copied().collect();
            alphabet.extend(next.by_ref().take(unique));
            let rank = out.len() as u32 + 1;
            out.push(LanguageSpec {
                id: format!("{}{}", (b'a' + f as u8) as char, i),
                family: family_tag.clone(),
                alphabet,
                bigram_seed: rng.gen(),
                priority: rank,
            });
        }
    }
    Ok(out)
}

/// One family of `n_langs` synthetic languages.
pub fn synth_family(n_langs: usize, shared_fraction: f64, alphabet_size: usize, seed: u64) -> Result<Vec<LanguageSpec>> {
    synth_languages(1, n_langs, shared_fraction, alphabet_size, seed)
}
