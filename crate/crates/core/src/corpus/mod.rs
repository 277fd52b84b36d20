//! Synthetic languages, corpora, byte-level tokenization and the built-in
//! language classifier.

mod classify;
mod language;
mod tokenizer;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use classify::{Classifier, LanguageDistribution};
pub use language::{
    synth_family, synth_languages, synth_pool, BigramChain, LanguageSpec, Registry, SINGLE_BYTE_POOL,
};
pub use tokenizer::{detokenize, token_char, tokenize, BOS, EOS, PAD, VOCAB_SIZE};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64 },
    Directory { path: String },
    Mixed,
}

/// Documents per language id. Iteration is in sorted language order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub docs: BTreeMap<String, Vec<Document>>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn new(provenance: Provenance) -> Self {
        Corpus { docs: BTreeMap::new(), provenance }
    }

    pub fn push(&mut self, lang: &str, doc: Document) -> Result<()> {
        if doc.text.is_empty() {
            return Err(Error::invalid(format!("document `{}` is empty", doc.id)));
        }
        self.docs.entry(lang.to_string()).or_default().push(doc);
        Ok(())
    }

    pub fn documents(&self) -> impl Iterator<Item = (&str, &Document)> {
        self.docs.iter().flat_map(|(l, ds)| ds.iter().map(move |d| (l.as_str(), d)))
    }

    pub fn n_documents(&self) -> usize {
        self.docs.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_documents() == 0
    }

    pub fn check_registered(&self, registry: &Registry) -> Result<()> {
        for lang in self.docs.keys() {
            registry.get(lang)?;
        }
        Ok(())
    }

    /// Documents of `self` followed by those of `other`, per language.
    pub fn concat(&self, other: &Corpus) -> Corpus {
        let mut out = self.clone();
        for (l, ds) in &other.docs {
            out.docs.entry(l.clone()).or_default().extend(ds.iter().cloned());
        }
        if out.provenance != other.provenance {
            out.provenance = Provenance::Mixed;
        }
        out
    }
}

/// `n_docs` samples of `doc_len` codepoints from the language's bigram chain.
pub fn generate_corpus(spec: &LanguageSpec, n_docs: usize, doc_len: usize, seed: u64) -> Result<Vec<String>> {
    if doc_len == 0 {
        return Err(Error::invalid("doc_len must be at least 1"));
    }
    let chain = spec.chain();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_docs).map(|_| chain.sample(doc_len, &mut rng)).collect())
}

/// A corpus with `n_docs` documents for every registered language.
pub fn synth_corpus(registry: &Registry, n_docs: usize, doc_len: usize, seed: u64) -> Result<Corpus> {
    let mut corpus = Corpus::new(Provenance::Synthetic { seed });
    for (i, lang) in registry.languages.iter().enumerate() {
        let lang_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
        for (j, text) in generate_corpus(lang, n_docs, doc_len, lang_seed)?.into_iter().enumerate() {
            corpus.push(&lang.id, Document { id: format!("{}/{j:05}", lang.id), text })?;
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    /// Files skipped because they are not valid UTF-8.
    pub invalid_utf8: Vec<String>,
    /// Files dropped by the per-language byte cap.
    pub truncated: usize,
    pub empty: usize,
}

/// Reads `<root>/<lang-id>/*.txt`.
///
/// Files are read in parallel and merged in sorted path order. With `max_bytes`,
/// each language keeps whole documents in path order until the next one would
/// exceed the cap.
pub fn load_corpus_dir(
    root: impl AsRef<Path>,
    registry: &Registry,
    max_bytes: Option<usize>,
) -> Result<(Corpus, LoadReport)> {
    let root = root.as_ref();
    let mut langs: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            registry.get(&name)?;
            langs.push((name, entry.path()));
        }
    }
    langs.sort();

    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for (lang, dir) in &langs {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        paths.sort();
        files.extend(paths.into_iter().map(|p| (lang.clone(), p)));
    }
    let contents: Vec<std::io::Result<Vec<u8>>> = files.par_iter().map(|(_, p)| fs::read(p)).collect();

    let mut corpus = Corpus::new(Provenance::Directory { path: root.display().to_string() });
    let mut report = LoadReport::default();
    let mut used: BTreeMap<String, usize> = BTreeMap::new();
    let mut capped: BTreeMap<String, bool> = BTreeMap::new();
    for ((lang, path), bytes) in files.iter().zip(contents) {
        let bytes = bytes?;
        let rel = path.strip_prefix(root).unwrap_or(path).display().to_string();
        let text = match String::from_utf8(bytes) {
            Ok(t) => t,
            Err(_) => {
                log::warn!("skipping {rel}: invalid UTF-8");
                report.invalid_utf8.push(rel);
                continue;
            }
        };
        if text.is_empty() {
            report.empty += 1;
            continue;
        }
        if let Some(cap) = max_bytes {
            let u = used.entry(lang.clone()).or_default();
            let full = capped.entry(lang.clone()).or_default();
            if *full || *u + text.len() > cap {
                *full = true;
                report.truncated += 1;
                continue;
            }
            *u += text.len();
        }
        corpus.push(lang, Document { id: rel, text })?;
    }
    Ok((corpus, report))
}

/// Writes the corpus in the layout [`load_corpus_dir`] reads.
pub fn write_corpus_dir(corpus: &Corpus, root: impl AsRef<Path>) -> Result<()> {
    for (lang, docs) in &corpus.docs {
        let dir = root.as_ref().join(lang);
        fs::create_dir_all(&dir)?;
        for (i, d) in docs.iter().enumerate() {
            fs::write(dir.join(format!("doc_{i:05}.txt")), &d.text)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> Registry {
        Registry::new(synth_family(2, 0.0, 6, 11).unwrap()).unwrap()
    }

    #[test]
    fn generation_is_closed_and_deterministic() {
        let reg = registry();
        let l = &reg.languages[0];
        let a = generate_corpus(l, 3, 200, 5).unwrap();
        let b = generate_corpus(l, 3, 200, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flat_map(|d| d.chars()).all(|c| l.contains(c)));
        assert!(generate_corpus(l, 1, 0, 5).is_err());
    }

    #[test]
    fn directory_round_trip_and_byte_cap() {
        let reg = registry();
        let corpus = synth_corpus(&reg, 4, 50, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus_dir(&corpus, dir.path()).unwrap();
        let (back, report) = load_corpus_dir(dir.path(), &reg, None).unwrap();
        assert_eq!(back.docs.values().map(|d| d.len()).collect::<Vec<_>>(), vec![4, 4]);
        assert_eq!(report, LoadReport::default());
        for (lang, docs) in &corpus.docs {
            let texts: Vec<_> = back.docs[lang].iter().map(|d| d.text.clone()).collect();
            assert_eq!(texts, docs.iter().map(|d| d.text.clone()).collect::<Vec<_>>());
        }

        let (capped, report) = load_corpus_dir(dir.path(), &reg, Some(120)).unwrap();
        assert!(capped.docs.values().all(|d| d.len() == 2));
        assert_eq!(report.truncated, 4);
    }

    #[test]
    fn unknown_language_and_bad_utf8() {
        let reg = registry();
        let dir = tempfile::tempdir().unwrap();
        let id = &reg.languages[0].id;
        fs::create_dir_all(dir.path().join(id)).unwrap();
        fs::write(dir.path().join(id).join("a.txt"), [0xff, 0xfe]).unwrap();
        fs::write(dir.path().join(id).join("b.txt"), "ok").unwrap();
        let (c, report) = load_corpus_dir(dir.path(), &reg, None).unwrap();
        assert_eq!(c.n_documents(), 1);
        assert_eq!(report.invalid_utf8.len(), 1);

        fs::create_dir_all(dir.path().join("zz")).unwrap();
        assert!(matches!(load_corpus_dir(dir.path(), &reg, None), Err(Error::UnknownLanguage(_))));
    }
}
