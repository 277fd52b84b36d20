//! Per-neuron, per-language activation statistics.
//!
//! Value sums are kept in fixed point (40 fractional bits in an `i128`) so that
//! merging is exact and independent of summation order.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sketch::{QuantileSketch, DEFAULT_K, POOLED_K};
use crate::corpus::{tokenize, Corpus, Registry};
use crate::error::{Error, Result};
use crate::model::{write_checkpoint, Checkpoint};

pub const STATS_MAGIC: &[u8; 8] = b"NASTAT01";
const FORMAT_VERSION: u32 = 1;
const FRAC_BITS: i32 = 40;
/// Documents per parallel work unit. Fixed so results do not depend on thread count.
const CHUNK_DOCS: usize = 16;

pub fn to_fixed(v: f32) -> i128 {
    (f64::from(v) * 2f64.powi(FRAC_BITS)).round() as i128
}

pub fn from_fixed(x: i128) -> f64 {
    x as f64 / 2f64.powi(FRAC_BITS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumulateConfig {
    pub context_len: usize,
    pub stride: usize,
}

impl Default for AccumulateConfig {
    fn default() -> Self {
        AccumulateConfig { context_len: 128, stride: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    n_layers: usize,
    d_ff: usize,
    languages: Vec<String>,
    provenance: String,
    config: AccumulateConfig,
    totals: Vec<u64>,
}

/// Cells are indexed `(layer * d_ff + neuron) * n_langs + lang`, languages in sorted id order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub n_layers: usize,
    pub d_ff: usize,
    pub languages: Vec<String>,
    /// Hex SHA-256 over the checkpoint bytes, accumulation config and language ids.
    pub provenance: String,
    pub config: AccumulateConfig,
    /// Tokens observed per language (the same for every neuron).
    pub totals: Vec<u64>,
    pub active: Vec<u64>,
    pub value_sum: Vec<i128>,
    /// Sum over active tokens only.
    pub active_sum: Vec<i128>,
    pub sketches: Vec<QuantileSketch>,
    /// All tap values of all neurons and languages.
    pub value_sketch: QuantileSketch,
}

pub fn provenance_hash(ckpt_bytes: &[u8], config: &AccumulateConfig, languages: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(ckpt_bytes);
    h.update((config.context_len as u64).to_le_bytes());
    h.update((config.stride as u64).to_le_bytes());
    for l in languages {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    hex::encode(h.finalize())
}

impl ActivationStats {
    pub fn empty(
        n_layers: usize,
        d_ff: usize,
        languages: Vec<String>,
        provenance: String,
        config: AccumulateConfig,
    ) -> Self {
        let cells = n_layers * d_ff * languages.len();
        ActivationStats {
            n_layers,
            d_ff,
            totals: vec![0; languages.len()],
            languages,
            provenance,
            config,
            active: vec![0; cells],
            value_sum: vec![0; cells],
            active_sum: vec![0; cells],
            sketches: vec![QuantileSketch::new(DEFAULT_K); cells],
            value_sketch: QuantileSketch::new(POOLED_K),
        }
    }

    pub fn n_langs(&self) -> usize {
        self.languages.len()
    }

    pub fn total_neurons(&self) -> usize {
        self.n_layers * self.d_ff
    }

    pub fn cell(&self, layer: usize, neuron: usize, lang: usize) -> usize {
        (layer * self.d_ff + neuron) * self.n_langs() + lang
    }

    pub fn lang_index(&self, id: &str) -> Result<usize> {
        self.languages.iter().position(|l| l == id).ok_or_else(|| Error::UnknownLanguage(id.to_string()))
    }

    /// Adds one token's tap vector (`n_layers * d_ff` values) under `lang`.
    pub fn observe(&mut self, lang: usize, taps: impl Fn(usize, usize) -> f32) {
        self.totals[lang] += 1;
        for layer in 0..self.n_layers {
            for j in 0..self.d_ff {
                let v = taps(layer, j);
                let c = self.cell(layer, j, lang);
                let fx = to_fixed(v);
                self.value_sum[c] += fx;
                if v > 0.0 {
                    self.active[c] += 1;
                    self.active_sum[c] += fx;
                }
                self.sketches[c].insert(v);
                self.value_sketch.insert(v);
            }
        }
    }

    pub fn value_sum_f64(&self, cell: usize) -> f64 {
        from_fixed(self.value_sum[cell])
    }

    /// Mean tap value over every token of the language.
    pub fn mean(&self, layer: usize, neuron: usize, lang: usize) -> Option<f64> {
        let t = self.totals[lang];
        (t > 0).then(|| self.value_sum_f64(self.cell(layer, neuron, lang)) / t as f64)
    }

    /// Mean tap value over the tokens where the neuron was active.
    pub fn active_mean(&self, layer: usize, neuron: usize, lang: usize) -> Option<f64> {
        let c = self.cell(layer, neuron, lang);
        (self.active[c] > 0).then(|| from_fixed(self.active_sum[c]) / self.active[c] as f64)
    }

    pub fn activation_probability(&self, layer: usize, neuron: usize, lang: usize) -> Option<f64> {
        let t = self.totals[lang];
        (t > 0).then(|| self.active[self.cell(layer, neuron, lang)] as f64 / t as f64)
    }

    fn check_compatible(&self, other: &ActivationStats) -> Result<()> {
        if self.provenance != other.provenance {
            return Err(Error::ProvenanceMismatch(format!("{} vs {}", self.provenance, other.provenance)));
        }
        if (self.n_layers, self.d_ff, &self.languages, self.config)
            != (other.n_layers, other.d_ff, &other.languages, other.config)
        {
            return Err(Error::ProvenanceMismatch("shapes or languages differ".into()));
        }
        Ok(())
    }

    /// Folds `other` into `self`. Counts and sums are exact.
    pub fn merge_from(&mut self, other: &ActivationStats) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        for (a, b) in self.active.iter_mut().zip(&other.active) {
            *a += b;
        }
        for (a, b) in self.value_sum.iter_mut().zip(&other.value_sum) {
            *a += b;
        }
        for (a, b) in self.active_sum.iter_mut().zip(&other.active_sum) {
            *a += b;
        }
        for (a, b) in self.sketches.iter_mut().zip(&other.sketches) {
            a.merge(b);
        }
        self.value_sketch.merge(&other.value_sketch);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            format_version: FORMAT_VERSION,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            languages: self.languages.clone(),
            provenance: self.provenance.clone(),
            config: self.config,
            totals: self.totals.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(STATS_MAGIC);
        out.extend((meta.len() as u64).to_le_bytes());
        out.extend(&meta);
        for a in &self.active {
            out.extend(a.to_le_bytes());
        }
        for s in self.value_sum.iter().chain(&self.active_sum) {
            out.extend(s.to_le_bytes());
        }
        for s in self.sketches.iter().chain(std::iter::once(&self.value_sketch)) {
            s.write_to(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != STATS_MAGIC {
            return Err(Error::CorruptHeader("not a stats file".into()));
        }
        let len = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::CorruptHeader(format!("stats header: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::CorruptHeader(format!("unsupported stats version {}", meta.format_version)));
        }
        let cells = meta.n_layers * meta.d_ff * meta.languages.len();
        let mut s = ActivationStats::empty(meta.n_layers, meta.d_ff, meta.languages, meta.provenance, meta.config);
        s.totals = meta.totals;
        for a in s.active.iter_mut() {
            *a = r.u64()?;
        }
        for v in s.value_sum.iter_mut() {
            *v = r.i128()?;
        }
        for v in s.active_sum.iter_mut() {
            *v = r.i128()?;
        }
        s.sketches = (0..cells).map(|_| QuantileSketch::read_from(&mut r)).collect::<Result<_>>()?;
        s.value_sketch = QuantileSketch::read_from(&mut r)?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptHeader("trailing bytes after stats".into()));
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn merge(a: &ActivationStats, b: &ActivationStats) -> Result<ActivationStats> {
    let mut out = a.clone();
    out.merge_from(b)?;
    Ok(out)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::TruncatedBlob {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn i128(&mut self) -> Result<i128> {
        Ok(i128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Runs every document of `corpus` through `ckpt` and tallies the taps.
///
/// Documents are split into windows of `context_len` tokens starting every
/// `stride` tokens; each token is counted once, in the first window that holds it.
/// No BOS is prepended.
pub fn accumulate(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    registry: &Registry,
    config: AccumulateConfig,
) -> Result<ActivationStats> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot accumulate over an empty corpus"));
    }
    if config.context_len == 0 || config.stride == 0 {
        return Err(Error::invalid("context_len and stride must be at least 1"));
    }
    if config.context_len > ckpt.config.max_seq_len {
        return Err(Error::invalid(format!(
            "context_len {} exceeds the model's max_seq_len {}",
            config.context_len, ckpt.config.max_seq_len
        )));
    }
    corpus.check_registered(registry)?;
    let mut languages = registry.ids();
    languages.sort();
    let provenance = provenance_hash(&write_checkpoint(ckpt)?, &config, &languages);
    let blank = ActivationStats::empty(ckpt.config.n_layers, ckpt.config.d_ff, languages, provenance, config);

    let docs: Vec<(usize, &str, &str)> = corpus
        .documents()
        .map(|(lang, d)| (blank.lang_index(lang).unwrap(), d.id.as_str(), d.text.as_str()))
        .collect();
    let partials: Vec<Result<ActivationStats>> = docs
        .par_chunks(CHUNK_DOCS)
        .map(|chunk| {
            let mut stats = blank.clone();
            for &(lang, id, text) in chunk {
                accumulate_doc(ckpt, &mut stats, lang, text, config)
                    .map_err(|e| Error::Document { doc: id.to_string(), source: Box::new(e) })?;
            }
            Ok(stats)
        })
        .collect();
    let mut out = blank;
    for p in partials {
        out.merge_from(&p?)?;
    }
    Ok(out)
}

fn accumulate_doc(
    ckpt: &Checkpoint,
    stats: &mut ActivationStats,
    lang: usize,
    text: &str,
    config: AccumulateConfig,
) -> Result<()> {
    let tokens = tokenize(text);
    let mut counted = 0;
    let mut start = 0;
    while counted < tokens.len() && start < tokens.len() {
        let end = (start + config.context_len).min(tokens.len());
        let from = counted.max(start);
        if from < end {
            let taps = ckpt.taps(&tokens[start..end])?;
            for pos in from - start..end - start {
                stats.observe(lang, |layer, j| taps[layer].at(pos, j));
            }
            counted = end;
        }
        start += config.stride;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_update() {
        let mut s = ActivationStats::empty(1, 3, vec!["a".into(), "b".into()], "p".into(), AccumulateConfig::default());
        s.observe(0, |_, j| if j == 1 { 3.2 } else { -0.5 });
        let c = s.cell(0, 1, 0);
        assert_eq!(s.active[c], 1);
        assert!((s.value_sum_f64(c) - f64::from(3.2f32)).abs() < 1e-12);
        assert_eq!(s.active[s.cell(0, 0, 0)], 0);
        assert_eq!(s.totals, vec![1, 0]);
    }

    #[test]
    fn fixed_point_round_trip() {
        for v in [0.0f32, 1.5, -2.25, 3.2, 1e-3, 123.456] {
            assert!((from_fixed(to_fixed(v)) - f64::from(v)).abs() < 1e-12);
        }
    }

    #[test]
    fn bytes_round_trip_and_provenance_guard() {
        let mut s = ActivationStats::empty(2, 2, vec!["a".into()], "p".into(), AccumulateConfig::default());
        s.observe(0, |l, j| l as f32 - j as f32 + 0.5);
        let back = ActivationStats::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert_eq!(back, s);
        let bytes = s.to_bytes().unwrap();
        assert!(matches!(ActivationStats::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::TruncatedBlob { .. })));

        let mut other = s.clone();
        other.provenance = "q".into();
        assert!(matches!(merge(&s, &other), Err(Error::ProvenanceMismatch(_))));
    }
}
