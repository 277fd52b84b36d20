use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::sketch::{percentile_exact, QuantileSketch, POOLED_K};
use super::table::LapeTable;
use crate::error::{Error, Result};

/// Populations up to this size get exact percentiles; larger ones go through a sketch.
pub const EXACT_PERCENTILE_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterPopulation {
    /// Pooled activation probabilities of every (neuron, language) pair.
    #[default]
    Prob,
    /// Pooled tap values; a neuron survives when its largest per-language mean reaches the cutoff.
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub k_percent: f64,
    pub filter_percentile: f64,
    pub threshold_percentile: f64,
    #[serde(default)]
    pub filter_population: FilterPopulation,
}

impl SelectConfig {
    pub fn new(k_percent: f64) -> Self {
        SelectConfig { k_percent, filter_percentile: 95.0, threshold_percentile: 95.0, filter_population: FilterPopulation::Prob }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(Error::invalid(format!("k must be in (0, 100], got {}", self.k_percent)));
        }
        for p in [self.filter_percentile, self.threshold_percentile] {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
            }
        }
        Ok(())
    }

    /// Number of neurons ranked before assignment: `floor(k% of total)`.
    pub fn budget(&self, total_neurons: usize) -> usize {
        (self.k_percent * total_neurons as f64 / 100.0).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSet {
    pub language: String,
    /// Sorted `(layer, neuron)` pairs.
    pub neurons: Vec<(usize, usize)>,
    pub config: SelectConfig,
    pub provenance: String,
}

impl NeuronSet {
    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn contains(&self, layer: usize, neuron: usize) -> bool {
        self.neurons.binary_search(&(layer, neuron)).is_ok()
    }

    /// Neuron indices per layer, in layer order.
    pub fn by_layer(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(l, j) in &self.neurons {
            out.entry(l).or_default().push(j);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub config: SelectConfig,
    pub survivors: usize,
    pub filter_cutoff: f64,
    /// Per-language assignment cutoffs, in table language order.
    pub thresholds: Vec<f64>,
    /// Neurons kept by the entropy ranking, in rank order.
    pub ranked: Vec<(usize, usize)>,
    /// Number of ranked neurons carrying each label count.
    pub multiplicity: BTreeMap<usize, usize>,
    pub sets: Vec<NeuronSet>,
}

impl Selection {
    pub fn set(&self, language: &str) -> Option<&NeuronSet> {
        self.sets.iter().find(|s| s.language == language)
    }
}

fn pooled_percentile(values: &[f64], pct: f64) -> f64 {
    if values.len() <= EXACT_PERCENTILE_LIMIT {
        percentile_exact(values, pct).unwrap_or(0.0)
    } else {
        let s = QuantileSketch::from_values(POOLED_K, values.iter().map(|&v| v as f32));
        s.percentile(pct).map_or(0.0, f64::from)
    }
}

/// Marks filter and threshold flags on `table` and returns the per-language sets.
pub fn select(table: &mut LapeTable, config: &SelectConfig) -> Result<Selection> {
    config.validate()?;
    let n = table.languages.len();

    let filter_cutoff = match config.filter_population {
        FilterPopulation::Prob => {
            let pooled: Vec<f64> = table.neurons.iter().flat_map(|s| s.p.iter().copied()).collect();
            pooled_percentile(&pooled, config.filter_percentile)
        }
        FilterPopulation::Value => table.value_sketch.percentile(config.filter_percentile).map_or(0.0, f64::from),
    };
    let thresholds: Vec<f64> = (0..n)
        .map(|l| {
            let column: Vec<f64> = table.neurons.iter().map(|s| s.p[l]).collect();
            pooled_percentile(&column, config.threshold_percentile)
        })
        .collect();

    for s in &mut table.neurons {
        let peak = match config.filter_population {
            FilterPopulation::Prob => s.p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            FilterPopulation::Value => s.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        s.passed_filter = !s.inactive && peak >= filter_cutoff;
        s.passed_threshold = s.p.iter().zip(&thresholds).map(|(&p, &t)| p >= t).collect();
    }

    let mut candidates: Vec<&_> = table.neurons.iter().filter(|s| s.passed_filter).collect();
    let survivors = candidates.len();
    if survivors == 0 {
        log::warn!("no neuron passed the filter at the {}th percentile", config.filter_percentile);
    }
    candidates.sort_by(|a, b| {
        a.entropy.total_cmp(&b.entropy).then(a.layer.cmp(&b.layer)).then(a.neuron.cmp(&b.neuron))
    });
    candidates.truncate(config.budget(table.total_neurons()));

    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut multiplicity = BTreeMap::new();
    for s in &candidates {
        let mut labels = 0;
        for (l, &ok) in s.passed_threshold.iter().enumerate() {
            if ok {
                members[l].push((s.layer, s.neuron));
                labels += 1;
            }
        }
        *multiplicity.entry(labels).or_insert(0) += 1;
    }
    let sets = table
        .languages
        .iter()
        .zip(members)
        .map(|(lang, mut neurons)| {
            neurons.sort_unstable();
            NeuronSet { language: lang.clone(), neurons, config: *config, provenance: table.provenance.clone() }
        })
        .collect();

    Ok(Selection {
        config: *config,
        survivors,
        filter_cutoff,
        thresholds,
        ranked: candidates.iter().map(|s| (s.layer, s.neuron)).collect(),
        multiplicity,
        sets,
    })
}

/// Selected neurons per layer.
pub fn layer_histogram(set: &NeuronSet, n_layers: usize) -> Vec<usize> {
    let mut h = vec![0; n_layers];
    for &(l, _) in &set.neurons {
        h[l] += 1;
    }
    h
}

/// Set sizes per language (rows) and k (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronCountTable {
    pub languages: Vec<String>,
    pub ks: Vec<f64>,
    pub counts: Vec<Vec<usize>>,
}

pub fn neuron_count_table(table: &LapeTable, base: &SelectConfig, ks: &[f64]) -> Result<NeuronCountTable> {
    let mut scratch = table.clone();
    let mut counts = vec![vec![0; ks.len()]; table.languages.len()];
    for (ki, &k) in ks.iter().enumerate() {
        let sel = select(&mut scratch, &SelectConfig { k_percent: k, ..*base })?;
        for (li, set) in sel.sets.iter().enumerate() {
            counts[li][ki] = set.len();
        }
    }
    Ok(NeuronCountTable { languages: table.languages.clone(), ks: ks.to_vec(), counts })
}

impl NeuronCountTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["language".to_string()];
        header.extend(self.ks.iter().map(|k| format!("top{k}%")));
        w.write_record(&header)?;
        for (lang, row) in self.languages.iter().zip(&self.counts) {
            let mut rec = vec![lang.clone()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec)?;
        }
        csv_string(w)
    }
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub languages: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

pub fn overlap(sets: &[NeuronSet]) -> OverlapMatrix {
    let as_sets: Vec<BTreeSet<(usize, usize)>> = sets.iter().map(|s| s.neurons.iter().copied().collect()).collect();
    let counts = as_sets
        .iter()
        .map(|a| as_sets.iter().map(|b| a.intersection(b).count()).collect())
        .collect();
    OverlapMatrix { languages: sets.iter().map(|s| s.language.clone()).collect(), counts }
}

impl OverlapMatrix {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["language".to_string()];
        header.extend(self.languages.iter().cloned());
        w.write_record(&header)?;
        for (lang, row) in self.languages.iter().zip(&self.counts) {
            let mut rec = vec![lang.clone()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec)?;
        }
        csv_string(w)
    }

    pub fn get(&self, a: &str, b: &str) -> Option<usize> {
        let i = self.languages.iter().position(|l| l == a)?;
        let j = self.languages.iter().position(|l| l == b)?;
        Some(self.counts[i][j])
    }
}
