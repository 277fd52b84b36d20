//! Language activation probability entropy: statistics, scoring and neuron selection.

mod select;
mod sketch;
mod stats;
mod table;

pub use select::{
    layer_histogram, neuron_count_table, overlap, select, FilterPopulation, NeuronCountTable, NeuronSet,
    OverlapMatrix, SelectConfig, Selection, EXACT_PERCENTILE_LIMIT,
};
pub use sketch::{nearest_rank, percentile_exact, QuantileSketch, DEFAULT_K, POOLED_K};
pub use stats::{
    accumulate, from_fixed, merge, provenance_hash, to_fixed, AccumulateConfig, ActivationStats, STATS_MAGIC,
};
pub use table::{compute_lape, normalized_entropy, LapeTable, NeuronScore};

pub(crate) use select::csv_string;
