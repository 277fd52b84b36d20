#![allow(dead_code)]

use natlas_core::corpus::{synth_corpus, synth_family, Corpus, Registry, VOCAB_SIZE};
use natlas_core::model::{
    init_checkpoint, plant_model, random_plant, Checkpoint, ModelConfig, PlantLedger, PlantOptions,
};

pub struct Planted {
    pub ckpt: Checkpoint,
    pub ledger: PlantLedger,
    pub registry: Registry,
    pub corpus: Corpus,
}

pub fn planted_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 32,
        d_ff: 256,
        n_heads: 4,
        vocab_size: VOCAB_SIZE,
        max_seq_len: 512,
        norm_eps: 1e-6,
        rope_base: 10_000.0,
    }
}

/// Four disjoint languages with eight planted neurons each in the upper two layers.
pub fn planted(seed: u64) -> Planted {
    let registry = Registry::new(synth_family(4, 0.0, 10, seed).unwrap()).unwrap();
    let config = planted_config();
    let plant = random_plant(&config, &registry, 8, &[2, 3], seed).unwrap();
    let (ckpt, ledger) = plant_model(config, &registry, &plant, &PlantOptions { seed }).unwrap();
    let corpus = synth_corpus(&registry, 12, 160, seed).unwrap();
    Planted { ckpt, ledger, registry, corpus }
}

/// A small untrained model (seeded initialization) over the byte vocabulary.
pub fn small_model(seed: u64) -> Checkpoint {
    let config = ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        vocab_size: VOCAB_SIZE,
        max_seq_len: 64,
        norm_eps: 1e-5,
        rope_base: 10_000.0,
    };
    init_checkpoint(config, seed).unwrap()
}

/// Three disjoint languages with short documents, for fast accumulation.
pub fn small_corpus(seed: u64, n_docs: usize, doc_len: usize) -> (Registry, Corpus) {
    let registry = Registry::new(synth_family(3, 0.0, 8, seed).unwrap()).unwrap();
    let corpus = synth_corpus(&registry, n_docs, doc_len, seed).unwrap();
    (registry, corpus)
}
