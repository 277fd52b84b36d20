//! Analytically constructed checkpoints whose language neurons are known.
//!
//! The residual stream reserves, per language `l`, an indicator coordinate
//! `IND[l]` (the current token's character is in `l`'s alphabet), a context
//! coordinate `CTX[l]` (share of `l` tokens so far, written by uniform causal
//! attention in layer 0) and an output coordinate `OUT[l]`, plus one constant
//! coordinate `ONE`. A planted neuron of `l` gates on `IND[l] + CTX[l] - θ·ONE`,
//! so it is strongly positive on `l` text and slightly negative elsewhere; its
//! down-projection writes into `OUT[l]`, which the unembedding turns into mass
//! on `l`'s tokens. A small priority-ordered prior on `ONE` decides which
//! language wins when no language neuron is positive.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Checkpoint, ModelConfig};
use crate::corpus::Registry;
use crate::error::{Error, Result};

/// Tap value a planted neuron reaches on its own language.
pub const G_HI: f32 = 4.0;
/// Scale of the symmetric noise on everything that is not planted.
pub const PLANT_NOISE: f32 = 0.02;

/// Language id → `(layer, neuron)` pairs.
pub type PlantLedger = BTreeMap<String, Vec<(usize, usize)>>;
pub type PlantSpec = PlantLedger;

const GATE_GAIN: f32 = 16.0;
const GATE_THRESHOLD: f32 = 0.35;
/// On-language tap lands at about `1.12 * G_HI`.
const TAP_TARGET: f32 = 1.12 * G_HI;
const DOWN_GAIN: f32 = 0.005;
const UNEMBED_GAIN: f32 = 100.0;
const PRIOR_STEP: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct PlantOptions {
    pub seed: u64,
}

struct Coords {
    n: usize,
}

impl Coords {
    fn ind(&self, l: usize) -> usize {
        l
    }
    fn ctx(&self, l: usize) -> usize {
        self.n + l
    }
    fn out(&self, l: usize) -> usize {
        2 * self.n + l
    }
    fn one(&self) -> usize {
        3 * self.n
    }
    fn reserved(&self) -> usize {
        3 * self.n + 1
    }
}

/// Priority weight in `(0.5, 1]`, decreasing with rank.
fn priority_weight(rank_index: usize, n: usize) -> f32 {
    1.0 - rank_index as f32 / (2 * n) as f32
}

/// Picks `per_lang` distinct neurons per language, spread round-robin over `layers`.
pub fn random_plant(
    config: &ModelConfig,
    registry: &Registry,
    per_lang: usize,
    layers: &[usize],
    seed: u64,
) -> Result<PlantSpec> {
    if layers.is_empty() {
        return Err(Error::InvalidPlant("no layers to plant in".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &l in layers {
        if l >= config.n_layers {
            return Err(Error::InvalidPlant(format!("layer {l} >= n_layers {}", config.n_layers)));
        }
        let mut ix: Vec<usize> = (0..config.d_ff).collect();
        ix.shuffle(&mut rng);
        pools.insert(l, ix);
    }
    let mut plant = PlantSpec::new();
    let mut slot = 0;
    for lang in &registry.languages {
        let mut mine = Vec::with_capacity(per_lang);
        for _ in 0..per_lang {
            let layer = layers[slot % layers.len()];
            slot += 1;
            let neuron = pools
                .get_mut(&layer)
                .and_then(Vec::pop)
                .ok_or_else(|| Error::InvalidPlant(format!("layer {layer} has no free neurons left")))?;
            mine.push((layer, neuron));
        }
        mine.sort_unstable();
        plant.insert(lang.id.clone(), mine);
    }
    Ok(plant)
}

/// Builds the checkpoint realizing `plant` over `registry`'s alphabets.
pub fn plant_model(
    config: ModelConfig,
    registry: &Registry,
    plant: &PlantSpec,
    options: &PlantOptions,
) -> Result<(Checkpoint, PlantLedger)> {
    config.validate()?;
    let n = registry.len();
    let c = Coords { n };
    if c.reserved() > config.d_model {
        return Err(Error::InvalidPlant(format!(
            "{n} languages need {} reserved coordinates but d_model is {}",
            c.reserved(),
            config.d_model
        )));
    }
    if config.vocab_size < 128 {
        return Err(Error::InvalidPlant("vocabulary must cover single-byte tokens".into()));
    }
    let mut seen = BTreeSet::new();
    for (lang, cells) in plant {
        registry.get(lang)?;
        for &(layer, neuron) in cells {
            if layer >= config.n_layers || neuron >= config.d_ff {
                return Err(Error::InvalidPlant(format!("({layer}, {neuron}) out of range")));
            }
            if !seen.insert((layer, neuron)) {
                return Err(Error::InvalidPlant(format!("({layer}, {neuron}) planted twice")));
            }
        }
    }
    for l in &registry.languages {
        if let Some(ch) = l.alphabet.iter().find(|ch| !ch.is_ascii()) {
            return Err(Error::InvalidPlant(format!(
                "`{}` uses {ch:?}, which is not a single-byte token",
                l.id
            )));
        }
    }

    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let noise = Normal::new(0.0f32, PLANT_NOISE).unwrap();
    let mut ckpt = Checkpoint::zeros(config)?;
    let free: Vec<usize> = (c.reserved()..d).collect();
    let priority_rank: BTreeMap<String, usize> =
        registry.by_priority().into_iter().enumerate().map(|(i, id)| (id, i)).collect();

    for t in 0..v {
        let row = &mut ckpt.embed[t * d..(t + 1) * d];
        row[c.one()] = 1.0;
        if t < 128 {
            let ch = char::from(t as u8);
            for (li, lang) in registry.languages.iter().enumerate() {
                if lang.contains(ch) {
                    row[c.ind(li)] = 1.0;
                }
            }
        }
        for &k in &free {
            row[k] = noise.sample(&mut rng);
        }
    }

    // Unit reserved coordinates normalize to about 1 with this gain.
    let gain = (3.0 / d as f32).sqrt();
    let ctx_gain = (2.0 / d as f32).sqrt();
    for (layer_ix, layer) in ckpt.layers.iter_mut().enumerate() {
        layer.attn_norm.iter_mut().for_each(|g| *g = 1.0);
        layer.ffn_norm.iter_mut().for_each(|g| *g = gain);
        if layer_ix == 0 {
            // Zero queries and keys give uniform causal attention.
            for li in 0..n {
                layer.wv[li * d + c.ind(li)] = 1.0;
                layer.wo[c.ctx(li) * d + li] = ctx_gain;
            }
        }
        for j in 0..f {
            let gate = &mut layer.w_gate[j * d..(j + 1) * d];
            for &k in &free {
                gate[k] = noise.sample(&mut rng);
            }
            let bias: f32 = rng.gen_range(0.3..1.0);
            gate[c.one()] = if rng.gen::<bool>() { bias } else { -bias };
            let up = &mut layer.w_up[j * d..(j + 1) * d];
            for &k in &free {
                up[k] = noise.sample(&mut rng);
            }
            up[c.one()] = 0.3;
        }
        for &k in &free {
            for j in 0..f {
                layer.w_down[k * f + j] = noise.sample(&mut rng);
            }
        }
    }

    let on_pre = GATE_GAIN * (2.0 - GATE_THRESHOLD);
    let up_gain = TAP_TARGET / (on_pre * crate::linalg::sigmoid(on_pre));
    for (li, lang) in registry.languages.iter().enumerate() {
        let Some(cells) = plant.get(&lang.id) else { continue };
        let weight = priority_weight(priority_rank[&lang.id], n);
        for &(layer, j) in cells {
            let lw = &mut ckpt.layers[layer];
            let gate = &mut lw.w_gate[j * d..(j + 1) * d];
            gate.iter_mut().for_each(|g| *g = 0.0);
            gate[c.ind(li)] = GATE_GAIN;
            gate[c.ctx(li)] = GATE_GAIN;
            gate[c.one()] = -GATE_GAIN * GATE_THRESHOLD;
            let up = &mut lw.w_up[j * d..(j + 1) * d];
            up.iter_mut().for_each(|u| *u = 0.0);
            up[c.one()] = up_gain;
            for k in 0..d {
                lw.w_down[k * f + j] = 0.0;
            }
            lw.w_down[c.out(li) * f + j] = DOWN_GAIN * weight;
        }
    }

    ckpt.final_norm.iter_mut().for_each(|g| *g = gain);
    for t in 0..v {
        let row = &mut ckpt.unembed[t * d..(t + 1) * d];
        for &k in &free {
            row[k] = noise.sample(&mut rng);
        }
        if t >= 128 {
            continue;
        }
        let ch = char::from(t as u8);
        for (li, lang) in registry.languages.iter().enumerate() {
            if lang.contains(ch) {
                row[c.out(li)] = UNEMBED_GAIN;
                row[c.one()] = PRIOR_STEP * (n - priority_rank[&lang.id]) as f32;
            }
        }
    }

    let ledger = plant.iter().map(|(k, v)| {
        let mut v = v.clone();
        v.sort_unstable();
        (k.clone(), v)
    });
    Ok((ckpt, ledger.collect()))
}
