use serde::{Deserialize, Serialize};

use super::sketch::QuantileSketch;
use super::stats::ActivationStats;
use crate::error::{Error, Result};

/// Shannon entropy (nats) of `p` after normalizing it to sum to one, with `0 ln 0 = 0`.
///
/// Returns `None` when every entry is zero.
pub fn normalized_entropy(p: &[f64]) -> Option<(Vec<f64>, f64)> {
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let norm: Vec<f64> = p.iter().map(|&x| x / total).collect();
    let support: Vec<f64> = p.iter().copied().filter(|&x| x > 0.0).collect();
    // Uniform support gives ln(support) exactly; one-hot gives 0.
    if support.iter().all(|&x| x == support[0]) {
        return Some((norm, (support.len() as f64).ln()));
    }
    let nonzero: Vec<f64> = norm.iter().copied().filter(|&q| q > 0.0).collect();
    let mut h = 0.0;
    for &q in &nonzero {
        h -= q * q.ln();
    }
    Some((norm, h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronScore {
    pub layer: usize,
    pub neuron: usize,
    /// Activation probability per language.
    pub p: Vec<f64>,
    /// `p` normalized over languages; all zeros for inactive neurons.
    pub p_norm: Vec<f64>,
    pub entropy: f64,
    /// Never active on any language; never selectable.
    pub inactive: bool,
    /// Mean tap value per language over all its tokens.
    pub mean: Vec<f64>,
    pub passed_filter: bool,
    pub passed_threshold: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapeTable {
    pub n_layers: usize,
    pub d_ff: usize,
    pub languages: Vec<String>,
    pub provenance: String,
    /// Ordered by layer, then neuron.
    pub neurons: Vec<NeuronScore>,
    /// Distribution of all tap values, used by the value-population filter.
    pub value_sketch: QuantileSketch,
}

impl LapeTable {
    pub fn total_neurons(&self) -> usize {
        self.n_layers * self.d_ff
    }

    pub fn get(&self, layer: usize, neuron: usize) -> &NeuronScore {
        &self.neurons[layer * self.d_ff + neuron]
    }
}

pub fn compute_lape(stats: &ActivationStats) -> Result<LapeTable> {
    if let Some(i) = stats.totals.iter().position(|&t| t == 0) {
        return Err(Error::ZeroTokenLanguage(stats.languages[i].clone()));
    }
    let n = stats.n_langs();
    let mut neurons = Vec::with_capacity(stats.total_neurons());
    for layer in 0..stats.n_layers {
        for neuron in 0..stats.d_ff {
            let p: Vec<f64> =
                (0..n).map(|l| stats.activation_probability(layer, neuron, l).unwrap()).collect();
            let mean: Vec<f64> = (0..n).map(|l| stats.mean(layer, neuron, l).unwrap()).collect();
            let (p_norm, entropy, inactive) = match normalized_entropy(&p) {
                Some((q, h)) => (q, h, false),
                None => (vec![0.0; n], (n as f64).ln(), true),
            };
            neurons.push(NeuronScore {
                layer,
                neuron,
                p,
                p_norm,
                entropy,
                inactive,
                mean,
                passed_filter: false,
                passed_threshold: vec![false; n],
            });
        }
    }
    Ok(LapeTable {
        n_layers: stats.n_layers,
        d_ff: stats.d_ff,
        languages: stats.languages.clone(),
        provenance: stats.provenance.clone(),
        neurons,
        value_sketch: stats.value_sketch.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_entropies() {
        assert_eq!(normalized_entropy(&[0.0, 0.7, 0.0]).unwrap().1, 0.0);
        assert_eq!(normalized_entropy(&[0.3, 0.3]).unwrap().1, 2f64.ln());
        assert_eq!(normalized_entropy(&[1.0; 5]).unwrap().1, 5f64.ln());
        assert!((normalized_entropy(&[0.8, 0.2]).unwrap().1 - 0.500402423538188).abs() < 1e-12);
        assert!(normalized_entropy(&[0.0, 0.0]).is_none());
    }

    #[test]
    fn zero_token_language_is_rejected() {
        let s = ActivationStats::empty(1, 1, vec!["a".into()], "p".into(), Default::default());
        assert!(matches!(compute_lape(&s), Err(Error::ZeroTokenLanguage(_))));
    }

    #[test]
    fn inactive_neurons_are_flagged() {
        let mut s = ActivationStats::empty(1, 2, vec!["a".into(), "b".into()], "p".into(), Default::default());
        s.observe(0, |_, j| if j == 0 { 1.0 } else { -1.0 });
        s.observe(1, |_, _| -1.0);
        let t = compute_lape(&s).unwrap();
        assert_eq!(t.get(0, 0).entropy, 0.0);
        assert!(t.get(0, 1).inactive);
        assert_eq!(t.get(0, 1).entropy, 2f64.ln());
    }
}
