use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Which tap neurons of a layer a directive touches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronTarget {
    Sparse(Vec<usize>),
    /// Every neuron of the layer.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TapValues {
    Scalar(f32),
    /// One value per targeted neuron, in target order.
    PerNeuron(Vec<f32>),
}

impl TapValues {
    fn at(&self, i: usize) -> f32 {
        match self {
            TapValues::Scalar(v) => *v,
            TapValues::PerNeuron(vs) => vs[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapOp {
    Add(TapValues),
    Multiply(f32),
    Set(TapValues),
}

/// One rewrite of the post-gate activation of a layer, applied at every position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapDirective {
    pub layer: usize,
    pub target: NeuronTarget,
    pub op: TapOp,
}

impl TapDirective {
    pub fn add(layer: usize, neurons: Vec<usize>, values: Vec<f32>) -> Self {
        TapDirective { layer, target: NeuronTarget::Sparse(neurons), op: TapOp::Add(TapValues::PerNeuron(values)) }
    }

    pub fn multiply(layer: usize, neurons: Vec<usize>, factor: f32) -> Self {
        TapDirective { layer, target: NeuronTarget::Sparse(neurons), op: TapOp::Multiply(factor) }
    }

    pub fn set(layer: usize, neurons: Vec<usize>, value: f32) -> Self {
        TapDirective { layer, target: NeuronTarget::Sparse(neurons), op: TapOp::Set(TapValues::Scalar(value)) }
    }

    pub fn dense_add(layer: usize, values: Vec<f32>) -> Self {
        TapDirective { layer, target: NeuronTarget::Dense, op: TapOp::Add(TapValues::PerNeuron(values)) }
    }

    /// Concrete neuron indices this directive touches.
    pub fn neurons(&self, d_ff: usize) -> Vec<usize> {
        match &self.target {
            NeuronTarget::Sparse(ix) => ix.clone(),
            NeuronTarget::Dense => (0..d_ff).collect(),
        }
    }

    /// `(neuron, value)` pairs; the value is the factor for multiply.
    pub fn entries(&self, d_ff: usize) -> Vec<(usize, f32)> {
        let neurons = self.neurons(d_ff);
        neurons
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                let v = match &self.op {
                    TapOp::Multiply(f) => *f,
                    TapOp::Add(vals) | TapOp::Set(vals) => vals.at(i),
                };
                (n, v)
            })
            .collect()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(Error::DirectiveOutOfRange(format!(
                "layer {} >= n_layers {}",
                self.layer, config.n_layers
            )));
        }
        let n_targets = match &self.target {
            NeuronTarget::Sparse(ix) => {
                if let Some(&bad) = ix.iter().find(|&&i| i >= config.d_ff) {
                    return Err(Error::DirectiveOutOfRange(format!(
                        "neuron {bad} >= d_ff {} on layer {}",
                        config.d_ff, self.layer
                    )));
                }
                ix.len()
            }
            NeuronTarget::Dense => config.d_ff,
        };
        if let TapOp::Add(TapValues::PerNeuron(v)) | TapOp::Set(TapValues::PerNeuron(v)) = &self.op {
            if v.len() != n_targets {
                return Err(Error::DirectiveOutOfRange(format!(
                    "{} values for {n_targets} targeted neurons on layer {}",
                    v.len(),
                    self.layer
                )));
            }
        }
        Ok(())
    }
}

/// Directives grouped per layer and per mode, ready to apply to activation rows.
#[derive(Debug, Clone, Default)]
pub struct CompiledDirectives {
    layers: Vec<LayerOps>,
}

#[derive(Debug, Clone, Default)]
struct LayerOps {
    mul: Vec<(usize, f32)>,
    add: Vec<(usize, f32)>,
    set: Vec<(usize, f32)>,
}

impl CompiledDirectives {
    pub fn compile(directives: &[TapDirective], config: &ModelConfig) -> Result<Self> {
        let mut layers = vec![LayerOps::default(); config.n_layers];
        for d in directives {
            d.validate(config)?;
            let ops = &mut layers[d.layer];
            let entries = d.entries(config.d_ff);
            match d.op {
                TapOp::Multiply(_) => ops.mul.extend(entries),
                TapOp::Add(_) => ops.add.extend(entries),
                TapOp::Set(_) => ops.set.extend(entries),
            }
        }
        Ok(CompiledDirectives { layers })
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.mul.is_empty() && l.add.is_empty() && l.set.is_empty())
    }

    /// Rewrites every `d_ff`-wide row of `acts`: multiply, then add, then set.
    pub fn apply(&self, layer: usize, acts: &mut [f32], d_ff: usize) {
        let Some(ops) = self.layers.get(layer) else { return };
        for row in acts.chunks_exact_mut(d_ff) {
            for &(j, f) in &ops.mul {
                row[j] *= f;
            }
            for &(j, b) in &ops.add {
                row[j] += b;
            }
            for &(j, v) in &ops.set {
                row[j] = v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_util::tiny_config;

    #[test]
    fn mode_order_is_multiply_add_set() {
        let cfg = tiny_config();
        let dirs = vec![
            TapDirective::add(0, vec![1], vec![2.5]),
            TapDirective::multiply(0, vec![1, 2], 0.0),
            TapDirective::set(0, vec![3], -1.0),
            TapDirective::add(0, vec![3], vec![100.0]),
        ];
        let c = CompiledDirectives::compile(&dirs, &cfg).unwrap();
        let mut row = vec![7.0f32; cfg.d_ff];
        c.apply(0, &mut row, cfg.d_ff);
        assert_eq!(row[1], 2.5);
        assert_eq!(row[2], 0.0);
        assert_eq!(row[3], -1.0);
        assert_eq!(row[4], 7.0);
    }

    #[test]
    fn out_of_range_directives_are_rejected() {
        let cfg = tiny_config();
        let e = CompiledDirectives::compile(&[TapDirective::set(cfg.n_layers, vec![0], 0.0)], &cfg);
        assert!(matches!(e, Err(Error::DirectiveOutOfRange(_))));
        let e = CompiledDirectives::compile(&[TapDirective::set(0, vec![cfg.d_ff], 0.0)], &cfg);
        assert!(matches!(e, Err(Error::DirectiveOutOfRange(_))));
        let e = CompiledDirectives::compile(&[TapDirective::add(0, vec![0, 1], vec![1.0])], &cfg);
        assert!(matches!(e, Err(Error::DirectiveOutOfRange(_))));
    }

    #[test]
    fn json_shape() {
        let d = TapDirective::set(1, vec![4, 5], -2.5);
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"layer":1,"target":{"sparse":[4,5]},"op":{"set":-2.5}}"#);
        let dense = TapDirective::dense_add(0, vec![1.0, 2.0]);
        let s = serde_json::to_string(&dense).unwrap();
        assert_eq!(s, r#"{"layer":0,"target":"dense","op":{"add":[1.0,2.0]}}"#);
        assert_eq!(serde_json::from_str::<TapDirective>(&s).unwrap(), dense);
    }
}
