//! Intervention plans over the FFN tap: activation addition, deactivation,
//! replacement with fixed statistics, DiffMean vectors, and their composition.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lape::{ActivationStats, NeuronSet};
use crate::model::{NeuronTarget, TapDirective, TapOp, TapValues};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoostDenominator {
    /// Mean over every token of the language.
    #[default]
    AllTokens,
    /// Mean over the tokens where the neuron was active.
    ActiveTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostVector {
    pub language: String,
    pub denominator: BoostDenominator,
    /// `((layer, neuron), b)` in the set's order.
    pub values: Vec<((usize, usize), f32)>,
}

pub fn compute_boosts(stats: &ActivationStats, set: &NeuronSet, denominator: BoostDenominator) -> Result<BoostVector> {
    let lang = stats.lang_index(&set.language)?;
    if stats.totals[lang] == 0 {
        return Err(Error::ZeroTokenLanguage(set.language.clone()));
    }
    let values = set
        .neurons
        .iter()
        .map(|&(layer, j)| {
            if layer >= stats.n_layers || j >= stats.d_ff {
                return Err(Error::DirectiveOutOfRange(format!("({layer}, {j}) outside the stats")));
            }
            let b = match denominator {
                BoostDenominator::AllTokens => stats.mean(layer, j, lang).unwrap(),
                BoostDenominator::ActiveTokens => stats.active_mean(layer, j, lang).unwrap_or(0.0),
            };
            Ok(((layer, j), b as f32))
        })
        .collect::<Result<_>>()?;
    Ok(BoostVector { language: set.language.clone(), denominator, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct InterventionPlan {
    pub recipe: String,
    pub directives: Vec<TapDirective>,
}

impl InterventionPlan {
    pub fn empty() -> Self {
        InterventionPlan::default()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, crate::report::to_json(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn group_by_layer<T: Copy>(items: impl IntoIterator<Item = ((usize, usize), T)>) -> BTreeMap<usize, (Vec<usize>, Vec<T>)> {
    let mut out: BTreeMap<usize, (Vec<usize>, Vec<T>)> = BTreeMap::new();
    for ((layer, j), v) in items {
        let e = out.entry(layer).or_default();
        e.0.push(j);
        e.1.push(v);
    }
    out
}

fn fmt_value(v: f32) -> String {
    format!("{v}")
}

/// `a[:, i] += b_i` on every neuron of the set.
pub fn plan_activate(set: &NeuronSet, boosts: &BoostVector) -> Result<InterventionPlan> {
    let covered: Vec<(usize, usize)> = boosts.values.iter().map(|v| v.0).collect();
    if boosts.language != set.language || covered != set.neurons {
        return Err(Error::invalid(format!(
            "boosts for `{}` do not cover the set of `{}`",
            boosts.language, set.language
        )));
    }
    let directives = group_by_layer(boosts.values.iter().copied())
        .into_iter()
        .map(|(layer, (neurons, values))| TapDirective::add(layer, neurons, values))
        .collect();
    Ok(InterventionPlan { recipe: format!("activate:{}(add b)", set.language), directives })
}

/// Zero deactivation compiles to `multiply(0)`, anything else to `set(value)`.
pub fn plan_deactivate(set: &NeuronSet, value: f32) -> InterventionPlan {
    if value == 0.0 {
        let directives = group_by_layer(set.neurons.iter().map(|&n| (n, ())))
            .into_iter()
            .map(|(layer, (neurons, _))| TapDirective::multiply(layer, neurons, 0.0))
            .collect();
        InterventionPlan { recipe: format!("deactivate:{}(multiply 0)", set.language), directives }
    } else {
        plan_set(set, value)
    }
}

/// `set(value)` on every neuron of the set, including `value = 0`.
pub fn plan_set(set: &NeuronSet, value: f32) -> InterventionPlan {
    let directives = group_by_layer(set.neurons.iter().map(|&n| (n, ())))
        .into_iter()
        .map(|(layer, (neurons, _))| TapDirective::set(layer, neurons, value))
        .collect();
    InterventionPlan { recipe: format!("deactivate:{}(set {})", set.language, fmt_value(value)), directives }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaceStatistic {
    Mean,
    Median,
}

/// Overwrites every neuron of the set with its mean or median tap value on the set's language.
pub fn plan_replace(set: &NeuronSet, stats: &ActivationStats, statistic: ReplaceStatistic) -> Result<InterventionPlan> {
    let lang = stats.lang_index(&set.language)?;
    if stats.totals[lang] == 0 {
        return Err(Error::ZeroTokenLanguage(set.language.clone()));
    }
    let values = set.neurons.iter().map(|&(layer, j)| {
        let v = match statistic {
            ReplaceStatistic::Mean => stats.mean(layer, j, lang).unwrap() as f32,
            ReplaceStatistic::Median => stats.sketches[stats.cell(layer, j, lang)].percentile(50.0).unwrap_or(0.0),
        };
        ((layer, j), v)
    });
    let directives = group_by_layer(values)
        .into_iter()
        .map(|(layer, (neurons, vals))| TapDirective {
            layer,
            target: NeuronTarget::Sparse(neurons),
            op: TapOp::Set(TapValues::PerNeuron(vals)),
        })
        .collect();
    let name = match statistic {
        ReplaceStatistic::Mean => "mean",
        ReplaceStatistic::Median => "median",
    };
    Ok(InterventionPlan { recipe: format!("replace:{}(set {name})", set.language), directives })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffMeanVector {
    pub language: String,
    pub scale: f32,
    /// One `d_ff` vector per layer.
    pub layers: Vec<Vec<f32>>,
}

/// Pooled mean tap over the languages in `langs`, per layer and neuron.
fn pooled_mean(stats: &ActivationStats, langs: &[usize]) -> Result<Vec<Vec<f64>>> {
    let tokens: u64 = langs.iter().map(|&l| stats.totals[l]).sum();
    if tokens == 0 {
        return Err(Error::invalid("DiffMean class has no observed tokens"));
    }
    Ok((0..stats.n_layers)
        .map(|layer| {
            (0..stats.d_ff)
                .map(|j| {
                    let sum: i128 = langs.iter().map(|&l| stats.value_sum[stats.cell(layer, j, l)]).sum();
                    crate::lape::from_fixed(sum) / tokens as f64
                })
                .collect()
        })
        .collect())
}

/// `scale * (mean(target class) - mean(other class))` per layer.
pub fn diffmean_between(
    stats: &ActivationStats,
    target: &[usize],
    other: &[usize],
    scale: f32,
) -> Result<Vec<Vec<f32>>> {
    let a = pooled_mean(stats, target)?;
    let b = pooled_mean(stats, other)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| scale * (x - y) as f32).collect())
        .collect())
}

pub fn compute_diffmean(stats: &ActivationStats, target: &str, scale: f32) -> Result<DiffMeanVector> {
    let t = stats.lang_index(target)?;
    let others: Vec<usize> = (0..stats.n_langs()).filter(|&l| l != t).collect();
    Ok(DiffMeanVector { language: target.to_string(), scale, layers: diffmean_between(stats, &[t], &others, scale)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiffMeanLayers {
    /// Only layers holding at least one of the target's selected neurons.
    #[default]
    Selected,
    All,
}

pub fn plan_diffmean(
    stats: &ActivationStats,
    target: &str,
    scale: f32,
    layers: DiffMeanLayers,
    set: Option<&NeuronSet>,
) -> Result<InterventionPlan> {
    let v = compute_diffmean(stats, target, scale)?;
    let keep: Vec<usize> = match (layers, set) {
        (DiffMeanLayers::All, _) => (0..stats.n_layers).collect(),
        (DiffMeanLayers::Selected, Some(s)) => s.by_layer().into_keys().collect(),
        (DiffMeanLayers::Selected, None) => {
            return Err(Error::invalid("DiffMean restricted to selected layers needs the target's neuron set"))
        }
    };
    let directives = keep.into_iter().map(|l| TapDirective::dense_add(l, v.layers[l].clone())).collect();
    Ok(InterventionPlan { recipe: format!("diffmean:{target}(add {}·Δμ)", fmt_value(scale)), directives })
}

fn add_value(d: &TapDirective, neuron: usize) -> Option<f32> {
    let TapOp::Add(values) = &d.op else { return None };
    let i = match &d.target {
        NeuronTarget::Dense => neuron,
        NeuronTarget::Sparse(ix) => ix.iter().position(|&j| j == neuron)?,
    };
    Some(match values {
        TapValues::Scalar(v) => *v,
        TapValues::PerNeuron(vs) => *vs.get(i)?,
    })
}

/// Concatenates plans in order.
///
/// A `set(v)` followed later by `add(b)` on the same neuron is fused into
/// `set(v + b)`, so deactivate-then-activate leaves exactly `v + b` (`b` for
/// `v = 0`). Two `set`s on one neuron are a conflict.
pub fn compose(plans: &[InterventionPlan]) -> Result<InterventionPlan> {
    let mut directives: Vec<TapDirective> = plans.iter().flat_map(|p| p.directives.iter().cloned()).collect();
    let mut seen_sets: BTreeMap<(usize, usize), ()> = BTreeMap::new();
    for i in 0..directives.len() {
        if !matches!(directives[i].op, TapOp::Set(_)) {
            continue;
        }
        let NeuronTarget::Sparse(neurons) = directives[i].target.clone() else {
            return Err(Error::invalid("dense set directives are not supported"));
        };
        let TapOp::Set(values) = directives[i].op.clone() else { unreachable!() };
        let mut fused = Vec::with_capacity(neurons.len());
        for (k, &j) in neurons.iter().enumerate() {
            let layer = directives[i].layer;
            if seen_sets.insert((layer, j), ()).is_some() {
                return Err(Error::PlanConflict { layer, neuron: j });
            }
            let mut v = match &values {
                TapValues::Scalar(v) => *v,
                TapValues::PerNeuron(vs) => vs[k],
            };
            for later in directives[i + 1..].iter().filter(|d| d.layer == layer) {
                if let Some(b) = add_value(later, j) {
                    v += b;
                }
            }
            fused.push(v);
        }
        if let TapValues::Scalar(s) = values {
            if fused.iter().all(|&v| v == s) {
                continue;
            }
        }
        directives[i].op = TapOp::Set(TapValues::PerNeuron(fused));
    }
    let recipe = plans.iter().map(|p| p.recipe.as_str()).filter(|r| !r.is_empty()).collect::<Vec<_>>().join(" + ");
    Ok(InterventionPlan { recipe, directives })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lape::{AccumulateConfig, SelectConfig};

    fn set(lang: &str, neurons: Vec<(usize, usize)>) -> NeuronSet {
        NeuronSet { language: lang.into(), neurons, config: SelectConfig::new(1.0), provenance: String::new() }
    }

    fn stats() -> ActivationStats {
        let mut s = ActivationStats::empty(2, 2, vec!["a".into(), "b".into()], "p".into(), AccumulateConfig::default());
        for v in [1.0, 2.0, 3.0] {
            s.observe(0, |l, j| if (l, j) == (0, 0) { v } else { 0.0 });
        }
        s.observe(1, |_, j| if j == 1 { 1.0 } else { 0.0 });
        s
    }

    #[test]
    fn boosts_average_over_all_tokens() {
        let s = stats();
        let b = compute_boosts(&s, &set("a", vec![(0, 0), (1, 1)]), BoostDenominator::AllTokens).unwrap();
        assert_eq!(b.values, vec![((0, 0), 2.0), ((1, 1), 0.0)]);
        let p = plan_activate(&set("a", vec![(0, 0), (1, 1)]), &b).unwrap();
        assert_eq!(p.directives.len(), 2);
        assert_eq!(p.recipe, "activate:a(add b)");
    }

    #[test]
    fn diffmean_example_and_antisymmetry() {
        let s = stats();
        let v = compute_diffmean(&s, "a", 1.0).unwrap();
        assert_eq!(v.layers[0], vec![2.0, -1.0]);
        let ab = diffmean_between(&s, &[0], &[1], 1.0).unwrap();
        let ba = diffmean_between(&s, &[1], &[0], 1.0).unwrap();
        for (x, y) in ab.iter().flatten().zip(ba.iter().flatten()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn compose_fuses_set_then_add_and_rejects_double_set() {
        let s = set("a", vec![(0, 1), (1, 0)]);
        let deact = plan_set(&s, 0.0);
        let b = BoostVector { language: "a".into(), denominator: BoostDenominator::AllTokens, values: vec![((0, 1), 4.5), ((1, 0), 0.5)] };
        let act = plan_activate(&s, &b).unwrap();
        let c = compose(&[deact.clone(), act]).unwrap();
        assert_eq!(c.directives[0].op, TapOp::Set(TapValues::PerNeuron(vec![4.5])));
        assert_eq!(c.recipe, "deactivate:a(set 0) + activate:a(add b)");
        assert!(matches!(compose(&[deact.clone(), deact]), Err(Error::PlanConflict { layer: 0, neuron: 1 })));
    }

    #[test]
    fn zero_deactivation_is_multiplicative() {
        let p = plan_deactivate(&set("a", vec![(0, 1)]), 0.0);
        assert_eq!(p.directives, vec![TapDirective::multiply(0, vec![1], 0.0)]);
        let p = plan_deactivate(&set("a", vec![(0, 1)]), -1.0);
        assert_eq!(p.directives, vec![TapDirective::set(0, vec![1], -1.0)]);
    }
}
