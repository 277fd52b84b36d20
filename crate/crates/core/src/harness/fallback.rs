use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{require_sets, set_union, SetMap};
use crate::corpus::{detokenize, tokenize, Classifier, Registry};
use crate::error::{Error, Result};
use crate::lape::csv_string;
use crate::model::{generate, Checkpoint, GenerationSettings};
use crate::report::{CsvReport, SCHEMA_VERSION};
use crate::steer::{plan_deactivate, InterventionPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackStep {
    pub deactivated: Vec<String>,
    pub recipe: String,
    /// Share of answers per decided language; `unknown` is its own entry.
    pub distribution: BTreeMap<String, f64>,
    pub top_language: Option<String>,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackReport {
    pub schema_version: u32,
    pub order: Vec<String>,
    pub deact_value: f32,
    pub n_prompts: usize,
    pub steps: Vec<FallbackStep>,
}

impl CsvReport for FallbackReport {
    fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "deactivated", "language", "share"])?;
        for (s, step) in self.steps.iter().enumerate() {
            for (lang, share) in &step.distribution {
                w.write_record([s.to_string(), step.deactivated.join("+"), lang.clone(), format!("{share:.6}")])?;
            }
        }
        csv_string(w)
    }
}

/// Registry languages in priority order, minus the lowest-priority one.
pub fn default_order(registry: &Registry) -> Vec<String> {
    let mut order = registry.by_priority();
    order.pop();
    order
}

/// Step `s` deactivates the union of the sets of `order[..s]` and generates on every prompt.
pub fn run_fallback(
    ckpt: &Checkpoint,
    sets: &SetMap,
    order: &[String],
    deact_value: f32,
    prompts: &[String],
    classifier: &Classifier,
    settings: &GenerationSettings,
) -> Result<FallbackReport> {
    let distinct: BTreeSet<&String> = order.iter().collect();
    if distinct.len() != order.len() {
        return Err(Error::invalid("fallback order repeats a language"));
    }
    if prompts.is_empty() {
        return Err(Error::invalid("fallback needs at least one prompt"));
    }
    for l in order {
        if !classifier.ids().any(|c| c == l) {
            return Err(Error::UnknownLanguage(l.clone()));
        }
        require_sets(sets, l)?;
    }
    let mut steps = Vec::with_capacity(order.len() + 1);
    for s in 0..=order.len() {
        let plan = match set_union(order[..s].iter().map(|l| &sets[l])) {
            Some(union) => plan_deactivate(&union, deact_value),
            None => InterventionPlan::empty(),
        };
        let answers: Vec<String> = prompts
            .par_iter()
            .map(|p| Ok(detokenize(&generate(ckpt, &tokenize(p), &plan.directives, settings)?)))
            .collect::<Result<_>>()?;
        let mut counts: BTreeMap<String, usize> = classifier.ids().map(|id| (id.to_string(), 0)).collect();
        counts.insert("unknown".into(), 0);
        for a in &answers {
            let key = classifier.classify(a).top1().unwrap_or("unknown").to_string();
            *counts.get_mut(&key).unwrap() += 1;
        }
        let distribution: BTreeMap<String, f64> =
            counts.iter().map(|(k, &c)| (k.clone(), c as f64 / answers.len() as f64)).collect();
        let top_language = counts
            .iter()
            .filter(|(k, _)| k.as_str() != "unknown")
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .filter(|(_, &c)| c > 0)
            .map(|(k, _)| k.clone());
        steps.push(FallbackStep {
            deactivated: order[..s].to_vec(),
            recipe: plan.recipe,
            distribution,
            top_language,
            answers,
        });
    }
    Ok(FallbackReport {
        schema_version: SCHEMA_VERSION,
        order: order.to_vec(),
        deact_value,
        n_prompts: prompts.len(),
        steps,
    })
}
