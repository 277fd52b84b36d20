use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{require_sets, set_difference, SetMap};
use crate::corpus::{detokenize, tokenize, Classifier};
use crate::error::{Error, Result};
use crate::lape::{csv_string, ActivationStats};
use crate::model::{generate, Checkpoint, GenerationSettings};
use crate::report::{CsvReport, SCHEMA_VERSION};
use crate::steer::{
    compose, compute_boosts, plan_activate, plan_deactivate, plan_diffmean, plan_replace, plan_set, BoostDenominator,
    DiffMeanLayers, InterventionPlan, ReplaceStatistic,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Activate,
    DeactivateActivate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingFamily {
    Additive,
    Replacement,
    Diffmean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingOptions {
    pub strategy: Strategy,
    pub family: ForcingFamily,
    pub k_percent: f64,
    pub deact_value: f32,
    /// Deactivate with `set(0)` instead of `multiply(0)` when `deact_value` is 0.
    pub zero_as_set: bool,
    pub boost_denominator: BoostDenominator,
    pub replace_statistic: ReplaceStatistic,
    pub diffmean_scale: f32,
    pub diffmean_layers: DiffMeanLayers,
    pub generation: GenerationSettings,
}

impl Default for ForcingOptions {
    fn default() -> Self {
        ForcingOptions {
            strategy: Strategy::DeactivateActivate,
            family: ForcingFamily::Additive,
            k_percent: 1.0,
            deact_value: 0.0,
            zero_as_set: false,
            boost_denominator: BoostDenominator::AllTokens,
            replace_statistic: ReplaceStatistic::Mean,
            diffmean_scale: 1.0,
            diffmean_layers: DiffMeanLayers::Selected,
            generation: GenerationSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingOutcome {
    pub src: String,
    pub tgt: String,
    pub question: usize,
    pub output: String,
    pub decision: Option<String>,
    pub target_prob: f64,
    pub unknown: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingReport {
    pub schema_version: u32,
    pub k_percent: f64,
    pub strategy: Strategy,
    pub family: ForcingFamily,
    pub deact_value: f32,
    pub languages: Vec<String>,
    /// Success rate, rows = source, columns = target.
    pub matrix: Vec<Vec<f64>>,
    /// Mean success over off-diagonal cells.
    pub overall: f64,
    /// Share of off-diagonal cells judged unknown.
    pub unknown_rate: f64,
    pub recipes: BTreeMap<String, String>,
    pub outcomes: Vec<ForcingOutcome>,
}

impl ForcingReport {
    pub fn rate(&self, src: &str, tgt: &str) -> Option<f64> {
        let i = self.languages.iter().position(|l| l == src)?;
        let j = self.languages.iter().position(|l| l == tgt)?;
        Some(self.matrix[i][j])
    }
}

impl CsvReport for ForcingReport {
    fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["src", "tgt", "success_rate"])?;
        for (i, src) in self.languages.iter().enumerate() {
            for (j, tgt) in self.languages.iter().enumerate() {
                w.write_record([src.as_str(), tgt.as_str(), &format!("{:.6}", self.matrix[i][j])])?;
            }
        }
        csv_string(w)
    }
}

fn build_plan(src: &str, tgt: &str, sets: &SetMap, stats: &ActivationStats, opts: &ForcingOptions) -> Result<InterventionPlan> {
    let tgt_set = require_sets(sets, tgt)?;
    let act = match opts.family {
        ForcingFamily::Additive => plan_activate(tgt_set, &compute_boosts(stats, tgt_set, opts.boost_denominator)?)?,
        ForcingFamily::Replacement => plan_replace(tgt_set, stats, opts.replace_statistic)?,
        ForcingFamily::Diffmean => plan_diffmean(stats, tgt, opts.diffmean_scale, opts.diffmean_layers, Some(tgt_set))?,
    };
    match opts.strategy {
        Strategy::Activate => Ok(act),
        Strategy::DeactivateActivate => {
            let src_only = set_difference(require_sets(sets, src)?, tgt_set);
            let deact = if opts.zero_as_set { plan_set(&src_only, opts.deact_value) } else { plan_deactivate(&src_only, opts.deact_value) };
            compose(&[deact, act])
        }
    }
}

/// Generates an answer to every question of every source language under the
/// plan forcing each target language, and judges the answer's language.
pub fn run_forcing(
    ckpt: &Checkpoint,
    sets: &SetMap,
    stats: &ActivationStats,
    questions: &BTreeMap<String, Vec<String>>,
    classifier: &Classifier,
    opts: &ForcingOptions,
) -> Result<ForcingReport> {
    let languages: Vec<String> = sets.keys().cloned().collect();
    for l in &languages {
        if questions.get(l).is_none_or(Vec::is_empty) {
            return Err(Error::invalid(format!("no questions for `{l}`")));
        }
    }
    let mut plans = BTreeMap::new();
    for src in &languages {
        for tgt in &languages {
            plans.insert((src.clone(), tgt.clone()), build_plan(src, tgt, sets, stats, opts)?);
        }
    }
    let cells: Vec<(&String, &String, usize, &String)> = languages
        .iter()
        .flat_map(|src| {
            languages.iter().flat_map(move |tgt| questions[src].iter().enumerate().map(move |(q, text)| (src, tgt, q, text)))
        })
        .collect();
    let outcomes: Vec<ForcingOutcome> = cells
        .par_iter()
        .map(|&(src, tgt, question, text)| {
            let plan = &plans[&(src.clone(), tgt.clone())];
            let out = generate(ckpt, &tokenize(text), &plan.directives, &opts.generation)?;
            let output = detokenize(&out);
            let dist = classifier.classify(&output);
            let decision = dist.top1().map(str::to_string);
            Ok(ForcingOutcome {
                src: src.clone(),
                tgt: tgt.clone(),
                question,
                target_prob: dist.prob(tgt),
                unknown: decision.is_none(),
                success: decision.as_deref() == Some(tgt.as_str()),
                decision,
                output,
            })
        })
        .collect::<Result<_>>()?;

    let n = languages.len();
    let mut hits = vec![vec![0usize; n]; n];
    let mut totals = vec![vec![0usize; n]; n];
    let (mut off, mut off_hits, mut off_unknown) = (0usize, 0usize, 0usize);
    for o in &outcomes {
        let i = languages.iter().position(|l| *l == o.src).unwrap();
        let j = languages.iter().position(|l| *l == o.tgt).unwrap();
        totals[i][j] += 1;
        hits[i][j] += usize::from(o.success);
        if i != j {
            off += 1;
            off_hits += usize::from(o.success);
            off_unknown += usize::from(o.unknown);
        }
    }
    let matrix = (0..n)
        .map(|i| (0..n).map(|j| hits[i][j] as f64 / totals[i][j].max(1) as f64).collect())
        .collect();
    let recipes = plans.iter().map(|((s, t), p)| (format!("{s}->{t}"), p.recipe.clone())).collect();
    Ok(ForcingReport {
        schema_version: SCHEMA_VERSION,
        k_percent: opts.k_percent,
        strategy: opts.strategy,
        family: opts.family,
        deact_value: opts.deact_value,
        languages,
        matrix,
        overall: if off == 0 { 0.0 } else { off_hits as f64 / off as f64 },
        unknown_rate: if off == 0 { 0.0 } else { off_unknown as f64 / off as f64 },
        recipes,
        outcomes,
    })
}
