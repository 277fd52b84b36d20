use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, tokenize};
use crate::error::{Error, Result};
use crate::lape::csv_string;
use crate::model::{generate, Checkpoint, GenerationSettings};
use crate::report::{CsvReport, SCHEMA_VERSION};
use crate::steer::InterventionPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub prompt: String,
    pub reference: String,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    CharF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub prompt: String,
    pub reference: String,
    pub prediction: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub schema_version: u32,
    pub task_id: String,
    pub metric: Metric,
    pub recipe: String,
    pub items: Vec<EvalItem>,
    pub aggregate: f64,
}

impl CsvReport for EvalResult {
    fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["item", "reference", "prediction", "score"])?;
        for (i, it) in self.items.iter().enumerate() {
            w.write_record([i.to_string(), it.reference.clone(), it.prediction.clone(), format!("{:.6}", it.score)])?;
        }
        csv_string(w)
    }
}

/// One JSON object per non-blank line.
pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<EvalTask>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::invalid(format!("task line {}: {e}", i + 1)))
        })
        .collect()
}

fn fold(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// 1 when the strings agree after collapsing whitespace and lowercasing.
pub fn exact_match(prediction: &str, reference: &str) -> f64 {
    f64::from(u8::from(fold(prediction) == fold(reference)))
}

/// Harmonic mean of character precision and recall, counting characters as a multiset.
pub fn char_f1(prediction: &str, reference: &str) -> f64 {
    let (p, r): (Vec<char>, Vec<char>) = (prediction.chars().collect(), reference.chars().collect());
    if p.is_empty() && r.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<char, usize> = HashMap::new();
    for &c in &r {
        *counts.entry(c).or_default() += 1;
    }
    let mut common = 0usize;
    for c in &p {
        if let Some(n) = counts.get_mut(c).filter(|n| **n > 0) {
            *n -= 1;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn run_eval(
    ckpt: &Checkpoint,
    task_id: &str,
    tasks: &[EvalTask],
    plan: Option<&InterventionPlan>,
    metric: Metric,
    base: &GenerationSettings,
) -> Result<EvalResult> {
    let directives = plan.map_or(&[][..], |p| &p.directives[..]);
    let items: Vec<EvalItem> = tasks
        .par_iter()
        .map(|t| {
            let settings = base.clone().with_max_tokens(t.max_tokens);
            let prediction = detokenize(&generate(ckpt, &tokenize(&t.prompt), directives, &settings)?);
            let score = match metric {
                Metric::ExactMatch => exact_match(&prediction, &t.reference),
                Metric::CharF1 => char_f1(&prediction, &t.reference),
            };
            Ok(EvalItem { prompt: t.prompt.clone(), reference: t.reference.clone(), prediction, score })
        })
        .collect::<Result<_>>()?;
    let aggregate = if items.is_empty() { 0.0 } else { items.iter().map(|i| i.score).sum::<f64>() / items.len() as f64 };
    Ok(EvalResult {
        schema_version: SCHEMA_VERSION,
        task_id: task_id.to_string(),
        metric,
        recipe: plan.map(|p| p.recipe.clone()).unwrap_or_default(),
        items,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics() {
        assert_eq!(exact_match("abc", "abc"), 1.0);
        assert_eq!(char_f1("abc", "abc"), 1.0);
        assert_eq!(exact_match("  Hello   World ", "hello world"), 1.0);
        assert_eq!(char_f1("xyz", "abc"), 0.0);
        // precision 4/5, recall 1: F1 = 8/9
        assert!((char_f1("abcda", "abcd") - 8.0 / 9.0).abs() < 1e-15);
    }
}
