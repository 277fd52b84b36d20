//! Logit lens: read a next-token distribution off every layer's residual stream
//! and summarize it as a distribution over languages.
//!
//! The residual is read after the full block (post-FFN), passed through the
//! model's own final norm and unembedding, and softmaxed. The last layer's
//! reading is the model's real output distribution.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Classifier, LanguageDistribution};
use crate::error::{Error, Result};
use crate::lape::csv_string;
use crate::linalg::softmax_f64;
use crate::model::{Checkpoint, TapDirective};
use crate::report::{line_plot_svg, heatmap_svg, CsvReport, SCHEMA_VERSION};

const TOP_N: usize = 5;

/// Next-token distribution at the final prompt position, one per layer.
pub fn lens_distributions(ckpt: &Checkpoint, prompt: &[u32], directives: &[TapDirective]) -> Result<Vec<Vec<f64>>> {
    let out = ckpt.forward(prompt, directives)?;
    let (n, v) = (out.seq_len, out.vocab);
    Ok(out
        .hiddens
        .iter()
        .map(|h| {
            let logits = ckpt.head(h, n);
            softmax_f64(&logits[(n - 1) * v..n * v])
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LensMode {
    /// Probability mass of each language's tokens.
    #[default]
    Mass,
    /// All mass to the language(s) of the single most likely token.
    Top1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: usize,
    pub target_prob: f64,
    pub pivot_prob: f64,
    pub entropy: f64,
    pub languages: LanguageDistribution,
    pub top_tokens: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLanguageProfile {
    pub target: String,
    pub pivot: String,
    pub mode: LensMode,
    pub layers: Vec<LayerStat>,
}

/// Language distribution induced by a next-token distribution.
pub fn language_mass(dist: &[f64], classifier: &Classifier, mode: LensMode) -> LanguageDistribution {
    let mut mass = vec![0.0; classifier.len()];
    match mode {
        LensMode::Mass => {
            for (t, &p) in dist.iter().enumerate() {
                for (i, share) in classifier.token_membership(t as u32) {
                    mass[i] += p * share;
                }
            }
        }
        LensMode::Top1 => {
            let best = dist.iter().enumerate().fold(0, |b, (i, &p)| if p > dist[b] { i } else { b });
            for (i, share) in classifier.token_membership(best as u32) {
                mass[i] += share;
            }
        }
    }
    let known: f64 = mass.iter().sum();
    let probs = (0..classifier.len()).map(|i| (classifier.id_at(i).to_string(), mass[i])).collect();
    LanguageDistribution { probs, unknown: (1.0 - known).max(0.0) }
}

pub fn language_profile(
    distributions: &[Vec<f64>],
    target: &str,
    pivot: &str,
    classifier: &Classifier,
    mode: LensMode,
) -> Result<LayerLanguageProfile> {
    for id in [target, pivot] {
        if !classifier.ids().any(|c| c == id) {
            return Err(Error::UnknownLanguage(id.to_string()));
        }
    }
    let layers = distributions
        .iter()
        .enumerate()
        .map(|(layer, dist)| {
            let languages = language_mass(dist, classifier, mode);
            let mut order: Vec<usize> = (0..dist.len()).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            LayerStat {
                layer,
                target_prob: languages.prob(target),
                pivot_prob: languages.prob(pivot),
                entropy: languages.entropy(),
                top_tokens: order.iter().take(TOP_N).map(|&t| (t as u32, dist[t])).collect(),
                languages,
            }
        })
        .collect();
    Ok(LayerLanguageProfile { target: target.to_string(), pivot: pivot.to_string(), mode, layers })
}

/// Mean target probability, pivot probability and entropy per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub language: String,
    pub target_prob: Vec<f64>,
    pub pivot_prob: Vec<f64>,
    pub entropy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSuite {
    pub schema_version: u32,
    pub pivot: String,
    pub mode: LensMode,
    pub n_layers: usize,
    /// One curve per prompt language, in sorted order.
    pub curves: Vec<LayerCurve>,
    /// Average of the per-language curves.
    pub mean: LayerCurve,
}

fn mean_curve(label: &str, profiles: &[LayerLanguageProfile], n_layers: usize) -> LayerCurve {
    let avg = |f: &dyn Fn(&LayerStat) -> f64| -> Vec<f64> {
        (0..n_layers).map(|l| profiles.iter().map(|p| f(&p.layers[l])).sum::<f64>() / profiles.len() as f64).collect()
    };
    LayerCurve {
        language: label.to_string(),
        target_prob: avg(&|s| s.target_prob),
        pivot_prob: avg(&|s| s.pivot_prob),
        entropy: avg(&|s| s.entropy),
    }
}

/// Profiles every prompt with its own language as target; prompts run in parallel.
pub fn profile_suite(
    ckpt: &Checkpoint,
    prompts: &BTreeMap<String, Vec<String>>,
    pivot: &str,
    classifier: &Classifier,
    mode: LensMode,
) -> Result<ProfileSuite> {
    let n_layers = ckpt.config.n_layers;
    let mut curves = Vec::new();
    for (lang, texts) in prompts {
        if texts.is_empty() {
            return Err(Error::invalid(format!("no prompts for `{lang}`")));
        }
        let profiles: Vec<LayerLanguageProfile> = texts
            .par_iter()
            .map(|t| {
                let dists = lens_distributions(ckpt, &tokenize(t), &[])?;
                language_profile(&dists, lang, pivot, classifier, mode)
            })
            .collect::<Result<_>>()?;
        curves.push(mean_curve(lang, &profiles, n_layers));
    }
    if curves.is_empty() {
        return Err(Error::invalid("prompt set is empty"));
    }
    let avg = |f: &dyn Fn(&LayerCurve) -> &Vec<f64>| -> Vec<f64> {
        (0..n_layers).map(|l| curves.iter().map(|c| f(c)[l]).sum::<f64>() / curves.len() as f64).collect()
    };
    let mean = LayerCurve {
        language: "mean".into(),
        target_prob: avg(&|c| &c.target_prob),
        pivot_prob: avg(&|c| &c.pivot_prob),
        entropy: avg(&|c| &c.entropy),
    };
    Ok(ProfileSuite { schema_version: SCHEMA_VERSION, pivot: pivot.to_string(), mode, n_layers, curves, mean })
}

impl CsvReport for ProfileSuite {
    fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "language", "target_prob", "pivot_prob", "entropy"])?;
        for c in self.curves.iter().chain(std::iter::once(&self.mean)) {
            for l in 0..self.n_layers {
                w.write_record([
                    l.to_string(),
                    c.language.clone(),
                    format!("{:.6}", c.target_prob[l]),
                    format!("{:.6}", c.pivot_prob[l]),
                    format!("{:.6}", c.entropy[l]),
                ])?;
            }
        }
        csv_string(w)
    }
}

impl ProfileSuite {
    /// `(file name, SVG)` pairs: target and pivot probability plots, entropy
    /// evolution, and a language × layer heatmap of target probability.
    pub fn svgs(&self) -> Vec<(String, String)> {
        let series = |f: &dyn Fn(&LayerCurve) -> &Vec<f64>| -> Vec<(String, Vec<f64>)> {
            self.curves.iter().chain(std::iter::once(&self.mean)).map(|c| (c.language.clone(), f(c).clone())).collect()
        };
        let max_entropy = self
            .curves
            .iter()
            .flat_map(|c| c.entropy.iter().copied())
            .fold(1.0, f64::max);
        let layers: Vec<String> = (0..self.n_layers).map(|l| l.to_string()).collect();
        let langs: Vec<String> = self.curves.iter().map(|c| c.language.clone()).collect();
        let matrix: Vec<Vec<f64>> = self.curves.iter().map(|c| c.target_prob.clone()).collect();
        vec![
            (
                "lens_target_prob.svg".into(),
                line_plot_svg(&series(&|c| &c.target_prob), "layer", "target probability", "Target language probability", (0.0, 1.0)),
            ),
            (
                "lens_pivot_prob.svg".into(),
                line_plot_svg(
                    &series(&|c| &c.pivot_prob),
                    "layer",
                    "pivot probability",
                    &format!("Pivot language ({}) probability", self.pivot),
                    (0.0, 1.0),
                ),
            ),
            (
                "lens_entropy.svg".into(),
                line_plot_svg(&series(&|c| &c.entropy), "layer", "entropy (nats)", "Output language entropy", (0.0, max_entropy)),
            ),
            ("lens_heatmap.svg".into(), heatmap_svg(&matrix, &langs, &layers, "Target probability by layer")),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_family, Registry, VOCAB_SIZE};

    fn classifier() -> (Registry, Classifier) {
        let reg = Registry::new(synth_family(2, 0.0, 6, 4).unwrap()).unwrap();
        let c = Classifier::new(&reg);
        (reg, c)
    }

    #[test]
    fn concentrated_and_split_distributions() {
        let (reg, c) = classifier();
        let a: Vec<u32> = reg.languages[0].alphabet.iter().map(|&ch| ch as u32).collect();
        let b: Vec<u32> = reg.languages[1].alphabet.iter().map(|&ch| ch as u32).collect();

        let mut dist = vec![0.0; VOCAB_SIZE];
        for &t in &a {
            dist[t as usize] = 0.995 / a.len() as f64;
        }
        dist[b'.' as usize] = 0.005;
        let m = language_mass(&dist, &c, LensMode::Mass);
        assert!(m.prob(&reg.languages[0].id) >= 0.99);
        assert!(m.entropy() <= 0.06);

        let mut even = vec![0.0; VOCAB_SIZE];
        for &t in a.iter().chain(&b) {
            even[t as usize] = 1.0 / (a.len() + b.len()) as f64;
        }
        let m = language_mass(&even, &c, LensMode::Mass);
        assert!((m.prob(&reg.languages[0].id) - 0.5).abs() < 1e-12);
        assert!((m.entropy() - 2f64.ln()).abs() < 1e-12);

        let mut punct = vec![0.0; VOCAB_SIZE];
        punct[b':' as usize] = 0.5;
        punct[b' ' as usize] = 0.5;
        assert_eq!(language_mass(&punct, &c, LensMode::Mass).unknown, 1.0);
    }

    #[test]
    fn top1_mode_uses_the_argmax_token() {
        let (reg, c) = classifier();
        let t = *reg.languages[1].alphabet.iter().next().unwrap() as usize;
        let mut dist = vec![0.001; VOCAB_SIZE];
        dist[t] = 0.5;
        let m = language_mass(&dist, &c, LensMode::Top1);
        assert_eq!(m.prob(&reg.languages[1].id), 1.0);
    }
}
