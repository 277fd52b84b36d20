use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use natlas_core::corpus::{
    detokenize, load_corpus_dir, synth_corpus, synth_family, synth_languages, tokenize, write_corpus_dir, Classifier,
    Registry, VOCAB_SIZE,
};
use natlas_core::harness::{
    default_order, load_tasks, question_set, require_sets, run_eval, run_fallback, run_forcing, set_map, ForcingFamily,
    ForcingOptions, Metric, SetMap, Strategy, FALLBACK_PROMPTS,
};
use natlas_core::lape::{
    accumulate, compute_lape, layer_histogram, neuron_count_table, overlap, provenance_hash, select, AccumulateConfig,
    ActivationStats, FilterPopulation, NeuronSet, SelectConfig,
};
use natlas_core::lens::{profile_suite, LensMode};
use natlas_core::model::{
    generate, load_checkpoint, plant_model, random_plant, save_checkpoint, train_tiny, write_checkpoint, Checkpoint,
    GenerationSettings, ModelConfig, PlantOptions, TrainHyper,
};
use natlas_core::report::{emit_csv, emit_heatmap_svg, emit_json, SCHEMA_VERSION};
use natlas_core::steer::{
    compose, compute_boosts, plan_activate, plan_deactivate, BoostDenominator, DiffMeanLayers, InterventionPlan,
    ReplaceStatistic,
};
use serde::Serialize;

use crate::{
    Cli, Command, EvalArgs, FallbackArgs, FamilyArg, FilterPop, ForceArgs, IdentifyArgs, LensArgs, LensModeArg,
    MetricArg, ModelDims, OverlapArgs, PlantArgs, StatArg, SteerArgs, StrategyArg, TrainArgs, DenomArg,
};

/// Flag combinations that parse but make no sense together.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::Plant(a) => plant(a, cli.seed, out),
        Command::Train(a) => train(a, cli.seed, out),
        Command::Identify(a) => identify(a, out),
        Command::Overlap(a) => overlap_cmd(a, out),
        Command::Lens(a) => lens(a, cli.seed, out),
        Command::Force(a) => force(a, cli.seed, out),
        Command::Fallback(a) => fallback(a, cli.seed, out),
        Command::Eval(a) => eval(a, cli.seed, out),
        Command::SteerGenerate(a) => steer_generate(a, cli.seed, out),
    }
}

fn config_from(dims: &ModelDims, defaults: (usize, usize, usize, usize, usize), norm_eps: f32) -> ModelConfig {
    ModelConfig {
        n_layers: dims.n_layers.unwrap_or(defaults.0),
        d_model: dims.d_model.unwrap_or(defaults.1),
        d_ff: dims.d_ff.unwrap_or(defaults.2),
        n_heads: dims.n_heads.unwrap_or(defaults.3),
        vocab_size: VOCAB_SIZE,
        max_seq_len: dims.max_seq_len.unwrap_or(defaults.4),
        norm_eps,
        rope_base: 10_000.0,
    }
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading model {}", path.display()))
}

/// `--languages`, or `languages.json` next to the model.
fn load_registry(explicit: Option<&PathBuf>, model: &Path) -> Result<Registry> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => model.parent().unwrap_or(Path::new(".")).join("languages.json"),
    };
    Registry::load(&path).with_context(|| format!("loading language registry {}", path.display()))
}

fn load_sets(path: &Path) -> Result<SetMap> {
    let sets: Vec<NeuronSet> = serde_json::from_slice(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
        .map_err(natlas_core::Error::from)
        .with_context(|| format!("parsing neuron sets {}", path.display()))?;
    Ok(set_map(sets))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(natlas_core::Error::from).with_context(|| format!("parsing {}", path.display()))
}

fn load_stats(path: &Path, ckpt: &Checkpoint) -> Result<ActivationStats> {
    let stats = ActivationStats::load(path).with_context(|| format!("loading stats {}", path.display()))?;
    let expected = provenance_hash(&write_checkpoint(ckpt)?, &stats.config, &stats.languages);
    if expected != stats.provenance {
        return Err(natlas_core::Error::ProvenanceMismatch(format!(
            "{} was not accumulated from this model",
            path.display()
        ))
        .into());
    }
    Ok(stats)
}

#[derive(Serialize)]
struct PlantManifest<'a> {
    schema_version: u32,
    seed: u64,
    per_lang: usize,
    layers: &'a [usize],
    ledger: &'a BTreeMap<String, Vec<(usize, usize)>>,
}

fn plant(a: PlantArgs, seed: u64, out: &Path) -> Result<()> {
    let config = config_from(&a.dims, (4, 32, 256, 4, 512), 1e-6);
    let registry = Registry::new(synth_family(a.languages, 0.0, a.alphabet_size, seed)?)?;
    let layers: Vec<usize> = if a.layers.is_empty() { (config.n_layers / 2..config.n_layers).collect() } else { a.layers };
    let spec = random_plant(&config, &registry, a.per_lang, &layers, seed)?;
    let (ckpt, ledger) = plant_model(config, &registry, &spec, &PlantOptions { seed })?;
    let corpus = synth_corpus(&registry, a.docs, a.doc_len, seed)?;

    save_checkpoint(&ckpt, out.join("model.ckpt"))?;
    registry.save(out.join("languages.json"))?;
    emit_json(&PlantManifest { schema_version: SCHEMA_VERSION, seed, per_lang: a.per_lang, layers: &layers, ledger: &ledger }, out.join("plant_ledger.json"))?;
    write_corpus_dir(&corpus, out.join("corpus"))?;
    println!("planted {} neurons for {} languages", ledger.values().map(Vec::len).sum::<usize>(), registry.len());
    Ok(())
}

#[derive(Serialize)]
struct TrainLog<'a> {
    schema_version: u32,
    config: &'a ModelConfig,
    hyper: &'a TrainHyper,
    documents: usize,
    losses: &'a [f32],
}

fn train(a: TrainArgs, seed: u64, out: &Path) -> Result<()> {
    let config = config_from(&a.dims, (4, 64, 256, 4, 128), 1e-5);
    let (registry, corpus, heldout) = match (&a.languages, &a.corpus) {
        (Some(l), Some(c)) => {
            let registry = Registry::load(l)?;
            let (corpus, report) = load_corpus_dir(c, &registry, a.max_bytes)?;
            if !report.invalid_utf8.is_empty() {
                log::warn!("{} corpus files skipped as invalid UTF-8", report.invalid_utf8.len());
            }
            (registry, corpus, None)
        }
        (None, None) => {
            let registry = Registry::new(synth_languages(a.families, a.per_family, a.shared_fraction, a.alphabet_size, seed)?)?;
            let corpus = synth_corpus(&registry, a.docs, a.doc_len, seed)?;
            let heldout = synth_corpus(&registry, a.docs.div_ceil(2), a.doc_len.div_ceil(2), seed + 1000)?;
            (registry, corpus, Some(heldout))
        }
        _ => return Err(usage("--languages and --corpus must be given together")),
    };
    let hyper = TrainHyper { steps: a.steps, lr: a.lr, batch: a.batch, seq_len: a.seq_len, seed, ..TrainHyper::default() };
    let outcome = train_tiny(&corpus, config.clone(), &hyper)?;

    save_checkpoint(&outcome.checkpoint, out.join("model.ckpt"))?;
    registry.save(out.join("languages.json"))?;
    if let Some(h) = heldout {
        write_corpus_dir(&corpus, out.join("corpus"))?;
        write_corpus_dir(&h, out.join("heldout"))?;
    }
    emit_json(
        &TrainLog { schema_version: SCHEMA_VERSION, config: &config, hyper: &hyper, documents: corpus.n_documents(), losses: &outcome.losses },
        out.join("train_log.json"),
    )?;
    match (outcome.losses.first(), outcome.losses.last()) {
        (Some(f), Some(l)) => println!("trained {} steps, loss {f:.4} -> {l:.4}", outcome.losses.len()),
        _ => println!("saved initialization (0 steps)"),
    }
    Ok(())
}

fn identify(a: IdentifyArgs, out: &Path) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let registry = load_registry(a.languages.as_ref(), &a.model)?;
    let config = SelectConfig {
        k_percent: a.k,
        filter_percentile: a.filter_pct,
        threshold_percentile: a.threshold_pct,
        filter_population: match a.filter_population {
            FilterPop::Prob => FilterPopulation::Prob,
            FilterPop::Value => FilterPopulation::Value,
        },
    };
    config.validate()?;

    let stats = match &a.stats {
        Some(p) => load_stats(p, &ckpt)?,
        None => {
            let (corpus, report) = load_corpus_dir(&a.corpus, &registry, a.max_bytes)
                .with_context(|| format!("loading corpus {}", a.corpus.display()))?;
            if !report.invalid_utf8.is_empty() {
                log::warn!("{} corpus files skipped as invalid UTF-8", report.invalid_utf8.len());
            }
            let context_len = a.context_len.unwrap_or(ckpt.config.max_seq_len.min(128));
            let acc = AccumulateConfig { context_len, stride: a.stride.unwrap_or(context_len) };
            accumulate(&ckpt, &corpus, &registry, acc)?
        }
    };
    stats.save(out.join("stats.bin"))?;

    let mut table = compute_lape(&stats)?;
    let selection = select(&mut table, &config)?;
    let counts = neuron_count_table(&table, &config, &[1.0, 2.0, 3.0, 4.0, 5.0])?;
    let matrix = overlap(&selection.sets);

    emit_json(&table, out.join("lape_table.json"))?;
    emit_json(&selection.sets, out.join("neuron_sets.json"))?;
    emit_json(&selection, out.join("selection.json"))?;
    fs::write(out.join("neuron_counts.csv"), counts.to_csv()?)?;
    write_histogram(&selection.sets, stats.n_layers, &out.join("layer_histogram.csv"))?;
    fs::write(out.join("overlap.csv"), matrix.to_csv()?)?;
    write_overlap_svg(&matrix, &out.join("overlap.svg"))?;

    for s in &selection.sets {
        println!("{}: {} neurons", s.language, s.len());
    }
    Ok(())
}

fn write_histogram(sets: &[NeuronSet], n_layers: usize, path: &Path) -> Result<()> {
    let mut text = String::from("language");
    for l in 0..n_layers {
        text.push_str(&format!(",layer{l}"));
    }
    text.push('\n');
    for s in sets {
        let row: Vec<String> = layer_histogram(s, n_layers).iter().map(usize::to_string).collect();
        text.push_str(&format!("{},{}\n", s.language, row.join(",")));
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_overlap_svg(m: &natlas_core::lape::OverlapMatrix, path: &Path) -> Result<()> {
    let matrix: Vec<Vec<f64>> = m.counts.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect();
    emit_heatmap_svg(&matrix, &m.languages, &m.languages, "Neuron set overlap", path)?;
    Ok(())
}

fn overlap_cmd(a: OverlapArgs, out: &Path) -> Result<()> {
    let sets: Vec<NeuronSet> = load_sets(&a.sets)?.into_values().collect();
    let m = overlap(&sets);
    fs::write(out.join("overlap.csv"), m.to_csv()?)?;
    emit_json(&m, out.join("overlap.json"))?;
    write_overlap_svg(&m, &out.join("overlap.svg"))?;
    print!("{}", m.to_csv()?);
    Ok(())
}

fn lens(a: LensArgs, seed: u64, out: &Path) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let registry = load_registry(a.languages.as_ref(), &a.model)?;
    let classifier = Classifier::new(&registry);
    let mut prompts: BTreeMap<String, Vec<String>> = match &a.prompts {
        Some(p) => load_json(p)?,
        None => question_set(&registry, a.n_prompts, seed),
    };
    if let Some(t) = &a.target {
        registry.get(t)?;
        prompts.retain(|k, _| k == t);
    }
    for lang in prompts.keys() {
        registry.get(lang)?;
    }
    let pivot = match a.pivot {
        Some(p) => {
            registry.get(&p)?;
            p
        }
        None => registry.by_priority().into_iter().next().ok_or_else(|| usage("registry is empty"))?,
    };
    let mode = match a.lens_mode {
        LensModeArg::Mass => LensMode::Mass,
        LensModeArg::Top1 => LensMode::Top1,
    };
    let suite = profile_suite(&ckpt, &prompts, &pivot, &classifier, mode)?;
    emit_json(&suite, out.join("lens.json"))?;
    emit_csv(&suite, out.join("lens.csv"))?;
    for (name, svg) in suite.svgs() {
        fs::write(out.join(name), svg)?;
    }
    let last = suite.n_layers - 1;
    println!("final-layer target probability {:.4}, pivot {:.4}", suite.mean.target_prob[last], suite.mean.pivot_prob[last]);
    Ok(())
}

fn prompts_or_questions(path: Option<&PathBuf>, registry: &Registry, n: usize, seed: u64) -> Result<BTreeMap<String, Vec<String>>> {
    match path {
        Some(p) => load_json(p),
        None => Ok(question_set(registry, n, seed)),
    }
}

fn force(a: ForceArgs, seed: u64, out: &Path) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let registry = load_registry(a.languages.as_ref(), &a.model)?;
    let stats = load_stats(&a.stats, &ckpt)?;
    let sets = load_sets(&a.sets)?;
    let questions = prompts_or_questions(a.questions.as_ref(), &registry, a.n_questions, seed)?;
    let k_percent = sets.values().next().map_or(0.0, |s| s.config.k_percent);
    let opts = ForcingOptions {
        strategy: match a.strategy {
            StrategyArg::Activate => Strategy::Activate,
            StrategyArg::DeactAct => Strategy::DeactivateActivate,
        },
        family: match a.family {
            FamilyArg::Additive => ForcingFamily::Additive,
            FamilyArg::Replacement => ForcingFamily::Replacement,
            FamilyArg::Diffmean => ForcingFamily::Diffmean,
        },
        k_percent,
        deact_value: a.deact_value,
        zero_as_set: a.zero_as_set,
        boost_denominator: match a.boost_denominator {
            DenomArg::All => BoostDenominator::AllTokens,
            DenomArg::Active => BoostDenominator::ActiveTokens,
        },
        replace_statistic: match a.replace_statistic {
            StatArg::Mean => ReplaceStatistic::Mean,
            StatArg::Median => ReplaceStatistic::Median,
        },
        diffmean_scale: a.diffmean_scale,
        diffmean_layers: if a.diffmean_all_layers { DiffMeanLayers::All } else { DiffMeanLayers::Selected },
        generation: GenerationSettings { seed, ..GenerationSettings::default().with_max_tokens(a.max_tokens) },
    };
    let report = run_forcing(&ckpt, &sets, &stats, &questions, &Classifier::new(&registry), &opts)?;
    emit_json(&report, out.join("forcing.json"))?;
    emit_csv(&report, out.join("forcing.csv"))?;
    emit_heatmap_svg(&report.matrix, &report.languages, &report.languages, "Forcing success (source × target)", out.join("forcing_heatmap.svg"))?;
    println!("overall success {:.4}, unknown {:.4}", report.overall, report.unknown_rate);
    Ok(())
}

fn fallback(a: FallbackArgs, seed: u64, out: &Path) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let registry = load_registry(a.languages.as_ref(), &a.model)?;
    let sets = load_sets(&a.sets)?;
    let order = if a.order.is_empty() { default_order(&registry) } else { a.order };
    let prompts: Vec<String> = match &a.prompts {
        Some(p) => load_json(p)?,
        None => {
            let lang = match a.prompt_language {
                Some(l) => l,
                None => registry.by_priority().into_iter().next().ok_or_else(|| usage("registry is empty"))?,
            };
            registry.get(&lang)?;
            let n = if a.n_prompts == 0 { FALLBACK_PROMPTS } else { a.n_prompts };
            question_set(&registry, n, seed).remove(&lang).unwrap_or_default()
        }
    };
    let settings = GenerationSettings { seed, ..GenerationSettings::default().with_max_tokens(a.max_tokens) };
    let report = run_fallback(&ckpt, &sets, &order, a.deact_value, &prompts, &Classifier::new(&registry), &settings)?;
    emit_json(&report, out.join("fallback.json"))?;
    emit_csv(&report, out.join("fallback.csv"))?;
    for (s, step) in report.steps.iter().enumerate() {
        println!("step {s} [{}]: {}", step.deactivated.join(","), step.top_language.as_deref().unwrap_or("unknown"));
    }
    Ok(())
}

fn eval(a: EvalArgs, seed: u64, out: &Path) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let tasks = load_tasks(&a.tasks).with_context(|| format!("loading tasks {}", a.tasks.display()))?;
    let plan = a.plan.as_ref().map(InterventionPlan::load).transpose()?;
    let task_id = a
        .task_id
        .unwrap_or_else(|| a.tasks.file_stem().map_or_else(|| "task".into(), |s| s.to_string_lossy().into_owned()));
    let metric = match a.metric {
        MetricArg::ExactMatch => Metric::ExactMatch,
        MetricArg::CharF1 => Metric::CharF1,
    };
    let base = GenerationSettings { seed, ..GenerationSettings::default() };
    let result = run_eval(&ckpt, &task_id, &tasks, plan.as_ref(), metric, &base)?;
    emit_json(&result, out.join("eval.json"))?;
    emit_csv(&result, out.join("eval.csv"))?;
    println!("{task_id}: {:.4} over {} items", result.aggregate, result.items.len());
    Ok(())
}

#[derive(Serialize)]
struct Generation<'a> {
    schema_version: u32,
    prompt: &'a str,
    recipe: &'a str,
    settings: &'a GenerationSettings,
    output: String,
}

fn build_plan(a: &SteerArgs, ckpt: &Checkpoint) -> Result<InterventionPlan> {
    if let Some(p) = &a.plan {
        if a.activate.is_some() || !a.deactivate.is_empty() {
            return Err(usage("--plan cannot be combined with --activate or --deactivate"));
        }
        return Ok(InterventionPlan::load(p)?);
    }
    if a.activate.is_none() && a.deactivate.is_empty() {
        return Ok(InterventionPlan::empty());
    }
    let sets = load_sets(a.sets.as_ref().ok_or_else(|| usage("--activate/--deactivate need --sets"))?)?;
    let mut plans = Vec::new();
    for lang in &a.deactivate {
        plans.push(plan_deactivate(require_sets(&sets, lang)?, a.deact_value));
    }
    if let Some(lang) = &a.activate {
        let stats = load_stats(a.stats.as_ref().ok_or_else(|| usage("--activate needs --stats"))?, ckpt)?;
        let set = require_sets(&sets, lang)?;
        plans.push(plan_activate(set, &compute_boosts(&stats, set, BoostDenominator::AllTokens)?)?);
    }
    Ok(compose(&plans)?)
}

fn steer_generate(a: SteerArgs, seed: u64, out: &Path) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let plan = build_plan(&a, &ckpt)?;
    let settings = GenerationSettings { temperature: a.temperature, seed, ..GenerationSettings::default().with_max_tokens(a.max_tokens) };
    let output = detokenize(&generate(&ckpt, &tokenize(&a.prompt), &plan.directives, &settings)?);
    plan.save(out.join("plan.json"))?;
    emit_json(
        &Generation { schema_version: SCHEMA_VERSION, prompt: &a.prompt, recipe: &plan.recipe, settings: &settings, output: output.clone() },
        out.join("generation.json"),
    )?;
    println!("{output}");
    Ok(())
}
