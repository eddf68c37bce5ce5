use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use stepsearch_core::grammar::MAX_NUM_OPTIONS;
use stepsearch_core::loss::LossRecord;
use stepsearch_core::mcts::run_search_with_stats;
use stepsearch_core::pairs::{sample_pairs, PairRecord};
use stepsearch_core::pipeline::{
    self, eval_report, evaluate_predictions, greedy_trajectory, pair_id, pair_seed, parse_jsonl, parse_problems,
    problem_seed, reflection_seed, score_pair, summarize, to_jsonl, tree_from_json, tree_stats, FileKind,
    PredictionRecord, RoundManifest, RunConfig, ScoringOracles,
};
use stepsearch_core::porp::reflection_pairs;
use stepsearch_core::{Preset, Problem, SearchTree};

use crate::backend::Backend;
use crate::files::{display, dump_path, list_dumps, read, write_atomic, MANIFEST};
use crate::{Global, Outcome, PresetArg};

fn load_config(g: &Global) -> Result<RunConfig> {
    let config = match &g.config {
        Some(path) => toml::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?,
        None => RunConfig::default(),
    };
    Ok(config)
}

fn pool(g: &Global) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(g.workers).build()?)
}

fn load_problems(path: &Path) -> Result<(Vec<Problem>, usize)> {
    let (problems, errors) = parse_problems(&read(path)?);
    for e in &errors {
        eprintln!("{}:{e}", path.display());
    }
    Ok((problems, errors.len()))
}

fn load_tree(path: &Path) -> Result<SearchTree> {
    tree_from_json(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn report<T>(label: &str, results: Vec<(String, Result<T>)>) -> (Vec<T>, usize) {
    let mut ok = Vec::new();
    let mut failed = 0;
    for (item, r) in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed += 1;
                eprintln!("{label} {item}: {e:#}");
            }
        }
    }
    (ok, failed)
}

pub fn search(
    g: &Global,
    problems_path: &Path,
    out: &Path,
    resume: bool,
    preset: Option<PresetArg>,
    round: usize,
) -> Outcome {
    let mut config = load_config(g)?;
    if let Some(p) = preset {
        config.simulations = match p {
            PresetArg::Standard => Preset::Standard,
            PresetArg::Reflection => Preset::Reflection,
        }
        .simulations();
    }
    config.validate().map_err(anyhow::Error::msg)?;
    let (problems, bad_lines) = load_problems(problems_path)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let manifest_path = out.join(MANIFEST);
    if resume && manifest_path.exists() {
        let old: RoundManifest = serde_json::from_str(&read(&manifest_path)?)?;
        if old.config != config || old.seed != g.seed {
            bail!("{} was written with a different config or seed", manifest_path.display());
        }
    }
    let manifest = RoundManifest {
        round_index: round,
        config: config.clone(),
        problems: display(problems_path),
        trees_dir: display(out),
        pair_files: Vec::new(),
        seed: g.seed,
        problem_seeds: problems.iter().map(|p| (p.id.clone(), problem_seed(g.seed, &p.id))).collect(),
    };
    write_atomic(&manifest_path, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;

    let backend = Backend::from_config(&config, g.seed)?;
    let results: Vec<(String, Result<()>)> = pool(g)?.install(|| {
        problems
            .par_iter()
            .map(|p| {
                let path = dump_path(out, &p.id);
                let r = if resume && path.exists() {
                    tracing::info!(problem = %p.id, "dump exists, skipping");
                    Ok(())
                } else {
                    let engine = config.engine(problem_seed(g.seed, &p.id));
                    run_search_with_stats(p.clone(), &backend.search_oracles(), &engine)
                        .map_err(anyhow::Error::from)
                        .and_then(|(tree, stats)| {
                            tracing::info!(problem = %p.id, nodes = tree.len(), sims = stats.simulations, "searched");
                            write_atomic(&path, &pipeline::tree_to_json(&tree))
                        })
                };
                (p.id.clone(), r)
            })
            .collect()
    });
    let (_, failed) = report("problem", results);
    Ok(bad_lines + failed)
}

fn record_pair_file(trees: &Path, out: &Path) -> Result<()> {
    let path = trees.join(MANIFEST);
    if !path.exists() {
        return Ok(());
    }
    let mut manifest: RoundManifest = serde_json::from_str(&read(&path)?)?;
    let name = display(out);
    if !manifest.pair_files.contains(&name) {
        manifest.pair_files.push(name);
        write_atomic(&path, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    }
    Ok(())
}

fn per_tree<F>(g: &Global, trees: &Path, f: F) -> Result<(Vec<PairRecord>, usize)>
where
    F: Fn(&SearchTree) -> Result<Vec<PairRecord>> + Sync,
{
    let dumps = list_dumps(trees)?;
    let results: Vec<(String, Result<Vec<PairRecord>>)> = pool(g)?
        .install(|| dumps.par_iter().map(|path| (display(path), load_tree(path).and_then(|t| f(&t)))).collect());
    let (ok, failed) = report("tree", results);
    Ok((ok.into_iter().flatten().collect(), failed))
}

pub fn sample(g: &Global, trees: &Path, out: &Path) -> Outcome {
    let config = load_config(g)?;
    let pc = config.pairs();
    pc.validate()?;
    let (records, failed) = per_tree(g, trees, |tree| {
        let pairs = sample_pairs(tree, pc.epsilon, pc.delta, pair_seed(g.seed, &tree.problem.id))?;
        Ok(pairs.iter().map(|p| p.to_record()).collect())
    })?;
    write_atomic(out, &to_jsonl(&records))?;
    record_pair_file(trees, out)?;
    Ok(failed)
}

pub fn porp(g: &Global, trees: &Path, out: &Path) -> Outcome {
    let config = load_config(g)?;
    let pc = config.pairs();
    pc.validate()?;
    let backend = Backend::from_config(&config, g.seed)?;
    let writer = backend.reflection()?;
    let (records, failed) = per_tree(g, trees, |tree| {
        let id = &tree.problem.id;
        let normal = sample_pairs(tree, pc.epsilon, pc.delta, pair_seed(g.seed, id))?.len();
        let pairs = reflection_pairs(tree, writer, &pc, config.max_depth, normal, reflection_seed(g.seed, id))?;
        Ok(pairs.iter().map(|p| p.to_record()).collect())
    })?;
    write_atomic(out, &to_jsonl(&records))?;
    record_pair_file(trees, out)?;
    Ok(failed)
}

pub fn score(g: &Global, problems_path: &Path, pair_files: &[PathBuf], out: &Path) -> Outcome {
    let config = load_config(g)?;
    let (problems, bad_lines) = load_problems(problems_path)?;
    let by_id: HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut items = Vec::new();
    let mut counters: HashMap<String, usize> = HashMap::new();
    for file in pair_files {
        let records: Vec<PairRecord> =
            parse_jsonl(&read(file)?).with_context(|| format!("parsing {}", file.display()))?;
        for r in records {
            let n = counters.entry(r.problem_id.clone()).or_insert(0);
            items.push((pair_id(&r.problem_id, *n), r));
            *n += 1;
        }
    }
    let backend = Backend::from_config(&config, g.seed)?;
    let (policy, reference) = backend.scorers()?;
    let oracles = ScoringOracles { policy, reference, value: backend.value.as_ref() };
    let weights = config.weights();
    let results: Vec<(String, Result<LossRecord>)> = pool(g)?.install(|| {
        items
            .par_iter()
            .map(|(id, r)| {
                let res = (|| {
                    let problem = by_id
                        .get(r.problem_id.as_str())
                        .with_context(|| format!("unknown problem {}", r.problem_id))?;
                    let pair = r.to_pair(problem.num_options())?;
                    Ok(score_pair(problem, &pair, id.clone(), &oracles, &weights)?)
                })();
                (id.clone(), res)
            })
            .collect()
    });
    let (records, failed) = report("pair", results);
    write_atomic(out, &to_jsonl(&records))?;
    Ok(bad_lines + failed)
}

pub fn predict(trees: &Path, out: &Path) -> Outcome {
    let mut records = Vec::new();
    let mut failed = 0;
    for path in list_dumps(trees)? {
        match load_tree(&path) {
            Ok(tree) => records.push(PredictionRecord {
                problem_id: tree.problem.id.clone(),
                output: greedy_trajectory(&tree).raw_text(),
            }),
            Err(e) => {
                failed += 1;
                eprintln!("tree {}: {e:#}", path.display());
            }
        }
    }
    write_atomic(out, &to_jsonl(&records))?;
    Ok(failed)
}

pub fn warmup_split(corpus: &Path, out: &Path) -> Outcome {
    let (stage1, stage2, errors) = pipeline::warmup_split(&read(corpus)?, MAX_NUM_OPTIONS);
    for e in &errors {
        eprintln!("{}:{e}", corpus.display());
    }
    write_atomic(&out.join("stage1.txt"), &stage1)?;
    write_atomic(&out.join("stage2.txt"), &stage2)?;
    Ok(errors.len())
}

pub fn eval(g: &Global, problems_path: &Path, predictions: &[PathBuf], out: Option<&Path>) -> Outcome {
    let (problems, bad_lines) = load_problems(problems_path)?;
    if bad_lines > 0 {
        bail!("{} has {bad_lines} invalid line(s)", problems_path.display());
    }
    let mut files = Vec::new();
    for path in predictions {
        let records: Vec<PredictionRecord> =
            parse_jsonl(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
        files.push(evaluate_predictions(&display(path), &records, &problems, g.seed)?);
    }
    emit(out, &serde_json::to_string_pretty(&eval_report(files))?)?;
    Ok(0)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    let text = format!("{text}\n");
    match out {
        Some(path) => write_atomic(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn stats(trees: &Path, pair_files: &[PathBuf], out: Option<&Path>) -> Outcome {
    let mut per_tree = Vec::new();
    for path in list_dumps(trees)? {
        per_tree.push(tree_stats(&load_tree(&path)?));
    }
    let mut pairs = Vec::new();
    for file in pair_files {
        pairs.extend(parse_jsonl::<PairRecord>(&read(file)?).with_context(|| format!("parsing {}", file.display()))?);
    }
    emit(out, &serde_json::to_string_pretty(&summarize(per_tree, &pairs))?)?;
    Ok(0)
}

pub fn validate(kind: &str, paths: &[PathBuf]) -> Outcome {
    let kind: FileKind = kind.parse().map_err(anyhow::Error::msg)?;
    let mut targets = Vec::new();
    for p in paths {
        if kind == FileKind::Tree && p.is_dir() {
            targets.extend(list_dumps(p)?);
        } else {
            targets.push(p.clone());
        }
    }
    let mut failed = 0;
    let mut summary = BTreeMap::new();
    for path in &targets {
        let errors = pipeline::validate_text(kind, &read(path)?, MAX_NUM_OPTIONS);
        for e in &errors {
            eprintln!("{}: {e}", path.display());
        }
        failed += usize::from(!errors.is_empty());
        summary.insert(display(path), errors.is_empty());
    }
    for (path, ok) in summary {
        println!("{path}: {}", if ok { "ok" } else { "invalid" });
    }
    Ok(failed)
}
