//! Command-line front end: verification, dataset generation, extraction of
//! predicted subtrees, the frequency baseline and library refactoring.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use refactor_core::baseline::{mine_node_closures, top_n};
use refactor_core::database::flatten_includes;
use refactor_core::dataset::{build_dataset, index_by_id, read_jsonl, write_dataset, write_records, DatasetSpec, GraphRecord};
use refactor_core::extraction::{library_keys, Category, ExtractionOptions, Extractor, PredictionMask};
use refactor_core::metrics::score_predictions;
use refactor_core::refactor::{label_usage, library_size, refactor_database};
use refactor_core::verify::VerifyFailure;
use refactor_core::{
    build_tree, dedup, enumerate_expansions, read_fragment, verify_assertion, verify_database, write_fragment, Database,
    ProofTree,
};

/// Version of every JSON report written by this tool.
const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "refactor-kit", version, about = "Extract and reuse theorems from Metamath proofs")]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "REFACTOR_THREADS", default_value_t = 0)]
    threads: usize,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Log filter such as `warn` or `refactor_core=debug`; overrides -v.
    #[arg(long, global = true, env = "REFACTOR_LOG")]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify every proof of a database.
    Verify {
        db: PathBuf,
        /// Only verify these assertions.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build the expansion dataset: train/valid/test JSONL plus report.json.
    Dataset(DatasetArgs),
    /// Turn per-node predictions into theorems.
    Extract(ExtractArgs),
    /// Mine theorems from every internal node's closure and keep the most frequent.
    Baseline(BaselineArgs),
    /// Rewrite library proofs to use the theorems of a fragment.
    Refactor {
        db: PathBuf,
        /// Fragment written by `extract` or `baseline`, optionally tagged
        /// with an origin as `ORIGIN=PATH`. Repeatable; a theorem found in
        /// several fragments counts for the first.
        #[arg(long, alias = "theorems", required = true, value_parser = parse_tagged)]
        new_theorems: Vec<(String, PathBuf)>,
        /// Refactored database.
        #[arg(short, long)]
        output: PathBuf,
        /// Write the JSON statistics here instead of stdout.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Summarize a database, optionally counting uses of fragment theorems.
    Stats {
        db: PathBuf,
        #[arg(long)]
        theorems: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DatasetArgs {
    db: PathBuf,
    /// Output directory.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1000)]
    max_nodes: usize,
    /// Longest node feature (label and statement) kept, in characters.
    #[arg(long, default_value_t = 512)]
    max_chars: usize,
    /// Records kept per target theorem in the training split.
    #[arg(long, default_value_t = 100)]
    train_cap: usize,
    /// Records kept per target theorem in the valid and test splits.
    #[arg(long, default_value_t = 10)]
    eval_cap: usize,
    /// Train, valid and test fractions.
    #[arg(long, value_parser = parse_fractions, default_value = "0.9,0.05,0.05")]
    split: (f64, f64, f64),
    #[arg(long, env = "REFACTOR_SEED", default_value_t = 0)]
    seed: u64,
    /// Also write every library proof within the limits as an unlabelled graph.
    #[arg(long)]
    library_graphs: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    db: PathBuf,
    /// Prediction JSONL: one `{"graph_id", "probs"}` object per line.
    #[arg(long)]
    preds: PathBuf,
    /// Dataset JSONL holding the graphs the predictions refer to.
    #[arg(long, required_unless_present = "library", conflicts_with = "library")]
    dataset: Option<PathBuf>,
    /// Predictions are over unexpanded library proofs, keyed by theorem label.
    #[arg(long)]
    library: bool,
    /// Overrides the threshold of every prediction.
    #[arg(long)]
    threshold: Option<f64>,
    /// Output fragment with the distinct valid theorems.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    db: PathBuf,
    /// Number of theorems kept.
    #[arg(long, default_value_t = 200)]
    top_n: usize,
    /// Mine expanded proofs instead of library proofs.
    #[arg(long)]
    expanded: bool,
    /// Proofs larger than this are skipped.
    #[arg(long, default_value_t = 5000)]
    max_nodes: usize,
    /// Output fragment.
    #[arg(short, long)]
    output: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_tagged(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((tag, path)) if !tag.is_empty() && !path.is_empty() => Ok((tag.to_string(), path.into())),
        Some(_) => Err(format!("expected ORIGIN=PATH, got `{s}`")),
        None => Ok(("new".to_string(), s.into())),
    }
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three comma-separated fractions".into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::new()
        .parse_filters(cli.log_level.as_deref().unwrap_or(level))
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        log::warn!("thread pool: {e}");
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Verify { db, labels, report } => verify(&db, &labels, report.as_deref()),
        Command::Dataset(args) => dataset(args),
        Command::Extract(args) => extract(args),
        Command::Baseline(args) => baseline(args),
        Command::Refactor {
            db,
            new_theorems,
            output,
            stats,
        } => refactor(&db, &new_theorems, &output, stats.as_deref()),
        Command::Stats { db, theorems } => stats(&db, theorems.as_deref()),
    }
}

/// Inputs must be readable files; outputs must not overwrite an input and
/// their directory must exist.
fn check_paths(inputs: &[&Path], outputs: &[Option<&Path>]) -> Result<()> {
    let mut seen = Vec::new();
    for p in inputs {
        if !p.is_file() {
            bail!("input {} is not a readable file", p.display());
        }
        seen.push(p.canonicalize()?);
    }
    for p in outputs.iter().flatten() {
        let parent = match p.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        if !parent.is_dir() {
            bail!("output directory {} does not exist", parent.display());
        }
        if p.exists() && seen.contains(&p.canonicalize()?) {
            bail!("refusing to overwrite input {}", p.display());
        }
    }
    Ok(())
}

fn load(path: &Path) -> Result<Database> {
    let text = flatten_includes(path).with_context(|| format!("reading {}", path.display()))?;
    let db = Database::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    log::info!("{}: {} assertions", path.display(), db.assertions().len());
    Ok(db)
}

/// Writes a JSON report, stamped with the schema version.
fn emit(value: &Value, path: Option<&Path>) -> Result<()> {
    let mut value = value.clone();
    if let Value::Object(map) = &mut value {
        map.insert("schema_version".into(), json!(SCHEMA_VERSION));
    }
    let text = serde_json::to_string_pretty(&value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn verify(path: &Path, labels: &[String], report: Option<&Path>) -> Result<ExitCode> {
    check_paths(&[path], &[report])?;
    let db = load(path)?;
    let (provable, failures) = if labels.is_empty() {
        (db.provable().count(), verify_database(&db))
    } else {
        let mut picked = Vec::new();
        for l in labels {
            match db.assertion(l) {
                Some(a) if a.is_provable() => picked.push(a),
                Some(_) => bail!("`{l}` is not a provable assertion"),
                None => bail!("no assertion labelled `{l}`"),
            }
        }
        let failures: Vec<VerifyFailure> = picked
            .par_iter()
            .filter_map(|a| {
                verify_assertion(&db, a).err().map(|error| VerifyFailure {
                    label: a.label.clone(),
                    error,
                })
            })
            .collect();
        (picked.len(), failures)
    };
    for f in &failures {
        eprintln!("{}: {}", f.label, f.error);
    }
    let value = json!({
        "provable": provable,
        "verified": provable - failures.len(),
        "failures": failures
            .iter()
            .map(|f| json!({"label": f.label, "error": f.error.to_string()}))
            .collect::<Vec<_>>(),
    });
    emit(&value, report)?;
    Ok(if failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn library_trees(db: &Database, max_nodes: usize) -> Vec<ProofTree> {
    let provable: Vec<_> = db.provable().collect();
    provable
        .par_iter()
        .filter_map(|a| match build_tree(db, a) {
            Ok(t) => Some(t),
            Err(e) => {
                log::warn!("{}: {e}", a.label);
                None
            }
        })
        .filter(|t| t.len() <= max_nodes)
        .collect()
}

fn dataset(args: DatasetArgs) -> Result<ExitCode> {
    check_paths(&[&args.db], &[Some(&args.output), args.library_graphs.as_deref()])?;
    let db = load(&args.db)?;
    let spec = DatasetSpec {
        max_nodes: args.max_nodes,
        max_node_feature_chars: args.max_chars,
        train_cap: args.train_cap,
        eval_cap: args.eval_cap,
        split_fractions: args.split,
        seed: args.seed,
    };
    let ds = build_dataset(&db, &spec)?;
    write_dataset(&args.output, &ds)?;
    if let Some(path) = &args.library_graphs {
        let records: Vec<GraphRecord> = library_trees(&db, spec.max_nodes)
            .iter()
            .map(GraphRecord::from_tree)
            .filter(|g| g.max_feature_chars() <= spec.max_node_feature_chars)
            .collect();
        write_records(path, &records)?;
    }
    log::info!("{} records after capping", ds.report.post_cap);
    Ok(ExitCode::SUCCESS)
}

fn extract(args: ExtractArgs) -> Result<ExitCode> {
    let mut inputs = vec![args.db.as_path(), args.preds.as_path()];
    inputs.extend(args.dataset.as_deref());
    check_paths(&inputs, &[args.output.as_deref(), args.report.as_deref()])?;
    let db = load(&args.db)?;
    let mut masks: Vec<PredictionMask> = read_jsonl(&args.preds)?;
    if let Some(t) = args.threshold {
        if !(0.0..=1.0).contains(&t) {
            bail!("threshold must lie in [0, 1], got {t}");
        }
        masks.iter_mut().for_each(|m| m.threshold = t);
    }
    let records: Vec<GraphRecord> = match &args.dataset {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let trees: HashMap<String, ProofTree> = if args.library {
        let wanted: HashSet<&str> = masks.iter().map(|m| m.graph_id.as_str()).collect();
        library_trees(&db, usize::MAX)
            .into_iter()
            .filter(|t| wanted.contains(t.theorem_label.as_str()))
            .map(|t| (t.theorem_label.clone(), t))
            .collect()
    } else {
        index_by_id(&records)
            .into_iter()
            .map(|(id, r)| (id.to_string(), r.to_tree()))
            .collect()
    };
    let opts = ExtractionOptions {
        reject_whole_tree: args.library,
    };
    let ex = Extractor::new(&db);
    let verdicts: Vec<(String, Result<_, String>)> = masks
        .par_iter()
        .map(|m| {
            let v = match trees.get(&m.graph_id) {
                None => Err("unknown graph".to_string()),
                Some(tree) => ex.verify_extraction(tree, m, opts).map_err(|e| e.to_string()),
            };
            (m.graph_id.clone(), v)
        })
        .collect();

    let mut categories: BTreeMap<&str, usize> = Category::ALL.iter().map(|c| (c.as_str(), 0)).collect();
    let mut errors = Vec::new();
    let mut valid = Vec::new();
    let mut rows = Vec::new();
    for (id, v) in verdicts {
        match v {
            Err(e) => errors.push(json!({"graph_id": id, "error": e})),
            Ok(v) => {
                *categories.entry(v.category.as_str()).or_default() += 1;
                rows.push(json!({
                    "graph_id": id,
                    "category": v.category.as_str(),
                    "reason": v.reason,
                    "theorem": v.theorem.as_ref().map(|t| t.name.clone()),
                }));
                valid.extend(v.theorem);
            }
        }
    }
    let valid_count = valid.len();
    let unique = dedup(valid);
    let keys = library_keys(&db);
    let matches: Vec<Value> = unique
        .iter()
        .filter_map(|t| keys.get(&t.dedup_key).map(|l| json!({"theorem": t.name, "library": l})))
        .collect();
    if let Some(out) = &args.output {
        write_text(out, &write_fragment(&db, &unique))?;
    }

    let scores = if args.library {
        Value::Null
    } else {
        let scored: Vec<GraphRecord> = records
            .iter()
            .filter(|r| masks.iter().any(|m| m.graph_id == r.graph_id))
            .cloned()
            .collect();
        match score_predictions(&scored, &masks) {
            Ok(s) => serde_json::to_value(s)?,
            Err(e) => json!({"error": e.to_string()}),
        }
    };
    let match_rate = if unique.is_empty() {
        0.0
    } else {
        matches.len() as f64 / unique.len() as f64
    };
    let value = json!({
        "predictions": masks.len(),
        "categories": categories,
        "errors": errors,
        "valid": valid_count,
        "unique": unique.len(),
        "library_matches": matches.len(),
        "match_rate": match_rate,
        "new": unique.len() - matches.len(),
        "matches": matches,
        "scores": scores,
        "verdicts": rows,
    });
    emit(&value, args.report.as_deref())?;
    Ok(if errors.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn baseline(args: BaselineArgs) -> Result<ExitCode> {
    check_paths(&[&args.db], &[Some(&args.output), args.report.as_deref()])?;
    let db = load(&args.db)?;
    let library = library_trees(&db, args.max_nodes);
    let proofs: Vec<ProofTree> = if args.expanded {
        library
            .par_iter()
            .flat_map_iter(|t| enumerate_expansions(&db, t).records)
            .map(|r| r.graph)
            .filter(|g| g.len() <= args.max_nodes)
            .collect()
    } else {
        library
    };
    let opts = ExtractionOptions {
        reject_whole_tree: !args.expanded,
    };
    let table = mine_node_closures(&db, &proofs, opts);
    let top = top_n(&table, args.top_n);
    write_text(&args.output, &write_fragment(&db, &top))?;
    let keys = library_keys(&db);
    let theorems: Vec<Value> = top
        .iter()
        .map(|t| {
            json!({
                "name": t.name,
                "count": table.entries[&t.dedup_key].1,
                "library": keys.get(&t.dedup_key),
                "statement": t.dedup_key,
            })
        })
        .collect();
    let matched = theorems.iter().filter(|t| !t["library"].is_null()).count();
    let value = json!({
        "proofs": proofs.len(),
        "extractions": table.extractions,
        "distinct": table.len(),
        "kept": top.len(),
        "match_rate": if top.is_empty() { 0.0 } else { matched as f64 / top.len() as f64 },
        "theorems": theorems,
    });
    emit(&value, args.report.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn refactor(path: &Path, fragments: &[(String, PathBuf)], output: &Path, stats: Option<&Path>) -> Result<ExitCode> {
    let mut inputs = vec![path];
    inputs.extend(fragments.iter().map(|(_, p)| p.as_path()));
    check_paths(&inputs, &[Some(output), stats])?;
    let db = load(path)?;
    let mut theorems = Vec::new();
    let mut origin: BTreeMap<String, String> = BTreeMap::new();
    for (tag, fragment) in fragments {
        let source = std::fs::read_to_string(fragment).with_context(|| format!("reading {}", fragment.display()))?;
        for t in read_fragment(&db, &source).with_context(|| format!("parsing {}", fragment.display()))? {
            if !origin.contains_key(&t.name) {
                origin.insert(t.name.clone(), tag.clone());
                theorems.push(t);
            }
        }
    }
    let out = refactor_database(&db, &theorems)?;
    write_text(output, &out.db.to_mm())?;

    let mut by_origin: BTreeMap<&str, (usize, usize, usize, usize)> = BTreeMap::new();
    for (name, tag) in &origin {
        let uses = out.stats.usage.get(name).copied().unwrap_or(0);
        let saved = out.stats.nodes_saved.get(name).copied().unwrap_or(0);
        let e = by_origin.entry(tag.as_str()).or_default();
        if uses > 0 {
            e.0 += 1;
        }
        e.1 += uses;
        e.2 = e.2.max(uses);
        e.3 += saved;
    }
    let mean = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let groups: BTreeMap<&str, Value> = by_origin
        .into_iter()
        .map(|(tag, (used, total, max, saved))| {
            (
                tag,
                json!({
                    "used_theorems": used,
                    "total_usage": total,
                    "average_usage": mean(total, used),
                    "max_usage": max,
                    "average_nodes_saved": mean(saved, used),
                    "total_nodes_saved": saved,
                }),
            )
        })
        .collect();
    let mut value = serde_json::to_value(&out.stats)?;
    value["origin"] = json!(origin);
    value["by_origin"] = json!(groups);
    emit(&value, stats)?;
    Ok(ExitCode::SUCCESS)
}

fn stats(path: &Path, fragment: Option<&Path>) -> Result<ExitCode> {
    let mut inputs = vec![path];
    inputs.extend(fragment);
    check_paths(&inputs, &[])?;
    let db = load(path)?;
    let sizes: Vec<usize> = db.provable().map(|a| a.proof.len()).collect();
    let usage = label_usage(&db);
    let mut most_used: Vec<(&String, &usize)> = usage.iter().collect();
    most_used.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    let mut value = json!({
        "assertions": db.assertions().len(),
        "provable": sizes.len(),
        "proof_labels": sizes.iter().sum::<usize>(),
        "proof_nodes": library_size(&db),
        "longest_proof": sizes.iter().max(),
        "most_used": most_used
            .iter()
            .take(20)
            .map(|(l, n)| json!({"label": l, "uses": n}))
            .collect::<Vec<_>>(),
    });
    if let Some(fragment) = fragment {
        let source = std::fs::read_to_string(fragment).with_context(|| format!("reading {}", fragment.display()))?;
        let tokens: Vec<&str> = source.split_whitespace().collect();
        let names: Vec<&str> = tokens.windows(2).filter(|w| w[1] == "$p").map(|w| w[0]).collect();
        let counts: BTreeMap<&str, usize> = names
            .iter()
            .map(|&n| (n, usage.get(n).copied().unwrap_or(0)))
            .collect();
        value["usage"] = json!(counts);
        value["total_usage"] = json!(counts.values().sum::<usize>());
    }
    emit(&value, None)?;
    Ok(ExitCode::SUCCESS)
}
