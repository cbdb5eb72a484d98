//! End-to-end acceptance checks P1 to P7. Prints one PASS/FAIL line per
//! criterion and exits non-zero if a checkable criterion fails.
//!
//! `REFACTOR_SET_MM=/path/to/set.mm` adds the full-library checks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use sha2::{Digest, Sha256};

use refactor_core::database::flatten_includes;
use refactor_core::dataset::{read_jsonl, GraphRecord};
use refactor_core::extraction::{Category, ExtractionOptions, Extractor, PredictionMask, ProofLabel};
use refactor_core::metrics::reference_loss;
use refactor_core::synth::{CORPUS_MM, PROP_MM};
use refactor_core::{
    build_tree, enumerate_expansions, expand_once, linearize, verify_database, verify_proof, Database, Expr, Frame,
    HypKind, Hypothesis, ProofTree, Sym,
};

const PINNED_PROVABLE: usize = 27220;
const PINNED_PRE_CAP: usize = 257264;
const PINNED_POST_CAP: usize = 124294;
const P1_BUDGET: Duration = Duration::from_secs(300);
const P4_BUDGET: Duration = Duration::from_secs(120);
const P4_MAX_NODES: usize = 30;
const P4_EXHAUSTIVE_NODES: usize = 12;
const P7_TOLERANCE: f64 = 1e-9;
const LN2_TOLERANCE: f64 = 1e-12;
const SAMPLES: usize = 1000;
const SEED: u64 = 7;

struct Outcome {
    pass: bool,
    /// False when the criterion needs data this environment lacks.
    checkable: bool,
    detail: String,
}

impl Outcome {
    fn checked(pass: bool, detail: String) -> Self {
        Outcome {
            pass,
            checkable: true,
            detail,
        }
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("P1", p1),
        ("P2", p2),
        ("P3", p3),
        ("P4", p4),
        ("P5", p5),
        ("P6", p6),
        ("P7", p7),
    ];
    let mut failed = false;
    for (name, run) in criteria {
        let t = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{name} {verdict} [{:.1}s] {}", t.elapsed().as_secs_f64(), o.detail);
        failed |= !o.pass && o.checkable;
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn set_mm() -> Option<PathBuf> {
    std::env::var_os("REFACTOR_SET_MM").map(PathBuf::from)
}

fn corpus() -> Database {
    Database::parse(CORPUS_MM).expect("bundled corpus parses")
}

fn corpus_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/corpus.mm")
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

fn trees(db: &Database) -> Vec<ProofTree> {
    db.provable().map(|a| build_tree(db, a).expect("library proof builds")).collect()
}

fn kit(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_refactor-kit"))
        .args(args)
        .output()
        .expect("binary runs");
    (out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("report exists")).expect("report is JSON")
}

// Corpus verification.
fn p1() -> Outcome {
    let db = corpus();
    let failures = single_threaded(|| verify_database(&db));
    let provable = db.provable().count();
    let bundled = format!("bundled corpus {}/{provable} verified", provable - failures.len());
    let Some(path) = set_mm() else {
        return Outcome {
            pass: false,
            checkable: !failures.is_empty(),
            detail: format!("set.mm not available (set REFACTOR_SET_MM); {bundled}"),
        };
    };
    let t = Instant::now();
    let text = flatten_includes(&path).expect("set.mm readable");
    let big = Database::parse(&text).expect("set.mm parses");
    let big_failures = single_threaded(|| verify_database(&big));
    let elapsed = t.elapsed();
    let count = big.provable().count();
    let delta = count as i64 - PINNED_PROVABLE as i64;
    Outcome::checked(
        failures.is_empty() && big_failures.is_empty() && elapsed < P1_BUDGET,
        format!(
            "{count} provable (delta {delta:+} vs pinned {PINNED_PROVABLE}), {} failures, {:.0}s single-threaded; {bundled}",
            big_failures.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// Expansion soundness.
fn p2() -> Outcome {
    let db = corpus();
    let hosts = trees(&db);
    let sites: Vec<(usize, usize)> = hosts
        .iter()
        .enumerate()
        .flat_map(|(h, t)| {
            t.nodes
                .iter()
                .filter(|n| db.assertion(&n.label).is_some_and(|a| a.is_provable()))
                .map(move |n| (h, n.id))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let picked = sample(&mut rng, sites.len(), SAMPLES.min(sites.len()));
    let (mut verified, mut discarded, mut failed) = (0, 0, Vec::new());
    for i in picked {
        let (h, node) = sites[i];
        let host = &hosts[h];
        let a = db.assertion(&host.theorem_label).expect("host exists");
        match expand_once(&db, host, node) {
            Ok(rec) => {
                let ok = verify_proof(&db, &a.expr, &linearize(&rec.graph), &a.frame).is_ok()
                    && rec.graph.root_node().prop == host.root_node().prop;
                if ok {
                    verified += 1;
                } else {
                    failed.push(format!("{}@{node}", host.theorem_label));
                }
            }
            Err(e) if e.is_disjointness() => discarded += 1,
            Err(e) => failed.push(format!("{}@{node}: {e}", host.theorem_label)),
        }
    }

    let prop = Database::parse(PROP_MM).expect("prop.mm parses");
    let host = build_tree(&prop, prop.assertion("mp1i").expect("mp1i")).expect("tree");
    let node = host.nodes.iter().find(|n| n.label == "a1i").expect("a1i step").id;
    let expected = "wps wch wps wi wph wps mp1i.a mp1i.b ax-mp wps wch ax-1 ax-mp";
    let got = expand_once(&prop, &host, node).map(|r| linearize(&r.graph).join(" "));
    let exact = got.as_deref() == Ok(expected);
    Outcome::checked(
        failed.is_empty() && exact && verified > 0,
        format!(
            "{verified} expansions verified, {discarded} discarded for $d, {} failed{}; mp1i/a1i RPN {}",
            failed.len(),
            failed.first().map(|f| format!(" (first {f})")).unwrap_or_default(),
            if exact { "exact" } else { "differs" }
        ),
    )
}

/// Statements equal up to a bijective, typecode-preserving variable renaming.
/// Repeated hypotheses count once.
fn alpha_equivalent(db: &Database, a: (&[Expr], &Expr), b: (&[Expr], &Expr)) -> bool {
    fn unique(hyps: &[Expr]) -> Vec<Expr> {
        let mut v = hyps.to_vec();
        v.sort();
        v.dedup();
        v
    }
    fn same(db: &Database, x: &[Sym], y: &[Sym], fwd: &mut HashMap<Sym, Sym>, bwd: &mut HashMap<Sym, Sym>) -> bool {
        if x.len() != y.len() {
            return false;
        }
        for (&s, &t) in x.iter().zip(y) {
            match (db.is_variable(s), db.is_variable(t)) {
                (false, false) if s == t => {}
                (true, true) => {
                    if db.variable_typecode(s) != db.variable_typecode(t) {
                        return false;
                    }
                    if *fwd.entry(s).or_insert(t) != t || *bwd.entry(t).or_insert(s) != s {
                        return false;
                    }
                }
                _ => return false,
            }
        }
        true
    }
    fn search(
        db: &Database,
        xs: &[Expr],
        ys: &[Expr],
        used: &mut Vec<bool>,
        fwd: &HashMap<Sym, Sym>,
        bwd: &HashMap<Sym, Sym>,
    ) -> bool {
        let Some((x, rest)) = xs.split_first() else {
            return true;
        };
        for j in 0..ys.len() {
            if used[j] {
                continue;
            }
            let (mut f, mut b) = (fwd.clone(), bwd.clone());
            if same(db, x, &ys[j], &mut f, &mut b) {
                used[j] = true;
                if search(db, rest, ys, used, &f, &b) {
                    return true;
                }
                used[j] = false;
            }
        }
        false
    }
    let (ha, hb) = (unique(a.0), unique(b.0));
    if ha.len() != hb.len() {
        return false;
    }
    let (mut fwd, mut bwd) = (HashMap::new(), HashMap::new());
    same(db, a.1, b.1, &mut fwd, &mut bwd) && search(db, &ha, &hb, &mut vec![false; hb.len()], &fwd, &bwd)
}

// Round trip of exact target masks.
fn p3() -> Outcome {
    let db = corpus();
    let records: Vec<_> = trees(&db)
        .iter()
        .flat_map(|t| enumerate_expansions(&db, t).records)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let ex = Extractor::new(&db);
    let picked = sample(&mut rng, records.len(), SAMPLES.min(records.len()));
    let mut failed = Vec::new();
    let total = picked.len();
    for i in picked {
        let rec = &records[i];
        let mask = PredictionMask::from_selection(rec.graph_id(), &rec.target);
        let v = ex
            .verify_extraction(&rec.graph, &mask, ExtractionOptions::default())
            .expect("mask length matches");
        let target = db.assertion(&rec.expanded_theorem_label).expect("target exists");
        let target_hyps: Vec<Expr> = target
            .frame
            .hypotheses
            .iter()
            .filter(|h| h.kind == HypKind::Essential)
            .map(|h| h.expr.clone())
            .collect();
        let ok = v.category == Category::TreeValid
            && v.theorem.as_ref().is_some_and(|t| {
                let hyps: Vec<Expr> = t.essentials().map(|h| h.expr.clone()).collect();
                alpha_equivalent(&db, (&hyps, &t.conclusion), (&target_hyps, &target.expr))
            });
        if !ok {
            failed.push(format!("{} ({})", rec.graph_id(), v.reason.unwrap_or_default()));
        }
    }
    Outcome::checked(
        failed.is_empty() && total > 0,
        format!(
            "{}/{total} round trips tree_valid and alpha-equivalent{}",
            total - failed.len(),
            failed.first().map(|f| format!(", first failure {f}")).unwrap_or_default()
        ),
    )
}

/// Every connected selection topped at `node` in which each selected node
/// has all or none of its arguments selected.
fn complete_subtrees(tree: &ProofTree, node: usize) -> Vec<u64> {
    let me = 1u64 << node;
    let parents = &tree.nodes[node].parents;
    let mut out = vec![me];
    if !parents.is_empty() {
        let mut combos = vec![me];
        for &p in parents {
            let options = complete_subtrees(tree, p);
            combos = combos
                .iter()
                .flat_map(|c| options.iter().map(move |o| c | o))
                .collect();
        }
        out.extend(combos);
    }
    out
}

fn connected(tree: &ProofTree, mask: u64) -> bool {
    if mask == 0 {
        return false;
    }
    let mut neighbours = vec![Vec::new(); tree.len()];
    for n in &tree.nodes {
        for &p in &n.parents {
            neighbours[n.id].push(p);
            neighbours[p].push(n.id);
        }
    }
    let start = mask.trailing_zeros() as usize;
    let mut seen = 1u64 << start;
    let mut stack = vec![start];
    while let Some(i) = stack.pop() {
        for &j in &neighbours[i] {
            if mask & (1 << j) != 0 && seen & (1 << j) == 0 {
                seen |= 1 << j;
                stack.push(j);
            }
        }
    }
    seen == mask
}

fn bits(mask: u64, n: usize) -> Vec<bool> {
    (0..n).map(|i| mask & (1 << i) != 0).collect()
}

/// Standardizes and checks the result with a frame that owns every float
/// and every distinct `$d` pair, so the proof succeeds exactly when a valid
/// generalization exists.
fn oracle_valid(ex: &Extractor<'_>, floats: &[Hypothesis], tree: &ProofTree, mask: u64) -> bool {
    let sel = bits(mask, tree.len());
    let internal = tree
        .nodes
        .iter()
        .any(|n| sel[n.id] && n.parents.iter().any(|&p| sel[p]));
    if !internal {
        return false;
    }
    let Ok(cand) = ex.standardize(tree, &sel) else {
        return false;
    };
    let mut hypotheses = floats.to_vec();
    hypotheses.extend(cand.essentials.iter().enumerate().map(|(k, e)| Hypothesis {
        label: format!("oracle.{k}"),
        kind: HypKind::Essential,
        expr: e.clone(),
    }));
    let vars: Vec<Sym> = floats.iter().filter_map(|f| f.variable()).collect();
    let disjoint = vars
        .iter()
        .flat_map(|&a| vars.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
        .collect();
    let frame = Frame {
        hypotheses,
        disjoint,
        ..Frame::default()
    };
    let labels: Vec<String> = cand
        .proof
        .iter()
        .map(|l| match l {
            ProofLabel::Label(s) => s.clone(),
            ProofLabel::Essential(k) => format!("oracle.{k}"),
        })
        .collect();
    verify_proof(ex.db, &cand.conclusion, &labels, &frame).is_ok()
}

// Verdicts against a brute-force enumeration of valid shapes.
fn p4() -> Outcome {
    let t = Instant::now();
    let db = corpus();
    let ex = Extractor::new(&db);
    let floats = db.all_global_floats();
    let small: Vec<ProofTree> = db
        .provable()
        .take(200)
        .map(|a| build_tree(&db, a).expect("tree"))
        .filter(|t| t.len() <= P4_MAX_NODES)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let (mut compared, mut shapes, mut mismatches) = (0usize, 0usize, Vec::new());
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for tree in &small {
        let n = tree.len();
        let complete: HashSet<u64> = (0..n).flat_map(|i| complete_subtrees(tree, i)).collect();
        shapes += complete.len();
        let mut valid: HashMap<u64, bool> = HashMap::new();
        let masks: Vec<u64> = if n <= P4_EXHAUSTIVE_NODES {
            (0..1u64 << n).collect()
        } else {
            let mut m: Vec<u64> = complete.iter().copied().collect();
            m.extend(complete.iter().flat_map(|&c| (0..n).map(move |i| c ^ (1 << i))));
            m.extend((0..500).map(|_| rng.random::<u64>() & ((1u64 << n) - 1)));
            m
        };
        for mask in masks {
            let expected = if !connected(tree, mask) {
                Category::NotTreeInvalid
            } else if !complete.contains(&mask) {
                Category::TreeInvalid
            } else if *valid
                .entry(mask)
                .or_insert_with(|| oracle_valid(&ex, &floats, tree, mask))
            {
                Category::TreeValid
            } else {
                Category::TreeInvalid
            };
            let got = ex
                .verify_extraction(
                    tree,
                    &PredictionMask::from_selection(&tree.theorem_label, &bits(mask, n)),
                    ExtractionOptions::default(),
                )
                .expect("mask length matches")
                .category;
            compared += 1;
            *counts.entry(expected.as_str()).or_default() += 1;
            if got != expected {
                mismatches.push(format!("{} mask {mask:#x}: {got:?} vs {expected:?}", tree.theorem_label));
            }
        }
    }
    let elapsed = t.elapsed();
    Outcome::checked(
        mismatches.is_empty() && elapsed < P4_BUDGET && !small.is_empty(),
        format!(
            "{} proofs, {shapes} complete subtrees, {compared} masks compared {counts:?}, {} mismatches{}",
            small.len(),
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first {m})")).unwrap_or_default()
        ),
    )
}

/// Source up to and including the block of the `count`-th provable assertion.
fn slice(text: &str, count: usize) -> &str {
    let mut seen = 0;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.contains(" $p ") {
            seen += 1;
            if seen > count {
                break;
            }
        }
        offset += line.len();
    }
    let head = &text[..offset];
    match head.rfind("\n\n") {
        Some(cut) if seen > count => &head[..cut + 1],
        _ => head,
    }
}

fn proof_label_counts(text: &str, names: &HashSet<String>) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = names.iter().map(|n| (n.clone(), 0)).collect();
    let mut in_proof = false;
    for tok in text.split_whitespace() {
        match tok {
            "$=" => in_proof = true,
            "$." => in_proof = false,
            _ if in_proof => {
                if let Some(c) = out.get_mut(tok) {
                    *c += 1;
                }
            }
            _ => {}
        }
    }
    out
}

fn tree_nodes(db: &Database, skip: &HashSet<String>) -> usize {
    db.provable()
        .filter(|a| !skip.contains(&a.label))
        .map(|a| build_tree(db, a).expect("tree").len())
        .sum()
}

// Refactoring safety.
fn p5() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let p = |name: &str| dir.path().join(name);
    let ps = |name: &str| p(name).to_string_lossy().into_owned();
    std::fs::write(p("slice.mm"), slice(CORPUS_MM, 500)).expect("write slice");
    let steps = [
        kit(&["baseline", &ps("slice.mm"), "--top-n", "200", "-o", &ps("base.mm"), "--report", &ps("base.json")]),
        kit(&["refactor", &ps("slice.mm"), "--new-theorems", &ps("base.mm"), "-o", &ps("out.mm"), "--stats", &ps("stats.json")]),
        kit(&["verify", &ps("out.mm"), "--report", &ps("verify.json")]),
        kit(&["refactor", &ps("out.mm"), "--new-theorems", &ps("base.mm"), "-o", &ps("out2.mm"), "--stats", &ps("stats2.json")]),
    ];
    if let Some((_, err)) = steps.iter().find(|(ok, _)| !ok) {
        return Outcome::checked(false, format!("command failed: {}", err.trim()));
    }
    let slice_db = Database::parse(&std::fs::read_to_string(p("slice.mm")).unwrap()).expect("slice parses");
    let out_text = std::fs::read_to_string(p("out.mm")).unwrap();
    let out_db = Database::parse(&out_text).expect("output parses");
    let verify = read_json(&p("verify.json"));
    let stats = read_json(&p("stats.json"));
    let stats2 = read_json(&p("stats2.json"));

    let base_text = std::fs::read_to_string(p("base.mm")).unwrap();
    let tokens: Vec<&str> = base_text.split_whitespace().collect();
    let names: HashSet<String> = tokens
        .windows(2)
        .filter(|w| w[1] == "$p")
        .map(|w| w[0].to_string())
        .collect();
    let grep = proof_label_counts(&out_text, &names);
    let usage: BTreeMap<String, usize> = serde_json::from_value(stats["usage"].clone()).expect("usage map");
    let recount_ok = grep == usage && grep.values().sum::<usize>() == stats["total_usage"].as_u64().unwrap() as usize;

    let before = tree_nodes(&slice_db, &HashSet::new());
    let after_hosts = tree_nodes(&out_db, &names);
    let after_all = tree_nodes(&out_db, &HashSet::new());
    let fixed_point = std::fs::read(p("out2.mm")).unwrap() == out_text.as_bytes()
        && stats2["total_usage"].as_u64() == Some(0);
    let all_verify = verify["failures"].as_array().is_some_and(|f| f.is_empty());
    Outcome::checked(
        all_verify && recount_ok && fixed_point && after_hosts <= before,
        format!(
            "{} proofs verify: {all_verify}; {} uses of {} theorems, recount matches: {recount_ok}; nodes {before} -> {after_hosts} ({after_all} with new theorems); fixed point: {fixed_point}",
            verify["provable"],
            stats["total_usage"],
            stats["used_theorems"],
        ),
    )
}

fn digests(dir: &Path) -> Vec<String> {
    ["train.jsonl", "valid.jsonl", "test.jsonl", "report.json"]
        .iter()
        .map(|f| hex::encode(Sha256::digest(std::fs::read(dir.join(f)).expect("dataset file"))))
        .collect()
}

/// Checks split disjointness, caps and size limits; returns a description
/// of the first violation.
fn dataset_shape(dir: &Path, train_cap: usize, eval_cap: usize, max_nodes: usize, max_chars: usize) -> Result<usize, String> {
    let mut owner: HashMap<String, &str> = HashMap::new();
    let mut total = 0;
    for (split, cap) in [("train", train_cap), ("valid", eval_cap), ("test", eval_cap)] {
        let records: Vec<GraphRecord> =
            read_jsonl(&dir.join(format!("{split}.jsonl"))).map_err(|e| e.to_string())?;
        total += records.len();
        let mut per_target: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *per_target.entry(&r.target_theorem).or_default() += 1;
            if r.nodes.len() > max_nodes {
                return Err(format!("{} has {} nodes", r.graph_id, r.nodes.len()));
            }
            if let Some(n) = r
                .nodes
                .iter()
                .find(|n| n.label.chars().count() + 1 + n.prop.chars().count() > max_chars)
            {
                return Err(format!("{} node `{}` exceeds {max_chars} chars", r.graph_id, n.label));
            }
        }
        for (target, count) in per_target {
            if count > cap {
                return Err(format!("{target} occurs {count} times in {split}"));
            }
            if let Some(other) = owner.insert(target.to_string(), split) {
                if other != split {
                    return Err(format!("{target} is in {other} and {split}"));
                }
            }
        }
    }
    Ok(total)
}

// Dataset determinism and shape.
fn p6() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let db = corpus_path().to_string_lossy().into_owned();
    let out = |name: &str| dir.path().join(name);
    let run = |name: &str, extra: &[&str]| {
        let o = out(name).to_string_lossy().into_owned();
        let mut args = vec!["dataset", db.as_str(), "-o", o.as_str(), "--seed", "7"];
        args.extend_from_slice(extra);
        kit(&args)
    };
    for (name, extra) in [
        ("a", &[][..]),
        ("b", &[][..]),
        ("tight", &["--train-cap", "3", "--eval-cap", "1", "--max-nodes", "60", "--max-chars", "40"][..]),
    ] {
        let (ok, err) = run(name, extra);
        if !ok {
            return Outcome::checked(false, format!("dataset failed: {}", err.trim()));
        }
    }
    let identical = digests(&out("a")) == digests(&out("b"));
    let shape = dataset_shape(&out("a"), 100, 10, 1000, 512);
    let tight = dataset_shape(&out("tight"), 3, 1, 60, 40);
    let mut pass = identical && shape.is_ok() && tight.is_ok();
    let mut detail = format!(
        "digests identical: {identical}; default shape {:?}; tight shape {:?}",
        shape.as_ref().map(|n| format!("{n} records ok")),
        tight.as_ref().map(|n| format!("{n} records ok")),
    );
    match set_mm() {
        None => detail.push_str("; pinned-snapshot counts not checked (no set.mm)"),
        Some(path) => {
            let o = out("set").to_string_lossy().into_owned();
            let (ok, err) = kit(&["dataset", &path.to_string_lossy(), "-o", &o, "--seed", "7"]);
            if !ok {
                return Outcome::checked(false, format!("dataset on set.mm failed: {}", err.trim()));
            }
            let report = read_json(&out("set").join("report.json"));
            let (pre, post) = (report["pre_cap"].as_u64(), report["post_cap"].as_u64());
            let exact = pre == Some(PINNED_PRE_CAP as u64) && post == Some(PINNED_POST_CAP as u64);
            let set_shape = dataset_shape(&out("set"), 100, 10, 1000, 512);
            pass &= set_shape.is_ok();
            detail.push_str(&format!(
                "; set.mm pre-cap {pre:?} post-cap {post:?} (pinned {PINNED_PRE_CAP}/{PINNED_POST_CAP}, exact: {exact}), shape {set_shape:?}"
            ));
        }
    }
    Outcome::checked(pass, detail)
}

/// Binary cross-entropy written out term by term with the same clamp.
fn loss_oracle(targets: &[bool], probs: &[f64]) -> f64 {
    const EPS: f64 = 1e-7;
    let mut total = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        let q = p.clamp(EPS, 1.0 - EPS);
        total -= if targets[i] { q.ln() } else { (-q).ln_1p() };
    }
    total / probs.len() as f64
}

// Loss oracle.
fn p7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let n = rng.random_range(1..200);
        let targets: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let probs: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random::<f64>(),
            })
            .collect();
        let got: f64 = reference_loss(&targets, &probs).expect("valid case");
        let err = (got - loss_oracle(&targets, &probs)).abs();
        worst = worst.max(err);
        if err > P7_TOLERANCE {
            return Outcome::checked(false, format!("case {case}: error {err:e}"));
        }
    }
    let half: f64 = reference_loss(&[true, false, true, false], &[0.5; 4]).expect("valid case");
    let ln2_err = (half - std::f64::consts::LN_2).abs();
    Outcome::checked(
        ln2_err <= LN2_TOLERANCE,
        format!("50 cases, worst error {worst:e}; uniform 0.5 error {ln2_err:e}"),
    )
}
