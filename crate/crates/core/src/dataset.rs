//! The theorem-extraction dataset: expanded proofs with target masks,
//! filtered, split by target theorem and capped per target.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::database::Database;
use crate::expansion::{enumerate_expansions, ExpansionRecord};
use crate::tree::{build_tree, ProofNode, ProofTree};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub max_nodes: usize,
    pub max_node_feature_chars: usize,
    pub train_cap: usize,
    pub eval_cap: usize,
    /// Train, valid and test fractions.
    pub split_fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            max_nodes: 1000,
            max_node_feature_chars: 512,
            train_cap: 100,
            eval_cap: 10,
            split_fractions: (0.9, 0.05, 0.05),
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("database has no provable assertions")]
    EmptyDatabase,
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    DegenerateFractions((f64, f64, f64)),
    #[error("caps must be at least 1")]
    ZeroCap,
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub label: String,
    pub prop: String,
    pub target: bool,
}

impl GraphNode {
    /// Text fed to the classifier for this node.
    pub fn feature(&self) -> String {
        format!("{} {}", self.label, self.prop)
    }
}

/// One dataset example, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub graph_id: String,
    pub host: String,
    pub target_theorem: String,
    pub nodes: Vec<GraphNode>,
    /// `(parent, child)`: argument to the step that consumes it.
    pub edges: Vec<(usize, usize)>,
}

impl GraphRecord {
    pub fn from_expansion(rec: &ExpansionRecord) -> GraphRecord {
        GraphRecord::with_targets(
            &rec.graph,
            rec.graph_id(),
            &rec.expanded_theorem_label,
            &rec.target,
        )
    }

    /// An unexpanded library proof: the graph id is the theorem label, no
    /// node is a target.
    pub fn from_tree(tree: &ProofTree) -> GraphRecord {
        GraphRecord::with_targets(tree, tree.theorem_label.clone(), "", &vec![false; tree.len()])
    }

    fn with_targets(tree: &ProofTree, graph_id: String, target_theorem: &str, target: &[bool]) -> GraphRecord {
        let nodes = tree
            .nodes
            .iter()
            .map(|n| GraphNode {
                label: n.label.clone(),
                prop: n.prop.clone(),
                target: target[n.id],
            })
            .collect();
        let edges = tree
            .nodes
            .iter()
            .flat_map(|n| n.parents.iter().map(move |&p| (p, n.id)))
            .collect();
        GraphRecord {
            graph_id,
            host: tree.theorem_label.clone(),
            target_theorem: target_theorem.to_string(),
            nodes,
            edges,
        }
    }

    pub fn targets(&self) -> Vec<bool> {
        self.nodes.iter().map(|n| n.target).collect()
    }

    /// Rebuilds the proof tree. Parents keep the order of `edges`.
    pub fn to_tree(&self) -> ProofTree {
        let mut nodes: Vec<ProofNode> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| ProofNode {
                id,
                label: n.label.clone(),
                prop: n.prop.clone(),
                parents: Vec::new(),
            })
            .collect();
        for &(p, c) in &self.edges {
            nodes[c].parents.push(p);
        }
        ProofTree {
            theorem_label: self.host.clone(),
            root: nodes.len().saturating_sub(1),
            nodes,
        }
    }

    /// Longest node feature, in characters.
    pub fn max_feature_chars(&self) -> usize {
        self.nodes.iter().map(|n| n.feature().chars().count()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Valid => "valid.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

fn seeded_digest(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// Split of a target theorem: a seeded hash of its label mapped to [0, 1).
pub fn split_of(target: &str, seed: u64, fractions: (f64, f64, f64)) -> Split {
    let d = seeded_digest(seed, target);
    let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as f64 / (u64::MAX as f64 + 1.0);
    if x < fractions.0 {
        Split::Train
    } else if x < fractions.0 + fractions.1 {
        Split::Valid
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub targets: usize,
    pub records_pre_cap: usize,
    pub records: usize,
    /// Occurrences per target → number of targets, before capping.
    pub histogram_pre_cap: BTreeMap<usize, usize>,
    pub histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub schema_version: u32,
    pub spec: DatasetSpec,
    pub hosts: usize,
    pub expansions: usize,
    /// Expansions whose inlined proof failed to replay.
    pub discarded: usize,
    pub filtered_nodes: usize,
    pub filtered_chars: usize,
    pub pre_cap: usize,
    pub post_cap: usize,
    pub splits: BTreeMap<Split, SplitReport>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub splits: BTreeMap<Split, Vec<GraphRecord>>,
    pub report: DatasetReport,
}

impl Dataset {
    pub fn records(&self, split: Split) -> &[GraphRecord] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn check_spec(spec: &DatasetSpec) -> Result<(), DatasetError> {
    let (a, b, c) = spec.split_fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(DatasetError::DegenerateFractions(spec.split_fractions));
    }
    if spec.train_cap == 0 || spec.eval_cap == 0 {
        return Err(DatasetError::ZeroCap);
    }
    Ok(())
}

/// Expands every proof of `db`, filters, splits and caps.
pub fn build_dataset(db: &Database, spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    check_spec(spec)?;
    let hosts: Vec<_> = db.provable().collect();
    if hosts.is_empty() {
        return Err(DatasetError::EmptyDatabase);
    }

    struct HostOutcome {
        records: Vec<GraphRecord>,
        expansions: usize,
        discarded: usize,
        filtered_nodes: usize,
        filtered_chars: usize,
    }
    let outcomes: Vec<HostOutcome> = hosts
        .par_iter()
        .map(|a| {
            let mut out = HostOutcome {
                records: Vec::new(),
                expansions: 0,
                discarded: 0,
                filtered_nodes: 0,
                filtered_chars: 0,
            };
            let Ok(tree) = build_tree(db, a) else { return out };
            let ex = enumerate_expansions(db, &tree);
            out.expansions = ex.records.len() + ex.discarded.len();
            out.discarded = ex.discarded.len();
            for rec in &ex.records {
                if rec.graph.len() > spec.max_nodes {
                    out.filtered_nodes += 1;
                    continue;
                }
                let g = GraphRecord::from_expansion(rec);
                if g.max_feature_chars() > spec.max_node_feature_chars {
                    out.filtered_chars += 1;
                    continue;
                }
                out.records.push(g);
            }
            out
        })
        .collect();

    let mut report = DatasetReport {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        hosts: hosts.len(),
        expansions: 0,
        discarded: 0,
        filtered_nodes: 0,
        filtered_chars: 0,
        pre_cap: 0,
        post_cap: 0,
        splits: Split::ALL.iter().map(|s| (*s, SplitReport::default())).collect(),
    };
    // Records grouped by split and target, in enumeration order.
    let mut grouped: BTreeMap<Split, BTreeMap<String, Vec<GraphRecord>>> = BTreeMap::new();
    for o in outcomes {
        report.expansions += o.expansions;
        report.discarded += o.discarded;
        report.filtered_nodes += o.filtered_nodes;
        report.filtered_chars += o.filtered_chars;
        for r in o.records {
            let split = split_of(&r.target_theorem, spec.seed, spec.split_fractions);
            grouped
                .entry(split)
                .or_default()
                .entry(r.target_theorem.clone())
                .or_default()
                .push(r);
        }
    }

    let mut splits: BTreeMap<Split, Vec<GraphRecord>> = Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for (split, targets) in grouped {
        let cap = match split {
            Split::Train => spec.train_cap,
            _ => spec.eval_cap,
        };
        let sr = report.splits.get_mut(&split).expect("all splits present");
        let out = splits.get_mut(&split).expect("all splits present");
        for (target, records) in targets {
            sr.targets += 1;
            sr.records_pre_cap += records.len();
            *sr.histogram_pre_cap.entry(records.len()).or_insert(0) += 1;
            let kept = if records.len() > cap {
                let d = seeded_digest(spec.seed, &target);
                let mut rng = ChaCha8Rng::from_seed(d);
                let mut picked = sample(&mut rng, records.len(), cap).into_vec();
                picked.sort_unstable();
                let mut records: Vec<Option<GraphRecord>> = records.into_iter().map(Some).collect();
                picked.into_iter().map(|i| records[i].take().expect("indices are distinct")).collect()
            } else {
                records
            };
            sr.records += kept.len();
            *sr.histogram.entry(kept.len()).or_insert(0) += 1;
            out.extend(kept);
        }
        out.sort_by(|a, b| a.graph_id.cmp(&b.graph_id));
    }
    report.pre_cap = report.splits.values().map(|s| s.records_pre_cap).sum();
    report.post_cap = report.splits.values().map(|s| s.records).sum();
    Ok(Dataset { splits, report })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_records(path: &Path, records: &[GraphRecord]) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads any JSON Lines file of `T`, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DatasetError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Writes the three split files and `report.json` into `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for split in Split::ALL {
        write_records(&dir.join(split.file_name()), ds.records(split))?;
    }
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&ds.report).expect("report serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Index of records by graph id.
pub fn index_by_id(records: &[GraphRecord]) -> HashMap<&str, &GraphRecord> {
    records.iter().map(|r| (r.graph_id.as_str(), r)).collect()
}
