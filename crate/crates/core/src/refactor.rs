//! Rewriting library proofs to use new theorems.
//!
//! A new theorem applies at a host node when the theorem's own proof tree
//! matches the host subtree there, with each mandatory hypothesis of the
//! theorem standing for some host subtree. Repeated hypotheses must bind
//! structurally identical subtrees. The matched subtree is replaced by one
//! application of the theorem.

use std::collections::{BTreeMap, HashMap};

use log::debug;
use serde::Serialize;
use thiserror::Error;

use crate::database::{Assertion, AssertionKind, Database, Frame, HypKind, Sym};
use crate::extraction::ExtractedTheorem;
use crate::tree::{build_tree, build_tree_from_labels, linearize, ProofNode, ProofTree, TreeError};
use crate::verify::{verify_assertion, VerifyError};

#[derive(Debug, Error)]
pub enum RefactorError {
    #[error("proof of `{label}` fails to build: {source}")]
    Tree { label: String, source: TreeError },
    #[error("rewritten proof of `{label}` does not verify: {source}")]
    Rewritten { label: String, source: VerifyError },
}

/// A theorem's proof tree prepared for matching.
pub struct Pattern {
    pub name: String,
    pub tree: ProofTree,
    /// Mandatory hypothesis labels in argument order.
    pub hypotheses: Vec<String>,
    /// Typecode of each hypothesis.
    typecodes: Vec<Sym>,
    /// Mandatory `$d` pairs as hypothesis indices of the two floats.
    disjoint: Vec<(usize, usize)>,
}

impl Pattern {
    pub fn new(db: &Database, name: &str, frame: &Frame, conclusion: &[Sym], proof: &[String]) -> Result<Pattern, TreeError> {
        let tree = build_tree_from_labels(db, name, conclusion, proof, frame)?;
        let hypotheses: Vec<String> = frame.hypotheses.iter().map(|h| h.label.clone()).collect();
        let typecodes = frame.hypotheses.iter().map(|h| h.typecode()).collect();
        let float_of = |v: Sym| frame.hypotheses.iter().position(|h| h.variable() == Some(v));
        let disjoint = frame
            .disjoint
            .iter()
            .filter_map(|(a, b)| Some((float_of(*a)?, float_of(*b)?)))
            .collect();
        Ok(Pattern {
            name: name.to_string(),
            tree,
            hypotheses,
            typecodes,
            disjoint,
        })
    }

    pub fn from_theorem(db: &Database, t: &ExtractedTheorem) -> Result<Pattern, TreeError> {
        Pattern::new(db, &t.name, &t.frame(db), &t.conclusion, &t.proof)
    }

    fn hypothesis_index(&self, label: &str) -> Option<usize> {
        self.hypotheses.iter().position(|h| h == label)
    }

    /// Number of pattern nodes that are not hypothesis leaves.
    pub fn body_size(&self) -> usize {
        self.tree
            .nodes
            .iter()
            .filter(|n| self.hypothesis_index(&n.label).is_none())
            .count()
    }
}

/// A successful match: host node ids bound to each mandatory hypothesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Match {
    pub node: usize,
    pub arguments: Vec<usize>,
    /// Host nodes removed minus nodes added.
    pub saved: usize,
}

/// Tries to apply `pattern` at `node` of `host`. `host_frame` decides
/// whether the theorem's `$d` conditions hold after substitution.
pub fn match_at(db: &Database, pattern: &Pattern, host: &ProofTree, node: usize, host_frame: &Frame) -> Option<Match> {
    if pattern.body_size() < 2 {
        return None;
    }
    let mut bound: Vec<Option<usize>> = vec![None; pattern.hypotheses.len()];
    let mut stack = vec![(pattern.tree.root, node)];
    while let Some((p, h)) = stack.pop() {
        let pn = &pattern.tree.nodes[p];
        let hn = &host.nodes[h];
        if let Some(k) = pattern.hypothesis_index(&pn.label) {
            if hn.prop.split(' ').next() != Some(db.symbol_name(pattern.typecodes[k])) {
                return None;
            }
            match bound[k] {
                None => bound[k] = Some(h),
                Some(prev) => {
                    if !same_subtree(host, prev, h) {
                        return None;
                    }
                }
            }
            continue;
        }
        if pn.label != hn.label || pn.parents.len() != hn.parents.len() {
            return None;
        }
        for (&pp, &hp) in pn.parents.iter().zip(&hn.parents) {
            stack.push((pp, hp));
        }
    }
    let arguments: Vec<usize> = bound.into_iter().collect::<Option<_>>()?;

    for &(a, b) in &pattern.disjoint {
        let va = variables_of_prop(db, &host.nodes[arguments[a]].prop);
        let vb = variables_of_prop(db, &host.nodes[arguments[b]].prop);
        for &x in &va {
            for &y in &vb {
                if x == y || !host_frame.allows_disjoint(x, y) {
                    return None;
                }
            }
        }
    }

    let sizes = host.subtree_sizes();
    let kept: usize = 1 + arguments.iter().map(|&a| sizes[a]).sum::<usize>();
    let removed = sizes[node];
    if removed <= kept {
        return None;
    }
    Some(Match {
        node,
        arguments,
        saved: removed - kept,
    })
}

fn variables_of_prop(db: &Database, prop: &str) -> Vec<Sym> {
    prop.split(' ')
        .skip(1)
        .filter_map(|t| db.symbol(t))
        .filter(|s| db.is_variable(*s))
        .collect()
}

fn same_subtree(tree: &ProofTree, a: usize, b: usize) -> bool {
    let (pa, pb) = (tree.postorder_from(a), tree.postorder_from(b));
    pa.len() == pb.len()
        && pa.iter().zip(&pb).all(|(x, y)| {
            let (nx, ny) = (&tree.nodes[*x], &tree.nodes[*y]);
            nx.label == ny.label && nx.parents.len() == ny.parents.len()
        })
}

/// Replaces the matched subtree with one application of `name`.
pub fn apply_match(host: &ProofTree, m: &Match, name: &str) -> ProofTree {
    enum Task {
        Visit(usize),
        Emit(usize),
        EmitApplication,
    }
    let mut nodes: Vec<ProofNode> = Vec::with_capacity(host.len());
    let mut results: Vec<usize> = Vec::new();
    let mut tasks = vec![Task::Visit(host.root)];
    while let Some(task) = tasks.pop() {
        match task {
            Task::Visit(id) if id == m.node => {
                tasks.push(Task::EmitApplication);
                for &a in m.arguments.iter().rev() {
                    tasks.push(Task::Visit(a));
                }
            }
            Task::Visit(id) => {
                tasks.push(Task::Emit(id));
                for &p in host.nodes[id].parents.iter().rev() {
                    tasks.push(Task::Visit(p));
                }
            }
            Task::Emit(id) => {
                let n = &host.nodes[id];
                let parents = results.split_off(results.len() - n.parents.len());
                results.push(nodes.len());
                nodes.push(ProofNode {
                    id: nodes.len(),
                    label: n.label.clone(),
                    prop: n.prop.clone(),
                    parents,
                });
            }
            Task::EmitApplication => {
                let parents = results.split_off(results.len() - m.arguments.len());
                results.push(nodes.len());
                nodes.push(ProofNode {
                    id: nodes.len(),
                    label: name.to_string(),
                    prop: host.nodes[m.node].prop.clone(),
                    parents,
                });
            }
        }
    }
    ProofTree {
        theorem_label: host.theorem_label.clone(),
        root: nodes.len() - 1,
        nodes,
    }
}

/// Applies every pattern to `host` until none matches. Patterns are tried
/// in order; each pattern is applied at the first matching node in post
/// order, repeatedly. Returns the rewritten tree and the per-pattern uses
/// and savings.
pub fn refactor_proof(
    db: &Database,
    host: &ProofTree,
    host_frame: &Frame,
    patterns: &[&Pattern],
) -> (ProofTree, Vec<(usize, usize)>) {
    let mut tree = host.clone();
    let mut tally = vec![(0usize, 0usize); patterns.len()];
    loop {
        let mut changed = false;
        for (k, p) in patterns.iter().enumerate() {
            let root_label = &p.tree.root_node().label;
            loop {
                let found = tree
                    .postorder_from(tree.root)
                    .into_iter()
                    .filter(|&id| &tree.nodes[id].label == root_label)
                    .find_map(|id| match_at(db, p, &tree, id, host_frame));
                let Some(m) = found else { break };
                tally[k].0 += 1;
                tally[k].1 += m.saved;
                tree = apply_match(&tree, &m, &p.name);
                changed = true;
            }
        }
        if !changed {
            return (tree, tally);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RefactorStats {
    /// Uses of each new theorem, including unused ones.
    pub usage: BTreeMap<String, usize>,
    pub nodes_saved: BTreeMap<String, usize>,
    pub total_usage: usize,
    pub used_theorems: usize,
    /// Mean usage over theorems used at least once.
    pub average_usage: f64,
    pub max_usage: usize,
    pub total_nodes_saved: usize,
    pub refactored_proof_count: usize,
    pub nodes_before: usize,
    pub nodes_after: usize,
    /// Theorems left out, with the reason.
    pub skipped: BTreeMap<String, String>,
}

pub struct Refactored {
    pub db: Database,
    pub stats: RefactorStats,
}

/// Where a theorem may be used: either it is already in the database, or it
/// is inserted before its first use.
enum Placement {
    Existing(String),
    Pending { latest_dependency: Option<String> },
    Inserted,
}

/// Refactors every library proof with `theorems`, inserting the theorems
/// that get used.
pub fn refactor_database(db: &Database, theorems: &[ExtractedTheorem]) -> Result<Refactored, RefactorError> {
    let mut stats = RefactorStats::default();
    let mut accepted: Vec<(&ExtractedTheorem, Pattern, Placement)> = Vec::new();
    for t in theorems {
        stats.usage.entry(t.name.clone()).or_insert(0);
        stats.nodes_saved.entry(t.name.clone()).or_insert(0);
        if accepted.iter().any(|(a, _, _)| a.name == t.name) {
            stats.skipped.insert(t.name.clone(), "duplicate name".into());
            continue;
        }
        if let Err(e) = t.verify(db) {
            stats.skipped.insert(t.name.clone(), format!("does not verify: {e}"));
            continue;
        }
        let placement = match db.assertion(&t.name) {
            Some(a) => {
                let same = ExtractedTheorem::from_assertion(db, a).dedup_key == t.dedup_key;
                if !same {
                    stats.skipped.insert(t.name.clone(), "name clashes with a different statement".into());
                    continue;
                }
                Placement::Existing(t.name.clone())
            }
            None if db.lookup(&t.name).is_some() => {
                stats.skipped.insert(t.name.clone(), "name clashes with a hypothesis".into());
                continue;
            }
            None => Placement::Pending {
                latest_dependency: t
                    .proof
                    .iter()
                    .filter_map(|l| db.assertion(l))
                    .max_by_key(|a| a.index)
                    .map(|a| a.label.clone()),
            },
        };
        match Pattern::from_theorem(db, t) {
            Ok(p) => accepted.push((t, p, placement)),
            Err(e) => {
                stats.skipped.insert(t.name.clone(), format!("proof does not build: {e}"));
            }
        }
    }

    let new_names: Vec<&str> = accepted.iter().map(|(t, _, _)| t.name.as_str()).collect();
    let hosts: Vec<String> = db
        .provable()
        .filter(|a| !new_names.contains(&a.label.as_str()))
        .map(|a| a.label.clone())
        .collect();

    let mut work = db.clone();
    let mut positions = work.top_level_positions();
    for label in &hosts {
        let host = work.assertion(label).expect("hosts stay in the database").clone();
        let tree = build_tree(&work, &host).map_err(|source| RefactorError::Tree {
            label: label.clone(),
            source,
        })?;
        stats.nodes_before += tree.len();
        let host_pos = positions[host.index];
        let available: Vec<usize> = accepted
            .iter()
            .enumerate()
            .filter(|(_, (_, _, placement))| match placement {
                Placement::Existing(name) | Placement::Pending { latest_dependency: Some(name) } => {
                    positions[work.assertion(name).expect("known label").index] < host_pos
                }
                Placement::Pending { latest_dependency: None } => true,
                Placement::Inserted => true,
            })
            .map(|(i, _)| i)
            .collect();
        let patterns: Vec<&Pattern> = available.iter().map(|&i| &accepted[i].1).collect();
        let (rewritten, tally) = refactor_proof(&work, &tree, &host.frame, &patterns);
        stats.nodes_after += rewritten.len();
        if tally.iter().all(|(uses, _)| *uses == 0) {
            continue;
        }
        stats.refactored_proof_count += 1;
        for (&i, (uses, saved)) in available.iter().zip(&tally) {
            if *uses == 0 {
                continue;
            }
            let (t, _, placement) = &mut accepted[i];
            *stats.usage.get_mut(&t.name).expect("registered") += uses;
            *stats.nodes_saved.get_mut(&t.name).expect("registered") += saved;
            if matches!(placement, Placement::Pending { .. }) {
                let pos = work.top_level_positions()[work.assertion(label).expect("host").index];
                insert_theorem(&mut work, pos, t);
                *placement = Placement::Inserted;
                positions = work.top_level_positions();
                debug!("inserted {} before {}", t.name, label);
            }
        }
        let host_index = work.assertion(label).expect("host").index;
        work.set_proof(host_index, linearize(&rewritten));
        verify_assertion(&work, &work.assertions()[host_index]).map_err(|source| RefactorError::Rewritten {
            label: label.clone(),
            source,
        })?;
    }

    stats.total_usage = stats.usage.values().sum();
    stats.used_theorems = stats.usage.values().filter(|u| **u > 0).count();
    stats.max_usage = stats.usage.values().copied().max().unwrap_or(0);
    stats.average_usage = if stats.used_theorems == 0 {
        0.0
    } else {
        stats.total_usage as f64 / stats.used_theorems as f64
    };
    stats.total_nodes_saved = stats.nodes_saved.values().sum();
    Ok(Refactored { db: work, stats })
}

fn insert_theorem(db: &mut Database, item_pos: usize, t: &ExtractedTheorem) {
    let frame = t.frame(db);
    let essentials = t.hypotheses.iter().filter(|h| h.kind == HypKind::Essential).cloned().collect();
    let disjoint = t.disjoint.iter().map(|(a, b)| vec![*a, *b]).collect();
    let assertion = Assertion {
        label: t.name.clone(),
        kind: AssertionKind::Provable,
        expr: t.conclusion.clone(),
        frame,
        proof: t.proof.clone(),
        index: 0,
    };
    db.insert_assertion(item_pos, assertion, essentials, disjoint);
}

/// Total proof size of the library, counted in tree nodes.
pub fn library_size(db: &Database) -> usize {
    db.provable().filter_map(|a| build_tree(db, a).ok()).map(|t| t.len()).sum()
}

/// Uses of each label across all proofs of the database.
pub fn label_usage(db: &Database) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    for a in db.provable() {
        for l in &a.proof {
            if db.assertion(l).is_some() {
                *out.entry(l.clone()).or_insert(0) += 1;
            }
        }
    }
    out
}
