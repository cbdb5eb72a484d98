//! Theorem expansion: inline the proof of a theorem at one of its
//! application sites, marking the inlined body as the extraction target.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::database::{Database, Frame};
use crate::tree::{ProofTree, TreeError};
use crate::verify::{Replay, VerifyError};

/// One expanded proof with its ground-truth node mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub graph: ProofTree,
    /// One flag per node of `graph`: the nodes of the inlined body, with
    /// each hypothesis slot represented by the root of the argument grafted
    /// into it.
    pub target: Vec<bool>,
    pub host_label: String,
    pub expanded_theorem_label: String,
    /// Which application of the theorem (in RPN order) was expanded.
    pub occurrence_index: usize,
}

impl ExpansionRecord {
    pub fn target_count(&self) -> usize {
        self.target.iter().filter(|t| **t).count()
    }

    pub fn graph_id(&self) -> String {
        format!("{}:{}:{}", self.host_label, self.expanded_theorem_label, self.occurrence_index)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExpansionError {
    #[error("node {node} applies `{label}`, which is not a provable assertion")]
    NotExpandable { node: usize, label: String },
    #[error("`{0}` has no stored proof")]
    NoProof(String),
    #[error("host `{0}` is not an assertion of the database")]
    UnknownHost(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("expanded proof does not verify: {0}")]
    Verify(#[from] VerifyError),
}

impl ExpansionError {
    pub fn is_disjointness(&self) -> bool {
        matches!(self, ExpansionError::Verify(e) if e.is_disjointness())
    }
}

/// Frame used to replay an expanded proof: the host's frame plus the dummy
/// floats of the inlined theorem.
fn expansion_frame(host: &Frame, inlined: &Frame) -> Frame {
    let mut frame = host.clone();
    for h in &inlined.optional_floats {
        if frame.hypothesis(&h.label).is_none() {
            frame.optional_floats.push(h.clone());
        }
    }
    frame
}

/// Expands the application at `node` of `host`.
pub fn expand_once(db: &Database, host: &ProofTree, node: usize) -> Result<ExpansionRecord, ExpansionError> {
    let applied = host.node(node)?;
    let theorem = db
        .assertion(&applied.label)
        .filter(|a| a.is_provable())
        .ok_or_else(|| ExpansionError::NotExpandable {
            node,
            label: applied.label.clone(),
        })?;
    if theorem.proof.is_empty() {
        return Err(ExpansionError::NoProof(theorem.label.clone()));
    }
    let host_assertion = db
        .assertion(&host.theorem_label)
        .ok_or_else(|| ExpansionError::UnknownHost(host.theorem_label.clone()))?;

    let occurrence_index = host
        .postorder_from(host.root)
        .into_iter()
        .take_while(|&i| i != node)
        .filter(|&i| host.nodes[i].label == applied.label)
        .count();

    // Canonical arguments are the theorem's mandatory hypotheses; the
    // contextual arguments are the subtrees above the applied node, in the
    // same order.
    let canonical: Vec<&str> = theorem.frame.hypotheses.iter().map(|h| h.label.as_str()).collect();
    let contextual: Vec<Vec<usize>> = applied.parents.iter().map(|&p| host.postorder_from(p)).collect();

    let above: HashSet<usize> = host.postorder_from(node).into_iter().filter(|&i| i != node).collect();
    let mut labels: Vec<String> = Vec::with_capacity(host.len() + theorem.proof.len());
    let mut target: Vec<bool> = Vec::with_capacity(labels.capacity());
    for id in host.postorder_from(host.root) {
        if id == node {
            for step in &theorem.proof {
                match canonical.iter().position(|c| c == step) {
                    Some(k) => {
                        for &a in &contextual[k] {
                            labels.push(host.nodes[a].label.clone());
                            target.push(false);
                        }
                        *target.last_mut().expect("argument subtrees are nonempty") = true;
                    }
                    None => {
                        labels.push(step.clone());
                        target.push(true);
                    }
                }
            }
        } else if !above.contains(&id) {
            labels.push(host.nodes[id].label.clone());
            target.push(false);
        }
    }

    let frame = expansion_frame(&host_assertion.frame, &theorem.frame);
    let replay = Replay {
        before: host_assertion.index,
        ..Replay::new(db, &frame)
    };
    let trace = replay.verify(&host_assertion.expr, &labels)?;
    let graph = ProofTree::from_trace(db, &host.theorem_label, &trace);
    Ok(ExpansionRecord {
        graph,
        target,
        host_label: host.theorem_label.clone(),
        expanded_theorem_label: theorem.label.clone(),
        occurrence_index,
    })
}

/// A record that could not be produced because its expanded proof failed
/// to replay (in practice, a `$d` violation introduced by inlining).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscardedExpansion {
    pub node: usize,
    pub theorem: String,
    pub error: ExpansionError,
}

#[derive(Debug, Clone, Default)]
pub struct Expansions {
    pub records: Vec<ExpansionRecord>,
    pub discarded: Vec<DiscardedExpansion>,
}

/// Expands every provable-assertion application in `host`, one at a time.
pub fn enumerate_expansions(db: &Database, host: &ProofTree) -> Expansions {
    let mut out = Expansions::default();
    for id in host.postorder_from(host.root) {
        let n = &host.nodes[id];
        let Some(a) = db.assertion(&n.label) else { continue };
        if !a.is_provable() {
            continue;
        }
        match expand_once(db, host, id) {
            Ok(r) => out.records.push(r),
            Err(error) => out.discarded.push(DiscardedExpansion {
                node: id,
                theorem: n.label.clone(),
                error,
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::PROP_MM;
    use crate::tree::build_tree;

    #[test]
    fn only_provable_applications_expand() {
        let db = Database::parse(PROP_MM).unwrap();
        let host = build_tree(&db, db.assertion("mp1i").unwrap()).unwrap();
        let mp = host.nodes.iter().position(|n| n.label == "ax-mp").unwrap();
        assert!(matches!(expand_once(&db, &host, mp), Err(ExpansionError::NotExpandable { .. })));
        assert!(matches!(expand_once(&db, &host, 99), Err(ExpansionError::Tree(_))));
        let mut stray = host.clone();
        stray.theorem_label = "nope".into();
        let a1i = host.nodes.iter().position(|n| n.label == "a1i").unwrap();
        assert_eq!(expand_once(&db, &stray, a1i), Err(ExpansionError::UnknownHost("nope".into())));
    }

    #[test]
    fn every_expansion_keeps_the_host_conclusion() {
        let db = Database::parse(PROP_MM).unwrap();
        for a in db.provable() {
            let host = build_tree(&db, a).unwrap();
            let ex = enumerate_expansions(&db, &host);
            assert!(ex.discarded.is_empty());
            for rec in ex.records {
                assert_eq!(rec.graph.root_node().prop, host.root_node().prop);
                assert_eq!(rec.target.len(), rec.graph.len());
                assert!(rec.graph.validate().is_ok());
            }
        }
    }
}
