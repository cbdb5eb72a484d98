//! Proof trees: one node per proof step, props as canonical text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::database::{Assertion, Database, Frame};
use crate::verify::{Replay, VerifiedTrace, VerifyError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofNode {
    pub id: usize,
    pub label: String,
    /// Typecode first, single spaces.
    pub prop: String,
    /// Argument node ids in mandatory-hypothesis order.
    pub parents: Vec<usize>,
}

impl ProofNode {
    pub fn is_leaf(&self) -> bool {
        self.parents.is_empty()
    }
}

/// A proof as a tree; node ids follow RPN order, so every parent id is
/// smaller than its child's id and the root is the last node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofTree {
    #[serde(rename = "theorem")]
    pub theorem_label: String,
    pub root: usize,
    pub nodes: Vec<ProofNode>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("`{0}` is not a provable assertion")]
    NotProvable(String),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("malformed tree: {0}")]
    Malformed(String),
}

impl ProofTree {
    pub fn from_trace(db: &Database, theorem_label: &str, trace: &VerifiedTrace) -> ProofTree {
        let nodes: Vec<ProofNode> = trace
            .steps
            .iter()
            .enumerate()
            .map(|(id, s)| ProofNode {
                id,
                label: s.label.clone(),
                prop: db.render(&s.expr),
                parents: s.args.clone(),
            })
            .collect();
        ProofTree {
            theorem_label: theorem_label.to_string(),
            root: nodes.len() - 1,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> Result<&ProofNode, TreeError> {
        self.nodes.get(id).ok_or(TreeError::UnknownNode(id))
    }

    pub fn root_node(&self) -> &ProofNode {
        &self.nodes[self.root]
    }

    /// Child (consumer) of every node; `None` for the root.
    pub fn children(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.nodes.len()];
        for n in &self.nodes {
            for &p in &n.parents {
                out[p] = Some(n.id);
            }
        }
        out
    }

    /// Post-order ids of the subtree rooted at `id`.
    pub fn postorder_from(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![(id, false)];
        while let Some((n, expanded)) = stack.pop() {
            if expanded {
                out.push(n);
            } else {
                stack.push((n, true));
                for &p in self.nodes[n].parents.iter().rev() {
                    stack.push((p, false));
                }
            }
        }
        out
    }

    /// Size of every node's subtree.
    pub fn subtree_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![1usize; self.nodes.len()];
        for n in &self.nodes {
            for &p in &n.parents {
                sizes[n.id] += sizes[p];
            }
        }
        sizes
    }

    /// Checks that node ids are dense, parents precede children and every
    /// non-root node feeds exactly one child.
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.nodes.is_empty() {
            return Err(TreeError::Malformed("no nodes".into()));
        }
        let mut uses = vec![0usize; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(TreeError::Malformed(format!("node {i} has id {}", n.id)));
            }
            for &p in &n.parents {
                if p >= i {
                    return Err(TreeError::Malformed(format!("parent {p} does not precede {i}")));
                }
                uses[p] += 1;
            }
        }
        if self.root >= self.nodes.len() {
            return Err(TreeError::UnknownNode(self.root));
        }
        for (i, &u) in uses.iter().enumerate() {
            let expected = usize::from(i != self.root);
            if u != expected {
                return Err(TreeError::Malformed(format!("node {i} is used {u} times")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serialization cannot fail")
    }
}

/// Builds the proof tree of a provable assertion from its stored proof.
pub fn build_tree(db: &Database, assertion: &Assertion) -> Result<ProofTree, TreeError> {
    if !assertion.is_provable() {
        return Err(TreeError::NotProvable(assertion.label.clone()));
    }
    let trace = crate::verify::verify_assertion(db, assertion)?;
    Ok(ProofTree::from_trace(db, &assertion.label, &trace))
}

/// Replays `labels` under `frame` into a tree proving `conclusion`.
pub fn build_tree_from_labels<S: AsRef<str>>(
    db: &Database,
    theorem_label: &str,
    conclusion: &[crate::database::Sym],
    labels: &[S],
    frame: &Frame,
) -> Result<ProofTree, TreeError> {
    let trace = Replay::new(db, frame).verify(conclusion, labels)?;
    Ok(ProofTree::from_trace(db, theorem_label, &trace))
}

/// RPN label sequence of the tree.
pub fn linearize(tree: &ProofTree) -> Vec<String> {
    tree.postorder_from(tree.root)
        .into_iter()
        .map(|i| tree.nodes[i].label.clone())
        .collect()
}

/// The subtree above `node`, as a self-contained proof of its prop.
pub fn subtree_above(tree: &ProofTree, node: usize) -> Result<ProofTree, TreeError> {
    tree.node(node)?;
    let order = tree.postorder_from(node);
    let mut remap = vec![usize::MAX; tree.nodes.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let nodes: Vec<ProofNode> = order
        .iter()
        .enumerate()
        .map(|(new, &old)| {
            let n = &tree.nodes[old];
            ProofNode {
                id: new,
                label: n.label.clone(),
                prop: n.prop.clone(),
                parents: n.parents.iter().map(|p| remap[*p]).collect(),
            }
        })
        .collect();
    Ok(ProofTree {
        theorem_label: tree.theorem_label.clone(),
        root: nodes.len() - 1,
        nodes,
    })
}
