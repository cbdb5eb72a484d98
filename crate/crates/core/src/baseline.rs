//! Symbolic frequency baseline: every node's whole subtree is extracted as a
//! theorem, and the most frequent statements win.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;

use crate::database::Database;
use crate::extraction::{library_keys, Category, ExtractedTheorem, ExtractionOptions, Extractor};
use crate::tree::{subtree_above, ProofTree};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    /// dedup key → (first theorem seen, number of extractions).
    pub entries: BTreeMap<String, (ExtractedTheorem, usize)>,
    /// Number of successful extractions, i.e. the sum of all counts.
    pub extractions: usize,
}

impl FrequencyTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn add(&mut self, t: ExtractedTheorem, count: usize) {
        self.extractions += count;
        self.entries
            .entry(t.dedup_key.clone())
            .and_modify(|e| e.1 += count)
            .or_insert((t, count));
    }

    /// Merges `other` into `self`; entries already present keep their theorem.
    pub fn merge(&mut self, other: FrequencyTable) {
        for (_, (t, c)) in other.entries {
            self.add(t, c);
        }
    }
}

/// Theorems extracted from the closures of every internal node of `tree`
/// that proves a non-syntax statement.
pub fn node_closures(ex: &Extractor<'_>, tree: &ProofTree, opts: ExtractionOptions) -> Vec<ExtractedTheorem> {
    let db = ex.db;
    let mut out = Vec::new();
    for n in &tree.nodes {
        if n.is_leaf() {
            continue;
        }
        let syntax = n
            .prop
            .split(' ')
            .next()
            .and_then(|tc| db.symbol(tc))
            .is_some_and(|tc| db.is_syntax_typecode(tc));
        if syntax {
            continue;
        }
        if opts.reject_whole_tree && n.id == tree.root {
            continue;
        }
        let Ok(sub) = subtree_above(tree, n.id) else { continue };
        let all = vec![true; sub.len()];
        let v = ex.verify_selection(&sub, &all, ExtractionOptions::default());
        if v.category == Category::TreeValid {
            out.extend(v.theorem);
        }
    }
    out
}

/// Mines all proofs in parallel and merges the tables in input order.
pub fn mine_node_closures(db: &Database, proofs: &[ProofTree], opts: ExtractionOptions) -> FrequencyTable {
    let ex = Extractor::new(db);
    let per_proof: Vec<Vec<ExtractedTheorem>> = proofs.par_iter().map(|t| node_closures(&ex, t, opts)).collect();
    let mut table = FrequencyTable::default();
    for theorems in per_proof {
        for t in theorems {
            table.add(t, 1);
        }
    }
    table
}

/// The `n` most frequent theorems; ties go to the smaller dedup key.
pub fn top_n(table: &FrequencyTable, n: usize) -> Vec<ExtractedTheorem> {
    let mut ranked: Vec<(&String, &(ExtractedTheorem, usize))> = table.entries.iter().collect();
    ranked.sort_by(|a, b| b.1 .1.cmp(&a.1 .1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(n).map(|(_, (t, _))| t.clone()).collect()
}

/// Fraction of `theorems` whose statement equals, up to renaming, some
/// assertion of the database. Zero for an empty input.
pub fn match_rate_vs_library(db: &Database, theorems: &[ExtractedTheorem]) -> f64 {
    if theorems.is_empty() {
        return 0.0;
    }
    let keys: HashSet<String> = library_keys(db).into_keys().collect();
    let hits = theorems.iter().filter(|t| keys.contains(&t.dedup_key)).count();
    hits as f64 / theorems.len() as f64
}
