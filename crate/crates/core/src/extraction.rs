//! Deciding whether a node subset of a proof tree is a standalone theorem.
//!
//! A selection is turned into a candidate theorem in three stages:
//! structural checks (connected, every selected node has all or none of its
//! parents selected), standardization (boundary nodes become canonical
//! arguments, all statements are recomputed over those arguments) and a
//! final replay of the standardized proof.
//!
//! Standardization replays the selected steps schematically. Every syntax
//! argument gets its own provisional variable; essential arguments take the
//! statement their consumer expects. Whenever a computed statement meets the
//! statement a step requires, the two are unified position by position:
//! provisional variables may be merged with each other, or fixed to a
//! constant that some nullary syntax axiom produces. Any other difference
//! means the selected steps depend on structure that was cut away, and the
//! selection has no valid substitution.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::database::{dv_pair, Assertion, Database, Expr, Frame, HypKind, Hypothesis, Sym};
use crate::tree::ProofTree;
use crate::verify::{DisjointMode, Replay, VerifyError};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-node probabilities from an external predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMask {
    pub graph_id: String,
    pub probs: Vec<f64>,
    #[serde(default = "default_threshold", skip_serializing)]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl PredictionMask {
    pub fn new(graph_id: impl Into<String>, probs: Vec<f64>) -> Self {
        PredictionMask {
            graph_id: graph_id.into(),
            probs,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    /// A 0/1 mask reproducing `selected` exactly.
    pub fn from_selection(graph_id: impl Into<String>, selected: &[bool]) -> Self {
        PredictionMask::new(graph_id, selected.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mask `{graph_id}` has {found} probabilities for a graph of {expected} nodes")]
    LengthMismatch {
        graph_id: String,
        expected: usize,
        found: usize,
    },
}

/// Node ids whose probability is strictly greater than the threshold.
pub fn threshold_mask(mask: &PredictionMask, node_count: usize) -> Result<Vec<bool>, MaskError> {
    if mask.probs.len() != node_count {
        return Err(MaskError::LengthMismatch {
            graph_id: mask.graph_id.clone(),
            expected: node_count,
            found: mask.probs.len(),
        });
    }
    Ok(mask.probs.iter().map(|&p| p > mask.threshold).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Ok,
    NotTree,
    IncompleteArguments,
}

/// Structural validity of a selection.
pub fn check_structure(tree: &ProofTree, selected: &[bool]) -> Structure {
    if selected.len() != tree.len() || !selected.iter().any(|s| *s) {
        return Structure::NotTree;
    }
    let children = tree.children();
    let tops = (0..tree.len())
        .filter(|&i| selected[i] && children[i].is_none_or(|c| !selected[c]))
        .count();
    if tops != 1 {
        return Structure::NotTree;
    }
    for n in &tree.nodes {
        if selected[n.id] {
            let picked = n.parents.iter().filter(|p| selected[**p]).count();
            if picked > 0 && picked < n.parents.len() {
                return Structure::IncompleteArguments;
            }
        }
    }
    Structure::Ok
}

/// The unique selected node whose child is unselected.
fn selection_top(tree: &ProofTree, selected: &[bool]) -> Option<usize> {
    let children = tree.children();
    (0..tree.len()).find(|&i| selected[i] && children[i].is_none_or(|c| !selected[c]))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StandardizeError {
    #[error("selection is not a parent-complete subtree")]
    Structure,
    #[error("selection contains no inference step")]
    NoSteps,
    #[error("no valid substitution: {0}")]
    NoValidSubstitution(String),
    #[error("canonical variable pool for typecode `{0}` is exhausted")]
    PoolExhausted(String),
}

/// A label in a standardized proof.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ProofLabel {
    Label(String),
    /// The essential hypothesis with this index.
    Essential(usize),
}

/// A selection rewritten over canonical variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StandardizedCandidate {
    pub essentials: Vec<Expr>,
    pub conclusion: Expr,
    pub proof: Vec<ProofLabel>,
    /// Number of steps (selected nodes kept as applications).
    pub steps: usize,
    /// Steps that consume at least one selected node.
    pub internal_steps: usize,
}

enum Role {
    Step,
    Var(usize),
    Essential(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Tok {
    C(Sym),
    V(usize),
}

struct Unifier {
    parent: Vec<usize>,
    typecode: Vec<Sym>,
    constant: Vec<Option<Sym>>,
}

impl Unifier {
    fn fresh(&mut self, typecode: Sym) -> usize {
        let id = self.parent.len();
        self.parent.push(id);
        self.typecode.push(typecode);
        self.constant.push(None);
        id
    }

    fn find(&mut self, mut v: usize) -> usize {
        while self.parent[v] != v {
            self.parent[v] = self.parent[self.parent[v]];
            v = self.parent[v];
        }
        v
    }

    fn resolve(&mut self, t: Tok) -> Tok {
        match t {
            Tok::C(_) => t,
            Tok::V(v) => {
                let r = self.find(v);
                match self.constant[r] {
                    Some(c) => Tok::C(c),
                    None => Tok::V(r),
                }
            }
        }
    }
}

/// Precomputed database facts used by extraction.
pub struct Extractor<'a> {
    pub db: &'a Database,
    syntax_typecodes: HashSet<Sym>,
    /// `(typecode, constant)` → nullary syntax axiom label.
    nullary_syntax: HashMap<(Sym, Sym), String>,
    global_floats: Vec<Hypothesis>,
}

impl<'a> Extractor<'a> {
    pub fn new(db: &'a Database) -> Self {
        let syntax_typecodes: HashSet<Sym> = db
            .hypotheses()
            .iter()
            .filter(|h| h.kind == HypKind::Floating)
            .map(|h| h.typecode())
            .collect();
        let mut nullary_syntax = HashMap::new();
        for a in db.assertions() {
            if a.frame.arity() == 0
                && a.expr.len() == 2
                && syntax_typecodes.contains(&a.typecode())
                && !db.is_variable(a.expr[1])
            {
                nullary_syntax.entry((a.expr[0], a.expr[1])).or_insert_with(|| a.label.clone());
            }
        }
        Extractor {
            db,
            syntax_typecodes,
            nullary_syntax,
            global_floats: db.all_global_floats(),
        }
    }

    fn is_syntax(&self, typecode: Sym) -> bool {
        self.syntax_typecodes.contains(&typecode)
    }

    /// Rewrites the selected nodes as a proof over canonical variables.
    pub fn standardize(&self, tree: &ProofTree, selected: &[bool]) -> Result<StandardizedCandidate, StandardizeError> {
        if check_structure(tree, selected) != Structure::Ok {
            return Err(StandardizeError::Structure);
        }
        let db = self.db;
        let top = selection_top(tree, selected).ok_or(StandardizeError::Structure)?;
        let order: Vec<usize> = tree.postorder_from(top).into_iter().filter(|&i| selected[i]).collect();

        let mut uf = Unifier {
            parent: Vec::new(),
            typecode: Vec::new(),
            constant: Vec::new(),
        };
        let mut roles: HashMap<usize, Role> = HashMap::new();
        let mut values: HashMap<usize, Vec<Tok>> = HashMap::new();
        let mut essential_exprs: Vec<Option<Vec<Tok>>> = Vec::new();
        let mut steps = 0usize;
        let mut internal_steps = 0usize;

        let tokens = |prop: &str| -> Result<Expr, StandardizeError> {
            db.tokenize(prop)
                .ok_or_else(|| StandardizeError::NoValidSubstitution(format!("unknown symbol in `{prop}`")))
        };

        for &id in &order {
            let node = &tree.nodes[id];
            let has_selected_parents = node.parents.iter().any(|p| selected[*p]);
            let assertion = db.assertion(&node.label);
            let keep_fact = node.parents.is_empty()
                && assertion.is_some_and(|a| a.frame.arity() == 0 && !self.is_syntax(a.typecode()));
            if has_selected_parents || keep_fact {
                let a = assertion.ok_or_else(|| {
                    StandardizeError::NoValidSubstitution(format!("`{}` is not an assertion", node.label))
                })?;
                steps += 1;
                if has_selected_parents {
                    internal_steps += 1;
                }
                let value = self.apply_step(a, &node.parents, &mut values, &roles, &mut essential_exprs, &mut uf)?;
                values.insert(id, value);
                roles.insert(id, Role::Step);
            } else {
                let prop = tokens(&node.prop)?;
                let typecode = prop[0];
                if self.is_syntax(typecode) {
                    let v = uf.fresh(typecode);
                    values.insert(id, vec![Tok::C(typecode), Tok::V(v)]);
                    roles.insert(id, Role::Var(v));
                } else {
                    roles.insert(id, Role::Essential(essential_exprs.len()));
                    essential_exprs.push(None);
                }
            }
        }
        if steps == 0 {
            return Err(StandardizeError::NoSteps);
        }
        let conclusion_toks = values
            .get(&top)
            .cloned()
            .ok_or(StandardizeError::NoSteps)?;

        // Name variable classes by first appearance of their argument slots.
        let mut names: HashMap<usize, (Sym, String)> = HashMap::new();
        let mut used_per_typecode: HashMap<Sym, usize> = HashMap::new();
        for &id in &order {
            if let Some(Role::Var(v)) = roles.get(&id) {
                let r = uf.find(*v);
                if uf.constant[r].is_some() || names.contains_key(&r) {
                    continue;
                }
                let tc = uf.typecode[r];
                let k = used_per_typecode.entry(tc).or_insert(0);
                let pool = db.global_floats(tc);
                let Some(&(var, hyp)) = pool.get(*k) else {
                    return Err(StandardizeError::PoolExhausted(db.symbol_name(tc).to_string()));
                };
                *k += 1;
                names.insert(r, (var, db.hypotheses()[hyp].label.clone()));
            }
        }
        let render = |toks: &[Tok], uf: &mut Unifier| -> Result<Expr, StandardizeError> {
            toks.iter()
                .map(|t| match uf.resolve(*t) {
                    Tok::C(c) => Ok(c),
                    Tok::V(r) => names
                        .get(&r)
                        .map(|(s, _)| *s)
                        .ok_or_else(|| StandardizeError::NoValidSubstitution("unassigned variable".into())),
                })
                .collect()
        };

        let conclusion = render(&conclusion_toks, &mut uf)?;
        // Identical essential statements share one hypothesis.
        let mut essentials: Vec<Expr> = Vec::new();
        let mut essential_index: Vec<usize> = Vec::new();
        for e in &essential_exprs {
            let toks = e.as_ref().ok_or_else(|| {
                StandardizeError::NoValidSubstitution("essential argument without consumer".into())
            })?;
            let expr = render(toks, &mut uf)?;
            let idx = match essentials.iter().position(|x| *x == expr) {
                Some(i) => i,
                None => {
                    essentials.push(expr);
                    essentials.len() - 1
                }
            };
            essential_index.push(idx);
        }

        let mut proof = Vec::with_capacity(order.len());
        for &id in &order {
            let label = match &roles[&id] {
                Role::Step => ProofLabel::Label(tree.nodes[id].label.clone()),
                Role::Essential(k) => ProofLabel::Essential(essential_index[*k]),
                Role::Var(v) => {
                    let r = uf.find(*v);
                    match uf.constant[r] {
                        Some(c) => ProofLabel::Label(self.nullary_syntax[&(uf.typecode[r], c)].clone()),
                        None => ProofLabel::Label(names[&r].1.clone()),
                    }
                }
            };
            proof.push(label);
        }
        Ok(StandardizedCandidate {
            essentials,
            conclusion,
            proof,
            steps,
            internal_steps,
        })
    }

    fn apply_step(
        &self,
        a: &Assertion,
        parents: &[usize],
        values: &mut HashMap<usize, Vec<Tok>>,
        roles: &HashMap<usize, Role>,
        essential_exprs: &mut [Option<Vec<Tok>>],
        uf: &mut Unifier,
    ) -> Result<Vec<Tok>, StandardizeError> {
        let fail = |msg: String| StandardizeError::NoValidSubstitution(msg);
        if parents.len() != a.frame.arity() {
            return Err(fail(format!("`{}` applied to {} arguments", a.label, parents.len())));
        }
        let mut subst: HashMap<Sym, Vec<Tok>> = HashMap::new();
        for (hyp, p) in a.frame.hypotheses.iter().zip(parents) {
            if hyp.kind == HypKind::Floating {
                let v = values
                    .get(p)
                    .ok_or_else(|| fail(format!("`{}` needs a syntax argument", a.label)))?;
                if v[0] != Tok::C(hyp.typecode()) {
                    return Err(fail(format!("typecode mismatch in `{}`", a.label)));
                }
                subst.insert(hyp.expr[1], v[1..].to_vec());
            }
        }
        let apply = |expr: &[Sym]| -> Vec<Tok> {
            let mut out = vec![Tok::C(expr[0])];
            for s in &expr[1..] {
                match subst.get(s) {
                    Some(v) => out.extend_from_slice(v),
                    None => out.push(Tok::C(*s)),
                }
            }
            out
        };
        for (hyp, p) in a.frame.hypotheses.iter().zip(parents) {
            if hyp.kind != HypKind::Essential {
                continue;
            }
            let want = apply(&hyp.expr);
            if let Some(have) = values.get(p) {
                let have = have.clone();
                self.unify(&have, &want, uf).map_err(|m| fail(format!("`{}`: {m}", a.label)))?;
            } else if let Some(Role::Essential(k)) = roles.get(p) {
                essential_exprs[*k] = Some(want.clone());
                values.insert(*p, want);
            } else {
                return Err(fail(format!("`{}` has an unresolved argument", a.label)));
            }
        }
        Ok(apply(&a.expr))
    }

    fn unify(&self, x: &[Tok], y: &[Tok], uf: &mut Unifier) -> Result<(), String> {
        if x.len() != y.len() {
            return Err("statement shapes differ".into());
        }
        for (&a, &b) in x.iter().zip(y) {
            let (a, b) = (uf.resolve(a), uf.resolve(b));
            match (a, b) {
                (Tok::C(p), Tok::C(q)) => {
                    if p != q {
                        return Err(format!(
                            "`{}` cannot match `{}`",
                            self.db.symbol_name(p),
                            self.db.symbol_name(q)
                        ));
                    }
                }
                (Tok::V(u), Tok::V(v)) => {
                    if u != v {
                        if uf.typecode[u] != uf.typecode[v] {
                            return Err("variables of different typecodes".into());
                        }
                        uf.parent[u] = v;
                    }
                }
                (Tok::V(v), Tok::C(c)) | (Tok::C(c), Tok::V(v)) => {
                    if !self.nullary_syntax.contains_key(&(uf.typecode[v], c)) {
                        return Err(format!(
                            "argument would need internal structure at `{}`",
                            self.db.symbol_name(c)
                        ));
                    }
                    uf.constant[v] = Some(c);
                }
            }
        }
        Ok(())
    }
}

/// A standalone theorem produced from a selection (or read back from a
/// fragment file).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedTheorem {
    pub name: String,
    /// Mandatory hypotheses: floats of the statement's variables, then the
    /// essential hypotheses.
    pub hypotheses: Vec<Hypothesis>,
    /// Every `$d` pair the proof needs, including pairs on dummy variables.
    pub disjoint: BTreeSet<(Sym, Sym)>,
    pub conclusion: Expr,
    pub proof: Vec<String>,
    pub dedup_key: String,
}

impl ExtractedTheorem {
    pub fn essentials(&self) -> impl Iterator<Item = &Hypothesis> {
        self.hypotheses.iter().filter(|h| h.kind == HypKind::Essential)
    }

    /// Frame to replay the proof under, with every top-level float available
    /// for dummy variables.
    pub fn frame(&self, db: &Database) -> Frame {
        let mandatory: HashSet<Sym> = self.hypotheses.iter().filter_map(|h| h.variable()).collect();
        let (disjoint, optional_disjoint) = self
            .disjoint
            .iter()
            .partition(|(a, b)| mandatory.contains(a) && mandatory.contains(b));
        let optional_floats = db
            .all_global_floats()
            .into_iter()
            .filter(|f| !self.hypotheses.iter().any(|h| h.label == f.label))
            .collect();
        Frame {
            hypotheses: self.hypotheses.clone(),
            disjoint,
            optional_floats,
            optional_disjoint,
        }
    }

    pub fn verify(&self, db: &Database) -> Result<crate::verify::VerifiedTrace, VerifyError> {
        let frame = self.frame(db);
        Replay::new(db, &frame).verify(&self.conclusion, &self.proof)
    }

    /// Views a database assertion as an extracted theorem.
    pub fn from_assertion(db: &Database, a: &Assertion) -> ExtractedTheorem {
        let essentials: Vec<Expr> = a
            .frame
            .hypotheses
            .iter()
            .filter(|h| h.kind == HypKind::Essential)
            .map(|h| h.expr.clone())
            .collect();
        ExtractedTheorem {
            name: a.label.clone(),
            hypotheses: a.frame.hypotheses.clone(),
            disjoint: a.frame.disjoint.iter().chain(&a.frame.optional_disjoint).copied().collect(),
            conclusion: a.expr.clone(),
            proof: a.proof.clone(),
            dedup_key: dedup_key(db, &essentials, &a.expr),
        }
    }

    /// The theorem as a `${ ... $}` block.
    pub fn to_mm(&self, db: &Database) -> String {
        let mut out = String::from("${\n");
        for (a, b) in &self.disjoint {
            out.push_str(&format!("  $d {} {} $.\n", db.symbol_name(*a), db.symbol_name(*b)));
        }
        for h in self.essentials() {
            out.push_str(&format!("  {} $e {} $.\n", h.label, db.render(&h.expr)));
        }
        out.push_str(&format!("  {} $p {} $=\n", self.name, db.render(&self.conclusion)));
        crate::database::write_wrapped_proof(&mut out, "  ", &self.proof);
        out.push_str("$}\n");
        out
    }
}

/// Rename-invariant key of a statement (essential hypotheses and
/// conclusion). Variables are numbered by first appearance in the
/// conclusion, then in the hypotheses taken smallest shape first, where a
/// shape shows unnumbered variables as `$?`. Ties between equal shapes are
/// explored and the smallest resulting key wins.
pub fn dedup_key(db: &Database, essentials: &[Expr], conclusion: &[Sym]) -> String {
    let mut names: HashMap<Sym, usize> = HashMap::new();
    number_variables(db, conclusion, &mut names);
    let mut budget = KEY_SEARCH_BUDGET;
    let refs: Vec<&Expr> = essentials.iter().collect();
    canonical_key(db, conclusion, &refs, &refs, names, &mut budget)
}

/// Bound on the tie-breaking search; past it the first tie is taken.
const KEY_SEARCH_BUDGET: usize = 4096;

fn number_variables(db: &Database, e: &[Sym], names: &mut HashMap<Sym, usize>) {
    for &s in &e[1..] {
        if db.is_variable(s) && !names.contains_key(&s) {
            let n = names.len();
            names.insert(s, n);
        }
    }
}

fn render_numbered(db: &Database, e: &[Sym], names: &HashMap<Sym, usize>) -> String {
    let mut parts = vec![db.symbol_name(e[0]).to_string()];
    for &s in &e[1..] {
        if db.is_variable(s) {
            match names.get(&s) {
                Some(n) => parts.push(format!("${n}")),
                None => parts.push("$?".into()),
            }
        } else {
            parts.push(db.symbol_name(s).to_string());
        }
    }
    parts.join(" ")
}

fn canonical_key(
    db: &Database,
    conclusion: &[Sym],
    all: &[&Expr],
    remaining: &[&Expr],
    names: HashMap<Sym, usize>,
    budget: &mut usize,
) -> String {
    if remaining.is_empty() {
        return finish_key(db, conclusion, all, &names);
    }
    let shapes: Vec<String> = remaining.iter().map(|e| render_numbered(db, e, &names)).collect();
    let least = shapes.iter().min().expect("nonempty").clone();
    let ties: Vec<usize> = (0..remaining.len()).filter(|&i| shapes[i] == least).collect();
    // Hypotheses whose variables are all numbered cannot affect numbering.
    let settled = !least.contains("$?");
    let branches = if settled || *budget == 0 { &ties[..1] } else { &ties[..] };
    let mut best: Option<String> = None;
    for &i in branches {
        *budget = budget.saturating_sub(1);
        let mut names = names.clone();
        number_variables(db, remaining[i], &mut names);
        let rest: Vec<&Expr> = remaining
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .map(|(_, e)| *e)
            .collect();
        let key = canonical_key(db, conclusion, all, &rest, names, budget);
        if best.as_ref().is_none_or(|b| key < *b) {
            best = Some(key);
        }
    }
    best.expect("at least one branch")
}

fn finish_key(db: &Database, conclusion: &[Sym], all: &[&Expr], names: &HashMap<Sym, usize>) -> String {
    let mut rendered: Vec<String> = all.iter().map(|e| render_numbered(db, e, names)).collect();
    rendered.sort();
    rendered.dedup();
    // Variable typecodes are part of the statement's identity.
    let mut typed: Vec<(usize, &str)> = names.iter().map(|(s, n)| (*n, type_of_variable(db, *s))).collect();
    typed.sort();
    let types: Vec<String> = typed.iter().map(|(n, t)| format!("${n}:{t}")).collect();
    format!(
        "{} |= {} :: {}",
        rendered.join(" & "),
        render_numbered(db, conclusion, names),
        types.join(" ")
    )
}

fn type_of_variable(db: &Database, var: Sym) -> &str {
    db.variable_typecode(var).map(|t| db.symbol_name(t)).unwrap_or("?")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    NotTreeInvalid,
    TreeInvalid,
    TreeValid,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::NotTreeInvalid, Category::TreeInvalid, Category::TreeValid];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::NotTreeInvalid => "not_tree_invalid",
            Category::TreeInvalid => "tree_invalid",
            Category::TreeValid => "tree_valid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionVerdict {
    pub category: Category,
    pub reason: Option<String>,
    pub theorem: Option<ExtractedTheorem>,
}

impl ExtractionVerdict {
    fn invalid(category: Category, reason: impl Into<String>) -> Self {
        ExtractionVerdict {
            category,
            reason: Some(reason.into()),
            theorem: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtractionOptions {
    /// Reject selections covering the whole proof. Set when the tree is an
    /// unexpanded library proof, where such a selection only restates the
    /// theorem.
    pub reject_whole_tree: bool,
}

impl Extractor<'_> {
    /// Classifies a node selection and, when valid, builds its theorem.
    pub fn verify_selection(&self, tree: &ProofTree, selected: &[bool], opts: ExtractionOptions) -> ExtractionVerdict {
        match check_structure(tree, selected) {
            Structure::NotTree => {
                return ExtractionVerdict::invalid(Category::NotTreeInvalid, "selection is not a connected subtree")
            }
            Structure::IncompleteArguments => {
                return ExtractionVerdict::invalid(Category::TreeInvalid, "incomplete arguments")
            }
            Structure::Ok => {}
        }
        if opts.reject_whole_tree && selected.iter().all(|s| *s) {
            return ExtractionVerdict::invalid(Category::TreeInvalid, "selection is the whole proof");
        }
        let cand = match self.standardize(tree, selected) {
            Ok(c) => c,
            Err(e) => return ExtractionVerdict::invalid(Category::TreeInvalid, e.to_string()),
        };
        if cand.internal_steps == 0 {
            return ExtractionVerdict::invalid(Category::TreeInvalid, "selection contains no inference step");
        }
        match self.build_theorem(&cand) {
            Ok(t) => ExtractionVerdict {
                category: Category::TreeValid,
                reason: None,
                theorem: Some(t),
            },
            Err(e) => ExtractionVerdict::invalid(Category::TreeInvalid, format!("standardized proof fails: {e}")),
        }
    }

    /// Thresholds `mask` and classifies the resulting selection.
    pub fn verify_extraction(
        &self,
        tree: &ProofTree,
        mask: &PredictionMask,
        opts: ExtractionOptions,
    ) -> Result<ExtractionVerdict, MaskError> {
        let selected = threshold_mask(mask, tree.len())?;
        Ok(self.verify_selection(tree, &selected, opts))
    }

    /// Names, frames and verifies a standardized candidate.
    pub fn build_theorem(&self, cand: &StandardizedCandidate) -> Result<ExtractedTheorem, VerifyError> {
        let db = self.db;
        let key = dedup_key(db, &cand.essentials, &cand.conclusion);
        let digest = hex::encode(Sha256::digest(key.as_bytes()));
        let name = format!("rf_{}", &digest[..8]);

        let mut vars: BTreeSet<Sym> = BTreeSet::new();
        for e in cand.essentials.iter().chain(std::iter::once(&cand.conclusion)) {
            vars.extend(e[1..].iter().copied().filter(|s| db.is_variable(*s)));
        }
        let mut floats: Vec<(usize, Hypothesis)> = Vec::new();
        for (i, h) in db.hypotheses().iter().enumerate() {
            if let Some(v) = h.variable() {
                if vars.contains(&v) && self.global_floats.iter().any(|g| g.label == h.label) {
                    floats.push((i, h.clone()));
                }
            }
        }
        floats.sort_by_key(|(i, _)| *i);
        let mut hypotheses: Vec<Hypothesis> = floats.into_iter().map(|(_, h)| h).collect();
        for (k, e) in cand.essentials.iter().enumerate() {
            hypotheses.push(Hypothesis {
                label: format!("{name}.{}", k + 1),
                kind: HypKind::Essential,
                expr: e.clone(),
            });
        }
        let proof: Vec<String> = cand
            .proof
            .iter()
            .map(|l| match l {
                ProofLabel::Label(s) => s.clone(),
                ProofLabel::Essential(k) => format!("{name}.{}", k + 1),
            })
            .collect();
        let mut theorem = ExtractedTheorem {
            name,
            hypotheses,
            disjoint: BTreeSet::new(),
            conclusion: cand.conclusion.clone(),
            proof,
            dedup_key: key,
        };
        let frame = theorem.frame(db);
        let collected = Replay {
            disjoint: DisjointMode::Collect,
            ..Replay::new(db, &frame)
        }
        .verify(&theorem.conclusion, &theorem.proof)?;
        theorem.disjoint = collected
            .required_disjoint
            .iter()
            .map(|(a, b)| dv_pair(*a, *b))
            .collect();
        theorem.verify(db)?;
        Ok(theorem)
    }
}

/// Convenience wrapper building a fresh [`Extractor`].
pub fn verify_extraction(
    db: &Database,
    tree: &ProofTree,
    mask: &PredictionMask,
    opts: ExtractionOptions,
) -> Result<ExtractionVerdict, MaskError> {
    Extractor::new(db).verify_extraction(tree, mask, opts)
}

/// Keeps the first theorem of every dedup key, in input order.
pub fn dedup(theorems: Vec<ExtractedTheorem>) -> Vec<ExtractedTheorem> {
    let mut seen = HashSet::new();
    theorems.into_iter().filter(|t| seen.insert(t.dedup_key.clone())).collect()
}

/// Dedup key of every non-syntax assertion of the database, first label per key.
pub fn library_keys(db: &Database) -> HashMap<String, String> {
    let mut out = HashMap::new();
    for a in db.assertions().iter().filter(|a| !db.is_syntax_typecode(a.typecode())) {
        let t = ExtractedTheorem::from_assertion(db, a);
        out.entry(t.dedup_key).or_insert(t.name);
    }
    out
}

/// Writes theorems as a Metamath fragment that continues `db`.
pub fn write_fragment(db: &Database, theorems: &[ExtractedTheorem]) -> String {
    theorems.iter().map(|t| t.to_mm(db)).collect::<Vec<_>>().join("")
}

#[derive(Debug, Error)]
pub enum FragmentError {
    #[error(transparent)]
    Parse(#[from] crate::database::ParseError),
    #[error("fragment declares new symbols")]
    NewSymbols,
}

/// Reads the theorems of a fragment written by [`write_fragment`].
pub fn read_fragment(db: &Database, source: &str) -> Result<Vec<ExtractedTheorem>, FragmentError> {
    let cont = db.parse_continuation(source)?;
    let known = |e: &[Sym]| e.iter().all(|s| db.symbol_count() > s.0 as usize);
    let mut out = Vec::new();
    for a in cont.assertions_after(db.assertions().len()) {
        if !known(&a.expr) || a.frame.hypotheses.iter().any(|h| !known(&h.expr)) {
            return Err(FragmentError::NewSymbols);
        }
        out.push(ExtractedTheorem::from_assertion(db, a));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::PROP_MM;
    use crate::tree::build_tree;

    // a1i: 0 wph, 1 wps, 2 wph, 3 wi, 4 a1i.1, 5 wph, 6 wps, 7 ax-1, 8 ax-mp
    fn a1i() -> (Database, ProofTree) {
        let db = Database::parse(PROP_MM).unwrap();
        let tree = build_tree(&db, db.assertion("a1i").unwrap()).unwrap();
        (db, tree)
    }

    fn select(n: usize, ids: &[usize]) -> Vec<bool> {
        (0..n).map(|i| ids.contains(&i)).collect()
    }

    fn verdict(db: &Database, tree: &ProofTree, ids: &[usize]) -> ExtractionVerdict {
        Extractor::new(db).verify_selection(tree, &select(tree.len(), ids), ExtractionOptions::default())
    }

    #[test]
    fn structure_classes() {
        let (_, t) = a1i();
        assert_eq!(check_structure(&t, &select(9, &[])), Structure::NotTree);
        assert_eq!(check_structure(&t, &select(9, &[0, 4])), Structure::NotTree);
        assert_eq!(check_structure(&t, &select(8, &[8])), Structure::NotTree);
        assert_eq!(check_structure(&t, &select(9, &[8, 0, 4])), Structure::IncompleteArguments);
        assert_eq!(check_structure(&t, &select(9, &[8, 0, 3, 4, 7])), Structure::Ok);
        assert_eq!(check_structure(&t, &select(9, &[3])), Structure::Ok);
    }

    #[test]
    fn threshold_is_strict() {
        let m = PredictionMask::new("g", vec![0.5, 0.500001, 0.2]);
        assert_eq!(threshold_mask(&m, 3).unwrap(), vec![false, true, false]);
        assert_eq!(
            threshold_mask(&m, 4),
            Err(MaskError::LengthMismatch { graph_id: "g".into(), expected: 4, found: 3 })
        );
    }

    #[test]
    fn modus_ponens_is_recovered_from_the_root_step() {
        let (db, t) = a1i();
        let v = verdict(&db, &t, &[8, 0, 3, 4, 7]);
        assert_eq!(v.category, Category::TreeValid, "{:?}", v.reason);
        let th = v.theorem.unwrap();
        let mp = ExtractedTheorem::from_assertion(&db, db.assertion("ax-mp").unwrap());
        assert_eq!(th.dedup_key, mp.dedup_key);
        assert!(th.verify(&db).is_ok());
    }

    #[test]
    fn whole_proof_restates_the_theorem_unless_rejected() {
        let (db, t) = a1i();
        let all: Vec<usize> = (0..9).collect();
        let v = verdict(&db, &t, &all);
        let own = ExtractedTheorem::from_assertion(&db, db.assertion("a1i").unwrap());
        assert_eq!(v.theorem.unwrap().dedup_key, own.dedup_key);
        let rejected = Extractor::new(&db).verify_selection(
            &t,
            &select(9, &all),
            ExtractionOptions { reject_whole_tree: true },
        );
        assert_eq!(rejected.category, Category::TreeInvalid);
    }

    #[test]
    fn variable_cannot_stand_for_a_compound_term() {
        // The cut `wi` node becomes a variable, but the selected `ax-1` step
        // forces it to be an implication.
        let (db, t) = a1i();
        let v = verdict(&db, &t, &[8, 0, 3, 4, 7, 5, 6]);
        assert_eq!(v.category, Category::TreeInvalid);
        assert!(v.reason.unwrap().contains("substitution"));
        let cand = Extractor::new(&db).standardize(&t, &select(9, &[8, 0, 3, 4, 7, 5, 6]));
        assert!(matches!(cand, Err(StandardizeError::NoValidSubstitution(_))));
    }

    #[test]
    fn selections_without_steps_are_invalid() {
        let (db, t) = a1i();
        assert_eq!(verdict(&db, &t, &[4]).category, Category::TreeInvalid);
        assert_eq!(verdict(&db, &t, &[7]).category, Category::TreeInvalid);
        assert_eq!(verdict(&db, &t, &[0, 4]).category, Category::NotTreeInvalid);
        assert_eq!(verdict(&db, &t, &[8, 4]).category, Category::TreeInvalid);
    }

    #[test]
    fn variables_bind_to_nullary_constants() {
        let db = Database::parse(
            "$c ( ) -> wff |- T. $. $v ph ps $.
             wph $f wff ph $. wps $f wff ps $.
             wi $a wff ( ph -> ps ) $. wt $a wff T. $.
             ${ min $e |- ph $. maj $e |- ( ph -> ps ) $. ax-mp $a |- ps $. $}
             ax-t $a |- T. $.
             ${ t1.1 $e |- ( T. -> ph ) $. t1 $p |- ph $= wt wph ax-t t1.1 ax-mp $. $}",
        )
        .unwrap();
        let t = build_tree(&db, db.assertion("t1").unwrap()).unwrap();
        let v = verdict(&db, &t, &[0, 1, 2, 3, 4]);
        let th = v.theorem.expect("valid");
        let hyps: Vec<String> = th.essentials().map(|h| db.render(&h.expr)).collect();
        assert_eq!(hyps, ["|- ( T. -> ph )"]);
        assert_eq!(db.render(&th.conclusion), "|- ph");
        assert!(th.proof.iter().any(|l| l == "wt"));
    }

    #[test]
    fn dedup_key_ignores_names_and_hypothesis_order() {
        let db = Database::parse(PROP_MM).unwrap();
        let e = |s: &str| db.tokenize(s).unwrap();
        let a = dedup_key(&db, &[e("|- ph"), e("|- ( ph -> ps )")], &e("|- ps"));
        let b = dedup_key(&db, &[e("|- ( ch -> th )"), e("|- ch")], &e("|- th"));
        let c = dedup_key(&db, &[e("|- ( ch -> th )"), e("|- th")], &e("|- th"));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(dedup_key(&db, &[e("|- ph"), e("|- ph")], &e("|- ph")), dedup_key(&db, &[e("|- ps")], &e("|- ps")));
    }

    #[test]
    fn fragments_round_trip() {
        let (db, t) = a1i();
        let th = verdict(&db, &t, &[8, 0, 3, 4, 7]).theorem.unwrap();
        let text = write_fragment(&db, std::slice::from_ref(&th));
        let back = read_fragment(&db, &text).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].dedup_key, th.dedup_key);
        assert_eq!(back[0].name, th.name);
        assert!(matches!(
            read_fragment(&db, "$c new $. ${ x $p |- new $= ? $. $}"),
            Err(FragmentError::NewSymbols) | Err(FragmentError::Parse(_))
        ));
    }
}
