//! Deterministic generator of propositional theorems on top of the bundled
//! implication/negation fragment.
//!
//! Each generated theorem is derived top-down: a random rule with a random
//! substitution gives the conclusion, and every premise is either proved by
//! another rule whose conclusion matches it or left as a hypothesis.
//! Generated theorems join the rule pool, so later proofs use earlier ones.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::database::{Database, HypKind, Sym};

/// The bundled propositional fragment.
pub const PROP_MM: &str = include_str!("../data/prop.mm");

/// [`PROP_MM`] extended with [`CORPUS_THEOREMS`] generated theorems, as
/// produced by `corpus(CORPUS_THEOREMS, CORPUS_SEED)`.
pub const CORPUS_MM: &str = include_str!("../data/corpus.mm");
pub const CORPUS_THEOREMS: usize = 600;
pub const CORPUS_SEED: u64 = 7;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("base database is missing `{0}`")]
    Missing(&'static str),
    #[error(transparent)]
    Parse(#[from] crate::database::ParseError),
    #[error("gave up after {attempts} attempts with {made} theorems")]
    Exhausted { attempts: usize, made: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Wff {
    Var(usize),
    Not(Box<Wff>),
    Imp(Box<Wff>, Box<Wff>),
}

impl Wff {
    fn size(&self) -> usize {
        match self {
            Wff::Var(_) => 1,
            Wff::Not(a) => 1 + a.size(),
            Wff::Imp(a, b) => 1 + a.size() + b.size(),
        }
    }
}

enum Slot {
    Float(usize),
    Essential(Wff),
}

struct Rule {
    label: String,
    slots: Vec<Slot>,
    conclusion: Wff,
}

impl Rule {
    fn essentials(&self) -> impl Iterator<Item = &Wff> {
        self.slots.iter().filter_map(|s| match s {
            Slot::Essential(w) => Some(w),
            Slot::Float(_) => None,
        })
    }
}

enum Derivation {
    Hyp,
    Apply {
        rule: usize,
        subst: HashMap<usize, Wff>,
        premises: Vec<Derivation>,
    },
}

impl Derivation {
    fn applications(&self) -> usize {
        match self {
            Derivation::Hyp => 0,
            Derivation::Apply { premises, .. } => 1 + premises.iter().map(|p| p.applications()).sum::<usize>(),
        }
    }
}

struct Syntax {
    vars: Vec<(String, String)>,
    imp: Sym,
    not: Sym,
    open: Sym,
    close: Sym,
    index: HashMap<Sym, usize>,
}

impl Syntax {
    fn parse(&self, expr: &[Sym]) -> Option<Wff> {
        let mut pos = 0;
        let w = self.parse_at(expr, &mut pos)?;
        (pos == expr.len()).then_some(w)
    }

    fn parse_at(&self, expr: &[Sym], pos: &mut usize) -> Option<Wff> {
        let s = *expr.get(*pos)?;
        *pos += 1;
        if let Some(&v) = self.index.get(&s) {
            Some(Wff::Var(v))
        } else if s == self.not {
            Some(Wff::Not(Box::new(self.parse_at(expr, pos)?)))
        } else if s == self.open {
            let a = self.parse_at(expr, pos)?;
            if expr.get(*pos) != Some(&self.imp) {
                return None;
            }
            *pos += 1;
            let b = self.parse_at(expr, pos)?;
            if expr.get(*pos) != Some(&self.close) {
                return None;
            }
            *pos += 1;
            Some(Wff::Imp(Box::new(a), Box::new(b)))
        } else {
            None
        }
    }

    fn render(&self, w: &Wff, out: &mut String) {
        match w {
            Wff::Var(v) => out.push_str(&self.vars[*v].0),
            Wff::Not(a) => {
                out.push_str("-. ");
                self.render(a, out);
            }
            Wff::Imp(a, b) => {
                out.push_str("( ");
                self.render(a, out);
                out.push_str(" -> ");
                self.render(b, out);
                out.push_str(" )");
            }
        }
    }

    fn text(&self, w: &Wff) -> String {
        let mut s = String::new();
        self.render(w, &mut s);
        s
    }

    fn proof(&self, w: &Wff, out: &mut Vec<String>) {
        match w {
            Wff::Var(v) => out.push(self.vars[*v].1.clone()),
            Wff::Not(a) => {
                self.proof(a, out);
                out.push("wn".into());
            }
            Wff::Imp(a, b) => {
                self.proof(a, out);
                self.proof(b, out);
                out.push("wi".into());
            }
        }
    }
}

fn matches(pattern: &Wff, w: &Wff, subst: &mut HashMap<usize, Wff>) -> bool {
    match (pattern, w) {
        (Wff::Var(v), _) => match subst.get(v) {
            Some(bound) => bound == w,
            None => {
                subst.insert(*v, w.clone());
                true
            }
        },
        (Wff::Not(a), Wff::Not(b)) => matches(a, b, subst),
        (Wff::Imp(a1, a2), Wff::Imp(b1, b2)) => matches(a1, b1, subst) && matches(a2, b2, subst),
        _ => false,
    }
}

fn apply(pattern: &Wff, subst: &HashMap<usize, Wff>) -> Wff {
    match pattern {
        Wff::Var(v) => subst[v].clone(),
        Wff::Not(a) => Wff::Not(Box::new(apply(a, subst))),
        Wff::Imp(a, b) => Wff::Imp(Box::new(apply(a, subst)), Box::new(apply(b, subst))),
    }
}

struct Generator {
    syntax: Syntax,
    rules: Vec<Rule>,
    rng: ChaCha8Rng,
}

const MAX_DEPTH: usize = 3;
/// Random formulas use only this many variables; the rest of the pool is
/// left for generalized statements.
const RANDOM_VARS: usize = 5;
const MAX_PROOF_LEN: usize = 400;

impl Generator {
    fn random_wff(&mut self, depth: usize) -> Wff {
        let n = self.syntax.vars.len().min(RANDOM_VARS);
        if depth == 0 || self.rng.random_bool(0.5) {
            Wff::Var(self.rng.random_range(0..n))
        } else if self.rng.random_bool(0.25) {
            Wff::Not(Box::new(self.random_wff(depth - 1)))
        } else {
            Wff::Imp(Box::new(self.random_wff(depth - 1)), Box::new(self.random_wff(depth - 1)))
        }
    }

    fn complete(&mut self, rule: usize, subst: &mut HashMap<usize, Wff>) {
        let vars: Vec<usize> = self.rules[rule]
            .slots
            .iter()
            .filter_map(|s| match s {
                Slot::Float(v) => Some(*v),
                Slot::Essential(_) => None,
            })
            .collect();
        for v in vars {
            subst.entry(v).or_insert_with(|| self.random_wff(1));
        }
    }

    fn premises(&mut self, rule: usize, subst: &HashMap<usize, Wff>, depth: usize) -> Vec<Derivation> {
        let goals: Vec<Wff> = self.rules[rule].essentials().map(|e| apply(e, subst)).collect();
        goals.into_iter().map(|g| self.derive(g, depth)).collect()
    }

    fn derive(&mut self, goal: Wff, depth: usize) -> Derivation {
        if depth >= MAX_DEPTH || goal.size() > 25 || self.rng.random_bool(0.35) {
            return Derivation::Hyp;
        }
        let mut candidates: Vec<(usize, HashMap<usize, Wff>)> = Vec::new();
        for (i, r) in self.rules.iter().enumerate() {
            let mut subst = HashMap::new();
            if !r.slots.is_empty() && matches(&r.conclusion, &goal, &mut subst) {
                candidates.push((i, subst));
            }
        }
        // Bare `|- ph` style rules match anything and teach nothing.
        candidates.retain(|(i, _)| !matches!(self.rules[*i].conclusion, Wff::Var(_)));
        if candidates.is_empty() {
            return Derivation::Hyp;
        }
        let k = self.rng.random_range(0..candidates.len());
        let (rule, mut subst) = candidates.swap_remove(k);
        self.complete(rule, &mut subst);
        let premises = self.premises(rule, &subst, depth + 1);
        Derivation::Apply { rule, subst, premises }
    }
}

/// Formulas over metavariables, used to find the most general statement a
/// derivation proves.
#[derive(Debug, Clone)]
enum Term {
    Meta(usize),
    Not(Rc<Term>),
    Imp(Rc<Term>, Rc<Term>),
}

#[derive(Default)]
struct Metas {
    binding: Vec<Option<Term>>,
}

impl Metas {
    fn fresh(&mut self) -> Term {
        self.binding.push(None);
        Term::Meta(self.binding.len() - 1)
    }

    fn walk(&self, t: &Term) -> Term {
        let mut t = t.clone();
        while let Term::Meta(m) = t {
            match &self.binding[m] {
                Some(b) => t = b.clone(),
                None => break,
            }
        }
        t
    }

    fn resolve(&self, t: &Term) -> Term {
        match self.walk(t) {
            Term::Meta(m) => Term::Meta(m),
            Term::Not(a) => Term::Not(Rc::new(self.resolve(&a))),
            Term::Imp(a, b) => Term::Imp(Rc::new(self.resolve(&a)), Rc::new(self.resolve(&b))),
        }
    }

    fn occurs(&self, m: usize, t: &Term) -> bool {
        match self.walk(t) {
            Term::Meta(x) => x == m,
            Term::Not(a) => self.occurs(m, &a),
            Term::Imp(a, b) => self.occurs(m, &a) || self.occurs(m, &b),
        }
    }

    fn unify(&mut self, a: &Term, b: &Term) -> bool {
        match (self.walk(a), self.walk(b)) {
            (Term::Meta(x), Term::Meta(y)) if x == y => true,
            (Term::Meta(x), t) | (t, Term::Meta(x)) => {
                if self.occurs(x, &t) {
                    return false;
                }
                self.binding[x] = Some(t);
                true
            }
            (Term::Not(p), Term::Not(q)) => self.unify(&p, &q),
            (Term::Imp(p1, p2), Term::Imp(q1, q2)) => self.unify(&p1, &q1) && self.unify(&p2, &q2),
            _ => false,
        }
    }
}

fn instantiate(pattern: &Wff, subst: &HashMap<usize, Term>) -> Term {
    match pattern {
        Wff::Var(v) => subst[v].clone(),
        Wff::Not(a) => Term::Not(Rc::new(instantiate(a, subst))),
        Wff::Imp(a, b) => Term::Imp(Rc::new(instantiate(a, subst)), Rc::new(instantiate(b, subst))),
    }
}

enum Step {
    Label(String),
    /// A syntax leaf; emitted as the proof of whatever it resolves to.
    Leaf(Term),
    Hyp(usize),
}

/// A derivation restated in its most general form.
struct General {
    hypotheses: Vec<Wff>,
    conclusion: Wff,
    proof: Vec<String>,
}

impl Generator {
    fn leaf_term(&self, w: &Wff, metas: &mut Metas, out: &mut Vec<Step>) -> Term {
        match w {
            Wff::Var(_) => {
                let m = metas.fresh();
                out.push(Step::Leaf(m.clone()));
                m
            }
            Wff::Not(a) => {
                let a = self.leaf_term(a, metas, out);
                out.push(Step::Label("wn".into()));
                Term::Not(Rc::new(a))
            }
            Wff::Imp(a, b) => {
                let a = self.leaf_term(a, metas, out);
                let b = self.leaf_term(b, metas, out);
                out.push(Step::Label("wi".into()));
                Term::Imp(Rc::new(a), Rc::new(b))
            }
        }
    }

    fn schema(&self, d: &Derivation, metas: &mut Metas, hyps: &mut Vec<Term>, out: &mut Vec<Step>) -> Option<Term> {
        match d {
            Derivation::Hyp => {
                let m = metas.fresh();
                hyps.push(m.clone());
                out.push(Step::Hyp(hyps.len() - 1));
                Some(m)
            }
            Derivation::Apply { rule, subst, premises } => {
                let r = &self.rules[*rule];
                let mut sigma: HashMap<usize, Term> = HashMap::new();
                let mut proved = Vec::new();
                let mut next = premises.iter();
                for s in &r.slots {
                    match s {
                        Slot::Float(v) => {
                            let t = self.leaf_term(&subst[v], metas, out);
                            sigma.insert(*v, t);
                        }
                        Slot::Essential(e) => {
                            let t = self.schema(next.next()?, metas, hyps, out)?;
                            proved.push((e, t));
                        }
                    }
                }
                for (e, t) in proved {
                    let want = instantiate(e, &sigma);
                    if !metas.unify(&t, &want) {
                        return None;
                    }
                }
                out.push(Step::Label(r.label.clone()));
                Some(instantiate(&r.conclusion, &sigma))
            }
        }
    }

    /// The most general statement the derivation's rule structure proves,
    /// over at most the whole variable pool.
    fn generalize(&self, d: &Derivation) -> Option<General> {
        let mut metas = Metas::default();
        let mut hyps = Vec::new();
        let mut steps = Vec::new();
        let conclusion = self.schema(d, &mut metas, &mut hyps, &mut steps)?;
        let conclusion = metas.resolve(&conclusion);
        let hyps: Vec<Term> = hyps.iter().map(|h| metas.resolve(h)).collect();
        let mut names: HashMap<usize, usize> = HashMap::new();
        let to_wff = |t: &Term, names: &mut HashMap<usize, usize>| -> Wff { name_term(t, names) };
        let conclusion = to_wff(&conclusion, &mut names);
        let hyp_wffs: Vec<Wff> = hyps.iter().map(|h| to_wff(h, &mut names)).collect();
        let mut proof = Vec::new();
        let mut distinct: Vec<Wff> = Vec::new();
        let mut hyp_index = Vec::new();
        for w in &hyp_wffs {
            match distinct.iter().position(|x| x == w) {
                Some(i) => hyp_index.push(i),
                None => {
                    distinct.push(w.clone());
                    hyp_index.push(distinct.len() - 1);
                }
            }
        }
        let leaves: Vec<Option<Wff>> = steps
            .iter()
            .map(|s| match s {
                Step::Leaf(t) => Some(to_wff(&metas.resolve(t), &mut names)),
                _ => None,
            })
            .collect();
        if names.len() > self.syntax.vars.len() {
            return None;
        }
        for (s, leaf) in steps.iter().zip(&leaves) {
            match s {
                Step::Label(l) => proof.push(l.clone()),
                Step::Hyp(i) => proof.push(format!("#{}", hyp_index[*i])),
                Step::Leaf(_) => self.syntax.proof(leaf.as_ref().expect("named above"), &mut proof),
            }
        }
        Some(General {
            hypotheses: distinct,
            conclusion,
            proof,
        })
    }
}

/// Names metavariables by first appearance.
fn name_term(t: &Term, names: &mut HashMap<usize, usize>) -> Wff {
    match t {
        Term::Meta(m) => {
            let n = names.len();
            Wff::Var(*names.entry(*m).or_insert(n))
        }
        Term::Not(a) => Wff::Not(Box::new(name_term(a, names))),
        Term::Imp(a, b) => Wff::Imp(Box::new(name_term(a, names)), Box::new(name_term(b, names))),
    }
}

fn load(db: &Database) -> Result<Generator, SynthError> {
    let sym = |name: &'static str| db.symbol(name).ok_or(SynthError::Missing(name));
    let wff = sym("wff")?;
    let turnstile = sym("|-")?;
    if db.assertion("wi").is_none() {
        return Err(SynthError::Missing("wi"));
    }
    if db.assertion("wn").is_none() {
        return Err(SynthError::Missing("wn"));
    }
    let vars: Vec<(String, String)> = db
        .global_floats(wff)
        .iter()
        .map(|(v, h)| (db.symbol_name(*v).to_string(), db.hypotheses()[*h].label.clone()))
        .collect();
    let index: HashMap<Sym, usize> = db
        .global_floats(wff)
        .iter()
        .enumerate()
        .map(|(i, (v, _))| (*v, i))
        .collect();
    let syntax = Syntax {
        vars,
        imp: sym("->")?,
        not: sym("-.")?,
        open: sym("(")?,
        close: sym(")")?,
        index,
    };
    let mut rules = Vec::new();
    for a in db.assertions() {
        if a.typecode() != turnstile {
            continue;
        }
        let Some(conclusion) = syntax.parse(&a.expr[1..]) else { continue };
        let mut slots = Vec::new();
        let mut ok = true;
        for h in &a.frame.hypotheses {
            match h.kind {
                HypKind::Floating => match syntax.index.get(&h.expr[1]) {
                    Some(&v) => slots.push(Slot::Float(v)),
                    None => ok = false,
                },
                HypKind::Essential => match syntax.parse(&h.expr[1..]) {
                    Some(w) => slots.push(Slot::Essential(w)),
                    None => ok = false,
                },
            }
        }
        if ok {
            rules.push(Rule {
                label: a.label.clone(),
                slots,
                conclusion,
            });
        }
    }
    Ok(Generator {
        syntax,
        rules,
        rng: ChaCha8Rng::seed_from_u64(0),
    })
}

/// Generates `count` theorems continuing `base`, as Metamath source.
pub fn generate(base: &str, count: usize, seed: u64) -> Result<String, SynthError> {
    let db = Database::parse(base)?;
    let mut g = load(&db)?;
    g.rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<String> = HashSet::new();
    let mut out = String::from("\n$( Generated theorems. $)\n");
    let mut made = 0;
    let mut attempts = 0;
    while made < count {
        attempts += 1;
        if attempts > count * 200 + 1000 {
            return Err(SynthError::Exhausted { attempts, made });
        }
        let with_hyps: Vec<usize> = (0..g.rules.len()).filter(|&i| g.rules[i].essentials().count() > 0).collect();
        let rule = with_hyps[g.rng.random_range(0..with_hyps.len())];
        let mut subst = HashMap::new();
        g.complete(rule, &mut subst);
        let premises = g.premises(rule, &subst, 1);
        let d = Derivation::Apply { rule, subst, premises };
        if d.applications() < 2 {
            continue;
        }
        let Some(gen) = g.generalize(&d) else { continue };
        let (hyps, conclusion) = (gen.hypotheses, gen.conclusion);
        if hyps.contains(&conclusion) || hyps.len() > 4 || gen.proof.len() > MAX_PROOF_LEN {
            continue;
        }
        let mut statement: Vec<String> = hyps.iter().map(|h| g.syntax.text(h)).collect();
        statement.sort();
        statement.push(g.syntax.text(&conclusion));
        if !seen.insert(statement.join(" & ")) {
            continue;
        }
        made += 1;
        let name = format!("gen{made}");
        let proof: Vec<String> = gen
            .proof
            .into_iter()
            .map(|l| match l.strip_prefix('#') {
                Some(k) => format!("{name}.{}", k.parse::<usize>().expect("hypothesis index") + 1),
                None => l,
            })
            .collect();
        out.push_str("\n  ${\n");
        for (i, h) in hyps.iter().enumerate() {
            out.push_str(&format!("    {name}.{} $e |- {} $.\n", i + 1, g.syntax.text(h)));
        }
        out.push_str(&format!("    {name} $p |- {} $=\n", g.syntax.text(&conclusion)));
        crate::database::write_wrapped_proof(&mut out, "    ", &proof);
        out.push_str("  $}\n");

        let slots = (0..g.syntax.vars.len())
            .filter(|v| hyps.iter().any(|h| has_var(h, *v)) || has_var(&conclusion, *v))
            .map(Slot::Float)
            .chain(hyps.iter().map(|h| Slot::Essential(h.clone())))
            .collect();
        g.rules.push(Rule {
            label: name,
            slots,
            conclusion,
        });
    }
    Ok(out)
}

fn has_var(w: &Wff, v: usize) -> bool {
    match w {
        Wff::Var(x) => *x == v,
        Wff::Not(a) => has_var(a, v),
        Wff::Imp(a, b) => has_var(a, v) || has_var(b, v),
    }
}

/// The bundled fragment extended with `count` generated theorems.
pub fn corpus(count: usize, seed: u64) -> Result<String, SynthError> {
    Ok(format!("{PROP_MM}{}", generate(PROP_MM, count, seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::verify_database;

    #[test]
    fn generated_theorems_verify() {
        let text = corpus(60, 1).unwrap();
        let db = Database::parse(&text).unwrap();
        assert_eq!(db.provable().filter(|a| a.label.starts_with("gen")).count(), 60);
        let failures = verify_database(&db);
        assert!(failures.is_empty(), "{:?}", &failures[..failures.len().min(3)]);
    }

    #[test]
    fn bundled_corpus_is_current() {
        let fresh = corpus(CORPUS_THEOREMS, CORPUS_SEED).unwrap();
        if std::env::var_os("REFACTOR_BLESS").is_some() {
            std::fs::write(concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.mm"), &fresh).unwrap();
            return;
        }
        assert!(fresh == CORPUS_MM, "data/corpus.mm is stale; rerun with REFACTOR_BLESS=1");
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(PROP_MM, 20, 9).unwrap(), generate(PROP_MM, 20, 9).unwrap());
        assert_ne!(generate(PROP_MM, 20, 9).unwrap(), generate(PROP_MM, 20, 10).unwrap());
    }

    #[test]
    fn later_theorems_use_earlier_ones() {
        let text = corpus(200, 3).unwrap();
        let db = Database::parse(&text).unwrap();
        let uses = db
            .provable()
            .filter(|a| a.label.starts_with("gen"))
            .flat_map(|a| a.proof.iter())
            .filter(|l| l.starts_with("gen") && !l.contains('.'))
            .count();
        assert!(uses > 0);
    }
}
