//! Metamath source parsing into a scoped statement database.
//!
//! The parser is a single pass over whitespace-separated tokens. Scopes are
//! tracked with a stack of frames; every assertion records its mandatory
//! frame (hypotheses in declaration order and the `$d` pairs among mandatory
//! variables) together with the optional floating hypotheses and `$d` pairs
//! that were active when it was declared, so that dummy variables in proofs
//! can be checked later. Compressed proofs are expanded to plain label
//! sequences at parse time; shared (`Z`-tagged) subproofs are duplicated, so
//! the stored proof always describes a tree.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// An interned math symbol (constant or variable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sym(pub u32);

/// Typecode followed by the math string.
pub type Expr = Vec<Sym>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymKind {
    Constant,
    Variable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypKind {
    Floating,
    Essential,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Hypothesis {
    pub label: String,
    pub kind: HypKind,
    pub expr: Expr,
}

impl Hypothesis {
    pub fn typecode(&self) -> Sym {
        self.expr[0]
    }

    /// The variable bound by a floating hypothesis.
    pub fn variable(&self) -> Option<Sym> {
        match self.kind {
            HypKind::Floating => self.expr.get(1).copied(),
            HypKind::Essential => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssertionKind {
    Axiom,
    Provable,
}

/// Normalizes an unordered variable pair.
pub fn dv_pair(a: Sym, b: Sym) -> (Sym, Sym) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// The hypotheses and disjointness conditions an assertion is stated under.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Frame {
    /// Mandatory hypotheses in declaration order; these are the arguments
    /// of every application of the assertion.
    pub hypotheses: Vec<Hypothesis>,
    /// `$d` pairs among mandatory variables.
    pub disjoint: BTreeSet<(Sym, Sym)>,
    /// Floating hypotheses that were in scope but are not mandatory
    /// (usable for dummy variables inside the proof).
    pub optional_floats: Vec<Hypothesis>,
    /// `$d` pairs in scope involving at least one non-mandatory variable.
    pub optional_disjoint: BTreeSet<(Sym, Sym)>,
}

impl Frame {
    pub fn arity(&self) -> usize {
        self.hypotheses.len()
    }

    /// Whether `$d a b` holds while proving under this frame.
    pub fn allows_disjoint(&self, a: Sym, b: Sym) -> bool {
        let p = dv_pair(a, b);
        self.disjoint.contains(&p) || self.optional_disjoint.contains(&p)
    }

    pub fn hypothesis(&self, label: &str) -> Option<&Hypothesis> {
        self.hypotheses
            .iter()
            .chain(self.optional_floats.iter())
            .find(|h| h.label == label)
    }
}

#[derive(Debug, Clone)]
pub struct Assertion {
    pub label: String,
    pub kind: AssertionKind,
    pub expr: Expr,
    pub frame: Frame,
    /// Decompressed proof; empty for axioms.
    pub proof: Vec<String>,
    /// Position among all assertions of the database.
    pub index: usize,
}

impl Assertion {
    pub fn typecode(&self) -> Sym {
        self.expr[0]
    }

    pub fn is_provable(&self) -> bool {
        self.kind == AssertionKind::Provable
    }
}

/// Structural layout of the source, kept so the database can be written back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Constants(Vec<Sym>),
    Variables(Vec<Sym>),
    Hypothesis(usize),
    Disjoint(Vec<Sym>),
    Assertion(usize),
    OpenScope,
    CloseScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRef {
    Hypothesis(usize),
    Assertion(usize),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: variable `{symbol}` has no active floating hypothesis")]
    MissingFloating { line: usize, symbol: String },
    #[error("line {line}: unbalanced scope braces")]
    UnbalancedScope { line: usize },
    #[error("line {line}: proof of `{label}` is incomplete (`?` step)")]
    IncompleteProof { line: usize, label: String },
    #[error("line {line}: unknown label `{label}` in proof of `{theorem}`")]
    UnknownProofLabel { line: usize, label: String, theorem: String },
    #[error("line {line}: malformed compressed proof of `{label}`: {message}")]
    Compressed { line: usize, label: String, message: String },
    #[error("include `{0}` could not be read")]
    Include(String),
}

#[derive(Debug, Clone, Default)]
pub struct Database {
    symbols: Vec<String>,
    symbol_ids: HashMap<String, Sym>,
    symbol_kinds: Vec<SymKind>,
    hypotheses: Vec<Hypothesis>,
    assertions: Vec<Assertion>,
    labels: HashMap<String, LabelRef>,
    items: Vec<Item>,
    /// Per typecode, the variables with a top-level floating hypothesis in
    /// declaration order: `(variable, hypothesis index)`.
    global_floats: Vec<(Sym, Vec<(Sym, usize)>)>,
    /// Typecode of the first floating hypothesis of every variable.
    variable_typecodes: HashMap<Sym, Sym>,
}

impl Database {
    pub fn parse(source: &str) -> Result<Database, ParseError> {
        let mut parser = Parser::new(Database::default());
        parser.run(source)?;
        Ok(parser.db)
    }

    pub fn parse_bytes(source: &[u8]) -> Result<Database, ParseError> {
        let text = std::str::from_utf8(source).map_err(|e| ParseError::Syntax {
            line: 0,
            message: format!("source is not UTF-8: {e}"),
        })?;
        Database::parse(text)
    }

    /// Parses `source` as a continuation of this database at top level.
    ///
    /// Labels introduced by the continuation may shadow labels of `self`;
    /// the returned database is a scratch copy meant for reading the new
    /// statements back (see [`Database::assertions_after`]).
    pub fn parse_continuation(&self, source: &str) -> Result<Database, ParseError> {
        let mut parser = Parser::new(self.clone());
        parser.allow_shadowing = true;
        parser.run(source)?;
        Ok(parser.db)
    }

    pub fn symbol(&self, name: &str) -> Option<Sym> {
        self.symbol_ids.get(name).copied()
    }

    pub fn symbol_count(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol_name(&self, sym: Sym) -> &str {
        &self.symbols[sym.0 as usize]
    }

    pub fn is_variable(&self, sym: Sym) -> bool {
        self.symbol_kinds[sym.0 as usize] == SymKind::Variable
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    pub fn assertions(&self) -> &[Assertion] {
        &self.assertions
    }

    /// Assertions declared at or after position `start`.
    pub fn assertions_after(&self, start: usize) -> &[Assertion] {
        &self.assertions[start.min(self.assertions.len())..]
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn provable(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.iter().filter(|a| a.is_provable())
    }

    pub fn lookup(&self, label: &str) -> Option<LabelRef> {
        self.labels.get(label).copied()
    }

    pub fn assertion(&self, label: &str) -> Option<&Assertion> {
        match self.labels.get(label)? {
            LabelRef::Assertion(i) => Some(&self.assertions[*i]),
            LabelRef::Hypothesis(_) => None,
        }
    }

    pub fn hypothesis(&self, label: &str) -> Option<&Hypothesis> {
        match self.labels.get(label)? {
            LabelRef::Hypothesis(i) => Some(&self.hypotheses[*i]),
            LabelRef::Assertion(_) => None,
        }
    }

    /// Variables of `typecode` with a top-level floating hypothesis, in
    /// declaration order, paired with that hypothesis.
    pub fn global_floats(&self, typecode: Sym) -> &[(Sym, usize)] {
        self.global_floats
            .iter()
            .find(|(t, _)| *t == typecode)
            .map(|(_, v)| v.as_slice())
            .unwrap_or(&[])
    }

    /// All top-level floating hypotheses.
    pub fn all_global_floats(&self) -> Vec<Hypothesis> {
        self.global_floats
            .iter()
            .flat_map(|(_, v)| v.iter().map(|(_, h)| self.hypotheses[*h].clone()))
            .collect()
    }

    /// Typecodes that have variables, i.e. syntax typecodes.
    pub fn is_syntax_typecode(&self, typecode: Sym) -> bool {
        self.global_floats.iter().any(|(t, _)| *t == typecode)
            || self
                .hypotheses
                .iter()
                .any(|h| h.kind == HypKind::Floating && h.typecode() == typecode)
    }

    /// Renders an expression with single spaces, typecode first.
    pub fn render(&self, expr: &[Sym]) -> String {
        let mut out = String::new();
        for (i, s) in expr.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.symbol_name(*s));
        }
        out
    }

    /// Tokenizes a rendered expression back into symbols.
    pub fn tokenize(&self, text: &str) -> Option<Expr> {
        text.split_whitespace().map(|t| self.symbol(t)).collect()
    }

    /// Typecode a variable is declared with, if it has a floating hypothesis.
    pub fn variable_typecode(&self, var: Sym) -> Option<Sym> {
        self.variable_typecodes.get(&var).copied()
    }

    pub fn variables_of(&self, expr: &[Sym]) -> Vec<Sym> {
        let mut seen = Vec::new();
        for &s in expr.iter().skip(1) {
            if self.is_variable(s) && !seen.contains(&s) {
                seen.push(s);
            }
        }
        seen
    }

    /// Inserts a new provable assertion at top level before item position
    /// `item_pos`. Used by the refactoring engine.
    pub(crate) fn insert_assertion(
        &mut self,
        item_pos: usize,
        assertion: Assertion,
        essentials: Vec<Hypothesis>,
        disjoint_vars: Vec<Vec<Sym>>,
    ) -> usize {
        // New essentials become hypothesis entries so that the written-out
        // block is self-describing; they live only inside the new block.
        let mut block = vec![Item::OpenScope];
        for dv in disjoint_vars {
            block.push(Item::Disjoint(dv));
        }
        for h in essentials {
            let idx = self.hypotheses.len();
            self.labels.insert(h.label.clone(), LabelRef::Hypothesis(idx));
            self.hypotheses.push(h);
            block.push(Item::Hypothesis(idx));
        }
        // Assertion indices must stay in item order: every index at or after
        // the insertion point shifts by one.
        let new_index = self.items[..item_pos]
            .iter()
            .filter(|it| matches!(it, Item::Assertion(_)))
            .count();
        for a in self.assertions.iter_mut().skip(new_index) {
            a.index += 1;
        }
        for it in self.items.iter_mut() {
            if let Item::Assertion(i) = it {
                if *i >= new_index {
                    *i += 1;
                }
            }
        }
        for r in self.labels.values_mut() {
            if let LabelRef::Assertion(i) = r {
                if *i >= new_index {
                    *i += 1;
                }
            }
        }
        let mut assertion = assertion;
        assertion.index = new_index;
        self.labels
            .insert(assertion.label.clone(), LabelRef::Assertion(new_index));
        self.assertions.insert(new_index, assertion);
        block.push(Item::Assertion(new_index));
        block.push(Item::CloseScope);
        let tail = self.items.split_off(item_pos);
        self.items.extend(block);
        self.items.extend(tail);
        new_index
    }

    pub(crate) fn set_proof(&mut self, index: usize, proof: Vec<String>) {
        self.assertions[index].proof = proof;
    }

    /// Top-level item position of every assertion: the index in
    /// [`Database::items`] of the outermost item containing it.
    pub fn top_level_positions(&self) -> Vec<usize> {
        let mut out = vec![0; self.assertions.len()];
        let mut depth = 0usize;
        let mut block_start = 0usize;
        for (pos, it) in self.items.iter().enumerate() {
            match it {
                Item::OpenScope => {
                    if depth == 0 {
                        block_start = pos;
                    }
                    depth += 1;
                }
                Item::CloseScope => depth = depth.saturating_sub(1),
                Item::Assertion(i) => out[*i] = if depth == 0 { pos } else { block_start },
                _ => {}
            }
        }
        out
    }

    /// Writes the database back as Metamath source with plain proofs.
    pub fn to_mm(&self) -> String {
        let mut out = String::new();
        let mut depth = 0usize;
        for it in &self.items {
            if matches!(it, Item::CloseScope) {
                depth = depth.saturating_sub(1);
            }
            let indent = "  ".repeat(depth);
            match it {
                Item::Constants(syms) => {
                    out.push_str(&format!("{indent}$c {} $.\n", self.render(syms)))
                }
                Item::Variables(syms) => {
                    out.push_str(&format!("{indent}$v {} $.\n", self.render(syms)))
                }
                Item::Disjoint(syms) => {
                    out.push_str(&format!("{indent}$d {} $.\n", self.render(syms)))
                }
                Item::Hypothesis(i) => {
                    let h = &self.hypotheses[*i];
                    let kw = match h.kind {
                        HypKind::Floating => "$f",
                        HypKind::Essential => "$e",
                    };
                    out.push_str(&format!(
                        "{indent}{} {kw} {} $.\n",
                        h.label,
                        self.render(&h.expr)
                    ));
                }
                Item::Assertion(i) => {
                    let a = &self.assertions[*i];
                    match a.kind {
                        AssertionKind::Axiom => out.push_str(&format!(
                            "{indent}{} $a {} $.\n",
                            a.label,
                            self.render(&a.expr)
                        )),
                        AssertionKind::Provable => {
                            out.push_str(&format!(
                                "{indent}{} $p {} $=\n",
                                a.label,
                                self.render(&a.expr)
                            ));
                            write_wrapped_proof(&mut out, &indent, &a.proof);
                        }
                    }
                }
                Item::OpenScope => {
                    out.push_str(&format!("{indent}${{\n"));
                    depth += 1;
                }
                Item::CloseScope => out.push_str(&format!("{indent}$}}\n")),
            }
        }
        out
    }
}

pub(crate) fn write_wrapped_proof(out: &mut String, indent: &str, proof: &[String]) {
    let mut line = format!("{indent}  ");
    let base = line.len();
    for label in proof {
        if line.len() > base && line.len() + label.len() + 1 > 79 {
            out.push_str(line.trim_end());
            out.push('\n');
            line = format!("{indent}  ");
        }
        line.push_str(label);
        line.push(' ');
    }
    line.push_str("$.");
    out.push_str(&line);
    out.push('\n');
}

impl fmt::Display for Sym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Inlines `$[ file $]` inclusions, each file at most once, relative to the
/// including file's directory.
pub fn flatten_includes(path: &Path) -> Result<String, ParseError> {
    let mut seen = HashSet::new();
    let mut out = String::new();
    flatten_into(path, &mut seen, &mut out)?;
    Ok(out)
}

fn flatten_into(path: &Path, seen: &mut HashSet<std::path::PathBuf>, out: &mut String) -> Result<(), ParseError> {
    let canonical = path
        .canonicalize()
        .map_err(|_| ParseError::Include(path.display().to_string()))?;
    if !seen.insert(canonical) {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)
        .map_err(|_| ParseError::Include(path.display().to_string()))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut rest = text.as_str();
    while let Some(start) = find_include(rest) {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("$]").ok_or_else(|| ParseError::Syntax {
            line: 0,
            message: "unterminated `$[`".into(),
        })?;
        let name = after[..end].trim();
        flatten_into(&dir.join(name), seen, out)?;
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(())
}

/// Finds a `$[` token outside of comments.
fn find_include(text: &str) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut i = 0;
    let mut in_comment = false;
    while i + 1 < bytes.len() {
        if bytes[i] == b'$' {
            match (in_comment, bytes[i + 1]) {
                (false, b'(') => in_comment = true,
                (true, b')') => in_comment = false,
                (false, b'[') => return Some(i),
                _ => {}
            }
            i += 2;
        } else {
            i += 1;
        }
    }
    None
}

struct Token<'a> {
    text: &'a str,
    line: usize,
}

struct Tokens<'a> {
    src: &'a str,
    pos: usize,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn new(src: &'a str) -> Self {
        Tokens { src, pos: 0, line: 1 }
    }

    fn next_raw(&mut self) -> Option<Token<'a>> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            if bytes[self.pos] == b'\n' {
                self.line += 1;
            }
            self.pos += 1;
        }
        if self.pos >= bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < bytes.len() && !bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some(Token {
            text: &self.src[start..self.pos],
            line: self.line,
        })
    }

    /// Next token, skipping comments.
    fn next(&mut self) -> Result<Option<Token<'a>>, ParseError> {
        loop {
            let Some(tok) = self.next_raw() else {
                return Ok(None);
            };
            if tok.text == "$(" {
                loop {
                    match self.next_raw() {
                        Some(t) if t.text == "$)" => break,
                        Some(t) if t.text.contains("$)") || t.text.contains("$(") => {
                            return Err(ParseError::Syntax {
                                line: t.line,
                                message: "`$(` or `$)` embedded in comment token".into(),
                            })
                        }
                        Some(_) => {}
                        None => {
                            return Err(ParseError::Syntax {
                                line: tok.line,
                                message: "unterminated comment".into(),
                            })
                        }
                    }
                }
                continue;
            }
            return Ok(Some(tok));
        }
    }
}

#[derive(Default)]
struct Scope {
    variables: Vec<Sym>,
    hypotheses: Vec<usize>,
    disjoint: Vec<(Sym, Sym)>,
    floats: Vec<(Sym, usize)>,
}

struct Parser {
    db: Database,
    scopes: Vec<Scope>,
    active_vars: HashSet<Sym>,
    allow_shadowing: bool,
    base_assertions: usize,
    base_hypotheses: usize,
}

fn is_label_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.'
}

fn is_math_token(t: &str) -> bool {
    !t.is_empty() && !t.contains('$') && t.chars().all(|c| c.is_ascii_graphic())
}

impl Parser {
    fn new(db: Database) -> Self {
        let mut p = Parser {
            base_assertions: db.assertions.len(),
            base_hypotheses: db.hypotheses.len(),
            db,
            scopes: vec![Scope::default()],
            active_vars: HashSet::new(),
            allow_shadowing: false,
        };
        // Re-activate the top-level state of an existing database.
        let mut depth = 0usize;
        let mut top = Scope::default();
        for item in &p.db.items {
            match item {
                Item::OpenScope => depth += 1,
                Item::CloseScope => depth -= 1,
                Item::Variables(vars) if depth == 0 => top.variables.extend(vars.iter().copied()),
                Item::Disjoint(vars) if depth == 0 => push_pairs(&mut top.disjoint, vars),
                _ => {}
            }
        }
        for (_, floats) in &p.db.global_floats {
            for &(var, h) in floats {
                top.hypotheses.push(h);
                top.floats.push((var, h));
            }
        }
        top.hypotheses.sort_unstable();
        p.active_vars.extend(top.variables.iter().copied());
        p.scopes[0] = top;
        p
    }

    fn run(&mut self, src: &str) -> Result<(), ParseError> {
        let mut toks = Tokens::new(src);
        while let Some(tok) = toks.next()? {
            match tok.text {
                "${" => {
                    self.scopes.push(Scope::default());
                    self.db.items.push(Item::OpenScope);
                }
                "$}" => {
                    if self.scopes.len() <= 1 {
                        return Err(ParseError::UnbalancedScope { line: tok.line });
                    }
                    let scope = self.scopes.pop().unwrap();
                    for v in scope.variables {
                        self.active_vars.remove(&v);
                    }
                    self.db.items.push(Item::CloseScope);
                }
                "$c" => {
                    let syms = self.read_until_end(&mut toks, tok.line)?;
                    if self.scopes.len() > 1 {
                        return Err(ParseError::Syntax {
                            line: tok.line,
                            message: "`$c` must be at top level".into(),
                        });
                    }
                    let mut ids = Vec::new();
                    for s in syms {
                        ids.push(self.declare_symbol(&s, SymKind::Constant, tok.line)?);
                    }
                    self.db.items.push(Item::Constants(ids));
                }
                "$v" => {
                    let syms = self.read_until_end(&mut toks, tok.line)?;
                    let mut ids = Vec::new();
                    for s in syms {
                        let id = self.declare_symbol(&s, SymKind::Variable, tok.line)?;
                        if !self.active_vars.insert(id) {
                            return Err(ParseError::Syntax {
                                line: tok.line,
                                message: format!("variable `{s}` declared twice in scope"),
                            });
                        }
                        self.scopes.last_mut().unwrap().variables.push(id);
                        ids.push(id);
                    }
                    self.db.items.push(Item::Variables(ids));
                }
                "$d" => {
                    let syms = self.read_until_end(&mut toks, tok.line)?;
                    let mut ids = Vec::new();
                    for s in &syms {
                        let id = self.active_variable(s, tok.line)?;
                        if ids.contains(&id) {
                            return Err(ParseError::Syntax {
                                line: tok.line,
                                message: format!("variable `{s}` repeated in `$d`"),
                            });
                        }
                        ids.push(id);
                    }
                    push_pairs(&mut self.scopes.last_mut().unwrap().disjoint, &ids);
                    self.db.items.push(Item::Disjoint(ids));
                }
                "$[" => {
                    return Err(ParseError::Syntax {
                        line: tok.line,
                        message: "includes must be flattened before parsing".into(),
                    })
                }
                t if t.starts_with('$') => {
                    return Err(ParseError::Syntax {
                        line: tok.line,
                        message: format!("unexpected keyword `{t}`"),
                    })
                }
                label => {
                    if !label.chars().all(is_label_char) {
                        return Err(ParseError::Syntax {
                            line: tok.line,
                            message: format!("invalid label `{label}`"),
                        });
                    }
                    let Some(kw) = toks.next()? else {
                        return Err(ParseError::Syntax {
                            line: tok.line,
                            message: format!("label `{label}` without statement"),
                        });
                    };
                    self.check_new_label(label, tok.line)?;
                    match kw.text {
                        "$f" => self.floating(label, &mut toks, kw.line)?,
                        "$e" => self.essential(label, &mut toks, kw.line)?,
                        "$a" => self.assertion(label, AssertionKind::Axiom, &mut toks, kw.line)?,
                        "$p" => self.assertion(label, AssertionKind::Provable, &mut toks, kw.line)?,
                        other => {
                            return Err(ParseError::Syntax {
                                line: kw.line,
                                message: format!("expected `$f`, `$e`, `$a` or `$p` after label, found `{other}`"),
                            })
                        }
                    }
                }
            }
        }
        if self.scopes.len() != 1 {
            return Err(ParseError::UnbalancedScope { line: toks.line });
        }
        Ok(())
    }

    fn read_until_end(&self, toks: &mut Tokens<'_>, line: usize) -> Result<Vec<String>, ParseError> {
        let mut out = Vec::new();
        loop {
            match toks.next()? {
                Some(t) if t.text == "$." => return Ok(out),
                Some(t) if t.text.starts_with('$') => {
                    return Err(ParseError::Syntax {
                        line: t.line,
                        message: format!("unexpected `{}` inside statement", t.text),
                    })
                }
                Some(t) => {
                    if !is_math_token(t.text) {
                        return Err(ParseError::Syntax {
                            line: t.line,
                            message: format!("invalid math symbol `{}`", t.text),
                        });
                    }
                    out.push(t.text.to_string())
                }
                None => {
                    return Err(ParseError::Syntax {
                        line,
                        message: "statement not terminated by `$.`".into(),
                    })
                }
            }
        }
    }

    fn declare_symbol(&mut self, name: &str, kind: SymKind, line: usize) -> Result<Sym, ParseError> {
        if let Some(&id) = self.db.symbol_ids.get(name) {
            let existing = self.db.symbol_kinds[id.0 as usize];
            if existing == SymKind::Variable && kind == SymKind::Variable {
                return Ok(id);
            }
            return Err(ParseError::Syntax {
                line,
                message: format!("symbol `{name}` redeclared"),
            });
        }
        if self.db.labels.contains_key(name) {
            return Err(ParseError::Syntax {
                line,
                message: format!("symbol `{name}` clashes with a label"),
            });
        }
        let id = Sym(self.db.symbols.len() as u32);
        self.db.symbols.push(name.to_string());
        self.db.symbol_kinds.push(kind);
        self.db.symbol_ids.insert(name.to_string(), id);
        Ok(id)
    }

    fn check_new_label(&self, label: &str, line: usize) -> Result<(), ParseError> {
        if let Some(r) = self.db.labels.get(label) {
            let base = match r {
                LabelRef::Assertion(i) => *i < self.base_assertions,
                LabelRef::Hypothesis(i) => *i < self.base_hypotheses,
            };
            if !(self.allow_shadowing && base) {
                return Err(ParseError::DuplicateLabel {
                    line,
                    label: label.to_string(),
                });
            }
        }
        if self.db.symbol_ids.contains_key(label) {
            return Err(ParseError::Syntax {
                line,
                message: format!("label `{label}` clashes with a math symbol"),
            });
        }
        Ok(())
    }

    fn constant(&self, name: &str, line: usize) -> Result<Sym, ParseError> {
        match self.db.symbol_ids.get(name) {
            Some(&id) if self.db.symbol_kinds[id.0 as usize] == SymKind::Constant => Ok(id),
            _ => Err(ParseError::Syntax {
                line,
                message: format!("`{name}` is not a declared constant"),
            }),
        }
    }

    fn active_variable(&self, name: &str, line: usize) -> Result<Sym, ParseError> {
        match self.db.symbol_ids.get(name) {
            Some(&id) if self.active_vars.contains(&id) => Ok(id),
            _ => Err(ParseError::Syntax {
                line,
                message: format!("`{name}` is not an active variable"),
            }),
        }
    }

    fn float_of(&self, var: Sym) -> Option<usize> {
        self.scopes
            .iter()
            .rev()
            .flat_map(|s| s.floats.iter())
            .find(|(v, _)| *v == var)
            .map(|(_, h)| *h)
    }

    fn math_string(&self, syms: &[String], line: usize) -> Result<Expr, ParseError> {
        let mut out = Vec::with_capacity(syms.len());
        for (i, s) in syms.iter().enumerate() {
            let Some(&id) = self.db.symbol_ids.get(s.as_str()) else {
                return Err(ParseError::Syntax {
                    line,
                    message: format!("undeclared math symbol `{s}`"),
                });
            };
            if i == 0 {
                if self.db.symbol_kinds[id.0 as usize] != SymKind::Constant {
                    return Err(ParseError::Syntax {
                        line,
                        message: format!("typecode `{s}` is not a constant"),
                    });
                }
            } else if self.db.symbol_kinds[id.0 as usize] == SymKind::Variable {
                if !self.active_vars.contains(&id) {
                    return Err(ParseError::Syntax {
                        line,
                        message: format!("variable `{s}` is not active"),
                    });
                }
                if self.float_of(id).is_none() {
                    return Err(ParseError::MissingFloating {
                        line,
                        symbol: s.clone(),
                    });
                }
            }
            out.push(id);
        }
        if out.is_empty() {
            return Err(ParseError::Syntax {
                line,
                message: "empty math string".into(),
            });
        }
        Ok(out)
    }

    fn add_hypothesis(&mut self, h: Hypothesis) -> usize {
        let idx = self.db.hypotheses.len();
        self.db.labels.insert(h.label.clone(), LabelRef::Hypothesis(idx));
        self.db.hypotheses.push(h);
        self.scopes.last_mut().unwrap().hypotheses.push(idx);
        self.db.items.push(Item::Hypothesis(idx));
        idx
    }

    fn floating(&mut self, label: &str, toks: &mut Tokens<'_>, line: usize) -> Result<(), ParseError> {
        let syms = self.read_until_end(toks, line)?;
        if syms.len() != 2 {
            return Err(ParseError::Syntax {
                line,
                message: format!("`$f` statement `{label}` must have a typecode and one variable"),
            });
        }
        let tc = self.constant(&syms[0], line)?;
        let var = self.active_variable(&syms[1], line)?;
        if self
            .scopes
            .iter()
            .flat_map(|s| s.floats.iter())
            .any(|(v, _)| *v == var)
        {
            return Err(ParseError::Syntax {
                line,
                message: format!("variable `{}` already has an active `$f`", syms[1]),
            });
        }
        let idx = self.add_hypothesis(Hypothesis {
            label: label.to_string(),
            kind: HypKind::Floating,
            expr: vec![tc, var],
        });
        self.scopes.last_mut().unwrap().floats.push((var, idx));
        self.db.variable_typecodes.entry(var).or_insert(tc);
        if self.scopes.len() == 1 {
            match self.db.global_floats.iter_mut().find(|(t, _)| *t == tc) {
                Some((_, v)) => v.push((var, idx)),
                None => self.db.global_floats.push((tc, vec![(var, idx)])),
            }
        }
        Ok(())
    }

    fn essential(&mut self, label: &str, toks: &mut Tokens<'_>, line: usize) -> Result<(), ParseError> {
        let syms = self.read_until_end(toks, line)?;
        let expr = self.math_string(&syms, line)?;
        self.add_hypothesis(Hypothesis {
            label: label.to_string(),
            kind: HypKind::Essential,
            expr,
        });
        Ok(())
    }

    fn build_frame(&self, expr: &[Sym]) -> Frame {
        let active: Vec<usize> = self.scopes.iter().flat_map(|s| s.hypotheses.iter().copied()).collect();
        let mut mandatory_vars: HashSet<Sym> = HashSet::new();
        let mut note = |e: &[Sym]| {
            for &s in &e[1..] {
                if self.db.symbol_kinds[s.0 as usize] == SymKind::Variable {
                    mandatory_vars.insert(s);
                }
            }
        };
        for &h in &active {
            let hyp = &self.db.hypotheses[h];
            if hyp.kind == HypKind::Essential {
                note(&hyp.expr);
            }
        }
        note(expr);
        let mut frame = Frame::default();
        let mut sorted = active.clone();
        sorted.sort_unstable();
        for h in sorted {
            let hyp = &self.db.hypotheses[h];
            match hyp.kind {
                HypKind::Essential => frame.hypotheses.push(hyp.clone()),
                HypKind::Floating => {
                    if mandatory_vars.contains(&hyp.expr[1]) {
                        frame.hypotheses.push(hyp.clone());
                    } else {
                        frame.optional_floats.push(hyp.clone());
                    }
                }
            }
        }
        for s in &self.scopes {
            for &(a, b) in &s.disjoint {
                if mandatory_vars.contains(&a) && mandatory_vars.contains(&b) {
                    frame.disjoint.insert((a, b));
                } else {
                    frame.optional_disjoint.insert((a, b));
                }
            }
        }
        frame
    }

    fn assertion(
        &mut self,
        label: &str,
        kind: AssertionKind,
        toks: &mut Tokens<'_>,
        line: usize,
    ) -> Result<(), ParseError> {
        let mut syms = Vec::new();
        let mut proof_tokens: Vec<String> = Vec::new();
        let mut in_proof = false;
        loop {
            let Some(t) = toks.next()? else {
                return Err(ParseError::Syntax {
                    line,
                    message: format!("statement `{label}` not terminated"),
                });
            };
            match t.text {
                "$." => break,
                "$=" if kind == AssertionKind::Provable && !in_proof => in_proof = true,
                x if x.starts_with('$') => {
                    return Err(ParseError::Syntax {
                        line: t.line,
                        message: format!("unexpected `{x}` in `{label}`"),
                    })
                }
                x if in_proof => proof_tokens.push(x.to_string()),
                x => syms.push(x.to_string()),
            }
        }
        if kind == AssertionKind::Provable && !in_proof {
            return Err(ParseError::Syntax {
                line,
                message: format!("`$p` statement `{label}` has no proof"),
            });
        }
        let expr = self.math_string(&syms, line)?;
        let frame = self.build_frame(&expr);
        let proof = if kind == AssertionKind::Provable {
            self.decode_proof(label, &frame, &proof_tokens, line)?
        } else {
            Vec::new()
        };
        let index = self.db.assertions.len();
        self.db.labels.insert(label.to_string(), LabelRef::Assertion(index));
        self.db.assertions.push(Assertion {
            label: label.to_string(),
            kind,
            expr,
            frame,
            proof,
            index,
        });
        self.db.items.push(Item::Assertion(index));
        Ok(())
    }

    /// Arity of a label usable in the proof of a statement with `frame`.
    fn proof_label_arity(&self, label: &str, frame: &Frame) -> Option<usize> {
        if frame.hypothesis(label).is_some() {
            return Some(0);
        }
        match self.db.labels.get(label)? {
            LabelRef::Assertion(i) => Some(self.db.assertions[*i].frame.arity()),
            LabelRef::Hypothesis(i) => {
                // Only hypotheses currently in scope are referable.
                let active = self.scopes.iter().any(|s| s.hypotheses.contains(i));
                active.then_some(0)
            }
        }
    }

    fn decode_proof(
        &self,
        label: &str,
        frame: &Frame,
        tokens: &[String],
        line: usize,
    ) -> Result<Vec<String>, ParseError> {
        if tokens.first().map(String::as_str) == Some("(") {
            let close = tokens.iter().position(|t| t == ")").ok_or_else(|| ParseError::Compressed {
                line,
                label: label.to_string(),
                message: "missing `)`".into(),
            })?;
            let refs = &tokens[1..close];
            for r in refs {
                if self.proof_label_arity(r, frame).is_none() {
                    return Err(ParseError::UnknownProofLabel {
                        line,
                        label: r.clone(),
                        theorem: label.to_string(),
                    });
                }
            }
            let letters: String = tokens[close + 1..].concat();
            if letters.contains('?') {
                return Err(ParseError::IncompleteProof {
                    line,
                    label: label.to_string(),
                });
            }
            let mandatory: Vec<String> = frame.hypotheses.iter().map(|h| h.label.clone()).collect();
            decompress(&mandatory, refs, &letters, |l| self.proof_label_arity(l, frame)).map_err(|message| {
                ParseError::Compressed {
                    line,
                    label: label.to_string(),
                    message,
                }
            })
        } else {
            let mut out = Vec::with_capacity(tokens.len());
            for t in tokens {
                if t == "?" {
                    return Err(ParseError::IncompleteProof {
                        line,
                        label: label.to_string(),
                    });
                }
                if self.proof_label_arity(t, frame).is_none() {
                    return Err(ParseError::UnknownProofLabel {
                        line,
                        label: t.clone(),
                        theorem: label.to_string(),
                    });
                }
                out.push(t.clone());
            }
            if out.is_empty() {
                return Err(ParseError::Syntax {
                    line,
                    message: format!("empty proof for `{label}`"),
                });
            }
            Ok(out)
        }
    }
}

fn push_pairs(into: &mut Vec<(Sym, Sym)>, vars: &[Sym]) {
    for (i, &a) in vars.iter().enumerate() {
        for &b in &vars[i + 1..] {
            let p = dv_pair(a, b);
            if !into.contains(&p) {
                into.push(p);
            }
        }
    }
}

/// Expands a compressed proof into a plain label sequence.
///
/// `mandatory` are the mandatory hypothesis labels, `refs` the labels in the
/// parenthesized list and `letters` the concatenated step encoding. Saved
/// subproofs (`Z`) are copied at each reference.
pub fn decompress(
    mandatory: &[String],
    refs: &[String],
    letters: &str,
    arity: impl Fn(&str) -> Option<usize>,
) -> Result<Vec<String>, String> {
    let m = mandatory.len();
    let k = refs.len();
    let mut out: Vec<String> = Vec::new();
    let mut starts: Vec<usize> = Vec::new();
    let mut saved: Vec<Vec<String>> = Vec::new();
    let mut num = 0usize;
    let mut pending = false;
    let mut last_was_step = false;
    for c in letters.chars() {
        match c {
            'U'..='Y' => {
                num = num * 5 + (c as usize - 'U' as usize + 1);
                pending = true;
                last_was_step = false;
            }
            'A'..='T' => {
                let n = num * 20 + (c as usize - 'A' as usize + 1);
                num = 0;
                pending = false;
                last_was_step = true;
                if n <= m + k {
                    let lab = if n <= m { &mandatory[n - 1] } else { &refs[n - m - 1] };
                    let a = if n <= m {
                        0
                    } else {
                        arity(lab).ok_or_else(|| format!("unknown label `{lab}`"))?
                    };
                    if starts.len() < a {
                        return Err(format!("stack underflow at `{lab}`"));
                    }
                    let start = if a == 0 {
                        out.len()
                    } else {
                        starts[starts.len() - a]
                    };
                    starts.truncate(starts.len() - a);
                    out.push(lab.clone());
                    starts.push(start);
                } else {
                    let idx = n - m - k - 1;
                    let sub = saved
                        .get(idx)
                        .ok_or_else(|| format!("reference to unsaved step {n}"))?;
                    starts.push(out.len());
                    out.extend(sub.iter().cloned());
                }
            }
            'Z' => {
                if !last_was_step {
                    return Err("`Z` does not follow a step".into());
                }
                let start = *starts.last().ok_or("`Z` with empty stack")?;
                saved.push(out[start..].to_vec());
                last_was_step = false;
            }
            c if c.is_whitespace() => {}
            other => return Err(format!("invalid character `{other}`")),
        }
    }
    if pending {
        return Err("truncated step number".into());
    }
    if out.is_empty() {
        return Err("empty proof".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "$c |- wff $. $v p $. wp $f wff p $. ax $a |- p $.";

    #[test]
    fn minimal_database() {
        let db = Database::parse(MINIMAL).unwrap();
        assert_eq!(db.assertions().len(), 1);
        assert_eq!(db.provable().count(), 0);
        let ax = db.assertion("ax").unwrap();
        assert_eq!(ax.frame.hypotheses.len(), 1);
        assert_eq!(db.render(&ax.expr), "|- p");
    }

    #[test]
    fn comments_are_skipped() {
        let db = Database::parse("$( hello $c x $. $) $c |- $. $( again $)").unwrap();
        assert!(db.symbol("|-").is_some());
        assert!(db.symbol("x").is_none());
    }

    #[test]
    fn duplicate_label_is_rejected() {
        let err = Database::parse("$c |- wff $. $v p $. wp $f wff p $. wp $a |- p $.").unwrap_err();
        assert!(matches!(err, ParseError::DuplicateLabel { .. }));
    }

    #[test]
    fn variable_without_floating_is_rejected() {
        let err = Database::parse("$c |- wff $. $v p $. ax $a |- p $.").unwrap_err();
        assert!(matches!(err, ParseError::MissingFloating { .. }));
    }

    #[test]
    fn unbalanced_scopes_are_rejected() {
        assert!(matches!(
            Database::parse("$c |- $. ${").unwrap_err(),
            ParseError::UnbalancedScope { .. }
        ));
        assert!(matches!(
            Database::parse("$c |- $. $}").unwrap_err(),
            ParseError::UnbalancedScope { .. }
        ));
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = Database::parse("$c |- $.\n\n$q").unwrap_err();
        assert_eq!(err, ParseError::Syntax { line: 3, message: "unexpected keyword `$q`".into() });
    }

    #[test]
    fn incomplete_proofs_are_rejected() {
        let src = format!("{MINIMAL} th $p |- p $= ? $.");
        assert!(matches!(Database::parse(&src).unwrap_err(), ParseError::IncompleteProof { .. }));
        let src = format!("{MINIMAL} th $p |- p $= ( ax ) ?B $.");
        assert!(matches!(Database::parse(&src).unwrap_err(), ParseError::IncompleteProof { .. }));
    }

    #[test]
    fn scoped_variables_and_frames() {
        let src = "$c |- wff ( -> ) $. $v p q $. wp $f wff p $. wq $f wff q $.
            wi $a wff ( p -> q ) $.
            ${ h $e |- p $. $d p q $. th $a |- ( q -> p ) $. $}
            other $a |- q $.";
        let db = Database::parse(src).unwrap();
        let th = db.assertion("th").unwrap();
        let labels: Vec<_> = th.frame.hypotheses.iter().map(|h| h.label.as_str()).collect();
        assert_eq!(labels, ["wp", "wq", "h"]);
        assert_eq!(th.frame.disjoint.len(), 1);
        let other = db.assertion("other").unwrap();
        assert_eq!(other.frame.hypotheses.len(), 1);
        assert!(other.frame.disjoint.is_empty());
    }

    #[test]
    fn decompress_with_saved_steps() {
        // Hypotheses A, B; refs C = binary op. Proof A B C Z then reuse D.
        let mandatory = vec!["h1".to_string(), "h2".to_string()];
        let refs = vec!["op".to_string()];
        let out = decompress(&mandatory, &refs, "ABCZDC", |l| (l == "op").then_some(2)).unwrap();
        assert_eq!(out, ["h1", "h2", "op", "h1", "h2", "op", "op"]);
    }

    #[test]
    fn multi_letter_numbers() {
        // 20 hypotheses so that 21 needs a prefix digit: UA = 1*20 + 1.
        let mandatory: Vec<String> = (1..=20).map(|i| format!("h{i}")).collect();
        let refs = vec!["c".to_string()];
        let out = decompress(&mandatory, &refs, "UA", |_| Some(0)).unwrap();
        assert_eq!(out, ["c"]);
    }

    #[test]
    fn round_trips_through_writer() {
        let src = "$c |- wff ( -> ) $. $v p q $. wp $f wff p $. wq $f wff q $.
            wi $a wff ( p -> q ) $.
            ${ h $e |- p $. th $p |- p $= h $. $}";
        let db = Database::parse(src).unwrap();
        let again = Database::parse(&db.to_mm()).unwrap();
        assert_eq!(again.to_mm(), db.to_mm());
        assert_eq!(again.assertion("th").unwrap().proof, ["h"]);
    }
}
