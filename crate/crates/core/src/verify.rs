//! RPN proof replay.
//!
//! Each label either pushes a hypothesis or applies an assertion: the
//! assertion's mandatory hypotheses are popped, floating ones determine the
//! substitution, essential ones must equal their substituted statement, and
//! the substituted conclusion is pushed. The full trace is returned so that
//! callers can build proof trees from it without replaying again.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::database::{dv_pair, Assertion, Database, Expr, Frame, HypKind, LabelRef, Sym};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceStep {
    pub label: String,
    pub expr: Expr,
    /// Trace indices of the popped arguments, in mandatory-hypothesis order.
    pub args: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedTrace {
    pub steps: Vec<TraceStep>,
    /// Every `$d` pair the proof needed, over the proving frame's variables.
    pub required_disjoint: BTreeSet<(Sym, Sym)>,
}

impl VerifiedTrace {
    pub fn conclusion(&self) -> &Expr {
        &self.steps.last().expect("verified traces are nonempty").expr
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("empty proof")]
    EmptyProof,
    #[error("step {step}: unknown label `{label}`")]
    UnknownLabel { step: usize, label: String },
    #[error("step {step}: `{label}` is not declared before this statement")]
    ForwardReference { step: usize, label: String },
    #[error("step {step}: stack underflow applying `{label}`")]
    StackUnderflow { step: usize, label: String },
    #[error("step {step}: `{label}` argument {arg} does not match its hypothesis (expected `{expected}`, found `{found}`)")]
    Mismatch {
        step: usize,
        label: String,
        arg: usize,
        expected: String,
        found: String,
    },
    #[error("step {step}: `{label}` violates disjointness of `{a}` and `{b}`")]
    Disjoint {
        step: usize,
        label: String,
        a: String,
        b: String,
    },
    #[error("proof concludes `{found}` but `{expected}` was expected")]
    FinalMismatch { expected: String, found: String },
    #[error("{count} entries left on the stack")]
    ResidualStack { count: usize },
}

impl VerifyError {
    pub fn is_disjointness(&self) -> bool {
        matches!(self, VerifyError::Disjoint { .. })
    }
}

/// How `$d` requirements of applied assertions are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisjointMode {
    /// Every required pair must be present in the proving frame.
    Enforce,
    /// Required pairs are only recorded; identical variables still fail.
    Collect,
}

/// Proof replay with explicit options.
#[derive(Debug, Clone, Copy)]
pub struct Replay<'a> {
    pub db: &'a Database,
    pub frame: &'a Frame,
    /// Only assertions with an index below this bound may be referenced.
    pub before: usize,
    pub disjoint: DisjointMode,
}

enum Resolved<'a> {
    Hyp(&'a Expr),
    Assert(&'a Assertion),
}

impl<'a> Replay<'a> {
    pub fn new(db: &'a Database, frame: &'a Frame) -> Self {
        Replay {
            db,
            frame,
            before: usize::MAX,
            disjoint: DisjointMode::Enforce,
        }
    }

    fn resolve(&self, step: usize, label: &str) -> Result<Resolved<'a>, VerifyError> {
        if let Some(h) = self.frame.hypothesis(label) {
            return Ok(Resolved::Hyp(&h.expr));
        }
        match self.db.lookup(label) {
            Some(LabelRef::Assertion(i)) => {
                let a = &self.db.assertions()[i];
                if a.index >= self.before {
                    return Err(VerifyError::ForwardReference {
                        step,
                        label: label.to_string(),
                    });
                }
                Ok(Resolved::Assert(a))
            }
            _ => Err(VerifyError::UnknownLabel {
                step,
                label: label.to_string(),
            }),
        }
    }

    /// Replays `labels` and returns the trace, without checking the final
    /// statement.
    pub fn trace<S: AsRef<str>>(&self, labels: &[S]) -> Result<VerifiedTrace, VerifyError> {
        if labels.is_empty() {
            return Err(VerifyError::EmptyProof);
        }
        let mut steps: Vec<TraceStep> = Vec::with_capacity(labels.len());
        let mut stack: Vec<usize> = Vec::new();
        let mut required = BTreeSet::new();
        for (i, label) in labels.iter().enumerate() {
            let label = label.as_ref();
            match self.resolve(i, label)? {
                Resolved::Hyp(expr) => {
                    stack.push(steps.len());
                    steps.push(TraceStep {
                        label: label.to_string(),
                        expr: expr.clone(),
                        args: Vec::new(),
                    });
                }
                Resolved::Assert(a) => {
                    let n = a.frame.arity();
                    if stack.len() < n {
                        return Err(VerifyError::StackUnderflow {
                            step: i,
                            label: label.to_string(),
                        });
                    }
                    let args = stack.split_off(stack.len() - n);
                    let mut subst: HashMap<Sym, &[Sym]> = HashMap::new();
                    for (k, (hyp, &arg)) in a.frame.hypotheses.iter().zip(&args).enumerate() {
                        let value = &steps[arg].expr;
                        if hyp.kind == HypKind::Floating {
                            if value[0] != hyp.expr[0] {
                                return Err(self.mismatch(i, label, k, &hyp.expr, value));
                            }
                            subst.insert(hyp.expr[1], &value[1..]);
                        }
                    }
                    for (k, (hyp, &arg)) in a.frame.hypotheses.iter().zip(&args).enumerate() {
                        if hyp.kind == HypKind::Essential {
                            let want = substitute(&hyp.expr, &subst);
                            if want != steps[arg].expr {
                                return Err(self.mismatch(i, label, k, &want, &steps[arg].expr));
                            }
                        }
                    }
                    for &(x, y) in &a.frame.disjoint {
                        let (Some(sx), Some(sy)) = (subst.get(&x), subst.get(&y)) else {
                            continue;
                        };
                        for &u in sx.iter().filter(|s| self.db.is_variable(**s)) {
                            for &v in sy.iter().filter(|s| self.db.is_variable(**s)) {
                                let ok = u != v
                                    && match self.disjoint {
                                        DisjointMode::Enforce => self.frame.allows_disjoint(u, v),
                                        DisjointMode::Collect => true,
                                    };
                                if !ok {
                                    return Err(VerifyError::Disjoint {
                                        step: i,
                                        label: label.to_string(),
                                        a: self.db.symbol_name(u).to_string(),
                                        b: self.db.symbol_name(v).to_string(),
                                    });
                                }
                                required.insert(dv_pair(u, v));
                            }
                        }
                    }
                    let expr = substitute(&a.expr, &subst);
                    drop(subst);
                    stack.push(steps.len());
                    steps.push(TraceStep {
                        label: label.to_string(),
                        expr,
                        args,
                    });
                }
            }
        }
        if stack.len() != 1 {
            return Err(VerifyError::ResidualStack { count: stack.len() });
        }
        Ok(VerifiedTrace {
            steps,
            required_disjoint: required,
        })
    }

    /// Replays `labels` and checks that the single result equals `conclusion`.
    pub fn verify<S: AsRef<str>>(&self, conclusion: &[Sym], labels: &[S]) -> Result<VerifiedTrace, VerifyError> {
        let trace = self.trace(labels)?;
        if trace.conclusion().as_slice() != conclusion {
            return Err(VerifyError::FinalMismatch {
                expected: self.db.render(conclusion),
                found: self.db.render(trace.conclusion()),
            });
        }
        Ok(trace)
    }

    fn mismatch(&self, step: usize, label: &str, arg: usize, expected: &[Sym], found: &[Sym]) -> VerifyError {
        VerifyError::Mismatch {
            step,
            label: label.to_string(),
            arg,
            expected: self.db.render(expected),
            found: self.db.render(found),
        }
    }
}

pub(crate) fn substitute(expr: &[Sym], subst: &HashMap<Sym, &[Sym]>) -> Expr {
    let mut out = Vec::with_capacity(expr.len());
    out.push(expr[0]);
    for s in &expr[1..] {
        match subst.get(s) {
            Some(v) => out.extend_from_slice(v),
            None => out.push(*s),
        }
    }
    out
}

/// Replays `labels` under `frame` and checks that it proves `conclusion`.
pub fn verify_proof<S: AsRef<str>>(
    db: &Database,
    conclusion: &[Sym],
    labels: &[S],
    frame: &Frame,
) -> Result<VerifiedTrace, VerifyError> {
    Replay::new(db, frame).verify(conclusion, labels)
}

/// Verifies a stored provable assertion against its own proof, allowing only
/// earlier assertions.
pub fn verify_assertion(db: &Database, assertion: &Assertion) -> Result<VerifiedTrace, VerifyError> {
    Replay {
        before: assertion.index,
        ..Replay::new(db, &assertion.frame)
    }
    .verify(&assertion.expr, &assertion.proof)
}

#[derive(Debug, Clone)]
pub struct VerifyFailure {
    pub label: String,
    pub error: VerifyError,
}

/// Verifies every provable assertion in parallel; failures are returned in
/// database order.
pub fn verify_database(db: &Database) -> Vec<VerifyFailure> {
    use rayon::prelude::*;
    db.assertions()
        .par_iter()
        .filter(|a| a.is_provable())
        .filter_map(|a| {
            verify_assertion(db, a).err().map(|error| VerifyFailure {
                label: a.label.clone(),
                error,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const DB: &str = "$c ( ) -> wff |- $. $v ph ps ch $.
        wph $f wff ph $. wps $f wff ps $. wch $f wff ch $.
        wi $a wff ( ph -> ps ) $.
        ${ min $e |- ph $. maj $e |- ( ph -> ps ) $. ax-mp $a |- ps $. $}
        ax-1 $a |- ( ph -> ( ps -> ph ) ) $.
        ${ $d ph ps $. dx $a |- ( ph -> ps ) $. $}
        ${ a1i.1 $e |- ph $.
           a1i $p |- ( ps -> ph ) $= ( wi ax-1 ax-mp ) ABADCABEF $. $}";

    fn db() -> Database {
        Database::parse(DB).unwrap()
    }

    #[test]
    fn a1i_replays_to_its_conclusion() {
        let db = db();
        let a1i = db.assertion("a1i").unwrap();
        let trace = verify_assertion(&db, a1i).unwrap();
        assert_eq!(db.render(trace.conclusion()), "|- ( ps -> ph )");
        assert_eq!(trace.steps.len(), 9);
        assert_eq!(trace.steps[8].args, vec![0, 3, 4, 7]);
    }

    #[test]
    fn single_hypothesis_proof() {
        let db = db();
        let a1i = db.assertion("a1i").unwrap();
        let h = &a1i.frame.hypotheses[2];
        let trace = verify_proof(&db, &h.expr, &["a1i.1"], &a1i.frame).unwrap();
        assert_eq!(trace.steps.len(), 1);
    }

    #[test]
    fn error_paths() {
        let db = db();
        let a1i = db.assertion("a1i").unwrap();
        let frame = &a1i.frame;
        let concl = &a1i.expr;
        assert!(matches!(
            verify_proof(&db, concl, &["wph", "ax-mp"], frame),
            Err(VerifyError::StackUnderflow { .. })
        ));
        assert!(matches!(
            verify_proof(&db, concl, &["wph", "wps"], frame),
            Err(VerifyError::ResidualStack { count: 2 })
        ));
        assert!(matches!(
            verify_proof(&db, concl, &["wph", "wps", "ax-1"], frame),
            Err(VerifyError::FinalMismatch { .. })
        ));
        assert!(matches!(
            verify_proof(&db, concl, &["wph", "wps", "a1i.1", "a1i.1", "ax-mp"], frame),
            Err(VerifyError::Mismatch { arg: 3, .. })
        ));
        assert!(matches!(
            verify_proof(&db, concl, &["nope"], frame),
            Err(VerifyError::UnknownLabel { .. })
        ));
        assert!(matches!(
            verify_proof::<&str>(&db, concl, &[], frame),
            Err(VerifyError::EmptyProof)
        ));
    }

    #[test]
    fn disjointness_is_enforced() {
        let db = db();
        let a1i = db.assertion("a1i").unwrap();
        let ph = db.symbol("ph").unwrap();
        let ch = db.symbol("ch").unwrap();
        let mut frame = a1i.frame.clone();
        frame.optional_floats.push(db.hypothesis("wch").unwrap().clone());
        // Same variable on both sides.
        let err = Replay::new(&db, &frame).trace(&["wph", "wph", "dx"]).unwrap_err();
        assert!(err.is_disjointness());
        // Distinct variables but no `$d` in the proving frame.
        let err = Replay::new(&db, &frame).trace(&["wph", "wch", "dx"]).unwrap_err();
        assert!(err.is_disjointness());
        let collected = Replay {
            disjoint: DisjointMode::Collect,
            ..Replay::new(&db, &frame)
        }
        .trace(&["wph", "wch", "dx"])
        .unwrap();
        assert_eq!(collected.required_disjoint.into_iter().collect::<Vec<_>>(), vec![dv_pair(ph, ch)]);
        frame.optional_disjoint.insert(dv_pair(ph, ch));
        assert!(Replay::new(&db, &frame).trace(&["wph", "wch", "dx"]).is_ok());
    }

    #[test]
    fn forward_references_are_rejected() {
        let db = db();
        let a1i = db.assertion("a1i").unwrap();
        let replay = Replay {
            before: 1,
            ..Replay::new(&db, &a1i.frame)
        };
        assert!(matches!(
            replay.trace(&["wph", "wps", "ax-1"]),
            Err(VerifyError::ForwardReference { .. })
        ));
    }

    #[test]
    fn replay_is_deterministic() {
        let db = db();
        let a1i = db.assertion("a1i").unwrap();
        assert_eq!(verify_assertion(&db, a1i), verify_assertion(&db, a1i));
    }
}
