//! Parsing, proof-tree expansion, theorem extraction and proof refactoring
//! for Metamath databases.

pub mod baseline;
pub mod database;
pub mod dataset;
pub mod expansion;
pub mod extraction;
pub mod metrics;
pub mod refactor;
pub mod synth;
pub mod tree;
pub mod verify;

pub use database::{Assertion, AssertionKind, Database, Expr, Frame, HypKind, Hypothesis, ParseError, Sym};
pub use tree::{build_tree, linearize, subtree_above, ProofNode, ProofTree, TreeError};
pub use verify::{verify_assertion, verify_database, verify_proof, VerifiedTrace, VerifyError};
pub use expansion::{enumerate_expansions, expand_once, ExpansionError, ExpansionRecord, Expansions};
pub use extraction::{
    check_structure, dedup, dedup_key, read_fragment, threshold_mask, verify_extraction, write_fragment, Category,
    ExtractedTheorem, ExtractionOptions, ExtractionVerdict, Extractor, PredictionMask, Structure,
};
pub use refactor::{match_at, refactor_database, refactor_proof, Match, Pattern, RefactorStats, Refactored};
pub use baseline::{match_rate_vs_library, mine_node_closures, top_n, FrequencyTable};
pub use dataset::{build_dataset, Dataset, DatasetReport, DatasetSpec, GraphNode, GraphRecord, Split};
pub use metrics::{reference_loss, score_predictions, Scores};
