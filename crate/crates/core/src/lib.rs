//! Differential fuzzing for relational API pairs.
//!
//! Pairs of APIs that are likely related are found from signatures and
//! documentation ([`matcher`]), turned into concrete invocation plans
//! ([`synthesizer`]), confirmed or rejected by running them on traced inputs
//! ([`verifier`]), and then fuzzed for inconsistencies ([`fuzzer`]). The
//! [`driver`] repeats this while new APIs become covered. All execution goes
//! through an executor speaking the line protocol in [`protocol`].

pub mod corpus;
pub mod driver;
pub mod fuzzer;
pub mod matcher;
pub mod protocol;
pub mod synthesizer;
pub mod value;
pub mod verifier;

pub use corpus::{load_corpus, ApiEntry, ArgSpec, CorpusDb, InvocationRecord, Origin};
pub use driver::{run_campaign, CampaignConfig, CampaignError, CampaignReport, Labels};
pub use matcher::{top_k_pairs, CandidatePair, DocEmbedder, Matcher};
pub use protocol::{Executor, ExecutorFactory, PairedRequest, PairedResponse, Status, Tolerance};
pub use synthesizer::{synthesize_by_matching, synthesize_from_template, InvocationPlan};
pub use value::ValueRepr;
pub use verifier::Verdict;
