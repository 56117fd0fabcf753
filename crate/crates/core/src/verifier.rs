//! Dynamic verification of candidate pairs.
//!
//! A plan is run over the source API's verifying inputs. The pair is value
//! equivalent when every input gives equal statuses and, where both sides
//! succeed, equal values; status equivalent when only the statuses always
//! agree; rejected otherwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ApiEntry, InvocationRecord, Origin};
use crate::protocol::{
    CrashKind, ExecError, Executor, PairedRequest, PairedResponse, Side, SourceCall, Status, Tolerance, ValueSummary,
};
use crate::synthesizer::{InvocationPlan, PlanError, PlanKind};
use crate::value::is_float_dtype;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ValueEquivalent,
    StatusEquivalent,
    Rejected,
}

impl Verdict {
    pub fn is_accepted(self) -> bool {
        self != Verdict::Rejected
    }
}

/// Outcome of one verifying input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub input_hash: String,
    pub status_s: Status,
    pub status_t: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_equal: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception_s: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception_t: Option<String>,
}

impl Evidence {
    pub fn from_response(input_hash: String, resp: &PairedResponse) -> Self {
        Self {
            input_hash,
            status_s: resp.status_s,
            status_t: resp.status_t,
            value_equal: resp.value_equal,
            exception_s: resp.exception_s.clone(),
            exception_t: resp.exception_t.clone(),
        }
    }

    pub fn statuses_match(&self) -> bool {
        self.status_s == self.status_t
    }

    /// Both succeeded and the values differed.
    pub fn value_mismatch(&self) -> bool {
        self.status_s == Status::Success && self.status_t == Status::Success && self.value_equal != Some(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub verdict: Verdict,
    pub evidence: Vec<Evidence>,
}

/// True when the statuses agree on every input.
pub fn status_equivalent(evidence: &[Evidence]) -> bool {
    evidence.iter().all(Evidence::statuses_match)
}

/// Value equivalence first, then status equivalence. `compare_values` is
/// false for nondeterministic APIs, which can then be status equivalent at best.
pub fn classify(evidence: &[Evidence], compare_values: bool) -> Verdict {
    if !status_equivalent(evidence) {
        Verdict::Rejected
    } else if compare_values && !evidence.iter().any(Evidence::value_mismatch) {
        Verdict::ValueEquivalent
    } else {
        Verdict::StatusEquivalent
    }
}

/// Compares two value summaries from successful calls.
///
/// Shape and dtype must match exactly. Float content is compared
/// element-wise with `|x - y| <= atol + rtol * |y|` (NaN equals NaN, equal
/// infinities are equal); everything else must match exactly, hash included.
pub fn compare_values(a: &ValueSummary, b: &ValueSummary, tol: &Tolerance) -> bool {
    if a.shape != b.shape || a.dtype != b.dtype || a.head.len() != b.head.len() {
        return false;
    }
    if is_float_dtype(&a.dtype) {
        a.head.iter().zip(&b.head).all(|(&x, &y)| {
            if x.is_nan() || y.is_nan() {
                return x.is_nan() && y.is_nan();
            }
            x == y || (x - y).abs() <= tol.atol + tol.rtol * y.abs()
        })
    } else {
        a.hash == b.hash
            && a.head
                .iter()
                .zip(&b.head)
                .all(|(x, y)| x.to_bits() == y.to_bits() || x == y)
    }
}

/// A crash observed while running a pair, reported as a bug candidate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CrashCandidate {
    pub source: String,
    pub target: String,
    pub side: Side,
    pub kind: CrashKind,
    pub input_hash: String,
    pub phase: String,
}

pub(crate) fn crash_candidates(
    plan: &InvocationPlan,
    resp: &PairedResponse,
    input_hash: &str,
    phase: &str,
) -> Vec<CrashCandidate> {
    let mut out = Vec::new();
    let sides = [
        (Side::Source, resp.status_s, resp.crash_s),
        (Side::Target, resp.status_t, resp.crash_t),
    ];
    for (side, status, kind) in sides {
        let kind = kind.unwrap_or(CrashKind::Internal);
        if status == Status::Crash && kind != CrashKind::NotExecuted {
            out.push(CrashCandidate {
                source: plan.source.clone(),
                target: plan.target.clone(),
                side,
                kind,
                input_hash: input_hash.to_string(),
                phase: phase.to_string(),
            });
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("no verifying inputs for {0}")]
    NoInputs(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Executor(#[from] ExecError),
}

/// Per-call settings shared by verification and fuzzing.
#[derive(Debug, Clone, Copy)]
pub struct RunSettings {
    pub tolerance: Tolerance,
    pub timeout_ms: u64,
    pub iteration: usize,
}

/// Hands out request ids unique within one connection.
#[derive(Debug, Default)]
pub struct RequestIds(u64);

impl RequestIds {
    pub fn next_id(&mut self) -> u64 {
        self.0 += 1;
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub verdict: PairVerdict,
    /// Successful target invocations, for insertion when the target is new.
    pub target_records: Vec<InvocationRecord>,
    pub crashes: Vec<CrashCandidate>,
}

/// Builds the paired request for one source invocation.
pub fn build_request(
    plan: &InvocationPlan,
    source: &ApiEntry,
    target: &ApiEntry,
    input: &InvocationRecord,
    settings: &RunSettings,
    id: u64,
) -> Result<PairedRequest, PlanError> {
    let call = plan.target_call(source, target, input)?;
    Ok(PairedRequest {
        id,
        source: SourceCall {
            api: input.api.clone(),
            positional: input.positional.clone(),
            keyword: input.keyword.clone(),
        },
        target: call,
        tolerance: settings.tolerance,
        timeout_ms: settings.timeout_ms,
    })
}

/// Runs `plan` over `inputs` and classifies the pair.
#[allow(clippy::too_many_arguments)]
pub fn verify_pair(
    plan: &InvocationPlan,
    source: &ApiEntry,
    target: &ApiEntry,
    inputs: &[InvocationRecord],
    exec: &mut dyn Executor,
    ids: &mut RequestIds,
    settings: &RunSettings,
    collect_target_records: bool,
) -> Result<VerifyOutcome, VerifyError> {
    if inputs.is_empty() {
        return Err(VerifyError::NoInputs(plan.source.clone()));
    }
    let mut evidence = Vec::with_capacity(inputs.len());
    let mut target_records = Vec::new();
    let mut crashes = Vec::new();
    for input in inputs {
        let req = build_request(plan, source, target, input, settings, ids.next_id())?;
        let resp = exec.call_paired(&req)?;
        let hash = input.input_hash();
        crashes.extend(crash_candidates(plan, &resp, &hash, "verify"));
        if collect_target_records && resp.status_t == Status::Success {
            let origin = Origin::Synthesized {
                iteration: settings.iteration,
            };
            if let Some(rec) = InvocationPlan::target_record(&req.target, origin) {
                target_records.push(rec);
            }
        }
        evidence.push(Evidence::from_response(hash, &resp));
    }
    let compare = !(source.nondeterministic || target.nondeterministic);
    let verdict = classify(&evidence, compare);
    Ok(VerifyOutcome {
        verdict: PairVerdict { verdict, evidence },
        target_records,
        crashes,
    })
}

/// Stable identifier of a plan, used for RNG derivation and dedup.
pub fn plan_id(plan: &InvocationPlan) -> String {
    let kind = match plan.kind {
        PlanKind::ArgMatch => "arg-match",
        PlanKind::Template => "template",
    };
    format!("{}->{}#{}", plan.source, plan.target, kind)
}
