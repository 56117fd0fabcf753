//! Scriptable executor used by tests and hermetic campaigns.
//!
//! A script is an ordered rule table. The first rule whose filters all match
//! a request decides the outcome; `default` applies when none does, and a
//! request that matches nothing without a default is an error.
//!
//! ```json
//! {
//!   "rules": [
//!     {"source": "mini.avg_pool", "target": "mini.max_pool",
//!      "when": ["negative_dim"],
//!      "outcome": {"status_t": "exception", "exception_t": "RuntimeError"}},
//!     {"source": "*", "target": "*", "request": 3, "outcome": {"die": "target"}}
//!   ],
//!   "default": {"value_equal": false}
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    CrashKind, ExecError, Executor, ExecutorFactory, PairedRequest, PairedResponse, Side, Status, ValueSummary,
};
use crate::synthesizer::TargetCall;
use crate::value::ValueRepr;
use crate::verifier::compare_values;

/// Predicate over the source call's argument values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Some tensor argument has a negative dimension.
    NegativeDim,
    /// Some tensor argument has a zero dimension.
    EmptyTensor,
    /// The positional integer at `position` lies outside `[lo, hi]`.
    IntOutside {
        position: usize,
        lo: i64,
        hi: i64,
    },
    /// Some tensor argument has one of these dtypes.
    DtypeIn(Vec<String>),
    Not(Box<Condition>),
}

impl Condition {
    pub fn holds(&self, req: &PairedRequest) -> bool {
        match self {
            Condition::NegativeDim => any_tensor(req, &|t| t.shape.iter().any(|d| *d < 0)),
            Condition::EmptyTensor => any_tensor(req, &|t| t.shape.contains(&0)),
            Condition::IntOutside { position, lo, hi } => matches!(
                req.source.positional.get(*position),
                Some(ValueRepr::Int { value }) if value < lo || value > hi
            ),
            Condition::DtypeIn(dtypes) => any_tensor(req, &|t| dtypes.contains(&t.dtype)),
            Condition::Not(inner) => !inner.holds(req),
        }
    }
}

fn any_tensor(req: &PairedRequest, pred: &dyn Fn(&crate::value::TensorSpec) -> bool) -> bool {
    fn walk(v: &ValueRepr, pred: &dyn Fn(&crate::value::TensorSpec) -> bool) -> bool {
        match v {
            ValueRepr::Tensor(t) => pred(t),
            ValueRepr::List { items } | ValueRepr::Tuple { items } => items.iter().any(|i| walk(i, pred)),
            _ => false,
        }
    }
    req.source.values().any(|v| walk(v, pred))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    Call,
    Template,
}

/// What the scripted executor does for a request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockOutcome {
    #[serde(default = "success")]
    pub status_s: Status,
    #[serde(default = "success")]
    pub status_t: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception_s: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception_t: Option<String>,
    /// Explicit comparison result; otherwise derived from the summaries, and
    /// `true` when neither is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_equal: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_s: Option<ValueSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_t: Option<ValueSummary>,
    /// Kill the executor while this side runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub die: Option<Side>,
    /// Never answer while this side runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hang: Option<Side>,
}

fn success() -> Status {
    Status::Success
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default = "wildcard")]
    pub source: String,
    #[serde(default = "wildcard")]
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<TargetMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hash: Option<String>,
    /// 1-based ordinal of the request on this connection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub when: Vec<Condition>,
    pub outcome: MockOutcome,
}

fn wildcard() -> String {
    "*".to_string()
}

fn name_matches(pattern: &str, name: &str) -> bool {
    pattern == "*" || pattern == name
}

impl MockRule {
    pub fn matches(&self, ordinal: u64, req: &PairedRequest) -> bool {
        let mode = match req.target {
            TargetCall::Call { .. } => TargetMode::Call,
            TargetCall::Template { .. } => TargetMode::Template,
        };
        name_matches(&self.source, &req.source.api)
            && name_matches(&self.target, req.target.api())
            && self.mode.is_none_or(|m| m == mode)
            && self.request.is_none_or(|n| n == ordinal)
            && self.input_hash.as_ref().is_none_or(|h| *h == req.source.input_hash())
            && self.when.iter().all(|c| c.holds(req))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<MockOutcome>,
}

/// Resolved behaviour for one request.
#[derive(Debug, Clone, PartialEq)]
pub enum MockAction {
    Respond(PairedResponse),
    Die {
        side: Side,
        source: (Status, Option<String>),
    },
    Hang {
        side: Side,
        source: (Status, Option<String>),
    },
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExecError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| ExecError::Protocol(format!("invalid mock script: {e}")))
    }

    /// Every request succeeds on both sides with equal values.
    pub fn all_equal() -> Self {
        Self {
            rules: Vec::new(),
            default: Some(MockOutcome::default()),
        }
    }

    pub fn with_rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn resolve(&self, ordinal: u64, req: &PairedRequest) -> Result<MockAction, ExecError> {
        let outcome = self
            .rules
            .iter()
            .find(|r| r.matches(ordinal, req))
            .map(|r| &r.outcome)
            .or(self.default.as_ref())
            .ok_or_else(|| {
                ExecError::Unscripted(format!(
                    "request #{ordinal} {} -> {} (input {})",
                    req.source.api,
                    req.target.api(),
                    req.source.input_hash()
                ))
            })?;
        let source = (outcome.status_s, outcome.exception_s.clone());
        if let Some(side) = outcome.die {
            return Ok(MockAction::Die { side, source });
        }
        if let Some(side) = outcome.hang {
            return Ok(MockAction::Hang { side, source });
        }
        let both_ok = outcome.status_s == Status::Success && outcome.status_t == Status::Success;
        let value_equal = both_ok.then(|| {
            outcome
                .value_equal
                .unwrap_or_else(|| match (&outcome.summary_s, &outcome.summary_t) {
                    (Some(a), Some(b)) => compare_values(a, b, &req.tolerance),
                    _ => true,
                })
        });
        let crash = |s: Status| (s == Status::Crash).then_some(CrashKind::Internal);
        Ok(MockAction::Respond(PairedResponse {
            id: req.id,
            status_s: outcome.status_s,
            status_t: outcome.status_t,
            value_equal,
            exception_s: outcome.exception_s.clone(),
            exception_t: outcome.exception_t.clone(),
            summary_s: outcome.summary_s.clone(),
            summary_t: outcome.summary_t.clone(),
            crash_s: crash(outcome.status_s),
            crash_t: crash(outcome.status_t),
        }))
    }
}

/// In-process executor replaying a [`MockScript`].
///
/// Scripted deaths and hangs behave like a supervised process: the request
/// yields a Crash outcome and the connection counts a restart.
#[derive(Debug, Clone)]
pub struct MockExecutor {
    script: MockScript,
    served: u64,
    restarts: usize,
    max_restarts: usize,
}

impl MockExecutor {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            served: 0,
            restarts: 0,
            max_restarts: usize::MAX,
        }
    }

    pub fn with_max_restarts(mut self, max_restarts: usize) -> Self {
        self.max_restarts = max_restarts;
        self
    }

    pub fn served(&self) -> u64 {
        self.served
    }
}

impl Executor for MockExecutor {
    fn call_paired(&mut self, req: &PairedRequest) -> Result<PairedResponse, ExecError> {
        self.served += 1;
        let (side, kind, source) = match self.script.resolve(self.served, req)? {
            MockAction::Respond(resp) => return Ok(resp),
            MockAction::Die { side, source } => (side, CrashKind::Died, source),
            MockAction::Hang { side, source } => (side, CrashKind::Timeout, source),
        };
        if self.restarts >= self.max_restarts {
            return Err(ExecError::RestartBudget(self.restarts));
        }
        self.restarts += 1;
        Ok(PairedResponse::crashed(req.id, side, kind, Some(source)))
    }

    fn restarts(&self) -> usize {
        self.restarts
    }
}

#[derive(Debug, Clone)]
pub struct MockFactory {
    pub script: MockScript,
}

impl MockFactory {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }
}

impl ExecutorFactory for MockFactory {
    fn connect(&self, _worker: usize) -> Result<Box<dyn Executor>, ExecError> {
        Ok(Box::new(MockExecutor::new(self.script.clone())))
    }
}
