//! Executor wire protocol.
//!
//! Executors are long-lived processes speaking newline-delimited JSON over
//! stdin/stdout: one request line in, exactly one response line out. Nothing
//! else may be written to stdout. On startup an executor prints
//! `{"ready":true,"protocol":1}`.
//!
//! Each request runs the source call and then the target call in the same
//! process. Before starting each side an executor should print a phase
//! marker on stderr, e.g. `{"phase":"target","id":7,"source_status":"success"}`,
//! so that a process death can be attributed to the side that was running.
//! Without markers a death is attributed to the source.

pub mod mock;
pub mod process;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::input_hash;
use crate::synthesizer::TargetCall;
use crate::value::{float_vec_serde, ValueRepr};

pub use mock::{MockExecutor, MockFactory, MockScript};
pub use process::{ProcessConfig, ProcessExecutor, ProcessFactory};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT_MS: u64 = 5000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    #[default]
    Success,
    Exception,
    Crash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashKind {
    /// The process exited or was killed by a signal.
    Died,
    /// No response within the request timeout.
    Timeout,
    /// The executor reported an internal assertion or fatal error.
    Internal,
    /// The side never ran because the other side crashed first.
    NotExecuted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

/// Float comparison bounds: `|x - y| <= atol + rtol * |y|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rtol: 1e-3, atol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceCall {
    pub api: String,
    pub positional: Vec<ValueRepr>,
    #[serde(default)]
    pub keyword: BTreeMap<String, ValueRepr>,
}

impl SourceCall {
    pub fn input_hash(&self) -> String {
        input_hash(&self.api, &self.positional, &self.keyword)
    }

    /// All argument values, positional first then keywords by name.
    pub fn values(&self) -> impl Iterator<Item = &ValueRepr> {
        self.positional.iter().chain(self.keyword.values())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRequest {
    pub id: u64,
    pub source: SourceCall,
    pub target: TargetCall,
    pub tolerance: Tolerance,
    pub timeout_ms: u64,
}

/// Compact description of a returned value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSummary {
    #[serde(default)]
    pub shape: Vec<i64>,
    pub dtype: String,
    /// Leading elements, flattened.
    #[serde(default, with = "float_vec_serde")]
    pub head: Vec<f64>,
    #[serde(default)]
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedResponse {
    pub id: u64,
    pub status_s: Status,
    pub status_t: Status,
    /// Present iff both sides succeeded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_equal: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception_s: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception_t: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_s: Option<ValueSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_t: Option<ValueSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crash_s: Option<CrashKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crash_t: Option<CrashKind>,
}

impl PairedResponse {
    /// Response for a request whose executor died or hung while running `side`.
    /// `source_outcome` is what the source produced when the target side was
    /// the one that failed.
    pub fn crashed(id: u64, side: Side, kind: CrashKind, source_outcome: Option<(Status, Option<String>)>) -> Self {
        match side {
            Side::Source => Self {
                id,
                status_s: Status::Crash,
                status_t: Status::Crash,
                value_equal: None,
                exception_s: None,
                exception_t: None,
                summary_s: None,
                summary_t: None,
                crash_s: Some(kind),
                crash_t: Some(CrashKind::NotExecuted),
            },
            Side::Target => {
                let (status_s, exception_s) = source_outcome.unwrap_or((Status::Success, None));
                Self {
                    id,
                    status_s,
                    status_t: Status::Crash,
                    value_equal: None,
                    exception_s,
                    exception_t: None,
                    summary_s: None,
                    summary_t: None,
                    crash_s: None,
                    crash_t: Some(kind),
                }
            }
        }
    }

    /// Checks the `value_equal` presence rule.
    pub fn validate(&self) -> Result<(), String> {
        let both_ok = self.status_s == Status::Success && self.status_t == Status::Success;
        if both_ok != self.value_equal.is_some() {
            return Err(format!(
                "response {}: value_equal must be present exactly when both sides succeed",
                self.id
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub ready: bool,
    pub protocol: u32,
}

/// Stderr line announcing which side an executor is about to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMarker {
    pub phase: Side,
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_status: Option<Status>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_exception: Option<String>,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("failed to launch executor `{command}`: {source}")]
    Launch {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("executor handshake failed: {0}")]
    Handshake(String),
    #[error("executor restart budget exhausted after {0} restarts")]
    RestartBudget(usize),
    #[error("executor protocol violation: {0}")]
    Protocol(String),
    #[error("mock executor has no scripted outcome for {0}")]
    Unscripted(String),
    #[error("executor i/o failed: {0}")]
    Io(#[from] std::io::Error),
}

/// One executor connection. At most one request is in flight.
pub trait Executor: Send {
    fn call_paired(&mut self, req: &PairedRequest) -> Result<PairedResponse, ExecError>;

    /// How many times the underlying executor has been restarted.
    fn restarts(&self) -> usize {
        0
    }
}

/// Creates independent executor connections for a worker pool.
pub trait ExecutorFactory: Send + Sync {
    fn connect(&self, worker: usize) -> Result<Box<dyn Executor>, ExecError>;
}

pub fn call_paired(exec: &mut dyn Executor, req: &PairedRequest) -> Result<PairedResponse, ExecError> {
    exec.call_paired(req)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::tests_support::arb_value;
    use proptest::prelude::*;

    fn request(id: u64, positional: Vec<ValueRepr>) -> PairedRequest {
        PairedRequest {
            id,
            source: SourceCall {
                api: "mini.sum".into(),
                positional: positional.clone(),
                keyword: BTreeMap::new(),
            },
            target: TargetCall::Call {
                api: "mini.total".into(),
                positional,
                keyword: BTreeMap::from([("dim".to_string(), ValueRepr::int(0))]),
            },
            tolerance: Tolerance::default(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }

    #[test]
    fn wire_shapes() {
        let h = serde_json::to_string(&Handshake {
            ready: true,
            protocol: 1,
        })
        .unwrap();
        assert_eq!(h, r#"{"ready":true,"protocol":1}"#);
        let r = PairedResponse::crashed(4, Side::Source, CrashKind::Timeout, None);
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"id":4,"status_s":"crash","status_t":"crash","crash_s":"timeout","crash_t":"not_executed"}"#
        );
        let r = PairedResponse::crashed(5, Side::Target, CrashKind::Died, None);
        assert_eq!((r.status_s, r.status_t), (Status::Success, Status::Crash));
        assert!(r.validate().is_ok());
    }

    #[test]
    fn value_equal_presence_rule() {
        let mut r = PairedResponse::crashed(1, Side::Target, CrashKind::Died, None);
        r.status_t = Status::Success;
        assert!(r.validate().is_err());
        r.value_equal = Some(true);
        assert!(r.validate().is_ok());
    }

    proptest! {
        #[test]
        fn request_round_trip(id in any::<u64>(), vals in prop::collection::vec(arb_value(), 0..4)) {
            let req = request(id, vals);
            let text = serde_json::to_string(&req).unwrap();
            let back: PairedRequest = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), text);
        }

        #[test]
        fn response_round_trip(
            id in any::<u64>(),
            s in 0u8..3, t in 0u8..3,
            eq in any::<bool>(),
            head in prop::collection::vec(any::<f64>(), 0..5),
        ) {
            let status = |x: u8| [Status::Success, Status::Exception, Status::Crash][x as usize];
            let (status_s, status_t) = (status(s), status(t));
            let both = status_s == Status::Success && status_t == Status::Success;
            let resp = PairedResponse {
                id,
                status_s,
                status_t,
                value_equal: both.then_some(eq),
                exception_s: (status_s == Status::Exception).then(|| "ValueError".to_string()),
                exception_t: None,
                summary_s: Some(ValueSummary { shape: vec![head.len() as i64], dtype: "float32".into(), head, hash: "ab".into() }),
                summary_t: None,
                crash_s: (status_s == Status::Crash).then_some(CrashKind::Died),
                crash_t: None,
            };
            let text = serde_json::to_string(&resp).unwrap();
            let back: PairedResponse = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), text);
            prop_assert!(back.validate().is_ok());
        }
    }
}
