//! Differential fuzzing of verified pairs.
//!
//! Inputs are mutated from the source API's traced invocations. A status
//! equivalent pair is inconsistent when the two statuses differ; a value
//! equivalent pair additionally when both succeed with different values.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ApiEntry, InvocationRecord};
use crate::protocol::{Executor, PairedResponse, Status, ValueSummary};
use crate::synthesizer::{InvocationPlan, PlanKind};
use crate::value::{TensorContent, ValueRepr};
use crate::verifier::{
    build_request, crash_candidates, plan_id, CrashCandidate, RequestIds, RunSettings, Verdict, VerifyError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MutationRule {
    TensorShape,
    TensorDtype,
    TensorContent,
    IntBoundary,
    FloatBoundary,
    BoolFlip,
    StrPool,
    ListResize,
}

impl MutationRule {
    pub fn applies_to(self, v: &ValueRepr) -> bool {
        match self {
            MutationRule::TensorShape | MutationRule::TensorDtype | MutationRule::TensorContent => {
                matches!(v, ValueRepr::Tensor(_))
            }
            MutationRule::IntBoundary => matches!(v, ValueRepr::Int { .. }),
            MutationRule::FloatBoundary => matches!(v, ValueRepr::Float { .. }),
            MutationRule::BoolFlip => matches!(v, ValueRepr::Bool { .. }),
            MutationRule::StrPool => matches!(v, ValueRepr::Str { .. }),
            MutationRule::ListResize => match v {
                ValueRepr::List { items } | ValueRepr::Tuple { items } => !items.is_empty(),
                _ => false,
            },
        }
    }
}

const ALL_RULES: [MutationRule; 8] = [
    MutationRule::TensorShape,
    MutationRule::TensorDtype,
    MutationRule::TensorContent,
    MutationRule::IntBoundary,
    MutationRule::FloatBoundary,
    MutationRule::BoolFlip,
    MutationRule::StrPool,
    MutationRule::ListResize,
];

const DTYPES: [&str; 7] = ["float16", "float32", "float64", "int32", "int64", "bool", "complex64"];
const STR_POOL: [&str; 9] = ["", "mean", "sum", "none", "max", "valid", "same", "reflect", "invalid"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MutationConfig {
    /// Allow NaN and infinities in float boundaries and tensor content.
    pub non_finite: bool,
}

/// Applies `rule` to `v`, or returns `None` when the rule does not apply.
pub fn apply_rule(rule: MutationRule, v: &ValueRepr, rng: &mut impl Rng, cfg: &MutationConfig) -> Option<ValueRepr> {
    if !rule.applies_to(v) {
        return None;
    }
    let out = match (rule, v) {
        (MutationRule::TensorShape, ValueRepr::Tensor(t)) => {
            let mut t = t.clone();
            if t.shape.is_empty() || rng.gen_ratio(1, 8) {
                t.shape.push(rng.gen_range(0..4));
            } else if rng.gen_ratio(1, 8) {
                let i = rng.gen_range(0..t.shape.len());
                t.shape.remove(i);
            } else {
                let i = rng.gen_range(0..t.shape.len());
                let d = t.shape[i];
                let choices = [0, -1, -d.max(1), 1, d.saturating_add(1), d.saturating_mul(2)];
                t.shape[i] = *choices.choose(rng).unwrap();
            }
            if let TensorContent::Inline(_) = t.content {
                t.content = TensorContent::Seed(rng.gen());
            }
            ValueRepr::Tensor(t)
        }
        (MutationRule::TensorDtype, ValueRepr::Tensor(t)) => {
            let mut t = t.clone();
            let pool: Vec<&str> = DTYPES.iter().copied().filter(|d| *d != t.dtype).collect();
            t.dtype = pool.choose(rng).unwrap().to_string();
            ValueRepr::Tensor(t)
        }
        (MutationRule::TensorContent, ValueRepr::Tensor(t)) => {
            let mut t = t.clone();
            match &mut t.content {
                TensorContent::Seed(s) => *s ^= rng.gen::<u64>(),
                TensorContent::Inline(vals) if vals.is_empty() => {
                    t.content = TensorContent::Seed(rng.gen());
                }
                TensorContent::Inline(vals) => {
                    let i = rng.gen_range(0..vals.len());
                    vals[i] = float_boundary(vals[i], rng, cfg);
                }
            }
            ValueRepr::Tensor(t)
        }
        (MutationRule::IntBoundary, ValueRepr::Int { value }) => {
            let v = *value;
            let choices = [
                0,
                1,
                -1,
                v.saturating_add(1),
                v.saturating_sub(1),
                v.saturating_neg(),
                i32::MAX as i64,
                i32::MIN as i64,
            ];
            ValueRepr::int(*choices.choose(rng).unwrap())
        }
        (MutationRule::FloatBoundary, ValueRepr::Float { value }) => ValueRepr::float(float_boundary(*value, rng, cfg)),
        (MutationRule::BoolFlip, ValueRepr::Bool { value }) => ValueRepr::bool(!value),
        (MutationRule::StrPool, ValueRepr::Str { value }) => {
            let pool: Vec<&str> = STR_POOL.iter().copied().filter(|s| s != value).collect();
            ValueRepr::str(*pool.choose(rng).unwrap())
        }
        (MutationRule::ListResize, ValueRepr::List { items } | ValueRepr::Tuple { items }) => {
            let mut items = items.clone();
            match rng.gen_range(0..3) {
                0 => {
                    let i = rng.gen_range(0..items.len());
                    items.remove(i);
                }
                1 => {
                    let i = rng.gen_range(0..items.len());
                    items.insert(i, items[i].clone());
                }
                _ => {
                    let i = rng.gen_range(0..items.len());
                    if let Some((m, _)) = mutate_value(&items[i], rng, cfg) {
                        items[i] = m;
                    }
                }
            }
            match v {
                ValueRepr::Tuple { .. } => ValueRepr::Tuple { items },
                _ => ValueRepr::List { items },
            }
        }
        _ => unreachable!("rule applicability checked above"),
    };
    Some(out)
}

fn float_boundary(x: f64, rng: &mut impl Rng, cfg: &MutationConfig) -> f64 {
    let mut choices = vec![0.0, -0.0, 1.0, -1.0, -x, x * 1e10, 1e-30, 1e38, -1e38];
    if cfg.non_finite {
        choices.extend([f64::NAN, f64::INFINITY, f64::NEG_INFINITY]);
    }
    *choices.choose(rng).unwrap()
}

/// Mutates a value with one applicable rule, chosen uniformly.
pub fn mutate_value(v: &ValueRepr, rng: &mut impl Rng, cfg: &MutationConfig) -> Option<(ValueRepr, MutationRule)> {
    let rules: Vec<MutationRule> = ALL_RULES.iter().copied().filter(|r| r.applies_to(v)).collect();
    let rule = *rules.choose(rng)?;
    apply_rule(rule, v, rng, cfg).map(|m| (m, rule))
}

/// Mutates one or two arguments of a seed invocation.
pub fn mutate_invocation(seed: &InvocationRecord, rng: &mut impl Rng, cfg: &MutationConfig) -> InvocationRecord {
    let mut out = seed.clone();
    let slots = out.positional.len() + out.keyword.len();
    if slots == 0 {
        return out;
    }
    let rounds = if slots > 1 && rng.gen_ratio(1, 4) { 2 } else { 1 };
    for _ in 0..rounds {
        let i = rng.gen_range(0..slots);
        let slot = if i < out.positional.len() {
            &mut out.positional[i]
        } else {
            let key = out.keyword.keys().nth(i - out.positional.len()).unwrap().clone();
            out.keyword.get_mut(&key).unwrap()
        };
        if let Some((m, _)) = mutate_value(slot, rng, cfg) {
            *slot = m;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    Status,
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideOutcome {
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<ValueSummary>,
}

/// A fuzzed input on which the two APIs of a verified pair disagree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inconsistency {
    pub source: String,
    pub target: String,
    pub plan: PlanKind,
    pub oracle: Oracle,
    pub input: InvocationRecord,
    pub input_hash: String,
    pub source_outcome: SideOutcome,
    pub target_outcome: SideOutcome,
    pub dedup_key: String,
}

/// Applies the pair's oracle to one response.
pub fn judge(verdict: Verdict, resp: &PairedResponse) -> Option<Oracle> {
    match verdict {
        Verdict::Rejected => None,
        _ if resp.status_s != resp.status_t => Some(Oracle::Status),
        Verdict::ValueEquivalent if resp.status_s == Status::Success && resp.value_equal == Some(false) => {
            Some(Oracle::Value)
        }
        _ => None,
    }
}

fn exception_class(e: &Option<String>) -> &str {
    e.as_deref()
        .map(|s| s.split(':').next().unwrap_or(s).trim())
        .unwrap_or("-")
}

fn dedup_key(plan: &InvocationPlan, oracle: Oracle, resp: &PairedResponse) -> String {
    format!(
        "{}|{:?}|{:?}/{:?}|{}/{}",
        plan_id(plan),
        oracle,
        resp.status_s,
        resp.status_t,
        exception_class(&resp.exception_s),
        exception_class(&resp.exception_t)
    )
}

/// Derives the generator for one pair from the campaign seed, so results do
/// not depend on scheduling.
pub fn pair_rng(seed: u64, plan: &InvocationPlan) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(plan_id(plan).as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FuzzOutcome {
    pub executed: usize,
    pub inconsistencies: Vec<Inconsistency>,
    pub crashes: Vec<CrashCandidate>,
}

pub struct FuzzJob<'a> {
    pub plan: &'a InvocationPlan,
    pub verdict: Verdict,
    pub source: &'a ApiEntry,
    pub target: &'a ApiEntry,
    pub seeds: &'a [InvocationRecord],
    pub count: usize,
    pub seed: u64,
    pub mutation: MutationConfig,
}

/// Runs `job.count` mutated inputs through the pair, keeping the first
/// inconsistency per dedup key.
pub fn fuzz_pair(
    job: &FuzzJob<'_>,
    exec: &mut dyn Executor,
    ids: &mut RequestIds,
    settings: &RunSettings,
) -> Result<FuzzOutcome, VerifyError> {
    let mut out = FuzzOutcome::default();
    if job.verdict == Verdict::Rejected || job.seeds.is_empty() {
        return Ok(out);
    }
    let mut rng = pair_rng(job.seed, job.plan);
    let mut seen = BTreeSet::new();
    for _ in 0..job.count {
        let seed = job.seeds.choose(&mut rng).unwrap();
        let input = mutate_invocation(seed, &mut rng, &job.mutation);
        let Ok(req) = build_request(job.plan, job.source, job.target, &input, settings, ids.next_id()) else {
            // the mutation produced an unbindable call; skip it
            continue;
        };
        let resp = exec.call_paired(&req)?;
        out.executed += 1;
        let hash = input.input_hash();
        out.crashes.extend(crash_candidates(job.plan, &resp, &hash, "fuzz"));
        let Some(oracle) = judge(job.verdict, &resp) else {
            continue;
        };
        let key = dedup_key(job.plan, oracle, &resp);
        if !seen.insert(key.clone()) {
            continue;
        }
        out.inconsistencies.push(Inconsistency {
            source: job.plan.source.clone(),
            target: job.plan.target.clone(),
            plan: job.plan.kind,
            oracle,
            input,
            input_hash: hash,
            source_outcome: SideOutcome {
                status: resp.status_s,
                exception: resp.exception_s.clone(),
                summary: resp.summary_s.clone(),
            },
            target_outcome: SideOutcome {
                status: resp.status_t,
                exception: resp.exception_t.clone(),
                summary: resp.summary_t.clone(),
            },
            dedup_key: key,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ArgSpec;
    use crate::protocol::mock::{Condition, MockOutcome, MockRule};
    use crate::protocol::{MockExecutor, MockScript, Tolerance};
    use crate::synthesizer::synthesize_by_matching;
    use crate::value::tests_support::arb_value;
    use proptest::prelude::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn int_boundaries_come_from_the_pool() {
        let mut r = rng();
        let cfg = MutationConfig::default();
        let pool = [0, 1, -1, 8, 6, -7, i32::MAX as i64, i32::MIN as i64];
        let mut seen = BTreeSet::new();
        for _ in 0..400 {
            let ValueRepr::Int { value } =
                apply_rule(MutationRule::IntBoundary, &ValueRepr::int(7), &mut r, &cfg).unwrap()
            else {
                panic!("int rule changed the kind");
            };
            assert!(pool.contains(&value), "{value}");
            seen.insert(value);
        }
        assert_eq!(seen.len(), pool.len());
    }

    #[test]
    fn non_finite_floats_need_the_flag() {
        let mut r = rng();
        let off = MutationConfig::default();
        for _ in 0..500 {
            let ValueRepr::Float { value } =
                apply_rule(MutationRule::FloatBoundary, &ValueRepr::float(2.5), &mut r, &off).unwrap()
            else {
                panic!()
            };
            assert!(value.is_finite());
        }
        let on = MutationConfig { non_finite: true };
        let hit =
            (0..500).any(
                |_| match apply_rule(MutationRule::FloatBoundary, &ValueRepr::float(2.5), &mut r, &on) {
                    Some(ValueRepr::Float { value }) => !value.is_finite(),
                    _ => false,
                },
            );
        assert!(hit);
    }

    #[test]
    fn shape_rule_reaches_negative_and_zero_dims() {
        let mut r = rng();
        let cfg = MutationConfig::default();
        let t = ValueRepr::tensor_seeded(vec![3, 4], "float32", 1);
        let mut neg = false;
        let mut zero = false;
        for _ in 0..300 {
            if let Some(ValueRepr::Tensor(m)) = apply_rule(MutationRule::TensorShape, &t, &mut r, &cfg) {
                neg |= m.shape.iter().any(|d| *d < 0);
                zero |= m.shape.contains(&0);
            }
        }
        assert!(neg && zero);
    }

    #[test]
    fn inapplicable_rules_return_none() {
        let mut r = rng();
        let cfg = MutationConfig::default();
        assert!(apply_rule(MutationRule::BoolFlip, &ValueRepr::int(1), &mut r, &cfg).is_none());
        assert!(mutate_value(&ValueRepr::None, &mut r, &cfg).is_none());
        assert!(mutate_value(&ValueRepr::List { items: vec![] }, &mut r, &cfg).is_none());
        assert_eq!(
            apply_rule(MutationRule::BoolFlip, &ValueRepr::bool(true), &mut r, &cfg),
            Some(ValueRepr::bool(false))
        );
    }

    proptest! {
        #[test]
        fn mutations_keep_inline_tensors_valid(v in arb_value(), seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            if let Some((m, rule)) = mutate_value(&v, &mut r, &MutationConfig::default()) {
                prop_assert!(rule.applies_to(&v));
                prop_assert!(m.validate().is_ok() || v.validate().is_err());
            }
        }

        #[test]
        fn scalar_rules_preserve_kind(v in arb_value(), seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            if let Some((m, rule)) = mutate_value(&v, &mut r, &MutationConfig::default()) {
                if rule != MutationRule::ListResize {
                    prop_assert_eq!(m.type_tag(), v.type_tag());
                }
            }
        }
    }

    fn pair() -> (ApiEntry, ApiEntry, InvocationPlan) {
        let s = ApiEntry::new(
            "m.avg_pool",
            vec![
                ArgSpec::required("input", 0).with_types(["tensor"]),
                ArgSpec::required("kernel", 1).with_types(["int"]),
            ],
        );
        let t = ApiEntry::new(
            "m.max_pool",
            vec![
                ArgSpec::required("input", 0).with_types(["tensor"]),
                ArgSpec::required("kernel", 1).with_types(["int"]),
            ],
        );
        let plan = synthesize_by_matching(&s, &t).unwrap();
        (s, t, plan)
    }

    fn buggy_script() -> MockScript {
        MockScript::all_equal().with_rule(MockRule {
            source: "*".into(),
            target: "*".into(),
            mode: None,
            input_hash: None,
            request: None,
            when: vec![Condition::NegativeDim],
            outcome: MockOutcome {
                status_t: Status::Exception,
                exception_t: Some("RuntimeError: negative dimension".into()),
                ..MockOutcome::default()
            },
        })
    }

    fn run(verdict: Verdict, seed: u64) -> FuzzOutcome {
        let (s, t, plan) = pair();
        let seeds = vec![InvocationRecord::new(
            "m.avg_pool",
            vec![ValueRepr::tensor_seeded(vec![1, 4, 4], "float32", 9), ValueRepr::int(2)],
        )];
        let job = FuzzJob {
            plan: &plan,
            verdict,
            source: &s,
            target: &t,
            seeds: &seeds,
            count: 200,
            seed,
            mutation: MutationConfig::default(),
        };
        let settings = RunSettings {
            tolerance: Tolerance::default(),
            timeout_ms: 100,
            iteration: 1,
        };
        let mut exec = MockExecutor::new(buggy_script());
        fuzz_pair(&job, &mut exec, &mut RequestIds::default(), &settings).unwrap()
    }

    #[test]
    fn finds_and_dedups_status_inconsistency() {
        let out = run(Verdict::StatusEquivalent, 42);
        assert_eq!(out.executed, 200);
        assert_eq!(out.inconsistencies.len(), 1, "one dedup key");
        let inc = &out.inconsistencies[0];
        assert_eq!(inc.oracle, Oracle::Status);
        assert!(inc
            .input
            .positional
            .iter()
            .any(|v| matches!(v, ValueRepr::Tensor(t) if t.shape.iter().any(|d| *d < 0))));
        assert_eq!(
            inc.target_outcome.exception.as_deref(),
            Some("RuntimeError: negative dimension")
        );
    }

    #[test]
    fn same_seed_same_findings() {
        assert_eq!(run(Verdict::StatusEquivalent, 7), run(Verdict::StatusEquivalent, 7));
    }

    #[test]
    fn rejected_pairs_are_not_fuzzed() {
        assert_eq!(run(Verdict::Rejected, 1).executed, 0);
    }

    #[test]
    fn oracle_depends_on_verdict() {
        let mut resp =
            PairedResponse::crashed(1, crate::protocol::Side::Source, crate::protocol::CrashKind::Died, None);
        resp.status_s = Status::Success;
        resp.status_t = Status::Success;
        resp.crash_s = None;
        resp.crash_t = None;
        resp.value_equal = Some(false);
        assert_eq!(judge(Verdict::ValueEquivalent, &resp), Some(Oracle::Value));
        assert_eq!(judge(Verdict::StatusEquivalent, &resp), None);
        resp.status_t = Status::Exception;
        resp.value_equal = None;
        assert_eq!(judge(Verdict::StatusEquivalent, &resp), Some(Oracle::Status));
        assert_eq!(judge(Verdict::Rejected, &resp), None);
    }
}
