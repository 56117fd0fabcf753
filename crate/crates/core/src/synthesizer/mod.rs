//! Invocation synthesis for candidate pairs.
//!
//! Target calls are built either by matching arguments (a maximum-weight
//! bipartite assignment over name, type and position similarity) or by
//! instantiating a matching template mined from the docs.

pub mod assignment;
pub mod template;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ApiEntry, ArgSpec, CorpusError, InvocationRecord, Origin};
use crate::value::ValueRepr;

pub use assignment::{max_weight_match, Assignment, AssignmentError};
pub use template::{extract_templates, Expr, Literal, MatchingTemplate};

/// `1 - lev(a, b) / max(|a|, |b|)`, counted in characters.
pub fn name_similarity(a: &ArgSpec, b: &ArgSpec) -> f64 {
    let la = a.name.chars().count();
    let lb = b.name.chars().count();
    let longest = la.max(lb);
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(&a.name, &b.name) as f64 / longest as f64
}

/// Fraction of `a`'s observed types that `b` also accepts.
pub fn type_similarity(a: &ArgSpec, b: &ArgSpec) -> f64 {
    if a.observed_types.is_empty() {
        return 0.0;
    }
    let shared = a.observed_types.intersection(&b.observed_types).count();
    shared as f64 / a.observed_types.len() as f64
}

pub fn pos_similarity(a: &ArgSpec, b: &ArgSpec, source_len: usize, target_len: usize) -> f64 {
    let longest = source_len.max(target_len);
    if longest == 0 {
        return 1.0;
    }
    1.0 - a.position.abs_diff(b.position) as f64 / longest as f64
}

/// Edge weight in `[0, 3]`.
pub fn arg_similarity(a: &ArgSpec, b: &ArgSpec, source_len: usize, target_len: usize) -> f64 {
    name_similarity(a, b) + type_similarity(a, b) + pos_similarity(a, b, source_len, target_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    ArgMatch,
    Template,
}

/// How to call the target API from a source invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationPlan {
    pub source: String,
    pub target: String,
    pub kind: PlanKind,
    /// target argument position -> source argument position
    pub slot_map: BTreeMap<usize, usize>,
    /// unmatched optional target arguments, filled by name
    pub default_fills: BTreeMap<String, ValueRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_expr: Option<Expr>,
}

/// Why argument matching gave up on a pair.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthesisAbort {
    #[error("required target argument {0} has no counterpart")]
    UnmatchedTarget(String),
    #[error("required source argument {0} has no counterpart")]
    UnmatchedSource(String),
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("plan is for {expected}, invocation is for {found}")]
    WrongSource { expected: String, found: String },
    #[error(transparent)]
    Bind(#[from] CorpusError),
    #[error("source invocation has no argument at position {0}")]
    MissingSlot(usize),
}

/// Weight matrix over `source.args x target.args`.
pub fn similarity_matrix(source: &ApiEntry, target: &ApiEntry) -> Vec<Vec<f64>> {
    let (ls, lt) = (source.arity(), target.arity());
    source
        .args
        .iter()
        .map(|a| target.args.iter().map(|b| arg_similarity(a, b, ls, lt)).collect())
        .collect()
}

/// Builds an argument-matching plan or reports why none exists.
pub fn synthesize_by_matching(source: &ApiEntry, target: &ApiEntry) -> Result<InvocationPlan, SynthesisAbort> {
    let weights = similarity_matrix(source, target);
    let assignment = max_weight_match(&weights).expect("similarities are finite and non-negative");

    let mut slot_map = BTreeMap::new();
    for &(s, t) in &assignment.pairs {
        slot_map.insert(t, s);
    }
    for arg in &source.args {
        if !arg.optional && assignment.column_for(arg.position).is_none() {
            return Err(SynthesisAbort::UnmatchedSource(arg.name.clone()));
        }
    }
    let mut default_fills = BTreeMap::new();
    for arg in &target.args {
        if slot_map.contains_key(&arg.position) {
            continue;
        }
        match &arg.default {
            Some(d) if arg.optional => {
                default_fills.insert(arg.name.clone(), d.clone());
            }
            _ => return Err(SynthesisAbort::UnmatchedTarget(arg.name.clone())),
        }
    }
    Ok(InvocationPlan {
        source: source.name.clone(),
        target: target.name.clone(),
        kind: PlanKind::ArgMatch,
        slot_map,
        default_fills,
        template_expr: None,
    })
}

pub fn synthesize_from_template(template: &MatchingTemplate) -> InvocationPlan {
    InvocationPlan {
        source: template.owner.clone(),
        target: template.invoked.clone(),
        kind: PlanKind::Template,
        slot_map: BTreeMap::new(),
        default_fills: BTreeMap::new(),
        template_expr: Some(template.expr.clone()),
    }
}

/// The target side of a request, with concrete values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TargetCall {
    Call {
        api: String,
        positional: Vec<ValueRepr>,
        keyword: BTreeMap<String, ValueRepr>,
    },
    /// `expr` is evaluated with `#i` bound to `bindings[i - 1]`.
    Template {
        api: String,
        expr: String,
        bindings: Vec<ValueRepr>,
    },
}

impl TargetCall {
    pub fn api(&self) -> &str {
        match self {
            TargetCall::Call { api, .. } | TargetCall::Template { api, .. } => api,
        }
    }
}

impl InvocationPlan {
    /// `source(#1, #2, ...)` for the source side.
    pub fn render_source(&self, source: &ApiEntry) -> String {
        let slots: Vec<String> = (1..=source.arity()).map(|i| format!("#{i}")).collect();
        format!("{}({})", source.name, slots.join(", "))
    }

    /// Printable target call using `#i` placeholders.
    pub fn render_target(&self, target: &ApiEntry) -> String {
        if let Some(expr) = &self.template_expr {
            return expr.to_string();
        }
        let mut parts = Vec::new();
        let mut keyword_mode = false;
        for arg in &target.args {
            if let Some(src) = self.slot_map.get(&arg.position) {
                if keyword_mode {
                    parts.push(format!("{}=#{}", arg.name, src + 1));
                } else {
                    parts.push(format!("#{}", src + 1));
                }
            } else if let Some(v) = self.default_fills.get(&arg.name) {
                keyword_mode = true;
                parts.push(format!("{}={}", arg.name, v.render()));
            }
        }
        format!("{}({})", target.name, parts.join(", "))
    }

    /// Instantiates the target call for one source invocation.
    pub fn target_call(
        &self,
        source: &ApiEntry,
        target: &ApiEntry,
        rec: &InvocationRecord,
    ) -> Result<TargetCall, PlanError> {
        if rec.api != self.source {
            return Err(PlanError::WrongSource {
                expected: self.source.clone(),
                found: rec.api.clone(),
            });
        }
        let bound = source.bind(rec)?;
        if let Some(expr) = &self.template_expr {
            return Ok(TargetCall::Template {
                api: self.target.clone(),
                expr: expr.to_string(),
                bindings: bound,
            });
        }
        let mut positional = Vec::new();
        let mut keyword = BTreeMap::new();
        let mut keyword_mode = false;
        for arg in &target.args {
            if let Some(&src) = self.slot_map.get(&arg.position) {
                let v = bound.get(src).cloned().ok_or(PlanError::MissingSlot(src))?;
                if keyword_mode {
                    keyword.insert(arg.name.clone(), v);
                } else {
                    positional.push(v);
                }
            } else if let Some(v) = self.default_fills.get(&arg.name) {
                keyword_mode = true;
                keyword.insert(arg.name.clone(), v.clone());
            }
        }
        Ok(TargetCall::Call {
            api: self.target.clone(),
            positional,
            keyword,
        })
    }

    /// The target invocation as a database record, when it can be expressed
    /// as plain argument values. Template calls qualify only when the
    /// outermost call is the target and every argument is a placeholder or a
    /// literal.
    pub fn target_record(call: &TargetCall, origin: Origin) -> Option<InvocationRecord> {
        match call {
            TargetCall::Call {
                api,
                positional,
                keyword,
            } => Some(InvocationRecord {
                api: api.clone(),
                positional: positional.clone(),
                keyword: keyword.clone(),
                origin,
            }),
            TargetCall::Template { api, expr, bindings } => {
                let Ok(Expr::Call { func, args, kwargs }) = Expr::parse(expr) else {
                    return None;
                };
                if func.dotted_path().as_deref() != Some(api.as_str()) {
                    return None;
                }
                let resolve = |e: &Expr| match e {
                    Expr::Placeholder(i) => bindings.get(i - 1).cloned(),
                    Expr::Lit(l) => Some(l.to_value()),
                    _ => None,
                };
                let positional = args.iter().map(resolve).collect::<Option<Vec<_>>>()?;
                let keyword = kwargs
                    .iter()
                    .map(|(k, e)| resolve(e).map(|v| (k.clone(), v)))
                    .collect::<Option<BTreeMap<_, _>>>()?;
                Some(InvocationRecord {
                    api: api.clone(),
                    positional,
                    keyword,
                    origin,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arg(name: &str, pos: usize, types: &[&str]) -> ArgSpec {
        ArgSpec::required(name, pos).with_types(types.iter().copied())
    }

    /// Textbook dynamic-programming edit distance, kept separate from the
    /// library routine used by `name_similarity`.
    fn levenshtein_dp(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + sub);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn name_similarity_examples() {
        let s = |a: &str, b: &str| name_similarity(&arg(a, 0, &[]), &arg(b, 0, &[]));
        assert_eq!(s("input", "input"), 1.0);
        assert_eq!(s("x", "y"), 0.0);
        // dp oracle: lev(dim, dims) = 1, longest 4
        assert_eq!(levenshtein_dp("dim", "dims"), 1);
        assert!((s("dim", "dims") - 0.75).abs() <= 1e-12);
        assert_eq!(s("", ""), 1.0);
    }

    #[test]
    fn levenshtein_matches_dp_oracle() {
        let words = [
            "",
            "input",
            "indices",
            "indices_or_sections",
            "dim",
            "dims",
            "kitten",
            "sitting",
            "axis",
        ];
        for a in words {
            for b in words {
                assert_eq!(strsim::levenshtein(a, b), levenshtein_dp(a, b), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn type_similarity_examples() {
        let t = |a: &[&str], b: &[&str]| type_similarity(&arg("a", 0, a), &arg("b", 0, b));
        assert_eq!(t(&["tensor"], &["tensor", "int"]), 1.0);
        assert_eq!(t(&["tensor", "int"], &["tensor"]), 0.5);
        assert_eq!(t(&["tensor"], &[]), 0.0);
        assert_eq!(t(&[], &["tensor"]), 0.0);
    }

    #[test]
    fn pos_similarity_examples() {
        let p = |i, j, ls, lt| pos_similarity(&arg("a", i, &[]), &arg("b", j, &[]), ls, lt);
        assert_eq!(p(0, 0, 2, 3), 1.0);
        assert!((p(0, 2, 3, 3) - 1.0 / 3.0).abs() <= 1e-12);
        assert_eq!(p(0, 1, 2, 2), 0.5);
    }

    #[test]
    fn identical_arguments_weigh_three() {
        let a = arg("input", 0, &["tensor"]);
        assert_eq!(arg_similarity(&a, &a, 2, 3), 3.0);
    }

    fn vsplit() -> ApiEntry {
        ApiEntry::new(
            "torch.vsplit",
            vec![
                arg("input", 0, &["tensor"]),
                arg("indices_or_sections", 1, &["int", "list"]),
            ],
        )
    }

    fn tensor_split() -> ApiEntry {
        ApiEntry::new(
            "torch.tensor_split",
            vec![
                arg("input", 0, &["tensor", "int"]),
                arg("indices_or_sections", 1, &["int", "list", "tensor"]),
                ArgSpec::with_default("dim", 2, ValueRepr::int(0)).with_types(["int"]),
            ],
        )
    }

    #[test]
    fn vsplit_to_tensor_split() {
        let plan = synthesize_by_matching(&vsplit(), &tensor_split()).unwrap();
        assert_eq!(plan.slot_map, BTreeMap::from([(0, 0), (1, 1)]));
        assert_eq!(
            plan.default_fills,
            BTreeMap::from([("dim".to_string(), ValueRepr::int(0))])
        );
        assert_eq!(plan.render_source(&vsplit()), "torch.vsplit(#1, #2)");
        assert_eq!(plan.render_target(&tensor_split()), "torch.tensor_split(#1, #2, dim=0)");

        let rec = InvocationRecord::new(
            "torch.vsplit",
            vec![ValueRepr::tensor_seeded(vec![4, 4], "float32", 3), ValueRepr::int(2)],
        );
        let call = plan.target_call(&vsplit(), &tensor_split(), &rec).unwrap();
        match &call {
            TargetCall::Call {
                positional, keyword, ..
            } => {
                assert_eq!(positional, &rec.positional);
                assert_eq!(keyword.get("dim"), Some(&ValueRepr::int(0)));
            }
            other => panic!("unexpected {other:?}"),
        }
        let back = InvocationPlan::target_record(&call, Origin::Synthesized { iteration: 1 }).unwrap();
        assert_eq!(back.api, "torch.tensor_split");
        assert!(tensor_split().bind(&back).is_ok());
    }

    #[test]
    fn too_many_required_target_args_abort() {
        let target = ApiEntry::new("t", vec![arg("a", 0, &[]), arg("b", 1, &[]), arg("c", 2, &[])]);
        assert!(matches!(
            synthesize_by_matching(&vsplit(), &target),
            Err(SynthesisAbort::UnmatchedTarget(_))
        ));
        let small = ApiEntry::new("s", vec![arg("input", 0, &["tensor"])]);
        assert!(matches!(
            synthesize_by_matching(&vsplit(), &small),
            Err(SynthesisAbort::UnmatchedSource(_))
        ));
    }

    #[test]
    fn identical_signatures_map_identity() {
        let s = vsplit();
        let mut t = vsplit();
        t.name = "torch.other".into();
        let plan = synthesize_by_matching(&s, &t).unwrap();
        assert_eq!(plan.slot_map, BTreeMap::from([(0, 0), (1, 1)]));
        assert!(plan.default_fills.is_empty());
    }

    #[test]
    fn keyword_mode_after_default_fill() {
        let source = ApiEntry::new("s", vec![arg("x", 0, &["tensor"]), arg("k", 1, &["int"])]);
        let target = ApiEntry::new(
            "t",
            vec![
                arg("x", 0, &["tensor"]),
                ArgSpec::with_default("dim", 1, ValueRepr::int(-1)),
                arg("k", 2, &["int"]),
            ],
        );
        let plan = synthesize_by_matching(&source, &target).unwrap();
        assert_eq!(plan.render_target(&target), "t(#1, dim=-1, k=#2)");
    }

    #[test]
    fn plan_serialization_is_stable() {
        let plan = synthesize_by_matching(&vsplit(), &tensor_split()).unwrap();
        let a = serde_json::to_string(&plan).unwrap();
        let b = serde_json::to_string(&synthesize_by_matching(&vsplit(), &tensor_split()).unwrap()).unwrap();
        assert_eq!(a, b);
        let back: InvocationPlan = serde_json::from_str(&a).unwrap();
        assert_eq!(back, plan);

        let tpl = MatchingTemplate {
            owner: "tf.scatter_nd".into(),
            invoked: "tf.tensor_scatter_nd_add".into(),
            expr: Expr::parse("tf.tensor_scatter_nd_add(tf.zeros(#3, #2.dtype), #1, #2)").unwrap(),
        };
        let plan = synthesize_from_template(&tpl);
        let text = serde_json::to_string(&plan).unwrap();
        assert!(text.contains(r##""template_expr":"tf.tensor_scatter_nd_add(tf.zeros(#3, #2.dtype), #1, #2)""##));
        assert_eq!(serde_json::from_str::<InvocationPlan>(&text).unwrap(), plan);
    }

    #[test]
    fn template_record_only_for_plain_arguments() {
        let call = TargetCall::Template {
            api: "m.f".into(),
            expr: "m.f(#2, #1, axis=0)".into(),
            bindings: vec![ValueRepr::int(1), ValueRepr::int(2)],
        };
        let rec = InvocationPlan::target_record(&call, Origin::Seed).unwrap();
        assert_eq!(rec.positional, vec![ValueRepr::int(2), ValueRepr::int(1)]);
        assert_eq!(rec.keyword.get("axis"), Some(&ValueRepr::int(0)));
        let nested = TargetCall::Template {
            api: "m.f".into(),
            expr: "m.f(m.zeros(#1))".into(),
            bindings: vec![ValueRepr::int(1)],
        };
        assert!(InvocationPlan::target_record(&nested, Origin::Seed).is_none());
    }
}
