//! Campaign orchestration: match, synthesize, verify and fuzz, repeated
//! over newly covered APIs until a fixpoint or the iteration cap.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusDb, CorpusError};
use crate::fuzzer::{fuzz_pair, FuzzJob, Inconsistency, MutationConfig};
use crate::matcher::{CandidatePair, Channel, DocEmbedder, Matcher};
use crate::protocol::{ExecError, Executor, ExecutorFactory, Tolerance, DEFAULT_TIMEOUT_MS};
use crate::synthesizer::{synthesize_by_matching, synthesize_from_template, InvocationPlan, PlanKind};
use crate::verifier::{plan_id, verify_pair, CrashCandidate, RequestIds, RunSettings, Verdict, VerifyError};

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub top_k: usize,
    pub max_iterations: usize,
    pub verify_cap: usize,
    pub fuzz_count: usize,
    pub seed: u64,
    pub tolerance: Tolerance,
    pub timeout_ms: u64,
    pub workers: usize,
    pub mutation: MutationConfig,
    pub record_timings: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            max_iterations: 10,
            verify_cap: 100,
            fuzz_count: 1000,
            seed: 0,
            tolerance: Tolerance::default(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            workers: 1,
            mutation: MutationConfig::default(),
            record_timings: false,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), CampaignError> {
        if self.top_k == 0 {
            return Err(CampaignError::Config("top-k must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(CampaignError::Config("iterations must be at least 1".into()));
        }
        if self.verify_cap == 0 {
            return Err(CampaignError::Config("verify cap must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(CampaignError::Config("workers must be at least 1".into()));
        }
        if !(self.tolerance.rtol >= 0.0 && self.tolerance.atol >= 0.0) {
            return Err(CampaignError::Config("tolerances must be non-negative".into()));
        }
        Ok(())
    }

    fn settings(&self, iteration: usize) -> RunSettings {
        RunSettings {
            tolerance: self.tolerance,
            timeout_ms: self.timeout_ms,
            iteration,
        }
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Executor(#[from] ExecError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("invalid labels file: {0}")]
    Labels(String),
    #[error("inconsistent pairs missing from labels: {}", .0.join(", "))]
    Unlabeled(Vec<String>),
}

/// Executor connections owned by the campaign, one per worker.
pub struct WorkerPool {
    workers: Vec<Mutex<(Box<dyn Executor>, RequestIds)>>,
}

impl WorkerPool {
    pub fn connect(factory: &dyn ExecutorFactory, workers: usize) -> Result<Self, ExecError> {
        let workers = (0..workers.max(1))
            .map(|w| factory.connect(w).map(|e| Mutex::new((e, RequestIds::default()))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { workers })
    }

    pub fn restarts(&self) -> usize {
        self.workers.iter().map(|w| w.lock().unwrap().0.restarts()).sum()
    }

    /// Runs every job on some worker; results come back in job order.
    pub fn run<J, R, F>(&self, jobs: &[J], f: F) -> Result<Vec<R>, VerifyError>
    where
        J: Sync,
        R: Send,
        F: Fn(&J, &mut dyn Executor, &mut RequestIds) -> Result<R, VerifyError> + Sync,
    {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<R, VerifyError>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for worker in &self.workers {
                let (next, results, f) = (&next, &results, &f);
                scope.spawn(move || {
                    let mut guard = worker.lock().unwrap();
                    let (exec, ids) = &mut *guard;
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= jobs.len() {
                            break;
                        }
                        let r = f(&jobs[i], exec.as_mut(), ids);
                        let failed = r.is_err();
                        results.lock().unwrap()[i] = Some(r);
                        if failed {
                            // stop handing out work; the error is reported below
                            next.store(jobs.len(), Ordering::SeqCst);
                            break;
                        }
                    }
                });
            }
        });
        let mut out = Vec::with_capacity(jobs.len());
        for r in results.into_inner().unwrap() {
            match r {
                Some(r) => out.push(r?),
                None => continue,
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub value_equivalent: usize,
    pub status_equivalent: usize,
    pub rejected: usize,
}

impl VerdictCounts {
    fn add(&mut self, v: Verdict) {
        match v {
            Verdict::ValueEquivalent => self.value_equivalent += 1,
            Verdict::StatusEquivalent => self.status_equivalent += 1,
            Verdict::Rejected => self.rejected += 1,
        }
    }

    pub fn accepted(&self) -> usize {
        self.value_equivalent + self.status_equivalent
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub match_ms: u64,
    pub synthesize_ms: u64,
    pub verify_ms: u64,
    pub fuzz_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub sources: usize,
    pub candidate_pairs: usize,
    pub plans: usize,
    pub synthesis_aborts: usize,
    pub verdicts: VerdictCounts,
    pub newly_covered: Vec<String>,
    pub covered_apis: usize,
    pub fuzz_inputs: usize,
    pub inconsistencies: usize,
    pub crashes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<PhaseTimings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedPair {
    pub source: String,
    pub target: String,
    pub plan: PlanKind,
    pub channel: Channel,
    pub score: f64,
    pub source_call: String,
    pub target_call: String,
    pub verdict: Verdict,
    pub inputs: usize,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisFailure {
    pub source: String,
    pub target: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub total_apis: usize,
    pub initial: usize,
    #[serde(rename = "final")]
    pub final_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Fixpoint,
    IterationLimit,
    NoCandidates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FprSummary {
    pub rate: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub no_findings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub seed: u64,
    pub stop_reason: StopReason,
    pub iterations: Vec<IterationStats>,
    pub verified_pairs: Vec<VerifiedPair>,
    pub rejected_pairs: Vec<VerifiedPair>,
    pub synthesis_failures: Vec<SynthesisFailure>,
    pub inconsistencies: Vec<Inconsistency>,
    pub crashes: Vec<CrashCandidate>,
    pub coverage: Coverage,
    pub executor_restarts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fpr: Option<FprSummary>,
}

impl CampaignReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Distinct `(source, target)` pairs with at least one inconsistency.
    pub fn inconsistent_pairs(&self) -> BTreeSet<(String, String)> {
        self.inconsistencies
            .iter()
            .map(|i| (i.source.clone(), i.target.clone()))
            .collect()
    }
}

struct Planned {
    candidate: CandidatePair,
    plan: InvocationPlan,
}

/// Builds plans for the candidates, recording aborted syntheses.
pub fn synthesize_all(db: &CorpusDb, candidates: &[CandidatePair]) -> (Vec<InvocationPlan>, Vec<SynthesisFailure>) {
    let (planned, failures) = plan_candidates(db, candidates);
    (planned.into_iter().map(|p| p.plan).collect(), failures)
}

fn plan_candidates(db: &CorpusDb, candidates: &[CandidatePair]) -> (Vec<Planned>, Vec<SynthesisFailure>) {
    let mut planned = Vec::new();
    let mut failures = Vec::new();
    let mut seen = BTreeSet::new();
    for c in candidates {
        let (Some(s), Some(t)) = (db.entry(&c.source), db.entry(&c.target)) else {
            continue;
        };
        let plan = match &c.template {
            Some(tpl) => synthesize_from_template(tpl),
            None => match synthesize_by_matching(s, t) {
                Ok(p) => p,
                Err(e) => {
                    failures.push(SynthesisFailure {
                        source: c.source.clone(),
                        target: c.target.clone(),
                        reason: e.to_string(),
                    });
                    continue;
                }
            },
        };
        if seen.insert(plan_id(&plan)) {
            planned.push(Planned {
                candidate: c.clone(),
                plan,
            });
        }
    }
    (planned, failures)
}

/// Mutable campaign state between iterations.
pub struct Campaign<'a> {
    pub db: CorpusDb,
    pub config: CampaignConfig,
    embedder: DocEmbedder,
    pool: &'a WorkerPool,
    report: CampaignReport,
    sources: BTreeSet<String>,
}

fn millis(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

impl<'a> Campaign<'a> {
    pub fn new(
        db: CorpusDb,
        config: CampaignConfig,
        embedder: DocEmbedder,
        pool: &'a WorkerPool,
    ) -> Result<Self, CampaignError> {
        config.validate()?;
        let covered = db.covered().len();
        let report = CampaignReport {
            seed: config.seed,
            stop_reason: StopReason::IterationLimit,
            iterations: Vec::new(),
            verified_pairs: Vec::new(),
            rejected_pairs: Vec::new(),
            synthesis_failures: Vec::new(),
            inconsistencies: Vec::new(),
            crashes: Vec::new(),
            coverage: Coverage {
                total_apis: db.len(),
                initial: covered,
                final_: covered,
            },
            executor_restarts: 0,
            fpr: None,
        };
        let sources = db.covered().clone();
        Ok(Self {
            db,
            config,
            embedder,
            pool,
            report,
            sources,
        })
    }

    /// APIs that will act as sources in the next iteration.
    pub fn pending_sources(&self) -> &BTreeSet<String> {
        &self.sources
    }

    pub fn report(&self) -> &CampaignReport {
        &self.report
    }

    /// One match, synthesize, verify, fuzz round over the pending sources.
    pub fn run_iteration(&mut self) -> Result<IterationStats, CampaignError> {
        let n = self.report.iterations.len() + 1;
        let settings = self.config.settings(n);
        let mut stats = IterationStats {
            iteration: n,
            sources: self.sources.len(),
            ..IterationStats::default()
        };
        let mut timings = PhaseTimings::default();

        let t = Instant::now();
        let candidates = {
            let matcher = Matcher::new(&self.db, self.embedder.clone());
            matcher.candidates_for(self.sources.iter().map(String::as_str), self.config.top_k)
        };
        stats.candidate_pairs = candidates.len();
        timings.match_ms = millis(t);

        let t = Instant::now();
        let (planned, failures) = plan_candidates(&self.db, &candidates);
        stats.plans = planned.len();
        stats.synthesis_aborts = failures.len();
        self.report.synthesis_failures.extend(failures);
        timings.synthesize_ms = millis(t);

        let t = Instant::now();
        let covered_at_start = self.db.covered().clone();
        let mut verify_jobs = Vec::with_capacity(planned.len());
        for p in &planned {
            let inputs = self.db.valid_invocations(&p.plan.source, self.config.verify_cap)?;
            verify_jobs.push((p, inputs));
        }
        let db = &self.db;
        let verified = self.pool.run(&verify_jobs, |(p, inputs), exec, ids| {
            let s = db.entry(&p.plan.source).expect("planned source exists");
            let t = db.entry(&p.plan.target).expect("planned target exists");
            let collect = !covered_at_start.contains(&p.plan.target);
            verify_pair(&p.plan, s, t, inputs, exec, ids, &settings, collect)
        })?;
        timings.verify_ms = millis(t);

        let t = Instant::now();
        let mut fuzz_jobs = Vec::new();
        for ((p, inputs), outcome) in verify_jobs.iter().zip(&verified) {
            let verdict = outcome.verdict.verdict;
            stats.verdicts.add(verdict);
            let record = VerifiedPair {
                source: p.plan.source.clone(),
                target: p.plan.target.clone(),
                plan: p.plan.kind,
                channel: p.candidate.channel,
                score: p.candidate.score,
                source_call: p.plan.render_source(db.entry(&p.plan.source).unwrap()),
                target_call: p.plan.render_target(db.entry(&p.plan.target).unwrap()),
                verdict,
                inputs: inputs.len(),
                iteration: n,
            };
            if verdict.is_accepted() {
                self.report.verified_pairs.push(record);
                fuzz_jobs.push((p, verdict));
            } else {
                self.report.rejected_pairs.push(record);
            }
        }
        let (config, db) = (&self.config, &self.db);
        let fuzzed = self.pool.run(&fuzz_jobs, |(p, verdict), exec, ids| {
            let job = FuzzJob {
                plan: &p.plan,
                verdict: *verdict,
                source: db.entry(&p.plan.source).expect("planned source exists"),
                target: db.entry(&p.plan.target).expect("planned target exists"),
                seeds: db.all_invocations(&p.plan.source)?,
                count: config.fuzz_count,
                seed: config.seed,
                mutation: config.mutation,
            };
            fuzz_pair(&job, exec, ids, &settings)
        })?;
        timings.fuzz_ms = millis(t);

        for outcome in &verified {
            stats.crashes += outcome.crashes.len();
            self.report.crashes.extend(outcome.crashes.iter().cloned());
        }
        let mut known: BTreeSet<String> = self
            .report
            .inconsistencies
            .iter()
            .map(|i| i.dedup_key.clone())
            .collect();
        for outcome in fuzzed {
            stats.fuzz_inputs += outcome.executed;
            stats.crashes += outcome.crashes.len();
            self.report.crashes.extend(outcome.crashes);
            for inc in outcome.inconsistencies {
                if known.insert(inc.dedup_key.clone()) {
                    stats.inconsistencies += 1;
                    self.report.inconsistencies.push(inc);
                }
            }
        }

        let mut newly = BTreeSet::new();
        for outcome in verified {
            for rec in outcome.target_records {
                match self.db.record_new_invocation(rec.clone()) {
                    Ok(true) => {
                        newly.insert(rec.api);
                    }
                    Ok(false) => {}
                    Err(e) => log::warn!("not recording synthesized invocation of {}: {e}", rec.api),
                }
            }
        }
        stats.newly_covered = newly.iter().cloned().collect();
        stats.covered_apis = self.db.covered().len();
        if self.config.record_timings {
            stats.timings = Some(timings);
        }
        self.sources = newly;
        self.report.coverage.final_ = stats.covered_apis;
        self.report.executor_restarts = self.pool.restarts();
        self.report.iterations.push(stats.clone());
        Ok(stats)
    }

    /// Iterates until no API is newly covered or the cap is reached.
    pub fn run(mut self) -> Result<(CampaignReport, CorpusDb), CampaignError> {
        if self.sources.is_empty() {
            self.report.stop_reason = StopReason::NoCandidates;
            return Ok((self.report, self.db));
        }
        self.report.stop_reason = StopReason::IterationLimit;
        for _ in 0..self.config.max_iterations {
            let stats = self.run_iteration()?;
            log::info!(
                "iteration {}: {} candidates, {} accepted, {} newly covered, {} covered",
                stats.iteration,
                stats.candidate_pairs,
                stats.verdicts.accepted(),
                stats.newly_covered.len(),
                stats.covered_apis
            );
            if stats.newly_covered.is_empty() {
                self.report.stop_reason = StopReason::Fixpoint;
                break;
            }
        }
        Ok((self.report, self.db))
    }
}

/// Runs a whole campaign against executors from `factory`.
pub fn run_campaign(
    db: CorpusDb,
    config: CampaignConfig,
    embedder: DocEmbedder,
    factory: &dyn ExecutorFactory,
) -> Result<(CampaignReport, CorpusDb), CampaignError> {
    config.validate()?;
    let pool = WorkerPool::connect(factory, config.workers)?;
    Campaign::new(db, config, embedder, &pool)?.run()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    TruePositive,
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLabel {
    pub source: String,
    pub target: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

/// Expected relation between two APIs, for checking verification results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationLabel {
    pub source: String,
    pub target: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanKind>,
}

/// Ground truth for a corpus: labeled inconsistent pairs plus seeded relations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default)]
    pub pairs: Vec<PairLabel>,
    #[serde(default)]
    pub relations: Vec<RelationLabel>,
}

impl Labels {
    pub fn from_json(text: &str) -> Result<Self, CampaignError> {
        let labels: Labels = serde_json::from_str(text).map_err(|e| CampaignError::Labels(e.to_string()))?;
        let mut seen = BTreeMap::new();
        for p in &labels.pairs {
            if let Some(prev) = seen.insert((p.source.clone(), p.target.clone()), p.label) {
                if prev != p.label {
                    return Err(CampaignError::Labels(format!(
                        "conflicting labels for {} -> {}",
                        p.source, p.target
                    )));
                }
            }
        }
        Ok(labels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CampaignError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| CampaignError::Labels(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn label_of(&self, source: &str, target: &str) -> Option<Label> {
        self.pairs
            .iter()
            .find(|p| p.source == source && p.target == target)
            .map(|p| p.label)
    }
}

/// False alarms over labeled inconsistent pairs: FP / (TP + FP).
pub fn fpr(report: &CampaignReport, labels: &Labels) -> Result<FprSummary, CampaignError> {
    let pairs = report.inconsistent_pairs();
    let missing: Vec<String> = pairs
        .iter()
        .filter(|(s, t)| labels.label_of(s, t).is_none())
        .map(|(s, t)| format!("{s} -> {t}"))
        .collect();
    if !missing.is_empty() {
        return Err(CampaignError::Unlabeled(missing));
    }
    let fp = pairs
        .iter()
        .filter(|(s, t)| labels.label_of(s, t) == Some(Label::FalsePositive))
        .count();
    let tp = pairs.len() - fp;
    Ok(FprSummary {
        rate: if pairs.is_empty() {
            0.0
        } else {
            fp as f64 / pairs.len() as f64
        },
        true_positives: tp,
        false_positives: fp,
        no_findings: pairs.is_empty(),
    })
}
