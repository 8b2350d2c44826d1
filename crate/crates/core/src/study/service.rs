use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use rand::distr::{Alphanumeric, SampleString};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::store::{Event, Journal};
use super::{
    Clock, Denial, DenialReason, PlaylistItem, Pooling, Rejection, RejectionReason, RequestOutcome, StudySettings,
    SubmitOutcome, SubmitReceipt, SubmitRequest, SystemClock, TaskAssignment, TaskRequest, WorkerRegistry,
};
use crate::domain::{
    validate_submission, watch_time_ms, GroupId, MosTable, Sequence, SequenceId, Stage, StageConfig, Subject,
    Submission, SubmissionId, SubmissionKey, ValidationIssue, Verdict, WorkerId,
};
use crate::error::StudyError;
use crate::io::{write_catalog_csv, write_filter_report_csv, write_mos_csv, FilterReportRow};
use crate::stats::{dynamic_filter, FilterMode, FilterOptions, FilterOutcome, MosAccumulator};

const CODE_LEN: usize = 12;

struct AssignmentRecord {
    assignment: TaskAssignment,
    /// Journal position at which it was issued.
    seq: u64,
}

#[derive(Default)]
struct State {
    settings: Option<StudySettings>,
    stages: BTreeMap<Stage, StageConfig>,
    catalog: BTreeMap<SequenceId, Sequence>,
    subjects: HashMap<WorkerId, Subject>,
    qualified_at: HashMap<WorkerId, u64>,
    assignments: HashMap<String, AssignmentRecord>,
    active: HashMap<WorkerId, String>,
    submissions: BTreeMap<SubmissionId, Submission>,
    keys: HashSet<SubmissionKey>,
    receipts: HashMap<String, SubmitOutcome>,
    codes: HashSet<String>,
    invalid: HashMap<SubmissionId, Vec<ValidationIssue>>,
    outcomes: HashMap<SubmissionId, FilterOutcome>,
    stage_mos: BTreeMap<Stage, MosTable>,
    accepted: HashMap<(Stage, GroupId), usize>,
    seq: u64,
}

fn issues_message(issues: &[ValidationIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl State {
    fn apply(&mut self, ev: Event) {
        match ev {
            Event::Init {
                settings,
                stages,
                catalog,
            } => {
                self.settings = Some(settings);
                self.stages = stages.into_iter().map(|s| (s.stage, s)).collect();
                self.catalog = catalog.into_iter().map(|s| (s.id.clone(), s)).collect();
            }
            Event::SubjectSeen { worker_id, profile } => {
                let s = self
                    .subjects
                    .entry(worker_id.clone())
                    .or_insert_with(|| Subject::new(worker_id, profile));
                s.approval_rate_pct = profile.approval_rate;
                s.approved_hits = profile.approved_hits;
            }
            Event::Assigned { assignment } => {
                self.active
                    .insert(assignment.worker_id.clone(), assignment.session_token.clone());
                self.assignments.insert(
                    assignment.session_token.clone(),
                    AssignmentRecord {
                        assignment,
                        seq: self.seq,
                    },
                );
            }
            Event::Submitted {
                token,
                submission,
                completion_code,
                issues,
            } => {
                if self.active.get(&submission.worker_id) == Some(&token) {
                    self.active.remove(&submission.worker_id);
                }
                if let Some(s) = self.subjects.get_mut(&submission.worker_id) {
                    s.history.insert((submission.stage, submission.group_id.clone()));
                }
                self.keys.insert(submission.key());
                let outcome = match completion_code {
                    Some(code) => {
                        self.codes.insert(code.clone());
                        SubmitOutcome::Accepted(SubmitReceipt {
                            completion_code: code,
                            submission_id: submission.submission_id.clone(),
                        })
                    }
                    None => SubmitOutcome::Rejected(Rejection {
                        reason: RejectionReason::Invalid,
                        message: issues_message(&issues),
                        issues: issues.clone(),
                    }),
                };
                self.receipts.insert(token, outcome);
                if !issues.is_empty() {
                    self.invalid.insert(submission.submission_id.clone(), issues);
                }
                self.submissions.insert(submission.submission_id.clone(), submission);
            }
            Event::Filtered { stage, outcomes, mos } => {
                for o in outcomes {
                    if let Some(sub) = self.submissions.get_mut(&o.submission_id) {
                        sub.verdict = o.verdict();
                    }
                    self.outcomes.insert(o.submission_id.clone(), o);
                }
                self.stage_mos.insert(stage, mos);
                self.accepted.retain(|(s, _), _| *s != stage);
                for sub in self.submissions.values() {
                    if sub.stage == stage && sub.verdict == Verdict::Accepted {
                        *self.accepted.entry((stage, sub.group_id.clone())).or_default() += 1;
                    }
                }
            }
            Event::Qualified { workers } => {
                for w in workers {
                    if let Some(s) = self.subjects.get_mut(&w) {
                        if s.grant_qualification() {
                            self.qualified_at.insert(w, self.seq);
                        }
                    }
                }
            }
        }
        self.seq += 1;
    }

    fn settings(&self) -> &StudySettings {
        self.settings.as_ref().expect("store has an init event")
    }

    fn is_qualified(&self, w: &WorkerId) -> bool {
        self.subjects.get(w).is_some_and(|s| s.qualified)
    }

    fn recount(&self) -> HashMap<(Stage, GroupId), usize> {
        let mut out = HashMap::new();
        for sub in self.submissions.values().filter(|s| s.verdict == Verdict::Accepted) {
            *out.entry((sub.stage, sub.group_id.clone())).or_default() += 1;
        }
        out
    }
}

struct Inner {
    state: State,
    journal: Journal,
    rng: ChaCha20Rng,
}

impl Inner {
    fn commit(&mut self, ev: Event) -> Result<(), StudyError> {
        self.journal.append(&ev)?;
        self.state.apply(ev);
        Ok(())
    }

    fn filter(&mut self, stage: Stage) -> Result<FilterSummary, StudyError> {
        let st = &self.state;
        let cfg = st.stages.get(&stage).ok_or(StudyError::StageClosed(stage))?;
        let subs: Vec<Submission> = st
            .submissions
            .values()
            .filter(|s| s.stage == stage && !st.invalid.contains_key(&s.submission_id))
            .cloned()
            .collect();
        let options = FilterOptions {
            thresholds: cfg.thresholds,
            leave_one_out: st.settings().leave_one_out,
        };
        let (outcomes, mos) = match stage {
            Stage::Qualification => {
                let reference = st.stage_mos.get(&Stage::Pretest).ok_or(StudyError::MissingReference)?;
                dynamic_filter(&subs, options, FilterMode::WithReference(reference))
            }
            _ => dynamic_filter(&subs, options, FilterMode::SinglePass),
        };
        let summary = FilterSummary::new(stage, &outcomes, &mos);
        self.commit(Event::Filtered { stage, outcomes, mos })?;
        Ok(summary)
    }
}

/// Result of one filtering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub stage: Stage,
    pub submissions: usize,
    pub accepted: usize,
    pub mos_sequences: usize,
    pub outcomes: Vec<FilterOutcome>,
}

impl FilterSummary {
    fn new(stage: Stage, outcomes: &[FilterOutcome], mos: &MosTable) -> Self {
        FilterSummary {
            stage,
            submissions: outcomes.len(),
            accepted: outcomes.iter().filter(|o| o.accepted).count(),
            mos_sequences: mos.len(),
            outcomes: outcomes.to_vec(),
        }
    }
}

/// Verdict tallies for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageCounts {
    pub submissions: usize,
    pub pending: usize,
    pub accepted: usize,
    pub rejected_srocc: usize,
    pub rejected_std: usize,
    pub rejected_invalid: usize,
}

impl StageCounts {
    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.submissions > 0).then(|| self.accepted as f64 / self.submissions as f64)
    }
}

/// The three export files, as text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub catalog_csv: String,
    pub mos_csv: String,
    pub filter_report_csv: String,
}

impl ExportBundle {
    pub const CATALOG_FILE: &'static str = "catalog.csv";
    pub const MOS_FILE: &'static str = "mos.csv";
    pub const FILTER_REPORT_FILE: &'static str = "filter_report.csv";

    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(Self::CATALOG_FILE), &self.catalog_csv)?;
        std::fs::write(dir.join(Self::MOS_FILE), &self.mos_csv)?;
        std::fs::write(dir.join(Self::FILTER_REPORT_FILE), &self.filter_report_csv)
    }
}

/// Study state behind a single lock, journaled to an optional file.
pub struct StudyService {
    inner: RwLock<Inner>,
    registry: Arc<dyn WorkerRegistry>,
    clock: Arc<dyn Clock>,
}

pub struct ServiceOptions {
    pub registry: Arc<dyn WorkerRegistry>,
    pub clock: Arc<dyn Clock>,
    /// Seeds tokens, codes and group choice; `None` draws from the OS.
    pub seed: Option<u64>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        ServiceOptions {
            registry: Arc::new(super::MockRegistry::new()),
            clock: Arc::new(SystemClock),
            seed: None,
        }
    }
}

impl StudyService {
    fn with_journal(journal: Journal, options: ServiceOptions) -> Self {
        let rng = match options.seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_rng(&mut rand::rng()),
        };
        StudyService {
            inner: RwLock::new(Inner {
                state: State::default(),
                journal,
                rng,
            }),
            registry: options.registry,
            clock: options.clock,
        }
    }

    /// Starts a new study. With a `store` path the journal is created there;
    /// an existing non-empty store is an error.
    pub fn create(
        settings: StudySettings,
        stages: Vec<StageConfig>,
        catalog: Vec<Sequence>,
        store: Option<&Path>,
        options: ServiceOptions,
    ) -> Result<Self, StudyError> {
        for s in &stages {
            s.validate()?;
        }
        let ids: HashSet<&SequenceId> = catalog.iter().map(|s| &s.id).collect();
        for s in &stages {
            for g in &s.groups {
                if let Some(missing) = g.sequences.iter().find(|id| !ids.contains(id)) {
                    return Err(StudyError::Config(format!("group {} lists {missing}, not in the catalog", g.id)));
                }
            }
        }
        let journal = match store {
            Some(path) => {
                let (journal, events) = Journal::open(path)?;
                if !events.is_empty() {
                    return Err(StudyError::Store(format!("{} already holds a study", path.display())));
                }
                journal
            }
            None => Journal::memory(),
        };
        let svc = Self::with_journal(journal, options);
        svc.inner.write().commit(Event::Init {
            settings,
            stages,
            catalog,
        })?;
        Ok(svc)
    }

    /// Reopens a journaled study.
    pub fn open(store: &Path, options: ServiceOptions) -> Result<Self, StudyError> {
        let (journal, events) = Journal::open(store)?;
        if !matches!(events.first(), Some(Event::Init { .. })) {
            return Err(StudyError::Store(format!(
                "{} does not start with an init event; run init-stages first",
                store.display()
            )));
        }
        let svc = Self::with_journal(journal, options);
        {
            let mut inner = svc.inner.write();
            for ev in events {
                inner.state.apply(ev);
            }
        }
        Ok(svc)
    }

    /// In-memory study rebuilt from a list of events.
    pub fn replay(events: Vec<Event>, options: ServiceOptions) -> Result<Self, StudyError> {
        if !matches!(events.first(), Some(Event::Init { .. })) {
            return Err(StudyError::Store("event list does not start with an init event".into()));
        }
        let svc = Self::with_journal(Journal::memory(), options);
        {
            let mut inner = svc.inner.write();
            for ev in events {
                inner.state.apply(ev);
            }
        }
        Ok(svc)
    }

    pub fn request_task(&self, req: &TaskRequest) -> Result<RequestOutcome, StudyError> {
        let now = self.clock.now_ms();
        let mut guard = self.inner.write();
        let inner = &mut *guard;

        if let Some(token) = inner.state.active.get(&req.worker_id).cloned() {
            let rec = &inner.state.assignments[&token];
            if rec.assignment.expires_at_ms > now {
                return Ok(RequestOutcome::Assigned(rec.assignment.clone()));
            }
            inner.state.active.remove(&req.worker_id);
        }

        if !inner.state.stages.contains_key(&req.stage) {
            return Ok(denied(DenialReason::StageClosed, format!("stage {} is not open", req.stage)));
        }
        let known = inner.state.subjects.get(&req.worker_id);
        if known.is_none_or(|s| s.approval_rate_pct != req.profile.approval_rate || s.approved_hits != req.profile.approved_hits) {
            inner.commit(Event::SubjectSeen {
                worker_id: req.worker_id.clone(),
                profile: req.profile,
            })?;
        }

        let st = &inner.state;
        let cfg = &st.stages[&req.stage];
        let subject = &st.subjects[&req.worker_id];
        if let Err(msg) = cfg.eligibility.check(&req.profile, subject.qualified) {
            return Ok(denied(DenialReason::Eligibility, msg));
        }
        if req.stage == Stage::Formal && !subject.qualified {
            return Ok(denied(DenialReason::Eligibility, "formal stage requires qualification".into()));
        }
        if let Some(max) = st.settings().max_groups_per_worker {
            let done = subject.history.iter().filter(|(s, _)| *s == req.stage).count();
            if done >= max {
                return Ok(denied(DenialReason::Exhausted, format!("limit of {max} groups reached")));
            }
        }
        let candidates: Vec<&GroupId> = cfg
            .groups
            .iter()
            .map(|g| &g.id)
            .filter(|g| !subject.has_completed(req.stage, g))
            .collect();
        let count = |g: &GroupId| st.accepted.get(&(req.stage, g.clone())).copied().unwrap_or(0);
        let Some(min) = candidates.iter().map(|g| count(g)).min() else {
            return Ok(denied(DenialReason::Exhausted, format!("no {} groups left", req.stage)));
        };
        let least: Vec<&GroupId> = candidates.into_iter().filter(|g| count(g) == min).collect();
        let group_id = least[inner.rng.random_range(0..least.len())].clone();

        let group = cfg.group(&group_id).expect("candidate comes from config");
        let base = st.settings().media_base_url.trim_end_matches('/');
        let playlist = group
            .sequences
            .iter()
            .map(|id| PlaylistItem {
                sequence_id: id.clone(),
                media_url: format!("{base}/{id}.mp4"),
                duration_s: st.catalog.get(id).map_or(0.0, |s| s.duration_s),
            })
            .collect();
        let expiry_ms = i64::from(st.settings().assignment_expiry_minutes) * 60_000;
        let token = format!("{:032x}", inner.rng.random::<u128>());
        let assignment = TaskAssignment {
            session_token: token,
            worker_id: req.worker_id.clone(),
            stage: req.stage,
            group_id,
            playlist,
            issued_at_ms: now,
            expires_at_ms: now + expiry_ms,
        };
        inner.commit(Event::Assigned {
            assignment: assignment.clone(),
        })?;
        Ok(RequestOutcome::Assigned(assignment))
    }

    pub fn submit(&self, req: SubmitRequest) -> Result<SubmitOutcome, StudyError> {
        let now = self.clock.now_ms();
        let mut guard = self.inner.write();
        let inner = &mut *guard;
        let st = &inner.state;

        if let Some(prev) = st.receipts.get(&req.token) {
            return Ok(prev.clone());
        }
        let Some(rec) = st.assignments.get(&req.token) else {
            return Ok(rejected(RejectionReason::UnknownToken, "unknown session token"));
        };
        let a = &rec.assignment;
        if now > a.expires_at_ms {
            return Ok(rejected(RejectionReason::Expired, "assignment expired"));
        }
        let watch_complete = a
            .playlist
            .iter()
            .all(|item| watch_time_ms(&req.interaction_log, &item.sequence_id) >= (item.duration_s * 1000.0).round() as i64);
        let mut submission = Submission {
            submission_id: SubmissionId(format!("sub{:08}", st.submissions.len() + 1)),
            worker_id: a.worker_id.clone(),
            group_id: a.group_id.clone(),
            stage: a.stage,
            records: req.records,
            user_agent: req.user_agent,
            interaction_log: req.interaction_log,
            watch_complete,
            verdict: Verdict::Pending,
            env_checks: req.env_checks,
        };
        let cfg = &st.stages[&a.stage];
        let report = validate_submission(&submission, cfg, &st.keys)?;
        submission.verdict = report.verdict();
        let completion_code = if report.is_valid() {
            let mut code = Alphanumeric.sample_string(&mut inner.rng, CODE_LEN);
            while st.codes.contains(&code) {
                code = Alphanumeric.sample_string(&mut inner.rng, CODE_LEN);
            }
            Some(code)
        } else {
            None
        };
        inner.commit(Event::Submitted {
            token: req.token.clone(),
            submission,
            completion_code,
            issues: report.issues,
        })?;
        Ok(inner.state.receipts[&req.token].clone())
    }

    /// Filters every intake-valid submission of `stage` and replaces the
    /// stage's verdicts and MOS table.
    pub fn run_stage_filter(&self, stage: Stage) -> Result<FilterSummary, StudyError> {
        self.inner.write().filter(stage)
    }

    /// Grants the qualification to every worker with an accepted pretest or
    /// qualification submission. Returns the newly granted workers.
    pub fn grade_qualification(&self) -> Result<Vec<WorkerId>, StudyError> {
        let mut guard = self.inner.write();
        let inner = &mut *guard;
        if !inner.state.stage_mos.contains_key(&Stage::Pretest) {
            return Err(StudyError::MissingReference);
        }
        let st = &inner.state;
        let has_pending = st
            .submissions
            .values()
            .any(|s| s.stage == Stage::Qualification && s.verdict == Verdict::Pending);
        if st.stages.contains_key(&Stage::Qualification) && (has_pending || !st.stage_mos.contains_key(&Stage::Qualification)) {
            inner.filter(Stage::Qualification)?;
        }

        let st = &inner.state;
        let mut workers: Vec<WorkerId> = st
            .submissions
            .values()
            .filter(|s| matches!(s.stage, Stage::Pretest | Stage::Qualification) && s.verdict == Verdict::Accepted)
            .map(|s| s.worker_id.clone())
            .filter(|w| !st.is_qualified(w))
            .collect();
        workers.sort();
        workers.dedup();

        let mut granted = Vec::new();
        let mut failure = None;
        for w in workers {
            match self.registry.grant_qualification(&w) {
                Ok(()) => granted.push(w),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        if !granted.is_empty() {
            inner.commit(Event::Qualified {
                workers: granted.clone(),
            })?;
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(granted),
        }
    }

    /// Catalog, pooled MOS table and filter report, ordered by id.
    pub fn export(&self) -> Result<ExportBundle, StudyError> {
        let guard = self.inner.read();
        let st = &guard.state;
        if st.stage_mos.is_empty() {
            return Err(StudyError::NothingFiltered);
        }
        let mos = match st.settings().pooling {
            Pooling::AllAccepted => {
                let mut acc = MosAccumulator::new();
                st.submissions
                    .values()
                    .filter(|s| s.verdict == Verdict::Accepted)
                    .for_each(|s| acc.add(s));
                acc.finish()
            }
            Pooling::LatestStage => {
                let mut entries = BTreeMap::new();
                for table in st.stage_mos.values().rev() {
                    for (id, e) in table.iter() {
                        entries.entry(id.clone()).or_insert(*e);
                    }
                }
                MosTable { entries }
            }
        };
        let categories: BTreeMap<SequenceId, String> = st
            .catalog
            .values()
            .map(|s| (s.id.clone(), s.audio_semantics.to_string()))
            .collect();
        let rows: Vec<FilterReportRow> = st
            .submissions
            .values()
            .map(|s| {
                let id = s.submission_id.as_str();
                if let Some(issues) = st.invalid.get(&s.submission_id) {
                    FilterReportRow::unscored(id, Verdict::RejectedInvalid, issues_message(issues))
                } else if let Some(o) = st.outcomes.get(&s.submission_id) {
                    FilterReportRow::scored(o)
                } else {
                    FilterReportRow::unscored(id, Verdict::Pending, "not yet filtered")
                }
            })
            .collect();

        let catalog: Vec<Sequence> = st.catalog.values().cloned().collect();
        let mut catalog_csv = Vec::new();
        write_catalog_csv(&mut catalog_csv, &catalog)?;
        let mut mos_csv = Vec::new();
        write_mos_csv(&mut mos_csv, &mos, Some(&categories))?;
        let mut report_csv = Vec::new();
        write_filter_report_csv(&mut report_csv, &rows)?;
        let text = |b: Vec<u8>| String::from_utf8(b).expect("csv output is utf-8");
        Ok(ExportBundle {
            catalog_csv: text(catalog_csv),
            mos_csv: text(mos_csv),
            filter_report_csv: text(report_csv),
        })
    }

    /// Tokens of formal assignments issued to a worker who was not qualified
    /// at the time. Should always be empty.
    pub fn audit_unqualified_formal(&self) -> Vec<String> {
        let guard = self.inner.read();
        let st = &guard.state;
        let mut out: Vec<String> = st
            .assignments
            .values()
            .filter(|r| r.assignment.stage == Stage::Formal)
            .filter(|r| st.qualified_at.get(&r.assignment.worker_id).is_none_or(|&q| q > r.seq))
            .map(|r| r.assignment.session_token.clone())
            .collect();
        out.sort();
        out
    }

    /// Whether the per-group accepted counters match a recount of the store.
    pub fn counters_consistent(&self) -> bool {
        let guard = self.inner.read();
        let st = &guard.state;
        let mut stored = st.accepted.clone();
        stored.retain(|_, n| *n > 0);
        stored == st.recount()
    }

    pub fn accepted_count(&self, stage: Stage, group: &GroupId) -> usize {
        let guard = self.inner.read();
        guard.state.accepted.get(&(stage, group.clone())).copied().unwrap_or(0)
    }

    pub fn stage_counts(&self, stage: Stage) -> StageCounts {
        let guard = self.inner.read();
        let mut c = StageCounts::default();
        for s in guard.state.submissions.values().filter(|s| s.stage == stage) {
            c.submissions += 1;
            match s.verdict {
                Verdict::Pending => c.pending += 1,
                Verdict::Accepted => c.accepted += 1,
                Verdict::RejectedSrocc => c.rejected_srocc += 1,
                Verdict::RejectedStd => c.rejected_std += 1,
                Verdict::RejectedInvalid => c.rejected_invalid += 1,
            }
        }
        c
    }

    pub fn stage_configs(&self) -> Vec<StageConfig> {
        self.inner.read().state.stages.values().cloned().collect()
    }

    pub fn stage_mos(&self, stage: Stage) -> Option<MosTable> {
        self.inner.read().state.stage_mos.get(&stage).cloned()
    }

    pub fn subject(&self, worker: &WorkerId) -> Option<Subject> {
        self.inner.read().state.subjects.get(worker).cloned()
    }

    pub fn submissions(&self, stage: Stage) -> Vec<Submission> {
        let guard = self.inner.read();
        guard.state.submissions.values().filter(|s| s.stage == stage).cloned().collect()
    }

    pub fn active_assignments(&self, worker: &WorkerId) -> usize {
        let now = self.clock.now_ms();
        let guard = self.inner.read();
        let st = &guard.state;
        st.assignments
            .values()
            .filter(|r| &r.assignment.worker_id == worker && r.assignment.expires_at_ms > now)
            .filter(|r| !st.receipts.contains_key(&r.assignment.session_token))
            .count()
    }

    pub fn issued_codes(&self) -> usize {
        self.inner.read().state.codes.len()
    }
}

fn denied(reason: DenialReason, message: String) -> RequestOutcome {
    RequestOutcome::Denied(Denial { reason, message })
}

fn rejected(reason: RejectionReason, message: &str) -> SubmitOutcome {
    SubmitOutcome::Rejected(Rejection {
        reason,
        message: message.to_owned(),
        issues: Vec::new(),
    })
}
