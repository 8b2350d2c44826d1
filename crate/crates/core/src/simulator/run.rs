use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{simulate_rater, synth_catalog, CatalogOptions, GroundTruth, QualityDistribution, RaterModel};
use crate::domain::{
    Dimension, EventKind, FilterThresholds, InteractionEvent, SequenceId, Stage, SubmissionId, Verdict, WorkerId,
    WorkerProfile,
};
use crate::error::StudyError;
use crate::io::{read_filter_report_csv, read_mos_csv};
use crate::study::{
    build_stage_configs, DenialReason, ExportBundle, FilterSummary, ManualClock, MockRegistry, RequestOutcome,
    ServiceOptions, StudyConfig, StudyService, SubmitOutcome, SubmitRequest, TaskAssignment, TaskRequest,
};

/// What the simulator needs from a study deployment.
pub trait StudyBackend {
    fn request_task(&self, req: &TaskRequest) -> Result<RequestOutcome, StudyError>;
    fn submit(&self, req: SubmitRequest) -> Result<SubmitOutcome, StudyError>;
    fn run_filter(&self, stage: Stage) -> Result<FilterSummary, StudyError>;
    fn qualify(&self) -> Result<Vec<WorkerId>, StudyError>;
    fn export(&self) -> Result<ExportBundle, StudyError>;
    /// Formal assignments held by unqualified workers, if the backend can
    /// answer that.
    fn audit(&self) -> Result<Option<Vec<String>>, StudyError> {
        Ok(None)
    }
}

pub struct InProcessBackend {
    pub service: StudyService,
}

impl InProcessBackend {
    /// Fresh in-memory study over a synthetic catalog laid out per `plan`.
    pub fn new(plan: &StagePlan, seed: u64) -> Result<(Self, GroundTruth), StudyError> {
        let (catalog, truth) = plan.catalog(seed);
        let config = plan.study_config();
        let stages = build_stage_configs(&config, &catalog)?;
        let service = StudyService::create(
            config.settings(),
            stages,
            catalog,
            None,
            ServiceOptions {
                registry: Arc::new(MockRegistry::new()),
                clock: Arc::new(ManualClock::new(0)),
                seed: Some(seed),
            },
        )?;
        Ok((InProcessBackend { service }, truth))
    }
}

impl StudyBackend for InProcessBackend {
    fn request_task(&self, req: &TaskRequest) -> Result<RequestOutcome, StudyError> {
        self.service.request_task(req)
    }
    fn submit(&self, req: SubmitRequest) -> Result<SubmitOutcome, StudyError> {
        self.service.submit(req)
    }
    fn run_filter(&self, stage: Stage) -> Result<FilterSummary, StudyError> {
        self.service.run_stage_filter(stage)
    }
    fn qualify(&self) -> Result<Vec<WorkerId>, StudyError> {
        self.service.grade_qualification()
    }
    fn export(&self) -> Result<ExportBundle, StudyError> {
        self.service.export()
    }
    fn audit(&self) -> Result<Option<Vec<String>>, StudyError> {
        Ok(Some(self.service.audit_unqualified_formal()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    #[serde(flatten)]
    pub model: RaterModel,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CohortSpec {
    pub raters: Vec<CohortEntry>,
}

impl CohortSpec {
    /// `faithful(0.3):50,random:50` style lists.
    pub fn parse(s: &str) -> Result<Self, String> {
        let raters = split_top_level(s)
            .into_iter()
            .filter(|p| !p.trim().is_empty())
            .map(|part| {
                let part = part.trim();
                let (model, count) = part
                    .rsplit_once(':')
                    .ok_or_else(|| format!("`{part}`: expected MODEL:COUNT"))?;
                let count = count.parse().map_err(|_| format!("`{count}` is not a count"))?;
                Ok(CohortEntry {
                    model: RaterModel::parse_short(model)?,
                    count,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        if raters.is_empty() {
            return Err("empty cohort".into());
        }
        Ok(CohortSpec { raters })
    }

    pub fn size(&self) -> usize {
        self.raters.iter().map(|r| r.count).sum()
    }
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagePlan {
    pub group_size: usize,
    pub pretest_groups: usize,
    pub formal_groups: usize,
    /// Fraction of the cohort that takes the pretest; the rest enters
    /// through the qualification test.
    pub pretest_share: f64,
    pub pretest_tasks_per_worker: usize,
    pub formal_tasks_per_worker: usize,
    pub thresholds: FilterThresholds,
    pub quality: QualityDistribution,
    pub profile: WorkerProfile,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan {
            group_size: 30,
            pretest_groups: 4,
            formal_groups: 6,
            pretest_share: 0.3,
            pretest_tasks_per_worker: 2,
            formal_tasks_per_worker: 3,
            thresholds: FilterThresholds::default(),
            quality: QualityDistribution::default(),
            profile: WorkerProfile {
                approval_rate: 99.0,
                approved_hits: 1000,
            },
        }
    }
}

impl StagePlan {
    pub fn validate(&self) -> Result<(), String> {
        if self.group_size < 3 {
            return Err("group_size must be at least 3".into());
        }
        if self.pretest_groups == 0 {
            return Err("need at least one pretest group".into());
        }
        if !(0.0..=1.0).contains(&self.pretest_share) {
            return Err("pretest_share must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn catalog(&self, seed: u64) -> (Vec<crate::domain::Sequence>, GroundTruth) {
        let n = (self.pretest_groups + self.formal_groups) * self.group_size;
        let options = CatalogOptions {
            distribution: self.quality.clone(),
            group_size: self.group_size,
            ..Default::default()
        };
        synth_catalog(n, &options, seed)
    }

    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            group_size: self.group_size,
            pretest_groups: self.pretest_groups,
            thresholds: self.thresholds,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: Stage,
    pub submissions: usize,
    pub accepted: usize,
    pub acceptance_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub model: String,
    pub workers: usize,
    pub submissions: usize,
    pub accepted: usize,
    pub acceptance_rate: Option<f64>,
    pub qualified: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub workers: usize,
    pub stages: Vec<StageStats>,
    pub models: Vec<ModelStats>,
    pub qualified_workers: usize,
    pub unqualified_formal_denials: usize,
    /// Formal tasks handed to workers the simulator knows are unqualified.
    pub unqualified_formal_assignments: usize,
    /// Backend's own audit, when available.
    pub audit_findings: Option<usize>,
    pub mos_sequences: usize,
    /// AVQA, AV_VQA, AV_AQA.
    pub mos_mae: [f64; 3],
    pub min_ratings_per_sequence: u32,
    pub mean_ratings_per_sequence: f64,
    pub acceptance_non_decreasing: bool,
}

fn rate(accepted: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| accepted as f64 / total as f64)
}

impl SimulationReport {
    pub fn summary(&self) -> String {
        let pct = |r: Option<f64>| r.map_or("n/a".to_owned(), |r| format!("{:.1}%", 100.0 * r));
        let mut out = format!("simulation seed {} with {} workers\n", self.seed, self.workers);
        for s in &self.stages {
            out += &format!(
                "  {:<13} {:>5} submissions, {:>5} accepted ({})\n",
                s.stage.name(),
                s.submissions,
                s.accepted,
                pct(s.acceptance_rate)
            );
        }
        for m in &self.models {
            out += &format!(
                "  {:<24} {:>4} workers, acceptance {}, {} qualified\n",
                m.model,
                m.workers,
                pct(m.acceptance_rate),
                m.qualified
            );
        }
        out += &format!(
            "  qualified workers: {}; unqualified formal denials: {}; unqualified formal assignments: {}\n",
            self.qualified_workers, self.unqualified_formal_denials, self.unqualified_formal_assignments
        );
        out += &format!(
            "  MOS over {} sequences (min {} / mean {:.1} ratings): MAE avqa {:.3}, av_vqa {:.3}, av_aqa {:.3}\n",
            self.mos_sequences,
            self.min_ratings_per_sequence,
            self.mean_ratings_per_sequence,
            self.mos_mae[0],
            self.mos_mae[1],
            self.mos_mae[2]
        );
        out += &format!(
            "  acceptance non-decreasing across stages: {}\n",
            if self.acceptance_non_decreasing { "yes" } else { "no" }
        );
        out
    }
}

/// Playback log that watches every item of the playlist to the end.
pub fn full_watch_log(assignment: &TaskAssignment) -> Vec<InteractionEvent> {
    let mut t = 0;
    let mut log = Vec::with_capacity(assignment.playlist.len() * 2);
    for item in &assignment.playlist {
        log.push(InteractionEvent {
            t_ms: t,
            sequence_id: item.sequence_id.clone(),
            kind: EventKind::Play,
        });
        t += (item.duration_s * 1000.0).ceil() as i64;
        log.push(InteractionEvent {
            t_ms: t,
            sequence_id: item.sequence_id.clone(),
            kind: EventKind::Ended,
        });
        t += 1500;
    }
    log
}

struct SimWorker {
    id: WorkerId,
    model: RaterModel,
    label: String,
}

/// Runs the whole study in process.
pub fn run_study_simulation(cohort: &CohortSpec, plan: &StagePlan, seed: u64) -> Result<SimulationReport, StudyError> {
    plan.validate().map_err(StudyError::Config)?;
    let (backend, truth) = InProcessBackend::new(plan, seed)?;
    run_with_backend(&backend, &truth, cohort, plan, seed)
}

/// Drives pretest, qualification and formal stages against `backend`.
pub fn run_with_backend(
    backend: &dyn StudyBackend,
    truth: &GroundTruth,
    cohort: &CohortSpec,
    plan: &StagePlan,
    seed: u64,
) -> Result<SimulationReport, StudyError> {
    plan.validate().map_err(StudyError::Config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let mut workers: Vec<SimWorker> = Vec::new();
    for entry in &cohort.raters {
        for _ in 0..entry.count {
            workers.push(SimWorker {
                id: WorkerId(format!("w{:05}", workers.len())),
                model: entry.model.clone(),
                label: entry.model.label(),
            });
        }
    }
    // each rater type is split between pretest and qualification in the same
    // proportion, so both stages recruit from the same population mix
    let mut pretest_pool = Vec::new();
    let mut qualification_pool = Vec::new();
    let mut start = 0;
    for entry in &cohort.raters {
        let mut idx: Vec<usize> = (start..start + entry.count).collect();
        idx.shuffle(&mut rng);
        let k = (plan.pretest_share * entry.count as f64).round() as usize;
        pretest_pool.extend_from_slice(&idx[..k]);
        qualification_pool.extend_from_slice(&idx[k..]);
        start += entry.count;
    }
    pretest_pool.shuffle(&mut rng);
    qualification_pool.shuffle(&mut rng);
    let mut order: Vec<usize> = (0..workers.len()).collect();
    order.shuffle(&mut rng);

    let mut origin: HashMap<SubmissionId, (Stage, usize)> = HashMap::new();
    let mut qualified: BTreeSet<WorkerId> = BTreeSet::new();
    let mut unqualified_formal_denials = 0;
    let mut unqualified_formal_assignments = 0;

    let mut take_task = |w_idx: usize, stage: Stage, rng: &mut ChaCha8Rng| -> Result<Option<DenialReason>, StudyError> {
        let w = &workers[w_idx];
        let req = TaskRequest {
            worker_id: w.id.clone(),
            stage,
            profile: plan.profile,
        };
        let assignment = match backend.request_task(&req)? {
            RequestOutcome::Assigned(a) => a,
            RequestOutcome::Denied(d) => return Ok(Some(d.reason)),
        };
        let ids: Vec<SequenceId> = assignment.playlist.iter().map(|p| p.sequence_id.clone()).collect();
        let records = simulate_rater(&w.model, truth, &ids, rng);
        let outcome = backend.submit(SubmitRequest {
            token: assignment.session_token.clone(),
            records,
            interaction_log: full_watch_log(&assignment),
            user_agent: "avq-simulator".into(),
            env_checks: None,
        })?;
        if let SubmitOutcome::Accepted(receipt) = outcome {
            origin.insert(receipt.submission_id, (assignment.stage, w_idx));
        }
        Ok(None)
    };

    // filtering after every round keeps the accepted counters, and so the
    // group balancing, current
    for _ in 0..plan.pretest_tasks_per_worker {
        for &w in &pretest_pool {
            take_task(w, Stage::Pretest, &mut rng)?;
        }
        backend.run_filter(Stage::Pretest)?;
    }
    if plan.pretest_tasks_per_worker == 0 {
        backend.run_filter(Stage::Pretest)?;
    }
    for &w in &qualification_pool {
        take_task(w, Stage::Qualification, &mut rng)?;
    }
    qualified.extend(backend.qualify()?);

    for round in 0..plan.formal_tasks_per_worker {
        for &w in &order {
            let is_qualified = qualified.contains(&workers[w].id);
            if !is_qualified && round > 0 {
                continue;
            }
            match take_task(w, Stage::Formal, &mut rng)? {
                Some(DenialReason::Eligibility) if !is_qualified => unqualified_formal_denials += 1,
                None if !is_qualified => unqualified_formal_assignments += 1,
                _ => {}
            }
        }
        backend.run_filter(Stage::Formal)?;
    }

    let bundle = backend.export()?;
    let report_rows = read_filter_report_csv(bundle.filter_report_csv.as_bytes()).map_err(StudyError::Io)?;
    let (mos, _) = read_mos_csv(bundle.mos_csv.as_bytes()).map_err(StudyError::Io)?;

    let mut stage_tally: BTreeMap<Stage, (usize, usize)> = Stage::ALL.iter().map(|&s| (s, (0, 0))).collect();
    let mut model_tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for row in &report_rows {
        let Some(&(stage, w_idx)) = origin.get(&SubmissionId(row.submission_id.clone())) else {
            continue;
        };
        let ok = usize::from(row.verdict == Verdict::Accepted);
        let t = stage_tally.get_mut(&stage).expect("all stages present");
        t.0 += 1;
        t.1 += ok;
        let m = model_tally.entry(workers[w_idx].label.clone()).or_default();
        m.0 += 1;
        m.1 += ok;
    }
    let stages: Vec<StageStats> = stage_tally
        .iter()
        .map(|(&stage, &(n, a))| StageStats {
            stage,
            submissions: n,
            accepted: a,
            acceptance_rate: rate(a, n),
        })
        .collect();
    let rates: Vec<f64> = stages.iter().filter_map(|s| s.acceptance_rate).collect();
    let acceptance_non_decreasing = rates.len() == 3 && rates.windows(2).all(|w| w[0] <= w[1]);

    let mut models = Vec::new();
    for entry in &cohort.raters {
        let label = entry.model.label();
        if models.iter().any(|m: &ModelStats| m.model == label) {
            continue;
        }
        let (n, a) = model_tally.get(&label).copied().unwrap_or_default();
        models.push(ModelStats {
            workers: workers.iter().filter(|w| w.label == label).count(),
            qualified: workers.iter().filter(|w| w.label == label && qualified.contains(&w.id)).count(),
            model: label,
            submissions: n,
            accepted: a,
            acceptance_rate: rate(a, n),
        });
    }

    let mut mae = [0.0; 3];
    let mut n_mos = 0;
    let mut min_ratings = u32::MAX;
    let mut total_ratings = 0u64;
    for (id, e) in mos.iter() {
        let Some(t) = truth.get(id) else { continue };
        for (i, d) in Dimension::ALL.into_iter().enumerate() {
            mae[i] += (e.get(d) - t.get(d)).abs();
        }
        n_mos += 1;
        min_ratings = min_ratings.min(e.n_ratings);
        total_ratings += u64::from(e.n_ratings);
    }
    if n_mos > 0 {
        mae.iter_mut().for_each(|m| *m /= n_mos as f64);
    } else {
        min_ratings = 0;
    }

    Ok(SimulationReport {
        seed,
        workers: workers.len(),
        stages,
        models,
        qualified_workers: qualified.len(),
        unqualified_formal_denials,
        unqualified_formal_assignments,
        audit_findings: backend.audit()?.map(|a| a.len()),
        mos_sequences: n_mos,
        mos_mae: mae,
        min_ratings_per_sequence: min_ratings,
        mean_ratings_per_sequence: if n_mos > 0 { total_ratings as f64 / n_mos as f64 } else { 0.0 },
        acceptance_non_decreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cohort_parsing() {
        let c = CohortSpec::parse("faithful(0.3):50, random:50,biased(0.5,1,0.2):2").unwrap();
        assert_eq!(c.size(), 102);
        assert_eq!(c.raters[0].model, RaterModel::Faithful { noise_sd: 0.3 });
        assert_eq!(
            c.raters[2].model,
            RaterModel::Biased {
                offset: 0.5,
                scale: 1.0,
                noise_sd: 0.2
            }
        );
        assert_eq!(CohortSpec::parse("faithful:20").unwrap().raters[0].count, 20);
        assert!(CohortSpec::parse("faithful").is_err());
        assert!(CohortSpec::parse("").is_err());

        let json = r#"{"raters":[{"kind":"midrange","noise_sd":0.05,"count":3}]}"#;
        let c: CohortSpec = serde_json::from_str(json).unwrap();
        assert_eq!(
            c.raters[0].model,
            RaterModel::Midrange {
                center: 3.0,
                noise_sd: 0.05
            }
        );
    }

    #[test]
    fn small_faithful_run_is_deterministic() {
        let plan = StagePlan {
            formal_groups: 2,
            ..Default::default()
        };
        let cohort = CohortSpec::parse("faithful(0.3):20").unwrap();
        let a = run_study_simulation(&cohort, &plan, 4).unwrap();
        let b = run_study_simulation(&cohort, &plan, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.unqualified_formal_assignments, 0);
        assert_eq!(a.audit_findings, Some(0));
        assert!(a.models[0].acceptance_rate.unwrap() >= 0.95, "{}", a.summary());
    }
}
