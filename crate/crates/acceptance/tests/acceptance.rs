//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use avq_acceptance::{wilson, Suite, Verdict, Z99};
use avq_core::analysis::{classify_modality_group, ModalityGroup};
use avq_core::domain::{
    AudioSemantics, FilterThresholds, Stage, Submission, SubmissionId, Verdict as SubVerdict, WorkerId, WorkerProfile,
};
use avq_core::sampler::{bin_weights, diversity_report, stratified_sample, SamplingPlan};
use avq_core::simulator::{
    full_watch_log, run_study_simulation, simulate_rater, synth_candidate_pool, synth_catalog, CatalogOptions,
    CohortSpec, GroundTruth, RaterModel, StagePlan,
};
use avq_core::stats::{dynamic_filter, srocc, FilterMode, FilterOptions};
use avq_core::study::{
    build_stage_configs, ServiceOptions, StudyService, SubmitReceipt, SubmitRequest, TaskAssignment, TaskRequest,
};
use avq_server::AppState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ---- SROCC oracle ----------------------------------------------------------

fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let below = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn srocc_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut tie_free = 0;
    let mut undefined = 0;
    for i in 0..1000 {
        let n = rng.random_range(3..=30);
        // every third pair draws from a wide range, so some are tie-free
        let hi = if i % 3 == 0 { 1000 } else { 6 };
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(1..=hi) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(1..=hi) as f64).collect();
        let got = srocc(&x, &y).expect("equal lengths");
        let want = brute_pearson(&brute_ranks(&x), &brute_ranks(&y));
        match (got, want) {
            (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
            (None, None) => undefined += 1,
            _ => return Verdict::new(false, format!("definedness differs on pair {i}: {got:?} vs {want:?}")),
        }
        let distinct_x: HashSet<u64> = x.iter().map(|v| v.to_bits()).collect();
        let distinct_y: HashSet<u64> = y.iter().map(|v| v.to_bits()).collect();
        if distinct_x.len() == n && distinct_y.len() == n {
            tie_free += 1;
            let rx = brute_ranks(&x);
            let ry = brute_ranks(&y);
            let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
            let nf = n as f64;
            let spearman = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
            worst = worst.max((got.unwrap() - spearman).abs());
        }
    }
    Verdict::new(
        worst <= 1e-12 && tie_free > 100,
        format!("max |diff| {worst:.2e} over 1000 pairs ({tie_free} tie-free, {undefined} undefined on both sides)"),
    )
}

// ---- dynamic filtering Monte Carlo ------------------------------------------

#[derive(Default, Clone, Copy)]
struct Tally {
    faithful: (u64, u64),
    random: (u64, u64),
    constant_accepted: u64,
    constant_std_pass: u64,
    midrange_accepted: u64,
    midrange_std_pass: u64,
    degenerate: u64,
}

impl Tally {
    fn merge(mut self, o: Tally) -> Tally {
        self.faithful.0 += o.faithful.0;
        self.faithful.1 += o.faithful.1;
        self.random.0 += o.random.0;
        self.random.1 += o.random.1;
        self.constant_accepted += o.constant_accepted;
        self.constant_std_pass += o.constant_std_pass;
        self.midrange_accepted += o.midrange_accepted;
        self.midrange_std_pass += o.midrange_std_pass;
        self.degenerate += o.degenerate;
        self
    }
}

const FILTER_TRIALS: u64 = 10_000;
const CONSTANT_RATERS: usize = 2;
const MIDRANGE_RATERS: usize = 2;

fn filter_trial(trial: u64) -> Tally {
    let options = CatalogOptions::default();
    let (catalog, truth) = synth_catalog(30, &options, trial);
    let ids: Vec<_> = catalog.iter().map(|s| s.id.clone()).collect();
    let group = catalog[0].group_id.clone().expect("grouped catalog");
    let mut rng = ChaCha8Rng::seed_from_u64(trial ^ 0xf11e_7e57);
    let mut models = Vec::new();
    models.extend(std::iter::repeat_n(RaterModel::Faithful { noise_sd: 0.3 }, 50));
    models.extend(std::iter::repeat_n(RaterModel::RandomUniform, 50));
    models.extend(std::iter::repeat_n(RaterModel::Constant { value: 3.0 }, CONSTANT_RATERS));
    models.extend(std::iter::repeat_n(
        RaterModel::Midrange {
            center: 3.0,
            noise_sd: 0.05,
        },
        MIDRANGE_RATERS,
    ));
    let subs: Vec<Submission> = models
        .iter()
        .enumerate()
        .map(|(i, m)| Submission {
            submission_id: SubmissionId(format!("s{i:03}")),
            worker_id: WorkerId(format!("w{i:03}")),
            group_id: group.clone(),
            stage: Stage::Pretest,
            records: simulate_rater(m, &truth, &ids, &mut rng),
            user_agent: String::new(),
            interaction_log: Vec::new(),
            watch_complete: true,
            verdict: SubVerdict::Pending,
            env_checks: None,
        })
        .collect();
    let thresholds = FilterThresholds::default();
    let (outcomes, _) = dynamic_filter(&subs, FilterOptions::from(thresholds), FilterMode::SinglePass);
    let mut t = Tally::default();
    for (m, o) in models.iter().zip(&outcomes) {
        let acc = o.accepted as u64;
        let std_pass = (o.avg_std > thresholds.std_min) as u64;
        match m {
            RaterModel::Faithful { .. } => t.faithful = (t.faithful.0 + acc, t.faithful.1 + 1),
            RaterModel::RandomUniform => t.random = (t.random.0 + acc, t.random.1 + 1),
            RaterModel::Constant { .. } => {
                t.constant_accepted += acc;
                t.constant_std_pass += std_pass;
            }
            RaterModel::Midrange { .. } => {
                t.midrange_accepted += acc;
                t.midrange_std_pass += std_pass;
            }
            RaterModel::Biased { .. } => unreachable!(),
        }
        if !o.avg_srocc.is_finite() || !o.avg_std.is_finite() {
            t.degenerate += 1;
        }
    }
    t
}

fn filtering_monte_carlo() -> Verdict {
    let t = (0..FILTER_TRIALS)
        .into_par_iter()
        .map(filter_trial)
        .reduce(Tally::default, Tally::merge);
    let (f_lo, f_hi) = wilson(t.faithful.0, t.faithful.1, Z99);
    let (r_lo, r_hi) = wilson(t.random.0, t.random.1, Z99);
    let pass = f_lo >= 0.90
        && r_hi <= 0.05
        && t.constant_accepted == 0
        && t.constant_std_pass == 0
        && t.midrange_accepted == 0
        && t.midrange_std_pass == 0
        && t.degenerate == 0;
    Verdict::new(
        pass,
        format!(
            "{FILTER_TRIALS} trials; faithful {:.2}% [99% CI {:.2}, {:.2}], random {:.2}% [99% CI {:.2}, {:.2}]; \
             constant {} accepted / {} passed STD, midrange(0.05) {} accepted / {} passed STD",
            100.0 * t.faithful.0 as f64 / t.faithful.1 as f64,
            100.0 * f_lo,
            100.0 * f_hi,
            100.0 * t.random.0 as f64 / t.random.1 as f64,
            100.0 * r_lo,
            100.0 * r_hi,
            t.constant_accepted,
            t.constant_std_pass,
            t.midrange_accepted,
            t.midrange_std_pass,
        ),
    )
}

// ---- MOS recovery and end-to-end ---------------------------------------------

fn mos_recovery() -> Verdict {
    let plan = StagePlan {
        formal_groups: 4,
        pretest_share: 0.5,
        pretest_tasks_per_worker: 4,
        formal_tasks_per_worker: 4,
        ..Default::default()
    };
    let cohort = CohortSpec::parse("faithful(0.3):60").unwrap();
    let r = run_study_simulation(&cohort, &plan, 11).unwrap();
    let pass = r.min_ratings_per_sequence >= 30 && r.mos_mae.iter().all(|m| *m <= 0.10);
    Verdict::new(
        pass,
        format!(
            "{} sequences, min {} accepted ratings; MAE avqa {:.4}, av_vqa {:.4}, av_aqa {:.4}",
            r.mos_sequences, r.min_ratings_per_sequence, r.mos_mae[0], r.mos_mae[1], r.mos_mae[2]
        ),
    )
}

const MIXED_COHORT: &str = "faithful(0.3):60,random:20,midrange(0.05):10,constant(3):10";
const E2E_SEEDS: u64 = 10;

fn end_to_end() -> Verdict {
    let cohort = CohortSpec::parse(MIXED_COHORT).unwrap();
    let plan = StagePlan::default();
    let reports: Vec<_> = (0..E2E_SEEDS)
        .into_par_iter()
        .map(|seed| run_study_simulation(&cohort, &plan, seed).unwrap())
        .collect();
    let mut failures = Vec::new();
    for r in &reports {
        if r.audit_findings != Some(0) || r.unqualified_formal_assignments != 0 {
            failures.push(format!("seed {}: audit {:?}", r.seed, r.audit_findings));
        }
        if !r.acceptance_non_decreasing {
            let rates: Vec<String> = r
                .stages
                .iter()
                .map(|s| format!("{:.3}", s.acceptance_rate.unwrap_or(f64::NAN)))
                .collect();
            failures.push(format!("seed {}: rates {}", r.seed, rates.join(" -> ")));
        }
    }
    let mean_rate = |i: usize| {
        reports.iter().filter_map(|r| r.stages[i].acceptance_rate).sum::<f64>() / reports.len() as f64
    };
    Verdict::new(
        failures.is_empty(),
        format!(
            "{MIXED_COHORT}, {E2E_SEEDS} seeds; mean acceptance {:.1}% -> {:.1}% -> {:.1}%; {}",
            100.0 * mean_rate(0),
            100.0 * mean_rate(1),
            100.0 * mean_rate(2),
            if failures.is_empty() {
                "audits empty, every seed non-decreasing".to_owned()
            } else {
                failures.join("; ")
            }
        ),
    )
}

// ---- sampler -----------------------------------------------------------------

fn sampler_diversity() -> Verdict {
    let pool = synth_candidate_pool(50_000, 77);
    let plan = SamplingPlan {
        alpha: 0.3,
        n_bins: 8,
        intermediate_n: 10_000,
        seed: 5,
        ..Default::default()
    };
    let a = stratified_sample(&pool, &plan).unwrap();
    let b = stratified_sample(&pool, &plan).unwrap();
    let ids = |s: &[avq_core::domain::Sequence]| s.iter().map(|q| q.id.clone()).collect::<Vec<_>>();
    let deterministic = ids(&a.intermediate) == ids(&b.intermediate) && ids(&a.selected) == ids(&b.selected);
    let report = diversity_report(&a.intermediate, &pool, &plan);
    let entropy_up = report.features.iter().all(|f| f.after_entropy_bits > f.before_entropy_bits);
    let targets = plan.normalized_ratios();
    let mut worst_pp = 0.0f64;
    for s in AudioSemantics::ALL {
        let got = a.intermediate.iter().filter(|q| q.audio_semantics == s).count() as f64 / a.intermediate.len() as f64;
        worst_pp = worst_pp.max(100.0 * (got - targets[s.canonical_index()]).abs());
    }
    let entropies: Vec<String> = report
        .features
        .iter()
        .map(|f| format!("{} {:.3}->{:.3}", f.feature.name(), f.before_entropy_bits, f.after_entropy_bits))
        .collect();
    Verdict::new(
        deterministic && entropy_up && worst_pp <= 1.5 && a.intermediate.len() == 10_000,
        format!(
            "50k pool -> {} selected; entropy bits {}; worst ratio deviation {worst_pp:.3} pp; deterministic {deterministic}",
            a.intermediate.len(),
            entropies.join(", ")
        ),
    )
}

fn bin_weight_cases() -> Verdict {
    let mut values = vec![0.0; 75];
    values.extend(std::iter::repeat_n(1.0, 25));
    let mut worst = 0.0f64;
    let mut shown = Vec::new();
    for (alpha, frozen) in [(0.0, [0.5, 0.5]), (0.3, [0.418342, 0.581658]), (1.0, [0.25, 0.75])] {
        let w = bin_weights(&values, 2, alpha).unwrap();
        // (uniform / empirical)^alpha, normalized, with uniform = 1/2
        let raw = [(0.5f64 / 0.75).powf(alpha), (0.5f64 / 0.25).powf(alpha)];
        let total = raw[0] + raw[1];
        let want = [raw[0] / total, raw[1] / total];
        for i in 0..2 {
            worst = worst.max((w.bin_weights[i] - want[i]).abs());
            if (want[i] - frozen[i]).abs() > 5e-7 {
                return Verdict::new(false, format!("oracle disagrees with frozen value at alpha {alpha}"));
            }
        }
        if w.counts != [75, 25] {
            return Verdict::new(false, format!("counts {:?}", w.counts));
        }
        shown.push(format!("a={alpha}: ({:.6}, {:.6})", w.bin_weights[0], w.bin_weights[1]));
    }
    Verdict::new(worst <= 1e-9, format!("{}; max |diff| {worst:.1e}", shown.join(", ")))
}

// ---- server contracts over HTTP ------------------------------------------------

struct Live {
    base: String,
    http: reqwest::Client,
    truth: GroundTruth,
}

impl Live {
    async fn request(&self, worker: &str) -> Option<TaskAssignment> {
        let req = TaskRequest {
            worker_id: WorkerId(worker.to_owned()),
            stage: Stage::Pretest,
            profile: WorkerProfile {
                approval_rate: 99.0,
                approved_hits: 1000,
            },
        };
        let resp = self.http.post(format!("{}/tasks/request", self.base)).json(&req).send().await.ok()?;
        if resp.status() != reqwest::StatusCode::OK {
            return None;
        }
        resp.json().await.ok()
    }

    fn answers(&self, a: &TaskAssignment, seed: u64) -> SubmitRequest {
        let ids: Vec<_> = a.playlist.iter().map(|p| p.sequence_id.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SubmitRequest {
            token: a.session_token.clone(),
            records: simulate_rater(&RaterModel::Faithful { noise_sd: 0.3 }, &self.truth, &ids, &mut rng),
            interaction_log: full_watch_log(a),
            user_agent: "acceptance".into(),
            env_checks: None,
        }
    }

    async fn submit(&self, body: &SubmitRequest) -> Option<SubmitReceipt> {
        let resp = self.http.post(format!("{}/tasks/submit", self.base)).json(body).send().await.ok()?;
        if resp.status() != reqwest::StatusCode::OK {
            return None;
        }
        resp.json().await.ok()
    }
}

const CODE_WORKERS: usize = 2_500;

async fn server_contracts() -> Verdict {
    let plan = StagePlan {
        formal_groups: 1,
        ..Default::default()
    };
    let (catalog, truth) = plan.catalog(8);
    let config = plan.study_config();
    let stages = build_stage_configs(&config, &catalog).unwrap();
    let service = Arc::new(
        StudyService::create(config.settings(), stages, catalog, None, ServiceOptions::default()).unwrap(),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let state = AppState::new(service.clone(), None);
    tokio::spawn(avq_server::serve(listener, state, std::future::pending()));
    let live = Arc::new(Live {
        base,
        http: reqwest::Client::new(),
        truth,
    });

    // 100 parallel requests for one worker
    let handles: Vec<_> = (0..100)
        .map(|_| {
            let live = live.clone();
            tokio::spawn(async move { live.request("storm").await.map(|a| a.session_token) })
        })
        .collect();
    let mut tokens = HashSet::new();
    for h in handles {
        match h.await.unwrap() {
            Some(t) => {
                tokens.insert(t);
            }
            None => return Verdict::new(false, "a parallel request failed"),
        }
    }
    let one_assignment = tokens.len() == 1 && service.active_assignments(&WorkerId("storm".into())) == 1;

    // duplicate submit
    let a = live.request("storm").await.unwrap();
    let body = live.answers(&a, 1);
    let first = live.submit(&body).await;
    let second = live.submit(&body).await;
    let duplicate_same = first.is_some() && first == second;

    // every worker takes all four pretest groups
    let chunks = 32;
    let handles: Vec<_> = (0..chunks)
        .map(|c| {
            let live = live.clone();
            tokio::spawn(async move {
                let mut codes = Vec::new();
                for w in (c..CODE_WORKERS).step_by(chunks) {
                    let worker = format!("w{w:05}");
                    for round in 0..4 {
                        let Some(a) = live.request(&worker).await else { break };
                        let body = live.answers(&a, (w * 4 + round) as u64);
                        if let Some(r) = live.submit(&body).await {
                            codes.push(r.completion_code);
                        }
                    }
                }
                codes
            })
        })
        .collect();
    let mut codes = Vec::new();
    for h in handles {
        codes.extend(h.await.unwrap());
    }
    let unique: HashSet<&String> = codes.iter().collect();
    let all_unique = codes.len() == CODE_WORKERS * 4 && unique.len() == codes.len();
    Verdict::new(
        one_assignment && duplicate_same && all_unique,
        format!(
            "100 parallel requests -> {} token(s); duplicate submit same code: {duplicate_same}; \
             {} submissions, {} distinct codes",
            tokens.len(),
            codes.len(),
            unique.len()
        ),
    )
}

// ---- modality grid ---------------------------------------------------------------

fn modality_grid() -> Verdict {
    // oracle on integer hundredths, boundaries go outward
    let expected = |h: i32| {
        if h <= -30 {
            ModalityGroup::AMuchLessV
        } else if h <= -10 {
            ModalityGroup::ALessV
        } else if h < 10 {
            ModalityGroup::AApproxV
        } else if h < 30 {
            ModalityGroup::AGreaterV
        } else {
            ModalityGroup::AMuchGreaterV
        }
    };
    let mut seen = HashSet::new();
    let mut mismatches = Vec::new();
    let mut previous = ModalityGroup::AMuchLessV;
    for h in -50..=50 {
        // the same gap reached three ways, as a MOS difference would produce it
        let direct = h as f64 / 100.0;
        let via_aqa = (3.0 + h as f64 * 0.01) - 3.0;
        let via_vqa = 2.5 - (2.5 - h as f64 / 100.0);
        let groups = [direct, via_aqa, via_vqa].map(classify_modality_group);
        if groups.iter().any(|g| *g != expected(h)) {
            mismatches.push(format!("{direct:+.2} -> {groups:?}"));
        }
        if groups[0] < previous {
            mismatches.push(format!("not monotone at {direct:+.2}"));
        }
        previous = groups[0];
        seen.insert(groups[0]);
    }
    Verdict::new(
        mismatches.is_empty() && seen.len() == 5,
        if mismatches.is_empty() {
            "101 grid points incl. ±0.1 and ±0.3, all five groups hit, each point in exactly one group".to_owned()
        } else {
            mismatches.join("; ")
        },
    )
}

fn main() {
    let mut suite = Suite::default();
    suite.run("SROCC oracle equivalence", secs(5), srocc_oracle);
    suite.run("Filtering with thresholds 0.5/0.5", secs(120), filtering_monte_carlo);
    suite.run("MOS recovery", secs(60), mos_recovery);
    suite.run("End-to-end three-stage simulation", secs(120), end_to_end);
    suite.run("Sampler diversity, ratios and determinism", secs(30), sampler_diversity);
    suite.run("bin_weights hand cases", secs(1), bin_weight_cases);
    suite.run("Server contracts under concurrency", secs(60), || {
        tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .unwrap()
            .block_on(server_contracts())
    });
    suite.run("Modality grouping grid", secs(1), modality_grid);
    suite.finish();
}
