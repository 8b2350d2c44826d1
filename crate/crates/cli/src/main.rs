//! `avq`: sampler, study server, filtering, qualification, simulation,
//! analysis and export in one binary.
//!
//! Exit status is 0 on success, 2 on usage errors and 1 on operational
//! failures.

mod config;
mod remote;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use avq_core::analysis::{attention_by_category, correlation_report, distribution_report, modality_report, plot_data};
use avq_core::domain::{AudioSemantics, Stage};
use avq_core::io::{load_catalog, read_mos_csv, save_catalog, write_filter_report_csv, FilterReportRow};
use avq_core::sampler::{diversity_report, stratified_sample, SamplingPlan};
use avq_core::simulator::{
    run_study_simulation, run_with_backend, synth_candidate_pool, CohortSpec, GroundTruth, InProcessBackend, StagePlan,
    StudyBackend,
};
use avq_core::study::{build_stage_configs, ExportBundle, FilterSummary, ServiceOptions, StudyConfig, StudyService};
use avq_server::AppState;

use config::CliConfig;
use remote::HttpBackend;

#[derive(Parser)]
#[command(name = "avq", version, about = "Crowdsourced audio-visual quality study toolkit")]
struct Cli {
    /// Shared TOML config; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select a diverse, semantically balanced subset from a candidate pool.
    Sample(SampleArgs),
    /// Run the HTTP study server over a journal store.
    Serve(ServeArgs),
    /// Create a study store from a catalog and a study config.
    InitStages(InitArgs),
    /// Run the dynamic filter for one stage.
    Filter(FilterArgs),
    /// Grant the qualification to workers who passed pretest or qualification.
    Qualify(AdminArgs),
    /// Write catalog.csv, mos.csv and filter_report.csv.
    Export(ExportArgs),
    /// Run a synthetic cohort through all three stages.
    Simulate(SimulateArgs),
    /// Modality, correlation and distribution reports for a MOS table.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SampleArgs {
    /// Candidate pool (CSV, or JSON lines for .jsonl/.json).
    #[arg(long, value_name = "FILE", required_unless_present = "synthetic_pool")]
    pool: Option<PathBuf>,
    /// Use a synthetic pool of N candidates instead of --pool.
    #[arg(long, value_name = "N", conflicts_with = "pool")]
    synthetic_pool: Option<usize>,
    /// Where to write the selected sequences.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Where to write the diversity report (JSON).
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Balancing strength; 0 is proportional sampling.
    #[arg(long)]
    alpha: Option<f64>,
    /// Histogram bins per feature.
    #[arg(long)]
    bins: Option<usize>,
    /// Size of the merged per-subset draw.
    #[arg(long, default_value_t = SamplingPlan::default().intermediate_n)]
    intermediate_n: usize,
    /// Size of the final selection.
    #[arg(long, default_value_t = SamplingPlan::default().final_n)]
    final_n: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Subset weights as `speech=2,music=2,...`, or seven numbers in the
    /// order speech, music, sound, speech+music, speech+sound, music+sound,
    /// speech+music+sound.
    #[arg(long)]
    ratios: Option<String>,
    /// Draw uniformly within subsets (same as --alpha 0).
    #[arg(long)]
    no_balancing: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// Journal store created by `init-stages`.
    #[arg(long, value_name = "FILE")]
    store: Option<PathBuf>,
    /// Listen address.
    #[arg(long, value_name = "ADDR")]
    bind: Option<String>,
    /// Environment variable holding the admin bearer token.
    #[arg(long, value_name = "VAR")]
    admin_token_var: Option<String>,
}

#[derive(Args)]
struct InitArgs {
    /// Sequence catalog with group ids.
    #[arg(long, value_name = "FILE")]
    catalog: Option<PathBuf>,
    /// Study config (TOML); defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    study_config: Option<PathBuf>,
    /// Journal store to create.
    #[arg(long, value_name = "FILE")]
    store: Option<PathBuf>,
}

#[derive(Args)]
struct AdminArgs {
    /// Journal store to operate on directly.
    #[arg(long, value_name = "FILE", conflicts_with = "server")]
    store: Option<PathBuf>,
    /// Base URL of a running server; uses the admin API.
    #[arg(long, value_name = "URL")]
    server: Option<String>,
    /// Environment variable holding the admin bearer token.
    #[arg(long, value_name = "VAR")]
    admin_token_var: Option<String>,
}

#[derive(Args)]
struct FilterArgs {
    /// pretest, qualification or formal.
    stage: Stage,
    #[command(flatten)]
    target: AdminArgs,
    /// Where to write the per-submission report (CSV); defaults to
    /// `<exports>/filter_<stage>.csv`.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    target: AdminArgs,
    /// Output directory; defaults to the configured exports path.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Cohort as `model:count,...` (e.g. `faithful(0.3):60,random:20`) or a
    /// JSON file.
    #[arg(long, default_value = "faithful:20")]
    cohort: String,
    /// Stage plan (TOML or JSON); defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    plan: Option<PathBuf>,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the simulation report (JSON).
    #[arg(long, value_name = "FILE", default_value = "simulation_report.json")]
    out: PathBuf,
    /// Drive a running server instead of an in-process study.
    #[arg(long, value_name = "URL", requires = "truth")]
    server: Option<String>,
    /// Ground truth for the server's catalog (from --emit-catalog).
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
    /// Environment variable holding the admin bearer token.
    #[arg(long, value_name = "VAR")]
    admin_token_var: Option<String>,
    /// Write the synthetic catalog, its ground truth and a matching study
    /// config to DIR, then stop.
    #[arg(long, value_name = "DIR", conflicts_with = "server")]
    emit_catalog: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// MOS table as written by `export`.
    mos: PathBuf,
    /// Output directory for the reports.
    #[arg(long, value_name = "DIR", default_value = "analysis")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = CliConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Sample(a) => sample(&cfg, a),
        Command::Serve(a) => serve(&cfg, a),
        Command::InitStages(a) => init_stages(&cfg, a),
        Command::Filter(a) => filter(&cfg, a),
        Command::Qualify(a) => qualify(&cfg, a),
        Command::Export(a) => export(&cfg, a),
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Analyze(a) => analyze(a),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_ratios(s: &str) -> Result<BTreeMap<AudioSemantics, f64>> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.iter().all(|p| !p.contains('=')) {
        if parts.len() != 7 {
            bail!("--ratios needs 7 numbers, got {}", parts.len());
        }
        return AudioSemantics::ALL
            .into_iter()
            .zip(parts)
            .map(|(s, p)| Ok((s, p.parse::<f64>().with_context(|| format!("bad ratio `{p}`"))?)))
            .collect();
    }
    let mut out: BTreeMap<AudioSemantics, f64> = AudioSemantics::ALL.into_iter().map(|s| (s, 0.0)).collect();
    for p in parts {
        let (k, v) = p.split_once('=').with_context(|| format!("expected subset=weight, got `{p}`"))?;
        let subset: AudioSemantics = k.parse()?;
        out.insert(subset, v.trim().parse().with_context(|| format!("bad ratio `{v}`"))?);
    }
    Ok(out)
}

fn sample(cfg: &CliConfig, a: SampleArgs) -> Result<()> {
    let pool = match (&a.pool, a.synthetic_pool) {
        (Some(p), _) => load_catalog(p).with_context(|| format!("loading {}", p.display()))?,
        (None, Some(n)) => synth_candidate_pool(n, a.seed),
        (None, None) => bail!("one of --pool or --synthetic-pool is required"),
    };
    let plan = SamplingPlan {
        alpha: a.alpha.unwrap_or(cfg.sampler.alpha),
        n_bins: a.bins.unwrap_or(cfg.sampler.bins),
        group_ratios: match &a.ratios {
            Some(r) => parse_ratios(r)?,
            None => SamplingPlan::default().group_ratios,
        },
        intermediate_n: a.intermediate_n,
        final_n: a.final_n,
        seed: a.seed,
        balancing: !a.no_balancing,
    };
    let selection = stratified_sample(&pool, &plan)?;
    for w in &selection.warnings {
        eprintln!("warning: {w}");
    }
    save_catalog(&a.out, &selection.selected).with_context(|| format!("writing {}", a.out.display()))?;
    let report = diversity_report(&selection.selected, &pool, &plan);
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    println!("{}", report.summary());
    println!("wrote {} sequences to {}", selection.selected.len(), a.out.display());
    Ok(())
}

fn serve(cfg: &CliConfig, a: ServeArgs) -> Result<()> {
    let store = a.store.unwrap_or_else(|| cfg.paths.store.clone());
    let bind = a.bind.unwrap_or_else(|| cfg.server.bind.clone());
    let var = a.admin_token_var.unwrap_or_else(|| cfg.server.admin_token_var.clone());
    let service = StudyService::open(&store, ServiceOptions::default())
        .with_context(|| format!("opening store {}", store.display()))?;
    let state = AppState::with_token_from_env(Arc::new(service), &var);
    if state.admin_token.is_none() {
        eprintln!("warning: ${var} is not set; admin endpoints are disabled");
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        avq_server::serve(listener, state, shutdown).await?;
        Ok(())
    })
}

fn init_stages(cfg: &CliConfig, a: InitArgs) -> Result<()> {
    let catalog_path = a.catalog.unwrap_or_else(|| cfg.paths.catalog.clone());
    let store = a.store.unwrap_or_else(|| cfg.paths.store.clone());
    let catalog = load_catalog(&catalog_path).with_context(|| format!("loading {}", catalog_path.display()))?;
    let study = match &a.study_config {
        Some(p) => StudyConfig::from_toml(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => StudyConfig {
            thresholds: cfg.thresholds,
            ..Default::default()
        },
    };
    let stages = build_stage_configs(&study, &catalog)?;
    let non_empty = std::fs::metadata(&store).map(|m| m.len() > 0).unwrap_or(false);
    if non_empty {
        let existing = StudyService::open(&store, ServiceOptions::default())?;
        if existing.stage_configs() == stages {
            println!("{} already holds these stages; nothing to do", store.display());
            return Ok(());
        }
        bail!("{} already holds a different study", store.display());
    }
    StudyService::create(study.settings(), stages.clone(), catalog, Some(&store), ServiceOptions::default())?;
    for s in &stages {
        println!("{}: {} groups", s.stage, s.groups.len());
    }
    println!("created {}", store.display());
    Ok(())
}

/// A study reached either through its store or through a server's admin API.
enum Target {
    Local(Box<InProcessBackend>),
    Remote(HttpBackend),
}

impl Target {
    fn open(cfg: &CliConfig, a: &AdminArgs) -> Result<Self> {
        if let Some(url) = &a.server {
            let var = a.admin_token_var.clone().unwrap_or_else(|| cfg.server.admin_token_var.clone());
            let token = std::env::var(&var).ok().filter(|t| !t.is_empty());
            if token.is_none() {
                bail!("${var} is not set; the admin API needs a bearer token");
            }
            return Ok(Target::Remote(HttpBackend::new(url, token)));
        }
        let store = a.store.clone().unwrap_or_else(|| cfg.paths.store.clone());
        let service = StudyService::open(&store, ServiceOptions::default())
            .with_context(|| format!("opening store {}", store.display()))?;
        Ok(Target::Local(Box::new(InProcessBackend { service })))
    }

    fn backend(&self) -> &dyn StudyBackend {
        match self {
            Target::Local(s) => s.as_ref(),
            Target::Remote(h) => h,
        }
    }
}

fn filter(cfg: &CliConfig, a: FilterArgs) -> Result<()> {
    let target = Target::open(cfg, &a.target)?;
    let summary: FilterSummary = target.backend().run_filter(a.stage)?;
    let out = a
        .out
        .unwrap_or_else(|| cfg.paths.exports.join(format!("filter_{}.csv", a.stage)));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let rows: Vec<FilterReportRow> = summary.outcomes.iter().map(FilterReportRow::scored).collect();
    let file = std::fs::File::create(&out).with_context(|| format!("writing {}", out.display()))?;
    write_filter_report_csv(file, &rows)?;
    println!(
        "{}: {} submissions, {} accepted, {} sequences with MOS; report in {}",
        summary.stage,
        summary.submissions,
        summary.accepted,
        summary.mos_sequences,
        out.display()
    );
    Ok(())
}

fn qualify(cfg: &CliConfig, a: AdminArgs) -> Result<()> {
    let target = Target::open(cfg, &a)?;
    let granted = target.backend().qualify()?;
    println!("granted {} workers", granted.len());
    for w in granted {
        println!("{w}");
    }
    Ok(())
}

fn export(cfg: &CliConfig, a: ExportArgs) -> Result<()> {
    let target = Target::open(cfg, &a.target)?;
    let bundle = target.backend().export()?;
    let dir = a.out.unwrap_or_else(|| cfg.paths.exports.clone());
    bundle.write_to(&dir).with_context(|| format!("writing {}", dir.display()))?;
    println!(
        "wrote {}, {} and {} to {}",
        ExportBundle::CATALOG_FILE,
        ExportBundle::MOS_FILE,
        ExportBundle::FILTER_REPORT_FILE,
        dir.display()
    );
    Ok(())
}

fn load_cohort(spec: &str) -> Result<CohortSpec> {
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e == "json") && path.exists() {
        let text = std::fs::read_to_string(path)?;
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    CohortSpec::parse(spec).map_err(anyhow::Error::msg)
}

fn load_plan(path: Option<&Path>) -> Result<StagePlan> {
    let Some(path) = path else {
        return Ok(StagePlan::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let plan = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    Ok(plan)
}

fn simulate(cfg: &CliConfig, a: SimulateArgs) -> Result<()> {
    let plan = load_plan(a.plan.as_deref())?;
    plan.validate().map_err(anyhow::Error::msg)?;

    if let Some(dir) = &a.emit_catalog {
        std::fs::create_dir_all(dir)?;
        let (catalog, truth) = plan.catalog(a.seed);
        save_catalog(&dir.join("catalog.csv"), &catalog)?;
        write_json(&dir.join("truth.json"), &truth)?;
        std::fs::write(dir.join("study.toml"), toml::to_string(&plan.study_config())?)?;
        println!("wrote catalog.csv, truth.json and study.toml to {}", dir.display());
        return Ok(());
    }

    let cohort = load_cohort(&a.cohort)?;
    let report = match &a.server {
        None => run_study_simulation(&cohort, &plan, a.seed)?,
        Some(url) => {
            let truth_path = a.truth.as_ref().context("--server needs --truth")?;
            let truth: GroundTruth = serde_json::from_str(&std::fs::read_to_string(truth_path)?)
                .with_context(|| format!("parsing {}", truth_path.display()))?;
            let var = a.admin_token_var.unwrap_or_else(|| cfg.server.admin_token_var.clone());
            let token = std::env::var(&var).ok().filter(|t| !t.is_empty());
            run_with_backend(&HttpBackend::new(url, token), &truth, &cohort, &plan, a.seed)?
        }
    };
    write_json(&a.out, &report)?;
    println!("{}", report.summary());
    println!("report written to {}", a.out.display());
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let file = std::fs::File::open(&a.mos).with_context(|| format!("opening {}", a.mos.display()))?;
    let (mos, categories) = read_mos_csv(file)?;
    std::fs::create_dir_all(&a.out)?;
    let modality = modality_report(&mos)?;
    std::fs::write(a.out.join("modality.csv"), modality.to_csv())?;
    write_json(&a.out.join("modality.json"), &modality)?;
    let distribution = distribution_report(&mos)?;
    write_json(&a.out.join("distribution.json"), &distribution)?;
    write_json(&a.out.join("plot_data.json"), &plot_data(&mos))?;
    match correlation_report(&mos) {
        Ok(c) => write_json(&a.out.join("correlation.json"), &c)?,
        Err(e) => eprintln!("warning: correlation report skipped: {e}"),
    }
    if !categories.is_empty() {
        write_json(
            &a.out.join("attention_by_category.json"),
            &attention_by_category(&mos, &categories),
        )?;
    }
    print!("{}", modality.to_csv());
    println!("reports written to {}", a.out.display());
    Ok(())
}
