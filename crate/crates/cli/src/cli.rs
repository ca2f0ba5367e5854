use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hetplan_core::domain::{validate_plan, ClusterSpec, Constraint, JobSpec, Objective, SearchRequest};
use hetplan_core::oracle::{oracle_search, OracleCaps};
use hetplan_core::planner::report::PlanDocument;
use hetplan_core::planner::{plan_search_with, Heuristics, PlannerOptions, StageSearch, TpCache};
use hetplan_core::profiles::{
    fit_bandwidth, gen_synthetic_profile, load_cluster_file, load_job_profile_file, parse_json, read_file, save_cluster,
    save_job_profile, BandwidthSample, ProfileStore, SyntheticSpec, DEFAULT_DEGREE,
};
use hetplan_core::simulate;
use serde_json::{json, Value};

use crate::error::CliError;
use crate::replan::replay;
use crate::trace::{load_trace, synthetic_trace};

#[derive(Debug, Parser)]
#[command(name = "hetplan", version, about = "Plan and simulate training jobs on heterogeneous GPU clusters")]
pub struct Cli {
    /// Worker threads for the search (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for commands that draw random numbers.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one plan and print its report.
    Simulate {
        #[arg(long)]
        job: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search for the best plans.
    Plan {
        #[arg(long)]
        job: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[command(flatten)]
        request: RequestArgs,
        #[command(flatten)]
        search: SearchArgs,
        /// Number of plans to return.
        #[arg(long, default_value_t = 1)]
        top: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay an availability trace, replanning after every event.
    Replan {
        #[arg(long)]
        job: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        request: RequestArgs,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a bandwidth curve to (bytes, seconds) samples.
    FitBandwidth {
        /// JSON array of {"bytes", "seconds"} objects.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DEGREE)]
        degree: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic job profile, cluster and availability trace.
    Gen {
        #[arg(long, default_value = "opt350-like")]
        preset: String,
        #[arg(long)]
        outdir: PathBuf,
        /// Events in the generated trace.
        #[arg(long, default_value_t = 24)]
        trace_events: usize,
    },
    /// Check input files. A plan is checked against the job and cluster
    /// when both are given.
    Validate {
        #[arg(long)]
        job: Option<PathBuf>,
        #[arg(long)]
        cluster: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Exhaustive search, for small instances only.
    Oracle {
        #[arg(long)]
        job: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[command(flatten)]
        request: RequestArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    MaxThroughput,
    MinCost,
}

#[derive(Debug, Clone, Args)]
pub struct RequestArgs {
    #[arg(long, value_enum, default_value_t = ObjectiveArg::MaxThroughput)]
    pub objective: ObjectiveArg,
    /// Maximum cost per iteration.
    #[arg(long, conflicts_with = "min_throughput")]
    pub budget: Option<f64>,
    /// Minimum iterations per second.
    #[arg(long)]
    pub min_throughput: Option<f64>,
}

impl RequestArgs {
    pub fn to_request(&self) -> Result<SearchRequest, CliError> {
        let objective = match self.objective {
            ObjectiveArg::MaxThroughput => Objective::MaxThroughput,
            ObjectiveArg::MinCost => Objective::MinCostPerIteration,
        };
        let mut req = SearchRequest::new(objective);
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(v)
            } else {
                Err(CliError::validation(format!("--{name} must be a non-negative number")))
            }
        };
        if let Some(b) = self.budget {
            req = req.with_constraint(Constraint::Budget(positive("budget", b)?));
        }
        if let Some(f) = self.min_throughput {
            req = req.with_constraint(Constraint::MinThroughput(positive("min-throughput", f)?));
        }
        Ok(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageSearchArg {
    Exhaustive,
    Coarse,
    Adaptive,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    /// Give up after this many seconds (exit 5).
    #[arg(long)]
    pub deadline: Option<f64>,
    /// Turn off the pruning heuristics (for comparisons).
    #[arg(long)]
    pub no_heuristics: bool,
    #[arg(long, value_enum, default_value_t = StageSearchArg::Adaptive)]
    pub stage_search: StageSearchArg,
    /// States a run may visit before it is redone coarse (adaptive only).
    #[arg(long, default_value_t = 50_000)]
    pub state_budget: u64,
}

impl SearchArgs {
    pub fn options(&self, top: usize) -> Result<PlannerOptions, CliError> {
        let deadline = match self.deadline {
            None => None,
            Some(s) if s.is_finite() && s > 0.0 => Some(Duration::from_secs_f64(s)),
            Some(_) => return Err(CliError::validation("--deadline must be a positive number of seconds")),
        };
        Ok(PlannerOptions {
            heuristics: if self.no_heuristics { Heuristics::none() } else { Heuristics::default() },
            top: top.max(1),
            deadline,
            stage_search: match self.stage_search {
                StageSearchArg::Exhaustive => StageSearch::Exhaustive,
                StageSearchArg::Coarse => StageSearch::Coarse,
                StageSearchArg::Adaptive => StageSearch::Adaptive { state_budget: self.state_budget },
            },
            ..PlannerOptions::default()
        })
    }
}

/// Payload for stdout (or `--out`) on success.
pub struct Output {
    pub value: Value,
    pub out: Option<PathBuf>,
}

impl Output {
    fn new(value: Value, out: Option<PathBuf>) -> Self {
        Self { value, out }
    }

    /// Writes the payload where it belongs.
    pub fn emit(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.value)?;
        match &self.out {
            Some(path) => std::fs::write(path, text + "\n")
                .map_err(|e| CliError::internal(format!("cannot write {}: {e}", path.display()))),
            None => {
                println!("{text}");
                Ok(())
            }
        }
    }
}

fn load_inputs(job: &Path, cluster: &Path) -> Result<(JobSpec, ProfileStore, ClusterSpec), CliError> {
    let (job, store) = load_job_profile_file(job)?;
    let cluster = load_cluster_file(cluster)?;
    Ok((job, store, cluster))
}

fn load_plan(path: &Path) -> Result<PlanDocument, CliError> {
    Ok(parse_json(&read_file(path)?)?)
}

pub fn run(cli: Cli) -> Result<Output, CliError> {
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the first pool
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::debug!("thread pool already set: {e}");
        }
    }
    match cli.command {
        Command::Simulate { job, cluster, plan, out } => {
            let (job, store, cluster) = load_inputs(&job, &cluster)?;
            let plan = load_plan(&plan)?.to_plan();
            let report = simulate(&plan, &job, &cluster, &store)?;
            Ok(Output::new(serde_json::to_value(report)?, out))
        }
        Command::Plan { job, cluster, request, search, top, out } => {
            let (job, store, cluster) = load_inputs(&job, &cluster)?;
            let req = request.to_request()?;
            let opts = search.options(top)?;
            let outcome = plan_search_with(&req, &job, &cluster, &store, &opts, &TpCache::new())?;
            let plans: Vec<PlanDocument> = outcome
                .ranked
                .iter()
                .map(|r| {
                    PlanDocument::with_result(
                        &r.plan,
                        &r.report,
                        req.objective,
                        req.constraint,
                        outcome.stats.search_time_seconds,
                    )
                })
                .collect();
            let value = json!({
                "plans": plans,
                "search_time_seconds": outcome.stats.search_time_seconds,
                "stats": outcome.stats,
            });
            Ok(Output::new(value, out))
        }
        Command::Replan { job, cluster, trace, request, search, out } => {
            let (job, store, cluster) = load_inputs(&job, &cluster)?;
            let trace = load_trace(&trace)?;
            let log = replay(&job, &cluster, &store, &trace, &request.to_request()?, &search.options(1)?);
            Ok(Output::new(serde_json::to_value(log?)?, out))
        }
        Command::FitBandwidth { samples, degree, out } => {
            let samples: Vec<BandwidthSample> = parse_json(&read_file(&samples)?)?;
            let fit = fit_bandwidth(&samples, degree)?;
            Ok(Output::new(serde_json::to_value(fit)?, out))
        }
        Command::Gen { preset, outdir, trace_events } => {
            let spec = SyntheticSpec::preset(&preset, cli.seed).ok_or_else(|| {
                CliError::validation(format!(
                    "unknown preset {preset:?}; expected one of {}",
                    SyntheticSpec::preset_names().join(", ")
                ))
            })?;
            let (job, store, cluster) = gen_synthetic_profile(&spec)?;
            let trace = default_trace(&cluster, trace_events, cli.seed)?;
            std::fs::create_dir_all(&outdir)
                .map_err(|e| CliError::internal(format!("cannot create {}: {e}", outdir.display())))?;
            let files = [
                ("job.json", save_job_profile(&job, &store)),
                ("cluster.json", save_cluster(&cluster)),
                ("trace.json", serde_json::to_value(&trace)?),
            ];
            let mut written = Vec::new();
            for (name, value) in files {
                let path = outdir.join(name);
                std::fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")
                    .map_err(|e| CliError::internal(format!("cannot write {}: {e}", path.display())))?;
                written.push(path.display().to_string());
            }
            Ok(Output::new(json!({ "preset": preset, "seed": cli.seed, "files": written }), None))
        }
        Command::Validate { job, cluster, plan } => validate(job.as_deref(), cluster.as_deref(), plan.as_deref()),
        Command::Oracle { job, cluster, request, out } => {
            let (job, store, cluster) = load_inputs(&job, &cluster)?;
            let req = request.to_request()?;
            let started = std::time::Instant::now();
            let best = oracle_search(&req, &job, &cluster, &store, &OracleCaps::default())?;
            let Some(best) = best else {
                return Err(CliError::new(crate::error::ErrorKind::Infeasible, "no enumerated plan is feasible"));
            };
            let doc = PlanDocument::with_result(
                &best.plan,
                &best.report,
                req.objective,
                req.constraint,
                started.elapsed().as_secs_f64(),
            );
            Ok(Output::new(serde_json::to_value(doc)?, out))
        }
    }
}

/// Trace over the A100-class nodes of the first zone in each of the first
/// two regions, or over the first GPU type when there is no A100 class.
fn default_trace(
    cluster: &ClusterSpec,
    events: usize,
    seed: u64,
) -> Result<crate::trace::AvailabilityTrace, CliError> {
    let gpu = cluster
        .gpu_types()
        .iter()
        .find(|g| g.name.starts_with("A100"))
        .or_else(|| cluster.gpu_types().first())
        .ok_or_else(|| CliError::validation("cluster has no GPU types"))?;
    let mut zones: Vec<String> = Vec::new();
    for region in cluster.regions() {
        if let Some(z) = cluster.zones().iter().find(|z| &z.region == region) {
            zones.push(z.name.clone());
        }
        if zones.len() == 2 {
            break;
        }
    }
    synthetic_trace(cluster, &gpu.name, &zones, events, seed)
}

fn validate(job: Option<&Path>, cluster: Option<&Path>, plan: Option<&Path>) -> Result<Output, CliError> {
    if job.is_none() && cluster.is_none() && plan.is_none() {
        return Err(CliError::validation("nothing to validate: pass --job, --cluster or --plan"));
    }
    let mut checked = serde_json::Map::new();
    let job = match job {
        Some(p) => {
            let (j, store) = load_job_profile_file(p)?;
            checked.insert(
                "job".into(),
                json!({ "model": j.model_name(), "layers": j.num_layers(), "profile_records": store.record_count() }),
            );
            Some(j)
        }
        None => None,
    };
    let cluster = match cluster {
        Some(p) => {
            let c = load_cluster_file(p)?;
            checked.insert(
                "cluster".into(),
                json!({ "gpu_types": c.gpu_types().len(), "zones": c.zones().len(), "regions": c.regions() }),
            );
            Some(c)
        }
        None => None,
    };
    if let Some(p) = plan {
        let doc = load_plan(p)?;
        let plan = doc.to_plan();
        if let (Some(j), Some(c)) = (&job, &cluster) {
            let violations = validate_plan(&plan, j, c);
            if !violations.is_empty() {
                let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                return Err(CliError::validation(format!("invalid plan ({} violations)", list.len()))
                    .with_details(json!({ "violations": list })));
            }
        }
        checked.insert("plan".into(), json!({ "stages": plan.num_stages(), "D": plan.dp_degree, "mbs": plan.mbs }));
    }
    Ok(Output::new(json!({ "valid": true, "checked": checked }), None))
}
