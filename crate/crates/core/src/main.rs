//! Command-line front end: tracing/template generation, single-invocation
//! what-if runs, cluster replays, and prefetch sweeps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 simulation error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coldsim::config::{
    load_program, parse_prefetch, ConfigError, ExperimentConfig, ResolvedExperiment,
    WorkloadSource,
};
use coldsim::fork::{apply_cow, plan_startup};
use coldsim::model::{model_bytes, validate_program, HardwareProfile, Workload};
use coldsim::pool::{build_cluster_function, run_cluster, ClusterFunction, Policy};
use coldsim::report::{cdf, render_cdf, render_results, render_summary, summarize};
use coldsim::sim::{simulate_invocation, simulate_warm, ProcessState};
use coldsim::template::{generate_template, FunctionTemplate, PrefetchSpec, DEFAULT_MAX_TRANSFERS};
use coldsim::tracer::{dump_trace, trace_inference, trace_init};
use coldsim::workload::{load_trace, scale_and_accelerate, synthesize, InvocationRecord};

#[derive(Parser)]
#[command(name = "coldsim", version, about = "Cold-start simulator for serverless LLM functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOut {
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed override for all randomized steps.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Trace a program's initialization and inference and emit a template.
    Trace {
        /// Program JSON file or `preset:<name>`.
        #[arg(long)]
        program: String,
        #[arg(long, default_value_t = 2048)]
        input_len: u64,
        #[arg(long, default_value_t = 1)]
        batch: u64,
        /// Adapter id substitution; pass twice to discover dynamics.
        #[arg(long)]
        adapter: Vec<String>,
        /// Prefetch sizing for the emitted template.
        #[arg(long, default_value = "eq1")]
        prefetch_bytes: String,
        #[command(flatten)]
        common: CommonOut,
    },
    /// Simulate one invocation and print the TTFT stage table.
    Invoke {
        #[arg(long)]
        config: PathBuf,
        /// Function id from the config (defaults to the first).
        #[arg(long)]
        function: Option<String>,
        #[arg(long, default_value_t = 2048)]
        input_len: u64,
        #[arg(long, default_value_t = 1)]
        batch: u64,
        #[arg(long)]
        adapter: Option<String>,
        /// Override the template prefetch: byte count, `full`, or `eq1`.
        #[arg(long)]
        prefetch_bytes: Option<String>,
        /// All-resident warm run (TTFT = compute only).
        #[arg(long)]
        warm: bool,
        #[command(flatten)]
        common: CommonOut,
    },
    /// Replay a workload through the cluster scheduler per policy.
    Replay {
        #[arg(long)]
        config: PathBuf,
        /// Restrict to one policy.
        #[arg(long)]
        policy: Option<Policy>,
        #[command(flatten)]
        common: CommonOut,
    },
    /// Sweep template prefetch from 0 to full for one function.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        function: Option<String>,
        #[arg(long, default_value_t = 2048)]
        input_len: u64,
        #[arg(long, default_value_t = 9)]
        points: usize,
        #[command(flatten)]
        common: CommonOut,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Simulation(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<coldsim::sim::SimError> for CliError {
    fn from(e: coldsim::sim::SimError) -> Self {
        CliError::Simulation(e.to_string())
    }
}

impl From<coldsim::pool::PoolError> for CliError {
    fn from(e: coldsim::pool::PoolError) -> Self {
        use coldsim::pool::PoolError;
        match e {
            PoolError::Config(m) => CliError::Config(m),
            PoolError::UnknownFunction(f) => CliError::Config(format!("unknown function '{f}'")),
            other => CliError::Simulation(other.to_string()),
        }
    }
}

impl From<coldsim::tracer::TraceError> for CliError {
    fn from(e: coldsim::tracer::TraceError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<coldsim::template::TemplateError> for CliError {
    fn from(e: coldsim::template::TemplateError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<coldsim::workload::WorkloadError> for CliError {
    fn from(e: coldsim::workload::WorkloadError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<coldsim::fork::PlanError> for CliError {
    fn from(e: coldsim::fork::PlanError) -> Self {
        CliError::Simulation(e.to_string())
    }
}

/// Writes a file atomically: temp file in the target directory, then rename.
fn write_atomic(path: &Path, content: &str) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    std::fs::write(&tmp, content)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::Config(format!("cannot rename to {}: {e}", path.display())))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Trace {
            program,
            input_len,
            batch,
            adapter,
            prefetch_bytes,
            common,
        } => cmd_trace(&program, input_len, batch, &adapter, &prefetch_bytes, &common),
        Command::Invoke {
            config,
            function,
            input_len,
            batch,
            adapter,
            prefetch_bytes,
            warm,
            common,
        } => cmd_invoke(
            &config,
            function.as_deref(),
            input_len,
            batch,
            adapter.as_deref(),
            prefetch_bytes.as_deref(),
            warm,
            &common,
        ),
        Command::Replay {
            config,
            policy,
            common,
        } => cmd_replay(&config, policy, &common),
        Command::Sweep {
            config,
            function,
            input_len,
            points,
            common,
        } => cmd_sweep(&config, function.as_deref(), input_len, points, &common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Simulation(m)) => {
            eprintln!("simulation error: {m}");
            ExitCode::from(3)
        }
    }
}

fn cmd_trace(
    program_ref: &str,
    input_len: u64,
    batch: u64,
    adapters: &[String],
    prefetch: &str,
    common: &CommonOut,
) -> Result<(), CliError> {
    let base = std::env::current_dir().unwrap_or_else(|_| PathBuf::from("."));
    let program = load_program(program_ref, &base)?;
    let violations = validate_program(&program);
    if let Some(v) = violations.first() {
        return Err(CliError::Config(format!("invalid program: {v}")));
    }
    let prefetch = parse_prefetch(prefetch)?;

    let workloads: Vec<Workload> = if adapters.is_empty() {
        vec![Workload::new(input_len, batch)]
    } else {
        adapters
            .iter()
            .map(|a| Workload::with_adapter(input_len, batch, a))
            .collect()
    };

    let mut traces = Vec::new();
    for w in &workloads {
        let init = trace_init(&program, w)?;
        let trace = trace_inference(&program, w)?;
        traces.push((init, trace));
    }
    let hw = HardwareProfile::default();
    let warm = simulate_warm(&program, &workloads[0], &hw);
    let template = generate_template(
        &program.function_id,
        &traces,
        warm.ttft_s,
        hw.pcie_bandwidth_bytes_per_s,
        DEFAULT_MAX_TRANSFERS,
        prefetch,
    )?;

    let dump = dump_trace(&traces[0].0, &traces[0].1);
    write_atomic(&common.out.join("trace.txt"), &dump)?;
    write_atomic(&common.out.join("template.json"), &template.to_document())?;
    println!(
        "traced {} pass(es): {} weights, {} kernels, {} dynamic",
        traces.len(),
        template.layout.len()
            + template
                .classification
                .flags
                .values()
                .filter(|f| **f == coldsim::tracer::WeightFlag::Dynamic)
                .count(),
        template.kernel_set.len(),
        template
            .classification
            .flags
            .values()
            .filter(|f| **f == coldsim::tracer::WeightFlag::Dynamic)
            .count()
    );
    println!("template written to {}", common.out.join("template.json").display());
    Ok(())
}

struct PreparedFunction {
    function_id: String,
    cluster: ClusterFunction,
}

fn prepare_function(
    resolved: &ResolvedExperiment,
    function: Option<&str>,
    prefetch_override: Option<PrefetchSpec>,
) -> Result<PreparedFunction, CliError> {
    let function_id = match function {
        Some(f) => f.to_string(),
        None => resolved
            .programs
            .keys()
            .next()
            .cloned()
            .ok_or_else(|| CliError::Config("no programs configured".to_string()))?,
    };
    let program = resolved
        .programs
        .get(&function_id)
        .ok_or_else(|| CliError::Config(format!("unknown function '{function_id}'")))?
        .clone();
    let spec = prefetch_override
        .or_else(|| resolved.prefetch_overrides.get(&function_id).copied())
        .unwrap_or(PrefetchSpec::Bytes(0));
    let mut cluster = build_cluster_function(program, &resolved.hardware, None)?;
    if !matches!(spec, PrefetchSpec::Bytes(0)) {
        // Re-derive the main template at the requested prefetch.
        let rebuilt = build_cluster_function(
            cluster.program.clone(),
            &resolved.hardware,
            Some(spec),
        )?;
        cluster.template = rebuilt.enlarged.unwrap();
    }
    Ok(PreparedFunction {
        function_id,
        cluster,
    })
}

fn simulate_once(
    prepared: &PreparedFunction,
    hw: &HardwareProfile,
    workload: &Workload,
) -> Result<(coldsim::sim::Timeline, coldsim::model::TTFTBreakdown), CliError> {
    let program = &prepared.cluster.program;
    let template = &prepared.cluster.template;
    let init = trace_init(program, workload)?;
    let trace = trace_inference(program, workload)?;
    let plan = apply_cow(plan_startup(template, &init, &trace)?, &trace);
    let process = ProcessState::prewarmed(template.kernel_set.clone(), hw);
    Ok(simulate_invocation(&plan, program, workload, template, hw, &process)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_invoke(
    config: &Path,
    function: Option<&str>,
    input_len: u64,
    batch: u64,
    adapter: Option<&str>,
    prefetch: Option<&str>,
    warm: bool,
    common: &CommonOut,
) -> Result<(), CliError> {
    let base = config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let resolved = ExperimentConfig::from_path(config)?.resolve(&base)?;
    let prefetch_spec = prefetch.map(parse_prefetch).transpose()?;
    let prepared = prepare_function(&resolved, function, prefetch_spec)?;
    let workload = match adapter {
        Some(a) => Workload::with_adapter(input_len, batch, a),
        None => Workload::new(input_len, batch),
    };

    let breakdown = if warm {
        simulate_warm(&prepared.cluster.program, &workload, &resolved.hardware)
    } else {
        let (timeline, b) = simulate_once(&prepared, &resolved.hardware, &workload)?;
        write_atomic(&common.out.join("timeline.tsv"), &timeline.export())?;
        b
    };

    println!("function: {}", prepared.function_id);
    println!("stage            seconds");
    println!("context          {:.6}", breakdown.context_s);
    println!("code_load        {:.6}", breakdown.code_load_s);
    println!("dynamic_init     {:.6}", breakdown.dynamic_init_s);
    println!("exposed_load     {:.6}", breakdown.exposed_load_s);
    println!("compute          {:.6}", breakdown.compute_s);
    println!("ttft             {:.6}", breakdown.ttft_s);
    Ok(())
}

fn build_stream(
    resolved: &ResolvedExperiment,
    base: &Path,
    seed: u64,
) -> Result<Vec<InvocationRecord>, CliError> {
    match &resolved.workload {
        WorkloadSource::Trace {
            path,
            time_factor,
            count_factor,
        } => {
            let records = load_trace(&base.join(path))?;
            Ok(scale_and_accelerate(&records, *time_factor, *count_factor)?)
        }
        WorkloadSource::Synthesize { mix, duration_s } => {
            Ok(synthesize(mix, *duration_s, seed)?)
        }
    }
}

fn cmd_replay(config: &Path, policy: Option<Policy>, common: &CommonOut) -> Result<(), CliError> {
    let base = config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let resolved = ExperimentConfig::from_path(config)?.resolve(&base)?;
    let seed = common.seed.unwrap_or(resolved.seed);
    let stream = build_stream(&resolved, &base, seed)?;
    if stream.is_empty() {
        eprintln!("warning: empty workload, writing empty results");
    }

    let policies: Vec<Policy> = match policy {
        Some(p) => vec![p],
        None => resolved.policies.clone(),
    };

    let mut functions: BTreeMap<String, ClusterFunction> = BTreeMap::new();
    let budgeted = policies.contains(&Policy::TidalDkBudgeted);
    for (id, program) in &resolved.programs {
        let enlarged = if budgeted && resolved.pool.budget_functions.contains(id) {
            Some(
                resolved
                    .prefetch_overrides
                    .get(id)
                    .copied()
                    .unwrap_or(PrefetchSpec::Eq1),
            )
        } else {
            None
        };
        functions.insert(
            id.clone(),
            build_cluster_function(program.clone(), &resolved.hardware, enlarged)?,
        );
    }

    let mut summaries = Vec::new();
    for p in &policies {
        let outcome = run_cluster(&stream, &functions, &resolved.hardware, &resolved.pool, *p)?;
        let name = p.as_str();
        write_atomic(
            &common.out.join(format!("results-{name}.csv")),
            &render_results(&outcome.records),
        )?;
        let ttfts: Vec<f64> = outcome
            .records
            .iter()
            .filter(|r| r.decision != coldsim::report::Decision::Reject)
            .map(|r| r.breakdown.ttft_s)
            .collect();
        write_atomic(
            &common.out.join(format!("cdf-{name}.tsv")),
            &render_cdf(&cdf(&ttfts)),
        )?;
        summaries.push(summarize(name, &outcome.records));
    }
    let summary = render_summary(&summaries);
    write_atomic(&common.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    function: Option<&str>,
    input_len: u64,
    points: usize,
    common: &CommonOut,
) -> Result<(), CliError> {
    let base = config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let resolved = ExperimentConfig::from_path(config)?.resolve(&base)?;
    let prepared = prepare_function(&resolved, function, Some(PrefetchSpec::Bytes(0)))?;
    let total = model_bytes(&prepared.cluster.program)
        .map_err(|_| CliError::Config("invalid program".to_string()))?;
    let points = points.max(2);

    let mut out = String::from("prefetch_bytes\tresident_bytes\tttft_s\texposed_load_s\tcompute_s\n");
    let workload = Workload::new(input_len, 1);
    let mut last = f64::INFINITY;
    for i in 0..points {
        let target = (total as f64 * i as f64 / (points - 1) as f64) as u64;
        let prepared_i = prepare_function(
            &resolved,
            Some(&prepared.function_id),
            Some(PrefetchSpec::Bytes(target.min(total))),
        )?;
        let (_, b) = simulate_once(&prepared_i, &resolved.hardware, &workload)?;
        let resident: u64 = prepared_i
            .cluster
            .template
            .resident_weights()
            .iter()
            .filter_map(|w| prepared_i.cluster.template.size_of(w))
            .sum();
        out.push_str(&format!(
            "{target}\t{resident}\t{:.6}\t{:.6}\t{:.6}\n",
            b.ttft_s, b.exposed_load_s, b.compute_s
        ));
        if b.ttft_s > last + 1e-9 {
            eprintln!(
                "warning: TTFT increased at prefetch {target} ({:.6} > {last:.6})",
                b.ttft_s
            );
        }
        last = b.ttft_s;
    }
    write_atomic(&common.out.join("sweep.tsv"), &out)?;
    print!("{out}");
    Ok(())
}
