//! Cluster layer: pre-warmed process pool with proactive code-segment
//! loading, GPU placement, keep-alive for static and dynamic functions,
//! early-reject, and template residency under a per-GPU byte budget.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fork::{apply_cow, full_cold_plan, plan_startup, Action, PlanKind, ReplaySource, StartupPlan};
use crate::model::{
    model_bytes, FunctionProgram, HardwareProfile, InitOp, Workload, ADAPTER_PLACEHOLDER,
};
use crate::report::{Decision, RequestRecord};
use crate::sim::{
    simulate_baseline, simulate_invocation, simulate_warm, ProcessState, SimError,
};
use crate::template::{generate_template, FunctionTemplate, PrefetchSpec, TemplateError, DEFAULT_MAX_TRANSFERS};
use crate::tracer::{trace_inference, trace_init, TraceError, WeightFlag};
use crate::workload::InvocationRecord;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("pre-warm needs {needed} bytes but only {free} are free")]
    PrewarmMemory { needed: u64, free: u64 },
    #[error("unknown function '{0}' in workload")]
    UnknownFunction(String),
    #[error("invalid pool config: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("program rejected: {0}")]
    Program(String),
}

/// Scheduler/template policy variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Full init per cold start, no load/compute overlap, cold kernels;
    /// keep-alive reuses an instance only for the identical adapter.
    Baseline,
    /// Template fork with zero-byte resident prefix; keep-alive for
    /// static functions only.
    Tidal,
    /// Tidal plus dynamic keep-alive: the static core of a dynamic
    /// function stays resident and only dynamics are replayed.
    TidalDk,
    /// Tidal-DK plus enlarged resident templates for selected functions
    /// under a per-GPU byte budget.
    TidalDkBudgeted,
}

impl Policy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::Baseline => "baseline",
            Policy::Tidal => "tidal",
            Policy::TidalDk => "tidal-dk",
            Policy::TidalDkBudgeted => "tidal-dk-budgeted",
        }
    }
}

impl FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Policy::Baseline),
            "tidal" => Ok(Policy::Tidal),
            "tidal-dk" => Ok(Policy::TidalDk),
            "tidal-dk-budgeted" => Ok(Policy::TidalDkBudgeted),
            other => Err(format!(
                "unknown policy '{other}' (expected baseline|tidal|tidal-dk|tidal-dk-budgeted)"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Pre-warmed processes kept ready per GPU.
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default = "default_keep_alive")]
    pub keep_alive_s: f64,
    #[serde(default = "default_timeout")]
    pub request_timeout_s: f64,
    /// Per-GPU byte budget for resident templates (budgeted policy).
    #[serde(default)]
    pub template_budget_bytes: u64,
    /// Functions granted an enlarged resident template under the
    /// budgeted policy.
    #[serde(default)]
    pub budget_functions: BTreeSet<String>,
}

fn default_pool_size() -> usize {
    1
}
fn default_keep_alive() -> f64 {
    10.0
}
fn default_timeout() -> f64 {
    60.0
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            pool_size: default_pool_size(),
            keep_alive_s: default_keep_alive(),
            request_timeout_s: default_timeout(),
            template_budget_bytes: 0,
            budget_functions: BTreeSet::new(),
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), PoolError> {
        if self.keep_alive_s <= 0.0 {
            return Err(PoolError::Config("keep_alive_s must be > 0".to_string()));
        }
        if self.request_timeout_s <= 0.0 {
            return Err(PoolError::Config(
                "request_timeout_s must be > 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// Launches a pre-warmed process: a GPU context plus the code segments of
/// the given kernel set.
pub fn prewarm_process(
    kernel_ids: &BTreeSet<String>,
    hw: &HardwareProfile,
    free_bytes: u64,
) -> Result<(ProcessState, f64, u64), PoolError> {
    let n = kernel_ids.len() as u64;
    let cost_s = hw.context_create_s + n as f64 * hw.code_load_s_per_kernel;
    let memory = hw.context_footprint_bytes + n * hw.code_segment_bytes_per_kernel;
    if memory > free_bytes {
        return Err(PoolError::PrewarmMemory {
            needed: memory,
            free: free_bytes,
        });
    }
    Ok((ProcessState::prewarmed(kernel_ids.clone(), hw), cost_s, memory))
}

/// Kernel set to pre-load: the union over functions currently cached in
/// host memory. Cached functions without a template contribute nothing.
pub fn loading_policy(
    host_cache: &BTreeSet<String>,
    templates: &BTreeMap<String, FunctionTemplate>,
) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for f in host_cache {
        if let Some(t) = templates.get(f) {
            out.extend(t.kernel_set.iter().cloned());
        }
    }
    out
}

/// One function registered with the cluster: its program, its templates
/// (zero-prefix always; enlarged when the budgeted policy selects it),
/// and derived byte figures.
#[derive(Debug, Clone)]
pub struct ClusterFunction {
    pub program: FunctionProgram,
    pub template: FunctionTemplate,
    pub enlarged: Option<FunctionTemplate>,
    pub model_bytes: u64,
    pub static_core_bytes: u64,
    pub is_dynamic: bool,
}

fn uses_adapter(program: &FunctionProgram) -> bool {
    program.init_ops.iter().any(|op| {
        matches!(op, InitOp::LoadCheckpoint { checkpoint_id, .. }
            if checkpoint_id == ADAPTER_PLACEHOLDER)
    })
}

/// Prepares a function for cluster serving: probes it (twice with distinct
/// adapters when it is adapter-bearing, so dynamics are discovered) and
/// builds its templates.
pub fn build_cluster_function(
    program: FunctionProgram,
    hw: &HardwareProfile,
    enlarged_prefetch: Option<PrefetchSpec>,
) -> Result<ClusterFunction, PoolError> {
    let dynamic = uses_adapter(&program);
    let probe_len = 2048;
    let probes: Vec<Workload> = if dynamic {
        vec![
            Workload::with_adapter(probe_len, 1, "probe-a"),
            Workload::with_adapter(probe_len, 1, "probe-b"),
        ]
    } else {
        vec![Workload::new(probe_len, 1)]
    };
    let mut traces = Vec::new();
    for w in &probes {
        traces.push((trace_init(&program, w)?, trace_inference(&program, w)?));
    }
    let warm = simulate_warm(&program, &probes[0], hw);
    let template = generate_template(
        &program.function_id,
        &traces,
        warm.ttft_s,
        hw.pcie_bandwidth_bytes_per_s,
        DEFAULT_MAX_TRANSFERS,
        PrefetchSpec::Bytes(0),
    )?;
    let enlarged = match enlarged_prefetch {
        Some(spec) => Some(generate_template(
            &program.function_id,
            &traces,
            warm.ttft_s,
            hw.pcie_bandwidth_bytes_per_s,
            DEFAULT_MAX_TRANSFERS,
            spec,
        )?),
        None => None,
    };
    let bytes = model_bytes(&program)
        .map_err(|v| PoolError::Program(format!("{} violations", v.len())))?;
    let static_core_bytes: u64 = template
        .weight_dfgs
        .iter()
        .filter(|(name, _)| {
            template.classification.flags.get(*name) == Some(&WeightFlag::Static)
        })
        .map(|(_, dfg)| dfg.size_bytes)
        .sum();
    Ok(ClusterFunction {
        program,
        template,
        enlarged,
        model_bytes: bytes,
        static_core_bytes,
        is_dynamic: dynamic,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServePath {
    WarmReuse,
    DynamicFork,
    TemplateFork,
    ColdStart,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DispatchDecision {
    RunOn { gpu: usize, path: ServePath },
    Queue { gpu: usize, wait_s: f64, path: ServePath },
    Reject,
}

#[derive(Debug, Clone)]
struct LiveInstance {
    deadline_s: f64,
    bytes: u64,
    adapter_id: Option<String>,
    /// true = static core only (dynamics must be replayed); false = full.
    static_core: bool,
    last_used_s: f64,
}

#[derive(Debug, Clone)]
struct Gpu {
    busy_until_s: f64,
    base_bytes: u64,
    process: ProcessState,
    live: BTreeMap<String, LiveInstance>,
    /// function_id → (resident template bytes, last used).
    resident_templates: BTreeMap<String, (u64, f64)>,
}

impl Gpu {
    fn accounted_bytes(&self) -> u64 {
        self.base_bytes
            + self.live.values().map(|l| l.bytes).sum::<u64>()
            + self.resident_templates.values().map(|(b, _)| b).sum::<u64>()
    }

    fn expire(&mut self, now: f64) {
        self.live.retain(|_, l| l.deadline_s >= now);
    }

    fn template_bytes(&self) -> u64 {
        self.resident_templates.values().map(|(b, _)| b).sum()
    }

    /// Frees memory for `delta` more bytes by evicting idle instances and
    /// resident templates, least recently used first, never touching
    /// `protect`. Returns whether the delta now fits.
    fn make_room(&mut self, delta: u64, capacity: u64, protect: &str) -> bool {
        if self.accounted_bytes() + delta <= capacity {
            return true;
        }
        let mut victims: Vec<(f64, String)> = self
            .live
            .iter()
            .filter(|(f, _)| f.as_str() != protect)
            .map(|(f, l)| (l.last_used_s, f.clone()))
            .collect();
        victims.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, f) in victims {
            self.live.remove(&f);
            if self.accounted_bytes() + delta <= capacity {
                return true;
            }
        }
        let mut tvictims: Vec<(f64, String)> = self
            .resident_templates
            .iter()
            .filter(|(f, _)| f.as_str() != protect)
            .map(|(f, (_, t))| (*t, f.clone()))
            .collect();
        tvictims.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, f) in tvictims {
            self.resident_templates.remove(&f);
            if self.accounted_bytes() + delta <= capacity {
                return true;
            }
        }
        self.accounted_bytes() + delta <= capacity
    }
}

pub struct Cluster<'a> {
    pub hw: &'a HardwareProfile,
    pub pool: &'a PoolConfig,
    pub policy: Policy,
    pub functions: &'a BTreeMap<String, ClusterFunction>,
    gpus: Vec<Gpu>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterOutcome {
    pub records: Vec<RequestRecord>,
    pub peak_bytes_per_gpu: Vec<u64>,
    pub gpu_memory_bytes: u64,
}

impl<'a> Cluster<'a> {
    pub fn new(
        hw: &'a HardwareProfile,
        pool: &'a PoolConfig,
        policy: Policy,
        functions: &'a BTreeMap<String, ClusterFunction>,
    ) -> Result<Self, PoolError> {
        pool.validate()?;
        hw.validate().map_err(PoolError::Config)?;
        // Proactive loading: host cache holds every registered function.
        let host_cache: BTreeSet<String> = functions.keys().cloned().collect();
        let templates: BTreeMap<String, FunctionTemplate> = functions
            .iter()
            .map(|(f, c)| (f.clone(), c.template.clone()))
            .collect();
        let kernel_ids = match policy {
            Policy::Baseline => BTreeSet::new(),
            _ => loading_policy(&host_cache, &templates),
        };
        let mut gpus = Vec::new();
        for _ in 0..hw.gpu_count.max(1) {
            let (process, _cost, memory) =
                prewarm_process(&kernel_ids, hw, hw.gpu_memory_bytes)?;
            gpus.push(Gpu {
                busy_until_s: 0.0,
                base_bytes: memory,
                process,
                live: BTreeMap::new(),
                resident_templates: BTreeMap::new(),
            });
        }
        Ok(Cluster {
            hw,
            pool,
            policy,
            functions,
            gpus,
        })
    }

    fn pick_gpu(&self) -> usize {
        self.gpus
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.busy_until_s.total_cmp(&b.1.busy_until_s))
            .map(|(i, _)| i)
            .unwrap()
    }

    /// Scheduling decision for one invocation against current state, with
    /// no side effects. Early-reject fires when the predicted wait on the
    /// least-loaded GPU exceeds the request timeout.
    pub fn dispatch(&self, inv: &InvocationRecord) -> Result<DispatchDecision, PoolError> {
        let gpu_idx = self.pick_gpu();
        let gpu = &self.gpus[gpu_idx];
        let wait_s = (gpu.busy_until_s - inv.arrival_s).max(0.0);
        if wait_s > self.pool.request_timeout_s {
            return Ok(DispatchDecision::Reject);
        }
        let func = self
            .functions
            .get(&inv.function_id)
            .ok_or_else(|| PoolError::UnknownFunction(inv.function_id.clone()))?;
        let start_s = inv.arrival_s.max(gpu.busy_until_s);
        let path = self.choose_path(gpu, func, inv, start_s);
        Ok(if wait_s > 0.0 {
            DispatchDecision::Queue {
                gpu: gpu_idx,
                wait_s,
                path,
            }
        } else {
            DispatchDecision::RunOn {
                gpu: gpu_idx,
                path,
            }
        })
    }

    fn choose_path(
        &self,
        gpu: &Gpu,
        func: &ClusterFunction,
        inv: &InvocationRecord,
        start_s: f64,
    ) -> ServePath {
        let fork_path = if self.policy == Policy::Baseline {
            ServePath::ColdStart
        } else {
            ServePath::TemplateFork
        };
        let Some(live) = gpu.live.get(&inv.function_id) else {
            return fork_path;
        };
        if live.deadline_s < start_s {
            return fork_path;
        }
        if live.static_core {
            return ServePath::DynamicFork;
        }
        // Full instance: reusable only when no re-initialization is
        // needed, i.e. a static function or the identical adapter.
        if inv.workload.adapter_id == live.adapter_id {
            ServePath::WarmReuse
        } else {
            fork_path
        }
    }

    /// Plan for a dynamic keep-alive hit: the static core is resident, so
    /// every static weight is reused in place and only dynamics replay.
    fn dynamic_fork_plan(
        func: &ClusterFunction,
        workload: &Workload,
    ) -> Result<StartupPlan, PoolError> {
        let init = trace_init(&func.program, workload)?;
        let trace = trace_inference(&func.program, workload)?;
        let mut actions = BTreeMap::new();
        for (root, dfg) in &init {
            let matches = func
                .template
                .weight_dfgs
                .get(root)
                .map(|stored| stored.matches(dfg))
                .unwrap_or(false);
            let is_static = func.template.classification.flags.get(root)
                == Some(&WeightFlag::Static);
            if matches && is_static {
                actions.insert(root.clone(), Action::ReuseResident);
            } else {
                actions.insert(
                    root.clone(),
                    Action::ReplayInit {
                        source: ReplaySource::Storage,
                    },
                );
            }
        }
        let plan = StartupPlan {
            kind: PlanKind::TemplateFork,
            actions,
            sync_barriers: BTreeMap::new(),
            cow_copies: BTreeSet::new(),
            skipped_init_ops: 0,
        };
        Ok(apply_cow(plan, &trace))
    }

    fn serve(
        &mut self,
        gpu_idx: usize,
        path: ServePath,
        inv: &InvocationRecord,
        start_s: f64,
    ) -> Result<(Decision, crate::model::TTFTBreakdown), PoolError> {
        let func = &self.functions[&inv.function_id];
        let gpu = &self.gpus[gpu_idx];
        match path {
            ServePath::WarmReuse => Ok((
                Decision::WarmReuse,
                simulate_warm(&func.program, &inv.workload, self.hw),
            )),
            ServePath::DynamicFork => {
                let plan = Self::dynamic_fork_plan(func, &inv.workload)?;
                let (_, b) = simulate_invocation(
                    &plan,
                    &func.program,
                    &inv.workload,
                    &func.template,
                    self.hw,
                    &gpu.process,
                )?;
                Ok((Decision::DynamicFork, b))
            }
            ServePath::TemplateFork => {
                let use_enlarged = self.policy == Policy::TidalDkBudgeted
                    && gpu.resident_templates.contains_key(&inv.function_id)
                    && func.enlarged.is_some();
                let template = if use_enlarged {
                    func.enlarged.as_ref().unwrap()
                } else {
                    &func.template
                };
                let init = trace_init(&func.program, &inv.workload)?;
                let trace = trace_inference(&func.program, &inv.workload)?;
                match plan_startup(template, &init, &trace) {
                    Ok(plan) => {
                        let plan = apply_cow(plan, &trace);
                        let (_, b) = simulate_invocation(
                            &plan,
                            &func.program,
                            &inv.workload,
                            template,
                            self.hw,
                            &gpu.process,
                        )?;
                        Ok((Decision::TemplateFork, b))
                    }
                    Err(_) => {
                        // Structural change: template invalid, full cold.
                        let plan = full_cold_plan(&init, &trace);
                        let (_, b) = simulate_invocation(
                            &plan,
                            &func.program,
                            &inv.workload,
                            template,
                            self.hw,
                            &gpu.process,
                        )?;
                        Ok((Decision::ColdStart, b))
                    }
                }
            }
            ServePath::ColdStart => {
                let (_, b) = simulate_baseline(
                    &func.program,
                    &inv.workload,
                    self.hw,
                    &gpu.process,
                )?;
                Ok((Decision::ColdStart, b))
            }
        }
        .map(|(d, b)| {
            let _ = start_s;
            (d, b)
        })
    }

    /// Replays the full stream, in arrival order (ties by request id),
    /// producing one record per request including rejections.
    pub fn run(&mut self, stream: &[InvocationRecord]) -> Result<ClusterOutcome, PoolError> {
        let mut order: Vec<usize> = (0..stream.len()).collect();
        order.sort_by(|&a, &b| {
            stream[a]
                .arrival_s
                .total_cmp(&stream[b].arrival_s)
                .then(stream[a].request_id.cmp(&stream[b].request_id))
        });

        let mut records = Vec::with_capacity(stream.len());
        let mut peaks = vec![0u64; self.gpus.len()];
        let capacity = self.hw.gpu_memory_bytes;

        for idx in order {
            let inv = &stream[idx];
            let decision = self.dispatch(inv)?;
            let (gpu_idx, path) = match decision {
                DispatchDecision::Reject => {
                    records.push(RequestRecord {
                        request_id: inv.request_id,
                        function_id: inv.function_id.clone(),
                        arrival_s: inv.arrival_s,
                        decision: Decision::Reject,
                        breakdown: Default::default(),
                    });
                    continue;
                }
                DispatchDecision::RunOn { gpu, path } => (gpu, path),
                DispatchDecision::Queue { gpu, path, .. } => (gpu, path),
            };
            let start_s = inv.arrival_s.max(self.gpus[gpu_idx].busy_until_s);
            self.gpus[gpu_idx].expire(start_s);

            // Memory admission: the instance's bytes must fit next to what
            // stays resident; evict idle state if needed, reject if the
            // request cannot fit at all.
            let func = &self.functions[&inv.function_id];
            let keep_static_core =
                func.is_dynamic && matches!(self.policy, Policy::TidalDk | Policy::TidalDkBudgeted);
            let instance_bytes = if keep_static_core {
                // Full model during service; only the core is kept after,
                // but admission must cover the peak.
                func.model_bytes
            } else {
                func.model_bytes
            };
            let had_instance = self.gpus[gpu_idx].live.contains_key(&inv.function_id);
            let delta = if had_instance { 0 } else { instance_bytes };
            if !self.gpus[gpu_idx].make_room(delta, capacity, &inv.function_id) {
                records.push(RequestRecord {
                    request_id: inv.request_id,
                    function_id: inv.function_id.clone(),
                    arrival_s: inv.arrival_s,
                    decision: Decision::Reject,
                    breakdown: Default::default(),
                });
                continue;
            }

            let (decision, mut breakdown) = self.serve(gpu_idx, path, inv, start_s)?;
            let finish_s = start_s + breakdown.ttft_s;
            // Reported TTFT runs from arrival to first token, so queueing
            // wait counts on top of the service stages.
            breakdown.ttft_s += start_s - inv.arrival_s;

            let gpu = &mut self.gpus[gpu_idx];
            gpu.busy_until_s = finish_s;

            // Keep-alive registration.
            let keep = match self.policy {
                Policy::Baseline => Some((func.model_bytes, inv.workload.adapter_id.clone(), false)),
                Policy::Tidal => {
                    if func.is_dynamic {
                        None
                    } else {
                        Some((func.model_bytes, None, false))
                    }
                }
                Policy::TidalDk | Policy::TidalDkBudgeted => {
                    if func.is_dynamic {
                        Some((func.static_core_bytes, None, true))
                    } else {
                        Some((func.model_bytes, None, false))
                    }
                }
            };
            // Peak during service includes the full instance.
            let in_service = gpu.accounted_bytes() + delta;
            peaks[gpu_idx] = peaks[gpu_idx].max(in_service);
            debug_assert!(in_service <= capacity);
            match keep {
                Some((bytes, adapter_id, static_core)) => {
                    gpu.live.insert(
                        inv.function_id.clone(),
                        LiveInstance {
                            deadline_s: finish_s + self.pool.keep_alive_s,
                            bytes,
                            adapter_id,
                            static_core,
                            last_used_s: finish_s,
                        },
                    );
                }
                None => {
                    gpu.live.remove(&inv.function_id);
                }
            }

            // Budgeted policy: pin this function's enlarged template on
            // the GPU if the budget allows (LRU within the budget).
            if self.policy == Policy::TidalDkBudgeted
                && self.pool.budget_functions.contains(&inv.function_id)
            {
                if let Some(enlarged) = &func.enlarged {
                    let bytes: u64 = enlarged
                        .resident_weights()
                        .iter()
                        .filter_map(|w| enlarged.size_of(w))
                        .sum();
                    if bytes > 0 && !gpu.resident_templates.contains_key(&inv.function_id) {
                        let mut total = gpu.template_bytes();
                        while total + bytes > self.pool.template_budget_bytes {
                            let lru = gpu
                                .resident_templates
                                .iter()
                                .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                                .map(|(f, _)| f.clone());
                            match lru {
                                Some(f) => {
                                    gpu.resident_templates.remove(&f);
                                    total = gpu.template_bytes();
                                }
                                None => break,
                            }
                        }
                        if total + bytes <= self.pool.template_budget_bytes
                            && gpu.accounted_bytes() + bytes <= capacity
                        {
                            gpu.resident_templates
                                .insert(inv.function_id.clone(), (bytes, finish_s));
                        }
                    } else if let Some(entry) =
                        gpu.resident_templates.get_mut(&inv.function_id)
                    {
                        entry.1 = finish_s;
                    }
                }
            }
            peaks[gpu_idx] = peaks[gpu_idx].max(gpu.accounted_bytes());

            records.push(RequestRecord {
                request_id: inv.request_id,
                function_id: inv.function_id.clone(),
                arrival_s: inv.arrival_s,
                decision,
                breakdown,
            });
        }
        Ok(ClusterOutcome {
            records,
            peak_bytes_per_gpu: peaks,
            gpu_memory_bytes: capacity,
        })
    }
}

/// Convenience wrapper: builds a cluster and replays a stream.
pub fn run_cluster(
    stream: &[InvocationRecord],
    functions: &BTreeMap<String, ClusterFunction>,
    hw: &HardwareProfile,
    pool: &PoolConfig,
    policy: Policy,
) -> Result<ClusterOutcome, PoolError> {
    Cluster::new(hw, pool, policy, functions)?.run(stream)
}
