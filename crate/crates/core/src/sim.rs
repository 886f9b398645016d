//! Deterministic discrete-event simulation of one invocation on one GPU:
//! a copy queue (PCIe), a compute queue (kernels), storage reads for
//! replayed dynamics, cold-kernel code-load penalties, and copy-on-write
//! costs. Also hosts the exhaustive small-instance oracle.
//!
//! One simulation is single-threaded and deterministic; independent
//! invocations share no mutable state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fork::{Action, PlanKind, ReplaySource, StartupPlan};
use crate::model::{FunctionProgram, HardwareProfile, TTFTBreakdown, Workload};
use crate::template::FunctionTemplate;
use crate::tracer::{trace_inference, trace_init, TraceError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("plan does not fit program: {0}")]
    PlanMismatch(String),
    #[error("GPU out of memory: need {needed} bytes, capacity {capacity}")]
    OutOfMemory { needed: u64, capacity: u64 },
    #[error("oracle instance too large: {weights} non-resident weights (max 8)")]
    OracleTooLarge { weights: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    CopyQueue,
    ComputeQueue,
    Storage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Context,
    CodeLoad { kernel_id: String },
    StorageRead { weight: String },
    H2gCopy { group: usize },
    H2gCopyReplay { weight: String },
    CowCopy { weight: String },
    Kernel { ordinal: usize, kernel_id: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Event {
    pub start_s: f64,
    pub end_s: f64,
    pub kind: EventKind,
    pub resource: Resource,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<Event>,
}

impl Timeline {
    fn push(&mut self, start_s: f64, end_s: f64, kind: EventKind, resource: Resource) {
        self.events.push(Event {
            start_s,
            end_s,
            kind,
            resource,
        });
    }

    /// Tabular export: `start_s end_s resource kind label`, one event per line.
    pub fn export(&self) -> String {
        let mut out = String::from("start_s\tend_s\tresource\tkind\tlabel\n");
        for e in &self.events {
            let resource = match e.resource {
                Resource::CopyQueue => "copy_queue",
                Resource::ComputeQueue => "compute_queue",
                Resource::Storage => "storage",
            };
            let (kind, label) = match &e.kind {
                EventKind::Context => ("context", String::new()),
                EventKind::CodeLoad { kernel_id } => ("code_load", kernel_id.clone()),
                EventKind::StorageRead { weight } => ("storage_read", weight.clone()),
                EventKind::H2gCopy { group } => ("h2g_copy", format!("group{group}")),
                EventKind::H2gCopyReplay { weight } => ("h2g_copy", format!("replay:{weight}")),
                EventKind::CowCopy { weight } => ("cow_copy", weight.clone()),
                EventKind::Kernel { ordinal, kernel_id } => {
                    ("kernel", format!("{ordinal}:{kernel_id}"))
                }
            };
            out.push_str(&format!(
                "{:.9}\t{:.9}\t{resource}\t{kind}\t{label}\n",
                e.start_s, e.end_s
            ));
        }
        out
    }
}

/// State of one pre-warmed (or cold) GPU process.
#[derive(Debug, Clone, Default)]
pub struct ProcessState {
    pub loaded_kernel_ids: BTreeSet<String>,
    pub context_ready: bool,
    pub resident_bytes: u64,
}

impl ProcessState {
    pub fn cold() -> Self {
        ProcessState::default()
    }

    pub fn prewarmed(kernel_ids: BTreeSet<String>, hw: &HardwareProfile) -> Self {
        let resident_bytes = hw.context_footprint_bytes
            + kernel_ids.len() as u64 * hw.code_segment_bytes_per_kernel;
        ProcessState {
            loaded_kernel_ids: kernel_ids,
            context_ready: true,
            resident_bytes,
        }
    }
}

/// Internal knobs for fault-injection tests. The default is the faithful
/// engine.
#[derive(Debug, Clone, Default)]
pub struct EngineFaults {
    /// Remove one (kernel ordinal, group) barrier entry before running.
    pub drop_barrier: Option<(usize, usize)>,
    /// Delay the start of one group's copy to no earlier than this time.
    pub delay_group: Option<(usize, f64)>,
}

struct WeightInfo {
    size_bytes: u64,
}

fn gather_weights(
    program: &FunctionProgram,
    workload: &Workload,
) -> Result<(BTreeMap<String, WeightInfo>, BTreeMap<String, String>), SimError> {
    let init = trace_init(program, workload)?;
    let mut sizes: BTreeMap<String, WeightInfo> = BTreeMap::new();
    let mut root_of: BTreeMap<String, String> = BTreeMap::new();
    for dfg in init.values() {
        root_of.insert(dfg.weight_name.clone(), dfg.alias_group.clone());
        sizes.entry(dfg.alias_group.clone()).or_insert(WeightInfo {
            size_bytes: dfg.size_bytes,
        });
    }
    Ok((sizes, root_of))
}

fn check_memory(
    plan: &StartupPlan,
    sizes: &BTreeMap<String, WeightInfo>,
    hw: &HardwareProfile,
    process: &ProcessState,
    new_kernels: usize,
) -> Result<(), SimError> {
    let mut needed = process.resident_bytes;
    if !process.context_ready {
        needed += hw.context_footprint_bytes;
    }
    needed += new_kernels as u64 * hw.code_segment_bytes_per_kernel;
    for (root, action) in &plan.actions {
        let bytes = sizes.get(root).map(|w| w.size_bytes).unwrap_or(0);
        // Resident, loaded, and replayed weights all occupy GPU memory.
        let _ = action;
        needed += bytes;
    }
    for w in &plan.cow_copies {
        needed += sizes.get(w).map(|i| i.size_bytes).unwrap_or(0);
    }
    if needed > hw.gpu_memory_bytes {
        return Err(SimError::OutOfMemory {
            needed,
            capacity: hw.gpu_memory_bytes,
        });
    }
    Ok(())
}

/// Simulates one invocation under a startup plan. The compute queue runs
/// kernels in program order, each gated on its transfer-group barriers and
/// replayed-weight copies; the copy queue transfers replayed weights first
/// (head of queue) and then the template's transfer groups in layout order.
pub fn simulate_invocation(
    plan: &StartupPlan,
    program: &FunctionProgram,
    workload: &Workload,
    template: &FunctionTemplate,
    hw: &HardwareProfile,
    process: &ProcessState,
) -> Result<(Timeline, TTFTBreakdown), SimError> {
    simulate_with_faults(
        plan,
        program,
        workload,
        template,
        hw,
        process,
        &EngineFaults::default(),
    )
}

pub fn simulate_with_faults(
    plan: &StartupPlan,
    program: &FunctionProgram,
    workload: &Workload,
    template: &FunctionTemplate,
    hw: &HardwareProfile,
    process: &ProcessState,
    faults: &EngineFaults,
) -> Result<(Timeline, TTFTBreakdown), SimError> {
    let (sizes, root_of) = gather_weights(program, workload)?;
    let trace = trace_inference(program, workload)?;

    for root in sizes.keys() {
        if !plan.actions.contains_key(root) {
            return Err(SimError::PlanMismatch(format!(
                "no action for weight '{root}'"
            )));
        }
    }
    if let Some(max_ordinal) = plan.sync_barriers.keys().max() {
        if *max_ordinal >= program.inference_ops.len() {
            return Err(SimError::PlanMismatch(format!(
                "barrier for kernel ordinal {max_ordinal} beyond program"
            )));
        }
    }

    let new_kernels = program
        .inference_ops
        .iter()
        .map(|k| k.kernel_id.as_str())
        .collect::<BTreeSet<_>>()
        .iter()
        .filter(|k| !process.loaded_kernel_ids.contains(**k))
        .count();
    check_memory(plan, &sizes, hw, process, new_kernels)?;

    let mut timeline = Timeline::default();

    // Serial prefix: context creation, then untraceable CPU init for a
    // full cold start (skipped entirely when forking from a template).
    let context_s = if process.context_ready {
        0.0
    } else {
        timeline.push(0.0, hw.context_create_s, EventKind::Context, Resource::ComputeQueue);
        hw.context_create_s
    };
    let cpu_init_s = if plan.kind == PlanKind::FullCold {
        program.cpu_init_s
    } else {
        0.0
    };
    let serial_offset = context_s + cpu_init_s;

    // Copy queue: replayed weights first, in traced access order, each
    // optionally gated on its storage read; then transfer groups.
    let replay_order: Vec<&str> = trace
        .access_order
        .iter()
        .chain(trace.never_read.iter())
        .map(String::as_str)
        .filter(|root| matches!(plan.actions.get(*root), Some(Action::ReplayInit { .. })))
        .collect();

    let mut replay_ready: BTreeMap<&str, f64> = BTreeMap::new();
    let mut storage_cursor = serial_offset;
    let mut copy_cursor = serial_offset;
    for root in &replay_order {
        let bytes = sizes[*root].size_bytes as f64;
        let available = match plan.actions[*root] {
            Action::ReplayInit {
                source: ReplaySource::Storage,
            } => {
                let end = storage_cursor + bytes / hw.storage_bandwidth_bytes_per_s;
                timeline.push(
                    storage_cursor,
                    end,
                    EventKind::StorageRead {
                        weight: root.to_string(),
                    },
                    Resource::Storage,
                );
                storage_cursor = end;
                end
            }
            _ => serial_offset,
        };
        let start = copy_cursor.max(available);
        let end = start + (hw.per_copy_overhead_s + bytes / hw.pcie_bandwidth_bytes_per_s);
        timeline.push(
            start,
            end,
            EventKind::H2gCopyReplay {
                weight: root.to_string(),
            },
            Resource::CopyQueue,
        );
        replay_ready.insert(root, end);
        copy_cursor = end;
    }

    let group_bytes: Vec<f64> = template
        .transfer_groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|w| template.size_of(w).unwrap_or(0) as f64)
                .sum()
        })
        .collect();
    // Only groups actually planned for loading transfer anything.
    let planned_groups: BTreeSet<usize> = plan
        .actions
        .values()
        .filter_map(|a| match a {
            Action::AsyncLoad { group_index, .. } => Some(*group_index),
            _ => None,
        })
        .collect();
    let mut group_ready: Vec<f64> = vec![0.0; template.transfer_groups.len()];
    for g in 0..template.transfer_groups.len() {
        if !planned_groups.contains(&g) {
            continue;
        }
        let mut start = copy_cursor;
        if let Some((delayed, not_before)) = faults.delay_group {
            if delayed == g {
                start = start.max(not_before);
            }
        }
        let end = start + (hw.per_copy_overhead_s + group_bytes[g] / hw.pcie_bandwidth_bytes_per_s);
        timeline.push(start, end, EventKind::H2gCopy { group: g }, Resource::CopyQueue);
        group_ready[g] = end;
        copy_cursor = end;
    }

    // First writer of each copy-on-write weight.
    let mut first_writer: BTreeMap<&str, usize> = BTreeMap::new();
    for (ordinal, kernel) in program.inference_ops.iter().enumerate() {
        for w in &kernel.writes {
            if let Some(root) = root_of.get(w) {
                if plan.cow_copies.contains(root) {
                    first_writer.entry(root).or_insert(ordinal);
                }
            }
        }
    }

    let mut cursor = serial_offset;
    let mut loaded = process.loaded_kernel_ids.clone();
    let mut code_load_s = 0.0;
    let mut cow_s = 0.0;
    let mut compute_s = 0.0;
    let mut stall_load_s = 0.0;
    let mut stall_dyn_s = 0.0;

    for (ordinal, kernel) in program.inference_ops.iter().enumerate() {
        if !loaded.contains(&kernel.kernel_id) {
            let end = cursor + hw.code_load_s_per_kernel;
            timeline.push(
                cursor,
                end,
                EventKind::CodeLoad {
                    kernel_id: kernel.kernel_id.clone(),
                },
                Resource::ComputeQueue,
            );
            code_load_s += hw.code_load_s_per_kernel;
            cursor = end;
            loaded.insert(kernel.kernel_id.clone());
        }
        for (root, writer) in &first_writer {
            if *writer == ordinal {
                let bytes = sizes[*root].size_bytes as f64;
                let dur = bytes / hw.gpu_copy_bandwidth_bytes_per_s;
                timeline.push(
                    cursor,
                    cursor + dur,
                    EventKind::CowCopy {
                        weight: root.to_string(),
                    },
                    Resource::ComputeQueue,
                );
                cow_s += dur;
                cursor += dur;
            }
        }

        let mut load_ready = 0.0f64;
        if faults.drop_barrier.is_none() || faults.drop_barrier.unwrap().0 != ordinal {
            if let Some(groups) = plan.sync_barriers.get(&ordinal) {
                for g in groups {
                    load_ready = load_ready.max(group_ready[*g]);
                }
            }
        } else if let Some(groups) = plan.sync_barriers.get(&ordinal) {
            let dropped = faults.drop_barrier.unwrap().1;
            for g in groups {
                if *g != dropped {
                    load_ready = load_ready.max(group_ready[*g]);
                }
            }
        }
        let mut dyn_ready = 0.0f64;
        for read in &kernel.reads {
            if let Some(root) = root_of.get(read) {
                if let Some(end) = replay_ready.get(root.as_str()) {
                    dyn_ready = dyn_ready.max(*end);
                }
            }
        }

        let ready = load_ready.max(dyn_ready);
        let start = cursor.max(ready);
        if start > cursor {
            if load_ready >= dyn_ready {
                stall_load_s += start - cursor;
            } else {
                stall_dyn_s += start - cursor;
            }
        }
        let dur = kernel.duration(workload);
        let end = start + dur;
        timeline.push(
            start,
            end,
            EventKind::Kernel {
                ordinal,
                kernel_id: kernel.kernel_id.clone(),
            },
            Resource::ComputeQueue,
        );
        compute_s += dur;
        cursor = end;
    }

    let breakdown = TTFTBreakdown {
        context_s,
        code_load_s,
        dynamic_init_s: cpu_init_s + stall_dyn_s,
        exposed_load_s: stall_load_s + cow_s,
        compute_s,
        ttft_s: cursor,
    };
    Ok((timeline, breakdown))
}

/// Warm lower bound: all weights resident, all kernels warm, no
/// initialization. TTFT equals pure compute.
pub fn simulate_warm(
    program: &FunctionProgram,
    workload: &Workload,
    _hw: &HardwareProfile,
) -> TTFTBreakdown {
    let compute_s: f64 = program
        .inference_ops
        .iter()
        .map(|k| k.duration(workload))
        .sum();
    TTFTBreakdown {
        compute_s,
        ttft_s: compute_s,
        ..TTFTBreakdown::default()
    }
}

/// No-overlap reference path: context (if cold), full CPU initialization,
/// every weight copied host-to-GPU one tensor at a time, and only then
/// inference, with cold-kernel penalties for kernels the process has not
/// loaded.
pub fn simulate_baseline(
    program: &FunctionProgram,
    workload: &Workload,
    hw: &HardwareProfile,
    process: &ProcessState,
) -> Result<(Timeline, TTFTBreakdown), SimError> {
    let (sizes, _) = gather_weights(program, workload)?;
    let trace = trace_inference(program, workload)?;

    let mut timeline = Timeline::default();
    let context_s = if process.context_ready {
        0.0
    } else {
        timeline.push(0.0, hw.context_create_s, EventKind::Context, Resource::ComputeQueue);
        hw.context_create_s
    };
    let cpu_init_s = program.cpu_init_s;
    let mut copy_cursor = context_s + cpu_init_s;
    for (i, (root, info)) in sizes.iter().enumerate() {
        let end = copy_cursor
            + (hw.per_copy_overhead_s + info.size_bytes as f64 / hw.pcie_bandwidth_bytes_per_s);
        timeline.push(
            copy_cursor,
            end,
            EventKind::H2gCopy { group: i },
            Resource::CopyQueue,
        );
        let _ = root;
        copy_cursor = end;
    }
    let exposed_load_s = copy_cursor - context_s - cpu_init_s;

    let mut cursor = copy_cursor;
    let mut loaded = process.loaded_kernel_ids.clone();
    let mut code_load_s = 0.0;
    let mut compute_s = 0.0;
    for (ordinal, kernel) in trace.kernel_sequence.iter().enumerate() {
        if !loaded.contains(&kernel.kernel_id) {
            let end = cursor + hw.code_load_s_per_kernel;
            timeline.push(
                cursor,
                end,
                EventKind::CodeLoad {
                    kernel_id: kernel.kernel_id.clone(),
                },
                Resource::ComputeQueue,
            );
            code_load_s += hw.code_load_s_per_kernel;
            cursor = end;
            loaded.insert(kernel.kernel_id.clone());
        }
        let dur = kernel.duration(workload);
        timeline.push(
            cursor,
            cursor + dur,
            EventKind::Kernel {
                ordinal,
                kernel_id: kernel.kernel_id.clone(),
            },
            Resource::ComputeQueue,
        );
        compute_s += dur;
        cursor += dur;
    }

    Ok((
        timeline,
        TTFTBreakdown {
            context_s,
            code_load_s,
            dynamic_init_s: cpu_init_s,
            exposed_load_s,
            compute_s,
            ttft_s: cursor,
        },
    ))
}

/// Exhaustive search over load orders of the non-resident weights
/// (factorial, at most 8): returns the minimal TTFT and an argmin order.
/// Implemented as a direct finish-time recurrence, independent of the
/// event engine it checks.
pub fn oracle_ttft(
    program: &FunctionProgram,
    workload: &Workload,
    hw: &HardwareProfile,
    resident: &BTreeSet<String>,
) -> Result<(f64, Vec<String>), SimError> {
    let (sizes, root_of) = gather_weights(program, workload)?;
    let trace = trace_inference(program, workload)?;

    let non_resident: Vec<&str> = trace
        .access_order
        .iter()
        .chain(trace.never_read.iter())
        .map(String::as_str)
        .filter(|r| !resident.contains(*r))
        .collect();
    if non_resident.len() > 8 {
        return Err(SimError::OracleTooLarge {
            weights: non_resident.len(),
        });
    }

    let kernel_reads: Vec<Vec<&str>> = program
        .inference_ops
        .iter()
        .map(|k| {
            k.reads
                .iter()
                .filter_map(|r| root_of.get(r).map(String::as_str))
                .filter(|r| !resident.contains(*r))
                .collect()
        })
        .collect();
    let durations: Vec<f64> = program
        .inference_ops
        .iter()
        .map(|k| k.duration(workload))
        .collect();

    let evaluate = |order: &[&str]| -> f64 {
        let mut ready: BTreeMap<&str, f64> = BTreeMap::new();
        let mut t = 0.0f64;
        for w in order {
            t += hw.per_copy_overhead_s + sizes[*w].size_bytes as f64 / hw.pcie_bandwidth_bytes_per_s;
            ready.insert(w, t);
        }
        let mut finish = 0.0f64;
        for (reads, dur) in kernel_reads.iter().zip(&durations) {
            let mut r = finish;
            for w in reads {
                r = r.max(ready[*w]);
            }
            finish = r + dur;
        }
        finish
    };

    let mut best = f64::INFINITY;
    let mut best_order: Vec<String> = Vec::new();
    let mut order = non_resident.clone();
    permute(&mut order, 0, &mut |perm| {
        let ttft = evaluate(perm);
        if ttft < best {
            best = ttft;
            best_order = perm.iter().map(|s| s.to_string()).collect();
        }
    });
    if best.is_infinite() {
        // No non-resident weights: every order ties at pure compute.
        best = durations.iter().fold(0.0, |f, d| f + d);
        best_order = Vec::new();
    }
    Ok((best, best_order))
}

fn permute<'a>(items: &mut Vec<&'a str>, k: usize, visit: &mut impl FnMut(&[&'a str])) {
    if items.is_empty() {
        return;
    }
    if k == items.len() - 1 {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Validates a produced timeline against the plan: every kernel must start
/// at or after the copy completion of each transfer group and replayed
/// weight it reads. Returns the list of violations.
pub fn check_residency(
    timeline: &Timeline,
    plan: &StartupPlan,
    program: &FunctionProgram,
    workload: &Workload,
) -> Result<Vec<String>, SimError> {
    let (_, root_of) = gather_weights(program, workload)?;
    let mut group_end: BTreeMap<usize, f64> = BTreeMap::new();
    let mut replay_end: BTreeMap<&str, f64> = BTreeMap::new();
    for e in &timeline.events {
        match &e.kind {
            EventKind::H2gCopy { group } => {
                group_end.insert(*group, e.end_s);
            }
            EventKind::H2gCopyReplay { weight } => {
                replay_end.insert(weight, e.end_s);
            }
            _ => {}
        }
    }
    let eps = 1e-12;
    let mut violations = Vec::new();
    for e in &timeline.events {
        let EventKind::Kernel { ordinal, .. } = &e.kind else {
            continue;
        };
        let kernel = &program.inference_ops[*ordinal];
        for read in &kernel.reads {
            let Some(root) = root_of.get(read) else {
                continue;
            };
            match plan.actions.get(root) {
                Some(Action::AsyncLoad { group_index, .. }) => {
                    let end = group_end.get(group_index).copied().unwrap_or(f64::INFINITY);
                    if e.start_s + eps < end {
                        violations.push(format!(
                            "kernel {ordinal} starts at {:.6} before group {group_index} \
                             ('{root}') completes at {end:.6}",
                            e.start_s
                        ));
                    }
                }
                Some(Action::ReplayInit { .. }) => {
                    let end = replay_end
                        .get(root.as_str())
                        .copied()
                        .unwrap_or(f64::INFINITY);
                    if e.start_s + eps < end {
                        violations.push(format!(
                            "kernel {ordinal} starts at {:.6} before replayed '{root}' \
                             completes at {end:.6}",
                            e.start_s
                        ));
                    }
                }
                _ => {}
            }
        }
    }
    Ok(violations)
}
