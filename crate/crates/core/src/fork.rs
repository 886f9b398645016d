//! Startup planning for one invocation from a function template: reuse
//! matched static weights, replay dynamic initializations, order
//! asynchronous loads by traced access order, and inject kernel/load
//! synchronization barriers plus copy-on-write duplications.
//!
//! Planning is pure; any number of plans may reference one immutable
//! template snapshot concurrently.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::template::FunctionTemplate;
use crate::tracer::{InferenceTraceRecord, WeightDFG};

#[derive(Debug, Error)]
pub enum PlanError {
    /// Weight-name sets differ between the observed initialization and
    /// the template: fall back to a full cold plan and invalidate the
    /// template.
    #[error("structural mismatch between observed init and template (template invalidation)")]
    StructuralMismatch,
}

/// Where a replayed initialization reads its checkpoint from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaySource {
    /// Request-specific checkpoints (adapters) are not host-cached.
    Storage,
    /// Host-cached checkpoints skip the storage read.
    Host,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    /// Weight is inside the template's resident prefix.
    ReuseResident,
    /// Weight is loaded asynchronously as part of a transfer group.
    AsyncLoad { group_index: usize, order_index: usize },
    /// Initialization ops are replayed for this weight.
    ReplayInit { source: ReplaySource },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// Fork from a template: static state reused, dynamics replayed.
    TemplateFork,
    /// No template state reused; every weight replays (baseline/fallback).
    FullCold,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartupPlan {
    pub kind: PlanKind,
    /// Keyed by alias-group root.
    pub actions: BTreeMap<String, Action>,
    /// Kernel ordinal -> transfer groups that must complete first.
    pub sync_barriers: BTreeMap<usize, BTreeSet<usize>>,
    /// Forked weights written during inference, duplicated before the
    /// writing kernel.
    pub cow_copies: BTreeSet<String>,
    /// Init ops bypassed by reusing template state.
    pub skipped_init_ops: usize,
}

impl StartupPlan {
    /// Debug dump: `ACTION <weight> <kind> <order>` and
    /// `BARRIER <kernel-ordinal> <group-list>` lines.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (weight, action) in &self.actions {
            let (kind, order) = match action {
                Action::ReuseResident => ("reuse", "-".to_string()),
                Action::AsyncLoad { order_index, .. } => ("async-load", order_index.to_string()),
                Action::ReplayInit {
                    source: ReplaySource::Storage,
                } => ("replay-storage", "-".to_string()),
                Action::ReplayInit {
                    source: ReplaySource::Host,
                } => ("replay-host", "-".to_string()),
            };
            out.push_str(&format!("ACTION {weight} {kind} {order}\n"));
        }
        for (kernel, groups) in &self.sync_barriers {
            let list: Vec<String> = groups.iter().map(|g| g.to_string()).collect();
            out.push_str(&format!("BARRIER {kernel} {}\n", list.join(",")));
        }
        out
    }
}

/// Collapses an observed per-name init map to alias-group roots.
fn roots_of(init: &BTreeMap<String, WeightDFG>) -> BTreeMap<&str, &WeightDFG> {
    let mut out = BTreeMap::new();
    for dfg in init.values() {
        out.entry(dfg.alias_group.as_str()).or_insert(dfg);
    }
    out
}

fn barriers_for(
    trace: &InferenceTraceRecord,
    observed: &BTreeMap<String, WeightDFG>,
    actions: &BTreeMap<String, Action>,
) -> BTreeMap<usize, BTreeSet<usize>> {
    let mut barriers: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (ordinal, kernel) in trace.kernel_sequence.iter().enumerate() {
        for read in &kernel.reads {
            let root = match observed.get(read) {
                Some(dfg) => dfg.alias_group.as_str(),
                None => continue,
            };
            if let Some(Action::AsyncLoad { group_index, .. }) = actions.get(root) {
                barriers.entry(ordinal).or_default().insert(*group_index);
            }
        }
    }
    barriers
}

fn skipped_ops(
    observed: &BTreeMap<String, WeightDFG>,
    actions: &BTreeMap<String, Action>,
) -> usize {
    let mut ops: BTreeSet<usize> = BTreeSet::new();
    for dfg in observed.values() {
        if matches!(
            actions.get(dfg.alias_group.as_str()),
            Some(Action::ReuseResident) | Some(Action::AsyncLoad { .. })
        ) {
            ops.extend(dfg.source_ops.iter().copied());
        }
    }
    ops.len()
}

/// Per-weight matching of the observed initialization against the
/// template: matched static weights reuse resident state or load
/// asynchronously in layout order; mismatched or dynamic weights replay.
pub fn plan_startup(
    template: &FunctionTemplate,
    observed_init: &BTreeMap<String, WeightDFG>,
    trace: &InferenceTraceRecord,
) -> Result<StartupPlan, PlanError> {
    if observed_init.len() != template.weight_dfgs.len()
        || observed_init
            .keys()
            .any(|k| !template.weight_dfgs.contains_key(k))
    {
        return Err(PlanError::StructuralMismatch);
    }

    let resident = template.resident_weights();
    let order_of: BTreeMap<&str, usize> = template
        .suffix()
        .iter()
        .enumerate()
        .map(|(i, (w, _))| (w.as_str(), i))
        .collect();

    let mut actions: BTreeMap<String, Action> = BTreeMap::new();
    for (root, dfg) in roots_of(observed_init) {
        let template_dfg = &template.weight_dfgs[&dfg.weight_name];
        let matched = dfg.matches(template_dfg) && !template.classification.is_dynamic(root);
        let action = if matched && resident.contains(root) {
            Action::ReuseResident
        } else if matched {
            match (template.group_of(root), order_of.get(root)) {
                (Some(group_index), Some(order_index)) => Action::AsyncLoad {
                    group_index,
                    order_index: *order_index,
                },
                // Matched but absent from the layout (flagged dynamic in
                // an earlier update): replay.
                _ => Action::ReplayInit {
                    source: ReplaySource::Storage,
                },
            }
        } else {
            Action::ReplayInit {
                source: ReplaySource::Storage,
            }
        };
        actions.insert(root.to_string(), action);
    }

    let sync_barriers = barriers_for(trace, observed_init, &actions);
    let skipped_init_ops = skipped_ops(observed_init, &actions);

    Ok(StartupPlan {
        kind: PlanKind::TemplateFork,
        actions,
        sync_barriers,
        cow_copies: BTreeSet::new(),
        skipped_init_ops,
    })
}

/// Fallback when the template cannot be used at all: every weight
/// replays its initialization from the host cache.
pub fn full_cold_plan(
    observed_init: &BTreeMap<String, WeightDFG>,
    trace: &InferenceTraceRecord,
) -> StartupPlan {
    let actions: BTreeMap<String, Action> = roots_of(observed_init)
        .keys()
        .map(|root| {
            (
                root.to_string(),
                Action::ReplayInit {
                    source: ReplaySource::Host,
                },
            )
        })
        .collect();
    let sync_barriers = barriers_for(trace, observed_init, &actions);
    StartupPlan {
        kind: PlanKind::FullCold,
        actions,
        sync_barriers,
        cow_copies: BTreeSet::new(),
        skipped_init_ops: 0,
    }
}

/// Populates `cow_copies`: forked weights (reused or async-loaded) that
/// some kernel writes. Replayed weights are privately owned and need no
/// copy.
pub fn apply_cow(mut plan: StartupPlan, trace: &InferenceTraceRecord) -> StartupPlan {
    plan.cow_copies = trace
        .written_weights
        .iter()
        .filter(|w| {
            matches!(
                plan.actions.get(*w),
                Some(Action::ReuseResident) | Some(Action::AsyncLoad { .. })
            )
        })
        .cloned()
        .collect();
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FunctionProgram, InitOp, KernelCall, Workload};
    use crate::presets;
    use crate::template::{generate_template, PrefetchSpec, DEFAULT_MAX_TRANSFERS};
    use crate::tracer::{trace_inference, trace_init};

    fn traced(
        program: &FunctionProgram,
        workload: &Workload,
    ) -> (BTreeMap<String, WeightDFG>, InferenceTraceRecord) {
        (
            trace_init(program, workload).unwrap(),
            trace_inference(program, workload).unwrap(),
        )
    }

    #[test]
    fn fully_warm_template_reuses_everything() {
        let p = presets::llama2_13b_like();
        let w = Workload::new(2048, 1);
        let (init, trace) = traced(&p, &w);
        let t = generate_template(
            "f",
            &[(init.clone(), trace.clone())],
            0.3,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Full,
        )
        .unwrap();
        let plan = plan_startup(&t, &init, &trace).unwrap();
        assert!(plan
            .actions
            .values()
            .all(|a| *a == Action::ReuseResident));
        assert!(plan.sync_barriers.is_empty());
        assert!(plan.skipped_init_ops > 0);
    }

    /// w1,w5,w4,w3 match the template; w2 comes from a different adapter.
    /// w4 is accessed before w3, so it loads first despite w3 being
    /// initialized earlier.
    fn five_weight_program(adapter_slot: bool) -> FunctionProgram {
        let mut init_ops = Vec::new();
        for (name, size) in [("w1", 100u64), ("w2", 10), ("w3", 100), ("w4", 100), ("w5", 100)] {
            init_ops.push(InitOp::LoadCheckpoint {
                checkpoint_id: if name == "w2" && adapter_slot {
                    crate::model::ADAPTER_PLACEHOLDER.to_string()
                } else {
                    "base".to_string()
                },
                tensor_name: name.to_string(),
                size_bytes: size,
            });
            init_ops.push(InitOp::ToGpu {
                tensor_name: name.to_string(),
            });
        }
        let kernel = |id: &str, reads: Vec<&str>| KernelCall {
            kernel_id: id.to_string(),
            reads: reads.into_iter().map(String::from).collect(),
            writes: vec![],
            duration_base_s: 0.001,
            duration_per_token_s: 0.0,
        };
        FunctionProgram {
            function_id: "five".to_string(),
            declared_static: Some(!adapter_slot),
            cpu_init_s: 0.0,
            init_ops,
            inference_ops: vec![
                kernel("k0", vec!["w1"]),
                kernel("k1", vec!["w2", "w5"]),
                kernel("k2", vec!["w4"]),
                kernel("k3", vec!["w3"]),
            ],
        }
    }

    #[test]
    fn mismatched_weight_replays_and_loads_follow_access_order() {
        let p = five_weight_program(true);
        let wa = Workload::with_adapter(1, 1, "lora-A");
        let wb = Workload::with_adapter(1, 1, "lora-B");
        let t = generate_template(
            "five",
            &[traced(&p, &wa), traced(&p, &wb)],
            0.0,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Bytes(0),
        )
        .unwrap();
        let (init_b, trace_b) = traced(&p, &wb);
        let plan = plan_startup(&t, &init_b, &trace_b).unwrap();
        assert!(matches!(
            plan.actions["w2"],
            Action::ReplayInit {
                source: ReplaySource::Storage
            }
        ));
        let order = |w: &str| match plan.actions[w] {
            Action::AsyncLoad { order_index, .. } => order_index,
            _ => panic!("expected async-load for {w}"),
        };
        // Access order: w1, w5, w4, w3.
        assert!(order("w4") < order("w3"));
        assert_eq!(order("w1"), 0);
    }

    #[test]
    fn barriers_cover_every_async_read() {
        let p = five_weight_program(false);
        let w = Workload::new(1, 1);
        let (init, trace) = traced(&p, &w);
        let t = generate_template(
            "five",
            &[(init.clone(), trace.clone())],
            0.0,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Bytes(0),
        )
        .unwrap();
        let plan = plan_startup(&t, &init, &trace).unwrap();
        for (ordinal, kernel) in trace.kernel_sequence.iter().enumerate() {
            for read in &kernel.reads {
                if let Some(Action::AsyncLoad { group_index, .. }) = plan.actions.get(read) {
                    assert!(plan.sync_barriers[&ordinal].contains(group_index));
                }
            }
        }
    }

    #[test]
    fn structural_mismatch_falls_back_to_full_cold() {
        let p = five_weight_program(false);
        let w = Workload::new(1, 1);
        let (init, trace) = traced(&p, &w);
        let t = generate_template(
            "five",
            &[(init.clone(), trace.clone())],
            0.0,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Bytes(0),
        )
        .unwrap();
        let mut missing = init.clone();
        missing.remove("w5");
        assert!(matches!(
            plan_startup(&t, &missing, &trace),
            Err(PlanError::StructuralMismatch)
        ));
        let cold = full_cold_plan(&init, &trace);
        assert_eq!(cold.kind, PlanKind::FullCold);
        assert!(cold.actions.values().all(|a| matches!(
            a,
            Action::ReplayInit {
                source: ReplaySource::Host
            }
        )));
        assert_eq!(cold.skipped_init_ops, 0);
    }

    #[test]
    fn cow_is_written_intersect_forked() {
        let mut p = five_weight_program(true);
        p.inference_ops[0].writes = vec!["w1".to_string()]; // forked, written
        p.inference_ops[1].writes = vec!["w2".to_string()]; // replayed, written
        let wa = Workload::with_adapter(1, 1, "lora-A");
        let wb = Workload::with_adapter(1, 1, "lora-B");
        let t = generate_template(
            "five",
            &[traced(&p, &wa), traced(&p, &wb)],
            0.0,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Bytes(0),
        )
        .unwrap();
        let (init, trace) = traced(&p, &wb);
        let plan = apply_cow(plan_startup(&t, &init, &trace).unwrap(), &trace);
        assert!(plan.cow_copies.contains("w1"));
        assert!(!plan.cow_copies.contains("w2"));
    }

    #[test]
    fn no_writes_no_cow() {
        let p = five_weight_program(false);
        let w = Workload::new(1, 1);
        let (init, trace) = traced(&p, &w);
        let t = generate_template(
            "five",
            &[(init.clone(), trace.clone())],
            0.0,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Full,
        )
        .unwrap();
        let plan = apply_cow(plan_startup(&t, &init, &trace).unwrap(), &trace);
        assert!(plan.cow_copies.is_empty());
    }

    #[test]
    fn lora_plan_reuses_99_percent_of_bytes() {
        let p = presets::llama2_13b_lora_like();
        let wa = Workload::with_adapter(2048, 1, "lora-A");
        let wb = Workload::with_adapter(2048, 1, "lora-B");
        let t = generate_template(
            "f",
            &[traced(&p, &wa), traced(&p, &wb)],
            0.3,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Bytes(0),
        )
        .unwrap();
        let (init, trace) = traced(&p, &wb);
        let plan = plan_startup(&t, &init, &trace).unwrap();
        let mut reused = 0u64;
        let mut total = 0u64;
        for (root, action) in &plan.actions {
            let bytes = init
                .values()
                .find(|d| &d.alias_group == root)
                .unwrap()
                .size_bytes;
            total += bytes;
            if !matches!(action, Action::ReplayInit { .. }) {
                reused += bytes;
            }
        }
        assert!(reused as f64 >= 0.99 * total as f64);
    }

    #[test]
    fn plan_dump_lines() {
        let p = five_weight_program(false);
        let w = Workload::new(1, 1);
        let (init, trace) = traced(&p, &w);
        let t = generate_template(
            "five",
            &[(init.clone(), trace.clone())],
            0.0,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Bytes(0),
        )
        .unwrap();
        let plan = plan_startup(&t, &init, &trace).unwrap();
        let dump = plan.dump();
        assert!(dump.contains("ACTION w1 async-load 0"));
        assert!(dump.lines().any(|l| l.starts_with("BARRIER 0 ")));
    }
}
