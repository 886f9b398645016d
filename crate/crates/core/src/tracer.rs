//! Weight-centric two-phase tracing: strict tracing of initialization into
//! per-weight data-flow graphs, lax tracing of inference into weight access
//! order and kernel sets, plus write detection for copy-on-write.
//!
//! The tracer is a pure function of its inputs; traces of different
//! invocations are independent.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_program, FunctionProgram, InitOp, KernelCall, Violation, Workload,
    ADAPTER_PLACEHOLDER,
};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid program: {0:?}")]
    InvalidProgram(Vec<Violation>),
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    /// Different weight-name sets signal a structural model change and
    /// invalidate the template entirely.
    #[error("weight-name sets differ (template invalidation); missing={missing:?} extra={extra:?}")]
    StructuralMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
}

/// One canonicalized step in a weight's producing chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceStep {
    pub op_kind: String,
    pub checkpoint_id: Option<String>,
    pub size_bytes: u64,
}

/// Canonical data-flow graph of one GPU weight: the chain of operations
/// producing it. Two DFGs match iff their provenance chains are
/// element-wise equal; `source_ops` is bookkeeping and takes no part in
/// the comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightDFG {
    pub weight_name: String,
    pub provenance: Vec<ProvenanceStep>,
    pub size_bytes: u64,
    pub alias_group: String,
    /// Init-op indices that contributed to this weight.
    pub source_ops: Vec<usize>,
}

impl WeightDFG {
    pub fn matches(&self, other: &WeightDFG) -> bool {
        self.provenance == other.provenance
    }

    /// Stable 64-bit hash of the provenance chain (FNV-1a), used by the
    /// trace dump format.
    pub fn provenance_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for step in &self.provenance {
            eat(step.op_kind.as_bytes());
            eat(&[0]);
            if let Some(c) = &step.checkpoint_id {
                eat(c.as_bytes());
            }
            eat(&[0]);
            eat(&step.size_bytes.to_le_bytes());
        }
        h
    }
}

/// Lax trace of one inference pass: weight access order (by first kernel
/// read, aliases collapsed to their group root), the kernel sequence, and
/// the set of weights any kernel writes. Carries no DFG data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceTraceRecord {
    pub access_order: Vec<String>,
    pub kernel_sequence: Vec<KernelCall>,
    pub written_weights: BTreeSet<String>,
    /// GPU weights never read by any kernel under this workload, in
    /// initialization order. Placed at the layout tail by the builder.
    pub never_read: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFlag {
    Static,
    Dynamic,
}

/// Per-weight static/dynamic verdicts. Dynamic is sticky: merging keeps a
/// weight dynamic once any comparison flagged it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classification {
    pub flags: BTreeMap<String, WeightFlag>,
}

impl Classification {
    pub fn all_static(names: impl IntoIterator<Item = String>) -> Self {
        Classification {
            flags: names.into_iter().map(|n| (n, WeightFlag::Static)).collect(),
        }
    }

    pub fn is_dynamic(&self, name: &str) -> bool {
        matches!(self.flags.get(name), Some(WeightFlag::Dynamic))
    }

    /// Monotone merge: a weight dynamic on either side stays dynamic.
    pub fn merge(&mut self, other: &Classification) {
        for (name, flag) in &other.flags {
            if *flag == WeightFlag::Dynamic {
                self.flags.insert(name.clone(), WeightFlag::Dynamic);
            } else {
                self.flags.entry(name.clone()).or_insert(WeightFlag::Static);
            }
        }
    }
}

struct HostTensor {
    provenance: Vec<ProvenanceStep>,
    size_bytes: u64,
    root: String,
    source_ops: Vec<usize>,
}

struct InitInterp {
    tensors: BTreeMap<String, HostTensor>,
    /// ToGpu-marked names in mark order, with the op index of the mark.
    gpu_marks: Vec<(String, usize)>,
}

fn interpret_init(program: &FunctionProgram, workload: &Workload) -> InitInterp {
    let mut tensors: BTreeMap<String, HostTensor> = BTreeMap::new();
    let mut gpu_marks = Vec::new();

    for (i, op) in program.init_ops.iter().enumerate() {
        match op {
            InitOp::LoadCheckpoint {
                checkpoint_id,
                tensor_name,
                size_bytes,
            } => {
                let ckpt = if checkpoint_id == ADAPTER_PLACEHOLDER {
                    workload
                        .adapter_id
                        .clone()
                        .unwrap_or_else(|| checkpoint_id.clone())
                } else {
                    checkpoint_id.clone()
                };
                tensors.insert(
                    tensor_name.clone(),
                    HostTensor {
                        provenance: vec![ProvenanceStep {
                            op_kind: "load_checkpoint".to_string(),
                            checkpoint_id: Some(ckpt),
                            size_bytes: *size_bytes,
                        }],
                        size_bytes: *size_bytes,
                        root: tensor_name.clone(),
                        source_ops: vec![i],
                    },
                );
            }
            InitOp::Transform {
                op_kind,
                input_names,
                output_name,
                output_size_bytes,
            } => {
                let mut provenance = Vec::new();
                let mut source_ops = Vec::new();
                for input in input_names {
                    if let Some(t) = tensors.get(input) {
                        provenance.extend(t.provenance.iter().cloned());
                        source_ops.extend(t.source_ops.iter().copied());
                    }
                }
                provenance.push(ProvenanceStep {
                    op_kind: format!("transform:{op_kind}"),
                    checkpoint_id: None,
                    size_bytes: *output_size_bytes,
                });
                source_ops.push(i);
                tensors.insert(
                    output_name.clone(),
                    HostTensor {
                        provenance,
                        size_bytes: *output_size_bytes,
                        root: output_name.clone(),
                        source_ops,
                    },
                );
            }
            InitOp::AliasShare {
                source_name,
                alias_name,
            } => {
                if let Some(src) = tensors.get(source_name) {
                    let mut source_ops = src.source_ops.clone();
                    source_ops.push(i);
                    let t = HostTensor {
                        provenance: src.provenance.clone(),
                        size_bytes: src.size_bytes,
                        root: src.root.clone(),
                        source_ops,
                    };
                    tensors.insert(alias_name.clone(), t);
                }
            }
            InitOp::ToGpu { tensor_name } => {
                gpu_marks.push((tensor_name.clone(), i));
            }
        }
    }

    InitInterp { tensors, gpu_marks }
}

fn validate_for_trace(program: &FunctionProgram) -> Result<(), TraceError> {
    let violations: Vec<Violation> = validate_program(program)
        .into_iter()
        .filter(|v| !matches!(v, Violation::NoInferenceOps))
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(TraceError::InvalidProgram(violations))
    }
}

/// Strict tracing of initialization: one `WeightDFG` per `ToGpu` weight,
/// with the request's adapter id substituted into placeholder checkpoints
/// and alias groups resolved.
pub fn trace_init(
    program: &FunctionProgram,
    workload: &Workload,
) -> Result<BTreeMap<String, WeightDFG>, TraceError> {
    validate_for_trace(program)?;
    let interp = interpret_init(program, workload);
    let mut out = BTreeMap::new();
    for (name, mark_op) in &interp.gpu_marks {
        let Some(t) = interp.tensors.get(name) else {
            continue;
        };
        let mut source_ops = t.source_ops.clone();
        source_ops.push(*mark_op);
        out.insert(
            name.clone(),
            WeightDFG {
                weight_name: name.clone(),
                provenance: t.provenance.clone(),
                size_bytes: t.size_bytes,
                alias_group: t.root.clone(),
                source_ops,
            },
        );
    }
    Ok(out)
}

/// Lax tracing of inference: first-read access order over the kernel
/// stream plus written-weight detection. Records no provenance.
pub fn trace_inference(
    program: &FunctionProgram,
    workload: &Workload,
) -> Result<InferenceTraceRecord, TraceError> {
    validate_for_trace(program)?;
    let interp = interpret_init(program, workload);

    // Alias-group roots of GPU-resident weights, in mark order.
    let mut gpu_roots: Vec<String> = Vec::new();
    let mut root_of: BTreeMap<&str, &str> = BTreeMap::new();
    for (name, _) in &interp.gpu_marks {
        if let Some(t) = interp.tensors.get(name) {
            root_of.insert(name.as_str(), t.root.as_str());
            if !gpu_roots.iter().any(|r| r == &t.root) {
                gpu_roots.push(t.root.clone());
            }
        }
    }

    let mut access_order: Vec<String> = Vec::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut written_weights: BTreeSet<String> = BTreeSet::new();

    for kernel in &program.inference_ops {
        for read in &kernel.reads {
            if let Some(root) = root_of.get(read.as_str()) {
                if seen.insert(root) {
                    access_order.push(root.to_string());
                }
            }
        }
        for write in &kernel.writes {
            if let Some(root) = root_of.get(write.as_str()) {
                written_weights.insert(root.to_string());
            }
        }
    }

    let never_read = gpu_roots
        .into_iter()
        .filter(|r| !seen.contains(r.as_str()))
        .collect();

    Ok(InferenceTraceRecord {
        access_order,
        kernel_sequence: program.inference_ops.clone(),
        written_weights,
        never_read,
    })
}

/// Flags each weight dynamic iff its DFGs differ between the two traces.
/// Errors when the weight-name sets differ (structural model change).
pub fn classify_weights(
    reference: &BTreeMap<String, WeightDFG>,
    observed: &BTreeMap<String, WeightDFG>,
) -> Result<Classification, ClassifyError> {
    let missing: Vec<String> = reference
        .keys()
        .filter(|k| !observed.contains_key(*k))
        .cloned()
        .collect();
    let extra: Vec<String> = observed
        .keys()
        .filter(|k| !reference.contains_key(*k))
        .cloned()
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(ClassifyError::StructuralMismatch { missing, extra });
    }
    let mut flags = BTreeMap::new();
    for (name, dfg) in reference {
        let flag = if dfg.matches(&observed[name]) {
            WeightFlag::Static
        } else {
            WeightFlag::Dynamic
        };
        flags.insert(name.clone(), flag);
    }
    Ok(Classification { flags })
}

/// Line-oriented trace dump for debugging and golden tests:
/// `INIT <weight> <provenance-hash> <bytes>` then
/// `ACCESS <ordinal> <weight> <kernel_id>`.
pub fn dump_trace(init: &BTreeMap<String, WeightDFG>, trace: &InferenceTraceRecord) -> String {
    let mut out = String::new();
    for (name, dfg) in init {
        out.push_str(&format!(
            "INIT {name} {:016x} {}\n",
            dfg.provenance_hash(),
            dfg.size_bytes
        ));
    }
    // Root -> all names of its alias group, to find the first reading kernel.
    let mut group_names: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (name, dfg) in init {
        group_names
            .entry(dfg.alias_group.as_str())
            .or_default()
            .push(name.as_str());
    }
    for (ordinal, weight) in trace.access_order.iter().enumerate() {
        let names = group_names
            .get(weight.as_str())
            .cloned()
            .unwrap_or_else(|| vec![weight.as_str()]);
        let kernel_id = trace
            .kernel_sequence
            .iter()
            .find(|k| k.reads.iter().any(|r| names.contains(&r.as_str())))
            .map(|k| k.kernel_id.as_str())
            .unwrap_or("-");
        out.push_str(&format!("ACCESS {ordinal} {weight} {kernel_id}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitOp;
    use crate::presets;

    fn lora_program() -> FunctionProgram {
        presets::llama2_13b_lora_like()
    }

    #[test]
    fn adapter_checkpoint_is_substituted() {
        let p = lora_program();
        let init = trace_init(&p, &Workload::with_adapter(128, 1, "lora-A")).unwrap();
        let dfg = &init["lora_0"];
        assert_eq!(
            dfg.provenance[0].checkpoint_id.as_deref(),
            Some("lora-A")
        );
    }

    #[test]
    fn empty_program_traces_to_empty_map() {
        let p = FunctionProgram {
            function_id: "empty".into(),
            declared_static: Some(true),
            cpu_init_s: 0.0,
            init_ops: vec![],
            inference_ops: vec![],
        };
        assert!(trace_init(&p, &Workload::new(1, 1)).unwrap().is_empty());
    }

    #[test]
    fn alias_names_share_one_group() {
        let p = presets::llama2_13b_like();
        let init = trace_init(&p, &Workload::new(128, 1)).unwrap();
        assert_eq!(init["w_embed"].alias_group, init["w_out"].alias_group);
        assert!(init["w_embed"].matches(&init["w_out"]));
    }

    #[test]
    fn access_order_is_first_read_order() {
        let mut p = presets::uniform_chain("f", 2, 8, 0.0);
        // kernels read [w1], [w0], [w1] -> access order [w1, w0]
        p.inference_ops = vec![
            KernelCall {
                kernel_id: "a".into(),
                reads: vec!["w1".into()],
                writes: vec![],
                duration_base_s: 0.0,
                duration_per_token_s: 0.0,
            },
            KernelCall {
                kernel_id: "b".into(),
                reads: vec!["w0".into()],
                writes: vec![],
                duration_base_s: 0.0,
                duration_per_token_s: 0.0,
            },
            KernelCall {
                kernel_id: "a".into(),
                reads: vec!["w1".into()],
                writes: vec![],
                duration_base_s: 0.0,
                duration_per_token_s: 0.0,
            },
        ];
        let t = trace_inference(&p, &Workload::new(1, 1)).unwrap();
        assert_eq!(t.access_order, vec!["w1".to_string(), "w0".to_string()]);
    }

    #[test]
    fn shared_embedding_heads_the_access_order() {
        // Embedding is initialized last but read by kernel 0.
        let p = presets::llama2_13b_like();
        let t = trace_inference(&p, &Workload::new(128, 1)).unwrap();
        assert_eq!(t.access_order[0], "w_embed");
    }

    #[test]
    fn written_weights_come_from_write_sets() {
        let mut p = presets::uniform_chain("f", 3, 8, 0.0);
        p.inference_ops[1].writes = vec!["w2".into()];
        let t = trace_inference(&p, &Workload::new(1, 1)).unwrap();
        assert_eq!(
            t.written_weights.iter().cloned().collect::<Vec<_>>(),
            vec!["w2".to_string()]
        );
    }

    #[test]
    fn never_read_weights_are_reported_not_dropped() {
        let mut p = presets::uniform_chain("f", 3, 8, 0.0);
        p.inference_ops.remove(1); // w1 loaded but never read
        let t = trace_inference(&p, &Workload::new(1, 1)).unwrap();
        assert_eq!(t.never_read, vec!["w1".to_string()]);
        assert!(!t.access_order.contains(&"w1".to_string()));
    }

    #[test]
    fn classify_self_is_all_static() {
        let p = lora_program();
        let init = trace_init(&p, &Workload::with_adapter(128, 1, "lora-A")).unwrap();
        let c = classify_weights(&init, &init).unwrap();
        assert!(c.flags.values().all(|f| *f == WeightFlag::Static));
    }

    #[test]
    fn adapters_flag_dynamic_base_stays_static() {
        let p = lora_program();
        let a = trace_init(&p, &Workload::with_adapter(128, 1, "lora-A")).unwrap();
        let b = trace_init(&p, &Workload::with_adapter(128, 1, "lora-B")).unwrap();
        let c = classify_weights(&a, &b).unwrap();
        assert!(c.is_dynamic("lora_0"));
        assert!(!c.is_dynamic("layer0_w0"));
        let dynamic = c
            .flags
            .values()
            .filter(|f| **f == WeightFlag::Dynamic)
            .count();
        assert_eq!(dynamic, 40);
    }

    #[test]
    fn classify_is_symmetric() {
        let p = lora_program();
        let a = trace_init(&p, &Workload::with_adapter(128, 1, "lora-A")).unwrap();
        let b = trace_init(&p, &Workload::with_adapter(128, 1, "lora-B")).unwrap();
        let ab = classify_weights(&a, &b).unwrap();
        let ba = classify_weights(&b, &a).unwrap();
        assert_eq!(
            ab.flags.iter().collect::<Vec<_>>(),
            ba.flags.iter().collect::<Vec<_>>()
        );
    }

    #[test]
    fn structural_mismatch_is_an_error() {
        let p = lora_program();
        let a = trace_init(&p, &Workload::with_adapter(128, 1, "lora-A")).unwrap();
        let mut b = a.clone();
        b.remove("layer0_w0");
        assert!(matches!(
            classify_weights(&a, &b),
            Err(ClassifyError::StructuralMismatch { .. })
        ));
    }

    #[test]
    fn tracing_is_deterministic() {
        let p = lora_program();
        let w = Workload::with_adapter(2048, 1, "lora-A");
        let d1 = dump_trace(
            &trace_init(&p, &w).unwrap(),
            &trace_inference(&p, &w).unwrap(),
        );
        let d2 = dump_trace(
            &trace_init(&p, &w).unwrap(),
            &trace_inference(&p, &w).unwrap(),
        );
        assert_eq!(d1, d2);
    }

    #[test]
    fn dynamic_size_change_flags_dynamic() {
        let mut p = presets::uniform_chain("f", 2, 8, 0.0);
        let a = trace_init(&p, &Workload::new(1, 1)).unwrap();
        if let InitOp::LoadCheckpoint { size_bytes, .. } = &mut p.init_ops[0] {
            *size_bytes = 16;
        }
        let b = trace_init(&p, &Workload::new(1, 1)).unwrap();
        let c = classify_weights(&a, &b).unwrap();
        assert!(c.is_dynamic("w0"));
    }
}
