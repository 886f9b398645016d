//! Domain vocabulary shared by every other module: function programs,
//! weights, kernels, hardware profiles, and latency breakdowns.
//!
//! All types here are immutable after construction and safe to share
//! read-only across concurrent simulations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// Checkpoint id that gets substituted by the request's `adapter_id`
/// when tracing a dynamic function.
pub const ADAPTER_PLACEHOLDER: &str = "$adapter";

fn default_context_footprint() -> u64 {
    500 * (1 << 20)
}

fn default_context_create() -> f64 {
    0.830
}

fn default_gpu_copy_bandwidth() -> f64 {
    // Device-to-device copies run at HBM-class bandwidth, far above PCIe.
    600e9
}

fn default_gpu_count() -> u32 {
    1
}

/// Calibrated hardware constants for one GPU server.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub pcie_bandwidth_bytes_per_s: f64,
    pub storage_bandwidth_bytes_per_s: f64,
    pub gpu_memory_bytes: u64,
    pub host_pool_bytes: u64,
    #[serde(default = "default_context_footprint")]
    pub context_footprint_bytes: u64,
    #[serde(default = "default_context_create")]
    pub context_create_s: f64,
    /// Fixed command cost per host-to-GPU transfer.
    #[serde(default)]
    pub per_copy_overhead_s: f64,
    #[serde(default)]
    pub code_segment_bytes_per_kernel: u64,
    /// Cold-kernel penalty per unique kernel id.
    #[serde(default)]
    pub code_load_s_per_kernel: f64,
    #[serde(default = "default_gpu_count")]
    pub gpu_count: u32,
    /// Bandwidth for GPU-internal copies (copy-on-write duplication).
    #[serde(default = "default_gpu_copy_bandwidth")]
    pub gpu_copy_bandwidth_bytes_per_s: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.pcie_bandwidth_bytes_per_s > 0.0) {
            return Err("pcie_bandwidth_bytes_per_s must be strictly positive".into());
        }
        if !(self.storage_bandwidth_bytes_per_s > 0.0) {
            return Err("storage_bandwidth_bytes_per_s must be strictly positive".into());
        }
        if !(self.gpu_copy_bandwidth_bytes_per_s > 0.0) {
            return Err("gpu_copy_bandwidth_bytes_per_s must be strictly positive".into());
        }
        if self.context_create_s < 0.0
            || self.per_copy_overhead_s < 0.0
            || self.code_load_s_per_kernel < 0.0
        {
            return Err("times must be nonnegative".into());
        }
        if self.gpu_count == 0 {
            return Err("gpu_count must be positive".into());
        }
        if self.context_footprint_bytes > self.gpu_memory_bytes {
            return Err("context_footprint_bytes exceeds gpu_memory_bytes".into());
        }
        Ok(())
    }
}

impl Default for HardwareProfile {
    /// PCIe 4.0 server profile: 32 GB/s PCIe, 48 GB GPU.
    fn default() -> Self {
        HardwareProfile {
            pcie_bandwidth_bytes_per_s: 32e9,
            storage_bandwidth_bytes_per_s: 8e9,
            gpu_memory_bytes: 48_000_000_000,
            host_pool_bytes: 512_000_000_000,
            context_footprint_bytes: default_context_footprint(),
            context_create_s: default_context_create(),
            per_copy_overhead_s: 0.0,
            code_segment_bytes_per_kernel: 0,
            code_load_s_per_kernel: 0.0,
            gpu_count: 1,
            gpu_copy_bandwidth_bytes_per_s: default_gpu_copy_bandwidth(),
        }
    }
}

/// One initialization operation on host tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitOp {
    /// Materialize a host tensor from a named checkpoint.
    LoadCheckpoint {
        checkpoint_id: String,
        tensor_name: String,
        size_bytes: u64,
    },
    /// Shape/compose operation on host tensors.
    Transform {
        op_kind: String,
        input_names: Vec<String>,
        output_name: String,
        output_size_bytes: u64,
    },
    /// Mark a tensor for GPU residence.
    ToGpu { tensor_name: String },
    /// Bind two names to one underlying tensor (shared embedding/output).
    AliasShare {
        source_name: String,
        alias_name: String,
    },
}

/// One inference kernel launch with its read/write sets and an affine
/// duration model: `base + per_token * batch * input_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelCall {
    pub kernel_id: String,
    pub reads: Vec<String>,
    #[serde(default)]
    pub writes: Vec<String>,
    #[serde(default)]
    pub duration_base_s: f64,
    #[serde(default)]
    pub duration_per_token_s: f64,
}

impl KernelCall {
    pub fn duration(&self, workload: &Workload) -> f64 {
        self.duration_base_s
            + self.duration_per_token_s * (workload.batch as f64) * (workload.input_len as f64)
    }
}

/// Interpretable description of one LLM function: an initialization op
/// stream plus an inference kernel stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionProgram {
    pub function_id: String,
    /// Developer annotation: `Some(true)` static, `Some(false)` dynamic,
    /// `None` unannotated (treated as dynamic).
    #[serde(default)]
    pub declared_static: Option<bool>,
    /// Untraceable pure-CPU initialization time, executed as-is.
    #[serde(default)]
    pub cpu_init_s: f64,
    pub init_ops: Vec<InitOp>,
    pub inference_ops: Vec<KernelCall>,
}

impl FunctionProgram {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serialization")
    }
}

/// Per-request parameters of one invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub input_len: u64,
    pub batch: u64,
    #[serde(default)]
    pub adapter_id: Option<String>,
}

impl Workload {
    pub fn new(input_len: u64, batch: u64) -> Self {
        Workload {
            input_len,
            batch,
            adapter_id: None,
        }
    }

    pub fn with_adapter(input_len: u64, batch: u64, adapter_id: &str) -> Self {
        Workload {
            input_len,
            batch,
            adapter_id: Some(adapter_id.to_string()),
        }
    }
}

/// Per-stage latency decomposition of one invocation. Stage fields hold
/// only *exposed* (non-overlapped) time, so they sum to `ttft_s`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TTFTBreakdown {
    pub context_s: f64,
    pub code_load_s: f64,
    pub dynamic_init_s: f64,
    pub exposed_load_s: f64,
    pub compute_s: f64,
    pub ttft_s: f64,
}

/// One rule violation found by `validate_program`. Violations are data,
/// not failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// A tensor name defined more than once by init ops.
    DuplicateDefinition { op_index: usize, name: String },
    /// An init op consumes a name not yet defined.
    UndefinedInput { op_index: usize, name: String },
    /// A kernel reads a name neither produced by init ops nor written
    /// by a preceding kernel.
    UndefinedRead { op_index: usize, name: String },
    /// LoadCheckpoint/Transform output with size_bytes == 0.
    ZeroSize { op_index: usize, name: String },
    /// Kernel with an empty read set.
    EmptyReads { op_index: usize },
    /// Negative duration coefficient.
    NegativeDuration { op_index: usize },
    /// inference_ops is empty.
    NoInferenceOps,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DuplicateDefinition { op_index, name } => {
                write!(f, "duplicate-definition of '{name}' at init op {op_index}")
            }
            Violation::UndefinedInput { op_index, name } => {
                write!(f, "undefined-input '{name}' at init op {op_index}")
            }
            Violation::UndefinedRead { op_index, name } => {
                write!(f, "undefined-read '{name}' at inference op {op_index}")
            }
            Violation::ZeroSize { op_index, name } => {
                write!(f, "zero-size output '{name}' at init op {op_index}")
            }
            Violation::EmptyReads { op_index } => {
                write!(f, "empty-reads at inference op {op_index}")
            }
            Violation::NegativeDuration { op_index } => {
                write!(f, "negative-duration at inference op {op_index}")
            }
            Violation::NoInferenceOps => write!(f, "inference_ops is empty"),
        }
    }
}

/// Checks every structural invariant of a `FunctionProgram`. Returns an
/// empty list iff the program is well formed.
pub fn validate_program(program: &FunctionProgram) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut defined: BTreeSet<&str> = BTreeSet::new();

    for (i, op) in program.init_ops.iter().enumerate() {
        match op {
            InitOp::LoadCheckpoint {
                tensor_name,
                size_bytes,
                ..
            } => {
                if *size_bytes == 0 {
                    violations.push(Violation::ZeroSize {
                        op_index: i,
                        name: tensor_name.clone(),
                    });
                }
                if !defined.insert(tensor_name) {
                    violations.push(Violation::DuplicateDefinition {
                        op_index: i,
                        name: tensor_name.clone(),
                    });
                }
            }
            InitOp::Transform {
                input_names,
                output_name,
                output_size_bytes,
                ..
            } => {
                for input in input_names {
                    if !defined.contains(input.as_str()) {
                        violations.push(Violation::UndefinedInput {
                            op_index: i,
                            name: input.clone(),
                        });
                    }
                }
                if *output_size_bytes == 0 {
                    violations.push(Violation::ZeroSize {
                        op_index: i,
                        name: output_name.clone(),
                    });
                }
                if !defined.insert(output_name) {
                    violations.push(Violation::DuplicateDefinition {
                        op_index: i,
                        name: output_name.clone(),
                    });
                }
            }
            InitOp::ToGpu { tensor_name } => {
                if !defined.contains(tensor_name.as_str()) {
                    violations.push(Violation::UndefinedInput {
                        op_index: i,
                        name: tensor_name.clone(),
                    });
                }
            }
            InitOp::AliasShare {
                source_name,
                alias_name,
            } => {
                if !defined.contains(source_name.as_str()) {
                    violations.push(Violation::UndefinedInput {
                        op_index: i,
                        name: source_name.clone(),
                    });
                }
                if !defined.insert(alias_name) {
                    violations.push(Violation::DuplicateDefinition {
                        op_index: i,
                        name: alias_name.clone(),
                    });
                }
            }
        }
    }

    if program.inference_ops.is_empty() {
        violations.push(Violation::NoInferenceOps);
    }

    let mut produced: BTreeSet<&str> = defined;
    for (i, kernel) in program.inference_ops.iter().enumerate() {
        if kernel.reads.is_empty() {
            violations.push(Violation::EmptyReads { op_index: i });
        }
        if kernel.duration_base_s < 0.0 || kernel.duration_per_token_s < 0.0 {
            violations.push(Violation::NegativeDuration { op_index: i });
        }
        for read in &kernel.reads {
            if !produced.contains(read.as_str()) {
                violations.push(Violation::UndefinedRead {
                    op_index: i,
                    name: read.clone(),
                });
            }
        }
        for write in &kernel.writes {
            produced.insert(write);
        }
    }

    violations
}

/// Resolves alias chains to a canonical root name per underlying tensor.
/// Only valid on a validated program.
pub fn alias_roots(program: &FunctionProgram) -> BTreeMap<String, String> {
    let mut root: BTreeMap<String, String> = BTreeMap::new();
    for op in &program.init_ops {
        match op {
            InitOp::LoadCheckpoint { tensor_name, .. } => {
                root.insert(tensor_name.clone(), tensor_name.clone());
            }
            InitOp::Transform { output_name, .. } => {
                root.insert(output_name.clone(), output_name.clone());
            }
            InitOp::AliasShare {
                source_name,
                alias_name,
            } => {
                let r = root
                    .get(source_name)
                    .cloned()
                    .unwrap_or_else(|| source_name.clone());
                root.insert(alias_name.clone(), r);
            }
            InitOp::ToGpu { .. } => {}
        }
    }
    root
}

/// Total bytes of distinct underlying weight tensors marked `ToGpu`.
/// Aliased names count once.
pub fn model_bytes(program: &FunctionProgram) -> Result<u64, Vec<Violation>> {
    let violations = validate_program(program);
    if !violations.is_empty() {
        return Err(violations);
    }
    let roots = alias_roots(program);
    let mut sizes: BTreeMap<&str, u64> = BTreeMap::new();
    for op in &program.init_ops {
        match op {
            InitOp::LoadCheckpoint {
                tensor_name,
                size_bytes,
                ..
            } => {
                sizes.insert(tensor_name, *size_bytes);
            }
            InitOp::Transform {
                output_name,
                output_size_bytes,
                ..
            } => {
                sizes.insert(output_name, *output_size_bytes);
            }
            _ => {}
        }
    }
    let mut counted: BTreeSet<&str> = BTreeSet::new();
    let mut total = 0u64;
    for op in &program.init_ops {
        if let InitOp::ToGpu { tensor_name } = op {
            let root = roots
                .get(tensor_name)
                .map(String::as_str)
                .unwrap_or(tensor_name);
            if counted.insert(root) {
                total += sizes.get(root).copied().unwrap_or(0);
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn two_weight_program() -> FunctionProgram {
        FunctionProgram {
            function_id: "f".into(),
            declared_static: Some(true),
            cpu_init_s: 0.0,
            init_ops: vec![
                InitOp::LoadCheckpoint {
                    checkpoint_id: "ckpt".into(),
                    tensor_name: "w1".into(),
                    size_bytes: 1 << 30,
                },
                InitOp::LoadCheckpoint {
                    checkpoint_id: "ckpt".into(),
                    tensor_name: "w2".into(),
                    size_bytes: 1 << 30,
                },
                InitOp::ToGpu {
                    tensor_name: "w1".into(),
                },
                InitOp::ToGpu {
                    tensor_name: "w2".into(),
                },
            ],
            inference_ops: vec![
                KernelCall {
                    kernel_id: "k1".into(),
                    reads: vec!["w1".into()],
                    writes: vec!["act0".into()],
                    duration_base_s: 0.01,
                    duration_per_token_s: 0.0,
                },
                KernelCall {
                    kernel_id: "k2".into(),
                    reads: vec!["w2".into(), "act0".into()],
                    writes: vec![],
                    duration_base_s: 0.01,
                    duration_per_token_s: 0.0,
                },
            ],
        }
    }

    #[test]
    fn well_formed_program_has_no_violations() {
        assert_eq!(validate_program(&two_weight_program()), vec![]);
    }

    #[test]
    fn undefined_read_is_reported_with_op_index() {
        let mut p = two_weight_program();
        p.inference_ops[0].reads = vec!["w9".into()];
        let v = validate_program(&p);
        assert_eq!(
            v,
            vec![Violation::UndefinedRead {
                op_index: 0,
                name: "w9".into()
            }]
        );
    }

    #[test]
    fn duplicate_definition_is_reported() {
        let mut p = two_weight_program();
        p.init_ops.push(InitOp::LoadCheckpoint {
            checkpoint_id: "ckpt".into(),
            tensor_name: "w1".into(),
            size_bytes: 8,
        });
        let v = validate_program(&p);
        assert!(v
            .iter()
            .any(|v| matches!(v, Violation::DuplicateDefinition { name, .. } if name == "w1")));
    }

    #[test]
    fn model_bytes_counts_distinct_weights() {
        assert_eq!(model_bytes(&two_weight_program()).unwrap(), 2 << 30);
    }

    #[test]
    fn model_bytes_counts_alias_once() {
        let mut p = two_weight_program();
        p.init_ops.push(InitOp::AliasShare {
            source_name: "w1".into(),
            alias_name: "w1_out".into(),
        });
        p.init_ops.push(InitOp::ToGpu {
            tensor_name: "w1_out".into(),
        });
        assert_eq!(model_bytes(&p).unwrap(), 2 << 30);
    }

    #[test]
    fn llama2_13b_shaped_model_bytes() {
        let p = presets::llama2_13b_like();
        assert_eq!(model_bytes(&p).unwrap(), 24_300_000_000);
    }

    #[test]
    fn model_bytes_invariant_under_def_before_use_reorder() {
        let p = two_weight_program();
        let mut q = p.clone();
        // Swap the two loads and the two ToGpu marks; def-before-use preserved.
        q.init_ops.swap(0, 1);
        q.init_ops.swap(2, 3);
        assert!(validate_program(&q).is_empty());
        assert_eq!(model_bytes(&p).unwrap(), model_bytes(&q).unwrap());
    }

    #[test]
    fn program_document_rejects_unknown_keys() {
        let text = r#"{
            "function_id": "f",
            "init_ops": [],
            "inference_ops": [],
            "bogus": 1
        }"#;
        assert!(FunctionProgram::from_json(text).is_err());
    }

    #[test]
    fn program_document_round_trips() {
        let p = two_weight_program();
        let q = FunctionProgram::from_json(&p.to_json()).unwrap();
        assert_eq!(p.to_json(), q.to_json());
    }
}
