//! Built-in function programs shaped after common open LLMs. Sizes follow
//! the published checkpoint footprints; kernel durations are calibrated so
//! warm compute at input length 2048 matches profiled proportions.

use crate::model::{FunctionProgram, InitOp, KernelCall, ADAPTER_PLACEHOLDER};

pub struct LlmShape {
    pub function_id: String,
    pub layers: usize,
    pub weights_per_layer: usize,
    pub layer_weight_bytes: u64,
    pub embed_bytes: u64,
    /// Embedding weight shared with the output head, initialized last.
    pub shared_embed: bool,
    /// Per-layer adapter bytes loaded from the request checkpoint.
    pub adapter_bytes: Option<u64>,
    pub layer_kernel_per_token_s: f64,
    pub cpu_init_s: f64,
}

/// Builds a transformer-shaped program. Layer weights are initialized in
/// layer order; the shared embedding is initialized by the last layer
/// (the output head) but accessed by the very first kernel.
pub fn build_llm(shape: &LlmShape) -> FunctionProgram {
    let mut init_ops = Vec::new();
    let mut inference_ops = Vec::new();

    for layer in 0..shape.layers {
        if let Some(bytes) = shape.adapter_bytes {
            init_ops.push(InitOp::LoadCheckpoint {
                checkpoint_id: ADAPTER_PLACEHOLDER.to_string(),
                tensor_name: format!("lora_{layer}"),
                size_bytes: bytes,
            });
            init_ops.push(InitOp::ToGpu {
                tensor_name: format!("lora_{layer}"),
            });
        }
        for w in 0..shape.weights_per_layer {
            let name = format!("layer{layer}_w{w}");
            init_ops.push(InitOp::LoadCheckpoint {
                checkpoint_id: "base".to_string(),
                tensor_name: name.clone(),
                size_bytes: shape.layer_weight_bytes,
            });
            init_ops.push(InitOp::ToGpu { tensor_name: name });
        }
    }
    // Embedding comes last in initialization order.
    init_ops.push(InitOp::LoadCheckpoint {
        checkpoint_id: "base".to_string(),
        tensor_name: "w_embed".to_string(),
        size_bytes: shape.embed_bytes,
    });
    init_ops.push(InitOp::ToGpu {
        tensor_name: "w_embed".to_string(),
    });
    if shape.shared_embed {
        init_ops.push(InitOp::AliasShare {
            source_name: "w_embed".to_string(),
            alias_name: "w_out".to_string(),
        });
        init_ops.push(InitOp::ToGpu {
            tensor_name: "w_out".to_string(),
        });
    }

    inference_ops.push(KernelCall {
        kernel_id: "k_embed".to_string(),
        reads: vec!["w_embed".to_string()],
        writes: vec!["act".to_string()],
        duration_base_s: 0.001,
        duration_per_token_s: 0.0,
    });
    for layer in 0..shape.layers {
        for w in 0..shape.weights_per_layer {
            let mut reads = vec![format!("layer{layer}_w{w}"), "act".to_string()];
            if w == 0 && shape.adapter_bytes.is_some() {
                reads.push(format!("lora_{layer}"));
            }
            inference_ops.push(KernelCall {
                kernel_id: format!("k_block_{w}"),
                reads,
                writes: vec!["act".to_string()],
                duration_base_s: 0.0,
                duration_per_token_s: shape.layer_kernel_per_token_s,
            });
        }
    }
    inference_ops.push(KernelCall {
        kernel_id: "k_head".to_string(),
        reads: vec![
            if shape.shared_embed { "w_out" } else { "w_embed" }.to_string(),
            "act".to_string(),
        ],
        writes: vec!["logits".to_string()],
        duration_base_s: 0.001,
        duration_per_token_s: 0.0,
    });

    FunctionProgram {
        function_id: shape.function_id.clone(),
        declared_static: Some(shape.adapter_bytes.is_none()),
        cpu_init_s: shape.cpu_init_s,
        init_ops,
        inference_ops,
    }
}

/// 24.3 GB of weights across 40 blocks, shared embedding/output.
/// Warm compute at input length 2048 calibrates to ~235 ms.
pub fn llama2_13b_like() -> FunctionProgram {
    build_llm(&LlmShape {
        function_id: "llama2-13b".to_string(),
        layers: 40,
        weights_per_layer: 6,
        layer_weight_bytes: 100_000_000,
        embed_bytes: 300_000_000,
        shared_embed: true,
        adapter_bytes: None,
        layer_kernel_per_token_s: 4.7445e-7,
        cpu_init_s: 0.2,
    })
}

/// Llama2-13B-shaped with per-layer adapters (~0.99% of model bytes)
/// loaded from the request-specific checkpoint.
pub fn llama2_13b_lora_like() -> FunctionProgram {
    build_llm(&LlmShape {
        function_id: "llama2-13b-lora".to_string(),
        layers: 40,
        weights_per_layer: 6,
        layer_weight_bytes: 100_000_000,
        embed_bytes: 300_000_000,
        shared_embed: true,
        adapter_bytes: Some(6_000_000),
        layer_kernel_per_token_s: 4.7445e-7,
        cpu_init_s: 0.2,
    })
}

/// 15.7 GB of weights across 32 blocks, shared embedding/output.
pub fn llama3_8b_like() -> FunctionProgram {
    build_llm(&LlmShape {
        function_id: "llama3-8b".to_string(),
        layers: 32,
        weights_per_layer: 6,
        layer_weight_bytes: 80_000_000,
        embed_bytes: 340_000_000,
        shared_embed: true,
        adapter_bytes: None,
        layer_kernel_per_token_s: 3.815e-7,
        cpu_init_s: 0.15,
    })
}

pub fn llama3_8b_lora_like() -> FunctionProgram {
    build_llm(&LlmShape {
        function_id: "llama3-8b-lora".to_string(),
        layers: 32,
        weights_per_layer: 6,
        layer_weight_bytes: 80_000_000,
        embed_bytes: 340_000_000,
        shared_embed: true,
        adapter_bytes: Some(4_800_000),
        layer_kernel_per_token_s: 3.815e-7,
        cpu_init_s: 0.15,
    })
}

/// Single-pass chain: weight `i` is read exactly by kernel `i`. Useful as
/// a minimal overlap scenario with a closed-form finish recurrence.
pub fn uniform_chain(
    function_id: &str,
    n_weights: usize,
    weight_bytes: u64,
    kernel_s: f64,
) -> FunctionProgram {
    let mut init_ops = Vec::new();
    let mut inference_ops = Vec::new();
    for i in 0..n_weights {
        let name = format!("w{i}");
        init_ops.push(InitOp::LoadCheckpoint {
            checkpoint_id: "base".to_string(),
            tensor_name: name.clone(),
            size_bytes: weight_bytes,
        });
        init_ops.push(InitOp::ToGpu { tensor_name: name });
    }
    for i in 0..n_weights {
        inference_ops.push(KernelCall {
            kernel_id: format!("k{i}"),
            reads: vec![format!("w{i}")],
            writes: vec![],
            duration_base_s: kernel_s,
            duration_per_token_s: 0.0,
        });
    }
    FunctionProgram {
        function_id: function_id.to_string(),
        declared_static: Some(true),
        cpu_init_s: 0.0,
        init_ops,
        inference_ops,
    }
}

/// Resolves a `preset:<name>` reference used by configs and the CLI.
pub fn by_name(name: &str) -> Option<FunctionProgram> {
    match name {
        "llama2-13b" => Some(llama2_13b_like()),
        "llama2-13b-lora" => Some(llama2_13b_lora_like()),
        "llama3-8b" => Some(llama3_8b_like()),
        "llama3-8b-lora" => Some(llama3_8b_lora_like()),
        _ => None,
    }
}
