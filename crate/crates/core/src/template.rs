//! Adaptive function templates: deduplicated kernel set, access-ordered
//! weight layout, prefetch sizing, merged transfer groups, and incremental
//! exclusion of dynamic components.
//!
//! Templates are immutable snapshots; `update_template` returns a new
//! version, so readers may keep older snapshots safely.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tracer::{
    classify_weights, Classification, ClassifyError, InferenceTraceRecord, WeightDFG,
};

/// Default cap on the number of host-to-GPU copy commands per invocation.
pub const DEFAULT_MAX_TRANSFERS: usize = 300;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("at least one trace is required")]
    NoTraces,
    #[error("trace/classification coverage mismatch: {0}")]
    Coverage(String),
    #[error("structural mismatch: {0}")]
    Structural(#[from] ClassifyError),
}

/// How the resident prefix of the layout is sized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetchSpec {
    /// max(model_bytes - warm_ttft * pcie_bandwidth, 0), snapped up to a
    /// whole-weight boundary.
    Eq1,
    /// Fixed byte budget, snapped up to a whole-weight boundary.
    Bytes(u64),
    /// The entire static layout stays resident.
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionTemplate {
    pub function_id: String,
    pub kernel_set: BTreeSet<String>,
    /// (weight, bytes) in traced access order, dynamic weights excluded,
    /// never-read weights at the tail.
    pub layout: Vec<(String, u64)>,
    /// Bytes of the layout prefix resident on GPU.
    pub prefetch_bytes: u64,
    /// Contiguous runs of the non-resident layout suffix, each transferred
    /// as one copy command.
    pub transfer_groups: Vec<Vec<String>>,
    pub weight_dfgs: BTreeMap<String, WeightDFG>,
    pub classification: Classification,
    pub warm_ttft_s: f64,
    // Regeneration policy, kept so updates can recompute the layout.
    pub prefetch_spec: PrefetchSpec,
    pub max_transfers: usize,
    pub model_bytes_total: u64,
    pub pcie_bandwidth_bytes_per_s: f64,
}

impl FunctionTemplate {
    /// Number of layout entries covered by `prefetch_bytes` (whole weights).
    pub fn resident_count(&self) -> usize {
        let mut acc = 0u64;
        let mut n = 0;
        for (_, bytes) in &self.layout {
            if acc + bytes <= self.prefetch_bytes {
                acc += bytes;
                n += 1;
            } else {
                break;
            }
        }
        n
    }

    pub fn resident_weights(&self) -> BTreeSet<&str> {
        self.layout[..self.resident_count()]
            .iter()
            .map(|(w, _)| w.as_str())
            .collect()
    }

    /// Non-resident layout suffix.
    pub fn suffix(&self) -> &[(String, u64)] {
        &self.layout[self.resident_count()..]
    }

    pub fn layout_bytes(&self) -> u64 {
        self.layout.iter().map(|(_, b)| b).sum()
    }

    /// Transfer-group index containing `weight`, if it is in the suffix.
    pub fn group_of(&self, weight: &str) -> Option<usize> {
        self.transfer_groups
            .iter()
            .position(|g| g.iter().any(|w| w == weight))
    }

    pub fn size_of(&self, weight: &str) -> Option<u64> {
        self.weight_dfgs.get(weight).map(|d| d.size_bytes)
    }

    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(&TemplateDoc::from(self)).expect("template serialization")
    }

    pub fn from_document(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str::<TemplateDoc>(text).map(FunctionTemplate::from)
    }
}

#[derive(Serialize, Deserialize)]
struct LayoutEntry {
    ordinal: usize,
    weight: String,
    size_bytes: u64,
}

/// On-disk mirror of `FunctionTemplate`; layout entries carry explicit
/// ordinals.
#[derive(Serialize, Deserialize)]
struct TemplateDoc {
    function_id: String,
    warm_ttft_s: f64,
    prefetch_bytes: u64,
    prefetch_spec: PrefetchSpec,
    max_transfers: usize,
    model_bytes_total: u64,
    pcie_bandwidth_bytes_per_s: f64,
    kernel_set: Vec<String>,
    layout: Vec<LayoutEntry>,
    transfer_groups: Vec<Vec<String>>,
    weight_dfgs: BTreeMap<String, WeightDFG>,
    classification: Classification,
}

impl From<&FunctionTemplate> for TemplateDoc {
    fn from(t: &FunctionTemplate) -> Self {
        TemplateDoc {
            function_id: t.function_id.clone(),
            warm_ttft_s: t.warm_ttft_s,
            prefetch_bytes: t.prefetch_bytes,
            prefetch_spec: t.prefetch_spec,
            max_transfers: t.max_transfers,
            model_bytes_total: t.model_bytes_total,
            pcie_bandwidth_bytes_per_s: t.pcie_bandwidth_bytes_per_s,
            kernel_set: t.kernel_set.iter().cloned().collect(),
            layout: t
                .layout
                .iter()
                .enumerate()
                .map(|(ordinal, (weight, size_bytes))| LayoutEntry {
                    ordinal,
                    weight: weight.clone(),
                    size_bytes: *size_bytes,
                })
                .collect(),
            transfer_groups: t.transfer_groups.clone(),
            weight_dfgs: t.weight_dfgs.clone(),
            classification: t.classification.clone(),
        }
    }
}

impl From<TemplateDoc> for FunctionTemplate {
    fn from(d: TemplateDoc) -> Self {
        let mut layout = d.layout;
        layout.sort_by_key(|e| e.ordinal);
        FunctionTemplate {
            function_id: d.function_id,
            kernel_set: d.kernel_set.into_iter().collect(),
            layout: layout
                .into_iter()
                .map(|e| (e.weight, e.size_bytes))
                .collect(),
            prefetch_bytes: d.prefetch_bytes,
            transfer_groups: d.transfer_groups,
            weight_dfgs: d.weight_dfgs,
            classification: d.classification,
            warm_ttft_s: d.warm_ttft_s,
            prefetch_spec: d.prefetch_spec,
            max_transfers: d.max_transfers,
            model_bytes_total: d.model_bytes_total,
            pcie_bandwidth_bytes_per_s: d.pcie_bandwidth_bytes_per_s,
        }
    }
}

/// Distinct kernel ids of one trace. Idempotent and order-insensitive.
pub fn dedup_kernels(trace: &InferenceTraceRecord) -> BTreeSet<String> {
    trace
        .kernel_sequence
        .iter()
        .map(|k| k.kernel_id.clone())
        .collect()
}

/// Static weights in first-access order, never-read weights at the tail,
/// aliases once, dynamic weights excluded.
pub fn build_layout(
    trace: &InferenceTraceRecord,
    dfgs: &BTreeMap<String, WeightDFG>,
    classification: &Classification,
) -> Result<Vec<(String, u64)>, TemplateError> {
    let mut layout = Vec::new();
    for name in trace.access_order.iter().chain(trace.never_read.iter()) {
        let dfg = dfgs
            .get(name)
            .ok_or_else(|| TemplateError::Coverage(format!("weight '{name}' missing from DFGs")))?;
        if !classification.flags.contains_key(name) {
            return Err(TemplateError::Coverage(format!(
                "weight '{name}' missing from classification"
            )));
        }
        if !classification.is_dynamic(name) {
            layout.push((name.clone(), dfg.size_bytes));
        }
    }
    Ok(layout)
}

/// `max(model_bytes - warm_ttft_s * pcie_bandwidth, 0)`: the largest
/// resident prefix still needed for loading to hide behind compute.
pub fn compute_prefetch_bytes(model_bytes: f64, warm_ttft_s: f64, pcie_bandwidth: f64) -> f64 {
    (model_bytes - warm_ttft_s * pcie_bandwidth).max(0.0)
}

/// Rounds a byte target up to the next whole-weight boundary of `layout`
/// (no partial-tensor residency), capped at the layout total.
pub fn snap_prefetch(layout: &[(String, u64)], target_bytes: f64) -> u64 {
    if target_bytes <= 0.0 {
        return 0;
    }
    let mut acc = 0u64;
    for (_, bytes) in layout {
        acc += bytes;
        if acc as f64 >= target_bytes {
            return acc;
        }
    }
    acc
}

/// Partitions the layout suffix into at most `max_transfers` contiguous,
/// byte-balanced runs. Below the threshold every weight stays a singleton.
pub fn merge_transfer_groups(
    suffix: &[(String, u64)],
    max_transfers: usize,
) -> Vec<Vec<String>> {
    assert!(max_transfers >= 1);
    if suffix.len() <= max_transfers {
        return suffix.iter().map(|(w, _)| vec![w.clone()]).collect();
    }
    let total: u64 = suffix.iter().map(|(_, b)| b).sum();
    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut acc = 0u64;
    let mut closed = 0usize;
    for (i, (w, bytes)) in suffix.iter().enumerate() {
        current.push(w.clone());
        acc += bytes;
        let remaining_weights = suffix.len() - i - 1;
        let remaining_groups = max_transfers - closed - 1;
        // Close at the ideal byte boundary, or when the tail would not
        // fill the remaining groups.
        let boundary = (closed as u64 + 1) * total / max_transfers as u64;
        if (acc >= boundary || remaining_weights == remaining_groups) && remaining_groups > 0 {
            groups.push(std::mem::take(&mut current));
            closed += 1;
        }
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups
}

fn total_model_bytes(dfgs: &BTreeMap<String, WeightDFG>) -> u64 {
    let mut seen = BTreeSet::new();
    let mut total = 0;
    for dfg in dfgs.values() {
        if seen.insert(dfg.alias_group.as_str()) {
            total += dfg.size_bytes;
        }
    }
    total
}

fn layout_prefetch_and_groups(
    layout: Vec<(String, u64)>,
    prefetch_spec: PrefetchSpec,
    model_bytes_total: u64,
    warm_ttft_s: f64,
    pcie_bandwidth: f64,
    max_transfers: usize,
) -> (Vec<(String, u64)>, u64, Vec<Vec<String>>) {
    let prefetch_bytes = match prefetch_spec {
        PrefetchSpec::Eq1 => snap_prefetch(
            &layout,
            compute_prefetch_bytes(model_bytes_total as f64, warm_ttft_s, pcie_bandwidth),
        ),
        PrefetchSpec::Bytes(n) => snap_prefetch(&layout, n as f64),
        PrefetchSpec::Full => layout.iter().map(|(_, b)| b).sum(),
    };
    let mut acc = 0u64;
    let mut resident = 0usize;
    for (_, bytes) in &layout {
        if acc + bytes <= prefetch_bytes {
            acc += bytes;
            resident += 1;
        } else {
            break;
        }
    }
    let groups = merge_transfer_groups(&layout[resident..], max_transfers);
    (layout, prefetch_bytes, groups)
}

/// Builds the template for one function from one or more traced
/// invocations. The first trace fixes the access order; later traces
/// contribute dynamic-component exclusion.
pub fn generate_template(
    function_id: &str,
    traces: &[(BTreeMap<String, WeightDFG>, InferenceTraceRecord)],
    warm_ttft_s: f64,
    pcie_bandwidth: f64,
    max_transfers: usize,
    prefetch_spec: PrefetchSpec,
) -> Result<FunctionTemplate, TemplateError> {
    let (first_init, first_trace) = traces.first().ok_or(TemplateError::NoTraces)?;

    let mut kernel_set = BTreeSet::new();
    for (_, trace) in traces {
        kernel_set.extend(dedup_kernels(trace));
    }

    let mut classification = Classification::all_static(first_init.keys().cloned());
    for (init, _) in &traces[1..] {
        classification.merge(&classify_weights(first_init, init)?);
    }

    let layout = build_layout(first_trace, first_init, &classification)?;
    let model_bytes_total = total_model_bytes(first_init);
    let (layout, prefetch_bytes, transfer_groups) = layout_prefetch_and_groups(
        layout,
        prefetch_spec,
        model_bytes_total,
        warm_ttft_s,
        pcie_bandwidth,
        max_transfers,
    );

    Ok(FunctionTemplate {
        function_id: function_id.to_string(),
        kernel_set,
        layout,
        prefetch_bytes,
        transfer_groups,
        weight_dfgs: first_init.clone(),
        classification,
        warm_ttft_s,
        prefetch_spec,
        max_transfers,
        model_bytes_total,
        pcie_bandwidth_bytes_per_s: pcie_bandwidth,
    })
}

/// Folds a newly observed initialization into the template: mismatched
/// weights move to dynamic (never back), layout and prefetch are
/// recomputed. Errors on a structural (weight-set) change.
pub fn update_template(
    template: &FunctionTemplate,
    new_init: &BTreeMap<String, WeightDFG>,
) -> Result<FunctionTemplate, TemplateError> {
    let observed = classify_weights(&template.weight_dfgs, new_init)?;
    let mut classification = template.classification.clone();
    classification.merge(&observed);

    let layout: Vec<(String, u64)> = template
        .layout
        .iter()
        .filter(|(w, _)| !classification.is_dynamic(w))
        .cloned()
        .collect();
    let (layout, prefetch_bytes, transfer_groups) = layout_prefetch_and_groups(
        layout,
        template.prefetch_spec,
        template.model_bytes_total,
        template.warm_ttft_s,
        template.pcie_bandwidth_bytes_per_s,
        template.max_transfers,
    );

    Ok(FunctionTemplate {
        layout,
        prefetch_bytes,
        transfer_groups,
        classification,
        ..template.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Workload;
    use crate::presets;
    use crate::tracer::{trace_inference, trace_init, WeightFlag};

    fn traced(
        program: &crate::model::FunctionProgram,
        workload: &Workload,
    ) -> (BTreeMap<String, WeightDFG>, InferenceTraceRecord) {
        (
            trace_init(program, workload).unwrap(),
            trace_inference(program, workload).unwrap(),
        )
    }

    #[test]
    fn dedup_collapses_repeated_blocks() {
        let p = presets::llama2_13b_like();
        let t = trace_inference(&p, &Workload::new(128, 1)).unwrap();
        // 6 block kernels + embed + head
        assert_eq!(dedup_kernels(&t).len(), 8);
        assert!(dedup_kernels(&t).len() <= t.kernel_sequence.len());
    }

    #[test]
    fn dedup_is_idempotent_and_order_insensitive() {
        let p = presets::llama2_13b_like();
        let mut t = trace_inference(&p, &Workload::new(128, 1)).unwrap();
        let a = dedup_kernels(&t);
        t.kernel_sequence.reverse();
        assert_eq!(a, dedup_kernels(&t));
    }

    #[test]
    fn prefetch_eq1_example() {
        let v = compute_prefetch_bytes(24.3e9, 0.3, 32e9);
        assert_eq!(v, 24.3e9 - 9.6e9);
    }

    #[test]
    fn prefetch_clamps_at_zero() {
        assert_eq!(compute_prefetch_bytes(1e9, 1.0, 32e9), 0.0);
        assert_eq!(compute_prefetch_bytes(0.0, 0.0, 32e9), 0.0);
    }

    #[test]
    fn merge_keeps_singletons_below_threshold() {
        let suffix: Vec<(String, u64)> =
            (0..5).map(|i| (format!("w{i}"), 1 << 30)).collect();
        let groups = merge_transfer_groups(&suffix, 300);
        assert_eq!(groups.len(), 5);
        assert!(groups.iter().all(|g| g.len() == 1));
    }

    #[test]
    fn merge_1200_into_300() {
        let suffix: Vec<(String, u64)> =
            (0..1200).map(|i| (format!("w{i}"), 10_000_000)).collect();
        let groups = merge_transfer_groups(&suffix, 300);
        assert_eq!(groups.len(), 300);
        // Order-preserving partition.
        let flat: Vec<String> = groups.concat();
        let expect: Vec<String> = suffix.iter().map(|(w, _)| w.clone()).collect();
        assert_eq!(flat, expect);
    }

    #[test]
    fn merge_balances_equal_weights() {
        let suffix: Vec<(String, u64)> =
            (0..8).map(|i| (format!("w{i}"), 1 << 30)).collect();
        let groups = merge_transfer_groups(&suffix, 4);
        assert_eq!(groups.len(), 4);
        assert!(groups.iter().all(|g| g.len() == 2));
    }

    #[test]
    fn single_trace_static_template() {
        let p = presets::llama2_13b_like();
        let w = Workload::new(2048, 1);
        let t = generate_template(
            "llama2-13b",
            &[traced(&p, &w)],
            0.3,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Bytes(0),
        )
        .unwrap();
        assert!(t
            .classification
            .flags
            .values()
            .all(|f| *f == WeightFlag::Static));
        assert_eq!(t.prefetch_bytes, 0);
        assert_eq!(t.layout[0].0, "w_embed");
        assert_eq!(t.layout_bytes(), 24_300_000_000);
    }

    #[test]
    fn adapters_excluded_from_layout() {
        let p = presets::llama2_13b_lora_like();
        let t = generate_template(
            "f",
            &[
                traced(&p, &Workload::with_adapter(2048, 1, "lora-A")),
                traced(&p, &Workload::with_adapter(2048, 1, "lora-B")),
            ],
            0.3,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Eq1,
        )
        .unwrap();
        assert!(t.layout.iter().all(|(w, _)| !w.starts_with("lora_")));
        assert!(t.classification.is_dynamic("lora_0"));
        // Eq1 with the paper constants: 24.3G total, 0.3s x 32G/s hidden.
        let eq1 = compute_prefetch_bytes(t.model_bytes_total as f64, 0.3, 32e9);
        assert!(t.prefetch_bytes as f64 >= eq1);
        assert!(t.prefetch_bytes <= t.layout_bytes());
    }

    #[test]
    fn layout_excludes_dynamic_preserves_order() {
        let p = presets::llama2_13b_lora_like();
        let w = Workload::with_adapter(128, 1, "lora-A");
        let (init, trace) = traced(&p, &w);
        let mut classification = Classification::all_static(init.keys().cloned());
        classification.merge(
            &classify_weights(&init, &trace_init(&p, &Workload::with_adapter(128, 1, "b")).unwrap())
                .unwrap(),
        );
        let layout = build_layout(&trace, &init, &classification).unwrap();
        // Static weights only, in first-access order.
        let statics_in_access: Vec<&String> = trace
            .access_order
            .iter()
            .filter(|w| !classification.is_dynamic(w))
            .collect();
        assert_eq!(
            layout.iter().map(|(w, _)| w).collect::<Vec<_>>(),
            statics_in_access
        );
    }

    #[test]
    fn groups_flatten_back_to_suffix() {
        let p = presets::llama2_13b_like();
        let w = Workload::new(2048, 1);
        let t = generate_template(
            "f",
            &[traced(&p, &w)],
            0.3,
            32e9,
            50,
            PrefetchSpec::Eq1,
        )
        .unwrap();
        let flat: Vec<String> = t.transfer_groups.concat();
        let suffix: Vec<String> = t.suffix().iter().map(|(w, _)| w.clone()).collect();
        assert_eq!(flat, suffix);
        assert!(t.transfer_groups.len() <= 50);
    }

    #[test]
    fn update_is_idempotent_without_mismatch() {
        let p = presets::llama2_13b_like();
        let w = Workload::new(2048, 1);
        let (init, trace) = traced(&p, &w);
        let t = generate_template(
            "f",
            &[(init.clone(), trace)],
            0.3,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Eq1,
        )
        .unwrap();
        let u = update_template(&t, &init).unwrap();
        assert_eq!(t.layout, u.layout);
        assert_eq!(t.prefetch_bytes, u.prefetch_bytes);
    }

    #[test]
    fn update_moves_mismatched_weight_to_dynamic() {
        let p = presets::llama2_13b_like();
        let w = Workload::new(2048, 1);
        let (init, trace) = traced(&p, &w);
        let t = generate_template(
            "f",
            &[(init.clone(), trace)],
            0.3,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Eq1,
        )
        .unwrap();
        let mut changed = init.clone();
        changed.get_mut("layer0_w0").unwrap().provenance[0].checkpoint_id =
            Some("new-ckpt".into());
        let u = update_template(&t, &changed).unwrap();
        assert!(u.classification.is_dynamic("layer0_w0"));
        assert!(u.layout.iter().all(|(w, _)| w != "layer0_w0"));
        // Monotone: updating back with the original does not revert.
        let v = update_template(&u, &init).unwrap();
        assert!(v.classification.is_dynamic("layer0_w0"));
    }

    #[test]
    fn alternating_adapters_converge_after_first_update() {
        let p = presets::llama2_13b_lora_like();
        let a = trace_init(&p, &Workload::with_adapter(128, 1, "lora-A")).unwrap();
        let b = trace_init(&p, &Workload::with_adapter(128, 1, "lora-B")).unwrap();
        let trace = trace_inference(&p, &Workload::with_adapter(128, 1, "lora-A")).unwrap();
        let t0 = generate_template(
            "f",
            &[(a.clone(), trace)],
            0.3,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Bytes(0),
        )
        .unwrap();
        let t1 = update_template(&t0, &b).unwrap();
        let t2 = update_template(&t1, &a).unwrap();
        let t3 = update_template(&t2, &b).unwrap();
        assert_eq!(t1.layout, t2.layout);
        assert_eq!(t2.layout, t3.layout);
    }

    #[test]
    fn structural_change_invalidates_update() {
        let p = presets::llama2_13b_like();
        let w = Workload::new(128, 1);
        let (init, trace) = traced(&p, &w);
        let t = generate_template(
            "f",
            &[(init.clone(), trace)],
            0.3,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Eq1,
        )
        .unwrap();
        let mut smaller = init.clone();
        smaller.remove("layer0_w0");
        assert!(matches!(
            update_template(&t, &smaller),
            Err(TemplateError::Structural(_))
        ));
    }

    #[test]
    fn template_document_round_trips() {
        let p = presets::llama3_8b_like();
        let w = Workload::new(2048, 1);
        let t = generate_template(
            "llama3-8b",
            &[traced(&p, &w)],
            0.2,
            32e9,
            DEFAULT_MAX_TRANSFERS,
            PrefetchSpec::Eq1,
        )
        .unwrap();
        let doc = t.to_document();
        let u = FunctionTemplate::from_document(&doc).unwrap();
        assert_eq!(t.layout, u.layout);
        assert_eq!(t.prefetch_bytes, u.prefetch_bytes);
        assert_eq!(t.kernel_set, u.kernel_set);
        assert_eq!(doc, u.to_document());
    }
}
