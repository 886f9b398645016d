//! Percentiles, CDFs, results files, and per-variant summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::TTFTBreakdown;

/// One per-request outcome from a cluster replay (rejections included).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub function_id: String,
    pub arrival_s: f64,
    pub decision: Decision,
    pub breakdown: TTFTBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    WarmReuse,
    DynamicFork,
    TemplateFork,
    ColdStart,
    Reject,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::WarmReuse => "warm-reuse",
            Decision::DynamicFork => "dynamic-fork",
            Decision::TemplateFork => "template-fork",
            Decision::ColdStart => "cold-start",
            Decision::Reject => "reject",
        }
    }
}

/// Nearest-rank percentile on unsorted samples: the ⌈p/100·n⌉-th smallest.
/// p95 of {1..100} is exactly 95.
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Empirical CDF points (value, cumulative fraction); nondecreasing in
/// both coordinates and ending at 1.0.
pub fn cdf(samples: &[f64]) -> Vec<(f64, f64)> {
    if samples.is_empty() {
        return Vec::new();
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let mut points = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        if i + 1 < n && sorted[i + 1] == *v {
            continue; // emit one point per distinct value, at its last rank
        }
        points.push((*v, (i + 1) as f64 / n as f64));
    }
    points
}

pub const RESULTS_HEADER: &str = "request_id,function_id,arrival_s,decision,ttft_s,\
context_s,code_load_s,dynamic_init_s,exposed_load_s,compute_s";

/// Renders the per-request results file. Rejected requests carry empty
/// stage columns.
pub fn render_results(records: &[RequestRecord]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in records {
        if r.decision == Decision::Reject {
            writeln!(
                out,
                "{},{},{:.6},{},,,,,,",
                r.request_id,
                r.function_id,
                r.arrival_s,
                r.decision.as_str()
            )
            .unwrap();
        } else {
            let b = &r.breakdown;
            writeln!(
                out,
                "{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.request_id,
                r.function_id,
                r.arrival_s,
                r.decision.as_str(),
                b.ttft_s,
                b.context_s,
                b.code_load_s,
                b.dynamic_init_s,
                b.exposed_load_s,
                b.compute_s
            )
            .unwrap();
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub requests: usize,
    pub rejects: usize,
    pub p50_s: f64,
    pub p95_s: f64,
    pub p99_s: f64,
    pub mean_s: f64,
}

/// Summarizes one variant's served-request TTFTs (rejections counted, not
/// averaged).
pub fn summarize(variant: &str, records: &[RequestRecord]) -> VariantSummary {
    let ttfts: Vec<f64> = records
        .iter()
        .filter(|r| r.decision != Decision::Reject)
        .map(|r| r.breakdown.ttft_s)
        .collect();
    let rejects = records.len() - ttfts.len();
    let mean = if ttfts.is_empty() {
        0.0
    } else {
        ttfts.iter().sum::<f64>() / ttfts.len() as f64
    };
    VariantSummary {
        variant: variant.to_string(),
        requests: records.len(),
        rejects,
        p50_s: percentile(&ttfts, 50.0).unwrap_or(0.0),
        p95_s: percentile(&ttfts, 95.0).unwrap_or(0.0),
        p99_s: percentile(&ttfts, 99.0).unwrap_or(0.0),
        mean_s: mean,
    }
}

/// Multi-variant comparison table, with pairwise p95 improvement versus
/// the first variant.
pub fn render_summary(summaries: &[VariantSummary]) -> String {
    let mut out = String::from("variant\trequests\trejects\tp50_s\tp95_s\tp99_s\tmean_s\n");
    for s in summaries {
        writeln!(
            out,
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            s.variant, s.requests, s.rejects, s.p50_s, s.p95_s, s.p99_s, s.mean_s
        )
        .unwrap();
    }
    if summaries.len() > 1 {
        let base = &summaries[0];
        for s in &summaries[1..] {
            if base.p95_s > 0.0 {
                let improvement = 100.0 * (base.p95_s - s.p95_s) / base.p95_s;
                writeln!(
                    out,
                    "p95 improvement {} vs {}: {improvement:.1}%",
                    s.variant, base.variant
                )
                .unwrap();
            }
        }
    }
    out
}

pub fn render_cdf(points: &[(f64, f64)]) -> String {
    let mut out = String::from("ttft_s\tcdf\n");
    for (v, f) in points {
        writeln!(out, "{v:.6}\t{f:.6}").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p95_of_1_to_100_is_95() {
        let samples: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&samples, 95.0), Some(95.0));
        assert_eq!(percentile(&samples, 50.0), Some(50.0));
        assert_eq!(percentile(&samples, 100.0), Some(100.0));
        assert_eq!(percentile(&samples, 1.0), Some(1.0));
    }

    #[test]
    fn percentile_of_empty_is_none() {
        assert_eq!(percentile(&[], 95.0), None);
    }

    #[test]
    fn percentile_ignores_input_order() {
        let a = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(percentile(&a, 50.0), Some(3.0));
        assert_eq!(percentile(&a, 95.0), Some(5.0));
    }

    #[test]
    fn cdf_is_nondecreasing_and_ends_at_one() {
        let samples = [3.0, 1.0, 2.0, 2.0, 5.0];
        let points = cdf(&samples);
        assert_eq!(points.last().unwrap().1, 1.0);
        for pair in points.windows(2) {
            assert!(pair[0].0 < pair[1].0);
            assert!(pair[0].1 < pair[1].1);
        }
        // duplicate value 2.0 appears once, at cumulative 3/5
        assert!(points.contains(&(2.0, 0.6)));
    }

    #[test]
    fn results_file_has_expected_columns() {
        let records = vec![
            RequestRecord {
                request_id: 0,
                function_id: "f".to_string(),
                arrival_s: 0.5,
                decision: Decision::TemplateFork,
                breakdown: TTFTBreakdown {
                    context_s: 0.1,
                    code_load_s: 0.0,
                    dynamic_init_s: 0.0,
                    exposed_load_s: 0.2,
                    compute_s: 0.3,
                    ttft_s: 0.6,
                },
            },
            RequestRecord {
                request_id: 1,
                function_id: "f".to_string(),
                arrival_s: 0.9,
                decision: Decision::Reject,
                breakdown: TTFTBreakdown::default(),
            },
        ];
        let text = render_results(&records);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), RESULTS_HEADER);
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,f,0.500000,template-fork,0.600000,"));
        assert_eq!(first.split(',').count(), 10);
        let second = lines.next().unwrap();
        assert!(second.starts_with("1,f,0.900000,reject,"));
        assert_eq!(second.split(',').count(), 10);
    }

    #[test]
    fn summary_reports_p95_improvement() {
        let mk = |ttft: f64, id: u64| RequestRecord {
            request_id: id,
            function_id: "f".to_string(),
            arrival_s: 0.0,
            decision: Decision::ColdStart,
            breakdown: TTFTBreakdown {
                ttft_s: ttft,
                compute_s: ttft,
                ..Default::default()
            },
        };
        let slow: Vec<RequestRecord> = (0..100).map(|i| mk(2.0, i)).collect();
        let fast: Vec<RequestRecord> = (0..100).map(|i| mk(1.0, i)).collect();
        let text = render_summary(&[summarize("baseline", &slow), summarize("tidal", &fast)]);
        assert!(text.contains("p95 improvement tidal vs baseline: 50.0%"));
    }
}
