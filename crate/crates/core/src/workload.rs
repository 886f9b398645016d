//! Invocation streams: CSV trace ingestion, seeded synthesis of Poisson
//! arrivals combined with LLM task profiles, and scaling/acceleration.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Workload;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("cannot read trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("invocation rate must be > 0, got {0}")]
    NonPositiveRate(f64),
    #[error("scale factor must be > 0, got {0}")]
    NonPositiveFactor(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub request_id: u64,
    pub function_id: String,
    pub arrival_s: f64,
    pub workload: Workload,
}

impl InvocationRecord {
    pub fn is_dynamic_bearing(&self) -> bool {
        self.workload.adapter_id.is_some()
    }
}

/// Task classes with their mean prompt lengths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskProfile {
    pub name: String,
    pub mean_input_len: u64,
    /// 0 = every request at the mean; 1 = fully geometric spread.
    #[serde(default = "default_dispersion")]
    pub input_len_dispersion: f64,
    #[serde(default = "default_batch")]
    pub batch: u64,
}

fn default_dispersion() -> f64 {
    1.0
}
fn default_batch() -> u64 {
    1
}

impl TaskProfile {
    pub fn new(name: &str, mean_input_len: u64) -> Self {
        TaskProfile {
            name: name.to_string(),
            mean_input_len,
            input_len_dispersion: 1.0,
            batch: 1,
        }
    }

    pub fn mail() -> Self {
        TaskProfile::new("mail", 867)
    }
    pub fn conversation() -> Self {
        TaskProfile::new("conversation", 1154)
    }
    pub fn code() -> Self {
        TaskProfile::new("code", 2048)
    }
    pub fn longbench() -> Self {
        TaskProfile::new("longbench", 6101)
    }
}

/// One synthesized function stream: which program it invokes, its task
/// shape, its Poisson rate, and how many adapters it rotates through
/// (0 = static function).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionMixEntry {
    pub function_id: String,
    pub task: TaskProfile,
    pub rate_per_s: f64,
    #[serde(default)]
    pub adapter_pool: usize,
}

const TRACE_HEADER: &str = "request_id,function_id,arrival_s,input_len,batch,adapter_id";

/// Reads a trace CSV (header mandatory) and returns records sorted by
/// arrival, stable by request id. Malformed rows are reported with their
/// 1-based line number.
pub fn load_trace(path: &Path) -> Result<Vec<InvocationRecord>, WorkloadError> {
    let text = std::fs::read_to_string(path)?;
    parse_trace(&text)
}

pub fn parse_trace(text: &str) -> Result<Vec<InvocationRecord>, WorkloadError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    {
        let headers = reader.headers().map_err(|e| WorkloadError::Schema {
            line: 1,
            message: e.to_string(),
        })?;
        let got = headers.iter().collect::<Vec<_>>().join(",");
        if got != TRACE_HEADER {
            if got.is_empty() {
                return Ok(Vec::new());
            }
            return Err(WorkloadError::Schema {
                line: 1,
                message: format!("expected header '{TRACE_HEADER}', got '{got}'"),
            });
        }
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| WorkloadError::Schema {
            line,
            message: e.to_string(),
        })?;
        let field = |idx: usize, name: &str| -> Result<&str, WorkloadError> {
            row.get(idx).ok_or_else(|| WorkloadError::Schema {
                line,
                message: format!("missing column '{name}'"),
            })
        };
        let parse = |value: &str, name: &str| -> Result<f64, WorkloadError> {
            value.parse::<f64>().map_err(|_| WorkloadError::Schema {
                line,
                message: format!("column '{name}': cannot parse '{value}'"),
            })
        };
        let request_id = parse(field(0, "request_id")?, "request_id")? as u64;
        let function_id = field(1, "function_id")?.to_string();
        let arrival_s = parse(field(2, "arrival_s")?, "arrival_s")?;
        let input_len = parse(field(3, "input_len")?, "input_len")? as u64;
        let batch = parse(field(4, "batch")?, "batch")? as u64;
        let adapter = field(5, "adapter_id")?.trim();
        if arrival_s < 0.0 {
            return Err(WorkloadError::Schema {
                line,
                message: format!("negative arrival {arrival_s}"),
            });
        }
        if input_len < 1 {
            return Err(WorkloadError::Schema {
                line,
                message: "input_len must be >= 1".to_string(),
            });
        }
        let workload = if adapter.is_empty() {
            Workload::new(input_len, batch)
        } else {
            Workload::with_adapter(input_len, batch, adapter)
        };
        records.push(InvocationRecord {
            request_id,
            function_id,
            arrival_s,
            workload,
        });
    }
    sort_records(&mut records);
    Ok(records)
}

fn sort_records(records: &mut [InvocationRecord]) {
    records.sort_by(|a, b| {
        a.arrival_s
            .total_cmp(&b.arrival_s)
            .then(a.request_id.cmp(&b.request_id))
    });
}

pub fn dump_trace_csv(records: &[InvocationRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.request_id,
            r.function_id,
            r.arrival_s,
            r.workload.input_len,
            r.workload.batch,
            r.workload.adapter_id.as_deref().unwrap_or("")
        ));
    }
    out
}

/// Draws an input length around the profile mean: a geometric draw (exact
/// mean) blended toward the constant mean by `1 - dispersion`, truncated
/// at 1.
fn draw_input_len(profile: &TaskProfile, rng: &mut impl Rng) -> u64 {
    let mean = profile.mean_input_len.max(1) as f64;
    let p = 1.0 / mean;
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    // Inverse-CDF geometric on {1, 2, ...} with mean 1/p.
    let geometric = (u.ln() / (1.0 - p).ln()).ceil().max(1.0);
    let d = profile.input_len_dispersion.clamp(0.0, 1.0);
    let blended = (1.0 - d) * mean + d * geometric;
    (blended.round() as u64).max(1)
}

/// Generates Poisson arrivals per function over `duration_s`, with input
/// lengths drawn around each task's mean and batch fixed by the profile.
/// Deterministic under the seed; request ids are assigned after the
/// global arrival sort.
pub fn synthesize(
    mix: &[FunctionMixEntry],
    duration_s: f64,
    seed: u64,
) -> Result<Vec<InvocationRecord>, WorkloadError> {
    for entry in mix {
        if entry.rate_per_s <= 0.0 {
            return Err(WorkloadError::NonPositiveRate(entry.rate_per_s));
        }
    }
    let mut records = Vec::new();
    for (idx, entry) in mix.iter().enumerate() {
        // Independent substream per function keeps streams stable when
        // the mix is extended.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let exp = Exp::new(entry.rate_per_s).expect("rate checked positive");
        let mut t = 0.0f64;
        loop {
            t += exp.sample(&mut rng);
            if t > duration_s {
                break;
            }
            let input_len = draw_input_len(&entry.task, &mut rng);
            let workload = if entry.adapter_pool > 0 {
                let a = rng.gen_range(0..entry.adapter_pool);
                Workload::with_adapter(
                    input_len,
                    entry.task.batch,
                    &format!("{}-a{}", entry.function_id, a),
                )
            } else {
                Workload::new(input_len, entry.task.batch)
            };
            records.push(InvocationRecord {
                request_id: 0,
                function_id: entry.function_id.clone(),
                arrival_s: t,
                workload,
            });
        }
    }
    records.sort_by(|a, b| {
        a.arrival_s
            .total_cmp(&b.arrival_s)
            .then(a.function_id.cmp(&b.function_id))
    });
    for (i, r) in records.iter_mut().enumerate() {
        r.request_id = i as u64;
    }
    Ok(records)
}

/// Compresses the time axis by `time_factor` and keeps every
/// `count_factor`-th request (relative order preserved).
pub fn scale_and_accelerate(
    records: &[InvocationRecord],
    time_factor: f64,
    count_factor: f64,
) -> Result<Vec<InvocationRecord>, WorkloadError> {
    if time_factor <= 0.0 {
        return Err(WorkloadError::NonPositiveFactor(time_factor));
    }
    if count_factor <= 0.0 {
        return Err(WorkloadError::NonPositiveFactor(count_factor));
    }
    let stride = count_factor.max(1.0);
    let mut out = Vec::new();
    let mut next = 0.0f64;
    for (i, r) in records.iter().enumerate() {
        if (i as f64) + 1e-9 < next {
            continue;
        }
        next += stride;
        let mut r = r.clone();
        r.arrival_s /= time_factor;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_trace_parses_to_empty() {
        assert!(parse_trace("").unwrap().is_empty());
        assert!(parse_trace(&format!("{TRACE_HEADER}\n")).unwrap().is_empty());
    }

    #[test]
    fn rows_sort_by_arrival_stable_by_request_id() {
        let text = format!(
            "{TRACE_HEADER}\n2,f,5.0,100,1,\n0,f,1.0,100,1,\n1,f,1.0,100,1,a7\n"
        );
        let records = parse_trace(&text).unwrap();
        let ids: Vec<u64> = records.iter().map(|r| r.request_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(records[1].is_dynamic_bearing());
        assert!(!records[0].is_dynamic_bearing());
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let text = format!("{TRACE_HEADER}\n0,f,1.0,100,1,\n1,f,oops,100,1,\n");
        match parse_trace(&text) {
            Err(WorkloadError::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(matches!(
            parse_trace("id,fn,t\n1,f,0\n"),
            Err(WorkloadError::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn csv_round_trips() {
        let text = format!("{TRACE_HEADER}\n0,f,1,867,1,\n1,g,2.5,2048,1,g-a3\n");
        let records = parse_trace(&text).unwrap();
        assert_eq!(dump_trace_csv(&records), text);
    }

    #[test]
    fn zero_rate_is_rejected() {
        let mix = [FunctionMixEntry {
            function_id: "f".to_string(),
            task: TaskProfile::code(),
            rate_per_s: 0.0,
            adapter_pool: 0,
        }];
        assert!(matches!(
            synthesize(&mix, 10.0, 1),
            Err(WorkloadError::NonPositiveRate(_))
        ));
    }

    #[test]
    fn synthesis_is_deterministic_under_seed() {
        let mix = [FunctionMixEntry {
            function_id: "f".to_string(),
            task: TaskProfile::conversation(),
            rate_per_s: 0.5,
            adapter_pool: 8,
        }];
        let a = synthesize(&mix, 500.0, 42).unwrap();
        let b = synthesize(&mix, 500.0, 42).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&mix, 500.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn arrivals_are_nondecreasing_and_ids_sequential() {
        let mix = [
            FunctionMixEntry {
                function_id: "f".to_string(),
                task: TaskProfile::mail(),
                rate_per_s: 1.0,
                adapter_pool: 0,
            },
            FunctionMixEntry {
                function_id: "g".to_string(),
                task: TaskProfile::code(),
                rate_per_s: 2.0,
                adapter_pool: 4,
            },
        ];
        let records = synthesize(&mix, 200.0, 7).unwrap();
        assert!(!records.is_empty());
        for pair in records.windows(2) {
            assert!(pair[0].arrival_s <= pair[1].arrival_s);
        }
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.request_id, i as u64);
            assert!(r.workload.input_len >= 1);
            assert_eq!(r.workload.batch, 1);
        }
    }

    #[test]
    fn task_means_within_two_percent() {
        for task in [
            TaskProfile::mail(),
            TaskProfile::conversation(),
            TaskProfile::code(),
            TaskProfile::longbench(),
        ] {
            let mix = [FunctionMixEntry {
                function_id: task.name.clone(),
                task: task.clone(),
                rate_per_s: 100.0,
                adapter_pool: 0,
            }];
            let records = synthesize(&mix, 150.0, 11).unwrap();
            assert!(records.len() >= 10_000, "{} samples", records.len());
            let mean = records.iter().map(|r| r.workload.input_len as f64).sum::<f64>()
                / records.len() as f64;
            let target = task.mean_input_len as f64;
            assert!(
                (mean - target).abs() / target < 0.02,
                "{}: mean {mean:.1} vs {target}",
                task.name
            );
        }
    }

    #[test]
    fn zero_dispersion_pins_the_mean() {
        let mut task = TaskProfile::code();
        task.input_len_dispersion = 0.0;
        let mix = [FunctionMixEntry {
            function_id: "f".to_string(),
            task,
            rate_per_s: 5.0,
            adapter_pool: 0,
        }];
        let records = synthesize(&mix, 50.0, 3).unwrap();
        assert!(records.iter().all(|r| r.workload.input_len == 2048));
    }

    #[test]
    fn scale_and_accelerate_identity_and_subsample() {
        let text = format!("{TRACE_HEADER}\n0,f,0,10,1,\n1,f,14,10,1,\n2,f,28,10,1,\n3,f,42,10,1,\n");
        let records = parse_trace(&text).unwrap();
        let same = scale_and_accelerate(&records, 1.0, 1.0).unwrap();
        assert_eq!(same, records);
        let fast = scale_and_accelerate(&records, 28.0, 1.0).unwrap();
        assert!((fast[3].arrival_s - 1.5).abs() < 1e-12);
        let thin = scale_and_accelerate(&records, 1.0, 2.0).unwrap();
        let ids: Vec<u64> = thin.iter().map(|r| r.request_id).collect();
        assert_eq!(ids, vec![0, 2]);
    }
}
