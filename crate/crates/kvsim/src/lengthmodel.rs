//! Response-length prediction behind a pluggable interface.
//!
//! Two predictors ship: a trace-backed oracle that replays recorded lengths,
//! and a bucket heuristic that learns the mean output/prompt ratio per
//! (task type, policy) bucket. Both predict the ratio target — the response
//! length relative to the prompt length — and reconstruct token counts from
//! it. A trained classifier can slot in behind the same interface later.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

// ── Domain types ────────────────────────────────────────────────────────────

/// One trace sample: a request's prompt length and the response lengths it
/// produced under each policy.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LengthSample {
    pub id: u64,
    pub task_type: String,
    pub prompt_len: u64,
    /// Policy id -> response tokens.
    pub output_len: BTreeMap<String, u64>,
}

/// A length-prediction query.
#[derive(Debug, Clone, Copy)]
pub struct LengthQuery<'a> {
    pub request_id: u64,
    pub prompt_len: u64,
    pub task_type: &'a str,
    pub policy: &'a str,
}

#[derive(Debug, Clone)]
pub enum LengthPredictor {
    /// Replays recorded per-request, per-policy lengths.
    Oracle {
        lengths: HashMap<u64, BTreeMap<String, u64>>,
    },
    /// Mean output/prompt ratio per (task_type, policy) bucket with a global
    /// fallback for unseen buckets.
    BucketHeuristic {
        ratios: BTreeMap<(String, String), f64>,
        global_ratio: f64,
    },
}

// ── Operations ──────────────────────────────────────────────────────────────

/// Build the oracle predictor from a trace.
pub fn train_oracle(trace: &[LengthSample]) -> Result<LengthPredictor> {
    if trace.is_empty() {
        return Err(Error::invalid("length trace is empty"));
    }
    let mut lengths = HashMap::with_capacity(trace.len());
    for sample in trace {
        lengths.insert(sample.id, sample.output_len.clone());
    }
    Ok(LengthPredictor::Oracle { lengths })
}

/// Learn per-(task_type, policy) mean output/prompt ratios from a trace.
pub fn train_bucket_heuristic(trace: &[LengthSample]) -> Result<LengthPredictor> {
    if trace.is_empty() {
        return Err(Error::invalid("length trace is empty"));
    }
    let mut sums: BTreeMap<(String, String), (f64, u64)> = BTreeMap::new();
    let mut global_sum = 0.0;
    let mut global_count = 0u64;
    for sample in trace {
        if sample.prompt_len == 0 {
            return Err(Error::invalid(format!(
                "sample {} has prompt_len 0",
                sample.id
            )));
        }
        for (policy, &out) in &sample.output_len {
            let ratio = out as f64 / sample.prompt_len as f64;
            let entry = sums
                .entry((sample.task_type.clone(), policy.clone()))
                .or_insert((0.0, 0));
            entry.0 += ratio;
            entry.1 += 1;
            global_sum += ratio;
            global_count += 1;
        }
    }
    if global_count == 0 {
        return Err(Error::invalid("length trace has no output lengths"));
    }
    let ratios = sums
        .into_iter()
        .map(|(key, (sum, count))| (key, sum / count as f64))
        .collect();
    Ok(LengthPredictor::BucketHeuristic {
        ratios,
        global_ratio: global_sum / global_count as f64,
    })
}

impl LengthPredictor {
    /// Predicted response tokens for the query, always >= 1.
    ///
    /// The oracle rejects queries for requests or policies it never saw,
    /// naming the request id. The heuristic rounds ratio x prompt and falls
    /// back to the global ratio for unseen buckets.
    pub fn predict(&self, q: &LengthQuery) -> Result<u64> {
        if q.prompt_len == 0 {
            return Err(Error::invalid("prompt_len must be >= 1"));
        }
        match self {
            LengthPredictor::Oracle { lengths } => lengths
                .get(&q.request_id)
                .and_then(|per_policy| per_policy.get(q.policy))
                .copied()
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "length oracle has no entry for request {} under policy '{}'",
                        q.request_id, q.policy
                    ))
                }),
            LengthPredictor::BucketHeuristic {
                ratios,
                global_ratio,
            } => {
                let ratio = ratios
                    .get(&(q.task_type.to_string(), q.policy.to_string()))
                    .copied()
                    .unwrap_or(*global_ratio);
                Ok(((ratio * q.prompt_len as f64).round() as u64).max(1))
            }
        }
    }
}

/// Length-prediction accuracy as a percentage:
/// `(1 - |pred - gt| / gt) * 100`, floored at 0. Ground truth must be >= 1.
pub fn length_accuracy(pred: u64, gt: u64) -> Result<f64> {
    if gt < 1 {
        return Err(Error::invalid("length accuracy ground truth must be >= 1"));
    }
    let delta = (pred as f64 - gt as f64).abs();
    Ok(((1.0 - delta / gt as f64) * 100.0).max(0.0))
}

// ── Trace file IO ───────────────────────────────────────────────────────────

/// Read a JSON Lines length trace; one [`LengthSample`] per line.
pub fn load_length_trace(path: &Path) -> Result<Vec<LengthSample>> {
    if !path.exists() {
        return Err(Error::MissingFile {
            kind: "length trace",
            path: path.to_path_buf(),
        });
    }
    let file = std::fs::File::open(path)?;
    parse_length_trace(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn parse_length_trace(reader: impl BufRead, name: &str) -> Result<Vec<LengthSample>> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: LengthSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: name.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if sample.prompt_len == 0 || sample.output_len.values().any(|&v| v == 0) {
            return Err(Error::Parse {
                path: name.to_string(),
                line: i + 1,
                msg: "lengths must be >= 1".to_string(),
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}
