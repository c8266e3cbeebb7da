//! Profiled iteration-time tables with interpolation.
//!
//! A profile stores attention and non-attention times per (policy, phase)
//! on a rectangular batch x kv-length grid. Attention time is kept separate
//! because compression only perturbs the attention operation; the other
//! rows can be shared across policies. Queries between grid points blend
//! bilinearly in (log2 batch, log2 kv_len) coordinates since both axes span
//! decades; queries outside the grid clamp to the boundary and raise a flag.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

// ── Domain types ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
pub enum Phase {
    Prefill,
    Decode,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefill" => Ok(Phase::Prefill),
            "decode" => Ok(Phase::Decode),
            other => Err(Error::invalid(format!(
                "unknown phase '{other}' (expected prefill|decode)"
            ))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        })
    }
}

/// One measured grid cell. Times are in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePoint {
    pub policy: String,
    pub phase: Phase,
    pub batch: u64,
    pub kv_len: u64,
    pub attn_time: f64,
    pub other_time: f64,
}

/// Interpolated (or exact) iteration times for a query, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePrediction {
    pub attn_time: f64,
    pub other_time: f64,
    /// Query fell outside the profiled grid and was clamped to the boundary.
    pub extrapolated: bool,
}

impl TimePrediction {
    pub fn total(&self) -> f64 {
        self.attn_time + self.other_time
    }
}

#[derive(Debug, Clone)]
struct Grid {
    batches: Vec<u64>,
    kv_lens: Vec<u64>,
    /// Row-major over [batch][kv_len].
    attn: Vec<f64>,
    other: Vec<f64>,
}

/// Validated rectangular profile, immutable after load.
#[derive(Debug, Clone)]
pub struct CostProfile {
    grids: BTreeMap<(String, Phase), Grid>,
}

// ── Loading ─────────────────────────────────────────────────────────────────

const EXPECTED_HEADER: [&str; 6] = [
    "policy",
    "phase",
    "batch",
    "kv_len",
    "attn_time_us",
    "other_time_us",
];

/// Load and validate a profile CSV from a file.
pub fn load_profile(path: &Path) -> Result<CostProfile> {
    if !path.exists() {
        return Err(Error::MissingFile {
            kind: "profile",
            path: path.to_path_buf(),
        });
    }
    let file = std::fs::File::open(path)?;
    parse_profile(file, &path.display().to_string())
}

/// Parse a profile CSV from any reader. `name` labels parse errors.
pub fn parse_profile(reader: impl Read, name: &str) -> Result<CostProfile> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);

    let parse_err = |line: usize, msg: String| Error::Parse {
        path: name.to_string(),
        line,
        msg,
    };

    let header = csv_reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != EXPECTED_HEADER {
        return Err(parse_err(
            1,
            format!(
                "expected header '{}', got '{}'",
                EXPECTED_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }

    let mut points = Vec::new();
    for (i, record) in csv_reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != 6 {
            return Err(parse_err(line, format!("expected 6 fields, got {}", record.len())));
        }
        let field = |idx: usize| record.get(idx).unwrap_or_default();
        let phase: Phase = field(1)
            .parse()
            .map_err(|e: Error| parse_err(line, e.to_string()))?;
        let batch: u64 = field(2)
            .parse()
            .map_err(|e| parse_err(line, format!("bad batch: {e}")))?;
        let kv_len: u64 = field(3)
            .parse()
            .map_err(|e| parse_err(line, format!("bad kv_len: {e}")))?;
        let attn_us: f64 = field(4)
            .parse()
            .map_err(|e| parse_err(line, format!("bad attn_time_us: {e}")))?;
        let other_us: f64 = field(5)
            .parse()
            .map_err(|e| parse_err(line, format!("bad other_time_us: {e}")))?;
        if batch == 0 || kv_len == 0 {
            return Err(parse_err(line, "batch and kv_len must be >= 1".into()));
        }
        if !attn_us.is_finite() || !other_us.is_finite() || attn_us < 0.0 || other_us < 0.0 {
            return Err(parse_err(line, "times must be finite and >= 0".into()));
        }
        points.push((
            line,
            ProfilePoint {
                policy: field(0).to_string(),
                phase,
                batch,
                kv_len,
                // Division correctly rounds the microsecond value, so a cell
                // like 10.125us compares bit-equal to the literal 10.125e-6.
                attn_time: attn_us / 1e6,
                other_time: other_us / 1e6,
            },
        ));
    }

    build_profile(points, name)
}

/// Assemble validated grids from parsed points. Each point carries the CSV
/// line it came from for error reporting.
pub fn build_profile(points: Vec<(usize, ProfilePoint)>, name: &str) -> Result<CostProfile> {
    if points.is_empty() {
        return Err(Error::invalid(format!("empty profile: {name}")));
    }

    let mut by_key: BTreeMap<(String, Phase), Vec<(usize, ProfilePoint)>> = BTreeMap::new();
    for (line, p) in points {
        by_key
            .entry((p.policy.clone(), p.phase))
            .or_default()
            .push((line, p));
    }

    let mut grids = BTreeMap::new();
    for ((policy, phase), cells) in by_key {
        let mut batches: Vec<u64> = cells.iter().map(|(_, p)| p.batch).collect();
        batches.sort_unstable();
        batches.dedup();
        let mut kv_lens: Vec<u64> = cells.iter().map(|(_, p)| p.kv_len).collect();
        kv_lens.sort_unstable();
        kv_lens.dedup();

        let nb = batches.len();
        let nk = kv_lens.len();
        let mut attn = vec![f64::NAN; nb * nk];
        let mut other = vec![f64::NAN; nb * nk];
        for (line, p) in &cells {
            let bi = batches.binary_search(&p.batch).unwrap();
            let ki = kv_lens.binary_search(&p.kv_len).unwrap();
            let slot = bi * nk + ki;
            if !attn[slot].is_nan() {
                return Err(Error::Parse {
                    path: name.to_string(),
                    line: *line,
                    msg: format!(
                        "duplicate profile cell ({policy}, {phase}, batch {}, kv_len {})",
                        p.batch, p.kv_len
                    ),
                });
            }
            attn[slot] = p.attn_time;
            other[slot] = p.other_time;
        }
        if cells.len() != nb * nk {
            let mut missing = Vec::new();
            for (bi, &b) in batches.iter().enumerate() {
                for (ki, &k) in kv_lens.iter().enumerate() {
                    if attn[bi * nk + ki].is_nan() {
                        missing.push(format!("(batch {b}, kv_len {k})"));
                    }
                }
            }
            return Err(Error::invalid(format!(
                "profile grid for ({policy}, {phase}) is not rectangular; missing cells: {}",
                missing.join(", ")
            )));
        }
        grids.insert(
            (policy, phase),
            Grid {
                batches,
                kv_lens,
                attn,
                other,
            },
        );
    }

    Ok(CostProfile { grids })
}

// ── Queries ─────────────────────────────────────────────────────────────────

/// Bracketing index pair and blend weight for a query on one axis.
/// Exact matches collapse to a single index with weight 0.
fn locate(axis: &[u64], query: u64) -> (usize, usize, f64, bool) {
    let first = axis[0];
    let last = *axis.last().unwrap();
    if query <= first {
        return (0, 0, 0.0, query < first);
    }
    if query >= last {
        let i = axis.len() - 1;
        return (i, i, 0.0, query > last);
    }
    match axis.binary_search(&query) {
        Ok(i) => (i, i, 0.0, false),
        Err(upper) => {
            let lo = axis[upper - 1] as f64;
            let hi = axis[upper] as f64;
            let u = ((query as f64).log2() - lo.log2()) / (hi.log2() - lo.log2());
            (upper - 1, upper, u, false)
        }
    }
}

fn blend(a: f64, b: f64, u: f64) -> f64 {
    a * (1.0 - u) + b * u
}

impl CostProfile {
    pub fn has(&self, policy: &str, phase: Phase) -> bool {
        self.grids.contains_key(&(policy.to_string(), phase))
    }

    /// Policies present in the profile, sorted.
    pub fn policies(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.grids.keys().map(|(p, _)| p.clone()).collect();
        ids.dedup();
        ids
    }

    /// Iteration times for (policy, phase) at the queried batch and kv
    /// length: exact at grid points, log-space bilinear between them,
    /// clamped (and flagged) outside.
    pub fn predict_time(
        &self,
        policy: &str,
        phase: Phase,
        batch: u64,
        kv_len: u64,
    ) -> Result<TimePrediction> {
        if batch == 0 || kv_len == 0 {
            return Err(Error::invalid("batch and kv_len queries must be >= 1"));
        }
        let grid = self
            .grids
            .get(&(policy.to_string(), phase))
            .ok_or_else(|| {
                Error::invalid(format!("profile has no rows for ({policy}, {phase})"))
            })?;

        let (b0, b1, ub, clamp_b) = locate(&grid.batches, batch);
        let (k0, k1, uk, clamp_k) = locate(&grid.kv_lens, kv_len);
        let nk = grid.kv_lens.len();
        let pick = |values: &[f64]| {
            let v00 = values[b0 * nk + k0];
            let v01 = values[b0 * nk + k1];
            let v10 = values[b1 * nk + k0];
            let v11 = values[b1 * nk + k1];
            match (b0 == b1, k0 == k1) {
                (true, true) => v00,
                (true, false) => blend(v00, v01, uk),
                (false, true) => blend(v00, v10, ub),
                (false, false) => blend(blend(v00, v01, uk), blend(v10, v11, uk), ub),
            }
        };

        Ok(TimePrediction {
            attn_time: pick(&grid.attn),
            other_time: pick(&grid.other),
            extrapolated: clamp_b || clamp_k,
        })
    }

    /// Predicted throughput in tokens/second: `batch / time` for decode
    /// (one token per request per iteration), `batch * kv_len / time` for
    /// prefill (the whole prompt in one step).
    pub fn predict_throughput(
        &self,
        policy: &str,
        phase: Phase,
        batch: u64,
        kv_len: u64,
    ) -> Result<f64> {
        let t = self.predict_time(policy, phase, batch, kv_len)?.total();
        if t <= 0.0 {
            return Err(Error::invalid(format!(
                "zero iteration time for ({policy}, {phase}) at batch {batch}, kv_len {kv_len}"
            )));
        }
        let tokens = match phase {
            Phase::Decode => batch as f64,
            Phase::Prefill => batch as f64 * kv_len as f64,
        };
        Ok(tokens / t)
    }
}

/// Prediction accuracy as a percentage: `(1 - |pred - gt| / gt) * 100`,
/// floored at 0. Ground truth must be positive.
pub fn accuracy(pred: f64, gt: f64) -> Result<f64> {
    if gt <= 0.0 || !gt.is_finite() {
        return Err(Error::invalid(format!(
            "accuracy ground truth must be > 0, got {gt}"
        )));
    }
    Ok(((1.0 - (pred - gt).abs() / gt) * 100.0).max(0.0))
}

/// Mean prediction accuracy per policy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyReport {
    pub per_policy: BTreeMap<String, f64>,
}

impl AccuracyReport {
    /// Average the accuracy over (pred, gt) pairs for each policy.
    pub fn from_pairs(pairs: &BTreeMap<String, Vec<(f64, f64)>>) -> Result<Self> {
        let mut per_policy = BTreeMap::new();
        for (policy, samples) in pairs {
            if samples.is_empty() {
                continue;
            }
            let mut total = 0.0;
            for &(pred, gt) in samples {
                total += accuracy(pred, gt)?;
            }
            per_policy.insert(policy.clone(), total / samples.len() as f64);
        }
        Ok(Self { per_policy })
    }

    pub fn mean(&self) -> Option<f64> {
        if self.per_policy.is_empty() {
            return None;
        }
        Some(self.per_policy.values().sum::<f64>() / self.per_policy.len() as f64)
    }
}
