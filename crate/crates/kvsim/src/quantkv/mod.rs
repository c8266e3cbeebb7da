//! Group-wise KV-cache quantization, error correction, and footprint
//! accounting.
//!
//! Quantization maps each group of cache values onto `b`-bit codes through an
//! affine transform: with group minimum `lo` and maximum `hi`, the step is
//! `delta = (hi - lo) / (2^b - 1)`, codes are `round((x - lo) / delta)` with
//! ties to even, and dequantization reads `code * delta + lo`. The trailing
//! `residual_window` tokens stay full precision. Constant groups
//! (`hi == lo`) store `delta = 0` and all-zero codes so the roundtrip is
//! exact without dividing by zero.

mod footprint;
mod gear;
mod matrix;

pub use footprint::{kv_bytes, FootprintModel};
pub use gear::{gear_correct, GearReconstruction, GearSpec, GearStats};
pub use matrix::Matrix;

use crate::error::{Error, Result};

// ── Quantization configuration ──────────────────────────────────────────────

/// Which way groups run through the token x channel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QuantAxis {
    /// Statistics shared by a run of tokens within one channel (column).
    PerChannel,
    /// Statistics shared by a run of channels within one token (row).
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QuantSpec {
    /// Code width in bits, 1..=8.
    pub bits: u8,
    pub axis: QuantAxis,
    /// Tokens (per-channel) or channels (per-token) sharing one (lo, delta).
    pub group_size: usize,
    /// Trailing tokens kept full precision.
    pub residual_window: usize,
}

impl QuantSpec {
    pub fn new(bits: u8, axis: QuantAxis, group_size: usize, residual_window: usize) -> Self {
        Self {
            bits,
            axis,
            group_size,
            residual_window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 1 || self.bits > 8 {
            return Err(Error::invalid(format!(
                "quantization bits must be in 1..=8, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::invalid("group_size must be >= 1"));
        }
        Ok(())
    }

    /// Largest representable code, `2^bits - 1`.
    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }

    /// Key-side spec used by the KIVI-style preset (grouped along tokens).
    pub fn kivi_key() -> Self {
        Self::new(4, QuantAxis::PerChannel, 32, 128)
    }

    /// Value-side spec used by the KIVI-style preset (grouped along channels).
    pub fn kivi_value() -> Self {
        Self::new(4, QuantAxis::PerToken, 32, 128)
    }
}

// ── Quantized representation ────────────────────────────────────────────────

/// A quantized matrix: codes for the leading tokens plus a full-precision
/// residual tail.
#[derive(Debug, Clone)]
pub struct QuantizedMatrix {
    codes: Vec<u8>,
    group_lo: Vec<f64>,
    group_delta: Vec<f64>,
    spec: QuantSpec,
    residual: Matrix,
    main_rows: usize,
    cols: usize,
}

impl QuantizedMatrix {
    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn group_lo(&self) -> &[f64] {
        &self.group_lo
    }

    pub fn group_delta(&self) -> &[f64] {
        &self.group_delta
    }

    pub fn residual(&self) -> &Matrix {
        &self.residual
    }

    /// Total token count of the original matrix.
    pub fn rows(&self) -> usize {
        self.main_rows + self.residual.rows()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn groups_per_line(&self) -> usize {
        match self.spec.axis {
            QuantAxis::PerToken => self.cols.div_ceil(self.spec.group_size),
            QuantAxis::PerChannel => self.main_rows.div_ceil(self.spec.group_size),
        }
    }

    /// Index into `group_lo`/`group_delta` for the element at (row, col) of
    /// the main region.
    fn group_index(&self, r: usize, c: usize) -> usize {
        let per_line = self.groups_per_line();
        match self.spec.axis {
            QuantAxis::PerToken => r * per_line + c / self.spec.group_size,
            QuantAxis::PerChannel => c * per_line + r / self.spec.group_size,
        }
    }
}

// ── Operations ──────────────────────────────────────────────────────────────

/// Quantize `x` group-wise according to `spec`.
///
/// Rejects non-finite inputs and bit widths outside 1..=8. The last group
/// along the chosen axis may be partial and uses its own min/max.
pub fn quantize(x: &Matrix, spec: &QuantSpec) -> Result<QuantizedMatrix> {
    spec.validate()?;
    if !x.is_finite() {
        return Err(Error::invalid(
            "quantize input contains non-finite values (NaN or infinity)",
        ));
    }

    let residual_rows = spec.residual_window.min(x.rows());
    let main_rows = x.rows() - residual_rows;
    let cols = x.cols();
    let levels = f64::from(spec.max_code());

    let mut q = QuantizedMatrix {
        codes: vec![0u8; main_rows * cols],
        group_lo: Vec::new(),
        group_delta: Vec::new(),
        spec: *spec,
        residual: x.tail_rows(residual_rows),
        main_rows,
        cols,
    };

    let n_groups = match spec.axis {
        QuantAxis::PerToken => main_rows * cols.div_ceil(spec.group_size),
        QuantAxis::PerChannel => {
            if main_rows == 0 {
                0
            } else {
                cols * main_rows.div_ceil(spec.group_size)
            }
        }
    };
    q.group_lo = vec![0.0; n_groups];
    q.group_delta = vec![0.0; n_groups];

    // Walk the main region group by group. `line` is a row for per-token
    // grouping and a column for per-channel grouping.
    let (lines, line_len) = match spec.axis {
        QuantAxis::PerToken => (main_rows, cols),
        QuantAxis::PerChannel => (cols, main_rows),
    };
    for line in 0..lines {
        let mut start = 0;
        while start < line_len {
            let end = (start + spec.group_size).min(line_len);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for pos in start..end {
                let (r, c) = match spec.axis {
                    QuantAxis::PerToken => (line, pos),
                    QuantAxis::PerChannel => (pos, line),
                };
                let v = x.get(r, c);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let delta = if hi > lo { (hi - lo) / levels } else { 0.0 };
            let gi = match spec.axis {
                QuantAxis::PerToken => q.group_index(line, start),
                QuantAxis::PerChannel => q.group_index(start, line),
            };
            q.group_lo[gi] = lo;
            q.group_delta[gi] = delta;
            if delta > 0.0 {
                for pos in start..end {
                    let (r, c) = match spec.axis {
                        QuantAxis::PerToken => (line, pos),
                        QuantAxis::PerChannel => (pos, line),
                    };
                    let code = ((x.get(r, c) - lo) / delta).round_ties_even();
                    q.codes[r * cols + c] = code.clamp(0.0, levels) as u8;
                }
            }
            start = end;
        }
    }

    Ok(q)
}

/// Reconstruct the full-precision matrix from `q`.
///
/// Main-region elements come back as `code * delta + lo`; residual tokens are
/// restored exactly. Rejects codes above `2^bits - 1`.
pub fn dequantize(q: &QuantizedMatrix) -> Result<Matrix> {
    let max_code = q.spec.max_code();
    if let Some(bad) = q.codes.iter().find(|&&c| c > max_code) {
        return Err(Error::invalid(format!(
            "code {} out of range for {} bits",
            bad, q.spec.bits
        )));
    }

    let rows = q.rows();
    let cols = q.cols;
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..q.main_rows {
        for c in 0..cols {
            let gi = q.group_index(r, c);
            let code = f64::from(q.codes[r * cols + c]);
            out.set(r, c, code * q.group_delta[gi] + q.group_lo[gi]);
        }
    }
    for r in 0..q.residual.rows() {
        for c in 0..cols {
            out.set(q.main_rows + r, c, q.residual.get(r, c));
        }
    }
    Ok(out)
}

// ── Compression policy ──────────────────────────────────────────────────────

/// Tagged configuration for the five policies the toolkit models.
#[derive(Debug, Clone, PartialEq)]
pub enum CompressionPolicy {
    /// Full-precision baseline.
    Fp16,
    /// KIVI-style group-wise quantization (per-channel keys, per-token
    /// values; the stored spec is the key side).
    Kivi(QuantSpec),
    /// GEAR-style quantization with sparse + low-rank error correction.
    Gear(GearSpec),
    /// Sink + sliding-window eviction.
    StreamingLlm { sink: u64, recent: u64 },
    /// Heavy-hitter eviction by accumulated attention score.
    H2O { heavy: u64, recent: u64 },
}

impl CompressionPolicy {
    /// Stable identifier used in profile CSVs, traces, and reports.
    pub fn id(&self) -> &'static str {
        match self {
            CompressionPolicy::Fp16 => "fp16",
            CompressionPolicy::Kivi(_) => "kivi",
            CompressionPolicy::Gear(_) => "gear",
            CompressionPolicy::H2O { .. } => "h2o",
            CompressionPolicy::StreamingLlm { .. } => "stream",
        }
    }

    /// Preset for an id, with the standard configurations: 4-bit groups of
    /// 32 with a 128-token residual for the quantizers, 64 + 448 budgets for
    /// the eviction policies.
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "fp16" => Ok(CompressionPolicy::Fp16),
            "kivi" => Ok(CompressionPolicy::Kivi(QuantSpec::kivi_key())),
            "gear" => Ok(CompressionPolicy::Gear(GearSpec::default_4bit())),
            "h2o" => Ok(CompressionPolicy::H2O {
                heavy: 64,
                recent: 448,
            }),
            "stream" => Ok(CompressionPolicy::StreamingLlm {
                sink: 64,
                recent: 448,
            }),
            other => Err(Error::invalid(format!(
                "unknown policy '{other}' (expected fp16|kivi|gear|h2o|stream)"
            ))),
        }
    }

    /// Maximum retained cache tokens for eviction policies; `None` when the
    /// cache grows unbounded.
    pub fn cache_budget(&self) -> Option<u64> {
        match self {
            CompressionPolicy::StreamingLlm { sink, recent } => Some(sink + recent),
            CompressionPolicy::H2O { heavy, recent } => Some(heavy + recent),
            _ => None,
        }
    }

    /// Quantization spec backing the byte accounting, when the policy
    /// quantizes.
    pub fn quant_spec(&self) -> Option<&QuantSpec> {
        match self {
            CompressionPolicy::Kivi(spec) => Some(spec),
            CompressionPolicy::Gear(gear) => Some(&gear.base),
            _ => None,
        }
    }

    pub fn all_ids() -> [&'static str; 5] {
        ["fp16", "kivi", "gear", "h2o", "stream"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(vals: &[f64]) -> Matrix {
        Matrix::new(1, vals.len(), vals.to_vec()).unwrap()
    }

    fn spec_per_token(bits: u8, group: usize) -> QuantSpec {
        QuantSpec::new(bits, QuantAxis::PerToken, group, 0)
    }

    #[test]
    fn quantize_single_group_ramp() {
        // One per-token group over [0,1,2,3] at 2 bits: delta = 1, exact codes.
        let x = row(&[0.0, 1.0, 2.0, 3.0]);
        let q = quantize(&x, &spec_per_token(2, 4)).unwrap();
        assert_eq!(q.group_delta(), &[1.0]);
        assert_eq!(q.group_lo(), &[0.0]);
        assert_eq!(q.codes(), &[0, 1, 2, 3]);
        let back = dequantize(&q).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn quantize_constant_group() {
        let x = row(&[5.0, 5.0, 5.0, 5.0]);
        let q = quantize(&x, &spec_per_token(4, 4)).unwrap();
        assert_eq!(q.group_delta(), &[0.0]);
        assert_eq!(q.codes(), &[0, 0, 0, 0]);
        let back = dequantize(&q).unwrap();
        assert_eq!(back.data(), &[5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn quantize_rounds_ties_to_even() {
        // [0, 0.5, 1] at 1 bit: delta = 1 and the 0.5 tie rounds down to the
        // even code 0, so the worst-case error is exactly delta/2.
        let x = row(&[0.0, 0.5, 1.0]);
        let q = quantize(&x, &spec_per_token(1, 3)).unwrap();
        assert_eq!(q.group_delta(), &[1.0]);
        assert_eq!(q.codes(), &[0, 0, 1]);
        let back = dequantize(&q).unwrap();
        let err = back.max_abs_diff(&x);
        assert_eq!(err, 0.5);
    }

    #[test]
    fn quantize_rejects_bad_inputs() {
        let x = row(&[0.0, f64::NAN]);
        assert!(quantize(&x, &spec_per_token(4, 2)).is_err());
        let y = row(&[0.0, 1.0]);
        assert!(quantize(&y, &spec_per_token(0, 2)).is_err());
        assert!(quantize(&y, &spec_per_token(9, 2)).is_err());
    }

    #[test]
    fn dequantize_zero_codes_returns_group_lo() {
        let x = Matrix::new(2, 3, vec![4.0, 4.0, 4.0, -1.0, -1.0, -1.0]).unwrap();
        let q = quantize(&x, &spec_per_token(3, 3)).unwrap();
        assert!(q.codes().iter().all(|&c| c == 0));
        let back = dequantize(&q).unwrap();
        assert_eq!(back.row(0), &[4.0, 4.0, 4.0]);
        assert_eq!(back.row(1), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn dequantize_rejects_out_of_range_code() {
        let x = row(&[0.0, 1.0, 2.0, 3.0]);
        let mut q = quantize(&x, &spec_per_token(2, 4)).unwrap();
        q.codes[1] = 4; // 2-bit max is 3
        assert!(dequantize(&q).is_err());
    }

    #[test]
    fn full_residual_window_is_identity() {
        let x = Matrix::random_uniform(6, 8, -2.0, 2.0, 11);
        let spec = QuantSpec::new(2, QuantAxis::PerToken, 4, 6);
        let q = quantize(&x, &spec).unwrap();
        assert_eq!(q.codes().len(), 0);
        let back = dequantize(&q).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn per_channel_groups_run_down_columns() {
        // 4 tokens x 2 channels, group of 2 tokens: each column splits into
        // two groups with their own min/max.
        let x = Matrix::new(4, 2, vec![0.0, 10.0, 3.0, 10.0, 100.0, 20.0, 103.0, 20.0]).unwrap();
        let spec = QuantSpec::new(2, QuantAxis::PerChannel, 2, 0);
        let q = quantize(&x, &spec).unwrap();
        // Column 0 groups: {0,3} and {100,103}; column 1: {10,10} and {20,20}.
        assert_eq!(q.group_lo(), &[0.0, 100.0, 10.0, 20.0]);
        assert_eq!(q.group_delta(), &[1.0, 1.0, 0.0, 0.0]);
        let back = dequantize(&q).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn partial_trailing_group_uses_own_stats() {
        // 5 channels with group 4: second group is the lone element 100,
        // which must not pollute the first group's range.
        let x = row(&[0.0, 1.0, 2.0, 3.0, 100.0]);
        let q = quantize(&x, &spec_per_token(2, 4)).unwrap();
        assert_eq!(q.group_lo(), &[0.0, 100.0]);
        assert_eq!(q.group_delta(), &[1.0, 0.0]);
        let back = dequantize(&q).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn policy_ids_roundtrip() {
        for id in CompressionPolicy::all_ids() {
            assert_eq!(CompressionPolicy::from_id(id).unwrap().id(), id);
        }
        assert!(CompressionPolicy::from_id("int8").is_err());
    }

    #[test]
    fn policy_budgets() {
        assert_eq!(
            CompressionPolicy::from_id("stream").unwrap().cache_budget(),
            Some(512)
        );
        assert_eq!(
            CompressionPolicy::from_id("h2o").unwrap().cache_budget(),
            Some(512)
        );
        assert_eq!(CompressionPolicy::Fp16.cache_budget(), None);
    }
}
