//! KV-cache memory accounting per compression policy.

use super::CompressionPolicy;

/// Model dimensions and byte constants behind the KV byte math.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FootprintModel {
    pub layers: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    /// Bytes per full-precision scalar (2 for FP16).
    pub bytes_per_scalar_full: u64,
    /// Bytes storing a group's (lo, delta) pair; 4 = two 16-bit scalars.
    pub meta_bytes_per_group: u64,
}

impl FootprintModel {
    pub fn new(layers: u64, kv_heads: u64, head_dim: u64) -> Self {
        Self {
            layers,
            kv_heads,
            head_dim,
            bytes_per_scalar_full: 2,
            meta_bytes_per_group: 4,
        }
    }

    /// LLaMA-7B-shaped default: 32 layers, 32 KV heads, head dim 128.
    pub fn llama7b() -> Self {
        Self::new(32, 32, 128)
    }

    /// Cached scalars per token: keys and values across all layers and heads.
    pub fn elements_per_token(&self) -> u64 {
        2 * self.layers * self.kv_heads * self.head_dim
    }

    /// Full-precision bytes for `tokens` cached tokens.
    pub fn full_precision_bytes(&self, tokens: u64) -> u64 {
        self.elements_per_token() * self.bytes_per_scalar_full * tokens
    }

    /// Bytes for one page of `page_size` tokens under `policy`, at the
    /// steady-state rate (the residual window is a constant-size overhead,
    /// not a per-page one, so quantized pages use the code + meta rate).
    pub fn page_bytes(&self, policy: &CompressionPolicy, page_size: u64) -> u64 {
        match policy.quant_spec() {
            Some(spec) => {
                let elements = self.elements_per_token() * page_size;
                let code_bytes = (elements * u64::from(spec.bits)).div_ceil(8);
                let groups = elements.div_ceil(spec.group_size as u64);
                code_bytes + groups * self.meta_bytes_per_group
            }
            None => self.full_precision_bytes(page_size),
        }
    }
}

/// Bytes held by a KV cache of `tokens` tokens under `policy`.
///
/// FP16 stores every scalar at full precision. Quantized policies store
/// b-bit codes plus per-group metadata for the leading tokens and full
/// precision for the residual window. Eviction policies store full precision
/// but never more than their budget.
pub fn kv_bytes(policy: &CompressionPolicy, tokens: u64, fm: &FootprintModel) -> u64 {
    match policy {
        CompressionPolicy::Fp16 => fm.full_precision_bytes(tokens),
        CompressionPolicy::Kivi(_) | CompressionPolicy::Gear(_) => {
            let spec = policy.quant_spec().expect("quantized policy has a spec");
            let residual = (spec.residual_window as u64).min(tokens);
            let main = tokens - residual;
            let elements = fm.elements_per_token() * main;
            let code_bytes = (elements * u64::from(spec.bits)).div_ceil(8);
            let groups = elements.div_ceil(spec.group_size as u64);
            code_bytes + groups * fm.meta_bytes_per_group + fm.full_precision_bytes(residual)
        }
        CompressionPolicy::StreamingLlm { .. } | CompressionPolicy::H2O { .. } => {
            let budget = policy.cache_budget().expect("eviction policy has a budget");
            fm.full_precision_bytes(tokens.min(budget))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantkv::{GearSpec, QuantAxis, QuantSpec};

    fn tiny_fm() -> FootprintModel {
        FootprintModel::new(1, 1, 128)
    }

    #[test]
    fn fp16_bytes_match_hand_arithmetic() {
        // 2 (K&V) * 64 tokens * 128 dims * 2 bytes = 32768.
        assert_eq!(kv_bytes(&CompressionPolicy::Fp16, 64, &tiny_fm()), 32_768);
    }

    #[test]
    fn quantized_bytes_match_hand_arithmetic() {
        // 4-bit, group 32, no residual: 8192 code bytes + 512 groups * 4B.
        let spec = QuantSpec::new(4, QuantAxis::PerToken, 32, 0);
        let policy = CompressionPolicy::Kivi(spec);
        assert_eq!(kv_bytes(&policy, 64, &tiny_fm()), 10_240);
    }

    #[test]
    fn zero_tokens_is_zero_bytes() {
        let fm = tiny_fm();
        for id in CompressionPolicy::all_ids() {
            let policy = CompressionPolicy::from_id(id).unwrap();
            assert_eq!(kv_bytes(&policy, 0, &fm), 0, "policy {id}");
        }
    }

    #[test]
    fn eviction_bytes_cap_at_budget() {
        let fm = tiny_fm();
        let policy = CompressionPolicy::StreamingLlm {
            sink: 64,
            recent: 448,
        };
        let at_budget = kv_bytes(&policy, 512, &fm);
        assert_eq!(kv_bytes(&policy, 2048, &fm), at_budget);
        assert_eq!(at_budget, fm.full_precision_bytes(512));
    }

    #[test]
    fn residual_window_tokens_stay_full_precision() {
        let fm = tiny_fm();
        let spec = QuantSpec::new(4, QuantAxis::PerToken, 32, 128);
        let policy = CompressionPolicy::Kivi(spec);
        // Below the residual window everything is full precision.
        assert_eq!(kv_bytes(&policy, 100, &fm), fm.full_precision_bytes(100));
        // Beyond it, quantized storage undercuts FP16.
        assert!(kv_bytes(&policy, 1000, &fm) < fm.full_precision_bytes(1000));
    }

    #[test]
    fn gear_uses_its_base_spec() {
        let fm = tiny_fm();
        let gear = CompressionPolicy::Gear(GearSpec::default_4bit());
        let kivi_r0 = CompressionPolicy::Kivi(QuantSpec::new(4, QuantAxis::PerToken, 32, 0));
        assert_eq!(kv_bytes(&gear, 64, &fm), kv_bytes(&kivi_r0, 64, &fm));
    }

    #[test]
    fn page_bytes_by_policy() {
        let fm = tiny_fm();
        assert_eq!(fm.page_bytes(&CompressionPolicy::Fp16, 16), 8192);
        let quant = CompressionPolicy::Kivi(QuantSpec::new(4, QuantAxis::PerToken, 32, 128));
        // 4096 elements: 2048 code bytes + 128 groups * 4B.
        assert_eq!(fm.page_bytes(&quant, 16), 2048 + 512);
        let h2o = CompressionPolicy::from_id("h2o").unwrap();
        assert_eq!(fm.page_bytes(&h2o, 16), 8192);
    }
}
