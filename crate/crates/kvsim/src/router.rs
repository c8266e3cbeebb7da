//! Request routing across replicas and the latency estimate behind it.
//!
//! Four policies: route to the replica with the least KV memory in use
//! (baseline load balancing), the highest predicted per-request decode rate,
//! the shortest predicted response, or the lowest estimated end-to-end
//! latency. Estimates evaluate cost rows at the post-admission batch
//! (current batch + 1); queue wait has no estimator of its own.

use std::str::FromStr;

use crate::costmodel::{CostProfile, Phase};
use crate::error::{Error, Result};
use crate::lengthmodel::{LengthPredictor, LengthQuery};

// ── Domain types ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
pub enum RoutingPolicy {
    Baseline,
    Throughput,
    Length,
    Both,
}

impl RoutingPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            RoutingPolicy::Baseline => "baseline",
            RoutingPolicy::Throughput => "throughput",
            RoutingPolicy::Length => "length",
            RoutingPolicy::Both => "both",
        }
    }

    pub fn all() -> [RoutingPolicy; 4] {
        [
            RoutingPolicy::Baseline,
            RoutingPolicy::Throughput,
            RoutingPolicy::Length,
            RoutingPolicy::Both,
        ]
    }
}

impl FromStr for RoutingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(RoutingPolicy::Baseline),
            "throughput" => Ok(RoutingPolicy::Throughput),
            "length" => Ok(RoutingPolicy::Length),
            "both" => Ok(RoutingPolicy::Both),
            other => Err(Error::invalid(format!(
                "unknown routing policy '{other}' (expected baseline|throughput|length|both)"
            ))),
        }
    }
}

/// What the router sees of one replica at decision time.
#[derive(Debug, Clone)]
pub struct ReplicaSnapshot {
    pub id: usize,
    /// Policy id as it appears in the cost profile ("fp16", "kivi", ...).
    pub policy: String,
    /// Requests currently admitted (prefilling + decoding).
    pub active_batch: u64,
    /// KV bytes currently held by admitted requests.
    pub kv_bytes_used: u64,
}

/// The request fields routing needs.
#[derive(Debug, Clone)]
pub struct RouteQuery<'a> {
    pub request_id: u64,
    pub prompt_len: u64,
    pub task_type: &'a str,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyEstimate {
    pub prefill_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
}

// ── Operations ──────────────────────────────────────────────────────────────

/// Estimated end-to-end latency of `request` on `replica`.
///
/// Prefill is one step at (batch + 1, prompt). Decode costs the predicted
/// response length times the per-token time, where the per-token time is the
/// reciprocal of the per-request decode throughput — one iteration — read at
/// the cache midpoint (prompt + predicted/2).
pub fn estimate_e2e(
    request: &RouteQuery,
    replica: &ReplicaSnapshot,
    profile: &CostProfile,
    predictor: &LengthPredictor,
) -> Result<LatencyEstimate> {
    let batch = replica.active_batch + 1;
    let predicted_len = predictor.predict(&LengthQuery {
        request_id: request.request_id,
        prompt_len: request.prompt_len,
        task_type: request.task_type,
        policy: &replica.policy,
    })?;
    let prefill_s = profile
        .predict_time(&replica.policy, Phase::Prefill, batch, request.prompt_len)?
        .total();
    let mid_kv = request.prompt_len + predicted_len / 2;
    let per_token_s = profile
        .predict_time(&replica.policy, Phase::Decode, batch, mid_kv)?
        .total();
    let decode_s = predicted_len as f64 * per_token_s;
    Ok(LatencyEstimate {
        prefill_s,
        decode_s,
        total_s: prefill_s + decode_s,
    })
}

/// Per-request decode rate on `replica` after admitting one more request:
/// the reciprocal of one iteration at (batch + 1, prompt).
fn per_request_decode_rate(
    request: &RouteQuery,
    replica: &ReplicaSnapshot,
    profile: &CostProfile,
) -> Result<f64> {
    let t = profile
        .predict_time(
            &replica.policy,
            Phase::Decode,
            replica.active_batch + 1,
            request.prompt_len,
        )?
        .total();
    if t <= 0.0 {
        return Err(Error::invalid(format!(
            "zero decode iteration time for policy '{}'",
            replica.policy
        )));
    }
    Ok(1.0 / t)
}

/// Pick a replica for `request` under `policy`. Ties break toward the
/// lowest replica id (snapshots are scanned in the given order with strict
/// improvement).
pub fn route(
    request: &RouteQuery,
    replicas: &[ReplicaSnapshot],
    policy: RoutingPolicy,
    profile: &CostProfile,
    predictor: &LengthPredictor,
) -> Result<usize> {
    if replicas.is_empty() {
        return Err(Error::invalid("route called with no replicas"));
    }

    // Score every replica; lower is better.
    let mut best: Option<(f64, usize)> = None;
    for snap in replicas {
        let score = match policy {
            RoutingPolicy::Baseline => snap.kv_bytes_used as f64,
            RoutingPolicy::Throughput => -per_request_decode_rate(request, snap, profile)?,
            RoutingPolicy::Length => {
                let len = predictor.predict(&LengthQuery {
                    request_id: request.request_id,
                    prompt_len: request.prompt_len,
                    task_type: request.task_type,
                    policy: &snap.policy,
                })?;
                len as f64
            }
            RoutingPolicy::Both => estimate_e2e(request, snap, profile, predictor)?.total_s,
        };
        if best.map_or(true, |(s, _)| score < s) {
            best = Some((score, snap.id));
        }
    }
    Ok(best.expect("at least one replica").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::parse_profile;
    use crate::lengthmodel::{train_oracle, LengthSample};
    use approx::assert_abs_diff_eq;

    const HEADER: &str = "policy,phase,batch,kv_len,attn_time_us,other_time_us\n";

    fn flat_profile(policies: &[(&str, f64, f64)]) -> CostProfile {
        // Constant prefill/decode times per policy over a wide grid.
        let mut csv = HEADER.to_string();
        for (policy, prefill_us, decode_us) in policies {
            for phase in ["prefill", "decode"] {
                for batch in [1u64, 64] {
                    for kv in [1u64, 1 << 20] {
                        let t = if *phase == "prefill" {
                            prefill_us
                        } else {
                            decode_us
                        };
                        csv.push_str(&format!("{policy},{phase},{batch},{kv},{t},0\n"));
                    }
                }
            }
        }
        parse_profile(csv.as_bytes(), "flat.csv").unwrap()
    }

    fn oracle_with(id: u64, lengths: &[(&str, u64)]) -> LengthPredictor {
        train_oracle(&[LengthSample {
            id,
            task_type: "qa".into(),
            prompt_len: 100,
            output_len: lengths.iter().map(|(p, l)| (p.to_string(), *l)).collect(),
        }])
        .unwrap()
    }

    fn snap(id: usize, policy: &str, batch: u64, bytes: u64) -> ReplicaSnapshot {
        ReplicaSnapshot {
            id,
            policy: policy.to_string(),
            active_batch: batch,
            kv_bytes_used: bytes,
        }
    }

    fn query() -> RouteQuery<'static> {
        RouteQuery {
            request_id: 1,
            prompt_len: 100,
            task_type: "qa",
        }
    }

    #[test]
    fn estimate_combines_prefill_and_decode() {
        // Predicted length 100 at 10ms per token plus 0.2s prefill = 1.2s.
        let profile = flat_profile(&[("fp16", 200_000.0, 10_000.0)]);
        let predictor = oracle_with(1, &[("fp16", 100)]);
        let est = estimate_e2e(&query(), &snap(0, "fp16", 0, 0), &profile, &predictor).unwrap();
        assert_abs_diff_eq!(est.prefill_s, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(est.decode_s, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(est.total_s, 1.2, epsilon = 1e-12);
    }

    #[test]
    fn minimal_decode_is_one_iteration() {
        let profile = flat_profile(&[("fp16", 200_000.0, 10_000.0)]);
        let predictor = oracle_with(1, &[("fp16", 1)]);
        let est = estimate_e2e(&query(), &snap(0, "fp16", 0, 0), &profile, &predictor).unwrap();
        assert_abs_diff_eq!(est.total_s, 0.2 + 0.01, epsilon = 1e-12);
    }

    #[test]
    fn decode_component_scales_with_iteration_time() {
        let profile = flat_profile(&[("slow", 200_000.0, 20_000.0), ("fast", 200_000.0, 10_000.0)]);
        let predictor = oracle_with(1, &[("slow", 100), ("fast", 100)]);
        let slow = estimate_e2e(&query(), &snap(0, "slow", 0, 0), &profile, &predictor).unwrap();
        let fast = estimate_e2e(&query(), &snap(1, "fast", 0, 0), &profile, &predictor).unwrap();
        assert_abs_diff_eq!(slow.decode_s, 2.0 * fast.decode_s, epsilon = 1e-12);
    }

    #[test]
    fn single_replica_wins_under_every_policy() {
        let profile = flat_profile(&[("fp16", 200_000.0, 10_000.0)]);
        let predictor = oracle_with(1, &[("fp16", 100)]);
        let snaps = vec![snap(0, "fp16", 2, 12345)];
        for policy in RoutingPolicy::all() {
            assert_eq!(
                route(&query(), &snaps, policy, &profile, &predictor).unwrap(),
                0
            );
        }
    }

    #[test]
    fn baseline_picks_least_memory() {
        let profile = flat_profile(&[("fp16", 200_000.0, 10_000.0)]);
        let predictor = oracle_with(1, &[("fp16", 100)]);
        let snaps = vec![snap(0, "fp16", 0, 10 << 20), snap(1, "fp16", 0, 5 << 20)];
        let picked =
            route(&query(), &snaps, RoutingPolicy::Baseline, &profile, &predictor).unwrap();
        assert_eq!(picked, 1);
    }

    #[test]
    fn both_prefers_dominating_replica() {
        // Same prefill, half the decode time: Both must pick it for any
        // positive predicted length.
        let profile = flat_profile(&[("slow", 200_000.0, 20_000.0), ("fast", 200_000.0, 10_000.0)]);
        let predictor = oracle_with(1, &[("slow", 100), ("fast", 100)]);
        let snaps = vec![snap(0, "slow", 0, 0), snap(1, "fast", 0, 0)];
        let picked = route(&query(), &snaps, RoutingPolicy::Both, &profile, &predictor).unwrap();
        assert_eq!(picked, 1);
    }

    #[test]
    fn throughput_prefers_faster_decode() {
        let profile = flat_profile(&[("slow", 200_000.0, 20_000.0), ("fast", 200_000.0, 10_000.0)]);
        let predictor = oracle_with(1, &[("slow", 100), ("fast", 100)]);
        let snaps = vec![snap(0, "slow", 0, 0), snap(1, "fast", 0, 0)];
        let picked = route(
            &query(),
            &snaps,
            RoutingPolicy::Throughput,
            &profile,
            &predictor,
        )
        .unwrap();
        assert_eq!(picked, 1);
    }

    #[test]
    fn length_prefers_shorter_response() {
        let profile = flat_profile(&[("a", 200_000.0, 10_000.0), ("b", 200_000.0, 10_000.0)]);
        let predictor = oracle_with(1, &[("a", 300), ("b", 120)]);
        let snaps = vec![snap(0, "a", 0, 0), snap(1, "b", 0, 0)];
        let picked = route(&query(), &snaps, RoutingPolicy::Length, &profile, &predictor).unwrap();
        assert_eq!(picked, 1);
    }

    #[test]
    fn ties_break_to_lowest_id() {
        let profile = flat_profile(&[("fp16", 200_000.0, 10_000.0)]);
        let predictor = oracle_with(1, &[("fp16", 100)]);
        let snaps = vec![snap(0, "fp16", 1, 777), snap(1, "fp16", 1, 777)];
        for policy in RoutingPolicy::all() {
            assert_eq!(
                route(&query(), &snaps, policy, &profile, &predictor).unwrap(),
                0,
                "policy {policy:?}"
            );
        }
    }

    #[test]
    fn scaling_all_times_preserves_choice() {
        // Argmin invariance: scaling every replica's times by a common
        // positive factor never changes the routed replica.
        let base = flat_profile(&[("a", 150_000.0, 9_000.0), ("b", 200_000.0, 7_000.0)]);
        let scaled = flat_profile(&[("a", 450_000.0, 27_000.0), ("b", 600_000.0, 21_000.0)]);
        let predictor = oracle_with(1, &[("a", 140), ("b", 190)]);
        let snaps = vec![snap(0, "a", 2, 0), snap(1, "b", 1, 0)];
        for policy in [RoutingPolicy::Throughput, RoutingPolicy::Both] {
            let before = route(&query(), &snaps, policy, &base, &predictor).unwrap();
            let after = route(&query(), &snaps, policy, &scaled, &predictor).unwrap();
            assert_eq!(before, after, "policy {policy:?}");
        }
    }

    #[test]
    fn empty_replica_set_rejected() {
        let profile = flat_profile(&[("fp16", 1.0, 1.0)]);
        let predictor = oracle_with(1, &[("fp16", 1)]);
        assert!(route(&query(), &[], RoutingPolicy::Baseline, &profile, &predictor).is_err());
    }

    #[test]
    fn policy_names_parse() {
        for p in RoutingPolicy::all() {
            assert_eq!(p.name().parse::<RoutingPolicy>().unwrap(), p);
        }
        assert!("rr".parse::<RoutingPolicy>().is_err());
    }
}
