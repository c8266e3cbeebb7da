//! Toy causal attention and the two sparsity eviction policies.
//!
//! Eviction follows the three policy axes: an importance metric (accumulated
//! attention score for the heavy-hitter policy), an eviction scope (sink
//! tokens and the recent window are protected), and a fixed token budget.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quantkv::Matrix;

// ── Domain types ────────────────────────────────────────────────────────────

/// Toy transformer dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub batch: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl ModelDims {
    pub fn new(
        batch: usize,
        seq_len: usize,
        hidden: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if batch == 0 || seq_len == 0 || hidden == 0 || heads == 0 || head_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if hidden != heads * head_dim {
            return Err(Error::invalid(format!(
                "hidden {} != heads {} x head_dim {}",
                hidden, heads, head_dim
            )));
        }
        Ok(Self {
            batch,
            seq_len,
            hidden,
            heads,
            head_dim,
        })
    }
}

/// Square projection weights for keys, queries, and values.
#[derive(Debug, Clone)]
pub struct ToyLayer {
    pub w_k: Matrix,
    pub w_q: Matrix,
    pub w_v: Matrix,
}

impl ToyLayer {
    /// Seeded uniform(-0.5, 0.5) projections; used by property tests.
    pub fn seeded(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |_: &str| Matrix::from_fn(hidden, hidden, |_, _| rng.gen_range(-0.5..0.5));
        Self {
            w_k: mk("k"),
            w_q: mk("q"),
            w_v: mk("v"),
        }
    }
}

/// Eviction policy configuration: which tokens are protected and how many
/// survive, re-evaluated every `interval` decode steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvictionVariant {
    StreamingLlm { sink: usize, recent: usize },
    H2O { heavy: usize, recent: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvictionPolicy {
    pub variant: EvictionVariant,
    /// Decode steps between evictions; defaults to 1.
    pub interval: usize,
}

impl EvictionPolicy {
    pub fn new(variant: EvictionVariant, interval: usize) -> Result<Self> {
        if interval == 0 {
            return Err(Error::invalid("eviction interval must be >= 1"));
        }
        let budget = match variant {
            EvictionVariant::StreamingLlm { sink, recent } => sink + recent,
            EvictionVariant::H2O { heavy, recent } => heavy + recent,
        };
        if budget == 0 {
            return Err(Error::invalid("eviction budget must be positive"));
        }
        Ok(Self { variant, interval })
    }

    pub fn budget(&self) -> usize {
        match self.variant {
            EvictionVariant::StreamingLlm { sink, recent } => sink + recent,
            EvictionVariant::H2O { heavy, recent } => heavy + recent,
        }
    }
}

/// Retained token indices with their accumulated attention scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CacheState {
    retained: Vec<usize>,
    accumulated_score: Vec<f64>,
    step: u64,
}

impl CacheState {
    /// Fresh cache over tokens `0..seq_len` with zero scores.
    pub fn full(seq_len: usize) -> Self {
        Self {
            retained: (0..seq_len).collect(),
            accumulated_score: vec![0.0; seq_len],
            step: 0,
        }
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn scores(&self) -> &[f64] {
        &self.accumulated_score
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    /// Append a newly decoded token (index must exceed the current tail).
    pub fn push_token(&mut self, index: usize) -> Result<()> {
        if let Some(&last) = self.retained.last() {
            if index <= last {
                return Err(Error::invalid(format!(
                    "token index {index} not greater than current tail {last}"
                )));
            }
        }
        self.retained.push(index);
        self.accumulated_score.push(0.0);
        Ok(())
    }

    /// Add one decode step's attention row into the running scores.
    pub fn accumulate_scores(&mut self, new_scores: &[f64]) -> Result<()> {
        if new_scores.len() != self.retained.len() {
            return Err(Error::invalid(format!(
                "score row length {} != retained count {}",
                new_scores.len(),
                self.retained.len()
            )));
        }
        for (acc, s) in self.accumulated_score.iter_mut().zip(new_scores) {
            *acc += s;
        }
        self.step += 1;
        Ok(())
    }

    /// Drop every token not in `keep` (which must be a sorted subset of the
    /// retained indices). Scores of evicted tokens are discarded.
    pub fn retain_only(&mut self, keep: &[usize]) {
        let mut keep_iter = keep.iter().peekable();
        let mut retained = Vec::with_capacity(keep.len());
        let mut scores = Vec::with_capacity(keep.len());
        for (idx, score) in self.retained.iter().zip(&self.accumulated_score) {
            if keep_iter.peek() == Some(&idx) {
                keep_iter.next();
                retained.push(*idx);
                scores.push(*score);
            }
        }
        self.retained = retained;
        self.accumulated_score = scores;
    }
}

// ── Operations ──────────────────────────────────────────────────────────────

/// Scaled dot-product attention over a toy cache.
///
/// `q` is either a single decode row (1 x d) or a causal block (l x d, which
/// requires `k` to have l rows too). Returns the attention output and the
/// score matrix; every score row sums to 1.
pub fn toy_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
    if q.cols() != k.cols() {
        return Err(Error::invalid(format!(
            "query width {} != key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::invalid(format!(
            "key rows {} != value rows {}",
            k.rows(),
            v.rows()
        )));
    }
    if k.rows() == 0 {
        return Err(Error::invalid("attention over an empty cache"));
    }
    let causal = q.rows() > 1;
    if causal && q.rows() != k.rows() {
        return Err(Error::invalid(format!(
            "causal attention needs square scores, got {} queries over {} keys",
            q.rows(),
            k.rows()
        )));
    }

    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let visible = if causal { i + 1 } else { k.rows() };
        // Stable softmax over the visible prefix.
        let mut logits = Vec::with_capacity(visible);
        let mut max_logit = f64::NEG_INFINITY;
        for j in 0..visible {
            let dot: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            let logit = dot * scale;
            max_logit = max_logit.max(logit);
            logits.push(logit);
        }
        let mut denom = 0.0;
        for logit in logits.iter_mut() {
            *logit = (*logit - max_logit).exp();
            denom += *logit;
        }
        for (j, w) in logits.iter().enumerate() {
            scores.set(i, j, w / denom);
        }
    }

    let out = scores.matmul(v)?;
    Ok((out, scores))
}

/// Tokens retained by sink + recent-window eviction: the first `sink` and
/// last `recent` positions, or everything when the sequence fits the budget.
pub fn evict_streaming(seq_len: usize, sink: usize, recent: usize) -> Vec<usize> {
    if seq_len <= sink + recent {
        return (0..seq_len).collect();
    }
    let mut keep: Vec<usize> = (0..sink).collect();
    keep.extend(seq_len - recent..seq_len);
    keep
}

/// Tokens retained by heavy-hitter eviction over `state`.
///
/// The last `recent` retained tokens survive unconditionally; among the
/// rest, the `heavy` highest accumulated scores survive, ties broken toward
/// the more recent (higher) index. Returns sorted token indices.
pub fn evict_h2o(state: &CacheState, heavy: usize, recent: usize) -> Vec<usize> {
    let seq = state.retained.len();
    if seq <= heavy + recent {
        return state.retained.clone();
    }
    let cut = seq - recent;
    let mut candidates: Vec<(usize, f64)> = state.retained[..cut]
        .iter()
        .zip(&state.accumulated_score[..cut])
        .map(|(&idx, &score)| (idx, score))
        .collect();
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(b.0.cmp(&a.0)));
    let mut keep: Vec<usize> = candidates.iter().take(heavy).map(|(idx, _)| *idx).collect();
    keep.extend_from_slice(&state.retained[cut..]);
    keep.sort_unstable();
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn attention_over_single_token() {
        let q = Matrix::new(1, 2, vec![0.3, -0.7]).unwrap();
        let k = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let v = Matrix::new(1, 3, vec![5.0, 6.0, 7.0]).unwrap();
        let (out, scores) = toy_attention(&q, &k, &v).unwrap();
        assert_eq!(scores.data(), &[1.0]);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn equal_logits_split_evenly() {
        let q = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        // Both keys produce the same dot product with q.
        let k = Matrix::new(2, 2, vec![0.4, 9.0, 0.4, -3.0]).unwrap();
        let v = Matrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        let (out, scores) = toy_attention(&q, &k, &v).unwrap();
        assert_eq!(scores.data(), &[0.5, 0.5]);
        assert_abs_diff_eq!(out.get(0, 0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn causal_matches_naive_reference() {
        let q = Matrix::random_uniform(8, 4, -1.0, 1.0, 21);
        let k = Matrix::random_uniform(8, 4, -1.0, 1.0, 22);
        let v = Matrix::random_uniform(8, 4, -1.0, 1.0, 23);
        let (out, scores) = toy_attention(&q, &k, &v).unwrap();

        // Naive three-loop reference with an explicit causal mask.
        let scale = 1.0 / 2.0;
        for i in 0..8 {
            let mut weights = vec![0.0; 8];
            let mut denom = 0.0;
            for j in 0..=i {
                let mut dot = 0.0;
                for d in 0..4 {
                    dot += q.get(i, d) * k.get(j, d);
                }
                weights[j] = (dot * scale).exp();
                denom += weights[j];
            }
            let mut row_sum = 0.0;
            for j in 0..8 {
                let expected = weights[j] / denom;
                assert_abs_diff_eq!(scores.get(i, j), expected, epsilon = 1e-12);
                row_sum += scores.get(i, j);
            }
            assert_abs_diff_eq!(row_sum, 1.0, epsilon = 1e-12);
            for d in 0..4 {
                let mut expected = 0.0;
                for j in 0..=i {
                    expected += (weights[j] / denom) * v.get(j, d);
                }
                assert_abs_diff_eq!(out.get(i, d), expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_mismatched_shapes() {
        let q = Matrix::zeros(1, 3);
        let k = Matrix::zeros(2, 4);
        let v = Matrix::zeros(2, 4);
        assert!(toy_attention(&q, &k, &v).is_err());
        let q2 = Matrix::zeros(3, 4);
        assert!(toy_attention(&q2, &k, &v).is_err());
    }

    #[test]
    fn accumulate_adds_rows() {
        let mut state = CacheState::full(2);
        state.accumulate_scores(&[0.2, 0.8]).unwrap();
        state.accumulate_scores(&[0.3, 0.7]).unwrap();
        assert_eq!(state.scores(), &[0.5, 1.5]);
        assert_eq!(state.step(), 2);
    }

    #[test]
    fn accumulate_zero_row_only_bumps_step() {
        let mut state = CacheState::full(3);
        state.accumulate_scores(&[0.1, 0.2, 0.7]).unwrap();
        let before = state.scores().to_vec();
        state.accumulate_scores(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(state.scores(), before.as_slice());
        assert_eq!(state.step(), 2);
    }

    #[test]
    fn accumulate_on_fresh_state_equals_first_row() {
        let mut state = CacheState::full(3);
        state.accumulate_scores(&[0.5, 0.25, 0.25]).unwrap();
        assert_eq!(state.scores(), &[0.5, 0.25, 0.25]);
    }

    #[test]
    fn accumulate_rejects_length_mismatch() {
        let mut state = CacheState::full(3);
        assert!(state.accumulate_scores(&[1.0]).is_err());
    }

    #[test]
    fn streaming_keeps_sink_and_recent() {
        let keep = evict_streaming(1000, 64, 448);
        assert_eq!(keep.len(), 512);
        assert!(keep[..64].iter().copied().eq(0..64));
        assert!(keep[64..].iter().copied().eq(552..1000));
    }

    #[test]
    fn streaming_under_budget_keeps_all() {
        let keep = evict_streaming(100, 64, 448);
        assert!(keep.iter().copied().eq(0..100));
    }

    #[test]
    fn streaming_small_case() {
        assert_eq!(evict_streaming(6, 2, 2), vec![0, 1, 4, 5]);
    }

    #[test]
    fn h2o_keeps_heavy_and_recent() {
        let mut state = CacheState::full(6);
        state
            .accumulate_scores(&[0.5, 0.1, 0.9, 0.3, 0.0, 0.0])
            .unwrap();
        assert_eq!(evict_h2o(&state, 2, 2), vec![0, 2, 4, 5]);
    }

    #[test]
    fn h2o_under_budget_keeps_all() {
        let state = CacheState::full(4);
        assert_eq!(evict_h2o(&state, 3, 2), vec![0, 1, 2, 3]);
    }

    #[test]
    fn h2o_ties_prefer_recent() {
        let mut state = CacheState::full(4);
        state.accumulate_scores(&[0.5, 0.5, 0.1, 0.0]).unwrap();
        assert_eq!(evict_h2o(&state, 1, 1), vec![1, 3]);
    }

    #[test]
    fn retain_only_drops_scores_of_evicted() {
        let mut state = CacheState::full(4);
        state.accumulate_scores(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        state.retain_only(&[1, 3]);
        assert_eq!(state.retained(), &[1, 3]);
        assert_eq!(state.scores(), &[2.0, 4.0]);
    }

    #[test]
    fn push_token_enforces_order() {
        let mut state = CacheState::full(3);
        assert!(state.push_token(3).is_ok());
        assert!(state.push_token(2).is_err());
    }

    #[test]
    fn projections_feed_attention() {
        // End-to-end toy path: project a prompt, attend causally, accumulate,
        // evict, and check the protected scopes survive.
        let dims = ModelDims::new(1, 10, 8, 2, 4).unwrap();
        let layer = ToyLayer::seeded(dims.hidden, 77);
        let x = Matrix::random_uniform(dims.seq_len, dims.hidden, -0.5, 0.5, 78);
        let keys = x.matmul(&layer.w_k).unwrap();
        let queries = x.matmul(&layer.w_q).unwrap();
        let values = x.matmul(&layer.w_v).unwrap();
        let (_, scores) = toy_attention(&queries, &keys, &values).unwrap();

        let mut state = CacheState::full(dims.seq_len);
        // Accumulate the final row (the newest token's view of the cache).
        state
            .accumulate_scores(scores.row(dims.seq_len - 1))
            .unwrap();
        let keep = evict_h2o(&state, 2, 3);
        assert_eq!(keep.len(), 5);
        for recent in 7..10 {
            assert!(keep.contains(&recent));
        }
        state.retain_only(&keep);
        assert_eq!(state.len(), 5);
    }
}
