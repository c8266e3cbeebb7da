//! Deterministic iteration-level simulator of multi-replica serving.
//!
//! Each replica runs FCFS continuous batching over a paged KV pool: queued
//! requests are admitted at step boundaries when their prompt pages fit,
//! admission groups prefill in one step billed at the group's longest
//! prompt, then the decode batch advances one token per iteration, billed at
//! the batch size and the largest cache in the batch. Eviction policies cap
//! a request's cache at the policy budget; quantized policies shrink the
//! bytes behind each page. There is no preemption. Everything is an exact
//! function of the inputs, so identical configs produce identical results.

mod arrivals;
mod request;

pub use arrivals::gen_poisson_arrivals;
pub use request::{load_trace, parse_trace, write_trace, Request};

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use crate::costmodel::{CostProfile, Phase};
use crate::error::{Error, Result};
use crate::lengthmodel::LengthPredictor;
use crate::quantkv::{kv_bytes, CompressionPolicy, FootprintModel};
use crate::router::{route, ReplicaSnapshot, RouteQuery, RoutingPolicy};

// ── Configuration and results ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ReplicaConfig {
    pub id: usize,
    pub policy: CompressionPolicy,
    /// Bytes available for KV pages (weights are not modeled).
    pub capacity_bytes: u64,
    /// Tokens per page.
    pub page_size: u64,
    pub max_batch: usize,
}

#[derive(Debug, Clone)]
pub struct SimInputs<'a> {
    pub replicas: &'a [ReplicaConfig],
    pub requests: &'a [Request],
    pub routing: RoutingPolicy,
    pub profile: &'a CostProfile,
    pub length_predictor: &'a LengthPredictor,
    pub footprint: &'a FootprintModel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RequestOutcome {
    Completed {
        id: u64,
        replica: usize,
        ttft_s: f64,
        e2e_s: f64,
    },
    /// The request could never fit the chosen replica's page pool.
    Rejected {
        id: u64,
        replica: usize,
        reason: String,
    },
}

impl RequestOutcome {
    pub fn id(&self) -> u64 {
        match self {
            RequestOutcome::Completed { id, .. } | RequestOutcome::Rejected { id, .. } => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ReplicaStats {
    pub id: usize,
    pub busy_s: f64,
    pub decode_busy_s: f64,
    pub decode_tokens: u64,
    /// High-water mark of KV pages held at any event time.
    pub peak_pages: u64,
    /// Pages the replica's pool holds in total.
    pub total_pages: u64,
    /// busy_s over the simulation horizon.
    pub utilization: f64,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    /// One outcome per input request, sorted by request id.
    pub outcomes: Vec<RequestOutcome>,
    pub replicas: Vec<ReplicaStats>,
    /// Time of the last event.
    pub horizon_s: f64,
}

// ── Metrics ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Aggregates {
    pub mean_e2e_s: f64,
    pub p50_e2e_s: f64,
    pub p99_e2e_s: f64,
    pub mean_ttft_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CdfPoint {
    pub latency_s: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Summary {
    pub completed: usize,
    pub rejected: usize,
    /// Absent (not zero) when nothing completed.
    pub aggregates: Option<Aggregates>,
    /// Empirical CDF of end-to-end latency as sorted (latency, fraction)
    /// steps.
    pub cdf: Vec<CdfPoint>,
}

/// Nearest-rank percentile of a sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Aggregate a simulation result into mean/p50/p99 latencies and CDF points.
pub fn metrics(result: &SimResult) -> Summary {
    let mut e2es = Vec::new();
    let mut ttft_sum = 0.0;
    let mut rejected = 0;
    for outcome in &result.outcomes {
        match outcome {
            RequestOutcome::Completed { ttft_s, e2e_s, .. } => {
                e2es.push(*e2e_s);
                ttft_sum += ttft_s;
            }
            RequestOutcome::Rejected { .. } => rejected += 1,
        }
    }
    e2es.sort_by(f64::total_cmp);

    let aggregates = if e2es.is_empty() {
        None
    } else {
        Some(Aggregates {
            mean_e2e_s: e2es.iter().sum::<f64>() / e2es.len() as f64,
            p50_e2e_s: percentile(&e2es, 50.0),
            p99_e2e_s: percentile(&e2es, 99.0),
            mean_ttft_s: ttft_sum / e2es.len() as f64,
        })
    };

    let n = e2es.len() as f64;
    let mut cdf = Vec::new();
    let mut seen = 0usize;
    let mut i = 0;
    while i < e2es.len() {
        let v = e2es[i];
        while i < e2es.len() && e2es[i] == v {
            seen += 1;
            i += 1;
        }
        cdf.push(CdfPoint {
            latency_s: v,
            fraction: seen as f64 / n,
        });
    }

    Summary {
        completed: e2es.len(),
        rejected,
        aggregates,
        cdf,
    }
}

// ── Event loop internals ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    /// The running step on a replica finishes.
    StepEnd { replica: usize },
    /// A request arrives and gets routed.
    Arrival { request: usize },
    /// Deferred step start, fired after every same-instant completion and
    /// arrival has been applied so one admission sees them all.
    Kick { replica: usize },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    /// At the same instant: step ends first (freeing pages), then arrivals,
    /// then kicks that start the next step.
    prio: u8,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: the binary heap pops the earliest event first.
        other
            .time
            .total_cmp(&self.time)
            .then(other.prio.cmp(&self.prio))
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug)]
struct Active {
    req: usize,
    output_len: u64,
    cache_tokens: u64,
    pages_held: u64,
    tokens_generated: u64,
    first_token_at: Option<f64>,
}

#[derive(Debug)]
enum Step {
    Prefill,
    Decode { generating: Vec<usize> },
}

struct ReplicaRt {
    policy: CompressionPolicy,
    policy_id: String,
    budget: Option<u64>,
    page_size: u64,
    total_pages: u64,
    free_pages: u64,
    max_batch: usize,
    queue: VecDeque<usize>,
    prefilling: Vec<Active>,
    decoding: Vec<Active>,
    step: Option<Step>,
    step_start: f64,
    busy_s: f64,
    decode_busy_s: f64,
    decode_tokens: u64,
}

impl ReplicaRt {
    fn active_count(&self) -> usize {
        self.prefilling.len() + self.decoding.len()
    }

    fn pages_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.page_size)
    }

    /// Cache tokens after appending one decoded token, honoring the policy
    /// budget.
    fn grown_cache(&self, cache_tokens: u64) -> u64 {
        match self.budget {
            Some(b) => (cache_tokens + 1).min(b.max(1)),
            None => cache_tokens + 1,
        }
    }

    fn kv_bytes_used(&self, fm: &FootprintModel) -> u64 {
        self.prefilling
            .iter()
            .chain(&self.decoding)
            .map(|a| kv_bytes(&self.policy, a.cache_tokens, fm))
            .sum()
    }
}

struct Engine<'a> {
    inputs: &'a SimInputs<'a>,
    replicas: Vec<ReplicaRt>,
    events: BinaryHeap<Event>,
    seq: u64,
    outcomes: Vec<RequestOutcome>,
    horizon: f64,
    peak_pages: Vec<u64>,
}

impl<'a> Engine<'a> {
    fn push_event(&mut self, time: f64, prio: u8, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event {
            time,
            prio,
            seq: self.seq,
            kind,
        });
    }

    fn snapshots(&self) -> Vec<ReplicaSnapshot> {
        self.replicas
            .iter()
            .enumerate()
            .map(|(id, r)| ReplicaSnapshot {
                id,
                policy: r.policy_id.clone(),
                active_batch: r.active_count() as u64,
                kv_bytes_used: r.kv_bytes_used(self.inputs.footprint),
            })
            .collect()
    }

    fn handle_arrival(&mut self, t: f64, req_idx: usize) -> Result<()> {
        let request = &self.inputs.requests[req_idx];
        let snaps = self.snapshots();
        let chosen = route(
            &RouteQuery {
                request_id: request.id,
                prompt_len: request.prompt_len,
                task_type: &request.task_type,
            },
            &snaps,
            self.inputs.routing,
            self.inputs.profile,
            self.inputs.length_predictor,
        )?;

        let replica = &mut self.replicas[chosen];
        let prompt_pages = replica.pages_for(request.prompt_len);
        if prompt_pages > replica.total_pages {
            self.outcomes.push(RequestOutcome::Rejected {
                id: request.id,
                replica: chosen,
                reason: format!(
                    "prompt needs {prompt_pages} pages, replica {chosen} has {}",
                    replica.total_pages
                ),
            });
            return Ok(());
        }
        replica.queue.push_back(req_idx);
        self.push_event(t, 2, EventKind::Kick { replica: chosen });
        Ok(())
    }

    /// Run admissions at a step boundary, then start prefill or decode.
    fn start_next_step(&mut self, t: f64, rid: usize) -> Result<()> {
        let replica = &mut self.replicas[rid];
        if replica.step.is_some() {
            return Ok(()); // stale kick; a step is already running
        }

        // FCFS admission: stop at the first request that does not fit.
        while let Some(&front) = replica.queue.front() {
            if replica.active_count() >= replica.max_batch {
                break;
            }
            let prompt = self.inputs.requests[front].prompt_len;
            let pages = replica.pages_for(prompt);
            if pages > replica.free_pages {
                break;
            }
            replica.queue.pop_front();
            replica.free_pages -= pages;
            let request = &self.inputs.requests[front];
            let output_len = request.output_len[&replica.policy_id];
            replica.prefilling.push(Active {
                req: front,
                output_len,
                cache_tokens: prompt,
                pages_held: pages,
                tokens_generated: 0,
                first_token_at: None,
            });
        }

        if !replica.prefilling.is_empty() {
            let batch = replica.prefilling.len() as u64;
            let longest = replica
                .prefilling
                .iter()
                .map(|a| self.inputs.requests[a.req].prompt_len)
                .max()
                .unwrap();
            let duration = self
                .inputs
                .profile
                .predict_time(&replica.policy_id, Phase::Prefill, batch, longest)?
                .total();
            replica.step = Some(Step::Prefill);
            replica.step_start = t;
            self.push_event(t + duration, 0, EventKind::StepEnd { replica: rid });
            return Ok(());
        }

        if !replica.decoding.is_empty() {
            // A request generates this iteration only if the page for its
            // next token can be claimed now.
            let mut generating = Vec::with_capacity(replica.decoding.len());
            let mut max_kv = 0u64;
            for (i, active) in replica.decoding.iter_mut().enumerate() {
                let next_cache = match replica.budget {
                    Some(b) => (active.cache_tokens + 1).min(b.max(1)),
                    None => active.cache_tokens + 1,
                };
                let needed = next_cache.div_ceil(replica.page_size);
                if needed > active.pages_held {
                    let extra = needed - active.pages_held;
                    if extra > replica.free_pages {
                        continue; // stalled until pages free up
                    }
                    replica.free_pages -= extra;
                    active.pages_held = needed;
                }
                active.cache_tokens = next_cache;
                max_kv = max_kv.max(next_cache);
                generating.push(i);
            }
            if generating.is_empty() {
                return Err(Error::Sim(format!(
                    "replica {rid} page pool exhausted: {} decoding requests stalled with {} free pages",
                    replica.decoding.len(),
                    replica.free_pages
                )));
            }
            let batch = generating.len() as u64;
            let duration = self
                .inputs
                .profile
                .predict_time(&replica.policy_id, Phase::Decode, batch, max_kv)?
                .total();
            replica.step = Some(Step::Decode { generating });
            replica.step_start = t;
            self.push_event(t + duration, 0, EventKind::StepEnd { replica: rid });
        }
        Ok(())
    }

    fn handle_step_end(&mut self, t: f64, rid: usize) -> Result<()> {
        let replica = &mut self.replicas[rid];
        let duration = t - replica.step_start;
        replica.busy_s += duration;

        match replica.step.take().expect("step end on an idle replica") {
            Step::Prefill => {
                // Prefilled requests join the decode set; eviction policies
                // trim the cache (and its pages) down to budget first.
                for mut active in replica.prefilling.drain(..) {
                    if let Some(budget) = replica.budget {
                        let capped = active.cache_tokens.min(budget.max(1));
                        let pages = capped.div_ceil(replica.page_size);
                        replica.free_pages += active.pages_held - pages;
                        active.pages_held = pages;
                        active.cache_tokens = capped;
                    }
                    replica.decoding.push(active);
                }
            }
            Step::Decode { generating } => {
                replica.decode_busy_s += duration;
                replica.decode_tokens += generating.len() as u64;
                let mut finished = Vec::new();
                for i in generating {
                    let active = &mut replica.decoding[i];
                    active.tokens_generated += 1;
                    if active.first_token_at.is_none() {
                        active.first_token_at = Some(t);
                    }
                    if active.tokens_generated == active.output_len {
                        finished.push(i);
                    }
                }
                for &i in finished.iter().rev() {
                    let active = replica.decoding.remove(i);
                    replica.free_pages += active.pages_held;
                    let request = &self.inputs.requests[active.req];
                    let arrival = request.arrival();
                    self.outcomes.push(RequestOutcome::Completed {
                        id: request.id,
                        replica: rid,
                        ttft_s: active.first_token_at.expect("finished has first token")
                            - arrival,
                        e2e_s: t - arrival,
                    });
                }
            }
        }

        self.push_event(t, 2, EventKind::Kick { replica: rid });
        Ok(())
    }

    /// Memory invariant: pages in use never exceed the pool.
    fn note_pages(&mut self) {
        for (rid, replica) in self.replicas.iter().enumerate() {
            let held: u64 = replica
                .prefilling
                .iter()
                .chain(&replica.decoding)
                .map(|a| a.pages_held)
                .sum();
            debug_assert!(
                held + replica.free_pages == replica.total_pages,
                "replica {rid} page accounting drifted"
            );
            self.peak_pages[rid] = self.peak_pages[rid].max(held);
        }
    }
}

// ── Entry point ─────────────────────────────────────────────────────────────

fn validate_inputs(inputs: &SimInputs) -> Result<()> {
    if inputs.replicas.is_empty() {
        return Err(Error::invalid("simulation needs at least one replica"));
    }
    for (i, cfg) in inputs.replicas.iter().enumerate() {
        if cfg.id != i {
            return Err(Error::invalid(format!(
                "replica ids must be contiguous from 0; found id {} at position {i}",
                cfg.id
            )));
        }
        if cfg.page_size == 0 {
            return Err(Error::invalid(format!("replica {i}: page_size must be >= 1")));
        }
        if cfg.max_batch == 0 {
            return Err(Error::invalid(format!("replica {i}: max_batch must be >= 1")));
        }
        let page_bytes = inputs.footprint.page_bytes(&cfg.policy, cfg.page_size);
        if cfg.capacity_bytes / page_bytes == 0 {
            return Err(Error::invalid(format!(
                "replica {i}: capacity {} bytes holds no {}-token pages ({} bytes each)",
                cfg.capacity_bytes, cfg.page_size, page_bytes
            )));
        }
        let id = cfg.policy.id();
        for phase in [Phase::Prefill, Phase::Decode] {
            if !inputs.profile.has(id, phase) {
                return Err(Error::invalid(format!(
                    "cost profile has no ({id}, {phase}) grid required by replica {i}"
                )));
            }
        }
    }
    let mut prev_arrival = 0.0;
    for request in inputs.requests {
        request.validate()?;
        let arrival = request.arrival_time.ok_or_else(|| {
            Error::invalid(format!(
                "request {}: arrival_time missing; generate arrivals first",
                request.id
            ))
        })?;
        if arrival < prev_arrival {
            return Err(Error::invalid("requests must be sorted by arrival time"));
        }
        prev_arrival = arrival;
        for cfg in inputs.replicas {
            if !request.output_len.contains_key(cfg.policy.id()) {
                return Err(Error::invalid(format!(
                    "request {}: no output_len for policy '{}'",
                    request.id,
                    cfg.policy.id()
                )));
            }
        }
    }
    Ok(())
}

/// Run the event loop to completion.
///
/// The result is a pure function of the inputs; `_seed` is accepted for
/// interface stability but nothing in the loop draws randomness.
pub fn simulate(inputs: &SimInputs, _seed: u64) -> Result<SimResult> {
    validate_inputs(inputs)?;

    let replicas = inputs
        .replicas
        .iter()
        .map(|cfg| {
            let page_bytes = inputs.footprint.page_bytes(&cfg.policy, cfg.page_size);
            let total_pages = cfg.capacity_bytes / page_bytes;
            ReplicaRt {
                policy: cfg.policy.clone(),
                policy_id: cfg.policy.id().to_string(),
                budget: cfg.policy.cache_budget(),
                page_size: cfg.page_size,
                total_pages,
                free_pages: total_pages,
                max_batch: cfg.max_batch,
                queue: VecDeque::new(),
                prefilling: Vec::new(),
                decoding: Vec::new(),
                step: None,
                step_start: 0.0,
                busy_s: 0.0,
                decode_busy_s: 0.0,
                decode_tokens: 0,
            }
        })
        .collect();

    let mut engine = Engine {
        inputs,
        replicas,
        events: BinaryHeap::new(),
        seq: 0,
        outcomes: Vec::with_capacity(inputs.requests.len()),
        horizon: 0.0,
    };
    for (idx, request) in inputs.requests.iter().enumerate() {
        engine.push_event(request.arrival(), 1, EventKind::Arrival { request: idx });
    }

    while let Some(event) = engine.events.pop() {
        engine.horizon = engine.horizon.max(event.time);
        match event.kind {
            EventKind::Arrival { request } => engine.handle_arrival(event.time, request)?,
            EventKind::StepEnd { replica } => engine.handle_step_end(event.time, replica)?,
        }
    }

    // Conservation: every request either completed or was rejected.
    if engine.outcomes.len() != inputs.requests.len() {
        return Err(Error::Sim(format!(
            "{} of {} requests unaccounted for at end of simulation",
            inputs.requests.len() - engine.outcomes.len(),
            inputs.requests.len()
        )));
    }

    engine.outcomes.sort_by_key(RequestOutcome::id);
    let horizon = engine.horizon;
    let stats = engine
        .replicas
        .iter()
        .enumerate()
        .map(|(id, r)| ReplicaStats {
            id,
            busy_s: r.busy_s,
            decode_busy_s: r.decode_busy_s,
            decode_tokens: r.decode_tokens,
            utilization: if horizon > 0.0 { r.busy_s / horizon } else { 0.0 },
        })
        .collect();

    Ok(SimResult {
        outcomes: engine.outcomes,
        replicas: stats,
        horizon_s: horizon,
    })
}

#[cfg(test)]
mod tests;
