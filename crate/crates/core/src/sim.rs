//! Deterministic discrete-event serving simulation.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet, VecDeque};
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunks::CacheConfig;
use crate::cost::{BandwidthConfig, CopyMode, CostError, CostModel, ModelProfile, ProfileSet};
use crate::engine::{
    Engine, EngineConfig, EngineError, EngineStats, Policy, Request, RequestRecord, RequestState, StepTrace,
};
use crate::prefetch::PrefetchLogEntry;
use crate::report::{LatencySummary, ReportError, SweepRow};
use crate::workload::WorkloadSpec;

const ARRIVAL_STREAM: u64 = 0x0a77;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("workload is empty")]
    EmptyWorkload,
}

/// A tier size, either absolute or relative to the trace's working set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Capacity {
    Bytes { bytes: u64 },
    WorkingSetFraction { working_set_fraction: f64 },
}

impl Capacity {
    pub fn resolve(self, working_set_bytes: u64) -> u64 {
        match self {
            Capacity::Bytes { bytes } => bytes,
            Capacity::WorkingSetFraction { working_set_fraction } => {
                (working_set_fraction * working_set_bytes as f64).round() as u64
            }
        }
    }

    fn valid(self) -> bool {
        match self {
            Capacity::Bytes { .. } => true,
            Capacity::WorkingSetFraction {
                working_set_fraction: f,
            } => f.is_finite() && f >= 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    /// Poisson arrival rate, requests per second.
    pub request_rate: f64,
    pub retrieval_latency_s: f64,
    pub policy: Policy,
    /// Built-in profile name, used unless `model_profile` is given.
    pub model: String,
    pub model_profile: Option<ModelProfile>,
    pub bandwidth: BandwidthConfig,
    /// Overrides `bandwidth.per_copy_overhead_s` with a preset.
    pub copy_mode: Option<CopyMode>,
    pub cache: CacheConfig,
    pub dram_capacity: Capacity,
    pub ssd_capacity: Capacity,
    pub engine: EngineConfig,
    pub workload: WorkloadSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            request_rate: 1.0,
            retrieval_latency_s: 0.02,
            policy: Policy::Pcr,
            model: "qwen2.5-14b".to_string(),
            model_profile: None,
            bandwidth: BandwidthConfig::default(),
            copy_mode: None,
            cache: CacheConfig::default(),
            dram_capacity: Capacity::WorkingSetFraction {
                working_set_fraction: 0.5,
            },
            ssd_capacity: Capacity::WorkingSetFraction {
                working_set_fraction: 1.0,
            },
            engine: EngineConfig::default(),
            workload: WorkloadSpec::default(),
        }
    }
}

impl SimConfig {
    pub fn from_json(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.request_rate.is_finite() && self.request_rate > 0.0) {
            return Err(SimError::Config("request_rate must be positive".into()));
        }
        if !(self.retrieval_latency_s.is_finite() && self.retrieval_latency_s >= 0.0) {
            return Err(SimError::Config("retrieval_latency_s must be non-negative".into()));
        }
        if !self.dram_capacity.valid() || !self.ssd_capacity.valid() {
            return Err(SimError::Config("capacities must be non-negative".into()));
        }
        self.cache.validate().map_err(|e| SimError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn cost_model(&self) -> Result<CostModel, SimError> {
        let profile = match &self.model_profile {
            Some(p) => p.clone(),
            None => ProfileSet::builtin().get(&self.model)?.clone(),
        };
        let bw = match self.copy_mode {
            Some(mode) => self.bandwidth.with_copy_mode(mode),
            None => self.bandwidth,
        };
        Ok(CostModel::from_profile(&profile, bw, self.cache.chunk_size)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefetchSummary {
    pub submitted: u64,
    pub completed: u64,
    pub cancelled: u64,
    pub failed: u64,
    pub prefetched_hits: u64,
    pub sync_ssd_hits: u64,
    /// Prefetched hits over all SSD-sourced hits.
    pub success_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: Policy,
    pub request_rate: f64,
    pub window: usize,
    pub seed: u64,
    pub n_requests: usize,
    pub dram_capacity_bytes: u64,
    pub ssd_capacity_bytes: u64,
    pub working_set_bytes: u64,
    pub ttft: LatencySummary,
    pub e2el: LatencySummary,
    pub queue: LatencySummary,
    pub dram_hit_ratio: f64,
    pub ssd_hit_ratio: f64,
    pub prefetch: PrefetchSummary,
    pub engine: EngineStats,
    pub sim_end_s: f64,
    pub requests: Vec<RequestRecord>,
}

impl SimReport {
    pub fn sweep_row(&self) -> SweepRow {
        SweepRow {
            policy: self.policy,
            rate: self.request_rate,
            window: self.window,
            seed: self.seed,
            mean_ttft_s: self.ttft.mean,
            p50: self.ttft.p50,
            p75: self.ttft.p75,
            p90: self.ttft.p90,
            p95: self.ttft.p95,
            p99: self.ttft.p99,
            mean_e2el_s: self.e2el.mean,
            p99_e2el_s: self.e2el.p99,
            dram_hit: self.dram_hit_ratio,
            ssd_hit: self.ssd_hit_ratio,
            prefetch_success: self.prefetch.success_ratio,
        }
    }

    pub fn write_json<W: Write>(&self, w: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(w, self)
    }

    /// One row per request.
    pub fn write_requests_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.requests {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Report plus the step trace and prefetch log of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub report: SimReport,
    pub steps: Vec<StepTrace>,
    pub prefetch_log: Vec<PrefetchLogEntry>,
}

impl SimOutput {
    /// Step trace as JSON Lines.
    pub fn write_steps_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_prefetch_log_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.prefetch_log {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Arrival(usize),
    Retrieved(usize),
    StepDone,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
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
    // reversed: BinaryHeap pops the earliest (time, seq) first
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

struct Queue {
    heap: BinaryHeap<Event>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, time: f64, kind: EventKind) {
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
        });
        self.seq += 1;
    }
}

/// Distinct cacheable chunk bytes across the trace.
pub fn working_set_bytes(requests: &[Request], chunk_bytes: u64) -> u64 {
    let keys: HashSet<_> = requests.iter().flat_map(|r| r.chain.iter().map(|l| l.key)).collect();
    keys.len() as u64 * chunk_bytes
}

/// Exponential inter-arrival times at `rate`, from the seeded arrival stream.
pub fn poisson_arrivals(n: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ARRIVAL_STREAM);
    let exp = Exp::new(rate).expect("positive rate");
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            t += exp.sample(&mut rng);
            t
        })
        .collect()
}

/// Simulate `requests` under `config`. Arrival times on the requests are
/// replaced by the Poisson process.
pub fn run(config: &SimConfig, requests: &[Request]) -> Result<SimOutput, SimError> {
    config.validate()?;
    if requests.is_empty() {
        return Err(SimError::EmptyWorkload);
    }
    let cost = config.cost_model()?;
    let ws = working_set_bytes(requests, cost.chunk_bytes());
    let dram = config.dram_capacity.resolve(ws);
    let ssd = config.ssd_capacity.resolve(ws);
    let mut engine = Engine::new(config.policy, config.engine, cost, dram, ssd)?;

    let mut reqs: Vec<Request> = requests.to_vec();
    let arrivals = poisson_arrivals(reqs.len(), config.request_rate, config.seed);
    let mut q = Queue {
        heap: BinaryHeap::new(),
        seq: 0,
    };
    for (i, &t) in arrivals.iter().enumerate() {
        q.push(t, EventKind::Arrival(i));
    }

    let mut waiting: VecDeque<Request> = VecDeque::new();
    let mut busy = false;
    let mut records: Vec<RequestRecord> = Vec::with_capacity(reqs.len());
    let mut steps: Vec<StepTrace> = Vec::new();
    let mut now = 0.0;

    while let Some(ev) = q.heap.pop() {
        now = ev.time;
        match ev.kind {
            EventKind::Arrival(i) => {
                reqs[i].arrival_time = now;
                reqs[i].state = RequestState::Retrieving;
                q.push(now + config.retrieval_latency_s, EventKind::Retrieved(i));
            }
            EventKind::Retrieved(i) => {
                reqs[i].retrieval_done_time = now;
                reqs[i].state = RequestState::Waiting;
                waiting.push_back(reqs[i].clone());
                engine.on_enqueue();
            }
            EventKind::StepDone => busy = false,
        }
        if !busy && !waiting.is_empty() {
            let res = engine.step(now, &mut waiting);
            records.extend(res.records);
            steps.push(res.trace);
            q.push(now + res.latency, EventKind::StepDone);
            busy = true;
        }
    }

    records.sort_by_key(|r| r.id);
    let ttft: Vec<f64> = records.iter().map(|r| r.ttft_s).collect();
    let e2el: Vec<f64> = records.iter().map(|r| r.e2el_s).collect();
    let queue: Vec<f64> = records.iter().map(|r| r.queue_s).collect();
    let stats = engine.stats();
    let pstats = engine.prefetch_stats();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let report = SimReport {
        policy: config.policy,
        request_rate: config.request_rate,
        window: config.engine.prefetch.window,
        seed: config.seed,
        n_requests: records.len(),
        dram_capacity_bytes: dram,
        ssd_capacity_bytes: ssd,
        working_set_bytes: ws,
        ttft: LatencySummary::from_samples(&ttft)?,
        e2el: LatencySummary::from_samples(&e2el)?,
        queue: LatencySummary::from_samples(&queue)?,
        dram_hit_ratio: ratio(stats.dram_hit_chunks, stats.cacheable_chunks),
        ssd_hit_ratio: ratio(stats.ssd_hit_chunks, stats.cacheable_chunks),
        prefetch: PrefetchSummary {
            submitted: pstats.submitted,
            completed: pstats.completed,
            cancelled: pstats.cancelled,
            failed: pstats.failed,
            prefetched_hits: stats.prefetched_hits,
            sync_ssd_hits: stats.sync_ssd_hits,
            success_ratio: ratio(stats.prefetched_hits, stats.prefetched_hits + stats.sync_ssd_hits),
        },
        engine: stats,
        sim_end_s: now,
        requests: records,
    };
    Ok(SimOutput {
        report,
        steps,
        prefetch_log: engine.prefetcher().log().to_vec(),
    })
}
