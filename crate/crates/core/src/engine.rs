//! FCFS scheduler and the per-step serving loop: prefetch drive, movement
//! planning, layer-wise execution and completion draining.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunks::{ChainLink, ChunkKey};
use crate::cost::CostModel;
use crate::pipeline::{makespan, LayerCosts, PipelineMode};
use crate::prefetch::{Completion, PrefetchConfig, PrefetchStats, Prefetcher, TaskState};
use crate::tree::{PrefixTree, Tier, TreeError};

/// Logical-clock span reserved for one engine step. Look-ahead protection
/// lasts one span, so it survives until the next scan refreshes it.
pub const STEP_SPAN: u64 = 1 << 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("policy {policy} needs a non-zero {tier:?} capacity")]
    MissingCapacity { policy: Policy, tier: Tier },
    #[error("step token budget must be positive")]
    ZeroBudget,
    #[error("unknown policy {0:?}")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "RECOMPUTE")]
    Recompute,
    #[serde(rename = "CCACHE")]
    CCache,
    #[serde(rename = "SCCACHE")]
    SCCache,
    #[serde(rename = "PCR")]
    Pcr,
    #[serde(rename = "PCR_ONLY_UP")]
    PcrOnlyUp,
    #[serde(rename = "PCR_ONLY_DOWN")]
    PcrOnlyDown,
    #[serde(rename = "PCR_NO_PREFETCH")]
    PcrNoPrefetch,
}

/// How much of the look-ahead scan a policy runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    Off,
    ProtectOnly,
    Full,
}

impl Policy {
    pub const ALL: [Policy; 7] = [
        Policy::Recompute,
        Policy::CCache,
        Policy::SCCache,
        Policy::Pcr,
        Policy::PcrOnlyUp,
        Policy::PcrOnlyDown,
        Policy::PcrNoPrefetch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Recompute => "RECOMPUTE",
            Policy::CCache => "CCACHE",
            Policy::SCCache => "SCCACHE",
            Policy::Pcr => "PCR",
            Policy::PcrOnlyUp => "PCR_ONLY_UP",
            Policy::PcrOnlyDown => "PCR_ONLY_DOWN",
            Policy::PcrNoPrefetch => "PCR_NO_PREFETCH",
        }
    }

    /// Label in the base / +overlap / +prefetch breakdown, if the policy is one of its rows.
    pub fn breakdown_label(self) -> Option<&'static str> {
        match self {
            Policy::SCCache => Some("base"),
            Policy::PcrNoPrefetch => Some("+overlap"),
            Policy::Pcr => Some("+prefetch"),
            _ => None,
        }
    }

    pub fn uses_dram(self) -> bool {
        self != Policy::Recompute
    }

    pub fn uses_ssd(self) -> bool {
        !matches!(self, Policy::Recompute | Policy::CCache)
    }

    pub fn mode(self) -> PipelineMode {
        match self {
            Policy::Recompute | Policy::CCache | Policy::SCCache => PipelineMode::Sync,
            Policy::Pcr | Policy::PcrNoPrefetch => PipelineMode::FullOverlap,
            Policy::PcrOnlyUp => PipelineMode::OnlyUp,
            Policy::PcrOnlyDown => PipelineMode::OnlyDown,
        }
    }

    pub fn scan_mode(self) -> ScanMode {
        match self {
            Policy::Recompute | Policy::CCache | Policy::SCCache => ScanMode::Off,
            Policy::PcrNoPrefetch => ScanMode::ProtectOnly,
            Policy::Pcr | Policy::PcrOnlyUp | Policy::PcrOnlyDown => ScanMode::Full,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        let p = match norm.as_str() {
            "BASE" => Policy::SCCache,
            "+OVERLAP" | "OVERLAP" => Policy::PcrNoPrefetch,
            "+PREFETCH" | "PREFETCH" => Policy::Pcr,
            other => Policy::ALL
                .into_iter()
                .find(|p| p.as_str() == other)
                .ok_or_else(|| EngineError::UnknownPolicy(s.to_string()))?,
        };
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RequestState {
    Retrieving,
    Waiting,
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_time: f64,
    pub retrieval_done_time: f64,
    /// Cacheable full chunks of the retrieved documents, root first.
    pub chain: Vec<ChainLink>,
    /// Documents plus query.
    pub total_tokens: usize,
    pub state: RequestState,
    pub first_token_time: Option<f64>,
    pub finish_time: Option<f64>,
}

impl Request {
    pub fn new(id: u64, chain: Vec<ChainLink>, total_tokens: usize) -> Self {
        Self {
            id,
            arrival_time: 0.0,
            retrieval_done_time: 0.0,
            chain,
            total_tokens,
            state: RequestState::Retrieving,
            first_token_time: None,
            finish_time: None,
        }
    }

    pub fn keys(&self) -> Vec<ChunkKey> {
        self.chain.iter().map(|l| l.key).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerOutput {
    pub scheduled: Vec<u64>,
    pub prefetch_reqs: Vec<u64>,
}

/// Admit waiting requests in arrival order while their input tokens fit the
/// budget. The head is always admitted. The next `window` requests become
/// prefetch candidates.
pub fn schedule<'a>(
    waiting: impl IntoIterator<Item = &'a Request>,
    budget_tokens: usize,
    window: usize,
) -> SchedulerOutput {
    let mut out = SchedulerOutput::default();
    let mut used = 0usize;
    let mut admitting = true;
    for r in waiting {
        if admitting && (out.scheduled.is_empty() || used + r.total_tokens <= budget_tokens) {
            used += r.total_tokens;
            out.scheduled.push(r.id);
        } else {
            admitting = false;
            if out.prefetch_reqs.len() == window {
                break;
            }
            out.prefetch_reqs.push(r.id);
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestPlan {
    pub id: u64,
    pub cpu_to_gpu: Vec<ChainLink>,
    pub ssd_to_gpu: Vec<ChainLink>,
    pub gpu_to_cpu: Vec<ChainLink>,
    pub matched_tokens: usize,
    pub computed_tokens: usize,
    pub total_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MovementPlan {
    pub requests: Vec<RequestPlan>,
    pub chunk_bytes: u64,
}

impl MovementPlan {
    pub fn cpu_to_gpu_chunks(&self) -> usize {
        self.requests.iter().map(|r| r.cpu_to_gpu.len()).sum()
    }

    pub fn ssd_to_gpu_chunks(&self) -> usize {
        self.requests.iter().map(|r| r.ssd_to_gpu.len()).sum()
    }

    pub fn gpu_to_cpu_chunks(&self) -> usize {
        self.requests.iter().map(|r| r.gpu_to_cpu.len()).sum()
    }
}

/// Walk each request's chain root-first. DRAM copies upload from DRAM, SSD
/// copies take the SSD path, and from the first miss on every chunk is
/// computed and offloaded. Without a tree nothing is matched or offloaded.
pub fn plan_movement(
    requests: &[&Request],
    mut tree: Option<&mut PrefixTree>,
    chunk_size: usize,
    chunk_bytes: u64,
) -> MovementPlan {
    let mut plan = MovementPlan {
        requests: Vec::with_capacity(requests.len()),
        chunk_bytes,
    };
    for r in requests {
        let mut rp = RequestPlan {
            id: r.id,
            total_tokens: r.total_tokens,
            ..Default::default()
        };
        if let Some(tree) = tree.as_deref_mut() {
            let m = tree.match_prefix(&r.keys());
            for (link, res) in r.chain.iter().zip(&m.residency) {
                if res.dram {
                    rp.cpu_to_gpu.push(*link);
                } else {
                    rp.ssd_to_gpu.push(*link);
                }
            }
            rp.gpu_to_cpu = r.chain[m.matched.len()..].to_vec();
            rp.matched_tokens = m.matched.len() * chunk_size;
        }
        rp.computed_tokens = r.total_tokens - rp.matched_tokens;
        plan.requests.push(rp);
    }
    plan
}

/// Per-layer stream costs for a movement plan.
pub fn layer_costs(plan: &MovementPlan, cost: &CostModel, sync_penalty: f64) -> LayerCosts {
    let n = cost.model.n_layers as usize;
    let per_chunk_layer = cost.chunk_layer_pcie_s();
    let uploads = (plan.cpu_to_gpu_chunks() + plan.ssd_to_gpu_chunks()) as f64;
    let downloads = plan.gpu_to_cpu_chunks() as f64;
    let compute: f64 = plan
        .requests
        .iter()
        .map(|r| cost.prefill_s(r.computed_tokens as u64, r.total_tokens as u64))
        .sum::<f64>()
        / n as f64;
    LayerCosts {
        load: vec![uploads * per_chunk_layer; n],
        compute: vec![compute; n],
        offload: vec![downloads * per_chunk_layer; n],
        sync_penalty,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub step_token_budget: usize,
    pub prefetch: PrefetchConfig,
    pub decode_tokens: u64,
    pub sync_penalty_s: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            step_token_budget: 16_384,
            prefetch: PrefetchConfig::default(),
            decode_tokens: 16,
            sync_penalty_s: 0.0,
        }
    }
}

/// One finished request with its latency decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub step: u64,
    pub arrival_s: f64,
    pub retrieval_s: f64,
    pub queue_s: f64,
    pub prefill_s: f64,
    pub ttft_s: f64,
    pub e2el_s: f64,
    pub total_tokens: usize,
    pub matched_tokens: usize,
    pub computed_tokens: usize,
    pub matched_ratio: f64,
    pub cacheable_chunks: usize,
    pub dram_hit_chunks: usize,
    pub ssd_hit_chunks: usize,
    pub prefetched_hit_chunks: usize,
    pub bytes_cpu_to_gpu: u64,
    pub bytes_ssd_to_gpu: u64,
    pub bytes_gpu_to_cpu: u64,
}

/// JSON Lines record for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub start_s: f64,
    pub admitted: Vec<u64>,
    pub cpu_to_gpu_bytes: u64,
    pub ssd_to_gpu_bytes: u64,
    pub gpu_to_cpu_bytes: u64,
    pub ssd_wait_s: f64,
    pub makespan_s: f64,
    pub mode: PipelineMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub latency: f64,
    pub records: Vec<RequestRecord>,
    pub trace: StepTrace,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub steps: u64,
    pub cacheable_chunks: u64,
    pub dram_hit_chunks: u64,
    pub ssd_hit_chunks: u64,
    pub prefetched_hits: u64,
    pub sync_ssd_hits: u64,
    pub promote_failures: u64,
    pub dram_starved_inserts: u64,
    pub dropped_inserts: u64,
    pub writebacks_submitted: u64,
    pub writebacks_completed: u64,
    pub writebacks_skipped: u64,
}

#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    policy: Policy,
    cost: CostModel,
    tree: Option<PrefixTree>,
    prefetcher: Prefetcher,
    scan: ScanMode,
    /// Chunks brought into DRAM by prefetch and not yet used.
    prefetched: HashSet<ChunkKey>,
    write_free_at: f64,
    writebacks: VecDeque<(f64, ChunkKey)>,
    step: u64,
    stats: EngineStats,
}

impl Engine {
    pub fn new(
        policy: Policy,
        cfg: EngineConfig,
        cost: CostModel,
        dram_capacity: u64,
        ssd_capacity: u64,
    ) -> Result<Self, EngineError> {
        if cfg.step_token_budget == 0 {
            return Err(EngineError::ZeroBudget);
        }
        if policy.uses_dram() && dram_capacity == 0 {
            return Err(EngineError::MissingCapacity {
                policy,
                tier: Tier::Dram,
            });
        }
        if policy.uses_ssd() && ssd_capacity == 0 {
            return Err(EngineError::MissingCapacity {
                policy,
                tier: Tier::Ssd,
            });
        }
        let tree = policy.uses_dram().then(|| {
            let ssd = if policy.uses_ssd() { ssd_capacity } else { 0 };
            PrefixTree::new(cost.chunk_size, dram_capacity, ssd)
        });
        let prefetcher = Prefetcher::new(cfg.prefetch, cost.bandwidth.ssd_read_bw);
        Ok(Self {
            cfg,
            policy,
            scan: policy.scan_mode(),
            cost,
            tree,
            prefetcher,
            prefetched: HashSet::new(),
            write_free_at: 0.0,
            writebacks: VecDeque::new(),
            step: 0,
            stats: EngineStats::default(),
        })
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn tree(&self) -> Option<&PrefixTree> {
        self.tree.as_ref()
    }

    pub fn tree_mut(&mut self) -> Option<&mut PrefixTree> {
        self.tree.as_mut()
    }

    pub fn prefetcher(&self) -> &Prefetcher {
        &self.prefetcher
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn prefetch_stats(&self) -> PrefetchStats {
        self.prefetcher.stats()
    }

    /// A request finished retrieval and joined the waiting queue.
    pub fn on_enqueue(&mut self) {
        self.prefetcher.on_enqueue();
    }

    fn drain_writebacks(&mut self, now: f64) {
        let Some(tree) = self.tree.as_mut() else { return };
        while let Some(&(finish, key)) = self.writebacks.front() {
            if finish > now {
                break;
            }
            self.writebacks.pop_front();
            let landed = tree.contains(key)
                && !tree.residency(key).is_some_and(|r| r.ssd)
                && tree.set_residency(key, Tier::Ssd, true).is_ok();
            if landed {
                self.stats.writebacks_completed += 1;
            } else {
                self.stats.writebacks_skipped += 1;
            }
        }
    }

    /// Run one step starting at `now` over the head of `waiting`.
    pub fn step(&mut self, now: f64, waiting: &mut VecDeque<Request>) -> StepResult {
        let sched = schedule(waiting.iter(), self.cfg.step_token_budget, self.cfg.prefetch.window);
        let mut running: Vec<Request> = waiting.drain(..sched.scheduled.len()).collect();
        for r in &mut running {
            r.state = RequestState::Running;
        }

        if let Some(tree) = self.tree.as_mut() {
            tree.advance_to((tree.now() / STEP_SPAN + 1) * STEP_SPAN);
            self.prefetcher.advance_to(now, tree);
        }

        // (1) prefetch phase
        if let (Some(tree), ScanMode::ProtectOnly | ScanMode::Full) = (self.tree.as_mut(), self.scan) {
            let chains: Vec<&[ChainLink]> = waiting
                .iter()
                .take(sched.prefetch_reqs.len())
                .map(|r| r.chain.as_slice())
                .collect();
            if self.scan == ScanMode::Full {
                self.prefetcher.scan_queue(&chains, tree, now, STEP_SPAN);
                self.prefetcher.enforce_window(now);
                self.prefetcher.advance_to(now, tree);
            } else {
                protect_chains(&chains, tree, self.prefetcher.effective_window());
            }
        }

        // (2) movement plan
        let refs: Vec<&Request> = running.iter().collect();
        let plan = plan_movement(&refs, self.tree.as_mut(), self.cost.chunk_size, self.cost.chunk_bytes());

        // (3) layer-wise execution
        let costs = layer_costs(&plan, &self.cost, self.cfg.sync_penalty_s);
        let mode = self.policy.mode();
        let pipeline = makespan(&costs, mode);

        // (4) SSD readiness, then drain completed loads
        let mut ready = now;
        let mut prefetched_ssd: HashSet<ChunkKey> = HashSet::new();
        for rp in &plan.requests {
            for link in &rp.ssd_to_gpu {
                let task = self.prefetcher.active_task(link.key).map(|t| (t.state, t.finish_time));
                let done_at = match task {
                    Some((TaskState::Loading, Some(f))) => {
                        prefetched_ssd.insert(link.key);
                        f
                    }
                    _ => {
                        self.prefetcher.cancel_pending(link.key, now);
                        self.prefetcher.reserve_channel(now, plan.chunk_bytes)
                    }
                };
                ready = ready.max(done_at);
            }
        }
        if let Some(tree) = self.tree.as_mut() {
            for (id, outcome) in self.prefetcher.drain_completed(tree, now) {
                if outcome == Completion::Loaded {
                    if let Some(t) = self.prefetcher.task(id) {
                        self.prefetched.insert(t.key);
                    }
                }
            }
        }
        self.drain_writebacks(now);

        // (5) wait for SSD reads the load stream depends on
        let ssd_wait = ready - now;
        let latency = ssd_wait + pipeline.makespan;
        let end = now + latency;

        // (6) admitted requests no longer need look-ahead
        self.prefetcher.shrink_window(running.len());

        // (7) promote SSD reads, insert new chunks, queue write-backs
        let bytes = plan.chunk_bytes;
        if let Some(tree) = self.tree.as_mut() {
            for rp in &plan.requests {
                for link in &rp.ssd_to_gpu {
                    if let Err(e) = tree.set_residency(link.key, Tier::Dram, true) {
                        if !matches!(e, TreeError::AlreadyResident { .. }) {
                            self.stats.promote_failures += 1;
                        }
                    }
                }
                for link in &rp.gpu_to_cpu {
                    match tree.insert_chunk(link.key, link.parent, bytes, Tier::Dram) {
                        Ok(_) => {
                            if self.policy.uses_ssd() {
                                let start = self.write_free_at.max(end);
                                self.write_free_at = start + self.cost.ssd_write_s(bytes);
                                self.writebacks.push_back((self.write_free_at, link.key));
                                self.stats.writebacks_submitted += 1;
                            }
                        }
                        Err(TreeError::AlreadyResident { .. }) => {}
                        Err(TreeError::EvictionStarved { .. }) if self.policy.uses_ssd() => {
                            self.stats.dram_starved_inserts += 1;
                            match tree.insert_chunk(link.key, link.parent, bytes, Tier::Ssd) {
                                Ok(_) | Err(TreeError::AlreadyResident { .. }) => {
                                    let start = self.write_free_at.max(end);
                                    self.write_free_at = start + self.cost.ssd_write_s(bytes);
                                }
                                Err(_) => {
                                    self.stats.dropped_inserts += 1;
                                    break;
                                }
                            }
                        }
                        Err(_) => {
                            self.stats.dropped_inserts += 1;
                            break;
                        }
                    }
                }
            }
        }

        // records
        let decode = self.cost.decode_s(self.cfg.decode_tokens);
        let mut records = Vec::with_capacity(running.len());
        for (r, rp) in running.iter_mut().zip(&plan.requests) {
            r.first_token_time = Some(end);
            r.finish_time = Some(end + decode);
            r.state = RequestState::Done;
            let prefetched_dram = rp.cpu_to_gpu.iter().filter(|l| self.prefetched.remove(&l.key)).count();
            let prefetched_on_ssd = rp.ssd_to_gpu.iter().filter(|l| prefetched_ssd.contains(&l.key)).count();
            let prefetched_hits = prefetched_dram + prefetched_on_ssd;
            let sync_hits = rp.ssd_to_gpu.len() - prefetched_on_ssd;
            self.stats.cacheable_chunks += r.chain.len() as u64;
            self.stats.dram_hit_chunks += rp.cpu_to_gpu.len() as u64;
            self.stats.ssd_hit_chunks += rp.ssd_to_gpu.len() as u64;
            self.stats.prefetched_hits += prefetched_hits as u64;
            self.stats.sync_ssd_hits += sync_hits as u64;
            let ttft = end - r.arrival_time;
            records.push(RequestRecord {
                id: r.id,
                step: self.step,
                arrival_s: r.arrival_time,
                retrieval_s: r.retrieval_done_time - r.arrival_time,
                queue_s: now - r.retrieval_done_time,
                prefill_s: latency,
                ttft_s: ttft,
                e2el_s: ttft + decode,
                total_tokens: r.total_tokens,
                matched_tokens: rp.matched_tokens,
                computed_tokens: rp.computed_tokens,
                matched_ratio: rp.matched_tokens as f64 / r.total_tokens.max(1) as f64,
                cacheable_chunks: r.chain.len(),
                dram_hit_chunks: rp.cpu_to_gpu.len(),
                ssd_hit_chunks: rp.ssd_to_gpu.len(),
                prefetched_hit_chunks: prefetched_hits,
                bytes_cpu_to_gpu: rp.cpu_to_gpu.len() as u64 * bytes,
                bytes_ssd_to_gpu: rp.ssd_to_gpu.len() as u64 * bytes,
                bytes_gpu_to_cpu: rp.gpu_to_cpu.len() as u64 * bytes,
            });
        }

        let trace = StepTrace {
            step: self.step,
            start_s: now,
            admitted: sched.scheduled,
            cpu_to_gpu_bytes: plan.cpu_to_gpu_chunks() as u64 * bytes,
            ssd_to_gpu_bytes: plan.ssd_to_gpu_chunks() as u64 * bytes,
            gpu_to_cpu_bytes: plan.gpu_to_cpu_chunks() as u64 * bytes,
            ssd_wait_s: ssd_wait,
            makespan_s: pipeline.makespan,
            mode,
        };
        self.step += 1;
        self.stats.steps += 1;
        StepResult {
            latency,
            records,
            trace,
        }
    }
}

/// Protection half of the look-ahead scan, without submitting loads.
fn protect_chains(chains: &[&[ChainLink]], tree: &mut PrefixTree, window: usize) {
    for chain in chains.iter().take(window) {
        let walked = tree.peek_prefix(&chain.iter().map(|l| l.key).collect::<Vec<_>>());
        for (key, res) in walked {
            if res.dram {
                tree.protect(key, STEP_SPAN);
            }
        }
    }
}
