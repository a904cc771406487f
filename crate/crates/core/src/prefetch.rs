//! Queue-driven SSD→DRAM prefetch and look-ahead protection.
//!
//! The prefetcher owns a single SSD read channel. Tasks wait as `Pending`,
//! occupy the channel while `Loading`, and finish as `Done` once the engine
//! drains them into DRAM, or `Cancelled`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::chunks::{ChainLink, ChunkKey};
use crate::tree::{PrefixTree, Tier, TreeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefetchConfig {
    /// Waiting requests scanned per step.
    pub window: usize,
    /// Cap on pending plus loading bytes.
    pub max_inflight_bytes: u64,
    /// Scan the window back to front.
    pub reverse_scan: bool,
}

impl Default for PrefetchConfig {
    fn default() -> Self {
        Self {
            window: 4,
            max_inflight_bytes: 16 << 30,
            reverse_scan: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskState {
    Pending,
    Loading,
    Done,
    Cancelled,
}

impl TaskState {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Pending => "PENDING",
            TaskState::Loading => "LOADING",
            TaskState::Done => "DONE",
            TaskState::Cancelled => "CANCELLED",
        }
    }

    pub fn is_active(self) -> bool {
        matches!(self, TaskState::Pending | TaskState::Loading)
    }
}

pub type TaskId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefetchTask {
    pub id: TaskId,
    pub key: ChunkKey,
    pub parent: ChunkKey,
    pub bytes: u64,
    pub submit_time: f64,
    /// Queue position of the nearest request needing this chunk; lower wins.
    pub priority: usize,
    pub state: TaskState,
    pub start_time: Option<f64>,
    pub finish_time: Option<f64>,
    pub retried: bool,
}

/// What a scan saw and did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanOutcome {
    pub submitted: Vec<TaskId>,
    pub protected: Vec<ChunkKey>,
    /// Candidates skipped because the byte cap was full.
    pub deferred: Vec<ChunkKey>,
    /// Every (queue position, chunk) pair the walk visited.
    pub scanned: BTreeSet<(usize, ChunkKey)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Loaded,
    AlreadyResident,
    /// Eviction was starved; the task stays loading and is retried once.
    Retrying,
    Failed,
    Orphaned,
    Ignored,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefetchStats {
    pub submitted: u64,
    pub started: u64,
    pub completed: u64,
    pub cancelled: u64,
    pub failed: u64,
    pub retries: u64,
    pub bytes_loaded: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefetchLogEntry {
    pub time: f64,
    pub key: ChunkKey,
    pub bytes: u64,
    pub transition: String,
}

#[derive(Debug, Clone)]
pub struct Prefetcher {
    cfg: PrefetchConfig,
    ssd_read_bw: f64,
    tasks: BTreeMap<TaskId, PrefetchTask>,
    active: HashMap<ChunkKey, TaskId>,
    next_id: TaskId,
    effective_window: usize,
    channel_free_at: f64,
    stats: PrefetchStats,
    log: Vec<PrefetchLogEntry>,
}

impl Prefetcher {
    pub fn new(cfg: PrefetchConfig, ssd_read_bw: f64) -> Self {
        Self {
            cfg,
            ssd_read_bw,
            tasks: BTreeMap::new(),
            active: HashMap::new(),
            next_id: 0,
            effective_window: cfg.window,
            channel_free_at: 0.0,
            stats: PrefetchStats::default(),
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> &PrefetchConfig {
        &self.cfg
    }

    pub fn stats(&self) -> PrefetchStats {
        self.stats
    }

    pub fn log(&self) -> &[PrefetchLogEntry] {
        &self.log
    }

    pub fn task(&self, id: TaskId) -> Option<&PrefetchTask> {
        self.tasks.get(&id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &PrefetchTask> {
        self.tasks.values()
    }

    /// The live task for `key`, if any.
    pub fn active_task(&self, key: ChunkKey) -> Option<&PrefetchTask> {
        self.active.get(&key).map(|id| &self.tasks[id])
    }

    pub fn effective_window(&self) -> usize {
        self.effective_window
    }

    pub fn channel_free_at(&self) -> f64 {
        self.channel_free_at
    }

    pub fn inflight_bytes(&self) -> u64 {
        self.active.values().map(|id| self.tasks[id].bytes).sum()
    }

    pub fn read_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.ssd_read_bw
    }

    fn transition(&mut self, id: TaskId, to: TaskState, time: f64) {
        let t = self.tasks.get_mut(&id).expect("known task");
        debug_assert!(to > t.state, "{:?} -> {:?}", t.state, to);
        t.state = to;
        if !to.is_active() {
            self.active.remove(&t.key);
        }
        match to {
            TaskState::Loading => self.stats.started += 1,
            TaskState::Done => {
                self.stats.completed += 1;
                self.stats.bytes_loaded += t.bytes;
            }
            TaskState::Cancelled => self.stats.cancelled += 1,
            TaskState::Pending => {}
        }
        self.log.push(PrefetchLogEntry {
            time,
            key: t.key,
            bytes: t.bytes,
            transition: to.as_str().to_string(),
        });
    }

    /// Walk the first `effective_window` waiting chains. DRAM chunks are
    /// protected, SSD-only chunks become tasks, and a chain stops at its
    /// first chunk that is resident nowhere.
    pub fn scan_queue(
        &mut self,
        waiting: &[&[ChainLink]],
        tree: &mut PrefixTree,
        now: f64,
        protect_horizon: u64,
    ) -> ScanOutcome {
        let mut out = ScanOutcome::default();
        let depth = self.effective_window.min(waiting.len());
        let order: Vec<usize> = if self.cfg.reverse_scan {
            (0..depth).rev().collect()
        } else {
            (0..depth).collect()
        };

        // priority refresh: only positions seen in this scan count
        let mut seen_priority: HashMap<ChunkKey, usize> = HashMap::new();
        let mut candidates: BTreeMap<ChunkKey, (usize, usize, ChunkKey, u64)> = BTreeMap::new();
        let mut visit = 0usize;
        for pos in order {
            let mut expected_parent = ChunkKey::ROOT;
            for link in waiting[pos] {
                let Some(node) = tree.node(link.key) else { break };
                if node.parent != expected_parent || node.residency.is_empty() {
                    break;
                }
                out.scanned.insert((pos, link.key));
                let (residency, bytes) = (node.residency, node.size_bytes);
                if residency.dram {
                    tree.protect(link.key, protect_horizon);
                    out.protected.push(link.key);
                } else if self.active.contains_key(&link.key) {
                    let p = seen_priority.entry(link.key).or_insert(pos);
                    *p = (*p).min(pos);
                } else {
                    let c = candidates.entry(link.key).or_insert((pos, visit, link.parent, bytes));
                    c.0 = c.0.min(pos);
                    visit += 1;
                }
                expected_parent = link.key;
            }
        }

        for id in self.active.values() {
            let t = self.tasks.get_mut(id).expect("active task");
            t.priority = seen_priority.get(&t.key).copied().unwrap_or(usize::MAX);
        }

        // nearest requests win the byte cap
        let mut ranked: Vec<_> = candidates.into_iter().collect();
        ranked.sort_by_key(|&(key, (pos, visit, _, _))| (pos, visit, key));
        let mut inflight = self.inflight_bytes();
        for (key, (pos, _, parent, bytes)) in ranked {
            if inflight + bytes > self.cfg.max_inflight_bytes {
                out.deferred.push(key);
                continue;
            }
            inflight += bytes;
            let id = self.next_id;
            self.next_id += 1;
            self.tasks.insert(
                id,
                PrefetchTask {
                    id,
                    key,
                    parent,
                    bytes,
                    submit_time: now,
                    priority: pos,
                    state: TaskState::Pending,
                    start_time: None,
                    finish_time: None,
                    retried: false,
                },
            );
            self.active.insert(key, id);
            self.stats.submitted += 1;
            self.log.push(PrefetchLogEntry {
                time: now,
                key,
                bytes,
                transition: TaskState::Pending.as_str().to_string(),
            });
            out.submitted.push(id);
        }
        out
    }

    /// Cancel pending tasks, furthest first, until pending plus loading bytes
    /// fit under the cap. Loading tasks are never cancelled.
    pub fn enforce_window(&mut self, now: f64) -> Vec<TaskId> {
        let mut inflight = self.inflight_bytes();
        let cap = self.cfg.max_inflight_bytes;
        let mut pending: Vec<(usize, TaskId)> = self
            .active
            .values()
            .map(|id| &self.tasks[id])
            .filter(|t| t.state == TaskState::Pending)
            .map(|t| (t.priority, t.id))
            .collect();
        pending.sort_unstable_by(|a, b| b.cmp(a));
        let mut cancelled = Vec::new();
        for (_, id) in pending {
            if inflight <= cap {
                break;
            }
            inflight -= self.tasks[&id].bytes;
            self.transition(id, TaskState::Cancelled, now);
            cancelled.push(id);
        }
        cancelled
    }

    /// Cancel a specific pending task. Loading tasks are left alone.
    pub fn cancel_pending(&mut self, key: ChunkKey, now: f64) -> bool {
        match self.active.get(&key).copied() {
            Some(id) if self.tasks[&id].state == TaskState::Pending => {
                self.transition(id, TaskState::Cancelled, now);
                true
            }
            _ => false,
        }
    }

    /// Start every pending task the channel would have reached by `now`,
    /// highest priority first. Tasks that became redundant are cancelled.
    pub fn advance_to(&mut self, now: f64, tree: &PrefixTree) {
        loop {
            let next = self
                .active
                .values()
                .map(|id| &self.tasks[id])
                .filter(|t| t.state == TaskState::Pending)
                .min_by_key(|t| (t.priority, t.id))
                .map(|t| (t.id, t.submit_time));
            let Some((id, submitted)) = next else { break };
            let start = self.channel_free_at.max(submitted);
            if start > now {
                break;
            }
            let key = self.tasks[&id].key;
            let still_needed = tree.residency(key).is_some_and(|r| r.ssd && !r.dram);
            if !still_needed {
                self.transition(id, TaskState::Cancelled, start);
                continue;
            }
            let finish = start + self.read_time(self.tasks[&id].bytes);
            let t = self.tasks.get_mut(&id).expect("task");
            t.start_time = Some(start);
            t.finish_time = Some(finish);
            self.channel_free_at = finish;
            self.transition(id, TaskState::Loading, start);
        }
    }

    /// Occupy the SSD channel for a synchronous read issued at `now`.
    /// Returns the read's finish time.
    pub fn reserve_channel(&mut self, now: f64, bytes: u64) -> f64 {
        let start = self.channel_free_at.max(now);
        self.channel_free_at = start + self.read_time(bytes);
        self.channel_free_at
    }

    /// Move a finished load into DRAM. Repeated calls are no-ops.
    pub fn complete_task(&mut self, id: TaskId, tree: &mut PrefixTree, now: f64) -> Completion {
        let Some(task) = self.tasks.get(&id) else {
            return Completion::Ignored;
        };
        if task.state != TaskState::Loading {
            return Completion::Ignored;
        }
        let (key, parent, bytes) = (task.key, task.parent, task.bytes);
        let result = if tree.contains(key) {
            tree.set_residency(key, Tier::Dram, true)
        } else if parent.is_root() || tree.contains(parent) {
            tree.insert_chunk(key, parent, bytes, Tier::Dram)
        } else {
            self.transition(id, TaskState::Cancelled, now);
            return Completion::Orphaned;
        };
        match result {
            Ok(_) => {
                let fresh = tree.residency(key).is_some_and(|r| r.dram);
                debug_assert!(fresh);
                self.transition(id, TaskState::Done, now);
                Completion::Loaded
            }
            Err(TreeError::AlreadyResident { .. }) => {
                self.transition(id, TaskState::Done, now);
                Completion::AlreadyResident
            }
            Err(TreeError::EvictionStarved { .. }) if !task_retried(&self.tasks, id) => {
                self.tasks.get_mut(&id).expect("task").retried = true;
                self.stats.retries += 1;
                Completion::Retrying
            }
            Err(_) => {
                self.stats.failed += 1;
                self.transition(id, TaskState::Cancelled, now);
                Completion::Failed
            }
        }
    }

    /// Complete every loading task that finished by `now`, in finish order.
    pub fn drain_completed(&mut self, tree: &mut PrefixTree, now: f64) -> Vec<(TaskId, Completion)> {
        let mut ready: Vec<(f64, TaskId)> = self
            .active
            .values()
            .map(|id| &self.tasks[id])
            .filter(|t| t.state == TaskState::Loading && t.finish_time.is_some_and(|f| f <= now))
            .map(|t| (t.finish_time.unwrap_or(now), t.id))
            .collect();
        ready.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ready
            .into_iter()
            .map(|(_, id)| (id, self.complete_task(id, tree, now)))
            .collect()
    }

    /// Requests admitted this step no longer need look-ahead.
    pub fn shrink_window(&mut self, admitted: usize) {
        self.effective_window = self.effective_window.saturating_sub(admitted);
    }

    /// A request joined the waiting queue.
    pub fn on_enqueue(&mut self) {
        self.effective_window = (self.effective_window + 1).min(self.cfg.window);
    }

    /// Rows `time,key,bytes,transition`.
    pub fn write_log_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.log {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn task_retried(tasks: &BTreeMap<TaskId, PrefetchTask>, id: TaskId) -> bool {
    tasks.get(&id).is_some_and(|t| t.retried)
}
