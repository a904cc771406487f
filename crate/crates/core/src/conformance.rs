//! Data-driven scenario runner. A scenario is a JSON script of steps
//! (`<name>.json`) whose rendered transcript must equal a golden file
//! (`<name>.expected`) in the same directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::chunks::{ChainLink, ChunkKey};
use crate::cost::sync_cost;
use crate::pipeline::{makespan, overlap_bound_check, LayerCosts, PipelineMode};
use crate::prefetch::{PrefetchConfig, Prefetcher};
use crate::tree::{PrefixTree, Residency, Tier};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?}")]
    Unknown(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("script: {0}")]
    Script(String),
}

fn script_err(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Script(e.to_string())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSetup {
    #[serde(default = "one")]
    pub chunk_bytes: u64,
    pub dram_chunks: u64,
    #[serde(default)]
    pub ssd_chunks: u64,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    /// Insert chunk `key` under `parent` ("root" for top level).
    Insert {
        key: String,
        parent: String,
        tier: Tier,
    },
    /// Insert a whole chain, each link under the previous one.
    InsertChain {
        chain: Vec<String>,
        tier: Tier,
    },
    Protect {
        key: String,
        horizon: u64,
    },
    Match {
        chain: Vec<String>,
    },
    TierLeaves {
        tier: Tier,
    },
    Leaves,
    Scan {
        window: usize,
        #[serde(default)]
        horizon: u64,
        queue: Vec<(String, Vec<String>)>,
    },
    #[allow(non_snake_case)]
    SyncCost {
        N: u64,
        N1: u64,
        N2: u64,
        C1: f64,
        C2: f64,
    },
    Makespan {
        mode: PipelineMode,
        load: Vec<f64>,
        compute: Vec<f64>,
        offload: Vec<f64>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub tree: Option<TreeSetup>,
    pub steps: Vec<Step>,
}

struct Names {
    keys: BTreeMap<String, ChunkKey>,
    names: BTreeMap<ChunkKey, String>,
}

impl Names {
    fn key(&mut self, name: &str) -> ChunkKey {
        if name == "root" {
            return ChunkKey::ROOT;
        }
        if let Some(&k) = self.keys.get(name) {
            return k;
        }
        let k = ChunkKey(self.keys.len() as u128 + 1);
        self.keys.insert(name.to_string(), k);
        self.names.insert(k, name.to_string());
        k
    }

    fn name(&self, key: ChunkKey) -> &str {
        self.names.get(&key).map(String::as_str).unwrap_or("?")
    }

    fn sorted(&self, keys: impl IntoIterator<Item = ChunkKey>) -> String {
        let set: BTreeSet<&str> = keys.into_iter().map(|k| self.name(k)).collect();
        set.into_iter().collect::<Vec<_>>().join(" ")
    }
}

fn tier_name(t: Tier) -> &'static str {
    match t {
        Tier::Gpu => "gpu",
        Tier::Dram => "dram",
        Tier::Ssd => "ssd",
    }
}

fn residency_name(r: Residency) -> &'static str {
    match (r.dram, r.ssd) {
        (true, true) => "dram+ssd",
        (true, false) => "dram",
        (false, true) => "ssd",
        (false, false) => "none",
    }
}

fn tree_of(tree: &mut Option<PrefixTree>) -> Result<&mut PrefixTree, ScenarioError> {
    tree.as_mut().ok_or_else(|| script_err("step needs a tree setup"))
}

/// Execute a scenario script and render its transcript.
pub fn run_script(json: &str) -> Result<String, ScenarioError> {
    let sc: Scenario = serde_json::from_str(json).map_err(script_err)?;
    let mut names = Names {
        keys: BTreeMap::new(),
        names: BTreeMap::new(),
    };
    let mut tree = sc
        .tree
        .as_ref()
        .map(|t| PrefixTree::new(1, t.dram_chunks * t.chunk_bytes, t.ssd_chunks * t.chunk_bytes));
    let chunk_bytes = sc.tree.as_ref().map_or(1, |t| t.chunk_bytes);
    let mut out = String::new();

    for step in sc.steps {
        match step {
            Step::Insert { key, parent, tier } => {
                let t = tree_of(&mut tree)?;
                let (k, p) = (names.key(&key), names.key(&parent));
                let ev = t.insert_chunk(k, p, chunk_bytes, tier).map_err(script_err)?;
                for e in ev {
                    let dest = e.destination().map_or("dropped", tier_name);
                    writeln!(
                        out,
                        "insert {key}: evict {} from {} -> {dest}",
                        names.name(e.key),
                        tier_name(e.from)
                    )
                    .unwrap();
                }
            }
            Step::InsertChain { chain, tier } => {
                let t = tree_of(&mut tree)?;
                let mut parent = ChunkKey::ROOT;
                for key in &chain {
                    let k = names.key(key);
                    let ev = t.insert_chunk(k, parent, chunk_bytes, tier).map_err(script_err)?;
                    for e in ev {
                        let dest = e.destination().map_or("dropped", tier_name);
                        writeln!(
                            out,
                            "insert {key}: evict {} from {} -> {dest}",
                            names.name(e.key),
                            tier_name(e.from)
                        )
                        .unwrap();
                    }
                    parent = k;
                }
            }
            Step::Protect { key, horizon } => {
                let t = tree_of(&mut tree)?;
                if !t.protect(names.key(&key), horizon) {
                    return Err(script_err(format!("protect: {key} not in tree")));
                }
            }
            Step::Match { chain } => {
                let t = tree_of(&mut tree)?;
                let keys: Vec<ChunkKey> = chain.iter().map(|n| names.key(n)).collect();
                let m = t.match_prefix(&keys);
                let hits: Vec<String> = m
                    .matched
                    .iter()
                    .zip(&m.residency)
                    .map(|(k, r)| format!("{}@{}", names.name(*k), residency_name(*r)))
                    .collect();
                let stop = chain.get(m.matched.len()).map_or("end", String::as_str);
                writeln!(
                    out,
                    "match {}: {} matched [{}] stop {stop}",
                    chain.join(" "),
                    m.matched.len(),
                    hits.join(" ")
                )
                .unwrap();
            }
            Step::TierLeaves { tier } => {
                let leaves = tree_of(&mut tree)?.tier_leaves(tier);
                writeln!(out, "{} leaves: {}", tier_name(tier), names.sorted(leaves)).unwrap();
            }
            Step::Leaves => {
                let leaves = tree_of(&mut tree)?.tree_leaves();
                writeln!(out, "leaves: {}", names.sorted(leaves)).unwrap();
            }
            Step::Scan { window, horizon, queue } => {
                let t = tree_of(&mut tree)?;
                let chains: Vec<Vec<ChainLink>> = queue
                    .iter()
                    .map(|(_, chain)| {
                        let mut parent = ChunkKey::ROOT;
                        chain
                            .iter()
                            .map(|n| {
                                let key = names.key(n);
                                let link = ChainLink { key, parent };
                                parent = key;
                                link
                            })
                            .collect()
                    })
                    .collect();
                let refs: Vec<&[ChainLink]> = chains.iter().map(Vec::as_slice).collect();
                let cfg = PrefetchConfig {
                    window,
                    ..Default::default()
                };
                let mut pf = Prefetcher::new(cfg, 1.0);
                let scan = pf.scan_queue(&refs, t, 0.0, horizon);
                let tasks: BTreeSet<ChunkKey> = scan
                    .submitted
                    .iter()
                    .filter_map(|id| pf.task(*id).map(|t| t.key))
                    .collect();
                let protected: BTreeSet<ChunkKey> = scan.protected.iter().copied().collect();
                for ((req, _), chain) in queue.iter().zip(&chains) {
                    let own = |set: &BTreeSet<ChunkKey>| -> Vec<&str> {
                        chain
                            .iter()
                            .filter(|l| set.contains(&l.key))
                            .map(|l| names.name(l.key))
                            .collect()
                    };
                    let (p, f) = (own(&protected), own(&tasks));
                    let mut line = format!("{req}:");
                    if !p.is_empty() {
                        write!(line, " protect {}", p.join(" ")).unwrap();
                    }
                    if !f.is_empty() {
                        write!(line, " prefetch {}", f.join(" ")).unwrap();
                    }
                    if p.is_empty() && f.is_empty() {
                        line.push_str(" none");
                    }
                    writeln!(out, "{line}").unwrap();
                }
                writeln!(out, "tasks: {}", names.sorted(tasks)).unwrap();
            }
            Step::SyncCost { N, N1, N2, C1, C2 } => {
                let b = sync_cost(N, N1, N2, C1, C2).map_err(script_err)?;
                writeln!(out, "C = {}", b.C).unwrap();
                writeln!(out, "expanded = {}", b.expanded()).unwrap();
                writeln!(out, "collapsed = {}", b.collapsed()).unwrap();
                writeln!(out, "transfer/compute = {}", b.transfer_overhead_ratio()).unwrap();
            }
            Step::Makespan {
                mode,
                load,
                compute,
                offload,
            } => {
                let costs = LayerCosts::new(load, compute, offload).map_err(script_err)?;
                let plan = makespan(&costs, mode);
                writeln!(out, "makespan {} = {}", mode.as_str(), plan.makespan).unwrap();
                let bound = overlap_bound_check(&costs);
                writeln!(out, "bound holds: {bound}").unwrap();
                if bound {
                    let n = costs.n_layers();
                    let closed = costs.load[0] + costs.compute.iter().sum::<f64>() + costs.offload[n - 1];
                    writeln!(out, "load1 + sum(compute) + offload_n = {closed}").unwrap();
                    writeln!(out, "hidden transfer: {}", plan.makespan == closed).unwrap();
                }
            }
        }
    }
    Ok(out)
}

/// One differing line between expected and actual transcripts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineDiff {
    pub line: usize,
    pub expected: Option<String>,
    pub actual: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub name: String,
    pub diff: Vec<LineDiff>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.diff.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = format!("{}: {}\n", self.name, if self.passed() { "pass" } else { "FAIL" });
        for d in &self.diff {
            if let Some(e) = &d.expected {
                writeln!(s, "  {:>3} - {e}", d.line).unwrap();
            }
            if let Some(a) = &d.actual {
                writeln!(s, "  {:>3} + {a}", d.line).unwrap();
            }
        }
        s
    }
}

pub fn diff_lines(expected: &str, actual: &str) -> Vec<LineDiff> {
    let e: Vec<&str> = expected.lines().collect();
    let a: Vec<&str> = actual.lines().collect();
    (0..e.len().max(a.len()))
        .filter(|&i| e.get(i) != a.get(i))
        .map(|i| LineDiff {
            line: i + 1,
            expected: e.get(i).map(|s| s.to_string()),
            actual: a.get(i).map(|s| s.to_string()),
        })
        .collect()
}

/// Scenarios shipped with the crate.
pub fn default_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

/// Names of every scenario in `dir`, sorted.
pub fn registered(dir: &Path) -> Result<Vec<String>, ScenarioError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "json").then(|| p.file_stem()?.to_str().map(str::to_string))?
        })
        .collect();
    names.sort();
    Ok(names)
}

/// Run `name` from `dir` against its golden transcript.
pub fn scenario(dir: &Path, name: &str) -> Result<Verdict, ScenarioError> {
    let script = dir.join(format!("{name}.json"));
    if !script.is_file() {
        return Err(ScenarioError::Unknown(name.to_string()));
    }
    let actual = run_script(&std::fs::read_to_string(script)?)?;
    let expected = std::fs::read_to_string(dir.join(format!("{name}.expected")))?;
    Ok(Verdict {
        name: name.to_string(),
        diff: diff_lines(&expected, &actual),
    })
}
