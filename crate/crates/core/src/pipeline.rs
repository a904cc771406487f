//! Layer-wise scheduling of KV upload, prefill compute and KV download on
//! three sequential streams.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(
        "layer cost lists must be non-empty and of equal length (load {load}, compute {compute}, offload {offload})"
    )]
    Shape {
        load: usize,
        compute: usize,
        offload: usize,
    },
    #[error("layer costs must be finite and non-negative")]
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PipelineMode {
    /// Load everything, compute everything, offload everything.
    Sync,
    /// Uploads overlap compute; offload runs after the last layer.
    OnlyUp,
    /// All uploads finish first; offloads overlap compute.
    OnlyDown,
    #[default]
    FullOverlap,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 4] = [
        PipelineMode::Sync,
        PipelineMode::OnlyUp,
        PipelineMode::OnlyDown,
        PipelineMode::FullOverlap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineMode::Sync => "SYNC",
            PipelineMode::OnlyUp => "ONLY_UP",
            PipelineMode::OnlyDown => "ONLY_DOWN",
            PipelineMode::FullOverlap => "FULL_OVERLAP",
        }
    }

    fn overlaps_load(self) -> bool {
        matches!(self, PipelineMode::OnlyUp | PipelineMode::FullOverlap)
    }

    fn overlaps_offload(self) -> bool {
        matches!(self, PipelineMode::OnlyDown | PipelineMode::FullOverlap)
    }
}

/// Per-layer seconds on each stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCosts {
    pub load: Vec<f64>,
    pub compute: Vec<f64>,
    pub offload: Vec<f64>,
    /// Extra compute-stream time per layer for each overlapped transfer stream.
    #[serde(default)]
    pub sync_penalty: f64,
}

impl LayerCosts {
    pub fn new(load: Vec<f64>, compute: Vec<f64>, offload: Vec<f64>) -> Result<Self, PipelineError> {
        let c = Self {
            load,
            compute,
            offload,
            sync_penalty: 0.0,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn uniform(n: usize, load: f64, compute: f64, offload: f64) -> Result<Self, PipelineError> {
        Self::new(vec![load; n], vec![compute; n], vec![offload; n])
    }

    pub fn with_sync_penalty(mut self, penalty: f64) -> Result<Self, PipelineError> {
        self.sync_penalty = penalty;
        self.validate()?;
        Ok(self)
    }

    pub fn n_layers(&self) -> usize {
        self.compute.len()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let n = self.compute.len();
        if n == 0 || self.load.len() != n || self.offload.len() != n {
            return Err(PipelineError::Shape {
                load: self.load.len(),
                compute: n,
                offload: self.offload.len(),
            });
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        let all = self.load.iter().chain(&self.compute).chain(&self.offload);
        if !ok(self.sync_penalty) || !all.copied().all(ok) {
            return Err(PipelineError::Negative);
        }
        Ok(())
    }

    pub fn total_load(&self) -> f64 {
        self.load.iter().sum()
    }

    pub fn total_compute(&self) -> f64 {
        self.compute.iter().sum()
    }

    pub fn total_offload(&self) -> f64 {
        self.offload.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub finish: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Load,
    Compute,
    Offload,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Load => "load",
            Stream::Compute => "compute",
            Stream::Offload => "offload",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub mode: PipelineMode,
    pub load: Vec<Interval>,
    pub compute: Vec<Interval>,
    pub offload: Vec<Interval>,
    pub makespan: f64,
}

#[derive(Serialize)]
struct PlanRow {
    layer: usize,
    stream: &'static str,
    start: f64,
    finish: f64,
}

impl PipelinePlan {
    pub fn stream(&self, s: Stream) -> &[Interval] {
        match s {
            Stream::Load => &self.load,
            Stream::Compute => &self.compute,
            Stream::Offload => &self.offload,
        }
    }

    /// Rows `layer,stream,start,finish`, layers numbered from 1.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in [Stream::Load, Stream::Compute, Stream::Offload] {
            for (i, iv) in self.stream(s).iter().enumerate() {
                out.serialize(PlanRow {
                    layer: i + 1,
                    stream: s.as_str(),
                    start: iv.start,
                    finish: iv.finish,
                })?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Run `durs` back to back on one stream, each starting no earlier than `ready(i)`.
fn run_stream(durs: &[f64], ready: impl Fn(usize) -> f64) -> Vec<Interval> {
    let mut free = 0.0f64;
    durs.iter()
        .enumerate()
        .map(|(i, &d)| {
            let start = free.max(ready(i));
            free = start + d;
            Interval { start, finish: free }
        })
        .collect()
}

/// Schedule the three streams under `mode` and return per-layer intervals.
pub fn makespan(costs: &LayerCosts, mode: PipelineMode) -> PipelinePlan {
    debug_assert!(costs.validate().is_ok());
    let n = costs.n_layers();
    let overlapped = mode.overlaps_load() as u8 + mode.overlaps_offload() as u8;
    let penalty = costs.sync_penalty * overlapped as f64;
    let compute: Vec<f64> = costs.compute.iter().map(|c| c + penalty).collect();

    let load = run_stream(&costs.load, |_| 0.0);
    let all_loaded = load[n - 1].finish;
    let compute = if mode.overlaps_load() {
        run_stream(&compute, |i| load[i].finish)
    } else {
        run_stream(&compute, |_| all_loaded)
    };
    let all_computed = compute[n - 1].finish;
    let offload = if mode.overlaps_offload() {
        run_stream(&costs.offload, |i| compute[i].finish)
    } else {
        run_stream(&costs.offload, |_| all_computed)
    };
    let makespan = offload[n - 1].finish;
    PipelinePlan {
        mode,
        load,
        compute,
        offload,
        makespan,
    }
}

/// True when every transfer layer fits under every compute layer, in which
/// case full overlap leaves exactly one layer of each transfer exposed.
pub fn overlap_bound_check(costs: &LayerCosts) -> bool {
    let min_compute = costs.compute.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    max(&costs.load) <= min_compute && max(&costs.offload) <= min_compute
}
