//! Analytic latency model: KV sizes, tier transfers, prefill compute, and the
//! synchronous load/compute/offload cost identity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed cost of one batched chunk-layer copy, in seconds.
pub const BATCHED_COPY_OVERHEAD_S: f64 = 0.261e-3;
/// Fixed cost of one chunk-layer copy issued block by block, in seconds.
pub const UNBATCHED_COPY_OVERHEAD_S: f64 = 0.671e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("model {0}: layer, head and dimension counts must be positive")]
    ZeroGeometry(String),
    #[error("model {0}: dtype_bytes must be 1, 2 or 4")]
    BadDtype(String),
    #[error("bandwidths must be positive and the copy overhead non-negative")]
    NonPositiveBandwidth,
    #[error("compute parameters must be non-negative with at least one positive")]
    BadComputeParams,
    #[error("calibration anchors must have distinct token counts and positive times")]
    BadAnchors,
    #[error("invalid cost breakdown: N={n}, N1={n1}, N2={n2}")]
    InvalidBreakdown { n: u64, n1: u64, n2: u64 },
    #[error("unknown model profile {0:?}")]
    UnknownProfile(String),
    #[error("profile file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AttentionKind {
    Mha,
    Gqa,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub n_layers: u32,
    pub kv_heads: u32,
    pub head_dim: u32,
    pub dtype_bytes: u32,
    pub attention_kind: AttentionKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.n_layers == 0 || self.kv_heads == 0 || self.head_dim == 0 {
            return Err(CostError::ZeroGeometry(self.name.clone()));
        }
        if !matches!(self.dtype_bytes, 1 | 2 | 4) {
            return Err(CostError::BadDtype(self.name.clone()));
        }
        Ok(())
    }

    /// K and V bytes for one token in one layer.
    pub fn layer_bytes_per_token(&self) -> u64 {
        2 * self.kv_heads as u64 * self.head_dim as u64 * self.dtype_bytes as u64
    }

    pub fn chunk_layer_bytes(&self, chunk_size: usize) -> u64 {
        self.layer_bytes_per_token() * chunk_size as u64
    }
}

/// Bytes of K and V across every layer for `tokens` tokens.
pub fn kv_bytes(tokens: u64, model: &ModelConfig) -> u64 {
    model.n_layers as u64 * model.layer_bytes_per_token() * tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyMode {
    #[default]
    Batched,
    Unbatched,
}

impl CopyMode {
    pub fn overhead_s(self) -> f64 {
        match self {
            CopyMode::Batched => BATCHED_COPY_OVERHEAD_S,
            CopyMode::Unbatched => UNBATCHED_COPY_OVERHEAD_S,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandwidthConfig {
    /// Host↔device bytes/s, each direction.
    pub pcie_bw: f64,
    pub ssd_read_bw: f64,
    pub ssd_write_bw: f64,
    /// Launch cost per chunk-layer copy.
    pub per_copy_overhead_s: f64,
}

impl Default for BandwidthConfig {
    fn default() -> Self {
        Self {
            pcie_bw: 24e9,
            ssd_read_bw: 3e9,
            ssd_write_bw: 0.5e9,
            per_copy_overhead_s: BATCHED_COPY_OVERHEAD_S,
        }
    }
}

impl BandwidthConfig {
    pub fn with_copy_mode(mut self, mode: CopyMode) -> Self {
        self.per_copy_overhead_s = mode.overhead_s();
        self
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let bws = [self.pcie_bw, self.ssd_read_bw, self.ssd_write_bw];
        let overhead = self.per_copy_overhead_s;
        if bws.iter().all(|v| v.is_finite() && *v > 0.0) && overhead.is_finite() && overhead >= 0.0 {
            Ok(())
        } else {
            Err(CostError::NonPositiveBandwidth)
        }
    }
}

/// Seconds to move `bytes` at `bw` bytes/s in `n_copies` launches.
pub fn transfer_time(bytes: u64, bw: f64, n_copies: u64, per_copy_overhead_s: f64) -> f64 {
    bytes as f64 / bw + n_copies as f64 * per_copy_overhead_s
}

/// Per-layer prefill cost `alpha·N2 + beta·N2·N`, plus a per-token decode cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeParams {
    pub alpha: f64,
    pub beta: f64,
    pub decode_tok_s: f64,
}

/// A measured (context length, full prefill time) point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub tokens: u64,
    pub seconds: f64,
}

impl ComputeParams {
    pub fn validate(&self) -> Result<(), CostError> {
        let ok =
            self.alpha >= 0.0 && self.beta >= 0.0 && (self.alpha > 0.0 || self.beta > 0.0) && self.decode_tok_s >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(CostError::BadComputeParams)
        }
    }

    /// Solve for `alpha` and `beta` so that full prefills of both anchor
    /// lengths take exactly the anchor times.
    pub fn calibrate(model: &ModelConfig, a: Anchor, b: Anchor, decode_tok_s: f64) -> Result<Self, CostError> {
        if a.tokens == b.tokens || a.tokens == 0 || b.tokens == 0 || a.seconds <= 0.0 || b.seconds <= 0.0 {
            return Err(CostError::BadAnchors);
        }
        let layers = model.n_layers as f64;
        let (na, nb) = (a.tokens as f64, b.tokens as f64);
        let (ta, tb) = (a.seconds / layers, b.seconds / layers);
        // alpha·n + beta·n² = t at both anchors
        let det = na * nb * nb - nb * na * na;
        let alpha = (ta * nb * nb - tb * na * na) / det;
        let beta = (na * tb - nb * ta) / det;
        let params = Self {
            alpha,
            beta,
            decode_tok_s,
        };
        params.validate().map_err(|_| CostError::BadAnchors)?;
        Ok(params)
    }
}

/// Prefill time for `new_tokens` fresh tokens attending over `total_context`.
pub fn compute_time(new_tokens: u64, total_context: u64, model: &ModelConfig, params: &ComputeParams) -> f64 {
    debug_assert!(new_tokens <= total_context);
    let n2 = new_tokens as f64;
    let n = total_context as f64;
    model.n_layers as f64 * (params.alpha * n2 + params.beta * n2 * n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct SyncCostBreakdown {
    pub N: u64,
    pub N1: u64,
    pub N2: u64,
    /// Transfer time for the full sequence (load and offload cost the same).
    pub C1: f64,
    /// Compute time for the full sequence.
    pub C2: f64,
    pub C: f64,
}

impl SyncCostBreakdown {
    /// `N1/N·C1 + N2/N·C2 + N2/N·C1`: load matched, compute and offload the rest.
    pub fn expanded(&self) -> f64 {
        let n = self.N as f64;
        let (f1, f2) = (self.N1 as f64 / n, self.N2 as f64 / n);
        f1 * self.C1 + f2 * self.C2 + f2 * self.C1
    }

    /// `C1 + N2/N·C2`: the transfer term does not depend on the hit ratio.
    pub fn collapsed(&self) -> f64 {
        self.C1 + (self.N2 as f64 / self.N as f64) * self.C2
    }

    /// Transfer cost as a share of the compute-only cost.
    pub fn transfer_overhead_ratio(&self) -> f64 {
        self.C1 / self.C2
    }
}

/// Synchronous load → compute → offload cost for a partially cached sequence.
#[allow(non_snake_case)]
pub fn sync_cost(N: u64, N1: u64, N2: u64, C1: f64, C2: f64) -> Result<SyncCostBreakdown, CostError> {
    if N == 0 || N1.checked_add(N2) != Some(N) {
        return Err(CostError::InvalidBreakdown { n: N, n1: N1, n2: N2 });
    }
    let mut b = SyncCostBreakdown {
        N,
        N1,
        N2,
        C1,
        C2,
        C: 0.0,
    };
    let collapsed = b.collapsed();
    let expanded = b.expanded();
    debug_assert!(
        (collapsed - expanded).abs() <= 1e-12 * collapsed.abs().max(expanded.abs()).max(f64::MIN_POSITIVE),
        "algebraic forms disagree: {collapsed} vs {expanded}"
    );
    b.C = collapsed;
    Ok(b)
}

/// A model profile as stored in a profile file: geometry plus compute anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub compute_anchors: [Anchor; 2],
    pub decode_tok_s: f64,
}

impl ModelProfile {
    pub fn compute_params(&self) -> Result<ComputeParams, CostError> {
        self.model.validate()?;
        ComputeParams::calibrate(
            &self.model,
            self.compute_anchors[0],
            self.compute_anchors[1],
            self.decode_tok_s,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub models: Vec<ModelProfile>,
}

const DEFAULT_PROFILES: &str = include_str!("../profiles/default.json");

impl ProfileSet {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_PROFILES).expect("shipped profile file parses")
    }

    pub fn from_json(s: &str) -> Result<Self, CostError> {
        serde_json::from_str(s).map_err(|e| CostError::Parse(e.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&ModelProfile, CostError> {
        self.models
            .iter()
            .find(|p| p.model.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| CostError::UnknownProfile(name.to_string()))
    }
}

/// Everything the engine needs to price a step.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub model: ModelConfig,
    pub bandwidth: BandwidthConfig,
    pub compute: ComputeParams,
    pub chunk_size: usize,
}

impl CostModel {
    pub fn new(
        model: ModelConfig,
        bandwidth: BandwidthConfig,
        compute: ComputeParams,
        chunk_size: usize,
    ) -> Result<Self, CostError> {
        model.validate()?;
        bandwidth.validate()?;
        compute.validate()?;
        Ok(Self {
            model,
            bandwidth,
            compute,
            chunk_size,
        })
    }

    pub fn from_profile(
        profile: &ModelProfile,
        bandwidth: BandwidthConfig,
        chunk_size: usize,
    ) -> Result<Self, CostError> {
        Self::new(profile.model.clone(), bandwidth, profile.compute_params()?, chunk_size)
    }

    pub fn chunk_bytes(&self) -> u64 {
        kv_bytes(self.chunk_size as u64, &self.model)
    }

    pub fn chunk_layer_bytes(&self) -> u64 {
        self.model.chunk_layer_bytes(self.chunk_size)
    }

    /// One chunk-layer over PCIe, including launch overhead.
    pub fn chunk_layer_pcie_s(&self) -> f64 {
        transfer_time(
            self.chunk_layer_bytes(),
            self.bandwidth.pcie_bw,
            1,
            self.bandwidth.per_copy_overhead_s,
        )
    }

    pub fn ssd_read_s(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth.ssd_read_bw
    }

    pub fn ssd_write_s(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth.ssd_write_bw
    }

    pub fn prefill_s(&self, new_tokens: u64, total_context: u64) -> f64 {
        compute_time(new_tokens, total_context, &self.model, &self.compute)
    }

    pub fn decode_s(&self, output_tokens: u64) -> f64 {
        output_tokens as f64 * self.compute.decode_tok_s
    }
}
