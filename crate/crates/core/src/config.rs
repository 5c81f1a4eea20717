//! Input domain types, validation, and scenario loading.
//!
//! A scenario file names a model and a cluster either by preset name or as an
//! inline object, plus the workload (batch size, prompt length) and where the
//! gated expert weights live. Loading resolves the references, applies the
//! optional topology overrides and validates every invariant before anything
//! is evaluated.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::presets;

/// Bytes per gigabyte as used throughout the configuration files.
pub const GB: f64 = 1e9;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {origin}: {source}")]
    Parse {
        origin: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown {kind} preset `{name}`")]
    UnknownPreset { kind: &'static str, name: String },
    #[error("invalid configuration: {0}")]
    Validation(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation(msg.into())
}

/// Level of the memory hierarchy a piece of data is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierKind {
    #[serde(alias = "hbm")]
    DeviceMemory,
    #[serde(alias = "ddr")]
    CpuMemory,
    Ssd,
}

/// Where the gated expert weights are stored.
pub type Placement = TierKind;

impl TierKind {
    pub const ALL: [TierKind; 3] = [TierKind::DeviceMemory, TierKind::CpuMemory, TierKind::Ssd];

    /// Short name used on the command line and in CSV output.
    pub fn short_name(self) -> &'static str {
        match self {
            TierKind::DeviceMemory => "hbm",
            TierKind::CpuMemory => "ddr",
            TierKind::Ssd => "ssd",
        }
    }

    pub fn from_short_name(s: &str) -> Option<TierKind> {
        match s {
            "hbm" | "device_memory" => Some(TierKind::DeviceMemory),
            "ddr" | "cpu_memory" => Some(TierKind::CpuMemory),
            "ssd" => Some(TierKind::Ssd),
            _ => None,
        }
    }
}

impl fmt::Display for TierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// One memory or storage tier as seen from a single GPU.
///
/// Read and write energies are per bit and already include the external I/O
/// path (memory interface, NVLink) between the tier and the GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryTier {
    pub kind: TierKind,
    pub read_energy_pj_per_bit: f64,
    pub write_energy_pj_per_bit: f64,
    pub read_bandwidth_gb_per_s: f64,
    pub write_bandwidth_gb_per_s: f64,
    /// Static power per installed GB. Zero for Flash.
    pub static_power_w_per_gb: f64,
    /// Installed capacity attached to each GPU. Zero means the tier is absent.
    pub capacity_per_gpu_gb: f64,
}

impl MemoryTier {
    pub fn read_bandwidth(&self) -> f64 {
        self.read_bandwidth_gb_per_s * GB
    }

    pub fn write_bandwidth(&self) -> f64 {
        self.write_bandwidth_gb_per_s * GB
    }

    /// Static power drawn by the capacity attached to one GPU, in watts.
    pub fn static_power_per_gpu(&self) -> f64 {
        self.static_power_w_per_gb * self.capacity_per_gpu_gb
    }

    pub fn is_installed(&self) -> bool {
        self.capacity_per_gpu_gb > 0.0
    }

    fn validate(&self, expected: TierKind, what: &str) -> Result<(), ConfigError> {
        if self.kind != expected {
            return Err(invalid(format!(
                "{what}: tier kind is {} but must be {}",
                self.kind, expected
            )));
        }
        positive(self.read_energy_pj_per_bit, what, "read_energy_pj_per_bit")?;
        positive(self.write_energy_pj_per_bit, what, "write_energy_pj_per_bit")?;
        positive(self.read_bandwidth_gb_per_s, what, "read_bandwidth_gb_per_s")?;
        positive(self.write_bandwidth_gb_per_s, what, "write_bandwidth_gb_per_s")?;
        non_negative(self.static_power_w_per_gb, what, "static_power_w_per_gb")?;
        non_negative(self.capacity_per_gpu_gb, what, "capacity_per_gpu_gb")?;
        if self.kind == TierKind::Ssd && self.static_power_w_per_gb != 0.0 {
            return Err(invalid(format!("{what}: SSD static power must be 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterconnectSpec {
    /// NVLink-class bandwidth per direction between a GPU and its peers,
    /// CPU memory and SSD.
    pub gpu_link_gb_per_s: f64,
    pub gpu_link_energy_pj_per_bit: f64,
    pub internode_port_gb_per_s: f64,
    pub internode_port_count: u32,
    pub internode_energy_pj_per_bit: f64,
    /// Fixed startup latency of one collective step, in microseconds.
    #[serde(default)]
    pub collective_latency_us: f64,
}

impl InterconnectSpec {
    pub fn gpu_link_bandwidth(&self) -> f64 {
        self.gpu_link_gb_per_s * GB
    }

    /// Aggregate inter-node bandwidth of one node, per direction.
    pub fn internode_bandwidth(&self) -> f64 {
        self.internode_port_gb_per_s * GB * f64::from(self.internode_port_count)
    }

    pub fn collective_latency(&self) -> f64 {
        self.collective_latency_us * 1e-6
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let what = "interconnect";
        positive(self.gpu_link_gb_per_s, what, "gpu_link_gb_per_s")?;
        non_negative(self.gpu_link_energy_pj_per_bit, what, "gpu_link_energy_pj_per_bit")?;
        positive(self.internode_port_gb_per_s, what, "internode_port_gb_per_s")?;
        if self.internode_port_count == 0 {
            return Err(invalid("interconnect: internode_port_count must be at least 1"));
        }
        non_negative(self.internode_energy_pj_per_bit, what, "internode_energy_pj_per_bit")?;
        non_negative(self.collective_latency_us, what, "collective_latency_us")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    pub peak_tflops: f64,
    pub mac_energy_pj: f64,
    pub cache_energy_pj_per_bit: f64,
    /// On-chip operand traffic as a multiple of the bytes a layer moves
    /// through device memory.
    pub cache_traffic_multiplier: f64,
    pub idle_power_w: f64,
    pub hbm: MemoryTier,
}

impl GpuSpec {
    pub fn peak_flops(&self) -> f64 {
        self.peak_tflops * 1e12
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let what = "gpu";
        positive(self.peak_tflops, what, "peak_tflops")?;
        positive(self.mac_energy_pj, what, "mac_energy_pj")?;
        positive(self.cache_energy_pj_per_bit, what, "cache_energy_pj_per_bit")?;
        positive(self.cache_traffic_multiplier, what, "cache_traffic_multiplier")?;
        positive(self.idle_power_w, what, "idle_power_w")?;
        self.hbm.validate(TierKind::DeviceMemory, "gpu.hbm")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub name: String,
    pub n_nodes: u32,
    pub gpus_per_node: u32,
    pub gpu: GpuSpec,
    pub cpu_memory: MemoryTier,
    pub ssd: MemoryTier,
    pub interconnect: InterconnectSpec,
}

impl ClusterConfig {
    pub fn n_gpus(&self) -> u32 {
        self.n_nodes * self.gpus_per_node
    }

    pub fn tier(&self, kind: TierKind) -> &MemoryTier {
        match kind {
            TierKind::DeviceMemory => &self.gpu.hbm,
            TierKind::CpuMemory => &self.cpu_memory,
            TierKind::Ssd => &self.ssd,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_nodes == 0 {
            return Err(invalid("cluster: n_nodes must be at least 1"));
        }
        if self.gpus_per_node == 0 {
            return Err(invalid("cluster: gpus_per_node must be at least 1"));
        }
        self.gpu.validate()?;
        self.cpu_memory.validate(TierKind::CpuMemory, "cpu_memory")?;
        self.ssd.validate(TierKind::Ssd, "ssd")?;
        self.interconnect.validate()?;
        let link = self.interconnect.gpu_link_gb_per_s;
        for tier in [&self.cpu_memory, &self.ssd] {
            if tier.read_bandwidth_gb_per_s > link {
                return Err(invalid(format!(
                    "{} read bandwidth {} GB/s exceeds the GPU link bandwidth {} GB/s",
                    tier.kind, tier.read_bandwidth_gb_per_s, link
                )));
            }
        }
        Ok(())
    }
}

/// Order in which dense-FFN and MoE decoders appear in the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeLayout {
    /// All dense decoders first, then all MoE decoders.
    #[default]
    DenseFirst,
    /// Dense and MoE decoders alternate, spread as evenly as the counts allow.
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Dense,
    Moe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub d_model: u64,
    pub n_heads: u64,
    pub n_kv_heads: u64,
    pub d_head: u64,
    /// KV-cache bytes per token per decoder. Derived from the key/value heads
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_bytes_per_token: Option<f64>,
    pub n_ffn_decoders: u32,
    pub n_moe_decoders: u32,
    #[serde(default)]
    pub moe_layout: MoeLayout,
    pub ffn_inner_dim: u64,
    pub expert_inner_dim: u64,
    pub n_gated_experts: u32,
    pub n_shared_experts: u32,
    pub top_k: u32,
    pub vocab_size: u64,
    #[serde(default)]
    pub tied_embeddings: bool,
    pub bytes_per_param: f64,
    /// Published total parameter count; the computed count must agree within 5%.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_params: Option<f64>,
}

/// Parameter totals by category.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ParamBreakdown {
    pub embedding: f64,
    pub lm_head: f64,
    pub attention: f64,
    pub dense_ffn: f64,
    pub gate: f64,
    pub shared_experts: f64,
    pub gated_experts: f64,
}

impl ParamBreakdown {
    pub fn total(&self) -> f64 {
        self.embedding
            + self.lm_head
            + self.attention
            + self.dense_ffn
            + self.gate
            + self.shared_experts
            + self.gated_experts
    }

    pub fn gated_share(&self) -> f64 {
        let total = self.total();
        if total == 0.0 {
            0.0
        } else {
            self.gated_experts / total
        }
    }
}

/// Tolerance on the computed parameter count against `reference_params`.
pub const PARAM_TOLERANCE: f64 = 0.05;

impl ModelConfig {
    pub fn n_decoders(&self) -> u32 {
        self.n_ffn_decoders + self.n_moe_decoders
    }

    /// Weights of one attention block: Q and O projections over all heads,
    /// K and V projections over the key/value heads.
    pub fn attention_params_per_decoder(&self) -> f64 {
        let d = self.d_model as f64;
        let q = (self.n_heads * self.d_head) as f64;
        let kv = (self.n_kv_heads * self.d_head) as f64;
        2.0 * d * q + 2.0 * d * kv
    }

    /// Gate, up and down projections.
    pub fn ffn_params(&self, inner: u64) -> f64 {
        3.0 * self.d_model as f64 * inner as f64
    }

    pub fn dense_ffn_params_per_decoder(&self) -> f64 {
        self.ffn_params(self.ffn_inner_dim)
    }

    pub fn expert_params(&self) -> f64 {
        self.ffn_params(self.expert_inner_dim)
    }

    pub fn expert_bytes(&self) -> f64 {
        self.expert_params() * self.bytes_per_param
    }

    pub fn gate_params_per_decoder(&self) -> f64 {
        self.d_model as f64 * f64::from(self.n_gated_experts)
    }

    pub fn shared_params_per_decoder(&self) -> f64 {
        f64::from(self.n_shared_experts) * self.expert_params()
    }

    pub fn lm_head_params(&self) -> f64 {
        self.vocab_size as f64 * self.d_model as f64
    }

    pub fn kv_width_per_token(&self) -> f64 {
        self.kv_bytes_per_token.unwrap_or_else(|| {
            2.0 * (self.n_kv_heads * self.d_head) as f64 * self.bytes_per_param
        })
    }

    /// Parameter totals. The input embedding and the output head are counted
    /// separately; tied embeddings count once.
    pub fn param_count(&self) -> ParamBreakdown {
        let n_dec = f64::from(self.n_decoders());
        let n_moe = f64::from(self.n_moe_decoders);
        let embedding = self.lm_head_params();
        ParamBreakdown {
            embedding,
            lm_head: if self.tied_embeddings { 0.0 } else { embedding },
            attention: n_dec * self.attention_params_per_decoder(),
            dense_ffn: f64::from(self.n_ffn_decoders) * self.dense_ffn_params_per_decoder(),
            gate: n_moe * self.gate_params_per_decoder(),
            shared_experts: n_moe * self.shared_params_per_decoder(),
            gated_experts: n_moe * f64::from(self.n_gated_experts) * self.expert_params(),
        }
    }

    /// Parameters touched by one decode step when `unique_experts` gated
    /// experts are active in every MoE decoder. Everything except the gated
    /// experts is touched in full, following the usual active-parameter
    /// convention that includes the embeddings.
    pub fn touched_params(&self, unique_experts: f64) -> ParamBreakdown {
        let mut p = self.param_count();
        p.gated_experts = f64::from(self.n_moe_decoders) * unique_experts * self.expert_params();
        p
    }

    /// Decoder kinds in execution order.
    pub fn decoder_layout(&self) -> Vec<DecoderKind> {
        let n_moe = self.n_moe_decoders as usize;
        let total = self.n_decoders() as usize;
        match self.moe_layout {
            MoeLayout::DenseFirst => {
                let mut v = vec![DecoderKind::Dense; total - n_moe];
                v.extend(std::iter::repeat(DecoderKind::Moe).take(n_moe));
                v
            }
            MoeLayout::Interleaved => (0..total)
                .map(|i| {
                    // MoE decoder whenever the running quota crosses an integer.
                    if (i + 1) * n_moe / total > i * n_moe / total {
                        DecoderKind::Moe
                    } else {
                        DecoderKind::Dense
                    }
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let what = "model";
        if self.top_k > self.n_gated_experts {
            return Err(invalid("top_k exceeds N_ex"));
        }
        if self.n_moe_decoders > 0 && (self.n_gated_experts == 0 || self.top_k == 0) {
            return Err(invalid(
                "model: MoE decoders need at least one gated expert and top_k >= 1",
            ));
        }
        positive(self.bytes_per_param, what, "bytes_per_param")?;
        if let Some(kv) = self.kv_bytes_per_token {
            non_negative(kv, what, "kv_bytes_per_token")?;
        }
        if let Some(reference) = self.reference_params {
            positive(reference, what, "reference_params")?;
            let total = self.param_count().total();
            let rel = (total - reference).abs() / reference;
            if rel > PARAM_TOLERANCE {
                return Err(invalid(format!(
                    "model {}: computed parameter count {:.4e} differs from reference {:.4e} by {:.1}%",
                    self.name,
                    total,
                    reference,
                    rel * 100.0
                )));
            }
        }
        Ok(())
    }
}

/// Default share of each overlap window the prefetch engine may use. The
/// first tenth of a window goes to issuing the next decoder's expert
/// prediction and setting up the transfer.
pub const DEFAULT_OVERLAP_FRACTION: f64 = 0.9;

/// Default Monte Carlo trial count for expert activation statistics.
pub const DEFAULT_ACTIVATION_TRIALS: u32 = 100_000;

/// A fully resolved and validated evaluation input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub batch_size: u32,
    pub prompt_length: u32,
    pub gated_expert_placement: Placement,
    pub prefetch_enabled: bool,
    pub flash_read_energy_scale: f64,
    /// Fraction of the overlap window during which a prefetch may run.
    pub overlap_fraction: f64,
    pub seed: u64,
    pub activation_trials: u32,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.cluster.validate()?;
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.flash_read_energy_scale.is_finite() && self.flash_read_energy_scale >= 0.0) {
            return Err(invalid("flash_read_energy_scale must be a finite value >= 0"));
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction <= 1.0) {
            return Err(invalid("overlap_fraction must be in (0, 1]"));
        }
        if self.activation_trials == 0 {
            return Err(invalid("activation_trials must be at least 1"));
        }
        let n_gpus = self.cluster.n_gpus();
        if self.model.n_moe_decoders > 0 && self.model.n_gated_experts % n_gpus != 0 {
            return Err(invalid(format!(
                "{} gated experts do not divide evenly across {} GPUs",
                self.model.n_gated_experts, n_gpus
            )));
        }
        if self.gated_expert_placement == TierKind::CpuMemory && !self.cluster.cpu_memory.is_installed()
        {
            return Err(invalid("gated experts placed in CPU memory but none is installed"));
        }
        Ok(())
    }

    /// Tokens held by the busiest node under data parallelism across nodes.
    pub fn tokens_per_node(&self) -> u32 {
        self.batch_size.div_ceil(self.cluster.n_nodes)
    }

    /// Nodes that receive at least one token.
    pub fn active_nodes(&self) -> u32 {
        self.batch_size.min(self.cluster.n_nodes)
    }

    /// KV-cache length seen by the first decode step.
    pub fn kv_length(&self) -> f64 {
        f64::from(self.prompt_length) + 1.0
    }

    pub fn with_placement(&self, placement: Placement) -> Scenario {
        Scenario { gated_expert_placement: placement, ..self.clone() }
    }

    pub fn with_batch(&self, batch_size: u32) -> Scenario {
        Scenario { batch_size, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// A model or cluster given either by preset name or inline.
#[derive(Debug, Clone, PartialEq)]
pub enum Source<T> {
    Preset(String),
    Inline(T),
}

impl<T: Serialize> Serialize for Source<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Source::Preset(name) => s.serialize_str(name),
            Source::Inline(v) => v.serialize(s),
        }
    }
}

impl<'de, T: serde::de::DeserializeOwned> Deserialize<'de> for Source<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        // Going through a Value keeps the inner type's field-level errors
        // instead of a generic "no variant matched".
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::String(name) => Ok(Source::Preset(name)),
            other => serde_json::from_value(other)
                .map(Source::Inline)
                .map_err(serde::de::Error::custom),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

fn default_overlap() -> f64 {
    DEFAULT_OVERLAP_FRACTION
}

fn default_trials() -> u32 {
    DEFAULT_ACTIVATION_TRIALS
}

/// On-disk scenario schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub model: Source<ModelConfig>,
    pub cluster: Source<ClusterConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_nodes: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpus_per_node: Option<u32>,
    pub batch_size: u32,
    pub prompt_length: u32,
    pub gated_expert_placement: Placement,
    #[serde(default = "default_true")]
    pub prefetch_enabled: bool,
    #[serde(default = "default_one")]
    pub flash_read_energy_scale: f64,
    #[serde(default = "default_overlap")]
    pub overlap_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub activation_trials: u32,
}

impl ScenarioFile {
    pub fn resolve(self) -> Result<Scenario, ConfigError> {
        let model = match self.model {
            Source::Preset(name) => presets::model(&name)?,
            Source::Inline(m) => m,
        };
        let mut cluster = match self.cluster {
            Source::Preset(name) => presets::cluster(&name)?,
            Source::Inline(c) => c,
        };
        if let Some(n) = self.n_nodes {
            cluster.n_nodes = n;
        }
        if let Some(g) = self.gpus_per_node {
            cluster.gpus_per_node = g;
        }
        let scenario = Scenario {
            model,
            cluster,
            batch_size: self.batch_size,
            prompt_length: self.prompt_length,
            gated_expert_placement: self.gated_expert_placement,
            prefetch_enabled: self.prefetch_enabled,
            flash_read_energy_scale: self.flash_read_energy_scale,
            overlap_fraction: self.overlap_fraction,
            seed: self.seed,
            activation_trials: self.activation_trials,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Parses and validates a scenario from JSON text.
pub fn parse_scenario(text: &str, origin: &str) -> Result<Scenario, ConfigError> {
    let file: ScenarioFile = serde_json::from_str(text)
        .map_err(|source| ConfigError::Parse { origin: origin.to_string(), source })?;
    file.resolve()
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_scenario(&text, &path.display().to_string())
}

fn positive(v: f64, what: &str, field: &str) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{what}: {field} must be positive, got {v}")))
    }
}

fn non_negative(v: f64, what: &str, field: &str) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{what}: {field} must be non-negative, got {v}")))
    }
}
