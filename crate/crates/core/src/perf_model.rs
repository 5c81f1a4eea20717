//! Decode-step latency: per-layer rooflines, collective costs, and the
//! prefetch pipeline that streams offloaded gated-expert weights into device
//! memory while earlier layers execute.
//!
//! Work is tracked twice for every layer. The cluster-wide totals feed the
//! energy ledger; the busiest GPU's share (`critical`) sets the latency.
//!
//! Parallelism follows the usual large-MoE serving layout: attention, dense
//! FFN, gate and shared experts are tensor-parallel inside a node and
//! data-parallel across nodes; gated experts are expert-parallel over every
//! GPU of the cluster.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::config::{DecoderKind, InterconnectSpec, Scenario, TierKind};
use crate::expert_stats::{expected_unique_experts, ActivationStats};

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum PerfError {
    #[error("prefetch needs offloaded gated experts; placement is device memory")]
    NothingToPrefetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerClass {
    Attention,
    /// Dense FFN, shared experts and the output head.
    FcFfn,
    Gate,
    MoeGatedExperts,
    AllReduce,
    DispatchCombine,
    PrefetchTransfer,
}

impl LayerClass {
    pub fn name(self) -> &'static str {
        match self {
            LayerClass::Attention => "attention",
            LayerClass::FcFfn => "fc_ffn",
            LayerClass::Gate => "gate",
            LayerClass::MoeGatedExperts => "moe_gated_experts",
            LayerClass::AllReduce => "all_reduce",
            LayerClass::DispatchCombine => "dispatch_combine",
            LayerClass::PrefetchTransfer => "prefetch_transfer",
        }
    }

    pub fn is_communication(self) -> bool {
        matches!(self, LayerClass::AllReduce | LayerClass::DispatchCombine)
    }
}

/// Individual steps of a decoder, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Attention,
    AttentionAllReduce,
    DenseFfn,
    Gate,
    Dispatch,
    GatedExperts,
    SharedExperts,
    Combine,
    FfnAllReduce,
    OutputHead,
}

impl Stage {
    pub fn class(self) -> LayerClass {
        match self {
            Stage::Attention => LayerClass::Attention,
            Stage::DenseFfn | Stage::SharedExperts | Stage::OutputHead => LayerClass::FcFfn,
            Stage::Gate => LayerClass::Gate,
            Stage::GatedExperts => LayerClass::MoeGatedExperts,
            Stage::AttentionAllReduce | Stage::FfnAllReduce => LayerClass::AllReduce,
            Stage::Dispatch | Stage::Combine => LayerClass::DispatchCombine,
        }
    }

    pub fn sequence(kind: DecoderKind) -> &'static [Stage] {
        match kind {
            DecoderKind::Dense => &[
                Stage::Attention,
                Stage::AttentionAllReduce,
                Stage::DenseFfn,
                Stage::FfnAllReduce,
            ],
            DecoderKind::Moe => &[
                Stage::Attention,
                Stage::AttentionAllReduce,
                Stage::Gate,
                Stage::Dispatch,
                Stage::GatedExperts,
                Stage::SharedExperts,
                Stage::Combine,
                Stage::FfnAllReduce,
            ],
        }
    }
}

/// Work on the busiest GPU.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CriticalWork {
    pub flops: f64,
    pub hbm_bytes: f64,
    /// Time of a collective; zero for compute layers.
    pub comm_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerWork {
    pub stage: Stage,
    pub class: LayerClass,
    /// Decoder index, `None` for the output head.
    pub decoder: Option<u32>,
    /// Cluster-wide FLOPs.
    pub flops: f64,
    /// Cluster-wide device-memory traffic, weights included.
    pub hbm_bytes: f64,
    /// The part of `hbm_bytes` that are weights read from `source_tier`.
    pub weight_bytes: f64,
    /// Cluster-wide bytes carried over GPU links.
    pub comm_bytes: f64,
    /// The part of `comm_bytes` that crosses nodes.
    pub internode_bytes: f64,
    pub source_tier: TierKind,
    pub critical: CriticalWork,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllReduce,
    DispatchCombine,
    DataParallelSync,
}

/// How GPUs are split among the parallelism dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParallelPlan {
    pub n_nodes: u32,
    pub gpus_per_node: u32,
}

impl ParallelPlan {
    pub fn of(scenario: &Scenario) -> Self {
        ParallelPlan {
            n_nodes: scenario.cluster.n_nodes,
            gpus_per_node: scenario.cluster.gpus_per_node,
        }
    }

    pub fn tensor_parallel(&self) -> u32 {
        self.gpus_per_node
    }

    pub fn n_gpus(&self) -> u32 {
        self.n_nodes * self.gpus_per_node
    }
}

/// Ring/all-to-all cost model for one collective.
///
/// * `AllReduce`: `bytes` is the buffer reduced inside a node; ring cost
///   `2(p-1)/p * bytes / link` plus `2(p-1)` startup latencies.
/// * `DispatchCombine`: `bytes` is the routed activation volume of the batch.
///   The share whose expert sits on another node crosses the node's
///   aggregated InfiniBand ports, the rest moves over NVLink; the slower of
///   the two sets the time.
/// * `DataParallelSync`: ring all-reduce of `bytes` across nodes over
///   InfiniBand.
pub fn collective_time(
    kind: CollectiveKind,
    bytes: f64,
    plan: ParallelPlan,
    net: &InterconnectSpec,
) -> f64 {
    if bytes <= 0.0 {
        return 0.0;
    }
    let alpha = net.collective_latency();
    match kind {
        CollectiveKind::AllReduce => {
            let p = f64::from(plan.tensor_parallel());
            if p <= 1.0 {
                return 0.0;
            }
            2.0 * (p - 1.0) / p * bytes / net.gpu_link_bandwidth() + 2.0 * (p - 1.0) * alpha
        }
        CollectiveKind::DispatchCombine => {
            if plan.n_gpus() <= 1 {
                return 0.0;
            }
            let nodes = f64::from(plan.n_nodes);
            let inter = bytes * (nodes - 1.0) / nodes;
            let intra = bytes - inter;
            let hops = if plan.n_nodes > 1 { 2.0 } else { 1.0 };
            (intra / net.gpu_link_bandwidth()).max(inter / net.internode_bandwidth()) + hops * alpha
        }
        CollectiveKind::DataParallelSync => {
            let n = f64::from(plan.n_nodes);
            if n <= 1.0 {
                return 0.0;
            }
            2.0 * (n - 1.0) / n * bytes / net.internode_bandwidth() + 2.0 * (n - 1.0) * alpha
        }
    }
}

/// Work of one `stage` of a decoder in `scenario`.
pub fn layer_work(
    scenario: &Scenario,
    stage: Stage,
    decoder: Option<u32>,
    stats: &ActivationStats,
) -> LayerWork {
    let m = &scenario.model;
    let net = &scenario.cluster.interconnect;
    let plan = ParallelPlan::of(scenario);
    let bpp = m.bytes_per_param;
    let d = m.d_model as f64;
    let b = f64::from(scenario.batch_size);
    let tn = f64::from(scenario.tokens_per_node());
    let active_nodes = f64::from(scenario.active_nodes());
    let tp = f64::from(plan.tensor_parallel());
    let act = |tokens: f64| 2.0 * tokens * d * bpp;

    let mut w = LayerWork {
        stage,
        class: stage.class(),
        decoder,
        flops: 0.0,
        hbm_bytes: 0.0,
        weight_bytes: 0.0,
        comm_bytes: 0.0,
        internode_bytes: 0.0,
        source_tier: TierKind::DeviceMemory,
        critical: CriticalWork::default(),
    };

    // Tensor-parallel linear layer with `params` weights, replicated per node.
    let fc = |w: &mut LayerWork, params: f64| {
        let weights = params * bpp;
        w.weight_bytes = weights * active_nodes;
        w.hbm_bytes = w.weight_bytes + act(b);
        w.flops = 2.0 * params * b;
        w.critical.hbm_bytes = weights / tp + act(tn);
        w.critical.flops = 2.0 * params * tn / tp;
    };

    match stage {
        Stage::Attention => {
            let params = m.attention_params_per_decoder();
            let kv_len = scenario.kv_length();
            let kv = m.kv_width_per_token();
            let kv_split = tp.min(m.n_kv_heads.max(1) as f64);
            let score_flops = |tokens: f64| {
                4.0 * tokens * kv_len * (m.n_heads * m.d_head) as f64
            };
            fc(&mut w, params);
            w.hbm_bytes += b * kv_len * kv;
            w.flops += score_flops(b);
            w.critical.hbm_bytes += tn * kv_len * kv / kv_split;
            w.critical.flops += score_flops(tn) / tp;
        }
        Stage::DenseFfn => fc(&mut w, m.dense_ffn_params_per_decoder()),
        Stage::Gate => fc(&mut w, m.gate_params_per_decoder()),
        Stage::SharedExperts => fc(&mut w, m.shared_params_per_decoder()),
        Stage::OutputHead => fc(&mut w, m.lm_head_params()),
        Stage::AttentionAllReduce | Stage::FfnAllReduce => {
            let buffer = tn * d * bpp;
            if tp > 1.0 {
                w.comm_bytes = active_nodes * 2.0 * (tp - 1.0) * buffer;
            }
            w.critical.comm_time = collective_time(CollectiveKind::AllReduce, buffer, plan, net);
        }
        Stage::Dispatch | Stage::Combine => {
            let n_gpus = f64::from(plan.n_gpus());
            let routed = b * f64::from(m.top_k) * d * bpp;
            w.comm_bytes = routed * (1.0 - 1.0 / n_gpus);
            let nodes = f64::from(plan.n_nodes);
            w.internode_bytes = routed * (nodes - 1.0) / nodes;
            w.critical.comm_time =
                collective_time(CollectiveKind::DispatchCombine, routed, plan, net);
        }
        Stage::GatedExperts => {
            let expert_params = m.expert_params();
            let unique = expected_unique_experts(m.n_gated_experts, m.top_k, scenario.batch_size)
                .unwrap_or(0.0);
            let slots = b * f64::from(m.top_k);
            w.source_tier = scenario.gated_expert_placement;
            w.weight_bytes = unique * expert_params * bpp;
            w.hbm_bytes = w.weight_bytes + act(slots);
            w.flops = 2.0 * expert_params * slots;
            w.critical.hbm_bytes = stats.expected_max_per_gpu * expert_params * bpp
                + act(stats.per_gpu_token_load_max);
            w.critical.flops = 2.0 * expert_params * stats.per_gpu_token_load_max;
        }
    }
    w
}

/// Every layer executed by one decode step, in order.
pub fn decode_step_work(scenario: &Scenario, stats: &ActivationStats) -> Vec<LayerWork> {
    let mut out = Vec::new();
    for (i, kind) in scenario.model.decoder_layout().into_iter().enumerate() {
        for &stage in Stage::sequence(kind) {
            out.push(layer_work(scenario, stage, Some(i as u32), stats));
        }
    }
    out.push(layer_work(scenario, Stage::OutputHead, None, stats));
    out
}

/// Roofline time of a layer on the busiest GPU.
pub fn roofline_time(work: &CriticalWork, peak_flops: f64, effective_hbm_bw: f64) -> f64 {
    if work.comm_time > 0.0 {
        return work.comm_time;
    }
    (work.flops / peak_flops).max(work.hbm_bytes / effective_hbm_bw)
}

/// Contended device-memory bandwidth never drops below this fraction of nominal.
pub const CONTENTION_FLOOR: f64 = 0.1;

pub fn effective_hbm_bw(nominal: f64, inbound_rate: f64) -> f64 {
    (nominal - inbound_rate).max(CONTENTION_FLOOR * nominal)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DecoderLatency {
    pub compute_time: f64,
    pub comm_time: f64,
    /// Stall before the gated experts waiting for their weights.
    pub prefetch_exposed_time: f64,
    /// Extra compute time caused by the prefetch stream sharing device memory.
    pub contention_time: f64,
}

impl DecoderLatency {
    pub fn total(&self) -> f64 {
        self.compute_time + self.comm_time + self.prefetch_exposed_time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyBreakdown {
    pub per_decoder: Vec<DecoderLatency>,
    pub output_head_time: f64,
    /// Time per layer class; exposed prefetch stalls are under `prefetch_transfer`.
    pub by_class: BTreeMap<LayerClass, f64>,
    pub token_step_latency: f64,
}

impl LatencyBreakdown {
    pub fn exposed_prefetch(&self) -> f64 {
        self.per_decoder.iter().map(|d| d.prefetch_exposed_time).sum()
    }

    pub fn contention(&self) -> f64 {
        self.per_decoder.iter().map(|d| d.contention_time).sum()
    }
}

struct Segment<'a> {
    work: &'a LayerWork,
    full: f64,
}

/// Stream of one window: layers between the previous transfer's deadline and
/// this transfer's deadline.
struct Window<'a> {
    segments: Vec<Segment<'a>>,
    /// Bytes the busiest GPU must receive before the window ends.
    transfer_bytes: f64,
}

struct GpuModel {
    peak: f64,
    hbm: f64,
}

impl GpuModel {
    fn time(&self, work: &LayerWork, bw: f64) -> f64 {
        roofline_time(&work.critical, self.peak, bw)
    }
}

/// Layer completion time of a window when a transfer occupies device memory
/// at `rate` during `[start, start + duration)`. Returns the total and the
/// actual time of every segment.
fn run_window(
    gpu: &GpuModel,
    window: &Window,
    rate: f64,
    start: f64,
    duration: f64,
) -> (f64, Vec<f64>) {
    let contended_bw = effective_hbm_bw(gpu.hbm, rate);
    let end = start + duration;
    let mut t = 0.0;
    let mut times = Vec::with_capacity(window.segments.len());
    for seg in &window.segments {
        let slow = if duration > 0.0 { gpu.time(seg.work, contended_bw) } else { seg.full };
        let t0 = t;
        let mut left = 1.0_f64;
        while left > 0.0 {
            let (speed_time, until) = if t < start {
                (seg.full, start)
            } else if t < end {
                (slow, end)
            } else {
                (seg.full, f64::INFINITY)
            };
            if speed_time <= 0.0 {
                break;
            }
            let need = left * speed_time;
            if t + need <= until {
                t += need;
                left = 0.0;
            } else {
                left -= (until - t) / speed_time;
                t = until;
            }
        }
        times.push(t - t0);
    }
    (t, times)
}

struct WindowOutcome {
    segment_times: Vec<f64>,
    base: f64,
    layers: f64,
    completion: f64,
}

/// Schedules one window. The prefetch engine may pace its transfer below
/// the link rate; it picks the pace that finishes the window earliest, which
/// is the pace that ends the transfer together with the layers when the link
/// is fast enough.
fn schedule_window(
    gpu: &GpuModel,
    window: &Window,
    link_rate: f64,
    overlap_fraction: f64,
    prefetch: bool,
) -> WindowOutcome {
    let base_times: Vec<f64> = window.segments.iter().map(|s| s.full).collect();
    let base: f64 = base_times.iter().sum();
    let x = window.transfer_bytes;
    if x <= 0.0 {
        return WindowOutcome { segment_times: base_times, base, layers: base, completion: base };
    }
    if !prefetch {
        return WindowOutcome {
            segment_times: base_times,
            base,
            layers: base,
            completion: base + x / link_rate,
        };
    }

    let start = (1.0 - overlap_fraction) * base;
    let eval = |rate: f64| {
        let (layers, times) = run_window(gpu, window, rate, start, x / rate);
        (layers, times, (start + x / rate).max(layers))
    };

    let (l_full, t_full, c_full) = eval(link_rate);
    let mut best = (l_full, t_full, c_full);
    if start + x / link_rate < l_full {
        // Transfer ends before the layers at full rate: slow it down until
        // both end together.
        let (mut lo, mut hi) = (0.0_f64, link_rate);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= 0.0 || mid == lo || mid == hi {
                break;
            }
            let (layers, _, _) = eval(mid);
            if start + x / mid > layers {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let paced = eval(hi);
        if paced.2 < best.2 {
            best = paced;
        }
    }
    let (layers, segment_times, completion) = best;
    WindowOutcome { segment_times, base, layers, completion }
}

/// Decode-step latency for any placement. With device-memory placement no
/// transfer exists and the prefetch flag has no effect.
pub fn decode_latency(scenario: &Scenario, works: &[LayerWork], stats: &ActivationStats) -> LatencyBreakdown {
    let cluster = &scenario.cluster;
    let gpu = GpuModel { peak: cluster.gpu.peak_flops(), hbm: cluster.gpu.hbm.read_bandwidth() };
    let placement = scenario.gated_expert_placement;
    let offloaded = placement != TierKind::DeviceMemory;
    let link_rate = if offloaded {
        cluster.tier(placement).read_bandwidth().min(cluster.interconnect.gpu_link_bandwidth())
    } else {
        f64::INFINITY
    };
    let transfer_bytes = if offloaded {
        stats.expected_max_per_gpu * scenario.model.expert_bytes()
    } else {
        0.0
    };

    // Windows end right before each gated-expert layer; the tail after the
    // last one forms a final window without a transfer.
    let mut windows: Vec<Window> = Vec::new();
    let mut current = Window { segments: Vec::new(), transfer_bytes: 0.0 };
    for w in works {
        if w.stage == Stage::GatedExperts {
            current.transfer_bytes = transfer_bytes;
            windows.push(std::mem::replace(
                &mut current,
                Window { segments: Vec::new(), transfer_bytes: 0.0 },
            ));
        }
        let full = gpu.time(w, gpu.hbm);
        current.segments.push(Segment { work: w, full });
    }
    windows.push(current);

    let n_dec = scenario.model.n_decoders() as usize;
    let mut per_decoder = vec![DecoderLatency::default(); n_dec];
    let mut by_class: BTreeMap<LayerClass, f64> = BTreeMap::new();
    let mut output_head_time = 0.0;
    let mut total = 0.0;

    for (wi, window) in windows.iter().enumerate() {
        let outcome = schedule_window(
            &gpu,
            window,
            link_rate,
            scenario.overlap_fraction,
            scenario.prefetch_enabled,
        );
        total += outcome.completion;
        for (seg, &t) in window.segments.iter().zip(&outcome.segment_times) {
            *by_class.entry(seg.work.class).or_default() += t;
            match seg.work.decoder {
                Some(i) => {
                    let entry = &mut per_decoder[i as usize];
                    if seg.work.class.is_communication() {
                        entry.comm_time += t;
                    } else {
                        entry.compute_time += t;
                        entry.contention_time += t - seg.full;
                    }
                }
                None => output_head_time += t,
            }
        }
        let stall = outcome.completion - outcome.layers;
        debug_assert!(outcome.layers >= outcome.base - 1e-12 * outcome.base.max(1.0));
        if window.transfer_bytes > 0.0 {
            // The stall belongs to the decoder whose experts are waiting,
            // which owns the first segment of the next window.
            if let Some(Some(i)) = windows.get(wi + 1).and_then(|w| w.segments.first()).map(|s| s.work.decoder) {
                per_decoder[i as usize].prefetch_exposed_time += stall;
            }
            *by_class.entry(LayerClass::PrefetchTransfer).or_default() += stall;
        }
    }

    LatencyBreakdown { per_decoder, output_head_time, by_class, token_step_latency: total }
}

/// Latency of an offloaded placement with the prefetch pipeline.
pub fn prefetch_timeline(
    scenario: &Scenario,
    works: &[LayerWork],
    stats: &ActivationStats,
) -> Result<LatencyBreakdown, PerfError> {
    if scenario.gated_expert_placement == TierKind::DeviceMemory {
        return Err(PerfError::NothingToPrefetch);
    }
    Ok(decode_latency(scenario, works, stats))
}
