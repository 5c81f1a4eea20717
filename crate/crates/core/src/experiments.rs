//! Scenario grids built on [`evaluate`]: placement comparisons over batch
//! size, per-placement latency breakdowns, and the Flash-energy scaling grid
//! comparing an SSD-offloaded MoE model against a dense model in HBM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ClusterConfig, Placement, Scenario, TierKind};
use crate::energy_model::{evaluate_with_stats, scenario_stats, EvalError, Evaluation};
use crate::expert_stats::activation_ratio_sum;
use crate::perf_model::LayerClass;

/// Batch sizes used when a grid does not name its own: powers of two up to 1024.
pub fn default_batch_sizes() -> Vec<u32> {
    (0..=10).map(|p| 1u32 << p).collect()
}

/// Flash read-energy scales used by default: nine log-spaced points from
/// 1.0 down to 0.01, four per decade.
pub fn default_flash_scales() -> Vec<f64> {
    log_scales(1.0, 0.01, 9)
}

/// `points` log-spaced values from `hi` down to `lo`, endpoints included.
pub fn log_scales(hi: f64, lo: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![hi],
        _ => {
            let (a, b) = (hi.log10(), lo.log10());
            let step = (b - a) / (points - 1) as f64;
            (0..points)
                .map(|i| match i {
                    0 => hi,
                    i if i == points - 1 => lo,
                    i => 10f64.powf(a + step * i as f64),
                })
                .collect()
        }
    }
}

/// One evaluated cell of a placement comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRow {
    pub model: String,
    pub batch_size: u32,
    pub placement: Placement,
    pub per_token_j: f64,
    pub total_j: f64,
    pub access_j: f64,
    pub moe_access_j: f64,
    pub compute_j: f64,
    pub background_j: f64,
    pub moe_access_share: f64,
    pub token_step_latency_s: f64,
    /// Per-token energy over the device-memory placement at the same batch.
    pub normalized_energy: f64,
    /// Token latency over the device-memory placement at the same batch.
    pub normalized_latency: f64,
}

impl PlacementRow {
    fn new(scenario: &Scenario, eval: &Evaluation, baseline: &Evaluation) -> Self {
        let e = &eval.energy;
        PlacementRow {
            model: scenario.model.name.clone(),
            batch_size: scenario.batch_size,
            placement: scenario.gated_expert_placement,
            per_token_j: e.per_token,
            total_j: e.total,
            access_j: e.access.total,
            moe_access_j: e.moe_access(),
            compute_j: e.compute.total(),
            background_j: e.background,
            moe_access_share: e.moe_access_share(),
            token_step_latency_s: eval.latency.token_step_latency,
            normalized_energy: e.per_token / baseline.energy.per_token,
            normalized_latency: eval.latency.token_step_latency / baseline.latency.token_step_latency,
        }
    }
}

/// Evaluates `base` at every batch size and placement. Rows are ordered by
/// batch size, then by the order of `placements`. The device-memory
/// placement of the same batch is always the normalization baseline, whether
/// or not it is among `placements`.
pub fn placement_comparison(
    base: &Scenario,
    batch_sizes: &[u32],
    placements: &[Placement],
) -> Result<Vec<PlacementRow>, EvalError> {
    let per_batch: Vec<Vec<PlacementRow>> = batch_sizes
        .par_iter()
        .map(|&b| {
            let at_b = base.with_batch(b);
            at_b.validate()?;
            let stats = scenario_stats(&at_b)?;
            let baseline_scenario = at_b.with_placement(TierKind::DeviceMemory);
            let baseline = evaluate_with_stats(&baseline_scenario, stats);
            placements
                .iter()
                .map(|&p| {
                    let s = at_b.with_placement(p);
                    s.validate()?;
                    let eval = if p == TierKind::DeviceMemory {
                        baseline.clone()
                    } else {
                        evaluate_with_stats(&s, stats)
                    };
                    Ok(PlacementRow::new(&s, &eval, &baseline))
                })
                .collect()
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(per_batch.into_iter().flatten().collect())
}

/// Where along the Flash scale axis the MoE model starts to win.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "scale", rename_all = "snake_case")]
pub enum Crossover {
    /// Ratio stays at or above 1 even with free Flash reads.
    Never,
    /// Ratio is below 1 up to the largest scale searched.
    Always,
    /// Ratio equals 1 at this scale and is below 1 for smaller scales.
    At(f64),
}

impl Crossover {
    pub fn scale(self) -> Option<f64> {
        match self {
            Crossover::At(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub moe_model: String,
    pub dense_model: String,
    pub seed: u64,
}

/// Per-token energy ratio of an SSD-offloaded MoE model to a dense model
/// held in device memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub batch_sizes: Vec<u32>,
    pub flash_scales: Vec<f64>,
    /// `cells[i][j]` is the ratio at `batch_sizes[i]` and `flash_scales[j]`.
    pub cells: Vec<Vec<f64>>,
    /// Crossover per batch size, searched on `[0, max(flash_scales)]`.
    pub crossovers: Vec<Crossover>,
    pub metadata: SweepMeta,
}

impl SweepGrid {
    pub fn cell(&self, batch: u32, scale: f64) -> Option<f64> {
        let i = self.batch_sizes.iter().position(|&b| b == batch)?;
        let j = self.flash_scales.iter().position(|&s| s == scale)?;
        Some(self.cells[i][j])
    }

    /// Batch sizes with at least one cell below 1.
    pub fn winning_batches(&self) -> Vec<u32> {
        self.batch_sizes
            .iter()
            .zip(&self.cells)
            .filter(|(_, row)| row.iter().any(|&r| r < 1.0))
            .map(|(&b, _)| b)
            .collect()
    }
}

/// Removes CPU memory from a cluster, leaving a GPU + SSD system.
pub fn without_cpu_memory(mut cluster: ClusterConfig) -> ClusterConfig {
    cluster.cpu_memory.capacity_per_gpu_gb = 0.0;
    cluster
}

const BISECTION_STEPS: usize = 60;

/// Ratio grid of `moe` (gated experts on SSD) against `dense` (device
/// memory) on a system without CPU memory, so background power is GPU idle
/// power only. The flash scale only changes access energy, so activation
/// statistics are sampled once per batch size.
pub fn flash_scaling_sweep(
    moe: &Scenario,
    dense: &Scenario,
    batch_sizes: &[u32],
    flash_scales: &[f64],
) -> Result<SweepGrid, EvalError> {
    let mut moe = moe.with_placement(TierKind::Ssd);
    moe.cluster = without_cpu_memory(moe.cluster);
    let mut dense = dense.with_placement(TierKind::DeviceMemory);
    dense.cluster = without_cpu_memory(dense.cluster);
    let max_scale = flash_scales.iter().copied().fold(0.0, f64::max);

    let rows: Vec<(Vec<f64>, Crossover)> = batch_sizes
        .par_iter()
        .map(|&b| {
            let dense_b = dense.with_batch(b);
            dense_b.validate()?;
            let dense_eval = evaluate_with_stats(&dense_b, scenario_stats(&dense_b)?);
            let moe_b = moe.with_batch(b);
            moe_b.validate()?;
            let stats = scenario_stats(&moe_b)?;
            let ratio = |scale: f64| {
                let s = Scenario { flash_read_energy_scale: scale, ..moe_b.clone() };
                evaluate_with_stats(&s, stats).energy.per_token / dense_eval.energy.per_token
            };
            let cells = flash_scales.iter().map(|&s| ratio(s)).collect();
            Ok((cells, find_crossover(ratio, max_scale)))
        })
        .collect::<Result<_, EvalError>>()?;

    let (cells, crossovers) = rows.into_iter().unzip();
    Ok(SweepGrid {
        batch_sizes: batch_sizes.to_vec(),
        flash_scales: flash_scales.to_vec(),
        cells,
        crossovers,
        metadata: SweepMeta {
            moe_model: moe.model.name.clone(),
            dense_model: dense.model.name.clone(),
            seed: moe.seed,
        },
    })
}

/// Bisects a ratio that is non-decreasing in the scale for the point where
/// it reaches 1.
fn find_crossover(ratio: impl Fn(f64) -> f64, max_scale: f64) -> Crossover {
    if ratio(0.0) >= 1.0 {
        return Crossover::Never;
    }
    if ratio(max_scale) < 1.0 {
        return Crossover::Always;
    }
    let (mut lo, mut hi) = (0.0, max_scale);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Crossover::At(0.5 * (lo + hi))
}

/// Stacked latency components of one placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub cluster: String,
    pub placement: Placement,
    pub attention_s: f64,
    /// Dense FFN, shared experts and output head.
    pub fc_ffn_s: f64,
    /// Gate and gated experts.
    pub moe_s: f64,
    pub communication_s: f64,
    pub exposed_prefetch_s: f64,
    pub token_step_latency_s: f64,
    /// Latency over device-memory placement on the same cluster.
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model: String,
    pub batch_size: u32,
    /// Busiest-GPU active experts summed over MoE decoders, over the same sum
    /// with every expert active.
    pub activation_ratio_sum: f64,
    pub rows: Vec<LatencyRow>,
}

/// Latency breakdown of `base` for each cluster and placement.
pub fn latency_report(
    base: &Scenario,
    placements: &[Placement],
    clusters: &[ClusterConfig],
) -> Result<LatencyReport, EvalError> {
    base.validate()?;
    let mut rows = Vec::with_capacity(clusters.len() * placements.len());
    for cluster in clusters {
        let mut on_cluster = base.clone();
        on_cluster.cluster = ClusterConfig {
            n_nodes: base.cluster.n_nodes,
            gpus_per_node: base.cluster.gpus_per_node,
            ..cluster.clone()
        };
        on_cluster.validate()?;
        let stats = scenario_stats(&on_cluster)?;
        let baseline =
            evaluate_with_stats(&on_cluster.with_placement(TierKind::DeviceMemory), stats);
        for &p in placements {
            let s = on_cluster.with_placement(p);
            s.validate()?;
            let eval = evaluate_with_stats(&s, stats);
            let t = |classes: &[LayerClass]| -> f64 {
                classes.iter().filter_map(|c| eval.latency.by_class.get(c)).sum()
            };
            rows.push(LatencyRow {
                cluster: cluster.name.clone(),
                placement: p,
                attention_s: t(&[LayerClass::Attention]),
                fc_ffn_s: t(&[LayerClass::FcFfn]),
                moe_s: t(&[LayerClass::Gate, LayerClass::MoeGatedExperts]),
                communication_s: t(&[LayerClass::AllReduce, LayerClass::DispatchCombine]),
                exposed_prefetch_s: t(&[LayerClass::PrefetchTransfer]),
                token_step_latency_s: eval.latency.token_step_latency,
                penalty: eval.latency.token_step_latency / baseline.latency.token_step_latency,
            });
        }
    }
    let activation_ratio_sum = if base.model.n_moe_decoders > 0 {
        activation_ratio_sum(base, base.seed)?
    } else {
        0.0
    };
    Ok(LatencyReport {
        model: base.model.name.clone(),
        batch_size: base.batch_size,
        activation_ratio_sum,
        rows,
    })
}
