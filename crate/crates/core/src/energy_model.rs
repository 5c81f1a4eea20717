//! Energy ledger of a decode step: memory/storage access along tier paths,
//! GPU compute (MACs plus on-chip operand traffic), and background power
//! integrated over the step latency.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::config::{ClusterConfig, ConfigError, Placement, Scenario, TierKind};
use crate::expert_stats::{scenario_activation, ActivationStats, StatsError};
use crate::perf_model::{decode_latency, decode_step_work, LatencyBreakdown, LayerClass, LayerWork};

const PJ: f64 = 1e-12;
const BITS_PER_BYTE: f64 = 8.0;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathLeg {
    pub tier: TierKind,
    pub direction: Direction,
    pub energy_pj_per_bit: f64,
}

/// Tier reads and writes needed before offloaded data can be computed on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccessPath {
    pub source: TierKind,
    pub legs: Vec<PathLeg>,
    pub total_pj_per_bit: f64,
}

/// Device memory is read directly. CPU memory and Flash are read, written
/// into device memory, then read from there by the compute.
pub fn access_path(placement: Placement, cluster: &ClusterConfig, flash_scale: f64) -> AccessPath {
    let hbm = &cluster.gpu.hbm;
    let hbm_read = PathLeg {
        tier: TierKind::DeviceMemory,
        direction: Direction::Read,
        energy_pj_per_bit: hbm.read_energy_pj_per_bit,
    };
    let hbm_write = PathLeg {
        tier: TierKind::DeviceMemory,
        direction: Direction::Write,
        energy_pj_per_bit: hbm.write_energy_pj_per_bit,
    };
    let legs = match placement {
        TierKind::DeviceMemory => vec![hbm_read],
        TierKind::CpuMemory => vec![
            PathLeg {
                tier: TierKind::CpuMemory,
                direction: Direction::Read,
                energy_pj_per_bit: cluster.cpu_memory.read_energy_pj_per_bit,
            },
            hbm_write,
            hbm_read,
        ],
        TierKind::Ssd => vec![
            PathLeg {
                tier: TierKind::Ssd,
                direction: Direction::Read,
                energy_pj_per_bit: cluster.ssd.read_energy_pj_per_bit * flash_scale,
            },
            hbm_write,
            hbm_read,
        ],
    };
    let total_pj_per_bit = legs.iter().map(|l| l.energy_pj_per_bit).sum();
    AccessPath { source: placement, legs, total_pj_per_bit }
}

/// Where access energy was spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergySink {
    HbmRead,
    HbmWrite,
    CpuMemoryRead,
    FlashRead,
    GpuLink,
    Internode,
}

impl EnergySink {
    fn of(leg: &PathLeg) -> Self {
        match (leg.tier, leg.direction) {
            (TierKind::DeviceMemory, Direction::Read) => EnergySink::HbmRead,
            (TierKind::DeviceMemory, Direction::Write) => EnergySink::HbmWrite,
            (TierKind::CpuMemory, _) => EnergySink::CpuMemoryRead,
            (TierKind::Ssd, _) => EnergySink::FlashRead,
        }
    }
}

/// Access energy in joules.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AccessEnergy {
    pub by_class: BTreeMap<LayerClass, f64>,
    pub by_sink: BTreeMap<EnergySink, f64>,
    pub total: f64,
}

/// Charges every byte at its path energy. Weights read from an offloaded
/// tier take the full offload path; everything else is a device-memory read.
/// Collective traffic also pays link and inter-node energy.
pub fn access_energy(works: &[LayerWork], cluster: &ClusterConfig, flash_scale: f64) -> AccessEnergy {
    let mut out = AccessEnergy::default();
    let hbm_path = access_path(TierKind::DeviceMemory, cluster, flash_scale);
    let offload_paths: BTreeMap<TierKind, AccessPath> = [TierKind::CpuMemory, TierKind::Ssd]
        .into_iter()
        .map(|t| (t, access_path(t, cluster, flash_scale)))
        .collect();
    let net = &cluster.interconnect;

    let charge = |out: &mut AccessEnergy, class, sink, joules: f64| {
        if joules != 0.0 {
            *out.by_class.entry(class).or_insert(0.0) += joules;
            *out.by_sink.entry(sink).or_insert(0.0) += joules;
        }
    };

    for w in works {
        out.by_class.entry(w.class).or_insert(0.0);
        let (offloaded_bytes, path) = match offload_paths.get(&w.source_tier) {
            Some(path) => (w.weight_bytes, path),
            None => (0.0, &hbm_path),
        };
        for leg in &path.legs {
            let j = offloaded_bytes * BITS_PER_BYTE * leg.energy_pj_per_bit * PJ;
            charge(&mut out, w.class, EnergySink::of(leg), j);
        }
        let local = w.hbm_bytes - offloaded_bytes;
        for leg in &hbm_path.legs {
            let j = local * BITS_PER_BYTE * leg.energy_pj_per_bit * PJ;
            charge(&mut out, w.class, EnergySink::of(leg), j);
        }
        let link = (w.comm_bytes - w.internode_bytes).max(0.0);
        charge(&mut out, w.class, EnergySink::GpuLink, link * BITS_PER_BYTE * net.gpu_link_energy_pj_per_bit * PJ);
        charge(
            &mut out,
            w.class,
            EnergySink::Internode,
            w.internode_bytes * BITS_PER_BYTE * net.internode_energy_pj_per_bit * PJ,
        );
    }
    out.total = out.by_class.values().sum();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ComputeEnergy {
    pub mac: f64,
    pub cache: f64,
}

impl ComputeEnergy {
    pub fn total(&self) -> f64 {
        self.mac + self.cache
    }
}

/// MAC energy for every multiply-accumulate plus on-chip traffic, modelled as
/// `cache_traffic_multiplier` times the bytes each layer moves.
pub fn compute_energy(works: &[LayerWork], cluster: &ClusterConfig) -> ComputeEnergy {
    let gpu = &cluster.gpu;
    works.iter().fold(ComputeEnergy::default(), |acc, w| ComputeEnergy {
        mac: acc.mac + w.flops / 2.0 * gpu.mac_energy_pj * PJ,
        cache: acc.cache
            + gpu.cache_traffic_multiplier * w.hbm_bytes * BITS_PER_BYTE * gpu.cache_energy_pj_per_bit * PJ,
    })
}

/// GPU idle power plus CPU-memory static power over `latency` seconds.
/// Flash draws nothing while idle.
pub fn background_energy(latency: f64, cluster: &ClusterConfig) -> f64 {
    let per_gpu = cluster.gpu.idle_power_w + cluster.cpu_memory.static_power_per_gpu();
    latency * f64::from(cluster.n_gpus()) * per_gpu
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub access: AccessEnergy,
    pub compute: ComputeEnergy,
    pub background: f64,
    pub total: f64,
    pub per_token: f64,
}

impl EnergyBreakdown {
    pub fn access_of(&self, class: LayerClass) -> f64 {
        self.access.by_class.get(&class).copied().unwrap_or(0.0)
    }

    /// Energy spent fetching gated-expert weights.
    pub fn moe_access(&self) -> f64 {
        self.access_of(LayerClass::MoeGatedExperts)
    }

    pub fn moe_access_share(&self) -> f64 {
        self.moe_access() / self.total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub stats: ActivationStats,
    pub works: Vec<LayerWork>,
    pub latency: LatencyBreakdown,
    pub energy: EnergyBreakdown,
}

/// Expert activation statistics for a scenario; dense models have none.
pub fn scenario_stats(scenario: &Scenario) -> Result<ActivationStats, StatsError> {
    if scenario.model.n_moe_decoders == 0 {
        let mut s = scenario_activation(&scenario.with_batch(0), scenario.seed)?;
        s.sample_count = 0;
        return Ok(s);
    }
    scenario_activation(scenario, scenario.seed)
}

/// Energy ledger given precomputed work and latency.
pub fn energy_ledger(scenario: &Scenario, works: &[LayerWork], latency: &LatencyBreakdown) -> EnergyBreakdown {
    let cluster = &scenario.cluster;
    let access = access_energy(works, cluster, scenario.flash_read_energy_scale);
    let compute = compute_energy(works, cluster);
    let background = background_energy(latency.token_step_latency, cluster);
    let total = access.total + compute.total() + background;
    EnergyBreakdown {
        access,
        compute,
        background,
        total,
        per_token: total / f64::from(scenario.batch_size),
    }
}

/// Evaluates one decode step with activation statistics already sampled.
pub fn evaluate_with_stats(scenario: &Scenario, stats: ActivationStats) -> Evaluation {
    let works = decode_step_work(scenario, &stats);
    let latency = decode_latency(scenario, &works, &stats);
    let energy = energy_ledger(scenario, &works, &latency);
    Evaluation { stats, works, latency, energy }
}

/// Activation statistics, latency and energy of the first decode step.
pub fn evaluate(scenario: &Scenario) -> Result<Evaluation, EvalError> {
    scenario.validate()?;
    let stats = scenario_stats(scenario)?;
    Ok(evaluate_with_stats(scenario, stats))
}
