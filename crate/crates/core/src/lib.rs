//! Analytical simulator for the energy and latency of the LLM decode stage
//! when Mixture-of-Experts weights live in device memory (HBM), CPU memory
//! (DDR) or Flash SSD.
//!
//! The pipeline for one scenario:
//!
//! ```text
//! Scenario ──▶ expert_stats ──▶ perf_model ──▶ energy_model ──▶ Evaluation
//!  (config)    (activation)     (work, latency)  (access, compute, background)
//! ```
//!
//! `experiments` runs grids of scenarios (placement comparisons, latency
//! reports, Flash-energy scaling sweeps) and writes CSV/JSON reports.

pub mod config;
pub mod energy_model;
pub mod experiments;
pub mod expert_stats;
pub mod perf_model;
pub mod presets;
pub mod report;

pub use config::{load_scenario, ClusterConfig, ModelConfig, Placement, Scenario, TierKind};
pub use energy_model::{access_path, evaluate, EnergyBreakdown, Evaluation};
pub use expert_stats::{expected_unique_experts, sample_activation, ActivationStats};
pub use perf_model::{LatencyBreakdown, LayerClass};
