//! Expert activation statistics under uniform token-to-expert routing.
//!
//! Every token picks `top_k` distinct experts uniformly at random,
//! independently of the other tokens in the batch. Experts are laid out
//! contiguously across GPUs (expert parallelism), so expert `e` lives on GPU
//! `e / (n_ex / n_gpus)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Scenario;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum StatsError {
    #[error("top_k exceeds N_ex ({top_k} > {n_ex})")]
    TopKExceedsExperts { top_k: u32, n_ex: u32 },
    #[error("{n_ex} experts do not divide evenly across {n_gpus} GPUs")]
    UnevenExperts { n_ex: u32, n_gpus: u32 },
    #[error("at least one trial is required")]
    NoTrials,
    #[error("scenario has no MoE decoders")]
    NoMoeDecoders,
}

/// Monte Carlo summary of one MoE decoder's expert activation for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    /// Mean number of distinct experts activated by the batch.
    pub expected_unique: f64,
    /// Mean over trials of the largest number of active experts on one GPU.
    pub expected_max_per_gpu: f64,
    /// Mean over trials of the largest number of token-expert slots routed to one GPU.
    pub per_gpu_token_load_max: f64,
    pub sample_count: u32,
    pub rng_seed: u64,
    /// 95% confidence half-width of `expected_unique`.
    pub ci95_halfwidth: f64,
    /// 95% confidence half-width of `expected_max_per_gpu`.
    pub max_per_gpu_ci95_halfwidth: f64,
}

impl ActivationStats {
    fn empty(seed: u64, trials: u32) -> Self {
        ActivationStats {
            expected_unique: 0.0,
            expected_max_per_gpu: 0.0,
            per_gpu_token_load_max: 0.0,
            sample_count: trials,
            rng_seed: seed,
            ci95_halfwidth: 0.0,
            max_per_gpu_ci95_halfwidth: 0.0,
        }
    }

    /// Standard error of the unique-expert mean.
    pub fn unique_std_error(&self) -> f64 {
        self.ci95_halfwidth / Z95
    }
}

const Z95: f64 = 1.959_963_984_540_054;

fn check_top_k(n_ex: u32, top_k: u32) -> Result<(), StatsError> {
    if top_k > n_ex {
        Err(StatsError::TopKExceedsExperts { top_k, n_ex })
    } else {
        Ok(())
    }
}

/// Expected number of distinct experts hit by `b` tokens each choosing
/// `top_k` of `n_ex` experts: `n_ex * (1 - (1 - top_k/n_ex)^b)`.
pub fn expected_unique_experts(n_ex: u32, top_k: u32, b: u32) -> Result<f64, StatsError> {
    check_top_k(n_ex, top_k)?;
    if b == 0 || n_ex == 0 {
        return Ok(0.0);
    }
    let n = f64::from(n_ex);
    let miss = (n - f64::from(top_k)) / n;
    Ok(n * (1.0 - miss.powf(f64::from(b))))
}

/// Running mean and variance.
#[derive(Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn ci95(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        let var = self.m2 / (self.n - 1.0);
        Z95 * (var / self.n).sqrt()
    }
}

/// Seeded Monte Carlo over token-to-expert draws.
pub fn sample_activation(
    n_ex: u32,
    top_k: u32,
    b: u32,
    n_gpus: u32,
    seed: u64,
    trials: u32,
) -> Result<ActivationStats, StatsError> {
    check_top_k(n_ex, top_k)?;
    if trials == 0 {
        return Err(StatsError::NoTrials);
    }
    if n_gpus == 0 || n_ex % n_gpus != 0 {
        return Err(StatsError::UnevenExperts { n_ex, n_gpus });
    }
    if b == 0 || top_k == 0 {
        return Ok(ActivationStats::empty(seed, trials));
    }

    let per_gpu = (n_ex / n_gpus) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut active = vec![false; n_ex as usize];
    let mut gpu_experts = vec![0u32; n_gpus as usize];
    let mut gpu_load = vec![0u32; n_gpus as usize];

    let mut unique = Welford::default();
    let mut max_experts = Welford::default();
    let mut max_load = Welford::default();

    for _ in 0..trials {
        active.fill(false);
        gpu_experts.fill(0);
        gpu_load.fill(0);
        let mut distinct = 0u32;
        for _ in 0..b {
            for e in rand::seq::index::sample(&mut rng, n_ex as usize, top_k as usize) {
                let g = e / per_gpu;
                gpu_load[g] += 1;
                if !active[e] {
                    active[e] = true;
                    gpu_experts[g] += 1;
                    distinct += 1;
                }
            }
        }
        unique.push(f64::from(distinct));
        max_experts.push(f64::from(*gpu_experts.iter().max().unwrap()));
        max_load.push(f64::from(*gpu_load.iter().max().unwrap()));
    }

    Ok(ActivationStats {
        expected_unique: unique.mean,
        expected_max_per_gpu: max_experts.mean,
        per_gpu_token_load_max: max_load.mean,
        sample_count: trials,
        rng_seed: seed,
        ci95_halfwidth: unique.ci95(),
        max_per_gpu_ci95_halfwidth: max_experts.ci95(),
    })
}

/// Total token-expert draws allowed per activation sample in a scenario
/// evaluation; large batches get fewer trials.
pub const DRAW_BUDGET: u64 = 20_000_000;
/// Lower bound on trials regardless of the draw budget.
pub const MIN_TRIALS: u32 = 500;

/// Trial count used when evaluating a scenario: the configured count, capped
/// by the draw budget.
pub fn scenario_trials(scenario: &Scenario) -> u32 {
    let draws_per_trial = u64::from(scenario.batch_size) * u64::from(scenario.model.top_k.max(1));
    let budget = (DRAW_BUDGET / draws_per_trial.max(1)).min(u64::from(u32::MAX)) as u32;
    scenario.activation_trials.min(budget.max(MIN_TRIALS))
}

/// Activation statistics of one MoE decoder of `scenario`, experts spread
/// over every GPU of the cluster.
pub fn scenario_activation(scenario: &Scenario, seed: u64) -> Result<ActivationStats, StatsError> {
    let m = &scenario.model;
    sample_activation(
        m.n_gated_experts,
        m.top_k,
        scenario.batch_size,
        scenario.cluster.n_gpus(),
        seed,
        scenario_trials(scenario),
    )
}

/// Sum over MoE decoders of the busiest GPU's active expert count, divided by
/// the same sum when every expert is active. Decoders are i.i.d. under
/// uniform routing, so the sum is the per-decoder mean times the decoder
/// count on both sides.
pub fn activation_ratio_sum(scenario: &Scenario, seed: u64) -> Result<f64, StatsError> {
    let m = &scenario.model;
    if m.n_moe_decoders == 0 {
        return Err(StatsError::NoMoeDecoders);
    }
    let stats = scenario_activation(scenario, seed)?;
    let full = f64::from(m.n_gated_experts) / f64::from(scenario.cluster.n_gpus());
    let n_moe = f64::from(m.n_moe_decoders);
    Ok((n_moe * stats.expected_max_per_gpu) / (n_moe * full))
}
