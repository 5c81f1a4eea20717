#![allow(dead_code)]

use std::collections::HashMap;

use moesim::config::{Scenario, TierKind};
use moesim::energy_model::{evaluate_with_stats, scenario_stats, Evaluation};
use moesim::expert_stats::{expected_unique_experts, sample_activation};
use moesim::presets;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestError, TestRng, TestRunner};

pub const CASES: u32 = 1000;

/// Runs `prop` over `CASES` inputs drawn from `strategy` with a fixed RNG
/// seed, so every run checks the same cases.
pub fn run_suite<S: Strategy>(
    strategy: S,
    prop: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<u32, String>
where
    S::Value: std::fmt::Debug,
{
    let config = Config { cases: CASES, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    match runner.run(&strategy, prop) {
        Ok(()) => Ok(CASES),
        Err(TestError::Fail(why, value)) => Err(format!("{why} for {value:?}")),
        Err(TestError::Abort(why)) => Err(format!("aborted: {why}")),
    }
}

pub const MOE_MODELS: [&str; 3] = ["mixtral-8x7b", "deepseek-r1", "llama4-maverick"];
pub const ALL_MODELS: [&str; 4] = ["mixtral-8x7b", "deepseek-r1", "llama4-maverick", "llama3.3-70b"];

/// Trial count for activation sampling inside property suites. Energy does
/// not depend on it and latency only weakly, so a small count keeps the
/// suites fast.
pub const SUITE_TRIALS: u32 = 64;

fn base_scenario(model: &str, cluster: &str) -> Scenario {
    let mut s = presets::scenario("mixtral").unwrap();
    s.model = presets::model(model).unwrap();
    s.cluster = presets::cluster(cluster).unwrap();
    s.activation_trials = SUITE_TRIALS;
    s
}

/// Batch sizes skewed towards the small end, where sparsity matters.
pub fn arb_batch() -> impl Strategy<Value = u32> {
    prop_oneof![1u32..=16, 1u32..=1024]
}

pub fn arb_placement() -> impl Strategy<Value = TierKind> {
    prop_oneof![Just(TierKind::DeviceMemory), Just(TierKind::CpuMemory), Just(TierKind::Ssd)]
}

/// Valid scenarios over the shipped model and cluster presets with random
/// topology, batch, prompt length, placement and prefetch settings.
pub fn arb_scenario_from(models: &'static [&'static str]) -> impl Strategy<Value = Scenario> {
    (
        prop::sample::select(models),
        prop::sample::select(&["dgx-h100-nvlink4", "dgx-h100-nvlink5"][..]),
        0u32..=3,
        0u32..=2,
        arb_batch(),
        0u32..=4096,
        arb_placement(),
        any::<bool>(),
        0.05f64..=1.0,
        0.0f64..=2.0,
        any::<u64>(),
    )
        .prop_map(|(model, cluster, gpn_exp, nodes_exp, batch, prompt, placement, prefetch, overlap, flash, seed)| {
            let mut s = base_scenario(model, cluster);
            let mut gpn = 1u32 << gpn_exp;
            let mut nodes = 1u32 << nodes_exp;
            let n_ex = s.model.n_gated_experts.max(1);
            while n_ex % (gpn * nodes) != 0 {
                if nodes > 1 {
                    nodes /= 2;
                } else {
                    gpn /= 2;
                }
            }
            s.cluster.gpus_per_node = gpn;
            s.cluster.n_nodes = nodes;
            s.batch_size = batch;
            s.prompt_length = prompt;
            s.gated_expert_placement = placement;
            s.prefetch_enabled = prefetch;
            s.overlap_fraction = overlap;
            s.flash_read_energy_scale = flash;
            s.seed = seed;
            s.validate().unwrap();
            s
        })
}

pub fn arb_scenario() -> impl Strategy<Value = Scenario> {
    arb_scenario_from(&ALL_MODELS)
}

/// Like [`arb_scenario`], with device-memory, link and offload bandwidths
/// and the compute peak rescaled independently.
pub fn arb_hardware_scenario() -> impl Strategy<Value = Scenario> {
    (arb_scenario(), 0.1f64..=4.0, 0.1f64..=4.0, 0.05f64..=1.0, 0.05f64..=1.0, 0.1f64..=4.0).prop_map(
        |(mut s, hbm, link, ddr, ssd, peak)| {
            let c = &mut s.cluster;
            c.gpu.hbm.read_bandwidth_gb_per_s *= hbm;
            c.gpu.hbm.write_bandwidth_gb_per_s *= hbm;
            c.interconnect.gpu_link_gb_per_s *= link;
            c.cpu_memory.read_bandwidth_gb_per_s = c.interconnect.gpu_link_gb_per_s * ddr;
            c.ssd.read_bandwidth_gb_per_s = c.interconnect.gpu_link_gb_per_s * ssd;
            c.gpu.peak_tflops *= peak;
            s.validate().unwrap();
            s
        },
    )
}

pub fn eval(s: &Scenario) -> Evaluation {
    let stats = scenario_stats(s).unwrap();
    evaluate_with_stats(s, stats)
}

/// Relative floating-point slack for comparisons between separately
/// accumulated sums.
pub const FP_SLACK: f64 = 1e-12;

pub fn prop_additivity(s: Scenario) -> Result<(), TestCaseError> {
    let e = eval(&s).energy;
    prop_assert_eq!(e.total, e.access.total + e.compute.total() + e.background);
    prop_assert_eq!(e.per_token, e.total / f64::from(s.batch_size));
    let by_class: f64 = e.access.by_class.values().sum();
    let by_sink: f64 = e.access.by_sink.values().sum();
    prop_assert!((by_class - e.access.total).abs() <= FP_SLACK * e.access.total);
    prop_assert!((by_sink - e.access.total).abs() <= FP_SLACK * e.access.total);
    prop_assert!(e.access.by_class.values().chain(e.access.by_sink.values()).all(|&j| j >= 0.0));
    prop_assert!(e.compute.mac >= 0.0 && e.compute.cache >= 0.0 && e.background >= 0.0);
    Ok(())
}

pub fn prop_amortization((s, b2): (Scenario, u32)) -> Result<(), TestCaseError> {
    let (lo, hi) = (s.batch_size.min(b2), s.batch_size.max(b2));
    let per_token = |b: u32| {
        let e = eval(&s.with_batch(b)).energy;
        e.moe_access() / f64::from(b)
    };
    let (small, large) = (per_token(lo), per_token(hi));
    prop_assert!(large <= small * (1.0 + FP_SLACK), "B={lo}: {small}, B={hi}: {large}");
    Ok(())
}

pub fn prop_prefetch_keeps_energy(s: Scenario) -> Result<(), TestCaseError> {
    let stats = scenario_stats(&s).unwrap();
    let on = evaluate_with_stats(&Scenario { prefetch_enabled: true, ..s.clone() }, stats);
    let off = evaluate_with_stats(&Scenario { prefetch_enabled: false, ..s }, stats);
    prop_assert_eq!(&on.energy.access, &off.energy.access);
    prop_assert_eq!(on.energy.compute, off.energy.compute);
    Ok(())
}

pub fn prop_prefetch_hides(s: Scenario) -> Result<(), TestCaseError> {
    let stats = scenario_stats(&s).unwrap();
    let on = evaluate_with_stats(&Scenario { prefetch_enabled: true, ..s.clone() }, stats);
    let off = evaluate_with_stats(&Scenario { prefetch_enabled: false, ..s }, stats);
    let (a, b) = (on.latency.token_step_latency, off.latency.token_step_latency);
    prop_assert!(a <= b * (1.0 + FP_SLACK), "prefetch {a} > blocking {b}");
    Ok(())
}

pub fn prop_placement_order(s: Scenario) -> Result<(), TestCaseError> {
    let s = Scenario { flash_read_energy_scale: 1.0, ..s };
    let stats = scenario_stats(&s).unwrap();
    let per_token = |p| evaluate_with_stats(&s.with_placement(p), stats).energy.per_token;
    let (h, d, x) = (per_token(TierKind::DeviceMemory), per_token(TierKind::CpuMemory), per_token(TierKind::Ssd));
    prop_assert!(h <= d * (1.0 + FP_SLACK) && d <= x * (1.0 + FP_SLACK), "hbm {h} ddr {d} ssd {x}");
    Ok(())
}

/// Exact variance of the distinct-expert count: with `M` the number of
/// experts no token picked, `Var = E[M(M-1)] + E[M] - E[M]^2`.
pub fn unique_variance(n_ex: u32, top_k: u32, b: u32) -> f64 {
    let n = f64::from(n_ex);
    let k = f64::from(top_k);
    let q1 = (n - k) / n;
    let q2 = if n_ex > 1 { (n - k) * (n - k - 1.0) / (n * (n - 1.0)) } else { 0.0 };
    let bf = f64::from(b);
    let em = n * q1.powf(bf);
    let emm = n * (n - 1.0) * q2.max(0.0).powf(bf);
    (emm + em - em * em).max(0.0)
}

/// Trial count of the Monte Carlo agreement suite.
pub const MC_TRIALS: u32 = 400;
/// Absolute slack for rounding in the closed form and the variance.
pub const MC_ABS_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub struct McCase {
    pub n_ex: u32,
    pub top_k: u32,
    pub batch: u32,
    pub gpus: u32,
    pub seed: u64,
}

pub fn arb_mc_case() -> impl Strategy<Value = McCase> {
    (prop::sample::select(&[1u32, 2, 4, 8, 16, 32, 64, 128, 256][..]), 0u32..=8, 0u32..=3)
        .prop_flat_map(|(n_ex, gpus_exp, _)| {
            let gpus = (1u32 << gpus_exp).min(n_ex);
            (Just(n_ex), 0..=n_ex.min(8), prop_oneof![1u32..=16, 1u32..=256], Just(gpus), any::<u64>())
        })
        .prop_map(|(n_ex, top_k, batch, gpus, seed)| McCase { n_ex, top_k, batch, gpus, seed })
}

pub fn prop_monte_carlo_3_sigma(c: McCase) -> Result<(), TestCaseError> {
    let st = sample_activation(c.n_ex, c.top_k, c.batch, c.gpus, c.seed, MC_TRIALS).unwrap();
    let closed = expected_unique_experts(c.n_ex, c.top_k, c.batch).unwrap();
    let sigma = (unique_variance(c.n_ex, c.top_k, c.batch) / f64::from(MC_TRIALS)).sqrt();
    let dev = (st.expected_unique - closed).abs();
    prop_assert!(dev <= 3.0 * sigma + MC_ABS_SLACK, "mean {} closed {closed} dev {dev} sigma {sigma}", st.expected_unique);
    Ok(())
}

/// Exact distribution of expert activation obtained by enumerating every
/// top-k subset for every token.
#[derive(Debug, Clone, Copy)]
pub struct Oracle {
    pub mean_unique: f64,
    pub var_unique: f64,
    pub mean_max_per_gpu: f64,
    pub var_max_per_gpu: f64,
}

pub fn oracle(n_ex: u32, top_k: u32, b: u32, gpus: u32) -> Oracle {
    assert!(n_ex <= 16);
    let subsets: Vec<u32> = (0u32..1 << n_ex).filter(|m| m.count_ones() == top_k).collect();
    let p_subset = 1.0 / subsets.len() as f64;
    let mut dist: HashMap<u32, f64> = HashMap::from([(0, 1.0)]);
    for _ in 0..b {
        let mut next: HashMap<u32, f64> = HashMap::new();
        for (&mask, &p) in &dist {
            for &sub in &subsets {
                *next.entry(mask | sub).or_insert(0.0) += p * p_subset;
            }
        }
        dist = next;
    }
    let per_gpu = n_ex / gpus;
    let group = (1u32 << per_gpu) - 1;
    let (mut m1, mut m2, mut x1, mut x2) = (0.0, 0.0, 0.0, 0.0);
    for (&mask, &p) in &dist {
        let u = f64::from(mask.count_ones());
        let mx = (0..gpus).map(|g| (mask >> (g * per_gpu) & group).count_ones()).max().unwrap_or(0);
        let mx = f64::from(mx);
        m1 += p * u;
        m2 += p * u * u;
        x1 += p * mx;
        x2 += p * mx * mx;
    }
    Oracle {
        mean_unique: m1,
        var_unique: (m2 - m1 * m1).max(0.0),
        mean_max_per_gpu: x1,
        var_max_per_gpu: (x2 - x1 * x1).max(0.0),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SmallCase {
    pub n_ex: u32,
    pub top_k: u32,
    pub batch: u32,
    pub gpus: u32,
    pub seed: u64,
}

pub fn arb_small_case() -> impl Strategy<Value = SmallCase> {
    (1u32..=8)
        .prop_flat_map(|n_ex| {
            let divisors: Vec<u32> = (1..=n_ex).filter(|g| n_ex % g == 0).collect();
            (Just(n_ex), 0..=n_ex, 0u32..=4, prop::sample::select(divisors), any::<u64>())
        })
        .prop_map(|(n_ex, top_k, batch, gpus, seed)| SmallCase { n_ex, top_k, batch, gpus, seed })
}

pub const ORACLE_TRIALS: u32 = 4000;
/// Sampling tolerance of the oracle suite, in exact standard errors.
pub const ORACLE_SIGMAS: f64 = 5.0;

pub fn prop_oracle(c: SmallCase) -> Result<(), TestCaseError> {
    let o = oracle(c.n_ex, c.top_k, c.batch, c.gpus);
    let closed = expected_unique_experts(c.n_ex, c.top_k, c.batch).unwrap();
    prop_assert!((o.mean_unique - closed).abs() <= MC_ABS_SLACK, "oracle {} closed {closed}", o.mean_unique);
    let var = unique_variance(c.n_ex, c.top_k, c.batch);
    prop_assert!((o.var_unique - var).abs() <= 1e-9, "oracle var {} formula {var}", o.var_unique);

    let st = sample_activation(c.n_ex, c.top_k, c.batch, c.gpus, c.seed, ORACLE_TRIALS).unwrap();
    let n = f64::from(ORACLE_TRIALS);
    let tol_u = ORACLE_SIGMAS * (o.var_unique / n).sqrt() + MC_ABS_SLACK;
    let tol_m = ORACLE_SIGMAS * (o.var_max_per_gpu / n).sqrt() + MC_ABS_SLACK;
    prop_assert!((st.expected_unique - o.mean_unique).abs() <= tol_u, "unique {} vs {}", st.expected_unique, o.mean_unique);
    prop_assert!(
        (st.expected_max_per_gpu - o.mean_max_per_gpu).abs() <= tol_m,
        "max/gpu {} vs {}",
        st.expected_max_per_gpu,
        o.mean_max_per_gpu
    );
    Ok(())
}
