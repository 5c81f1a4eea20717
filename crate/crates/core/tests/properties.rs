//! Latency, serialization and sweep properties over randomized scenarios.

mod common;

use moesim::config::{parse_scenario, Scenario, TierKind};
use moesim::energy_model::{access_path, evaluate_with_stats, scenario_stats};
use moesim::experiments::flash_scaling_sweep;
use moesim::perf_model::{effective_hbm_bw, LayerClass};
use moesim::presets;
use proptest::prelude::*;

use common::*;

#[derive(Debug, Clone, Copy)]
enum Knob {
    Hbm,
    Link,
    Offload,
    Internode,
    Peak,
}

fn raise(s: &Scenario, knob: Knob, factor: f64) -> Scenario {
    let mut s = s.clone();
    let c = &mut s.cluster;
    match knob {
        Knob::Hbm => c.gpu.hbm.read_bandwidth_gb_per_s *= factor,
        Knob::Link => c.interconnect.gpu_link_gb_per_s *= factor,
        Knob::Offload => {
            let link = c.interconnect.gpu_link_gb_per_s;
            c.ssd.read_bandwidth_gb_per_s = (c.ssd.read_bandwidth_gb_per_s * factor).min(link);
            c.cpu_memory.read_bandwidth_gb_per_s = (c.cpu_memory.read_bandwidth_gb_per_s * factor).min(link);
        }
        Knob::Internode => c.interconnect.internode_port_gb_per_s *= factor,
        Knob::Peak => c.gpu.peak_tflops *= factor,
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn more_bandwidth_never_slows_down(
        s in arb_hardware_scenario(),
        knob in prop_oneof![Just(Knob::Hbm), Just(Knob::Link), Just(Knob::Offload), Just(Knob::Internode), Just(Knob::Peak)],
        factor in 1.0f64..4.0,
    ) {
        let stats = scenario_stats(&s).unwrap();
        let faster = raise(&s, knob, factor);
        let before = evaluate_with_stats(&s, stats).latency.token_step_latency;
        let after = evaluate_with_stats(&faster, stats).latency.token_step_latency;
        prop_assert!(after <= before * (1.0 + FP_SLACK), "{knob:?} x{factor}: {before} -> {after}");
    }

    #[test]
    fn device_memory_ignores_prefetch_flag(s in arb_scenario()) {
        let s = s.with_placement(TierKind::DeviceMemory);
        let stats = scenario_stats(&s).unwrap();
        let on = evaluate_with_stats(&Scenario { prefetch_enabled: true, ..s.clone() }, stats);
        let off = evaluate_with_stats(&Scenario { prefetch_enabled: false, ..s }, stats);
        prop_assert_eq!(&on.latency, &off.latency);
        prop_assert_eq!(&on.energy, &off.energy);
        prop_assert!(on.latency.per_decoder.iter().all(|d| d.prefetch_exposed_time == 0.0));
    }

    #[test]
    fn token_latency_is_sum_of_decoders(s in arb_hardware_scenario()) {
        let l = eval(&s).latency;
        let sum: f64 = l.per_decoder.iter().map(|d| d.total()).sum::<f64>() + l.output_head_time;
        prop_assert!((sum - l.token_step_latency).abs() <= 1e-9 * l.token_step_latency);
        prop_assert!(l.by_class.values().all(|&t| t >= 0.0));
    }

    #[test]
    fn contended_bandwidth_stays_in_range(nominal in 1e9f64..1e13, rate in 0.0f64..1e14) {
        let bw = effective_hbm_bw(nominal, rate);
        prop_assert!(bw > 0.0 && bw <= nominal);
    }

    #[test]
    fn ssd_path_is_exact_for_any_scale(scale in 0.0f64..4.0) {
        let c = presets::cluster("dgx-h100-nvlink5").unwrap();
        let p = access_path(TierKind::Ssd, &c, scale);
        prop_assert_eq!(p.total_pj_per_bit, 102.4 * scale + 4.2 + 4.2);
    }

    #[test]
    fn scenario_json_round_trips(s in arb_scenario()) {
        let back = parse_scenario(&s.to_json(), "round trip").unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn offload_only_adds_gated_expert_traffic(s in arb_scenario_from(&MOE_MODELS)) {
        let stats = scenario_stats(&s).unwrap();
        let hbm = evaluate_with_stats(&s.with_placement(TierKind::DeviceMemory), stats).energy;
        let ssd = evaluate_with_stats(&s.with_placement(TierKind::Ssd), stats).energy;
        for class in [LayerClass::Attention, LayerClass::FcFfn, LayerClass::Gate, LayerClass::AllReduce] {
            prop_assert_eq!(hbm.access_of(class), ssd.access_of(class));
        }
        prop_assert!(ssd.moe_access() >= hbm.moe_access());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn sweep_rows_grow_with_flash_scale_and_winners_form_a_prefix(
        batches in prop::collection::btree_set(1u32..=64, 1..5),
        scales in prop::collection::btree_set(0u32..=100, 1..5),
    ) {
        let batches: Vec<u32> = batches.into_iter().collect();
        let scales: Vec<f64> = scales.into_iter().map(|s| f64::from(s) / 100.0).collect();
        let g = flash_scaling_sweep(
            &presets::scenario("llama4-maverick").unwrap(),
            &presets::scenario("llama3.3-70b").unwrap(),
            &batches,
            &scales,
        ).unwrap();
        for row in &g.cells {
            prop_assert!(row.iter().all(|&c| c > 0.0));
            prop_assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
        for j in 0..scales.len() {
            let wins: Vec<bool> = g.cells.iter().map(|row| row[j] < 1.0).collect();
            prop_assert!(wins.windows(2).all(|w| w[0] || !w[1]), "scale {}: {wins:?}", scales[j]);
        }
    }
}
