mod common;

use epiforge::analysis::{
    attack_rate_tables, equal_count_bins, estimate_r0, pairwise_synchrony_by_distance, peak_day, synchrony,
    synchrony_by_size, PeakMode,
};
use epiforge::disease::DiseaseModel;
use epiforge::engine::{run, SeedSpec, SimConfig};
use proptest::prelude::*;
use statrs::statistics::Statistics;

fn mode() -> impl Strategy<Value = PeakMode> {
    prop_oneof![Just(PeakMode::Raw), Just(PeakMode::Smoothed)]
}

proptest! {
    #[test]
    fn synchrony_is_reciprocal_sample_variance(days in proptest::collection::vec(0u32..200, 2..60)) {
        let xs: Vec<f64> = days.iter().map(|&d| d as f64).collect();
        let var = xs.clone().variance();
        let s = synchrony(&xs).unwrap();
        if var == 0.0 {
            prop_assert!(s.fully_synchronous);
            prop_assert!(s.value.is_none());
        } else {
            let v = s.value.unwrap();
            prop_assert!((v - 1.0 / var).abs() <= 1e-12 * (1.0 / var).max(1.0));
        }
    }

    #[test]
    fn an_outlier_lowers_synchrony(days in proptest::collection::vec(40u32..60, 2..30)) {
        let xs: Vec<f64> = days.iter().map(|&d| d as f64).collect();
        let mut with = xs.clone();
        with.push(500.0);
        let before = synchrony(&xs).unwrap().value.unwrap_or(f64::INFINITY);
        let after = synchrony(&with).unwrap().value.unwrap();
        prop_assert!(after < before);
    }

    #[test]
    fn peak_day_ignores_uniform_scaling(series in proptest::collection::vec(0u32..500, 1..200), factor in 1u32..1000, mode in mode()) {
        let xs: Vec<f64> = series.iter().map(|&v| v as f64).collect();
        let scaled: Vec<f64> = series.iter().map(|&v| (v * factor) as f64).collect();
        prop_assert_eq!(peak_day(&xs, mode), peak_day(&scaled, mode));
    }

    #[test]
    fn equal_count_bins_partition(n in 0usize..2000, bins in 1usize..20) {
        let ranges = equal_count_bins(n, bins);
        prop_assert_eq!(ranges.len(), bins);
        let mut next = 0;
        for r in &ranges {
            prop_assert_eq!(r.start, next);
            next = r.end;
            prop_assert!(r.len() == n / bins || r.len() == n / bins + 1);
        }
        prop_assert_eq!(next, n);
    }

    #[test]
    fn size_bins_ignore_input_order(seed in any::<u64>(), mode in mode()) {
        let (outputs, sizes, ids) = common::hierarchical_outputs(3);
        let base = synchrony_by_size(&outputs, &sizes, &ids, 4, mode).unwrap();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        epiforge::rng::Stream::from_key(seed).shuffle(&mut order);
        let p_sizes: Vec<usize> = order.iter().map(|&k| sizes[k]).collect();
        let p_ids: Vec<String> = order.iter().map(|&k| ids[k].clone()).collect();
        let p_outputs: Vec<_> = outputs
            .iter()
            .map(|o| common::synthetic_output(order.iter().map(|&k| o.sla_incidence[k].clone()).collect()))
            .collect();
        let permuted = synchrony_by_size(&p_outputs, &p_sizes, &p_ids, 4, mode).unwrap();
        prop_assert_eq!(base.bins, permuted.bins);
    }

    #[test]
    fn distance_bins_ignore_input_order(seed in any::<u64>(), mode in mode()) {
        let (outputs, regions) = common::null_outputs(2, 9);
        let base = pairwise_synchrony_by_distance(&outputs, &regions, 5, mode).unwrap();
        let mut order: Vec<usize> = (0..regions.slas.len()).collect();
        epiforge::rng::Stream::from_key(seed).shuffle(&mut order);
        let mut p_regions = regions.clone();
        p_regions.slas = order.iter().map(|&k| regions.slas[k].clone()).collect();
        let p_outputs: Vec<_> = outputs
            .iter()
            .map(|o| common::synthetic_output(order.iter().map(|&k| o.sla_incidence[k].clone()).collect()))
            .collect();
        let permuted = pairwise_synchrony_by_distance(&p_outputs, &p_regions, 5, mode).unwrap();
        prop_assert_eq!(base.bins, permuted.bins);
    }
}

#[test]
fn pair_of_peaks_ten_and_twelve() {
    assert_eq!(synchrony(&[10.0, 12.0]).unwrap().value, Some(0.5));
    assert_eq!(synchrony(&[10.0, 12.0, 14.0]).unwrap().value, Some(0.25));
}

#[test]
fn r0_histogram_mean_is_the_estimate() {
    let (_, pop) = common::fixture(4, 2, 300, 2);
    let est = estimate_r0(&pop, &DiseaseModel::h1n1_2009(), 1.5, 300, 4);
    let total: u64 = est.histogram.iter().sum();
    assert_eq!(total as usize, est.samples);
    let mean = est.histogram.iter().enumerate().map(|(k, &h)| k as f64 * h as f64).sum::<f64>() / total as f64;
    assert_eq!(mean, est.r0);
    let zero = estimate_r0(&pop, &DiseaseModel::h1n1_2009(), 0.0, 50, 4);
    assert_eq!(zero.r0, 0.0);
    assert_eq!(zero.histogram, vec![50]);
}

#[test]
fn overall_attack_rate_is_banding_free() {
    let (_, pop) = common::small();
    let config = SimConfig {
        duration_days: 120,
        kappa: 1.3,
        seed: 8,
        seeding: SeedSpec::Random { count: 10 },
        threads: 1,
        ..SimConfig::default()
    };
    let out = run(&pop, &DiseaseModel::h1n1_2009(), &config).unwrap();
    let rates = attack_rate_tables(&out, &pop);
    let direct = out.cumulative_ill() as f64 / pop.len() as f64 * 1e4;
    assert!((rates.national_overall - direct).abs() < 1e-9);
    let bands = pop.band_counts();
    let weighted: f64 = (0..5).map(|b| rates.national[b] * bands[b] as f64).sum::<f64>() / pop.len() as f64;
    assert!((weighted - direct).abs() < 1e-9);
}

#[test]
fn single_sla_community_rate_is_national() {
    let (_, pop) = common::fixture(1, 3, 400, 5);
    let config = SimConfig {
        duration_days: 100,
        kappa: 1.5,
        seed: 2,
        seeding: SeedSpec::Random { count: 5 },
        threads: 1,
        ..SimConfig::default()
    };
    let out = run(&pop, &DiseaseModel::h1n1_2009(), &config).unwrap();
    let rates = attack_rate_tables(&out, &pop);
    assert_eq!(rates.community, rates.national);
    assert!((rates.community_overall - rates.national_overall).abs() < 1e-9);
}
