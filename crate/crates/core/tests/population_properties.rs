mod common;

use epiforge::census::{generate_fixture, parse_bundle, write_bundle, BundlePaths, FixtureSpec};
use epiforge::popgen::build_population;
use proptest::prelude::*;

fn spec() -> impl Strategy<Value = FixtureSpec> {
    (1usize..=6, 1usize..=4, 50u64..=400, any::<u64>()).prop_map(|(n_slas, n_cds_per_sla, population_per_cd, seed)| {
        FixtureSpec {
            n_slas,
            n_cds_per_sla,
            population_per_cd,
            seed,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bundle_survives_csv_round_trip(spec in spec()) {
        let bundle = generate_fixture(spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let back = parse_bundle(&BundlePaths::in_dir(dir.path())).unwrap();
        prop_assert_eq!(back, bundle);
    }

    #[test]
    fn fixture_is_a_function_of_its_spec(spec in spec()) {
        prop_assert_eq!(generate_fixture(spec).unwrap(), generate_fixture(spec).unwrap());
    }

    #[test]
    fn built_populations_keep_their_structure(spec in spec(), seed in any::<u64>()) {
        let bundle = generate_fixture(spec).unwrap();
        let pop = build_population(&bundle, seed).unwrap();
        prop_assert_eq!(pop.len() as u64, bundle.population());
        if let Err(e) = common::check_structure(&bundle, &pop) {
            prop_assert!(false, "{}", e);
        }
        prop_assert_eq!(pop.digest(), build_population(&bundle, seed).unwrap().digest());
    }
}

#[test]
fn enrolment_rate_matches_attendance() {
    let (bundle, pop) = common::desk();
    common::check_structure(&bundle, &pop).unwrap();
    let rate = pop.report.enrolment_rate();
    assert!((rate - 0.987).abs() <= 0.005, "enrolment rate {rate}");
}
