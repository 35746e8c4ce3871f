use epiforge::census::AgeBand;
use epiforge::disease::{
    beta_to_probability, infection_probability, pairwise_transmission_prob, rescale_contact_for_group_size,
    sample_infection_record, state_of, Contact, DiseaseModel, GroupView, HealthState, InfectionRecord,
};
use epiforge::popgen::Context;
use epiforge::rng::{Purpose, Stream};
use proptest::prelude::*;

fn band() -> impl Strategy<Value = AgeBand> {
    (0usize..5).prop_map(AgeBand::from_index)
}

fn context() -> impl Strategy<Value = Context> {
    (0usize..Context::ALL.len()).prop_map(|i| Context::ALL[i])
}

fn record() -> impl Strategy<Value = InfectionRecord> {
    (any::<u64>(), 0u32..200).prop_map(|(seed, step)| {
        let mut rng = Stream::new(seed, 0, 0, Purpose::NaturalHistory);
        sample_infection_record(step, &mut rng, &DiseaseModel::h1n1_2009().natural_history)
    })
}

proptest! {
    #[test]
    fn states_only_move_forward(rec in record()) {
        let mut prev = state_of(Some(&rec), 0);
        let mut seen_latent = prev == HealthState::Latent;
        for step in 1..400u32 {
            let s = state_of(Some(&rec), step);
            prop_assert!(prev.may_precede(s), "{:?} -> {:?} at {}", prev, s, step);
            if prev == HealthState::Recovered {
                prop_assert_eq!(s, HealthState::Recovered);
            }
            seen_latent |= s == HealthState::Latent;
            if s.is_infectious() || s == HealthState::Recovered {
                prop_assert!(seen_latent || rec.step == 0 && rec.latent_steps == 0);
            }
            prev = s;
        }
        prop_assert_eq!(state_of(None, 17), HealthState::Susceptible);
    }

    #[test]
    fn pair_probabilities_are_probabilities(
        rec in record(),
        infector in band(),
        target in band(),
        ctx in context(),
        size in 1usize..3000,
        step in 0u32..400,
        kappa in 0.0f64..4.0,
    ) {
        let model = DiseaseModel::h1n1_2009().with_kappa(kappa);
        let pp = pairwise_transmission_prob(&model, infector, &rec, target, GroupView { context: ctx, size }, step);
        prop_assert!((0.0..=1.0).contains(&pp.p));
        prop_assert!(!pp.clamped);
    }

    #[test]
    fn pair_probability_depends_only_on_its_inputs(
        rec in record(),
        infector in band(),
        target in band(),
        ctx in context(),
        size in 1usize..3000,
        step in 0u32..400,
        shift in 1u32..1000,
    ) {
        // The same course in a different group, started at a different
        // absolute step, gives the same probability at the same elapsed time.
        let model = DiseaseModel::h1n1_2009();
        let moved = InfectionRecord { step: rec.step + shift, ..rec };
        let view = GroupView { context: ctx, size };
        let a = pairwise_transmission_prob(&model, infector, &rec, target, view, step);
        let b = pairwise_transmission_prob(&model, infector, &moved, target, view, step + shift);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn more_contacts_never_lower_risk(recs in proptest::collection::vec((record(), band(), context(), 2usize..40), 0..12), target in band(), step in 0u32..300) {
        let model = DiseaseModel::h1n1_2009();
        let contacts: Vec<Contact<'_>> = recs
            .iter()
            .map(|(r, b, c, s)| Contact { group: GroupView { context: *c, size: *s }, infector_band: *b, infector: r })
            .collect();
        let mut last = 0.0;
        for k in 0..=contacts.len() {
            let p = infection_probability(&model, target, &contacts[..k], step);
            prop_assert!(p >= last - 1e-15);
            prop_assert!((0.0..=1.0).contains(&p));
            last = p;
        }
    }

    #[test]
    fn beta_conversion_is_monotone(a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (qa, qb) = (beta_to_probability(a).unwrap(), beta_to_probability(b).unwrap());
        prop_assert!((0.0..1.0).contains(&qa));
        if a < b {
            prop_assert!(qa <= qb);
        }
    }

    #[test]
    fn rescaling_keeps_expected_contacts(c in 0.0f64..0.01, reference in 2u32..2000, k in 1u32..50) {
        let reference = reference as f64;
        let size = (reference as usize) * k as usize;
        let scaled = rescale_contact_for_group_size(c, size, reference);
        prop_assert!((scaled * size as f64 - c * reference).abs() <= 1e-12);
    }
}
