mod common;

use common::{random_exclusive_problem, random_observation, Occupants};
use maxpressure::controller::*;
use maxpressure::metrics::summarize;
use maxpressure::stability::{is_feasible, is_feasible_general, FeasibilityProblem};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn uniform_occupancy_occmp_matches_clipped_qmp(
        seed in any::<u64>(),
        k in prop::sample::select(vec![1.0, 1.5, 7.0, 50.0, 0.3, 123.25]),
        current in 0u32..6,
    ) {
        let obs = random_observation(&mut rng(seed), Occupants::Uniform(k));
        let cur = current % obs.phases.len() as u32;
        prop_assert_eq!(select_phase_occmp(&obs, cur).phase, select_phase_qmp(&obs, cur, true).phase);
    }

    #[test]
    fn bus_free_rbmp_is_unclipped_qmp(seed in any::<u64>(), current in 0u32..6, m in 1.0f64..1e7) {
        let obs = random_observation(&mut rng(seed), Occupants::Mixed { bus_share: 0.0 });
        let cur = current % obs.phases.len() as u32;
        prop_assert_eq!(select_phase_rbmp(&obs, cur, m), select_phase_qmp(&obs, cur, false));
    }

    #[test]
    fn occupancy_increase_is_monotone(seed in any::<u64>(), bump in 0.5f64..40.0) {
        let mut r = rng(seed);
        let obs = random_observation(&mut r, Occupants::Mixed { bus_share: 0.05 });
        let Some(k) = (0..obs.movements.len()).find(|&k| qmp_weight(&obs, k, true) > 0.0) else {
            return Ok(());
        };
        let before = select_phase_occmp(&obs, 0).pressures;
        let mut up = obs.clone();
        up.movements[k].occupancy_sum += bump;
        let after = select_phase_occmp(&up, 0).pressures;
        for (p, phase) in obs.phases.iter().enumerate() {
            let slack = 1e-12 * before[p].abs().max(1.0);
            if phase.contains(&k) {
                prop_assert!(after[p] >= before[p] - slack);
            } else {
                prop_assert!(after[p] <= before[p] + slack);
            }
        }
    }

    #[test]
    fn weights_have_expected_signs_and_decisions_are_pure(seed in any::<u64>()) {
        let obs = random_observation(&mut rng(seed), Occupants::Mixed { bus_share: 0.1 });
        for k in 0..obs.movements.len() {
            prop_assert!(occmp_weight(&obs, k) >= 0.0);
            prop_assert!(qmp_weight(&obs, k, true) >= qmp_weight(&obs, k, false));
        }
        for c in ControllerKind::standard_set() {
            let d = c.decide(&obs, 1);
            prop_assert_eq!(&d, &c.decide(&obs.clone(), 1));
            let best = d.pressures.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(d.pressures[d.phase as usize] >= best - 1e-9 * best.abs().max(1.0));
        }
    }

    #[test]
    fn closed_form_agrees_with_vertex_enumeration(seed in any::<u64>()) {
        let p = random_exclusive_problem(&mut rng(seed));
        let (closed, _) = p.closed_form().unwrap();
        let (general, witness) = p.min_cover();
        prop_assert!((closed - general).abs() <= 1e-9 * closed.max(1.0));
        let cov = p.coverage(&witness);
        for ((c, s), d) in cov.iter().zip(&p.saturation).zip(&p.demand) {
            prop_assert!(c * s >= d - 1e-9);
        }
        prop_assert_eq!(
            is_feasible(&p, 1e-3).unwrap().is_feasible(),
            is_feasible_general(&p, 1e-3).unwrap().is_feasible()
        );
    }

    #[test]
    fn feasibility_is_monotone_in_demand(seed in any::<u64>(), shrink in prop::collection::vec(0.0f64..=1.0, 20)) {
        let mut p = random_exclusive_problem(&mut rng(seed));
        // overlap two phases so the general solver is exercised too
        let extra = p.phases[1][0];
        p.phases[0].push(extra);
        if is_feasible(&p, 0.0).unwrap().is_feasible() {
            let smaller = FeasibilityProblem {
                demand: p.demand.iter().zip(shrink.iter().cycle()).map(|(d, s)| d * s).collect(),
                ..p.clone()
            };
            prop_assert!(is_feasible(&smaller, 0.0).unwrap().is_feasible());
        }
    }

    #[test]
    fn summaries_ignore_seed_order(mut v in prop::collection::vec(-1e3f64..1e3, 2..30), seed in any::<u64>()) {
        let a = summarize(&v).unwrap();
        use rand::seq::SliceRandom;
        v.shuffle(&mut rng(seed));
        prop_assert_eq!(a, summarize(&v).unwrap());
    }
}

#[test]
fn summary_matches_independent_two_pass_statistics() {
    let v = [3.25, -1.5, 8.0, 0.125, 4.75, 2.0, -6.5, 11.0, 0.0, 5.5];
    let s = summarize(&v).unwrap();
    // Welford, a second algorithm for the same quantities
    let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
    for &x in &v {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    let se = (m2 / (n - 1.0) / n).sqrt();
    assert!((s.mean - mean).abs() < 1e-12);
    assert!((s.se - se).abs() < 1e-12);
}
