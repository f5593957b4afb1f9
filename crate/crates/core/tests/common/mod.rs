//! Random controller states and feasibility instances shared by the
//! integration suites.
#![allow(dead_code)]

use maxpressure::controller::{DownstreamObservation, MovementObservation, Observation};
use maxpressure::network::{IntersectionId, MovementId};
use maxpressure::stability::FeasibilityProblem;
use rand::seq::SliceRandom;
use rand::Rng;

/// How queued vehicles are filled with persons.
#[derive(Debug, Clone, Copy)]
pub enum Occupants {
    /// Every vehicle carries `k` persons.
    Uniform(f64),
    /// Integer occupancies 1 to 6 with the given share of buses.
    Mixed { bus_share: f64 },
}

/// A random intersection state: 2 to 12 movements, 2 to 6 phases, every
/// movement served by at least one phase.
pub fn random_observation<R: Rng>(rng: &mut R, occupants: Occupants) -> Observation {
    let n = rng.random_range(2..=12usize);
    let movements = (0..n)
        .map(|k| {
            let queue = if rng.random_bool(0.15) {
                0
            } else {
                rng.random_range(0..40u32)
            };
            let (occupancy_sum, bus_count) = match occupants {
                Occupants::Uniform(c) => (c * f64::from(queue), 0),
                Occupants::Mixed { bus_share } => {
                    let mut sum = 0.0;
                    let mut buses = 0;
                    for _ in 0..queue {
                        if rng.random_bool(bus_share) {
                            buses += 1;
                            sum += f64::from(rng.random_range(1..=80u32));
                        } else {
                            sum += f64::from(rng.random_range(1..=6u32));
                        }
                    }
                    (sum, buses)
                }
            };
            let outs = rng.random_range(0..=3usize);
            let mut ratios: Vec<f64> = (0..outs).map(|_| rng.random::<f64>()).collect();
            let total: f64 = ratios.iter().sum::<f64>().max(1.0);
            ratios.iter_mut().for_each(|r| *r /= total);
            MovementObservation {
                movement: MovementId(k as u32),
                queue,
                occupancy_sum,
                bus_count,
                saturation: [1800.0, 1900.0, 1500.0, 600.0][rng.random_range(0..4)] / 3600.0
                    * rng.random_range(1..=3u32) as f64,
                downstream: ratios
                    .into_iter()
                    .map(|turn_ratio| DownstreamObservation {
                        queue: rng.random_range(0..40u32),
                        turn_ratio,
                    })
                    .collect(),
            }
        })
        .collect();
    let p = rng.random_range(2..=6usize);
    let mut phases: Vec<Vec<usize>> = vec![Vec::new(); p];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for (i, &m) in order.iter().enumerate() {
        phases[i % p].push(m);
    }
    for phase in phases.iter_mut() {
        for m in 0..n {
            if !phase.contains(&m) && rng.random_bool(0.2) {
                phase.push(m);
            }
        }
        phase.sort_unstable();
    }
    Observation {
        intersection: IntersectionId(0),
        movements,
        phases,
        is_isolated: rng.random_bool(0.1),
    }
}

/// Exclusive-phase instance with loads spread around the feasibility
/// boundary.
pub fn random_exclusive_problem<R: Rng>(rng: &mut R) -> FeasibilityProblem {
    let p = rng.random_range(2..=5usize);
    let mut phases = Vec::with_capacity(p);
    let mut saturation = Vec::new();
    let mut demand = Vec::new();
    let target = rng.random_range(0.5..1.5) / p as f64;
    for _ in 0..p {
        let size = rng.random_range(1..=4usize);
        let start = demand.len();
        for _ in 0..size {
            let c = rng.random_range(0.2..1.0);
            saturation.push(c);
            demand.push(c * target * rng.random_range(0.2..1.2));
        }
        phases.push((start..start + size).collect());
    }
    FeasibilityProblem {
        demand,
        saturation,
        phases,
    }
}
