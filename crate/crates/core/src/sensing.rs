//! Builds controller observations from ground truth under degraded
//! information: unknown private occupancies, APC error on bus occupancy and
//! partial connected-vehicle penetration.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::controller::{DownstreamObservation, MovementObservation, Observation};
use crate::dynamics::{Simulation, Vehicle, VehicleClass};
use crate::error::{Error, Result};
use crate::network::{IntersectionId, MovementId};
use crate::rng::{SeedStreams, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PrivateOccupancyMode {
    #[default]
    Exact,
    /// Every visible private vehicle counts as `value` persons.
    FixedAverage { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensingConfig {
    pub private_occupancy: PrivateOccupancyMode,
    /// Standard deviation of the per-crossing APC error, percent of the true
    /// occupancy.
    pub apc_sigma_percent: f64,
    /// Share of private vehicles visible to controllers, in (0, 1].
    pub cv_penetration: f64,
    pub buses_always_connected: bool,
}

impl Default for SensingConfig {
    fn default() -> Self {
        SensingConfig {
            private_occupancy: PrivateOccupancyMode::Exact,
            apc_sigma_percent: 0.0,
            cv_penetration: 1.0,
            buses_always_connected: true,
        }
    }
}

impl SensingConfig {
    /// Scenario 1 style: private occupancy unknown, assumed 1.5 persons.
    pub fn fixed_average(value: f64) -> Self {
        SensingConfig {
            private_occupancy: PrivateOccupancyMode::FixedAverage { value },
            ..SensingConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cv_penetration > 0.0 && self.cv_penetration <= 1.0) {
            return Err(Error::config(
                "sensing.cv_penetration",
                format!("must lie in (0, 1], got {}", self.cv_penetration),
            ));
        }
        if !(self.apc_sigma_percent >= 0.0 && self.apc_sigma_percent.is_finite()) {
            return Err(Error::config("sensing.apc_sigma_percent", "must be non-negative"));
        }
        if let PrivateOccupancyMode::FixedAverage { value } = self.private_occupancy {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::config("sensing.private_occupancy.value", "must be positive"));
            }
        }
        Ok(())
    }

    /// Connectivity of a new vehicle given its uniform draw in [0, 1).
    pub fn is_connected(&self, class: VehicleClass, draw: f64) -> bool {
        match class {
            VehicleClass::Bus if self.buses_always_connected => true,
            _ => draw < self.cv_penetration,
        }
    }

    /// Whether observations equal ground truth for every possible state.
    pub fn is_full_information(&self) -> bool {
        self.cv_penetration >= 1.0
            && self.apc_sigma_percent == 0.0
            && self.private_occupancy == PrivateOccupancyMode::Exact
    }
}

fn build_observation(
    sim: &Simulation,
    node: IntersectionId,
    turn_ratios: &[f64],
    visible: impl Fn(&Vehicle) -> bool,
    persons: impl Fn(&Vehicle) -> f64,
) -> Observation {
    let net = sim.network();
    let n = net.intersection(node);
    let observed_queue = |m: MovementId| sim.movement_queue(m).filter(|v| visible(v)).count() as u32;
    let movements = n
        .movements
        .iter()
        .map(|&m| {
            let movement = net.movement(m);
            let (mut queue, mut occupancy_sum, mut bus_count) = (0u32, 0.0, 0u32);
            for v in sim.movement_queue(m).filter(|v| visible(v)) {
                queue += 1;
                occupancy_sum += persons(v);
                bus_count += u32::from(v.is_bus());
            }
            let downstream = if n.is_isolated {
                Vec::new()
            } else {
                net.movements_from(movement.downstream)
                    .iter()
                    .map(|&d| DownstreamObservation {
                        queue: observed_queue(d),
                        turn_ratio: turn_ratios[d.index()],
                    })
                    .collect()
            };
            MovementObservation {
                movement: m,
                queue,
                occupancy_sum,
                bus_count,
                saturation: movement.saturation_per_s(),
                downstream,
            }
        })
        .collect();
    let phases = n
        .phases
        .iter()
        .map(|p| {
            p.served_movements
                .iter()
                .map(|m| n.movements.iter().position(|x| x == m).expect("phase movement at node"))
                .collect()
        })
        .collect();
    Observation {
        intersection: node,
        movements,
        phases,
        is_isolated: n.is_isolated,
    }
}

/// The observation an intersection controller receives under `config`.
/// Reads the state only.
pub fn observe(sim: &Simulation, node: IntersectionId, turn_ratios: &[f64], config: &SensingConfig) -> Observation {
    build_observation(
        sim,
        node,
        turn_ratios,
        |v| v.connected,
        |v| match (v.class, config.private_occupancy) {
            (VehicleClass::Bus, _) => v.reported_occupancy,
            (VehicleClass::Car, PrivateOccupancyMode::Exact) => v.true_occupancy,
            (VehicleClass::Car, PrivateOccupancyMode::FixedAverage { value }) => value,
        },
    )
}

/// Observation built straight from the true state: every vehicle visible,
/// true occupancies.
pub fn observe_ground_truth(sim: &Simulation, node: IntersectionId, turn_ratios: &[f64]) -> Observation {
    build_observation(sim, node, turn_ratios, |_| true, |v| v.true_occupancy)
}

/// Applies one intersection crossing worth of APC error to a bus. The error
/// is additive across crossings; the reported value is clamped at zero.
pub fn apc_perturb<R: Rng + ?Sized>(bus: &mut Vehicle, sigma_percent: f64, rng: &mut R) {
    if !bus.is_bus() || sigma_percent <= 0.0 {
        return;
    }
    let z: f64 = rng.sample(StandardNormal);
    bus.apc_error += z * sigma_percent / 100.0 * bus.true_occupancy;
    bus.reported_occupancy = (bus.true_occupancy + bus.apc_error).max(0.0);
}

const APC_TAG: u64 = 0x0A9C;

/// Dedicated stream for one bus crossing, so the error sequence of a bus is
/// independent of every other random draw in the run.
pub fn apc_stream(streams: &SeedStreams, bus: u32, crossing: u32) -> StreamRng {
    StreamRng::seed_from_u64(streams.mix(APC_TAG, u64::from(bus), u64::from(crossing)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynamicsConfig;
    use crate::network::{build_grid, LinkId, LinkTemplate, PhaseScheme, Turn};
    use std::sync::Arc;

    fn bus(occ: f64) -> Vehicle {
        Vehicle::new(VehicleClass::Bus, occ, Arc::from(vec![LinkId(0)]), 0.0, true)
    }

    #[test]
    fn zero_sigma_keeps_truth() {
        let streams = SeedStreams::new(1);
        let mut b = bus(50.0);
        for k in 0..10 {
            apc_perturb(&mut b, 0.0, &mut apc_stream(&streams, 0, k));
            assert_eq!(b.reported_occupancy, 50.0);
        }
    }

    #[test]
    fn apc_error_std_after_one_and_k_crossings() {
        let streams = SeedStreams::new(11);
        let replicas = 10_000u32;
        let std_after = |k: u32| {
            let errs: Vec<f64> = (0..replicas)
                .map(|r| {
                    let mut b = bus(50.0);
                    for c in 0..k {
                        apc_perturb(&mut b, 40.0, &mut apc_stream(&streams, r, c));
                    }
                    b.apc_error
                })
                .collect();
            let mean = errs.iter().sum::<f64>() / f64::from(replicas);
            (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / f64::from(replicas - 1)).sqrt()
        };
        assert!((std_after(1) - 20.0).abs() <= 1.0);
        for k in [2u32, 4, 9] {
            let expected = f64::from(k).sqrt() * 20.0;
            assert!((std_after(k) - expected).abs() <= 0.05 * expected, "k={k}");
        }
    }

    #[test]
    fn reported_never_negative() {
        let streams = SeedStreams::new(5);
        let mut b = bus(3.0);
        for c in 0..200 {
            apc_perturb(&mut b, 40.0, &mut apc_stream(&streams, 9, c));
            assert!(b.reported_occupancy >= 0.0);
        }
    }

    #[test]
    fn penetration_validation() {
        let mut cfg = SensingConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.cv_penetration = 0.0;
        assert!(cfg.validate().is_err());
        cfg.cv_penetration = 1.2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bernoulli_visibility_mean() {
        let cfg = SensingConfig {
            cv_penetration: 0.2,
            ..SensingConfig::default()
        };
        let mut rng = SeedStreams::new(3).stream("cv", &[]);
        let trials = 10_000;
        let visible: usize = (0..trials)
            .map(|_| {
                (0..10)
                    .filter(|_| cfg.is_connected(VehicleClass::Car, rng.random()))
                    .count()
            })
            .sum();
        let mean = visible as f64 / trials as f64;
        assert!((mean - 2.0).abs() <= 0.05, "mean visible {mean}");
        assert!(cfg.is_connected(VehicleClass::Bus, 0.99));
    }

    /// Queue four cars and one bus reporting 30 persons on one movement.
    fn queued_state(cv: bool) -> (Simulation, IntersectionId, MovementId) {
        let net = Arc::new(build_grid(1, 1, &LinkTemplate::default(), PhaseScheme::FourPhase).unwrap());
        let src = net.centroids[0].source_link;
        let mv = net
            .movements_from(src)
            .iter()
            .copied()
            .find(|&m| net.movement(m).turn == Turn::Left)
            .unwrap();
        let route: Arc<[LinkId]> = Arc::from(vec![src, net.movement(mv).downstream]);
        let mut sim = Simulation::new(Arc::clone(&net), &DynamicsConfig::default()).unwrap();
        let mut rng = SeedStreams::new(0).stream("sat", &[]);
        let mut arrivals: Vec<Vehicle> = (0..4)
            .map(|k| Vehicle::new(VehicleClass::Car, 1.0 + k as f64, route.clone(), 0.0, cv || k == 0))
            .collect();
        let mut b = Vehicle::new(VehicleClass::Bus, 30.0, route, 0.0, true);
        b.reported_occupancy = 30.0;
        arrivals.push(b);
        sim.advance_step(&[0], arrivals, &mut rng).unwrap();
        for _ in 0..20 {
            // left movement of the north approach is in phase 1; keep it red
            sim.advance_step(&[0], Vec::new(), &mut rng).unwrap();
        }
        (sim, net.intersections[0].id, mv)
    }

    #[test]
    fn fixed_average_rule() {
        let (sim, node, mv) = queued_state(true);
        let ratios: Vec<f64> = sim.network().movements.iter().map(|m| m.turn_ratio).collect();
        let obs = observe(&sim, node, &ratios, &SensingConfig::fixed_average(1.5));
        let m = obs.movements.iter().find(|o| o.movement == mv).unwrap();
        assert_eq!((m.queue, m.bus_count), (5, 1));
        assert_eq!(m.occupancy_sum, 4.0 * 1.5 + 30.0);
    }

    #[test]
    fn full_information_equals_ground_truth_and_observe_is_pure() {
        let (sim, node, _) = queued_state(true);
        let ratios: Vec<f64> = sim.network().movements.iter().map(|m| m.turn_ratio).collect();
        let before: Vec<u32> = sim.network().movements.iter().map(|m| sim.queue_len(m.id)).collect();
        let a = observe(&sim, node, &ratios, &SensingConfig::default());
        let b = observe_ground_truth(&sim, node, &ratios);
        assert_eq!(a, b);
        let after: Vec<u32> = sim.network().movements.iter().map(|m| sim.queue_len(m.id)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn only_connected_vehicles_are_counted() {
        let (sim, node, mv) = queued_state(false);
        let ratios: Vec<f64> = sim.network().movements.iter().map(|m| m.turn_ratio).collect();
        let obs = observe(&sim, node, &ratios, &SensingConfig::default());
        let m = obs.movements.iter().find(|o| o.movement == mv).unwrap();
        // first car and the bus are connected
        assert_eq!((m.queue, m.occupancy_sum), (2, 31.0));
    }
}
