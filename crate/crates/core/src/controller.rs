//! Decentralized max-pressure signal controllers.
//!
//! All three policies share one shape: compute a weight per movement from
//! the local [`Observation`], sum weight × saturation flow over each phase,
//! and activate the phase with the largest pressure.
//!
//! * Q-MP: weight is the upstream queue minus the turn-ratio weighted
//!   downstream queues. Unclipped unless asked.
//! * OCC-MP: the Q-MP weight clipped at zero and scaled by the average
//!   occupancy of the queued upstream vehicles.
//! * RB-MP: the unclipped Q-MP weight plus a large constant `M` on every
//!   movement with at least one bus in its queue.

use serde::{Deserialize, Serialize};

use crate::network::{IntersectionId, MovementId};

/// Default priority constant for RB-MP.
pub const DEFAULT_BUS_PRIORITY: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamObservation {
    pub queue: u32,
    pub turn_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementObservation {
    pub movement: MovementId,
    pub queue: u32,
    pub occupancy_sum: f64,
    pub bus_count: u32,
    /// Nominal saturation flow c(l,m), vehicles per second.
    pub saturation: f64,
    /// Movements leaving the downstream link. Empty for exit movements and at
    /// isolated intersections.
    pub downstream: Vec<DownstreamObservation>,
}

impl MovementObservation {
    pub fn average_occupancy(&self) -> f64 {
        if self.queue == 0 {
            0.0
        } else {
            self.occupancy_sum / f64::from(self.queue)
        }
    }
}

/// What one intersection's controller sees at a control boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub intersection: IntersectionId,
    pub movements: Vec<MovementObservation>,
    /// For each phase, indices into `movements` it serves.
    pub phases: Vec<Vec<usize>>,
    pub is_isolated: bool,
}

impl Observation {
    pub fn saturations(&self) -> Vec<f64> {
        self.movements.iter().map(|m| m.saturation).collect()
    }

    pub fn has_buses(&self) -> bool {
        self.movements.iter().any(|m| m.bus_count > 0)
    }
}

/// Q-MP weight of movement `idx`, optionally clipped at zero.
pub fn qmp_weight(obs: &Observation, idx: usize, clip: bool) -> f64 {
    let mv = &obs.movements[idx];
    let downstream: f64 = if obs.is_isolated {
        0.0
    } else {
        mv.downstream.iter().map(|d| f64::from(d.queue) * d.turn_ratio).sum()
    };
    let w = f64::from(mv.queue) - downstream;
    if clip {
        w.max(0.0)
    } else {
        w
    }
}

/// OCC-MP weight: average upstream occupancy times the clipped Q-MP weight.
pub fn occmp_weight(obs: &Observation, idx: usize) -> f64 {
    obs.movements[idx].average_occupancy() * qmp_weight(obs, idx, true)
}

/// RB-MP weight: unclipped Q-MP weight plus `bus_priority` once if any bus
/// is queued on the movement.
pub fn rbmp_weight(obs: &Observation, idx: usize, bus_priority: f64) -> f64 {
    let w = qmp_weight(obs, idx, false);
    if obs.movements[idx].bus_count > 0 {
        w + bus_priority
    } else {
        w
    }
}

/// Pressure of one phase: sum of weight × saturation over served movements.
pub fn pressure(weights: &[f64], phase: &[usize], saturation: &[f64]) -> f64 {
    phase.iter().map(|&k| weights[k] * saturation[k]).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDecision {
    pub phase: u32,
    pub pressures: Vec<f64>,
}

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Index of the largest pressure. Pressures within a relative 1e-9 of the
/// maximum count as tied; among tied phases the current one is kept,
/// otherwise the lowest index wins.
pub fn argmax_phase(pressures: &[f64], current: u32) -> u32 {
    let best = pressures.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if pressures.get(current as usize).is_some_and(|&p| tied(p, best)) {
        return current;
    }
    pressures.iter().position(|&p| tied(p, best)).unwrap_or(0) as u32
}

fn decide(obs: &Observation, current: u32, weights: Vec<f64>) -> PhaseDecision {
    let saturation = obs.saturations();
    let pressures: Vec<f64> = obs
        .phases
        .iter()
        .map(|phase| pressure(&weights, phase, &saturation))
        .collect();
    PhaseDecision {
        phase: argmax_phase(&pressures, current),
        pressures,
    }
}

pub fn select_phase_qmp(obs: &Observation, current: u32, clip: bool) -> PhaseDecision {
    let weights = (0..obs.movements.len()).map(|k| qmp_weight(obs, k, clip)).collect();
    decide(obs, current, weights)
}

pub fn select_phase_occmp(obs: &Observation, current: u32) -> PhaseDecision {
    let weights = (0..obs.movements.len()).map(|k| occmp_weight(obs, k)).collect();
    decide(obs, current, weights)
}

pub fn select_phase_rbmp(obs: &Observation, current: u32, bus_priority: f64) -> PhaseDecision {
    let weights = (0..obs.movements.len())
        .map(|k| rbmp_weight(obs, k, bus_priority))
        .collect();
    decide(obs, current, weights)
}

/// Controller policy and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ControllerKind {
    #[serde(rename = "q-mp")]
    QMp {
        #[serde(default)]
        clip: bool,
    },
    #[serde(rename = "occ-mp")]
    OccMp,
    #[serde(rename = "rb-mp")]
    RbMp {
        #[serde(default = "default_bus_priority")]
        bus_priority: f64,
    },
}

fn default_bus_priority() -> f64 {
    DEFAULT_BUS_PRIORITY
}

impl ControllerKind {
    /// The three policies with their default parameters, baseline first.
    pub fn standard_set() -> [ControllerKind; 3] {
        [
            ControllerKind::QMp { clip: false },
            ControllerKind::OccMp,
            ControllerKind::RbMp {
                bus_priority: DEFAULT_BUS_PRIORITY,
            },
        ]
    }

    pub fn decide(&self, obs: &Observation, current: u32) -> PhaseDecision {
        match *self {
            ControllerKind::QMp { clip } => select_phase_qmp(obs, current, clip),
            ControllerKind::OccMp => select_phase_occmp(obs, current),
            ControllerKind::RbMp { bus_priority } => select_phase_rbmp(obs, current, bus_priority),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::QMp { clip: false } => "Q-MP",
            ControllerKind::QMp { clip: true } => "Q-MP(clipped)",
            ControllerKind::OccMp => "OCC-MP",
            ControllerKind::RbMp { .. } => "RB-MP",
        }
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, ControllerKind::QMp { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(queue: u32, occupancies: &[f64], buses: u32, downstream: u32) -> MovementObservation {
        assert!(occupancies.is_empty() || occupancies.len() == queue as usize);
        MovementObservation {
            movement: MovementId(0),
            queue,
            occupancy_sum: if occupancies.is_empty() {
                f64::from(queue)
            } else {
                occupancies.iter().sum()
            },
            bus_count: buses,
            saturation: 0.5,
            downstream: vec![DownstreamObservation {
                queue: downstream,
                turn_ratio: 1.0,
            }],
        }
    }

    /// Two one-way movements: W-E with a 20-person bus among three
    /// vehicles, N-S with five single-occupant cars, two vehicles
    /// downstream of each.
    fn worked_example() -> Observation {
        Observation {
            intersection: IntersectionId(0),
            movements: vec![mv(3, &[20.0, 2.0, 2.0], 1, 2), mv(5, &[1.0; 5], 0, 2)],
            phases: vec![vec![0], vec![1]],
            is_isolated: false,
        }
    }

    #[test]
    fn worked_example_weights() {
        let obs = worked_example();
        assert_eq!(qmp_weight(&obs, 0, false), 1.0);
        assert_eq!(qmp_weight(&obs, 1, false), 3.0);
        assert_eq!(occmp_weight(&obs, 0), 8.0);
        assert_eq!(occmp_weight(&obs, 1), 3.0);
    }

    #[test]
    fn worked_example_decisions() {
        let obs = worked_example();
        assert_eq!(select_phase_occmp(&obs, 1).phase, 0);
        assert_eq!(select_phase_qmp(&obs, 0, false).phase, 1);
        assert_eq!(select_phase_rbmp(&obs, 1, DEFAULT_BUS_PRIORITY).phase, 0);
    }

    #[test]
    fn qmp_weight_sign_and_clip() {
        let obs = Observation {
            intersection: IntersectionId(0),
            movements: vec![mv(0, &[], 0, 4)],
            phases: vec![vec![0]],
            is_isolated: false,
        };
        assert_eq!(qmp_weight(&obs, 0, false), -4.0);
        assert_eq!(qmp_weight(&obs, 0, true), 0.0);
        let isolated = Observation {
            is_isolated: true,
            ..obs
        };
        assert_eq!(qmp_weight(&isolated, 0, false), 0.0);
    }

    #[test]
    fn occmp_weight_is_zero_when_downstream_dominates() {
        let obs = Observation {
            intersection: IntersectionId(0),
            movements: vec![mv(3, &[2.0, 2.0, 2.0], 0, 5)],
            phases: vec![vec![0]],
            is_isolated: false,
        };
        assert_eq!(occmp_weight(&obs, 0), 0.0);
    }

    #[test]
    fn pressure_examples() {
        assert_eq!(pressure(&[8.0], &[0], &[0.5]), 4.0);
        assert_eq!(pressure(&[0.0, 0.0], &[0, 1], &[0.5, 0.5]), 0.0);
        assert_eq!(pressure(&[3.0, 1.0], &[0, 1], &[0.5, 0.5]), 2.0);
    }

    #[test]
    fn ties_keep_current_phase_then_lowest_index() {
        assert_eq!(argmax_phase(&[0.0, 0.0, 0.0, 0.0], 2), 2);
        assert_eq!(argmax_phase(&[1.0, 3.0, 3.0], 0), 1);
        assert_eq!(argmax_phase(&[1.0, 3.0, 3.0], 2), 2);
        assert_eq!(argmax_phase(&[5.0, 3.0], 1), 0);
    }

    #[test]
    fn rbmp_conflicting_buses_fall_back_to_private_queues() {
        let obs = Observation {
            intersection: IntersectionId(0),
            movements: vec![mv(7, &[], 1, 0), mv(2, &[], 1, 0)],
            phases: vec![vec![0], vec![1]],
            is_isolated: false,
        };
        assert_eq!(select_phase_rbmp(&obs, 1, DEFAULT_BUS_PRIORITY).phase, 0);
        // one M per movement regardless of how many buses are queued
        let mut many = obs.clone();
        many.movements[1].bus_count = 2;
        assert_eq!(select_phase_rbmp(&many, 1, DEFAULT_BUS_PRIORITY).phase, 0);
    }

    #[test]
    fn controller_kind_serde_names() {
        let kinds = ControllerKind::standard_set();
        let text = serde_json::to_string(&kinds).unwrap();
        assert!(text.contains("\"q-mp\"") && text.contains("\"occ-mp\"") && text.contains("\"rb-mp\""));
        let back: [ControllerKind; 3] = serde_json::from_str(&text).unwrap();
        assert_eq!(back, kinds);
        assert_eq!(kinds.map(|k| k.label()), ["Q-MP", "OCC-MP", "RB-MP"]);
    }
}
