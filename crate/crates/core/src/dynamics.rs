//! Discrete-time store-and-forward propagation.
//!
//! Vehicles cross each link at free-flow speed, then wait in a FIFO point
//! queue for their turning movement. A served movement discharges
//! `min(queue, saturation allowance, downstream room)` vehicles per step; the
//! room on a downstream link is shared between competing movements in
//! proportion to what they want, with largest-remainder rounding. Vehicles
//! that cannot enter a full source link wait in a virtual entry queue and are
//! still counted in the network accumulation.
//!
//! Step order: arrivals join entry queues, served movements discharge against
//! a storage snapshot taken at the start of the step, traversals that finish
//! join their movement queue, then entry queues fill free source storage.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{IntersectionId, LinkId, MovementId, NetworkGraph};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl VehicleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Car,
    Bus,
}

#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: VehicleId,
    pub class: VehicleClass,
    /// Persons on board, always at least 1.
    pub true_occupancy: f64,
    /// Occupancy reported to controllers; differs from the truth only for
    /// buses under APC error.
    pub reported_occupancy: f64,
    /// Accumulated APC error, before the clamp at zero.
    pub apc_error: f64,
    pub intersections_crossed: u32,
    /// Visible to controllers. Fixed when the vehicle is created.
    pub connected: bool,
    /// Source link first, sink link last.
    pub route: Arc<[LinkId]>,
    pub route_position: usize,
    pub entry_time: f64,
    pub exit_time: Option<f64>,
    pub link_arrival_time: f64,
}

impl Vehicle {
    pub fn new(class: VehicleClass, occupancy: f64, route: Arc<[LinkId]>, entry_time: f64, connected: bool) -> Self {
        Vehicle {
            id: VehicleId(u32::MAX),
            class,
            true_occupancy: occupancy,
            reported_occupancy: occupancy,
            apc_error: 0.0,
            intersections_crossed: 0,
            connected,
            route,
            route_position: 0,
            entry_time,
            exit_time: None,
            link_arrival_time: entry_time,
        }
    }

    pub fn is_bus(&self) -> bool {
        self.class == VehicleClass::Bus
    }

    pub fn current_link(&self) -> LinkId {
        self.route[self.route_position]
    }
}

/// Queue-level view of one movement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovementState {
    pub movement: MovementId,
    /// Number of queued vehicles, x(l,m).
    pub queue: u32,
    /// Sum of true occupancies over the queue.
    pub occupancy_sum: f64,
}

impl MovementState {
    /// Average occupancy of the queued vehicles, 0 for an empty queue.
    pub fn average_occupancy(&self) -> f64 {
        if self.queue == 0 {
            0.0
        } else {
            self.occupancy_sum / f64::from(self.queue)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    pub step: u64,
    pub dt: f64,
    pub control_interval: f64,
}

impl SimClock {
    pub fn new(dt: f64, control_interval: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config("simulation.dt", "must be positive"));
        }
        let ratio = control_interval / dt;
        if !(ratio >= 1.0 && (ratio - ratio.round()).abs() < 1e-9) {
            return Err(Error::config(
                "simulation.control_interval",
                "must be a positive integer multiple of dt",
            ));
        }
        Ok(SimClock {
            step: 0,
            dt,
            control_interval,
        })
    }

    pub fn control_steps(&self) -> u64 {
        (self.control_interval / self.dt).round() as u64
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn is_control_boundary(&self) -> bool {
        self.step % self.control_steps() == 0
    }
}

/// How realized saturation flow relates to its nominal value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SaturationMode {
    #[default]
    Deterministic,
    /// Accrual multiplied by a factor drawn uniformly from `[1 - a, 1 + a]`.
    Stochastic { amplitude: f64 },
}

impl SaturationMode {
    fn factor(&self, rng: &mut StreamRng) -> f64 {
        match *self {
            SaturationMode::Deterministic => 1.0,
            SaturationMode::Stochastic { amplitude } => {
                let a = amplitude.clamp(0.0, 1.0);
                1.0 + rng.random_range(-a..=a)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub dt: f64,
    pub control_interval: f64,
    #[serde(default)]
    pub saturation: SaturationMode,
    /// Seconds without discharge after a phase change.
    #[serde(default)]
    pub lost_time: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            dt: 1.0,
            control_interval: 10.0,
            saturation: SaturationMode::Deterministic,
            lost_time: 0.0,
        }
    }
}

/// Discharge allowance for one served step. The fractional remainder is
/// carried so the long-run allowance equals the saturation flow exactly.
pub fn service_quota(saturation_vph: f64, dt: f64, carryover: f64, noise: f64) -> (u32, f64) {
    let accrued = carryover + saturation_vph / 3600.0 * dt * noise;
    let whole = (accrued + 1e-9).floor().max(0.0);
    (whole as u32, (accrued - whole).max(0.0))
}

/// Single-movement point-queue update with a downstream storage cap.
/// Returns `(next_queue, discharged)`.
pub fn queue_update(queue: u32, arrivals: u32, allowance: u32, room: u32) -> (u32, u32) {
    let out = queue.min(allowance).min(room);
    (queue - out + arrivals, out)
}

/// Splits `available` slots between requests in proportion to their size,
/// rounding by largest remainder with ties to the lower index.
pub fn allocate_storage(wants: &[u32], available: u32) -> Vec<u32> {
    let total: u64 = wants.iter().map(|&w| u64::from(w)).sum();
    if total <= u64::from(available) {
        return wants.to_vec();
    }
    let avail = u64::from(available);
    let mut grants: Vec<u32> = wants.iter().map(|&w| (avail * u64::from(w) / total) as u32).collect();
    let mut left = available - grants.iter().sum::<u32>();
    let mut order: Vec<usize> = (0..wants.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = avail * u64::from(wants[a]) % total;
        let rb = avail * u64::from(wants[b]) % total;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        if grants[i] < wants[i] {
            grants[i] += 1;
            left -= 1;
        }
    }
    grants
}

/// The movement a vehicle joins at the end of `link`.
pub fn assign_to_movement(net: &NetworkGraph, vehicle: &Vehicle, link: LinkId) -> Result<MovementId> {
    let pos = vehicle
        .route
        .iter()
        .position(|&l| l == link)
        .filter(|&p| p + 1 < vehicle.route.len())
        .ok_or(Error::RouteCorruption {
            vehicle: vehicle.id.0,
            from: link.0,
            to: u32::MAX,
        })?;
    let next = vehicle.route[pos + 1];
    net.movement_between(link, next).ok_or(Error::RouteCorruption {
        vehicle: vehicle.id.0,
        from: link.0,
        to: next.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Discharge {
    pub vehicle: VehicleId,
    pub movement: MovementId,
    pub intersection: IntersectionId,
}

#[derive(Debug, Default, Clone)]
pub struct StepReport {
    pub discharged: Vec<Discharge>,
    pub exited: Vec<VehicleId>,
}

#[derive(Debug, Clone, Default)]
struct LinkState {
    traversing: VecDeque<(u32, u64)>,
    occupancy: u32,
}

#[derive(Debug, Clone, Default)]
struct MovementQueue {
    vehicles: VecDeque<u32>,
    carryover: f64,
}

/// Full mutable state of one run. Owns its vehicles; the network is shared.
#[derive(Debug, Clone)]
pub struct Simulation {
    net: Arc<NetworkGraph>,
    clock: SimClock,
    saturation: SaturationMode,
    lost_steps: u64,
    travel_steps: Vec<u64>,
    vehicles: Vec<Vehicle>,
    links: Vec<LinkState>,
    queues: Vec<MovementQueue>,
    entry_queues: Vec<VecDeque<u32>>,
    active_phase: Vec<u32>,
    lost_until: Vec<u64>,
    entered: u64,
    exited: u64,
    // scratch buffers reused every step
    room: Vec<u32>,
    wants: Vec<(MovementId, u32)>,
}

impl Simulation {
    pub fn new(net: Arc<NetworkGraph>, config: &DynamicsConfig) -> Result<Self> {
        let clock = SimClock::new(config.dt, config.control_interval)?;
        if !(config.lost_time >= 0.0) {
            return Err(Error::config("simulation.lost_time", "must be non-negative"));
        }
        if let SaturationMode::Stochastic { amplitude } = config.saturation {
            if !(0.0..1.0).contains(&amplitude) {
                return Err(Error::config("simulation.saturation.amplitude", "must lie in [0, 1)"));
            }
        }
        let travel_steps = net.links.iter().map(|l| l.travel_steps(config.dt)).collect();
        let active_phase = net.intersections.iter().map(|n| n.initial_phase).collect();
        Ok(Simulation {
            clock,
            saturation: config.saturation,
            lost_steps: (config.lost_time / config.dt).ceil() as u64,
            travel_steps,
            vehicles: Vec::new(),
            links: vec![LinkState::default(); net.links.len()],
            queues: vec![MovementQueue::default(); net.movements.len()],
            entry_queues: vec![VecDeque::new(); net.links.len()],
            active_phase,
            lost_until: vec![0; net.intersections.len()],
            entered: 0,
            exited: 0,
            room: vec![0; net.links.len()],
            wants: Vec::new(),
            net,
        })
    }

    pub fn network(&self) -> &Arc<NetworkGraph> {
        &self.net
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn vehicle(&self, id: VehicleId) -> &Vehicle {
        &self.vehicles[id.index()]
    }

    pub fn vehicle_mut(&mut self, id: VehicleId) -> &mut Vehicle {
        &mut self.vehicles[id.index()]
    }

    pub fn active_phase(&self, node: IntersectionId) -> u32 {
        self.active_phase[node.index()]
    }

    pub fn active_phases(&self) -> &[u32] {
        &self.active_phase
    }

    pub fn entered(&self) -> u64 {
        self.entered
    }

    pub fn exited(&self) -> u64 {
        self.exited
    }

    /// Vehicles in the network, including those waiting to enter.
    pub fn accumulation(&self) -> u64 {
        self.entered - self.exited
    }

    pub fn queue_len(&self, movement: MovementId) -> u32 {
        self.queues[movement.index()].vehicles.len() as u32
    }

    /// Queued vehicles of a movement, head first.
    pub fn movement_queue(&self, movement: MovementId) -> impl Iterator<Item = &Vehicle> + '_ {
        self.queues[movement.index()]
            .vehicles
            .iter()
            .map(move |&v| &self.vehicles[v as usize])
    }

    pub fn movement_state(&self, movement: MovementId) -> MovementState {
        MovementState {
            movement,
            queue: self.queue_len(movement),
            occupancy_sum: self.movement_queue(movement).map(|v| v.true_occupancy).sum(),
        }
    }

    /// Vehicles physically on a link (traversing plus queued).
    pub fn link_occupancy(&self, link: LinkId) -> u32 {
        self.links[link.index()].occupancy
    }

    pub fn entry_queue_len(&self, link: LinkId) -> usize {
        self.entry_queues[link.index()].len()
    }

    fn validate_route(&self, v: &Vehicle) -> Result<()> {
        let corrupt = |from: LinkId, to: LinkId| Error::RouteCorruption {
            vehicle: v.id.0,
            from: from.0,
            to: to.0,
        };
        let (first, last) = match (v.route.first(), v.route.last()) {
            (Some(&f), Some(&l)) => (f, l),
            _ => return Err(corrupt(LinkId(u32::MAX), LinkId(u32::MAX))),
        };
        if !self.net.link(first).is_source || !self.net.link(last).is_sink {
            return Err(corrupt(first, last));
        }
        for w in v.route.windows(2) {
            if self.net.movement_between(w[0], w[1]).is_none() {
                return Err(corrupt(w[0], w[1]));
            }
        }
        Ok(())
    }

    /// Advances one step under the given active phase per intersection.
    pub fn advance_step(
        &mut self,
        signals: &[u32],
        arrivals: Vec<Vehicle>,
        noise: &mut StreamRng,
    ) -> Result<StepReport> {
        let step = self.clock.step;
        let dt = self.clock.dt;
        let net = Arc::clone(&self.net);
        let mut report = StepReport::default();

        if signals.len() != self.active_phase.len() {
            return Err(Error::Invariant {
                step,
                message: format!(
                    "{} signals for {} intersections",
                    signals.len(),
                    self.active_phase.len()
                ),
            });
        }
        for (k, &phase) in signals.iter().enumerate() {
            if phase as usize >= net.intersections[k].phases.len() {
                return Err(Error::Invariant {
                    step,
                    message: format!("phase {phase} out of range at intersection {k}"),
                });
            }
            if phase != self.active_phase[k] {
                self.active_phase[k] = phase;
                self.lost_until[k] = step + self.lost_steps;
            }
        }

        for mut v in arrivals {
            v.id = VehicleId(self.vehicles.len() as u32);
            v.route_position = 0;
            self.validate_route(&v)?;
            self.entry_queues[v.route[0].index()].push_back(v.id.0);
            self.vehicles.push(v);
            self.entered += 1;
        }

        // discharge against the start-of-step storage snapshot
        for (room, (state, link)) in self.room.iter_mut().zip(self.links.iter().zip(&net.links)) {
            *room = link.storage_capacity.saturating_sub(state.occupancy);
        }
        for node in &net.intersections {
            let k = node.id.index();
            if step < self.lost_until[k] {
                continue;
            }
            self.wants.clear();
            for &mv in &node.phases[self.active_phase[k] as usize].served_movements {
                let queue = &mut self.queues[mv.index()];
                let factor = self.saturation.factor(noise);
                let (allowance, carry) =
                    service_quota(net.movement(mv).saturation_flow_vph, dt, queue.carryover, factor);
                queue.carryover = carry;
                let want = (queue.vehicles.len() as u32).min(allowance);
                if want > 0 {
                    self.wants.push((mv, want));
                }
            }
            let mut settled = 0u64; // bitmask over wants; a phase serves far fewer than 64 movements
            for i in 0..self.wants.len() {
                if settled & (1 << i) != 0 {
                    continue;
                }
                let downstream = net.movement(self.wants[i].0).downstream;
                let group: Vec<usize> = (i..self.wants.len())
                    .filter(|&j| net.movement(self.wants[j].0).downstream == downstream)
                    .collect();
                let asks: Vec<u32> = group.iter().map(|&j| self.wants[j].1).collect();
                let grants = allocate_storage(&asks, self.room[downstream.index()]);
                for (&j, &g) in group.iter().zip(&grants) {
                    self.wants[j].1 = g;
                    self.room[downstream.index()] -= g;
                    settled |= 1 << j;
                }
            }
            for idx in 0..self.wants.len() {
                let (mv, grant) = self.wants[idx];
                let movement = net.movement(mv);
                let down = movement.downstream;
                for _ in 0..grant {
                    let vid = self.queues[mv.index()]
                        .vehicles
                        .pop_front()
                        .ok_or_else(|| Error::Invariant {
                            step,
                            message: format!("movement {mv} discharged from an empty queue"),
                        })?;
                    self.links[movement.upstream.index()].occupancy -= 1;
                    let v = &mut self.vehicles[vid as usize];
                    v.route_position += 1;
                    v.intersections_crossed += 1;
                    v.link_arrival_time = (step + 1) as f64 * dt;
                    report.discharged.push(Discharge {
                        vehicle: v.id,
                        movement: mv,
                        intersection: node.id,
                    });
                    if net.link(down).is_sink {
                        v.exit_time = Some((step + 1) as f64 * dt);
                        self.exited += 1;
                        report.exited.push(v.id);
                    } else {
                        let ready = step + 1 + self.travel_steps[down.index()];
                        let link = &mut self.links[down.index()];
                        link.traversing.push_back((vid, ready));
                        link.occupancy += 1;
                    }
                }
            }
        }

        // finished traversals join their movement queue
        for l in 0..self.links.len() {
            while let Some(&(vid, ready)) = self.links[l].traversing.front() {
                if ready > step + 1 {
                    break;
                }
                self.links[l].traversing.pop_front();
                let v = &self.vehicles[vid as usize];
                let mv = assign_to_movement(&net, v, LinkId(l as u32))?;
                self.queues[mv.index()].vehicles.push_back(vid);
            }
        }

        // blocked arrivals enter free source storage
        for l in 0..self.entry_queues.len() {
            if self.entry_queues[l].is_empty() {
                continue;
            }
            let capacity = net.links[l].storage_capacity;
            let travel = self.travel_steps[l];
            while self.links[l].occupancy < capacity {
                let Some(vid) = self.entry_queues[l].pop_front() else {
                    break;
                };
                self.vehicles[vid as usize].link_arrival_time = (step + 1) as f64 * dt;
                self.links[l].traversing.push_back((vid, step + 1 + travel));
                self.links[l].occupancy += 1;
            }
        }

        self.clock.step += 1;
        Ok(report)
    }

    /// Verifies conservation and storage limits.
    pub fn check_invariants(&self) -> Result<()> {
        let step = self.clock.step;
        let on_links: u64 = self.links.iter().map(|l| u64::from(l.occupancy)).sum();
        let waiting: u64 = self.entry_queues.iter().map(|q| q.len() as u64).sum();
        if on_links + waiting + self.exited != self.entered {
            return Err(Error::Invariant {
                step,
                message: format!(
                    "conservation broken: entered {} != on links {} + waiting {} + exited {}",
                    self.entered, on_links, waiting, self.exited
                ),
            });
        }
        for (state, link) in self.links.iter().zip(&self.net.links) {
            if state.occupancy > link.storage_capacity {
                return Err(Error::Invariant {
                    step,
                    message: format!(
                        "link {} holds {} vehicles, storage {}",
                        link.id, state.occupancy, link.storage_capacity
                    ),
                });
            }
        }
        for m in &self.net.movements {
            let queued = self.queues[m.id.index()].vehicles.len() as u32;
            if queued > self.links[m.upstream.index()].occupancy {
                return Err(Error::Invariant {
                    step,
                    message: format!("movement {} queue exceeds its link's vehicles", m.id),
                });
            }
        }
        Ok(())
    }

    /// Writes one step of the debugging dump in long format:
    /// `step,entity,id,value` with `entity` one of `movement_queue` or
    /// `link_vehicles`.
    pub fn write_state_dump<W: Write>(&self, out: &mut W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(out, "step,entity,id,value")?;
        }
        let step = self.clock.step;
        for (k, q) in self.queues.iter().enumerate() {
            writeln!(out, "{step},movement_queue,{k},{}", q.vehicles.len())?;
        }
        for (k, l) in self.links.iter().enumerate() {
            let waiting = self.entry_queues[k].len();
            writeln!(out, "{step},link_vehicles,{k},{}", l.occupancy as usize + waiting)?;
        }
        Ok(())
    }
}
