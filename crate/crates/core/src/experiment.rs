//! Scenario configuration, per-seed run preparation, the simulation loop
//! and the sweeps that write result tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::ControllerKind;
use crate::demand::{
    default_bus_routes, default_intervals, empirical_turn_ratios, generate_bus_trips, generate_private_arrivals,
    BusRoute, BusRouteSpec, DemandInterval, DemandProfile, Level, OccupancyDistribution, PrivateOccupancy, SubScenario,
};
use crate::dynamics::{DynamicsConfig, SimClock, Simulation, Vehicle, VehicleClass};
use crate::error::{Error, Result};
use crate::metrics::{paired_percent_change, summarize, RunMetrics, Summary, TripRecord, BUCKET_LABELS};
use crate::network::{build_grid, CentroidId, IntersectionId, LinkId, LinkTemplate, NetworkGraph, PhaseScheme};
use crate::rng::{SeedStreams, StreamRng};
use crate::routing::{RouteChoice, RouteTable};
use crate::sensing::{apc_perturb, apc_stream, observe, observe_ground_truth, PrivateOccupancyMode, SensingConfig};
use crate::stability::{run_stability_trial, TrialConfig, TrialResult, MIN_TRIAL_STEPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub rows: u32,
    pub cols: u32,
    pub link: LinkTemplate,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            rows: 4,
            cols: 4,
            link: LinkTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    pub level: Level,
    /// Expected entering vehicles at each level.
    pub high_total: f64,
    pub low_total: f64,
    pub ns_ew_ratio: f64,
    pub peak_interval_s: f64,
    pub multipliers: Vec<f64>,
    pub cooldown_s: f64,
    pub occupancy: PrivateOccupancy,
    pub routing: RouteChoice,
}

impl Default for DemandConfig {
    fn default() -> Self {
        // full-scale totals scaled by boundary centroids (16 of 32) and
        // peak length (45 of 120 minutes)
        DemandConfig {
            level: Level::Low,
            high_total: 6048.0,
            low_total: 4320.0,
            ns_ew_ratio: 2.0,
            peak_interval_s: 675.0,
            multipliers: vec![0.6, 1.0, 1.4, 0.8],
            cooldown_s: 900.0,
            occupancy: PrivateOccupancy::Fixed { value: 1.5 },
            routing: RouteChoice::default(),
        }
    }
}

impl DemandConfig {
    pub fn intervals(&self) -> Vec<DemandInterval> {
        let mut v = default_intervals(self.peak_interval_s, self.cooldown_s);
        let peak = v.len() - usize::from(self.cooldown_s > 0.0);
        v.splice(
            ..peak,
            self.multipliers.iter().map(|&factor| DemandInterval {
                duration_s: self.peak_interval_s,
                factor,
            }),
        );
        v
    }

    pub fn total(&self) -> f64 {
        match self.level {
            Level::High => self.high_total,
            Level::Low => self.low_total,
        }
    }

    pub fn horizon_s(&self) -> f64 {
        self.intervals().iter().map(|i| i.duration_s).sum()
    }
}

/// Passenger loads per bus on high- and low-occupancy routes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteLoads {
    pub high_routes: f64,
    pub low_routes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitConfig {
    pub enabled: bool,
    pub passenger_demand: Level,
    pub frequency: Level,
    pub headway_high_s: f64,
    pub headway_low_s: f64,
    pub high_passenger_loads: RouteLoads,
    pub low_passenger_loads: RouteLoads,
    pub capacity: f64,
    /// Empty means the built-in ten corridors for the grid size.
    pub routes: Vec<BusRouteSpec>,
}

impl Default for TransitConfig {
    fn default() -> Self {
        TransitConfig {
            enabled: true,
            passenger_demand: Level::High,
            frequency: Level::High,
            headway_high_s: 120.0,
            headway_low_s: 300.0,
            high_passenger_loads: RouteLoads {
                high_routes: 50.0,
                low_routes: 25.0,
            },
            low_passenger_loads: RouteLoads {
                high_routes: 12.0,
                low_routes: 3.0,
            },
            capacity: 80.0,
            routes: Vec::new(),
        }
    }
}

impl TransitConfig {
    pub fn headway_s(&self) -> f64 {
        match self.frequency {
            Level::High => self.headway_high_s,
            Level::Low => self.headway_low_s,
        }
    }

    pub fn loads(&self) -> RouteLoads {
        match self.passenger_demand {
            Level::High => self.high_passenger_loads,
            Level::Low => self.low_passenger_loads,
        }
    }

    pub fn route_specs(&self, rows: u32, cols: u32) -> Vec<BusRouteSpec> {
        if self.routes.is_empty() {
            default_bus_routes(rows, cols)
        } else {
            self.routes.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub kappas: Vec<f64>,
    pub horizon_steps: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            kappas: vec![0.8, 1.2],
            horizon_steps: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Row of the sub-scenario table this config was built from, if any.
    pub sub_scenario: Option<u8>,
    pub seeds: Vec<u64>,
    pub controllers: Vec<ControllerKind>,
    pub network: NetworkConfig,
    pub demand: DemandConfig,
    pub transit: TransitConfig,
    pub sensing: SensingConfig,
    pub simulation: DynamicsConfig,
    pub sample_interval_s: f64,
    pub stability: StabilityConfig,
    /// Output and scheduling settings; they do not affect results.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub log_decisions: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::desk()
    }
}

impl ScenarioConfig {
    /// 4x4 grid, 45 minute peak plus 15 minute cooldown, ten seeds, the
    /// three standard controllers.
    pub fn desk() -> Self {
        ScenarioConfig {
            name: "desk".into(),
            sub_scenario: None,
            seeds: (1..=10).collect(),
            controllers: ControllerKind::standard_set().to_vec(),
            network: NetworkConfig::default(),
            demand: DemandConfig::default(),
            transit: TransitConfig::default(),
            sensing: SensingConfig::fixed_average(1.5),
            simulation: DynamicsConfig::default(),
            sample_interval_s: 60.0,
            stability: StabilityConfig::default(),
            output_dir: None,
            workers: None,
            log_decisions: false,
        }
    }

    /// 8x8 grid with two hours of peak demand and a one hour cooldown.
    pub fn full() -> Self {
        let mut c = ScenarioConfig::desk();
        c.name = "full".into();
        c.network.rows = 8;
        c.network.cols = 8;
        c.demand.high_total = 32_256.0;
        c.demand.low_total = 23_040.0;
        c.demand.peak_interval_s = 1800.0;
        c.demand.cooldown_s = 3600.0;
        c
    }

    /// Private occupancy fixed at 1.5 persons, known to controllers.
    pub fn with_fixed_occupancy(mut self) -> Self {
        self.demand.occupancy = PrivateOccupancy::Fixed { value: 1.5 };
        self.sensing.private_occupancy = PrivateOccupancyMode::FixedAverage { value: 1.5 };
        self
    }

    /// Private occupancy drawn per vehicle and visible to controllers.
    pub fn with_sampled_occupancy(mut self) -> Self {
        self.demand.occupancy = PrivateOccupancy::Sampled(OccupancyDistribution::table1());
        self.sensing.private_occupancy = PrivateOccupancyMode::Exact;
        self
    }

    pub fn apply(mut self, sub: SubScenario) -> Self {
        self.sub_scenario = Some(sub.index);
        self.demand.level = sub.private_demand;
        self.transit.passenger_demand = sub.bus_passenger_demand;
        self.transit.frequency = sub.bus_frequency;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Parse {
            what: "scenario".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn horizon_s(&self) -> f64 {
        self.demand.horizon_s()
    }

    pub fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config(
                "name",
                "must be non-empty and contain no path separators",
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("seeds", "must be distinct"));
        }
        if self.controllers.is_empty() {
            return Err(Error::config("controllers", "must not be empty"));
        }
        for (i, c) in self.controllers.iter().enumerate() {
            if let ControllerKind::RbMp { bus_priority } = c {
                if !(*bus_priority > 0.0) {
                    return Err(Error::config(
                        format!("controllers[{i}].bus_priority"),
                        "must be positive",
                    ));
                }
            }
        }
        if self.network.rows == 0 || self.network.cols == 0 {
            return Err(Error::config("network.rows", "grid dimensions must be at least 1"));
        }
        self.network.link.validate()?;
        let d = &self.demand;
        for (field, v) in [("demand.high_total", d.high_total), ("demand.low_total", d.low_total)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        if !(d.peak_interval_s > 0.0) || !(d.cooldown_s >= 0.0) {
            return Err(Error::config(
                "demand.peak_interval_s",
                "interval lengths must be positive",
            ));
        }
        if d.multipliers.is_empty() || d.multipliers.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::config(
                "demand.multipliers",
                "must be non-empty and non-negative",
            ));
        }
        if !(d.ns_ew_ratio > 0.0) {
            return Err(Error::config("demand.ns_ew_ratio", "must be positive"));
        }
        d.occupancy.validate()?;
        d.routing.validate()?;
        let t = &self.transit;
        if t.enabled {
            for (field, v) in [
                ("transit.headway_high_s", t.headway_high_s),
                ("transit.headway_low_s", t.headway_low_s),
            ] {
                if !(v > 0.0) {
                    return Err(Error::config(field, "must be positive"));
                }
            }
            for (field, l) in [
                ("transit.high_passenger_loads", t.high_passenger_loads),
                ("transit.low_passenger_loads", t.low_passenger_loads),
            ] {
                for v in [l.high_routes, l.low_routes] {
                    if !(v >= 1.0 && v <= t.capacity) {
                        return Err(Error::config(field, "loads must lie in [1, capacity]"));
                    }
                }
            }
        }
        self.sensing.validate()?;
        let clock = SimClock::new(self.simulation.dt, self.simulation.control_interval)?;
        let ratio = self.sample_interval_s / clock.dt;
        if !(ratio >= 1.0 && (ratio - ratio.round()).abs() < 1e-9) {
            return Err(Error::config(
                "sample_interval_s",
                "must be a positive multiple of simulation.dt",
            ));
        }
        if self.stability.kappas.iter().any(|&k| !(k > 0.0)) {
            return Err(Error::config("stability.kappas", "must be positive"));
        }
        if self.stability.horizon_steps < MIN_TRIAL_STEPS {
            return Err(Error::config(
                "stability.horizon_steps",
                format!("must be at least {MIN_TRIAL_STEPS}"),
            ));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be at least 1"));
        }
        Ok(())
    }

    /// Everything that affects results, as canonical JSON.
    fn canonical(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.output_dir = None;
        c.workers = None;
        serde_json::to_value(&c).expect("config serializes")
    }
}

/// First 12 hex digits of the SHA-256 of the command, its parameters and
/// the result-relevant configuration.
pub fn config_hash(command: &str, params: &serde_json::Value, cfg: &ScenarioConfig) -> String {
    let doc = serde_json::json!({ "command": command, "params": params, "config": cfg.canonical() });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    hex::encode(digest)[..12].to_string()
}

#[derive(Debug, Clone)]
pub struct PlannedVehicle {
    pub step: u64,
    pub class: VehicleClass,
    pub occupancy: f64,
    pub route: Arc<[LinkId]>,
    /// Uniform draw compared against the penetration rate.
    pub cv_draw: f64,
}

/// Everything generated before simulation for one seed; shared by every
/// controller and sensing regime run on that seed.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub seed: u64,
    pub net: Arc<NetworkGraph>,
    pub turn_ratios: Vec<f64>,
    pub vehicles: Vec<PlannedVehicle>,
    pub horizon_steps: u64,
}

pub fn build_network(cfg: &ScenarioConfig) -> Result<NetworkGraph> {
    build_grid(
        cfg.network.rows,
        cfg.network.cols,
        &cfg.network.link,
        PhaseScheme::FourPhase,
    )
}

pub fn bus_routes(cfg: &ScenarioConfig, net: &NetworkGraph) -> Result<Vec<BusRoute>> {
    let t = &cfg.transit;
    if !t.enabled {
        return Ok(Vec::new());
    }
    let loads = t.loads();
    t.route_specs(cfg.network.rows, cfg.network.cols)
        .iter()
        .map(|spec| {
            let mean = if spec.high_occupancy {
                loads.high_routes
            } else {
                loads.low_routes
            };
            BusRoute::from_spec(net, spec, t.headway_s(), mean, t.capacity)
        })
        .collect()
}

pub fn prepare(cfg: &ScenarioConfig, net: Arc<NetworkGraph>, seed: u64) -> Result<PreparedRun> {
    let streams = SeedStreams::new(seed);
    let dt = cfg.simulation.dt;
    let profile = DemandProfile::symmetric(&net, cfg.demand.total(), cfg.demand.ns_ew_ratio, cfg.demand.intervals())?;
    let horizon = profile.horizon_s();
    let arrivals = generate_private_arrivals(&profile, horizon, &cfg.demand.occupancy, &streams);

    let mut table = RouteTable::new(cfg.demand.routing);
    let mut od_streams: BTreeMap<(CentroidId, CentroidId), (StreamRng, StreamRng)> = BTreeMap::new();
    let mut vehicles = Vec::with_capacity(arrivals.len());
    let mut route_cache: BTreeMap<(CentroidId, CentroidId, usize), Arc<[LinkId]>> = BTreeMap::new();
    for a in &arrivals {
        let key = (a.origin, a.destination);
        let (route_rng, cv_rng) = od_streams.entry(key).or_insert_with(|| {
            let k = [a.origin.0 as u64, a.destination.0 as u64];
            (streams.stream("routing", &k), streams.stream("cv", &k))
        });
        let pick = table.sample(&net, a.origin, a.destination, route_rng)?;
        let route = match route_cache.get(&(a.origin, a.destination, pick)) {
            Some(r) => Arc::clone(r),
            None => {
                let links: Arc<[LinkId]> = Arc::from(table.paths(&net, a.origin, a.destination)?.0[pick].links.clone());
                route_cache.insert((a.origin, a.destination, pick), Arc::clone(&links));
                links
            }
        };
        vehicles.push(PlannedVehicle {
            step: (a.time / dt).floor() as u64,
            class: VehicleClass::Car,
            occupancy: a.occupancy,
            route,
            cv_draw: rand::Rng::random(cv_rng),
        });
    }

    let routes = bus_routes(cfg, &net)?;
    let bus_paths: Vec<Arc<[LinkId]>> = routes.iter().map(|r| Arc::from(r.links.clone())).collect();
    let mut bus_cv: Vec<StreamRng> = (0..routes.len())
        .map(|i| streams.stream("cv-bus", &[i as u64]))
        .collect();
    for b in generate_bus_trips(&routes, profile.active_horizon_s(), &streams) {
        vehicles.push(PlannedVehicle {
            step: (b.time / dt).floor() as u64,
            class: VehicleClass::Bus,
            occupancy: b.occupancy,
            route: Arc::clone(&bus_paths[b.route]),
            cv_draw: rand::Rng::random(&mut bus_cv[b.route]),
        });
    }
    // stable: private before buses within a step, each in generation order
    vehicles.sort_by_key(|v| v.step);

    let turn_ratios = empirical_turn_ratios(&net, vehicles.iter().map(|v| (&v.route[..], 1.0)));
    Ok(PreparedRun {
        seed,
        net,
        turn_ratios,
        vehicles,
        horizon_steps: (horizon / dt).round() as u64,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Controllers see the true state regardless of the sensing config.
    pub ground_truth: bool,
    pub log_decisions: bool,
    /// Where to write a state dump if an invariant breaks.
    pub dump_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub time: f64,
    pub intersection: IntersectionId,
    pub phase: u32,
    pub pressures: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub decisions: Vec<DecisionRecord>,
}

fn invariant_failure(sim: &Simulation, err: Error, dump: Option<&Path>) -> Error {
    if let Some(path) = dump {
        if let Some(parent) = path.parent() {
            let _ = fs::create_dir_all(parent);
        }
        if let Ok(mut f) = fs::File::create(path) {
            let _ = sim.write_state_dump(&mut f, true);
        }
    }
    err
}

/// Simulates one prepared seed under one controller and sensing regime.
pub fn simulate(
    prep: &PreparedRun,
    cfg: &ScenarioConfig,
    controller: ControllerKind,
    sensing: &SensingConfig,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let streams = SeedStreams::new(prep.seed);
    let mut noise = streams.stream("saturation", &[]);
    let mut sim = Simulation::new(Arc::clone(&prep.net), &cfg.simulation)?;
    let dt = cfg.simulation.dt;
    let sample_steps = (cfg.sample_interval_s / dt).round() as u64;
    let nodes: Vec<IntersectionId> = prep.net.intersections.iter().map(|n| n.id).collect();
    let mut signals = sim.active_phases().to_vec();
    let mut decisions = Vec::new();
    let mut samples = Vec::new();
    let mut cursor = 0;
    let dump = opts.dump_path.as_deref();

    for step in 0..=prep.horizon_steps {
        if step % sample_steps == 0 {
            let acc = sim.accumulation();
            if sim.entered() != acc + sim.exited() {
                let err = Error::Invariant {
                    step,
                    message: format!(
                        "entered {} != accumulation {acc} + exited {}",
                        sim.entered(),
                        sim.exited()
                    ),
                };
                return Err(invariant_failure(&sim, err, dump));
            }
            if let Err(e) = sim.check_invariants() {
                return Err(invariant_failure(&sim, e, dump));
            }
            samples.push((step as f64 * dt, acc));
        }
        if step == prep.horizon_steps {
            break;
        }
        if sim.clock().is_control_boundary() {
            for &node in &nodes {
                let obs = if opts.ground_truth {
                    observe_ground_truth(&sim, node, &prep.turn_ratios)
                } else {
                    observe(&sim, node, &prep.turn_ratios, sensing)
                };
                let k = node.index();
                let d = controller.decide(&obs, signals[k]);
                signals[k] = d.phase;
                if opts.log_decisions {
                    decisions.push(DecisionRecord {
                        time: step as f64 * dt,
                        intersection: node,
                        phase: d.phase,
                        pressures: d.pressures,
                    });
                }
            }
        }
        let mut arrivals = Vec::new();
        while cursor < prep.vehicles.len() && prep.vehicles[cursor].step == step {
            let p = &prep.vehicles[cursor];
            arrivals.push(Vehicle::new(
                p.class,
                p.occupancy,
                Arc::clone(&p.route),
                step as f64 * dt,
                sensing.is_connected(p.class, p.cv_draw),
            ));
            cursor += 1;
        }
        let report = match sim.advance_step(&signals, arrivals, &mut noise) {
            Ok(r) => r,
            Err(e) => return Err(invariant_failure(&sim, e, dump)),
        };
        if sensing.apc_sigma_percent > 0.0 {
            for d in &report.discharged {
                let v = sim.vehicle_mut(d.vehicle);
                if v.is_bus() {
                    let mut rng = apc_stream(&streams, v.id.0, v.intersections_crossed);
                    apc_perturb(v, sensing.apc_sigma_percent, &mut rng);
                }
            }
        }
    }

    let horizon = prep.horizon_steps as f64 * dt;
    let trips: Vec<TripRecord> = sim.vehicles().iter().map(TripRecord::from_vehicle).collect();
    let metrics = RunMetrics::from_trips(trips, horizon, cfg.sample_interval_s);
    if metrics.accumulation != samples {
        let err = Error::Invariant {
            step: prep.horizon_steps,
            message: "trip ledger disagrees with the simulator's accumulation".into(),
        };
        return Err(invariant_failure(&sim, err, dump));
    }
    Ok(RunOutput { metrics, decisions })
}

/// Identifies one simulation within a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunKey {
    pub sub_scenario: u8,
    pub controller: ControllerKind,
    pub seed: u64,
    pub sensing: SensingConfig,
}

impl RunKey {
    pub fn sigma(&self) -> f64 {
        self.sensing.apc_sigma_percent
    }

    pub fn penetration(&self) -> f64 {
        self.sensing.cv_penetration
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub key: RunKey,
    pub output: RunOutput,
}

struct Job {
    cfg_index: usize,
    key: RunKey,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))
}

/// Runs every (config, controller, seed, sensing) combination on a bounded
/// pool. Results come back in job order.
fn execute(
    configs: &[ScenarioConfig],
    jobs: Vec<Job>,
    workers: usize,
    dump_dir: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    let pool = pool(workers)?;
    pool.install(|| {
        let nets = configs
            .iter()
            .map(|c| build_network(c).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let mut wanted: Vec<(usize, u64)> = jobs.iter().map(|j| (j.cfg_index, j.key.seed)).collect();
        wanted.sort_unstable();
        wanted.dedup();
        let prepared: BTreeMap<(usize, u64), PreparedRun> = wanted
            .par_iter()
            .map(|&(ci, seed)| prepare(&configs[ci], Arc::clone(&nets[ci]), seed).map(|p| ((ci, seed), p)))
            .collect::<Result<_>>()?;
        jobs.par_iter()
            .map(|job| {
                let cfg = &configs[job.cfg_index];
                let opts = RunOptions {
                    ground_truth: false,
                    log_decisions: cfg.log_decisions,
                    dump_path: dump_dir.map(|d| {
                        d.join(format!(
                            "state_dump-{}-{}-{}.csv",
                            job.key.sub_scenario,
                            job.key.controller.label(),
                            job.key.seed
                        ))
                    }),
                };
                let prep = &prepared[&(job.cfg_index, job.key.seed)];
                let output = simulate(prep, cfg, job.key.controller, &job.key.sensing, &opts)?;
                Ok(RunRecord {
                    key: job.key.clone(),
                    output,
                })
            })
            .collect()
    })
}

fn jobs_for(cfg_index: usize, cfg: &ScenarioConfig, sensing: &SensingConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &controller in &cfg.controllers {
        for &seed in &cfg.seeds {
            jobs.push(Job {
                cfg_index,
                key: RunKey {
                    sub_scenario: cfg.sub_scenario.unwrap_or(0),
                    controller,
                    seed,
                    sensing: *sensing,
                },
            });
        }
    }
    jobs
}

/// Every controller on every seed of one scenario.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    execute(
        std::slice::from_ref(cfg),
        jobs_for(0, cfg, &cfg.sensing),
        cfg.workers(),
        None,
    )
}

/// The scenario once per listed sub-scenario row.
pub fn run_matrix(cfg: &ScenarioConfig, rows: &[SubScenario]) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let configs: Vec<ScenarioConfig> = rows.iter().map(|&r| cfg.clone().apply(r)).collect();
    let jobs = configs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| jobs_for(i, c, &c.sensing))
        .collect();
    execute(&configs, jobs, cfg.workers(), None)
}

/// APC error levels in percent, per sub-scenario row.
pub fn run_apc_sweep(cfg: &ScenarioConfig, rows: &[SubScenario], sigmas: &[f64]) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let configs: Vec<ScenarioConfig> = rows.iter().map(|&r| cfg.clone().apply(r)).collect();
    let mut jobs = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        for &sigma in sigmas {
            let sensing = SensingConfig {
                apc_sigma_percent: sigma,
                ..c.sensing
            };
            sensing.validate()?;
            jobs.extend(jobs_for(i, c, &sensing));
        }
    }
    execute(&configs, jobs, cfg.workers(), None)
}

pub fn run_cv_sweep(cfg: &ScenarioConfig, penetrations: &[f64]) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for &p in penetrations {
        let sensing = SensingConfig {
            cv_penetration: p,
            ..cfg.sensing
        };
        sensing.validate()?;
        jobs.extend(jobs_for(0, cfg, &sensing));
    }
    execute(std::slice::from_ref(cfg), jobs, cfg.workers(), None)
}

pub fn run_stability_sweep(cfg: &ScenarioConfig) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    let mut trials = Vec::new();
    for &controller in &cfg.controllers {
        for &kappa in &cfg.stability.kappas {
            for &seed in &cfg.seeds {
                trials.push(TrialConfig::new(controller, kappa, cfg.stability.horizon_steps, seed));
            }
        }
    }
    pool(cfg.workers())?.install(|| trials.par_iter().map(run_stability_trial).collect())
}

// ---------------------------------------------------------------- output

fn num(x: f64) -> String {
    format!("{x}")
}

/// Output directory for one command on one config.
pub fn output_dir(base: &Path, cfg: &ScenarioConfig, hash: &str) -> PathBuf {
    base.join(format!("{}-{hash}", cfg.name))
}

pub const RUNS_HEADER: [&str; 16] = [
    "config_hash",
    "sub_scenario",
    "controller",
    "seed",
    "apc_sigma",
    "cv_penetration",
    "entered",
    "completed",
    "censored",
    "private_vtt_h",
    "bus_vtt_h",
    "total_vtt_h",
    "ptt_h",
    "final_accumulation",
    "private_vehicles",
    "buses",
];

pub fn write_runs_csv(path: &Path, hash: &str, runs: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RUNS_HEADER)?;
    for r in runs {
        let a = &r.output.metrics.aggregates;
        let buses = a.bucket_count[5];
        w.write_record([
            hash.to_string(),
            r.key.sub_scenario.to_string(),
            r.key.controller.label().to_string(),
            r.key.seed.to_string(),
            num(r.key.sigma()),
            num(r.key.penetration()),
            a.entered.to_string(),
            a.completed.to_string(),
            a.censored.to_string(),
            num(a.private_vtt),
            num(a.bus_vtt),
            num(a.total_vtt()),
            num(a.ptt),
            r.output.metrics.final_accumulation().to_string(),
            (a.entered - buses).to_string(),
            buses.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_accumulation_csv(path: &Path, hash: &str, runs: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config_hash",
        "sub_scenario",
        "controller",
        "seed",
        "apc_sigma",
        "cv_penetration",
        "time_s",
        "vehicles",
    ])?;
    for r in runs {
        for &(t, n) in &r.output.metrics.accumulation {
            w.write_record([
                hash.to_string(),
                r.key.sub_scenario.to_string(),
                r.key.controller.label().to_string(),
                r.key.seed.to_string(),
                num(r.key.sigma()),
                num(r.key.penetration()),
                num(t),
                n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_buckets_csv(path: &Path, hash: &str, runs: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config_hash",
        "sub_scenario",
        "controller",
        "seed",
        "apc_sigma",
        "cv_penetration",
        "bucket",
        "vehicles",
        "vtt_h",
    ])?;
    for r in runs {
        let a = &r.output.metrics.aggregates;
        for (b, label) in BUCKET_LABELS.iter().enumerate() {
            w.write_record([
                hash.to_string(),
                r.key.sub_scenario.to_string(),
                r.key.controller.label().to_string(),
                r.key.seed.to_string(),
                num(r.key.sigma()),
                num(r.key.penetration()),
                label.to_string(),
                a.bucket_count[b].to_string(),
                num(a.bucket_vtt[b]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_decisions_csv(path: &Path, hash: &str, runs: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config_hash",
        "sub_scenario",
        "controller",
        "seed",
        "time_s",
        "intersection",
        "phase",
        "pressures",
    ])?;
    for r in runs {
        for d in &r.output.decisions {
            let pressures: Vec<String> = d.pressures.iter().map(|&p| num(p)).collect();
            w.write_record([
                hash.to_string(),
                r.key.sub_scenario.to_string(),
                r.key.controller.label().to_string(),
                r.key.seed.to_string(),
                num(d.time),
                d.intersection.to_string(),
                d.phase.to_string(),
                pressures.join(";"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Scalar per-run quantities summarized across seeds.
pub const METRICS: [&str; 4] = ["private_vtt_h", "bus_vtt_h", "ptt_h", "final_accumulation"];

pub fn metric_value(r: &RunRecord, metric: &str) -> f64 {
    let a = &r.output.metrics.aggregates;
    match metric {
        "private_vtt_h" => a.private_vtt,
        "bus_vtt_h" => a.bus_vtt,
        "total_vtt_h" => a.total_vtt(),
        "ptt_h" => a.ptt,
        "final_accumulation" => r.output.metrics.final_accumulation() as f64,
        other => match other.strip_prefix("bucket_vtt_h:") {
            Some(label) => {
                let b = BUCKET_LABELS.iter().position(|l| *l == label).expect("known bucket");
                a.bucket_vtt[b]
            }
            None => panic!("unknown metric {other}"),
        },
    }
}

/// Runs of one sub-scenario, error level and penetration, per controller in
/// configuration order, each sorted by seed.
pub type Group<'a> = Vec<(String, Vec<&'a RunRecord>)>;

pub fn group_runs(runs: &[RunRecord]) -> BTreeMap<(u8, u64, u64), Group<'_>> {
    let mut groups: BTreeMap<(u8, u64, u64), Group<'_>> = BTreeMap::new();
    for r in runs {
        let key = (
            r.key.sub_scenario,
            r.key.sigma().to_bits(),
            r.key.penetration().to_bits(),
        );
        let g = groups.entry(key).or_default();
        let label = r.key.controller.label().to_string();
        match g.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(r),
            None => g.push((label, vec![r])),
        }
    }
    for g in groups.values_mut() {
        for (_, v) in g.iter_mut() {
            v.sort_by_key(|r| r.key.seed);
        }
    }
    groups
}

/// Mean and standard error of `metric` for one controller's runs.
pub fn summary_of(runs: &[&RunRecord], metric: &str) -> Option<Summary> {
    summarize(&runs.iter().map(|r| metric_value(r, metric)).collect::<Vec<_>>())
}

/// Paired percent change of `metric` against the baseline runs.
pub fn paired_change(runs: &[&RunRecord], baseline: &[&RunRecord], metric: &str) -> Result<Option<Summary>> {
    let m: Vec<f64> = runs.iter().map(|r| metric_value(r, metric)).collect();
    let b: Vec<f64> = baseline.iter().map(|r| metric_value(r, metric)).collect();
    paired_percent_change(&m, &b)
}

fn opt(s: Option<Summary>) -> [String; 2] {
    match s {
        Some(s) => [num(s.mean), num(s.se)],
        None => [String::new(), String::new()],
    }
}

/// Per controller and metric: mean, standard error and paired percent
/// change against the Q-MP baseline of the same group.
pub fn write_comparison_csv(path: &Path, hash: &str, runs: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config_hash",
        "sub_scenario",
        "apc_sigma",
        "cv_penetration",
        "controller",
        "metric",
        "mean",
        "se",
        "pct_change_mean",
        "pct_change_se",
    ])?;
    let mut metrics: Vec<String> = METRICS.iter().map(|s| s.to_string()).collect();
    metrics.extend(BUCKET_LABELS.iter().map(|b| format!("bucket_vtt_h:{b}")));
    for ((sub, sigma, pen), group) in group_runs(runs) {
        let baseline = runs
            .iter()
            .find(|r| r.key.controller.is_baseline())
            .map(|r| r.key.controller.label())
            .and_then(|label| group.iter().find(|(l, _)| l == label));
        for (label, rs) in &group {
            for metric in &metrics {
                let change = match baseline {
                    Some((_, base)) if base.len() == rs.len() => paired_change(rs, base, metric).ok().flatten(),
                    _ => None,
                };
                let [mean, se] = opt(summary_of(rs, metric));
                let [cm, cs] = opt(change);
                w.write_record([
                    hash.to_string(),
                    sub.to_string(),
                    num(f64::from_bits(sigma)),
                    num(f64::from_bits(pen)),
                    label.clone(),
                    metric.clone(),
                    mean,
                    se,
                    cm,
                    cs,
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format sweep table: one row per (group, controller, metric).
pub fn write_sweep_csv(path: &Path, hash: &str, runs: &[RunRecord], by: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["config_hash", "sub_scenario", by, "controller", "metric", "mean", "se"])?;
    for ((sub, sigma, pen), group) in group_runs(runs) {
        let level = if by == "apc_sigma" { sigma } else { pen };
        for (label, rs) in &group {
            for metric in METRICS {
                let [mean, se] = opt(summary_of(rs, metric));
                w.write_record([
                    hash.to_string(),
                    sub.to_string(),
                    num(f64::from_bits(level)),
                    label.clone(),
                    metric.to_string(),
                    mean,
                    se,
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_stability_csv(path: &Path, hash: &str, trials: &[TrialResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config_hash",
        "controller",
        "kappa",
        "seed",
        "verdict",
        "mean_second_quarter",
        "mean_last_quarter",
        "slope",
        "excess_rate",
        "final_queue",
    ])?;
    for t in trials {
        w.write_record([
            hash.to_string(),
            t.controller.clone(),
            num(t.kappa),
            t.seed.to_string(),
            t.verdict.label().to_string(),
            num(t.mean_second_quarter),
            num(t.mean_last_quarter),
            num(t.slope),
            num(t.excess_rate),
            t.final_queue.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub command: String,
    pub config_hash: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub runs: usize,
    pub files: Vec<String>,
    pub complete: bool,
}

/// Result of one command: the directory written and what it holds.
#[derive(Debug, Clone)]
pub struct Written {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn begin(base: &Path, command: &str, params: serde_json::Value, cfg: &ScenarioConfig) -> Result<(PathBuf, String)> {
    let hash = config_hash(command, &params, cfg);
    let dir = output_dir(base, cfg, &hash);
    fs::create_dir_all(&dir)?;
    // a stale manifest would mark a partial rerun as complete
    let _ = fs::remove_file(dir.join("manifest.json"));
    let mut f = fs::File::create(dir.join("config.toml"))?;
    writeln!(f, "# config_hash = \"{hash}\"")?;
    // scheduling settings stay out so reruns on other machines match
    let stored = ScenarioConfig {
        output_dir: None,
        workers: None,
        ..cfg.clone()
    };
    f.write_all(stored.to_toml().as_bytes())?;
    Ok((dir, hash))
}

fn finish(
    dir: &Path,
    cfg: &ScenarioConfig,
    command: &str,
    hash: &str,
    runs: usize,
    mut files: Vec<String>,
) -> Result<Written> {
    files.insert(0, "config.toml".into());
    let manifest = Manifest {
        name: cfg.name.clone(),
        command: command.into(),
        config_hash: hash.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seeds: cfg.seeds.clone(),
        runs,
        files,
        complete: true,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(Written {
        dir: dir.to_path_buf(),
        manifest,
    })
}

fn write_run_tables(
    dir: &Path,
    hash: &str,
    cfg: &ScenarioConfig,
    runs: &[RunRecord],
    extra: Option<(&str, &str)>,
) -> Result<Vec<String>> {
    write_runs_csv(&dir.join("runs.csv"), hash, runs)?;
    write_accumulation_csv(&dir.join("accumulation.csv"), hash, runs)?;
    write_buckets_csv(&dir.join("occupancy_buckets.csv"), hash, runs)?;
    write_comparison_csv(&dir.join("comparison.csv"), hash, runs)?;
    let mut files: Vec<String> = [
        "runs.csv",
        "accumulation.csv",
        "occupancy_buckets.csv",
        "comparison.csv",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if let Some((file, by)) = extra {
        write_sweep_csv(&dir.join(file), hash, runs, by)?;
        files.push(file.into());
    }
    if cfg.log_decisions {
        write_decisions_csv(&dir.join("decisions.csv"), hash, runs)?;
        files.push("decisions.csv".into());
    }
    Ok(files)
}

fn base_dir(cfg: &ScenarioConfig, base: Option<&Path>) -> PathBuf {
    base.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"))
}

/// `run`: all controllers and seeds of one scenario, written to disk.
pub fn write_scenario(cfg: &ScenarioConfig, base: Option<&Path>) -> Result<Written> {
    cfg.validate()?;
    let (dir, hash) = begin(&base_dir(cfg, base), "run", serde_json::Value::Null, cfg)?;
    let runs = execute(
        std::slice::from_ref(cfg),
        jobs_for(0, cfg, &cfg.sensing),
        cfg.workers(),
        Some(&dir),
    )?;
    let files = write_run_tables(&dir, &hash, cfg, &runs, None)?;
    finish(&dir, cfg, "run", &hash, runs.len(), files)
}

pub fn write_matrix(cfg: &ScenarioConfig, rows: &[SubScenario], base: Option<&Path>) -> Result<Written> {
    cfg.validate()?;
    let params = serde_json::json!({ "rows": rows.iter().map(|r| r.index).collect::<Vec<_>>() });
    let (dir, hash) = begin(&base_dir(cfg, base), "matrix", params, cfg)?;
    let runs = run_matrix(cfg, rows)?;
    let files = write_run_tables(&dir, &hash, cfg, &runs, None)?;
    finish(&dir, cfg, "matrix", &hash, runs.len(), files)
}

pub fn write_apc_sweep(
    cfg: &ScenarioConfig,
    rows: &[SubScenario],
    sigmas: &[f64],
    base: Option<&Path>,
) -> Result<Written> {
    cfg.validate()?;
    let params = serde_json::json!({
        "rows": rows.iter().map(|r| r.index).collect::<Vec<_>>(),
        "sigmas": sigmas,
    });
    let (dir, hash) = begin(&base_dir(cfg, base), "apc-sweep", params, cfg)?;
    let runs = run_apc_sweep(cfg, rows, sigmas)?;
    let files = write_run_tables(&dir, &hash, cfg, &runs, Some(("apc_sweep.csv", "apc_sigma")))?;
    finish(&dir, cfg, "apc-sweep", &hash, runs.len(), files)
}

pub fn write_cv_sweep(cfg: &ScenarioConfig, penetrations: &[f64], base: Option<&Path>) -> Result<Written> {
    cfg.validate()?;
    let params = serde_json::json!({ "penetrations": penetrations });
    let (dir, hash) = begin(&base_dir(cfg, base), "cv-sweep", params, cfg)?;
    let runs = run_cv_sweep(cfg, penetrations)?;
    let files = write_run_tables(&dir, &hash, cfg, &runs, Some(("cv_sweep.csv", "cv_penetration")))?;
    finish(&dir, cfg, "cv-sweep", &hash, runs.len(), files)
}

pub fn write_stability(cfg: &ScenarioConfig, base: Option<&Path>) -> Result<Written> {
    cfg.validate()?;
    let (dir, hash) = begin(&base_dir(cfg, base), "stability", serde_json::Value::Null, cfg)?;
    let trials = run_stability_sweep(cfg)?;
    write_stability_csv(&dir.join("stability.csv"), &hash, &trials)?;
    finish(
        &dir,
        cfg,
        "stability",
        &hash,
        trials.len(),
        vec!["stability.csv".into()],
    )
}
