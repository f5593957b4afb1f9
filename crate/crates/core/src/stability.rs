//! Feasible-demand oracle for one intersection and finite-horizon
//! stability trials.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::controller::ControllerKind;
use crate::demand::OccupancyDistribution;
use crate::dynamics::{DynamicsConfig, Simulation, Vehicle, VehicleClass};
use crate::error::{Error, Result};
use crate::network::{build_grid, IntersectionId, LinkId, LinkTemplate, NetworkGraph, PhaseScheme, Turn};
use crate::rng::SeedStreams;
use crate::sensing::observe_ground_truth;

pub const MIN_TRIAL_STEPS: u64 = 5000;

/// Demand and saturation per movement (vehicles per step) and the
/// movements each phase serves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityProblem {
    pub demand: Vec<f64>,
    pub saturation: Vec<f64>,
    pub phases: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Feasibility {
    /// `witness` sums to at most one; `slack` is one minus that sum.
    Feasible { witness: Vec<f64>, slack: f64 },
    /// `load` is the smallest total green share covering the demand
    /// (infinite if some demand can never be served); `violated` names a
    /// movement that cannot be served.
    Infeasible { load: f64, violated: Option<usize> },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible { .. })
    }
}

impl FeasibilityProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.demand.len();
        if self.saturation.len() != n {
            return Err(Error::config("feasibility", "demand and saturation lengths differ"));
        }
        if self
            .demand
            .iter()
            .chain(&self.saturation)
            .any(|&v| !(v >= 0.0 && v.is_finite()))
        {
            return Err(Error::config(
                "feasibility",
                "demand and saturation must be finite and non-negative",
            ));
        }
        if self.phases.is_empty() || self.phases.iter().flatten().any(|&m| m >= n) {
            return Err(Error::config(
                "feasibility",
                "phases must be non-empty and index valid movements",
            ));
        }
        for m in 0..n {
            if !self.phases.iter().any(|p| p.contains(&m)) {
                return Err(Error::config(
                    "feasibility",
                    format!("movement {m} is served by no phase"),
                ));
            }
        }
        Ok(())
    }

    /// Each movement is served by exactly one phase.
    pub fn is_exclusive(&self) -> bool {
        (0..self.demand.len()).all(|m| self.phases.iter().filter(|p| p.contains(&m)).count() == 1)
    }

    /// Required green share per movement; infinite for unservable demand.
    fn ratios(&self) -> Vec<f64> {
        self.demand
            .iter()
            .zip(&self.saturation)
            .map(|(&d, &c)| match (d > 0.0, c > 0.0) {
                (false, _) => 0.0,
                (true, true) => d / c,
                (true, false) => f64::INFINITY,
            })
            .collect()
    }

    fn unservable(&self) -> Option<usize> {
        self.ratios().iter().position(|r| r.is_infinite())
    }

    /// Share of green each movement receives under the time shares `lambda`.
    pub fn coverage(&self, lambda: &[f64]) -> Vec<f64> {
        let mut cov = vec![0.0; self.demand.len()];
        for (phase, &l) in self.phases.iter().zip(lambda) {
            for &m in phase {
                cov[m] += l;
            }
        }
        cov
    }

    /// Sum over phases of the largest required share, with the per-phase
    /// shares as witness. Exclusive phase structures only.
    pub fn closed_form(&self) -> Option<(f64, Vec<f64>)> {
        if !self.is_exclusive() {
            return None;
        }
        let r = self.ratios();
        let shares: Vec<f64> = self
            .phases
            .iter()
            .map(|p| p.iter().map(|&m| r[m]).fold(0.0, f64::max))
            .collect();
        Some((shares.iter().sum(), shares))
    }

    /// Smallest total share covering every movement, by enumerating the
    /// vertices of `{lambda >= 0 : coverage(lambda) >= demand / saturation}`.
    pub fn min_cover(&self) -> (f64, Vec<f64>) {
        let e = self.phases.len();
        if self.unservable().is_some() {
            return (f64::INFINITY, vec![0.0; e]);
        }
        // one row per distinct coverage pattern, keeping the largest requirement
        let r = self.ratios();
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for (m, &need) in r.iter().enumerate() {
            if need <= 0.0 {
                continue;
            }
            let pattern: Vec<f64> = self
                .phases
                .iter()
                .map(|p| if p.contains(&m) { 1.0 } else { 0.0 })
                .collect();
            match rows.iter_mut().find(|(p, _)| *p == pattern) {
                Some(row) => row.1 = row.1.max(need),
                None => rows.push((pattern, need)),
            }
        }
        if rows.is_empty() {
            return (0.0, vec![0.0; e]);
        }
        // candidate constraint set: the cover rows, then lambda_j = 0
        let mut constraints: Vec<(Vec<f64>, f64)> = rows.clone();
        for j in 0..e {
            let mut unit = vec![0.0; e];
            unit[j] = 1.0;
            constraints.push((unit, 0.0));
        }
        let feasible = |x: &[f64]| {
            x.iter().all(|&v| v >= -1e-12)
                && rows
                    .iter()
                    .all(|(p, need)| p.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() >= need - 1e-12)
        };
        let mut best: Option<(f64, Vec<f64>)> = None;
        for_each_subset(constraints.len(), e, |subset| {
            let a: Vec<Vec<f64>> = subset.iter().map(|&i| constraints[i].0.clone()).collect();
            let b: Vec<f64> = subset.iter().map(|&i| constraints[i].1).collect();
            if let Some(x) = solve(a, b) {
                if feasible(&x) {
                    let x: Vec<f64> = x.into_iter().map(|v| v.max(0.0)).collect();
                    let obj: f64 = x.iter().sum();
                    if best.as_ref().map_or(true, |(o, _)| obj < *o - 1e-15) {
                        best = Some((obj, x));
                    }
                }
            }
        });
        best.expect("a bounded covering polytope has a vertex")
    }
}

fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                let (upper, lower) = a.split_at_mut(row);
                for (x, p) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                    *x -= f * p;
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

fn verdict_of(problem: &FeasibilityProblem, load: f64, witness: Vec<f64>, tolerance: f64) -> Feasibility {
    if load <= 1.0 + tolerance {
        let slack = 1.0 - witness.iter().sum::<f64>();
        Feasibility::Feasible { witness, slack }
    } else {
        Feasibility::Infeasible {
            load,
            violated: problem.unservable(),
        }
    }
}

/// Decides whether some split of green time serves the mean demand. Uses
/// the closed form when every movement belongs to exactly one phase.
pub fn is_feasible(problem: &FeasibilityProblem, tolerance: f64) -> Result<Feasibility> {
    problem.validate()?;
    let (load, witness) = problem.closed_form().unwrap_or_else(|| problem.min_cover());
    Ok(verdict_of(problem, load, witness, tolerance))
}

/// Same decision through the general vertex-enumeration route, whatever
/// the phase structure.
pub fn is_feasible_general(problem: &FeasibilityProblem, tolerance: f64) -> Result<Feasibility> {
    problem.validate()?;
    let (load, witness) = problem.min_cover();
    Ok(verdict_of(problem, load, witness, tolerance))
}

/// Demand minus service under the boundary time split, summed over
/// movements: the growth rate of the total queue if green time is split
/// in proportion to the minimal cover.
pub fn excess_rate(problem: &FeasibilityProblem) -> f64 {
    let (total, witness) = problem.min_cover();
    if !(total > 0.0) || !total.is_finite() {
        return if total.is_finite() { 0.0 } else { f64::INFINITY };
    }
    let lambda: Vec<f64> = witness.iter().map(|w| w / total).collect();
    let cov = problem.coverage(&lambda);
    problem
        .demand
        .iter()
        .zip(&problem.saturation)
        .zip(&cov)
        .map(|((&d, &c), &s)| (d - c * s).max(0.0))
        .sum()
}

/// Relative demand per movement at the isolated intersection: north-south
/// approaches carry twice the east-west volume, split 0.2 / 0.6 / 0.2
/// over left, through and right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandShape {
    pub ns_ew_ratio: f64,
    pub left: f64,
    pub through: f64,
    pub right: f64,
}

impl Default for DemandShape {
    fn default() -> Self {
        DemandShape {
            ns_ew_ratio: 2.0,
            left: 0.2,
            through: 0.6,
            right: 0.2,
        }
    }
}

/// Feasibility problem of one intersection under a demand shape, scaled so
/// the demand sits exactly on the boundary of the feasible region.
pub fn boundary_problem(
    net: &NetworkGraph,
    node: IntersectionId,
    shape: &DemandShape,
    dt: f64,
) -> Result<FeasibilityProblem> {
    let x = net.intersection(node);
    let mut demand = Vec::with_capacity(x.movements.len());
    let mut saturation = Vec::with_capacity(x.movements.len());
    for &m in &x.movements {
        let mv = net.movement(m);
        let approach = if net.link(mv.upstream).heading.is_vertical() {
            shape.ns_ew_ratio
        } else {
            1.0
        };
        let split = match mv.turn {
            Turn::Left => shape.left,
            Turn::Through => shape.through,
            Turn::Right => shape.right,
        };
        demand.push(approach * split);
        saturation.push(mv.saturation_per_s() * dt);
    }
    let phases = x
        .phases
        .iter()
        .map(|p| {
            p.served_movements
                .iter()
                .map(|m| {
                    x.movements
                        .iter()
                        .position(|q| q == m)
                        .expect("phase serves own movements")
                })
                .collect()
        })
        .collect();
    let mut problem = FeasibilityProblem {
        demand,
        saturation,
        phases,
    };
    problem.validate()?;
    let (load, _) = problem.min_cover();
    if !(load > 0.0 && load.is_finite()) {
        return Err(Error::config(
            "stability.shape",
            "demand shape has no finite positive load",
        ));
    }
    for d in &mut problem.demand {
        *d /= load;
    }
    Ok(problem)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Bounded,
    Growing,
    /// Neither test fired.
    Inconclusive,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::Bounded => "bounded",
            Verdict::Growing => "growing",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub controller: ControllerKind,
    pub kappa: f64,
    pub horizon_steps: u64,
    pub seed: u64,
    pub shape: DemandShape,
    pub occupancy: OccupancyDistribution,
    pub template: LinkTemplate,
}

impl TrialConfig {
    /// Isolated intersection with storage large enough that spillback never
    /// caps the queues.
    pub fn new(controller: ControllerKind, kappa: f64, horizon_steps: u64, seed: u64) -> Self {
        TrialConfig {
            controller,
            kappa,
            horizon_steps,
            seed,
            shape: DemandShape::default(),
            occupancy: OccupancyDistribution::table1(),
            template: LinkTemplate {
                jam_spacing_m: 1e-3,
                ..LinkTemplate::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub controller: String,
    pub kappa: f64,
    pub seed: u64,
    pub verdict: Verdict,
    pub mean_second_quarter: f64,
    pub mean_last_quarter: f64,
    /// Least-squares slope of the total queue over the last half, vehicles
    /// per step.
    pub slope: f64,
    pub excess_rate: f64,
    pub final_queue: u64,
    /// Total queued vehicles after every step.
    #[serde(skip)]
    pub series: Vec<u64>,
}

fn mean(v: &[u64]) -> f64 {
    v.iter().sum::<u64>() as f64 / v.len().max(1) as f64
}

pub fn ls_slope(v: &[u64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let xm = (n - 1.0) / 2.0;
    let ym = mean(v);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in v.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y as f64 - ym);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Bounded if the last-quarter mean stays under 1.5 times the
/// second-quarter mean; growing if the last-half slope exceeds a quarter of
/// the excess rate.
pub fn classify(series: &[u64], excess: f64) -> (Verdict, f64, f64, f64) {
    let n = series.len();
    let q = n / 4;
    let second = mean(&series[q..2 * q]);
    let last = mean(&series[n - q..]);
    let slope = ls_slope(&series[n / 2..]);
    let verdict = if last < 1.5 * second || (last == 0.0 && second == 0.0) {
        Verdict::Bounded
    } else if excess > 0.0 && slope > 0.25 * excess {
        Verdict::Growing
    } else {
        Verdict::Inconclusive
    };
    (verdict, second, last, slope)
}

/// Stationary Poisson demand at `kappa` times the feasibility boundary on an
/// isolated intersection; occupancies drawn independently per vehicle.
pub fn run_stability_trial(cfg: &TrialConfig) -> Result<TrialResult> {
    if cfg.horizon_steps < MIN_TRIAL_STEPS {
        return Err(Error::HorizonTooShort(cfg.horizon_steps));
    }
    if !(cfg.kappa > 0.0) {
        return Err(Error::config("stability.kappa", "must be positive"));
    }
    cfg.occupancy.validate()?;
    let net = Arc::new(build_grid(1, 1, &cfg.template, PhaseScheme::FourPhase)?);
    let dyn_cfg = DynamicsConfig::default();
    let node = IntersectionId(0);
    let mut problem = boundary_problem(&net, node, &cfg.shape, dyn_cfg.dt)?;
    for d in &mut problem.demand {
        *d *= cfg.kappa;
    }
    let excess = excess_rate(&problem);

    let movements = net.intersection(node).movements.clone();
    let routes: Vec<Arc<[LinkId]>> = movements
        .iter()
        .map(|&m| {
            let mv = net.movement(m);
            Arc::from(vec![mv.upstream, mv.downstream])
        })
        .collect();
    let arrivals_dist: Vec<Option<Poisson<f64>>> = problem
        .demand
        .iter()
        .map(|&d| (d > 0.0).then(|| Poisson::new(d).expect("positive rate")))
        .collect();

    let streams = SeedStreams::new(cfg.seed);
    let mut arrival_rng = streams.stream("stability-arrivals", &[]);
    let mut occ_rng = streams.stream("stability-occupancy", &[]);
    let mut noise = streams.stream("saturation", &[]);
    let ratios: Vec<f64> = net.movements.iter().map(|m| m.turn_ratio).collect();
    let sources: Vec<LinkId> = net.links.iter().filter(|l| l.is_source).map(|l| l.id).collect();

    let mut sim = Simulation::new(Arc::clone(&net), &dyn_cfg)?;
    let mut signals = sim.active_phases().to_vec();
    let mut series = Vec::with_capacity(cfg.horizon_steps as usize);
    for _ in 0..cfg.horizon_steps {
        if sim.clock().is_control_boundary() {
            let obs = observe_ground_truth(&sim, node, &ratios);
            signals[0] = cfg.controller.decide(&obs, signals[0]).phase;
        }
        let t = sim.clock().time();
        let mut arrivals = Vec::new();
        for (k, dist) in arrivals_dist.iter().enumerate() {
            if let Some(dist) = dist {
                let n = dist.sample(&mut arrival_rng) as u64;
                for _ in 0..n {
                    let occ = cfg.occupancy.sample(&mut occ_rng);
                    arrivals.push(Vehicle::new(VehicleClass::Car, occ, Arc::clone(&routes[k]), t, true));
                }
            }
        }
        sim.advance_step(&signals, arrivals, &mut noise)?;
        let queued: u64 = movements.iter().map(|&m| sim.queue_len(m) as u64).sum::<u64>()
            + sources.iter().map(|&l| sim.entry_queue_len(l) as u64).sum::<u64>();
        series.push(queued);
    }
    sim.check_invariants()?;
    let (verdict, second, last, slope) = classify(&series, excess);
    Ok(TrialResult {
        controller: cfg.controller.label().to_string(),
        kappa: cfg.kappa,
        seed: cfg.seed,
        verdict,
        mean_second_quarter: second,
        mean_last_quarter: last,
        slope,
        excess_rate: excess,
        final_queue: *series.last().unwrap_or(&0),
        series,
    })
}

/// Draws a random demand vector in `[0, scale)` per movement.
pub fn random_demand<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * scale).collect()
}
