//! Private-vehicle demand, bus services and the sub-scenario matrix.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{CentroidId, Endpoint, IntersectionId, LinkId, NetworkGraph, Side};
use crate::rng::SeedStreams;

/// Discrete distribution of persons per private vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyDistribution {
    pub support: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl OccupancyDistribution {
    /// One to five persons with masses 0.7, 0.125, 0.1, 0.05, 0.025.
    pub fn table1() -> Self {
        OccupancyDistribution {
            support: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            probabilities: vec![0.7, 0.125, 0.1, 0.05, 0.025],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = "demand.occupancy";
        if self.support.is_empty() || self.support.len() != self.probabilities.len() {
            return Err(Error::config(
                field,
                "support and probabilities must be non-empty and equal length",
            ));
        }
        if self.support.iter().any(|&v| !(v >= 1.0)) {
            return Err(Error::config(field, "occupancy values must be at least 1"));
        }
        if self.probabilities.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::config(field, "probabilities must be non-negative"));
        }
        let total: f64 = self.probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(field, format!("probabilities sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probabilities).map(|(v, p)| v * p).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (v, p) in self.support.iter().zip(&self.probabilities) {
            acc += p;
            if u < acc {
                return *v;
            }
        }
        *self.support.last().expect("validated non-empty")
    }
}

/// How true private occupancies are assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PrivateOccupancy {
    /// Every private vehicle carries the same number of persons.
    Fixed { value: f64 },
    /// Drawn per vehicle.
    Sampled(OccupancyDistribution),
}

impl PrivateOccupancy {
    pub fn validate(&self) -> Result<()> {
        match self {
            PrivateOccupancy::Fixed { value } if !(*value >= 1.0) => {
                Err(Error::config("demand.occupancy.value", "must be at least 1"))
            }
            PrivateOccupancy::Fixed { .. } => Ok(()),
            PrivateOccupancy::Sampled(d) => d.validate(),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            PrivateOccupancy::Fixed { value } => *value,
            PrivateOccupancy::Sampled(d) => d.mean(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            PrivateOccupancy::Fixed { value } => *value,
            PrivateOccupancy::Sampled(d) => d.sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandInterval {
    pub duration_s: f64,
    pub factor: f64,
}

/// Peak profile shape: rising over three intervals, easing in the fourth,
/// then a demand-free cooldown.
pub fn default_intervals(peak_interval_s: f64, cooldown_s: f64) -> Vec<DemandInterval> {
    let mut v: Vec<DemandInterval> = [0.6, 1.0, 1.4, 0.8]
        .iter()
        .map(|&factor| DemandInterval {
            duration_s: peak_interval_s,
            factor,
        })
        .collect();
    if cooldown_s > 0.0 {
        v.push(DemandInterval {
            duration_s: cooldown_s,
            factor: 0.0,
        });
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdDemand {
    pub origin: CentroidId,
    pub destination: CentroidId,
    /// Base rate in vehicles per hour, scaled by the interval factor.
    pub rate_vph: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    pub od_pairs: Vec<OdDemand>,
    pub intervals: Vec<DemandInterval>,
    pub total_target: f64,
}

impl DemandProfile {
    /// Every centroid sends vehicles uniformly to every other centroid;
    /// north and south origins generate `ns_ew_ratio` times the east-west
    /// rate. Rates are scaled so the expected total equals `total_target`.
    pub fn symmetric(
        net: &NetworkGraph,
        total_target: f64,
        ns_ew_ratio: f64,
        intervals: Vec<DemandInterval>,
    ) -> Result<Self> {
        if net.centroids.len() < 2 {
            return Err(Error::config("network", "demand needs at least two centroids"));
        }
        if !(ns_ew_ratio > 0.0) {
            return Err(Error::config("demand.ns_ew_ratio", "must be positive"));
        }
        let weight = |side: Side| if side.is_north_south() { ns_ew_ratio } else { 1.0 };
        let weight_sum: f64 = net.centroids.iter().map(|c| weight(c.side)).sum();
        let hours = effective_hours(&intervals);
        if !(hours > 0.0) {
            return Err(Error::config("demand.intervals", "no interval carries demand"));
        }
        let unit = total_target / (weight_sum * hours);
        let others = (net.centroids.len() - 1) as f64;
        let mut od_pairs = Vec::new();
        for o in &net.centroids {
            for d in &net.centroids {
                if o.id != d.id {
                    od_pairs.push(OdDemand {
                        origin: o.id,
                        destination: d.id,
                        rate_vph: unit * weight(o.side) / others,
                    });
                }
            }
        }
        let profile = DemandProfile {
            od_pairs,
            intervals,
            total_target,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn horizon_s(&self) -> f64 {
        self.intervals.iter().map(|i| i.duration_s).sum()
    }

    /// End of the last interval with positive demand.
    pub fn active_horizon_s(&self) -> f64 {
        let mut t = 0.0;
        let mut end = 0.0;
        for i in &self.intervals {
            t += i.duration_s;
            if i.factor > 0.0 {
                end = t;
            }
        }
        end
    }

    pub fn expected_total(&self) -> f64 {
        let rate: f64 = self.od_pairs.iter().map(|p| p.rate_vph).sum();
        rate * effective_hours(&self.intervals)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .od_pairs
            .iter()
            .any(|p| !(p.rate_vph >= 0.0) || p.origin == p.destination)
        {
            return Err(Error::config(
                "demand.od_pairs",
                "rates must be non-negative and origins distinct from destinations",
            ));
        }
        if self
            .intervals
            .iter()
            .any(|i| !(i.duration_s > 0.0) || !(i.factor >= 0.0))
        {
            return Err(Error::config(
                "demand.intervals",
                "durations must be positive and factors non-negative",
            ));
        }
        let expected = self.expected_total();
        if (expected - self.total_target).abs() > 0.01 * self.total_target.max(1e-9) && self.total_target > 0.0 {
            return Err(Error::config(
                "demand.total_target",
                format!("profile yields {expected:.1} expected vehicles"),
            ));
        }
        Ok(())
    }
}

fn effective_hours(intervals: &[DemandInterval]) -> f64 {
    intervals.iter().map(|i| i.duration_s * i.factor).sum::<f64>() / 3600.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivateArrival {
    pub time: f64,
    pub origin: CentroidId,
    pub destination: CentroidId,
    pub occupancy: f64,
}

/// Poisson arrivals for every origin-destination pair, each on its own
/// substream, merged in time order.
pub fn generate_private_arrivals(
    profile: &DemandProfile,
    horizon_s: f64,
    occupancy: &PrivateOccupancy,
    streams: &SeedStreams,
) -> Vec<PrivateArrival> {
    let mut out = Vec::new();
    for pair in &profile.od_pairs {
        let keys = [pair.origin.0 as u64, pair.destination.0 as u64];
        let mut times = streams.stream("arrivals", &keys);
        let mut occ = streams.stream("occupancy", &keys);
        let mut start = 0.0;
        let mut budget: f64 = Exp1.sample(&mut times);
        let mut t = 0.0;
        for interval in &profile.intervals {
            let end = (start + interval.duration_s).min(horizon_s);
            let rate = pair.rate_vph * interval.factor / 3600.0;
            if rate > 0.0 {
                // walk the unit-rate exponential budget through this interval
                loop {
                    let room = (end - t) * rate;
                    if budget > room {
                        budget -= room;
                        break;
                    }
                    t += budget / rate;
                    out.push(PrivateArrival {
                        time: t,
                        origin: pair.origin,
                        destination: pair.destination,
                        occupancy: occupancy.sample(&mut occ),
                    });
                    budget = Exp1.sample(&mut times);
                }
            }
            start += interval.duration_s;
            t = start;
            if start >= horizon_s {
                break;
            }
        }
    }
    out.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then(a.origin.cmp(&b.origin))
            .then(a.destination.cmp(&b.destination))
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    High,
    Low,
}

impl Level {
    pub fn label(self) -> &'static str {
        match self {
            Level::High => "High",
            Level::Low => "Low",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubScenario {
    /// 1-based row of the sub-scenario table.
    pub index: u8,
    pub private_demand: Level,
    pub bus_passenger_demand: Level,
    pub bus_frequency: Level,
}

/// The eight combinations, low private demand first.
pub fn scenario_matrix() -> [SubScenario; 8] {
    use Level::{High as H, Low as L};
    let rows = [
        (L, H, H),
        (L, H, L),
        (L, L, H),
        (L, L, L),
        (H, H, H),
        (H, H, L),
        (H, L, H),
        (H, L, L),
    ];
    std::array::from_fn(|i| SubScenario {
        index: i as u8 + 1,
        private_demand: rows[i].0,
        bus_passenger_demand: rows[i].1,
        bus_frequency: rows[i].2,
    })
}

/// Perimeter centroid reference by side and position along it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CentroidRef {
    pub side: Side,
    pub index: u32,
}

impl CentroidRef {
    pub fn resolve(self, net: &NetworkGraph) -> Result<CentroidId> {
        net.centroid_at(self.side, self.index).ok_or_else(|| {
            Error::config(
                "transit.routes",
                format!("no centroid at {:?} {}", self.side, self.index),
            )
        })
    }
}

/// Bus route geometry as configured: perimeter endpoints plus optional
/// intermediate intersections. Consecutive points are joined by straight
/// runs, columns first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRouteSpec {
    pub name: String,
    pub from: CentroidRef,
    pub to: CentroidRef,
    #[serde(default)]
    pub via: Vec<[u32; 2]>,
    /// High-occupancy routes carry the larger passenger load.
    pub high_occupancy: bool,
}

/// Ten corridors: three bidirectional pairs and four one-way routes.
/// Positions scale with the grid; on a 4x4 grid the western corridor is
/// column 0, the central one column 2, and the east-west routes use rows
/// 0 to 3.
pub fn default_bus_routes(rows: u32, cols: u32) -> Vec<BusRouteSpec> {
    let col_w = (cols - 1) / 4;
    let col_c = cols / 2;
    let row_n = (rows - 1) / 4;
    let row_cn = (rows / 2).saturating_sub(1);
    let row_cs = rows / 2;
    let row_s = rows - 1 - (rows - 1) / 4;
    let c = |side, index| CentroidRef { side, index };
    let route = |name: &str, from, to, high| BusRouteSpec {
        name: name.into(),
        from,
        to,
        via: Vec::new(),
        high_occupancy: high,
    };
    use Side::*;
    vec![
        route("SB-W", c(North, col_w), c(South, col_w), true),
        route("NB-W", c(South, col_w), c(North, col_w), true),
        route("SB-C", c(North, col_c), c(South, col_c), true),
        route("NB-C", c(South, col_c), c(North, col_c), true),
        route("EB-N", c(West, row_n), c(East, row_n), true),
        route("WB-N", c(East, row_n), c(West, row_n), true),
        route("EB-CN", c(West, row_cn), c(East, row_cn), true),
        route("WB-CS", c(East, row_cs), c(West, row_cs), false),
        route("EB-SN", c(West, row_s), c(East, row_s), false),
        route("WB-SS", c(East, row_s), c(West, row_s), false),
    ]
}

/// Link path from one centroid to another through the listed
/// intersections.
pub fn grid_path(net: &NetworkGraph, from: CentroidId, to: CentroidId, via: &[[u32; 2]]) -> Result<Vec<LinkId>> {
    let bad = |msg: String| Error::config("transit.routes", msg);
    let source = net.centroid(from).source_link;
    let sink = net.centroid(to).sink_link;
    let first = net.link_head(source).expect("source links end at intersections");
    let last = match net.link(sink).from {
        Endpoint::Intersection(i) => i,
        Endpoint::Centroid(_) => unreachable!("sink links start at intersections"),
    };
    let mut waypoints = vec![first];
    for &[r, c] in via {
        waypoints.push(
            net.intersection_at(r, c)
                .ok_or_else(|| bad(format!("no intersection at ({r}, {c})")))?,
        );
    }
    waypoints.push(last);

    let pos = |i: IntersectionId| {
        let x = net.intersection(i);
        (x.row as i64, x.col as i64)
    };
    let mut nodes = vec![first];
    for w in waypoints.windows(2) {
        let (mut r, mut c) = pos(w[0]);
        let (tr, tc) = pos(w[1]);
        while c != tc {
            c += (tc - c).signum();
            nodes.push(net.intersection_at(r as u32, c as u32).expect("inside grid"));
        }
        while r != tr {
            r += (tr - r).signum();
            nodes.push(net.intersection_at(r as u32, c as u32).expect("inside grid"));
        }
    }
    let mut links = vec![source];
    for w in nodes.windows(2) {
        let link = net
            .intersection(w[0])
            .outgoing_links
            .iter()
            .copied()
            .find(|&l| net.link(l).to == Endpoint::Intersection(w[1]))
            .ok_or_else(|| bad(format!("no link from {} to {}", w[0], w[1])))?;
        links.push(link);
    }
    links.push(sink);
    crate::routing::validate_path(net, &links).map_err(bad)?;
    Ok(links)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRoute {
    pub name: String,
    pub links: Vec<LinkId>,
    pub headway_s: f64,
    pub occupancy_mean: f64,
    pub occupancy_spread: f64,
    pub capacity: f64,
}

impl BusRoute {
    pub fn from_spec(
        net: &NetworkGraph,
        spec: &BusRouteSpec,
        headway_s: f64,
        occupancy_mean: f64,
        capacity: f64,
    ) -> Result<Self> {
        let links = grid_path(net, spec.from.resolve(net)?, spec.to.resolve(net)?, &spec.via)?;
        let route = BusRoute {
            name: spec.name.clone(),
            links,
            headway_s,
            occupancy_mean,
            occupancy_spread: 0.2 * occupancy_mean,
            capacity,
        };
        route.validate(net)?;
        Ok(route)
    }

    pub fn validate(&self, net: &NetworkGraph) -> Result<()> {
        let field = format!("transit.routes.{}", self.name);
        if !(self.headway_s > 0.0) {
            return Err(Error::config(field, "headway must be positive"));
        }
        if !(self.capacity >= 1.0) || !(self.occupancy_mean >= 1.0 && self.occupancy_mean <= self.capacity) {
            return Err(Error::config(field, "occupancy mean must lie in [1, capacity]"));
        }
        if !(self.occupancy_spread >= 0.0) {
            return Err(Error::config(field, "occupancy spread must be non-negative"));
        }
        crate::routing::validate_path(net, &self.links).map_err(|m| Error::config(field, m))
    }

    /// Whole persons around the mean, redrawn until inside [1, capacity].
    pub fn sample_occupancy<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        for _ in 0..1000 {
            let z: f64 = StandardNormal.sample(rng);
            let v = (self.occupancy_mean + self.occupancy_spread * z).round();
            if v >= 1.0 && v <= self.capacity {
                return v;
            }
        }
        self.occupancy_mean.round().clamp(1.0, self.capacity.floor())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusDeparture {
    pub time: f64,
    pub route: usize,
    pub occupancy: f64,
}

/// Exponential headways on each route until `horizon_s`.
pub fn generate_bus_trips(routes: &[BusRoute], horizon_s: f64, streams: &SeedStreams) -> Vec<BusDeparture> {
    let mut out = Vec::new();
    for (idx, route) in routes.iter().enumerate() {
        let mut times = streams.stream("bus-headways", &[idx as u64]);
        let mut occ = streams.stream("bus-occupancy", &[idx as u64]);
        let mut t = 0.0;
        loop {
            let gap: f64 = Exp1.sample(&mut times);
            t += gap * route.headway_s;
            if t >= horizon_s {
                break;
            }
            out.push(BusDeparture {
                time: t,
                route: idx,
                occupancy: route.sample_occupancy(&mut occ),
            });
        }
    }
    out.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.route.cmp(&b.route)));
    out
}

/// Share of traffic on each upstream link taking each movement, counted
/// over the given paths. Links no path uses keep the network's ratios.
pub fn empirical_turn_ratios<'a, I>(net: &NetworkGraph, paths: I) -> Vec<f64>
where
    I: IntoIterator<Item = (&'a [LinkId], f64)>,
{
    let mut counts = vec![0.0; net.movements.len()];
    for (path, weight) in paths {
        for w in path.windows(2) {
            if let Some(m) = net.movement_between(w[0], w[1]) {
                counts[m.index()] += weight;
            }
        }
    }
    let mut ratios: Vec<f64> = net.movements.iter().map(|m| m.turn_ratio).collect();
    for link in &net.links {
        let ms = net.movements_from(link.id);
        let total: f64 = ms.iter().map(|m| counts[m.index()]).sum();
        if total > 0.0 {
            for m in ms {
                ratios[m.index()] = counts[m.index()] / total;
            }
        }
    }
    ratios
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_grid, LinkTemplate, PhaseScheme};

    fn grid(n: u32) -> NetworkGraph {
        build_grid(n, n, &LinkTemplate::default(), PhaseScheme::FourPhase).unwrap()
    }

    #[test]
    fn table1_mean() {
        let d = OccupancyDistribution::table1();
        d.validate().unwrap();
        assert!((d.mean() - 1.575).abs() < 1e-12);
        let mut rng = SeedStreams::new(3).stream("occ", &[]);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let v = d.sample(&mut rng);
            assert!(d.support.contains(&v));
            sum += v;
        }
        assert!((sum / n as f64 - 1.575).abs() <= 0.01);
    }

    #[test]
    fn bad_distributions_rejected() {
        let mut d = OccupancyDistribution::table1();
        d.probabilities[0] = 0.69;
        assert!(d.validate().is_err());
        let d = OccupancyDistribution {
            support: vec![0.5],
            probabilities: vec![1.0],
        };
        assert!(d.validate().is_err());
    }

    #[test]
    fn symmetric_profile_hits_target() {
        let net = grid(4);
        let p = DemandProfile::symmetric(&net, 6048.0, 2.0, default_intervals(675.0, 900.0)).unwrap();
        assert!((p.expected_total() - 6048.0).abs() < 1e-6);
        assert_eq!(p.od_pairs.len(), 16 * 15);
        assert_eq!(p.horizon_s(), 3600.0);
        assert_eq!(p.active_horizon_s(), 2700.0);
    }

    #[test]
    fn realized_totals_and_ns_ratio() {
        let net = grid(4);
        let p = DemandProfile::symmetric(&net, 6048.0, 2.0, default_intervals(675.0, 900.0)).unwrap();
        let occ = PrivateOccupancy::Fixed { value: 1.0 };
        let (mut ns, mut ew, mut total) = (0usize, 0usize, 0usize);
        for seed in 0..10 {
            let arrivals = generate_private_arrivals(&p, p.horizon_s(), &occ, &SeedStreams::new(seed));
            assert!(arrivals.windows(2).all(|w| w[0].time <= w[1].time));
            assert!(arrivals.iter().all(|a| a.time < p.active_horizon_s()));
            total += arrivals.len();
            for a in &arrivals {
                if net.centroid(a.origin).side.is_north_south() {
                    ns += 1;
                } else {
                    ew += 1;
                }
            }
        }
        let ratio = ns as f64 / ew as f64;
        assert!((ratio - 2.0).abs() <= 0.1, "ratio {ratio}");
        let mean = total as f64 / 10.0;
        assert!(
            (mean - 6048.0).abs() <= 0.01 * 6048.0 + 3.0 * (6048.0f64 / 10.0).sqrt(),
            "mean {mean}"
        );
    }

    #[test]
    fn zero_factors_give_no_arrivals() {
        let net = grid(2);
        let mut p = DemandProfile::symmetric(&net, 100.0, 2.0, default_intervals(600.0, 0.0)).unwrap();
        for i in &mut p.intervals {
            i.factor = 0.0;
        }
        let a = generate_private_arrivals(
            &p,
            2400.0,
            &PrivateOccupancy::Fixed { value: 1.5 },
            &SeedStreams::new(1),
        );
        assert!(a.is_empty());
    }

    #[test]
    fn arrivals_reproducible_per_seed() {
        let net = grid(2);
        let p = DemandProfile::symmetric(&net, 500.0, 2.0, default_intervals(600.0, 0.0)).unwrap();
        let occ = PrivateOccupancy::Sampled(OccupancyDistribution::table1());
        let a = generate_private_arrivals(&p, 2400.0, &occ, &SeedStreams::new(9));
        let b = generate_private_arrivals(&p, 2400.0, &occ, &SeedStreams::new(9));
        let c = generate_private_arrivals(&p, 2400.0, &occ, &SeedStreams::new(10));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn straight_route(net: &NetworkGraph, headway: f64, mean: f64) -> BusRoute {
        let spec = &default_bus_routes(4, 4)[0];
        BusRoute::from_spec(net, spec, headway, mean, 80.0).unwrap()
    }

    #[test]
    fn headway_counts() {
        let net = grid(4);
        for (headway, expect, tol) in [(120.0, 60.0, 10.0), (300.0, 24.0, 7.0)] {
            let route = straight_route(&net, headway, 50.0);
            let n: usize = (0..10)
                .map(|seed| generate_bus_trips(std::slice::from_ref(&route), 7200.0, &SeedStreams::new(seed)).len())
                .sum();
            let mean = n as f64 / 10.0;
            assert!((mean - expect).abs() <= tol, "headway {headway}: {mean}");
        }
    }

    #[test]
    fn bus_occupancy_mean_and_bounds() {
        let net = grid(4);
        let mut rng = SeedStreams::new(4).stream("b", &[]);
        for mean in [50.0, 25.0, 12.0, 3.0] {
            let route = straight_route(&net, 120.0, mean);
            let n = 10_000;
            let mut sum = 0.0;
            for _ in 0..n {
                let v = route.sample_occupancy(&mut rng);
                assert!((1.0..=80.0).contains(&v) && v.fract() == 0.0);
                sum += v;
            }
            assert!((sum / n as f64 - mean).abs() <= 0.04 * mean.max(50.0), "mean {mean}");
        }
    }

    #[test]
    fn default_routes_resolve_on_both_grids() {
        for n in [4, 8] {
            let net = grid(n);
            let specs = default_bus_routes(n, n);
            assert_eq!(specs.len(), 10);
            assert_eq!(specs.iter().filter(|s| s.high_occupancy).count(), 7);
            for s in &specs {
                let r = BusRoute::from_spec(&net, s, 120.0, 50.0, 80.0).unwrap();
                assert_eq!(r.links.len(), n as usize + 1);
            }
        }
    }

    #[test]
    fn via_points_bend_the_route() {
        let net = grid(4);
        let from = net.centroid_at(Side::West, 0).unwrap();
        let to = net.centroid_at(Side::South, 3).unwrap();
        let links = grid_path(&net, from, to, &[[0, 3]]).unwrap();
        assert_eq!(links.len(), 8);
        assert!(grid_path(&net, from, from, &[]).is_err());
    }

    #[test]
    fn matrix_rows() {
        let m = scenario_matrix();
        assert_eq!(
            (m[4].private_demand, m[4].bus_passenger_demand, m[4].bus_frequency),
            (Level::High, Level::High, Level::High)
        );
        assert_eq!(
            (m[3].private_demand, m[3].bus_passenger_demand, m[3].bus_frequency),
            (Level::Low, Level::Low, Level::Low)
        );
        assert_eq!(
            (m[0].private_demand, m[0].bus_passenger_demand, m[0].bus_frequency),
            (Level::Low, Level::High, Level::High)
        );
        assert_eq!(
            (m[7].private_demand, m[7].bus_passenger_demand, m[7].bus_frequency),
            (Level::High, Level::Low, Level::Low)
        );
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(
                    (m[i].private_demand, m[i].bus_passenger_demand, m[i].bus_frequency),
                    (m[j].private_demand, m[j].bus_passenger_demand, m[j].bus_frequency)
                );
            }
        }
    }

    #[test]
    fn empirical_ratios_follow_paths() {
        let net = grid(2);
        let route = BusRoute::from_spec(&net, &default_bus_routes(2, 2)[0], 120.0, 10.0, 80.0).unwrap();
        let r = empirical_turn_ratios(&net, [(route.links.as_slice(), 1.0)]);
        let m = net.movement_between(route.links[0], route.links[1]).unwrap();
        assert_eq!(r[m.index()], 1.0);
        let copy = net.with_turn_ratios(&r).unwrap();
        copy.validate().unwrap();
    }
}
