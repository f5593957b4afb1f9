//! Route choice: k shortest free-flow paths between perimeter centroids
//! (Yen's algorithm on the intersection graph) sampled with logit weights.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{CentroidId, Endpoint, LinkId, NetworkGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    /// Source link first, sink link last.
    pub links: Vec<LinkId>,
    /// Free-flow travel time, seconds.
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteChoice {
    /// Number of candidate paths per origin-destination pair.
    pub k: usize,
    /// Logit dispersion per second of free-flow time. `inf` always takes
    /// the cheapest path.
    pub theta: f64,
}

impl Default for RouteChoice {
    fn default() -> Self {
        RouteChoice { k: 3, theta: 0.1 }
    }
}

impl RouteChoice {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("demand.routing.k", "must be at least 1"));
        }
        if !(self.theta >= 0.0) {
            return Err(Error::config("demand.routing.theta", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    cost: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then node index
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Directed graph over intersections plus one node per centroid, restricted
/// to one origin and one destination so paths never leave and re-enter.
struct RoutingGraph<'a> {
    net: &'a NetworkGraph,
    adjacency: Vec<Vec<(usize, LinkId, f64)>>,
}

impl<'a> RoutingGraph<'a> {
    fn new(net: &'a NetworkGraph, origin: CentroidId, destination: CentroidId) -> Self {
        let n = net.intersections.len();
        let node_of = |e: Endpoint| match e {
            Endpoint::Intersection(i) => i.index(),
            Endpoint::Centroid(c) => n + c.index(),
        };
        let mut adjacency = vec![Vec::new(); n + net.centroids.len()];
        for link in &net.links {
            let allowed = match (link.from, link.to) {
                (Endpoint::Centroid(c), _) => c == origin,
                (_, Endpoint::Centroid(c)) => c == destination,
                _ => true,
            };
            if allowed {
                adjacency[node_of(link.from)].push((node_of(link.to), link.id, link.free_flow_time_s()));
            }
        }
        RoutingGraph { net, adjacency }
    }

    fn centroid_node(&self, c: CentroidId) -> usize {
        self.net.intersections.len() + c.index()
    }

    /// Cheapest path avoiding the given nodes and links. Returns the node
    /// sequence and the links between them.
    fn dijkstra(
        &self,
        from: usize,
        to: usize,
        banned_nodes: &[bool],
        banned_links: &[LinkId],
    ) -> Option<(Vec<usize>, Vec<LinkId>)> {
        let n = self.adjacency.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev: Vec<Option<(usize, LinkId)>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[from] = 0.0;
        heap.push(Entry { cost: 0.0, node: from });
        while let Some(Entry { cost, node }) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            if node == to {
                break;
            }
            for &(next, link, w) in &self.adjacency[node] {
                if banned_nodes[next] || banned_links.contains(&link) {
                    continue;
                }
                let c = cost + w;
                if c < dist[next] {
                    dist[next] = c;
                    prev[next] = Some((node, link));
                    heap.push(Entry { cost: c, node: next });
                }
            }
        }
        if !dist[to].is_finite() {
            return None;
        }
        let (mut nodes, mut links) = (vec![to], Vec::new());
        let mut at = to;
        while let Some((p, l)) = prev[at] {
            nodes.push(p);
            links.push(l);
            at = p;
        }
        nodes.reverse();
        links.reverse();
        Some((nodes, links))
    }

    fn cost(&self, links: &[LinkId]) -> f64 {
        links.iter().map(|&l| self.net.link(l).free_flow_time_s()).sum()
    }
}

/// Up to `k` loop-free paths in increasing free-flow cost (ties broken by
/// link sequence).
pub fn k_shortest_paths(
    net: &NetworkGraph,
    origin: CentroidId,
    destination: CentroidId,
    k: usize,
) -> Result<Vec<Path>> {
    let no_path = Error::NoPath {
        origin: origin.0,
        destination: destination.0,
    };
    if origin == destination || k == 0 {
        return Err(no_path);
    }
    let graph = RoutingGraph::new(net, origin, destination);
    let (src, dst) = (graph.centroid_node(origin), graph.centroid_node(destination));
    let none = vec![false; graph.adjacency.len()];
    let first = graph.dijkstra(src, dst, &none, &[]).ok_or(no_path)?;

    let mut accepted: Vec<(Vec<usize>, Vec<LinkId>)> = vec![first];
    let mut candidates: Vec<(f64, Vec<usize>, Vec<LinkId>)> = Vec::new();
    while accepted.len() < k {
        let (prev_nodes, prev_links) = accepted.last().cloned().expect("non-empty");
        for i in 0..prev_nodes.len() - 1 {
            let spur = prev_nodes[i];
            let root_nodes = &prev_nodes[..=i];
            let root_links = &prev_links[..i];
            let banned_links: Vec<LinkId> = accepted
                .iter()
                .filter(|(nodes, _)| nodes.len() > i && &nodes[..=i] == root_nodes)
                .map(|(_, links)| links[i])
                .collect();
            let mut banned_nodes = none.clone();
            for &n in &root_nodes[..i] {
                banned_nodes[n] = true;
            }
            if let Some((spur_nodes, spur_links)) = graph.dijkstra(spur, dst, &banned_nodes, &banned_links) {
                let mut nodes = root_nodes[..i].to_vec();
                nodes.extend(spur_nodes);
                let mut links = root_links.to_vec();
                links.extend(spur_links);
                let known = accepted.iter().any(|(_, l)| *l == links) || candidates.iter().any(|(_, _, l)| *l == links);
                if !known {
                    candidates.push((graph.cost(&links), nodes, links));
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        let best = (0..candidates.len())
            .min_by(|&a, &b| {
                candidates[a]
                    .0
                    .total_cmp(&candidates[b].0)
                    .then_with(|| candidates[a].2.cmp(&candidates[b].2))
            })
            .expect("non-empty");
        let (_, nodes, links) = candidates.swap_remove(best);
        accepted.push((nodes, links));
    }
    Ok(accepted
        .into_iter()
        .map(|(_, links)| Path {
            cost: graph.cost(&links),
            links,
        })
        .collect())
}

/// Logit choice probabilities `exp(-theta * cost)`, normalized.
pub fn logit_probabilities(costs: &[f64], theta: f64) -> Vec<f64> {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = if theta.is_infinite() {
        costs.iter().map(|&c| if c <= min { 1.0 } else { 0.0 }).collect()
    } else {
        costs.iter().map(|&c| (-theta * (c - min)).exp()).collect()
    };
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

fn sample_index<R: Rng + ?Sized>(probabilities: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples one route among the k cheapest paths with logit weights.
pub fn assign_route<R: Rng + ?Sized>(
    net: &NetworkGraph,
    origin: CentroidId,
    destination: CentroidId,
    rng: &mut R,
    choice: &RouteChoice,
) -> Result<Vec<LinkId>> {
    let paths = k_shortest_paths(net, origin, destination, choice.k)?;
    let costs: Vec<f64> = paths.iter().map(|p| p.cost).collect();
    let pick = sample_index(&logit_probabilities(&costs, choice.theta), rng);
    Ok(paths[pick].links.clone())
}

/// Candidate paths and their choice probabilities, cached per
/// origin-destination pair.
#[derive(Debug, Clone, Default)]
pub struct RouteTable {
    choice: RouteChoice,
    sets: BTreeMap<(CentroidId, CentroidId), (Vec<Path>, Vec<f64>)>,
}

impl RouteTable {
    pub fn new(choice: RouteChoice) -> Self {
        RouteTable {
            choice,
            sets: BTreeMap::new(),
        }
    }

    pub fn paths(&mut self, net: &NetworkGraph, o: CentroidId, d: CentroidId) -> Result<&(Vec<Path>, Vec<f64>)> {
        if !self.sets.contains_key(&(o, d)) {
            let paths = k_shortest_paths(net, o, d, self.choice.k)?;
            let costs: Vec<f64> = paths.iter().map(|p| p.cost).collect();
            let probs = logit_probabilities(&costs, self.choice.theta);
            self.sets.insert((o, d), (paths, probs));
        }
        Ok(&self.sets[&(o, d)])
    }

    /// Index of the sampled path within [`RouteTable::paths`].
    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        net: &NetworkGraph,
        o: CentroidId,
        d: CentroidId,
        rng: &mut R,
    ) -> Result<usize> {
        let (_, probs) = self.paths(net, o, d)?;
        Ok(sample_index(probs, rng))
    }
}

/// Checks that a link sequence is a connected, loop-free centroid-to-centroid
/// path. Returns a description of the first defect.
pub fn validate_path(net: &NetworkGraph, links: &[LinkId]) -> std::result::Result<(), String> {
    let (Some(&first), Some(&last)) = (links.first(), links.last()) else {
        return Err("empty path".into());
    };
    if !net.link(first).is_source || !net.link(last).is_sink {
        return Err("path must run from a source link to a sink link".into());
    }
    let mut seen = Vec::new();
    for w in links.windows(2) {
        if net.movement_between(w[0], w[1]).is_none() {
            return Err(format!("links {} and {} are not joined by a movement", w[0], w[1]));
        }
        let node = net.link_head(w[0]).expect("non-sink link");
        if seen.contains(&node) {
            return Err(format!("intersection {node} visited twice"));
        }
        seen.push(node);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_grid, LinkTemplate, PhaseScheme, Side};
    use crate::rng::SeedStreams;

    fn grid(n: u32) -> NetworkGraph {
        build_grid(n, n, &LinkTemplate::default(), PhaseScheme::FourPhase).unwrap()
    }

    #[test]
    fn straight_through_is_the_unique_shortest_path() {
        let net = grid(4);
        let o = net.centroid_at(Side::North, 1).unwrap();
        let d = net.centroid_at(Side::South, 1).unwrap();
        let paths = k_shortest_paths(&net, o, d, 3).unwrap();
        assert_eq!(paths[0].links.len(), 5);
        assert!(paths[1].cost > paths[0].cost);
        let mut rng = SeedStreams::new(1).stream("r", &[]);
        let choice = RouteChoice {
            k: 3,
            theta: f64::INFINITY,
        };
        for _ in 0..50 {
            assert_eq!(assign_route(&net, o, d, &mut rng, &choice).unwrap(), paths[0].links);
        }
    }

    #[test]
    fn corner_to_corner_paths_sorted_and_loop_free() {
        let net = grid(4);
        let o = net.centroid_at(Side::North, 0).unwrap();
        let d = net.centroid_at(Side::South, 3).unwrap();
        let paths = k_shortest_paths(&net, o, d, 5).unwrap();
        assert_eq!(paths.len(), 5);
        for w in paths.windows(2) {
            assert!(w[0].cost <= w[1].cost);
            assert_ne!(w[0].links, w[1].links);
        }
        for p in &paths {
            validate_path(&net, &p.links).unwrap();
            assert_eq!(p.links.first(), Some(&net.centroid(o).source_link));
            assert_eq!(p.links.last(), Some(&net.centroid(d).sink_link));
        }
    }

    #[test]
    fn zero_theta_is_uniform() {
        let net = grid(4);
        let o = net.centroid_at(Side::North, 0).unwrap();
        let d = net.centroid_at(Side::South, 1).unwrap();
        let choice = RouteChoice { k: 3, theta: 0.0 };
        let paths = k_shortest_paths(&net, o, d, 3).unwrap();
        let mut table = RouteTable::new(choice);
        let mut rng = SeedStreams::new(2).stream("r", &[]);
        let mut counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            counts[table.sample(&net, o, d, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 1.0 / 3.0).abs() <= 0.02, "{counts:?}");
        }
        assert_eq!(table.paths(&net, o, d).unwrap().0, paths);
    }

    #[test]
    fn logit_prefers_cheaper_paths() {
        let p = logit_probabilities(&[10.0, 20.0], 0.1);
        assert!((p[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        assert_eq!(
            logit_probabilities(&[5.0, 7.0, 5.0], f64::INFINITY),
            vec![0.5, 0.0, 0.5]
        );
    }

    #[test]
    fn same_centroid_has_no_path() {
        let net = grid(2);
        assert!(matches!(
            k_shortest_paths(&net, CentroidId(0), CentroidId(0), 2),
            Err(Error::NoPath { .. })
        ));
    }

    #[test]
    fn validator_catches_defects() {
        let net = grid(2);
        let c0 = net.centroid(CentroidId(0));
        assert!(validate_path(&net, &[]).is_err());
        assert!(validate_path(&net, &[c0.source_link, c0.source_link]).is_err());
        assert!(validate_path(&net, &[c0.sink_link]).is_err());
    }
}
