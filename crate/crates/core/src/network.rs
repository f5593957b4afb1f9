//! Static road network: directed links, turning movements, signal phases and
//! the rectangular grid builder.
//!
//! Intersections sit on a `rows × cols` lattice with row 0 at the north edge
//! and column 0 at the west edge. Every boundary approach has a perimeter
//! centroid that owns one source link (entering the grid) and one sink link
//! (leaving it). A [`NetworkGraph`] is immutable once built and can be shared
//! freely between concurrent runs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_newtype!(LinkId);
id_newtype!(MovementId);
id_newtype!(IntersectionId);
id_newtype!(CentroidId);

/// Compass heading of travel along a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    fn ordinal(self) -> u8 {
        match self {
            Heading::North => 0,
            Heading::East => 1,
            Heading::South => 2,
            Heading::West => 3,
        }
    }

    fn from_ordinal(v: u8) -> Heading {
        Heading::ALL[(v % 4) as usize]
    }

    pub fn right(self) -> Heading {
        Heading::from_ordinal(self.ordinal() + 1)
    }

    pub fn left(self) -> Heading {
        Heading::from_ordinal(self.ordinal() + 3)
    }

    pub fn reverse(self) -> Heading {
        Heading::from_ordinal(self.ordinal() + 2)
    }

    /// True for north/south travel.
    pub fn is_vertical(self) -> bool {
        matches!(self, Heading::North | Heading::South)
    }

    /// Lattice step `(d_row, d_col)` taken when travelling in this heading.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::North => (-1, 0),
            Heading::East => (0, 1),
            Heading::South => (1, 0),
            Heading::West => (0, -1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Turn {
    Left,
    Through,
    Right,
}

/// Perimeter side a centroid sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    North,
    East,
    South,
    West,
}

impl Side {
    /// Heading of vehicles entering the grid from this side.
    pub fn inbound_heading(self) -> Heading {
        match self {
            Side::North => Heading::South,
            Side::East => Heading::West,
            Side::South => Heading::North,
            Side::West => Heading::East,
        }
    }

    /// North and south centroids feed the vertical corridors.
    pub fn is_north_south(self) -> bool {
        matches!(self, Side::North | Side::South)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Endpoint {
    Intersection(IntersectionId),
    Centroid(CentroidId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub from: Endpoint,
    pub to: Endpoint,
    pub heading: Heading,
    pub length_m: f64,
    pub lanes: u32,
    pub free_flow_kmh: f64,
    /// Maximum number of vehicles physically on the link. Sink links carry
    /// `u32::MAX`.
    pub storage_capacity: u32,
    pub is_source: bool,
    pub is_sink: bool,
}

impl Link {
    pub fn free_flow_time_s(&self) -> f64 {
        self.length_m / (self.free_flow_kmh / 3.6)
    }

    /// Whole simulation steps needed to traverse the link at free-flow speed.
    pub fn travel_steps(&self, dt: f64) -> u64 {
        let steps = (self.free_flow_time_s() / dt - 1e-9).ceil();
        steps.max(1.0) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Movement {
    pub id: MovementId,
    pub intersection: IntersectionId,
    pub upstream: LinkId,
    pub downstream: LinkId,
    pub turn: Turn,
    /// Nominal (mean) saturation flow, vehicles per hour.
    pub saturation_flow_vph: f64,
    /// Default estimate of the share of upstream traffic taking this turn.
    pub turn_ratio: f64,
}

impl Movement {
    /// Saturation flow in vehicles per second.
    pub fn saturation_per_s(&self) -> f64 {
        self.saturation_flow_vph / 3600.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub id: u32,
    pub served_movements: Vec<MovementId>,
}

impl Phase {
    /// Activation indicator for a movement under this phase.
    pub fn serves(&self, movement: MovementId) -> bool {
        self.served_movements.contains(&movement)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: IntersectionId,
    pub row: u32,
    pub col: u32,
    pub incoming_links: Vec<LinkId>,
    pub outgoing_links: Vec<LinkId>,
    pub movements: Vec<MovementId>,
    pub phases: Vec<Phase>,
    /// Phase active when a run starts.
    pub initial_phase: u32,
    /// All outgoing links are sinks, so downstream terms drop out of weights.
    pub is_isolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub id: CentroidId,
    pub side: Side,
    /// Column for north/south centroids, row for east/west ones.
    pub index: u32,
    pub source_link: LinkId,
    pub sink_link: LinkId,
}

/// Parameters shared by every link the grid builder creates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkTemplate {
    pub length_m: f64,
    pub lanes: u32,
    pub free_flow_kmh: f64,
    pub saturation_flow_vph: f64,
    pub jam_spacing_m: f64,
}

impl Default for LinkTemplate {
    fn default() -> Self {
        LinkTemplate {
            length_m: 200.0,
            lanes: 3,
            free_flow_kmh: 50.0,
            saturation_flow_vph: 1800.0,
            jam_spacing_m: 7.0,
        }
    }
}

impl LinkTemplate {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive and finite, got {v}")))
            }
        };
        positive("network.link.length_m", self.length_m)?;
        positive("network.link.free_flow_kmh", self.free_flow_kmh)?;
        positive("network.link.saturation_flow_vph", self.saturation_flow_vph)?;
        positive("network.link.jam_spacing_m", self.jam_spacing_m)?;
        if self.lanes == 0 {
            return Err(Error::config("network.link.lanes", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseScheme {
    /// NS through+right, NS left, EW through+right, EW left.
    #[default]
    FourPhase,
}

/// Number of vehicles a link can physically hold at jam density.
pub fn storage_capacity_of(length_m: f64, lanes: u32, jam_spacing_m: f64) -> u32 {
    let raw = (length_m * f64::from(lanes) / jam_spacing_m).floor();
    if raw < 1.0 {
        1
    } else if raw >= f64::from(u32::MAX) {
        u32::MAX
    } else {
        raw as u32
    }
}

/// Two movements at one intersection conflict when their paths cross.
/// Movements from the same approach never conflict; crossing streams always
/// do; opposing streams conflict only when exactly one of them turns left.
pub fn movements_conflict(a: (Heading, Turn), b: (Heading, Turn)) -> bool {
    if a.0 == b.0 {
        return false;
    }
    if a.0.is_vertical() != b.0.is_vertical() {
        return true;
    }
    (a.1 == Turn::Left) != (b.1 == Turn::Left)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub rows: u32,
    pub cols: u32,
    pub links: Vec<Link>,
    pub movements: Vec<Movement>,
    pub intersections: Vec<Intersection>,
    pub centroids: Vec<Centroid>,
    #[serde(skip)]
    out_movements: Vec<Vec<MovementId>>,
}

impl NetworkGraph {
    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.index()]
    }

    pub fn movement(&self, id: MovementId) -> &Movement {
        &self.movements[id.index()]
    }

    pub fn intersection(&self, id: IntersectionId) -> &Intersection {
        &self.intersections[id.index()]
    }

    pub fn centroid(&self, id: CentroidId) -> &Centroid {
        &self.centroids[id.index()]
    }

    /// Movements leaving link `l` (the set D(l) expressed as movements).
    pub fn movements_from(&self, link: LinkId) -> &[MovementId] {
        &self.out_movements[link.index()]
    }

    pub fn movement_between(&self, upstream: LinkId, downstream: LinkId) -> Option<MovementId> {
        self.movements_from(upstream)
            .iter()
            .copied()
            .find(|&m| self.movement(m).downstream == downstream)
    }

    pub fn intersection_at(&self, row: u32, col: u32) -> Option<IntersectionId> {
        (row < self.rows && col < self.cols).then(|| IntersectionId(row * self.cols + col))
    }

    pub fn centroid_at(&self, side: Side, index: u32) -> Option<CentroidId> {
        self.centroids
            .iter()
            .find(|c| c.side == side && c.index == index)
            .map(|c| c.id)
    }

    /// Intersection a link flows into, if it is not a sink.
    pub fn link_head(&self, link: LinkId) -> Option<IntersectionId> {
        match self.link(link).to {
            Endpoint::Intersection(i) => Some(i),
            Endpoint::Centroid(_) => None,
        }
    }

    pub fn signalized_count(&self) -> usize {
        self.intersections.len()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse {
            what: "network".into(),
            message: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut net: NetworkGraph = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "network".into(),
            message: e.to_string(),
        })?;
        net.rebuild_index();
        net.validate()?;
        Ok(net)
    }

    fn rebuild_index(&mut self) {
        let mut out = vec![Vec::new(); self.links.len()];
        for m in &self.movements {
            out[m.upstream.index()].push(m.id);
        }
        self.out_movements = out;
    }

    /// Checks every structural invariant of the network.
    pub fn validate(&self) -> Result<()> {
        for (i, link) in self.links.iter().enumerate() {
            let field = format!("links[{i}]");
            if link.id.index() != i {
                return Err(Error::config(field, "link ids must be dense and ordered"));
            }
            if !(link.length_m > 0.0 && link.free_flow_kmh > 0.0 && link.lanes >= 1) {
                return Err(Error::config(field, "length, speed and lanes must be positive"));
            }
            if link.storage_capacity < 1 {
                return Err(Error::config(field, "storage capacity must be at least 1"));
            }
        }
        for (i, m) in self.movements.iter().enumerate() {
            let field = format!("movements[{i}]");
            if m.id.index() != i {
                return Err(Error::config(field, "movement ids must be dense and ordered"));
            }
            if !(m.saturation_flow_vph > 0.0) {
                return Err(Error::config(field, "saturation flow must be positive"));
            }
            if !(0.0..=1.0).contains(&m.turn_ratio) {
                return Err(Error::config(field, "turn ratio must lie in [0, 1]"));
            }
        }
        for link in &self.links {
            let out = self.movements_from(link.id);
            if link.is_sink {
                if !out.is_empty() {
                    return Err(Error::config(format!("links[{}]", link.id), "sink link has movements"));
                }
                continue;
            }
            let total: f64 = out.iter().map(|&m| self.movement(m).turn_ratio).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::config(
                    format!("links[{}]", link.id),
                    format!("turn ratios sum to {total}, expected 1"),
                ));
            }
        }
        for node in &self.intersections {
            let field = format!("intersections[{}]", node.id);
            if node.phases.is_empty() || node.initial_phase as usize >= node.phases.len() {
                return Err(Error::config(field, "initial phase must index a phase"));
            }
            let mut served = vec![0u32; self.movements.len()];
            for phase in &node.phases {
                if phase.served_movements.is_empty() {
                    return Err(Error::config(field, format!("phase {} serves nothing", phase.id)));
                }
                for (k, &a) in phase.served_movements.iter().enumerate() {
                    served[a.index()] += 1;
                    for &b in &phase.served_movements[k + 1..] {
                        let (ma, mb) = (self.movement(a), self.movement(b));
                        let ka = (self.link(ma.upstream).heading, ma.turn);
                        let kb = (self.link(mb.upstream).heading, mb.turn);
                        if movements_conflict(ka, kb) {
                            return Err(Error::config(
                                field,
                                format!("phase {} serves conflicting movements {a} and {b}", phase.id),
                            ));
                        }
                    }
                }
            }
            for &m in &node.movements {
                if served[m.index()] != 1 {
                    return Err(Error::config(
                        field,
                        format!("movement {m} is served by {} phases", served[m.index()]),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Replaces the controller-facing turn ratio estimates.
    pub fn with_turn_ratios(&self, ratios: &[f64]) -> Result<NetworkGraph> {
        if ratios.len() != self.movements.len() {
            return Err(Error::config("turn_ratios", "length must equal the movement count"));
        }
        let mut net = self.clone();
        for (m, &r) in net.movements.iter_mut().zip(ratios) {
            m.turn_ratio = r;
        }
        net.validate()?;
        Ok(net)
    }
}

fn default_turn_ratio(turn: Turn) -> f64 {
    match turn {
        Turn::Through => 0.6,
        Turn::Left | Turn::Right => 0.2,
    }
}

/// Builds a bidirectional `rows × cols` grid with a perimeter centroid on
/// every boundary approach.
///
/// Link ids are assigned in a fixed order (internal horizontal, internal
/// vertical, then centroid source/sink pairs) so identical parameters always
/// give identical topologies.
pub fn build_grid(rows: u32, cols: u32, template: &LinkTemplate, scheme: PhaseScheme) -> Result<NetworkGraph> {
    if rows == 0 {
        return Err(Error::config("network.rows", "must be at least 1"));
    }
    if cols == 0 {
        return Err(Error::config("network.cols", "must be at least 1"));
    }
    template.validate()?;

    let storage = storage_capacity_of(template.length_m, template.lanes, template.jam_spacing_m);
    let node = |r: u32, c: u32| IntersectionId(r * cols + c);
    let mut links: Vec<Link> = Vec::new();
    let mut push_link = |from: Endpoint, to: Endpoint, heading: Heading, source: bool, sink: bool| {
        let id = LinkId(links.len() as u32);
        links.push(Link {
            id,
            from,
            to,
            heading,
            length_m: template.length_m,
            lanes: template.lanes,
            free_flow_kmh: template.free_flow_kmh,
            storage_capacity: if sink { u32::MAX } else { storage },
            is_source: source,
            is_sink: sink,
        });
        id
    };

    for r in 0..rows {
        for c in 0..cols.saturating_sub(1) {
            let (a, b) = (
                Endpoint::Intersection(node(r, c)),
                Endpoint::Intersection(node(r, c + 1)),
            );
            push_link(a, b, Heading::East, false, false);
            push_link(b, a, Heading::West, false, false);
        }
    }
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols {
            let (a, b) = (
                Endpoint::Intersection(node(r, c)),
                Endpoint::Intersection(node(r + 1, c)),
            );
            push_link(a, b, Heading::South, false, false);
            push_link(b, a, Heading::North, false, false);
        }
    }

    let mut perimeter: Vec<(Side, u32, IntersectionId)> = Vec::new();
    perimeter.extend((0..cols).map(|c| (Side::North, c, node(0, c))));
    perimeter.extend((0..rows).map(|r| (Side::East, r, node(r, cols - 1))));
    perimeter.extend((0..cols).map(|c| (Side::South, c, node(rows - 1, c))));
    perimeter.extend((0..rows).map(|r| (Side::West, r, node(r, 0))));

    let mut centroids = Vec::with_capacity(perimeter.len());
    for (k, &(side, index, at)) in perimeter.iter().enumerate() {
        let id = CentroidId(k as u32);
        let inbound = side.inbound_heading();
        let source = push_link(Endpoint::Centroid(id), Endpoint::Intersection(at), inbound, true, false);
        let sink = push_link(
            Endpoint::Intersection(at),
            Endpoint::Centroid(id),
            inbound.reverse(),
            false,
            true,
        );
        centroids.push(Centroid {
            id,
            side,
            index,
            source_link: source,
            sink_link: sink,
        });
    }

    let mut intersections: Vec<Intersection> = (0..rows * cols)
        .map(|k| Intersection {
            id: IntersectionId(k),
            row: k / cols,
            col: k % cols,
            incoming_links: Vec::new(),
            outgoing_links: Vec::new(),
            movements: Vec::new(),
            phases: Vec::new(),
            initial_phase: 0,
            is_isolated: false,
        })
        .collect();
    for link in &links {
        if let Endpoint::Intersection(i) = link.to {
            intersections[i.index()].incoming_links.push(link.id);
        }
        if let Endpoint::Intersection(i) = link.from {
            intersections[i.index()].outgoing_links.push(link.id);
        }
    }

    let mut movements = Vec::new();
    for node in &mut intersections {
        // Approaches in compass order of the heading they travel.
        node.incoming_links.sort_by_key(|&l| links[l.index()].heading.ordinal());
        node.outgoing_links.sort_by_key(|&l| links[l.index()].heading.ordinal());
        for &l in &node.incoming_links {
            let heading = links[l.index()].heading;
            for turn in [Turn::Left, Turn::Through, Turn::Right] {
                let out_heading = match turn {
                    Turn::Left => heading.left(),
                    Turn::Through => heading,
                    Turn::Right => heading.right(),
                };
                let downstream = node
                    .outgoing_links
                    .iter()
                    .copied()
                    .find(|&m| links[m.index()].heading == out_heading)
                    .expect("every grid node has an outgoing link in each heading");
                let id = MovementId(movements.len() as u32);
                movements.push(Movement {
                    id,
                    intersection: node.id,
                    upstream: l,
                    downstream,
                    turn,
                    saturation_flow_vph: template.saturation_flow_vph,
                    turn_ratio: default_turn_ratio(turn),
                });
                node.movements.push(id);
            }
        }
        node.is_isolated = node.outgoing_links.iter().all(|&m| links[m.index()].is_sink);
        node.phases = match scheme {
            PhaseScheme::FourPhase => four_phase(node, &links, &movements),
        };
    }

    let mut net = NetworkGraph {
        rows,
        cols,
        links,
        movements,
        intersections,
        centroids,
        out_movements: Vec::new(),
    };
    net.rebuild_index();
    net.validate()?;
    Ok(net)
}

fn four_phase(node: &Intersection, links: &[Link], movements: &[Movement]) -> Vec<Phase> {
    let groups: [(bool, bool); 4] = [(true, false), (true, true), (false, false), (false, true)];
    groups
        .iter()
        .enumerate()
        .map(|(k, &(vertical, left))| Phase {
            id: k as u32,
            served_movements: node
                .movements
                .iter()
                .copied()
                .filter(|&m| {
                    let mv = &movements[m.index()];
                    links[mv.upstream.index()].heading.is_vertical() == vertical && (mv.turn == Turn::Left) == left
                })
                .collect(),
        })
        .collect()
}
