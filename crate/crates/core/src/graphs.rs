//! Bubble diagrams: rooms and doors with adjacency structure, plus the
//! geometric consistency checks between diagrams and rendered layouts.
//!
//! A diagram's *components* are everything that carries a mask: every
//! non-outside room node and every door edge. The outside node is structural
//! only — it anchors front doors but has no geometry and never appears in
//! component enumerations or neighbor sets.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of distinct component type codes (10 room kinds + 2 door kinds).
pub const TYPE_COUNT: usize = 12;

/// Room and door type vocabulary. Codes 0–9 are node kinds, 10–11 edge kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentType {
    LivingRoom,
    Kitchen,
    Bedroom,
    Balcony,
    Entrance,
    DiningRoom,
    StudyRoom,
    Storage,
    Unknown,
    Outside,
    InteriorDoor,
    FrontDoor,
}

impl ComponentType {
    pub const ALL: [ComponentType; TYPE_COUNT] = [
        ComponentType::LivingRoom,
        ComponentType::Kitchen,
        ComponentType::Bedroom,
        ComponentType::Balcony,
        ComponentType::Entrance,
        ComponentType::DiningRoom,
        ComponentType::StudyRoom,
        ComponentType::Storage,
        ComponentType::Unknown,
        ComponentType::Outside,
        ComponentType::InteriorDoor,
        ComponentType::FrontDoor,
    ];

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&t| t == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// A mask-carrying room kind (excludes the outside pseudo-room).
    pub fn is_room(self) -> bool {
        self.code() <= 8
    }

    /// Valid as a node kind (rooms plus outside).
    pub fn is_node_kind(self) -> bool {
        self.code() <= 9
    }

    pub fn is_door(self) -> bool {
        matches!(self, ComponentType::InteriorDoor | ComponentType::FrontDoor)
    }

    pub fn name(self) -> &'static str {
        match self {
            ComponentType::LivingRoom => "living room",
            ComponentType::Kitchen => "kitchen",
            ComponentType::Bedroom => "bedroom",
            ComponentType::Balcony => "balcony",
            ComponentType::Entrance => "entrance",
            ComponentType::DiningRoom => "dining room",
            ComponentType::StudyRoom => "study room",
            ComponentType::Storage => "storage",
            ComponentType::Unknown => "unknown",
            ComponentType::Outside => "outside",
            ComponentType::InteriorDoor => "interior door",
            ComponentType::FrontDoor => "front door",
        }
    }

    pub fn one_hot(self) -> [f32; TYPE_COUNT] {
        let mut v = [0.0; TYPE_COUNT];
        v[self.code() as usize] = 1.0;
        v
    }
}

impl fmt::Display for ComponentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: u32,
    pub kind: ComponentType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub a: u32,
    pub b: u32,
    pub kind: ComponentType,
}

impl Edge {
    /// Endpoints as an unordered pair.
    pub fn pair(&self) -> (u32, u32) {
        (self.a.min(self.b), self.a.max(self.b))
    }
}

/// A bubble diagram: typed room nodes and typed door edges.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BubbleDiagram {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl BubbleDiagram {
    pub fn node(&self, id: u32) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn outside_id(&self) -> Option<u32> {
        self.nodes.iter().find(|n| n.kind == ComponentType::Outside).map(|n| n.id)
    }

    /// Number of mask-carrying rooms (outside excluded).
    pub fn room_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind.is_room()).count()
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_diagram(self)
    }
}

/// One structural defect found by [`validate_diagram`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DuplicateNodeId(u32),
    NodeKindNotRoom { id: u32, kind: ComponentType },
    EdgeKindNotDoor { a: u32, b: u32, kind: ComponentType },
    MissingEndpoint { a: u32, b: u32, missing: u32 },
    SelfLoop { id: u32 },
    DuplicateEdge { a: u32, b: u32 },
    MultipleOutsideNodes,
    FrontDoorEndpoints { a: u32, b: u32 },
    InteriorDoorTouchesOutside { a: u32, b: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNodeId(id) => write!(f, "duplicate node id {id}"),
            Violation::NodeKindNotRoom { id, kind } => {
                write!(f, "node {id} has non-room kind {kind}")
            }
            Violation::EdgeKindNotDoor { a, b, kind } => {
                write!(f, "edge ({a}, {b}) has non-door kind {kind}")
            }
            Violation::MissingEndpoint { a, b, missing } => {
                write!(f, "edge ({a}, {b}) references missing node {missing}")
            }
            Violation::SelfLoop { id } => write!(f, "self-loop on node {id}"),
            Violation::DuplicateEdge { a, b } => write!(f, "duplicate edge between {a} and {b}"),
            Violation::MultipleOutsideNodes => write!(f, "more than one outside node"),
            Violation::FrontDoorEndpoints { a, b } => {
                write!(f, "front door ({a}, {b}) must join one room to the outside node")
            }
            Violation::InteriorDoorTouchesOutside { a, b } => {
                write!(f, "interior door ({a}, {b}) may not touch the outside node")
            }
        }
    }
}

/// Collect every structural defect; an empty list means the diagram is valid.
pub fn validate_diagram(d: &BubbleDiagram) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut outside = 0usize;
    for n in &d.nodes {
        if !seen.insert(n.id) {
            out.push(Violation::DuplicateNodeId(n.id));
        }
        if !n.kind.is_node_kind() {
            out.push(Violation::NodeKindNotRoom { id: n.id, kind: n.kind });
        }
        if n.kind == ComponentType::Outside {
            outside += 1;
        }
    }
    if outside > 1 {
        out.push(Violation::MultipleOutsideNodes);
    }
    let mut pairs = BTreeSet::new();
    for e in &d.edges {
        if !e.kind.is_door() {
            out.push(Violation::EdgeKindNotDoor { a: e.a, b: e.b, kind: e.kind });
        }
        if e.a == e.b {
            out.push(Violation::SelfLoop { id: e.a });
            continue;
        }
        let mut endpoints_ok = true;
        for id in [e.a, e.b] {
            if d.node(id).is_none() {
                out.push(Violation::MissingEndpoint { a: e.a, b: e.b, missing: id });
                endpoints_ok = false;
            }
        }
        if !pairs.insert(e.pair()) {
            out.push(Violation::DuplicateEdge { a: e.a, b: e.b });
        }
        if !endpoints_ok {
            continue;
        }
        let outside_ends = [e.a, e.b]
            .iter()
            .filter(|&&id| d.node(id).map(|n| n.kind == ComponentType::Outside) == Some(true))
            .count();
        match e.kind {
            ComponentType::FrontDoor if outside_ends != 1 => {
                out.push(Violation::FrontDoorEndpoints { a: e.a, b: e.b });
            }
            ComponentType::InteriorDoor if outside_ends != 0 => {
                out.push(Violation::InteriorDoorTouchesOutside { a: e.a, b: e.b });
            }
            _ => {}
        }
    }
    out
}

// ── Components ─────────────────────────────────────────────────────────

/// Where a component comes from in the diagram.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComponentSource {
    Node { id: u32 },
    Edge { a: u32, b: u32 },
}

/// A mask-carrying element: a non-outside room or a door.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    /// Position in the canonical enumeration.
    pub index: usize,
    pub source: ComponentSource,
    pub kind: ComponentType,
}

impl Component {
    /// Order key independent of list position: rooms by id, then doors by
    /// their unordered endpoint pair. Pooling iterates in this order so that
    /// reordering the diagram's lists cannot change any floating-point sum.
    fn canon_key(&self) -> (u8, u32, u32) {
        match self.source {
            ComponentSource::Node { id } => (0, id, 0),
            ComponentSource::Edge { a, b } => (1, a.min(b), a.max(b)),
        }
    }
}

/// Enumerate components: non-outside nodes in list order, then edges in list
/// order. This fixes the mask ordering used across the whole system.
pub fn components(d: &BubbleDiagram) -> Vec<Component> {
    let mut out = Vec::with_capacity(d.nodes.len() + d.edges.len());
    for n in d.nodes.iter().filter(|n| n.kind != ComponentType::Outside) {
        out.push(Component {
            index: out.len(),
            source: ComponentSource::Node { id: n.id },
            kind: n.kind,
        });
    }
    for e in &d.edges {
        out.push(Component {
            index: out.len(),
            source: ComponentSource::Edge { a: e.a, b: e.b },
            kind: e.kind,
        });
    }
    out
}

/// Component indices sorted by canonical key (rooms by id, then doors by
/// endpoint pair). Pooling over components in this order makes reductions
/// independent of the diagram's list order, bit for bit.
pub fn canonical_order(comps: &[Component]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.sort_by_key(|&i| comps[i].canon_key());
    order
}

/// Component adjacency for message passing: a room's neighbors are its
/// connected rooms and the doors between them; a door's neighbors are its
/// incident rooms. The outside node never appears.
#[derive(Clone, Debug)]
pub struct ComponentGraph {
    pub components: Vec<Component>,
    /// Neighbor component indices, sorted by canonical key.
    pub neighbors: Vec<Vec<usize>>,
    /// All other components (not self, not neighbor), same order guarantee.
    pub complements: Vec<Vec<usize>>,
}

impl ComponentGraph {
    pub fn build(d: &BubbleDiagram) -> Self {
        let components = components(d);
        let node_comp = |id: u32| -> Option<usize> {
            components.iter().position(|c| c.source == ComponentSource::Node { id })
        };
        let mut neighbor_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); components.len()];
        for (j, e) in d.edges.iter().enumerate() {
            let edge_comp = components.len() - d.edges.len() + j;
            let ends: Vec<usize> = [e.a, e.b].iter().filter_map(|&id| node_comp(id)).collect();
            for &room in &ends {
                neighbor_sets[edge_comp].insert(room);
                neighbor_sets[room].insert(edge_comp);
            }
            if let [ra, rb] = ends[..] {
                neighbor_sets[ra].insert(rb);
                neighbor_sets[rb].insert(ra);
            }
        }
        let sort_canon = |set: &BTreeSet<usize>| -> Vec<usize> {
            let mut v: Vec<usize> = set.iter().copied().collect();
            v.sort_by_key(|&i| components[i].canon_key());
            v
        };
        let neighbors: Vec<Vec<usize>> = neighbor_sets.iter().map(sort_canon).collect();
        let complements = (0..components.len())
            .map(|i| {
                let all: BTreeSet<usize> = (0..components.len())
                    .filter(|&j| j != i && !neighbor_sets[i].contains(&j))
                    .collect();
                sort_canon(&all)
            })
            .collect();
        ComponentGraph { components, neighbors, complements }
    }
}

/// Neighbor component indices of `c` (see [`ComponentGraph`]).
pub fn neighbors(d: &BubbleDiagram, c: &Component) -> Vec<usize> {
    ComponentGraph::build(d).neighbors[c.index].clone()
}

/// Complement neighbor component indices of `c`: everything that is neither
/// `c` nor one of its neighbors.
pub fn complement_neighbors(d: &BubbleDiagram, c: &Component) -> Vec<usize> {
    ComponentGraph::build(d).complements[c.index].clone()
}

// ── Layout masks ───────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("mask count {masks} does not match component count {components}")]
    MaskCountMismatch { masks: usize, components: usize },
    #[error("mask {index} has {len} elements, expected {expected}")]
    BadMaskLength { index: usize, len: usize, expected: usize },
    #[error("component index {index} out of range ({count} components)")]
    ComponentOutOfRange { index: usize, count: usize },
}

/// Per-component segmentation masks at a fixed square resolution. A pixel is
/// *occupied* when its value is strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutMasks {
    resolution: usize,
    masks: Vec<Vec<f32>>,
}

impl LayoutMasks {
    pub fn new(resolution: usize, masks: Vec<Vec<f32>>) -> Result<Self, GraphError> {
        let expected = resolution * resolution;
        for (index, m) in masks.iter().enumerate() {
            if m.len() != expected {
                return Err(GraphError::BadMaskLength { index, len: m.len(), expected });
            }
        }
        Ok(LayoutMasks { resolution, masks })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn mask(&self, i: usize) -> &[f32] {
        &self.masks[i]
    }

    pub fn masks(&self) -> &[Vec<f32>] {
        &self.masks
    }

    pub fn occupied(&self, i: usize) -> Vec<bool> {
        self.masks[i].iter().map(|&v| v > 0.0).collect()
    }

    pub fn occupied_area(&self, i: usize) -> usize {
        self.masks[i].iter().filter(|&&v| v > 0.0).count()
    }
}

/// Minimum occupied area for a room to count as present: 10 px at 64x64,
/// scaled with the pixel count at other resolutions.
pub fn area_min(resolution: usize) -> usize {
    ((10 * resolution * resolution + 2048) / 4096).max(1)
}

/// Structuring radius for door dilation when reconstructing adjacencies.
pub const DOOR_DILATION: usize = 2;

// ── Diagram extraction ─────────────────────────────────────────────────

struct Extraction {
    /// Per room component: occupied area reached `area_min`.
    present: Vec<bool>,
    /// Per edge (diagram order): reconstructed endpoints, normalized
    /// (min, max), or None when reconstruction failed.
    door_endpoints: Vec<Option<(u32, u32)>>,
}

fn dilate(mask: &[bool], r: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let mut out = vec![false; mask.len()];
    for y in 0..r {
        for x in 0..r {
            if !mask[y * r + x] {
                continue;
            }
            let y0 = y.saturating_sub(radius);
            let x0 = x.saturating_sub(radius);
            for yy in y0..=(y + radius).min(r - 1) {
                for xx in x0..=(x + radius).min(r - 1) {
                    out[yy * r + xx] = true;
                }
            }
        }
    }
    out
}

fn analyze(
    d: &BubbleDiagram,
    masks: &LayoutMasks,
    dilation: usize,
) -> Result<Extraction, GraphError> {
    let comps = components(d);
    if comps.len() != masks.len() {
        return Err(GraphError::MaskCountMismatch { masks: masks.len(), components: comps.len() });
    }
    let r = masks.resolution();
    let n_rooms = comps.iter().filter(|c| matches!(c.source, ComponentSource::Node { .. })).count();
    let min_area = area_min(r);

    let room_occ: Vec<Vec<bool>> = (0..n_rooms).map(|i| masks.occupied(i)).collect();
    let present: Vec<bool> = (0..n_rooms)
        .map(|i| room_occ[i].iter().filter(|&&b| b).count() >= min_area)
        .collect();
    let mut any_room = vec![false; r * r];
    for occ in &room_occ {
        for (a, &b) in any_room.iter_mut().zip(occ) {
            *a |= b;
        }
    }

    let outside = d.outside_id();
    let mut door_endpoints = Vec::with_capacity(d.edges.len());
    for (j, e) in d.edges.iter().enumerate() {
        let door = dilate(&masks.occupied(n_rooms + j), r, dilation);
        // Intersection area with every present room, largest first; ties go
        // to the smaller node id so reconstruction is deterministic.
        let mut hits: Vec<(usize, u32)> = (0..n_rooms)
            .filter(|&i| present[i])
            .filter_map(|i| {
                let ComponentSource::Node { id } = comps[i].source else { return None };
                let area = door.iter().zip(&room_occ[i]).filter(|&(&d, &o)| d && o).count();
                (area > 0).then_some((area, id))
            })
            .collect();
        hits.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));

        let endpoints = match e.kind {
            ComponentType::FrontDoor => {
                let touches_exterior =
                    door.iter().zip(&any_room).any(|(&d, &occ)| d && !occ);
                match (hits.first(), outside, touches_exterior) {
                    (Some(&(_, room)), Some(out_id), true) => {
                        Some((room.min(out_id), room.max(out_id)))
                    }
                    _ => None,
                }
            }
            _ => match hits[..] {
                [(_, x), (_, y), ..] => Some((x.min(y), x.max(y))),
                _ => None,
            },
        };
        door_endpoints.push(endpoints);
    }
    Ok(Extraction { present, door_endpoints })
}

/// Reconstruct a bubble diagram from rendered masks: rooms that meet the
/// minimum area survive as nodes (ids and kinds preserved, the outside node
/// is carried over), and each door is re-attached to the rooms its dilated
/// region overlaps most. Doors that reconstruct onto an already-used node
/// pair are dropped, keeping the result a valid diagram.
pub fn extract_diagram(
    masks: &LayoutMasks,
    d_in: &BubbleDiagram,
    dilation: usize,
) -> Result<BubbleDiagram, GraphError> {
    let ex = analyze(d_in, masks, dilation)?;
    let mut room_idx = 0usize;
    let nodes: Vec<Node> = d_in
        .nodes
        .iter()
        .filter(|n| {
            if n.kind == ComponentType::Outside {
                return true;
            }
            let keep = ex.present[room_idx];
            room_idx += 1;
            keep
        })
        .copied()
        .collect();
    let mut pairs = BTreeSet::new();
    let mut edges = Vec::new();
    for (e, endpoints) in d_in.edges.iter().zip(&ex.door_endpoints) {
        if let Some((a, b)) = *endpoints {
            if pairs.insert((a, b)) {
                edges.push(Edge { a, b, kind: e.kind });
            }
        }
    }
    Ok(BubbleDiagram { nodes, edges })
}

/// Edit distance between two diagrams whose nodes correspond by id: node
/// insertions/deletions, edge insertions/deletions, and endpoint or type
/// substitutions (cost 1 each). With the correspondence fixed this reduces
/// to the symmetric difference of node ids plus, over the non-shared edges,
/// the larger side of the exchange (pairing a missing edge with a spurious
/// one is a single substitution).
pub fn compatibility_distance(d_in: &BubbleDiagram, d_out: &BubbleDiagram) -> usize {
    let ids = |d: &BubbleDiagram| -> BTreeSet<u32> { d.nodes.iter().map(|n| n.id).collect() };
    let (na, nb) = (ids(d_in), ids(d_out));
    let node_edits = na.symmetric_difference(&nb).count();

    let keys = |d: &BubbleDiagram| -> BTreeSet<(u32, u32, u8)> {
        d.edges
            .iter()
            .map(|e| {
                let (x, y) = e.pair();
                (x, y, e.kind.code())
            })
            .collect()
    };
    let (ea, eb) = (keys(d_in), keys(d_out));
    let missing = ea.difference(&eb).count();
    let spurious = eb.difference(&ea).count();
    node_edits + missing.max(spurious)
}

/// Compatibility flags for every component at once (shares one analysis).
/// A door is compatible when it reconstructs onto exactly its diagram
/// endpoints; a room when it is present and all its doors reconstruct.
pub fn compatibility_flags(
    d_in: &BubbleDiagram,
    masks: &LayoutMasks,
) -> Result<Vec<bool>, GraphError> {
    let comps = components(d_in);
    let ex = analyze(d_in, masks, DOOR_DILATION)?;
    let door_ok: Vec<bool> = d_in
        .edges
        .iter()
        .zip(&ex.door_endpoints)
        .map(|(e, got)| {
            let (a, b) = e.pair();
            *got == Some((a, b))
        })
        .collect();
    Ok(comps
        .iter()
        .map(|c| match c.source {
            ComponentSource::Edge { .. } => door_ok[c.index - ex.present.len()],
            ComponentSource::Node { id } => {
                ex.present[c.index]
                    && d_in
                        .edges
                        .iter()
                        .enumerate()
                        .filter(|(_, e)| e.a == id || e.b == id)
                        .all(|(j, _)| door_ok[j])
            }
        })
        .collect())
}

/// Is component `c`'s realized geometry consistent with its diagram role?
pub fn component_compatible(
    d_in: &BubbleDiagram,
    masks: &LayoutMasks,
    c: usize,
) -> Result<bool, GraphError> {
    let flags = compatibility_flags(d_in, masks)?;
    flags
        .get(c)
        .copied()
        .ok_or(GraphError::ComponentOutOfRange { index: c, count: flags.len() })
}
