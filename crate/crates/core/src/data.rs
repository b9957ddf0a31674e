//! Synthetic floorplan dataset: procedural generation, disk persistence,
//! room-count folds, and color rasterization.
//!
//! Samples are generated by recursive axis-aligned slicing of an inset
//! footprint, with one-pixel walls between rooms, occasional L-shaped room
//! merges, doors straddling shared walls, and one front door through the
//! exterior wall. Every emitted sample is checked to reconstruct its own
//! diagram exactly via [`extract_diagram`]; draws that fail any check are
//! rejected and regenerated deterministically.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::{
    compatibility_flags, components, extract_diagram, BubbleDiagram, ComponentSource,
    ComponentType, Edge, LayoutMasks, Node, DOOR_DILATION, TYPE_COUNT,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("sample {sample}: {detail}")]
    Malformed { sample: String, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("fold {held_out}: {side} split is empty")]
    EmptyFold { held_out: usize, side: &'static str },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// One floorplan: its bubble diagram and ground-truth masks (values ±1),
/// ordered as [`components`] of the diagram.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub diagram: BubbleDiagram,
    pub gt_masks: LayoutMasks,
    pub sample_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub resolution: usize,
}

impl Dataset {
    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == id)
    }
}

/// A train/test split holding out one room-count group.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSpec {
    pub held_out_room_count: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

// ── Generation ─────────────────────────────────────────────────────────

struct GenParams {
    res: usize,
    /// Smallest room side length after a slice.
    min_side: usize,
    /// Door clearance from the ends of a wall run.
    margin: usize,
    door_min: usize,
    door_max: usize,
    /// Largest footprint inset per side.
    inset_max: usize,
}

impl GenParams {
    fn for_resolution(res: usize) -> Self {
        let s = res as f64 / 64.0;
        let door_min = ((6.0 * s).round() as usize).max(3);
        GenParams {
            res,
            min_side: if res >= 64 { 5 } else { 4 },
            margin: ((2.0 * s).round() as usize).max(1),
            door_min,
            door_max: ((10.0 * s).round() as usize).max(door_min),
            inset_max: (res / 8).max(2),
        }
    }

    fn fit_len(&self) -> usize {
        self.door_min + 2 * self.margin
    }
}

#[derive(Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn w(&self) -> usize {
        self.x1 - self.x0
    }
    fn h(&self) -> usize {
        self.y1 - self.y0
    }
    fn area(&self) -> usize {
        self.w() * self.h()
    }
}

type Mask = Vec<bool>;

/// A straight stretch of wall (or exterior boundary) a door can sit on.
/// The door occupies the three columns (rows) `center−1 ..= center+1`
/// across the wall, spanning `lo ..= hi` along it.
#[derive(Clone, Copy, Debug)]
struct Run {
    vertical: bool,
    center: usize,
    lo: usize,
    hi: usize,
}

impl Run {
    fn len(&self) -> usize {
        self.hi - self.lo + 1
    }
}

fn collect_runs(mut hits: Vec<(usize, usize, bool)>) -> Vec<Run> {
    // hits: (center, along, vertical) pixels; group by (center, vertical)
    // into maximal consecutive `along` stretches.
    hits.sort();
    let mut runs: Vec<Run> = Vec::new();
    for (center, along, vertical) in hits {
        match runs.last_mut() {
            Some(r)
                if r.vertical == vertical && r.center == center && r.hi + 1 == along =>
            {
                r.hi = along;
            }
            _ => runs.push(Run { vertical, center, lo: along, hi: along }),
        }
    }
    runs
}

/// Wall runs between rooms `a` and `b`: unoccupied pixels with `a` on one
/// side and `b` directly opposite.
fn wall_runs(a: &Mask, b: &Mask, any: &Mask, res: usize) -> Vec<Run> {
    let at = |m: &Mask, y: usize, x: usize| m[y * res + x];
    let mut v = Vec::new();
    let mut h = Vec::new();
    for y in 0..res {
        for x in 0..res {
            if any[y * res + x] {
                continue;
            }
            if x >= 1 && x + 1 < res {
                let lr = at(a, y, x - 1) && at(b, y, x + 1);
                let rl = at(b, y, x - 1) && at(a, y, x + 1);
                if lr || rl {
                    v.push((x, y, true));
                }
            }
            if y >= 1 && y + 1 < res {
                let tb = at(a, y - 1, x) && at(b, y + 1, x);
                let bt = at(b, y - 1, x) && at(a, y + 1, x);
                if tb || bt {
                    h.push((y, x, false));
                }
            }
        }
    }
    let mut runs = collect_runs(v);
    runs.extend(collect_runs(h));
    runs
}

/// Exterior boundary runs of room `r`: edge pixels with at least two clear
/// (room-free) pixels beyond them, so a front door can straddle the wall.
fn exterior_runs(r: &Mask, any: &Mask, res: usize) -> Vec<Run> {
    let at = |m: &Mask, y: usize, x: usize| m[y * res + x];
    let mut v = Vec::new();
    let mut h = Vec::new();
    for y in 0..res {
        for x in 0..res {
            if !at(r, y, x) {
                continue;
            }
            // Left edge facing open space, with the door's inner column in-room.
            if x >= 2 && !at(any, y, x - 1) && !at(any, y, x - 2) && x + 1 < res && at(r, y, x + 1)
            {
                v.push((x, y, true));
            }
            if x + 2 < res && !at(any, y, x + 1) && !at(any, y, x + 2) && x >= 1 && at(r, y, x - 1)
            {
                v.push((x, y, true));
            }
            if y >= 2 && !at(any, y - 1, x) && !at(any, y - 2, x) && y + 1 < res && at(r, y + 1, x)
            {
                h.push((y, x, false));
            }
            if y + 2 < res && !at(any, y + 1, x) && !at(any, y + 2, x) && y >= 1 && at(r, y - 1, x)
            {
                h.push((y, x, false));
            }
        }
    }
    let mut runs = collect_runs(v);
    runs.extend(collect_runs(h));
    runs
}

fn paint_door(run: &Run, start: usize, len: usize, res: usize) -> Mask {
    let mut m = vec![false; res * res];
    for along in start..start + len {
        for across in run.center - 1..=run.center + 1 {
            let (y, x) = if run.vertical { (along, across) } else { (across, along) };
            m[y * res + x] = true;
        }
    }
    m
}

fn overlaps(a: &Mask, b: &Mask) -> bool {
    a.iter().zip(b).any(|(&x, &y)| x && y)
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let r = self.find(self.0[i]);
            self.0[i] = r;
            r
        } else {
            i
        }
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
        ra != rb
    }
}

/// Pick a run, length, and start for one door and paint it, rejecting any
/// placement that touches a room outside `own` or an existing door.
fn place_door(
    rng: &mut ChaCha8Rng,
    p: &GenParams,
    runs: &[Run],
    own: &[usize],
    rooms: &[Mask],
    doors: &mut Vec<Mask>,
) -> Option<()> {
    let run = runs.choose(rng)?;
    let len = rng.gen_range(p.door_min..=p.door_max.min(run.len() - 2 * p.margin));
    let start = rng.gen_range(run.lo + p.margin..=run.hi + 1 - p.margin - len);
    let door = paint_door(run, start, len, p.res);
    for (k, room) in rooms.iter().enumerate() {
        if !own.contains(&k) && overlaps(&door, room) {
            return None;
        }
    }
    if doors.iter().any(|d| overlaps(&door, d)) {
        return None;
    }
    doors.push(door);
    Some(())
}

fn try_generate(
    rng: &mut ChaCha8Rng,
    room_count: usize,
    p: &GenParams,
    sample_id: String,
) -> Option<Sample> {
    let res = p.res;

    // Footprint: the canvas minus a random inset on each side.
    let inset = |rng: &mut ChaCha8Rng| rng.gen_range(2..=p.inset_max);
    let fp = Rect {
        x0: inset(rng),
        y0: inset(rng),
        x1: res - inset(rng),
        y1: res - inset(rng),
    };

    // Slice to `room_count` leaves, plus one extra when we will merge a pair
    // into an L-shaped room.
    let merges = usize::from(rng.gen_bool(0.35));
    let target = room_count + merges;
    let mut leaves = vec![fp];
    while leaves.len() < target {
        let splittable = |r: &Rect| r.w().max(r.h()) >= 2 * p.min_side + 1;
        let pick = leaves
            .iter()
            .enumerate()
            .filter(|(_, r)| splittable(r))
            .max_by_key(|(_, r)| r.area())
            .map(|(i, _)| i)?;
        let r = leaves[pick];
        let t = rng.gen_range(0.35..0.65);
        let horizontal_cut = r.h() > r.w();
        let extent = if horizontal_cut { r.h() } else { r.w() };
        let c = ((t * extent as f64).round() as usize).clamp(p.min_side, extent - 1 - p.min_side);
        let (a, b) = if horizontal_cut {
            (Rect { y1: r.y0 + c, ..r }, Rect { y0: r.y0 + c + 1, ..r })
        } else {
            (Rect { x1: r.x0 + c, ..r }, Rect { x0: r.x0 + c + 1, ..r })
        };
        leaves[pick] = a;
        leaves.push(b);
    }

    let mut rooms: Vec<Mask> = leaves
        .iter()
        .map(|r| {
            let mut m = vec![false; res * res];
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    m[y * res + x] = true;
                }
            }
            m
        })
        .collect();
    let any_of = |rooms: &[Mask]| -> Mask {
        let mut any = vec![false; res * res];
        for r in rooms {
            for (a, &v) in any.iter_mut().zip(r) {
                *a |= v;
            }
        }
        any
    };

    if merges == 1 {
        // Merge one adjacent pair, absorbing the wall between them so the
        // merged room is connected (an L when extents differ).
        let any = any_of(&rooms);
        let mut pairs = Vec::new();
        for i in 0..rooms.len() {
            for j in i + 1..rooms.len() {
                if !wall_runs(&rooms[i], &rooms[j], &any, res).is_empty() {
                    pairs.push((i, j));
                }
            }
        }
        let &(i, j) = pairs.choose(rng)?;
        let mut merged = rooms[i].clone();
        for (m, &v) in merged.iter_mut().zip(&rooms[j]) {
            *m |= v;
        }
        for run in wall_runs(&rooms[i], &rooms[j], &any, res) {
            for along in run.lo..=run.hi {
                let (y, x) = if run.vertical { (along, run.center) } else { (run.center, along) };
                merged[y * res + x] = true;
            }
        }
        rooms[i] = merged;
        rooms.remove(j);
    }
    debug_assert_eq!(rooms.len(), room_count);
    let any = any_of(&rooms);

    // Room adjacency usable for a door: some wall run long enough to hold a
    // door plus clearance at both ends.
    let mut usable: BTreeMap<(usize, usize), Vec<Run>> = BTreeMap::new();
    for i in 0..room_count {
        for j in i + 1..room_count {
            let runs: Vec<Run> = wall_runs(&rooms[i], &rooms[j], &any, res)
                .into_iter()
                .filter(|r| r.len() >= p.fit_len())
                .collect();
            if !runs.is_empty() {
                usable.insert((i, j), runs);
            }
        }
    }

    // Spanning tree over usable adjacencies, then extra doors at p=0.3.
    let mut order: Vec<(usize, usize)> = usable.keys().copied().collect();
    order.shuffle(rng);
    let mut dsu = DisjointSet((0..room_count).collect());
    let mut chosen = Vec::new();
    let mut rest = Vec::new();
    for pair in order {
        if dsu.union(pair.0, pair.1) {
            chosen.push(pair);
        } else {
            rest.push(pair);
        }
    }
    if chosen.len() != room_count - 1 {
        return None; // adjacency graph disconnected
    }
    for pair in rest {
        if rng.gen_bool(0.3) {
            chosen.push(pair);
        }
    }

    let mut door_masks: Vec<Mask> = Vec::new();
    for &(i, j) in &chosen {
        place_door(rng, p, &usable[&(i, j)], &[i, j], &rooms, &mut door_masks)?;
    }

    // Types: the room with the longest exterior stretch becomes the living
    // room (it hosts the front door), one kitchen and at least one bedroom
    // are guaranteed, the rest are sampled.
    let ext_runs: Vec<Vec<Run>> = rooms.iter().map(|r| exterior_runs(r, &any, res)).collect();
    let living = (0..room_count)
        .max_by_key(|&i| ext_runs[i].iter().map(Run::len).max().unwrap_or(0))?;
    if ext_runs[living].iter().map(Run::len).max().unwrap_or(0) < p.fit_len() {
        return None;
    }
    let mut kinds = vec![ComponentType::Unknown; room_count];
    kinds[living] = ComponentType::LivingRoom;
    let mut remaining: Vec<usize> = (0..room_count).filter(|&i| i != living).collect();
    remaining.shuffle(rng);
    kinds[remaining[0]] = ComponentType::Kitchen;
    kinds[remaining[1]] = ComponentType::Bedroom;
    let pool = [
        ComponentType::Bedroom,
        ComponentType::Balcony,
        ComponentType::Entrance,
        ComponentType::DiningRoom,
        ComponentType::StudyRoom,
        ComponentType::Storage,
        ComponentType::Unknown,
    ];
    for &i in &remaining[2..] {
        kinds[i] = *pool.choose(rng).unwrap();
    }

    // Front door: through the exterior wall of the living room or an entrance.
    let mut porch: Vec<usize> = (0..room_count)
        .filter(|&i| {
            (i == living || kinds[i] == ComponentType::Entrance)
                && ext_runs[i].iter().any(|r| r.len() >= p.fit_len())
        })
        .collect();
    porch.shuffle(rng);
    let front_room = *porch.first()?;
    let fit: Vec<Run> =
        ext_runs[front_room].iter().filter(|r| r.len() >= p.fit_len()).copied().collect();
    place_door(rng, p, &fit, &[front_room], &rooms, &mut door_masks)?;

    // Assemble diagram + masks in component order: rooms, then doors.
    let outside_id = room_count as u32;
    let mut nodes: Vec<Node> =
        (0..room_count).map(|i| Node { id: i as u32, kind: kinds[i] }).collect();
    nodes.push(Node { id: outside_id, kind: ComponentType::Outside });
    let mut edges: Vec<Edge> = chosen
        .iter()
        .map(|&(i, j)| Edge { a: i as u32, b: j as u32, kind: ComponentType::InteriorDoor })
        .collect();
    edges.push(Edge { a: front_room as u32, b: outside_id, kind: ComponentType::FrontDoor });
    let diagram = BubbleDiagram { nodes, edges };

    let to_f32 = |m: &Mask| -> Vec<f32> { m.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect() };
    let mut masks: Vec<Vec<f32>> = rooms.iter().map(to_f32).collect();
    masks.extend(door_masks.iter().map(to_f32));
    let gt_masks = LayoutMasks::new(res, masks).ok()?;

    // Reject any draw that fails its own reconstruction checks.
    if !diagram.validate().is_empty() {
        return None;
    }
    for i in 0..room_count {
        for j in i + 1..room_count {
            if overlaps(&rooms[i], &rooms[j]) {
                return None;
            }
        }
    }
    if extract_diagram(&gt_masks, &diagram, DOOR_DILATION).ok()? != diagram {
        return None;
    }
    if !compatibility_flags(&diagram, &gt_masks).ok()?.iter().all(|&f| f) {
        return None;
    }
    Some(Sample { diagram, gt_masks, sample_id })
}

/// Generate one floorplan deterministically from `(seed, room_count)`.
/// Infeasible draws are retried up to 100 times per seed, after which the
/// seed is bumped by one — still fully deterministic.
pub fn generate_synthetic(
    seed: u64,
    room_count: usize,
    resolution: usize,
) -> Result<Sample, DataError> {
    if !(5..=8).contains(&room_count) {
        return Err(DataError::InvalidArg(format!("room_count {room_count} not in 5..=8")));
    }
    if resolution < 16 {
        return Err(DataError::InvalidArg(format!("resolution {resolution} below minimum 16")));
    }
    let p = GenParams::for_resolution(resolution);
    let sample_id = format!("s{seed:016x}r{room_count}");
    let mut s = seed;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        for _ in 0..100 {
            if let Some(sample) = try_generate(&mut rng, room_count, &p, sample_id.clone()) {
                return Ok(sample);
            }
        }
        s = s.wrapping_add(1);
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generate `per_room_count` samples for each room count in 5..=8. Each
/// sample's seed derives from `(seed, room_count, index)` alone, so results
/// are identical for any `workers` value.
pub fn generate_dataset(
    seed: u64,
    per_room_count: usize,
    resolution: usize,
    workers: usize,
) -> Result<Dataset, DataError> {
    let jobs: Vec<(u64, usize)> = (5..=8)
        .flat_map(|rc| {
            (0..per_room_count)
                .map(move |i| (splitmix64(seed ^ ((rc as u64) << 32) ^ i as u64), rc))
        })
        .collect();
    if jobs.is_empty() {
        return Ok(Dataset { samples: Vec::new(), resolution });
    }
    let workers = workers.max(1).min(jobs.len());
    let mut samples: Vec<Option<Sample>> = vec![None; jobs.len()];
    let chunk = jobs.len().div_ceil(workers);
    std::thread::scope(|scope| -> Result<(), DataError> {
        let mut handles = Vec::new();
        for (slot, work) in samples.chunks_mut(chunk).zip(jobs.chunks(chunk)) {
            handles.push(scope.spawn(move || -> Result<(), DataError> {
                for (out, &(s, rc)) in slot.iter_mut().zip(work) {
                    *out = Some(generate_synthetic(s, rc, resolution)?);
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("generator thread panicked")?;
        }
        Ok(())
    })?;
    Ok(Dataset { samples: samples.into_iter().map(Option::unwrap).collect(), resolution })
}

// ── Persistence ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeJson {
    id: u32,
    #[serde(rename = "type")]
    kind: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeJson {
    a: u32,
    b: u32,
    #[serde(rename = "type")]
    kind: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleJson {
    nodes: Vec<NodeJson>,
    edges: Vec<EdgeJson>,
    masks: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestJson {
    resolution: usize,
    samples: Vec<String>,
}

fn component_key(source: ComponentSource) -> String {
    match source {
        ComponentSource::Node { id } => format!("n{id}"),
        ComponentSource::Edge { a, b } => format!("e{a}_{b}"),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Write a dataset as a directory: `manifest.json` plus one JSON file per
/// sample with base64-encoded masks (byte 255 ⇔ occupied). All files are
/// written atomically; the manifest is written last.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for s in &ds.samples {
        let comps = components(&s.diagram);
        let masks: BTreeMap<String, String> = comps
            .iter()
            .map(|c| {
                let bytes: Vec<u8> =
                    s.gt_masks.mask(c.index).iter().map(|&v| if v > 0.0 { 255 } else { 0 }).collect();
                (component_key(c.source), B64.encode(bytes))
            })
            .collect();
        let json = SampleJson {
            nodes: s
                .diagram
                .nodes
                .iter()
                .map(|n| NodeJson { id: n.id, kind: n.kind.code() })
                .collect(),
            edges: s
                .diagram
                .edges
                .iter()
                .map(|e| EdgeJson { a: e.a, b: e.b, kind: e.kind.code() })
                .collect(),
            masks,
        };
        let body = serde_json::to_vec(&json).expect("sample serialization cannot fail");
        write_atomic(&dir.join(format!("{}.json", s.sample_id)), &body)?;
    }
    let manifest = ManifestJson {
        resolution: ds.resolution,
        samples: ds.samples.iter().map(|s| s.sample_id.clone()).collect(),
    };
    let body = serde_json::to_vec_pretty(&manifest).expect("manifest serialization cannot fail");
    write_atomic(&dir.join("manifest.json"), &body)
}

/// Read a dataset directory written by [`save_dataset`] (or any conforming
/// producer). Every sample is fully validated; the first defect aborts the
/// load with an error naming the sample and field.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join("manifest.json");
    let body = fs::read(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: ManifestJson = serde_json::from_slice(&body).map_err(|e| {
        DataError::Malformed { sample: "manifest.json".into(), detail: e.to_string() }
    })?;
    let mut seen = std::collections::BTreeSet::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for id in &manifest.samples {
        if !seen.insert(id.clone()) {
            return Err(DataError::Malformed {
                sample: id.clone(),
                detail: "duplicate sample id in manifest".into(),
            });
        }
        samples.push(load_sample(dir, id, manifest.resolution)?);
    }
    Ok(Dataset { samples, resolution: manifest.resolution })
}

fn load_sample(dir: &Path, id: &str, resolution: usize) -> Result<Sample, DataError> {
    let bad = |detail: String| DataError::Malformed { sample: id.to_string(), detail };
    let path = dir.join(format!("{id}.json"));
    let body = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let json: SampleJson = serde_json::from_slice(&body).map_err(|e| bad(e.to_string()))?;

    let kind = |code: u8, what: &str| {
        ComponentType::from_code(code)
            .ok_or_else(|| bad(format!("{what}: unknown type code {code}")))
    };
    let mut nodes = Vec::new();
    for n in &json.nodes {
        nodes.push(Node { id: n.id, kind: kind(n.kind, &format!("node {}", n.id))? });
    }
    let mut edges = Vec::new();
    for e in &json.edges {
        edges.push(Edge {
            a: e.a,
            b: e.b,
            kind: kind(e.kind, &format!("edge ({}, {})", e.a, e.b))?,
        });
    }
    let diagram = BubbleDiagram { nodes, edges };
    let violations = diagram.validate();
    if !violations.is_empty() {
        return Err(bad(format!("invalid diagram: {}", violations[0])));
    }
    let rc = diagram.room_count();
    if !(5..=8).contains(&rc) {
        return Err(bad(format!("room count {rc} not in 5..=8")));
    }

    let comps = components(&diagram);
    let expected = resolution * resolution;
    let mut masks = Vec::with_capacity(comps.len());
    for c in &comps {
        let key = component_key(c.source);
        let enc = json.masks.get(&key).ok_or_else(|| bad(format!("masks: missing key {key}")))?;
        let bytes = B64.decode(enc).map_err(|e| bad(format!("masks.{key}: {e}")))?;
        if bytes.len() != expected {
            return Err(bad(format!(
                "masks.{key}: {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mut mask = Vec::with_capacity(expected);
        for &b in &bytes {
            match b {
                255 => mask.push(1.0),
                0 => mask.push(-1.0),
                other => return Err(bad(format!("masks.{key}: byte value {other} not 0 or 255"))),
            }
        }
        masks.push(mask);
    }
    if json.masks.len() != comps.len() {
        let extra = json
            .masks
            .keys()
            .find(|k| !comps.iter().any(|c| component_key(c.source) == **k))
            .cloned()
            .unwrap_or_default();
        return Err(bad(format!("masks: unexpected key {extra}")));
    }
    let gt_masks = LayoutMasks::new(resolution, masks).map_err(|e| bad(e.to_string()))?;
    Ok(Sample { diagram, gt_masks, sample_id: id.to_string() })
}

// ── Folds ──────────────────────────────────────────────────────────────

/// Hold out every sample with exactly `held_out` rooms as the test split.
pub fn kfold_split(ds: &Dataset, held_out: usize) -> Result<FoldSpec, DataError> {
    if !(5..=8).contains(&held_out) {
        return Err(DataError::InvalidArg(format!("held-out room count {held_out} not in 5..=8")));
    }
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for s in &ds.samples {
        if s.diagram.room_count() == held_out {
            test_ids.push(s.sample_id.clone());
        } else {
            train_ids.push(s.sample_id.clone());
        }
    }
    if test_ids.is_empty() {
        return Err(DataError::EmptyFold { held_out, side: "test" });
    }
    if train_ids.is_empty() {
        return Err(DataError::EmptyFold { held_out, side: "train" });
    }
    Ok(FoldSpec { held_out_room_count: held_out, train_ids, test_ids })
}

// ── Rasterization ──────────────────────────────────────────────────────

/// RGB color per component type code, in code order: living room, kitchen,
/// bedroom, balcony, entrance, dining room, study room, storage, unknown,
/// outside, interior door, front door.
pub const COLOR_TABLE: [[u8; 3]; TYPE_COUNT] = [
    [238, 77, 77],
    [198, 124, 123],
    [255, 210, 116],
    [190, 190, 190],
    [123, 167, 121],
    [232, 122, 144],
    [255, 140, 105],
    [31, 132, 155],
    [114, 113, 113],
    [255, 255, 255],
    [211, 162, 199],
    [120, 90, 103],
];

/// An 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub rgb: Vec<u8>,
}

impl Image {
    /// Encode as a binary portable pixmap (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Paint masks over a white canvas in component order (rooms first, doors
/// last), each in its type color; on overlap, the later component wins.
pub fn rasterize(masks: &LayoutMasks, d: &BubbleDiagram) -> Result<Image, crate::graphs::GraphError> {
    let comps = components(d);
    if comps.len() != masks.len() {
        return Err(crate::graphs::GraphError::MaskCountMismatch {
            masks: masks.len(),
            components: comps.len(),
        });
    }
    let r = masks.resolution();
    let mut rgb = vec![255u8; r * r * 3];
    for c in &comps {
        let color = COLOR_TABLE[c.kind.code() as usize];
        for (px, &v) in masks.mask(c.index).iter().enumerate() {
            if v > 0.0 {
                rgb[px * 3..px * 3 + 3].copy_from_slice(&color);
            }
        }
    }
    Ok(Image { width: r, height: r, rgb })
}
