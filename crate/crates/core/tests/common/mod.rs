//! Shared oracles and helpers for the acceptance suite: an edit-search
//! oracle for the diagram distance, finite-difference machinery, and
//! byte-level process/directory comparison for CLI reproducibility.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::path::Path;
use std::process::{Command, Output};

use layout_refine::graphs::BubbleDiagram;
use layout_refine::model::ParamSet;

/// Same mix as the library's per-sample seed derivation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

// ── Edit-search oracle ──────────────────────────────────────────────────

type NodeSet = BTreeSet<u32>;
type EdgeSet = BTreeSet<(u32, u32, u8)>;

fn node_set(d: &BubbleDiagram) -> NodeSet {
    d.nodes.iter().map(|n| n.id).collect()
}

fn edge_set(d: &BubbleDiagram) -> EdgeSet {
    d.edges
        .iter()
        .map(|e| {
            let (a, b) = e.pair();
            (a, b, e.kind.code())
        })
        .collect()
}

/// Minimum number of single edits turning `from` into `to`, found by
/// uniform-cost breadth-first search. Edits: insert node, delete an
/// isolated node, insert edge (endpoints present), delete edge, and
/// rewrite one edge's endpoints/type in place. Nodes correspond by id.
///
/// Moves that provably never shorten a script are pruned: inserting a
/// node or edge absent from the target (it would only be removed again)
/// and deleting one present in the target (it would only be re-added).
pub fn edit_search_distance(from: &BubbleDiagram, to: &BubbleDiagram) -> usize {
    let goal = (node_set(to), edge_set(to));
    let start = (node_set(from), edge_set(from));
    if start == goal {
        return 0;
    }
    let mut seen: HashSet<(NodeSet, EdgeSet)> = HashSet::new();
    let mut queue: VecDeque<((NodeSet, EdgeSet), usize)> = VecDeque::new();
    seen.insert(start.clone());
    queue.push_back((start, 0));
    while let Some(((nodes, edges), cost)) = queue.pop_front() {
        let mut next_states: Vec<(NodeSet, EdgeSet)> = Vec::new();
        for &id in goal.0.difference(&nodes) {
            let mut n = nodes.clone();
            n.insert(id);
            next_states.push((n, edges.clone()));
        }
        for &id in nodes.difference(&goal.0) {
            if edges.iter().any(|&(a, b, _)| a == id || b == id) {
                continue;
            }
            let mut n = nodes.clone();
            n.remove(&id);
            next_states.push((n, edges.clone()));
        }
        let spurious: Vec<_> = edges.difference(&goal.1).copied().collect();
        let missing: Vec<_> =
            goal.1.difference(&edges).filter(|&&(a, b, _)| nodes.contains(&a) && nodes.contains(&b)).copied().collect();
        for &e in &missing {
            let mut s = edges.clone();
            s.insert(e);
            next_states.push((nodes.clone(), s));
        }
        for &e in &spurious {
            let mut s = edges.clone();
            s.remove(&e);
            next_states.push((nodes.clone(), s));
            for &f in &missing {
                let mut s = edges.clone();
                s.remove(&e);
                s.insert(f);
                next_states.push((nodes.clone(), s));
            }
        }
        for state in next_states {
            if state == goal {
                return cost + 1;
            }
            if seen.insert(state.clone()) {
                queue.push_back((state, cost + 1));
            }
        }
    }
    unreachable!("the goal is reachable by deleting and inserting everything")
}

// ── Finite differences ──────────────────────────────────────────────────

/// Central difference of `f` in one coordinate of `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f32]) -> f32, x: &mut [f32], i: usize, h: f32) -> f32 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Richardson-extrapolated central difference (cancels the O(h^2) term).
pub fn richardson_diff(f: &mut dyn FnMut(&[f32]) -> f32, x: &mut [f32], i: usize, h: f32) -> f32 {
    (4.0 * central_diff(f, x, i, h / 2.0) - central_diff(f, x, i, h)) / 3.0
}

/// Rescale a parameter set to all-positive weights with unit-ish layer gain
/// and positive biases. Every preactivation is then bounded away from zero,
/// so no activation kink sits inside a finite-difference window and the
/// losses are locally smooth in the parameters.
pub fn positivize(set: &mut ParamSet) {
    for (name, t) in set.names.iter().zip(set.tensors.iter_mut()) {
        if name.ends_with(".b") {
            t.data.fill(0.05);
        } else {
            let fan_in: usize = t.shape[1..].iter().product();
            let s = 2.0 / (6.0 * fan_in as f32).sqrt();
            for v in &mut t.data {
                *v = v.abs() * s;
            }
        }
    }
}

// ── CLI process + directory helpers ─────────────────────────────────────

pub const BIN: &str = env!("CARGO_BIN_EXE_layout-refine");

/// Run the CLI with a clean seed environment; panic on spawn failure.
pub fn run_cli(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("LAYOUT_REFINE_SEED")
        .output()
        .expect("spawn CLI")
}

pub fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed ({}):\n{}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every file under `dir` (recursively) as relative path → bytes.
pub fn dir_snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("read_dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                out.insert(rel.to_string_lossy().into_owned(), std::fs::read(&path).expect("read file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Assert two output directories hold byte-identical file trees.
pub fn assert_same_tree(a: &Path, b: &Path, what: &str) {
    let (sa, sb) = (dir_snapshot(a), dir_snapshot(b));
    let (ka, kb): (Vec<_>, Vec<_>) = (sa.keys().collect(), sb.keys().collect());
    assert_eq!(ka, kb, "{what}: file sets differ");
    for (name, bytes) in &sa {
        assert_eq!(bytes, &sb[name], "{what}: {name} differs between runs");
    }
}
