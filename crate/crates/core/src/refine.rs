//! Iterative inference: run the generator repeatedly, feeding each
//! iteration's binarized masks back as the next iteration's conditions for
//! the components a refinement scheme selects.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::rasterize;
use crate::graphs::{
    compatibility_flags, BubbleDiagram, ComponentGraph, ComponentType, GraphError, LayoutMasks,
    TYPE_COUNT,
};
use crate::model::{generator_forward, ConditionSet, GeneratorParams, ModelConfig, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("invalid refinement scheme: {0}")]
    Config(String),
    #[error("invalid diagram: {0:?}")]
    Diagram(Vec<crate::graphs::Violation>),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> RefineError {
    RefineError::Io { path: path.to_path_buf(), source }
}

// ── Schemes ────────────────────────────────────────────────────────────

/// When a component's previous mask is passed back as a condition.
///
/// Per-type schedule entries index by component type code and mean "pass
/// from iteration `entry + 1` on": `Static(v)` passes at iteration `k` iff
/// `k > v[type]`. `Dynamic` keeps two schedules and consults the component's
/// current compatibility to choose between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemePolicy {
    Heuristic { p: f64 },
    Static { v: [u8; TYPE_COUNT] },
    Dynamic { t: [u8; TYPE_COUNT], u: [u8; TYPE_COUNT] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementScheme {
    pub policy: SchemePolicy,
    pub iterations: usize,
}

pub const DEFAULT_ITERATIONS: usize = 10;

impl RefinementScheme {
    pub fn heuristic(p: f64) -> Self {
        RefinementScheme { policy: SchemePolicy::Heuristic { p }, iterations: DEFAULT_ITERATIONS }
    }

    pub fn fixed(v: [u8; TYPE_COUNT]) -> Self {
        RefinementScheme { policy: SchemePolicy::Static { v }, iterations: DEFAULT_ITERATIONS }
    }

    pub fn dynamic(t: [u8; TYPE_COUNT], u: [u8; TYPE_COUNT]) -> Self {
        RefinementScheme { policy: SchemePolicy::Dynamic { t, u }, iterations: DEFAULT_ITERATIONS }
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        let fail = |d: String| Err(RefineError::Config(d));
        if self.iterations == 0 {
            return fail("iterations must be >= 1".into());
        }
        let check = |name: &str, v: &[u8; TYPE_COUNT]| {
            if let Some(e) = v.iter().find(|&&e| !(1..=10).contains(&e)) {
                return Err(RefineError::Config(format!("{name} entry {e} outside [1, 10]")));
            }
            Ok(())
        };
        match &self.policy {
            SchemePolicy::Heuristic { p } => {
                if !(0.0..=1.0).contains(p) {
                    return fail(format!("probability {p} outside [0, 1]"));
                }
            }
            SchemePolicy::Static { v } => check("schedule", v)?,
            SchemePolicy::Dynamic { t, u } => {
                check("compatible schedule", t)?;
                check("incompatible schedule", u)?;
            }
        }
        Ok(())
    }
}

/// Decide whether a component's previous mask is passed as a condition at
/// iteration `k` (iteration 1 never conditions, so `k >= 2`).
pub fn scheme_decision(
    s: &RefinementScheme,
    kind: ComponentType,
    k: usize,
    compatible: bool,
    rng: &mut impl Rng,
) -> bool {
    assert!(k >= 2, "conditioning decisions start at iteration 2");
    let code = kind.code() as usize;
    match &s.policy {
        SchemePolicy::Heuristic { p } => rng.gen_bool(*p),
        SchemePolicy::Static { v } => k > v[code] as usize,
        SchemePolicy::Dynamic { t, u } => {
            if compatible {
                k > t[code] as usize
            } else {
                k > u[code] as usize
            }
        }
    }
}

// ── Refinement ─────────────────────────────────────────────────────────

/// Everything one refinement run produced, iteration by iteration.
#[derive(Clone, Debug)]
pub struct RefinementTrajectory {
    /// Generated masks per iteration.
    pub masks: Vec<LayoutMasks>,
    /// The condition set used to PRODUCE that iteration (all-unspecified
    /// for iteration 1).
    pub conditions: Vec<ConditionSet>,
    /// Which components were conditioned at that iteration.
    pub decisions: Vec<Vec<bool>>,
    /// Per-component compatibility of that iteration's masks.
    pub compatibility: Vec<Vec<bool>>,
}

impl RefinementTrajectory {
    pub fn final_masks(&self) -> &LayoutMasks {
        self.masks.last().expect("trajectory has at least one iteration")
    }
}

/// Threshold masks at 0 into {-1, +1}, the value range of training masks.
pub fn binarize_masks(m: &LayoutMasks) -> LayoutMasks {
    let data = m
        .masks()
        .iter()
        .map(|v| v.iter().map(|&x| if x > 0.0 { 1.0 } else { -1.0 }).collect())
        .collect();
    LayoutMasks::new(m.resolution(), data).expect("binarized masks keep their shape")
}

/// Run the generator `s.iterations` times. Iteration 1 is unconditioned;
/// afterwards each component's previous mask is binarized and passed back
/// whenever [`scheme_decision`] selects it (dynamic schemes consult the
/// previous iteration's compatibility). Noise is fresh every iteration.
///
/// Noise and conditioning decisions are drawn from two child streams seeded
/// off `rng`, so schemes that never draw decisions (static ones) share the
/// noise sequence of schemes that do.
pub fn refine(
    gp: &GeneratorParams,
    cfg: &ModelConfig,
    d: &BubbleDiagram,
    s: &RefinementScheme,
    rng: &mut impl Rng,
) -> Result<RefinementTrajectory, RefineError> {
    s.validate()?;
    let violations = d.validate();
    if !violations.is_empty() {
        return Err(RefineError::Diagram(violations));
    }
    let graph = ComponentGraph::build(d);
    let n = graph.components.len();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut decision_rng = ChaCha8Rng::seed_from_u64(rng.gen());

    let mut out = RefinementTrajectory {
        masks: Vec::with_capacity(s.iterations),
        conditions: Vec::with_capacity(s.iterations),
        decisions: Vec::with_capacity(s.iterations),
        compatibility: Vec::with_capacity(s.iterations),
    };
    for k in 1..=s.iterations {
        let (cond, picked) = if k == 1 {
            (ConditionSet::none(n, cfg.resolution), vec![false; n])
        } else {
            let prev = &out.masks[k - 2];
            let flags = &out.compatibility[k - 2];
            let picked: Vec<bool> = graph
                .components
                .iter()
                .enumerate()
                .map(|(i, c)| scheme_decision(s, c.kind, k, flags[i], &mut decision_rng))
                .collect();
            (ConditionSet::from_masks(&binarize_masks(prev), &picked), picked)
        };
        let noise: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..cfg.noise_dim).map(|_| noise_rng.sample(StandardNormal)).collect())
            .collect();
        let masks = generator_forward(gp, cfg, d, &noise, &cond)?;
        out.compatibility.push(compatibility_flags(d, &masks)?);
        out.masks.push(masks);
        out.conditions.push(cond);
        out.decisions.push(picked);
    }
    Ok(out)
}

// ── Trajectory dump ────────────────────────────────────────────────────

#[derive(Serialize)]
struct TrajectoryRecord<'a> {
    scheme: &'a RefinementScheme,
    iterations: usize,
    decisions: &'a [Vec<bool>],
    compatibility: &'a [Vec<bool>],
}

/// Self-contained trajectory file: everything needed to re-render the
/// per-iteration frames without the model.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub diagram: BubbleDiagram,
    pub scheme: RefinementScheme,
    pub resolution: usize,
    /// Per iteration, per component, the raw mask values.
    pub masks: Vec<Vec<Vec<f32>>>,
}

impl TrajectoryFile {
    pub fn new(
        traj: &RefinementTrajectory,
        d: &BubbleDiagram,
        scheme: &RefinementScheme,
    ) -> Self {
        TrajectoryFile {
            diagram: d.clone(),
            scheme: scheme.clone(),
            resolution: traj.masks[0].resolution(),
            masks: traj.masks.iter().map(|m| m.masks().to_vec()).collect(),
        }
    }

    /// Rebuild the per-iteration layouts.
    pub fn layouts(&self) -> Result<Vec<LayoutMasks>, RefineError> {
        self.masks
            .iter()
            .map(|m| LayoutMasks::new(self.resolution, m.clone()).map_err(RefineError::from))
            .collect()
    }
}

/// Write one P6 image per iteration (`iter-01.ppm`, ...), a
/// `decisions.json` with the scheme, decisions, and compatibility history,
/// and a `trajectory.json` holding the raw masks for later re-rendering.
pub fn dump_trajectory(
    traj: &RefinementTrajectory,
    d: &BubbleDiagram,
    scheme: &RefinementScheme,
    out_dir: &Path,
) -> Result<(), RefineError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    for (i, masks) in traj.masks.iter().enumerate() {
        let img = rasterize(masks, d)?;
        let path = out_dir.join(format!("iter-{:02}.ppm", i + 1));
        std::fs::write(&path, img.to_ppm()).map_err(|e| io_err(&path, e))?;
    }
    let record = TrajectoryRecord {
        scheme,
        iterations: traj.masks.len(),
        decisions: &traj.decisions,
        compatibility: &traj.compatibility,
    };
    let path = out_dir.join("decisions.json");
    let body = serde_json::to_vec_pretty(&record)?;
    std::fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    let path = out_dir.join("trajectory.json");
    let body = serde_json::to_vec(&TrajectoryFile::new(traj, d, scheme))?;
    std::fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    Ok(())
}
