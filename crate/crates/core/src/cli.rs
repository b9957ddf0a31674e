//! Command-line entry point: dataset generation, training, refinement,
//! scheme search, evaluation, and rendering, sharing one JSON run config.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_dataset, load_dataset, rasterize, save_dataset, splitmix64, Dataset, Sample,
};
use crate::graphs::{BubbleDiagram, LayoutMasks, TYPE_COUNT};
use crate::metaopt::{optimize_logged, SearchSpace, TpeConfig};
use crate::metrics::{
    compatibility_score, diversity_score, evaluate, map_parallel, EmbeddingNet, EvalConfig,
    MIN_DIVERSITY_SAMPLES,
};
use crate::model::{load_model, GeneratorParams, ModelConfig};
use crate::refine::{
    dump_trajectory, refine, RefinementScheme, TrajectoryFile, DEFAULT_ITERATIONS,
};
use crate::training::{run_training, TrainConfig, Trainer};

/// Failures split by exit code: usage mistakes exit 1, runtime errors 2.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

// ── Configuration ───────────────────────────────────────────────────────

/// Run configuration file. Every field has a default, so `{}` is a valid
/// config; unknown keys are rejected. Command-line flags override it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model architecture.
    pub model: ModelConfig,
    /// Training hyperparameters.
    pub train: TrainConfig,
    /// Refinement scheme spec: `heur:<p>`, `static:<12 ints>`, or
    /// `dyna:<12 ints>;<12 ints>`.
    pub scheme: String,
    /// Refinement iterations.
    pub iterations: usize,
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Held-out room count for the train/test split.
    pub fold: usize,
    /// Output directory.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scheme: "heur:1.0".into(),
            iterations: DEFAULT_ITERATIONS,
            data: None,
            fold: 8,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let body = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_slice(&body).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// Seed precedence: explicit flag, then config file, then the
/// `LAYOUT_REFINE_SEED` environment variable, then 0.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var("LAYOUT_REFINE_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("LAYOUT_REFINE_SEED is not an integer: {v:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => Err(usage(format!("LAYOUT_REFINE_SEED: {e}"))),
    }
}

/// Parse a scheme spec: `heur:<p>` accepts with probability `p`,
/// `static:<12 comma ints>` thresholds by type, and
/// `dyna:<12 ints>;<12 ints>` switches thresholds on compatibility.
pub fn parse_scheme(spec: &str, iterations: usize) -> Result<RefinementScheme, String> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| format!("scheme {spec:?} lacks a kind prefix (heur:, static:, dyna:)"))?;
    let ints = |s: &str| -> Result<[u8; TYPE_COUNT], String> {
        let vals: Vec<u8> = s
            .split(',')
            .map(|t| t.trim().parse::<u8>().map_err(|_| format!("{t:?} is not an integer")))
            .collect::<Result<_, _>>()?;
        let n = vals.len();
        vals.try_into().map_err(|_| format!("expected {TYPE_COUNT} integers, got {n}"))
    };
    let mut scheme = match kind {
        "heur" => {
            let p = rest.parse::<f64>().map_err(|_| format!("{rest:?} is not a probability"))?;
            RefinementScheme::heuristic(p)
        }
        "static" => RefinementScheme::fixed(ints(rest)?),
        "dyna" => {
            let (t, u) = rest
                .split_once(';')
                .ok_or_else(|| "dyna takes two ';'-separated threshold lists".to_string())?;
            RefinementScheme::dynamic(ints(t)?, ints(u)?)
        }
        other => return Err(format!("unknown scheme kind {other:?}")),
    };
    scheme.iterations = iterations;
    scheme.validate().map_err(|e| e.to_string())?;
    Ok(scheme)
}

// ── Command definitions ─────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "layout-refine",
    version,
    about = "Graph-constrained floorplan generation with iterative refinement"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic floorplan dataset.
    GenData(GenDataArgs),
    /// Train the generator/discriminator pair on a dataset fold.
    Train(TrainArgs),
    /// Iteratively refine one bubble diagram with a trained generator.
    Refine(RefineArgs),
    /// Search refinement schemes with the Parzen-estimator optimizer.
    Metaopt(MetaoptArgs),
    /// Evaluate a trained model under a refinement scheme.
    Eval(EvalArgs),
    /// Render a dataset sample or a stored trajectory to P6 images.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Samples generated for each room count (5 through 8).
    #[arg(long, default_value_t = 10)]
    count_per_room_count: usize,
    /// Generator seed (default: LAYOUT_REFINE_SEED or 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Mask resolution.
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Generator threads (the result does not depend on this).
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; omitted fields take their documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides the config file).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out room count (overrides the config file).
    #[arg(long)]
    fold: Option<usize>,
    /// Output directory for checkpoints and telemetry (overrides config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this checkpoint; its manifest supplies the model and
    /// training configs.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Training seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RefineArgs {
    /// Model checkpoint (.lgpp).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Bubble diagram JSON: {"nodes":[{"id":0,"kind":"LivingRoom"},...],
    /// "edges":[{"a":0,"b":1,"kind":"InteriorDoor"},...]}.
    #[arg(long)]
    diagram: PathBuf,
    /// Refinement scheme spec.
    #[arg(long, default_value = "heur:1.0")]
    scheme: String,
    /// Refinement iterations.
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iters: usize,
    /// Refinement seed (default: LAYOUT_REFINE_SEED or 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for frames and logs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Target {
    Diversity,
    Compatibility,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Family {
    Static,
    Dynamic,
}

#[derive(Args)]
struct MetaoptArgs {
    /// Model checkpoint (.lgpp).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Metric the search minimizes.
    #[arg(long, value_enum)]
    target: Target,
    /// Scheme family searched.
    #[arg(long, value_enum)]
    scheme_family: Family,
    /// Optimization rounds (including startup).
    #[arg(long, default_value_t = 500)]
    rounds: usize,
    /// Held-out room count; trials are scored on the training side.
    #[arg(long, default_value_t = 8)]
    fold: usize,
    /// Training-fold layouts refined per trial.
    #[arg(long, default_value_t = MIN_DIVERSITY_SAMPLES)]
    samples: usize,
    /// Refinement iterations per trial.
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iters: usize,
    /// Search seed (default: LAYOUT_REFINE_SEED or 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (the result does not depend on this).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory (trials.jsonl + best.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint (.lgpp).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Held-out room count defining the test fold.
    #[arg(long, default_value_t = 8)]
    fold: usize,
    /// Refinement scheme spec.
    #[arg(long, default_value = "heur:1.0")]
    scheme: String,
    /// Refinement iterations.
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iters: usize,
    /// Test diagrams drawn with replacement per round.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Evaluation rounds.
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    /// Evaluation seed (default: LAYOUT_REFINE_SEED or 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (the report does not depend on this).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    /// Dataset directory (required with --sample).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sample id whose ground truth to render.
    #[arg(long)]
    sample: Option<String>,
    /// trajectory.json from a refinement run.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Output: a .ppm file for --sample, a directory for --trajectory.
    #[arg(long)]
    out: PathBuf,
}

// ── Command implementations ─────────────────────────────────────────────

fn write_file(path: &Path, body: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, body)?;
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let seed = resolve_seed(a.seed, None)?;
    ModelConfig { resolution: a.resolution, ..ModelConfig::default() }.validate()?;
    let ds = generate_dataset(seed, a.count_per_room_count, a.resolution, a.workers)?;
    save_dataset(&ds, &a.out)?;
    for rc in 5..=8 {
        let n = ds.samples.iter().filter(|s| s.diagram.room_count() == rc).count();
        println!("{rc}-room samples: {n}");
    }
    println!("wrote {} samples to {}", ds.samples.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(CliError::Runtime)?,
        None => RunConfig::default(),
    };
    let data = a
        .data
        .or(cfg.data)
        .ok_or_else(|| usage("no dataset directory (pass --data or set it in the config)"))?;
    let out = a
        .out
        .or(cfg.out)
        .ok_or_else(|| usage("no output directory (pass --out or set it in the config)"))?;
    let fold_rc = a.fold.unwrap_or(cfg.fold);
    let ds = load_dataset(&data)?;
    let fold = crate::data::kfold_split(&ds, fold_rc)?;
    let trainer = match &a.resume {
        Some(ckpt) => {
            if a.config.is_some() {
                eprintln!("note: resuming; model and training configs come from the checkpoint");
            }
            Trainer::resume(&ds, &fold, ckpt)?
        }
        None => {
            let mut tc = cfg.train;
            if let Some(s) = a.seed {
                tc.seed = s;
            } else if a.config.is_none() {
                tc.seed = resolve_seed(None, Some(tc.seed))?;
            }
            Trainer::new(&ds, &fold, tc, cfg.model)?
        }
    };
    let trainer = run_training(trainer, &out)?;
    println!(
        "trained to step {} ({} training samples, fold {}); checkpoints in {}",
        trainer.step_count(),
        fold.train_ids.len(),
        fold_rc,
        out.display()
    );
    Ok(())
}

fn cmd_refine(a: RefineArgs) -> Result<(), CliError> {
    let scheme = parse_scheme(&a.scheme, a.iters).map_err(usage)?;
    let (mc, gp, _) = load_model(&a.checkpoint)?;
    let body = std::fs::read(&a.diagram)?;
    let d: BubbleDiagram = serde_json::from_slice(&body)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", a.diagram.display())))?;
    let seed = resolve_seed(a.seed, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = refine(&gp, &mc, &d, &scheme, &mut rng)?;
    dump_trajectory(&traj, &d, &scheme, &a.out)?;
    println!("wrote {} iterations to {}", traj.masks.len(), a.out.display());
    Ok(())
}

/// Build the scheme a trial's integer parameters describe.
fn family_scheme(family: Family, params: &[i64], iterations: usize) -> RefinementScheme {
    let ints = |s: &[i64]| -> [u8; TYPE_COUNT] {
        let mut out = [0u8; TYPE_COUNT];
        for (o, &p) in out.iter_mut().zip(s) {
            *o = p as u8;
        }
        out
    };
    let mut scheme = match family {
        Family::Static => RefinementScheme::fixed(ints(params)),
        Family::Dynamic => {
            RefinementScheme::dynamic(ints(&params[..TYPE_COUNT]), ints(&params[TYPE_COUNT..]))
        }
    };
    scheme.iterations = iterations;
    scheme
}

/// Refine the fixed trial layouts under `scheme` with per-sample seeds
/// derived from the trial parameters, so the objective is a pure function
/// of them.
fn run_trial(
    gp: &GeneratorParams,
    mc: &ModelConfig,
    picks: &[&Sample],
    scheme: &RefinementScheme,
    trial_seed: u64,
    workers: usize,
) -> Result<Vec<(BubbleDiagram, LayoutMasks)>, CliError> {
    let jobs: Vec<(usize, u64)> =
        (0..picks.len()).map(|i| (i, splitmix64(trial_seed ^ i as u64))).collect();
    let pairs = map_parallel(&jobs, workers, |&(i, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traj = refine(gp, mc, &picks[i].diagram, scheme, &mut rng)?;
        Ok((picks[i].diagram.clone(), traj.final_masks().clone()))
    })?;
    Ok(pairs)
}

fn cmd_metaopt(a: MetaoptArgs) -> Result<(), CliError> {
    if a.target == Target::Compatibility && a.scheme_family == Family::Static {
        eprintln!(
            "warning: compatibility reacts to the evolving layout, which a static \
             scheme cannot see; the search may plateau"
        );
    }
    if a.target == Target::Diversity && a.samples < MIN_DIVERSITY_SAMPLES {
        return Err(usage(format!(
            "diversity needs --samples of at least {MIN_DIVERSITY_SAMPLES}, got {}",
            a.samples
        )));
    }
    if a.samples == 0 {
        return Err(usage("--samples must be positive"));
    }
    let (mc, gp, _) = load_model(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    if mc.resolution != ds.resolution {
        return Err(CliError::Runtime(format!(
            "model resolution {} does not match dataset resolution {}",
            mc.resolution, ds.resolution
        )));
    }
    let fold = crate::data::kfold_split(&ds, a.fold)?;
    // The trial layouts are a fixed slice of the training fold so every
    // trial competes on the same inputs.
    let picks: Vec<&Sample> = (0..a.samples)
        .map(|i| {
            let id = &fold.train_ids[i % fold.train_ids.len()];
            ds.sample(id).ok_or_else(|| CliError::Runtime(format!("train id {id} not in dataset")))
        })
        .collect::<Result<_, _>>()?;
    let reference: Vec<Sample> = picks.iter().map(|s| (*s).clone()).collect();
    let net = match a.target {
        Target::Diversity => Some(EmbeddingNet::new(ds.resolution)?),
        Target::Compatibility => None,
    };
    let seed = resolve_seed(a.seed, None)?;
    let space = match a.scheme_family {
        Family::Static => SearchSpace::static_scheme(),
        Family::Dynamic => SearchSpace::dynamic_scheme(),
    };
    std::fs::create_dir_all(&a.out)?;
    let objective = |params: &[i64]| -> f64 {
        let scheme = family_scheme(a.scheme_family, params, a.iters);
        let trial_seed = params.iter().fold(splitmix64(seed ^ 0x7261_696c), |acc, &p| {
            splitmix64(acc ^ p as u64)
        });
        let outcome = run_trial(&gp, &mc, &picks, &scheme, trial_seed, a.workers)
            .and_then(|pairs| match (&net, a.target) {
                (Some(net), Target::Diversity) => {
                    Ok(diversity_score(net, &pairs, &reference)?)
                }
                _ => Ok(compatibility_score(&pairs)?),
            });
        match outcome {
            Ok(score) => score,
            Err(e) => {
                let msg = match e {
                    CliError::Usage(m) | CliError::Runtime(m) => m,
                };
                eprintln!("warning: trial failed ({msg}); scored as infinity");
                f64::INFINITY
            }
        }
    };
    let tpe = TpeConfig { rounds: a.rounds, ..TpeConfig::default() };
    let log_path = a.out.join("trials.jsonl");
    let (best, history) = optimize_logged(objective, &space, &tpe, seed, &log_path)?;
    let best_trial = history.best().expect("rounds is positive");
    let best_scheme = family_scheme(a.scheme_family, &best, a.iters);
    let summary = serde_json::json!({
        "params": best,
        "score": if best_trial.score.is_finite() { Some(best_trial.score) } else { None },
        "round": best_trial.round,
        "scheme": best_scheme,
    });
    write_file(&a.out.join("best.json"), &serde_json::to_vec_pretty(&summary)?)?;
    println!(
        "best score {} at round {} after {} trials; scheme written to {}",
        best_trial.score,
        best_trial.round,
        history.len(),
        a.out.join("best.json").display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let scheme = parse_scheme(&a.scheme, a.iters).map_err(usage)?;
    let (mc, gp, _) = load_model(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let fold = crate::data::kfold_split(&ds, a.fold)?;
    let cfg = EvalConfig {
        n_samples: a.samples,
        rounds: a.rounds,
        seed: resolve_seed(a.seed, None)?,
        workers: a.workers,
    };
    let report = evaluate(&gp, &mc, &ds, &fold, &scheme, &cfg)?;
    write_file(&a.out, &serde_json::to_vec_pretty(&report)?)?;
    println!(
        "diversity {:.4} ± {:.4}; compatibility {:.4} ± {:.4}; report at {}",
        report.diversity_mean,
        report.diversity_std,
        report.compatibility_mean,
        report.compatibility_std,
        a.out.display()
    );
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<(), CliError> {
    match (&a.sample, &a.trajectory) {
        (Some(id), None) => {
            let data = a
                .data
                .as_ref()
                .ok_or_else(|| usage("--sample needs --data pointing at its dataset"))?;
            let ds: Dataset = load_dataset(data)?;
            let s = ds
                .sample(id)
                .ok_or_else(|| CliError::Runtime(format!("sample {id} not in dataset")))?;
            let img = rasterize(&s.gt_masks, &s.diagram)?;
            write_file(&a.out, &img.to_ppm())?;
            println!("wrote {}", a.out.display());
        }
        (None, Some(path)) => {
            let body = std::fs::read(path)?;
            let traj: TrajectoryFile = serde_json::from_slice(&body)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            std::fs::create_dir_all(&a.out)?;
            let layouts = traj.layouts()?;
            for (i, masks) in layouts.iter().enumerate() {
                let img = rasterize(masks, &traj.diagram)?;
                let frame = a.out.join(format!("iter-{:02}.ppm", i + 1));
                write_file(&frame, &img.to_ppm())?;
            }
            println!("wrote {} frames to {}", layouts.len(), a.out.display());
        }
        _ => return Err(usage("pass exactly one of --sample or --trajectory")),
    }
    Ok(())
}

/// Parse the process arguments and run the selected command, returning the
/// process exit code: 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Refine(a) => cmd_refine(a),
        Cmd::Metaopt(a) => cmd_metaopt(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Render(a) => cmd_render(a),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
