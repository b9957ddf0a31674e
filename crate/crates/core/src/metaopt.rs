//! Tree-structured Parzen Estimator search over integer parameter vectors,
//! minimizing a black-box objective.
//!
//! Suggestions before `n_startup` trials are uniform. Afterwards the
//! history splits at the best `gamma_quantile` fraction into good/bad sets;
//! per parameter, add-one-smoothed categorical densities `l` (good) and `g`
//! (bad) are built over the integer range, `n_candidates` vectors are drawn
//! from `l`, and the candidate maximizing the likelihood ratio wins.

use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::splitmix64;

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {detail}", path.display())]
    Malformed { path: PathBuf, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> MetaError {
    MetaError::Io { path: path.to_path_buf(), source }
}

// ── Space and history ──────────────────────────────────────────────────

/// Inclusive integer range per parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSpace {
    ranges: Vec<(i64, i64)>,
}

impl SearchSpace {
    pub fn new(ranges: Vec<(i64, i64)>) -> Result<Self, MetaError> {
        if ranges.is_empty() {
            return Err(MetaError::Space("no parameters".into()));
        }
        for &(lo, hi) in &ranges {
            if lo > hi {
                return Err(MetaError::Space(format!("empty range [{lo}, {hi}]")));
            }
        }
        Ok(SearchSpace { ranges })
    }

    pub fn uniform(n: usize, lo: i64, hi: i64) -> Result<Self, MetaError> {
        Self::new(vec![(lo, hi); n])
    }

    /// 12 per-type schedule entries in [1, 10].
    pub fn static_scheme() -> Self {
        Self::uniform(crate::graphs::TYPE_COUNT, 1, 10).expect("static space is non-empty")
    }

    /// Two 12-entry schedules in [1, 10].
    pub fn dynamic_scheme() -> Self {
        Self::uniform(2 * crate::graphs::TYPE_COUNT, 1, 10).expect("dynamic space is non-empty")
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn ranges(&self) -> &[(i64, i64)] {
        &self.ranges
    }

    pub fn contains(&self, params: &[i64]) -> bool {
        params.len() == self.ranges.len()
            && params.iter().zip(&self.ranges).all(|(&p, &(lo, hi))| (lo..=hi).contains(&p))
    }

    fn sample_uniform(&self, rng: &mut impl Rng) -> Vec<i64> {
        self.ranges.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect()
    }
}

/// JSON-friendly score: non-finite values serialize as null and read back
/// as +infinity (a failed trial).
mod lossy_score {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(score: &f64, s: S) -> Result<S::Ok, S::Error> {
        if score.is_finite() {
            s.serialize_f64(*score)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub round: usize,
    pub params: Vec<i64>,
    #[serde(with = "lossy_score")]
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialHistory(pub Vec<Trial>);

impl TrialHistory {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Lowest-score trial (ties go to the earliest round).
    pub fn best(&self) -> Option<&Trial> {
        self.0.iter().min_by(|a, b| a.score.total_cmp(&b.score))
    }

    /// Running minimum of scores by round.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.0
            .iter()
            .map(|t| {
                best = best.min(t.score);
                best
            })
            .collect()
    }
}

// ── Suggestion ─────────────────────────────────────────────────────────

/// Add-one-smoothed categorical density over `lo..=hi` from observed values.
fn smoothed_density(values: &[i64], lo: i64, hi: i64) -> Vec<f64> {
    let m = (hi - lo + 1) as usize;
    let mut counts = vec![1.0f64; m];
    for &v in values {
        counts[(v - lo) as usize] += 1.0;
    }
    let total = values.len() as f64 + m as f64;
    counts.iter_mut().for_each(|c| *c /= total);
    counts
}

fn sample_categorical(density: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in density.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    density.len() - 1
}

/// Propose the next parameter vector given the trials so far.
pub fn tpe_suggest(
    h: &TrialHistory,
    space: &SearchSpace,
    rng: &mut impl Rng,
    gamma_quantile: f64,
    n_candidates: usize,
    n_startup: usize,
) -> Result<Vec<i64>, MetaError> {
    for t in &h.0 {
        if t.params.len() != space.len() {
            return Err(MetaError::Space(format!(
                "trial at round {} has {} parameters, space has {}",
                t.round,
                t.params.len(),
                space.len()
            )));
        }
    }
    let finite: Vec<&Trial> = h.0.iter().filter(|t| t.score.is_finite()).collect();
    if h.len() < n_startup || finite.is_empty() {
        return Ok(space.sample_uniform(rng));
    }

    let mut by_score = finite;
    by_score.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.round.cmp(&b.round)));
    // Cap the good set at 25 trials (the standard TPE gamma function):
    // an uncapped quantile lets duplicates of the incumbent crowd the good
    // set and freeze the densities on large histories.
    let n_good = ((gamma_quantile * h.len() as f64).ceil() as usize)
        .clamp(1, 25)
        .min(by_score.len());
    let good = &by_score[..n_good];
    let good_rounds: std::collections::BTreeSet<usize> = good.iter().map(|t| t.round).collect();
    let bad: Vec<&Trial> = h.0.iter().filter(|t| !good_rounds.contains(&t.round)).collect();

    let mut l_densities = Vec::with_capacity(space.len());
    let mut g_densities = Vec::with_capacity(space.len());
    for (j, &(lo, hi)) in space.ranges.iter().enumerate() {
        let gv: Vec<i64> = good.iter().map(|t| t.params[j]).collect();
        let bv: Vec<i64> = bad.iter().map(|t| t.params[j]).collect();
        l_densities.push(smoothed_density(&gv, lo, hi));
        g_densities.push(smoothed_density(&bv, lo, hi));
    }

    let mut best: Option<(f64, Vec<i64>)> = None;
    for _ in 0..n_candidates.max(1) {
        let mut cand = Vec::with_capacity(space.len());
        let mut ratio = 0.0f64;
        for (j, &(lo, _)) in space.ranges.iter().enumerate() {
            let idx = sample_categorical(&l_densities[j], rng);
            cand.push(lo + idx as i64);
            ratio += l_densities[j][idx].ln() - g_densities[j][idx].ln();
        }
        if best.as_ref().map_or(true, |(r, _)| ratio > *r) {
            best = Some((ratio, cand));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

// ── Optimization loop ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpeConfig {
    pub gamma_quantile: f64,
    pub n_candidates: usize,
    pub n_startup: usize,
    pub rounds: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig { gamma_quantile: 0.25, n_candidates: 24, n_startup: 20, rounds: 500 }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        if !(self.gamma_quantile > 0.0 && self.gamma_quantile <= 1.0) {
            return Err(MetaError::Config(format!(
                "gamma_quantile {} outside (0, 1]",
                self.gamma_quantile
            )));
        }
        if self.n_candidates == 0 || self.rounds == 0 {
            return Err(MetaError::Config("n_candidates and rounds must be >= 1".into()));
        }
        Ok(())
    }
}

/// Each round draws from its own rng stream derived from `(seed, round)`,
/// so a resumed run continues the exact trajectory of an uninterrupted one.
fn round_rng(seed: u64, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (round as u64).rotate_left(17)))
}

fn run_rounds(
    objective: &mut dyn FnMut(&[i64]) -> f64,
    space: &SearchSpace,
    cfg: &TpeConfig,
    seed: u64,
    h: &mut TrialHistory,
    mut on_trial: impl FnMut(&Trial) -> Result<(), MetaError>,
) -> Result<(), MetaError> {
    while h.len() < cfg.rounds {
        let round = h.len();
        let mut rng = round_rng(seed, round);
        let params = tpe_suggest(h, space, &mut rng, cfg.gamma_quantile, cfg.n_candidates, cfg.n_startup)?;
        let raw = objective(&params);
        let score = if raw.is_finite() { raw } else { f64::INFINITY };
        let trial = Trial { round, params, score };
        on_trial(&trial)?;
        h.0.push(trial);
    }
    Ok(())
}

/// Minimize `objective` over `space` for `cfg.rounds` rounds. Non-finite
/// objective values are recorded as +infinity (and never enter the good
/// set). Returns the best parameters and the full history.
pub fn optimize(
    mut objective: impl FnMut(&[i64]) -> f64,
    space: &SearchSpace,
    cfg: &TpeConfig,
    seed: u64,
) -> Result<(Vec<i64>, TrialHistory), MetaError> {
    cfg.validate()?;
    let mut h = TrialHistory::default();
    run_rounds(&mut objective, space, cfg, seed, &mut h, |_| Ok(()))?;
    let best = h.best().expect("rounds >= 1").params.clone();
    Ok((best, h))
}

/// Parse a JSON-lines trial history. Rounds must be exactly 0..n in order.
pub fn load_history(path: &Path) -> Result<TrialHistory, MetaError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut trials = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trial = serde_json::from_str(&line).map_err(|e| MetaError::Malformed {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        if t.round != trials.len() {
            return Err(MetaError::Malformed {
                path: path.to_path_buf(),
                detail: format!("line {}: round {} out of order", i + 1, t.round),
            });
        }
        trials.push(t);
    }
    Ok(TrialHistory(trials))
}

/// [`optimize`] with a JSON-lines log at `log_path`: existing trials are
/// loaded and the run continues from there, appending one line per new
/// trial. Interrupt and rerun with the same arguments to resume.
pub fn optimize_logged(
    mut objective: impl FnMut(&[i64]) -> f64,
    space: &SearchSpace,
    cfg: &TpeConfig,
    seed: u64,
    log_path: &Path,
) -> Result<(Vec<i64>, TrialHistory), MetaError> {
    cfg.validate()?;
    let mut h = if log_path.exists() { load_history(log_path)? } else { TrialHistory::default() };
    if h.len() > cfg.rounds {
        return Err(MetaError::Config(format!(
            "history already has {} trials, more than {} rounds",
            h.len(),
            cfg.rounds
        )));
    }
    let file = std::fs::File::options()
        .create(true)
        .append(true)
        .open(log_path)
        .map_err(|e| io_err(log_path, e))?;
    let mut out = std::io::BufWriter::new(file);
    run_rounds(&mut objective, space, cfg, seed, &mut h, |t| {
        let line = serde_json::to_string(t).expect("trial serializes");
        writeln!(out, "{line}").map_err(|e| io_err(log_path, e))?;
        out.flush().map_err(|e| io_err(log_path, e))
    })?;
    let best = h.best().expect("rounds >= 1").params.clone();
    Ok((best, h))
}
