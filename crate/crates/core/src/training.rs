//! Wasserstein adversarial training with gradient penalty and per-component
//! ground-truth mask conditioning.
//!
//! Each step draws a training sample, conditions a random subset of its
//! components on their ground-truth masks, runs `n_critic` critic updates
//! followed by one generator update (fresh noise per update), and appends a
//! telemetry record. Checkpoints carry parameters, optimizer moments, and
//! the rng state, so a resumed run reproduces the uninterrupted trajectory
//! bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FoldSpec, Sample};
use crate::graphs::{BubbleDiagram, ComponentGraph, LayoutMasks};
use crate::model::{
    discriminator_graph, generator_graph, init_params, read_checkpoint, write_checkpoint,
    ConditionSet, DiscriminatorParams, GeneratorParams, ModelConfig, ModelError, ParamNodes,
};
use crate::numerics::{
    adam_step, AdamHyper, AdamState, Gradients, NodeId, NumericsError, Tape, Tensor,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(
        "non-finite loss at step {step} on sample {sample_id}: \
         d_loss={d_loss} g_loss={g_loss} l1_term={l1_term} gp_term={gp_term}"
    )]
    NonFinite {
        step: u64,
        sample_id: String,
        d_loss: f32,
        g_loss: f32,
        l1_term: f32,
        gp_term: f32,
    },
    #[error("checkpoint {}: {detail}", path.display())]
    Checkpoint { path: PathBuf, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.to_path_buf(), source }
}

// ── Config ─────────────────────────────────────────────────────────────

/// Optimization hyperparameters. `seed` drives parameter initialization and
/// every stochastic draw in the loop (sample choice, conditioning, noise,
/// interpolation coefficients).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub b1: f32,
    pub b2: f32,
    pub n_critic: usize,
    /// Graphs per optimization step; losses are averaged over the batch.
    pub batch_size: usize,
    pub lambda_cond: f32,
    pub gamma_gp: f32,
    pub steps: u64,
    pub seed: u64,
    pub cond_prob: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            b1: 0.5,
            b2: 0.999,
            n_critic: 1,
            batch_size: 1,
            lambda_cond: 1000.0,
            gamma_gp: 10.0,
            steps: 20_000,
            seed: 0,
            cond_prob: 0.5,
            checkpoint_every: 5_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |d: String| Err(TrainError::Config(d));
        if !(0.0..=1.0).contains(&self.cond_prob) {
            return fail(format!("cond_prob {} outside [0, 1]", self.cond_prob));
        }
        if !(self.lambda_cond >= 0.0) {
            return fail(format!("lambda_cond {} must be >= 0", self.lambda_cond));
        }
        if !(self.gamma_gp >= 0.0) {
            return fail(format!("gamma_gp {} must be >= 0", self.gamma_gp));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive and finite", self.lr));
        }
        if self.n_critic == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return fail("n_critic, batch_size, and checkpoint_every must be >= 1".into());
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper { lr: self.lr, beta1: self.b1, beta2: self.b2, ..AdamHyper::default() }
    }
}

// ── Conditioning ───────────────────────────────────────────────────────

/// Independently select each component with probability `cond_prob` and
/// condition it on its ground-truth mask. Returns the condition set and the
/// selected indices.
pub fn sample_conditions_gt(
    gt: &LayoutMasks,
    cond_prob: f64,
    rng: &mut impl Rng,
) -> (ConditionSet, Vec<usize>) {
    let include: Vec<bool> = (0..gt.len()).map(|_| rng.gen_bool(cond_prob)).collect();
    let selected = include
        .iter()
        .enumerate()
        .filter_map(|(i, &on)| on.then_some(i))
        .collect();
    (ConditionSet::from_masks(gt, &include), selected)
}

// ── Losses ─────────────────────────────────────────────────────────────

fn mask_leaves(
    tape: &mut Tape,
    masks: &LayoutMasks,
) -> Result<Vec<NodeId>, NumericsError> {
    let r = masks.resolution();
    masks
        .masks()
        .iter()
        .map(|m| tape.leaf(m.clone(), vec![1, r, r], false))
        .collect()
}

/// Generator objective on `tape`: `-D(fake)` plus `lambda_cond` times the
/// mean over conditioned components of the per-pixel mean absolute distance
/// to the condition mask. Returns `(loss, l1_term)`; with no conditioned
/// components the distance term is a constant zero and contributes nothing.
pub fn generator_loss_graph(
    tape: &mut Tape,
    dn: &ParamNodes,
    cfg: &ModelConfig,
    graph: &ComponentGraph,
    fake: &[NodeId],
    cond: &ConditionSet,
    selected: &[usize],
    lambda_cond: f32,
) -> Result<(NodeId, NodeId), ModelError> {
    let score = discriminator_graph(tape, dn, cfg, graph, fake)?;
    let adv = tape.scale(score, -1.0);
    if selected.is_empty() {
        let zero = tape.scalar(0.0);
        return Ok((adv, zero));
    }
    let r = cfg.resolution;
    let mut terms = Vec::with_capacity(selected.len());
    for &i in selected {
        let target = cond.entry(i).ok_or_else(|| {
            ModelError::Structure(format!("component {i} selected but has no condition mask"))
        })?;
        let t = tape.leaf(target.to_vec(), vec![1, r, r], false)?;
        terms.push(tape.l1_distance(fake[i], t)?);
    }
    let total = tape.add_many(&terms)?;
    let l1 = tape.scale(total, 1.0 / selected.len() as f32);
    let weighted = tape.scale(l1, lambda_cond);
    let loss = tape.add(adv, weighted)?;
    Ok((loss, l1))
}

/// Critic objective node ids: the full loss and its penalty term.
pub struct CriticLossParts {
    pub loss: NodeId,
    pub gp: NodeId,
}

/// Critic objective on `tape`: `D(fake) - D(real)` plus a gradient penalty
/// evaluated at the `epsilon`-interpolate of the two mask sets (one shared
/// `epsilon` across all components of the graph).
pub fn discriminator_loss_graph(
    tape: &mut Tape,
    dn: &ParamNodes,
    cfg: &ModelConfig,
    graph: &ComponentGraph,
    real: &[NodeId],
    fake: &[NodeId],
    epsilon: f32,
    gamma_gp: f32,
) -> Result<CriticLossParts, ModelError> {
    let d_fake = discriminator_graph(tape, dn, cfg, graph, fake)?;
    let d_real = discriminator_graph(tape, dn, cfg, graph, real)?;
    let wasserstein = tape.sub(d_fake, d_real)?;
    let parts = tape.gradient_penalty(real, fake, epsilon, gamma_gp, |t, interp| {
        discriminator_graph(t, dn, cfg, graph, interp)
            .map_err(|e| NumericsError::Contract { op: "critic", detail: e.to_string() })
    })?;
    let loss = tape.add(wasserstein, parts.penalty)?;
    Ok(CriticLossParts { loss, gp: parts.penalty })
}

/// Generator loss value for fixed masks (no parameter gradients).
pub fn generator_loss(
    dp: &DiscriminatorParams,
    cfg: &ModelConfig,
    d: &BubbleDiagram,
    fake: &LayoutMasks,
    cond: &ConditionSet,
    selected: &[usize],
    lambda_cond: f32,
) -> Result<f32, ModelError> {
    let graph = ComponentGraph::build(d);
    let mut tape = Tape::new();
    let dn = ParamNodes::load(&mut tape, &dp.0, false);
    let fake_ids = mask_leaves(&mut tape, fake)?;
    let (loss, _) =
        generator_loss_graph(&mut tape, &dn, cfg, &graph, &fake_ids, cond, selected, lambda_cond)?;
    Ok(tape.scalar_value(loss))
}

/// Critic loss value for fixed masks with `epsilon` drawn from `rng`.
pub fn discriminator_loss(
    dp: &DiscriminatorParams,
    cfg: &ModelConfig,
    d: &BubbleDiagram,
    real: &LayoutMasks,
    fake: &LayoutMasks,
    rng: &mut impl Rng,
    gamma_gp: f32,
) -> Result<f32, ModelError> {
    let graph = ComponentGraph::build(d);
    let mut tape = Tape::new();
    let dn = ParamNodes::load(&mut tape, &dp.0, false);
    let real_ids = mask_leaves(&mut tape, real)?;
    let fake_ids = mask_leaves(&mut tape, fake)?;
    let epsilon: f32 = rng.gen();
    let parts =
        discriminator_loss_graph(&mut tape, &dn, cfg, &graph, &real_ids, &fake_ids, epsilon, gamma_gp)?;
    Ok(tape.scalar_value(parts.loss))
}

// ── Trainer ────────────────────────────────────────────────────────────

/// One telemetry record per optimization step (the values of the last
/// critic update within the step).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub step: u64,
    pub d_loss: f32,
    pub g_loss: f32,
    pub l1_term: f32,
    pub gp_term: f32,
}

fn draw_noise(rng: &mut impl Rng, components: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..components)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

fn grad_vectors(
    tape: &Tape,
    grads: &Gradients,
    ids: &[NodeId],
    params: &[Tensor],
) -> Vec<Vec<f32>> {
    ids.iter()
        .zip(params)
        .map(|(&id, p)| match grads.wrt(id) {
            Some(g) => tape.value(g).to_vec(),
            None => vec![0.0; p.numel()],
        })
        .collect()
}

/// Adversarial training state: parameters, optimizer moments, the rng, and
/// the resolved training fold.
pub struct Trainer {
    mc: ModelConfig,
    tc: TrainConfig,
    gp: GeneratorParams,
    dp: DiscriminatorParams,
    g_state: AdamState,
    d_state: AdamState,
    rng: ChaCha8Rng,
    step: u64,
    samples: Vec<Sample>,
    graphs: Vec<ComponentGraph>,
}

/// The loop draws from a dedicated rng stream so parameter initialization
/// (which consumes the base stream of the same seed) stays independent.
fn loop_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl Trainer {
    pub fn new(
        ds: &Dataset,
        fold: &FoldSpec,
        tc: TrainConfig,
        mc: ModelConfig,
    ) -> Result<Self, TrainError> {
        tc.validate()?;
        let (gp, dp) = init_params(&mc, tc.seed)?;
        let rng = loop_rng(tc.seed);
        Self::assemble(ds, fold, tc, mc, gp, dp, None, rng, 0)
    }

    /// Rebuild a trainer from a checkpoint written by [`Trainer::save_checkpoint`].
    /// `ds` and `fold` must match the original run for the trajectory to
    /// continue exactly.
    pub fn resume(ds: &Dataset, fold: &FoldSpec, path: &Path) -> Result<Self, TrainError> {
        let bad = |detail: String| TrainError::Checkpoint { path: path.to_path_buf(), detail };
        let (manifest, tensors) = read_checkpoint(path)?;
        let field = |key: &str| {
            manifest
                .get(key)
                .cloned()
                .ok_or_else(|| bad(format!("manifest lacks a {key} entry")))
        };
        let mc: ModelConfig = serde_json::from_value(field("model")?)?;
        let tc: TrainConfig = serde_json::from_value(field("train")?)?;
        tc.validate()?;
        let step: u64 = serde_json::from_value(field("step")?)?;
        let rng: ChaCha8Rng = serde_json::from_value(field("rng")?)?;
        let g_steps: u64 = serde_json::from_value(field("g_adam_step")?)?;
        let d_steps: u64 = serde_json::from_value(field("d_adam_step")?)?;
        let (gp, dp) = crate::model::assemble_params(&mc, &tensors)?;
        let moments = |set: &crate::model::ParamSet, steps: u64| -> Result<AdamState, TrainError> {
            let mut m = Vec::with_capacity(set.names.len());
            let mut v = Vec::with_capacity(set.names.len());
            for (name, p) in set.names.iter().zip(&set.tensors) {
                for (prefix, out) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                    let key = format!("{prefix}{name}");
                    let t = tensors
                        .iter()
                        .find(|(n, _)| *n == key)
                        .ok_or_else(|| bad(format!("missing tensor {key}")))?;
                    if t.1.shape != p.shape {
                        return Err(bad(format!(
                            "tensor {key} has shape {:?}, expected {:?}",
                            t.1.shape, p.shape
                        )));
                    }
                    out.push(t.1.data.clone());
                }
            }
            Ok(AdamState::from_parts(steps, m, v))
        };
        let g_state = moments(&gp.0, g_steps)?;
        let d_state = moments(&dp.0, d_steps)?;
        Self::assemble(ds, fold, tc, mc, gp, dp, Some((g_state, d_state)), rng, step)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        ds: &Dataset,
        fold: &FoldSpec,
        tc: TrainConfig,
        mc: ModelConfig,
        gp: GeneratorParams,
        dp: DiscriminatorParams,
        states: Option<(AdamState, AdamState)>,
        rng: ChaCha8Rng,
        step: u64,
    ) -> Result<Self, TrainError> {
        mc.validate()?;
        if fold.train_ids.is_empty() {
            return Err(TrainError::Config("empty training fold".into()));
        }
        if ds.resolution != mc.resolution {
            return Err(TrainError::Config(format!(
                "dataset resolution {} != model resolution {}",
                ds.resolution, mc.resolution
            )));
        }
        let mut samples = Vec::with_capacity(fold.train_ids.len());
        for id in &fold.train_ids {
            let s = ds
                .sample(id)
                .ok_or_else(|| TrainError::Config(format!("training id {id} not in dataset")))?;
            if s.diagram.room_count() == fold.held_out_room_count {
                return Err(TrainError::Config(format!(
                    "training id {id} has the held-out room count {}",
                    fold.held_out_room_count
                )));
            }
            samples.push(s.clone());
        }
        let graphs = samples.iter().map(|s| ComponentGraph::build(&s.diagram)).collect();
        let (g_state, d_state) = states.unwrap_or_else(|| {
            (AdamState::for_params(&gp.0.tensors), AdamState::for_params(&dp.0.tensors))
        });
        Ok(Trainer { mc, tc, gp, dp, g_state, d_state, rng, step, samples, graphs })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.tc
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.mc
    }

    pub fn params(&self) -> (&GeneratorParams, &DiscriminatorParams) {
        (&self.gp, &self.dp)
    }

    pub fn into_params(self) -> (GeneratorParams, DiscriminatorParams) {
        (self.gp, self.dp)
    }

    #[cfg(test)]
    fn poison_generator(&mut self) {
        self.gp.0.tensors[0].data[0] = f32::NAN;
    }

    /// Run one optimization step: `n_critic` critic updates then one
    /// generator update, with fresh noise per update. Aborts with
    /// diagnostics if any logged loss component is non-finite.
    pub fn step(&mut self) -> Result<StepTelemetry, TrainError> {
        let step = self.step + 1;
        let mut batch = Vec::with_capacity(self.tc.batch_size);
        for _ in 0..self.tc.batch_size {
            let idx = self.rng.gen_range(0..self.samples.len());
            let (cond, selected) =
                sample_conditions_gt(&self.samples[idx].gt_masks, self.tc.cond_prob, &mut self.rng);
            batch.push((idx, cond, selected));
        }
        let (mut d_loss, mut gp_term) = (0.0, 0.0);
        for _ in 0..self.tc.n_critic {
            (d_loss, gp_term) = self.critic_update(&batch)?;
        }
        let (g_loss, l1_term) = self.generator_update(&batch)?;
        let record = StepTelemetry { step, d_loss, g_loss, l1_term, gp_term };
        if ![d_loss, g_loss, l1_term, gp_term].iter().all(|v| v.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                sample_id: self.samples[batch[0].0].sample_id.clone(),
                d_loss,
                g_loss,
                l1_term,
                gp_term,
            });
        }
        self.step = step;
        Ok(record)
    }

    fn critic_update(
        &mut self,
        batch: &[(usize, ConditionSet, Vec<usize>)],
    ) -> Result<(f32, f32), TrainError> {
        let mut tape = Tape::new();
        let gn = ParamNodes::load(&mut tape, &self.gp.0, false);
        let dn = ParamNodes::load(&mut tape, &self.dp.0, true);
        let d_ids = dn.ids.clone();
        let mut losses = Vec::with_capacity(batch.len());
        let mut gps = Vec::with_capacity(batch.len());
        for (idx, cond, _) in batch {
            let graph = &self.graphs[*idx];
            let noise = draw_noise(&mut self.rng, graph.components.len(), self.mc.noise_dim);
            let fake = generator_graph(&mut tape, &gn, &self.mc, graph, &noise, cond)?;
            let real = mask_leaves(&mut tape, &self.samples[*idx].gt_masks)?;
            let epsilon: f32 = self.rng.gen();
            let parts = discriminator_loss_graph(
                &mut tape,
                &dn,
                &self.mc,
                graph,
                &real,
                &fake,
                epsilon,
                self.tc.gamma_gp,
            )?;
            losses.push(parts.loss);
            gps.push(parts.gp);
        }
        let scale = 1.0 / batch.len() as f32;
        let loss_sum = tape.add_many(&losses)?;
        let loss = tape.scale(loss_sum, scale);
        let gp_sum = tape.add_many(&gps)?;
        let gp = tape.scale(gp_sum, scale);
        let grads = tape.backward(loss, false)?;
        let gvecs = grad_vectors(&tape, &grads, &d_ids, &self.dp.0.tensors);
        adam_step(&mut self.dp.0.tensors, &gvecs, &mut self.d_state, &self.tc.hyper())?;
        Ok((tape.scalar_value(loss), tape.scalar_value(gp)))
    }

    fn generator_update(
        &mut self,
        batch: &[(usize, ConditionSet, Vec<usize>)],
    ) -> Result<(f32, f32), TrainError> {
        let mut tape = Tape::new();
        let gn = ParamNodes::load(&mut tape, &self.gp.0, true);
        let dn = ParamNodes::load(&mut tape, &self.dp.0, false);
        let g_ids = gn.ids.clone();
        let mut losses = Vec::with_capacity(batch.len());
        let mut l1s = Vec::with_capacity(batch.len());
        for (idx, cond, selected) in batch {
            let graph = &self.graphs[*idx];
            let noise = draw_noise(&mut self.rng, graph.components.len(), self.mc.noise_dim);
            let fake = generator_graph(&mut tape, &gn, &self.mc, graph, &noise, cond)?;
            let (loss, l1) = generator_loss_graph(
                &mut tape,
                &dn,
                &self.mc,
                graph,
                &fake,
                cond,
                selected,
                self.tc.lambda_cond,
            )?;
            losses.push(loss);
            l1s.push(l1);
        }
        let scale = 1.0 / batch.len() as f32;
        let loss_sum = tape.add_many(&losses)?;
        let loss = tape.scale(loss_sum, scale);
        let l1_sum = tape.add_many(&l1s)?;
        let l1 = tape.scale(l1_sum, scale);
        let grads = tape.backward(loss, false)?;
        let gvecs = grad_vectors(&tape, &grads, &g_ids, &self.gp.0.tensors);
        adam_step(&mut self.gp.0.tensors, &gvecs, &mut self.g_state, &self.tc.hyper())?;
        Ok((tape.scalar_value(loss), tape.scalar_value(l1)))
    }

    /// Write parameters, optimizer moments, and loop state to `path` (plus
    /// the JSON manifest sidecar).
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let manifest = serde_json::json!({
            "model": self.mc,
            "train": self.tc,
            "step": self.step,
            "rng": self.rng,
            "g_adam_step": self.g_state.step_count(),
            "d_adam_step": self.d_state.step_count(),
        });
        let mut owned: Vec<(String, Tensor)> = Vec::new();
        for (set, state) in [(&self.gp.0, &self.g_state), (&self.dp.0, &self.d_state)] {
            for (i, (name, p)) in set.names.iter().zip(&set.tensors).enumerate() {
                owned.push((name.clone(), p.clone()));
                let m = Tensor::new(p.shape.clone(), state.m[i].clone())?;
                let v = Tensor::new(p.shape.clone(), state.v[i].clone())?;
                owned.push((format!("adam.m.{name}"), m));
                owned.push((format!("adam.v.{name}"), v));
            }
        }
        let tensors: Vec<(&str, &Tensor)> =
            owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_checkpoint(path, &manifest, &tensors)?;
        Ok(())
    }
}

// ── Loop shell ─────────────────────────────────────────────────────────

/// Drive `trainer` to its configured step count, appending one JSON line
/// per step to `telemetry.jsonl` in `out_dir` and writing periodic
/// checkpoints (`ckpt-<step>.lgpp`) plus a final `ckpt-final.lgpp`.
pub fn run_training(mut trainer: Trainer, out_dir: &Path) -> Result<Trainer, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let log_path = out_dir.join("telemetry.jsonl");
    let file = File::options()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut log = BufWriter::new(file);
    while trainer.step_count() < trainer.config().steps {
        let record = trainer.step()?;
        serde_json::to_writer(&mut log, &record)?;
        log.write_all(b"\n").map_err(|e| io_err(&log_path, e))?;
        log.flush().map_err(|e| io_err(&log_path, e))?;
        if record.step % trainer.config().checkpoint_every == 0 {
            let path = out_dir.join(format!("ckpt-{:07}.lgpp", record.step));
            trainer.save_checkpoint(&path)?;
        }
    }
    trainer.save_checkpoint(&out_dir.join("ckpt-final.lgpp"))?;
    Ok(trainer)
}

/// Train from scratch on the training side of `fold`.
pub fn train(
    ds: &Dataset,
    fold: &FoldSpec,
    tc: &TrainConfig,
    mc: &ModelConfig,
    out_dir: &Path,
) -> Result<Trainer, TrainError> {
    run_training(Trainer::new(ds, fold, tc.clone(), mc.clone())?, out_dir)
}
