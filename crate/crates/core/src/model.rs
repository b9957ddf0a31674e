//! The relational generator and critic: per-component feature
//! initialization, condition encoding, message passing over the bubble
//! diagram, an upsampling decoder with per-component mask heads, and a
//! mirrored downsampling critic with a component-sum readout.
//!
//! Every forward pass is expressed on a [`Tape`], so the same code path
//! serves inference, training gradients, and the double backward needed by
//! the critic's gradient penalty. All pooling reductions iterate components
//! in canonical order, making the generator exactly equivariant — and the
//! critic exactly invariant — to the diagram's list order.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::{canonical_order, BubbleDiagram, ComponentGraph, LayoutMasks, TYPE_COUNT};
use crate::numerics::{NodeId, NumericsError, Tape, Tensor};

/// Negative slope for every leaky ReLU in the model.
pub const LEAKY_SLOPE: f32 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("structural mismatch: {0}")]
    Structure(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint format: {0}")]
    Format(String),
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Sum,
    Mean,
}

/// Architecture hyperparameters. Parameter names and shapes are a pure
/// function of this config, so checkpoints are portable across processes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output mask resolution; 8 · 2^upsamples.
    pub resolution: usize,
    /// Channel width unit: the condition encoding is `base_channels` deep
    /// and the 8×8 feature volume twice that.
    pub base_channels: usize,
    pub noise_dim: usize,
    pub mpn_rounds_per_scale: usize,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 64,
            base_channels: 16,
            noise_dim: 128,
            mpn_rounds_per_scale: 1,
            pooling: Pooling::Sum,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU-scale training runs.
    pub fn desk_scale() -> Self {
        ModelConfig {
            resolution: 32,
            base_channels: 8,
            noise_dim: 32,
            mpn_rounds_per_scale: 1,
            pooling: Pooling::Sum,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !matches!(self.resolution, 32 | 64) {
            return Err(ModelError::Config(format!(
                "resolution {} not supported (expected 32 or 64)",
                self.resolution
            )));
        }
        if self.base_channels < 2 {
            return Err(ModelError::Config("base_channels must be at least 2".into()));
        }
        if self.noise_dim == 0 {
            return Err(ModelError::Config("noise_dim must be positive".into()));
        }
        if self.mpn_rounds_per_scale == 0 {
            return Err(ModelError::Config("mpn_rounds_per_scale must be positive".into()));
        }
        Ok(())
    }

    /// Number of ×2 upsamples from the 8×8 seed to full resolution.
    pub fn upsamples(&self) -> usize {
        (self.resolution / 8).trailing_zeros() as usize
    }

    /// Feature channels at scale `k` (k = 0 is 8×8, k = upsamples is full
    /// resolution): halved per upsample, floored at 4.
    pub fn channels(&self, k: usize) -> usize {
        ((2 * self.base_channels) >> k).max(4)
    }

    /// Strides of the three condition-encoder convolutions.
    fn cond_strides(&self) -> [usize; 3] {
        if self.upsamples() == 3 {
            [2, 2, 2]
        } else {
            [2, 2, 1]
        }
    }
}

// ── Parameters ─────────────────────────────────────────────────────────

/// An ordered collection of named tensors. Order is the build order of the
/// shape table and doubles as the optimizer-state order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index(name)]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams(pub ParamSet);

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams(pub ParamSet);

type ShapeTable = Vec<(String, Vec<usize>)>;

fn push_conv(t: &mut ShapeTable, name: &str, co: usize, ci: usize) {
    t.push((format!("{name}.w"), vec![co, ci, 3, 3]));
    t.push((format!("{name}.b"), vec![co]));
}

fn push_mpn(t: &mut ShapeTable, side: &str, cfg: &ModelConfig, k: usize) {
    let c = cfg.channels(k);
    for j in 0..cfg.mpn_rounds_per_scale {
        push_conv(t, &format!("{side}.mpn.s{k}.r{j}.c1"), c, 3 * c);
        push_conv(t, &format!("{side}.mpn.s{k}.r{j}.c2"), c, c);
    }
}

/// Generator parameter names and shapes, in build order.
pub fn generator_shapes(cfg: &ModelConfig) -> ShapeTable {
    let c = cfg.base_channels;
    let u = cfg.upsamples();
    let mut t = ShapeTable::new();
    t.push(("g.embed.w".into(), vec![c * 64, cfg.noise_dim + TYPE_COUNT]));
    t.push(("g.embed.b".into(), vec![c * 64]));
    let mut prev = 2;
    for i in 0..3 {
        push_conv(&mut t, &format!("g.cond{i}"), c, prev);
        prev = c;
    }
    for k in 0..u {
        push_mpn(&mut t, "g", cfg, k);
        push_conv(&mut t, &format!("g.up{k}"), cfg.channels(k + 1), cfg.channels(k));
    }
    push_conv(&mut t, "g.head", 1, cfg.channels(u));
    t
}

/// Critic parameter names and shapes, in build order.
pub fn discriminator_shapes(cfg: &ModelConfig) -> ShapeTable {
    let u = cfg.upsamples();
    let mut t = ShapeTable::new();
    push_conv(&mut t, "d.in", cfg.channels(u), 1 + TYPE_COUNT);
    for k in (0..u).rev() {
        push_conv(&mut t, &format!("d.down{k}"), cfg.channels(k), cfg.channels(k + 1));
        push_mpn(&mut t, "d", cfg, k);
    }
    t.push(("d.out.w".into(), vec![1, cfg.channels(0) * 64]));
    t.push(("d.out.b".into(), vec![1]));
    t
}

/// Center-tap identity boost for a conv weight `[co, ci, 3, 3]`. Each output
/// channel additionally passes one input channel straight through, so a
/// freshly initialized stack is structure-preserving: condition encodings
/// survive to the head instead of washing out in the random mixing, which
/// lets the conditioning term find the copy direction early in training.
fn identity_taps(name: &str, shape: &[usize], data: &mut [f32], tap: usize) {
    let (co, ci) = (shape[0], shape[1]);
    // Message-passing convolutions see [self; near; far]: pin the self block.
    // Channel-halving upsample convolutions stride over their inputs so both
    // halves of the seed volume (embedding and condition) keep a live path.
    let pick = |o: usize| if name.contains(".mpn.") { o } else { o * ci.div_ceil(co) };
    for o in 0..co {
        let i = pick(o).min(ci - 1);
        data[((o * ci + i) * 3 + tap) * 3 + tap] += 1.0;
    }
}

/// Index of the feature channel at full resolution that the identity taps
/// route the condition mask through (encoder output channel 0 enters the
/// seed volume at `base_channels` and survives each channel-halving pick).
fn cond_channel(cfg: &ModelConfig) -> usize {
    let mut o = cfg.base_channels;
    for k in 0..cfg.upsamples() {
        o = o * cfg.channels(k + 1) / cfg.channels(k);
    }
    o
}

fn init_set(cfg: &ModelConfig, table: ShapeTable, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut names = Vec::with_capacity(table.len());
    let mut tensors = Vec::with_capacity(table.len());
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        // Generator convolutions keep their random mixing small relative to
        // the identity taps below, so the copy prior is not drowned at init.
        let g_conv = name.starts_with("g.") && shape.len() == 4;
        let gain = if g_conv { 0.25 } else { 1.0 };
        let mut data = if name.ends_with(".b") {
            vec![0.0; n]
        } else {
            // Uniform He-style fan-in scaling.
            let fan_in: usize = shape[1..].iter().product();
            let lim = gain * (6.0 / fan_in as f32).sqrt();
            (0..n).map(|_| rng.gen_range(-lim..lim)).collect()
        };
        // The generator starts as an approximate condition copier: identity
        // taps keep the encoded mask alive through the decoder and the head
        // reads it against a background offset. Without this prior the
        // conditioning term's race against the all-background direction ends
        // in tanh saturation, where f32 gradients die and training stalls.
        // The copy must start below the all-background collapse floor
        // (z ≈ ±2.2 rather than ±1), otherwise the conditioning term's own
        // greedy descent dismantles it in favor of constant background.
        if g_conv {
            if name.starts_with("g.head") {
                data[(cond_channel(cfg) * 3 + 1) * 3 + 1] += 4.4;
            } else {
                identity_taps(&name, &shape, &mut data);
            }
        }
        if name == "g.head.b" {
            data[0] = -2.2;
        }
        names.push(name);
        tensors.push(Tensor::new(shape, data).expect("shape table is consistent"));
    }
    ParamSet { names, tensors }
}

/// Fresh parameters for both networks, deterministic under `seed`.
pub fn init_params(
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(GeneratorParams, DiscriminatorParams), ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = init_set(cfg, generator_shapes(cfg), &mut rng);
    let d = init_set(cfg, discriminator_shapes(cfg), &mut rng);
    Ok((GeneratorParams(g), DiscriminatorParams(d)))
}

/// Tape nodes for a parameter set, in set order.
pub struct ParamNodes<'a> {
    set: &'a ParamSet,
    pub ids: Vec<NodeId>,
}

impl<'a> ParamNodes<'a> {
    pub fn load(tape: &mut Tape, set: &'a ParamSet, requires_grad: bool) -> Self {
        let ids = set.tensors.iter().map(|t| tape.leaf_tensor(t, requires_grad)).collect();
        ParamNodes { set, ids }
    }

    pub fn get(&self, name: &str) -> NodeId {
        self.ids[self.set.index(name)]
    }
}

// ── Conditions ─────────────────────────────────────────────────────────

/// Optional per-component mask conditions. A conditioned component carries
/// its target mask (values ±1); an unconditioned one carries nothing, which
/// realizes as an all-zero two-channel image (mask, indicator).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    resolution: usize,
    entries: Vec<Option<Vec<f32>>>,
}

impl ConditionSet {
    pub fn new(
        resolution: usize,
        entries: Vec<Option<Vec<f32>>>,
    ) -> Result<Self, ModelError> {
        for (i, e) in entries.iter().enumerate() {
            if let Some(m) = e {
                if m.len() != resolution * resolution {
                    return Err(ModelError::Structure(format!(
                        "condition {i} has {} values, expected {}",
                        m.len(),
                        resolution * resolution
                    )));
                }
            }
        }
        Ok(ConditionSet { resolution, entries })
    }

    /// No component conditioned.
    pub fn none(n: usize, resolution: usize) -> Self {
        ConditionSet { resolution, entries: vec![None; n] }
    }

    /// Condition component `i` on `masks` where `include[i]` is set.
    pub fn from_masks(masks: &LayoutMasks, include: &[bool]) -> Self {
        let entries = include
            .iter()
            .enumerate()
            .map(|(i, &on)| on.then(|| masks.mask(i).to_vec()))
            .collect();
        ConditionSet { resolution: masks.resolution(), entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> Option<&[f32]> {
        self.entries[i].as_deref()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// The realized 2×R×R condition image: channel 0 the mask (zero when
    /// absent), channel 1 the constant indicator.
    fn image(&self, i: usize) -> Vec<f32> {
        let px = self.resolution * self.resolution;
        let mut img = vec![0.0; 2 * px];
        if let Some(m) = &self.entries[i] {
            img[..px].copy_from_slice(m);
            img[px..].fill(1.0);
        }
        img
    }
}

// ── Forward graphs ─────────────────────────────────────────────────────

fn conv_leaky(
    tape: &mut Tape,
    x: NodeId,
    pn: &ParamNodes,
    name: &str,
    stride: usize,
) -> Result<NodeId, NumericsError> {
    let w = pn.get(&format!("{name}.w"));
    let b = pn.get(&format!("{name}.b"));
    let y = tape.conv2d(x, w, Some(b), stride, 1)?;
    Ok(tape.leaky_relu(y, LEAKY_SLOPE))
}

/// Three stride-reducing convolutions taking a 2×R×R condition image to a
/// `base_channels`×8×8 encoding.
pub fn encode_condition_graph(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    image: NodeId,
) -> Result<NodeId, NumericsError> {
    let mut h = image;
    for (i, s) in cfg.cond_strides().into_iter().enumerate() {
        h = conv_leaky(tape, h, pn, &format!("g.cond{i}"), s)?;
    }
    Ok(h)
}

/// Type embedding + noise projected to `base_channels`×8×8, concatenated
/// with the condition encoding into the initial 2·base_channels×8×8 volume.
pub fn init_component_feature_graph(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    kind: crate::graphs::ComponentType,
    noise: &[f32],
    cond_encoding: NodeId,
) -> Result<NodeId, NumericsError> {
    let c = cfg.base_channels;
    let mut z = Vec::with_capacity(cfg.noise_dim + TYPE_COUNT);
    z.extend_from_slice(noise);
    z.extend_from_slice(&kind.one_hot());
    let z = tape.leaf(z, vec![cfg.noise_dim + TYPE_COUNT], false)?;
    let w = pn.get("g.embed.w");
    let b = pn.get("g.embed.b");
    let f = tape.linear(z, w, b)?;
    let f = tape.reshape(f, vec![c, 8, 8])?;
    tape.concat_channels(f, cond_encoding)
}

/// Pool `ids` (already in canonical order) into one volume; empty pools
/// contribute zeros of the given shape.
fn pool(
    tape: &mut Tape,
    ids: &[NodeId],
    shape: &[usize],
    pooling: Pooling,
) -> Result<NodeId, NumericsError> {
    if ids.is_empty() {
        return Ok(tape.zeros(shape.to_vec()));
    }
    let s = tape.add_many(ids)?;
    Ok(match pooling {
        Pooling::Sum => s,
        Pooling::Mean => tape.scale(s, 1.0 / ids.len() as f32),
    })
}

/// One synchronous message-passing round: every component is updated from
/// the concatenation of its own volume, its pooled neighbors, and its
/// pooled non-neighbors, through two 3×3 convolutions.
fn mpn_round(
    tape: &mut Tape,
    pn: &ParamNodes,
    graph: &ComponentGraph,
    feats: &[NodeId],
    prefix: &str,
    pooling: Pooling,
) -> Result<Vec<NodeId>, NumericsError> {
    let shape = tape.shape(feats[0]).to_vec();
    let mut out = Vec::with_capacity(feats.len());
    for i in 0..feats.len() {
        let near: Vec<NodeId> = graph.neighbors[i].iter().map(|&j| feats[j]).collect();
        let far: Vec<NodeId> = graph.complements[i].iter().map(|&j| feats[j]).collect();
        let near = pool(tape, &near, &shape, pooling)?;
        let far = pool(tape, &far, &shape, pooling)?;
        let cat = tape.concat_many(&[feats[i], near, far])?;
        let h = conv_leaky(tape, cat, pn, &format!("{prefix}.c1"), 1)?;
        let h = conv_leaky(tape, h, pn, &format!("{prefix}.c2"), 1)?;
        out.push(h);
    }
    Ok(out)
}

fn check_components(
    what: &str,
    got: usize,
    graph: &ComponentGraph,
) -> Result<(), ModelError> {
    if got != graph.components.len() {
        return Err(ModelError::Structure(format!(
            "{what}: {got} entries for {} components",
            graph.components.len()
        )));
    }
    Ok(())
}

/// Build the generator on `tape`: returns one 1×R×R mask node per
/// component, values in (−1, 1).
pub fn generator_graph(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    graph: &ComponentGraph,
    noise: &[Vec<f32>],
    cond: &ConditionSet,
) -> Result<Vec<NodeId>, ModelError> {
    let r = cfg.resolution;
    check_components("noise", noise.len(), graph)?;
    check_components("conditions", cond.len(), graph)?;
    if cond.resolution() != r {
        return Err(ModelError::Structure(format!(
            "condition resolution {} != model resolution {r}",
            cond.resolution()
        )));
    }
    for (i, z) in noise.iter().enumerate() {
        if z.len() != cfg.noise_dim {
            return Err(ModelError::Structure(format!(
                "noise {i} has {} values, expected {}",
                z.len(),
                cfg.noise_dim
            )));
        }
    }

    let mut feats = Vec::with_capacity(noise.len());
    for (i, c) in graph.components.iter().enumerate() {
        let img = tape.leaf(cond.image(i), vec![2, r, r], false)?;
        let enc = encode_condition_graph(tape, pn, cfg, img)?;
        feats.push(init_component_feature_graph(tape, pn, cfg, c.kind, &noise[i], enc)?);
    }
    for k in 0..cfg.upsamples() {
        for j in 0..cfg.mpn_rounds_per_scale {
            feats = mpn_round(tape, pn, graph, &feats, &format!("g.mpn.s{k}.r{j}"), cfg.pooling)?;
        }
        for f in feats.iter_mut() {
            let up = tape.upsample_nearest(*f, 2)?;
            *f = conv_leaky(tape, up, pn, &format!("g.up{k}"), 1)?;
        }
    }
    let mut masks = Vec::with_capacity(feats.len());
    for f in feats {
        let w = pn.get("g.head.w");
        let b = pn.get("g.head.b");
        let m = tape.conv2d(f, w, Some(b), 1, 1)?;
        masks.push(tape.tanh(m));
    }
    Ok(masks)
}

/// Build the critic on `tape` over per-component 1×R×R mask nodes: mirrored
/// downsampling with message passing, a canonical-order component sum at
/// 8×8, and a linear scalar head.
pub fn discriminator_graph(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    graph: &ComponentGraph,
    masks: &[NodeId],
) -> Result<NodeId, ModelError> {
    let r = cfg.resolution;
    check_components("masks", masks.len(), graph)?;
    let mut feats = Vec::with_capacity(masks.len());
    for (i, c) in graph.components.iter().enumerate() {
        if tape.shape(masks[i]) != [1, r, r] {
            return Err(ModelError::Structure(format!(
                "mask {i} has shape {:?}, expected [1, {r}, {r}]",
                tape.shape(masks[i])
            )));
        }
        // Type injection: one constant all-ones plane per type code.
        let mut planes = vec![0.0; TYPE_COUNT * r * r];
        let code = c.kind.code() as usize;
        planes[code * r * r..(code + 1) * r * r].fill(1.0);
        let planes = tape.leaf(planes, vec![TYPE_COUNT, r, r], false)?;
        let x = tape.concat_channels(masks[i], planes)?;
        feats.push(conv_leaky(tape, x, pn, "d.in", 1)?);
    }
    for k in (0..cfg.upsamples()).rev() {
        for f in feats.iter_mut() {
            *f = conv_leaky(tape, *f, pn, &format!("d.down{k}"), 2)?;
        }
        for j in 0..cfg.mpn_rounds_per_scale {
            feats = mpn_round(tape, pn, graph, &feats, &format!("d.mpn.s{k}.r{j}"), cfg.pooling)?;
        }
    }
    // Sum over components in canonical order, then the scalar head.
    let order = canonical_order(&graph.components);
    let ordered: Vec<NodeId> = order.iter().map(|&i| feats[i]).collect();
    let pooled = tape.add_many(&ordered)?;
    let flat = tape.reshape(pooled, vec![cfg.channels(0) * 64])?;
    let w = pn.get("d.out.w");
    let b = pn.get("d.out.b");
    let y = tape.linear(flat, w, b)?;
    Ok(tape.reshape(y, vec![])?)
}

// ── Convenience forwards (fresh tape, data out) ────────────────────────

/// Run the generator outside any training loop.
pub fn generator_forward(
    gp: &GeneratorParams,
    cfg: &ModelConfig,
    d: &BubbleDiagram,
    noise: &[Vec<f32>],
    cond: &ConditionSet,
) -> Result<LayoutMasks, ModelError> {
    let graph = ComponentGraph::build(d);
    let mut tape = Tape::new();
    let pn = ParamNodes::load(&mut tape, &gp.0, false);
    let ids = generator_graph(&mut tape, &pn, cfg, &graph, noise, cond)?;
    let masks: Vec<Vec<f32>> = ids.iter().map(|&id| tape.value(id).to_vec()).collect();
    Ok(LayoutMasks::new(cfg.resolution, masks).expect("generator output shape"))
}

/// Run the critic outside any training loop.
pub fn discriminator_forward(
    dp: &DiscriminatorParams,
    cfg: &ModelConfig,
    d: &BubbleDiagram,
    masks: &LayoutMasks,
) -> Result<f32, ModelError> {
    let graph = ComponentGraph::build(d);
    if masks.resolution() != cfg.resolution {
        return Err(ModelError::Structure(format!(
            "mask resolution {} != model resolution {}",
            masks.resolution(),
            cfg.resolution
        )));
    }
    let mut tape = Tape::new();
    let pn = ParamNodes::load(&mut tape, &dp.0, false);
    let r = cfg.resolution;
    let ids: Result<Vec<NodeId>, NumericsError> = (0..masks.len())
        .map(|i| tape.leaf(masks.mask(i).to_vec(), vec![1, r, r], false))
        .collect();
    let out = discriminator_graph(&mut tape, &pn, cfg, &graph, &ids?)?;
    Ok(tape.scalar_value(out))
}

/// Encode one 2×R×R condition image to `base_channels`×8×8.
pub fn encode_condition(
    gp: &GeneratorParams,
    cfg: &ModelConfig,
    image: &[f32],
) -> Result<Tensor, ModelError> {
    let r = cfg.resolution;
    if image.len() != 2 * r * r {
        return Err(ModelError::Structure(format!(
            "condition image has {} values, expected {}",
            image.len(),
            2 * r * r
        )));
    }
    let mut tape = Tape::new();
    let pn = ParamNodes::load(&mut tape, &gp.0, false);
    let img = tape.leaf(image.to_vec(), vec![2, r, r], false)?;
    let enc = encode_condition_graph(&mut tape, &pn, cfg, img)?;
    Ok(Tensor::new(tape.shape(enc).to_vec(), tape.value(enc).to_vec())?)
}

/// Initialize one component's 2·base_channels×8×8 feature volume.
pub fn init_component_feature(
    gp: &GeneratorParams,
    cfg: &ModelConfig,
    kind: crate::graphs::ComponentType,
    noise: &[f32],
    cond_encoding: &Tensor,
) -> Result<Tensor, ModelError> {
    if noise.len() != cfg.noise_dim {
        return Err(ModelError::Structure(format!(
            "noise has {} values, expected {}",
            noise.len(),
            cfg.noise_dim
        )));
    }
    let mut tape = Tape::new();
    let pn = ParamNodes::load(&mut tape, &gp.0, false);
    let enc = tape.leaf_tensor(cond_encoding, false);
    let f = init_component_feature_graph(&mut tape, &pn, cfg, kind, noise, enc)?;
    Ok(Tensor::new(tape.shape(f).to_vec(), tape.value(f).to_vec())?)
}

// ── Checkpoints ────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"LGPP";
const VERSION: u32 = 1;

/// Write named tensors in the binary checkpoint format, plus a JSON side
/// manifest at `<path>.json`.
pub fn write_checkpoint(
    path: &Path,
    manifest: &serde_json::Value,
    tensors: &[(&str, &Tensor)],
) -> Result<(), ModelError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).unwrap().to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        out.extend_from_slice(&u16::try_from(bytes.len()).unwrap().to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(u8::try_from(t.shape.len()).unwrap());
        for &d in &t.shape {
            out.extend_from_slice(&u32::try_from(d).unwrap().to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    let side = manifest_path(path);
    let body = serde_json::to_vec_pretty(manifest).expect("manifest serialization");
    std::fs::write(&side, body).map_err(|e| io_err(&side, e))
}

/// Side-manifest path for a checkpoint: `<path>.json`.
pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

struct Cursor<'a> {
    buf: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.off < n {
            return Err(ModelError::Format(format!("{}: truncated", self.path.display())));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Read a checkpoint written by [`write_checkpoint`]: the JSON manifest and
/// the named tensors in file order.
pub fn read_checkpoint(
    path: &Path,
) -> Result<(serde_json::Value, Vec<(String, Tensor)>), ModelError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let fail = |what: &str| ModelError::Format(format!("{}: {what}", path.display()));
    let mut r = Cursor { buf: &bytes, off: 0, path };
    if r.take(4)? != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| fail("tensor name is not UTF-8"))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.off != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    let side = manifest_path(path);
    let body = std::fs::read(&side).map_err(|e| io_err(&side, e))?;
    let manifest = serde_json::from_slice(&body)
        .map_err(|e| ModelError::Format(format!("{}: {e}", side.display())))?;
    Ok((manifest, tensors))
}

/// Save both parameter sets with the config as manifest.
pub fn save_model(
    path: &Path,
    cfg: &ModelConfig,
    gp: &GeneratorParams,
    dp: &DiscriminatorParams,
) -> Result<(), ModelError> {
    let manifest = serde_json::json!({ "model": cfg });
    let tensors: Vec<(&str, &Tensor)> = gp
        .0
        .names
        .iter()
        .zip(&gp.0.tensors)
        .chain(dp.0.names.iter().zip(&dp.0.tensors))
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    write_checkpoint(path, &manifest, &tensors)
}

/// Split checkpoint tensors back into validated parameter sets for `cfg`.
pub fn assemble_params(
    cfg: &ModelConfig,
    tensors: &[(String, Tensor)],
) -> Result<(GeneratorParams, DiscriminatorParams), ModelError> {
    cfg.validate()?;
    let build = |table: ShapeTable| -> Result<ParamSet, ModelError> {
        let mut names = Vec::with_capacity(table.len());
        let mut out = Vec::with_capacity(table.len());
        for (name, shape) in table {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| ModelError::Format(format!("missing tensor {name}")))?;
            if t.1.shape != shape {
                return Err(ModelError::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.1.shape
                )));
            }
            names.push(name);
            out.push(t.1.clone());
        }
        Ok(ParamSet { names, tensors: out })
    };
    let g = build(generator_shapes(cfg))?;
    let d = build(discriminator_shapes(cfg))?;
    Ok((GeneratorParams(g), DiscriminatorParams(d)))
}

/// Load a model checkpoint written by [`save_model`].
pub fn load_model(
    path: &Path,
) -> Result<(ModelConfig, GeneratorParams, DiscriminatorParams), ModelError> {
    let (manifest, tensors) = read_checkpoint(path)?;
    let cfg: ModelConfig = serde_json::from_value(
        manifest
            .get("model")
            .cloned()
            .ok_or_else(|| ModelError::Format("manifest lacks a model entry".into()))?,
    )
    .map_err(|e| ModelError::Format(format!("manifest model entry: {e}")))?;
    let (gp, dp) = assemble_params(&cfg, &tensors)?;
    Ok((cfg, gp, dp))
}
