//! Layout quality metrics and the sampled evaluation protocol.
//!
//! Diversity compares generated layouts to reference layouts by the Fréchet
//! distance between Gaussians fitted to fixed random-convolution embeddings
//! of their rasters. Compatibility measures how faithfully layouts realize
//! their input bubble diagrams, as the mean edit distance between each input
//! diagram and the one read back from the masks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{rasterize, splitmix64, Dataset, FoldSpec, Image, Sample};
use crate::graphs::{
    compatibility_distance, extract_diagram, BubbleDiagram, GraphError, LayoutMasks,
    DOOR_DILATION,
};
use crate::model::{GeneratorParams, ModelConfig, ModelError};
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::refine::{refine, RefineError, RefinementScheme};

/// Width of the feature vector produced by [`EmbeddingNet`].
pub const EMBED_DIM: usize = 64;

/// Seed fixing the embedding parameters. The encoder is never trained, so
/// its weights are a pure function of this constant and scores computed in
/// different runs live in the same feature space.
pub const EMBEDDING_SEED: u64 = 0xFEA7;

/// Fewest samples per side accepted by [`diversity_score`]: one more than
/// the embedding width, so the fitted covariance can reach full rank.
pub const MIN_DIVERSITY_SAMPLES: usize = EMBED_DIM + 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics config: {0}")]
    Config(String),
    #[error("expected a {expected}x{expected} image, got {width}x{height}")]
    Resolution { expected: usize, width: usize, height: usize },
    #[error("{side} side has {got} samples, needs at least {need}")]
    TooFewSamples { side: &'static str, got: usize, need: usize },
    #[error("{what} contains a non-finite value")]
    NonFinite { what: &'static str },
    #[error("gaussian fits have dimensions {a} and {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("empty sample list")]
    Empty,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

// ── Embedding ───────────────────────────────────────────────────────────

/// Channel widths of the four stride-2 stages.
const STAGE_CHANNELS: [usize; 4] = [16, 32, 64, 128];
const LEAKY_SLOPE: f32 = 0.1;

/// Fixed randomly initialized convolutional encoder: RGB raster → 64-d
/// feature. Four stride-2 convolutions with leaky activations, a global
/// average pool, and a linear head. Never trained — its only job is to give
/// the Fréchet metric a stable feature space.
pub struct EmbeddingNet {
    resolution: usize,
    convs: Vec<(Tensor, Tensor)>,
    head_w: Tensor,
    head_b: Tensor,
}

impl EmbeddingNet {
    /// Build the encoder for `resolution`-square inputs from
    /// [`EMBEDDING_SEED`].
    pub fn new(resolution: usize) -> Result<Self, MetricsError> {
        if resolution < 16 {
            return Err(MetricsError::Config(format!(
                "resolution {resolution} too small for four stride-2 stages (minimum 16)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(EMBEDDING_SEED);
        let mut normal = |n: usize, std: f32| -> Vec<f32> {
            (0..n)
                .map(|_| {
                    let v: f32 = rng.sample(StandardNormal);
                    v * std
                })
                .collect()
        };
        let mut convs = Vec::new();
        let mut ci = 3;
        for &co in &STAGE_CHANNELS {
            let std = (2.0 / (ci * 9) as f32).sqrt();
            let w = Tensor::new(vec![co, ci, 3, 3], normal(co * ci * 9, std)).expect("sized");
            let b = Tensor::new(vec![co], normal(co, 0.1)).expect("sized");
            convs.push((w, b));
            ci = co;
        }
        let std = (2.0 / ci as f32).sqrt();
        let head_w = Tensor::new(vec![EMBED_DIM, ci], normal(EMBED_DIM * ci, std)).expect("sized");
        let head_b = Tensor::new(vec![EMBED_DIM], normal(EMBED_DIM, 0.1)).expect("sized");
        Ok(Self { resolution, convs, head_w, head_b })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Embed one raster into [`EMBED_DIM`] features.
    pub fn embed(&self, image: &Image) -> Result<Vec<f32>, MetricsError> {
        let r = self.resolution;
        if image.width != r || image.height != r {
            return Err(MetricsError::Resolution {
                expected: r,
                width: image.width,
                height: image.height,
            });
        }
        // Interleaved u8 rows → planar f32 channels in [0, 1].
        let mut planes = vec![0.0f32; 3 * r * r];
        for px in 0..r * r {
            for c in 0..3 {
                planes[c * r * r + px] = f32::from(image.rgb[px * 3 + c]) / 255.0;
            }
        }
        let mut tape = Tape::new();
        let mut x = tape.leaf(planes, vec![3, r, r], false)?;
        for (w, b) in &self.convs {
            let wn = tape.leaf_tensor(w, false);
            let bn = tape.leaf_tensor(b, false);
            x = tape.conv2d(x, wn, Some(bn), 2, 1)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        let spatial: usize = tape.shape(x)[1..].iter().product();
        let sums = tape.spatial_sum(x)?;
        let pooled = tape.scale(sums, 1.0 / spatial as f32);
        let wn = tape.leaf_tensor(&self.head_w, false);
        let bn = tape.leaf_tensor(&self.head_b, false);
        let feat = tape.linear(pooled, wn, bn)?;
        let out = tape.value(feat).to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite { what: "embedding" });
        }
        Ok(out)
    }
}

// ── Gaussian fits and the Fréchet distance ──────────────────────────────

/// Mean and covariance summary of a feature cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianFit {
    /// Wrap a precomputed mean and row-major covariance. The covariance must
    /// be symmetric within 1e-9 and have eigenvalues ≥ −1e-8.
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self, MetricsError> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(MetricsError::Config(format!(
                "covariance has {} entries, expected {}",
                covariance.len(),
                d * d
            )));
        }
        if mean.iter().chain(&covariance).any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite { what: "gaussian fit" });
        }
        let cov = DMatrix::from_row_slice(d, d, &covariance);
        if (&cov - cov.transpose()).amax() > 1e-9 {
            return Err(MetricsError::Config("covariance is not symmetric".into()));
        }
        let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
        if d > 0 && min_eig < -1e-8 {
            return Err(MetricsError::Config(format!(
                "covariance has negative eigenvalue {min_eig:e}"
            )));
        }
        Ok(Self { mean: DVector::from_vec(mean), covariance: cov })
    }

    /// Fit mean and unbiased covariance to a cloud of feature rows.
    pub fn from_features(features: &[Vec<f32>]) -> Result<Self, MetricsError> {
        if features.len() < 2 {
            return Err(MetricsError::TooFewSamples {
                side: "feature",
                got: features.len(),
                need: 2,
            });
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(MetricsError::Config("feature rows have mixed widths".into()));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite { what: "features" });
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0f64; d];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += f64::from(v);
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut cov = vec![0.0f64; d * d];
        let mut centered = vec![0.0f64; d];
        for f in features {
            for (c, (&v, m)) in centered.iter_mut().zip(f.iter().zip(&mean)) {
                *c = f64::from(v) - m;
            }
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += centered[i] * centered[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1.0);
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    /// Row-major covariance entries (symmetric, so also column-major).
    pub fn covariance(&self) -> &[f64] {
        self.covariance.as_slice()
    }
}

/// An eigenvalue below this is treated as exactly zero when taking matrix
/// square roots: fitted covariances are PSD only up to roundoff.
const EIG_FLOOR: f64 = 1e-8;

fn clamped_sqrt(l: f64) -> f64 {
    if l < EIG_FLOOR {
        0.0
    } else {
        l.sqrt()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| clamped_sqrt(l)),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between two Gaussians:
/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)`, with the matrix square root taken
/// through the symmetric eigendecomposition of `Σa^½ Σb Σa^½`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch { a: a.dim(), b: b.dim() });
    }
    let dmu = (&a.mean - &b.mean).norm_squared();
    let sa_half = psd_sqrt(&a.covariance);
    let inner = &sa_half * &b.covariance * &sa_half;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner.symmetric_eigen().eigenvalues.iter().map(|&l| clamped_sqrt(l)).sum();
    let d2 = dmu + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_sqrt;
    // Exact in reals; tiny negatives here are pure roundoff.
    Ok(d2.max(0.0))
}

// ── Scores over sample sets ─────────────────────────────────────────────

/// Fréchet distance between the embedding Gaussians of generated layouts
/// and reference samples. Lower means the generated set is closer to the
/// reference distribution in feature space.
pub fn diversity_score(
    net: &EmbeddingNet,
    generated: &[(BubbleDiagram, LayoutMasks)],
    reference: &[Sample],
) -> Result<f64, MetricsError> {
    if generated.len() < MIN_DIVERSITY_SAMPLES {
        return Err(MetricsError::TooFewSamples {
            side: "generated",
            got: generated.len(),
            need: MIN_DIVERSITY_SAMPLES,
        });
    }
    if reference.len() < MIN_DIVERSITY_SAMPLES {
        return Err(MetricsError::TooFewSamples {
            side: "reference",
            got: reference.len(),
            need: MIN_DIVERSITY_SAMPLES,
        });
    }
    let mut gen_feats = Vec::with_capacity(generated.len());
    for (d, m) in generated {
        gen_feats.push(net.embed(&rasterize(m, d)?)?);
    }
    let mut ref_feats = Vec::with_capacity(reference.len());
    for s in reference {
        ref_feats.push(net.embed(&rasterize(&s.gt_masks, &s.diagram)?)?);
    }
    frechet_distance(
        &GaussianFit::from_features(&gen_feats)?,
        &GaussianFit::from_features(&ref_feats)?,
    )
}

/// Mean edit distance between each input diagram and the diagram read back
/// from its generated masks. Zero means every layout realizes its diagram
/// exactly.
pub fn compatibility_score(
    generated: &[(BubbleDiagram, LayoutMasks)],
) -> Result<f64, MetricsError> {
    if generated.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = 0usize;
    for (d, m) in generated {
        let out = extract_diagram(m, d, DOOR_DILATION)?;
        total += compatibility_distance(d, &out);
    }
    Ok(total as f64 / generated.len() as f64)
}

// ── Evaluation protocol ─────────────────────────────────────────────────

/// Settings for [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Diagrams drawn (with replacement) from the test fold per round.
    pub n_samples: usize,
    /// Independent rounds; reported statistics are mean ± std over them.
    pub rounds: usize,
    /// Base seed; every round derives its own stream from it.
    pub seed: u64,
    /// Threads refining and embedding samples. Results are identical for
    /// any worker count.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 1000, rounds: 5, seed: 0, workers: 1 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.n_samples < MIN_DIVERSITY_SAMPLES {
            return Err(MetricsError::TooFewSamples {
                side: "generated",
                got: self.n_samples,
                need: MIN_DIVERSITY_SAMPLES,
            });
        }
        if self.rounds == 0 {
            return Err(MetricsError::Config("rounds must be positive".into()));
        }
        if self.workers == 0 {
            return Err(MetricsError::Config("workers must be positive".into()));
        }
        Ok(())
    }
}

/// Evaluation summary: per-round metric values, their spread, and an echo
/// of the settings that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub diversity_mean: f64,
    pub diversity_std: f64,
    pub compatibility_mean: f64,
    pub compatibility_std: f64,
    pub round_diversity: Vec<f64>,
    pub round_compatibility: Vec<f64>,
    pub n_samples: usize,
    pub rounds: usize,
    pub seed: u64,
    pub test_fold_size: usize,
    pub held_out_room_count: usize,
    pub resolution: usize,
    pub scheme: RefinementScheme,
}

/// Mean and population standard deviation (so a single round reports 0).
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run `f` over `items` on up to `workers` threads, preserving order.
pub(crate) fn map_parallel<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>, MetricsError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, MetricsError> + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| -> Result<(), MetricsError> {
        let mut handles = Vec::new();
        for (slot, work) in out.chunks_mut(chunk).zip(items.chunks(chunk)) {
            let f = &f;
            handles.push(scope.spawn(move || -> Result<(), MetricsError> {
                for (o, item) in slot.iter_mut().zip(work) {
                    *o = Some(f(item)?);
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("metrics worker panicked")?;
        }
        Ok(())
    })?;
    Ok(out.into_iter().map(|o| o.expect("all slots filled")).collect())
}

/// Refine one test diagram and reduce it to its evaluation outputs: the
/// final layout's embedding and its edit distance to the input diagram.
fn eval_one(
    gp: &GeneratorParams,
    mc: &ModelConfig,
    net: &EmbeddingNet,
    d: &BubbleDiagram,
    scheme: &RefinementScheme,
    seed: u64,
) -> Result<(Vec<f32>, usize), MetricsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = refine(gp, mc, d, scheme, &mut rng)?;
    let masks = traj.final_masks();
    let feat = net.embed(&rasterize(masks, d)?)?;
    let out = extract_diagram(masks, d, DOOR_DILATION)?;
    Ok((feat, compatibility_distance(d, &out)))
}

/// Sampled evaluation: per round, draw `n_samples` test diagrams with
/// replacement, refine each under `scheme`, and score the final layouts for
/// diversity (against the whole test fold's ground truth) and compatibility.
/// Statistics are reported over rounds. Bit-reproducible for a fixed seed,
/// independent of `workers`.
pub fn evaluate(
    gp: &GeneratorParams,
    mc: &ModelConfig,
    ds: &Dataset,
    fold: &FoldSpec,
    scheme: &RefinementScheme,
    cfg: &EvalConfig,
) -> Result<EvalReport, MetricsError> {
    cfg.validate()?;
    scheme.validate()?;
    if mc.resolution != ds.resolution {
        return Err(MetricsError::Config(format!(
            "model resolution {} does not match dataset resolution {}",
            mc.resolution, ds.resolution
        )));
    }
    let test: Vec<&Sample> = fold
        .test_ids
        .iter()
        .map(|id| {
            ds.sample(id)
                .ok_or_else(|| MetricsError::Config(format!("test id {id} not in dataset")))
        })
        .collect::<Result<_, _>>()?;
    if test.len() < MIN_DIVERSITY_SAMPLES {
        return Err(MetricsError::TooFewSamples {
            side: "reference",
            got: test.len(),
            need: MIN_DIVERSITY_SAMPLES,
        });
    }
    let net = EmbeddingNet::new(ds.resolution)?;
    let ref_feats = map_parallel(&test, cfg.workers, |s| {
        net.embed(&rasterize(&s.gt_masks, &s.diagram)?)
    })?;
    let ref_fit = GaussianFit::from_features(&ref_feats)?;

    let mut round_diversity = Vec::with_capacity(cfg.rounds);
    let mut round_compatibility = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ (round as u64).rotate_left(17)));
        // Draw the round's picks and per-sample seeds up front so the
        // worker count cannot perturb the stream.
        let jobs: Vec<(usize, u64)> = (0..cfg.n_samples)
            .map(|_| (rng.gen_range(0..test.len()), rng.gen()))
            .collect();
        let results = map_parallel(&jobs, cfg.workers, |&(pick, seed)| {
            eval_one(gp, mc, &net, &test[pick].diagram, scheme, seed)
        })?;
        let feats: Vec<Vec<f32>> = results.iter().map(|(f, _)| f.clone()).collect();
        let total: usize = results.iter().map(|(_, d)| d).sum();
        round_diversity.push(frechet_distance(&GaussianFit::from_features(&feats)?, &ref_fit)?);
        round_compatibility.push(total as f64 / cfg.n_samples as f64);
    }
    let (diversity_mean, diversity_std) = mean_std(&round_diversity);
    let (compatibility_mean, compatibility_std) = mean_std(&round_compatibility);
    Ok(EvalReport {
        diversity_mean,
        diversity_std,
        compatibility_mean,
        compatibility_std,
        round_diversity,
        round_compatibility,
        n_samples: cfg.n_samples,
        rounds: cfg.rounds,
        seed: cfg.seed,
        test_fold_size: test.len(),
        held_out_room_count: fold.held_out_room_count,
        resolution: ds.resolution,
        scheme: scheme.clone(),
    })
}
