//! Autoregressive rollouts in latent space.
//!
//! Every step the forecaster emits a Gaussian `(ẑ, σ)`, a latent
//! `z̃ = ẑ + ε` is chosen, decoded to a pose with the inverse pose transform,
//! and fed back as the next input. The strategies differ only in `ε`:
//!
//! * mean: `ε = 0`;
//! * random: `ε = β σ ⊙ g` with `g ~ N(0, I)`;
//! * quantile `q`: `ε = β Φ⁻¹(1 − q) σ ⊙ s`, one sign vector `s` per sequence;
//! * Poisson disk: random, but first-step draws `g` are rejected until they
//!   are pairwise at least `r` apart.
//!
//! Sample `i` draws from ChaCha stream `i` of the seed, so results do not
//! depend on batch composition or evaluation order.

mod gaussian;

pub use gaussian::{chi_cdf, frame_quantile, normal_cdf, normal_inv_cdf, FrameQuantile};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BoundModel, MotionModel};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::pfm::{HiddenVars, LatentGaussian};
use crate::skeleton::MotionSequence;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid rollout configuration: {0}")]
    InvalidConfig(String),
    #[error("observation is empty")]
    EmptyObservation,
    #[error("observation width {found} does not match the model width {expected}")]
    Width { expected: usize, found: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    Mean,
    Random,
    Quantile { q: f64 },
    PoissonDisk { radius: f64, max_tries: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    /// Sampling scale on the predicted standard deviation.
    pub beta: f64,
    pub samples: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl RolloutConfig {
    pub fn new(horizon: usize, samples: usize, strategy: Strategy, seed: u64) -> Self {
        Self { horizon, beta: 1.0, samples, strategy, seed }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: String| Err(DynamicsError::InvalidConfig(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        if self.samples == 0 {
            return bad("sample count must be at least 1".into());
        }
        match self.strategy {
            Strategy::Quantile { q } => check_quantile(q)?,
            Strategy::PoissonDisk { radius, max_tries } => {
                if !(radius.is_finite() && radius >= 0.0) {
                    return bad(format!("disk radius must be non-negative, got {radius}"));
                }
                if max_tries == 0 {
                    return bad("max_tries must be at least 1".into());
                }
            }
            Strategy::Mean | Strategy::Random => {}
        }
        Ok(())
    }
}

fn check_quantile(q: f64) -> Result<(), DynamicsError> {
    if q > 0.0 && q <= 0.5 {
        Ok(())
    } else {
        Err(DynamicsError::InvalidConfig(format!("quantile {q} outside (0, 0.5]")))
    }
}

/// One decoded rollout with its latent trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub poses: MotionSequence,
    /// Latent fed back at each step (`z̃`).
    pub latents: Vec<Vec<f64>>,
    /// Predicted Gaussian at each step.
    pub gaussians: Vec<LatentGaussian>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledSequence {
    pub forecast: Forecast,
    /// Sequence-level quantile tag, when sampled by quantile.
    pub quantile: Option<f64>,
    /// RNG stream the sample drew from.
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastBundle {
    pub mean: Forecast,
    pub samples: Vec<SampledSequence>,
    /// Non-fatal events such as Poisson-disk radius reductions.
    pub warnings: Vec<String>,
}

impl ForecastBundle {
    pub fn sample_poses(&self) -> Vec<&MotionSequence> {
        self.samples.iter().map(|s| &s.forecast.poses).collect()
    }
}

/// Graph nodes of an unrolled forecast, one entry per step.
pub(crate) struct Unrolled {
    pub means: Vec<Var>,
    pub stds: Vec<Var>,
    pub latents: Vec<Var>,
    pub poses: Vec<Var>,
}

/// Maps observed pose frames (each `batch × width`) to latents and steps the
/// forecaster through them.
pub(crate) fn encode_graph(
    model: &MotionModel,
    g: &mut Graph,
    bound: &BoundModel,
    observed: &[Var],
) -> Result<HiddenVars, NumericsError> {
    let batch = g.shape(observed[0]).0;
    let mut h = model.pfm.bind_state(g, &model.pfm.init_state(batch));
    for &x in observed {
        let z = model.ptm.forward_graph(g, &bound.ptm, x)?;
        h = model.pfm.step_graph(g, &bound.pfm, z, &h)?;
    }
    Ok(h)
}

/// Rolls `horizon` steps forward from an encoded history. `choose` picks the
/// latent to emit and feed back from the step's mean and std.
pub(crate) fn unroll_graph(
    model: &MotionModel,
    g: &mut Graph,
    bound: &BoundModel,
    mut h: HiddenVars,
    horizon: usize,
    mut choose: impl FnMut(&mut Graph, usize, Var, Var) -> Result<Var, NumericsError>,
) -> Result<Unrolled, NumericsError> {
    let mut out = Unrolled { means: vec![], stds: vec![], latents: vec![], poses: vec![] };
    for step in 0..horizon {
        let gauss = model.pfm.emit_graph(g, &bound.pfm, &h)?;
        let z = choose(g, step, gauss.mean, gauss.std)?;
        let x = model.ptm.inverse_graph(g, &bound.ptm, z)?;
        out.means.push(gauss.mean);
        out.stds.push(gauss.std);
        out.latents.push(z);
        out.poses.push(x);
        if step + 1 < horizon {
            h = model.pfm.step_graph(g, &bound.pfm, z, &h)?;
        }
    }
    Ok(out)
}

/// Per-row offset generator used by [`run_batch`].
trait Offsets {
    /// `β`-scaled offset for one row at one step, given that row's σ.
    fn offset(&mut self, row: usize, step: usize, sigma: &[f64], out: &mut [f64]);
}

struct NoOffset;

impl Offsets for NoOffset {
    fn offset(&mut self, _: usize, _: usize, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_normals(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f64> {
    (0..dims).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gaussian offsets; the first step may be supplied in advance (Poisson disk).
struct GaussianOffsets {
    beta: f64,
    rngs: Vec<ChaCha8Rng>,
    first: Vec<Option<Vec<f64>>>,
}

impl Offsets for GaussianOffsets {
    fn offset(&mut self, row: usize, step: usize, sigma: &[f64], out: &mut [f64]) {
        let g = match (step, self.first[row].take()) {
            (0, Some(g)) => g,
            _ => draw_normals(&mut self.rngs[row], sigma.len()),
        };
        for ((o, s), g) in out.iter_mut().zip(sigma).zip(g) {
            *o = self.beta * s * g;
        }
    }
}

struct QuantileOffsets {
    magnitude: f64,
    signs: Vec<Vec<f64>>,
}

impl Offsets for QuantileOffsets {
    fn offset(&mut self, row: usize, _: usize, sigma: &[f64], out: &mut [f64]) {
        for ((o, s), sign) in out.iter_mut().zip(sigma).zip(&self.signs[row]) {
            *o = self.magnitude * s * sign;
        }
    }
}

fn check_observed(model: &MotionModel, observed: &MotionSequence) -> Result<(), DynamicsError> {
    if observed.is_empty() {
        return Err(DynamicsError::EmptyObservation);
    }
    if observed.width() != model.width() {
        return Err(DynamicsError::Width { expected: model.width(), found: observed.width() });
    }
    Ok(())
}

/// Runs `rows` rollouts from one observation as a single batch.
fn run_batch(
    model: &MotionModel,
    observed: &MotionSequence,
    horizon: usize,
    rows: usize,
    offsets: &mut dyn Offsets,
    mean_only: bool,
) -> Result<Vec<Forecast>, DynamicsError> {
    check_observed(model, observed)?;
    let width = model.width();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let frames: Vec<Var> = observed.frames().map(|f| g.input(Tensor::row_vector(f.to_vec()))).collect();
    let h = encode_graph(model, &mut g, &bound, &frames)?;
    let h = if rows == 1 {
        h
    } else {
        let ones = g.input(Tensor::full(rows, 1, 1.0));
        HiddenVars(h.0.iter().map(|&v| g.matmul(ones, v)).collect::<Result<_, _>>()?)
    };

    let unrolled = unroll_graph(model, &mut g, &bound, h, horizon, |g, step, mean, std| {
        if mean_only {
            return Ok(mean);
        }
        let sigma = g.value(std).clone();
        let mut eps = vec![0.0; rows * width];
        for (r, chunk) in eps.chunks_exact_mut(width).enumerate() {
            offsets.offset(r, step, sigma.row(r), chunk);
        }
        let eps = g.input(Tensor::matrix(rows, width, eps));
        g.add(mean, eps)
    })?;

    let id = format!("{}-forecast", observed.id);
    (0..rows)
        .map(|r| {
            let poses: Vec<Vec<f64>> = unrolled.poses.iter().map(|&v| g.value(v).row(r).to_vec()).collect();
            Ok(Forecast {
                poses: MotionSequence::from_frames(id.clone(), observed.fps, &poses)
                    .map_err(|e| DynamicsError::InvalidConfig(e.to_string()))?,
                latents: unrolled.latents.iter().map(|&v| g.value(v).row(r).to_vec()).collect(),
                gaussians: unrolled
                    .means
                    .iter()
                    .zip(&unrolled.stds)
                    .map(|(&m, &s)| LatentGaussian { mean: g.value(m).row(r).to_vec(), std: g.value(s).row(r).to_vec() })
                    .collect(),
            })
        })
        .collect()
}

/// Deterministic rollout that feeds back the predicted mean every step.
pub fn rollout_mean(model: &MotionModel, observed: &MotionSequence, horizon: usize) -> Result<Forecast, DynamicsError> {
    if horizon == 0 {
        return Err(DynamicsError::InvalidConfig("horizon must be at least 1".into()));
    }
    Ok(run_batch(model, observed, horizon, 1, &mut NoOffset, true)?.remove(0))
}

fn bundle(
    model: &MotionModel,
    observed: &MotionSequence,
    config: &RolloutConfig,
    offsets: &mut dyn Offsets,
    quantile: Option<f64>,
    streams: Vec<u64>,
    warnings: Vec<String>,
) -> Result<ForecastBundle, DynamicsError> {
    let mean = rollout_mean(model, observed, config.horizon)?;
    let forecasts = run_batch(model, observed, config.horizon, streams.len(), offsets, false)?;
    let samples = forecasts
        .into_iter()
        .zip(streams)
        .map(|(forecast, stream)| SampledSequence { forecast, quantile, stream })
        .collect();
    Ok(ForecastBundle { mean, samples, warnings })
}

/// Draws `config.samples` sequences with the configured strategy.
pub fn rollout_sample(
    model: &MotionModel,
    observed: &MotionSequence,
    config: &RolloutConfig,
) -> Result<ForecastBundle, DynamicsError> {
    config.validate()?;
    let s = config.samples;
    match config.strategy {
        Strategy::Mean => {
            let mean = rollout_mean(model, observed, config.horizon)?;
            let samples = (0..s as u64)
                .map(|stream| SampledSequence { forecast: mean.clone(), quantile: None, stream })
                .collect();
            Ok(ForecastBundle { mean, samples, warnings: vec![] })
        }
        Strategy::Random => {
            let streams: Vec<u64> = (0..s as u64).collect();
            let mut offsets = GaussianOffsets {
                beta: config.beta,
                rngs: streams.iter().map(|&i| stream_rng(config.seed, i)).collect(),
                first: vec![None; s],
            };
            bundle(model, observed, config, &mut offsets, None, streams, vec![])
        }
        Strategy::Quantile { q } => {
            let streams: Vec<u64> = (0..s as u64).collect();
            let mut offsets = quantile_offsets(q, config.beta, model.width(), config.seed, &streams);
            bundle(model, observed, config, &mut offsets, Some(q), streams, vec![])
        }
        Strategy::PoissonDisk { radius, max_tries } => {
            poisson_disk_latent_set(model, observed, config, radius, max_tries)
        }
    }
}

fn quantile_offsets(q: f64, beta: f64, width: usize, seed: u64, streams: &[u64]) -> QuantileOffsets {
    QuantileOffsets {
        magnitude: beta * normal_inv_cdf(1.0 - q),
        signs: streams
            .iter()
            .map(|&i| {
                let mut rng = stream_rng(seed, i);
                (0..width).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
            })
            .collect(),
    }
}

/// One sequence whose every step sits at the same tail level `q`; `q = 0.5`
/// reproduces the mean rollout exactly.
pub fn sample_quantile_sequence(
    model: &MotionModel,
    observed: &MotionSequence,
    q: f64,
    beta: f64,
    horizon: usize,
    seed: u64,
) -> Result<SampledSequence, DynamicsError> {
    check_quantile(q)?;
    if horizon == 0 {
        return Err(DynamicsError::InvalidConfig("horizon must be at least 1".into()));
    }
    let mut offsets = quantile_offsets(q, beta, model.width(), seed, &[0]);
    let forecast = run_batch(model, observed, horizon, 1, &mut offsets, false)?.remove(0);
    Ok(SampledSequence { forecast, quantile: Some(q), stream: 0 })
}

/// Random sampling whose first-step whitened offsets are pairwise at least
/// `radius` apart. After `max_tries` consecutive rejections the radius is
/// halved and a warning recorded. Candidate `c` uses stream `c`, so with
/// `radius = 0` this reproduces [`rollout_sample`] with random strategy.
pub fn poisson_disk_latent_set(
    model: &MotionModel,
    observed: &MotionSequence,
    config: &RolloutConfig,
    radius: f64,
    max_tries: usize,
) -> Result<ForecastBundle, DynamicsError> {
    let mut check = config.clone();
    check.strategy = Strategy::PoissonDisk { radius, max_tries };
    check.validate()?;
    let width = model.width();
    let mut r = radius;
    let mut warnings = Vec::new();
    let mut accepted: Vec<(u64, Vec<f64>, ChaCha8Rng)> = Vec::with_capacity(config.samples);
    let mut rejections = 0;
    let mut candidate = 0u64;
    while accepted.len() < config.samples {
        let mut rng = stream_rng(config.seed, candidate);
        let g = draw_normals(&mut rng, width);
        let far = accepted.iter().all(|(_, other, _)| {
            other.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= r
        });
        if far {
            accepted.push((candidate, g, rng));
            rejections = 0;
        } else {
            rejections += 1;
            if rejections >= max_tries {
                r *= 0.5;
                rejections = 0;
                let msg = format!("poisson-disk: {max_tries} consecutive rejections, radius halved to {r}");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        candidate += 1;
    }
    let streams: Vec<u64> = accepted.iter().map(|a| a.0).collect();
    let mut offsets = GaussianOffsets {
        beta: config.beta,
        first: accepted.iter().map(|a| Some(a.1.clone())).collect(),
        rngs: accepted.into_iter().map(|a| a.2).collect(),
    };
    bundle(model, observed, config, &mut offsets, None, streams, warnings)
}

/// First-step whitened offsets (`ε ⊘ (βσ)`) of a bundle's samples.
pub fn first_step_whitened(bundle: &ForecastBundle, beta: f64) -> Vec<Vec<f64>> {
    bundle
        .samples
        .iter()
        .map(|s| {
            let g = &s.forecast.gaussians[0];
            s.forecast.latents[0]
                .iter()
                .zip(&g.mean)
                .zip(&g.std)
                .map(|((z, m), sd)| (z - m) / (beta * sd))
                .collect()
        })
        .collect()
}
