//! Joint training of the pose transform and the forecaster.
//!
//! Each batch encodes `t_obs` observed frames, rolls `k_pred` steps forward
//! feeding back the predicted means, and minimises
//! `α·L_H + β·L_R + γ·L_N` with Adam.

mod adam;
mod checkpoint;
mod loss;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{
    load_checkpoint, read_header, save_checkpoint, Checkpoint, CheckpointError, CheckpointHeader,
    CHECKPOINT_VERSION,
};
pub use loss::{
    loss_h, loss_h_graph, loss_n, loss_n_graph, loss_r, loss_r_graph, total_loss, total_loss_graph, LossBreakdown,
    LossWeights,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{encode_graph, unroll_graph};
use crate::model::{ModelConfig, MotionModel};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::pfm::PfmConfig;
use crate::ptm::{CouplingKind, PtmConfig};
use crate::skeleton::{MotionDataset, MotionSequence, NormStats, SkeletonError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub t_obs: usize,
    pub k_pred: usize,
    pub layers: usize,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta_loss: f64,
    pub gamma: f64,
    pub clip_norm: f64,
    pub sigma_floor: f64,
    pub scaling_layer: bool,
    pub part_aware_prediction: bool,
    pub coupling: CouplingKind,
    /// Window stride; `None` means `k_pred`.
    pub stride: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            t_obs: 15,
            k_pred: 30,
            layers: 8,
            hidden: 128,
            lr: 1e-3,
            epochs: 100,
            batch: 32,
            seed: 0,
            alpha: w.alpha,
            beta_loss: w.beta_loss,
            gamma: w.gamma,
            clip_norm: 5.0,
            sigma_floor: crate::pfm::DEFAULT_SIGMA_FLOOR,
            scaling_layer: true,
            part_aware_prediction: true,
            coupling: CouplingKind::Gcn,
            stride: None,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta_loss: self.beta_loss, gamma: self.gamma }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.k_pred)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            ptm: PtmConfig {
                layers: self.layers,
                coupling: self.coupling,
                scaling_layer: self.scaling_layer,
                ..PtmConfig::default()
            },
            pfm: PfmConfig { hidden: self.hidden, part_aware: self.part_aware_prediction, sigma_floor: self.sigma_floor },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("t_obs", self.t_obs),
            ("k_pred", self.k_pred),
            ("hidden", self.hidden),
            ("batch", self.batch),
            ("stride", self.stride()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{name} must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.sigma_floor.is_finite() && self.sigma_floor > 0.0) {
            return Err(format!("sigma_floor must be positive, got {}", self.sigma_floor));
        }
        self.weights().validate()
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no sequence is long enough for a {0}-frame training window")]
    NoWindows(usize),
    #[error(transparent)]
    Data(#[from] SkeletonError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {source}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        source: NumericsError,
        /// Parameters before the failing step.
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    pub batches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Training windows stacked frame by frame: `observed[t]` and `future[k]` are
/// `batch × width` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub observed: Vec<Tensor>,
    pub future: Vec<Tensor>,
}

impl WindowBatch {
    /// Every window must have exactly `t_obs + k_pred` frames.
    pub fn new(windows: &[&MotionSequence], t_obs: usize) -> Self {
        assert!(!windows.is_empty(), "empty batch");
        let len = windows[0].len();
        let width = windows[0].width();
        assert!(t_obs < len, "window has no future frames");
        assert!(windows.iter().all(|w| w.len() == len && w.width() == width), "ragged batch");
        let stack = |t: usize| {
            let data = windows.iter().flat_map(|w| w.frame(t).iter().copied()).collect();
            Tensor::matrix(windows.len(), width, data)
        };
        Self { observed: (0..t_obs).map(stack).collect(), future: (t_obs..len).map(stack).collect() }
    }

    pub fn rows(&self) -> usize {
        self.observed[0].rows()
    }
}

struct BatchGraph {
    g: Graph,
    params: Vec<Var>,
    h: Var,
    r: Var,
    n: Var,
    total: Var,
}

fn build_batch_graph(model: &MotionModel, batch: &WindowBatch, w: &LossWeights) -> Result<BatchGraph, NumericsError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let observed: Vec<Var> = batch.observed.iter().map(|t| g.input(t.clone())).collect();
    let hidden = encode_graph(model, &mut g, &bound, &observed)?;
    let k = batch.future.len();
    let out = unroll_graph(model, &mut g, &bound, hidden, k, |_, _, mean, _| Ok(mean))?;
    let targets: Vec<Var> = batch.future.iter().map(|t| g.input(t.clone())).collect();
    let latents = targets
        .iter()
        .map(|&x| model.ptm.forward_graph(&mut g, &bound.ptm, x))
        .collect::<Result<Vec<_>, _>>()?;
    let h = loss_h_graph(&mut g, &out.means, &out.stds, &latents)?;
    let r = loss_r_graph(&mut g, &out.poses, &targets)?;
    let n = loss_n_graph(&mut g, &model.ptm, &bound.ptm, &latents)?;
    let total = total_loss_graph(&mut g, w, h, r, n)?;
    Ok(BatchGraph { params: bound.all().collect(), g, h, r, n, total })
}

impl BatchGraph {
    fn breakdown(&self) -> LossBreakdown {
        let v = |x: Var| self.g.value(x).item();
        LossBreakdown { total: v(self.total), h: v(self.h), r: v(self.r), n: v(self.n) }
    }
}

/// Loss of one batch without gradients.
pub fn batch_loss(model: &MotionModel, batch: &WindowBatch, w: &LossWeights) -> Result<LossBreakdown, NumericsError> {
    Ok(build_batch_graph(model, batch, w)?.breakdown())
}

/// Loss of one batch and its gradient for every parameter of
/// [`MotionModel::params`], in order.
pub fn batch_gradients(
    model: &MotionModel,
    batch: &WindowBatch,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor>), NumericsError> {
    let bg = build_batch_graph(model, batch, w)?;
    let grads = bg.g.gradients(bg.total, &bg.params)?;
    Ok((bg.breakdown(), grads))
}

/// `(sequence index, start frame)` of every full window.
pub fn window_starts(seqs: &[MotionSequence], len: usize, stride: usize) -> Vec<(usize, usize)> {
    seqs.iter()
        .enumerate()
        .flat_map(|(i, s)| (0..).step_by(stride).take_while(move |&t| t + len <= s.len()).map(move |t| (i, t)))
        .collect()
}

/// Trains a fresh model on every sequence of `dataset`. Sequences are
/// normalised with statistics computed here and stored in the checkpoint.
pub fn train(
    dataset: &MotionDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(TrainError::Config)?;
    let norm = NormStats::compute(&dataset.sequences)?;
    let seqs: Vec<MotionSequence> = dataset.sequences.iter().map(|s| norm.normalize(s)).collect();
    let len = config.t_obs + config.k_pred;
    let mut windows = window_starts(&seqs, len, config.stride());
    if windows.is_empty() {
        return Err(TrainError::NoWindows(len));
    }
    let mut ck = Checkpoint {
        config: config.clone(),
        norm,
        model: MotionModel::new(&dataset.topology, &config.model_config(), config.seed),
        epochs_completed: 0,
    };
    let weights = config.weights();
    let mut opt = Adam::new(config.lr, ck.model.params().map(Tensor::len).collect::<Vec<_>>());
    let mut shuffler = ChaCha8Rng::seed_from_u64(config.seed);
    shuffler.set_stream(1);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        windows.shuffle(&mut shuffler);
        let mut sum = LossBreakdown::default();
        let mut norm_sum = 0.0;
        let mut rows = 0;
        let chunks: Vec<&[(usize, usize)]> = windows.chunks(config.batch).collect();
        for (b, chunk) in chunks.iter().enumerate() {
            let cut: Vec<MotionSequence> = chunk.iter().map(|&(i, t)| seqs[i].window(t, t + len)).collect();
            let batch = WindowBatch::new(&cut.iter().collect::<Vec<_>>(), config.t_obs);
            let abort = |ck: &Checkpoint, source| TrainError::NonFinite {
                epoch,
                batch: b,
                source,
                last_good: Box::new(ck.clone()),
            };
            let (loss, mut grads) = match batch_gradients(&ck.model, &batch, &weights) {
                Ok(v) => v,
                Err(e) => return Err(abort(&ck, e)),
            };
            let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
            if !grad_norm.is_finite() {
                return Err(abort(&ck, NumericsError::NonFinite { node: 0, op: "gradient" }));
            }
            let before = ck.clone();
            opt.update(ck.model.params_mut(), &grads);
            if !ck.model.params().all(Tensor::is_finite) {
                return Err(abort(&before, NumericsError::NonFinite { node: 0, op: "optimizer step" }));
            }
            let n = chunk.len() as f64;
            sum.total += loss.total * n;
            sum.h += loss.h * n;
            sum.r += loss.r * n;
            sum.n += loss.n * n;
            norm_sum += grad_norm;
            rows += chunk.len();
        }
        let n = rows as f64;
        let entry = EpochLog {
            epoch,
            loss: LossBreakdown { total: sum.total / n, h: sum.h / n, r: sum.r / n, n: sum.n / n },
            grad_norm: norm_sum / chunks.len() as f64,
            batches: chunks.len(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (h {:.4}, r {:.4}, n {:.4}), grad norm {:.3}",
            entry.loss.total,
            entry.loss.h,
            entry.loss.r,
            entry.loss.n,
            entry.grad_norm
        );
        on_epoch(&entry);
        log.push(entry);
        ck.epochs_completed = epoch + 1;
    }
    Ok(TrainOutcome { checkpoint: ck, log })
}

#[cfg(test)]
mod tests;
