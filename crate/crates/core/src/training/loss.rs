use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::pfm::LatentGaussian;
use crate::ptm::{latent_log_likelihood_graph, PtmStack};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_loss: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta_loss: 1.0, gamma: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("alpha", self.alpha), ("beta_loss", self.beta_loss), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("loss weight {name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub h: f64,
    pub r: f64,
    pub n: f64,
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Var, NumericsError> {
    let (&first, rest) = terms.split_first().expect("at least one term");
    rest.iter().try_fold(first, |acc, &t| g.add(acc, t))
}

/// Gaussian negative log-likelihood without the constant, dims summed within
/// a frame and frames (and batch rows) averaged.
pub fn loss_h_graph(g: &mut Graph, means: &[Var], stds: &[Var], targets: &[Var]) -> Result<Var, NumericsError> {
    assert!(means.len() == stds.len() && means.len() == targets.len() && !means.is_empty());
    let rows = g.shape(means[0]).0;
    let mut terms = Vec::with_capacity(means.len());
    for ((&m, &s), &z) in means.iter().zip(stds).zip(targets) {
        let log_s = g.log(s)?;
        let diff = g.sub(z, m)?;
        let num = g.square(diff)?;
        let den = g.square(s)?;
        let ratio = g.div(num, den)?;
        let half = g.scale(ratio, 0.5)?;
        let frame = g.add(log_s, half)?;
        terms.push(g.sum(frame)?);
    }
    let total = sum_all(g, &terms)?;
    g.scale(total, 1.0 / (means.len() * rows) as f64)
}

/// Mean absolute error over every entry of every frame.
pub fn loss_r_graph(g: &mut Graph, preds: &[Var], targets: &[Var]) -> Result<Var, NumericsError> {
    assert!(preds.len() == targets.len() && !preds.is_empty());
    let count = preds.len() * g.value(preds[0]).len();
    let mut terms = Vec::with_capacity(preds.len());
    for (&p, &t) in preds.iter().zip(targets) {
        let d = g.sub(p, t)?;
        let a = g.abs(d)?;
        terms.push(g.sum(a)?);
    }
    let total = sum_all(g, &terms)?;
    g.scale(total, 1.0 / count as f64)
}

/// Flow negative log-likelihood per frame: `−log N(f(x); 0, I) − log|det|`.
/// `latents` are the already mapped frames `f(x)`.
pub fn loss_n_graph(g: &mut Graph, ptm: &PtmStack, ptm_params: &[Var], latents: &[Var]) -> Result<Var, NumericsError> {
    assert!(!latents.is_empty());
    let rows = g.shape(latents[0]).0;
    let mut terms = Vec::with_capacity(latents.len());
    for &z in latents {
        terms.push(latent_log_likelihood_graph(g, z)?);
    }
    let ll = sum_all(g, &terms)?;
    let per_frame = g.scale(ll, -1.0 / (latents.len() * rows) as f64)?;
    let log_det = ptm.log_det_graph(g, ptm_params)?;
    g.sub(per_frame, log_det)
}

pub fn total_loss_graph(g: &mut Graph, w: &LossWeights, h: Var, r: Var, n: Var) -> Result<Var, NumericsError> {
    let a = g.scale(h, w.alpha)?;
    let b = g.scale(r, w.beta_loss)?;
    let c = g.scale(n, w.gamma)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

fn rows(g: &mut Graph, frames: &[Vec<f64>]) -> Vec<Var> {
    frames.iter().map(|f| g.input(Tensor::row_vector(f.clone()))).collect()
}

/// Value of the forecast likelihood term for one sequence.
pub fn loss_h(pred: &[LatentGaussian], target: &[Vec<f64>]) -> Result<f64, NumericsError> {
    assert_eq!(pred.len(), target.len(), "prediction and target lengths differ");
    let mut g = Graph::new();
    let means = rows(&mut g, &pred.iter().map(|p| p.mean.clone()).collect::<Vec<_>>());
    let stds = rows(&mut g, &pred.iter().map(|p| p.std.clone()).collect::<Vec<_>>());
    let targets = rows(&mut g, target);
    let out = loss_h_graph(&mut g, &means, &stds, &targets)?;
    Ok(g.value(out).item())
}

/// Value of the pose reconstruction term for one sequence.
pub fn loss_r(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64, NumericsError> {
    assert_eq!(pred.len(), target.len(), "prediction and target lengths differ");
    let mut g = Graph::new();
    let p = rows(&mut g, pred);
    let t = rows(&mut g, target);
    let out = loss_r_graph(&mut g, &p, &t)?;
    Ok(g.value(out).item())
}

/// Value of the flow regulariser on target poses.
pub fn loss_n(ptm: &PtmStack, poses: &[Vec<f64>]) -> Result<f64, NumericsError> {
    let mut g = Graph::new();
    let params: Vec<Var> = ptm.params().map(|p| g.input(p.clone())).collect();
    let xs = rows(&mut g, poses);
    let zs = xs.iter().map(|&x| ptm.forward_graph(&mut g, &params, x)).collect::<Result<Vec<_>, _>>()?;
    let out = loss_n_graph(&mut g, ptm, &params, &zs)?;
    Ok(g.value(out).item())
}

pub fn total_loss(w: &LossWeights, h: f64, r: f64, n: f64) -> f64 {
    w.alpha * h + w.beta_loss * r + w.gamma * n
}
