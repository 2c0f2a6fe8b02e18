//! Evaluation: best-of-samples accuracy and diversity, deterministic angle
//! error, empirical quantile calibration and a sampling-efficiency table.
//!
//! Poses are compared in the model's normalised units, except the angle
//! error which is reported in raw channel units (radians for exp-map data).

mod calibration;
mod efficiency;
mod metrics;

pub use calibration::{
    empirical_quantile_eval, latent_coverage, mirror_rank, CalibrationConfig, CalibrationReport, CaseCalibration,
    QuantileRow, CALIBRATION_QUANTILES, MIN_PSEUDO_FUTURES,
};
pub use efficiency::{sampling_efficiency_report, EfficiencyConfig, EfficiencyReport, EfficiencyRow, SeedMetrics};
pub use metrics::{ade, apd, fde, final_distance, flat_distance, mae_angle, mm_metrics, sequence_distance};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{rollout_mean, rollout_sample, DynamicsError, RolloutConfig, Strategy};
use crate::model::MotionModel;
use crate::skeleton::{ChannelSemantics, MotionSequence, NormStats};

/// Pseudo ground-truth grouping threshold on the last observed frame.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sequence shape {found:?} does not match {expected:?} (frames, width)")]
    LengthMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("pseudo ground-truth set is empty")]
    EmptyPseudoSet,
    #[error("angle error needs exponential-map channels, data has {0:?}")]
    Semantics(ChannelSemantics),
    #[error("no evaluation cases")]
    NoCases,
    #[error("invalid evaluation setting: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// An observed prefix and its true continuation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub id: String,
    pub observed: MotionSequence,
    pub future: MotionSequence,
}

impl EvalCase {
    /// First `t_obs` frames observed, next `k_pred` frames as the future.
    pub fn split(seq: &MotionSequence, t_obs: usize, k_pred: usize) -> Result<Self, EvalError> {
        if t_obs == 0 || k_pred == 0 || seq.len() < t_obs + k_pred {
            return Err(EvalError::InvalidConfig(format!(
                "sequence {} has {} frames, needs {t_obs} + {k_pred}",
                seq.id,
                seq.len()
            )));
        }
        Ok(Self {
            id: seq.id.clone(),
            observed: seq.window(0, t_obs),
            future: seq.window(t_obs, t_obs + k_pred),
        })
    }

    pub fn from_sequences<'a>(
        seqs: impl IntoIterator<Item = &'a MotionSequence>,
        t_obs: usize,
        k_pred: usize,
    ) -> Result<Vec<Self>, EvalError> {
        seqs.into_iter().map(|s| Self::split(s, t_obs, k_pred)).collect()
    }

    pub fn normalized(&self, norm: &NormStats) -> Self {
        Self { id: self.id.clone(), observed: norm.normalize(&self.observed), future: norm.normalize(&self.future) }
    }
}

/// Futures of every pool case whose last observed frame lies within
/// `threshold` of `case`'s.
pub fn pseudo_futures<'a>(case: &EvalCase, pool: &'a [EvalCase], threshold: f64) -> Vec<&'a MotionSequence> {
    let anchor = case.observed.last_frame();
    pool.iter()
        .filter(|p| {
            let d: f64 = p.observed.last_frame().iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum();
            d.sqrt() <= threshold && p.future.len() == case.future.len()
        })
        .map(|p| &p.future)
        .collect()
}

/// Per-case seed so different cases do not share noise.
pub(crate) fn case_seed(seed: u64, case: usize) -> u64 {
    seed ^ (case as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiverseMetrics {
    pub apd: f64,
    pub ade: f64,
    pub fde: f64,
    pub mmade: f64,
    pub mmfde: f64,
}

impl DiverseMetrics {
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a DiverseMetrics>) -> DiverseMetrics {
        let mut acc = DiverseMetrics::default();
        let mut n = 0usize;
        for m in items {
            acc.apd += m.apd;
            acc.ade += m.ade;
            acc.fde += m.fde;
            acc.mmade += m.mmade;
            acc.mmfde += m.mmfde;
            n += 1;
        }
        let n = n.max(1) as f64;
        DiverseMetrics { apd: acc.apd / n, ade: acc.ade / n, fde: acc.fde / n, mmade: acc.mmade / n, mmfde: acc.mmfde / n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub pseudo_count: usize,
    pub metrics: DiverseMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiverseReport {
    pub samples: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub threshold: f64,
    pub summary: DiverseMetrics,
    pub cases: Vec<CaseMetrics>,
}

impl DiverseReport {
    /// One row per case: `id,pseudo_count,apd,ade,fde,mmade,mmfde`.
    pub fn to_csv(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            id: &'a str,
            pseudo_count: usize,
            apd: f64,
            ade: f64,
            fde: f64,
            mmade: f64,
            mmfde: f64,
        }
        let rows: Vec<Row> = self
            .cases
            .iter()
            .map(|c| Row {
                id: &c.id,
                pseudo_count: c.pseudo_count,
                apd: c.metrics.apd,
                ade: c.metrics.ade,
                fde: c.metrics.fde,
                mmade: c.metrics.mmade,
                mmfde: c.metrics.mmfde,
            })
            .collect();
        to_csv(&rows)
    }
}

pub(crate) fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("rows serialise");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

/// Diversity and accuracy of one sample set against a case and its pseudo set.
pub fn case_metrics(samples: &[&MotionSequence], gt: &MotionSequence, pseudo: &[&MotionSequence]) -> Result<DiverseMetrics, EvalError> {
    let (mmade, mmfde) = mm_metrics(samples, pseudo)?;
    Ok(DiverseMetrics { apd: apd(samples)?, ade: ade(samples, gt)?, fde: fde(samples, gt)?, mmade, mmfde })
}

/// Samples `rollout.samples` futures per case (cases and pool already
/// normalised) and averages the metrics over cases.
pub fn evaluate_diverse(
    model: &MotionModel,
    cases: &[EvalCase],
    pool: &[EvalCase],
    rollout: &RolloutConfig,
    threshold: f64,
) -> Result<DiverseReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    if !(threshold > 0.0) {
        return Err(EvalError::InvalidConfig(format!("threshold must be positive, got {threshold}")));
    }
    rollout.validate()?;
    let per_case: Vec<CaseMetrics> = cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let cfg = RolloutConfig { horizon: case.future.len(), seed: case_seed(rollout.seed, i), ..rollout.clone() };
            let bundle = rollout_sample(model, &case.observed, &cfg)?;
            let pseudo = pseudo_futures(case, pool, threshold);
            let pseudo = if pseudo.is_empty() { vec![&case.future] } else { pseudo };
            Ok(CaseMetrics {
                id: case.id.clone(),
                pseudo_count: pseudo.len(),
                metrics: case_metrics(&bundle.sample_poses(), &case.future, &pseudo)?,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(DiverseReport {
        samples: rollout.samples,
        strategy: rollout.strategy,
        seed: rollout.seed,
        threshold,
        summary: DiverseMetrics::mean(per_case.iter().map(|c| &c.metrics)),
        cases: per_case,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeCase {
    pub id: String,
    pub errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    /// 1-based future frame indices.
    pub horizons: Vec<usize>,
    /// Milliseconds per horizon at the data frame rate.
    pub horizons_ms: Vec<f64>,
    pub mae: Vec<f64>,
    pub cases: Vec<MaeCase>,
}

impl MaeReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string()];
        header.extend(self.horizons.iter().map(|h| format!("frame_{h}")));
        w.write_record(&header).expect("csv header");
        for c in &self.cases {
            let mut rec = vec![c.id.clone()];
            rec.extend(c.errors.iter().map(|e| e.to_string()));
            w.write_record(&rec).expect("csv row");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
    }
}

/// Deterministic angle error of the mean rollout at the given horizons.
/// `cases` are raw (unnormalised); the model runs on normalised inputs.
pub fn evaluate_deterministic(
    model: &MotionModel,
    norm: &NormStats,
    cases: &[EvalCase],
    horizons: &[usize],
) -> Result<MaeReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    let semantics = model.topology.semantics;
    if semantics != ChannelSemantics::Expmap {
        return Err(EvalError::Semantics(semantics));
    }
    let k = cases[0].future.len();
    if horizons.is_empty() || horizons.iter().any(|&h| h == 0 || h > k) {
        return Err(EvalError::InvalidConfig(format!("horizons must lie in 1..={k}")));
    }
    let per_case: Vec<MaeCase> = cases
        .par_iter()
        .map(|case| {
            let f = rollout_mean(model, &norm.normalize(&case.observed), case.future.len())?;
            let pred = norm.denormalize(&f.poses);
            let per_frame = mae_angle(&pred, &case.future, semantics)?;
            Ok(MaeCase { id: case.id.clone(), errors: horizons.iter().map(|&h| per_frame[h - 1]).collect() })
        })
        .collect::<Result<_, EvalError>>()?;
    let n = per_case.len() as f64;
    let mae = (0..horizons.len()).map(|j| per_case.iter().map(|c| c.errors[j]).sum::<f64>() / n).collect();
    let fps = cases[0].observed.fps;
    Ok(MaeReport {
        horizons: horizons.to_vec(),
        horizons_ms: horizons.iter().map(|&h| h as f64 * 1000.0 / fps).collect(),
        mae,
        cases: per_case,
    })
}

#[cfg(test)]
mod tests;
