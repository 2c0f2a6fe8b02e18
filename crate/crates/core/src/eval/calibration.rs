use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{case_seed, final_distance, flat_distance, pseudo_futures, sequence_distance, to_csv, EvalCase, EvalError};
use crate::dynamics::{frame_quantile, rollout_mean, sample_quantile_sequence};
use crate::model::MotionModel;
use crate::numerics::Tensor;

pub const CALIBRATION_QUANTILES: [f64; 4] = [0.5, 0.45, 0.4, 0.25];
/// Cases with fewer pseudo futures than this are excluded.
pub const MIN_PSEUDO_FUTURES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub quantiles: Vec<f64>,
    pub threshold: f64,
    pub min_pseudo: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            quantiles: CALIBRATION_QUANTILES.to_vec(),
            threshold: super::DEFAULT_THRESHOLD,
            min_pseudo: MIN_PSEUDO_FUTURES,
            beta: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub q: f64,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseCalibration {
    pub id: String,
    pub pseudo_count: usize,
    /// Per quantile, in config order.
    pub ade: Vec<f64>,
    pub fde: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub config: CalibrationConfig,
    /// Set when no case had enough pseudo futures; `rows` is then empty.
    pub insufficient_data: bool,
    pub evaluated: usize,
    pub excluded: usize,
    pub rows: Vec<QuantileRow>,
    pub cases: Vec<CaseCalibration>,
}

impl CalibrationReport {
    pub fn row(&self, q: f64) -> Option<&QuantileRow> {
        self.rows.iter().find(|r| r.q == q)
    }

    /// One row per case and quantile: `id,pseudo_count,q,ade,fde`.
    pub fn to_csv(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            id: &'a str,
            pseudo_count: usize,
            q: f64,
            ade: f64,
            fde: f64,
        }
        let mut rows = Vec::new();
        for c in &self.cases {
            for (j, &q) in self.config.quantiles.iter().enumerate() {
                rows.push(Row { id: &c.id, pseudo_count: c.pseudo_count, q, ade: c.ade[j], fde: c.fde[j] });
            }
        }
        to_csv(&rows)
    }
}

/// Index into ascending-ordered pseudo futures matched to quantile `q`: the
/// closest future at `q = 0.5`, walking outward as `q` shrinks.
pub fn mirror_rank(q: f64, n: usize) -> usize {
    assert!(n > 0 && q > 0.0 && q <= 0.5);
    (((1.0 - 2.0 * q) * (n - 1) as f64).round() as usize).min(n - 1)
}

/// Compares the model's quantile-`q` sequence with the empirical quantile of
/// each case's pseudo futures. `cases` and `pool` are normalised.
pub fn empirical_quantile_eval(
    model: &MotionModel,
    cases: &[EvalCase],
    pool: &[EvalCase],
    config: &CalibrationConfig,
) -> Result<CalibrationReport, EvalError> {
    if !(config.threshold > 0.0) {
        return Err(EvalError::InvalidConfig(format!("threshold must be positive, got {}", config.threshold)));
    }
    if config.quantiles.is_empty() || config.quantiles.iter().any(|&q| !(q > 0.0 && q <= 0.5)) {
        return Err(EvalError::InvalidConfig("quantiles must lie in (0, 0.5]".into()));
    }
    let results: Vec<Option<CaseCalibration>> = cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let mut pseudo = pseudo_futures(case, pool, config.threshold);
            if pseudo.len() < config.min_pseudo.max(1) {
                return Ok(None);
            }
            let mut keyed: Vec<(f64, &_)> =
                pseudo.drain(..).map(|p| Ok((flat_distance(p, &case.future)?, p))).collect::<Result<_, EvalError>>()?;
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (mut ade, mut fde) = (Vec::new(), Vec::new());
            for &q in &config.quantiles {
                let target = keyed[mirror_rank(q, keyed.len())].1;
                let s = sample_quantile_sequence(
                    model,
                    &case.observed,
                    q,
                    config.beta,
                    case.future.len(),
                    case_seed(config.seed, i),
                )?;
                ade.push(sequence_distance(&s.forecast.poses, target)?);
                fde.push(final_distance(&s.forecast.poses, target)?);
            }
            Ok(Some(CaseCalibration { id: case.id.clone(), pseudo_count: keyed.len(), ade, fde }))
        })
        .collect::<Result<_, EvalError>>()?;
    let kept: Vec<CaseCalibration> = results.into_iter().flatten().collect();
    let excluded = cases.len() - kept.len();
    let n = kept.len() as f64;
    let rows = if kept.is_empty() {
        Vec::new()
    } else {
        config
            .quantiles
            .iter()
            .enumerate()
            .map(|(j, &q)| QuantileRow {
                q,
                ade: kept.iter().map(|c| c.ade[j]).sum::<f64>() / n,
                fde: kept.iter().map(|c| c.fde[j]).sum::<f64>() / n,
            })
            .collect()
    };
    if kept.is_empty() {
        log::warn!("calibration: insufficient data, every case has fewer than {} pseudo futures", config.min_pseudo);
    }
    Ok(CalibrationReport {
        config: config.clone(),
        insufficient_data: kept.is_empty(),
        evaluated: kept.len(),
        excluded,
        rows,
        cases: kept,
    })
}

/// Fraction of true future latents whose radius quantile under the
/// mean-rollout Gaussian is at most `level`. `cases` are normalised.
pub fn latent_coverage(model: &MotionModel, cases: &[EvalCase], level: f64) -> Result<f64, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    let counts: Vec<(usize, usize)> = cases
        .par_iter()
        .map(|case| {
            let f = rollout_mean(model, &case.observed, case.future.len())?;
            let z = model
                .ptm
                .forward(&Tensor::matrix(case.future.len(), case.future.width(), case.future.data().to_vec()))
                .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
            let inside =
                f.gaussians.iter().enumerate().filter(|(t, g)| frame_quantile(g, z.row(*t)).radius_quantile <= level).count();
            Ok((inside, f.gaussians.len()))
        })
        .collect::<Result<_, EvalError>>()?;
    let (inside, total) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(inside as f64 / total as f64)
}
