use serde::{Deserialize, Serialize};

use super::{evaluate_diverse, to_csv, DiverseMetrics, EvalCase, EvalError};
use crate::dynamics::{RolloutConfig, Strategy};
use crate::model::MotionModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyConfig {
    pub s_small: usize,
    pub s_large: usize,
    pub seeds: Vec<u64>,
    /// Poisson-disk radius in whitened latent units.
    pub radius: f64,
    pub max_tries: usize,
    pub beta: f64,
    pub threshold: f64,
}

impl EfficiencyConfig {
    /// Defaults for a latent of width `dims`: the radius is the expected
    /// distance between two standard-normal draws.
    pub fn for_width(dims: usize) -> Self {
        Self {
            s_small: 5,
            s_large: 50,
            seeds: (0..10).collect(),
            radius: (2.0 * dims as f64).sqrt(),
            max_tries: 100,
            beta: 1.0,
            threshold: super::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub random_large: DiverseMetrics,
    pub random_small: DiverseMetrics,
    pub poisson_small: DiverseMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub label: String,
    pub samples: usize,
    /// Median over seeds.
    pub median: DiverseMetrics,
    /// `(row − reference) / reference · 100` per metric, reference being the
    /// large random row.
    pub delta_pct: DiverseMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub config: EfficiencyConfig,
    pub rows: Vec<EfficiencyRow>,
    /// Median over seeds of `ADE(small) − ADE(large random)`.
    pub ade_degradation_random: f64,
    pub ade_degradation_poisson: f64,
    pub per_seed: Vec<SeedMetrics>,
}

impl EfficiencyReport {
    /// Medians and deltas formatted as `value (+x.x%)`.
    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>3}  {:>18} {:>18} {:>18} {:>18} {:>18}\n", "method", "S", "APD", "ADE", "FDE", "MMADE", "MMFDE");
        for r in &self.rows {
            let cell = |v: f64, d: f64| format!("{v:.4} ({d:+.1}%)");
            out += &format!(
                "{:<16} {:>3}  {:>18} {:>18} {:>18} {:>18} {:>18}\n",
                r.label,
                r.samples,
                cell(r.median.apd, r.delta_pct.apd),
                cell(r.median.ade, r.delta_pct.ade),
                cell(r.median.fde, r.delta_pct.fde),
                cell(r.median.mmade, r.delta_pct.mmade),
                cell(r.median.mmfde, r.delta_pct.mmfde),
            );
        }
        out
    }

    /// One row per seed and method.
    pub fn to_csv(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            seed: u64,
            method: &'a str,
            samples: usize,
            apd: f64,
            ade: f64,
            fde: f64,
            mmade: f64,
            mmfde: f64,
        }
        let c = &self.config;
        let mut rows = Vec::new();
        for s in &self.per_seed {
            for (method, samples, m) in [
                ("random", c.s_large, &s.random_large),
                ("random", c.s_small, &s.random_small),
                ("poisson-disk", c.s_small, &s.poisson_small),
            ] {
                rows.push(Row {
                    seed: s.seed,
                    method,
                    samples,
                    apd: m.apd,
                    ade: m.ade,
                    fde: m.fde,
                    mmade: m.mmade,
                    mmfde: m.mmfde,
                });
            }
        }
        to_csv(&rows)
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_metrics(items: &[&DiverseMetrics]) -> DiverseMetrics {
    let pick = |f: fn(&DiverseMetrics) -> f64| median(&mut items.iter().map(|m| f(m)).collect::<Vec<_>>());
    DiverseMetrics {
        apd: pick(|m| m.apd),
        ade: pick(|m| m.ade),
        fde: pick(|m| m.fde),
        mmade: pick(|m| m.mmade),
        mmfde: pick(|m| m.mmfde),
    }
}

fn pct(v: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if v == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (v - reference) / reference * 100.0
    }
}

fn delta(m: &DiverseMetrics, r: &DiverseMetrics) -> DiverseMetrics {
    DiverseMetrics {
        apd: pct(m.apd, r.apd),
        ade: pct(m.ade, r.ade),
        fde: pct(m.fde, r.fde),
        mmade: pct(m.mmade, r.mmade),
        mmfde: pct(m.mmfde, r.mmfde),
    }
}

/// Few-sample random and Poisson-disk sampling against many-sample random
/// sampling, repeated over seeds. `cases` and `pool` are normalised.
pub fn sampling_efficiency_report(
    model: &MotionModel,
    cases: &[EvalCase],
    pool: &[EvalCase],
    config: &EfficiencyConfig,
) -> Result<EfficiencyReport, EvalError> {
    if config.seeds.is_empty() {
        return Err(EvalError::InvalidConfig("at least one seed is required".into()));
    }
    if config.s_small < 2 || config.s_large < 2 {
        return Err(EvalError::InvalidConfig("sample counts must be at least 2".into()));
    }
    let horizon = cases.first().ok_or(EvalError::NoCases)?.future.len();
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let run = |samples: usize, strategy: Strategy| {
            let cfg = RolloutConfig { horizon, beta: config.beta, samples, strategy, seed };
            evaluate_diverse(model, cases, pool, &cfg, config.threshold)
        };
        let random_large = run(config.s_large, Strategy::Random)?.summary;
        let random_small = run(config.s_small, Strategy::Random)?.summary;
        let disk = Strategy::PoissonDisk { radius: config.radius, max_tries: config.max_tries };
        let poisson_small = run(config.s_small, disk)?.summary;
        per_seed.push(SeedMetrics { seed, random_large, random_small, poisson_small });
    }
    let col = |f: fn(&SeedMetrics) -> &DiverseMetrics| per_seed.iter().map(f).collect::<Vec<_>>();
    let large = median_metrics(&col(|s| &s.random_large));
    let small = median_metrics(&col(|s| &s.random_small));
    let disk = median_metrics(&col(|s| &s.poisson_small));
    let rows = vec![
        EfficiencyRow { label: "random".into(), samples: config.s_large, median: large, delta_pct: delta(&large, &large) },
        EfficiencyRow { label: "random".into(), samples: config.s_small, median: small, delta_pct: delta(&small, &large) },
        EfficiencyRow { label: "poisson-disk".into(), samples: config.s_small, median: disk, delta_pct: delta(&disk, &large) },
    ];
    let degradation = |f: fn(&SeedMetrics) -> f64| median(&mut per_seed.iter().map(f).collect::<Vec<_>>());
    Ok(EfficiencyReport {
        config: config.clone(),
        rows,
        ade_degradation_random: degradation(|s| s.random_small.ade - s.random_large.ade),
        ade_degradation_poisson: degradation(|s| s.poisson_small.ade - s.random_large.ade),
        per_seed,
    })
}
