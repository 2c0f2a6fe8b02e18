use std::path::{Path, PathBuf};
use std::time::Instant;

use probmotion::artifact::write_atomic;
use probmotion::dynamics::{rollout_sample, RolloutConfig, Strategy};
use probmotion::eval::{
    empirical_quantile_eval, evaluate_deterministic, evaluate_diverse, latent_coverage, sampling_efficiency_report,
    CalibrationConfig, EfficiencyConfig, EvalCase,
};
use probmotion::numerics::Tensor;
use probmotion::skeleton::{MotionDataset, MotionSequence, SkeletonError};
use probmotion::synthgen::{generate, SynthConfig};
use probmotion::training::{train, Checkpoint, TrainConfig, TrainError};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::{manifest_path, replay_args, sha256_hex, FileDigest, Manifest, Versions, MANIFEST_VERSION};
use crate::*;

pub fn run(command: &Command, argv: &[String]) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => gen_data(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Forecast(a) => forecast(a, argv),
        Command::EvalDiverse(a) => eval_diverse(a, argv),
        Command::EvalDet(a) => eval_det(a, argv),
        Command::EvalCalib(a) => eval_calib(a, argv),
        Command::EvalSampling(a) => eval_sampling(a, argv),
        Command::Inspect(a) => inspect(a, argv),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn schema(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("schema violation in {}: {e}", path.display()))
}

fn load_dataset(path: &Path) -> Result<MotionDataset, CliError> {
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| schema(path, e))?;
    MotionDataset::from_json(text).map_err(|e| match e {
        SkeletonError::Json(e) => schema(path, e),
        other => CliError::Data(format!("invalid motion file {}: {other}", path.display())),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::from_bytes(&read(path)?)
        .map_err(|e| CliError::Data(format!("cannot load checkpoint {}: {e}", path.display())))
}

/// File values (or the `config` of a run manifest) overlaid with the flags
/// that were given.
fn load_config<T: Serialize + DeserializeOwned + Default>(
    path: Option<&Path>,
    flags: &impl Serialize,
) -> Result<T, CliError> {
    let base: T = match path {
        None => T::default(),
        Some(p) => {
            let mut v: Value = serde_json::from_slice(&read(p)?).map_err(|e| schema(p, e))?;
            if v.get("manifest_version").is_some() {
                v = v.get("config").cloned().ok_or_else(|| schema(p, "manifest has no config"))?;
            }
            serde_json::from_value(v).map_err(|e| schema(p, e))?
        }
    };
    let mut merged = serde_json::to_value(&base).expect("config serialises");
    let set = serde_json::to_value(flags).expect("flags serialise");
    if let (Value::Object(m), Value::Object(s)) = (&mut merged, set) {
        m.extend(s);
    }
    serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("invalid flag value: {e}")))
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn pretty(v: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("output serialises");
    out.push(b'\n');
    out
}

struct Run<'a> {
    command: &'static str,
    argv: &'a [String],
    config: Value,
    seed: u64,
    inputs: Vec<FileDigest>,
    outputs: Vec<(PathBuf, Vec<u8>)>,
}

impl<'a> Run<'a> {
    fn new(command: &'static str, argv: &'a [String], config: Value, seed: u64) -> Self {
        Self { command, argv, config, seed, inputs: Vec::new(), outputs: Vec::new() }
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&read(path)?) });
        Ok(())
    }

    fn output(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.outputs.push((path, bytes));
    }

    /// Writes every output and then the manifest next to `primary`.
    fn finish(self, primary: &Path) -> Result<PathBuf, CliError> {
        let mpath = manifest_path(primary);
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for (path, bytes) in &self.outputs {
            write_atomic(path, bytes)
                .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
            outputs.push(FileDigest { path: path.display().to_string(), sha256: sha256_hex(bytes) });
        }
        let replay = replay_args(self.argv, &mpath);
        let manifest = Manifest {
            manifest_version: MANIFEST_VERSION,
            command: self.command.to_string(),
            argv: replay,
            config: self.config,
            seed: self.seed,
            versions: Versions::current(),
            inputs: self.inputs,
            outputs,
        };
        write_atomic(&mpath, &pretty(&manifest))
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", mpath.display())))?;
        Ok(mpath)
    }
}

fn gen_data(a: &GenDataArgs, argv: &[String]) -> Result<(), CliError> {
    let cfg: SynthConfig = load_config(a.config.as_deref(), &a.set)?;
    cfg.validate().map_err(|e| CliError::Usage(format!("invalid synth config: {}", e.0)))?;
    let data = generate(&cfg).map_err(|e| CliError::Usage(format!("invalid synth config: {}", e.0)))?;
    let mut run = Run::new("gen-data", argv, serde_json::to_value(&cfg).expect("config serialises"), cfg.seed);
    run.output(a.out.clone(), data.to_json().into_bytes());
    let m = run.finish(&a.out)?;
    println!(
        "wrote {} sequences ({} joints x {} channels, {} frames, {} modes) to {}",
        data.sequences.len(),
        cfg.joints,
        cfg.channels,
        cfg.length,
        cfg.n_modes,
        a.out.display()
    );
    println!("manifest {}", m.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let cfg: TrainConfig = load_config(a.config.as_deref(), &a.set)?;
    cfg.validate().map_err(|e| CliError::Usage(format!("invalid training config: {e}")))?;
    if a.holdout_every == 1 {
        return Err(CliError::Usage("--holdout-every must be 0 or at least 2".into()));
    }
    let data = load_dataset(&a.data)?;
    let train_set = if a.holdout_every == 0 {
        data.clone()
    } else {
        let (tr, _) = data.split(a.holdout_every);
        MotionDataset::new(data.topology.clone(), tr.into_iter().cloned().collect())
            .map_err(|e| CliError::Data(e.to_string()))?
    };
    let mut run = Run::new("train", argv, serde_json::to_value(&cfg).expect("config serialises"), cfg.seed);
    run.input(&a.data)?;
    println!(
        "training on {} of {} sequences: {} epochs, hidden {}, {} layers, coupling {:?}",
        train_set.sequences.len(),
        data.sequences.len(),
        cfg.epochs,
        cfg.hidden,
        cfg.layers,
        cfg.coupling
    );
    let start = Instant::now();
    let outcome = train(&train_set, &cfg, |e| {
        println!(
            "epoch {:>4}/{}  loss {:>10.5}  (h {:.4}, r {:.4}, n {:.4})  grad {:.3}  {:.1}s",
            e.epoch + 1,
            cfg.epochs,
            e.loss.total,
            e.loss.h,
            e.loss.r,
            e.loss.n,
            e.grad_norm,
            start.elapsed().as_secs_f64()
        )
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::NonFinite { epoch, batch, source, last_good }) => {
            let path = suffixed(&a.out, ".last-good.bin");
            write_atomic(&path, &last_good.to_bytes())
                .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
            return Err(CliError::Data(format!(
                "training diverged at epoch {epoch}, batch {batch} ({source}); last good parameters saved to {}",
                path.display()
            )));
        }
        Err(e @ (TrainError::Config(_) | TrainError::NoWindows(_))) => return Err(CliError::Usage(e.to_string())),
        Err(e) => return Err(CliError::Data(e.to_string())),
    };
    run.output(a.out.clone(), outcome.checkpoint.to_bytes());
    run.output(suffixed(&a.out, ".log.json"), pretty(&outcome.log));
    let m = run.finish(&a.out)?;
    let last = outcome.log.last().map(|e| e.loss.total).unwrap_or(f64::NAN);
    println!(
        "trained {} parameters in {:.1}s, final loss {last:.5}; checkpoint {}",
        outcome.checkpoint.model.num_scalars(),
        start.elapsed().as_secs_f64(),
        a.out.display()
    );
    println!("manifest {}", m.display());
    Ok(())
}

fn strategy(kind: StrategyArg, q: f64, radius: Option<f64>, max_tries: usize, width: usize) -> Strategy {
    match kind {
        StrategyArg::Mean => Strategy::Mean,
        StrategyArg::Random => Strategy::Random,
        StrategyArg::Quantile => Strategy::Quantile { q },
        StrategyArg::PoissonDisk => Strategy::PoissonDisk {
            radius: radius.unwrap_or_else(|| EfficiencyConfig::for_width(width).radius),
            max_tries,
        },
    }
}

#[derive(Serialize)]
struct SampleOut {
    stream: u64,
    quantile: Option<f64>,
    frames: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct ForecastOut {
    id: String,
    fps: f64,
    t_obs: usize,
    rollout: RolloutConfig,
    /// Raw-unit poses.
    mean: Vec<Vec<f64>>,
    samples: Vec<SampleOut>,
    warnings: Vec<String>,
}

fn frames(seq: &MotionSequence) -> Vec<Vec<f64>> {
    seq.frames().map(<[f64]>::to_vec).collect()
}

fn forecast(a: &ForecastArgs, argv: &[String]) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.ckpt)?;
    let data = load_dataset(&a.obs)?;
    ck.ensure_topology(&data.topology).map_err(|e| CliError::Data(e.to_string()))?;
    let seq = data
        .get(&a.id)
        .ok_or_else(|| CliError::Data(format!("no sequence with id {:?} in {}", a.id, a.obs.display())))?;
    let t_obs = a.t_obs.unwrap_or(ck.config.t_obs);
    if t_obs == 0 || t_obs > seq.len() {
        return Err(CliError::Usage(format!("--t-obs must lie in 1..={} for sequence {}", seq.len(), a.id)));
    }
    let rollout = RolloutConfig {
        horizon: a.horizon.unwrap_or(ck.config.k_pred),
        beta: a.beta,
        samples: a.samples,
        strategy: strategy(a.strategy, a.q, a.radius, a.max_tries, ck.model.width()),
        seed: a.seed,
    };
    rollout.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let observed = ck.norm.normalize(&seq.window(0, t_obs));
    let bundle = rollout_sample(&ck.model, &observed, &rollout).map_err(|e| CliError::Data(e.to_string()))?;
    let out = ForecastOut {
        id: a.id.clone(),
        fps: seq.fps,
        t_obs,
        rollout: rollout.clone(),
        mean: frames(&ck.norm.denormalize(&bundle.mean.poses)),
        samples: bundle
            .samples
            .iter()
            .map(|s| SampleOut {
                stream: s.stream,
                quantile: s.quantile,
                frames: frames(&ck.norm.denormalize(&s.forecast.poses)),
            })
            .collect(),
        warnings: bundle.warnings.clone(),
    };
    let config = json!({ "t_obs": t_obs, "rollout": rollout, "id": a.id });
    let mut run = Run::new("forecast", argv, config, a.seed);
    run.input(&a.ckpt)?;
    run.input(&a.obs)?;
    run.output(a.out.clone(), pretty(&out));
    let m = run.finish(&a.out)?;
    println!(
        "forecast {} frames of {} from {t_obs} observed ({} sample(s), {:?}) to {}",
        rollout.horizon,
        a.id,
        out.samples.len(),
        rollout.strategy,
        a.out.display()
    );
    for w in &out.warnings {
        println!("warning: {w}");
    }
    println!("manifest {}", m.display());
    Ok(())
}

/// Raw evaluation cases and pseudo ground-truth pool.
struct Cases {
    ck: Checkpoint,
    cases: Vec<EvalCase>,
    pool: Vec<EvalCase>,
}

impl Cases {
    fn load(a: &CaseArgs, pool: PoolArg) -> Result<Self, CliError> {
        let ck = load_checkpoint(&a.ckpt)?;
        let data = load_dataset(&a.data)?;
        ck.ensure_topology(&data.topology).map_err(|e| CliError::Data(e.to_string()))?;
        let selected: Vec<&MotionSequence> = match a.split {
            SplitArg::All => data.sequences.iter().collect(),
            SplitArg::Train | SplitArg::Test => {
                if a.holdout_every < 2 {
                    return Err(CliError::Usage("--holdout-every must be at least 2 with a train or test split".into()));
                }
                let (tr, te) = data.split(a.holdout_every);
                if a.split == SplitArg::Test {
                    te
                } else {
                    tr
                }
            }
        };
        let (t, k) = (ck.config.t_obs, ck.config.k_pred);
        let split = |seqs: Vec<&MotionSequence>| {
            EvalCase::from_sequences(seqs, t, k).map_err(|e| CliError::Data(e.to_string()))
        };
        let all_selected = split(selected.clone())?;
        let pool = match pool {
            PoolArg::Split => all_selected.clone(),
            PoolArg::All => split(data.sequences.iter().collect())?,
        };
        let mut cases = all_selected;
        if let Some(n) = a.max_cases {
            cases.truncate(n);
        }
        if cases.is_empty() {
            return Err(CliError::Data(format!("no evaluation cases in {}", a.data.display())));
        }
        Ok(Self { ck, cases, pool })
    }

    fn normalized(&self) -> (Vec<EvalCase>, Vec<EvalCase>) {
        let n = |v: &[EvalCase]| v.iter().map(|c| c.normalized(&self.ck.norm)).collect();
        (n(&self.cases), n(&self.pool))
    }

    fn describe(a: &CaseArgs) -> Value {
        json!({
            "split": format!("{:?}", a.split).to_lowercase(),
            "holdout_every": a.holdout_every,
            "max_cases": a.max_cases,
        })
    }

    fn register(&self, run: &mut Run, a: &CaseArgs) -> Result<(), CliError> {
        run.input(&a.ckpt)?;
        run.input(&a.data)
    }
}

fn eval_error(e: probmotion::eval::EvalError) -> CliError {
    use probmotion::eval::EvalError::*;
    match e {
        InvalidConfig(_) | TooFewSamples { .. } => CliError::Usage(e.to_string()),
        Dynamics(probmotion::dynamics::DynamicsError::InvalidConfig(_)) => CliError::Usage(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn eval_diverse(a: &EvalDiverseArgs, argv: &[String]) -> Result<(), CliError> {
    let c = Cases::load(&a.cases, a.pool)?;
    let (cases, pool) = c.normalized();
    let rollout = RolloutConfig {
        horizon: c.ck.config.k_pred,
        beta: a.beta,
        samples: a.samples,
        strategy: strategy(a.strategy, a.q, a.radius, a.max_tries, c.ck.model.width()),
        seed: a.seed,
    };
    let report = evaluate_diverse(&c.ck.model, &cases, &pool, &rollout, a.threshold).map_err(eval_error)?;
    let config = json!({
        "cases": Cases::describe(&a.cases),
        "rollout": rollout,
        "threshold": a.threshold,
        "pool": format!("{:?}", a.pool).to_lowercase(),
    });
    let mut run = Run::new("eval-diverse", argv, config, a.seed);
    c.register(&mut run, &a.cases)?;
    run.output(suffixed(&a.out, ".csv"), report.to_csv().into_bytes());
    run.output(suffixed(&a.out, ".json"), pretty(&report));
    let m = run.finish(&a.out)?;
    let s = &report.summary;
    println!("{} cases, {} samples each ({:?}), seed {}", report.cases.len(), a.samples, rollout.strategy, a.seed);
    println!("APD {:.4}  ADE {:.4}  FDE {:.4}  MMADE {:.4}  MMFDE {:.4}", s.apd, s.ade, s.fde, s.mmade, s.mmfde);
    println!("wrote {}.csv, {}.json; manifest {}", a.out.display(), a.out.display(), m.display());
    Ok(())
}

fn eval_det(a: &EvalDetArgs, argv: &[String]) -> Result<(), CliError> {
    let c = Cases::load(&a.cases, PoolArg::Split)?;
    let report = evaluate_deterministic(&c.ck.model, &c.ck.norm, &c.cases, &a.horizons).map_err(eval_error)?;
    let config = json!({ "cases": Cases::describe(&a.cases), "horizons": a.horizons });
    let mut run = Run::new("eval-det", argv, config, 0);
    c.register(&mut run, &a.cases)?;
    run.output(suffixed(&a.out, ".csv"), report.to_csv().into_bytes());
    run.output(suffixed(&a.out, ".json"), pretty(&report));
    let m = run.finish(&a.out)?;
    println!("mean-rollout angle error over {} cases", report.cases.len());
    for ((h, ms), e) in report.horizons.iter().zip(&report.horizons_ms).zip(&report.mae) {
        println!("  frame {h:>3} ({ms:>6.0} ms)  {e:.4}");
    }
    println!("wrote {}.csv, {}.json; manifest {}", a.out.display(), a.out.display(), m.display());
    Ok(())
}

fn eval_calib(a: &EvalCalibArgs, argv: &[String]) -> Result<(), CliError> {
    if !(a.coverage_level > 0.0 && a.coverage_level < 1.0) {
        return Err(CliError::Usage(format!("--coverage-level must lie in (0, 1), got {}", a.coverage_level)));
    }
    let c = Cases::load(&a.cases, a.pool)?;
    let (cases, pool) = c.normalized();
    let cfg = CalibrationConfig {
        quantiles: a.quantiles.clone(),
        threshold: a.threshold,
        min_pseudo: a.min_pseudo,
        beta: a.beta,
        seed: a.seed,
    };
    let report = empirical_quantile_eval(&c.ck.model, &cases, &pool, &cfg).map_err(eval_error)?;
    let coverage = latent_coverage(&c.ck.model, &cases, a.coverage_level).map_err(eval_error)?;
    let config = json!({
        "cases": Cases::describe(&a.cases),
        "calibration": cfg,
        "coverage_level": a.coverage_level,
        "pool": format!("{:?}", a.pool).to_lowercase(),
    });
    let mut run = Run::new("eval-calib", argv, config, a.seed);
    c.register(&mut run, &a.cases)?;
    run.output(suffixed(&a.out, ".csv"), report.to_csv().into_bytes());
    run.output(
        suffixed(&a.out, ".json"),
        pretty(&json!({ "coverage": { "level": a.coverage_level, "fraction": coverage }, "quantiles": report })),
    );
    let m = run.finish(&a.out)?;
    println!("latent coverage of the central {:.0}% region: {coverage:.4}", a.coverage_level * 100.0);
    if report.insufficient_data {
        println!("quantile calibration: insufficient data (no case has {} pseudo futures)", a.min_pseudo);
    } else {
        println!("quantile calibration on {} cases ({} excluded):", report.evaluated, report.excluded);
        for r in &report.rows {
            println!("  q {:<5}  ADE {:.4}  FDE {:.4}", r.q, r.ade, r.fde);
        }
    }
    println!("wrote {}.csv, {}.json; manifest {}", a.out.display(), a.out.display(), m.display());
    Ok(())
}

fn eval_sampling(a: &EvalSamplingArgs, argv: &[String]) -> Result<(), CliError> {
    let c = Cases::load(&a.cases, a.pool)?;
    let (cases, pool) = c.normalized();
    let defaults = EfficiencyConfig::for_width(c.ck.model.width());
    let cfg = EfficiencyConfig {
        s_small: a.s_small,
        s_large: a.s_large,
        seeds: (0..a.seeds).collect(),
        radius: a.radius.unwrap_or(defaults.radius),
        max_tries: a.max_tries,
        beta: a.beta,
        threshold: a.threshold,
    };
    let report = sampling_efficiency_report(&c.ck.model, &cases, &pool, &cfg).map_err(eval_error)?;
    let config = json!({
        "cases": Cases::describe(&a.cases),
        "efficiency": cfg,
        "pool": format!("{:?}", a.pool).to_lowercase(),
    });
    let mut run = Run::new("eval-sampling", argv, config, 0);
    c.register(&mut run, &a.cases)?;
    run.output(suffixed(&a.out, ".csv"), report.to_csv().into_bytes());
    run.output(suffixed(&a.out, ".json"), pretty(&report));
    let m = run.finish(&a.out)?;
    println!("{} cases, {} seeds, medians over seeds (delta vs {} random samples):", cases.len(), a.seeds, a.s_large);
    print!("{}", report.table());
    println!(
        "ADE degradation {}->{}: random {:.4}, poisson-disk {:.4}",
        a.s_large, a.s_small, report.ade_degradation_random, report.ade_degradation_poisson
    );
    println!("wrote {}.csv, {}.json; manifest {}", a.out.display(), a.out.display(), m.display());
    Ok(())
}

fn inspect(a: &InspectArgs, argv: &[String]) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.ckpt)?;
    let header = ck.header();
    let ptm: usize = ck.model.ptm.params().map(Tensor::len).sum();
    let pfm: usize = ck.model.pfm.params().map(Tensor::len).sum();
    let t = &header.topology;
    let c = &header.config;
    println!("checkpoint   {} (format v{})", a.ckpt.display(), header.version);
    println!("fingerprint  {}", header.fingerprint);
    println!(
        "topology     {} joints x {} channels ({:?}), parts: {}",
        t.num_joints(),
        t.width() / t.num_joints().max(1),
        t.semantics,
        t.parts().join(", ")
    );
    println!("parameters   {} ({:.3}M)", header.num_scalars, header.num_scalars as f64 / 1e6);
    println!("  pose flow  {ptm} in {} layers", c.layers);
    println!("  forecaster {pfm} (hidden {})", c.hidden);
    println!(
        "config       coupling {:?}, scaling layer {}, part-aware {}, t_obs {}, k_pred {}",
        c.coupling, c.scaling_layer, c.part_aware_prediction, c.t_obs, c.k_pred
    );
    println!("trained      {} epochs (seed {})", header.epochs_completed, c.seed);
    if let Some(out) = &a.out {
        let doc = json!({ "header": header, "ptm_scalars": ptm, "pfm_scalars": pfm });
        let mut run = Run::new("inspect", argv, json!({}), 0);
        run.input(&a.ckpt)?;
        run.output(out.clone(), pretty(&doc));
        let m = run.finish(out)?;
        println!("wrote {}; manifest {}", out.display(), m.display());
    }
    Ok(())
}
