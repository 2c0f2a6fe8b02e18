use super::*;
use crate::numerics::relative_error;
use crate::testutil::chain_pair;
use rand::Rng;

/// Phase-shifted sinusoids per channel with a little noise.
fn toy_dataset(n: usize, frames: usize, seed: u64) -> MotionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = (0..n)
        .map(|i| {
            let phase: f64 = rng.random_range(0.0..6.0);
            let data = (0..frames)
                .flat_map(|t| (0..24).map(move |c| (0.2 * t as f64 + phase + 0.3 * c as f64).sin() * (1.0 + 0.05 * c as f64)))
                .map(|v| v + rng.random_range(-0.01..0.01))
                .collect::<Vec<f64>>();
            MotionSequence::new(format!("s{i}"), 25.0, 24, data).unwrap()
        })
        .collect();
    MotionDataset::new(chain_pair(), seqs).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig { t_obs: 5, k_pred: 5, layers: 4, hidden: 12, batch: 4, epochs: 2, lr: 3e-3, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = toy_dataset(4, 10, 1);
    let config = TrainConfig { lr: 0.0, epochs: 1, ..small_config() };
    let out = train(&data, &config, |_| {}).unwrap();
    let fresh = MotionModel::new(&data.topology, &config.model_config(), config.seed);
    assert_eq!(out.checkpoint.model, fresh);
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.log[0].batches, 1);
}

#[test]
fn training_is_bit_reproducible() {
    let data = toy_dataset(6, 12, 2);
    let a = train(&data, &small_config(), |_| {}).unwrap();
    let b = train(&data, &small_config(), |_| {}).unwrap();
    assert_eq!(a, b);
    let c = train(&data, &TrainConfig { seed: 1, ..small_config() }, |_| {}).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn loss_decreases_and_stays_finite() {
    let data = toy_dataset(16, 20, 3);
    let config = TrainConfig { epochs: 15, ..small_config() };
    let mut seen = 0;
    let out = train(&data, &config, |_| seen += 1).unwrap();
    assert_eq!(seen, 15);
    assert!(out.log.iter().all(|e| e.loss.total.is_finite() && e.grad_norm.is_finite()));
    assert!(out.log.last().unwrap().loss.total < out.log[0].loss.total);
    assert_eq!(out.checkpoint.epochs_completed, 15);
}

#[test]
fn windows_follow_the_stride() {
    let data = toy_dataset(2, 23, 4);
    let starts = window_starts(&data.sequences, 10, 5);
    assert_eq!(starts, vec![(0, 0), (0, 5), (0, 10), (1, 0), (1, 5), (1, 10)]);
    assert!(window_starts(&data.sequences, 24, 5).is_empty());
    let err = train(&data, &TrainConfig { t_obs: 20, k_pred: 10, ..small_config() }, |_| {});
    assert!(matches!(err, Err(TrainError::NoWindows(30))));
}

#[test]
fn invalid_configs_are_rejected() {
    let data = toy_dataset(2, 12, 5);
    for bad in [
        TrainConfig { batch: 0, ..small_config() },
        TrainConfig { lr: f64::NAN, ..small_config() },
        TrainConfig { gamma: -1.0, ..small_config() },
    ] {
        assert!(matches!(train(&data, &bad, |_| {}), Err(TrainError::Config(_))));
    }
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "bogus": 1}"#).is_err());
    let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "coupling": "dense"}"#).unwrap();
    assert_eq!(parsed.epochs, 3);
    assert_eq!(parsed.coupling, CouplingKind::Dense);
    assert_eq!(parsed.hidden, 128);
}

#[test]
fn divergent_training_aborts_with_last_good_parameters() {
    let data = toy_dataset(8, 10, 6);
    let config = TrainConfig { lr: 1e6, clip_norm: 1e12, epochs: 50, ..small_config() };
    match train(&data, &config, |_| {}) {
        Err(TrainError::NonFinite { last_good, .. }) => {
            assert!(last_good.model.params().all(Tensor::is_finite));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn unrolled_gradient_matches_central_differences() {
    let data = toy_dataset(3, 10, 7);
    let config = small_config();
    let mut model = MotionModel::new(&data.topology, &config.model_config(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    model.ptm.randomize(&mut rng, 0.1);
    let seqs: Vec<&MotionSequence> = data.sequences.iter().collect();
    let batch = WindowBatch::new(&seqs, config.t_obs);
    let w = config.weights();
    let (_, grads) = batch_gradients(&model, &batch, &w).unwrap();
    let sizes: Vec<usize> = model.params().map(Tensor::len).collect();
    let h = crate::numerics::FD_STEP;
    for _ in 0..24 {
        let p = rng.random_range(0..sizes.len());
        let e = rng.random_range(0..sizes[p]);
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params_mut().nth(p).unwrap().data_mut()[e] += delta;
            batch_loss(&m, &batch, &w).unwrap().total
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let err = relative_error(grads[p].data()[e], numeric);
        assert!(err < 1e-4, "param {p} entry {e}: {} vs {numeric}", grads[p].data()[e]);
    }
}
