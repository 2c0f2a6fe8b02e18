use super::EvalError;
use crate::skeleton::{ChannelSemantics, MotionSequence};

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_pair(a: &MotionSequence, b: &MotionSequence) -> Result<(), EvalError> {
    if a.len() != b.len() || a.width() != b.width() {
        return Err(EvalError::LengthMismatch {
            expected: (b.len(), b.width()),
            found: (a.len(), a.width()),
        });
    }
    Ok(())
}

/// Mean over frames of the flattened per-frame L2 distance.
pub fn sequence_distance(a: &MotionSequence, b: &MotionSequence) -> Result<f64, EvalError> {
    check_pair(a, b)?;
    Ok(a.frames().zip(b.frames()).map(|(x, y)| l2(x, y)).sum::<f64>() / a.len() as f64)
}

/// L2 distance between the final frames.
pub fn final_distance(a: &MotionSequence, b: &MotionSequence) -> Result<f64, EvalError> {
    check_pair(a, b)?;
    Ok(l2(a.last_frame(), b.last_frame()))
}

/// L2 distance between the fully flattened sequences.
pub fn flat_distance(a: &MotionSequence, b: &MotionSequence) -> Result<f64, EvalError> {
    check_pair(a, b)?;
    Ok(l2(a.data(), b.data()))
}

fn min_over(samples: &[&MotionSequence], f: impl Fn(&MotionSequence) -> Result<f64, EvalError>) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::TooFewSamples { needed: 1, found: 0 });
    }
    samples.iter().try_fold(f64::INFINITY, |best, s| Ok(best.min(f(s)?)))
}

/// Best-of-samples average displacement.
pub fn ade(samples: &[&MotionSequence], gt: &MotionSequence) -> Result<f64, EvalError> {
    min_over(samples, |s| sequence_distance(s, gt))
}

/// Best-of-samples final displacement.
pub fn fde(samples: &[&MotionSequence], gt: &MotionSequence) -> Result<f64, EvalError> {
    min_over(samples, |s| final_distance(s, gt))
}

/// Average pairwise flattened distance among samples.
pub fn apd(samples: &[&MotionSequence]) -> Result<f64, EvalError> {
    let s = samples.len();
    if s < 2 {
        return Err(EvalError::TooFewSamples { needed: 2, found: s });
    }
    let mut total = 0.0;
    for i in 0..s {
        for j in i + 1..s {
            total += flat_distance(samples[i], samples[j])?;
        }
    }
    Ok(2.0 * total / (s * (s - 1)) as f64)
}

/// ADE and FDE averaged over a pseudo ground-truth set.
pub fn mm_metrics(samples: &[&MotionSequence], pseudo_gt: &[&MotionSequence]) -> Result<(f64, f64), EvalError> {
    if pseudo_gt.is_empty() {
        return Err(EvalError::EmptyPseudoSet);
    }
    let mut a = 0.0;
    let mut f = 0.0;
    for gt in pseudo_gt {
        a += ade(samples, gt)?;
        f += fde(samples, gt)?;
    }
    let n = pseudo_gt.len() as f64;
    Ok((a / n, f / n))
}

/// Per-frame L2 distance over the joint-angle vector. Only meaningful for
/// exponential-map channels.
pub fn mae_angle(pred: &MotionSequence, gt: &MotionSequence, semantics: ChannelSemantics) -> Result<Vec<f64>, EvalError> {
    if semantics != ChannelSemantics::Expmap {
        return Err(EvalError::Semantics(semantics));
    }
    check_pair(pred, gt)?;
    Ok(pred.frames().zip(gt.frames()).map(|(a, b)| l2(a, b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(frames: &[&[f64]]) -> MotionSequence {
        MotionSequence::from_frames("t", 25.0, &frames.iter().map(|f| f.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, k: usize, d: usize) -> MotionSequence {
        let data = (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        MotionSequence::new("r", 25.0, d, data).unwrap()
    }

    // Straight-line references written against raw indices.
    fn ref_dist(a: &MotionSequence, b: &MotionSequence, t: usize) -> f64 {
        let d = a.width();
        let mut s = 0.0;
        for c in 0..d {
            let diff = a.data()[t * d + c] - b.data()[t * d + c];
            s += diff * diff;
        }
        s.sqrt()
    }

    fn ref_ade(samples: &[MotionSequence], gt: &MotionSequence) -> f64 {
        let mut best = f64::MAX;
        for s in samples {
            let mut tot = 0.0;
            for t in 0..gt.len() {
                tot += ref_dist(s, gt, t);
            }
            best = best.min(tot / gt.len() as f64);
        }
        best
    }

    fn ref_fde(samples: &[MotionSequence], gt: &MotionSequence) -> f64 {
        let mut best = f64::MAX;
        for s in samples {
            best = best.min(ref_dist(s, gt, gt.len() - 1));
        }
        best
    }

    fn ref_apd(samples: &[MotionSequence]) -> f64 {
        let n = samples.len();
        let mut tot = 0.0;
        let mut pairs = 0;
        for i in 0..n {
            for j in 0..n {
                if i < j {
                    let mut s = 0.0;
                    for k in 0..samples[i].data().len() {
                        let d = samples[i].data()[k] - samples[j].data()[k];
                        s += d * d;
                    }
                    tot += s.sqrt();
                    pairs += 1;
                }
            }
        }
        tot / pairs as f64
    }

    #[test]
    fn hand_examples() {
        let gt = seq(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let off = seq(&[&[2.0, 0.0], &[1.0, 3.0]]);
        assert_eq!(ade(&[&off, &gt], &gt).unwrap(), 0.0);
        assert_eq!(ade(&[&off], &gt).unwrap(), 2.0);
        assert_eq!(fde(&[&off], &gt).unwrap(), 2.0);
        let a = seq(&[&[0.0, 0.0]]);
        let b = seq(&[&[3.0, 0.0]]);
        assert_eq!(apd(&[&a, &b]).unwrap(), 3.0);
        assert_eq!(apd(&[&a, &a, &a]).unwrap(), 0.0);
        assert!(apd(&[&a]).is_err());
        assert!(ade(&[], &gt).is_err());
        assert!(matches!(ade(&[&a], &gt), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn worse_samples_never_raise_ade() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random(&mut rng, 3, 4);
        let mut pool: Vec<MotionSequence> = vec![random(&mut rng, 3, 4)];
        let mut last = ade(&pool.iter().collect::<Vec<_>>(), &gt).unwrap();
        for _ in 0..10 {
            pool.push(random(&mut rng, 3, 4));
            let now = ade(&pool.iter().collect::<Vec<_>>(), &gt).unwrap();
            assert!(now <= last);
            last = now;
        }
    }

    #[test]
    fn metrics_match_brute_force_references() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s = rng.random_range(2..=4);
            let k = rng.random_range(1..=3);
            let d = rng.random_range(1..=6);
            let samples: Vec<MotionSequence> = (0..s).map(|_| random(&mut rng, k, d)).collect();
            let refs: Vec<&MotionSequence> = samples.iter().collect();
            let gt = random(&mut rng, k, d);
            assert!((ade(&refs, &gt).unwrap() - ref_ade(&samples, &gt)).abs() < 1e-12);
            assert!((fde(&refs, &gt).unwrap() - ref_fde(&samples, &gt)).abs() < 1e-12);
            assert!((apd(&refs).unwrap() - ref_apd(&samples)).abs() < 1e-12);
            let pseudo: Vec<MotionSequence> = (0..2).map(|_| random(&mut rng, k, d)).collect();
            let (mma, mmf) = mm_metrics(&refs, &pseudo.iter().collect::<Vec<_>>()).unwrap();
            let want_a = (ref_ade(&samples, &pseudo[0]) + ref_ade(&samples, &pseudo[1])) / 2.0;
            let want_f = (ref_fde(&samples, &pseudo[0]) + ref_fde(&samples, &pseudo[1])) / 2.0;
            assert!((mma - want_a).abs() < 1e-12 && (mmf - want_f).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_set_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<MotionSequence> = (0..3).map(|_| random(&mut rng, 3, 5)).collect();
        let refs: Vec<&MotionSequence> = samples.iter().collect();
        let gt = random(&mut rng, 3, 5);
        let (a, f) = mm_metrics(&refs, &[&gt]).unwrap();
        assert_eq!((a, f), (ade(&refs, &gt).unwrap(), fde(&refs, &gt).unwrap()));
        assert_eq!(mm_metrics(&refs, &[&gt, &gt, &gt]).unwrap(), (a, f));
        assert!(matches!(mm_metrics(&refs, &[]), Err(EvalError::EmptyPseudoSet)));
    }

    #[test]
    fn coordinate_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<MotionSequence> = (0..4).map(|_| random(&mut rng, 3, 6)).collect();
        let gt = random(&mut rng, 3, 6);
        let perm = [3, 0, 5, 1, 4, 2];
        let permute = |s: &MotionSequence| {
            let frames: Vec<Vec<f64>> = s.frames().map(|f| perm.iter().map(|&p| f[p]).collect()).collect();
            MotionSequence::from_frames("p", 25.0, &frames).unwrap()
        };
        let ps: Vec<MotionSequence> = samples.iter().map(permute).collect();
        let pg = permute(&gt);
        let r: Vec<&MotionSequence> = samples.iter().collect();
        let pr: Vec<&MotionSequence> = ps.iter().collect();
        assert!((ade(&r, &gt).unwrap() - ade(&pr, &pg).unwrap()).abs() < 1e-12);
        assert!((fde(&r, &gt).unwrap() - fde(&pr, &pg).unwrap()).abs() < 1e-12);
        assert!((apd(&r).unwrap() - apd(&pr).unwrap()).abs() < 1e-12);
        let rev: Vec<&MotionSequence> = r.iter().rev().copied().collect();
        assert!((apd(&r).unwrap() - apd(&rev).unwrap()).abs() < 1e-12);
        let mae = mae_angle(&samples[0], &gt, ChannelSemantics::Expmap).unwrap();
        let pmae = mae_angle(&ps[0], &pg, ChannelSemantics::Expmap).unwrap();
        for (a, b) in mae.iter().zip(&pmae) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn angle_error_examples() {
        let gt = seq(&[&[0.1, 0.2, 0.3]]);
        assert_eq!(mae_angle(&gt, &gt, ChannelSemantics::Expmap).unwrap(), vec![0.0]);
        let off = seq(&[&[0.1, 0.5, 0.3]]);
        let e = mae_angle(&off, &gt, ChannelSemantics::Expmap).unwrap();
        assert!((e[0] - 0.3).abs() < 1e-15);
        assert!(matches!(mae_angle(&off, &gt, ChannelSemantics::Cartesian), Err(EvalError::Semantics(_))));
    }
}
