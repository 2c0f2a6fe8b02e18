use super::{Graph, NumericsError, Tensor, Var};

/// Step used by the central-difference oracle.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is (numerically) zero are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Builds a scalar-valued graph from bound leaves. The closure receives the
/// graph and one `Var` per binding, in order.
pub trait GraphFn: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>> GraphFn for F {}

/// Evaluates `build` with every binding registered as a differentiable leaf.
pub fn evaluate(build: &impl GraphFn, bindings: &[Tensor]) -> Result<Tensor, NumericsError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = bindings.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

/// Analytic gradients of a scalar `build` for every binding.
pub fn gradients(build: &impl GraphFn, bindings: &[Tensor]) -> Result<(f64, Vec<Tensor>), NumericsError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = bindings.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.gradients(out, &vars)?;
    Ok((g.value(out).item(), grads))
}

fn scalar_at(build: &impl GraphFn, bindings: &[Tensor]) -> Result<f64, NumericsError> {
    let t = evaluate(build, bindings)?;
    if t.len() != 1 {
        return Err(NumericsError::NonScalarOutput(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central-difference derivative of `build` with respect to one entry.
pub fn central_difference(
    build: &impl GraphFn,
    bindings: &[Tensor],
    param: usize,
    entry: usize,
) -> Result<f64, NumericsError> {
    let mut shifted = bindings.to_vec();
    let base = bindings[param].data()[entry];
    shifted[param].data_mut()[entry] = base + FD_STEP;
    let plus = scalar_at(build, &shifted)?;
    shifted[param].data_mut()[entry] = base - FD_STEP;
    let minus = scalar_at(build, &shifted)?;
    Ok((plus - minus) / (2.0 * FD_STEP))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub param: usize,
    pub max_rel_error: f64,
    /// Entry index with the largest relative error.
    pub worst_entry: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    /// Set when the graph could not be evaluated at all (the check fails).
    pub failure: Option<String>,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares analytic gradients with central differences for every entry of
/// every binding. Evaluation failures (overflow, NaN) are reported, not raised.
pub fn finite_diff_check(build: &impl GraphFn, bindings: &[Tensor], tolerance: f64) -> FiniteDiffReport {
    assert!(tolerance > 0.0, "tolerance must be positive");
    let fail = |e: NumericsError| FiniteDiffReport { tolerance, params: Vec::new(), failure: Some(e.to_string()) };
    let (_, analytic) = match gradients(build, bindings) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let mut params = Vec::with_capacity(bindings.len());
    for (p, grad) in analytic.iter().enumerate() {
        let mut worst = (0.0, 0);
        for entry in 0..grad.len() {
            let numeric = match central_difference(build, bindings, p, entry) {
                Ok(v) => v,
                Err(e) => return fail(e),
            };
            let err = relative_error(grad.data()[entry], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, entry);
            }
        }
        params.push(ParamCheck {
            param: p,
            max_rel_error: worst.0,
            worst_entry: worst.1,
            passed: worst.0 < tolerance,
        });
    }
    FiniteDiffReport { tolerance, params, failure: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn square_passes_with_tiny_error() {
        let f = |g: &mut Graph, v: &[Var]| g.mul(v[0], v[0]);
        let report = finite_diff_check(&f, &[Tensor::scalar(3.0)], 1e-4);
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-8, "{}", report.max_rel_error());
    }

    #[test]
    fn matmul_loss_gradient_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(3, 3, &mut rng);
        let w = random(3, 3, &mut rng);
        let f = |g: &mut Graph, v: &[Var]| {
            let y = g.matmul(v[0], v[1])?;
            let t = g.tanh(y)?;
            let sq = g.square(t)?;
            g.sum(sq)
        };
        let (_, analytic) = gradients(&f, &[x.clone(), w.clone()]).unwrap();
        for entry in 0..9 {
            let numeric = central_difference(&f, &[x.clone(), w.clone()], 1, entry).unwrap();
            assert!(relative_error(analytic[1].data()[entry], numeric) < 1e-6);
        }
    }

    #[test]
    fn overflow_is_reported_not_raised() {
        let f = |g: &mut Graph, v: &[Var]| {
            let e = g.exp(v[0])?;
            g.sum(e)
        };
        let report = finite_diff_check(&f, &[Tensor::scalar(800.0)], 1e-4);
        assert!(!report.passed());
        assert!(report.failure.as_deref().unwrap().contains("exp"));
    }

    #[test]
    fn evaluate_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(4, 5, &mut rng);
        let f = |g: &mut Graph, v: &[Var]| {
            let s = g.sigmoid(v[0])?;
            let t = g.tanh(s)?;
            g.mean(t)
        };
        let a = evaluate(&f, &[x.clone()]).unwrap();
        let b = evaluate(&f, &[x]).unwrap();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    }

    /// One graph per primitive, each reduced to a scalar through a fixed
    /// random weighting so the incoming gradient is not uniform.
    fn primitive(op: usize) -> impl Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError> {
        move |g: &mut Graph, v: &[Var]| {
            let (a, b, row) = (v[0], v[1], v[2]);
            let y = match op {
                0 => {
                    let bt = g.reshape(b, 3, 2)?;
                    g.matmul(a, bt)?
                }
                1 => g.add(a, b)?,
                2 => g.sub(a, b)?,
                3 => g.mul(a, b)?,
                4 => {
                    let d = g.exp(b)?;
                    g.div(a, d)?
                }
                5 => g.tanh(a)?,
                6 => g.sigmoid(a)?,
                7 => g.exp(a)?,
                8 => {
                    let sq = g.square(a)?;
                    let pos = g.shift(sq, 0.5)?;
                    g.log(pos)?
                }
                9 => g.concat_cols(&[a, b])?,
                10 => g.slice_cols(a, 1, 3)?,
                11 => g.gather_cols(a, &[2, 0, 2])?,
                12 => g.add_row(a, row)?,
                13 => g.mul_row(a, row)?,
                14 => g.scale(a, -1.7)?,
                15 => g.sum(a)?,
                16 => g.mean(a)?,
                _ => unreachable!(),
            };
            let (m, n) = g.shape(y);
            let w = g.input(Tensor::matrix(m, n, (0..m * n).map(|i| ((i * 7 % 5) as f64) - 1.3).collect()));
            let weighted = g.mul(y, w)?;
            g.sum(weighted)
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_primitive_matches_central_differences(op in 0usize..17, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bindings = [random(2, 3, &mut rng), random(2, 3, &mut rng), random(1, 3, &mut rng)];
            let report = finite_diff_check(&primitive(op), &bindings, 1e-4);
            prop_assert!(report.passed(), "op {op}: {report:?}");
        }

        #[test]
        fn constants_have_zero_gradient(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let p = g.param(random(2, 2, &mut rng));
            let c = g.input(random(2, 2, &mut rng));
            let t = g.tanh(c)?;
            let s = g.sum(t)?;
            let grads = g.gradients(s, &[p])?;
            prop_assert!(grads[0].data().iter().all(|&v| v == 0.0));
        }
    }
}
