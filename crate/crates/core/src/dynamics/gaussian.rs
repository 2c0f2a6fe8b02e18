use libm::erfc;
use statrs::function::gamma::gamma_lr;

use crate::pfm::LatentGaussian;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

// Acklam's rational approximation, one Halley step polishes it to near
// machine precision.
const A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const D: [f64; 4] = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00];
const P_LOW: f64 = 0.02425;

/// Inverse standard normal CDF for `p ∈ (0, 1)`; exactly 0 at `p = 0.5`.
pub fn normal_inv_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability {p} outside (0, 1)");
    if p == 0.5 {
        return 0.0;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - P_LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// CDF of the chi distribution with `dof` degrees of freedom.
pub fn chi_cdf(r: f64, dof: usize) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    gamma_lr(0.5 * dof as f64, 0.5 * r * r)
}

/// Where a latent code falls under a predicted frame Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameQuantile {
    /// `Φ((z_i − ẑ_i) / σ_i)` per dimension.
    pub per_dim: Vec<f64>,
    /// Mahalanobis radius `‖(z − ẑ) ⊘ σ‖`.
    pub radius: f64,
    /// Chi CDF of the radius: 0 at the mean, approaching 1 in the tails.
    /// A code lies in the central `p` region iff this is at most `p`.
    pub radius_quantile: f64,
}

pub fn frame_quantile(gaussian: &LatentGaussian, z: &[f64]) -> FrameQuantile {
    assert_eq!(z.len(), gaussian.dims(), "latent width mismatch");
    let whitened: Vec<f64> = z
        .iter()
        .zip(&gaussian.mean)
        .zip(&gaussian.std)
        .map(|((z, m), s)| {
            assert!(*s > 0.0, "standard deviation must be positive");
            (z - m) / s
        })
        .collect();
    let radius = whitened.iter().map(|w| w * w).sum::<f64>().sqrt();
    FrameQuantile {
        per_dim: whitened.iter().map(|&w| normal_cdf(w)).collect(),
        radius,
        radius_quantile: chi_cdf(radius, z.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson integration of the standard normal pdf on [0, x].
    fn cdf_by_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(x);
        for i in 1..n {
            s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + s * h / 3.0
    }

    /// Bisection on the quadrature CDF.
    fn inv_by_quadrature(p: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 8.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if cdf_by_quadrature(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn inverse_cdf_matches_quadrature_oracle() {
        // tabulated Φ⁻¹(0.975)
        let oracle = inv_by_quadrature(0.975);
        assert!((oracle - 1.959963984540054).abs() < 1e-9, "{oracle}");
        assert!((normal_inv_cdf(0.975) - oracle).abs() < 1e-9);
        for p in [0.55, 0.6, 0.75, 0.9, 0.99, 0.999] {
            let x = normal_inv_cdf(p);
            assert!((x - inv_by_quadrature(p)).abs() < 1e-9, "p={p}");
            assert!((normal_inv_cdf(1.0 - p) + x).abs() < 1e-12);
        }
    }

    #[test]
    fn median_maps_to_exact_zero() {
        assert_eq!(normal_inv_cdf(0.5), 0.0);
        assert_eq!(normal_cdf(0.0), 0.5);
    }

    #[test]
    fn cdf_at_one_sigma() {
        let (a, b) = (normal_cdf(1.0), cdf_by_quadrature(1.0));
        assert!((a - b).abs() < 1e-12, "{a} {b}");
        assert!((normal_cdf(1.0) - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn frame_quantile_center_and_one_sigma() {
        let g = LatentGaussian { mean: vec![0.3, -1.0], std: vec![0.5, 2.0] };
        let q = frame_quantile(&g, &[0.3, -1.0]);
        assert_eq!(q.per_dim, vec![0.5, 0.5]);
        assert_eq!(q.radius_quantile, 0.0);

        let one = LatentGaussian { mean: vec![1.0], std: vec![0.25] };
        let q = frame_quantile(&one, &[1.25]);
        assert!((q.per_dim[0] - 0.8413447460685429).abs() < 1e-12);
        // chi with one dof is |N(0,1)|: P(|g| ≤ 1) = 2Φ(1) − 1
        assert!((q.radius_quantile - (2.0 * normal_cdf(1.0) - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn radius_summary_is_monotone_along_axes() {
        let g = LatentGaussian { mean: vec![0.0, 1.0, -2.0], std: vec![1.0, 0.3, 2.0] };
        for axis in 0..3 {
            for dir in [-1.0, 1.0] {
                let mut last = 0.0;
                for k in 0..40 {
                    let mut z = g.mean.clone();
                    z[axis] += dir * k as f64 * 0.2;
                    let q = frame_quantile(&g, &z).radius_quantile;
                    assert!(q >= last);
                    last = q;
                }
            }
        }
    }
}
