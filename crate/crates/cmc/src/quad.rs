//! One-dimensional adaptive Gauss-Legendre quadrature.
//!
//! Used by the stratified-estimator oracles to compute region masses, means,
//! and variances by numerical integration. Accuracy target is set by the
//! caller; the default oracle tolerance is 1e-8.

/// 10-point Gauss-Legendre nodes on [-1, 1] (positive half; symmetric).
const GL_NODES: [f64; 5] = [
    0.148874338981631211,
    0.433395394129247191,
    0.679409568299024406,
    0.865063366688984511,
    0.973906528517171720,
];
const GL_WEIGHTS: [f64; 5] = [
    0.295524224714752870,
    0.269266719309996355,
    0.219086362515982044,
    0.149451349150580593,
    0.066671344308688138,
];

fn gl10(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut acc = 0.0;
    for i in 0..5 {
        let dx = h * GL_NODES[i];
        acc += GL_WEIGHTS[i] * (f(c - dx) + f(c + dx));
    }
    acc * h
}

fn adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, whole: f64, depth: u32) -> f64 {
    let c = 0.5 * (a + b);
    let left = gl10(f, a, c);
    let right = gl10(f, c, b);
    let refined = left + right;
    if depth >= 40 || (refined - whole).abs() <= tol {
        return refined;
    }
    adaptive(f, a, c, 0.5 * tol, left, depth + 1) + adaptive(f, c, b, 0.5 * tol, right, depth + 1)
}

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    // Seed the subdivision with a few panels so narrow features are seen.
    let panels = 8;
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for k in 0..panels {
        let lo = a + k as f64 * h;
        let hi = lo + h;
        acc += adaptive(&f, lo, hi, tol / panels as f64, gl10(&f, lo, hi), 0);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn polynomial_exact() {
        let v = integrate(|x| 3.0 * x * x, 0.0, 2.0, 1e-12);
        assert_relative_eq!(v, 8.0, epsilon = 1e-10);
    }

    #[test]
    fn gaussian_mass() {
        let v = integrate(
            |x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            -12.0,
            12.0,
            1e-10,
        );
        assert_relative_eq!(v, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn gamma_4_mean() {
        // Unnormalized Gamma(alpha = 4, kappa = 0.5): x^3 exp(-2x).
        let pdf = |x: f64| x.powi(3) * (-2.0 * x).exp();
        let z = integrate(pdf, 0.0, 60.0, 1e-12);
        let m1 = integrate(|x| x * pdf(x), 0.0, 60.0, 1e-12);
        assert_relative_eq!(m1 / z, 2.0, epsilon = 1e-8);
    }
}
