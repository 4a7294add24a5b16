use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// A one-dimensional quadrature rule: paired nodes and weights.
#[derive(Clone, Debug)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Gamma function at positive half-integer arguments, by exact
/// recursion from Gamma(1) = 1 and Gamma(1/2) = sqrt(pi).
pub fn gamma(x: f64) -> f64 {
    assert!(
        x > 0.0 && (2.0 * x).fract() == 0.0,
        "gamma: need a positive half-integer, got {x}"
    );
    let mut v = 1.0;
    let mut t = x;
    while t > 1.0 {
        t -= 1.0;
        v *= t;
    }
    if t == 0.5 {
        v *= std::f64::consts::PI.sqrt();
    }
    v
}

/// Volume of the unit ball in d real dimensions.
pub fn ball_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    std::f64::consts::PI.powf(h) / gamma(h + 1.0)
}

/// Golub-Welsch: nodes are the eigenvalues of the Jacobi matrix of the
/// orthogonal-polynomial recurrence, weights come from the first row of
/// the eigenvector matrix scaled by the weight function's total mass.
fn golub_welsch(diag: &[f64], offdiag: &[f64], mu0: f64) -> Rule {
    let n = diag.len();
    let mut j = DMatrix::zeros(n, n);
    for (i, &a) in diag.iter().enumerate() {
        j[(i, i)] = a;
    }
    for (i, &b) in offdiag.iter().enumerate() {
        j[(i, i + 1)] = b;
        j[(i + 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mu0 * v * v)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Gauss-Hermite rule: integrates f against e^{-x^2} over the real line.
pub fn gauss_hermite(n: usize) -> Rule {
    assert!(n > 0);
    let diag = vec![0.0; n];
    let offdiag: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    golub_welsch(&diag, &offdiag, std::f64::consts::PI.sqrt())
}

/// Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n > 0);
    let diag = vec![0.0; n];
    let offdiag: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&diag, &offdiag, 2.0)
}

/// Gauss-Legendre rule mapped to [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Rule {
    let base = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    Rule {
        nodes: base.nodes.iter().map(|&x| mid + half * x).collect(),
        weights: base.weights.iter().map(|&w| w * half).collect(),
    }
}

/// Gauss-Laguerre rule: integrates f against e^{-x} over [0, inf).
pub fn gauss_laguerre(n: usize) -> Rule {
    assert!(n > 0);
    let diag: Vec<f64> = (0..n).map(|k| 2.0 * k as f64 + 1.0).collect();
    let offdiag: Vec<f64> = (1..n).map(|k| k as f64).collect();
    golub_welsch(&diag, &offdiag, 1.0)
}

/// Trapezoid rule with interval doubling for a function with the given
/// period. For smooth periodic integrands this converges geometrically;
/// if the requested tolerance is not reached before the refinement cap,
/// the best estimate is reported inside the error.
pub fn integrate_periodic<F: Fn(f64) -> f64>(f: F, period: f64, tol: f64) -> Result<f64> {
    let mut n: usize = 16;
    let h = period / n as f64;
    let mut val: f64 = (0..n).map(|i| f(i as f64 * h)).sum::<f64>() * h;
    for _ in 0..16 {
        let h2 = period / (2 * n) as f64;
        let odd: f64 = (0..n).map(|i| f((2 * i + 1) as f64 * h2)).sum();
        let next = 0.5 * val + h2 * odd;
        let err = (next - val).abs();
        val = next;
        n *= 2;
        if err <= tol * (1.0 + val.abs()) {
            return Ok(val);
        }
    }
    Err(Error::ToleranceNotMet {
        requested: tol,
        achieved: f64::NAN,
        estimate: val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hermite_three_point_rule_is_exact() {
        let r = gauss_hermite(3);
        let s = (1.5f64).sqrt();
        let rt_pi = std::f64::consts::PI.sqrt();
        assert_abs_diff_eq!(r.nodes[0], -s, epsilon = 1e-14);
        assert_abs_diff_eq!(r.nodes[1], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.nodes[2], s, epsilon = 1e-14);
        assert_abs_diff_eq!(r.weights[0], rt_pi / 6.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.weights[1], 2.0 * rt_pi / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn hermite_integrates_gaussian_moments() {
        let r = gauss_hermite(8);
        let rt_pi = std::f64::consts::PI.sqrt();
        assert_abs_diff_eq!(r.integrate(|_| 1.0), rt_pi, epsilon = 1e-13);
        assert_abs_diff_eq!(r.integrate(|x| x * x), rt_pi / 2.0, epsilon = 1e-13);
        assert_abs_diff_eq!(r.integrate(|x| x.powi(4)), rt_pi * 0.75, epsilon = 1e-13);
    }

    #[test]
    fn legendre_nodes_and_exactness() {
        let r = gauss_legendre(3);
        let s = (0.6f64).sqrt();
        assert_abs_diff_eq!(r.nodes[0], -s, epsilon = 1e-14);
        assert_abs_diff_eq!(r.weights[1], 8.0 / 9.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.integrate(|x| x.powi(4)), 0.4, epsilon = 1e-14);
        let shifted = gauss_legendre_on(5, 0.0, 2.0);
        assert_abs_diff_eq!(shifted.integrate(|x| x * x * x), 4.0, epsilon = 1e-13);
    }

    #[test]
    fn laguerre_matches_factorial_moments() {
        let r = gauss_laguerre(10);
        assert_abs_diff_eq!(r.integrate(|x| x.powi(3)), 6.0, epsilon = 1e-10);
        assert_abs_diff_eq!(r.integrate(|x| x.powi(6)), 720.0, epsilon = 1e-8);
        let two = gauss_laguerre(2);
        assert_abs_diff_eq!(two.nodes[0], 2.0 - 2f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(two.weights[0], (2.0 + 2f64.sqrt()) / 4.0, epsilon = 1e-14);
    }

    #[test]
    fn periodic_trapezoid_converges_geometrically() {
        let tau = 2.0 * std::f64::consts::PI;
        let v = integrate_periodic(|t| (t.sin()).exp(), tau, 1e-13).unwrap();
        // 2*pi*I_0(1), modified Bessel
        assert_abs_diff_eq!(v, 7.954926521012846, epsilon = 1e-11);
    }
}
