//! Attractor-point density and count estimates.
//!
//! At an attractor point the whole Hessian space collapses to scalar
//! multiples of the curvature form, so the density integral reduces to a
//! radial moment of |x|^{2 b3} over the complex plane: against the unit-disk
//! indicator it equals pi/(b3+1), against the Gaussian weight it equals
//! pi * b3!. Both reductions admit closed forms, exact low-order quadrature,
//! and Monte Carlo, which this module cross-checks. The block determinant
//! behind the moment is a perfect square, so no absolute-value kink is
//! involved; `perfect_square_check` verifies that structure directly.

use crate::error::{Error, Result};
use crate::quad::{gauss_laguerre, gauss_legendre_on};
use crate::rng::{normal_pair, parallel_mc, stream_rng};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::RngExt;

type C = Complex64;

/// Which weight the |x|^{2 b3} moment is taken against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttractorForm {
    /// Indicator of the unit disk; value pi/(b3+1).
    Indicator,
    /// Gaussian weight e^{-|x|^2}; value pi * b3!.
    Gaussian,
}

/// Evaluation strategy for the radial moment.
#[derive(Clone, Copy, Debug)]
pub enum BhMethod {
    ClosedForm,
    /// Gauss-Laguerre (Gaussian form) or Gauss-Legendre (indicator form);
    /// exact for the polynomial radial integrand.
    Quadrature,
    MonteCarlo { n: u64, seed: u64 },
}

/// Attractor-point problem data: odd Betti number, a user-supplied moduli
/// volume, and the weight form.
#[derive(Clone, Copy, Debug)]
pub struct AttractorConfig {
    pub b3: usize,
    pub vol_wp: f64,
    pub form: AttractorForm,
    /// Model the flat meromorphic connection instead: the curvature block
    /// of the Hessian vanishes and only the perfect-square property of
    /// |det H|^2 is asserted for it.
    pub meromorphic: bool,
}

impl AttractorConfig {
    /// Geometric configuration: b3 = 2 + 2 h21 must be even and at least 2.
    pub fn new(b3: usize, vol_wp: f64, form: AttractorForm) -> Result<Self> {
        if b3 < 2 || b3 % 2 != 0 {
            return Err(Error::input(format!(
                "b3 must be even and at least 2, got {b3}"
            )));
        }
        Self::formal(b3, vol_wp, form)
    }

    /// Formal configuration: any b3, used for the edge members of the
    /// factorial recursion (b3 = 0, 1, 3, ...).
    pub fn formal(b3: usize, vol_wp: f64, form: AttractorForm) -> Result<Self> {
        if !(vol_wp > 0.0) || !vol_wp.is_finite() {
            return Err(Error::input(format!(
                "moduli volume must be positive and finite, got {vol_wp}"
            )));
        }
        Ok(Self {
            b3,
            vol_wp,
            form,
            meromorphic: false,
        })
    }

    pub fn with_meromorphic(mut self) -> Self {
        self.meromorphic = true;
        self
    }
}

/// A density value with its Monte Carlo error (zero for the deterministic
/// methods).
#[derive(Clone, Copy, Debug)]
pub struct BhDensity {
    pub value: f64,
    pub stderr: f64,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// The radial moment of |x|^{2 b3} over C against the configured weight.
pub fn bh_density(cfg: &AttractorConfig, method: BhMethod) -> Result<BhDensity> {
    let b3 = cfg.b3;
    let value = match (cfg.form, method) {
        (AttractorForm::Gaussian, BhMethod::ClosedForm) => {
            std::f64::consts::PI * factorial(b3)
        }
        (AttractorForm::Indicator, BhMethod::ClosedForm) => {
            std::f64::consts::PI / (b3 as f64 + 1.0)
        }
        (AttractorForm::Gaussian, BhMethod::Quadrature) => {
            // polar: pi * int_0^inf u^{b3} e^{-u} du, exact at order b3 + 2
            let rule = gauss_laguerre(b3 + 2);
            std::f64::consts::PI * rule.integrate(|u| u.powi(b3 as i32))
        }
        (AttractorForm::Indicator, BhMethod::Quadrature) => {
            // polar: 2 pi * int_0^1 r^{2 b3 + 1} dr, exact at order b3 + 2
            let rule = gauss_legendre_on(b3 + 2, 0.0, 1.0);
            2.0 * std::f64::consts::PI * rule.integrate(|r| r.powi(2 * b3 as i32 + 1))
        }
        (form, BhMethod::MonteCarlo { n, seed }) => {
            if n < 1_000 {
                return Err(Error::input(format!(
                    "Monte Carlo needs at least 1000 samples, got {n}"
                )));
            }
            let moments = match form {
                AttractorForm::Gaussian => parallel_mc(n, seed, |rng| {
                    // |x|^2 under e^{-|x|^2}/pi is a unit exponential
                    let (g1, g2) = normal_pair(rng);
                    (0.5 * (g1 * g1 + g2 * g2)).powi(b3 as i32)
                }),
                AttractorForm::Indicator => parallel_mc(n, seed, |rng| {
                    // |x|^2 uniform on the disk is uniform on [0, 1]
                    rng.random::<f64>().powi(b3 as i32)
                }),
            };
            return Ok(BhDensity {
                value: std::f64::consts::PI * moments.mean,
                stderr: std::f64::consts::PI * moments.stderr,
            });
        }
    };
    Ok(BhDensity { value, stderr: 0.0 })
}

/// Leading-order count together with the density coefficient; the two
/// constants differ by a factor b3 and are reported side by side.
#[derive(Clone, Copy, Debug)]
pub struct CountEstimate {
    /// L^{b3} * volWP; +inf when it overflows f64.
    pub leading_count: f64,
    /// log10 of the leading count, always finite.
    pub log10_leading_count: f64,
    /// (1 / b3) * volWP; +inf for the formal b3 = 0 edge.
    pub density_coefficient: f64,
    pub overflowed: bool,
}

/// Leading-order number of attractor points up to scale L.
pub fn bh_count_estimate(cfg: &AttractorConfig, l: f64) -> Result<CountEstimate> {
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::input(format!("L must be positive and finite, got {l}")));
    }
    let log10 = cfg.b3 as f64 * l.log10() + cfg.vol_wp.log10();
    let leading = cfg.vol_wp * l.powi(cfg.b3 as i32);
    let overflowed = !leading.is_finite();
    Ok(CountEstimate {
        leading_count: if overflowed { f64::INFINITY } else { leading },
        log10_leading_count: log10,
        density_coefficient: cfg.vol_wp / cfg.b3 as f64,
        overflowed,
    })
}

/// Gaussian-moment comparison for the perfect-square determinant.
#[derive(Clone, Copy, Debug)]
pub struct MomentComparison {
    pub mc: f64,
    pub stderr: f64,
    pub closed: f64,
    pub within_3sigma: bool,
}

/// Outcome of the perfect-square structure checks.
#[derive(Clone, Copy, Debug)]
pub struct PerfectSquareReport {
    pub b3: usize,
    pub meromorphic: bool,
    pub samples: u64,
    /// Largest relative deviation between the numeric block determinant and
    /// its closed form over the sampled points.
    pub identity_max_dev: f64,
    /// None for the meromorphic variant, where only the square structure
    /// itself is asserted.
    pub moment: Option<MomentComparison>,
}

/// The attractor Hessian block matrix [[0, -x Theta], [-conj(x Theta), 0]].
fn attractor_block(x: C, theta: &DMatrix<f64>) -> DMatrix<C> {
    let m = theta.nrows();
    let mut h = DMatrix::<C>::zeros(2 * m, 2 * m);
    for i in 0..m {
        for j in 0..m {
            h[(i, m + j)] = C::new(-theta[(i, j)], 0.0) * x;
            h[(m + i, j)] = C::new(-theta[(i, j)], 0.0) * x.conj();
        }
    }
    h
}

/// Verify that the attractor block determinant is the perfect square
/// |x|^{2 m} (det Theta)^2, with constant sign and no imaginary part, and
/// that the resulting Gaussian moment matches pi * b3! by Monte Carlo.
pub fn perfect_square_check(b3: usize, n: u64, seed: u64) -> Result<PerfectSquareReport> {
    if n < 1_000 {
        return Err(Error::input(format!(
            "Monte Carlo needs at least 1000 samples, got {n}"
        )));
    }
    if b3 == 0 {
        return Err(Error::input("perfect-square check needs b3 >= 1"));
    }
    let m = b3;

    // identity sweep: random x and random well-conditioned real Theta
    let mut rng = stream_rng(seed, u64::MAX);
    let mut max_dev = 0.0f64;
    for _ in 0..64 {
        let (g1, g2) = normal_pair(&mut rng);
        let x = C::new(g1, g2);
        let mut theta = DMatrix::<f64>::identity(m, m);
        for i in 0..m {
            for j in 0..m {
                let (a, _) = normal_pair(&mut rng);
                theta[(i, j)] += 0.3 * a;
            }
        }
        let det = attractor_block(x, &theta).determinant();
        let det_theta = theta.determinant();
        let closed = x.norm_sqr().powi(m as i32) * det_theta * det_theta;
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        let scale = closed.abs().max(1.0);
        // real with constant sign (-1)^m: a polynomial square, no kink
        max_dev = max_dev
            .max((det.re * sign - closed).abs() / scale)
            .max(det.im.abs() / scale);
    }

    // Gaussian moment of |det| with Theta = identity: pi * E[|x|^{2 b3}]
    let moments = parallel_mc(n, seed, |rng| {
        let (g1, g2) = normal_pair(rng);
        let x = C::new(g1, g2) * C::new(0.5f64.sqrt(), 0.0);
        attractor_block(x, &DMatrix::identity(b3, b3))
            .determinant()
            .norm()
    });
    let closed = std::f64::consts::PI * factorial(b3);
    let mc = std::f64::consts::PI * moments.mean;
    let stderr = std::f64::consts::PI * moments.stderr;
    Ok(PerfectSquareReport {
        b3,
        meromorphic: false,
        samples: n,
        identity_max_dev: max_dev,
        moment: Some(MomentComparison {
            mc,
            stderr,
            closed,
            within_3sigma: (mc - closed).abs() <= 3.0 * stderr,
        }),
    })
}

/// Meromorphic-connection variant: the curvature block vanishes, the Hessian
/// is block diagonal [[H, 0], [0, conj(H)]], and |det| = |det H|^2 exactly.
pub fn perfect_square_check_meromorphic(
    m: usize,
    n: u64,
    seed: u64,
) -> Result<PerfectSquareReport> {
    if m == 0 {
        return Err(Error::input("block size must be positive"));
    }
    if n == 0 {
        return Err(Error::input("need at least one sample"));
    }
    let mut rng = stream_rng(seed, 0);
    let mut max_dev = 0.0f64;
    for _ in 0..n {
        // random complex symmetric holomorphic block
        let mut h = DMatrix::<C>::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let (a, b) = normal_pair(&mut rng);
                h[(i, j)] = C::new(a, b);
                h[(j, i)] = C::new(a, b);
            }
        }
        let mut full = DMatrix::<C>::zeros(2 * m, 2 * m);
        for i in 0..m {
            for j in 0..m {
                full[(i, j)] = h[(i, j)];
                full[(m + i, m + j)] = h[(i, j)].conj();
            }
        }
        let det = full.determinant();
        let square = h.determinant().norm_sqr();
        let scale = square.max(1.0);
        max_dev = max_dev
            .max((det.re - square).abs() / scale)
            .max(det.im.abs() / scale);
    }
    Ok(PerfectSquareReport {
        b3: 2 * m,
        meromorphic: true,
        samples: n,
        identity_max_dev: max_dev,
        moment: None,
    })
}

/// Dispatch on the config flag: attractor blocks by default, block-diagonal
/// holomorphic squares for the meromorphic connection.
pub fn perfect_square_report(
    cfg: &AttractorConfig,
    n: u64,
    seed: u64,
) -> Result<PerfectSquareReport> {
    if cfg.meromorphic {
        perfect_square_check_meromorphic(cfg.b3.max(2) / 2, n.min(256).max(1), seed)
    } else {
        perfect_square_check(cfg.b3, n, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn cfg(b3: usize, form: AttractorForm) -> AttractorConfig {
        AttractorConfig::new(b3, 1.0, form).unwrap()
    }

    // Simpson oracle for the radial Gaussian moment, independent of the
    // closed form and of the quadrature rules.
    fn gaussian_moment_oracle(b3: usize) -> f64 {
        let (a, b, n) = (0.0, 120.0, 60_000);
        let h = (b - a) / n as f64;
        let f = |u: f64| u.powi(b3 as i32) * (-u).exp();
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 0 { 2.0 } else { 4.0 };
            s += w * f(a + i as f64 * h);
        }
        PI * s * h / 3.0
    }

    #[test]
    fn closed_gaussian_matches_radial_oracle() {
        for b3 in [2usize, 4, 6] {
            let v = bh_density(&cfg(b3, AttractorForm::Gaussian), BhMethod::ClosedForm)
                .unwrap()
                .value;
            let oracle = gaussian_moment_oracle(b3);
            assert!(
                (v - oracle).abs() < 1e-8 * oracle,
                "b3 = {b3}: {v} vs {oracle}"
            );
        }
    }

    #[test]
    fn closed_indicator_matches_radial_oracle() {
        for b3 in [2usize, 4, 8] {
            let v = bh_density(&cfg(b3, AttractorForm::Indicator), BhMethod::ClosedForm)
                .unwrap()
                .value;
            // 2 pi int_0^1 r^{2 b3 + 1} dr by midpoint refinement
            let n = 400_000;
            let h = 1.0 / n as f64;
            let mut s = 0.0;
            for i in 0..n {
                let r = (i as f64 + 0.5) * h;
                s += r.powi(2 * b3 as i32 + 1) * h;
            }
            assert!(
                (v - 2.0 * PI * s).abs() < 1e-8,
                "b3 = {b3}: {v} vs {}",
                2.0 * PI * s
            );
        }
    }

    #[test]
    fn formal_edges_match_known_values() {
        let e0 = AttractorConfig::formal(0, 1.0, AttractorForm::Gaussian).unwrap();
        assert_abs_diff_eq!(
            bh_density(&e0, BhMethod::ClosedForm).unwrap().value,
            PI,
            epsilon = 1e-14
        );
        let e1 = AttractorConfig::formal(1, 1.0, AttractorForm::Indicator).unwrap();
        assert_abs_diff_eq!(
            bh_density(&e1, BhMethod::ClosedForm).unwrap().value,
            PI / 2.0,
            epsilon = 1e-14
        );
        let e3 = AttractorConfig::formal(3, 1.0, AttractorForm::Gaussian).unwrap();
        assert_abs_diff_eq!(
            bh_density(&e3, BhMethod::ClosedForm).unwrap().value,
            6.0 * PI,
            epsilon = 1e-12
        );
    }

    #[test]
    fn quadrature_matches_closed_form_to_1e10() {
        for b3 in [2usize, 4, 6, 8] {
            for form in [AttractorForm::Gaussian, AttractorForm::Indicator] {
                let closed = bh_density(&cfg(b3, form), BhMethod::ClosedForm)
                    .unwrap()
                    .value;
                let quad = bh_density(&cfg(b3, form), BhMethod::Quadrature)
                    .unwrap()
                    .value;
                assert!(
                    (closed - quad).abs() < 1e-10 * closed.max(1.0),
                    "b3 = {b3} {form:?}: {closed} vs {quad}"
                );
            }
        }
    }

    #[test]
    fn monte_carlo_agrees_within_3_sigma() {
        for b3 in [2usize, 4] {
            for form in [AttractorForm::Gaussian, AttractorForm::Indicator] {
                let closed = bh_density(&cfg(b3, form), BhMethod::ClosedForm)
                    .unwrap()
                    .value;
                let mc = bh_density(
                    &cfg(b3, form),
                    BhMethod::MonteCarlo {
                        n: 400_000,
                        seed: 0xb3 + b3 as u64,
                    },
                )
                .unwrap();
                assert!(mc.stderr > 0.0);
                assert!(
                    (mc.value - closed).abs() <= 3.0 * mc.stderr,
                    "b3 = {b3} {form:?}: {} vs {closed} (sigma {})",
                    mc.value,
                    mc.stderr
                );
            }
        }
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let run = || {
            bh_density(
                &cfg(4, AttractorForm::Gaussian),
                BhMethod::MonteCarlo { n: 50_000, seed: 7 },
            )
            .unwrap()
            .value
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn small_monte_carlo_rejected() {
        let err = bh_density(
            &cfg(2, AttractorForm::Gaussian),
            BhMethod::MonteCarlo { n: 999, seed: 1 },
        );
        assert!(err.is_err());
    }

    #[test]
    fn gaussian_form_satisfies_factorial_recursion() {
        for b3 in 2usize..=8 {
            let hi = AttractorConfig::formal(b3, 1.0, AttractorForm::Gaussian).unwrap();
            let lo = AttractorConfig::formal(b3 - 1, 1.0, AttractorForm::Gaussian).unwrap();
            let ratio = bh_density(&hi, BhMethod::ClosedForm).unwrap().value
                / bh_density(&lo, BhMethod::ClosedForm).unwrap().value;
            assert_abs_diff_eq!(ratio, b3 as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn count_estimate_examples() {
        let c = bh_count_estimate(&cfg(2, AttractorForm::Gaussian), 10.0).unwrap();
        assert_abs_diff_eq!(c.leading_count, 100.0, epsilon = 1e-10);
        assert_abs_diff_eq!(c.density_coefficient, 0.5, epsilon = 1e-15);
        assert!(!c.overflowed);

        let cfg4 = AttractorConfig::new(4, 2.0, AttractorForm::Gaussian).unwrap();
        let c4 = bh_count_estimate(&cfg4, 10.0).unwrap();
        assert_abs_diff_eq!(c4.leading_count, 2.0e4, epsilon = 1e-8);

        let tiny = bh_count_estimate(&cfg(2, AttractorForm::Gaussian), 1e-12).unwrap();
        assert!(tiny.leading_count < 1e-20);

        assert!(bh_count_estimate(&cfg(2, AttractorForm::Gaussian), 0.0).is_err());
        assert!(bh_count_estimate(&cfg(2, AttractorForm::Gaussian), -3.0).is_err());
    }

    #[test]
    fn count_estimate_overflow_reported_in_log_space() {
        let big = AttractorConfig::new(400, 1.5, AttractorForm::Gaussian).unwrap();
        let c = bh_count_estimate(&big, 1.0e3).unwrap();
        assert!(c.overflowed);
        assert!(c.leading_count.is_infinite());
        assert_abs_diff_eq!(
            c.log10_leading_count,
            1200.0 + 1.5f64.log10(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn config_validation() {
        assert!(AttractorConfig::new(3, 1.0, AttractorForm::Gaussian).is_err());
        assert!(AttractorConfig::new(0, 1.0, AttractorForm::Gaussian).is_err());
        assert!(AttractorConfig::new(2, 0.0, AttractorForm::Gaussian).is_err());
        assert!(AttractorConfig::new(2, -1.0, AttractorForm::Gaussian).is_err());
        assert!(AttractorConfig::formal(1, 2.5, AttractorForm::Indicator).is_ok());
    }

    #[test]
    fn block_determinant_is_a_smooth_square() {
        // m = 1, Theta = 1: det [[0, -x], [-conj x, 0]] = -|x|^2
        let d = attractor_block(C::new(0.6, -1.1), &DMatrix::identity(1, 1)).determinant();
        assert_abs_diff_eq!(d.re, -(0.6f64 * 0.6 + 1.1 * 1.1), epsilon = 1e-14);
        assert_abs_diff_eq!(d.im, 0.0, epsilon = 1e-14);

        let rep = perfect_square_check(2, 1_000, 5).unwrap();
        assert!(rep.identity_max_dev < 1e-10, "{}", rep.identity_max_dev);
    }

    #[test]
    fn perfect_square_moment_matches_closed_value() {
        for b3 in [2usize, 4] {
            let rep = perfect_square_check(b3, 200_000, 0xb3).unwrap();
            let m = rep.moment.unwrap();
            assert!(
                (m.mc - m.closed).abs() <= 3.0 * m.stderr,
                "b3 = {b3}: {} vs {} (sigma {})",
                m.mc,
                m.closed,
                m.stderr
            );
            assert!(m.within_3sigma);
            assert_abs_diff_eq!(m.closed, PI * factorial(b3), epsilon = 1e-12);
        }
        assert!(perfect_square_check(2, 10, 1).is_err());
    }

    #[test]
    fn meromorphic_variant_is_a_square() {
        let rep = perfect_square_check_meromorphic(3, 128, 11).unwrap();
        assert!(rep.meromorphic);
        assert!(rep.moment.is_none());
        assert!(rep.identity_max_dev < 1e-10, "{}", rep.identity_max_dev);

        let flagged = cfg(4, AttractorForm::Gaussian).with_meromorphic();
        let rep2 = perfect_square_report(&flagged, 64, 3).unwrap();
        assert!(rep2.meromorphic);
        assert!(rep2.identity_max_dev < 1e-10);
    }
}
