use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::RngExt;

use crate::error::{Error, Result};
use crate::fd;
use crate::rng::stream_rng;

type C = Complex64;

fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

/// Hermitian metric data on a trivialized line bundle over a chart of
/// C^m: the potential K with |e|^2_h = e^{-K}, its holomorphic gradient
/// dK/dZ_j, the curvature d^2K/dZ_j dZbar_q, and the second holomorphic
/// derivative d^2K/dZ_j dZ_q needed by covariant Hessians.
#[derive(Clone)]
pub struct HermitianModel {
    m: usize,
    kind: ModelKind,
}

#[derive(Clone)]
enum ModelKind {
    /// K = |Z|^2
    Flat,
    /// K = level * ln(1 + |Z|^2)
    Projective { level: f64 },
    Custom {
        potential: Arc<dyn Fn(&[C]) -> f64 + Send + Sync>,
        grad: Arc<dyn Fn(&[C]) -> Vec<C> + Send + Sync>,
    },
}

impl std::fmt::Debug for HermitianModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &self.kind {
            ModelKind::Flat => "flat".to_string(),
            ModelKind::Projective { level } => format!("projective({level})"),
            ModelKind::Custom { .. } => "custom".to_string(),
        };
        write!(f, "HermitianModel {{ m: {}, kind: {} }}", self.m, kind)
    }
}

/// Finite-difference step for differentiating custom potentials.
const FD_H: f64 = 1e-3;

impl HermitianModel {
    pub fn flat(m: usize) -> Self {
        assert!(m >= 1);
        HermitianModel {
            m,
            kind: ModelKind::Flat,
        }
    }

    pub fn projective(m: usize, level: f64) -> Result<Self> {
        if m < 1 {
            return Err(Error::input("complex dimension must be at least 1"));
        }
        if !(level > 0.0 && level.is_finite()) {
            return Err(Error::input(format!(
                "projective level must be positive and finite, got {level}"
            )));
        }
        Ok(HermitianModel {
            m,
            kind: ModelKind::Projective { level },
        })
    }

    /// Custom potential with a user-supplied holomorphic gradient. The
    /// gradient is spot-checked against finite differences of the
    /// potential at load; curvature and second derivatives are taken by
    /// finite differences of the gradient.
    pub fn custom<P, G>(m: usize, potential: P, grad: G) -> Result<Self>
    where
        P: Fn(&[C]) -> f64 + Send + Sync + 'static,
        G: Fn(&[C]) -> Vec<C> + Send + Sync + 'static,
    {
        if m < 1 {
            return Err(Error::input("complex dimension must be at least 1"));
        }
        let model = HermitianModel {
            m,
            kind: ModelKind::Custom {
                potential: Arc::new(potential),
                grad: Arc::new(grad),
            },
        };
        let mut rng = stream_rng(0x6b70_6f74, 0);
        let pot = |z: &[C]| {
            let (p, _) = model.custom_parts();
            c(p(z), 0.0)
        };
        for trial in 0..32 {
            let z: Vec<C> = (0..m)
                .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let g = model.grad_potential(&z);
            if g.len() != m {
                return Err(Error::input("custom gradient has wrong length"));
            }
            for j in 0..m {
                let want = fd::wirtinger_dz(&pot, &z, j, FD_H);
                if (g[j] - want).norm() > 1e-6 * (1.0 + want.norm()) {
                    return Err(Error::input(format!(
                        "custom gradient component {j} disagrees with finite differences \
                         of the potential at sample {trial} ({} vs {})",
                        g[j], want
                    )));
                }
            }
        }
        Ok(model)
    }

    fn custom_parts(
        &self,
    ) -> (
        &Arc<dyn Fn(&[C]) -> f64 + Send + Sync>,
        &Arc<dyn Fn(&[C]) -> Vec<C> + Send + Sync>,
    ) {
        match &self.kind {
            ModelKind::Custom { potential, grad } => (potential, grad),
            _ => unreachable!("custom_parts on builtin model"),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn potential(&self, z: &[C]) -> f64 {
        debug_assert_eq!(z.len(), self.m);
        match &self.kind {
            ModelKind::Flat => z.iter().map(|v| v.norm_sqr()).sum(),
            ModelKind::Projective { level } => {
                level * (1.0 + z.iter().map(|v| v.norm_sqr()).sum::<f64>()).ln()
            }
            ModelKind::Custom { potential, .. } => potential(z),
        }
    }

    /// dK/dZ_j.
    pub fn grad_potential(&self, z: &[C]) -> Vec<C> {
        match &self.kind {
            ModelKind::Flat => z.iter().map(|v| v.conj()).collect(),
            ModelKind::Projective { level } => {
                let s = 1.0 + z.iter().map(|v| v.norm_sqr()).sum::<f64>();
                z.iter().map(|v| v.conj() * (level / s)).collect()
            }
            ModelKind::Custom { grad, .. } => grad(z),
        }
    }

    /// Curvature Theta_{jq} = d^2 K / dZ_j dZbar_q, Hermitian.
    pub fn curvature(&self, z: &[C]) -> DMatrix<C> {
        let m = self.m;
        match &self.kind {
            ModelKind::Flat => DMatrix::identity(m, m),
            ModelKind::Projective { level } => {
                let s = 1.0 + z.iter().map(|v| v.norm_sqr()).sum::<f64>();
                DMatrix::from_fn(m, m, |j, q| {
                    let kr = if j == q { s } else { 0.0 };
                    (c(kr, 0.0) - z[j].conj() * z[q]) * (level / (s * s))
                })
            }
            ModelKind::Custom { grad, .. } => {
                let raw = DMatrix::from_fn(m, m, |j, q| {
                    let gj = |w: &[C]| grad(w)[j];
                    fd::wirtinger_dzbar(&gj, z, q, FD_H)
                });
                // clean finite-difference noise off the Hermitian part
                (&raw + raw.adjoint()) * c(0.5, 0.0)
            }
        }
    }

    /// Second holomorphic derivative d^2 K / dZ_j dZ_q (symmetric); this
    /// is the connection term in the covariant Hessian, distinct from
    /// the curvature's mixed derivative.
    pub fn potential_hh(&self, z: &[C]) -> DMatrix<C> {
        let m = self.m;
        match &self.kind {
            ModelKind::Flat => DMatrix::zeros(m, m),
            ModelKind::Projective { level } => {
                let s = 1.0 + z.iter().map(|v| v.norm_sqr()).sum::<f64>();
                DMatrix::from_fn(m, m, |j, q| {
                    -z[j].conj() * z[q].conj() * (level / (s * s))
                })
            }
            ModelKind::Custom { grad, .. } => {
                let raw = DMatrix::from_fn(m, m, |j, q| {
                    let gj = |w: &[C]| grad(w)[j];
                    fd::wirtinger_dz(&gj, z, q, FD_H)
                });
                (&raw + raw.transpose()) * c(0.5, 0.0)
            }
        }
    }
}

/// A holomorphic section in a fixed frame: f together with exact first
/// and second derivative evaluators. Polynomials carry closed-form
/// derivatives; closure-backed sections supply their own.
#[derive(Clone)]
pub struct HoloSection {
    m: usize,
    repr: Repr,
}

#[derive(Clone)]
enum Repr {
    Poly(Vec<(Vec<u32>, C)>),
    Custom {
        f: Arc<dyn Fn(&[C]) -> C + Send + Sync>,
        df: Arc<dyn Fn(&[C], usize) -> C + Send + Sync>,
        d2f: Arc<dyn Fn(&[C], usize, usize) -> C + Send + Sync>,
    },
}

impl std::fmt::Debug for HoloSection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.repr {
            Repr::Poly(terms) => write!(f, "HoloSection::poly(m={}, {} terms)", self.m, terms.len()),
            Repr::Custom { .. } => write!(f, "HoloSection::custom(m={})", self.m),
        }
    }
}

impl HoloSection {
    /// Sparse polynomial: each term is (exponent multi-index, coefficient).
    /// Duplicate multi-indices are merged.
    pub fn poly(m: usize, terms: Vec<(Vec<u32>, C)>) -> Result<Self> {
        if m == 0 {
            return Err(Error::input("section needs at least one variable"));
        }
        let mut merged: Vec<(Vec<u32>, C)> = Vec::new();
        for (exps, coeff) in terms {
            if exps.len() != m {
                return Err(Error::input(format!(
                    "multi-index {exps:?} has length {} but the section has {} variables",
                    exps.len(),
                    m
                )));
            }
            if !coeff.re.is_finite() || !coeff.im.is_finite() {
                return Err(Error::input("polynomial coefficient must be finite"));
            }
            match merged.iter_mut().find(|(e, _)| *e == exps) {
                Some((_, c0)) => *c0 += coeff,
                None => merged.push((exps, coeff)),
            }
        }
        merged.retain(|(_, c0)| c0.norm() != 0.0);
        Ok(HoloSection {
            m,
            repr: Repr::Poly(merged),
        })
    }

    /// Univariate polynomial from ascending coefficients c0 + c1 z + ...
    pub fn poly1(coeffs: &[C]) -> Self {
        let terms = coeffs
            .iter()
            .enumerate()
            .map(|(k, &c0)| (vec![k as u32], c0))
            .collect();
        Self::poly(1, terms).expect("univariate construction cannot fail")
    }

    pub fn custom<F, D, D2>(m: usize, f: F, df: D, d2f: D2) -> Self
    where
        F: Fn(&[C]) -> C + Send + Sync + 'static,
        D: Fn(&[C], usize) -> C + Send + Sync + 'static,
        D2: Fn(&[C], usize, usize) -> C + Send + Sync + 'static,
    {
        HoloSection {
            m,
            repr: Repr::Custom {
                f: Arc::new(f),
                df: Arc::new(df),
                d2f: Arc::new(d2f),
            },
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eval(&self, z: &[C]) -> C {
        debug_assert_eq!(z.len(), self.m);
        match &self.repr {
            Repr::Poly(terms) => terms
                .iter()
                .map(|(exps, coeff)| {
                    let mono: C = exps
                        .iter()
                        .enumerate()
                        .map(|(i, &e)| z[i].powu(e))
                        .product();
                    coeff * mono
                })
                .sum(),
            Repr::Custom { f, .. } => f(z),
        }
    }

    /// df/dZ_j for all j.
    pub fn grad(&self, z: &[C]) -> Vec<C> {
        match &self.repr {
            Repr::Poly(terms) => {
                let mut out = vec![c(0.0, 0.0); self.m];
                for (exps, coeff) in terms {
                    for j in 0..self.m {
                        if exps[j] == 0 {
                            continue;
                        }
                        let mono: C = exps
                            .iter()
                            .enumerate()
                            .map(|(i, &e)| {
                                let pow = if i == j { e - 1 } else { e };
                                z[i].powu(pow)
                            })
                            .product();
                        out[j] += coeff * c(exps[j] as f64, 0.0) * mono;
                    }
                }
                out
            }
            Repr::Custom { df, .. } => (0..self.m).map(|j| df(z, j)).collect(),
        }
    }

    /// d^2 f / dZ_j dZ_q, complex symmetric.
    pub fn hess(&self, z: &[C]) -> DMatrix<C> {
        let m = self.m;
        match &self.repr {
            Repr::Poly(terms) => {
                let mut out = DMatrix::zeros(m, m);
                for (exps, coeff) in terms {
                    for j in 0..m {
                        for q in j..m {
                            let factor = if j == q {
                                (exps[j] as f64) * (exps[j].saturating_sub(1) as f64)
                            } else {
                                (exps[j] as f64) * (exps[q] as f64)
                            };
                            if factor == 0.0 {
                                continue;
                            }
                            let mono: C = exps
                                .iter()
                                .enumerate()
                                .map(|(i, &e)| {
                                    let mut pow = e;
                                    if i == j {
                                        pow -= 1;
                                    }
                                    if i == q {
                                        pow -= 1;
                                    }
                                    z[i].powu(pow)
                                })
                                .product();
                            let v = coeff * c(factor, 0.0) * mono;
                            out[(j, q)] += v;
                            if j != q {
                                out[(q, j)] += v;
                            }
                        }
                    }
                }
                out
            }
            Repr::Custom { d2f, .. } => DMatrix::from_fn(m, m, |j, q| d2f(z, j, q)),
        }
    }

    /// Real-linear combination sum_a coeffs[a] * sections[a]. Polynomial
    /// inputs merge exactly; any closure input produces a closure.
    pub fn linear_combination(coeffs: &[f64], sections: &[HoloSection]) -> Result<HoloSection> {
        if coeffs.len() != sections.len() || sections.is_empty() {
            return Err(Error::input(
                "linear combination needs matching, nonempty coefficient and section lists",
            ));
        }
        let m = sections[0].m;
        if sections.iter().any(|s| s.m != m) {
            return Err(Error::input("sections mix different variable counts"));
        }
        if sections.iter().all(|s| matches!(s.repr, Repr::Poly(_))) {
            let mut terms: Vec<(Vec<u32>, C)> = Vec::new();
            for (&g, s) in coeffs.iter().zip(sections) {
                let Repr::Poly(ts) = &s.repr else { unreachable!() };
                for (exps, c0) in ts {
                    terms.push((exps.clone(), c0 * g));
                }
            }
            return Self::poly(m, terms);
        }
        let parts: Vec<(f64, HoloSection)> = coeffs
            .iter()
            .copied()
            .zip(sections.iter().cloned())
            .collect();
        let p1 = parts.clone();
        let p2 = parts.clone();
        Ok(HoloSection::custom(
            m,
            move |z| parts.iter().map(|(g, s)| s.eval(z) * *g).sum(),
            move |z, j| p1.iter().map(|(g, s)| s.grad(z)[j] * *g).sum(),
            move |z, j, q| p2.iter().map(|(g, s)| s.hess(z)[(j, q)] * *g).sum(),
        ))
    }
}

/// Scale used for relative critical-point tolerances.
pub fn section_scale(sect: &HoloSection, z: &[C]) -> f64 {
    let f = sect.eval(z);
    let g = sect.grad(z);
    1.0 + f.norm() + g.iter().map(|v| v.norm()).sum::<f64>()
}

fn check_domain(model: &HermitianModel, z: &[C]) -> Result<()> {
    let k = model.potential(z);
    if !k.is_finite() {
        return Err(Error::evaluation(
            format!("potential at {z:?}"),
            format!("non-finite value {k}"),
        ));
    }
    Ok(())
}

/// The covariant gradient of s = f e in the frame: component j is
/// df/dZ_j - f dK/dZ_j.
pub fn covariant_gradient(model: &HermitianModel, sect: &HoloSection, z: &[C]) -> Result<Vec<C>> {
    check_domain(model, z)?;
    Ok(covariant_gradient_raw(model, sect, z))
}

pub(crate) fn covariant_gradient_raw(
    model: &HermitianModel,
    sect: &HoloSection,
    z: &[C],
) -> Vec<C> {
    let f = sect.eval(z);
    let df = sect.grad(z);
    let dk = model.grad_potential(z);
    (0..sect.m()).map(|j| df[j] - f * dk[j]).collect()
}

pub fn gradnorm(model: &HermitianModel, sect: &HoloSection, z: &[C]) -> f64 {
    covariant_gradient_raw(model, sect, z)
        .iter()
        .map(|v| v.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Step size for differentiating the weighted section e^{-K} f: the
/// weight's log-derivative is |grad K|, so the step shrinks where the
/// potential is steep to keep the truncation error below the critical
/// tolerance.
pub fn weighted_fd_step(model: &HermitianModel, z: &[C]) -> f64 {
    let zmax = z.iter().map(|v| v.re.abs().max(v.im.abs())).fold(0.0, f64::max);
    let kgrad = model
        .grad_potential(z)
        .iter()
        .map(|v| v.norm_sqr())
        .sum::<f64>()
        .sqrt();
    0.005 * (1.0 + zmax) / (1.0 + kgrad)
}

/// Independent evaluation of the same gradient through the alternative
/// form e^K d(e^{-K} f)/dZ_j, differentiated numerically. Shares no
/// code with the analytic route, so it serves as a re-validation oracle.
pub fn covariant_gradient_fd(
    model: &HermitianModel,
    sect: &HoloSection,
    z: &[C],
    h: f64,
) -> Vec<C> {
    let weighted = |w: &[C]| sect.eval(w) * c((-model.potential(w)).exp(), 0.0);
    let ek = c(model.potential(z).exp(), 0.0);
    (0..sect.m())
        .map(|j| ek * fd::wirtinger_dz_refined(&weighted, z, j, h))
        .collect()
}

/// Wirtinger derivatives of the covariant gradient, used as the Newton
/// Jacobian: A_jq = d(grad_j)/dZ_q and B_jq = d(grad_j)/dZbar_q = -f Theta_jq.
pub fn gradient_jacobian(
    model: &HermitianModel,
    sect: &HoloSection,
    z: &[C],
) -> (DMatrix<C>, DMatrix<C>) {
    let m = sect.m();
    let f = sect.eval(z);
    let df = sect.grad(z);
    let d2f = sect.hess(z);
    let dk = model.grad_potential(z);
    let khh = model.potential_hh(z);
    let theta = model.curvature(z);
    let a = DMatrix::from_fn(m, m, |j, q| d2f[(j, q)] - df[q] * dk[j] - f * khh[(j, q)]);
    let b = DMatrix::from_fn(m, m, |j, q| -f * theta[(j, q)]);
    (a, b)
}

/// The complex Hessian of a section at a critical point: holomorphic
/// block H' from iterated covariant derivatives, mixed block H'' =
/// -f(Z0) Theta(Z0).
#[derive(Clone, Debug)]
pub struct ComplexHessian {
    pub hprime: DMatrix<C>,
    pub hdoubleprime: DMatrix<C>,
}

impl ComplexHessian {
    pub fn m(&self) -> usize {
        self.hprime.nrows()
    }

    /// The full 2m x 2m block matrix [[H', H''],[conj H'', conj H']].
    pub fn assembled(&self) -> DMatrix<C> {
        let m = self.m();
        let mut out = DMatrix::zeros(2 * m, 2 * m);
        for j in 0..m {
            for q in 0..m {
                out[(j, q)] = self.hprime[(j, q)];
                out[(j, m + q)] = self.hdoubleprime[(j, q)];
                out[(m + j, q)] = self.hdoubleprime[(j, q)].conj();
                out[(m + j, m + q)] = self.hprime[(j, q)].conj();
            }
        }
        out
    }

    /// |det| of the assembled block matrix (real up to roundoff by the
    /// conjugate-block structure).
    pub fn abs_det(&self) -> f64 {
        self.assembled().lu().determinant().norm()
    }

    /// Largest entry magnitude; the degeneracy tolerance scales by its
    /// (2m)-th power so the test is invariant under f -> t f.
    pub fn scale(&self) -> f64 {
        let mut s: f64 = 0.0;
        for v in self.assembled().iter() {
            s = s.max(v.norm());
        }
        s
    }
}

/// Degeneracy test: |det H^c| below tol_deg * scale^{2m}. An all-zero
/// Hessian is degenerate by convention.
pub fn is_degenerate(h: &ComplexHessian, tol_deg: f64) -> bool {
    let scale = h.scale();
    if scale == 0.0 {
        return true;
    }
    h.abs_det() < tol_deg * scale.powi(2 * h.m() as i32)
}

/// Covariant Hessian at a critical point. The point must satisfy the
/// critical equation to tol_crit relative to the section scale.
pub fn complex_hessian(
    model: &HermitianModel,
    sect: &HoloSection,
    z: &[C],
    tol_crit: f64,
) -> Result<ComplexHessian> {
    check_domain(model, z)?;
    let gn = gradnorm(model, sect, z);
    let scale = section_scale(sect, z);
    if gn > tol_crit * scale {
        return Err(Error::Precondition(format!(
            "complex_hessian requires a critical point: |grad| = {gn:e} exceeds {tol_crit:e} * scale {scale:e}"
        )));
    }
    let m = sect.m();
    let f = sect.eval(z);
    let df = sect.grad(z);
    let d2f = sect.hess(z);
    let dk = model.grad_potential(z);
    let khh = model.potential_hh(z);
    let theta = model.curvature(z);
    // (d/dZ_j - K_j)(d/dZ_q - K_q) f expanded at Z0
    let hprime = DMatrix::from_fn(m, m, |j, q| {
        d2f[(j, q)] - khh[(j, q)] * f - dk[q] * df[j] - dk[j] * df[q] + dk[j] * dk[q] * f
    });
    let hdoubleprime = DMatrix::from_fn(m, m, |j, q| -f * theta[(j, q)]);
    Ok(ComplexHessian {
        hprime,
        hdoubleprime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn z1(re: f64, im: f64) -> Vec<C> {
        vec![c(re, im)]
    }

    fn random_points(m: usize, n: usize, seed: u64) -> Vec<Vec<C>> {
        let mut rng = stream_rng(seed, 0);
        (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| c(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn gradient_of_linear_section_at_origin() {
        let model = HermitianModel::flat(1);
        let sect = HoloSection::poly1(&[c(0.0, 0.0), c(1.0, 0.0)]); // f = z
        let g = covariant_gradient(&model, &sect, &z1(0.0, 0.0)).unwrap();
        assert_abs_diff_eq!((g[0] - c(1.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gradient_of_constant_section() {
        let model = HermitianModel::flat(1);
        let sect = HoloSection::poly1(&[c(1.0, 0.0)]); // f = 1
        let z0 = z1(0.3, -0.8);
        let g = covariant_gradient(&model, &sect, &z0).unwrap();
        assert_abs_diff_eq!((g[0] + z0[0].conj()).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn real_axis_critical_point_of_quadratic() {
        let model = HermitianModel::flat(1);
        let sect = HoloSection::poly1(&[c(-1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]); // z^2 - 1
        let g = covariant_gradient(&model, &sect, &z1(3f64.sqrt(), 0.0)).unwrap();
        assert_abs_diff_eq!(g[0].norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn gradient_matches_weighted_derivative_form() {
        // e^K d(e^{-K} f)/dZ must reproduce df - f dK to 1e-10.
        let sect = HoloSection::poly1(&[c(-0.3, 0.2), c(0.0, 1.0), c(0.5, -0.1)]);
        let models = [
            HermitianModel::flat(1),
            HermitianModel::projective(1, 1.0).unwrap(),
            HermitianModel::projective(1, 3.0).unwrap(),
        ];
        for model in &models {
            for z in random_points(1, 40, 0x67726164) {
                let exact = covariant_gradient(model, &sect, &z).unwrap();
                let indep = covariant_gradient_fd(model, &sect, &z, 1e-2);
                let scale = section_scale(&sect, &z);
                assert!(
                    (exact[0] - indep[0]).norm() <= 1e-10 * scale,
                    "model {model:?} z {z:?}: {} vs {}",
                    exact[0],
                    indep[0]
                );
            }
        }
    }

    #[test]
    fn gradient_matches_weighted_form_in_two_variables() {
        let sect = HoloSection::poly(
            2,
            vec![
                (vec![0, 0], c(0.4, 0.0)),
                (vec![1, 1], c(1.0, -0.5)),
                (vec![2, 0], c(0.0, 0.7)),
            ],
        )
        .unwrap();
        let model = HermitianModel::projective(2, 2.0).unwrap();
        for z in random_points(2, 20, 0x32766172) {
            let exact = covariant_gradient(&model, &sect, &z).unwrap();
            let indep = covariant_gradient_fd(&model, &sect, &z, 1e-2);
            let scale = section_scale(&sect, &z);
            for j in 0..2 {
                assert!((exact[j] - indep[j]).norm() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn potential_gradients_match_finite_differences() {
        let models = [
            HermitianModel::flat(2),
            HermitianModel::projective(2, 1.0).unwrap(),
            HermitianModel::projective(2, 5.0).unwrap(),
        ];
        for model in &models {
            let pot = |z: &[C]| c(model.potential(z), 0.0);
            for z in random_points(2, 100, 0xfd0) {
                let g = model.grad_potential(&z);
                for j in 0..2 {
                    let want = fd::wirtinger_dz(&pot, &z, j, 1e-3);
                    assert!((g[j] - want).norm() < 1e-6, "{model:?} at {z:?}");
                }
            }
        }
    }

    #[test]
    fn curvature_of_flat_metric_is_identity() {
        let model = HermitianModel::flat(3);
        for z in random_points(3, 5, 0xcafe) {
            let theta = model.curvature(&z);
            assert!((theta - DMatrix::<C>::identity(3, 3)).norm() < 1e-14);
        }
    }

    #[test]
    fn curvature_of_projective_metric_at_origin_and_one() {
        let model = HermitianModel::projective(2, 4.0).unwrap();
        let theta0 = model.curvature(&[c(0.0, 0.0), c(0.0, 0.0)]);
        assert!((theta0 - DMatrix::<C>::identity(2, 2) * c(4.0, 0.0)).norm() < 1e-14);

        let m1 = HermitianModel::projective(1, 1.0).unwrap();
        let theta1 = m1.curvature(&z1(1.0, 0.0));
        assert_abs_diff_eq!((theta1[(0, 0)] - c(0.25, 0.0)).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn curvature_is_hermitian_and_matches_gradient_differences() {
        let models = [
            HermitianModel::projective(2, 2.5).unwrap(),
            HermitianModel::flat(2),
        ];
        for model in &models {
            for z in random_points(2, 100, 0x7468) {
                let theta = model.curvature(&z);
                assert!((&theta - theta.adjoint()).norm() < 1e-12, "not Hermitian");
                for j in 0..2 {
                    for q in 0..2 {
                        let gj = |w: &[C]| model.grad_potential(w)[j];
                        let want = fd::wirtinger_dzbar(&gj, &z, q, 1e-3);
                        assert!((theta[(j, q)] - want).norm() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn custom_model_reproduces_projective_closed_forms() {
        let level = 2.0;
        let custom = HermitianModel::custom(
            1,
            move |z: &[C]| level * (1.0 + z[0].norm_sqr()).ln(),
            move |z: &[C]| {
                let s = 1.0 + z[0].norm_sqr();
                vec![z[0].conj() * (level / s)]
            },
        )
        .unwrap();
        let builtin = HermitianModel::projective(1, level).unwrap();
        for z in random_points(1, 10, 0xc0) {
            let a = custom.curvature(&z);
            let b = builtin.curvature(&z);
            assert!((a - b).norm() < 1e-7);
            let ah = custom.potential_hh(&z);
            let bh = builtin.potential_hh(&z);
            assert!((ah - bh).norm() < 1e-7);
        }
    }

    #[test]
    fn custom_model_with_wrong_gradient_is_rejected() {
        let r = HermitianModel::custom(
            1,
            |z: &[C]| z[0].norm_sqr(),
            |z: &[C]| vec![z[0] * 2.0], // should be conj(z)
        );
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn section_derivatives_match_finite_differences() {
        let sect = HoloSection::poly(
            2,
            vec![
                (vec![3, 0], c(0.2, -1.0)),
                (vec![1, 2], c(1.5, 0.0)),
                (vec![0, 1], c(0.0, 0.3)),
            ],
        )
        .unwrap();
        let f = |z: &[C]| sect.eval(z);
        for z in random_points(2, 30, 0x5ec7) {
            let g = sect.grad(&z);
            let h = sect.hess(&z);
            assert!((&h - h.transpose()).norm() < 1e-12);
            for j in 0..2 {
                let want = fd::wirtinger_dz_refined(&f, &z, j, 1e-2);
                assert!((g[j] - want).norm() < 1e-6);
                for q in 0..2 {
                    let want2 = fd::wirtinger_dz_dz(&f, &z, j, q, 1e-2);
                    assert!((h[(j, q)] - want2).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn polynomial_merging_and_linear_combination() {
        let f1 = HoloSection::poly1(&[c(1.0, 0.0)]); // 1
        let f2 = HoloSection::poly1(&[c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]); // z^2
        let combo = HoloSection::linear_combination(&[2.0, -3.0], &[f1, f2]).unwrap();
        let z = z1(0.7, -0.2);
        let want = c(2.0, 0.0) - c(3.0, 0.0) * z[0] * z[0];
        assert!((combo.eval(&z) - want).norm() < 1e-15);
        let g = combo.grad(&z);
        assert!((g[0] + c(6.0, 0.0) * z[0]).norm() < 1e-15);
    }

    #[test]
    fn hessian_blocks_of_shifted_quadratic_at_origin() {
        let model = HermitianModel::flat(1);
        let sect = HoloSection::poly1(&[c(-1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        let h = complex_hessian(&model, &sect, &z1(0.0, 0.0), 1e-9).unwrap();
        assert_abs_diff_eq!((h.hprime[(0, 0)] - c(2.0, 0.0)).norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(
            (h.hdoubleprime[(0, 0)] - c(1.0, 0.0)).norm(),
            0.0,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(h.abs_det(), 3.0, epsilon = 1e-12);
        assert!(!is_degenerate(&h, 1e-10));
    }

    #[test]
    fn mixed_block_vanishes_when_section_vanishes() {
        // f = z^2 has a critical point at 0 where f = 0, so H'' = 0.
        let model = HermitianModel::projective(1, 1.0).unwrap();
        let sect = HoloSection::poly1(&[c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        let h = complex_hessian(&model, &sect, &z1(0.0, 0.0), 1e-9).unwrap();
        assert_abs_diff_eq!(h.hdoubleprime.norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn constant_section_on_projective_model_at_origin() {
        let model = HermitianModel::projective(1, 1.0).unwrap();
        let sect = HoloSection::poly1(&[c(1.0, 0.0)]);
        let h = complex_hessian(&model, &sect, &z1(0.0, 0.0), 1e-9).unwrap();
        assert_abs_diff_eq!(h.hprime.norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(
            (h.hdoubleprime[(0, 0)] + c(1.0, 0.0)).norm(),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn hessian_away_from_critical_point_is_a_precondition_error() {
        let model = HermitianModel::flat(1);
        let sect = HoloSection::poly1(&[c(-1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        match complex_hessian(&model, &sect, &z1(0.5, 0.5), 1e-9) {
            Err(Error::Precondition(msg)) => assert!(msg.contains("|grad|")),
            other => panic!("expected precondition error, got {other:?}"),
        }
    }

    #[test]
    fn assembled_hessian_has_conjugate_block_pattern() {
        let model = HermitianModel::flat(2);
        // critical point of f = exp-like poly at origin: use f = 1 + z1^2 + z2^2
        let sect = HoloSection::poly(
            2,
            vec![
                (vec![0, 0], c(1.0, 0.0)),
                (vec![2, 0], c(1.0, 2.0)),
                (vec![0, 2], c(-0.5, 1.0)),
                (vec![1, 1], c(0.3, 0.0)),
            ],
        )
        .unwrap();
        let z0 = vec![c(0.0, 0.0), c(0.0, 0.0)];
        let h = complex_hessian(&model, &sect, &z0, 1e-9).unwrap();
        assert!((&h.hprime - h.hprime.transpose()).norm() < 1e-12);
        let a = h.assembled();
        for j in 0..2 {
            for q in 0..2 {
                assert_eq!(a[(j, q)], h.hprime[(j, q)]);
                assert_eq!(a[(j, 2 + q)], h.hdoubleprime[(j, q)]);
                assert_eq!(a[(2 + j, q)], h.hdoubleprime[(j, q)].conj());
                assert_eq!(a[(2 + j, 2 + q)], h.hprime[(j, q)].conj());
            }
        }
        // determinant of the conjugate-block structure is real
        let det = a.lu().determinant();
        assert!(det.im.abs() < 1e-10 * (1.0 + det.norm()));
    }

    #[test]
    fn degeneracy_thresholds() {
        let unit = |h0: f64, hd: f64| ComplexHessian {
            hprime: DMatrix::from_element(1, 1, c(h0, 0.0)),
            hdoubleprime: DMatrix::from_element(1, 1, c(hd, 0.0)),
        };
        assert!(!is_degenerate(&unit(2.0, 1.0), 1e-10));
        assert!(is_degenerate(&unit(1.0, 1.0), 1e-10));
        let zero = ComplexHessian {
            hprime: DMatrix::zeros(1, 1),
            hdoubleprime: DMatrix::zeros(1, 1),
        };
        assert!(is_degenerate(&zero, 1e-10));
        // scale invariance: f -> 1e6 f must not change the verdict
        assert!(is_degenerate(&unit(1e6, 1e6), 1e-10));
        assert!(!is_degenerate(&unit(2e-6, 1e-6), 1e-10));
    }

    #[test]
    fn frame_change_preserves_critical_points() {
        // f -> e^g f with K -> K + 2 Re g keeps the same critical set.
        let sect = HoloSection::poly1(&[c(-1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        // g(z) = (0.3 - 0.4i) z
        let gc = c(0.3, -0.4);
        let twisted_model = HermitianModel::custom(
            1,
            move |z: &[C]| z[0].norm_sqr() + 2.0 * (gc * z[0]).re,
            move |z: &[C]| vec![z[0].conj() + gc],
        )
        .unwrap();
        let base = sect.clone();
        let twisted_sect = HoloSection::custom(
            1,
            move |z| (gc * z[0]).exp() * base.eval(z),
            {
                let s = sect.clone();
                move |z, _| (gc * z[0]).exp() * (s.grad(z)[0] + gc * s.eval(z))
            },
            {
                let s = sect.clone();
                move |z, _, _| {
                    let e = (gc * z[0]).exp();
                    e * (s.hess(z)[(0, 0)] + 2.0 * gc * s.grad(z)[0] + gc * gc * s.eval(z))
                }
            },
        );
        let crits = [
            z1(0.0, 0.0),
            z1(3f64.sqrt(), 0.0),
            z1(-(3f64.sqrt()), 0.0),
            z1(0.0, 1.0),
            z1(0.0, -1.0),
        ];
        for z in &crits {
            let g = gradnorm(&twisted_model, &twisted_sect, z);
            assert!(g < 1e-8, "twisted gradient {g} at {z:?}");
        }
        let off = z1(0.5, 0.5);
        assert!(gradnorm(&twisted_model, &twisted_sect, &off) > 1e-2);
    }

    #[test]
    fn singular_potential_gives_domain_error() {
        let model = HermitianModel::custom(
            1,
            |z: &[C]| z[0].norm_sqr().ln(),
            |z: &[C]| vec![z[0].conj() / z[0].norm_sqr()],
        )
        .unwrap();
        let sect = HoloSection::poly1(&[c(1.0, 0.0)]);
        match covariant_gradient(&model, &sect, &z1(0.0, 0.0)) {
            Err(Error::Evaluation { .. }) => {}
            other => panic!("expected domain error, got {other:?}"),
        }
    }
}
