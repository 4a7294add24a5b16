use nalgebra::DMatrix;
use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::density::HessianEnsemble;
use crate::error::{Error, Result};
use crate::rng::{normal_pair, stream_rng};

type C = Complex64;

fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

/// Haar-distributed unitary: QR of a complex Ginibre matrix with the
/// phases of R's diagonal moved into Q.
pub fn haar_from_rng(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<C> {
    assert!(m >= 1, "need m >= 1");
    let a = DMatrix::from_fn(m, m, |_, _| {
        let (x, y) = normal_pair(rng);
        c(x, y)
    });
    let qr = a.qr();
    let q = qr.q();
    let r = qr.r();
    let mut out = q;
    for j in 0..m {
        let d = r[(j, j)];
        let phase = if d.norm() == 0.0 { c(1.0, 0.0) } else { d / d.norm() };
        for i in 0..m {
            out[(i, j)] *= phase;
        }
    }
    out
}

pub fn haar_unitary(m: usize, seed: u64) -> DMatrix<C> {
    let mut rng = stream_rng(seed, 0);
    haar_from_rng(m, &mut rng)
}

/// (H, x) -> (g H g^t, x).
pub fn rho_action(g: &DMatrix<C>, h: &DMatrix<C>, x: C) -> (DMatrix<C>, C) {
    (g * h * g.transpose(), x)
}

/// (H, x) -> (((xi_j + xi_k)/2 H_jk), -(sum xi) x).
pub fn dhat_action(xi: &[f64], h: &DMatrix<C>, x: C) -> (DMatrix<C>, C) {
    let m = h.nrows();
    assert_eq!(xi.len(), m, "xi length must match matrix size");
    let scaled = DMatrix::from_fn(m, m, |j, k| h[(j, k)] * (0.5 * (xi[j] + xi[k])));
    let s: f64 = xi.iter().sum();
    (scaled, -s * x)
}

/// Dawson's integral D(y) = exp(-y^2) int_0^y exp(t^2) dt.
/// Composite Gauss-Legendre on e^{t^2 - y^2} for moderate y, the
/// asymptotic series beyond (crossover error below 1e-9).
pub fn dawson(y: f64) -> f64 {
    let ay = y.abs();
    let sign = if y < 0.0 { -1.0 } else { 1.0 };
    if ay <= 5.0 {
        // integrand values lie in (0, 1]; panel width tracks the 1/(2y)
        // feature scale at the right endpoint
        let panels = (2.0 * ay * ay).ceil() as usize + 2;
        let rule = crate::quad::gauss_legendre(16);
        let mut total = 0.0;
        let h = ay / panels as f64;
        for p in 0..panels {
            let a = p as f64 * h;
            for (node, w) in rule.nodes.iter().zip(&rule.weights) {
                let t = a + 0.5 * h * (node + 1.0);
                total += 0.5 * h * w * (t * t - ay * ay).exp();
            }
        }
        sign * total
    } else {
        // D(y) ~ sum_k (2k-1)!! / (2^{k+1} y^{2k+1}), truncated where
        // the terms stop decreasing; remainder is below e^{-y^2}
        let mut term = 1.0 / (2.0 * ay);
        let mut total = term;
        let inv = 1.0 / (2.0 * ay * ay);
        for k in 1..40 {
            let next = term * (2 * k - 1) as f64 * inv;
            if next.abs() >= term.abs() {
                break;
            }
            total += next;
            term = next;
        }
        sign * total
    }
}

/// int |l| e^{i xi l - ep l^2} dl, real by symmetry.
pub fn lambda_moment_even(xi: f64, ep: f64) -> f64 {
    let y = xi / (2.0 * ep.sqrt());
    (1.0 - 2.0 * y * dawson(y)) / ep
}

/// int l |l| e^{i xi l - ep l^2} dl = i * (this), odd and imaginary.
pub fn lambda_moment_odd(xi: f64, ep: f64) -> f64 {
    let y = xi / (2.0 * ep.sqrt());
    let d = dawson(y);
    let dprime = 1.0 - 2.0 * y * d;
    (d + y * dprime) / ep.powf(1.5)
}

/// Closed form of the lambda integral
/// Phi(xi) = int Delta(lambda) prod_j |lambda_j| e^{i<xi,lambda>}
///           e^{-ep' |lambda|^2} d lambda  for m <= 2.
pub fn phi_exact(xi: &[f64], eps_prime: f64) -> C {
    match xi.len() {
        1 => c(lambda_moment_even(xi[0], eps_prime), 0.0),
        2 => {
            // (l1 - l2)|l1 l2| = l1|l1| |l2| - |l1| l2|l2| splits into
            // products of one odd and one even 1-d moment
            let a1 = lambda_moment_odd(xi[0], eps_prime);
            let a2 = lambda_moment_odd(xi[1], eps_prime);
            let b1 = lambda_moment_even(xi[0], eps_prime);
            let b2 = lambda_moment_even(xi[1], eps_prime);
            c(0.0, a1 * b2 - b1 * a2)
        }
        _ => panic!("phi_exact supports m <= 2"),
    }
}

/// Quadrature evaluation of the same lambda integral on an explicit
/// node set; validation path for the closed form.
pub fn phi_quadrature(xi: &[f64], eps_prime: f64, nodes: &[Vec<f64>], weights: &[f64]) -> C {
    let m = xi.len();
    let mut total = c(0.0, 0.0);
    for (lam, w) in nodes.iter().zip(weights) {
        let mut vandermonde = 1.0;
        for i in 0..m {
            for j in (i + 1)..m {
                vandermonde *= lam[i] - lam[j];
            }
        }
        let absprod: f64 = lam.iter().map(|v| v.abs()).product();
        let phase: f64 = xi.iter().zip(lam).map(|(a, b)| a * b).sum();
        let damp: f64 = lam.iter().map(|v| v * v).sum::<f64>() * eps_prime;
        total += c(0.0, phase).exp() * (vandermonde * absprod * (-damp).exp() * w);
    }
    total
}

/// The three determinant evaluations of the regularized Gaussian over
/// the Hessian space: direct (ground truth), the i-consistent
/// factorization, and the factorization exactly as displayed.
#[derive(Clone, Debug)]
pub struct DenomParts {
    /// det over the real b3-dimensional space of I + i Lambda S.
    pub direct: C,
    /// (1 - i sum_{q<=m} xi_q)^2 det(i C R_H + I).
    pub factored: C,
    /// (1 - sum_{q<=h21} xi_q) det(C R_H + I), no i, as displayed.
    pub displayed: C,
    /// Per-factor principal square root (1 - i sum xi) prod sqrt(1 + i t_a);
    /// its square equals `direct`.
    pub sqrt_factored: C,
}

/// Prepared per-ensemble data for the denominator evaluations.
pub struct DenomCtx {
    m: usize,
    k: usize,
    c_v: DMatrix<f64>,
    c_v_sqrt: DMatrix<f64>,
    ortho: Vec<DMatrix<C>>,
}

impl DenomCtx {
    pub fn new(ens: &HessianEnsemble) -> Result<Self> {
        let k = 2 * (ens.m() - 1);
        let c_v = ens.c_v().clone();
        let c_v_sqrt = if k > 0 {
            let eig = c_v.clone().symmetric_eigen();
            if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
                return Err(Error::Signature {
                    context: "Hessian covariance".into(),
                    eigenvalues: eig.eigenvalues.iter().copied().collect(),
                });
            }
            &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
                * eig.eigenvectors.transpose()
        } else {
            DMatrix::zeros(0, 0)
        };
        Ok(DenomCtx {
            m: ens.m(),
            k,
            c_v,
            c_v_sqrt,
            ortho: ens.ortho_basis().to_vec(),
        })
    }

    /// Coordinate matrix of P \circ rho(g)^* D(xi) rho(g) on the
    /// orthonormal basis of the Hessian space (real symmetric).
    fn r_h(&self, g: &DMatrix<C>, xi: &[f64]) -> DMatrix<f64> {
        let gstar = g.adjoint();
        let gbar = g.map(|v| v.conj());
        let images: Vec<DMatrix<C>> = self
            .ortho
            .iter()
            .map(|e| {
                let (ge, _) = rho_action(g, e, c(0.0, 0.0));
                let (de, _) = dhat_action(xi, &ge, c(0.0, 0.0));
                &gstar * de * &gbar
            })
            .collect();
        let mut r = DMatrix::zeros(self.k, self.k);
        for a in 0..self.k {
            for b in 0..self.k {
                r[(a, b)] = self.ortho[a]
                    .iter()
                    .zip(images[b].iter())
                    .map(|(x, y)| (y * x.conj()).re)
                    .sum();
            }
        }
        (&r + r.transpose()) * 0.5
    }

    /// Eigenvalues t_a of C^{1/2} R_H C^{1/2}.
    fn h_block_spectrum(&self, g: &DMatrix<C>, xi: &[f64]) -> Vec<f64> {
        if self.k == 0 {
            return vec![];
        }
        let r = self.r_h(g, xi);
        let sym = &self.c_v_sqrt * r * &self.c_v_sqrt;
        let sym = (&sym + sym.transpose()) * 0.5;
        sym.symmetric_eigenvalues().iter().copied().collect()
    }

    /// All determinant forms at one (g, xi).
    pub fn denominator_det(&self, g: &DMatrix<C>, xi: &[f64]) -> DenomParts {
        assert_eq!(xi.len(), self.m, "xi must have length m");
        let sum_all: f64 = xi.iter().sum();
        let sum_h21: f64 = xi.iter().take(self.m - 1).sum();
        let xfac = c(1.0, -sum_all);

        let (det_i, det_plain, sqrt_h, direct) = if self.k == 0 {
            (c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), xfac * xfac)
        } else {
            let r = self.r_h(g, xi);
            let cr = &self.c_v * &r;
            let cr_c = cr.map(|v| c(v, 0.0));
            let ident = DMatrix::<C>::identity(self.k, self.k);
            let det_i = (&cr_c * c(0.0, 1.0) + &ident).lu().determinant();
            let det_plain = (&cr_c + &ident).lu().determinant();
            let ts = self.h_block_spectrum(g, xi);
            let sqrt_h: C = ts.iter().map(|&t| c(1.0, t).sqrt()).product();

            // direct: complex-symmetric-form determinant over all b3
            // real coordinates, H block then the two x coordinates
            let n = self.k + 2;
            let mut mdir = DMatrix::<C>::identity(n, n);
            for a in 0..self.k {
                for b in 0..self.k {
                    mdir[(a, b)] += c(0.0, 1.0) * cr[(a, b)];
                }
            }
            for a in self.k..n {
                mdir[(a, a)] += c(0.0, 1.0) * (-sum_all);
            }
            (det_i, det_plain, sqrt_h, mdir.lu().determinant())
        };

        DenomParts {
            direct,
            factored: xfac * xfac * det_i,
            displayed: c(1.0 - sum_h21, 0.0) * det_plain,
            sqrt_factored: xfac * sqrt_h,
        }
    }
}

/// Summary of factored-vs-direct determinant agreement over random
/// (g, xi) draws, resolving the displayed form's missing i empirically.
#[derive(Clone, Debug)]
pub struct DenominatorReport {
    pub samples: usize,
    pub max_rel_dev_factored: f64,
    pub mean_rel_dev_factored: f64,
    pub max_rel_dev_displayed: f64,
    pub mean_rel_dev_displayed: f64,
}

pub fn denominator_report(ens: &HessianEnsemble, n: usize, seed: u64) -> Result<DenominatorReport> {
    let ctx = DenomCtx::new(ens)?;
    let mut rng = stream_rng(seed, 0);
    let mut max_f = 0.0f64;
    let mut sum_f = 0.0;
    let mut max_d = 0.0f64;
    let mut sum_d = 0.0;
    for _ in 0..n {
        let g = haar_from_rng(ens.m(), &mut rng);
        let xi: Vec<f64> = (0..ens.m()).map(|_| 2.0 * normal_pair(&mut rng).0).collect();
        let parts = ctx.denominator_det(&g, &xi);
        let scale = parts.direct.norm().max(1e-300);
        let dev_f = (parts.factored - parts.direct).norm() / scale;
        let dev_d = (parts.displayed - parts.direct).norm() / scale;
        max_f = max_f.max(dev_f);
        sum_f += dev_f;
        max_d = max_d.max(dev_d);
        sum_d += dev_d;
    }
    Ok(DenominatorReport {
        samples: n,
        max_rel_dev_factored: max_f,
        mean_rel_dev_factored: sum_f / n as f64,
        max_rel_dev_displayed: max_d,
        mean_rel_dev_displayed: sum_d / n as f64,
    })
}

#[derive(Clone, Debug)]
pub struct IzhcConfig {
    pub m: usize,
    /// Smallest xi regularizer; the schedule runs geometrically down to it.
    pub eps: f64,
    /// Smallest lambda regularizer; likewise.
    pub eps_prime: f64,
    pub eps_levels: usize,
    pub eps_prime_levels: usize,
    /// Quadrature nodes on R^m for the xi integral.
    pub xi_grid: Vec<Vec<f64>>,
    pub xi_weights: Vec<f64>,
    /// Node set on R^m for the quadrature fallback of the lambda
    /// integral (the production path evaluates it in closed form).
    pub lambda_grid: Vec<Vec<f64>>,
    pub lambda_weights: Vec<f64>,
    pub n_haar: u64,
    pub seed: u64,
    /// Cauchy tolerance on the final extrapolation step.
    pub rel_tol: f64,
}

/// Gauss-Hermite nodes on R^m rescaled by the width 1/sqrt(eps') of the
/// lambda regularizer, with weights normalized for plain integration
/// (the e^{-eps' |lambda|^2} damping stays in the integrand). Accurate
/// while the phase frequency |xi|/sqrt(eps') stays moderate. Orders above
/// 128 are rejected: the eigen-solver noise floor in the extreme raw
/// weights, once multiplied by e^{x^2}, swamps or overflows the products.
pub fn lambda_rule(m: usize, eps_prime: f64, order: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    assert!(
        (1..=128).contains(&order),
        "lambda_rule order must be in 1..=128"
    );
    let gh = crate::quad::gauss_hermite(order);
    let scale = 1.0 / eps_prime.sqrt();
    if m == 1 {
        (
            gh.nodes.iter().map(|&x| vec![x * scale]).collect(),
            gh.nodes
                .iter()
                .zip(&gh.weights)
                .map(|(x, w)| w * scale * (x * x).exp())
                .collect(),
        )
    } else {
        // reweight per axis: raw weight products underflow at high order
        // while the combined exponential overflows
        let wm: Vec<f64> = gh
            .nodes
            .iter()
            .zip(&gh.weights)
            .map(|(x, w)| w * scale * (x * x).exp())
            .collect();
        let mut g = Vec::new();
        let mut w = Vec::new();
        for (x1, w1) in gh.nodes.iter().zip(&wm) {
            for (x2, w2) in gh.nodes.iter().zip(&wm) {
                g.push(vec![x1 * scale, x2 * scale]);
                w.push(w1 * w2);
            }
        }
        (g, w)
    }
}

/// Symmetric sinh-stretched grid: dense (spacing ~ core width of the
/// mollified lambda transform) near 0, geometric toward +-extent.
fn sinh_axis(core: f64, extent: f64, du: f64) -> (Vec<f64>, Vec<f64>) {
    let u_max = (extent / core).asinh();
    let n_half = (u_max / du).ceil() as i64;
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for i in -n_half..=n_half {
        let u = i as f64 * du;
        nodes.push(core * u.sinh());
        weights.push(core * u.cosh() * du);
    }
    (nodes, weights)
}

impl IzhcConfig {
    /// Grids and schedules sized for the stated m <= 2 tolerances.
    pub fn standard(m: usize, n_haar: u64, seed: u64) -> Result<Self> {
        Self::scheduled(m, n_haar, seed, 0.01, 3, 0.005, 4)
    }

    /// Custom regularization schedule. `eps` and `eps_prime` are the finest
    /// levels; each schedule ascends geometrically by factor 2 from there.
    pub fn scheduled(
        m: usize,
        n_haar: u64,
        seed: u64,
        eps: f64,
        eps_levels: usize,
        eps_prime: f64,
        eps_prime_levels: usize,
    ) -> Result<Self> {
        if m == 0 || m > 2 {
            return Err(Error::input("supported regime is 1 <= m <= 2"));
        }
        if !(eps > 0.0) || !(eps_prime > 0.0) {
            return Err(Error::input("regularization parameters must be positive"));
        }
        if eps_levels < 2 || eps_prime_levels < 2 {
            return Err(Error::input(
                "extrapolation needs at least two levels per schedule",
            ));
        }
        // xi extent: at least 6 standard deviations of e^{-eps xi^2}
        // and far into the algebraic tail of the lambda transform
        let extent = (6.0 / (2.0f64 * eps).sqrt()).max(45.0);
        let core = 0.7 * eps_prime.sqrt();
        let du = if m == 1 { 0.04 } else { 0.12 };
        let (axis, axis_w) = sinh_axis(core, extent, du);
        let (xi_grid, xi_weights) = if m == 1 {
            (
                axis.iter().map(|&x| vec![x]).collect::<Vec<_>>(),
                axis_w.clone(),
            )
        } else {
            let mut g = Vec::with_capacity(axis.len() * axis.len());
            let mut w = Vec::with_capacity(axis.len() * axis.len());
            for (x1, w1) in axis.iter().zip(&axis_w) {
                for (x2, w2) in axis.iter().zip(&axis_w) {
                    g.push(vec![*x1, *x2]);
                    w.push(w1 * w2);
                }
            }
            (g, w)
        };
        let (lambda_grid, lambda_weights) = lambda_rule(m, eps_prime, 64);
        Ok(IzhcConfig {
            m,
            eps,
            eps_prime,
            eps_levels,
            eps_prime_levels,
            xi_grid,
            xi_weights,
            lambda_grid,
            lambda_weights,
            n_haar,
            seed,
            rel_tol: 0.05,
        })
    }
}

#[derive(Clone, Debug)]
pub struct IzhcResult {
    pub value: f64,
    /// Residual imaginary part of the extrapolated value; should be
    /// negligible against `value`.
    pub value_imag: f64,
    /// (eps, eps_prime, value) over the full schedule, coarsest first.
    pub regularization_trace: Vec<(f64, f64, f64)>,
    pub haar_stderr: f64,
}

/// Polynomial (Neville) extrapolation of v(h) to h = 0.
fn richardson(h: &[f64], v: &[C]) -> C {
    let n = h.len();
    let mut tab = v.to_vec();
    for level in 1..n {
        for i in 0..(n - level) {
            let num = tab[i + 1] * c(h[i], 0.0) - tab[i] * c(h[i + level], 0.0);
            tab[i] = num / c(h[i] - h[i + level], 0.0);
        }
    }
    tab[0]
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

///// The combined prefactor in front of the regularized triple integral:
/// (-i)^{m(m-1)/2} / (2^m b3! prod_{j<=m} j! sqrt(det C)).
///
/// The det C power comes from matching the Gaussian-expectation form: that
/// side carries 1/det C (an explicit 1/sqrt plus the sampler normalization),
/// while the unnormalized Gaussian integral behind the denominator determinant
/// returns only +sqrt(det C). Isotropic calibration (det C = 1) cannot see
/// this factor; anisotropic cross-checks fix its sign.
fn prefactor(m: usize, det_c: f64) -> C {
    let b3 = 2 * m;
    let phase = c(0.0, -1.0).powu((m * (m - 1) / 2) as u32);
    let denom = 2.0f64.powi(m as i32)
        * factorial(b3)
        * (1..=m).map(factorial).product::<f64>();
    phase / (denom * det_c.sqrt())
}

pub fn izhc_density(ens: &HessianEnsemble, cfg: &IzhcConfig) -> Result<IzhcResult> {
    izhc_density_transformed(ens, cfg, None)
}

/// Same computation with every Haar sample left-multiplied by a fixed
/// unitary; Haar invariance says the result distribution is unchanged.
pub fn izhc_density_transformed(
    ens: &HessianEnsemble,
    cfg: &IzhcConfig,
    left: Option<&DMatrix<C>>,
) -> Result<IzhcResult> {
    let m = ens.m();
    if cfg.m != m {
        return Err(Error::input(format!(
            "config is for m = {}, ensemble has m = {m}",
            cfg.m
        )));
    }
    if m > 2 {
        return Err(Error::input("supported regime is m <= 2"));
    }
    if !(cfg.eps > 0.0) || !(cfg.eps_prime > 0.0) {
        return Err(Error::input("regularizers must be positive"));
    }
    if cfg.xi_grid.len() != cfg.xi_weights.len() || cfg.xi_grid.is_empty() {
        return Err(Error::input("xi grid and weights must match and be nonempty"));
    }
    if cfg.n_haar == 0 {
        return Err(Error::input("need at least one Haar sample"));
    }
    // symmetry about 0: every node's mirror must be present
    let imbalance: f64 = (0..m)
        .map(|d| {
            cfg.xi_grid
                .iter()
                .zip(&cfg.xi_weights)
                .map(|(node, w)| node[d] * w)
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max);
    let span: f64 = cfg.xi_weights.iter().map(|w| w.abs()).sum();
    if imbalance > 1e-8 * span {
        return Err(Error::input("xi grid must be symmetric about 0"));
    }
    // coverage: >= 6 sigma of the widest regularized Gaussian
    let reach = cfg
        .xi_grid
        .iter()
        .flat_map(|node| node.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    if reach < 6.0 / (2.0 * cfg.eps).sqrt() {
        return Err(Error::input(format!(
            "xi grid reaches {reach:.1} but 6 sigma of the eps Gaussian needs {:.1}",
            6.0 / (2.0 * cfg.eps).sqrt()
        )));
    }

    let eps_schedule: Vec<f64> = (0..cfg.eps_levels)
        .map(|i| cfg.eps * 2.0f64.powi((cfg.eps_levels - 1 - i) as i32))
        .collect();
    let epsp_schedule: Vec<f64> = (0..cfg.eps_prime_levels)
        .map(|i| cfg.eps_prime * 2.0f64.powi((cfg.eps_prime_levels - 1 - i) as i32))
        .collect();

    let nodes = &cfg.xi_grid;
    let n_nodes = nodes.len();

    // per-node, sample-independent data
    let vdm_w: Vec<f64> = nodes
        .iter()
        .zip(&cfg.xi_weights)
        .map(|(node, w)| {
            let mut vandermonde = 1.0;
            for i in 0..m {
                for j in (i + 1)..m {
                    vandermonde *= node[i] - node[j];
                }
            }
            vandermonde * w
        })
        .collect();
    let phi: Vec<Vec<C>> = epsp_schedule
        .iter()
        .map(|&ep| nodes.iter().map(|node| phi_exact(node, ep)).collect())
        .collect();
    let damp: Vec<Vec<f64>> = eps_schedule
        .iter()
        .map(|&e| {
            nodes
                .iter()
                .map(|node| (-e * node.iter().map(|v| v * v).sum::<f64>()).exp())
                .collect()
        })
        .collect();

    let ctx = DenomCtx::new(ens)?;
    let pref = prefactor(m, ens.det_c());

    // Haar samples in parallel, each integrating the full grid; the
    // per-sample schedule table is linear in the sample's 1/sqrt(det),
    // so the mean of per-sample extrapolations is the extrapolated mean.
    let per_sample: Vec<(Vec<Vec<C>>, C)> = (0..cfg.n_haar)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(cfg.seed, s);
            let mut g = haar_from_rng(m, &mut rng);
            if let Some(u) = left {
                g = u * g;
            }
            let inv_sqrt: Vec<C> = nodes
                .iter()
                .map(|node| {
                    let parts = ctx.denominator_det(&g, node);
                    parts.sqrt_factored.inv()
                })
                .collect();
            let mut table = vec![vec![c(0.0, 0.0); epsp_schedule.len()]; eps_schedule.len()];
            for (i, di) in damp.iter().enumerate() {
                for (j, pj) in phi.iter().enumerate() {
                    let mut acc = c(0.0, 0.0);
                    for idx in 0..n_nodes {
                        acc += inv_sqrt[idx] * pj[idx] * (vdm_w[idx] * di[idx]);
                    }
                    table[i][j] = acc * pref;
                }
            }
            let in_eps: Vec<C> = (0..epsp_schedule.len())
                .map(|j| {
                    let col: Vec<C> = (0..eps_schedule.len()).map(|i| table[i][j]).collect();
                    richardson(&eps_schedule, &col)
                })
                .collect();
            let final_s = richardson(&epsp_schedule, &in_eps);
            (table, final_s)
        })
        .collect();

    let nh = cfg.n_haar as f64;
    let mut mean_table =
        vec![vec![c(0.0, 0.0); epsp_schedule.len()]; eps_schedule.len()];
    let mut mean_final = c(0.0, 0.0);
    for (table, f) in &per_sample {
        for i in 0..eps_schedule.len() {
            for j in 0..epsp_schedule.len() {
                mean_table[i][j] += table[i][j] / nh;
            }
        }
        mean_final += *f / nh;
    }
    let var: f64 = per_sample
        .iter()
        .map(|(_, f)| (f - mean_final).norm_sqr())
        .sum::<f64>()
        / nh;
    let haar_stderr = (var / nh).sqrt();

    // trace over the full schedule, coarsest first
    let mut trace = Vec::new();
    for (j, &ep) in epsp_schedule.iter().enumerate() {
        for (i, &e) in eps_schedule.iter().enumerate() {
            trace.push((e, ep, mean_table[i][j].re));
        }
    }

    // convergence: the last extrapolation must be Cauchy against the
    // one dropping the finest eps' level
    let in_eps: Vec<C> = (0..epsp_schedule.len())
        .map(|j| {
            let col: Vec<C> = (0..eps_schedule.len()).map(|i| mean_table[i][j]).collect();
            richardson(&eps_schedule, &col)
        })
        .collect();
    let full = richardson(&epsp_schedule, &in_eps);
    let coarse = richardson(
        &epsp_schedule[..epsp_schedule.len() - 1],
        &in_eps[..in_eps.len() - 1],
    );
    let scale = full.norm().max(1e-300);
    if (full - coarse).norm() > cfg.rel_tol * scale + 3.0 * haar_stderr {
        return Err(Error::Convergence(format!(
            "extrapolation not Cauchy: last {full}, without finest level {coarse}, \
             haar stderr {haar_stderr:.3e}; trace {trace:?}"
        )));
    }

    Ok(IzhcResult {
        value: full.re,
        value_imag: full.im,
        regularization_trace: trace,
        haar_stderr,
    })
}
