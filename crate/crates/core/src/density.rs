use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quad::ball_volume;
use crate::rng::{normal_pair, stream_rng};

type C = Complex64;

fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

/// Real Hilbert-Schmidt pairing on complex matrices.
fn hs_inner(a: &DMatrix<C>, b: &DMatrix<C>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x * y.conj()).re).sum()
}

/// Cubic-coupling data: h21 symmetric complex matrices F^j of size
/// h21 x h21 with entries F^j_{ik}.
#[derive(Clone, Debug)]
pub struct YukawaData {
    h21: usize,
    f: Vec<DMatrix<C>>,
}

impl YukawaData {
    pub fn new(h21: usize, f: Vec<DMatrix<C>>) -> Result<Self> {
        if f.len() != h21 {
            return Err(Error::input(format!(
                "need {h21} coupling matrices, got {}",
                f.len()
            )));
        }
        for (j, fj) in f.iter().enumerate() {
            if fj.nrows() != h21 || fj.ncols() != h21 {
                return Err(Error::input(format!(
                    "coupling matrix {j} must be {h21}x{h21}"
                )));
            }
            let scale = fj.iter().map(|v| v.norm()).fold(1.0, f64::max);
            if (fj - fj.transpose()).map(|v| v.norm()).max() > 1e-12 * scale {
                return Err(Error::input(format!("coupling matrix {j} is not symmetric")));
            }
            if fj.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return Err(Error::input(format!("coupling matrix {j} is not finite")));
            }
        }
        Ok(YukawaData { h21, f })
    }

    pub fn trivial() -> Self {
        YukawaData { h21: 0, f: vec![] }
    }

    pub fn h21(&self) -> usize {
        self.h21
    }

    pub fn f(&self) -> &[DMatrix<C>] {
        &self.f
    }
}

/// The 2*h21 real-independent matrices spanning the Hessian space: for
/// each j the pair with first row/column e_j (resp. i e_j) and lower
/// block F^j (resp. -i F^j).
pub fn hessian_basis(y: &YukawaData) -> Vec<DMatrix<C>> {
    let h = y.h21;
    let m = h + 1;
    let mut out = Vec::with_capacity(2 * h);
    for j in 0..h {
        for &(unit, block) in &[(c(1.0, 0.0), c(1.0, 0.0)), (c(0.0, 1.0), c(0.0, -1.0))] {
            let mut b = DMatrix::zeros(m, m);
            b[(0, j + 1)] = unit;
            b[(j + 1, 0)] = unit;
            for r in 0..h {
                for s in 0..h {
                    b[(r + 1, s + 1)] = block * y.f[j][(r, s)];
                }
            }
            out.push(b);
        }
    }
    out
}

/// The sampling space of Hessians at a point: the real span of the
/// coupling-derived basis, carrying a positive definite covariance
/// operator, together with the distinguished complex x-coordinate.
#[derive(Clone, Debug)]
pub struct HessianEnsemble {
    m: usize,
    b3: usize,
    basis: Vec<DMatrix<C>>,
    /// Hilbert-Schmidt-orthonormal combinations of the basis.
    ortho: Vec<DMatrix<C>>,
    /// Coordinates of operator C on the orthonormal basis (SPD).
    c_v: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    det_c: f64,
    gram: DMatrix<f64>,
}

fn spd_error(context: &str, mat: &DMatrix<f64>) -> Error {
    let eig = mat.clone().symmetric_eigenvalues();
    Error::Signature {
        context: context.to_string(),
        eigenvalues: eig.iter().copied().collect(),
    }
}

/// Symmetric square root of an SPD matrix, or a signature error.
fn spd_sqrt(mat: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let eig = mat.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(spd_error(context, mat));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

impl HessianEnsemble {
    /// Ensemble with identity covariance on orthonormal coordinates.
    pub fn isotropic(y: &YukawaData) -> Result<Self> {
        let k = 2 * y.h21;
        Self::from_covariance(y, DMatrix::identity(k, k))
    }

    /// Covariance given directly as an SPD matrix on the orthonormal
    /// coordinates of the Hessian space.
    pub fn from_covariance(y: &YukawaData, c_v: DMatrix<f64>) -> Result<Self> {
        let basis = hessian_basis(y);
        let k = basis.len();
        if c_v.nrows() != k || c_v.ncols() != k {
            return Err(Error::input(format!(
                "covariance must be {k}x{k} for h21 = {}",
                y.h21
            )));
        }
        let scale = c_v.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        if (&c_v - c_v.transpose()).amax() > 1e-12 * scale {
            return Err(Error::input("covariance must be symmetric"));
        }
        let gram = DMatrix::from_fn(k, k, |i, j| hs_inner(&basis[i], &basis[j]));
        let gram_inv_sqrt = if k > 0 {
            let sq = spd_sqrt(&gram, "basis Gram matrix")?;
            sq.clone()
                .try_inverse()
                .ok_or_else(|| spd_error("basis Gram matrix", &gram))?
        } else {
            DMatrix::zeros(0, 0)
        };
        let ortho: Vec<DMatrix<C>> = (0..k)
            .map(|i| {
                let mut e = DMatrix::zeros(y.h21 + 1, y.h21 + 1);
                for (j, b) in basis.iter().enumerate() {
                    e += b * c(gram_inv_sqrt[(j, i)], 0.0);
                }
                e
            })
            .collect();
        let chol = c_v
            .clone()
            .cholesky()
            .ok_or_else(|| spd_error("Hessian covariance", &c_v))?;
        let det_c = if k == 0 {
            1.0
        } else {
            (0..k).map(|i| chol.l()[(i, i)].powi(2)).product()
        };
        Ok(HessianEnsemble {
            m: y.h21 + 1,
            b3: 2 * y.h21 + 2,
            basis,
            ortho,
            c_v,
            chol_l: chol.l(),
            det_c,
            gram,
        })
    }

    /// Covariance defined implicitly by a positive definite quadratic
    /// form on the raw basis coordinates, through the defining relation
    /// (C^{-1} H(w), H(w)) = Q(w, w).
    pub fn from_qform(y: &YukawaData, q_basis: DMatrix<f64>) -> Result<Self> {
        let basis = hessian_basis(y);
        let k = basis.len();
        if q_basis.nrows() != k || q_basis.ncols() != k {
            return Err(Error::input(format!(
                "quadratic form must be {k}x{k} for h21 = {}",
                y.h21
            )));
        }
        let qscale = q_basis.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        if (&q_basis - q_basis.transpose()).amax() > 1e-12 * qscale {
            return Err(Error::input("quadratic form must be symmetric"));
        }
        if k == 0 {
            return Self::from_covariance(y, DMatrix::zeros(0, 0));
        }
        let gram = DMatrix::from_fn(k, k, |i, j| hs_inner(&basis[i], &basis[j]));
        let gram_sqrt = spd_sqrt(&gram, "basis Gram matrix")?;
        let q_chol = q_basis
            .clone()
            .cholesky()
            .ok_or_else(|| spd_error("flux quadratic form", &q_basis))?;
        let q_inv = q_chol.inverse();
        // orthonormal-coordinate covariance G^{1/2} Q^{-1} G^{1/2}
        let c_v = &gram_sqrt * q_inv * &gram_sqrt;
        let c_v = (&c_v + c_v.transpose()) * 0.5;
        Self::from_covariance(y, c_v)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn h21(&self) -> usize {
        self.m - 1
    }

    pub fn b3(&self) -> usize {
        self.b3
    }

    /// Determinant of the covariance operator on the Hessian part
    /// (1 when that part is trivial).
    pub fn det_c(&self) -> f64 {
        self.det_c
    }

    /// SPD covariance matrix on orthonormal coordinates.
    pub fn c_v(&self) -> &DMatrix<f64> {
        &self.c_v
    }

    pub fn raw_basis(&self) -> &[DMatrix<C>] {
        &self.basis
    }

    pub fn ortho_basis(&self) -> &[DMatrix<C>] {
        &self.ortho
    }

    /// Matrix spanned by orthonormal coordinates v.
    pub fn hessian_from_coords(&self, v: &[f64]) -> DMatrix<C> {
        let mut h = DMatrix::zeros(self.m, self.m);
        for (vi, e) in v.iter().zip(&self.ortho) {
            h += e * c(*vi, 0.0);
        }
        h
    }

    /// Coordinates of a matrix in the orthonormal basis (its projection
    /// onto the Hessian space).
    pub fn coords_of(&self, h: &DMatrix<C>) -> Vec<f64> {
        self.ortho.iter().map(|e| hs_inner(h, e)).collect()
    }

    /// Apply the inverse covariance operator to a matrix of the span.
    pub fn apply_c_inv(&self, h: &DMatrix<C>) -> DMatrix<C> {
        let v = DVector::from_vec(self.coords_of(h));
        let u = self
            .c_v
            .clone()
            .cholesky()
            .expect("covariance validated at construction")
            .solve(&v);
        self.hessian_from_coords(u.as_slice())
    }

    /// Residual of the defining relation (C^{-1}H(w), H(w)) = Q(w) at
    /// raw-basis coordinates w, evaluated at the matrix level.
    pub fn defining_identity_residual(&self, w: &[f64]) -> f64 {
        let mut h = DMatrix::zeros(self.m, self.m);
        for (wi, b) in w.iter().zip(&self.basis) {
            h += b * c(*wi, 0.0);
        }
        let lhs = hs_inner(&self.apply_c_inv(&h), &h);
        // Q reconstructed from the covariance in raw coordinates:
        // Q = G C_basis^{-1} with C_basis = G^{-1/2} C_v G^{-1/2} ... all
        // equivalent to mapping through the orthonormal frame:
        let v = self.coords_of(&h);
        let vv = DVector::from_vec(v);
        let rhs = (self
            .c_v
            .clone()
            .cholesky()
            .expect("validated")
            .solve(&vv))
        .dot(&vv);
        (lhs - rhs).abs() / rhs.abs().max(1e-300)
    }

    /// Quadratic form value Q(w) on raw-basis coordinates implied by
    /// the stored covariance.
    pub fn qform_value(&self, w: &[f64]) -> f64 {
        let mut h = DMatrix::zeros(self.m, self.m);
        for (wi, b) in w.iter().zip(&self.basis) {
            h += b * c(*wi, 0.0);
        }
        let v = DVector::from_vec(self.coords_of(&h));
        self.c_v
            .clone()
            .cholesky()
            .expect("validated")
            .solve(&v)
            .dot(&v)
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// One draw of (H, x) with density proportional to
    /// exp(-(C^{-1}H, H) - |x|^2).
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> (DMatrix<C>, C) {
        let k = self.basis.len();
        let half = 0.5f64.sqrt();
        let mut g = Vec::with_capacity(k + 2);
        while g.len() < k {
            let (a, b) = normal_pair(rng);
            g.push(a);
            if g.len() < k {
                g.push(b);
            }
        }
        let (xr, xi) = normal_pair(rng);
        let x = c(xr * half, xi * half);
        if k == 0 {
            return (DMatrix::zeros(self.m, self.m), x);
        }
        let gv = DVector::from_vec(g);
        let v = &self.chol_l * gv * half;
        (self.hessian_from_coords(v.as_slice()), x)
    }
}

/// Single deterministic draw, convenience over `HessianEnsemble::draw`.
pub fn sample_hessian(ens: &HessianEnsemble, seed: u64) -> (DMatrix<C>, C) {
    let mut rng = stream_rng(seed, 0);
    ens.draw(&mut rng)
}

/// |det(H^* H - |x|^2 I)| through singular values of H.
pub fn det_integrand(h: &DMatrix<C>, x: C) -> f64 {
    let sv = h.clone().svd(false, false).singular_values;
    let xx = x.norm_sqr();
    sv.iter().map(|&s| s * s - xx).product::<f64>().abs()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensityForm {
    Gaussian,
    Indicator,
}

#[derive(Clone, Debug)]
pub struct DensityEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: u64,
    pub seed: u64,
    pub form: DensityForm,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Gaussian form of the critical-point density:
/// pi^m / (b3! sqrt(det C)) * E[|det(H^*H - |x|^2 I)|] under the
/// ensemble weight.
pub fn pf_density_gaussian(ens: &HessianEnsemble, n: u64, seed: u64) -> Result<DensityEstimate> {
    if n < 1_000 {
        return Err(Error::input("need at least 1000 samples"));
    }
    let moments = crate::rng::parallel_mc(n, seed, |rng| {
        let (h, x) = ens.draw(rng);
        det_integrand(&h, x)
    });
    let norm = std::f64::consts::PI.powi(ens.m as i32)
        / (factorial(ens.b3) * ens.det_c.sqrt());
    Ok(DensityEstimate {
        value: norm * moments.mean,
        stderr: norm * moments.stderr,
        samples: n,
        seed,
        form: DensityForm::Gaussian,
    })
}

/// Indicator form: volume of the ellipsoid {(C^{-1}H,H) + |x|^2 <= 1}
/// times the uniform average of the same determinant over it, divided
/// by sqrt(det C). Equal to the Gaussian form because the integrand is
/// homogeneous of degree 2m = b3.
pub fn pf_density_indicator(ens: &HessianEnsemble, n: u64, seed: u64) -> Result<DensityEstimate> {
    if n < 1_000 {
        return Err(Error::input("need at least 1000 samples"));
    }
    let k = 2 * (ens.m - 1);
    let d = ens.b3;
    let moments = crate::rng::parallel_mc(n, seed, |rng| {
        // uniform unit-ball point: gaussian direction, radius U^{1/d}
        let mut g = Vec::with_capacity(d + 1);
        while g.len() < d {
            let (a, b) = normal_pair(rng);
            g.push(a);
            if g.len() < d {
                g.push(b);
            }
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let u: f64 = rand::RngExt::random(rng);
        let r = u.powf(1.0 / d as f64);
        let y: Vec<f64> = g.iter().map(|v| v / norm * r).collect();
        let x = c(y[k], y[k + 1]);
        let h = if k == 0 {
            DMatrix::zeros(ens.m, ens.m)
        } else {
            let v = &ens.chol_l * DVector::from_vec(y[..k].to_vec());
            ens.hessian_from_coords(v.as_slice())
        };
        det_integrand(&h, x)
    });
    let norm = ball_volume(d) / ens.det_c.sqrt();
    Ok(DensityEstimate {
        value: norm * moments.mean,
        stderr: norm * moments.stderr,
        samples: n,
        seed,
        form: DensityForm::Indicator,
    })
}

/// Random SPD covariance for ensemble stress tests: A A^T / k + eps I
/// on k coordinates, drawn deterministically.
pub fn random_spd(k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, 0);
    let a = DMatrix::from_fn(k, k, |_, _| normal_pair(&mut rng).0);
    let mut m = &a * a.transpose() / k.max(1) as f64;
    for i in 0..k {
        m[(i, i)] += 0.2;
    }
    m
}

/// Deterministic random Yukawa data: symmetric complex matrices with
/// standard normal entries.
pub fn random_yukawa(h21: usize, seed: u64) -> YukawaData {
    let mut rng = stream_rng(seed, 1);
    let f = (0..h21)
        .map(|_| {
            let mut m = DMatrix::zeros(h21, h21);
            for r in 0..h21 {
                for s in r..h21 {
                    let (a, b) = normal_pair(&mut rng);
                    m[(r, s)] = c(a, b);
                    m[(s, r)] = c(a, b);
                }
            }
            m
        })
        .collect();
    YukawaData::new(h21, f).expect("construction is symmetric")
}

/// Mean and stderr of paired estimates differing only in sampling form,
/// for agreement assertions.
pub fn combined_sigma(a: &DensityEstimate, b: &DensityEstimate) -> f64 {
    (a.stderr * a.stderr + b.stderr * b.stderr).sqrt()
}

/// Check a batch of ensembles for gaussian/indicator agreement; returns
/// (value_gaussian, value_indicator, combined stderr) rows.
pub fn compare_forms(
    ens: &HessianEnsemble,
    n: u64,
    seed: u64,
) -> Result<(DensityEstimate, DensityEstimate)> {
    let g = pf_density_gaussian(ens, n, seed)?;
    let i = pf_density_indicator(ens, n, seed.wrapping_add(0x1000_0000))?;
    Ok((g, i))
}

/// Parallel deterministic mean of a matrix-valued statistic over
/// ensemble draws, used by moment tests.
pub fn coordinate_covariance(ens: &HessianEnsemble, n: u64, seed: u64) -> DMatrix<f64> {
    let k = ens.basis.len();
    let rows: Vec<DMatrix<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let (h, _) = ens.draw(&mut rng);
            let v = ens.coords_of(&h);
            DMatrix::from_fn(k, k, |r, s| v[r] * v[s])
        })
        .collect();
    let mut acc = DMatrix::zeros(k, k);
    for r in rows {
        acc += r;
    }
    acc / n as f64
}
