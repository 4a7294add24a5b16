use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::RngExt;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expr::ScalarField;
use crate::quad::{gauss_legendre, integrate_periodic};
use crate::rng::{parallel_mc, stream_rng};
use crate::summation::CompensatedSum;

/// Largest per-axis extent we allow before integer enumeration bounds
/// stop being exactly representable.
const MAX_EXTENT: f64 = 9.0e15;

enum Gauge {
    /// |x| = sqrt(x^T A x) for symmetric positive definite A.
    Ellipsoid {
        a: DMatrix<f64>,
        /// Diagonal of A^{-1}; the tight axis-aligned bounding box of
        /// {|x| <= r} is |x_i| <= r * sqrt((A^{-1})_{ii}).
        inv_diag: Vec<f64>,
    },
    /// Positively 1-homogeneous user gauge. `sphere_min` underestimates
    /// its minimum on the unit sphere, giving a safe bounding box.
    Custom {
        f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
        sphere_min: f64,
    },
}

/// A star-shaped body given by its gauge function; the body is the
/// sublevel set {x : |x|_Q <= 1} and shells are gauge annuli.
pub struct StarBody {
    dim: usize,
    gauge: Gauge,
}

impl std::fmt::Debug for StarBody {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &self.gauge {
            Gauge::Ellipsoid { .. } => "ellipsoid",
            Gauge::Custom { .. } => "custom",
        };
        write!(f, "StarBody {{ dim: {}, gauge: {} }}", self.dim, kind)
    }
}

impl StarBody {
    pub fn ellipsoid(a: DMatrix<f64>) -> Result<Self> {
        let dim = a.nrows();
        if dim == 0 || a.ncols() != dim {
            return Err(Error::input("ellipsoid matrix must be square and nonempty"));
        }
        let asym = (&a + a.transpose()) * 0.5;
        if (&a - &asym).amax() > 1e-12 * (1.0 + a.amax()) {
            return Err(Error::input("ellipsoid matrix must be symmetric"));
        }
        let eig = asym.clone().symmetric_eigen();
        let evs: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        if evs.iter().any(|&e| e <= 0.0) {
            return Err(Error::Signature {
                context: "ellipsoid matrix must be positive definite".into(),
                eigenvalues: evs,
            });
        }
        let inv = asym
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::input("ellipsoid matrix is numerically singular"))?;
        let inv_diag = (0..dim).map(|i| inv[(i, i)]).collect();
        Ok(StarBody {
            dim,
            gauge: Gauge::Ellipsoid { a: asym, inv_diag },
        })
    }

    /// Gauge supplied as a closure. It must be positive away from the
    /// origin and exactly 1-homogeneous; both are spot-checked here.
    pub fn custom_fn<F>(dim: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        if dim == 0 {
            return Err(Error::input("dimension must be at least 1"));
        }
        let f = Arc::new(f);
        let mut rng = stream_rng(0x6175_6765, 0);
        for trial in 0..64 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if x.iter().all(|&v| v.abs() < 1e-3) {
                continue;
            }
            let g = f(&x);
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::input(format!(
                    "custom gauge must be positive and finite away from 0 (got {g} at sample {trial})"
                )));
            }
            for lam in [0.25, 3.0, 41.0] {
                let xs: Vec<f64> = x.iter().map(|&v| v * lam).collect();
                let gs = f(&xs);
                if ((gs - lam * g) / (lam * g)).abs() > 1e-8 {
                    return Err(Error::input(
                        "custom gauge is not 1-homogeneous to 1e-8 relative",
                    ));
                }
            }
        }
        let sphere_min = sphere_minimum(dim, f.as_ref())?;
        Ok(StarBody {
            dim,
            gauge: Gauge::Custom { f, sphere_min },
        })
    }

    /// Gauge parsed from an expression in x1..xn.
    pub fn custom_expr(dim: usize, text: &str) -> Result<Self> {
        let field = ScalarField::parse_real(text, dim)?;
        Self::custom_fn(dim, move |x| field.eval(x))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The Minkowski gauge |x|_Q; zero exactly at the origin.
    pub fn gauge_norm(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "point dimension mismatch");
        if x.iter().all(|&v| v == 0.0) {
            return 0.0;
        }
        match &self.gauge {
            Gauge::Ellipsoid { a, .. } => {
                let mut q = 0.0;
                for i in 0..self.dim {
                    for j in 0..self.dim {
                        q += x[i] * a[(i, j)] * x[j];
                    }
                }
                q.max(0.0).sqrt()
            }
            Gauge::Custom { f, .. } => f(x),
        }
    }

    /// Per-axis extents of the axis-aligned box containing {|x|_Q <= r}.
    fn box_extents(&self, r: f64) -> Vec<f64> {
        match &self.gauge {
            Gauge::Ellipsoid { inv_diag, .. } => {
                inv_diag.iter().map(|&d| r * d.sqrt()).collect()
            }
            Gauge::Custom { sphere_min, .. } => vec![r / sphere_min; self.dim],
        }
    }

    fn integer_bounds(&self, l: f64) -> Result<Vec<i64>> {
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::input(format!("shell parameter L must be positive and finite, got {l}")));
        }
        let r = l.sqrt();
        let mut bounds = Vec::with_capacity(self.dim);
        for (i, e) in self.box_extents(r).into_iter().enumerate() {
            if !(e.is_finite() && e < MAX_EXTENT) {
                return Err(Error::Capacity(format!(
                    "axis {i} enumeration bound {e:e} exceeds exact integer range"
                )));
            }
            bounds.push(e.floor() as i64);
        }
        let mut cells: u128 = 1;
        for &b in &bounds {
            cells = cells.saturating_mul(2 * b as u128 + 1);
            if cells > u64::MAX as u128 {
                return Err(Error::Capacity(format!(
                    "shell bounding box at L={l:e} holds more than 2^64 cells"
                )));
            }
        }
        Ok(bounds)
    }

    /// Stream every lattice point of the shell 0 < |k|_Q <= sqrt(L)
    /// through `visit`, accumulating (count, compensated sum). Work is
    /// split into slabs along the first axis and merged in slab order,
    /// so results are bitwise reproducible at any thread count.
    fn scan<F>(&self, l: f64, visit: &F) -> Result<(u64, f64)>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let bounds = self.integer_bounds(l)?;
        let r = l.sqrt();
        let b0 = bounds[0];
        let slabs: Vec<Result<(u64, CompensatedSum)>> = (-b0..=b0)
            .into_par_iter()
            .map(|k0| {
                let mut count = 0u64;
                let mut sum = CompensatedSum::new();
                let mut point = vec![0.0f64; self.dim];
                let mut idx = vec![0i64; self.dim];
                point[0] = k0 as f64;
                idx[0] = k0;
                let mut odo: Vec<i64> = bounds[1..].iter().map(|&b| -b).collect();
                'outer: loop {
                    for (j, &v) in odo.iter().enumerate() {
                        idx[j + 1] = v;
                        point[j + 1] = v as f64;
                    }
                    let g = self.gauge_norm(&point);
                    if g > 0.0 && g <= r {
                        let v = visit(&point);
                        if !v.is_finite() {
                            return Err(Error::evaluation(
                                format!("lattice point {idx:?}"),
                                format!("observable returned {v}"),
                            ));
                        }
                        count += 1;
                        sum.add(v);
                    }
                    // odometer over the remaining axes
                    for j in (0..odo.len()).rev() {
                        odo[j] += 1;
                        if odo[j] <= bounds[j + 1] {
                            continue 'outer;
                        }
                        odo[j] = -bounds[j + 1];
                    }
                    break;
                }
                Ok((count, sum))
            })
            .collect();
        let mut count = 0u64;
        let mut sum = CompensatedSum::new();
        for slab in slabs {
            let (c, s) = slab?;
            count += c;
            sum.merge(s);
        }
        Ok((count, sum.value()))
    }

    /// Materialize the shell 0 < |k|_Q <= sqrt(L). Intended for small
    /// and moderate shells; large scans should go through `radial_sum`,
    /// which streams.
    pub fn enumerate_shell(&self, l: f64) -> Result<Vec<Vec<i64>>> {
        let bounds = self.integer_bounds(l)?;
        let r = l.sqrt();
        let b0 = bounds[0];
        let slabs: Vec<Vec<Vec<i64>>> = (-b0..=b0)
            .into_par_iter()
            .map(|k0| {
                let mut out = Vec::new();
                let mut point = vec![0.0f64; self.dim];
                point[0] = k0 as f64;
                let mut odo: Vec<i64> = bounds[1..].iter().map(|&b| -b).collect();
                'outer: loop {
                    for (j, &v) in odo.iter().enumerate() {
                        point[j + 1] = v as f64;
                    }
                    let g = self.gauge_norm(&point);
                    if g > 0.0 && g <= r {
                        let mut k = Vec::with_capacity(self.dim);
                        k.push(k0);
                        k.extend_from_slice(&odo);
                        out.push(k);
                    }
                    for j in (0..odo.len()).rev() {
                        odo[j] += 1;
                        if odo[j] <= bounds[j + 1] {
                            continue 'outer;
                        }
                        odo[j] = -bounds[j + 1];
                    }
                    break;
                }
                out
            })
            .collect();
        Ok(slabs.into_iter().flatten().collect())
    }

    /// Count the shell and sum the observable over it.
    pub fn radial_sum(&self, obs: &RadialObservable, l: f64) -> Result<ShellScanResult> {
        let start = Instant::now();
        let (count, sum) = match &obs.kind {
            ObsKind::One => {
                let (count, _) = self.scan(l, &|_: &[f64]| 1.0)?;
                (count, count as f64)
            }
            _ => self.scan(l, &|x: &[f64]| obs.eval(x))?,
        };
        Ok(ShellScanResult {
            l,
            count,
            sum,
            elapsed: start.elapsed(),
        })
    }

    /// The body integral the scaled radial sums converge to:
    /// S_f(L) = L^{n/2} * int_Q f dX + lower-order remainder.
    pub fn leading_coefficient(
        &self,
        obs: &RadialObservable,
        method: IntegralMethod,
    ) -> Result<Estimate> {
        match method {
            IntegralMethod::Quadrature { rel_tol } => self.body_integral_quad(obs, rel_tol),
            IntegralMethod::MonteCarlo { samples, seed } => {
                self.body_integral_mc(obs, samples, seed)
            }
        }
    }

    fn radius(&self, u: &[f64]) -> f64 {
        1.0 / self.gauge_norm(u)
    }

    fn body_integral_quad(&self, obs: &RadialObservable, rel_tol: f64) -> Result<Estimate> {
        if !(rel_tol > 0.0) {
            return Err(Error::input("quadrature tolerance must be positive"));
        }
        // Degree-0 integrands are constant along rays, so the body
        // integral reduces to a boundary integral of f(u) r(u)^n / n.
        let value = match self.dim {
            1 => {
                let fp = obs.eval(&[1.0]) * self.radius(&[1.0]);
                let fm = obs.eval(&[-1.0]) * self.radius(&[-1.0]);
                fp + fm
            }
            2 => integrate_periodic(
                |t| {
                    let u = [t.cos(), t.sin()];
                    let r = self.radius(&u);
                    0.5 * obs.eval(&u) * r * r
                },
                std::f64::consts::TAU,
                rel_tol,
            )?,
            3 => self.sphere_integral_doubling(obs, rel_tol)?,
            n => {
                return Err(Error::input(format!(
                    "quadrature supports dimensions 1..3, not {n}; use Monte Carlo"
                )))
            }
        };
        if !value.is_finite() {
            return Err(Error::evaluation("body integral", "non-finite quadrature value"));
        }
        Ok(Estimate {
            value,
            stderr: 0.0,
            samples: 0,
        })
    }

    fn sphere_integral_doubling(&self, obs: &RadialObservable, rel_tol: f64) -> Result<f64> {
        let eval_level = |nc: usize, nt: usize| -> f64 {
            let rule = gauss_legendre(nc);
            let dt = std::f64::consts::TAU / nt as f64;
            let mut acc = CompensatedSum::new();
            for (ci, &c) in rule.nodes.iter().enumerate() {
                let s = (1.0 - c * c).max(0.0).sqrt();
                let wc = rule.weights[ci];
                for it in 0..nt {
                    let t = it as f64 * dt;
                    let u = [s * t.cos(), s * t.sin(), c];
                    let r = self.radius(&u);
                    acc.add(wc * dt * obs.eval(&u) * r * r * r / 3.0);
                }
            }
            acc.value()
        };
        let mut prev = eval_level(24, 48);
        for level in 1..=5 {
            let cur = eval_level(24 << level, 48 << level);
            let err = (cur - prev).abs();
            if err <= rel_tol * (1.0 + cur.abs()) {
                return Ok(cur);
            }
            prev = cur;
        }
        Err(Error::ToleranceNotMet {
            requested: rel_tol,
            achieved: f64::NAN,
            estimate: prev,
        })
    }

    fn body_integral_mc(&self, obs: &RadialObservable, samples: u64, seed: u64) -> Result<Estimate> {
        if samples < 100 {
            return Err(Error::input("Monte Carlo needs at least 100 samples"));
        }
        let extents = self.box_extents(1.0);
        let boxvol: f64 = extents.iter().map(|e| 2.0 * e).product();
        let moments = parallel_mc(samples, seed, |rng| {
            let x: Vec<f64> = extents
                .iter()
                .map(|&e| rng.random_range(-e..e))
                .collect();
            let g = self.gauge_norm(&x);
            if g > 0.0 && g <= 1.0 {
                obs.eval(&x)
            } else {
                0.0
            }
        });
        if !moments.mean.is_finite() {
            return Err(Error::evaluation(
                "body integral Monte Carlo",
                "observable produced non-finite values inside the body",
            ));
        }
        Ok(Estimate {
            value: boxvol * moments.mean,
            stderr: boxvol * moments.stderr,
            samples,
        })
    }
}

/// Estimate the minimum of a gauge over the unit sphere from below:
/// coarse deterministic sampling, local refinement around the best
/// direction, then a safety margin. Used only for bounding boxes, so an
/// underestimate merely enlarges the scanned box.
fn sphere_minimum(dim: usize, f: &(dyn Fn(&[f64]) -> f64 + Send + Sync)) -> Result<f64> {
    let mut rng = stream_rng(0x7370_6865, 1);
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= n;
        }
    };
    let mut best_u: Vec<f64> = vec![0.0; dim];
    best_u[0] = 1.0;
    let mut best = f(&best_u);
    let coarse = if dim <= 3 { 20_000 } else { 60_000 };
    for _ in 0..coarse {
        let mut u: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if u.iter().map(|x| x * x).sum::<f64>() < 1e-6 {
            continue;
        }
        normalize(&mut u);
        let g = f(&u);
        if !(g.is_finite() && g > 0.0) {
            return Err(Error::input("custom gauge vanishes or is non-finite on the sphere"));
        }
        if g < best {
            best = g;
            best_u = u;
        }
    }
    let mut scale = 0.1;
    for _ in 0..6 {
        for _ in 0..2_000 {
            let mut u: Vec<f64> = best_u
                .iter()
                .map(|&x| x + scale * rng.random_range(-1.0..1.0))
                .collect();
            normalize(&mut u);
            let g = f(&u);
            if g < best {
                best = g;
                best_u = u;
            }
        }
        scale *= 0.4;
    }
    Ok(best * 0.98)
}

/// Degree-0 homogeneous observable on R^n \ {0}.
pub struct RadialObservable {
    dim: usize,
    kind: ObsKind,
    /// Indicator-style observables are only piecewise smooth; radial
    /// sums against them converge with the weaker remainder exponent.
    pub sharp: bool,
}

enum ObsKind {
    One,
    Expr(ScalarField),
    Fn(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl RadialObservable {
    pub fn one(dim: usize) -> Self {
        RadialObservable {
            dim,
            kind: ObsKind::One,
            sharp: false,
        }
    }

    pub fn expr(dim: usize, text: &str, sharp: bool) -> Result<Self> {
        let field = ScalarField::parse_real(text, dim)?;
        let obs = RadialObservable {
            dim,
            kind: ObsKind::Expr(field),
            sharp,
        };
        obs.check_degree_zero()?;
        Ok(obs)
    }

    pub fn func<F>(dim: usize, f: F, sharp: bool) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        let obs = RadialObservable {
            dim,
            kind: ObsKind::Fn(Arc::new(f)),
            sharp,
        };
        obs.check_degree_zero()?;
        Ok(obs)
    }

    fn check_degree_zero(&self) -> Result<()> {
        let mut rng = stream_rng(0x6f62_7334, 2);
        for _ in 0..48 {
            let x: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            if x.iter().map(|v| v * v).sum::<f64>() < 1e-2 {
                continue;
            }
            let v = self.eval(&x);
            if !v.is_finite() {
                return Err(Error::evaluation(
                    format!("observable at {x:?}"),
                    "non-finite value",
                ));
            }
            if self.sharp {
                continue;
            }
            for lam in [0.5, 2.0, 13.0] {
                let xs: Vec<f64> = x.iter().map(|&t| t * lam).collect();
                if (self.eval(&xs) - v).abs() > 1e-9 * (1.0 + v.abs()) {
                    return Err(Error::input(
                        "observable is not homogeneous of degree 0",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            ObsKind::One => 1.0,
            ObsKind::Expr(e) => e.eval(x),
            ObsKind::Fn(f) => f(x),
        }
    }
}

/// One row of a shell scan.
#[derive(Clone, Copy, Debug)]
pub struct ShellScanResult {
    pub l: f64,
    pub count: u64,
    pub sum: f64,
    pub elapsed: Duration,
}

#[derive(Clone, Copy, Debug)]
pub enum IntegralMethod {
    Quadrature { rel_tol: f64 },
    MonteCarlo { samples: u64, seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: u64,
}

/// Least-squares fit of the remainder exponent: regress log|S_f(L) -
/// c L^{n/2}| on log L. `band` is the two-standard-error interval.
#[derive(Clone, Copy, Debug)]
pub struct RemainderFit {
    pub beta: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub used: usize,
    pub band: (f64, f64),
}

pub fn remainder_exponent_fit(series: &[(f64, f64)], c: f64, n: usize) -> Result<RemainderFit> {
    let mut ls: Vec<f64> = series.iter().map(|p| p.0).collect();
    ls.sort_by(f64::total_cmp);
    ls.dedup();
    if ls.len() < 6 {
        return Err(Error::input(format!(
            "remainder fit needs at least 6 distinct L values, got {}",
            ls.len()
        )));
    }
    let (lo, hi) = (ls[0], ls[ls.len() - 1]);
    if !(lo > 0.0) || hi / lo < 100.0 {
        return Err(Error::input(
            "remainder fit needs L values spanning at least two decades",
        ));
    }
    let half = n as f64 / 2.0;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(l, s) in series {
        let lead = c * l.powf(half);
        let resid = s - lead;
        if resid.abs() > 1e-9 * (1.0 + lead.abs()) {
            xs.push(l.ln());
            ys.push(resid.abs().ln());
        }
    }
    if xs.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "only {} of {} residuals are nonzero; the series matches c*L^(n/2) exactly",
            xs.len(),
            series.len()
        )));
    }
    let k = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / k;
    let ybar = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    if sxx <= 0.0 {
        return Err(Error::input("remainder fit: L values are not distinct"));
    }
    let beta = sxy / sxx;
    let intercept = ybar - beta * xbar;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + beta * x);
            e * e
        })
        .sum();
    let stderr = (sse / (k - 2.0) / sxx).sqrt();
    Ok(RemainderFit {
        beta,
        stderr,
        intercept,
        used: xs.len(),
        band: (beta - 2.0 * stderr, beta + 2.0 * stderr),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn disk() -> StarBody {
        StarBody::ellipsoid(DMatrix::identity(2, 2)).unwrap()
    }

    fn ellipse14() -> StarBody {
        StarBody::ellipsoid(DMatrix::from_diagonal(&nalgebra::dvector![1.0, 4.0])).unwrap()
    }

    /// Membership-only bisection for the ellipsoid gauge; shares no code
    /// path with the closed form.
    fn gauge_by_bisection(a: &DMatrix<f64>, x: &[f64]) -> f64 {
        let inside = |s: f64| {
            let mut q = 0.0;
            for i in 0..x.len() {
                for j in 0..x.len() {
                    q += x[i] * a[(i, j)] * x[j];
                }
            }
            q <= s * s
        };
        let mut hi = 1.0;
        while !inside(hi) {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if inside(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    #[test]
    fn gauge_closed_form_matches_bisection() {
        let a = DMatrix::from_diagonal(&nalgebra::dvector![1.0, 4.0]);
        let body = StarBody::ellipsoid(a.clone()).unwrap();
        let g = body.gauge_norm(&[1.0, 1.0]);
        assert_abs_diff_eq!(g, 5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(g, gauge_by_bisection(&a, &[1.0, 1.0]), epsilon = 1e-10);
        let mut rng = stream_rng(3, 0);
        for _ in 0..25 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert_abs_diff_eq!(
                body.gauge_norm(&x),
                gauge_by_bisection(&a, &x),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn gauge_vanishes_only_at_origin() {
        let body = disk();
        assert_eq!(body.gauge_norm(&[0.0, 0.0]), 0.0);
        assert!(body.gauge_norm(&[1e-150, 0.0]) > 0.0);
    }

    #[test]
    fn gauge_is_positively_homogeneous() {
        let body = ellipse14();
        let mut rng = stream_rng(4, 0);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lam: f64 = rng.random_range(0.01..50.0);
            let xs: Vec<f64> = x.iter().map(|&v| v * lam).collect();
            let g = body.gauge_norm(&x);
            assert_abs_diff_eq!(body.gauge_norm(&xs), lam * g, epsilon = 1e-10 * (1.0 + lam * g));
        }
    }

    #[test]
    fn non_positive_definite_matrix_is_rejected_with_eigenvalues() {
        let a = DMatrix::from_diagonal(&nalgebra::dvector![1.0, -2.0]);
        match StarBody::ellipsoid(a) {
            Err(Error::Signature { eigenvalues, .. }) => {
                assert!(eigenvalues.iter().any(|&e| e < 0.0));
            }
            other => panic!("expected signature error, got {other:?}"),
        }
    }

    /// Naive oracle: scan a box derived from the smallest eigenvalue of
    /// A (a different bound than the production inverse-diagonal one).
    fn brute_force_shell(a: &DMatrix<f64>, l: f64) -> Vec<Vec<i64>> {
        let n = a.nrows();
        let min_eig = a
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |m, &e| m.min(e));
        let b = (l / min_eig).sqrt().ceil() as i64 + 1;
        let mut out = Vec::new();
        let mut idx = vec![-b; n];
        'outer: loop {
            let q: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| idx[i] as f64 * a[(i, j)] * idx[j] as f64)
                .sum();
            if q > 0.0 && q.sqrt() <= l.sqrt() {
                out.push(idx.clone());
            }
            for j in (0..n).rev() {
                idx[j] += 1;
                if idx[j] <= b {
                    continue 'outer;
                }
                idx[j] = -b;
            }
            break;
        }
        out
    }

    #[test]
    fn disk_shell_counts_match_hand_enumeration() {
        let body = disk();
        assert_eq!(body.enumerate_shell(1.0).unwrap().len(), 4);
        assert_eq!(body.enumerate_shell(2.0).unwrap().len(), 8);
        assert_eq!(body.enumerate_shell(4.0).unwrap().len(), 12);
    }

    #[test]
    fn shell_never_contains_origin() {
        for l in [0.5, 1.0, 17.3] {
            let shell = disk().enumerate_shell(l).unwrap();
            assert!(shell.iter().all(|k| k.iter().any(|&v| v != 0)));
        }
    }

    #[test]
    fn enumeration_matches_brute_force_on_random_ellipsoids() {
        let mut rng = stream_rng(11, 0);
        for trial in 0..20 {
            let n = if trial % 2 == 0 { 2 } else { 3 };
            // random SPD: M^T M + I
            let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let a = m.transpose() * &m + DMatrix::identity(n, n) * 0.3;
            let l: f64 = rng.random_range(1.0..60.0);
            let body = StarBody::ellipsoid(a.clone()).unwrap();
            let mut got = body.enumerate_shell(l).unwrap();
            let mut want = brute_force_shell(&a, l);
            got.sort();
            want.sort();
            assert_eq!(got, want, "trial {trial} n={n} L={l}");
        }
    }

    #[test]
    fn custom_gauge_expression_matches_ellipsoid_route() {
        let expr = StarBody::custom_expr(2, "sqrt(x1^2 + 4*x2^2)").unwrap();
        let closed = ellipse14();
        for l in [1.0, 5.0, 30.0] {
            let mut a = expr.enumerate_shell(l).unwrap();
            let mut b = closed.enumerate_shell(l).unwrap();
            a.sort();
            b.sort();
            assert_eq!(a, b, "L={l}");
        }
    }

    #[test]
    fn non_homogeneous_custom_gauge_is_rejected() {
        let err = StarBody::custom_fn(2, |x: &[f64]| x[0] * x[0] + x[1] * x[1]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn oversized_shell_is_a_capacity_error() {
        match disk().enumerate_shell(1e40) {
            Err(Error::Capacity(_)) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn radial_sum_on_small_disk_shells() {
        let body = disk();
        let obs = RadialObservable::expr(2, "x1^2 / (x1^2 + x2^2)", false).unwrap();
        // L=1: points (+-1,0) give 1, (0,+-1) give 0.
        let r = body.radial_sum(&obs, 1.0).unwrap();
        assert_eq!(r.count, 4);
        assert_abs_diff_eq!(r.sum, 2.0, epsilon = 1e-12);
        // L=2: the four diagonal points add 1/2 each.
        let r2 = body.radial_sum(&obs, 2.0).unwrap();
        assert_eq!(r2.count, 8);
        assert_abs_diff_eq!(r2.sum, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn radial_sum_is_monotone_for_nonnegative_observables() {
        let body = ellipse14();
        let obs = RadialObservable::one(2);
        let mut prev = 0.0;
        for l in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
            let r = body.radial_sum(&obs, l).unwrap();
            assert!(r.sum >= prev);
            prev = r.sum;
        }
    }

    #[test]
    fn homogenized_observable_gives_identical_sums() {
        // f(x) and f(x / |x|_Q) must agree on every lattice point.
        let body = ellipse14();
        let plain = RadialObservable::expr(2, "x1^2 / (x1^2 + x2^2)", false).unwrap();
        let a = DMatrix::from_diagonal(&nalgebra::dvector![1.0, 4.0]);
        let homog = RadialObservable::func(
            2,
            move |x: &[f64]| {
                let mut q = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        q += x[i] * a[(i, j)] * x[j];
                    }
                }
                let g = q.sqrt();
                let u = [x[0] / g, x[1] / g];
                u[0] * u[0] / (u[0] * u[0] + u[1] * u[1])
            },
            false,
        )
        .unwrap();
        for l in [3.0, 11.0, 47.0] {
            let a = body.radial_sum(&plain, l).unwrap();
            let b = body.radial_sum(&homog, l).unwrap();
            assert_eq!(a.count, b.count);
            assert_abs_diff_eq!(a.sum, b.sum, epsilon = 1e-12 * (1.0 + a.sum.abs()));
        }
    }

    #[test]
    fn observable_nan_is_an_evaluation_error_naming_the_point() {
        let body = disk();
        let obs = RadialObservable::func(
            2,
            |x: &[f64]| {
                if x[0] == 1.0 && x[1] == 0.0 {
                    f64::NAN
                } else {
                    1.0
                }
            },
            true, // skip smooth homogeneity spot check
        )
        .unwrap();
        match body.radial_sum(&obs, 4.0) {
            Err(Error::Evaluation { where_, .. }) => assert!(where_.contains("[1, 0]")),
            other => panic!("expected evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn disk_area_from_quadrature_and_monte_carlo() {
        let body = disk();
        let one = RadialObservable::one(2);
        let q = body
            .leading_coefficient(&one, IntegralMethod::Quadrature { rel_tol: 1e-12 })
            .unwrap();
        assert_abs_diff_eq!(q.value, PI, epsilon = 1e-10);
        let mc = body
            .leading_coefficient(
                &one,
                IntegralMethod::MonteCarlo {
                    samples: 200_000,
                    seed: 5,
                },
            )
            .unwrap();
        assert!((mc.value - PI).abs() < 3.0 * mc.stderr, "{mc:?}");
    }

    #[test]
    fn angular_weight_integrates_to_half_disk_area() {
        // x1^2/|x|^2 averages to 1/2 on the unit disk by symmetry.
        let body = disk();
        let obs = RadialObservable::expr(2, "x1^2 / (x1^2 + x2^2)", false).unwrap();
        let q = body
            .leading_coefficient(&obs, IntegralMethod::Quadrature { rel_tol: 1e-12 })
            .unwrap();
        assert_abs_diff_eq!(q.value, PI / 2.0, epsilon = 1e-8);
    }

    #[test]
    fn ellipsoid_volume_scales_by_root_determinant() {
        let body = ellipse14();
        let one = RadialObservable::one(2);
        let q = body
            .leading_coefficient(&one, IntegralMethod::Quadrature { rel_tol: 1e-12 })
            .unwrap();
        assert_abs_diff_eq!(q.value, PI / 2.0, epsilon = 1e-10);
    }

    #[test]
    fn ball_volume_in_three_dimensions() {
        let body = StarBody::ellipsoid(DMatrix::identity(3, 3)).unwrap();
        let one = RadialObservable::one(3);
        let q = body
            .leading_coefficient(&one, IntegralMethod::Quadrature { rel_tol: 1e-10 })
            .unwrap();
        assert_abs_diff_eq!(q.value, 4.0 * PI / 3.0, epsilon = 1e-8);
    }

    #[test]
    fn quadrature_in_high_dimension_is_rejected() {
        let body = StarBody::ellipsoid(DMatrix::identity(4, 4)).unwrap();
        let one = RadialObservable::one(4);
        assert!(matches!(
            body.leading_coefficient(&one, IntegralMethod::Quadrature { rel_tol: 1e-8 }),
            Err(Error::Input(_))
        ));
        let mc = body
            .leading_coefficient(
                &one,
                IntegralMethod::MonteCarlo {
                    samples: 400_000,
                    seed: 9,
                },
            )
            .unwrap();
        // volume of the unit 4-ball
        let want = PI * PI / 2.0;
        assert!((mc.value - want).abs() < 3.0 * mc.stderr);
    }

    #[test]
    fn remainder_fit_recovers_synthetic_exponent() {
        let series: Vec<(f64, f64)> = (0..12)
            .map(|i| {
                let l = 100.0 * 2f64.powi(i);
                (l, PI * l + l.powf(1.0 / 3.0))
            })
            .collect();
        let fit = remainder_exponent_fit(&series, PI, 2).unwrap();
        assert_abs_diff_eq!(fit.beta, 1.0 / 3.0, epsilon = 0.01);
        assert!(fit.stderr < 0.01);
        assert!(fit.band.0 <= fit.beta && fit.beta <= fit.band.1);
    }

    #[test]
    fn exact_series_is_a_degenerate_fit() {
        let series: Vec<(f64, f64)> = (0..8)
            .map(|i| {
                let l = 50.0 * 4f64.powi(i);
                (l, PI * l)
            })
            .collect();
        assert!(matches!(
            remainder_exponent_fit(&series, PI, 2),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn short_or_narrow_series_is_an_input_error() {
        let few: Vec<(f64, f64)> = (0..4).map(|i| (100.0 * 2f64.powi(i), 1.0)).collect();
        assert!(matches!(
            remainder_exponent_fit(&few, PI, 2),
            Err(Error::Input(_))
        ));
        let narrow: Vec<(f64, f64)> = (0..10)
            .map(|i| (100.0 + i as f64, i as f64))
            .collect();
        assert!(matches!(
            remainder_exponent_fit(&narrow, PI, 2),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn scan_results_are_bitwise_deterministic() {
        let body = ellipse14();
        let obs = RadialObservable::expr(2, "x1^2 / (x1^2 + x2^2)", false).unwrap();
        let a = body.radial_sum(&obs, 500.0).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| body.radial_sum(&obs, 500.0).unwrap());
        assert_eq!(a.count, b.count);
        assert_eq!(a.sum.to_bits(), b.sum.to_bits());
    }
}
