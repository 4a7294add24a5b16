use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::RngExt;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    complex_hessian, covariant_gradient_fd, covariant_gradient_raw, gradient_jacobian,
    is_degenerate, section_scale, weighted_fd_step, ComplexHessian, HermitianModel, HoloSection,
};
use crate::lattice::StarBody;
use crate::rng::stream_rng;
use crate::summation::CompensatedSum;

type C = Complex64;

/// Compact search box in C^m: every coordinate within half_width of the
/// center in both real and imaginary parts.
#[derive(Clone, Debug)]
pub struct Region {
    center: Vec<C>,
    half_width: f64,
}

impl Region {
    pub fn centered_box(center: Vec<C>, half_width: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::input("region needs at least one coordinate"));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::input(format!(
                "region half-width must be positive and finite, got {half_width}"
            )));
        }
        if center
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::input("region center must be finite"));
        }
        Ok(Region { center, half_width })
    }

    pub fn origin_box(m: usize, half_width: f64) -> Result<Self> {
        Self::centered_box(vec![C::new(0.0, 0.0); m], half_width)
    }

    pub fn m(&self) -> usize {
        self.center.len()
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn center(&self) -> &[C] {
        &self.center
    }

    /// Smallest slack to the box boundary; negative outside.
    pub fn boundary_distance(&self, z: &[C]) -> f64 {
        let mut d = f64::INFINITY;
        for (zj, cj) in z.iter().zip(&self.center) {
            d = d.min(self.half_width - (zj.re - cj.re).abs());
            d = d.min(self.half_width - (zj.im - cj.im).abs());
        }
        d
    }

    pub fn contains(&self, z: &[C]) -> bool {
        self.boundary_distance(z) >= 0.0
    }

    /// Euclidean diameter of the box seen in R^{2m}.
    pub fn diameter(&self) -> f64 {
        2.0 * self.half_width * ((2 * self.m()) as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    /// Seeds per unit length per real dimension.
    pub grid_density: f64,
    /// Critical-equation tolerance, relative to the section scale.
    pub tol_crit: f64,
    /// Degeneracy tolerance on |det| relative to Hessian scale^{2m}.
    pub tol_deg: f64,
    pub max_iter: usize,
    /// Seed for the jittered extra seeds.
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        // tol_deg splits the observed gap between true degenerate roots
        // polished to the numerical floor (relative |det| around 1e-9)
        // and the smallest nondegenerate |det| in integer families
        // (around 1e-2)
        SolveOptions {
            grid_density: 4.0,
            tol_crit: 1e-8,
            tol_deg: 1e-6,
            max_iter: 60,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CriticalPoint {
    pub z: Vec<C>,
    pub gradnorm: f64,
    pub hessian: ComplexHessian,
    pub absdet: f64,
    pub degenerate: bool,
    pub on_boundary: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SolveDiagnostics {
    pub seeds: usize,
    pub converged: usize,
    pub discarded_nonconverged: usize,
    /// Seeds whose Newton path hit a rank-deficient Jacobian (a
    /// least-squares step is substituted before giving up on the seed).
    pub singular_jacobian_seeds: usize,
    pub outside_region: usize,
    pub failed_revalidation: usize,
    /// Set when the converged set looks like a positive-dimensional
    /// critical locus rather than isolated points.
    pub continuum_suspected: bool,
}

#[derive(Clone, Debug)]
pub struct CritResult {
    pub points: Vec<CriticalPoint>,
    pub diagnostics: SolveDiagnostics,
}

fn real_jacobian(a: &DMatrix<C>, b: &DMatrix<C>) -> DMatrix<f64> {
    let m = a.nrows();
    let mut j = DMatrix::zeros(2 * m, 2 * m);
    for r in 0..m {
        for q in 0..m {
            let apb = a[(r, q)] + b[(r, q)];
            let amb = a[(r, q)] - b[(r, q)];
            j[(r, q)] = apb.re;
            j[(r, m + q)] = -amb.im;
            j[(m + r, q)] = apb.im;
            j[(m + r, m + q)] = amb.re;
        }
    }
    j
}

struct NewtonOutcome {
    z: Vec<C>,
    gradnorm: f64,
    hit_singular: bool,
}

fn newton_from_seed(
    model: &HermitianModel,
    sect: &HoloSection,
    region: &Region,
    seed_z: Vec<C>,
    opts: &SolveOptions,
) -> Option<NewtonOutcome> {
    let m = region.m();
    let escape = 3.0 * region.half_width + 1.0;
    let mut z = seed_z;
    let mut hit_singular = false;
    // once inside tolerance, keep contracting toward the numerical
    // floor: degenerate roots converge only linearly and their residual
    // classification needs the extra digits
    let mut best: Option<(Vec<C>, f64)> = None;
    let mut stalled = 0usize;
    for _ in 0..opts.max_iter + 25 {
        let g = covariant_gradient_raw(model, sect, &z);
        if g.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            break;
        }
        let gn = g.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let scale = section_scale(sect, &z);
        if gn <= opts.tol_crit * scale {
            match &mut best {
                Some((bz, bg)) => {
                    if gn < 0.7 * *bg {
                        bz.clone_from(&z);
                        *bg = gn;
                        stalled = 0;
                    } else {
                        if gn < *bg {
                            bz.clone_from(&z);
                            *bg = gn;
                        }
                        stalled += 1;
                        if stalled >= 2 {
                            break;
                        }
                    }
                }
                None => best = Some((z.clone(), gn)),
            }
            if gn == 0.0 {
                break;
            }
        }
        let (a, b) = gradient_jacobian(model, sect, &z);
        let j = real_jacobian(&a, &b);
        let mut rhs = DVector::zeros(2 * m);
        for r in 0..m {
            rhs[r] = -g[r].re;
            rhs[m + r] = -g[r].im;
        }
        let svd = j.svd(true, true);
        let sv_max = svd.singular_values.max();
        if !(sv_max > 0.0) || !sv_max.is_finite() {
            break;
        }
        if svd.singular_values.iter().any(|&s| s < 1e-10 * sv_max) {
            hit_singular = true;
        }
        let Ok(mut delta) = svd.solve(&rhs, 1e-13 * sv_max) else {
            break;
        };
        let step = delta.norm();
        if !step.is_finite() {
            break;
        }
        if step > region.half_width {
            delta *= region.half_width / step;
        }
        for q in 0..m {
            z[q] += C::new(delta[q], delta[m + q]);
        }
        if z
            .iter()
            .zip(region.center())
            .any(|(zj, cj)| (zj.re - cj.re).abs() > escape || (zj.im - cj.im).abs() > escape)
        {
            break;
        }
    }
    best.map(|(z, gradnorm)| NewtonOutcome {
        z,
        gradnorm,
        hit_singular,
    })
}

/// True when the whole segment between two near-critical points stays
/// within the critical tolerance: the two points are then numerically
/// indistinguishable approximations of one root (or one flat cluster)
/// rather than separate critical points.
fn segment_is_critical(
    model: &HermitianModel,
    sect: &HoloSection,
    a: &[C],
    b: &[C],
    tol_crit: f64,
) -> bool {
    for frac in [0.25, 0.5, 0.75] {
        let z: Vec<C> = a
            .iter()
            .zip(b)
            .map(|(x, y)| x * (1.0 - frac) + y * frac)
            .collect();
        let g = covariant_gradient_raw(model, sect, &z);
        let gn = g.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if gn > tol_crit * section_scale(sect, &z) {
            return false;
        }
    }
    true
}

fn dist(a: &[C], b: &[C]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Locate the critical points of a section inside a compact box by
/// damped Newton iteration from a jittered grid of seeds. Converged
/// points are deduplicated, re-validated by an independent gradient
/// evaluation, and classified as degenerate or not.
pub fn find_critical_points(
    model: &HermitianModel,
    sect: &HoloSection,
    region: &Region,
    opts: &SolveOptions,
) -> Result<CritResult> {
    if sect.m() != region.m() || model.m() != region.m() {
        return Err(Error::input(
            "model, section, and region must share the same number of variables",
        ));
    }
    if !(opts.grid_density >= 2.0) {
        return Err(Error::input(format!(
            "grid density must be at least 2 per unit length, got {}",
            opts.grid_density
        )));
    }
    if !(opts.tol_crit > 0.0 && opts.tol_deg > 0.0) {
        return Err(Error::input("tolerances must be positive"));
    }
    let m = region.m();
    let steps = ((2.0 * region.half_width * opts.grid_density).ceil() as usize).max(2);
    let total = (steps as u128).checked_pow(2 * m as u32);
    let total = match total {
        Some(t) if t <= 2_000_000 => t as usize,
        _ => {
            return Err(Error::Capacity(format!(
                "seed grid of {steps}^{} points is too large; lower grid_density",
                2 * m
            )))
        }
    };
    let spacing = 2.0 * region.half_width / steps as f64;
    let mut seeds: Vec<Vec<C>> = Vec::with_capacity(total + total / 10 + 1);
    let mut idx = vec![0usize; 2 * m];
    loop {
        let z: Vec<C> = (0..m)
            .map(|q| {
                let re = region.center()[q].re - region.half_width
                    + (idx[2 * q] as f64 + 0.5) * spacing;
                let im = region.center()[q].im - region.half_width
                    + (idx[2 * q + 1] as f64 + 0.5) * spacing;
                C::new(re, im)
            })
            .collect();
        seeds.push(z);
        let mut carry = 0;
        loop {
            idx[carry] += 1;
            if idx[carry] < steps {
                break;
            }
            idx[carry] = 0;
            carry += 1;
            if carry == 2 * m {
                break;
            }
        }
        if carry == 2 * m {
            break;
        }
    }
    let mut rng = stream_rng(opts.seed, 0x6a69_7474);
    let extra = total.div_ceil(10);
    for _ in 0..extra {
        let z: Vec<C> = (0..m)
            .map(|q| {
                C::new(
                    region.center()[q].re + rng.random_range(-1.0..1.0) * region.half_width,
                    region.center()[q].im + rng.random_range(-1.0..1.0) * region.half_width,
                )
            })
            .collect();
        seeds.push(z);
    }

    let mut diag = SolveDiagnostics {
        seeds: seeds.len(),
        ..Default::default()
    };
    let r_dedupe = 1e-6 * region.diameter();

    let outcomes: Vec<Option<NewtonOutcome>> = seeds
        .into_par_iter()
        .map(|s| newton_from_seed(model, sect, region, s, opts))
        .collect();

    let mut dedup: Vec<NewtonOutcome> = Vec::new();
    for o in outcomes {
        let Some(o) = o else {
            diag.discarded_nonconverged += 1;
            continue;
        };
        diag.converged += 1;
        if o.hit_singular {
            diag.singular_jacobian_seeds += 1;
        }
        if region.boundary_distance(&o.z) < -r_dedupe {
            diag.outside_region += 1;
            continue;
        }
        match dedup.iter_mut().find(|p| dist(&p.z, &o.z) <= r_dedupe) {
            Some(p) => {
                if o.gradnorm < p.gradnorm {
                    *p = o;
                }
            }
            None => dedup.push(o),
        }
    }

    // collapse stall clusters around slowly-converging (degenerate)
    // roots: nearby representatives joined by an everywhere-critical
    // segment are one root
    let mut clustered: Vec<NewtonOutcome> = Vec::new();
    for o in dedup {
        let zmax = o.z.iter().map(|v| v.re.abs().max(v.im.abs())).fold(0.0, f64::max);
        let r_cluster = 1e-3 * (1.0 + zmax);
        match clustered.iter_mut().find(|p| {
            dist(&p.z, &o.z) <= r_cluster
                && segment_is_critical(model, sect, &p.z, &o.z, opts.tol_crit)
        }) {
            Some(p) => {
                if o.gradnorm < p.gradnorm {
                    *p = o;
                }
            }
            None => clustered.push(o),
        }
    }

    let mut points = Vec::with_capacity(clustered.len());
    for o in clustered {
        // re-validation through the weighted-derivative form, which
        // shares no code with the Newton residual
        let h = weighted_fd_step(model, &o.z);
        let indep = covariant_gradient_fd(model, sect, &o.z, h);
        let gn_indep = indep.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let scale = section_scale(sect, &o.z);
        if gn_indep > opts.tol_crit * scale {
            diag.failed_revalidation += 1;
            continue;
        }
        let hess = complex_hessian(model, sect, &o.z, opts.tol_crit)?;
        let absdet = hess.abs_det();
        let degenerate = is_degenerate(&hess, opts.tol_deg);
        let on_boundary = region.boundary_distance(&o.z) <= r_dedupe;
        points.push(CriticalPoint {
            z: o.z,
            gradnorm: o.gradnorm,
            hessian: hess,
            absdet,
            degenerate,
            on_boundary,
        });
    }

    points.sort_by(|a, b| {
        let ka: Vec<f64> = a.z.iter().flat_map(|v| [v.re, v.im]).collect();
        let kb: Vec<f64> = b.z.iter().flat_map(|v| [v.re, v.im]).collect();
        ka.partial_cmp(&kb).unwrap()
    });

    if points.len() >= 10 {
        let mut nn: Vec<f64> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                points
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| dist(&p.z, &q.z))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        nn.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_nn = nn[nn.len() / 2];
        let degen_frac =
            points.iter().filter(|p| p.degenerate).count() as f64 / points.len() as f64;
        if median_nn <= f64::max(10.0 * r_dedupe, 2.0 * spacing) && degen_frac >= 0.8 {
            diag.continuum_suspected = true;
        }
    }

    Ok(CritResult {
        points,
        diagnostics: diag,
    })
}

/// A lattice family of sections f_G = sum_a G_a b_a with an integer
/// quadratic form Q on the coefficients.
#[derive(Clone, Debug)]
pub struct SectionFamily {
    basis: Vec<HoloSection>,
    model: HermitianModel,
    qform: DMatrix<f64>,
}

impl SectionFamily {
    pub fn new(basis: Vec<HoloSection>, model: HermitianModel, qform: DMatrix<f64>) -> Result<Self> {
        if basis.is_empty() {
            return Err(Error::input("family needs at least one basis section"));
        }
        let m = model.m();
        if basis.iter().any(|s| s.m() != m) {
            return Err(Error::input(
                "all basis sections must share the model's variable count",
            ));
        }
        let n = basis.len();
        if qform.nrows() != n || qform.ncols() != n {
            return Err(Error::input(format!(
                "quadratic form must be {n}x{n} to match the basis size"
            )));
        }
        let qscale = qform.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
        if (&qform - qform.transpose()).amax() > 1e-12 * qscale {
            return Err(Error::input("quadratic form must be symmetric"));
        }
        let fam = SectionFamily {
            basis,
            model,
            qform,
        };
        fam.check_linearity()?;
        Ok(fam)
    }

    /// f_{G+G'} must equal f_G + f_{G'} pointwise; exact for polynomial
    /// bases, spot-checked for closures.
    fn check_linearity(&self) -> Result<()> {
        let mut rng = stream_rng(0x6c696e, 0);
        let n = self.n();
        for _ in 0..8 {
            let g1: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g2: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let gs: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
            let f1 = self.section_real(&g1)?;
            let f2 = self.section_real(&g2)?;
            let fs = self.section_real(&gs)?;
            let z: Vec<C> = (0..self.m())
                .map(|_| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let lhs = fs.eval(&z);
            let rhs = f1.eval(&z) + f2.eval(&z);
            let scale = 1.0 + lhs.norm().max(rhs.norm());
            if (lhs - rhs).norm() > 1e-12 * scale {
                return Err(Error::input(
                    "family is not linear in the flux coefficients",
                ));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.basis.len()
    }

    pub fn m(&self) -> usize {
        self.model.m()
    }

    pub fn model(&self) -> &HermitianModel {
        &self.model
    }

    pub fn qform(&self) -> &DMatrix<f64> {
        &self.qform
    }

    pub fn section(&self, g: &[i64]) -> Result<HoloSection> {
        let gf: Vec<f64> = g.iter().map(|&v| v as f64).collect();
        self.section_real(&gf)
    }

    pub fn section_real(&self, g: &[f64]) -> Result<HoloSection> {
        if g.len() != self.n() {
            return Err(Error::input(format!(
                "flux vector has {} entries, family has {} basis sections",
                g.len(),
                self.n()
            )));
        }
        HoloSection::linear_combination(g, &self.basis)
    }

    pub fn q_value(&self, g: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n() {
            for j in 0..self.n() {
                s += g[i] * self.qform[(i, j)] * g[j];
            }
        }
        s
    }

    /// (positive, negative, zero) eigenvalue counts of the form.
    pub fn signature(&self) -> (usize, usize, usize) {
        let eig = self.qform.clone().symmetric_eigenvalues();
        let scale = eig.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
        let tol = 1e-12 * scale;
        let pos = eig.iter().filter(|&&v| v > tol).count();
        let neg = eig.iter().filter(|&&v| v < -tol).count();
        (pos, neg, self.n() - pos - neg)
    }
}

#[derive(Clone, Debug)]
pub struct VacuumCensus {
    pub l: f64,
    pub fluxes_scanned: usize,
    /// Per-flux critical points in ascending lexicographic flux order.
    pub vacua: Vec<(Vec<i64>, CriticalPoint)>,
    /// Sum of the observable over nondegenerate critical points.
    pub total_psi: f64,
    /// Degenerate points encountered (observable skipped there).
    pub degenerate_skipped: usize,
    pub boundary_flagged: usize,
    /// False when any flux produced a continuum warning or failed
    /// re-validation; the offending fluxes are listed.
    pub certified: bool,
    pub flagged_fluxes: Vec<Vec<i64>>,
}

fn gcd64(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn primitive_class(g: &[i64]) -> (Vec<i64>, i64) {
    let mut d = 0;
    for &v in g {
        d = gcd64(d, v);
    }
    if d == 0 {
        return (g.to_vec(), 1);
    }
    (g.iter().map(|&v| v / d).collect(), d)
}

/// Count critical points of every lattice section in the shell
/// 0 < Q[G] <= L, weighting nondegenerate points by the observable.
/// Critical sets are solved once per primitive flux direction and
/// reused along the positive ray, since positive rescaling of a
/// section leaves its critical set unchanged.
pub fn count_vacua<F>(
    family: &SectionFamily,
    l: f64,
    region: &Region,
    psi: F,
    opts: &SolveOptions,
) -> Result<VacuumCensus>
where
    F: Fn(&[f64], &CriticalPoint) -> f64 + Sync,
{
    if region.m() != family.m() {
        return Err(Error::input("region dimension does not match the family"));
    }
    let (pos, neg, zero) = family.signature();
    if neg > 0 || zero > 0 {
        return Err(Error::input(format!(
            "flux quadratic form must be positive definite for a shell scan \
             (signature: {pos} positive, {neg} negative, {zero} zero); \
             indefinite forms need an explicit compact scan bound"
        )));
    }
    let body = StarBody::ellipsoid(family.qform.clone())?;
    let fluxes = body.enumerate_shell(l)?;
    census_over_fluxes(family, l, region, &psi, opts, fluxes)
}

/// Same census over the intersection of the (possibly indefinite) shell
/// 0 < Q[G] <= L with the explicit box |G_a| <= bound. The truncation
/// is the caller's modeling choice and is reported as-is.
pub fn count_vacua_bounded<F>(
    family: &SectionFamily,
    l: f64,
    region: &Region,
    psi: F,
    opts: &SolveOptions,
    bound: i64,
) -> Result<VacuumCensus>
where
    F: Fn(&[f64], &CriticalPoint) -> f64 + Sync,
{
    if region.m() != family.m() {
        return Err(Error::input("region dimension does not match the family"));
    }
    if bound < 1 {
        return Err(Error::input("scan bound must be at least 1"));
    }
    let n = family.n();
    let width = (2 * bound + 1) as u128;
    if width.pow(n as u32) > 50_000_000 {
        return Err(Error::Capacity(
            "bounded flux scan is too large; lower the bound".into(),
        ));
    }
    let mut fluxes = Vec::new();
    let mut g = vec![-bound; n];
    'outer: loop {
        let q = family.q_value(&g.iter().map(|&v| v as f64).collect::<Vec<_>>());
        if q > 0.0 && q <= l {
            fluxes.push(g.clone());
        }
        let mut carry = 0;
        loop {
            g[carry] += 1;
            if g[carry] <= bound {
                break;
            }
            g[carry] = -bound;
            carry += 1;
            if carry == n {
                break 'outer;
            }
        }
    }
    census_over_fluxes(family, l, region, &psi, opts, fluxes)
}

fn census_over_fluxes<F>(
    family: &SectionFamily,
    l: f64,
    region: &Region,
    psi: &F,
    opts: &SolveOptions,
    mut fluxes: Vec<Vec<i64>>,
) -> Result<VacuumCensus>
where
    F: Fn(&[f64], &CriticalPoint) -> f64 + Sync,
{
    fluxes.sort();
    let mut census = VacuumCensus {
        l,
        fluxes_scanned: fluxes.len(),
        vacua: Vec::new(),
        total_psi: 0.0,
        degenerate_skipped: 0,
        boundary_flagged: 0,
        certified: true,
        flagged_fluxes: Vec::new(),
    };

    // group fluxes by primitive direction, preserving first-seen order
    let mut classes: Vec<(Vec<i64>, Vec<(i64, Vec<i64>)>)> = Vec::new();
    for g in fluxes {
        let (p, t) = primitive_class(&g);
        match classes.iter_mut().find(|(key, _)| *key == p) {
            Some((_, members)) => members.push((t, g)),
            None => classes.push((p, vec![(t, g)])),
        }
    }

    let solved: Vec<Result<CritResult>> = classes
        .par_iter()
        .enumerate()
        .map(|(i, (p, _))| {
            let sect = family.section(p)?;
            let class_opts = SolveOptions {
                seed: opts.seed.wrapping_add(i as u64),
                ..*opts
            };
            find_critical_points(family.model(), &sect, region, &class_opts)
        })
        .collect();

    let mut entries: Vec<(Vec<i64>, CriticalPoint, bool)> = Vec::new();
    let mut failed_revalidation: Vec<Vec<i64>> = Vec::new();
    for ((p, members), solved) in classes.into_iter().zip(solved) {
        let solved = solved?;
        let continuum = solved.diagnostics.continuum_suspected;
        for (t, g) in members {
            if continuum {
                census.flagged_fluxes.push(g.clone());
                census.certified = false;
            }
            let sect_g = family.section(&g)?;
            let tf = t as f64;
            let scale_pow = tf.powi(2 * family.m() as i32);
            for cp in &solved.points {
                // exact rescaling of the primitive solution along the ray
                let hess = ComplexHessian {
                    hprime: &cp.hessian.hprime * C::new(tf, 0.0),
                    hdoubleprime: &cp.hessian.hdoubleprime * C::new(tf, 0.0),
                };
                let gn = covariant_gradient_raw(family.model(), &sect_g, &cp.z)
                    .iter()
                    .map(|v| v.norm_sqr())
                    .sum::<f64>()
                    .sqrt();
                let point = CriticalPoint {
                    z: cp.z.clone(),
                    gradnorm: gn,
                    absdet: cp.absdet * scale_pow,
                    degenerate: cp.degenerate,
                    on_boundary: cp.on_boundary,
                    hessian: hess,
                };
                // each census entry re-validates the critical equation
                // for its own flux through the independent evaluator
                let h = weighted_fd_step(family.model(), &point.z);
                let indep = covariant_gradient_fd(family.model(), &sect_g, &point.z, h);
                let gn_indep = indep.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
                let scale = section_scale(&sect_g, &point.z);
                if gn_indep > opts.tol_crit * scale || gn > opts.tol_crit * scale {
                    failed_revalidation.push(g.clone());
                    continue;
                }
                entries.push((g.clone(), point, false));
            }
        }
        let _ = p;
    }

    for g in failed_revalidation {
        if !census.flagged_fluxes.contains(&g) {
            census.flagged_fluxes.push(g);
            census.certified = false;
        }
    }

    entries.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            let ka: Vec<f64> = a.1.z.iter().flat_map(|v| [v.re, v.im]).collect();
            let kb: Vec<f64> = b.1.z.iter().flat_map(|v| [v.re, v.im]).collect();
            ka.partial_cmp(&kb).unwrap()
        })
    });

    let mut total = CompensatedSum::new();
    for (g, cp, _) in entries {
        if cp.on_boundary {
            census.boundary_flagged += 1;
        }
        if cp.degenerate {
            census.degenerate_skipped += 1;
        } else {
            let gf: Vec<f64> = g.iter().map(|&v| v as f64).collect();
            total.add(psi(&gf, &cp));
        }
        census.vacua.push((g, cp));
    }
    census.total_psi = total.value();
    census.flagged_fluxes.sort();
    Ok(census)
}

#[derive(Clone, Debug)]
pub struct CensusDensityRow {
    pub l: f64,
    pub count: f64,
    pub prediction: f64,
    pub ratio: f64,
    pub certified: bool,
}

/// Compare the lattice census N(L) against the continuum prediction
/// L^{n/2} * integral over the unit shell of the per-section observable
/// total, the integral estimated by Monte Carlo over flux space.
/// Monte Carlo estimate of the density integral over the unit flux shell:
/// the expected psi-weighted critical-point count for a flux drawn uniformly
/// from Q[w] <= 1, times the shell volume. Scaling by L^{n/2} predicts the
/// census total; the estimate never consults the lattice, so it is an
/// independent check on the census path.
pub fn unit_shell_integral<F>(
    family: &SectionFamily,
    region: &Region,
    psi: F,
    opts: &SolveOptions,
    mc_samples: u64,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[f64], &CriticalPoint) -> f64 + Sync,
{
    if mc_samples < 100 {
        return Err(Error::input("need at least 100 Monte Carlo samples"));
    }
    let n = family.n();
    let chol = family
        .qform
        .clone()
        .cholesky()
        .ok_or_else(|| Error::input("flux form is not positive definite"))?;
    // unit ball volume times det Q^{-1/2} gives the shell volume
    let det_q: f64 = (0..n).map(|i| chol.l()[(i, i)].powi(2)).product();
    let shell_vol = crate::quad::ball_volume(n) / det_q.sqrt();

    let lt_inv = chol
        .l()
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::input("flux form is not invertible"))?;

    let samples: Vec<Result<f64>> = (0..mc_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            // uniform point of the unit ball: gaussian direction, U^{1/n} radius
            let dir: Vec<f64> = (0..n)
                .map(|_| {
                    let u1: f64 = rng.random::<f64>().max(1e-300);
                    let u2: f64 = rng.random();
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let r = rng.random::<f64>().powf(1.0 / n as f64);
            let y: Vec<f64> = dir.iter().map(|v| v / dn * r).collect();
            let w = &lt_inv * DVector::from_vec(y);
            let wv: Vec<f64> = w.iter().copied().collect();
            let sect = family.section_real(&wv)?;
            let sample_opts = SolveOptions {
                seed: seed ^ i,
                ..*opts
            };
            let found = find_critical_points(family.model(), &sect, region, &sample_opts)?;
            let mut s = 0.0;
            for cp in &found.points {
                if !cp.degenerate {
                    s += psi(&wv, cp);
                }
            }
            Ok(s)
        })
        .collect();

    let mut acc = CompensatedSum::new();
    for s in samples {
        acc.add(s?);
    }
    Ok(acc.value() / mc_samples as f64 * shell_vol)
}

pub fn census_vs_density<F>(
    family: &SectionFamily,
    l_grid: &[f64],
    region: &Region,
    psi: F,
    opts: &SolveOptions,
    mc_samples: u64,
    seed: u64,
) -> Result<Vec<CensusDensityRow>>
where
    F: Fn(&[f64], &CriticalPoint) -> f64 + Sync,
{
    let (pos, neg, zero) = family.signature();
    if neg > 0 || zero > 0 {
        return Err(Error::input(format!(
            "continuum comparison requires a positive definite flux form \
             (signature: {pos} positive, {neg} negative, {zero} zero)"
        )));
    }
    if mc_samples < 100 {
        return Err(Error::input("need at least 100 Monte Carlo samples"));
    }
    let half_n = family.n() as f64 / 2.0;
    let integral = unit_shell_integral(family, region, &psi, opts, mc_samples, seed)?;

    let mut rows = Vec::with_capacity(l_grid.len());
    for &l in l_grid {
        let census = count_vacua(family, l, region, &psi, opts)?;
        let prediction = l.powf(half_n) * integral;
        let ratio = if prediction != 0.0 {
            census.total_psi / prediction
        } else {
            f64::NAN
        };
        rows.push(CensusDensityRow {
            l,
            count: census.total_psi,
            prediction,
            ratio,
            certified: census.certified,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{HermitianModel, HoloSection};
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> C {
        C::new(re, im)
    }

    fn quadratic_minus_one() -> HoloSection {
        HoloSection::poly1(&[c(-1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)])
    }

    fn two_flux_family() -> SectionFamily {
        // basis {1, z^2} with the standard integer form
        let b0 = HoloSection::poly1(&[c(1.0, 0.0)]);
        let b1 = HoloSection::poly1(&[c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        SectionFamily::new(
            vec![b0, b1],
            HermitianModel::flat(1),
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    /// Closed-form critical data of f = a + b z^2 on the flat model:
    /// z = 0 always (degenerate iff |a| = 2|b|); for a,b nonzero a real
    /// pair at z^2 = 2 - a/b when a/b < 2 and an imaginary pair at
    /// z^2 = -(2 + a/b) when a/b > -2, all nondegenerate; a = 0 with
    /// b nonzero has the whole circle |z|^2 = 2 critical.
    fn closed_form_nondegenerate_count(a: i64, b: i64, half_width: f64) -> usize {
        let mut count = 0;
        if b == 0 {
            return if a == 0 { 0 } else { 1 };
        }
        if a == 0 {
            // isolated nondegenerate origin plus a flagged continuum
            return 1;
        }
        let ratio = a as f64 / b as f64;
        if (2 * b).abs() != a.abs() {
            count += 1; // origin
        }
        if ratio < 2.0 {
            let r = (2.0 - ratio).sqrt();
            if r > 0.0 && r <= half_width {
                count += 2;
            }
        }
        if ratio > -2.0 {
            let r = (2.0 + ratio).sqrt();
            if r > 0.0 && r <= half_width {
                count += 2;
            }
        }
        count
    }

    /// Independent per-section count: sign-change cells of the real and
    /// imaginary parts of the covariant gradient on a fine grid, then
    /// clustered. Only valid for isolated simple zeros.
    fn grid_sign_change_count(
        model: &HermitianModel,
        sect: &HoloSection,
        half_width: f64,
        cells: usize,
    ) -> usize {
        let hw = half_width;
        let step = 2.0 * hw / cells as f64;
        let val = |i: usize, j: usize| {
            let z = vec![c(-hw + i as f64 * step, -hw + j as f64 * step)];
            covariant_gradient_raw(model, sect, &z)[0]
        };
        let mut hits: Vec<(usize, usize)> = Vec::new();
        let mut row_cache: Vec<C> = (0..=cells).map(|j| val(0, j)).collect();
        for i in 0..cells {
            let next_row: Vec<C> = (0..=cells).map(|j| val(i + 1, j)).collect();
            for j in 0..cells {
                let corners = [
                    row_cache[j],
                    row_cache[j + 1],
                    next_row[j],
                    next_row[j + 1],
                ];
                // non-strict so zeros sitting exactly on grid lines count
                let re_lo = corners.iter().any(|v| v.re <= 0.0);
                let re_hi = corners.iter().any(|v| v.re >= 0.0);
                let im_lo = corners.iter().any(|v| v.im <= 0.0);
                let im_hi = corners.iter().any(|v| v.im >= 0.0);
                if re_lo && re_hi && im_lo && im_hi {
                    hits.push((i, j));
                }
            }
            row_cache = next_row;
        }
        // flood-fill adjacency clustering
        let mut used = vec![false; hits.len()];
        let mut clusters = 0;
        for s in 0..hits.len() {
            if used[s] {
                continue;
            }
            clusters += 1;
            let mut stack = vec![s];
            used[s] = true;
            while let Some(k) = stack.pop() {
                for t in 0..hits.len() {
                    if !used[t]
                        && hits[t].0.abs_diff(hits[k].0) <= 1
                        && hits[t].1.abs_diff(hits[k].1) <= 1
                    {
                        used[t] = true;
                        stack.push(t);
                    }
                }
            }
        }
        clusters
    }

    #[test]
    fn shifted_quadratic_has_exactly_five_points() {
        let model = HermitianModel::flat(1);
        let region = Region::origin_box(1, 2.0).unwrap();
        let res =
            find_critical_points(&model, &quadratic_minus_one(), &region, &SolveOptions::default())
                .unwrap();
        assert_eq!(res.points.len(), 5, "{:?}", res.diagnostics);
        let s3 = 3f64.sqrt();
        let expected = [
            c(0.0, 0.0),
            c(s3, 0.0),
            c(-s3, 0.0),
            c(0.0, 1.0),
            c(0.0, -1.0),
        ];
        for e in &expected {
            assert!(
                res.points.iter().any(|p| (p.z[0] - e).norm() < 1e-6),
                "missing {e}"
            );
        }
        assert!(res.points.iter().all(|p| !p.degenerate));
        assert!(res.points.iter().all(|p| !p.on_boundary));
        assert!(!res.diagnostics.continuum_suspected);
        // independent grid count agrees
        let grid = grid_sign_change_count(&model, &quadratic_minus_one(), 2.0, 400);
        assert_eq!(grid, 5);
    }

    #[test]
    fn constant_section_has_single_critical_point_at_origin() {
        let model = HermitianModel::flat(1);
        let sect = HoloSection::poly1(&[c(2.5, -1.0)]);
        let region = Region::origin_box(1, 2.0).unwrap();
        let res = find_critical_points(&model, &sect, &region, &SolveOptions::default()).unwrap();
        assert_eq!(res.points.len(), 1);
        assert!(res.points[0].z[0].norm() < 1e-9);
        assert!(!res.points[0].degenerate);
    }

    #[test]
    fn linear_section_triggers_continuum_warning() {
        let model = HermitianModel::flat(1);
        let sect = HoloSection::poly1(&[c(0.0, 0.0), c(1.0, 0.0)]);
        let region = Region::origin_box(1, 2.0).unwrap();
        let res = find_critical_points(&model, &sect, &region, &SolveOptions::default()).unwrap();
        assert!(
            res.diagnostics.continuum_suspected,
            "found {} points, {:?}",
            res.points.len(),
            res.diagnostics
        );
        // the critical locus is the unit circle
        for p in &res.points {
            assert_abs_diff_eq!(p.z[0].norm(), 1.0, epsilon = 1e-6);
            assert!(p.degenerate);
        }
    }

    #[test]
    fn two_variable_product_family_point() {
        // f = z1 z2 + 1 on the flat model in two variables
        let model = HermitianModel::flat(2);
        let sect = HoloSection::poly(
            2,
            vec![(vec![1, 1], c(1.0, 0.0)), (vec![0, 0], c(1.0, 0.0))],
        )
        .unwrap();
        let region = Region::origin_box(2, 1.5).unwrap();
        let opts = SolveOptions {
            grid_density: 2.0,
            ..SolveOptions::default()
        };
        let res = find_critical_points(&model, &sect, &region, &opts).unwrap();
        assert!(res.points.iter().any(|p| dist(
            &p.z,
            &[c(0.0, 0.0), c(0.0, 0.0)]
        ) < 1e-8));
        for p in &res.points {
            let g = covariant_gradient_raw(&model, &sect, &p.z);
            assert!(g.iter().map(|v| v.norm()).sum::<f64>() < 1e-6);
        }
    }

    #[test]
    fn grid_density_below_two_is_rejected() {
        let model = HermitianModel::flat(1);
        let region = Region::origin_box(1, 2.0).unwrap();
        let opts = SolveOptions {
            grid_density: 1.0,
            ..SolveOptions::default()
        };
        assert!(matches!(
            find_critical_points(&model, &quadratic_minus_one(), &region, &opts),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn family_linearity_and_values() {
        let fam = two_flux_family();
        let sect = fam.section(&[2, -3]).unwrap();
        let z = vec![c(0.5, 0.25)];
        let want = c(2.0, 0.0) - c(3.0, 0.0) * z[0] * z[0];
        assert!((sect.eval(&z) - want).norm() < 1e-13);
        assert_eq!(fam.signature(), (2, 0, 0));
        assert_abs_diff_eq!(fam.q_value(&[3.0, 4.0]), 25.0, epsilon = 1e-12);
    }

    #[test]
    fn indefinite_form_needs_explicit_bound() {
        let b0 = HoloSection::poly1(&[c(1.0, 0.0)]);
        let b1 = HoloSection::poly1(&[c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let fam = SectionFamily::new(vec![b0, b1], HermitianModel::flat(1), q).unwrap();
        assert_eq!(fam.signature(), (1, 1, 0));
        let region = Region::origin_box(1, 3.0).unwrap();
        assert!(matches!(
            count_vacua(&fam, 4.0, &region, |_, _| 1.0, &SolveOptions::default()),
            Err(Error::Input(_))
        ));
        // truncated scan works and visits e.g. G = (2, 1) with Q = 3
        let census = count_vacua_bounded(
            &fam,
            4.0,
            &region,
            |_, _| 1.0,
            &SolveOptions::default(),
            2,
        )
        .unwrap();
        assert!(census.fluxes_scanned > 0);
        assert!(census.vacua.iter().any(|(g, _)| g == &vec![2, 1]));
    }

    #[test]
    fn unit_shell_census_of_constant_and_linear_family() {
        // basis {1, z}: the shell 0 < |G|^2 <= 1 holds four fluxes;
        // constant sections give one vacuum each, the linear ones are
        // continuum cases that must flag the census.
        let b0 = HoloSection::poly1(&[c(1.0, 0.0)]);
        let b1 = HoloSection::poly1(&[c(0.0, 0.0), c(1.0, 0.0)]);
        let fam = SectionFamily::new(
            vec![b0, b1],
            HermitianModel::flat(1),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let region = Region::origin_box(1, 3.0).unwrap();
        let census =
            count_vacua(&fam, 1.0, &region, |_, _| 1.0, &SolveOptions::default()).unwrap();
        assert_eq!(census.fluxes_scanned, 4);
        assert!(!census.certified);
        assert_eq!(census.flagged_fluxes, vec![vec![0, -1], vec![0, 1]]);
        // the two constant fluxes contribute one nondegenerate vacuum each
        let constant_vacua: Vec<_> = census
            .vacua
            .iter()
            .filter(|(g, cp)| g[1] == 0 && !cp.degenerate)
            .collect();
        assert_eq!(constant_vacua.len(), 2);
        for (_, cp) in constant_vacua {
            assert!(cp.z[0].norm() < 1e-9);
        }
        assert!(census.degenerate_skipped > 0);
    }

    #[test]
    fn empty_shell_yields_zero() {
        let fam = two_flux_family();
        let region = Region::origin_box(1, 3.0).unwrap();
        let census =
            count_vacua(&fam, 0.5, &region, |_, _| 1.0, &SolveOptions::default()).unwrap();
        assert_eq!(census.fluxes_scanned, 0);
        assert_eq!(census.vacua.len(), 0);
        assert_eq!(census.total_psi, 0.0);
        assert!(census.certified);
    }

    #[test]
    fn census_matches_closed_form_and_grid_oracles_at_small_l() {
        let fam = two_flux_family();
        let region = Region::origin_box(1, 3.0).unwrap();
        let census =
            count_vacua(&fam, 4.0, &region, |_, _| 1.0, &SolveOptions::default()).unwrap();
        // exhaustive independent enumeration of the same shell
        let mut expected = 0usize;
        let mut scanned = 0usize;
        for a in -2i64..=2 {
            for b in -2i64..=2 {
                let q = a * a + b * b;
                if q > 0 && q <= 4 {
                    scanned += 1;
                    expected += closed_form_nondegenerate_count(a, b, 3.0);
                }
            }
        }
        assert_eq!(census.fluxes_scanned, scanned);
        assert_eq!(census.total_psi.round() as usize, expected);
        assert_eq!(census.total_psi, expected as f64);
        // per-flux grid refinement for the isolated-zero fluxes
        for (a, b) in [(1i64, 1i64), (1, -1), (-1, 1), (2, 0), (1, 0)] {
            let sect = fam.section(&[a, b]).unwrap();
            let grid = grid_sign_change_count(fam.model(), &sect, 3.0, 600);
            let solver: usize = census
                .vacua
                .iter()
                .filter(|(g, _)| g == &vec![a, b])
                .count();
            assert_eq!(grid, solver, "flux ({a},{b})");
        }
        // a = 0 rays are flagged
        assert!(!census.certified);
        assert!(census.flagged_fluxes.iter().all(|g| g[0] == 0));
    }

    #[test]
    fn census_is_deterministic_and_monotone() {
        let fam = two_flux_family();
        let region = Region::origin_box(1, 3.0).unwrap();
        let opts = SolveOptions::default();
        let c1 = count_vacua(&fam, 9.0, &region, |_, _| 1.0, &opts).unwrap();
        let c2 = count_vacua(&fam, 9.0, &region, |_, _| 1.0, &opts).unwrap();
        assert_eq!(c1.total_psi.to_bits(), c2.total_psi.to_bits());
        assert_eq!(c1.vacua.len(), c2.vacua.len());
        let c_small = count_vacua(&fam, 4.0, &region, |_, _| 1.0, &opts).unwrap();
        assert!(c_small.total_psi <= c1.total_psi);
    }

    #[test]
    fn scaling_leaves_critical_set_fixed() {
        let fam = two_flux_family();
        let region = Region::origin_box(1, 3.0).unwrap();
        let opts = SolveOptions::default();
        let f1 = fam.section(&[1, 1]).unwrap();
        let f3 = fam.section(&[3, 3]).unwrap();
        let r1 = find_critical_points(fam.model(), &f1, &region, &opts).unwrap();
        let r3 = find_critical_points(fam.model(), &f3, &region, &opts).unwrap();
        assert_eq!(r1.points.len(), r3.points.len());
        for p in &r1.points {
            let q = r3
                .points
                .iter()
                .min_by(|x, y| {
                    dist(&x.z, &p.z)
                        .partial_cmp(&dist(&y.z, &p.z))
                        .unwrap()
                })
                .unwrap();
            assert!(dist(&q.z, &p.z) < 1e-8);
            // |det| scales by t^{2m} = 9
            assert_abs_diff_eq!(q.absdet / p.absdet, 9.0, epsilon = 1e-6);
            assert_eq!(q.degenerate, p.degenerate);
        }
    }

    #[test]
    fn degenerate_points_are_skipped_and_tallied() {
        // flux (2, 1): f = 2 + z^2 has a degenerate origin (|a| = 2|b|)
        let fam = two_flux_family();
        let region = Region::origin_box(1, 3.0).unwrap();
        let census =
            count_vacua(&fam, 5.0, &region, |_, _| 1.0, &SolveOptions::default()).unwrap();
        let deg_fluxes: Vec<_> = census
            .vacua
            .iter()
            .filter(|(_, cp)| cp.degenerate)
            .map(|(g, _)| g.clone())
            .collect();
        assert!(deg_fluxes.contains(&vec![2, 1]));
        assert!(census.degenerate_skipped >= deg_fluxes.len());
        // the degenerate origin of (2,1) is excluded from the total but
        // its imaginary pair (z = ±2i) is counted
        let pair_count = census
            .vacua
            .iter()
            .filter(|(g, cp)| g == &vec![2, 1] && !cp.degenerate)
            .count();
        assert_eq!(pair_count, 2);
    }

    #[test]
    fn census_tracks_continuum_prediction() {
        let fam = two_flux_family();
        let region = Region::origin_box(1, 3.0).unwrap();
        let opts = SolveOptions {
            grid_density: 3.0,
            ..SolveOptions::default()
        };
        let rows = census_vs_density(&fam, &[60.0, 120.0], &region, |_, _| 1.0, &opts, 600, 11)
            .unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(
                (row.ratio - 1.0).abs() < 0.2,
                "L = {}: ratio {} (count {} vs prediction {})",
                row.l,
                row.ratio,
                row.count,
                row.prediction
            );
            assert!(!row.certified); // a = 0 continuum rays are in every shell
        }
        // doubling L should roughly double the count (n/2 = 1)
        let growth = rows[1].count / rows[0].count;
        assert!((1.6..=2.4).contains(&growth), "growth {growth}");
    }
}
