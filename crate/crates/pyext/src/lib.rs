//! Python bindings: thin wrappers over the core library sharing the same
//! validation paths the CLI uses, so scripts and experiments agree on
//! every default.

use fluxstat_core::blackhole::{
    bh_count_estimate, bh_density, perfect_square_report, AttractorConfig, AttractorForm,
    BhMethod,
};
use fluxstat_core::config::{
    CouplingConfig, EnsembleConfig, FamilyConfig, ModelConfig, ModelKind, SectionConfig,
};
use fluxstat_core::critsolve::{
    count_vacua, count_vacua_bounded, find_critical_points, unit_shell_integral, Region,
    SolveOptions,
};
use fluxstat_core::density::{pf_density_gaussian, pf_density_indicator, HessianEnsemble};
use fluxstat_core::error::Error;
use fluxstat_core::izhc::{denominator_report, izhc_density, IzhcConfig};
use fluxstat_core::lattice::{
    remainder_exponent_fit, IntegralMethod, RadialObservable, StarBody as CoreBody,
};
use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    match e {
        Error::Input(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn model_config(kind: &str, m: usize, level: Option<f64>) -> PyResult<ModelConfig> {
    let kind = match kind {
        "flat" => ModelKind::Flat,
        "projective" => ModelKind::Projective,
        other => {
            return Err(PyValueError::new_err(format!(
                "model {other:?} must be flat or projective"
            )))
        }
    };
    Ok(ModelConfig { kind, m, level })
}

fn build_ensemble(
    h21: usize,
    coupling: Option<Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>>,
    covariance: Option<Vec<Vec<f64>>>,
) -> PyResult<HessianEnsemble> {
    let coupling = coupling
        .unwrap_or_default()
        .into_iter()
        .map(|(re, im)| CouplingConfig { re, im })
        .collect();
    EnsembleConfig {
        h21,
        coupling,
        covariance,
        qform: None,
    }
    .build()
    .map_err(err)
}

fn observable(dim: usize, expr: Option<&str>, sharp: bool) -> PyResult<RadialObservable> {
    match expr {
        None => Ok(RadialObservable::one(dim)),
        Some(text) => RadialObservable::expr(dim, text, sharp).map_err(err),
    }
}

/// Star-shaped integration body for radial lattice sums.
#[pyclass(unsendable)]
struct StarBody {
    inner: CoreBody,
}

#[pymethods]
impl StarBody {
    /// Body { x : x^T A x <= 1 } for a symmetric positive definite A.
    #[staticmethod]
    fn ellipsoid(matrix: Vec<Vec<f64>>) -> PyResult<Self> {
        let n = matrix.len();
        let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
        if flat.len() != n * n {
            return Err(PyValueError::new_err("ellipsoid matrix must be square"));
        }
        let a = nalgebra::DMatrix::from_row_slice(n, n, &flat);
        Ok(Self {
            inner: CoreBody::ellipsoid(a).map_err(err)?,
        })
    }

    /// Body described by a 1-homogeneous gauge expression in x1..xn.
    #[staticmethod]
    fn from_expr(dim: usize, gauge: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreBody::custom_expr(dim, gauge).map_err(err)?,
        })
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// (count, weighted sum) over lattice points with gauge^2 in (0, L].
    #[pyo3(signature = (l, expr=None, sharp=false))]
    fn radial_sum(&self, l: f64, expr: Option<&str>, sharp: bool) -> PyResult<(u64, f64)> {
        let obs = observable(self.inner.dim(), expr, sharp)?;
        let scan = self.inner.radial_sum(&obs, l).map_err(err)?;
        Ok((scan.count, scan.sum))
    }

    /// Body integral of the observable: the coefficient of L^{n/2}.
    #[pyo3(signature = (expr=None, sharp=false, rel_tol=1e-9))]
    fn leading_coefficient(&self, expr: Option<&str>, sharp: bool, rel_tol: f64) -> PyResult<f64> {
        let obs = observable(self.inner.dim(), expr, sharp)?;
        Ok(self
            .inner
            .leading_coefficient(&obs, IntegralMethod::Quadrature { rel_tol })
            .map_err(err)?
            .value)
    }
}

/// Log-log regression of |S(L) - c L^{n/2}|; returns (slope, stderr,
/// (band_lo, band_hi)).
#[pyfunction]
fn remainder_fit(series: Vec<(f64, f64)>, c: f64, n: usize) -> PyResult<(f64, f64, (f64, f64))> {
    let fit = remainder_exponent_fit(&series, c, n).map_err(err)?;
    Ok((fit.beta, fit.stderr, fit.band))
}

/// Shell census summary.
#[pyclass(frozen, get_all)]
struct Census {
    l: f64,
    total: f64,
    certified: bool,
    fluxes_scanned: usize,
    degenerate_skipped: usize,
    /// Rows (flux, critical point, |det H|, degenerate).
    vacua: Vec<(Vec<i64>, Vec<Complex64>, f64, bool)>,
}

/// Lattice family of sections g_1 s_1 + ... + g_n s_n with a flux
/// quadratic form.
#[pyclass(unsendable)]
struct Family {
    inner: fluxstat_core::critsolve::SectionFamily,
}

#[pymethods]
impl Family {
    /// Each basis section is a list of (multi_index, re, im) terms.
    #[new]
    #[pyo3(signature = (model, m, basis, qform, level=None))]
    fn new(
        model: &str,
        m: usize,
        basis: Vec<Vec<(Vec<u32>, f64, f64)>>,
        qform: Vec<Vec<f64>>,
        level: Option<f64>,
    ) -> PyResult<Self> {
        let cfg = FamilyConfig {
            model: model_config(model, m, level)?,
            basis: basis
                .into_iter()
                .map(|terms| SectionConfig { terms })
                .collect(),
            qform,
        };
        Ok(Self {
            inner: cfg.build().map_err(err)?,
        })
    }

    fn n(&self) -> usize {
        self.inner.n()
    }

    fn m(&self) -> usize {
        self.inner.m()
    }

    /// Census of critical points over 0 < Q[G] <= L inside the
    /// origin-centered box; `bound` switches to the compact box scan
    /// needed for indefinite forms.
    #[pyo3(signature = (l, half_width, seed=7, bound=None))]
    fn count_vacua(&self, l: f64, half_width: f64, seed: u64, bound: Option<i64>) -> PyResult<Census> {
        let region = Region::origin_box(self.inner.m(), half_width).map_err(err)?;
        let opts = SolveOptions {
            seed,
            ..SolveOptions::default()
        };
        let psi = |_: &[f64], _: &fluxstat_core::critsolve::CriticalPoint| 1.0;
        let census = match bound {
            Some(b) => count_vacua_bounded(&self.inner, l, &region, psi, &opts, b),
            None => count_vacua(&self.inner, l, &region, psi, &opts),
        }
        .map_err(err)?;
        Ok(Census {
            l: census.l,
            total: census.total_psi,
            certified: census.certified,
            fluxes_scanned: census.fluxes_scanned,
            degenerate_skipped: census.degenerate_skipped,
            vacua: census
                .vacua
                .into_iter()
                .map(|(g, p)| (g, p.z, p.absdet, p.degenerate))
                .collect(),
        })
    }

    /// Monte Carlo density integral over the unit flux shell; the census
    /// prediction at L is this value times L^{n/2}.
    #[pyo3(signature = (half_width, samples, seed=1))]
    fn shell_integral(&self, half_width: f64, samples: u64, seed: u64) -> PyResult<f64> {
        let region = Region::origin_box(self.inner.m(), half_width).map_err(err)?;
        let psi = |_: &[f64], _: &fluxstat_core::critsolve::CriticalPoint| 1.0;
        unit_shell_integral(
            &self.inner,
            &region,
            psi,
            &SolveOptions::default(),
            samples,
            seed,
        )
        .map_err(err)
    }
}

/// Critical points of one polynomial section; returns (points,
/// continuum_suspected) where each point is (z, |det H|, degenerate).
#[pyfunction]
#[pyo3(signature = (model, m, terms, half_width, seed=7, level=None))]
fn critical_points(
    model: &str,
    m: usize,
    terms: Vec<(Vec<u32>, f64, f64)>,
    half_width: f64,
    seed: u64,
    level: Option<f64>,
) -> PyResult<(Vec<(Vec<Complex64>, f64, bool)>, bool)> {
    let model = model_config(model, m, level)?.build().map_err(err)?;
    let sect = SectionConfig { terms }.build(m).map_err(err)?;
    let region = Region::origin_box(m, half_width).map_err(err)?;
    let opts = SolveOptions {
        seed,
        ..SolveOptions::default()
    };
    let found = find_critical_points(&model, &sect, &region, &opts).map_err(err)?;
    Ok((
        found
            .points
            .into_iter()
            .map(|p| (p.z, p.absdet, p.degenerate))
            .collect(),
        found.diagnostics.continuum_suspected,
    ))
}

/// Critical-point density of the Hessian ensemble; form is "gaussian"
/// (weighted determinant) or "indicator" (ellipsoid indicator). Returns
/// (value, stderr).
#[pyfunction]
#[pyo3(signature = (h21, samples, form="gaussian", seed=1, coupling=None, covariance=None))]
fn pf_density(
    h21: usize,
    samples: u64,
    form: &str,
    seed: u64,
    coupling: Option<Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>>,
    covariance: Option<Vec<Vec<f64>>>,
) -> PyResult<(f64, f64)> {
    let ens = build_ensemble(h21, coupling, covariance)?;
    let est = match form {
        "gaussian" => pf_density_gaussian(&ens, samples, seed),
        "indicator" => pf_density_indicator(&ens, samples, seed),
        other => {
            return Err(PyValueError::new_err(format!(
                "form {other:?} must be gaussian or indicator"
            )))
        }
    }
    .map_err(err)?;
    Ok((est.value, est.stderr))
}

/// Unitary-integral evaluation of the same density. Returns
/// (value, value_imag, haar_stderr).
#[pyfunction]
#[pyo3(signature = (h21, haar, seed=1, coupling=None, covariance=None))]
fn izhc_eval(
    h21: usize,
    haar: u64,
    seed: u64,
    coupling: Option<Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>>,
    covariance: Option<Vec<Vec<f64>>>,
) -> PyResult<(f64, f64, f64)> {
    let ens = build_ensemble(h21, coupling, covariance)?;
    let cfg = IzhcConfig::standard(ens.m(), haar, seed).map_err(err)?;
    let res = izhc_density(&ens, &cfg).map_err(err)?;
    Ok((res.value, res.value_imag, res.haar_stderr))
}

/// Factored-vs-direct denominator determinant deviations over random
/// rotations: (max_factored, mean_factored, max_displayed, mean_displayed).
#[pyfunction]
#[pyo3(signature = (h21, samples=64, seed=1, coupling=None, covariance=None))]
fn izhc_denominator_report(
    h21: usize,
    samples: usize,
    seed: u64,
    coupling: Option<Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>>,
    covariance: Option<Vec<Vec<f64>>>,
) -> PyResult<(f64, f64, f64, f64)> {
    let ens = build_ensemble(h21, coupling, covariance)?;
    let rep = denominator_report(&ens, samples, seed).map_err(err)?;
    Ok((
        rep.max_rel_dev_factored,
        rep.mean_rel_dev_factored,
        rep.max_rel_dev_displayed,
        rep.mean_rel_dev_displayed,
    ))
}

fn attractor_config(b3: usize, vol_wp: f64, form: &str, formal: bool) -> PyResult<AttractorConfig> {
    let form = match form {
        "gaussian" => AttractorForm::Gaussian,
        "indicator" => AttractorForm::Indicator,
        other => {
            return Err(PyValueError::new_err(format!(
                "form {other:?} must be gaussian or indicator"
            )))
        }
    };
    if formal {
        AttractorConfig::formal(b3, vol_wp, form)
    } else {
        AttractorConfig::new(b3, vol_wp, form)
    }
    .map_err(err)
}

/// Attractor-point radial moment; method is "closed-form", "quadrature",
/// or "monte-carlo". Returns (value, stderr).
#[pyfunction]
#[pyo3(signature = (b3, form="gaussian", method="closed-form", samples=1_000_000, seed=1, vol_wp=1.0, formal=false))]
fn bh_moment(
    b3: usize,
    form: &str,
    method: &str,
    samples: u64,
    seed: u64,
    vol_wp: f64,
    formal: bool,
) -> PyResult<(f64, f64)> {
    let cfg = attractor_config(b3, vol_wp, form, formal)?;
    let method = match method {
        "closed-form" => BhMethod::ClosedForm,
        "quadrature" => BhMethod::Quadrature,
        "monte-carlo" => BhMethod::MonteCarlo { n: samples, seed },
        other => {
            return Err(PyValueError::new_err(format!(
                "method {other:?} must be closed-form, quadrature, or monte-carlo"
            )))
        }
    };
    let d = bh_density(&cfg, method).map_err(err)?;
    Ok((d.value, d.stderr))
}

/// Leading-order attractor count below L: returns (leading_count,
/// log10_leading_count, density_coefficient, overflowed).
#[pyfunction]
#[pyo3(signature = (b3, vol_wp, l))]
fn bh_count(b3: usize, vol_wp: f64, l: f64) -> PyResult<(f64, f64, f64, bool)> {
    let cfg = attractor_config(b3, vol_wp, "gaussian", true)?;
    let est = bh_count_estimate(&cfg, l).map_err(err)?;
    Ok((
        est.leading_count,
        est.log10_leading_count,
        est.density_coefficient,
        est.overflowed,
    ))
}

/// Verifies the attractor block determinant is an exact square and (for
/// the curved variant) that its moment matches pi * b3!. Returns
/// (identity_max_dev, moment_within_3sigma_or_None).
#[pyfunction]
#[pyo3(signature = (b3, samples=20_000, seed=1, meromorphic=false))]
fn perfect_square(
    b3: usize,
    samples: u64,
    seed: u64,
    meromorphic: bool,
) -> PyResult<(f64, Option<bool>)> {
    let mut cfg = attractor_config(b3, 1.0, "gaussian", true)?;
    if meromorphic {
        cfg = cfg.with_meromorphic();
    }
    let rep = perfect_square_report(&cfg, samples, seed).map_err(err)?;
    Ok((rep.identity_max_dev, rep.moment.map(|m| m.within_3sigma)))
}

#[pymodule]
fn fluxstat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", fluxstat_core::VERSION)?;
    m.add_class::<StarBody>()?;
    m.add_class::<Family>()?;
    m.add_class::<Census>()?;
    m.add_function(wrap_pyfunction!(remainder_fit, m)?)?;
    m.add_function(wrap_pyfunction!(critical_points, m)?)?;
    m.add_function(wrap_pyfunction!(pf_density, m)?)?;
    m.add_function(wrap_pyfunction!(izhc_eval, m)?)?;
    m.add_function(wrap_pyfunction!(izhc_denominator_report, m)?)?;
    m.add_function(wrap_pyfunction!(bh_moment, m)?)?;
    m.add_function(wrap_pyfunction!(bh_count, m)?)?;
    m.add_function(wrap_pyfunction!(perfect_square, m)?)?;
    Ok(())
}
