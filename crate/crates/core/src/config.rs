//! TOML experiment schemas.
//!
//! One experiment is one human-readable file: a subcommand name, a master
//! seed, output paths, and the matching parameter block. Every struct
//! rejects unknown fields so typos surface as schema errors with the field
//! named, and every struct round-trips losslessly through serialization.
//! The `build` methods validate and construct the core objects.

use crate::blackhole::{AttractorConfig, AttractorForm, BhMethod};
use crate::critsolve::{Region, SectionFamily, SolveOptions};
use crate::density::{HessianEnsemble, YukawaData};
use crate::error::{Error, Result};
use crate::geometry::{HermitianModel, HoloSection};
use crate::izhc::IzhcConfig;
use crate::lattice::{IntegralMethod, RadialObservable, StarBody};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

fn real_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::input(format!("{what}: matrix must be nonempty")));
    }
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::input(format!("{what}: matrix rows have unequal lengths")));
    }
    let cols = rows[0].len();
    Ok(DMatrix::from_fn(n, cols, |i, j| rows[i][j]))
}

/// Star-shaped integration body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyConfig {
    pub kind: BodyKind,
    /// Dimension; required for custom gauges, implied by the matrix shape
    /// for ellipsoids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Symmetric positive definite quadratic form (ellipsoid kind).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    /// Positive 1-homogeneous gauge expression in x1..xn (custom kind).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gauge: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BodyKind {
    Ellipsoid,
    Custom,
}

impl BodyConfig {
    pub fn build(&self) -> Result<StarBody> {
        match self.kind {
            BodyKind::Ellipsoid => {
                let rows = self
                    .matrix
                    .as_ref()
                    .ok_or_else(|| Error::input("ellipsoid body needs a matrix"))?;
                let a = real_matrix(rows, "body.matrix")?;
                if let Some(d) = self.dim {
                    if d != a.nrows() {
                        return Err(Error::input("body.dim disagrees with the matrix shape"));
                    }
                }
                StarBody::ellipsoid(a)
            }
            BodyKind::Custom => {
                let dim = self
                    .dim
                    .ok_or_else(|| Error::input("custom body needs a dimension"))?;
                let gauge = self
                    .gauge
                    .as_ref()
                    .ok_or_else(|| Error::input("custom body needs a gauge expression"))?;
                StarBody::custom_expr(dim, gauge)
            }
        }
    }

    pub fn dim(&self) -> Result<usize> {
        match self.kind {
            BodyKind::Ellipsoid => self
                .matrix
                .as_ref()
                .map(|m| m.len())
                .ok_or_else(|| Error::input("ellipsoid body needs a matrix")),
            BodyKind::Custom => self
                .dim
                .ok_or_else(|| Error::input("custom body needs a dimension")),
        }
    }
}

fn expr_one() -> String {
    "1".to_string()
}

/// Degree-zero homogeneous observable on the body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableConfig {
    #[serde(default = "expr_one")]
    pub expr: String,
    /// Mark indicator-like observables; they only reach the weaker
    /// remainder exponent.
    #[serde(default)]
    pub sharp: bool,
}

impl Default for ObservableConfig {
    fn default() -> Self {
        ObservableConfig {
            expr: expr_one(),
            sharp: false,
        }
    }
}

impl ObservableConfig {
    pub fn build(&self, dim: usize) -> Result<RadialObservable> {
        if self.expr.trim() == "1" {
            return Ok(RadialObservable::one(dim));
        }
        RadialObservable::expr(dim, &self.expr, self.sharp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    Log,
    Linear,
}

/// A scan grid over L.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
    #[serde(default = "default_spacing")]
    pub spacing: Spacing,
}

fn default_spacing() -> Spacing {
    Spacing::Log
}

impl GridConfig {
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.points == 0 {
            return Err(Error::input("grid needs at least one point"));
        }
        if !(self.stop >= self.start) {
            return Err(Error::input("grid stop must be at least start"));
        }
        if self.spacing == Spacing::Log && !(self.start > 0.0) {
            return Err(Error::input("log grid needs a positive start"));
        }
        if self.points == 1 {
            return Ok(vec![self.start]);
        }
        let n = self.points;
        Ok((0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                match self.spacing {
                    Spacing::Log => self.start * (self.stop / self.start).powf(t),
                    Spacing::Linear => self.start + (self.stop - self.start) * t,
                }
            })
            .collect())
    }
}

/// Either one L value or a grid of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LSpec {
    Single(f64),
    Grid(GridConfig),
}

impl LSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            LSpec::Single(l) => {
                if !(*l > 0.0) || !l.is_finite() {
                    return Err(Error::input(format!("L must be positive, got {l}")));
                }
                Ok(vec![*l])
            }
            LSpec::Grid(g) => g.values(),
        }
    }
}

/// Hermitian model over C^m.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub m: usize,
    /// Curvature level for the projective kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Flat,
    Projective,
}

impl ModelConfig {
    pub fn build(&self) -> Result<HermitianModel> {
        match self.kind {
            ModelKind::Flat => {
                if self.level.is_some() {
                    return Err(Error::input("flat model takes no level"));
                }
                Ok(HermitianModel::flat(self.m))
            }
            ModelKind::Projective => {
                HermitianModel::projective(self.m, self.level.unwrap_or(1.0))
            }
        }
    }
}

/// One polynomial section as coefficient terms [multi-index, re, im].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionConfig {
    pub terms: Vec<(Vec<u32>, f64, f64)>,
}

impl SectionConfig {
    pub fn build(&self, m: usize) -> Result<HoloSection> {
        let terms: Vec<(Vec<u32>, Complex64)> = self
            .terms
            .iter()
            .map(|(idx, re, im)| (idx.clone(), Complex64::new(*re, *im)))
            .collect();
        HoloSection::poly(m, terms)
    }
}

/// Lattice family of sections with its flux quadratic form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub model: ModelConfig,
    pub basis: Vec<SectionConfig>,
    pub qform: Vec<Vec<f64>>,
}

impl FamilyConfig {
    pub fn build(&self) -> Result<SectionFamily> {
        let model = self.model.build()?;
        let basis = self
            .basis
            .iter()
            .map(|s| s.build(self.model.m))
            .collect::<Result<Vec<_>>>()?;
        let q = real_matrix(&self.qform, "family.qform")?;
        SectionFamily::new(basis, model, q)
    }
}

/// Complex symmetric coupling matrix, split into real and imaginary parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

/// Hessian ensemble: coupling data plus one of three covariance sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub h21: usize,
    /// h21 coupling matrices, each h21 x h21; empty means all zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coupling: Vec<CouplingConfig>,
    /// Direct SPD coordinate covariance (k x k, k = 2 h21).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    /// SPD quadratic form on the raw basis; the covariance is derived.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qform: Option<Vec<Vec<f64>>>,
}

impl EnsembleConfig {
    pub fn build(&self) -> Result<HessianEnsemble> {
        let f: Vec<DMatrix<Complex64>> = if self.coupling.is_empty() {
            (0..self.h21)
                .map(|_| DMatrix::zeros(self.h21, self.h21))
                .collect()
        } else {
            self.coupling
                .iter()
                .map(|cc| {
                    let re = real_matrix(&cc.re, "ensemble.coupling.re")?;
                    let im = real_matrix(&cc.im, "ensemble.coupling.im")?;
                    if re.shape() != im.shape() {
                        return Err(Error::input("coupling re/im shapes differ"));
                    }
                    Ok(DMatrix::from_fn(re.nrows(), re.ncols(), |i, j| {
                        Complex64::new(re[(i, j)], im[(i, j)])
                    }))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let y = YukawaData::new(self.h21, f)?;
        match (&self.covariance, &self.qform) {
            (Some(_), Some(_)) => Err(Error::input(
                "give either ensemble.covariance or ensemble.qform, not both",
            )),
            (Some(c), None) => {
                HessianEnsemble::from_covariance(&y, real_matrix(c, "ensemble.covariance")?)
            }
            (None, Some(q)) => {
                HessianEnsemble::from_qform(&y, real_matrix(q, "ensemble.qform")?)
            }
            (None, None) => HessianEnsemble::isotropic(&y),
        }
    }
}

/// Critical-point search box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    /// Center coordinates as (re, im) pairs; empty means the origin.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub center: Vec<(f64, f64)>,
    pub half_width: f64,
}

impl RegionConfig {
    pub fn build(&self, m: usize) -> Result<Region> {
        if self.center.is_empty() {
            return Region::origin_box(m, self.half_width);
        }
        if self.center.len() != m {
            return Err(Error::input(format!(
                "region center has {} coordinates, the model has {m}",
                self.center.len()
            )));
        }
        let center = self
            .center
            .iter()
            .map(|&(re, im)| Complex64::new(re, im))
            .collect();
        Region::centered_box(center, self.half_width)
    }
}

/// Newton solve parameters; defaults mirror SolveOptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub grid_density: f64,
    pub tol_crit: f64,
    pub tol_deg: f64,
    pub max_iter: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        let o = SolveOptions::default();
        SolveConfig {
            grid_density: o.grid_density,
            tol_crit: o.tol_crit,
            tol_deg: o.tol_deg,
            max_iter: o.max_iter,
        }
    }
}

impl SolveConfig {
    pub fn build(&self, seed: u64) -> SolveOptions {
        SolveOptions {
            grid_density: self.grid_density,
            tol_crit: self.tol_crit,
            tol_deg: self.tol_deg,
            max_iter: self.max_iter,
            seed,
        }
    }
}

/// Body-integral evaluation for the leading term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegralConfig {
    pub method: IntegralKind,
    pub rel_tol: f64,
    pub samples: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegralKind {
    Quadrature,
    MonteCarlo,
}

impl Default for IntegralConfig {
    fn default() -> Self {
        IntegralConfig {
            method: IntegralKind::Quadrature,
            rel_tol: 1e-9,
            samples: 1_000_000,
        }
    }
}

impl IntegralConfig {
    pub fn build(&self, seed: u64) -> IntegralMethod {
        match self.method {
            IntegralKind::Quadrature => IntegralMethod::Quadrature {
                rel_tol: self.rel_tol,
            },
            IntegralKind::MonteCarlo => IntegralMethod::MonteCarlo {
                samples: self.samples,
                seed,
            },
        }
    }
}

/// Lattice-scan experiment block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeScanConfig {
    pub body: BodyConfig,
    #[serde(default)]
    pub observable: ObservableConfig,
    pub l_grid: GridConfig,
    #[serde(default)]
    pub integral: IntegralConfig,
}

/// Vacuum census experiment block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VacuaCountConfig {
    pub family: FamilyConfig,
    pub l: LSpec,
    pub region: RegionConfig,
    #[serde(default)]
    pub solve: SolveConfig,
    /// Box bound for indefinite flux forms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<i64>,
    /// When set, also compare the census against the continuum density
    /// using this many Monte Carlo samples per L.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_samples: Option<u64>,
}

/// Two-form density comparison block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityCompareConfig {
    pub ensemble: EnsembleConfig,
    pub samples: u64,
}

/// Unitary-integral evaluation schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub eps: f64,
    pub eps_levels: usize,
    pub eps_prime: f64,
    pub eps_prime_levels: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            eps: 0.01,
            eps_levels: 3,
            eps_prime: 0.005,
            eps_prime_levels: 4,
        }
    }
}

/// Unitary-integral experiment block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IzhcEvalConfig {
    pub ensemble: EnsembleConfig,
    pub haar: u64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_denominator_samples")]
    pub denominator_samples: usize,
}

fn default_denominator_samples() -> usize {
    64
}

impl IzhcEvalConfig {
    pub fn build(&self, ens: &HessianEnsemble, seed: u64) -> Result<IzhcConfig> {
        IzhcConfig::scheduled(
            ens.m(),
            self.haar,
            seed,
            self.schedule.eps,
            self.schedule.eps_levels,
            self.schedule.eps_prime,
            self.schedule.eps_prime_levels,
        )
    }
}

/// Attractor-moment experiment block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BhMomentConfig {
    pub b3: usize,
    pub form: BhForm,
    pub method: BhMethodKind,
    #[serde(default = "default_bh_samples")]
    pub samples: u64,
    #[serde(default = "default_vol_wp")]
    pub vol_wp: f64,
    /// Accept the formal odd/small b3 edge cases.
    #[serde(default)]
    pub formal: bool,
    /// When set, also report the leading-order count at this L.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
}

fn default_bh_samples() -> u64 {
    1_000_000
}

fn default_vol_wp() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BhForm {
    Indicator,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BhMethodKind {
    ClosedForm,
    Quadrature,
    MonteCarlo,
}

impl BhMomentConfig {
    pub fn build(&self) -> Result<AttractorConfig> {
        let form = match self.form {
            BhForm::Indicator => AttractorForm::Indicator,
            BhForm::Gaussian => AttractorForm::Gaussian,
        };
        if self.formal {
            AttractorConfig::formal(self.b3, self.vol_wp, form)
        } else {
            AttractorConfig::new(self.b3, self.vol_wp, form)
        }
    }

    pub fn method(&self, seed: u64) -> BhMethod {
        match self.method {
            BhMethodKind::ClosedForm => BhMethod::ClosedForm,
            BhMethodKind::Quadrature => BhMethod::Quadrature,
            BhMethodKind::MonteCarlo => BhMethod::MonteCarlo {
                n: self.samples,
                seed,
            },
        }
    }
}

/// One experiment file: subcommand, master seed, outputs, one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub subcommand: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; 0 keeps the library default.
    #[serde(default)]
    pub workers: usize,
    pub out: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice_scan: Option<LatticeScanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vacua_count: Option<VacuaCountConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density_compare: Option<DensityCompareConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub izhc_eval: Option<IzhcEvalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bh_moment: Option<BhMomentConfig>,
}

fn default_seed() -> u64 {
    1
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::input(format!("config schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The block must match the subcommand and be the only one present.
    pub fn validate(&self) -> Result<()> {
        let blocks = [
            ("lattice-scan", self.lattice_scan.is_some()),
            ("vacua-count", self.vacua_count.is_some()),
            ("density-compare", self.density_compare.is_some()),
            ("izhc-eval", self.izhc_eval.is_some()),
            ("bh-moment", self.bh_moment.is_some()),
        ];
        if !blocks.iter().any(|(name, _)| *name == self.subcommand) {
            return Err(Error::input(format!(
                "unknown subcommand {:?}; expected one of lattice-scan, vacua-count, \
                 density-compare, izhc-eval, bh-moment",
                self.subcommand
            )));
        }
        for (name, present) in blocks {
            let wanted = name == self.subcommand;
            if wanted && !present {
                return Err(Error::input(format!(
                    "subcommand {name} needs a [{}] block",
                    name.replace('-', "_")
                )));
            }
            if !wanted && present {
                return Err(Error::input(format!(
                    "block [{}] does not match subcommand {}",
                    name.replace('-', "_"),
                    self.subcommand
                )));
            }
        }
        Ok(())
    }
}
