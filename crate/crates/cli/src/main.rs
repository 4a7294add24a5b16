//! Experiment driver: every subcommand assembles the same experiment
//! structure an experiment file would describe, runs it, and writes CSVs
//! plus a manifest. Exit codes: 0 ok, 1 module error, 2 config error.

mod exec;
mod manifest;
mod table;

use clap::{Parser, Subcommand};
use fluxstat_core::config::*;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Module(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Module(e) => write!(f, "module error: {e}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "fluxstat",
    version,
    about = "Lattice sums, critical-point censuses, and density cross-checks"
)]
struct Cli {
    /// Worker threads (0 keeps the library default).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Radial lattice sums over a star body with the leading term split off.
    LatticeScan {
        /// TOML body description.
        #[arg(long)]
        body: PathBuf,
        /// TOML observable description (defaults to f = 1).
        #[arg(long)]
        observable: Option<PathBuf>,
        /// start:stop:points[:log|linear]
        #[arg(long = "L-grid")]
        l_grid: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Census of critical points over the flux shell 0 < Q[G] <= L.
    VacuaCount {
        /// TOML family description (basis, qform, optionally model).
        #[arg(long)]
        family: PathBuf,
        /// TOML model description; overrides the family file's model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Single value or start:stop:points[:log|linear].
        #[arg(long = "L")]
        l: String,
        /// Half-width of the origin-centered search box.
        #[arg(long)]
        region: f64,
        /// Box bound on flux components (needed for indefinite forms).
        #[arg(long)]
        bound: Option<i64>,
        /// Also compare against the continuum density with this many samples.
        #[arg(long)]
        compare_samples: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gaussian vs indicator critical-point density estimates.
    DensityCompare {
        /// TOML ensemble description.
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        samples: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unitary-integral density evaluation with regularization trace.
    IzhcEval {
        /// TOML ensemble description.
        #[arg(long)]
        ensemble: PathBuf,
        /// Expected Hessian dimension; checked against the ensemble.
        #[arg(long)]
        m: Option<usize>,
        /// eps,eps_levels,eps_prime,eps_prime_levels (default standard).
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        haar: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attractor-point radial moment.
    BhMoment {
        #[arg(long)]
        b3: usize,
        /// indicator | gaussian
        #[arg(long)]
        form: String,
        /// closed-form | quadrature | monte-carlo
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        #[arg(long, default_value_t = 1.0)]
        vol_wp: f64,
        /// Accept formal odd/small b3 values.
        #[arg(long, default_value_t = false)]
        formal: bool,
        /// Also report the leading-order count at this L.
        #[arg(long = "L")]
        l: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reduce a result CSV to plain plot columns.
    PlotData {
        #[arg(long)]
        csv: PathBuf,
        /// loglog-residual | ratio-vs-L | trace
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_grid(spec: &str) -> Result<GridConfig, CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() < 3 || parts.len() > 4 {
        return Err(CliError::Config(format!(
            "grid spec {spec:?} must be start:stop:points[:log|linear]"
        )));
    }
    let bad = |what: &str| CliError::Config(format!("grid spec {spec:?}: bad {what}"));
    let start: f64 = parts[0].parse().map_err(|_| bad("start"))?;
    let stop: f64 = parts[1].parse().map_err(|_| bad("stop"))?;
    let points: usize = parts[2].parse().map_err(|_| bad("point count"))?;
    let spacing = match parts.get(3).copied() {
        None | Some("log") => Spacing::Log,
        Some("linear") | Some("lin") => Spacing::Linear,
        Some(other) => {
            return Err(CliError::Config(format!(
                "grid spacing {other:?} must be log or linear"
            )))
        }
    };
    Ok(GridConfig {
        start,
        stop,
        points,
        spacing,
    })
}

fn parse_l_spec(spec: &str) -> Result<LSpec, CliError> {
    if spec.contains(':') {
        Ok(LSpec::Grid(parse_grid(spec)?))
    } else {
        let v: f64 = spec
            .parse()
            .map_err(|_| CliError::Config(format!("bad L value {spec:?}")))?;
        Ok(LSpec::Single(v))
    }
}

fn parse_schedule(spec: &str) -> Result<ScheduleConfig, CliError> {
    if spec == "standard" {
        return Ok(ScheduleConfig::default());
    }
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 4 {
        return Err(CliError::Config(format!(
            "schedule {spec:?} must be eps,eps_levels,eps_prime,eps_prime_levels or standard"
        )));
    }
    let bad = |what: &str| CliError::Config(format!("schedule {spec:?}: bad {what}"));
    Ok(ScheduleConfig {
        eps: parts[0].parse().map_err(|_| bad("eps"))?,
        eps_levels: parts[1].parse().map_err(|_| bad("eps levels"))?,
        eps_prime: parts[2].parse().map_err(|_| bad("eps_prime"))?,
        eps_prime_levels: parts[3].parse().map_err(|_| bad("eps_prime levels"))?,
    })
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &PathBuf, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{what} {}: {e}", path.display())))
}

/// Family file with the model block optional so it can come from --model.
fn read_family(
    family_path: &PathBuf,
    model_path: Option<&PathBuf>,
) -> Result<FamilyConfig, CliError> {
    let text = std::fs::read_to_string(family_path)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", family_path.display())))?;
    let mut table: toml::Table = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("family {}: {e}", family_path.display())))?;
    if let Some(mp) = model_path {
        let model: ModelConfig = read_toml(mp, "model")?;
        let model_value =
            toml::Value::try_from(&model).map_err(|e| CliError::Config(e.to_string()))?;
        table.insert("model".into(), model_value);
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(format!("family {}: {e}", family_path.display())))
}

fn assemble(cli_cmd: Cmd) -> Result<Option<(ExperimentConfig, String)>, CliError> {
    let cfg = match cli_cmd {
        Cmd::Run { config } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", config.display())))?;
            let cfg = ExperimentConfig::parse(&text)
                .map_err(|e| CliError::Config(e.to_string()))?;
            return Ok(Some((cfg, text)));
        }
        Cmd::LatticeScan {
            body,
            observable,
            l_grid,
            seed,
            out,
        } => {
            let body: BodyConfig = read_toml(&body, "body")?;
            let observable: ObservableConfig = match observable {
                Some(p) => read_toml(&p, "observable")?,
                None => ObservableConfig::default(),
            };
            ExperimentConfig {
                subcommand: "lattice-scan".into(),
                seed,
                workers: 0,
                out: out.display().to_string(),
                lattice_scan: Some(LatticeScanConfig {
                    body,
                    observable,
                    l_grid: parse_grid(&l_grid)?,
                    integral: IntegralConfig::default(),
                }),
                vacua_count: None,
                density_compare: None,
                izhc_eval: None,
                bh_moment: None,
            }
        }
        Cmd::VacuaCount {
            family,
            model,
            l,
            region,
            bound,
            compare_samples,
            seed,
            out,
        } => ExperimentConfig {
            subcommand: "vacua-count".into(),
            seed,
            workers: 0,
            out: out.display().to_string(),
            lattice_scan: None,
            vacua_count: Some(VacuaCountConfig {
                family: read_family(&family, model.as_ref())?,
                l: parse_l_spec(&l)?,
                region: RegionConfig {
                    center: vec![],
                    half_width: region,
                },
                solve: SolveConfig::default(),
                bound,
                compare_samples,
            }),
            density_compare: None,
            izhc_eval: None,
            bh_moment: None,
        },
        Cmd::DensityCompare {
            ensemble,
            samples,
            seed,
            out,
        } => ExperimentConfig {
            subcommand: "density-compare".into(),
            seed,
            workers: 0,
            out: out.display().to_string(),
            lattice_scan: None,
            vacua_count: None,
            density_compare: Some(DensityCompareConfig {
                ensemble: read_toml(&ensemble, "ensemble")?,
                samples,
            }),
            izhc_eval: None,
            bh_moment: None,
        },
        Cmd::IzhcEval {
            ensemble,
            m,
            schedule,
            haar,
            seed,
            out,
        } => {
            let ensemble: EnsembleConfig = read_toml(&ensemble, "ensemble")?;
            if let Some(m) = m {
                if m != ensemble.h21 + 1 {
                    return Err(CliError::Config(format!(
                        "--m {m} disagrees with the ensemble (h21 = {} gives m = {})",
                        ensemble.h21,
                        ensemble.h21 + 1
                    )));
                }
            }
            ExperimentConfig {
                subcommand: "izhc-eval".into(),
                seed,
                workers: 0,
                out: out.display().to_string(),
                lattice_scan: None,
                vacua_count: None,
                density_compare: None,
                izhc_eval: Some(IzhcEvalConfig {
                    ensemble,
                    haar,
                    schedule: match schedule {
                        Some(s) => parse_schedule(&s)?,
                        None => ScheduleConfig::default(),
                    },
                    denominator_samples: 64,
                }),
                bh_moment: None,
            }
        }
        Cmd::BhMoment {
            b3,
            form,
            method,
            samples,
            vol_wp,
            formal,
            l,
            seed,
            out,
        } => {
            let form = match form.as_str() {
                "indicator" => BhForm::Indicator,
                "gaussian" => BhForm::Gaussian,
                other => {
                    return Err(CliError::Config(format!(
                        "form {other:?} must be indicator or gaussian"
                    )))
                }
            };
            let method = match method.as_str() {
                "closed-form" => BhMethodKind::ClosedForm,
                "quadrature" => BhMethodKind::Quadrature,
                "monte-carlo" => BhMethodKind::MonteCarlo,
                other => {
                    return Err(CliError::Config(format!(
                        "method {other:?} must be closed-form, quadrature, or monte-carlo"
                    )))
                }
            };
            ExperimentConfig {
                subcommand: "bh-moment".into(),
                seed,
                workers: 0,
                out: out.display().to_string(),
                lattice_scan: None,
                vacua_count: None,
                density_compare: None,
                izhc_eval: None,
                bh_moment: Some(BhMomentConfig {
                    b3,
                    form,
                    method,
                    samples,
                    vol_wp,
                    formal,
                    l,
                }),
            }
        }
        Cmd::PlotData { .. } => return Ok(None),
    };
    let text = toml::to_string(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Some((cfg, text)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global();
    }
    let outcome = match cli.cmd {
        Cmd::PlotData { csv, kind, out } => exec::plot_data(&csv, &kind, &out),
        other => match assemble(other) {
            Ok(Some((cfg, text))) => {
                let workers = cfg.workers;
                if workers > 0 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(workers)
                        .build_global();
                }
                exec::run_experiment(&cfg, &text)
            }
            Ok(None) => unreachable!("plot-data handled above"),
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Module(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
