//! Experiment execution: one function per subcommand, each returning the
//! list of files it wrote. Build errors (bad configuration) and run errors
//! (module failures) are kept apart so the process can exit 2 vs 1.

use crate::manifest::{config_hash, Manifest};
use crate::table::{f, Table};
use crate::CliError;
use fluxstat_core::blackhole::{bh_count_estimate, bh_density, BhMethod};
use fluxstat_core::config::*;
use fluxstat_core::critsolve::{count_vacua, count_vacua_bounded, unit_shell_integral};
use fluxstat_core::density::{pf_density_gaussian, pf_density_indicator};
use fluxstat_core::izhc::{denominator_report, izhc_density};
use std::path::{Path, PathBuf};

const INDICATOR_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const DENOM_STREAM: u64 = 0xd1b5_4a32_d192_ed03;

fn cfg_err(e: fluxstat_core::error::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn mod_err(e: fluxstat_core::error::Error) -> CliError {
    CliError::Module(e.to_string())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

/// Run one experiment file end to end: execute the block, write the CSVs,
/// then write the manifest referencing every emitted file. A module error
/// still produces a manifest, with the error payload inside.
pub fn run_experiment(cfg: &ExperimentConfig, config_text: &str) -> Result<(), CliError> {
    cfg.validate().map_err(cfg_err)?;
    let out = PathBuf::from(&cfg.out);
    let result = match cfg.subcommand.as_str() {
        "lattice-scan" => lattice_scan(cfg.lattice_scan.as_ref().unwrap(), cfg.seed, &out),
        "vacua-count" => vacua_count(cfg.vacua_count.as_ref().unwrap(), cfg.seed, &out),
        "density-compare" => {
            density_compare(cfg.density_compare.as_ref().unwrap(), cfg.seed, &out)
        }
        "izhc-eval" => izhc_eval(cfg.izhc_eval.as_ref().unwrap(), cfg.seed, &out),
        "bh-moment" => bh_moment(cfg.bh_moment.as_ref().unwrap(), cfg.seed, &out),
        other => Err(CliError::Config(format!("unknown subcommand {other:?}"))),
    };
    let mut manifest = Manifest {
        config_sha256: config_hash(config_text),
        seed: cfg.seed,
        outputs: Vec::new(),
        error: None,
    };
    match result {
        Ok(files) => {
            manifest.outputs = files;
            manifest.write(&out)?;
            Ok(())
        }
        Err(CliError::Config(e)) => Err(CliError::Config(e)),
        Err(CliError::Module(e)) => {
            manifest.error = Some(e.clone());
            manifest.write(&out)?;
            Err(CliError::Module(e))
        }
    }
}

fn lattice_scan(
    ls: &LatticeScanConfig,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let body = ls.body.build().map_err(cfg_err)?;
    let obs = ls.observable.build(body.dim()).map_err(cfg_err)?;
    let grid = ls.l_grid.values().map_err(cfg_err)?;
    let method = ls.integral.build(seed);

    let coeff = body.leading_coefficient(&obs, method).map_err(mod_err)?;
    let half_n = body.dim() as f64 / 2.0;
    let mut csv = Table::new(&["L", "count", "sum", "leading_term", "residual"]);
    for &l in &grid {
        let scan = body.radial_sum(&obs, l).map_err(mod_err)?;
        let leading = coeff.value * l.powf(half_n);
        csv.push(vec![
            f(l),
            scan.count.to_string(),
            f(scan.sum),
            f(leading),
            f(scan.sum - leading),
        ]);
    }
    csv.write(out)?;
    Ok(vec![out.to_path_buf()])
}

fn vacua_count(vc: &VacuaCountConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let family = vc.family.build().map_err(cfg_err)?;
    let region = vc.region.build(family.m()).map_err(cfg_err)?;
    let opts = vc.solve.build(seed);
    let ls = vc.l.values().map_err(cfg_err)?;
    let psi = |_g: &[f64], _p: &fluxstat_core::critsolve::CriticalPoint| 1.0;

    let n = family.n();
    let m = family.m();
    let mut header: Vec<String> = vec!["L".into()];
    header.extend((1..=n).map(|i| format!("g{i}")));
    header.extend((1..=m).map(|i| format!("re_z{i}")));
    header.extend((1..=m).map(|i| format!("im_z{i}")));
    header.push("absdet".into());
    header.push("degenerate".into());
    let mut csv = Table {
        header,
        rows: Vec::new(),
    };
    let mut totals: Vec<(f64, bool)> = Vec::with_capacity(ls.len());
    for &l in &ls {
        let census = match vc.bound {
            Some(b) => count_vacua_bounded(&family, l, &region, psi, &opts, b),
            None => count_vacua(&family, l, &region, psi, &opts),
        }
        .map_err(mod_err)?;
        for (g, point) in &census.vacua {
            let mut row = vec![f(l)];
            row.extend(g.iter().map(|v| v.to_string()));
            row.extend(point.z.iter().map(|z| f(z.re)));
            row.extend(point.z.iter().map(|z| f(z.im)));
            row.push(f(point.absdet));
            row.push(point.degenerate.to_string());
            csv.push(row);
        }
        totals.push((census.total_psi, census.certified));
    }
    csv.write(out)?;
    let mut files = vec![out.to_path_buf()];

    if let Some(samples) = vc.compare_samples {
        let integral =
            unit_shell_integral(&family, &region, psi, &opts, samples, seed).map_err(mod_err)?;
        let half_n = n as f64 / 2.0;
        let mut ratio = Table::new(&["L", "count", "prediction", "ratio", "certified"]);
        for (&l, &(count, certified)) in ls.iter().zip(&totals) {
            let prediction = l.powf(half_n) * integral;
            ratio.push(vec![
                f(l),
                f(count),
                f(prediction),
                f(count / prediction),
                certified.to_string(),
            ]);
        }
        let path = sibling(out, "ratio");
        ratio.write(&path)?;
        files.push(path);
    }
    Ok(files)
}

fn density_compare(
    dc: &DensityCompareConfig,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let ens = dc.ensemble.build().map_err(cfg_err)?;
    let g = pf_density_gaussian(&ens, dc.samples, seed).map_err(mod_err)?;
    let ind =
        pf_density_indicator(&ens, dc.samples, seed ^ INDICATOR_STREAM).map_err(mod_err)?;
    let mut csv = Table::new(&["form", "value", "stderr", "samples"]);
    csv.push(vec![
        "gaussian".into(),
        f(g.value),
        f(g.stderr),
        g.samples.to_string(),
    ]);
    csv.push(vec![
        "indicator".into(),
        f(ind.value),
        f(ind.stderr),
        ind.samples.to_string(),
    ]);
    csv.write(out)?;
    Ok(vec![out.to_path_buf()])
}

fn izhc_eval(iz: &IzhcEvalConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let ens = iz.ensemble.build().map_err(cfg_err)?;
    let icfg = iz.build(&ens, seed).map_err(cfg_err)?;
    let res = izhc_density(&ens, &icfg).map_err(mod_err)?;
    let rep =
        denominator_report(&ens, iz.denominator_samples, seed ^ DENOM_STREAM).map_err(mod_err)?;

    let mut main = Table::new(&["m", "haar", "value", "value_imag", "haar_stderr"]);
    main.push(vec![
        ens.m().to_string(),
        icfg.n_haar.to_string(),
        f(res.value),
        f(res.value_imag),
        f(res.haar_stderr),
    ]);
    main.write(out)?;

    let mut trace = Table::new(&["eps", "eps_prime", "value"]);
    for (e, ep, v) in &res.regularization_trace {
        trace.push(vec![f(*e), f(*ep), f(*v)]);
    }
    let trace_path = sibling(out, "trace");
    trace.write(&trace_path)?;

    let mut denom = Table::new(&[
        "samples",
        "max_rel_dev_factored",
        "mean_rel_dev_factored",
        "max_rel_dev_displayed",
        "mean_rel_dev_displayed",
    ]);
    denom.push(vec![
        rep.samples.to_string(),
        f(rep.max_rel_dev_factored),
        f(rep.mean_rel_dev_factored),
        f(rep.max_rel_dev_displayed),
        f(rep.mean_rel_dev_displayed),
    ]);
    let denom_path = sibling(out, "denominator");
    denom.write(&denom_path)?;

    Ok(vec![out.to_path_buf(), trace_path, denom_path])
}

fn bh_moment(bh: &BhMomentConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let att = bh.build().map_err(cfg_err)?;
    let method = bh.method(seed);
    let d = bh_density(&att, method).map_err(mod_err)?;
    let method_name = match method {
        BhMethod::ClosedForm => "closed-form",
        BhMethod::Quadrature => "quadrature",
        BhMethod::MonteCarlo { .. } => "monte-carlo",
    };
    let form_name = match bh.form {
        BhForm::Indicator => "indicator",
        BhForm::Gaussian => "gaussian",
    };
    let mut header = vec!["b3", "form", "method", "value", "stderr"];
    if bh.l.is_some() {
        header.extend([
            "L",
            "leading_count",
            "log10_leading_count",
            "density_coefficient",
        ]);
    }
    let mut csv = Table::new(&header);
    let mut row = vec![
        bh.b3.to_string(),
        form_name.into(),
        method_name.into(),
        f(d.value),
        f(d.stderr),
    ];
    if let Some(l) = bh.l {
        let count = bh_count_estimate(&att, l).map_err(mod_err)?;
        row.extend([
            f(l),
            f(count.leading_count),
            f(count.log10_leading_count),
            f(count.density_coefficient),
        ]);
    }
    csv.push(row);
    csv.write(out)?;
    Ok(vec![out.to_path_buf()])
}

/// Reduce a result CSV to plain plot columns. The input must have been
/// produced by a run; missing columns or an empty table are input errors.
pub fn plot_data(csv_path: &Path, kind: &str, out: &Path) -> Result<(), CliError> {
    let table = Table::read(csv_path)?;
    if table.rows.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no data rows",
            csv_path.display()
        )));
    }
    let plot = match kind.to_ascii_lowercase().as_str() {
        "loglog-residual" => {
            let cl = table.column("L")?;
            let cr = table.column("residual")?;
            let mut t = Table::new(&["log10_L", "log10_abs_residual"]);
            for row in &table.rows {
                let l = table.float(row, cl)?;
                let r = table.float(row, cr)?.abs();
                if r > 0.0 && l > 0.0 {
                    t.push(vec![f(l.log10()), f(r.log10())]);
                }
            }
            t
        }
        "ratio-vs-l" => {
            let cl = table.column("L")?;
            let mut t = Table::new(&["L", "ratio"]);
            if let Ok(cr) = table.column("ratio") {
                for row in &table.rows {
                    t.push(vec![row[cl].clone(), row[cr].clone()]);
                }
            } else {
                let cs = table.column("sum")?;
                let cle = table.column("leading_term")?;
                for row in &table.rows {
                    let ratio = table.float(row, cs)? / table.float(row, cle)?;
                    t.push(vec![row[cl].clone(), f(ratio)]);
                }
            }
            t
        }
        "trace" => {
            let cv = table.column("value")?;
            if let Ok(cs) = table.column("stderr") {
                let mut t = Table::new(&["index", "value", "band_lo", "band_hi"]);
                for (i, row) in table.rows.iter().enumerate() {
                    let v = table.float(row, cv)?;
                    let s = table.float(row, cs)?;
                    t.push(vec![i.to_string(), f(v), f(v - s), f(v + s)]);
                }
                t
            } else {
                let mut t = Table::new(&["index", "value"]);
                for (i, row) in table.rows.iter().enumerate() {
                    t.push(vec![i.to_string(), row[cv].clone()]);
                }
                t
            }
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown plot kind {other:?}; expected loglog-residual, ratio-vs-L, or trace"
            )))
        }
    };
    plot.write(out)?;
    let manifest = Manifest {
        config_sha256: config_hash(&format!("plot-data:{kind}:{}", csv_path.display())),
        seed: 0,
        outputs: vec![out.to_path_buf()],
        error: None,
    };
    manifest.write(out)?;
    Ok(())
}
