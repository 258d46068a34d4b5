use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kronfit::data::{canonical_config, validate as validate_dataset, write_canonical_csv, write_factor2_distances};
use kronfit::fit::{fit_ml_observed, ols, FitOptions};
use kronfit::inference::{backward_select, structure_grid};
use kronfit::simulate::sample_dataset;
use kronfit::surface::{correlation_surface, distance_axis, empirical_surface};
use kronfit::{CorrFamily, CorrSpec, DistanceConstants};
use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report::{BackwardReport, FitReport, Format, Render, SelectReport, SurfaceReport, ValidateReport};
use crate::{FitArgs, SelectArgs, SimulateArgs, SurfaceArgs, ValidateArgs};

pub enum Outcome {
    Success,
    NotConverged,
}

const DEFAULT_ALPHA: f64 = 0.20;
const DEFAULT_GRID: [CorrFamily; 3] = [CorrFamily::Lear, CorrFamily::De, CorrFamily::Ar1];

fn emit<R: Render>(report: &R, format: Format, out: Option<&Path>) -> Result<(), CliError> {
    let text = report.render(format);
    match out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display())))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn parse_spec(flag: Option<&String>, configured: Option<&String>) -> Result<CorrSpec, CliError> {
    let text = flag.or(configured).map(String::as_str).unwrap_or("lear");
    Ok(CorrSpec::from_str(text)?)
}

fn parse_families(flag: &[String], configured: &[String]) -> Result<Vec<CorrFamily>, CliError> {
    let src = if flag.is_empty() { configured } else { flag };
    if src.is_empty() {
        return Ok(DEFAULT_GRID.to_vec());
    }
    src.iter().map(|s| CorrFamily::from_str(s).map_err(CliError::from)).collect()
}

pub fn fit(a: &FitArgs, format: Format) -> Result<Outcome, CliError> {
    let cfg = RunConfig::load(a.data.config.as_deref())?;
    let spec1 = parse_spec(a.factor1.as_ref(), cfg.factor1.as_ref())?;
    let spec2 = parse_spec(a.factor2.as_ref(), cfg.factor2.as_ref())?;
    let ds = cfg.load_dataset(a.data.data.as_deref())?;
    let mut trace_sink = match &a.trace {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| CliError::Input(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => None,
    };
    let mut trace_error = None;
    let mut observer = |entry: &kronfit::fit::TraceEntry| {
        if let Some(w) = trace_sink.as_mut() {
            let line = serde_json::to_string(entry).expect("trace rows serialize");
            if let Err(e) = writeln!(w, "{line}") {
                trace_error.get_or_insert(e);
            }
        }
    };
    let fit = fit_ml_observed(&ds, &spec1, &spec2, &cfg.fit, &mut observer)?;
    if let Some(mut w) = trace_sink {
        w.flush()?;
    }
    if let Some(e) = trace_error {
        return Err(e.into());
    }
    for w in &fit.warnings {
        log::warn!("{w}");
    }
    emit(&FitReport::new(&ds, &fit, &cfg.fit), format, a.out.as_deref())?;
    Ok(if fit.converged { Outcome::Success } else { Outcome::NotConverged })
}

pub fn select(a: &SelectArgs, format: Format) -> Result<Outcome, CliError> {
    let cfg = RunConfig::load(a.data.config.as_deref())?;
    let fam1 = parse_families(&a.families1, &cfg.families1)?;
    let fam2 = parse_families(&a.families2, &cfg.families2)?;
    let alpha = a.alpha.or(cfg.alpha).unwrap_or(DEFAULT_ALPHA);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CliError::Input(format!("--alpha must lie in [0, 1], got {alpha}")));
    }
    let ds = cfg.load_dataset(a.data.data.as_deref())?;
    let grid = structure_grid(&ds, &fam1, &fam2, &cfg.fit)?;
    for c in grid.cells.iter().filter(|c| c.error.is_some() || !c.converged) {
        log::warn!(
            "{} x {}: {}",
            c.family1,
            c.family2,
            c.error.as_deref().unwrap_or("did not converge")
        );
    }
    let backward = match (a.backward || cfg.backward, grid.best) {
        (true, Some((f1, f2))) => {
            let terms: Vec<String> = ds.terms.iter().map(|t| t.name.clone()).collect();
            let s1 = CorrSpec { family: f1, params: vec![] };
            let s2 = CorrSpec { family: f2, params: vec![] };
            let sel = backward_select(&ds, &terms, &s1, &s2, alpha, &cfg.fit)?;
            Some(BackwardReport::new(&ds, &sel, alpha, &cfg.fit))
        }
        _ => None,
    };
    emit(&SelectReport::new(&grid, backward), format, a.out.as_deref())?;
    Ok(if grid.best.is_some() { Outcome::Success } else { Outcome::NotConverged })
}

/// Structures and constants recorded in a JSON fit report.
fn specs_from_fit_report(path: &Path) -> Result<[(CorrSpec, DistanceConstants); 2], CliError> {
    let bad = |m: &str| CliError::Input(format!("fit report {}: {m}", path.display()));
    let file = File::open(path).map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    let v: Value = serde_json::from_reader(file).map_err(|e| bad(&e.to_string()))?;
    let factors = v["factors"].as_array().ok_or_else(|| bad("missing \"factors\""))?;
    let params = v["correlation_parameters"].as_array().ok_or_else(|| bad("missing \"correlation_parameters\""))?;
    let mut out = Vec::new();
    for k in 1..=2u64 {
        let f = factors
            .iter()
            .find(|f| f["factor"].as_u64() == Some(k))
            .ok_or_else(|| bad(&format!("missing factor {k}")))?;
        let family = CorrFamily::from_str(f["family"].as_str().ok_or_else(|| bad("family is not a string"))?)?;
        let p: Vec<f64> = params
            .iter()
            .filter(|p| p["factor"].as_u64() == Some(k))
            .map(|p| p["estimate"].as_f64().ok_or_else(|| bad("non-numeric estimate")))
            .collect::<Result<_, _>>()?;
        let num = |key: &str| f[key].as_f64().ok_or_else(|| bad(&format!("factor {k} lacks {key}")));
        out.push((CorrSpec::new(family, p)?, DistanceConstants::new(num("d_min")?, num("d_max")?)?));
    }
    let second = out.pop().expect("two factors");
    let first = out.pop().expect("two factors");
    Ok([first, second])
}

fn constants_flag(v: &[f64], factor: usize) -> Result<DistanceConstants, CliError> {
    match v {
        [lo, hi] => Ok(DistanceConstants::new(*lo, *hi)?),
        _ => Err(CliError::Input(format!(
            "factor {factor} distance constants unknown: give --data, --fit or --constants{factor} d_min,d_max"
        ))),
    }
}

pub fn surface(a: &SurfaceArgs, format: Format) -> Result<Outcome, CliError> {
    let cfg = RunConfig::load(a.data.config.as_deref())?;
    let has_data = a.data.data.is_some() || cfg.data.is_some();
    let ds = if has_data { Some(cfg.load_dataset(a.data.data.as_deref())?) } else { None };
    let saved = a.fit.as_deref().map(specs_from_fit_report).transpose()?;

    let pick = |factor: usize, flag: Option<&String>, conf: Option<&String>, consts: &[f64]| -> Result<(CorrSpec, DistanceConstants), CliError> {
        let from_fit = saved.as_ref().map(|s| s[factor - 1].clone());
        let spec = match flag.or(conf) {
            Some(t) => CorrSpec::from_str(t)?,
            None => from_fit
                .as_ref()
                .map(|s| s.0.clone())
                .ok_or_else(|| CliError::Input(format!("--factor{factor} or --fit is required")))?,
        };
        if spec.params.len() != spec.family.n_params() {
            return Err(CliError::Input(format!("--factor{factor} needs {} parameter(s)", spec.family.n_params())));
        }
        let c = match (&ds, &from_fit, consts.is_empty()) {
            (_, _, false) => constants_flag(consts, factor)?,
            (Some(d), _, _) => {
                if factor == 1 {
                    d.constants1
                } else {
                    d.constants2
                }
            }
            (None, Some(s), _) => s.1,
            (None, None, _) => constants_flag(consts, factor)?,
        };
        let mut spec = spec;
        if a.scaled && spec.family == CorrFamily::Lear {
            spec.params[1] *= c.span();
        }
        spec.validate()?;
        Ok((spec, c))
    };
    let (spec1, c1) = pick(1, a.factor1.as_ref(), cfg.factor1.as_ref(), &a.constants1)?;
    let (spec2, c2) = pick(2, a.factor2.as_ref(), cfg.factor2.as_ref(), &a.constants2)?;
    let grid = correlation_surface(
        &spec1,
        &c1,
        &spec2,
        &c2,
        &distance_axis(&c1, a.steps)?,
        &distance_axis(&c2, a.steps)?,
    )?;
    let empirical = if a.empirical {
        let d = ds.as_ref().ok_or_else(|| CliError::Input("--empirical needs a dataset".into()))?;
        let (w1, w2) = match a.bins.as_slice() {
            [w1, w2] => (*w1, *w2),
            _ => return Err(CliError::Input("--bins takes two widths".into())),
        };
        Some(empirical_surface(d, &ols(d)?, w1, w2)?)
    } else {
        None
    };
    emit(&SurfaceReport::new(&spec1, &spec2, c1, c2, &grid, empirical), format, a.out.as_deref())?;
    Ok(Outcome::Success)
}

#[derive(Debug, Serialize)]
struct Truth {
    seed: u64,
    covariate_names: Vec<String>,
    beta_true: Vec<f64>,
    sigma2_true: f64,
    spec1_true: CorrSpec,
    spec2_true: CorrSpec,
    scaled_decay1: Option<f64>,
    scaled_decay2: Option<f64>,
    design: kronfit::simulate::SimDesign,
}

#[derive(Debug, Serialize)]
struct SimulateReport {
    seed: u64,
    n_subjects: usize,
    n: usize,
    q: usize,
    files: Vec<String>,
}

impl Render for SimulateReport {
    fn text(&self) -> String {
        format!(
            "Simulated {} subjects, {} observations, {} design columns (seed {})\nWrote {}\n",
            self.n_subjects,
            self.n,
            self.q,
            self.seed,
            self.files.join(", ")
        )
    }

    fn csv(&self) -> String {
        let mut s = String::from("seed,n_subjects,n,q,files\n");
        s.push_str(&format!("{},{},{},{},{}\n", self.seed, self.n_subjects, self.n, self.q, self.files.join(";")));
        s
    }
}

fn write_file(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>) -> Result<(), CliError> {
    let path: PathBuf = dir.join(name);
    let file = File::create(&path).map_err(|e| CliError::Input(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn simulate(a: &SimulateArgs, format: Format) -> Result<Outcome, CliError> {
    let cfg = RunConfig::load(Some(&a.config))?;
    let mut design = cfg.simulate.clone().ok_or_else(|| CliError::Input("config has no \"simulate\" design".into()))?;
    if let Some(seed) = a.seed {
        design.seed = seed;
    }
    let ds = sample_dataset(&design)?;
    fs::create_dir_all(&a.out)?;
    write_file(&a.out, "data.csv", |w| Ok(write_canonical_csv(&ds, w)?))?;
    write_file(&a.out, "distances.csv", |w| Ok(write_factor2_distances(&ds.factor2, w)?))?;
    let scaled = |s: &CorrSpec, c: &DistanceConstants| (s.family == CorrFamily::Lear).then(|| s.params[1] / c.span());
    let truth = Truth {
        seed: design.seed,
        covariate_names: ds.covariate_names.clone(),
        beta_true: design.beta_true.clone(),
        sigma2_true: design.sigma2_true,
        spec1_true: design.spec1_true.clone(),
        spec2_true: design.spec2_true.clone(),
        scaled_decay1: scaled(&design.spec1_true, &ds.constants1),
        scaled_decay2: scaled(&design.spec2_true, &ds.constants2),
        design: design.clone(),
    };
    write_file(&a.out, "truth.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &truth).map_err(|e| CliError::Input(e.to_string()))?;
        Ok(writeln!(w)?)
    })?;
    let run = RunConfig {
        data: Some("data.csv".into()),
        factor2_distances: Some("distances.csv".into()),
        ingest: Some(canonical_config(&ds)),
        fit: FitOptions::default(),
        factor1: Some(design.spec1_true.family.to_string()),
        factor2: Some(design.spec2_true.family.to_string()),
        ..RunConfig::default()
    };
    write_file(&a.out, "config.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &run).map_err(|e| CliError::Input(e.to_string()))?;
        Ok(writeln!(w)?)
    })?;
    let report = SimulateReport {
        seed: design.seed,
        n_subjects: ds.n_subjects(),
        n: ds.n,
        q: ds.q,
        files: ["data.csv", "distances.csv", "truth.json", "config.json"].map(String::from).to_vec(),
    };
    emit(&report, format, None)?;
    Ok(Outcome::Success)
}

pub fn validate(a: &ValidateArgs, format: Format) -> Result<Outcome, CliError> {
    let cfg = RunConfig::load(a.data.config.as_deref())?;
    let ds = cfg.load_dataset(a.data.data.as_deref())?;
    let report = validate_dataset(&ds);
    for d in report.warnings() {
        log::warn!("{}: {}", d.code, d.message);
    }
    emit(&ValidateReport(report), format, a.out.as_deref())?;
    Ok(Outcome::Success)
}
