//! Report structures and their text, CSV and JSON renderings. Every format
//! renders the same struct; text rounds to 4 decimals, CSV and JSON keep full
//! precision.

use std::fmt::Write as _;

use kronfit::data::ValidationReport;
use kronfit::fit::{negative_variance_diagnostic, FitOptions, FitResult, TraceEntry, VarianceReport};
use kronfit::inference::{selection_contrast, wald_f_test, BackwardSelection, GridCell, RemovalStep, SelectionGrid, TermTest};
use kronfit::surface::{EmpiricalCell, SurfaceGrid};
use kronfit::{CorrFamily, Dataset, DistanceConstants};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

pub trait Render: Serialize {
    fn text(&self) -> String;
    fn csv(&self) -> String;

    fn render(&self, format: Format) -> String {
        match format {
            Format::Text => self.text(),
            Format::Csv => self.csv(),
            Format::Json => {
                let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
                s.push('\n');
                s
            }
        }
    }
}

fn f4(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "NA".into()
    }
}

fn opt4(v: Option<f64>) -> String {
    v.map(f4).unwrap_or_else(|| "-".into())
}

fn p4(p: f64) -> String {
    if !p.is_finite() {
        "NA".into()
    } else if p < 1e-4 {
        "<.0001".into()
    } else {
        format!("{p:.4}")
    }
}

fn full(v: f64) -> String {
    format!("{v}")
}

fn full_opt(v: Option<f64>) -> String {
    v.map(full).unwrap_or_default()
}

#[derive(Debug, Clone, Serialize)]
pub struct Estimate {
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub f_statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrParamRow {
    pub factor: usize,
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorRow {
    pub factor: usize,
    pub family: CorrFamily,
    pub rho: Option<f64>,
    pub scaled_decay: Option<f64>,
    pub raw_decay: Option<f64>,
    pub d_min: f64,
    pub d_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub n_subjects: usize,
    pub n: usize,
    pub q: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub data: DataSummary,
    pub coefficients: Vec<CoefRow>,
    pub factors: Vec<FactorRow>,
    pub correlation_parameters: Vec<CorrParamRow>,
    pub sigma2: Estimate,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub k: usize,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
    pub diagnostic: VarianceReport,
    pub warnings: Vec<String>,
}

fn factor_row(factor: usize, spec: &kronfit::CorrSpec, scaled: Option<f64>, c: &DistanceConstants) -> FactorRow {
    let has_rho = matches!(spec.family, CorrFamily::Lear | CorrFamily::Ar1 | CorrFamily::De | CorrFamily::Cs);
    FactorRow {
        factor,
        family: spec.family,
        rho: has_rho.then(|| spec.params[0]),
        scaled_decay: scaled,
        raw_decay: (spec.family == CorrFamily::Lear).then(|| spec.params[1]),
        d_min: c.d_min,
        d_max: c.d_max,
    }
}

impl FitReport {
    pub fn new(ds: &Dataset, fit: &FitResult, opts: &FitOptions) -> Self {
        let se = fit.standard_errors();
        let q = fit.beta_hat.len();
        let coefficients = (0..q)
            .map(|j| {
                let (f, p) = match wald_f_test(fit, &selection_contrast(q, &[j])) {
                    Ok(w) => (w.statistic, w.p_value),
                    Err(_) => (f64::NAN, f64::NAN),
                };
                CoefRow { name: fit.param_names[j].clone(), estimate: fit.beta_hat[j], se: se[j], f_statistic: f, p_value: p }
            })
            .collect();
        let p1 = fit.tau_hat.0.params.len();
        let flat = fit.theta.flatten();
        let correlation_parameters = (q..flat.len())
            .map(|j| CorrParamRow {
                factor: if j < q + p1 { 1 } else { 2 },
                name: fit.param_names[j].clone(),
                estimate: flat[j],
                se: se[j],
            })
            .collect();
        FitReport {
            data: DataSummary { n_subjects: ds.n_subjects(), n: ds.n, q: ds.q },
            coefficients,
            factors: vec![
                factor_row(1, &fit.tau_hat.0, fit.scaled_decay1, &fit.constants1),
                factor_row(2, &fit.tau_hat.1, fit.scaled_decay2, &fit.constants2),
            ],
            correlation_parameters,
            sigma2: Estimate { estimate: fit.sigma2.value, se: fit.sigma2.se() },
            loglik: fit.loglik,
            aic: fit.aic,
            bic: fit.bic,
            k: fit.k,
            converged: fit.converged,
            iterations: fit.iterations,
            trace: fit.trace.clone(),
            diagnostic: negative_variance_diagnostic(fit, opts),
            warnings: fit.warnings.clone(),
        }
    }

    fn text_body(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "Model: factor 1 {}, factor 2 {}",
            self.factors[0].family, self.factors[1].family
        );
        let _ = writeln!(
            out,
            "Subjects: {}  Observations: {}  Coefficients: {}\n",
            self.data.n_subjects, self.data.n, self.data.q
        );
        let _ = writeln!(out, "Estimates, standard errors and p-values");
        let _ = writeln!(out, "{:<24}{:>12}{:>12}{:>12}", "Parameter", "Estimate", "SE", "p-value");
        for c in &self.coefficients {
            let _ = writeln!(out, "{:<24}{:>12}{:>12}{:>12}", c.name, f4(c.estimate), f4(c.se), p4(c.p_value));
        }
        let _ = writeln!(out, "\nCorrelation structure");
        let _ = writeln!(
            out,
            "{:<8}{:<14}{:>10}{:>14}{:>12}{:>10}{:>10}",
            "Factor", "Family", "rho", "scaled delta", "delta", "d_min", "d_max"
        );
        for f in &self.factors {
            let _ = writeln!(
                out,
                "{:<8}{:<14}{:>10}{:>14}{:>12}{:>10}{:>10}",
                f.factor,
                f.family.to_string(),
                opt4(f.rho),
                opt4(f.scaled_decay),
                opt4(f.raw_decay),
                f4(f.d_min),
                f4(f.d_max)
            );
        }
        let _ = writeln!(out, "{:<8}{:>10} (SE {})", "sigma^2", f4(self.sigma2.estimate), f4(self.sigma2.se));
        if !self.correlation_parameters.is_empty() {
            let _ = writeln!(out, "\n{:<24}{:>12}{:>12}", "Correlation parameter", "Estimate", "SE");
            for c in &self.correlation_parameters {
                let _ = writeln!(out, "{:<24}{:>12}{:>12}", c.name, f4(c.estimate), f4(c.se));
            }
        }
        let _ = writeln!(out, "\nLog-likelihood {}  AIC {}  BIC {}  (k = {})", f4(self.loglik), f4(self.aic), f4(self.bic), self.k);
        let last = self.trace.last();
        let _ = writeln!(
            out,
            "{} after {} iteration(s); final log-likelihood {}, projected gradient {:.3e}",
            if self.converged { "Converged" } else { "NOT converged" },
            self.iterations,
            last.map(|t| f4(t.loglik)).unwrap_or_default(),
            last.map(|t| t.max_grad).unwrap_or(f64::NAN)
        );
        if !self.warnings.is_empty() {
            let _ = writeln!(out, "\nWarnings");
            for w in &self.warnings {
                let _ = writeln!(out, "  - {w}");
            }
        }
    }

    fn csv_rows(&self, prefix: &str, rows: &mut Vec<[String; 6]>) {
        let r = |section: &str, name: &str, est: String, se: String, stat: String, p: String| {
            [format!("{prefix}{section}"), name.to_string(), est, se, stat, p]
        };
        for c in &self.coefficients {
            rows.push(r("coefficient", &c.name, full(c.estimate), full(c.se), full(c.f_statistic), full(c.p_value)));
        }
        for c in &self.correlation_parameters {
            rows.push(r("correlation", &c.name, full(c.estimate), full(c.se), String::new(), String::new()));
        }
        for f in &self.factors {
            let k = f.factor;
            rows.push(r("factor", &format!("factor{k}.family"), f.family.to_string(), String::new(), String::new(), String::new()));
            rows.push(r("factor", &format!("factor{k}.rho"), full_opt(f.rho), String::new(), String::new(), String::new()));
            rows.push(r("factor", &format!("factor{k}.scaled_decay"), full_opt(f.scaled_decay), String::new(), String::new(), String::new()));
            rows.push(r("factor", &format!("factor{k}.raw_decay"), full_opt(f.raw_decay), String::new(), String::new(), String::new()));
        }
        rows.push(r("variance", "sigma2", full(self.sigma2.estimate), full(self.sigma2.se), String::new(), String::new()));
        for (name, v) in [("loglik", self.loglik), ("aic", self.aic), ("bic", self.bic)] {
            rows.push(r("fit", name, full(v), String::new(), String::new(), String::new()));
        }
        rows.push(r("fit", "k", self.k.to_string(), String::new(), String::new(), String::new()));
        rows.push(r("fit", "converged", self.converged.to_string(), String::new(), String::new(), String::new()));
        rows.push(r("fit", "iterations", self.iterations.to_string(), String::new(), String::new(), String::new()));
    }
}

fn write_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

const FIT_CSV_HEADER: [&str; 6] = ["section", "name", "estimate", "se", "statistic", "p_value"];

impl Render for FitReport {
    fn text(&self) -> String {
        let mut out = String::new();
        self.text_body(&mut out);
        out
    }

    fn csv(&self) -> String {
        let mut rows = Vec::new();
        self.csv_rows("", &mut rows);
        write_csv(&FIT_CSV_HEADER, rows.into_iter().map(Vec::from))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BackwardReport {
    pub alpha: f64,
    pub steps: Vec<RemovalStep>,
    pub retained: Vec<String>,
    pub final_tests: Vec<TermTest>,
    pub final_fit: FitReport,
}

impl BackwardReport {
    pub fn new(ds: &Dataset, sel: &BackwardSelection, alpha: f64, opts: &FitOptions) -> Self {
        let final_ds = ds.select_terms(&sel.retained).expect("retained terms exist");
        BackwardReport {
            alpha,
            steps: sel.steps.clone(),
            retained: sel.retained.clone(),
            final_tests: sel.final_tests.clone(),
            final_fit: FitReport::new(&final_ds, &sel.final_fit, opts),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectReport {
    pub rows: Vec<CorrFamily>,
    pub cols: Vec<CorrFamily>,
    pub aic: Vec<Vec<f64>>,
    pub bic: Vec<Vec<f64>>,
    pub cells: Vec<GridCell>,
    pub best: Option<(CorrFamily, CorrFamily)>,
    pub backward: Option<BackwardReport>,
}

impl SelectReport {
    pub fn new(grid: &SelectionGrid, backward: Option<BackwardReport>) -> Self {
        let rows_of = |m: &kronfit::inference::SelectionGrid, bic: bool| {
            let mat = if bic { &m.bic } else { &m.aic };
            (0..mat.nrows()).map(|i| (0..mat.ncols()).map(|j| mat[(i, j)]).collect()).collect()
        };
        SelectReport {
            rows: grid.rows.clone(),
            cols: grid.cols.clone(),
            aic: rows_of(grid, false),
            bic: rows_of(grid, true),
            cells: grid.cells.clone(),
            best: grid.best,
            backward,
        }
    }

    fn table(&self, title: &str, values: &[Vec<f64>], out: &mut String) {
        let _ = writeln!(out, "{title} (rows: factor 1, columns: factor 2)");
        let _ = write!(out, "{:<14}", "");
        for c in &self.cols {
            let _ = write!(out, "{:>16}", c.to_string());
        }
        let _ = writeln!(out);
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(out, "{:<14}", r.to_string());
            for (j, v) in values[i].iter().enumerate() {
                let cell = &self.cells[i * self.cols.len() + j];
                let shown = match (&cell.error, cell.converged) {
                    (Some(_), _) => "failed".to_string(),
                    (None, false) => format!("{}*", f4(*v)),
                    (None, true) => f4(*v),
                };
                let _ = write!(out, "{shown:>16}");
            }
            let _ = writeln!(out);
        }
    }
}

impl Render for SelectReport {
    fn text(&self) -> String {
        let mut out = String::new();
        self.table("AIC", &self.aic, &mut out);
        let _ = writeln!(out);
        self.table("BIC", &self.bic, &mut out);
        if self.cells.iter().any(|c| !c.converged) {
            let _ = writeln!(out, "(* not converged, excluded from selection)");
        }
        for c in self.cells.iter().filter(|c| c.error.is_some()) {
            let _ = writeln!(out, "{} x {} failed: {}", c.family1, c.family2, c.error.as_deref().unwrap_or(""));
        }
        match self.best {
            Some((a, b)) => {
                let _ = writeln!(out, "\nBest structure by AIC: factor 1 {a}, factor 2 {b}");
            }
            None => {
                let _ = writeln!(out, "\nNo converged cell; no structure selected");
            }
        }
        if let Some(bw) = &self.backward {
            let _ = writeln!(out, "\nBackward selection (alpha = {})", f4(bw.alpha));
            if bw.steps.is_empty() {
                let _ = writeln!(out, "  no covariate removed");
            }
            for s in &bw.steps {
                let _ = writeln!(
                    out,
                    "  step {}: removed {} (F = {}, df = {}, p = {})",
                    s.step,
                    s.removed.term,
                    f4(s.removed.statistic),
                    s.removed.num_df,
                    p4(s.removed.p_value)
                );
            }
            let retained = if bw.retained.is_empty() { "(intercept only)".to_string() } else { bw.retained.join(", ") };
            let _ = writeln!(out, "  retained: {retained}\n");
            bw.final_fit.text_body(&mut out);
        }
        out
    }

    fn csv(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        for c in &self.cells {
            let best = self.best == Some((c.family1, c.family2));
            rows.push(vec![
                "grid".into(),
                format!("{}:{}", c.family1, c.family2),
                full(c.aic),
                full(c.bic),
                full(c.loglik),
                format!("converged={};best={best}", c.converged),
            ]);
        }
        if let Some(bw) = &self.backward {
            for s in &bw.steps {
                rows.push(vec![
                    "removed".into(),
                    s.removed.term.clone(),
                    full(s.removed.statistic),
                    s.removed.num_df.to_string(),
                    full(s.removed.p_value),
                    format!("step={}", s.step),
                ]);
            }
            for t in &bw.final_tests {
                rows.push(vec![
                    "retained".into(),
                    t.term.clone(),
                    full(t.statistic),
                    t.num_df.to_string(),
                    full(t.p_value),
                    String::new(),
                ]);
            }
            let mut fit_rows = Vec::new();
            bw.final_fit.csv_rows("final_", &mut fit_rows);
            rows.extend(fit_rows.into_iter().map(Vec::from));
        }
        write_csv(&["section", "name", "value1", "value2", "value3", "note"], rows)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SurfaceReport {
    pub factor1: String,
    pub factor2: String,
    pub constants1: DistanceConstants,
    pub constants2: DistanceConstants,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    /// `values[i][j]` at `(d1[i], d2[j])`.
    pub values: Vec<Vec<f64>>,
    pub empirical: Option<Vec<EmpiricalCell>>,
}

impl SurfaceReport {
    pub fn new(
        spec1: &kronfit::CorrSpec,
        spec2: &kronfit::CorrSpec,
        c1: DistanceConstants,
        c2: DistanceConstants,
        grid: &SurfaceGrid,
        empirical: Option<Vec<EmpiricalCell>>,
    ) -> Self {
        SurfaceReport {
            factor1: spec1.to_string(),
            factor2: spec2.to_string(),
            constants1: c1,
            constants2: c2,
            d1: grid.d1.clone(),
            d2: grid.d2.clone(),
            values: (0..grid.values.nrows()).map(|i| grid.values.row(i).iter().copied().collect()).collect(),
            empirical,
        }
    }
}

impl Render for SurfaceReport {
    fn text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Predicted correlation: factor 1 {}, factor 2 {}", self.factor1, self.factor2);
        let _ = writeln!(out, "(rows: factor-1 distance, columns: factor-2 distance)");
        let _ = write!(out, "{:>10}", "d1 \\ d2");
        for d in &self.d2 {
            let _ = write!(out, "{:>10}", f4(*d));
        }
        let _ = writeln!(out);
        for (i, d) in self.d1.iter().enumerate() {
            let _ = write!(out, "{:>10}", f4(*d));
            for v in &self.values[i] {
                let _ = write!(out, "{:>10}", f4(*v));
            }
            let _ = writeln!(out);
        }
        if let Some(emp) = &self.empirical {
            let _ = writeln!(out, "\nEmpirical pooled residual correlation");
            let _ = writeln!(out, "{:>10}{:>10}{:>14}{:>10}", "d1", "d2", "correlation", "pairs");
            for c in emp {
                let _ = writeln!(out, "{:>10}{:>10}{:>14}{:>10}", f4(c.d1), f4(c.d2), f4(c.correlation), c.pairs);
            }
        }
        out
    }

    fn csv(&self) -> String {
        let mut rows = Vec::new();
        for (i, d1) in self.d1.iter().enumerate() {
            for (j, d2) in self.d2.iter().enumerate() {
                rows.push(vec!["model".into(), full(*d1), full(*d2), full(self.values[i][j]), String::new()]);
            }
        }
        for c in self.empirical.iter().flatten() {
            rows.push(vec!["empirical".into(), full(c.d1), full(c.d2), full(c.correlation), c.pairs.to_string()]);
        }
        write_csv(&["source", "d1", "d2", "correlation", "pairs"], rows)
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(transparent)]
pub struct ValidateReport(pub ValidationReport);

impl Render for ValidateReport {
    fn text(&self) -> String {
        let r = &self.0;
        let mut out = String::new();
        let _ = writeln!(out, "Subjects: {}  Observations: {}  Columns: {}  Rank: {}", r.n_subjects, r.n, r.q, r.rank);
        let _ = writeln!(
            out,
            "Factor 1 distances: [{}, {}]  Factor 2 distances: [{}, {}]",
            f4(r.constants1.d_min),
            f4(r.constants1.d_max),
            f4(r.constants2.d_min),
            f4(r.constants2.d_max)
        );
        if r.diagnostics.is_empty() {
            let _ = writeln!(out, "No diagnostics.");
        }
        for d in &r.diagnostics {
            let subject = d.subject.as_deref().map(|s| format!(" [{s}]")).unwrap_or_default();
            let _ = writeln!(out, "{:?} {}{}: {}", d.severity, d.code, subject, d.message);
        }
        out
    }

    fn csv(&self) -> String {
        let rows = self.0.diagnostics.iter().map(|d| {
            vec![
                format!("{:?}", d.severity).to_lowercase(),
                d.code.clone(),
                d.subject.clone().unwrap_or_default(),
                d.message.clone(),
            ]
        });
        write_csv(&["severity", "code", "subject", "message"], rows)
    }
}
