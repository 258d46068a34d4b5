//! Two-factor repeated-measures data: per-subject blocks, long-CSV ingestion,
//! canonical serialization and validation diagnostics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corr::DistanceConstants;
use crate::error::{KronError, Result};

/// Global set of factor-2 levels (e.g. locations) and their pairwise distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor2Layout {
    pub ids: Vec<String>,
    pub distances: DMatrix<f64>,
}

impl Factor2Layout {
    pub fn new(ids: Vec<String>, distances: DMatrix<f64>) -> Result<Self> {
        let k = ids.len();
        if distances.nrows() != k || distances.ncols() != k {
            return Err(KronError::Dimension(format!(
                "factor-2 layout has {k} ids but a {}x{} distance matrix",
                distances.nrows(),
                distances.ncols()
            )));
        }
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() != k {
            return Err(KronError::Input("duplicate factor-2 level ids".into()));
        }
        for a in 0..k {
            if distances[(a, a)] != 0.0 {
                return Err(KronError::Input(format!("factor-2 distance for '{}' to itself is nonzero", ids[a])));
            }
            for b in 0..a {
                let d = distances[(a, b)];
                if !(d >= 0.0) || !d.is_finite() || (d - distances[(b, a)]).abs() > 1e-12 * d.abs().max(1.0) {
                    return Err(KronError::Input(format!(
                        "factor-2 distances between '{}' and '{}' must be finite, nonnegative and symmetric",
                        ids[a], ids[b]
                    )));
                }
            }
        }
        Ok(Self { ids, distances })
    }

    /// Levels at the given coordinates, with Euclidean distances.
    pub fn from_coords(ids: Vec<String>, coords: &[Vec<f64>]) -> Result<Self> {
        let k = coords.len();
        let d = DMatrix::from_fn(k, k, |a, b| euclidean(&coords[a], &coords[b]));
        Self::new(ids, d)
    }

    /// A single level, for data without a second repeated factor.
    pub fn single() -> Self {
        Self { ids: vec!["0".to_string()], distances: DMatrix::zeros(1, 1) }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One subject's response, design and per-factor distances.
///
/// `y` is ordered factor-1-major: the `s` factor-2 measurements at the first
/// factor-1 level, then the next level, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBlock {
    pub subject_id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub t: usize,
    pub s: usize,
    pub f1_coords: Vec<f64>,
    pub f2_index: Vec<usize>,
    pub dist1: DMatrix<f64>,
    pub dist2: DMatrix<f64>,
}

impl SubjectBlock {
    pub fn new(
        subject_id: impl Into<String>,
        f1_coords: Vec<f64>,
        f2_index: Vec<usize>,
        layout: &Factor2Layout,
        y: DVector<f64>,
        x: DMatrix<f64>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        let t = f1_coords.len();
        let s = f2_index.len();
        if t == 0 || s == 0 {
            return Err(KronError::Input(format!("subject '{subject_id}' has no measurements")));
        }
        if y.len() != t * s || x.nrows() != t * s {
            return Err(KronError::Dimension(format!(
                "subject '{subject_id}': expected {} rows (t={t}, s={s}), got y={} X={}",
                t * s,
                y.len(),
                x.nrows()
            )));
        }
        if f2_index.iter().any(|&l| l >= layout.len()) {
            return Err(KronError::Input(format!("subject '{subject_id}' references an unknown factor-2 level")));
        }
        let dist1 = DMatrix::from_fn(t, t, |j, k| (f1_coords[j] - f1_coords[k]).abs());
        let dist2 = DMatrix::from_fn(s, s, |a, b| layout.distances[(f2_index[a], f2_index[b])]);
        Ok(Self { subject_id, y, x, t, s, f1_coords, f2_index, dist1, dist2 })
    }

    pub fn n_obs(&self) -> usize {
        self.t * self.s
    }
}

/// A covariate as entered by the user; categorical covariates span several
/// design columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<SubjectBlock>,
    pub q: usize,
    pub n: usize,
    pub constants1: DistanceConstants,
    pub constants2: DistanceConstants,
    pub covariate_names: Vec<String>,
    pub terms: Vec<Term>,
    pub factor2: Factor2Layout,
    pub(crate) patterns1: Patterns,
    pub(crate) patterns2: Patterns,
}

/// Distinct distance matrices and, per subject, which one it uses.
#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct Patterns {
    pub unique: Vec<DMatrix<f64>>,
    pub of_subject: Vec<usize>,
}

impl Patterns {
    fn build<'a>(mats: impl Iterator<Item = &'a DMatrix<f64>>) -> Self {
        let mut index: HashMap<(usize, Vec<u64>), usize> = HashMap::new();
        let mut p = Patterns::default();
        for m in mats {
            let key = (m.nrows(), m.as_slice().iter().map(|v| v.to_bits()).collect());
            let next = p.unique.len();
            let id = *index.entry(key).or_insert(next);
            if id == next {
                p.unique.push(m.clone());
            }
            p.of_subject.push(id);
        }
        p
    }
}

impl Dataset {
    /// Assembles a dataset; subjects are sorted by id, constants pooled and
    /// every covariate column after the intercept becomes its own term.
    pub fn new(
        subjects: Vec<SubjectBlock>,
        covariate_names: Vec<String>,
        factor2: Factor2Layout,
    ) -> Result<Self> {
        let terms = default_terms(&covariate_names);
        Self::with_terms(subjects, covariate_names, terms, factor2)
    }

    pub fn with_terms(
        mut subjects: Vec<SubjectBlock>,
        covariate_names: Vec<String>,
        terms: Vec<Term>,
        factor2: Factor2Layout,
    ) -> Result<Self> {
        if subjects.is_empty() {
            return Err(KronError::Input("dataset has no subjects".into()));
        }
        let q = covariate_names.len();
        let mut seen = BTreeSet::new();
        for b in &subjects {
            if b.x.ncols() != q {
                return Err(KronError::Dimension(format!(
                    "subject '{}' has {} design columns, expected {q}",
                    b.subject_id,
                    b.x.ncols()
                )));
            }
            if !seen.insert(b.subject_id.clone()) {
                return Err(KronError::Input(format!("duplicate subject id '{}'", b.subject_id)));
            }
        }
        for term in &terms {
            if term.columns.iter().any(|&c| c >= q) {
                return Err(KronError::Input(format!("term '{}' references a missing column", term.name)));
            }
        }
        subjects.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let n = subjects.iter().map(|b| b.n_obs()).sum();
        let (constants1, constants2) = compute_distance_constants(&subjects);
        let patterns1 = Patterns::build(subjects.iter().map(|b| &b.dist1));
        let patterns2 = Patterns::build(subjects.iter().map(|b| &b.dist2));
        Ok(Self {
            subjects,
            q,
            n,
            constants1,
            constants2,
            covariate_names,
            terms,
            factor2,
            patterns1,
            patterns2,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Stacked design matrix over all subjects.
    pub fn stacked_x(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.q);
        let mut row = 0;
        for b in &self.subjects {
            out.rows_mut(row, b.n_obs()).copy_from(&b.x);
            row += b.n_obs();
        }
        out
    }

    pub fn stacked_y(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        let mut row = 0;
        for b in &self.subjects {
            out.rows_mut(row, b.n_obs()).copy_from(&b.y);
            row += b.n_obs();
        }
        out
    }

    /// Dataset restricted to the given design columns (in the given order).
    /// Terms whose columns are all kept are remapped; others are dropped.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Dataset> {
        if cols.iter().any(|&c| c >= self.q) {
            return Err(KronError::Input("column index out of range".into()));
        }
        let subjects = self
            .subjects
            .iter()
            .map(|b| {
                let mut nb = b.clone();
                nb.x = b.x.select_columns(cols);
                nb
            })
            .collect();
        let names = cols.iter().map(|&c| self.covariate_names[c].clone()).collect();
        let terms = self
            .terms
            .iter()
            .filter_map(|t| {
                let mapped: Option<Vec<usize>> =
                    t.columns.iter().map(|c| cols.iter().position(|k| k == c)).collect();
                mapped.map(|columns| Term { name: t.name.clone(), columns })
            })
            .collect();
        Dataset::with_terms(subjects, names, terms, self.factor2.clone())
    }

    /// Dataset keeping the intercept column (if any) and the listed terms.
    pub fn select_terms(&self, names: &[String]) -> Result<Dataset> {
        let mut cols: Vec<usize> = self.non_term_columns();
        for name in names {
            let term = self
                .terms
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| KronError::Input(format!("unknown covariate '{name}'")))?;
            cols.extend(&term.columns);
        }
        cols.sort_unstable();
        cols.dedup();
        self.select_columns(&cols)
    }

    /// Columns not owned by any term (the intercept).
    pub fn non_term_columns(&self) -> Vec<usize> {
        let owned: BTreeSet<usize> = self.terms.iter().flat_map(|t| t.columns.iter().copied()).collect();
        (0..self.q).filter(|c| !owned.contains(c)).collect()
    }
}

fn default_terms(names: &[String]) -> Vec<Term> {
    names
        .iter()
        .enumerate()
        .filter(|(_, n)| n.as_str() != INTERCEPT)
        .map(|(i, n)| Term { name: n.clone(), columns: vec![i] })
        .collect()
}

pub const INTERCEPT: &str = "(Intercept)";

/// Pooled minimum and maximum off-diagonal distance for each factor. A factor
/// with no off-diagonal pairs anywhere gets the placeholder `(0, 1)`.
pub fn compute_distance_constants(subjects: &[SubjectBlock]) -> (DistanceConstants, DistanceConstants) {
    fn pooled<'a>(mats: impl Iterator<Item = &'a DMatrix<f64>>) -> DistanceConstants {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for m in mats {
            for j in 0..m.nrows() {
                for k in 0..j {
                    lo = lo.min(m[(j, k)]);
                    hi = hi.max(m[(j, k)]);
                }
            }
        }
        if lo.is_finite() {
            DistanceConstants { d_min: lo, d_max: hi }
        } else {
            DistanceConstants::unit()
        }
    }
    (
        pooled(subjects.iter().map(|b| &b.dist1)),
        pooled(subjects.iter().map(|b| &b.dist2)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResponseTransform {
    #[default]
    None,
    Ln,
    Log2,
    Log10,
}

impl ResponseTransform {
    fn apply(self, v: f64) -> f64 {
        match self {
            ResponseTransform::None => v,
            ResponseTransform::Ln => v.ln(),
            ResponseTransform::Log2 => v.log2(),
            ResponseTransform::Log10 => v.log10(),
        }
    }
}

/// Column roles for long-format CSV input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub subject: String,
    pub factor1: String,
    /// Factor-2 level id column. Without a distance file its values are
    /// read as scalar coordinates.
    #[serde(default)]
    pub factor2: Option<String>,
    /// Factor-2 coordinate columns (Euclidean distance); overrides `factor2`.
    #[serde(default)]
    pub factor2_coords: Vec<String>,
    pub response: String,
    #[serde(default)]
    pub response_transform: ResponseTransform,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub reference_levels: BTreeMap<String, String>,
    #[serde(default = "yes")]
    pub intercept: bool,
}

fn yes() -> bool {
    true
}

impl IngestConfig {
    pub fn new(subject: &str, factor1: &str, response: &str) -> Self {
        Self {
            subject: subject.into(),
            factor1: factor1.into(),
            factor2: None,
            factor2_coords: Vec::new(),
            response: response.into(),
            response_transform: ResponseTransform::None,
            covariates: Vec::new(),
            categorical: Vec::new(),
            reference_levels: BTreeMap::new(),
            intercept: true,
        }
    }
}

struct Row {
    line: u64,
    subject: String,
    f1: f64,
    f2: String,
    y: f64,
    covs: Vec<String>,
}

/// Reads a square factor-2 distance matrix: a header row of level ids (first
/// cell ignored) and one row per level starting with its id.
pub fn read_factor2_distances<R: Read>(source: R) -> Result<Factor2Layout> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let k = ids.len();
    let mut d = DMatrix::zeros(k, k);
    let mut row_count = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if r >= k {
            return Err(KronError::Input(format!("distance file line {line}: more rows than levels")));
        }
        if rec.get(0).map(str::trim) != Some(ids[r].as_str()) {
            return Err(KronError::Input(format!(
                "distance file line {line}: row id must be '{}' to match the header order",
                ids[r]
            )));
        }
        if rec.len() != k + 1 {
            return Err(KronError::Input(format!("distance file line {line}: expected {} cells", k + 1)));
        }
        for c in 0..k {
            let cell = rec[c + 1].trim();
            d[(r, c)] = cell
                .parse::<f64>()
                .map_err(|_| KronError::Input(format!("distance file line {line}: non-numeric '{cell}'")))?;
        }
        row_count += 1;
    }
    if row_count != k {
        return Err(KronError::Input(format!("distance file has {row_count} rows for {k} levels")));
    }
    Factor2Layout::new(ids, d)
}

fn csv_err(e: csv::Error) -> KronError {
    let line = e.position().map(|p| p.line());
    match line {
        Some(l) => KronError::Input(format!("CSV line {l}: {e}")),
        None => KronError::Input(format!("CSV: {e}")),
    }
}

/// Groups long-format rows into subject blocks.
///
/// Factor-1 levels are sorted by coordinate within each subject; factor-2
/// levels follow the global layout order (distance-file order, or ascending
/// coordinates).
pub fn ingest_long_csv<R: Read>(
    source: R,
    config: &IngestConfig,
    factor2_distances: Option<Factor2Layout>,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| KronError::Input(format!("missing column '{name}'")))
    };
    let c_subject = col(&config.subject)?;
    let c_f1 = col(&config.factor1)?;
    let c_y = col(&config.response)?;
    let c_f2_coords: Vec<usize> = config.factor2_coords.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let c_f2 = if c_f2_coords.is_empty() {
        config.factor2.as_deref().map(col).transpose()?
    } else {
        None
    };
    let c_covs: Vec<usize> = config.covariates.iter().map(|n| col(n)).collect::<Result<_>>()?;
    for cat in &config.categorical {
        if !config.covariates.contains(cat) {
            return Err(KronError::Input(format!("categorical '{cat}' is not listed as a covariate")));
        }
    }

    let mut rows = Vec::new();
    let mut coord_of: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |c: usize, what: &str| -> Result<f64> {
            let cell = &rec[c];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| KronError::Input(format!("line {line}: non-numeric {what} '{cell}'")))
        };
        let f1 = num(c_f1, "factor-1 coordinate")?;
        let raw_y = num(c_y, "response")?;
        let y = config.response_transform.apply(raw_y);
        if !y.is_finite() {
            return Err(KronError::Input(format!("line {line}: transformed response is not finite")));
        }
        let f2 = if !c_f2_coords.is_empty() {
            let coords: Vec<f64> =
                c_f2_coords.iter().map(|&c| num(c, "factor-2 coordinate")).collect::<Result<_>>()?;
            let id = coords.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
            coord_of.entry(id.clone()).or_insert(coords);
            id
        } else if let Some(c) = c_f2 {
            let id = rec[c].to_string();
            if factor2_distances.is_none() {
                let v = num(c, "factor-2 coordinate")?;
                coord_of.entry(id.clone()).or_insert_with(|| vec![v]);
            }
            id
        } else {
            "0".to_string()
        };
        rows.push(Row {
            line,
            subject: rec[c_subject].to_string(),
            f1,
            f2,
            y,
            covs: c_covs.iter().map(|&c| rec[c].to_string()).collect(),
        });
    }
    if rows.is_empty() {
        return Err(KronError::Input("CSV has no data rows".into()));
    }

    let layout = match factor2_distances {
        Some(layout) => layout,
        None if c_f2_coords.is_empty() && c_f2.is_none() => Factor2Layout::single(),
        None => {
            let mut entries: Vec<(String, Vec<f64>)> = coord_of.into_iter().collect();
            entries.sort_by(|a, b| {
                a.1.iter()
                    .zip(&b.1)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let (ids, coords): (Vec<String>, Vec<Vec<f64>>) = entries.into_iter().unzip();
            Factor2Layout::from_coords(ids, &coords)?
        }
    };
    let level_index: HashMap<&str, usize> =
        layout.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    // design columns
    let mut names = Vec::new();
    if config.intercept {
        names.push(INTERCEPT.to_string());
    }
    let mut terms = Vec::new();
    let mut encoders: Vec<CovEncoder> = Vec::new();
    for (ci, cov) in config.covariates.iter().enumerate() {
        let first = names.len();
        if config.categorical.contains(cov) {
            let levels: BTreeSet<&str> = rows.iter().map(|r| r.covs[ci].as_str()).collect();
            let reference = match config.reference_levels.get(cov) {
                Some(r) => {
                    if !levels.contains(r.as_str()) {
                        return Err(KronError::Input(format!("reference level '{r}' not found for '{cov}'")));
                    }
                    r.clone()
                }
                None => levels.iter().next().map(|s| s.to_string()).unwrap_or_default(),
            };
            let others: Vec<String> =
                levels.iter().filter(|l| **l != reference).map(|l| l.to_string()).collect();
            for l in &others {
                names.push(format!("{cov}_{l}"));
            }
            encoders.push(CovEncoder::Categorical(others));
        } else {
            names.push(cov.clone());
            encoders.push(CovEncoder::Numeric);
        }
        terms.push(Term { name: cov.clone(), columns: (first..names.len()).collect() });
    }
    let q = names.len();
    if q == 0 {
        return Err(KronError::Input("design has no columns (no intercept and no covariates)".into()));
    }

    // group rows by subject
    let mut by_subject: BTreeMap<&str, Vec<&Row>> = BTreeMap::new();
    for r in &rows {
        by_subject.entry(r.subject.as_str()).or_default().push(r);
    }
    let mut subjects = Vec::with_capacity(by_subject.len());
    for (sid, srows) in by_subject {
        let mut cells: BTreeMap<(u64, usize), &Row> = BTreeMap::new();
        let mut f1_levels: BTreeMap<u64, f64> = BTreeMap::new();
        for r in &srows {
            let l = *level_index.get(r.f2.as_str()).ok_or_else(|| {
                KronError::Input(format!("line {}: factor-2 level '{}' not in the distance file", r.line, r.f2))
            })?;
            let key = (ordered_bits(r.f1), l);
            if cells.insert(key, r).is_some() {
                return Err(KronError::Input(format!(
                    "line {}: duplicate measurement for subject '{sid}', factor-1 {}, factor-2 '{}'",
                    r.line, r.f1, r.f2
                )));
            }
            f1_levels.insert(ordered_bits(r.f1), r.f1);
        }
        let mut sets: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
        for &(f1, l) in cells.keys() {
            sets.entry(f1).or_default().insert(l);
        }
        let reference: BTreeSet<usize> = sets.values().flat_map(|s| s.iter().copied()).collect();
        for (f1, set) in &sets {
            if *set != reference {
                let missing: Vec<&str> =
                    reference.difference(set).map(|&l| layout.ids[l].as_str()).collect();
                return Err(KronError::Input(format!(
                    "subject '{sid}' is not consistently spaced: factor-1 level {} lacks factor-2 level(s) {:?}",
                    f1_levels[f1], missing
                )));
            }
        }
        let f2_index: Vec<usize> = reference.into_iter().collect();
        let f1_coords: Vec<f64> = f1_levels.values().copied().collect();
        let (t, s) = (f1_coords.len(), f2_index.len());
        let mut y = DVector::zeros(t * s);
        let mut x = DMatrix::zeros(t * s, q);
        for (j, f1) in f1_levels.keys().enumerate() {
            for (a, &l) in f2_index.iter().enumerate() {
                let r = cells[&(*f1, l)];
                let row = j * s + a;
                y[row] = r.y;
                let mut c = 0;
                if config.intercept {
                    x[(row, 0)] = 1.0;
                    c = 1;
                }
                for (ci, enc) in encoders.iter().enumerate() {
                    let cell = r.covs[ci].as_str();
                    match enc {
                        CovEncoder::Numeric => {
                            x[(row, c)] = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                                KronError::Input(format!(
                                    "line {}: non-numeric covariate '{}' value '{cell}'",
                                    r.line, config.covariates[ci]
                                ))
                            })?;
                            c += 1;
                        }
                        CovEncoder::Categorical(levels) => {
                            for l in levels {
                                x[(row, c)] = if l == cell { 1.0 } else { 0.0 };
                                c += 1;
                            }
                        }
                    }
                }
            }
        }
        subjects.push(SubjectBlock::new(sid, f1_coords, f2_index, &layout, y, x)?);
    }
    Dataset::with_terms(subjects, names, terms, layout)
}

enum CovEncoder {
    Numeric,
    Categorical(Vec<String>),
}

/// Bit pattern whose unsigned order matches the numeric order of finite f64s.
fn ordered_bits(v: f64) -> u64 {
    let b = (v + 0.0).to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Writes the canonical long CSV: `subject,f1,f2_id,y` then every design
/// column except the intercept.
pub fn write_canonical_csv<W: Write>(ds: &Dataset, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let cov_cols: Vec<usize> = (0..ds.q).filter(|&c| ds.covariate_names[c] != INTERCEPT).collect();
    let mut header = vec!["subject".to_string(), "f1".into(), "f2_id".into(), "y".into()];
    header.extend(cov_cols.iter().map(|&c| ds.covariate_names[c].clone()));
    w.write_record(&header).map_err(csv_err)?;
    for b in &ds.subjects {
        for j in 0..b.t {
            for a in 0..b.s {
                let row = j * b.s + a;
                let mut rec = vec![
                    b.subject_id.clone(),
                    b.f1_coords[j].to_string(),
                    ds.factor2.ids[b.f2_index[a]].clone(),
                    b.y[row].to_string(),
                ];
                rec.extend(cov_cols.iter().map(|&c| b.x[(row, c)].to_string()));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| KronError::Input(e.to_string()))?;
    Ok(())
}

/// Writes the factor-2 layout in the format read by [`read_factor2_distances`].
pub fn write_factor2_distances<W: Write>(layout: &Factor2Layout, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["level".to_string()];
    header.extend(layout.ids.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (a, id) in layout.ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend((0..layout.len()).map(|b| layout.distances[(a, b)].to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| KronError::Input(e.to_string()))?;
    Ok(())
}

/// Ingest configuration matching [`write_canonical_csv`] output.
pub fn canonical_config(ds: &Dataset) -> IngestConfig {
    let mut cfg = IngestConfig::new("subject", "f1", "y");
    cfg.factor2 = Some("f2_id".into());
    cfg.intercept = ds.covariate_names.iter().any(|n| n == INTERCEPT);
    cfg.covariates = ds.covariate_names.iter().filter(|n| n.as_str() != INTERCEPT).cloned().collect();
    cfg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectDims {
    pub subject: String,
    pub t: usize,
    pub s: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_subjects: usize,
    pub n: usize,
    pub q: usize,
    pub rank: usize,
    pub subjects: Vec<SubjectDims>,
    pub constants1: DistanceConstants,
    pub constants2: DistanceConstants,
    pub single_time_subjects: usize,
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn warnings(&self) -> Vec<&Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Warning).collect()
    }
}

/// Structural diagnostics; never fails.
pub fn validate(ds: &Dataset) -> ValidationReport {
    let mut diagnostics = Vec::new();
    let x = ds.stacked_x();

    // greedy column scan: a column that adds nothing to the span of the
    // preceding kept columns is collinear with them
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept_names: Vec<&str> = Vec::new();
    for c in 0..ds.q {
        let col = x.column(c).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for u in &basis {
            let proj = u.dot(&v);
            v -= u * proj;
        }
        let tol = 1e-9 * norm0.max(1.0) * (ds.n as f64).sqrt();
        if v.norm() > tol && norm0 > 0.0 {
            let nv = v.norm();
            basis.push(v / nv);
            kept_names.push(&ds.covariate_names[c]);
        } else {
            diagnostics.push(Diagnostic {
                severity: Severity::Warning,
                code: "rank_deficient".into(),
                message: format!(
                    "design column '{}' is collinear with {:?}",
                    ds.covariate_names[c], kept_names
                ),
                subject: None,
            });
        }
    }
    let rank = basis.len();

    let mut single = 0;
    for b in &ds.subjects {
        if b.t == 1 {
            single += 1;
            diagnostics.push(Diagnostic {
                severity: Severity::Info,
                code: "single_factor1_level".into(),
                message: "subject has one factor-1 level; its factor-1 matrix is 1x1".into(),
                subject: Some(b.subject_id.clone()),
            });
        }
        let dup = |d: &DMatrix<f64>| (0..d.nrows()).any(|j| (0..j).any(|k| d[(j, k)] == 0.0));
        if dup(&b.dist1) || dup(&b.dist2) {
            diagnostics.push(Diagnostic {
                severity: Severity::Warning,
                code: "duplicate_location".into(),
                message: "zero off-diagonal distance; correlation matrices may be singular".into(),
                subject: Some(b.subject_id.clone()),
            });
        }
    }
    for (factor, c) in [(1, ds.constants1), (2, ds.constants2)] {
        diagnostics.push(Diagnostic {
            severity: Severity::Info,
            code: "distance_constants".into(),
            message: format!("factor {factor}: d_min = {}, d_max = {}", c.d_min, c.d_max),
            subject: None,
        });
    }
    ValidationReport {
        n_subjects: ds.n_subjects(),
        n: ds.n,
        q: ds.q,
        rank,
        subjects: ds
            .subjects
            .iter()
            .map(|b| SubjectDims { subject: b.subject_id.clone(), t: b.t, s: b.s })
            .collect(),
        constants1: ds.constants1,
        constants2: ds.constants2,
        single_time_subjects: single,
        diagnostics,
    }
}
