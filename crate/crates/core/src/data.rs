//! Longitudinal dataset types, validation and CSV ingestion.
//!
//! Data are held per subject (one block of `m_i` observations each) and also
//! flattened into a single observation order: subjects in dataset order, rows
//! within a subject in their original order. Every per-observation vector used
//! elsewhere in the crate (pseudo-responses, residuals) follows that order.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const INTERCEPT_TOL: f64 = 1e-12;

/// One subject's block of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    /// `m_i x p` parametric covariates.
    pub x: DMatrix<f64>,
    /// `m_i x q` varying-coefficient covariates; column 0 is the intercept.
    pub z: DMatrix<f64>,
}

impl Subject {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// A single invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub subject: String,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "subject `{}`, {}: {}", self.subject, self.field, self.message)
    }
}

/// Flattened, row-major copy of the observations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Observations {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    /// `N1 x p`, row-major.
    pub x: Vec<f64>,
    /// `N1 x q`, row-major.
    pub z: Vec<f64>,
    /// Subject index of each observation.
    pub subject: Vec<usize>,
    /// `offsets[i]..offsets[i + 1]` are subject `i`'s observations.
    pub offsets: Vec<usize>,
    pub p: usize,
    pub q: usize,
}

impl Observations {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn z_row(&self, k: usize) -> &[f64] {
        &self.z[k * self.q..(k + 1) * self.q]
    }

    pub fn x_row(&self, k: usize) -> &[f64] {
        &self.x[k * self.p..(k + 1) * self.p]
    }

    pub fn range(&self, subject: usize) -> std::ops::Range<usize> {
        self.offsets[subject]..self.offsets[subject + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<Subject>,
    p: usize,
    q: usize,
    obs: Observations,
}

impl LongitudinalDataset {
    /// Builds a dataset, rejecting it if any invariant is violated.
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let ds = Self::unchecked(subjects);
        let violations = validate(&ds);
        if violations.is_empty() {
            ds.warn_duplicate_times();
            Ok(ds)
        } else {
            Err(Error::Invalid(violations))
        }
    }

    /// Builds a dataset without validation. Use [`validate`] to inspect it.
    pub fn unchecked(subjects: Vec<Subject>) -> Self {
        let p = subjects.first().map_or(0, |s| s.x.ncols());
        let q = subjects.first().map_or(0, |s| s.z.ncols());
        let obs = flatten(&subjects, p, q);
        Self {
            subjects,
            p,
            q,
            obs,
        }
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn into_subjects(self) -> Vec<Subject> {
        self.subjects
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Total observation count `N1 = sum m_i`.
    pub fn n1(&self) -> usize {
        self.obs.len()
    }

    /// Ordered within-subject pair count `N2 = sum m_i (m_i - 1)`.
    pub fn n2(&self) -> usize {
        self.subjects.iter().map(|s| s.len() * s.len().saturating_sub(1)).sum()
    }

    pub fn observations(&self) -> &Observations {
        &self.obs
    }

    /// Maps observation times affinely from `[min, max]` onto `[0, 1]`.
    pub fn rescale_time(mut subjects: Vec<Subject>) -> Vec<Subject> {
        let (lo, hi) = subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                (lo.min(t), hi.max(t))
            });
        let span = hi - lo;
        for s in &mut subjects {
            for t in &mut s.times {
                *t = if span > 0.0 { (*t - lo) / span } else { 0.0 };
            }
        }
        subjects
    }

    fn warn_duplicate_times(&self) {
        for s in &self.subjects {
            let mut t = s.times.clone();
            t.sort_by(f64::total_cmp);
            if t.windows(2).any(|w| w[0] == w[1]) {
                log::warn!("subject `{}` has duplicate observation times", s.id);
            }
        }
    }
}

fn flatten(subjects: &[Subject], p: usize, q: usize) -> Observations {
    let mut obs = Observations {
        p,
        q,
        offsets: vec![0],
        ..Default::default()
    };
    for (i, s) in subjects.iter().enumerate() {
        let m = s.len();
        let consistent = s.y.len() == m
            && s.x.nrows() == m
            && s.z.nrows() == m
            && s.x.ncols() == p
            && s.z.ncols() == q;
        if consistent {
            for j in 0..m {
                obs.t.push(s.times[j]);
                obs.y.push(s.y[j]);
                obs.x.extend(s.x.row(j).iter());
                obs.z.extend(s.z.row(j).iter());
                obs.subject.push(i);
            }
        }
        obs.offsets.push(obs.t.len());
    }
    obs
}

/// Lists every invariant violation; an empty list means the dataset is valid.
pub fn validate(ds: &LongitudinalDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject: &str, field: &str, message: String| {
        out.push(Violation {
            subject: subject.to_string(),
            field: field.to_string(),
            message,
        })
    };
    let (p, q) = (ds.p(), ds.q());
    for s in ds.subjects() {
        let m = s.len();
        if m == 0 {
            push(&s.id, "times", "subject has no observations".into());
            continue;
        }
        if s.y.len() != m || s.x.nrows() != m || s.z.nrows() != m {
            push(
                &s.id,
                "shape",
                format!(
                    "leading dimensions differ: times {m}, y {}, x {}, z {}",
                    s.y.len(),
                    s.x.nrows(),
                    s.z.nrows()
                ),
            );
            continue;
        }
        if s.x.ncols() != p || s.z.ncols() != q {
            push(
                &s.id,
                "shape",
                format!(
                    "covariate counts ({}, {}) differ from dataset ({p}, {q})",
                    s.x.ncols(),
                    s.z.ncols()
                ),
            );
            continue;
        }
        if q == 0 {
            push(&s.id, "z", "no varying-coefficient covariates".into());
            continue;
        }
        if let Some(t) = s.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            push(&s.id, "times", format!("time {t} outside [0, 1]"));
        }
        let finite = s.y.iter().chain(s.x.iter()).chain(s.z.iter()).all(|v| v.is_finite());
        if !finite {
            push(&s.id, "values", "non-finite entry".into());
        }
        if s.z.column(0).iter().any(|v| (v - 1.0).abs() > INTERCEPT_TOL) {
            push(&s.id, "z", "intercept column (z1) must be identically 1".into());
        }
    }
    if ds.n() < 2 {
        push("*", "subjects", format!("need at least 2 subjects, found {}", ds.n()));
    }
    if ds.n() > 0 && ds.n2() == 0 {
        push("*", "subjects", "no subject has two or more observations".into());
    }
    out
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub subject: String,
    pub time: String,
    pub response: String,
    pub x: Vec<String>,
    pub z: Vec<String>,
    /// Prepend a constant-one column to `z`.
    pub add_intercept: bool,
    /// Map times affinely onto `[0, 1]` before validation.
    pub rescale_time: bool,
}

impl CsvSchema {
    /// The default `subject,t,y,x1..xp,z1..zq` layout, with `p` and `q`
    /// discovered from the header.
    pub fn from_header(header: &[&str]) -> Self {
        let numbered = |prefix: char| {
            let mut cols: Vec<(usize, String)> = header
                .iter()
                .filter_map(|h| {
                    let rest = h.strip_prefix(prefix)?;
                    rest.parse::<usize>().ok().map(|k| (k, h.to_string()))
                })
                .collect();
            cols.sort();
            cols.into_iter().map(|(_, h)| h).collect()
        };
        Self {
            subject: "subject".into(),
            time: "t".into(),
            response: "y".into(),
            x: numbered('x'),
            z: numbered('z'),
            add_intercept: false,
            rescale_time: false,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: Option<&CsvSchema>) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Reads long-format CSV. Rows of one subject need not be contiguous; subjects
/// appear in order of first occurrence.
pub fn read_csv<R: Read>(reader: R, schema: Option<&CsvSchema>) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let schema = schema
        .cloned()
        .unwrap_or_else(|| CsvSchema::from_header(&header_refs));
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let subject_col = col(&schema.subject)?;
    let time_col = col(&schema.time)?;
    let y_col = col(&schema.response)?;
    let x_cols = schema.x.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let z_cols = schema.z.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    if z_cols.is_empty() && !schema.add_intercept {
        return Err(Error::MissingColumn("z1".into()));
    }

    struct Rows {
        id: String,
        t: Vec<f64>,
        y: Vec<f64>,
        x: Vec<f64>,
        z: Vec<f64>,
        first_row: usize,
    }
    let mut order: Vec<Rows> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let q = z_cols.len() + usize::from(schema.add_intercept);

    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        // 1-based data row, header excluded
        let row = k + 1;
        let num = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::NonNumeric {
                row,
                column: header[c].clone(),
                value: raw.to_string(),
            })
        };
        let id = record.get(subject_col).unwrap_or("").to_string();
        let t = num(time_col)?;
        if !schema.rescale_time && !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange { row, t });
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(Rows {
                id,
                t: vec![],
                y: vec![],
                x: vec![],
                z: vec![],
                first_row: row,
            });
            order.len() - 1
        });
        let rows = &mut order[slot];
        rows.t.push(t);
        rows.y.push(num(y_col)?);
        for &c in &x_cols {
            rows.x.push(num(c)?);
        }
        if schema.add_intercept {
            rows.z.push(1.0);
        }
        for &c in &z_cols {
            rows.z.push(num(c)?);
        }
    }

    let p = x_cols.len();
    let mut subjects = Vec::with_capacity(order.len());
    for r in order {
        let m = r.t.len();
        let s = Subject {
            x: DMatrix::from_row_slice(m, p, &r.x),
            z: DMatrix::from_row_slice(m, q, &r.z),
            id: r.id,
            times: r.t,
            y: r.y,
        };
        if s.z.column(0).iter().any(|v| (v - 1.0).abs() > INTERCEPT_TOL) {
            log::debug!("subject starting at row {} lacks an intercept", r.first_row);
            return Err(Error::InterceptColumn { subject: s.id });
        }
        subjects.push(s);
    }
    if schema.rescale_time {
        subjects = LongitudinalDataset::rescale_time(subjects);
    }
    LongitudinalDataset::new(subjects)
}

/// Writes the dataset in the default long layout, full precision.
pub fn write_csv<W: Write>(ds: &LongitudinalDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject".to_string(), "t".into(), "y".into()];
    header.extend((1..=ds.p()).map(|k| format!("x{k}")));
    header.extend((1..=ds.q()).map(|k| format!("z{k}")));
    w.write_record(&header)?;
    for s in ds.subjects() {
        for j in 0..s.len() {
            let mut rec = vec![s.id.clone(), s.times[j].to_string(), s.y[j].to_string()];
            rec.extend(s.x.row(j).iter().map(f64::to_string));
            rec.extend(s.z.row(j).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(ds, std::fs::File::create(path)?)
}
