//! Report container and its two serializations: a fixed-column CSV for
//! tabular consumers and a JSON mirror carrying every field at full
//! precision. CSV writing and reading are inverse up to the byte.

use serde::{Deserialize, Serialize};

use super::{MetricsError, Result, StatsSummary};

pub const CSV_COLUMNS: &str =
    "cohort,sex,class,n,mean_orig,sd_orig,mean_gen,sd_gen,diff_pct,slope,r2,t,p";

/// One (sex stratum, metric class) row. The CSV carries the thirteen
/// contract columns; the agreement fields below them travel in JSON only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub cohort: String,
    pub sex: String,
    pub class: String,
    pub n: usize,
    pub mean_orig: f64,
    pub sd_orig: f64,
    pub mean_gen: f64,
    pub sd_gen: f64,
    pub diff_pct: Option<f64>,
    pub slope: Option<f64>,
    pub r2: Option<f64>,
    pub t: Option<f64>,
    pub p: Option<f64>,
    #[serde(default)]
    pub bias: Option<f64>,
    #[serde(default)]
    pub loa_low: Option<f64>,
    #[serde(default)]
    pub loa_high: Option<f64>,
    #[serde(default)]
    pub excluded_zero_orig: usize,
}

impl ClassRow {
    pub fn from_summary(cohort: &str, sex: &str, class: &str, s: &StatsSummary) -> Self {
        ClassRow {
            cohort: cohort.to_string(),
            sex: sex.to_string(),
            class: class.to_string(),
            n: s.n,
            mean_orig: s.mean_orig,
            sd_orig: s.sd_orig,
            mean_gen: s.mean_gen,
            sd_gen: s.sd_gen,
            diff_pct: s.diff_percent,
            slope: s.slope,
            r2: s.r2,
            t: s.t_stat,
            p: s.p_value,
            bias: Some(s.bias),
            loa_low: Some(s.loa_low),
            loa_high: Some(s.loa_high),
            excluded_zero_orig: s.excluded_zero_orig,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cohort: String,
    /// Documents the evaluation's load-bearing simplification.
    pub header: String,
    pub n_subjects: usize,
    /// Subject ids that could not be paired; reported, not fatal.
    pub missing: Vec<String>,
    pub rows: Vec<ClassRow>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| MetricsError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn parse_opt(s: &str, line: usize, col: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| MetricsError::Parse {
        line,
        msg: format!("bad float in column {col}: '{s}'"),
    })
}

fn parse_f64(s: &str, line: usize, col: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| MetricsError::Parse {
        line,
        msg: format!("bad float in column {col}: '{s}'"),
    })
}

/// Write the report as CSV: an optional `#` header comment, the column
/// line, then one row per line with empty cells for absent statistics.
pub fn write_report_csv(report: &MetricsReport) -> String {
    let mut out = String::new();
    if !report.header.is_empty() {
        out.push_str("# ");
        out.push_str(&report.header);
        out.push('\n');
    }
    out.push_str(CSV_COLUMNS);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.cohort,
            r.sex,
            r.class,
            r.n,
            r.mean_orig,
            r.sd_orig,
            r.mean_gen,
            r.sd_gen,
            fmt_opt(r.diff_pct),
            fmt_opt(r.slope),
            fmt_opt(r.r2),
            fmt_opt(r.t),
            fmt_opt(r.p),
        ));
    }
    out
}

/// Parse a CSV report produced by [`write_report_csv`]. Fields absent from
/// the CSV (agreement limits, subject counts) come back at their defaults.
pub fn read_report_csv(text: &str) -> Result<MetricsReport> {
    let mut header = String::new();
    let mut rows = Vec::new();
    let mut saw_columns = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.is_empty() {
            continue;
        }
        if let Some(comment) = raw.strip_prefix('#') {
            header = comment.trim_start().to_string();
            continue;
        }
        if !saw_columns {
            if raw != CSV_COLUMNS {
                return Err(MetricsError::Parse {
                    line: line_no,
                    msg: format!("expected column header '{CSV_COLUMNS}'"),
                });
            }
            saw_columns = true;
            continue;
        }
        let f: Vec<&str> = raw.split(',').collect();
        if f.len() != 13 {
            return Err(MetricsError::Parse {
                line: line_no,
                msg: format!("expected 13 columns, got {}", f.len()),
            });
        }
        rows.push(ClassRow {
            cohort: f[0].to_string(),
            sex: f[1].to_string(),
            class: f[2].to_string(),
            n: f[3].parse().map_err(|_| MetricsError::Parse {
                line: line_no,
                msg: format!("bad count in column n: '{}'", f[3]),
            })?,
            mean_orig: parse_f64(f[4], line_no, "mean_orig")?,
            sd_orig: parse_f64(f[5], line_no, "sd_orig")?,
            mean_gen: parse_f64(f[6], line_no, "mean_gen")?,
            sd_gen: parse_f64(f[7], line_no, "sd_gen")?,
            diff_pct: parse_opt(f[8], line_no, "diff_pct")?,
            slope: parse_opt(f[9], line_no, "slope")?,
            r2: parse_opt(f[10], line_no, "r2")?,
            t: parse_opt(f[11], line_no, "t")?,
            p: parse_opt(f[12], line_no, "p")?,
            bias: None,
            loa_low: None,
            loa_high: None,
            excluded_zero_orig: 0,
        });
    }
    if !saw_columns {
        return Err(MetricsError::Parse {
            line: 1,
            msg: "no column header found".to_string(),
        });
    }
    let cohort = rows.first().map(|r| r.cohort.clone()).unwrap_or_default();
    Ok(MetricsReport { cohort, header, n_subjects: 0, missing: Vec::new(), rows })
}
