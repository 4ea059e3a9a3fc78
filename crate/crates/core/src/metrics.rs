//! Counting metrics: difference in count (DiC), absolute DiC, mean squared
//! error, percent agreement and R², per source and overall.
//!
//! DiC is `predicted − true`, so a negative mean means undercounting.
//! Standard deviations divide by `n`. R² is `1 − SS_res / SS_tot`; when the
//! true counts have no variance it is 1 for a perfect fit and undefined
//! otherwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Name of the overall row in per-source tables.
pub const ALL_ROW: &str = "All";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "image")]
    pub image_id: String,
    pub predicted: u32,
    #[serde(rename = "true")]
    pub truth: u32,
    #[serde(rename = "source")]
    pub source_id: String,
}

impl Prediction {
    pub fn new(image_id: impl Into<String>, predicted: u32, truth: u32, source_id: impl Into<String>) -> Self {
        Self { image_id: image_id.into(), predicted, truth, source_id: source_id.into() }
    }

    pub fn dic(&self) -> f64 {
        self.predicted as f64 - self.truth as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dic_mean: f64,
    pub dic_std: f64,
    pub abs_dic_mean: f64,
    pub abs_dic_std: f64,
    pub mse: f64,
    pub agreement_pct: f64,
    /// `None` when the truth has zero variance and the fit is not exact.
    pub r_squared: Option<f64>,
    pub n: usize,
}

pub fn evaluate(preds: &[Prediction]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Evaluation("cannot evaluate an empty prediction set".into()));
    }
    let n = preds.len() as f64;
    let (mut sum_d, mut sum_abs, mut sum_sq, mut exact, mut sum_t) = (0.0, 0.0, 0.0, 0usize, 0.0);
    for p in preds {
        let d = p.dic();
        sum_d += d;
        sum_abs += d.abs();
        sum_sq += d * d;
        exact += (d == 0.0) as usize;
        sum_t += p.truth as f64;
    }
    let dic_mean = sum_d / n;
    let abs_dic_mean = sum_abs / n;
    let mse = sum_sq / n;
    let truth_mean = sum_t / n;
    let ss_tot: f64 = preds.iter().map(|p| (p.truth as f64 - truth_mean).powi(2)).sum();
    let dic_var: f64 = preds.iter().map(|p| (p.dic() - dic_mean).powi(2)).sum::<f64>() / n;
    let abs_var: f64 = preds.iter().map(|p| (p.dic().abs() - abs_dic_mean).powi(2)).sum::<f64>() / n;
    let r_squared = if ss_tot > 0.0 {
        Some(1.0 - sum_sq / ss_tot)
    } else if sum_sq == 0.0 {
        Some(1.0)
    } else {
        None
    };
    Ok(MetricsReport {
        dic_mean,
        dic_std: dic_var.sqrt(),
        abs_dic_mean,
        abs_dic_std: abs_var.sqrt(),
        mse,
        agreement_pct: 100.0 * exact as f64 / n,
        r_squared,
        n: preds.len(),
    })
}

/// Per-source reports plus an overall row computed over the union.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceTable {
    pub rows: Vec<(String, MetricsReport)>,
    pub all: MetricsReport,
}

pub fn evaluate_by_source(preds: &[Prediction]) -> Result<SourceTable> {
    let mut groups: BTreeMap<&str, Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        groups.entry(p.source_id.as_str()).or_default().push(p.clone());
    }
    let rows = groups
        .into_iter()
        .map(|(source, group)| Ok((source.to_string(), evaluate(&group)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SourceTable { rows, all: evaluate(preds)? })
}

fn fmt_r2(r: Option<f64>) -> String {
    r.map_or_else(|| "undefined".into(), |v| format!("{v:.2}"))
}

impl SourceTable {
    fn all_rows(&self) -> impl Iterator<Item = (&str, &MetricsReport)> {
        self.rows.iter().map(|(s, r)| (s.as_str(), r)).chain(std::iter::once((ALL_ROW, &self.all)))
    }

    /// Aligned text table with `mean(std)` cells.
    pub fn to_text(&self) -> String {
        let header = ["Dataset", "n", "DiC", "|DiC|", "Agreement [%]", "MSE", "R2"];
        let body: Vec<[String; 7]> = self
            .all_rows()
            .map(|(s, r)| {
                [
                    s.to_string(),
                    r.n.to_string(),
                    format!("{:.2}({:.2})", r.dic_mean, r.dic_std),
                    format!("{:.2}({:.2})", r.abs_dic_mean, r.abs_dic_std),
                    format!("{:.1}", r.agreement_pct),
                    format!("{:.2}", r.mse),
                    fmt_r2(r.r_squared),
                ]
            })
            .collect();
        let widths: Vec<usize> =
            (0..7).map(|c| body.iter().map(|row| row[c].len()).chain([header[c].len()]).max().unwrap()).collect();
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(header.to_vec(), &mut out);
        for row in &body {
            line(row.iter().map(String::as_str).collect(), &mut out);
        }
        let _ = writeln!(out, "# std: population; R2: 1 - SS_res/SS_tot, undefined when truth variance is 0");
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["source", "n", "dic_mean", "dic_std", "abs_dic_mean", "abs_dic_std", "agreement_pct", "mse", "r_squared"])?;
        for (s, r) in self.all_rows() {
            w.write_record([
                s.to_string(),
                r.n.to_string(),
                format!("{:.6}", r.dic_mean),
                format!("{:.6}", r.dic_std),
                format!("{:.6}", r.abs_dic_mean),
                format!("{:.6}", r.abs_dic_std),
                format!("{:.6}", r.agreement_pct),
                format!("{:.6}", r.mse),
                r.r_squared.map_or_else(String::new, |v| format!("{v:.6}")),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in preds {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e: csv::Error| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Mean and population standard deviation of one metric across runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
}

impl MetricStat {
    fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std }
    }
}

/// Cross-run summary of [`MetricsReport`]s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub dic: MetricStat,
    pub abs_dic: MetricStat,
    pub mse: MetricStat,
    pub agreement_pct: MetricStat,
    /// Over the runs where R² is defined.
    pub r_squared: MetricStat,
}

impl AggregateReport {
    /// `metric,mean,std` rows plus the run count.
    pub fn to_csv(&self) -> String {
        let mut out = format!("metric,mean,std\nruns,{},0\n", self.runs);
        for (name, s) in [
            ("dic", self.dic),
            ("abs_dic", self.abs_dic),
            ("mse", self.mse),
            ("agreement_pct", self.agreement_pct),
            ("r_squared", self.r_squared),
        ] {
            out.push_str(&format!("{name},{},{}\n", s.mean, s.std));
        }
        out
    }
}

pub fn aggregate(reports: &[MetricsReport]) -> AggregateReport {
    let pick = |f: fn(&MetricsReport) -> f64| MetricStat::of(&reports.iter().map(f).collect::<Vec<_>>());
    AggregateReport {
        runs: reports.len(),
        dic: pick(|r| r.dic_mean),
        abs_dic: pick(|r| r.abs_dic_mean),
        mse: pick(|r| r.mse),
        agreement_pct: pick(|r| r.agreement_pct),
        r_squared: MetricStat::of(&reports.iter().filter_map(|r| r.r_squared).collect::<Vec<_>>()),
    }
}
