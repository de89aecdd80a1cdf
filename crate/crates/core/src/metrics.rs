//! SI-SDR, SI-SDRi and aggregate reporting.
//!
//! Both signals are made zero-mean before the projection. Scores are clamped
//! to `[-100, 100]` dB so that perfect (or fully orthogonal) estimates stay
//! finite.
//!
//! Reports are line-delimited JSON. Field order is fixed:
//!
//! ```text
//! {"type":"row","id":..,"si_sdr":..,"si_sdri":..,"similarity":..,"extra":{..}}
//! {"type":"failed","id":..,"error":..}
//! {"type":"summary","stratum":"all","count":..,"si_sdr_mean":..,"si_sdr_std":..,
//!  "si_sdr_median":..,"si_sdri_mean":..,"si_sdri_std":..,"si_sdri_median":..}
//! ```
//!
//! `similarity` is `null` when unknown and `extra` is omitted when empty.
//! Summary lines follow all rows: `all`, then, when a threshold is set,
//! `above` (similarity > threshold) and `at_or_below` with an extra
//! `"threshold"` field. Standard deviations are population values (divide
//! by `n`).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitude bound on reported SI-SDR values in dB.
pub const SI_SDR_CAP_DB: f64 = 100.0;

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant signal-to-distortion ratio of `estimate` against
/// `reference`, in dB.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::shape(reference.len(), estimate.len()));
    }
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    if reference.iter().chain(estimate).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("si-sdr input"));
    }
    let r = zero_mean(reference);
    let e = zero_mean(estimate);
    let rr = dot(&r, &r);
    if rr == 0.0 {
        return Err(Error::InvalidInput("si-sdr reference is zero".into()));
    }
    let alpha = dot(&e, &r) / rr;
    let target: Vec<f64> = r.iter().map(|v| alpha * v).collect();
    let tt = dot(&target, &target);
    let err: f64 = e.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum();
    let db = if err == 0.0 {
        SI_SDR_CAP_DB
    } else if tt == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (tt / err).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// `si_sdr(reference, estimate) - si_sdr(reference, mixture)`.
pub fn si_sdri(reference: &[f64], estimate: &[f64], mixture: &[f64]) -> Result<f64> {
    if mixture.len() != reference.len() {
        return Err(Error::shape(reference.len(), mixture.len()));
    }
    Ok(si_sdr(reference, estimate)? - si_sdr(reference, mixture)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub si_sdr: f64,
    pub si_sdri: f64,
    pub similarity: Option<f64>,
    /// Additional metric columns from external tools.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRow {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("metric rows"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            mean,
            std,
            median: median(values),
        })
    }
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub count: usize,
    pub si_sdr: Stats,
    pub si_sdri: Stats,
}

impl Aggregate {
    fn of(rows: &[&MetricRow]) -> Result<Self> {
        let a: Vec<f64> = rows.iter().map(|r| r.si_sdr).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.si_sdri).collect();
        Ok(Self {
            count: rows.len(),
            si_sdr: Stats::of(&a)?,
            si_sdri: Stats::of(&b)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Strata {
    pub threshold: f64,
    /// Rows with similarity above the threshold; `None` if there are none.
    pub above: Option<Aggregate>,
    pub at_or_below: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub failures: Vec<FailedRow>,
    pub overall: Aggregate,
    pub strata: Option<Strata>,
}

/// Aggregates rows; with a threshold, rows with a known similarity are also
/// split into `> threshold` and `<= threshold` strata.
pub fn aggregate(rows: Vec<MetricRow>, similarity_threshold: Option<f64>) -> Result<MetricReport> {
    let all: Vec<&MetricRow> = rows.iter().collect();
    let overall = Aggregate::of(&all)?;
    let strata = similarity_threshold.map(|th| {
        let above: Vec<&MetricRow> = rows.iter().filter(|r| r.similarity.is_some_and(|s| s > th)).collect();
        let below: Vec<&MetricRow> = rows.iter().filter(|r| r.similarity.is_some_and(|s| s <= th)).collect();
        Strata {
            threshold: th,
            above: Aggregate::of(&above).ok(),
            at_or_below: Aggregate::of(&below).ok(),
        }
    });
    Ok(MetricReport {
        rows,
        failures: Vec::new(),
        overall,
        strata,
    })
}

#[derive(Serialize)]
struct RowLine<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(flatten)]
    row: &'a MetricRow,
}

#[derive(Serialize)]
struct FailedLine<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(flatten)]
    row: &'a FailedRow,
}

#[derive(Serialize)]
struct SummaryLine {
    #[serde(rename = "type")]
    kind: &'static str,
    stratum: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    count: usize,
    si_sdr_mean: f64,
    si_sdr_std: f64,
    si_sdr_median: f64,
    si_sdri_mean: f64,
    si_sdri_std: f64,
    si_sdri_median: f64,
}

impl SummaryLine {
    fn new(stratum: &'static str, threshold: Option<f64>, a: &Aggregate) -> Self {
        Self {
            kind: "summary",
            stratum,
            threshold,
            count: a.count,
            si_sdr_mean: a.si_sdr.mean,
            si_sdr_std: a.si_sdr.std,
            si_sdr_median: a.si_sdr.median,
            si_sdri_mean: a.si_sdri.mean,
            si_sdri_std: a.si_sdri.std,
            si_sdri_median: a.si_sdri.median,
        }
    }
}

impl MetricReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |v: String| {
            let _ = writeln!(out, "{v}");
        };
        for r in &self.rows {
            line(json(&RowLine { kind: "row", row: r }));
        }
        for f in &self.failures {
            line(json(&FailedLine { kind: "failed", row: f }));
        }
        line(json(&SummaryLine::new("all", None, &self.overall)));
        if let Some(s) = &self.strata {
            if let Some(a) = &s.above {
                line(json(&SummaryLine::new("above", Some(s.threshold), a)));
            }
            if let Some(a) = &s.at_or_below {
                line(json(&SummaryLine::new("at_or_below", Some(s.threshold), a)));
            }
        }
        out
    }

    /// Human-readable summary table.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let mut row = |name: &str, a: &Aggregate| {
            let _ = writeln!(
                out,
                "{name:<14} n={:<4} SI-SDR {:>7.2} ± {:<6.2} (median {:>7.2})  SI-SDRi {:>7.2} ± {:<6.2} (median {:>7.2})",
                a.count, a.si_sdr.mean, a.si_sdr.std, a.si_sdr.median, a.si_sdri.mean, a.si_sdri.std, a.si_sdri.median
            );
        };
        row("all", &self.overall);
        if let Some(s) = &self.strata {
            if let Some(a) = &s.above {
                row(&format!("> {}", s.threshold), a);
            }
            if let Some(a) = &s.at_or_below {
                row(&format!("<= {}", s.threshold), a);
            }
        }
        if !self.failures.is_empty() {
            let _ = writeln!(out, "failed rows: {}", self.failures.len());
        }
        out
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("report line serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row(id: &str, a: f64, b: f64, s: Option<f64>) -> MetricRow {
        MetricRow {
            id: id.into(),
            si_sdr: a,
            si_sdri: b,
            similarity: s,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn si_sdr_examples() {
        let r: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP_DB);
        let doubled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&r, &doubled).unwrap(), si_sdr(&r, &r).unwrap());
        // Orthogonal zero-mean noise with 1% of the reference energy.
        let r = [1.0, -1.0, 1.0, -1.0];
        let n = [0.1, 0.1, -0.1, -0.1];
        let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert_abs_diff_eq!(si_sdr(&r, &est).unwrap(), 20.0, epsilon = 1e-9);
        let neg: Vec<f64> = est.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(si_sdr(&r, &neg).unwrap(), 20.0, epsilon = 1e-9);
        assert!(si_sdr(&[0.0; 4], &r).is_err());
        assert!(si_sdr(&r, &r[..3]).is_err());
    }

    #[test]
    fn si_sdri_examples() {
        let r = [1.0, -1.0, 1.0, -1.0];
        let mix = [1.3, -0.2, 0.9, -1.5];
        assert_eq!(si_sdri(&r, &mix, &mix).unwrap(), 0.0);
        let cap = si_sdri(&r, &r, &mix).unwrap();
        assert_abs_diff_eq!(cap, SI_SDR_CAP_DB - si_sdr(&r, &mix).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let rep = aggregate(vec![row("a", 10.0, 1.0, None), row("b", 14.0, 3.0, None)], None).unwrap();
        assert_eq!(rep.overall.si_sdr.mean, 12.0);
        assert_eq!(rep.overall.si_sdr.std, 2.0);
        let single = aggregate(vec![row("a", 7.0, 1.0, None)], None).unwrap();
        assert_eq!(single.overall.si_sdr.std, 0.0);
        assert!(aggregate(vec![], None).is_err());
    }

    #[test]
    fn threshold_strata() {
        let rows = vec![
            row("a", 10.0, 1.0, Some(0.1)),
            row("b", 12.0, 2.0, Some(0.15)),
            row("c", 14.0, 3.0, Some(0.4)),
        ];
        let rep = aggregate(rows, Some(0.15)).unwrap();
        let s = rep.strata.as_ref().unwrap();
        assert_eq!(s.above.unwrap().count, 1);
        assert_eq!(s.at_or_below.unwrap().count, 2);
        let text = rep.to_jsonl();
        assert_eq!(text.lines().filter(|l| l.contains("\"summary\"")).count(), 3);
        assert!(text.lines().next().unwrap().starts_with("{\"type\":\"row\",\"id\":\"a\",\"si_sdr\":10.0"));
    }

    #[test]
    fn aggregates_recompute_from_emitted_rows() {
        let rows: Vec<MetricRow> = (0..7).map(|i| row(&i.to_string(), 0.1 * i as f64 + 1.0 / 3.0, (i as f64).sqrt(), None)).collect();
        let rep = aggregate(rows, None).unwrap();
        let parsed: Vec<MetricRow> = rep
            .to_jsonl()
            .lines()
            .filter(|l| l.contains("\"row\""))
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let again = aggregate(parsed, None).unwrap();
        assert_eq!(again.to_jsonl(), rep.to_jsonl());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
