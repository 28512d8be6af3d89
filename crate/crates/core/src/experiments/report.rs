use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{fit_rate, Study, ROUNDING_FLOOR};
use crate::model::Scenario;
use crate::numeric::fsum;
use crate::{Error, Result};

/// Column header of the per-point CSV.
pub const CSV_HEADER: [&str; 6] = ["study", "N", "reps", "err_mean", "err_std", "excluded"];

/// One N of a study. `err_std` is the standard deviation across repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    #[serde(rename = "N")]
    pub n: usize,
    pub reps: usize,
    pub err_mean: f64,
    pub err_std: f64,
    pub excluded: bool,
}

/// A statistic measured for every N, with its fitted slope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<PointSummary>,
    pub slope: Option<f64>,
    pub ci: Option<[f64; 2]>,
    pub band: Option<[f64; 2]>,
    /// Points at or below this mean error are excluded from the fit.
    pub floor: f64,
    /// Whether this series counts towards the study's verdict.
    pub asserted: bool,
    pub pass: bool,
    pub note: Option<String>,
}

impl Series {
    /// Summarises per-repetition values `(N, values)` and fits the slope on
    /// the points above `floor` (raised to [`ROUNDING_FLOOR`]). Without a band
    /// the series always passes.
    pub fn fit(
        name: impl Into<String>,
        per_n: &[(usize, Vec<f64>)],
        floor: f64,
        band: Option<(f64, f64)>,
        asserted: bool,
    ) -> Series {
        let floor = floor.max(ROUNDING_FLOOR);
        let mut points: Vec<PointSummary> = per_n
            .iter()
            .map(|(n, vals)| {
                let reps = vals.len();
                let mean = fsum(vals.iter().copied()) / reps as f64;
                let std = if reps > 1 {
                    (fsum(vals.iter().map(|v| (v - mean).powi(2))) / (reps - 1) as f64).sqrt()
                } else {
                    0.0
                };
                PointSummary {
                    n: *n,
                    reps,
                    err_mean: mean,
                    err_std: std,
                    excluded: false,
                }
            })
            .collect();
        let input: Vec<(usize, f64, f64)> = points
            .iter()
            .map(|p| (p.n, p.err_mean, p.err_std / (p.reps as f64).sqrt()))
            .collect();
        let (slope, ci, note) = match fit_rate(&input, floor) {
            Ok(fit) => {
                for (p, used) in points.iter_mut().zip(&fit.used) {
                    p.excluded = !used;
                }
                (Some(fit.slope), Some([fit.ci.0, fit.ci.1]), None)
            }
            Err(e) => {
                for p in points.iter_mut() {
                    p.excluded = !(p.err_mean > floor.max(0.0));
                }
                (None, None, Some(e.to_string()))
            }
        };
        let pass = match (band, slope) {
            (None, _) => true,
            (Some((lo, hi)), Some(b)) => (lo..=hi).contains(&b),
            (Some(_), None) => false,
        };
        Series {
            name: name.into(),
            points,
            slope,
            ci,
            band: band.map(|(lo, hi)| [lo, hi]),
            floor,
            asserted,
            pass,
            note,
        }
    }

    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.err_mean).collect()
    }
}

/// A named yes/no property of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub study: Study,
    pub n_list: Vec<usize>,
    pub points: Vec<PointSummary>,
    pub slope: Option<f64>,
    pub ci: Option<[f64; 2]>,
    pub band: [f64; 2],
    /// Points whose mean error is at or below this value are excluded from the fit.
    pub floor: f64,
    pub pass: bool,
    pub runtime_s: f64,
    pub seed: u64,
    pub config_digest: String,
    pub overrides: Vec<String>,
    pub secondary: Vec<Series>,
    pub checks: Vec<Check>,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
}

impl ConvergenceReport {
    pub(crate) fn assemble(
        study: Study,
        s: &Scenario,
        n_list: &[usize],
        primary: Series,
        secondary: Vec<Series>,
        checks: Vec<Check>,
        warnings: Vec<String>,
        started: Instant,
    ) -> Self {
        let band = primary.band.unwrap_or([f64::NEG_INFINITY, f64::INFINITY]);
        let mut failures = Vec::new();
        for series in std::iter::once(&primary).chain(&secondary) {
            if series.asserted && !series.pass {
                failures.push(match (series.slope, series.band) {
                    (Some(b), Some([lo, hi])) => format!("{}: slope {b:.3} outside [{lo}, {hi}]", series.name),
                    _ => format!(
                        "{}: no slope ({})",
                        series.name,
                        series.note.as_deref().unwrap_or("fit failed")
                    ),
                });
            }
        }
        for c in &checks {
            if !c.pass {
                failures.push(format!("{}: {}", c.name, c.detail));
            }
        }
        ConvergenceReport {
            study,
            n_list: n_list.to_vec(),
            points: primary.points.clone(),
            slope: primary.slope,
            ci: primary.ci,
            band,
            floor: primary.floor,
            pass: failures.is_empty(),
            runtime_s: started.elapsed().as_secs_f64(),
            seed: s.seed,
            config_digest: s.digest(),
            overrides: Vec::new(),
            secondary,
            checks,
            failures,
            warnings,
        }
    }

    pub fn series(&self, name: &str) -> Option<&Series> {
        self.secondary.iter().find(|s| s.name == name)
    }
}

/// CSV rows: the primary statistic under the study name, then every
/// secondary series as `study:series`.
pub fn csv_rows(report: &ConvergenceReport) -> Vec<[String; 6]> {
    let row = |label: &str, p: &PointSummary| {
        [
            label.to_string(),
            p.n.to_string(),
            p.reps.to_string(),
            p.err_mean.to_string(),
            p.err_std.to_string(),
            p.excluded.to_string(),
        ]
    };
    let name = report.study.name();
    let mut rows: Vec<[String; 6]> = report.points.iter().map(|p| row(name, p)).collect();
    for series in &report.secondary {
        let label = format!("{name}:{}", series.name);
        rows.extend(series.points.iter().map(|p| row(&label, p)));
    }
    rows
}

pub fn write_csv<W: Write>(report: &ConvergenceReport, out: W) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in csv_rows(report) {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_summary_and_fit() {
        let per_n: Vec<(usize, Vec<f64>)> = [8usize, 16, 32].iter().map(|&n| (n, vec![0.9 / n as f64, 1.1 / n as f64])).collect();
        let s = Series::fit("x", &per_n, 0.0, Some((-1.1, -0.9)), true);
        assert!(s.pass);
        assert!((s.slope.unwrap() + 1.0).abs() < 1e-12);
        assert!((s.points[0].err_mean - 0.125).abs() < 1e-15);
        assert_eq!(s.points[0].reps, 2);
        let s = Series::fit("y", &per_n[..2], 0.0, Some((-1.1, -0.9)), true);
        assert!(!s.pass && s.slope.is_none() && s.note.is_some());
    }

    #[test]
    fn csv_is_stable() {
        let per_n: Vec<(usize, Vec<f64>)> = vec![(8, vec![0.5]), (16, vec![0.25]), (32, vec![0.125])];
        let primary = Series::fit("primary", &per_n, 0.0, Some((-1.35, -0.65)), true);
        let r = ConvergenceReport::assemble(
            Study::Forward,
            &Scenario::default(),
            &[8, 16, 32],
            primary,
            vec![],
            vec![],
            vec![],
            Instant::now(),
        );
        let mut a = Vec::new();
        write_csv(&r, &mut a).unwrap();
        let text = String::from_utf8(a).unwrap();
        assert_eq!(
            text,
            "study,N,reps,err_mean,err_std,excluded\nforward,8,1,0.5,0,false\nforward,16,1,0.25,0,false\nforward,32,1,0.125,0,false\n"
        );
    }
}
