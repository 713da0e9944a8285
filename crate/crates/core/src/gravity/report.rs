use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::ols::RegressionResult;
use crate::error::{Error, Result};
use crate::numeric::fmt_fixed;

const DECIMALS: i32 = 6;

fn round6(x: f64) -> f64 {
    let scale = 10f64.powi(DECIMALS);
    let r = (x * scale).round() / scale;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCoefficient {
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
}

/// Serialized form of one fitted split cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub split_key: String,
    pub n: usize,
    pub adj_r2: f64,
    pub resid_se: f64,
    pub coefficients: Vec<ReportCoefficient>,
}

impl RegressionReport {
    pub fn new(split_key: &str, r: &RegressionResult) -> Self {
        let clamp = |t: f64| if t.is_finite() { round6(t) } else { f64::MAX.copysign(t) };
        RegressionReport {
            split_key: split_key.to_string(),
            n: r.n,
            adj_r2: round6(r.adj_r_squared),
            resid_se: round6(r.resid_se),
            coefficients: r
                .coefficients
                .iter()
                .map(|c| ReportCoefficient {
                    name: c.name.clone(),
                    beta: round6(c.beta),
                    se: round6(c.se),
                    t: clamp(c.t),
                    p: round6(c.p),
                })
                .collect(),
        }
    }
}

pub fn write_reports_json<W: Write>(writer: W, reports: &[RegressionReport]) -> Result<()> {
    let mut writer = writer;
    serde_json::to_writer_pretty(&mut writer, reports)?;
    writer.write_all(b"\n").map_err(|e| Error::io("regression json", e))?;
    Ok(())
}

pub fn read_reports_json<R: Read>(reader: R) -> Result<Vec<RegressionReport>> {
    Ok(serde_json::from_reader(reader)?)
}

fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Regression table: one column per split cell, coefficient rows followed by
/// their parenthesized standard errors, then sample size and fit statistics.
pub fn regression_table_csv<W: Write>(writer: W, reports: &[RegressionReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["variable".to_string()];
    header.extend(reports.iter().map(|r| r.split_key.clone()));
    w.write_record(&header)?;
    let Some(first) = reports.first() else {
        w.flush().map_err(|e| Error::io("regression table", e))?;
        return Ok(());
    };
    for (i, coef) in first.coefficients.iter().enumerate() {
        let mut beta_row = vec![coef.name.clone()];
        let mut se_row = vec![String::new()];
        for r in reports {
            let c = &r.coefficients[i];
            beta_row.push(format!("{}{}", fmt_fixed(c.beta, 6), stars(c.p)));
            se_row.push(format!("({})", fmt_fixed(c.se, 6)));
        }
        w.write_record(&beta_row)?;
        w.write_record(&se_row)?;
    }
    let mut footer = |label: &str, f: &dyn Fn(&RegressionReport) -> String| -> Result<()> {
        let mut row = vec![label.to_string()];
        row.extend(reports.iter().map(f));
        w.write_record(&row)?;
        Ok(())
    };
    footer("Observations", &|r| r.n.to_string())?;
    footer("Adjusted R2", &|r| fmt_fixed(r.adj_r2, 6))?;
    footer("Residual Std. Error", &|r| fmt_fixed(r.resid_se, 6))?;
    w.flush().map_err(|e| Error::io("regression table", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gravity::Coefficient;

    fn result() -> RegressionResult {
        RegressionResult {
            coefficients: vec![
                Coefficient { name: "intercept".into(), beta: 9.7123456789, se: 0.0201, t: 483.2, p: 0.0 },
                Coefficient { name: "omega".into(), beta: 0.0421, se: 0.03, t: 1.4, p: 0.07 },
            ],
            n: 1000,
            k: 2,
            r_squared: 0.5,
            adj_r_squared: 0.4995,
            resid_se: 2.874,
            rss: 1.0,
            tss: 2.0,
        }
    }

    #[test]
    fn json_uses_six_decimals_and_round_trips() {
        let report = RegressionReport::new("2000-2006", &result());
        assert_eq!(report.coefficients[0].beta, 9.712346);
        let mut buf = Vec::new();
        write_reports_json(&mut buf, std::slice::from_ref(&report)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"split_key\": \"2000-2006\""));
        assert_eq!(read_reports_json(buf.as_slice()).unwrap(), vec![report]);
    }

    #[test]
    fn table_layout() {
        let report = RegressionReport::new("PP", &result());
        let mut buf = Vec::new();
        regression_table_csv(&mut buf, &[report]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "variable,PP");
        assert_eq!(lines[1], "intercept,9.712346***");
        assert_eq!(lines[2], ",(0.020100)");
        assert_eq!(lines[3], "omega,0.042100*");
        assert_eq!(lines[5], "Observations,1000");
    }
}
