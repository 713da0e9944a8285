use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::ols::RegressionResult;
use super::report::RegressionReport;
use crate::error::{Error, Result};
use crate::numeric::fmt_fixed;

const SIGNIFICANCE: f64 = 0.1;
const N_CATEGORIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendResult {
    pub intercept: f64,
    pub slope: f64,
    pub se: f64,
    pub p: f64,
    pub significant: bool,
}

/// Weighted least-squares line of coefficient on category rank 1..=5 with
/// weights `1/SE²`; the slope variance is scaled by the weighted residual
/// variance on 3 degrees of freedom. Significant iff the two-sided `p < 0.1`.
pub fn trend_test(points: &[(f64, f64)]) -> Result<TrendResult> {
    if points.len() != N_CATEGORIES {
        return Err(Error::InvalidArgument(format!(
            "trend test needs exactly {N_CATEGORIES} (coefficient, se) pairs, got {}",
            points.len()
        )));
    }
    if let Some(&(_, se)) = points.iter().find(|(_, se)| !(*se > 0.0)) {
        return Err(Error::InvalidArgument(format!("standard errors must be positive, got {se}")));
    }
    let x: Vec<f64> = (1..=N_CATEGORIES).map(|r| r as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.0).collect();
    let w: Vec<f64> = points.iter().map(|p| 1.0 / (p.1 * p.1)).collect();
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(w, x)| w * (x - xm) * (x - xm)).sum();
    let sxy: f64 = (0..N_CATEGORIES).map(|i| w[i] * (x[i] - xm) * (y[i] - ym)).sum();
    let syy: f64 = (0..N_CATEGORIES).map(|i| w[i] * (y[i] - ym) * (y[i] - ym)).sum();

    let y_scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let flat = y.iter().all(|v| (v - y[0]).abs() <= 1e-12 * y_scale.max(f64::MIN_POSITIVE));
    let slope = if flat { 0.0 } else { sxy / sxx };
    let intercept = ym - slope * xm;
    let rss = (0..N_CATEGORIES)
        .map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2))
        .sum::<f64>();
    let df = (N_CATEGORIES - 2) as f64;

    let (se, p) = if flat {
        (0.0, 1.0)
    } else if rss <= 1e-24 * syy {
        // Exact line: zero residual variance.
        (0.0, 0.0)
    } else {
        let se = (rss / df / sxx).sqrt();
        let t = slope / se;
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (se, (2.0 * dist.cdf(-t.abs())).min(1.0))
    };
    Ok(TrendResult {
        intercept,
        slope,
        se,
        p,
        significant: p < SIGNIFICANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub variable: String,
    pub trend: TrendResult,
}

/// One trend per coefficient across five results ordered by sophistication.
pub fn trend_table(results: &[(String, RegressionResult)]) -> Result<Vec<TrendRow>> {
    let cells: Vec<NamedCoefficients<'_>> = results
        .iter()
        .map(|(key, r)| {
            let coefs = r.coefficients.iter().map(|c| (c.name.as_str(), c.beta, c.se)).collect();
            (key.as_str(), coefs)
        })
        .collect();
    trend_rows(&cells)
}

/// [`trend_table`] over serialized reports.
pub fn trend_table_reports(reports: &[RegressionReport]) -> Result<Vec<TrendRow>> {
    let cells: Vec<NamedCoefficients<'_>> = reports
        .iter()
        .map(|r| {
            let coefs = r.coefficients.iter().map(|c| (c.name.as_str(), c.beta, c.se)).collect();
            (r.split_key.as_str(), coefs)
        })
        .collect();
    trend_rows(&cells)
}

type NamedCoefficients<'a> = (&'a str, Vec<(&'a str, f64, f64)>);

fn trend_rows(cells: &[NamedCoefficients<'_>]) -> Result<Vec<TrendRow>> {
    if cells.len() != N_CATEGORIES {
        return Err(Error::InvalidArgument(format!(
            "trend table needs {N_CATEGORIES} category results, got {}",
            cells.len()
        )));
    }
    cells[0]
        .1
        .iter()
        .map(|&(name, _, _)| {
            let points = cells
                .iter()
                .map(|(key, coefs)| {
                    coefs
                        .iter()
                        .find(|c| c.0 == name)
                        .map(|c| (c.1, c.2))
                        .ok_or_else(|| Error::InvalidArgument(format!("result {key} lacks coefficient {name}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrendRow {
                variable: name.to_string(),
                trend: trend_test(&points)?,
            })
        })
        .collect()
}

pub fn write_trend_csv<W: Write>(writer: W, rows: &[TrendRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "slope", "se", "p", "significant"])?;
    for r in rows {
        w.write_record([
            r.variable.clone(),
            fmt_fixed(r.trend.slope, 6),
            fmt_fixed(r.trend.se, 6),
            fmt_fixed(r.trend.p, 6),
            r.trend.significant.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("trend", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_coefficients_have_no_trend() {
        let r = trend_test(&[(0.183, 0.002); 5]).unwrap();
        assert_eq!(r.slope, 0.0);
        assert!(!r.significant);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn exact_line_is_significant() {
        let pts: Vec<(f64, f64)> = (1..=5).map(|r| (0.1 + 0.02 * r as f64, 1e-6)).collect();
        let r = trend_test(&pts).unwrap();
        assert!((r.slope - 0.02).abs() < 1e-12);
        assert!(r.p < 1e-6);
        assert!(r.significant);
    }

    #[test]
    fn invalid_inputs() {
        assert!(trend_test(&[(0.1, 0.01); 4]).is_err());
        assert!(trend_test(&[(0.1, 0.01), (0.1, 0.0), (0.1, 0.01), (0.1, 0.01), (0.1, 0.01)]).is_err());
    }
}
