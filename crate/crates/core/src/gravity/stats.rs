use std::io::Write;

use super::dataset::GravityObservation;
use super::{N_REGRESSORS, REGRESSOR_NAMES, RESPONSE_NAME};
use crate::error::{Error, Result};
use crate::numeric::{exact_sum, fmt_fixed, ExactSum};

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variable: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub zero_variance: bool,
}

fn column(rows: &[GravityObservation], j: usize) -> impl Iterator<Item = f64> + '_ {
    rows.iter().map(move |r| if j == 0 { r.response } else { r.regressors[j - 1] })
}

fn column_name(j: usize) -> &'static str {
    if j == 0 {
        RESPONSE_NAME
    } else {
        REGRESSOR_NAMES[j - 1]
    }
}

/// N, mean, sample standard deviation, min and max of the response and every regressor.
pub fn summary_stats(rows: &[GravityObservation]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::Empty("summary statistics of an empty sample".into()));
    }
    let n = rows.len();
    Ok((0..=N_REGRESSORS)
        .map(|j| {
            let mean = exact_sum(column(rows, j)) / n as f64;
            let ss = exact_sum(column(rows, j).map(|x| (x - mean) * (x - mean)));
            let std = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
            let (min, max) = column(rows, j).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                (lo.min(x), hi.max(x))
            });
            if std == 0.0 {
                log::warn!("column {} has zero variance", column_name(j));
            }
            SummaryRow {
                variable: column_name(j).to_string(),
                n,
                mean,
                std,
                min,
                max,
                zero_variance: std == 0.0,
            }
        })
        .collect())
}

pub fn write_summary_csv<W: Write>(writer: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["statistic", "n", "mean", "st_dev", "min", "max", "zero_variance"])?;
    for r in rows {
        w.write_record([
            r.variable.clone(),
            r.n.to_string(),
            fmt_fixed(r.mean, 3),
            fmt_fixed(r.std, 3),
            fmt_fixed(r.min, 3),
            fmt_fixed(r.max, 3),
            (r.zero_variance as u8).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("summary", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.names.len() + j]
    }
}

/// Pearson correlations between the regressors (centered two-pass, exact sums).
pub fn correlation_matrix(rows: &[GravityObservation]) -> Result<CorrelationMatrix> {
    if rows.len() < 2 {
        return Err(Error::Empty("correlation needs at least two rows".into()));
    }
    correlation_of_columns(
        &REGRESSOR_NAMES.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        rows.len(),
        |i, j| rows[i].regressors[j],
    )
}

/// Correlation matrix of `names.len()` columns given by `value(row, column)`.
pub fn correlation_of_columns(
    names: &[String],
    n: usize,
    value: impl Fn(usize, usize) -> f64,
) -> Result<CorrelationMatrix> {
    let k = names.len();
    let means: Vec<f64> = (0..k)
        .map(|j| exact_sum((0..n).map(|i| value(i, j))) / n as f64)
        .collect();
    let mut cross: Vec<ExactSum> = (0..k * k).map(|_| ExactSum::new()).collect();
    let mut dev = vec![0.0; k];
    for i in 0..n {
        for (j, d) in dev.iter_mut().enumerate() {
            *d = value(i, j) - means[j];
        }
        for a in 0..k {
            for b in a..k {
                cross[a * k + b].add(dev[a] * dev[b]);
            }
        }
    }
    let var: Vec<f64> = (0..k).map(|j| cross[j * k + j].value()).collect();
    if let Some(j) = (0..k).find(|&j| !(var[j] > 0.0)) {
        return Err(Error::ZeroVariance(names[j].clone()));
    }
    let mut values = vec![0.0; k * k];
    for a in 0..k {
        values[a * k + a] = 1.0;
        for b in a + 1..k {
            let r = cross[a * k + b].value() / (var[a] * var[b]).sqrt();
            values[a * k + b] = r;
            values[b * k + a] = r;
        }
    }
    Ok(CorrelationMatrix {
        names: names.to_vec(),
        values,
    })
}

pub fn write_correlation_csv<W: Write>(writer: W, m: &CorrelationMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![String::new()];
    header.extend(m.names.iter().cloned());
    w.write_record(&header)?;
    for (i, name) in m.names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend((0..m.names.len()).map(|j| fmt_fixed(m.get(i, j), 3)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("correlation", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_positive_and_negative_correlation() {
        let xs = [1.0, 4.0, 2.0, 8.0, 5.0];
        let m = correlation_of_columns(&named(3), 5, |i, j| match j {
            0 => xs[i],
            1 => xs[i],
            _ => -xs[i],
        })
        .unwrap();
        assert!((m.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((m.get(0, 2) + 1.0).abs() < 1e-15);
        assert_eq!(m.get(2, 2), 1.0);
    }

    #[test]
    fn constant_column_is_an_error() {
        let err = correlation_of_columns(&named(2), 4, |i, j| if j == 0 { i as f64 } else { 3.0 }).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance(name) if name == "c1"));
    }

    #[test]
    fn summary_of_a_binary_column() {
        let rows: Vec<GravityObservation> = (0..4)
            .map(|i| {
                let mut regressors = [1.0; N_REGRESSORS];
                regressors[11] = (i % 2) as f64;
                GravityObservation {
                    year: 2000,
                    origin: 0,
                    product: 0,
                    destination: 1,
                    response: i as f64,
                    regressors,
                }
            })
            .collect();
        let s = summary_stats(&rows).unwrap();
        let border = &s[12];
        assert_eq!(border.variable, "border");
        assert_eq!((border.min, border.max, border.mean), (0.0, 1.0, 0.5));
        assert!(s[1].zero_variance);
        assert_eq!(s[0].variable, RESPONSE_NAME);
        assert!(summary_stats(&[]).is_err());
    }
}
