use serde::{Deserialize, Serialize};

use super::dataset::{GravityObservation, RowSource};
use super::{is_binary, N_REGRESSORS, REGRESSOR_NAMES, RESPONSE_NAME};
use crate::error::{Error, Result};
use crate::numeric::ExactSum;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

impl ColumnScale {
    #[inline]
    fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Per-column mean and sample standard deviation of a regression sample.
/// Binary columns carry `None` and are left untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationSpec {
    pub regressors: Vec<Option<ColumnScale>>,
    pub response: Option<ColumnScale>,
}

impl StandardizationSpec {
    /// Two exact passes over `source`: means, then squared deviations.
    pub fn fit<S: RowSource + ?Sized>(source: &S, standardize_response: bool) -> Result<Self> {
        let mut n = 0usize;
        let mut sums: Vec<ExactSum> = (0..=N_REGRESSORS).map(|_| ExactSum::new()).collect();
        source.for_each_chunk(&mut |rows| {
            for r in rows {
                n += 1;
                sums[0].add(r.response);
                for (s, &x) in sums[1..].iter_mut().zip(&r.regressors) {
                    s.add(x);
                }
            }
            Ok(())
        })?;
        if n < 2 {
            return Err(Error::Empty(format!(
                "standardization needs at least two rows, got {n}"
            )));
        }
        let means: Vec<f64> = sums.iter().map(|s| s.value() / n as f64).collect();

        let mut squares: Vec<ExactSum> = (0..=N_REGRESSORS).map(|_| ExactSum::new()).collect();
        source.for_each_chunk(&mut |rows| {
            for r in rows {
                let d = r.response - means[0];
                squares[0].add(d * d);
                for (j, (s, &x)) in squares[1..].iter_mut().zip(&r.regressors).enumerate() {
                    let d = x - means[j + 1];
                    s.add(d * d);
                }
            }
            Ok(())
        })?;
        let stds: Vec<f64> = squares
            .iter()
            .map(|s| (s.value() / (n - 1) as f64).sqrt())
            .collect();

        let scale = |name: &str, i: usize| -> Result<ColumnScale> {
            if !(stds[i] > 0.0) {
                return Err(Error::ZeroVariance(name.to_string()));
            }
            Ok(ColumnScale {
                name: name.to_string(),
                mean: means[i],
                std: stds[i],
            })
        };
        let regressors = (0..N_REGRESSORS)
            .map(|j| {
                if is_binary(j) {
                    Ok(None)
                } else {
                    scale(REGRESSOR_NAMES[j], j + 1).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let response = if standardize_response {
            Some(scale(RESPONSE_NAME, 0)?)
        } else {
            None
        };
        Ok(StandardizationSpec {
            regressors,
            response,
        })
    }

    /// The identity transform.
    pub fn identity() -> Self {
        StandardizationSpec {
            regressors: vec![None; N_REGRESSORS],
            response: None,
        }
    }

    #[inline]
    pub fn apply(&self, obs: &GravityObservation) -> GravityObservation {
        let mut out = *obs;
        for (x, scale) in out.regressors.iter_mut().zip(&self.regressors) {
            if let Some(s) = scale {
                *x = s.apply(*x);
            }
        }
        if let Some(s) = &self.response {
            out.response = s.apply(out.response);
        }
        out
    }
}

/// Z-scores every continuous regressor (and optionally the response) using
/// the sample's own mean and `n - 1` standard deviation.
pub fn standardize(
    rows: &[GravityObservation],
    standardize_response: bool,
) -> Result<(Vec<GravityObservation>, StandardizationSpec)> {
    let spec = StandardizationSpec::fit(rows, standardize_response)?;
    Ok((rows.iter().map(|r| spec.apply(r)).collect(), spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_from(column: usize, values: &[f64]) -> Vec<GravityObservation> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut regressors = [0.0; N_REGRESSORS];
                for (j, x) in regressors.iter_mut().enumerate() {
                    *x = if is_binary(j) { (i % 2) as f64 } else { (i * (j + 1)) as f64 + (j as f64).sin() * (i * i) as f64 };
                }
                regressors[column] = v;
                GravityObservation {
                    year: 2000,
                    origin: 0,
                    product: 0,
                    destination: 1,
                    response: i as f64 * 0.5 + 3.0,
                    regressors,
                }
            })
            .collect()
    }

    #[test]
    fn column_one_two_three_becomes_minus_one_zero_one() {
        let rows = rows_from(0, &[1.0, 2.0, 3.0]);
        let (z, spec) = standardize(&rows, false).unwrap();
        let col: Vec<f64> = z.iter().map(|r| r.regressors[0]).collect();
        assert_eq!(col, vec![-1.0, 0.0, 1.0]);
        assert_eq!(spec.regressors[0].as_ref().unwrap().std, 1.0);
        // Response stays in log levels unless requested.
        assert_eq!(z[0].response, rows[0].response);
    }

    #[test]
    fn binary_columns_are_untouched() {
        let rows = rows_from(11, &[0.0, 1.0, 1.0]);
        let (z, spec) = standardize(&rows, true).unwrap();
        assert!(spec.regressors[11].is_none());
        let col: Vec<f64> = z.iter().map(|r| r.regressors[11]).collect();
        assert_eq!(col, vec![0.0, 1.0, 1.0]);
        assert!(spec.response.is_some());
    }

    #[test]
    fn zero_variance_column_is_named() {
        let rows = rows_from(4, &[7.0, 7.0, 7.0]);
        match standardize(&rows, false) {
            Err(Error::ZeroVariance(name)) => assert_eq!(name, "log_x_op"),
            other => panic!("expected zero-variance error, got {other:?}"),
        }
    }

    #[test]
    fn standardization_is_idempotent_and_exact() {
        let rows = rows_from(2, &[0.3, 0.9, 0.1, 0.45, 0.77, 0.2]);
        let (z, _) = standardize(&rows, true).unwrap();
        let (zz, spec) = standardize(&z, true).unwrap();
        for (a, b) in z.iter().zip(&zz) {
            for j in 0..N_REGRESSORS {
                assert!((a.regressors[j] - b.regressors[j]).abs() < 1e-9);
            }
        }
        for s in spec.regressors.iter().flatten() {
            assert!(s.mean.abs() < 1e-9, "{} mean {}", s.name, s.mean);
            assert!((s.std - 1.0).abs() < 1e-9, "{} std {}", s.name, s.std);
        }
    }
}
