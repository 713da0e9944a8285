use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::dataset::{GravityObservation, RowSource};
use super::standardize::StandardizationSpec;
use super::{coefficient_names, N_REGRESSORS};
use crate::error::{Error, Result};
use crate::numeric::ExactSum;

/// Smallest admissible pivot of the unit-diagonal scaled Gram matrix.
const SINGULAR_TOL: f64 = 1e-10;

/// Single-pass accumulator of `X'X`, `X'y`, `y'y` and `Σy` with an implicit
/// leading intercept column.
///
/// Every entry is an exact sum, so the state after any sequence of
/// [`add`](Self::add) and [`merge`](Self::merge) calls depends only on the
/// multiset of rows: partitioning and ordering cannot change a single bit.
/// Memory is `O(k²)` regardless of the number of rows.
#[derive(Debug, Clone)]
pub struct OlsAccumulator {
    k: usize,
    n: usize,
    xtx: Vec<ExactSum>,
    xty: Vec<ExactSum>,
    yty: ExactSum,
    y_sum: ExactSum,
    scratch: Vec<f64>,
}

impl OlsAccumulator {
    /// `slopes` regressors plus the intercept.
    pub fn new(slopes: usize) -> Self {
        let k = slopes + 1;
        OlsAccumulator {
            k,
            n: 0,
            xtx: (0..k * (k + 1) / 2).map(|_| ExactSum::new()).collect(),
            xty: (0..k).map(|_| ExactSum::new()).collect(),
            yty: ExactSum::new(),
            y_sum: ExactSum::new(),
            scratch: vec![0.0; k],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, x: &[f64], y: f64) {
        debug_assert_eq!(x.len() + 1, self.k);
        self.scratch[0] = 1.0;
        self.scratch[1..].copy_from_slice(x);
        let mut idx = 0;
        for i in 0..self.k {
            let zi = self.scratch[i];
            for j in i..self.k {
                self.xtx[idx].add_product(zi, self.scratch[j]);
                idx += 1;
            }
            self.xty[i].add_product(zi, y);
        }
        self.yty.add_product(y, y);
        self.y_sum.add(y);
        self.n += 1;
    }

    pub fn merge(&mut self, other: &OlsAccumulator) {
        assert_eq!(self.k, other.k, "merging accumulators of different width");
        for (a, b) in self.xtx.iter_mut().zip(&other.xtx) {
            a.merge(b);
        }
        for (a, b) in self.xty.iter_mut().zip(&other.xty) {
            a.merge(b);
        }
        self.yty.merge(&other.yty);
        self.y_sum.merge(&other.y_sum);
        self.n += other.n;
    }

    /// Heap bytes held by the accumulator; independent of `n`.
    pub fn memory_bytes(&self) -> usize {
        (self.xtx.len() + self.xty.len() + 2) * (ExactSum::HEAP_BYTES + std::mem::size_of::<ExactSum>())
            + self.scratch.len() * 8
    }

    /// `X'X` as a dense symmetric `k × k` matrix.
    pub fn gram(&self) -> Vec<f64> {
        let k = self.k;
        let mut a = vec![0.0; k * k];
        let mut idx = 0;
        for i in 0..k {
            for j in i..k {
                let v = self.xtx[idx].value();
                a[i * k + j] = v;
                a[j * k + i] = v;
                idx += 1;
            }
        }
        a
    }

    fn gram_pair(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.k;
        let mut hi = vec![0.0; k * k];
        let mut lo = vec![0.0; k * k];
        let mut idx = 0;
        for i in 0..k {
            for j in i..k {
                let (h, l) = self.xtx[idx].value_pair();
                hi[i * k + j] = h;
                hi[j * k + i] = h;
                lo[i * k + j] = l;
                lo[j * k + i] = l;
                idx += 1;
            }
        }
        (hi, lo)
    }

    /// Solves the normal equations and derives classical OLS statistics.
    pub fn finish(&self, names: &[String]) -> Result<RegressionResult> {
        let k = self.k;
        if names.len() != k {
            return Err(Error::InvalidArgument(format!(
                "{} coefficient names for {k} columns",
                names.len()
            )));
        }
        let n = self.n;
        if n <= k {
            return Err(Error::Undersized { n, k });
        }
        let a = self.gram();
        let b: Vec<f64> = self.xty.iter().map(ExactSum::value).collect();

        // Equilibrate to unit diagonal so the pivot tolerance is scale free.
        let zero_cols: Vec<String> = (0..k)
            .filter(|&i| !(a[i * k + i] > 0.0))
            .map(|i| names[i].clone())
            .collect();
        if !zero_cols.is_empty() {
            return Err(Error::Singular(zero_cols));
        }
        let d: Vec<f64> = (0..k).map(|i| a[i * k + i].sqrt()).collect();
        let mut s = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                s[i * k + j] = a[i * k + j] / (d[i] * d[j]);
            }
        }
        let l = cholesky(&s, k).map_err(|cols| Error::Singular(cols.into_iter().map(|c| names[c].clone()).collect()))?;

        let bs: Vec<f64> = (0..k).map(|i| b[i] / d[i]).collect();
        let beta_s = cholesky_solve(&l, k, &bs);
        let beta: Vec<f64> = (0..k).map(|i| beta_s[i] / d[i]).collect();

        // Diagonal of (X'X)^{-1} = D^{-1} (S^{-1}) D^{-1}.
        let mut inv_diag = vec![0.0; k];
        let mut e = vec![0.0; k];
        for i in 0..k {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[i] = 1.0;
            let col = cholesky_solve(&l, k, &e);
            inv_diag[i] = col[i] / (d[i] * d[i]);
        }

        // Both sums of squares use forms that are flat at their optimum, so
        // rounding in b or the mean only enters at second order; every product
        // is split exactly and the moments are read at double-double precision.
        let (a_hi, a_lo) = self.gram_pair();
        let b_lo: Vec<f64> = self.xty.iter().map(|s| s.value_pair().1).collect();
        let (yty, yty_lo) = self.yty.value_pair();
        let mut fit = ExactSum::new();
        fit.add(yty);
        fit.add(yty_lo);
        for i in 0..k {
            fit.add_product(-2.0 * beta[i], b[i]);
            fit.add(-2.0 * beta[i] * b_lo[i]);
            for j in 0..k {
                let bb = beta[i] * beta[j];
                let bb_err = beta[i].mul_add(beta[j], -bb);
                fit.add_product(bb, a_hi[i * k + j]);
                fit.add(bb * a_lo[i * k + j] + bb_err * a_hi[i * k + j]);
            }
        }
        let rss = fit.value().max(0.0);

        let (y_sum, y_sum_lo) = self.y_sum.value_pair();
        let mean = y_sum / n as f64;
        let mm = mean * mean;
        let mut centered = ExactSum::new();
        centered.add(yty);
        centered.add(yty_lo);
        centered.add_product(-2.0 * mean, y_sum);
        centered.add(-2.0 * mean * y_sum_lo);
        centered.add_product(mm, n as f64);
        centered.add(mean.mul_add(mean, -mm) * n as f64);
        let tss = centered.value().max(0.0);

        Ok(RegressionResult::from_parts(names, &beta, &inv_diag, n, rss, tss))
    }
}

/// Pivot-free Cholesky `S = L L'` of a unit-diagonal matrix; on failure
/// returns every column whose pivot collapsed.
fn cholesky(s: &[f64], k: usize) -> std::result::Result<Vec<f64>, Vec<usize>> {
    let mut l = vec![0.0; k * k];
    let mut dependent = Vec::new();
    for j in 0..k {
        let mut diag = s[j * k + j];
        for m in 0..j {
            diag -= l[j * k + m] * l[j * k + m];
        }
        if !(diag > SINGULAR_TOL) {
            dependent.push(j);
            continue;
        }
        let pivot = diag.sqrt();
        l[j * k + j] = pivot;
        for i in j + 1..k {
            let mut v = s[i * k + j];
            for m in 0..j {
                v -= l[i * k + m] * l[j * k + m];
            }
            l[i * k + j] = v / pivot;
        }
    }
    if dependent.is_empty() {
        Ok(l)
    } else {
        Err(dependent)
    }
}

fn cholesky_solve(l: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; k];
    for i in 0..k {
        let mut v = b[i];
        for m in 0..i {
            v -= l[i * k + m] * y[m];
        }
        y[i] = v / l[i * k + i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut v = y[i];
        for m in i + 1..k {
            v -= l[m * k + i] * x[m];
        }
        x[i] = v / l[i * k + i];
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub coefficients: Vec<Coefficient>,
    pub n: usize,
    pub k: usize,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub resid_se: f64,
    pub rss: f64,
    pub tss: f64,
}

impl RegressionResult {
    /// Assembles statistics from coefficients, `diag((X'X)^{-1})`, RSS and
    /// centered TSS. An undefined R² (constant response) is reported as 0.
    pub fn from_parts(
        names: &[String],
        beta: &[f64],
        inv_diag: &[f64],
        n: usize,
        rss: f64,
        tss: f64,
    ) -> Self {
        let k = beta.len();
        let df = (n - k) as f64;
        let sigma2 = rss / df;
        let t_dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        let coefficients = names
            .iter()
            .zip(beta)
            .zip(inv_diag)
            .map(|((name, &beta), &v)| {
                let se = (sigma2 * v).sqrt();
                let t = if se > 0.0 {
                    beta / se
                } else if beta == 0.0 {
                    0.0
                } else {
                    f64::INFINITY.copysign(beta)
                };
                let p = (2.0 * t_dist.cdf(-t.abs())).min(1.0);
                Coefficient {
                    name: name.clone(),
                    beta,
                    se,
                    t,
                    p,
                }
            })
            .collect();
        let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
        let adj_r_squared = 1.0 - (1.0 - r_squared) * (n as f64 - 1.0) / df;
        RegressionResult {
            coefficients,
            n,
            k,
            r_squared,
            adj_r_squared,
            resid_se: sigma2.sqrt(),
            rss,
            tss,
        }
    }

    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn betas(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.beta).collect()
    }
}

/// Fits the model on rows taken as they are (no standardization).
pub fn fit_ols<'a>(rows: impl IntoIterator<Item = &'a GravityObservation>) -> Result<RegressionResult> {
    let mut acc = OlsAccumulator::new(N_REGRESSORS);
    for r in rows {
        acc.add(&r.regressors, r.response);
    }
    acc.finish(&coefficient_names())
}

/// Streams `source` once, applying `spec` to every row, with chunk-parallel
/// accumulation. The result does not depend on the thread count.
pub fn fit_source<S: RowSource + ?Sized>(source: &S, spec: &StandardizationSpec) -> Result<RegressionResult> {
    const SUB: usize = 1 << 13;
    let mut total = OlsAccumulator::new(N_REGRESSORS);
    source.for_each_chunk(&mut |rows| {
        let partial = rows
            .par_chunks(SUB)
            .map(|part| {
                let mut acc = OlsAccumulator::new(N_REGRESSORS);
                for r in part {
                    let z = spec.apply(r);
                    acc.add(&z.regressors, z.response);
                }
                acc
            })
            .reduce_with(|mut a, b| {
                a.merge(&b);
                a
            });
        if let Some(p) = partial {
            total.merge(&p);
        }
        Ok(())
    })?;
    total.finish(&coefficient_names())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("b{i}")).collect()
    }

    #[test]
    fn exact_line() {
        let mut acc = OlsAccumulator::new(1);
        for i in 0..10 {
            let x = i as f64;
            acc.add(&[x], 2.0 * x + 1.0);
        }
        let r = acc.finish(&names(2)).unwrap();
        assert!((r.coefficients[0].beta - 1.0).abs() < 1e-12);
        assert!((r.coefficients[1].beta - 2.0).abs() < 1e-12);
        assert!((r.r_squared - 1.0).abs() < 1e-12);
        assert!(r.resid_se < 1e-6);
        assert!(r.adj_r_squared <= 1.0);
    }

    #[test]
    fn intercept_only_fit_is_the_mean() {
        let mut acc = OlsAccumulator::new(0);
        for y in [3.0, 3.0, 3.0, 3.0] {
            acc.add(&[], y);
        }
        let r = acc.finish(&names(1)).unwrap();
        assert_eq!(r.coefficients[0].beta, 3.0);
        assert_eq!(r.rss, 0.0);
    }

    #[test]
    fn duplicate_column_is_reported_singular() {
        let mut acc = OlsAccumulator::new(3);
        for i in 0..20 {
            let x = (i as f64).sin();
            acc.add(&[x, (i as f64).cos(), x], i as f64);
        }
        match acc.finish(&names(4)) {
            Err(Error::Singular(cols)) => assert_eq!(cols, vec!["b3".to_string()]),
            other => panic!("expected singular, got {other:?}"),
        }
        let mut zero = OlsAccumulator::new(1);
        for i in 0..5 {
            zero.add(&[0.0], i as f64);
        }
        assert!(matches!(zero.finish(&names(2)), Err(Error::Singular(_))));
    }

    #[test]
    fn undersized_sample_is_rejected() {
        let mut acc = OlsAccumulator::new(2);
        acc.add(&[1.0, 2.0], 1.0);
        acc.add(&[2.0, 1.0], 1.0);
        acc.add(&[3.0, 5.0], 1.0);
        assert!(matches!(acc.finish(&names(3)), Err(Error::Undersized { n: 3, k: 3 })));
    }

    #[test]
    fn partitioned_accumulation_is_bitwise_identical() {
        let rows: Vec<(Vec<f64>, f64)> = (0..500)
            .map(|i| {
                let t = i as f64;
                (vec![(t * 0.37).sin() * 1e3, (t * 0.11).cos(), t.sqrt()], (t * 0.5).sin() + 0.1 * t)
            })
            .collect();
        let mut whole = OlsAccumulator::new(3);
        for (x, y) in &rows {
            whole.add(x, *y);
        }
        let mut parts: Vec<OlsAccumulator> = (0..7).map(|_| OlsAccumulator::new(3)).collect();
        for (i, (x, y)) in rows.iter().enumerate().rev() {
            parts[(i * 31) % 7].add(x, *y);
        }
        let mut merged = OlsAccumulator::new(3);
        for p in parts.iter().rev() {
            merged.merge(p);
        }
        let a = whole.finish(&names(4)).unwrap();
        let b = merged.finish(&names(4)).unwrap();
        for (ca, cb) in a.coefficients.iter().zip(&b.coefficients) {
            assert_eq!(ca.beta.to_bits(), cb.beta.to_bits());
            assert_eq!(ca.se.to_bits(), cb.se.to_bits());
        }
        assert_eq!(a.adj_r_squared.to_bits(), b.adj_r_squared.to_bits());
    }

    #[test]
    fn memory_does_not_grow_with_rows() {
        let mut acc = OlsAccumulator::new(N_REGRESSORS);
        let before = acc.memory_bytes();
        for i in 0..10_000 {
            acc.add(&[i as f64; N_REGRESSORS], 1.0);
        }
        assert_eq!(acc.memory_bytes(), before);
        assert!(before < 200_000);
    }
}
