//! Numeric building blocks shared by the compute stages: exact floating-point
//! accumulation, inclusive year windows and fixed-precision formatting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LIMB_BITS: u32 = 32;
const LIMB_MASK: i64 = (1 << LIMB_BITS) - 1;
// Bit position of the least significant bit of the smallest subnormal.
const MIN_EXP: i32 = -1074;
// Positions 0..=2045 hold any finite f64 mantissa; three extra limbs absorb
// the shifted mantissa plus carries of up to 2^90 accumulated terms.
const N_LIMBS: usize = 2046 / LIMB_BITS as usize + 6;
const NORMALIZE_EVERY: u32 = 1 << 30;

/// Exact accumulator for sums of `f64` values.
///
/// Every finite addend is stored without rounding in a wide fixed-point
/// register, so the accumulated value is independent of the order in which
/// terms are added or of how partial sums are merged. Conversion back to
/// `f64` is a deterministic function of the exact value.
#[derive(Clone)]
pub struct ExactSum {
    limbs: Box<[i64; N_LIMBS]>,
    pending: u32,
    non_finite: bool,
}

impl Default for ExactSum {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for ExactSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("ExactSum").field(&self.value()).finish()
    }
}

impl ExactSum {
    /// Heap footprint of one accumulator.
    pub const HEAP_BYTES: usize = N_LIMBS * std::mem::size_of::<i64>();

    pub fn new() -> Self {
        ExactSum {
            limbs: Box::new([0; N_LIMBS]),
            pending: 0,
            non_finite: false,
        }
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        if x == 0.0 {
            return;
        }
        if !x.is_finite() {
            self.non_finite = true;
            return;
        }
        let bits = x.to_bits();
        let exp_bits = ((bits >> 52) & 0x7ff) as i32;
        let frac = bits & ((1u64 << 52) - 1);
        let (mantissa, exp) = if exp_bits == 0 {
            (frac, MIN_EXP)
        } else {
            (frac | (1u64 << 52), exp_bits - 1075)
        };
        let pos = (exp - MIN_EXP) as u32;
        let idx = (pos / LIMB_BITS) as usize;
        let wide = (mantissa as u128) << (pos % LIMB_BITS);
        let lo = (wide as u64 & LIMB_MASK as u64) as i64;
        let mid = ((wide >> 32) as u64 & LIMB_MASK as u64) as i64;
        let hi = (wide >> 64) as i64;
        if x < 0.0 {
            self.limbs[idx] -= lo;
            self.limbs[idx + 1] -= mid;
            self.limbs[idx + 2] -= hi;
        } else {
            self.limbs[idx] += lo;
            self.limbs[idx + 1] += mid;
            self.limbs[idx + 2] += hi;
        }
        self.pending += 1;
        if self.pending >= NORMALIZE_EVERY {
            self.normalize();
        }
    }

    /// Adds `x * y` exactly: the rounded product plus its rounding error.
    #[inline]
    pub fn add_product(&mut self, x: f64, y: f64) {
        let p = x * y;
        self.add(p);
        self.add(x.mul_add(y, -p));
    }

    /// Adds another accumulator's exact value into this one.
    pub fn merge(&mut self, other: &ExactSum) {
        let mut other = other.clone();
        other.normalize();
        self.normalize();
        for (a, b) in self.limbs.iter_mut().zip(other.limbs.iter()) {
            *a += *b;
        }
        self.non_finite |= other.non_finite;
        self.normalize();
    }

    fn normalize(&mut self) {
        let mut carry = 0i64;
        for limb in self.limbs.iter_mut().take(N_LIMBS - 1) {
            let v = *limb + carry;
            carry = v >> LIMB_BITS;
            *limb = v & LIMB_MASK;
        }
        self.limbs[N_LIMBS - 1] += carry;
        self.pending = 0;
    }

    /// `(hi, lo)` with `hi = value()` and `lo` the remainder rounded to `f64`,
    /// so `hi + lo` carries roughly twice the precision of `hi`.
    pub fn value_pair(&self) -> (f64, f64) {
        let hi = self.value();
        if !hi.is_finite() {
            return (hi, 0.0);
        }
        let mut rest = self.clone();
        rest.add(-hi);
        (hi, rest.value())
    }

    /// The accumulated value rounded to `f64`.
    pub fn value(&self) -> f64 {
        if self.non_finite {
            return f64::NAN;
        }
        let mut tmp = self.clone();
        tmp.normalize();
        let negative = tmp.limbs[N_LIMBS - 1] < 0;
        if negative {
            for limb in tmp.limbs.iter_mut() {
                *limb = -*limb;
            }
            tmp.normalize();
        }
        let Some(top) = tmp.limbs.iter().rposition(|&l| l != 0) else {
            return 0.0;
        };
        let bottom = top.saturating_sub(3);
        let mut acc = 0.0f64;
        for i in (bottom..=top).rev() {
            let scale = (i as i32) * LIMB_BITS as i32 + MIN_EXP;
            acc += ldexp(tmp.limbs[i] as f64, scale);
        }
        if negative {
            -acc
        } else {
            acc
        }
    }
}

fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

fn ldexp(x: f64, e: i32) -> f64 {
    if e < -1000 {
        x * pow2(e + 1000) * pow2(-1000)
    } else if e > 1000 {
        x * pow2(e - 1000) * pow2(1000)
    } else {
        x * pow2(e)
    }
}

/// Exact sum of a slice, rounded once.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = ExactSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Inclusive range of calendar years, written `2000-2006` (or `2004` for a
/// single year).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct YearRange {
    pub start: i32,
    pub end: i32,
}

impl YearRange {
    pub fn new(start: i32, end: i32) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidArgument(format!(
                "year range {start}-{end} is empty"
            )));
        }
        Ok(YearRange { start, end })
    }

    pub fn single(year: i32) -> Self {
        YearRange {
            start: year,
            end: year,
        }
    }

    pub fn contains(&self, year: i32) -> bool {
        (self.start..=self.end).contains(&year)
    }

    pub fn years(&self) -> impl Iterator<Item = i32> {
        self.start..=self.end
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for YearRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

impl FromStr for YearRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse year range `{s}`"));
        match s.trim().split_once('-') {
            Some((a, b)) => {
                let start = a.trim().parse().map_err(|_| bad())?;
                let end = b.trim().parse().map_err(|_| bad())?;
                YearRange::new(start, end)
            }
            None => Ok(YearRange::single(s.trim().parse().map_err(|_| bad())?)),
        }
    }
}

/// Fixed-decimal rendering with negative zero folded to zero.
pub fn fmt_fixed(x: f64, decimals: usize) -> String {
    let s = format!("{:.*}", decimals, x);
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// Plain decimal rendering with `digits` significant digits.
pub fn fmt_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".to_string() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    let rendered = fmt_fixed(x, decimals);
    // Rounding can carry into a new leading digit (9.99.. -> 10.0); trim the extra digit.
    let carried = rendered
        .trim_start_matches('-')
        .parse::<f64>()
        .map(|v| v.abs().log10().floor() as i64 > magnitude)
        .unwrap_or(false);
    if carried && decimals > 0 {
        fmt_fixed(x, decimals - 1)
    } else {
        rendered
    }
}
