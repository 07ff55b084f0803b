//! Emulation of narrow floating-point formats on top of `f64`.
//!
//! A [`FloatFormatSpec`] describes a binary format by its field widths and
//! bias. Values are kept as `f64` everywhere; [`FloatFormatSpec::quantize`]
//! rounds an `f64` to the nearest representable value of the format
//! (round-to-nearest, ties to even), which is exact because every format here
//! has far fewer significand bits than `f64`.
//!
//! Three built-in formats are provided:
//!
//! * [`FP16`] — IEEE binary16 (1 sign, 5 exponent, 10 significand bits).
//! * [`M169`] — a 16-bit format with 1 sign, 6 exponent and 9 significand
//!   bits. The significand stores its leading bit explicitly, so in
//!   implicit-bit terms it has 8 fraction bits. With bias 58 its largest
//!   finite value is 15.96875 and its smallest positive subnormal is 2^-66,
//!   trading relative precision for headroom below 1. Used for error buffers
//!   and low-rank factors.
//! * [`M0610`] — unsigned, 6 exponent and 10 explicit significand bits,
//!   same exponent placement as [`M169`]. Used for second-moment estimates,
//!   which are nonnegative by construction.

use std::collections::BTreeMap;

use thiserror::Error;

/// What happens when a finite value rounds past the largest finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverflowPolicy {
    /// Produce a signed infinity (requires the format to encode one).
    ToInfinity,
    /// Saturate at the largest finite value, keeping the sign.
    ClampToMax,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("sign_bits must be 0 or 1, got {0}")]
    BadSignBits(u32),
    #[error("exponent_bits must be in 2..=11, got {0}")]
    BadExponentBits(u32),
    #[error("significand_bits must be in 1..=52, got {0}")]
    BadSignificandBits(u32),
    #[error("overflow policy to_infinity needs a reserved Inf/NaN exponent code")]
    InfinityWithoutEncoding,
    #[error("format has no usable normal exponent codes")]
    EmptyExponentRange,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QuantizeError {
    #[error("NaN input to a format without a NaN encoding")]
    NanUnsupported,
    #[error("negative input to an unsigned format")]
    NegativeUnsigned,
}

/// Description of a binary floating-point format.
///
/// `significand_bits` counts stored significand bits. When
/// `explicit_leading_bit` is set the leading bit of normal values is one of
/// them (no hidden bit); otherwise the format uses the usual IEEE implicit
/// leading 1 and `significand_bits` are all fraction bits.
///
/// `bias` relates stored exponent codes to unbiased exponents the same way
/// in both conventions: the smallest positive subnormal is
/// `2^(1 - bias - significand_bits)` regardless of `explicit_leading_bit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FloatFormatSpec {
    pub name: &'static str,
    pub sign_bits: u32,
    pub exponent_bits: u32,
    pub significand_bits: u32,
    pub bias: i32,
    pub reserves_inf_nan: bool,
    pub supports_subnormals: bool,
    pub explicit_leading_bit: bool,
    pub overflow_policy: OverflowPolicy,
}

/// IEEE binary16.
pub const FP16: FloatFormatSpec = FloatFormatSpec {
    name: "fp16",
    sign_bits: 1,
    exponent_bits: 5,
    significand_bits: 10,
    bias: 15,
    reserves_inf_nan: true,
    supports_subnormals: true,
    explicit_leading_bit: false,
    overflow_policy: OverflowPolicy::ToInfinity,
};

/// 1-6-9 format for error buffers and low-rank factors: max finite 15.96875,
/// min positive 2^-66.
pub const M169: FloatFormatSpec = FloatFormatSpec {
    name: "1-6-9",
    sign_bits: 1,
    exponent_bits: 6,
    significand_bits: 9,
    bias: 58,
    reserves_inf_nan: true,
    supports_subnormals: true,
    explicit_leading_bit: true,
    overflow_policy: OverflowPolicy::ToInfinity,
};

/// 0-6-10 unsigned format for second-moment estimates: max finite 15.984375,
/// min positive 2^-67.
pub const M0610: FloatFormatSpec = FloatFormatSpec {
    name: "0-6-10",
    sign_bits: 0,
    exponent_bits: 6,
    significand_bits: 10,
    bias: 58,
    reserves_inf_nan: true,
    supports_subnormals: true,
    explicit_leading_bit: true,
    overflow_policy: OverflowPolicy::ToInfinity,
};

impl FloatFormatSpec {
    pub fn validate(&self) -> Result<(), FormatError> {
        if self.sign_bits > 1 {
            return Err(FormatError::BadSignBits(self.sign_bits));
        }
        if !(2..=11).contains(&self.exponent_bits) {
            return Err(FormatError::BadExponentBits(self.exponent_bits));
        }
        if !(1..=52).contains(&self.significand_bits) {
            return Err(FormatError::BadSignificandBits(self.significand_bits));
        }
        if self.overflow_policy == OverflowPolicy::ToInfinity && !self.reserves_inf_nan {
            return Err(FormatError::InfinityWithoutEncoding);
        }
        if self.max_exponent_code() < 1 {
            return Err(FormatError::EmptyExponentRange);
        }
        Ok(())
    }

    /// Fraction bits in implicit-leading-bit terms.
    fn fraction_bits(&self) -> i32 {
        if self.explicit_leading_bit {
            self.significand_bits as i32 - 1
        } else {
            self.significand_bits as i32
        }
    }

    /// Bias in implicit-leading-bit terms.
    fn effective_bias(&self) -> i32 {
        if self.explicit_leading_bit {
            self.bias + 1
        } else {
            self.bias
        }
    }

    /// Largest exponent code that encodes a normal value.
    fn max_exponent_code(&self) -> i64 {
        let codes = (1i64 << self.exponent_bits) - 1;
        if self.reserves_inf_nan {
            codes - 1
        } else {
            codes
        }
    }

    /// Largest unbiased exponent of a normal value.
    pub fn max_exponent(&self) -> i32 {
        self.max_exponent_code() as i32 - self.effective_bias()
    }

    /// Smallest unbiased exponent of a normal value.
    pub fn min_exponent(&self) -> i32 {
        1 - self.effective_bias()
    }

    /// Largest finite value.
    pub fn max_finite(&self) -> f64 {
        let f = self.fraction_bits();
        (2.0 - pow2(-f)) * pow2(self.max_exponent())
    }

    /// Smallest positive value (the smallest subnormal when the format
    /// supports subnormals, otherwise the smallest normal).
    pub fn min_positive(&self) -> f64 {
        if self.supports_subnormals {
            pow2(self.min_exponent() - self.fraction_bits())
        } else {
            self.min_positive_normal()
        }
    }

    /// Smallest positive normal value.
    pub fn min_positive_normal(&self) -> f64 {
        pow2(self.min_exponent())
    }

    /// Spacing between representable values at the magnitude of `x`.
    ///
    /// Magnitudes beyond the normal range use the nearest end of the range:
    /// the subnormal spacing below `min_positive_normal`, the top-binade
    /// spacing above `max_finite`.
    pub fn ulp_at(&self, x: f64) -> f64 {
        let a = x.abs();
        let f = self.fraction_bits();
        if !a.is_finite() || a >= self.max_finite() {
            return pow2(self.max_exponent() - f);
        }
        let e = if a < self.min_positive_normal() {
            self.min_exponent()
        } else {
            exponent_of(a).clamp(self.min_exponent(), self.max_exponent())
        };
        pow2(e - f)
    }

    /// Round `x` to the nearest representable value, ties to even.
    ///
    /// NaN passes through formats that encode it. Infinite inputs follow the
    /// overflow policy. Negative inputs to unsigned formats are an error
    /// (negative zero is treated as zero).
    pub fn try_quantize(&self, x: f64) -> Result<f64, QuantizeError> {
        if x.is_nan() {
            return if self.reserves_inf_nan {
                Ok(f64::NAN)
            } else {
                Err(QuantizeError::NanUnsupported)
            };
        }
        if x == 0.0 {
            return Ok(if self.sign_bits == 0 { 0.0 } else { x });
        }
        if x < 0.0 && self.sign_bits == 0 {
            return Err(QuantizeError::NegativeUnsigned);
        }
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        let a = x.abs();
        let f = self.fraction_bits();
        let e_max = self.max_exponent();
        // Midpoint between max_finite and the next binade; RNE sends an
        // exact tie up (the candidate above has an even significand).
        let overflow_at = self.max_finite() + pow2(e_max - f - 1);
        if a >= overflow_at {
            return Ok(match self.overflow_policy {
                OverflowPolicy::ToInfinity => sign * f64::INFINITY,
                OverflowPolicy::ClampToMax => sign * self.max_finite(),
            });
        }
        let e_min = self.min_exponent();
        if a < self.min_positive_normal() {
            if !self.supports_subnormals {
                // Only 0 and the smallest normal exist down here; an exact
                // tie rounds to 0 (even significand).
                let half = pow2(e_min - 1);
                return Ok(if a > half {
                    sign * self.min_positive_normal()
                } else {
                    sign * 0.0
                });
            }
            let spacing = pow2(e_min - f);
            return Ok(sign * (a / spacing).round_ties_even() * spacing);
        }
        let e = exponent_of(a).min(e_max);
        let spacing = pow2(e - f);
        Ok(sign * (a / spacing).round_ties_even() * spacing)
    }

    /// Like [`try_quantize`](Self::try_quantize) but panics on the error
    /// cases; for call sites whose inputs are NaN-safe by construction.
    pub fn quantize(&self, x: f64) -> f64 {
        self.try_quantize(x)
            .unwrap_or_else(|e| panic!("quantize({x}) through {}: {e}", self.name))
    }

    /// Whether `x` is exactly representable (including signed zero, and
    /// Inf/NaN when encoded).
    pub fn is_representable(&self, x: f64) -> bool {
        if x.is_nan() || x.is_infinite() {
            return self.reserves_inf_nan && !(x < 0.0 && self.sign_bits == 0);
        }
        match self.try_quantize(x) {
            Ok(q) => q == x,
            Err(_) => false,
        }
    }

    /// All positive finite values of the format, ascending. Small for every
    /// 16-bit format; used by tests and the format-inspect report.
    pub fn enumerate_positive_finite(&self) -> Vec<f64> {
        let f = self.fraction_bits();
        let steps = 1i64 << f;
        let mut out = Vec::new();
        if self.supports_subnormals {
            let spacing = pow2(self.min_exponent() - f);
            for n in 1..steps {
                out.push(n as f64 * spacing);
            }
        }
        for e in self.min_exponent()..=self.max_exponent() {
            let spacing = pow2(e - f);
            for n in steps..2 * steps {
                out.push(n as f64 * spacing);
            }
        }
        out
    }

    /// Counts of distinct values by class, for reporting.
    pub fn census(&self) -> FormatCensus {
        let f = self.fraction_bits() as u64;
        let per_sign_normals = self.max_exponent_code() as u64 * (1u64 << f);
        let per_sign_subnormals = if self.supports_subnormals {
            (1u64 << f) - 1
        } else {
            0
        };
        let signs = if self.sign_bits == 0 { 1 } else { 2 };
        FormatCensus {
            normal: per_sign_normals * signs,
            subnormal: per_sign_subnormals * signs,
            zero: 1,
            infinite: if self.reserves_inf_nan { signs } else { 0 },
            nan_codes: self.reserves_inf_nan,
        }
    }
}

/// Distinct-value counts for a format (signed values counted per sign).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FormatCensus {
    pub normal: u64,
    pub subnormal: u64,
    pub zero: u64,
    pub infinite: u64,
    pub nan_codes: bool,
}

/// `2^k` as f64, exact for the exponent ranges used here.
fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// `floor(log2(a))` for finite positive `a`, by bit inspection (exact at
/// binade boundaries where `log2` could misround).
pub fn exponent_of(a: f64) -> i32 {
    debug_assert!(a.is_finite() && a > 0.0);
    let bits = a.to_bits();
    let raw = ((bits >> 52) & 0x7ff) as i32;
    if raw != 0 {
        raw - 1023
    } else {
        // f64 subnormal: value = mantissa * 2^-1074.
        let top = 63 - (bits.leading_zeros() as i32);
        top - 1074
    }
}

/// `|a - b| <= n` spacings of `fmt` at the larger magnitude.
pub fn within_ulps(a: f64, b: f64, fmt: &FloatFormatSpec, n: u32) -> bool {
    if a == b {
        return true;
    }
    if !a.is_finite() || !b.is_finite() {
        return false;
    }
    let ulp = fmt.ulp_at(a.abs().max(b.abs()));
    (a - b).abs() <= n as f64 * ulp
}

/// Elements that are nonzero yet round to zero in `fmt`.
pub fn count_underflows(values: &[f64], fmt: &FloatFormatSpec) -> usize {
    values
        .iter()
        .filter(|&&v| v != 0.0 && v.is_finite() && fmt.quantize(v) == 0.0)
        .count()
}

/// Histogram of `floor(log2(|v|))` over a stream of values. Zeros and
/// nonfinite values are tallied separately rather than binned.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExponentHistogram {
    counts: BTreeMap<i32, u64>,
    zeros: u64,
    nonfinite: u64,
}

impl ExponentHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, v: f64) {
        if !v.is_finite() {
            self.nonfinite += 1;
        } else if v == 0.0 {
            self.zeros += 1;
        } else {
            *self.counts.entry(exponent_of(v.abs())).or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: &ExponentHistogram) {
        for (&e, &c) in &other.counts {
            *self.counts.entry(e).or_insert(0) += c;
        }
        self.zeros += other.zeros;
        self.nonfinite += other.nonfinite;
    }

    pub fn zeros(&self) -> u64 {
        self.zeros
    }

    pub fn nonfinite(&self) -> u64 {
        self.nonfinite
    }

    pub fn total_nonzero(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Ascending `(exponent, count)` pairs.
    pub fn buckets(&self) -> impl Iterator<Item = (i32, u64)> + '_ {
        self.counts.iter().map(|(&e, &c)| (e, c))
    }

    /// Lower median of the exponent distribution (zeros excluded), or None
    /// if no nonzero values were recorded.
    pub fn median_exponent(&self) -> Option<i32> {
        let n = self.total_nonzero();
        if n == 0 {
            return None;
        }
        let target = n.div_ceil(2);
        let mut cum = 0;
        for (&e, &c) in &self.counts {
            cum += c;
            if cum >= target {
                return Some(e);
            }
        }
        unreachable!("cumulative count covers the total");
    }

    /// Exponent with the largest count (smallest exponent wins ties), or
    /// None if empty.
    pub fn mode_exponent(&self) -> Option<i32> {
        self.counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&e, _)| e)
    }
}

/// Build a histogram from a slice in one call.
pub fn exponent_histogram(values: &[f64]) -> ExponentHistogram {
    let mut h = ExponentHistogram::new();
    for &v in values {
        h.record(v);
    }
    h
}

/// Midpoint of the exponent range covered by `fmt`, from the smallest
/// positive value to the largest finite one (floor of the average; fp16
/// gives -5). Used to recenter gradient exponents before 16-bit collectives.
pub fn midpoint_exponent(fmt: &FloatFormatSpec) -> i32 {
    let lo = exponent_of(fmt.min_positive());
    let hi = exponent_of(fmt.max_finite());
    (lo + hi).div_euclid(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    /// Independent IEEE binary16 decoder: every finite value from its bit
    /// pattern, paired with the parity of its fraction field (for RNE ties).
    fn f16_table() -> Vec<(f64, bool)> {
        let mut vals = Vec::new();
        for bits in 0u16..=0x7fff {
            let exp = (bits >> 10) & 0x1f;
            let frac = (bits & 0x3ff) as f64;
            let v = match exp {
                0 if frac == 0.0 => continue, // zero is not a positive value
                0 => frac * 2f64.powi(-24),
                31 => continue,
                e => (1.0 + frac / 1024.0) * 2f64.powi(e as i32 - 15),
            };
            vals.push((v, bits & 1 == 0));
        }
        vals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        vals
    }

    /// Nearest-value-ties-to-even reference quantizer over an enumerated
    /// table of (value, even-significand) pairs, positive half.
    fn oracle_quantize(table: &[(f64, bool)], max: f64, v: f64) -> f64 {
        let a = v.abs();
        let sign = if v.is_sign_negative() { -1.0 } else { 1.0 };
        if a > max {
            // Beyond the table: overflow decided against the midpoint rule.
            let top = table.last().unwrap().0;
            let ulp_top = top - table[table.len() - 2].0;
            if a >= top + ulp_top / 2.0 {
                return sign * f64::INFINITY;
            }
            return sign * top;
        }
        let i = table.partition_point(|&(x, _)| x < a);
        // Candidates: table[i-1] (or zero) and table[i].
        let (lo, lo_even) = if i == 0 { (0.0, true) } else { table[i - 1] };
        let (hi, hi_even) = table[i.min(table.len() - 1)];
        let pick = if (a - lo) < (hi - a) {
            lo
        } else if (a - lo) > (hi - a) {
            hi
        } else if lo_even {
            lo
        } else {
            debug_assert!(hi_even);
            hi
        };
        sign * pick
    }

    #[test]
    fn builtins_validate_and_fit_sixteen_bits() {
        for fmt in [FP16, M169, M0610] {
            fmt.validate().unwrap();
            assert!(fmt.sign_bits + fmt.exponent_bits + fmt.significand_bits <= 16);
        }
    }

    #[test]
    fn fp16_matches_ieee_oracle_on_grid() {
        let table = f16_table();
        let max = table.last().unwrap().0;
        assert_eq!(max, 65504.0);

        // Cross-check: the generic enumeration must reproduce the bit-level
        // table exactly.
        let enumerated = FP16.enumerate_positive_finite();
        let table_vals: Vec<f64> = table.iter().map(|&(v, _)| v).collect();
        assert_eq!(enumerated, table_vals);

        // 10,000-value grid: linear sweep over the full range, a log sweep
        // through small magnitudes, and exact midpoints between neighbors.
        let mut grid = Vec::new();
        for k in 0..3000 {
            grid.push(-70000.0 + k as f64 * (140000.0 / 2999.0));
        }
        for k in 0..3000 {
            let m = 1.7f64.powi(-60 + (k % 120)) * (1.0 + (k as f64) * 1e-4);
            grid.push(if k % 2 == 0 { m } else { -m });
        }
        for k in (0..table.len() - 1).step_by(8) {
            grid.push((table[k].0 + table[k + 1].0) / 2.0);
            if grid.len() >= 9990 {
                break;
            }
        }
        grid.extend_from_slice(&[
            0.0, -0.0, 65504.0, 65519.9, 65520.0, -65520.0, 2f64.powi(-24),
            2f64.powi(-25), 2f64.powi(-26), 1.0,
        ]);
        grid.truncate(10000);
        assert!(grid.len() >= 9000);
        for &v in &grid {
            let got = FP16.quantize(v);
            let want = oracle_quantize(&table, max, v);
            assert!(
                got.to_bits() == want.to_bits() || (got == 0.0 && want == 0.0),
                "fp16 quantize({v:e}) = {got:e}, oracle {want:e}"
            );
        }
    }

    #[test]
    fn m169_enumeration_pins_range() {
        let vals = M169.enumerate_positive_finite();
        // 62 normal exponent codes x 256 significand steps + 255 subnormals.
        assert_eq!(vals.len(), 62 * 256 + 255);
        assert_eq!(*vals.last().unwrap(), 15.96875);
        assert_eq!(M169.max_finite(), 15.96875);
        assert!(M169.max_finite() < 16.0);
        assert_eq!(vals[0], 2f64.powi(-66));
        assert_eq!(M169.min_positive(), 2f64.powi(1 - 58 - 9));
        assert_eq!(M169.min_positive_normal(), 2f64.powi(-58));
        assert!(vals.windows(2).all(|w| w[0] < w[1]));
        assert!(vals.iter().all(|&v| M169.is_representable(v)));
        assert!(M169.is_representable(1.0));
    }

    #[test]
    fn m169_quantize_matches_enumeration_oracle() {
        let vals = M169.enumerate_positive_finite();
        // Parity of the significand integer at each grid point.
        let table: Vec<(f64, bool)> = vals
            .iter()
            .map(|&v| {
                let n = (v / M169.ulp_at(v)).round() as i64;
                (v, n % 2 == 0)
            })
            .collect();
        let max = M169.max_finite();
        let mut probe = Vec::new();
        for k in 0..4000 {
            let m = 1.3f64.powi(-200 + (k % 260)) * (1.0 + (k as f64) * 7e-5);
            probe.push(if k % 2 == 0 { m } else { -m });
        }
        for k in (0..vals.len() - 1).step_by(3) {
            probe.push((vals[k] + vals[k + 1]) / 2.0);
        }
        for &v in &probe {
            let got = M169.quantize(v);
            let want = oracle_quantize(&table, max, v);
            assert!(
                got.to_bits() == want.to_bits() || (got == 0.0 && want == 0.0),
                "1-6-9 quantize({v:e}) = {got:e}, oracle {want:e}"
            );
        }
    }

    #[test]
    fn m0610_range_covers_variance_clamp() {
        M0610.validate().unwrap();
        assert_eq!(M0610.max_finite(), 15.984375);
        assert!(M0610.max_finite() > 5.0);
        assert_eq!(M0610.min_positive(), 2f64.powi(1 - 58 - 10));
        assert_eq!(M0610.quantize(5.0), 5.0);
        assert_eq!(M0610.quantize(0.0), 0.0);
        assert_eq!(M0610.quantize(-0.0), 0.0);
        assert_eq!(
            M0610.try_quantize(-1.0),
            Err(QuantizeError::NegativeUnsigned)
        );
    }

    #[test]
    fn known_fp16_points() {
        assert_eq!(FP16.max_finite(), 65504.0);
        assert_eq!(FP16.min_positive(), 2f64.powi(-24));
        assert_eq!(FP16.quantize(1.0), 1.0);
        assert_eq!(FP16.quantize(0.1), 0.0999755859375);
        assert_eq!(FP16.quantize(2f64.powi(-30)), 0.0);
        // Exact overflow midpoint ties away to infinity.
        assert_eq!(FP16.quantize(65520.0), f64::INFINITY);
        assert_eq!(FP16.quantize(65519.9), 65504.0);
        assert_eq!(FP16.quantize(-65520.0), f64::NEG_INFINITY);
        assert!(FP16.quantize(f64::NAN).is_nan());
        assert_eq!(FP16.quantize(f64::INFINITY), f64::INFINITY);
    }

    #[test]
    fn quantize_one_is_exact_in_all_builtins() {
        for fmt in [FP16, M169, M0610] {
            assert_eq!(fmt.quantize(1.0), 1.0, "{}", fmt.name);
        }
    }

    #[test]
    fn clamp_policy_saturates() {
        let clamped = FloatFormatSpec {
            overflow_policy: OverflowPolicy::ClampToMax,
            ..M169
        };
        assert_eq!(clamped.quantize(100.0), 15.96875);
        assert_eq!(clamped.quantize(-100.0), -15.96875);
        assert_eq!(clamped.quantize(f64::INFINITY), 15.96875);
    }

    #[test]
    fn format_without_nan_rejects_nan() {
        let fmt = FloatFormatSpec {
            reserves_inf_nan: false,
            overflow_policy: OverflowPolicy::ClampToMax,
            ..M169
        };
        fmt.validate().unwrap();
        assert_eq!(fmt.try_quantize(f64::NAN), Err(QuantizeError::NanUnsupported));
        // And to_infinity without an Inf encoding is an invalid spec.
        let bad = FloatFormatSpec {
            reserves_inf_nan: false,
            ..M169
        };
        assert_eq!(bad.validate(), Err(FormatError::InfinityWithoutEncoding));
    }

    #[test]
    fn census_matches_enumeration() {
        for fmt in [FP16, M169, M0610] {
            let c = fmt.census();
            let signs = if fmt.sign_bits == 0 { 1 } else { 2 };
            let enumerated = fmt.enumerate_positive_finite().len() as u64;
            assert_eq!(c.normal + c.subnormal, enumerated * signs, "{}", fmt.name);
        }
    }

    #[test]
    fn histogram_median_mode_and_midpoint() {
        let h = exponent_histogram(&[0.75, 0.8, 1.5, 3.0, 0.0, f64::NAN]);
        // exponents: -1, -1, 0, 1
        assert_eq!(h.zeros(), 1);
        assert_eq!(h.nonfinite(), 1);
        assert_eq!(h.total_nonzero(), 4);
        assert_eq!(h.median_exponent(), Some(-1));
        assert_eq!(h.mode_exponent(), Some(-1));
        assert_eq!(midpoint_exponent(&FP16), -5);

        let mut other = ExponentHistogram::new();
        other.record(4.0);
        other.record(5.0);
        other.record(9.0);
        let mut merged = h.clone();
        merged.merge(&other);
        // merged exponents sorted: -1 -1 0 1 2 2 3, lower median is the 4th
        assert_eq!(merged.total_nonzero(), 7);
        assert_eq!(merged.median_exponent(), Some(1));
    }

    #[test]
    fn gaussian_histogram_mode_sits_below_one() {
        // Sampling oracle: the modal exponent bucket of |N(0,1)| is [0.5, 1).
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let samples: Vec<f64> = (0..1000)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        // Independent count with no histogram machinery.
        let direct = samples
            .iter()
            .filter(|v| {
                let a = v.abs();
                (0.5..1.0).contains(&a)
            })
            .count() as u64;
        let h = exponent_histogram(&samples);
        let bucket = h.buckets().find(|&(e, _)| e == -1).map(|(_, c)| c).unwrap();
        assert_eq!(bucket, direct);
        assert_eq!(h.mode_exponent(), Some(-1));
    }

    #[test]
    fn underflow_counting() {
        let vals = [0.0, 2f64.powi(-30), 1.0, -2f64.powi(-26), 2f64.powi(-24)];
        assert_eq!(count_underflows(&vals, &FP16), 2);
        assert_eq!(count_underflows(&vals, &M169), 0);
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(x in prop::num::f64::ANY) {
            for fmt in [FP16, M169] {
                if fmt.sign_bits == 0 && x < 0.0 { continue; }
                let q = fmt.quantize(x);
                let qq = fmt.quantize(q);
                prop_assert!(q.to_bits() == qq.to_bits() || (q.is_nan() && qq.is_nan()));
            }
        }

        #[test]
        fn quantize_is_monotone(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(FP16.quantize(lo) <= FP16.quantize(hi));
            prop_assert!(M169.quantize(lo) <= M169.quantize(hi));
        }

        #[test]
        fn quantize_is_odd(x in -1e5f64..1e5) {
            for fmt in [FP16, M169] {
                prop_assert_eq!(fmt.quantize(-x).to_bits(), (-fmt.quantize(x)).to_bits());
            }
        }

        #[test]
        fn rounding_error_is_at_most_half_ulp(x in -15.0f64..15.0) {
            for fmt in [FP16, M169] {
                let q = fmt.quantize(x);
                prop_assert!((q - x).abs() <= fmt.ulp_at(x) / 2.0 + f64::EPSILON * x.abs());
            }
        }
    }
}
