//! Scalar abstraction for reward arithmetic.
//!
//! Reward totals are weighted sums of 0/1 components. Computing them in an
//! exact rational type and converting once at the end yields the nearest
//! binary float for every total (e.g. `0.7 + 0.2` lands on `0.9`, not
//! `0.8999999999999999`).

use std::fmt::Debug;

use num_rational::Rational64;
use num_traits::{Num, ToPrimitive};

/// A number type usable for reward weights and totals.
pub trait Scalar: Num + Copy + PartialOrd + Debug + Send + Sync + 'static {
    /// Parses a decimal literal such as `0.7` or `1e-3`, exactly when the type allows.
    fn from_decimal(text: &str) -> Option<Self>;
    /// Converts an exact ratio into this type (rounded for floats).
    fn from_ratio(value: Rational64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    fn from_decimal(text: &str) -> Option<Self> {
        text.trim().parse().ok()
    }
    fn from_ratio(value: Rational64) -> Self {
        *value.numer() as f64 / *value.denom() as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn from_decimal(text: &str) -> Option<Self> {
        text.trim().parse().ok()
    }
    fn from_ratio(value: Rational64) -> Self {
        (*value.numer() as f64 / *value.denom() as f64) as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for Rational64 {
    fn from_decimal(text: &str) -> Option<Self> {
        parse_decimal_ratio(text)
    }
    fn from_ratio(value: Rational64) -> Self {
        value
    }
    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

/// Exact decimal parser: `[-]digits[.digits][e[-]digits]`.
pub fn parse_decimal_ratio(text: &str) -> Option<Rational64> {
    let text = text.trim();
    let (mantissa, exponent) = match text.find(['e', 'E']) {
        Some(pos) => (&text[..pos], text[pos + 1..].parse::<i32>().ok()?),
        None => (text, 0),
    };
    let (negative, mantissa) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((i, f)) => (i, f),
        None => (mantissa, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().chain(frac_part.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let mut numer: i64 = if digits.is_empty() { 0 } else { digits.parse().ok()? };
    let scale = exponent - frac_part.len() as i32;
    let mut denom: i64 = 1;
    if scale >= 0 {
        numer = numer.checked_mul(10i64.checked_pow(scale as u32)?)?;
    } else {
        denom = 10i64.checked_pow((-scale) as u32)?;
    }
    if negative {
        numer = -numer;
    }
    Some(Rational64::new(numer, denom))
}
