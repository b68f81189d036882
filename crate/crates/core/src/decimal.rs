//! Exact decimal/rational helpers.
//!
//! Every score in the harness is an exact `BigRational`. Decimal text only
//! appears at the edges: parsing published figures and weight flags, and
//! emitting reports with half-up rounding.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid decimal literal {0:?}")]
pub struct DecimalParseError(pub String);

/// Parses `"85.82"`, `"-0.5"`, `"100"` or a fraction `"200/3"` into an exact rational.
pub fn parse_rational(text: &str) -> Result<BigRational, DecimalParseError> {
    let s = text.trim();
    let err = || DecimalParseError(text.to_string());
    if s.is_empty() {
        return Err(err());
    }
    if let Some((num, den)) = s.split_once('/') {
        let num = BigInt::from_str(num.trim()).map_err(|_| err())?;
        let den = BigInt::from_str(den.trim()).map_err(|_| err())?;
        if den.is_zero() {
            return Err(err());
        }
        return Ok(BigRational::new(num, den));
    }
    let (negative, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err());
    }
    if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit()) {
        return Err(err());
    }
    let digits = format!("{int_part}{frac_part}");
    let numer = BigInt::from_str(if digits.is_empty() { "0" } else { &digits }).map_err(|_| err())?;
    let denom = num_traits::pow(BigInt::from(10u32), frac_part.len());
    let value = BigRational::new(numer, denom);
    Ok(if negative { -value } else { value })
}

/// Rounds half away from zero to `places` decimals and renders with exactly that many digits.
pub fn format_half_up(value: &BigRational, places: usize) -> String {
    let scale = num_traits::pow(BigInt::from(10u32), places);
    let scaled = value.abs() * BigRational::from_integer(scale.clone());
    let floor = scaled.floor();
    let rem = &scaled - &floor;
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let mut units = floor.to_integer();
    if rem >= half {
        units += BigInt::one();
    }
    let (whole, frac) = units.div_rem(&scale);
    let sign = if value.is_negative() && !units.is_zero() { "-" } else { "" };
    if places == 0 {
        format!("{sign}{whole}")
    } else {
        format!("{sign}{whole}.{:0>width$}", frac.to_string(), width = places)
    }
}

/// Exact rendering: a plain decimal when the expansion terminates, otherwise `n/d`.
pub fn format_exact(value: &BigRational) -> String {
    let mut den = value.denom().clone();
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    let mut twos = 0usize;
    let mut fives = 0usize;
    while den.is_even() {
        den /= &two;
        twos += 1;
    }
    while (&den % &five).is_zero() {
        den /= &five;
        fives += 1;
    }
    if !den.is_one() {
        return format!("{}/{}", value.numer(), value.denom());
    }
    let places = twos.max(fives);
    let s = format_half_up(value, places);
    if places > 0 {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Arithmetic mean; `None` for an empty input.
pub fn mean<'a>(values: impl IntoIterator<Item = &'a BigRational>) -> Option<BigRational> {
    let mut n = 0u64;
    let mut sum = BigRational::zero();
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / BigRational::from_integer(BigInt::from(n)))
}

pub fn to_f64(value: &BigRational) -> f64 {
    use num_traits::ToPrimitive;
    value.to_f64().unwrap_or(f64::NAN)
}

/// A percentage on the 0..=100 scale held as an exact rational.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Percent(BigRational);

impl Percent {
    pub fn new(value: BigRational) -> Self {
        Self(value)
    }

    pub fn zero() -> Self {
        Self(BigRational::zero())
    }

    pub fn hundred() -> Self {
        Self(BigRational::from_integer(BigInt::from(100)))
    }

    /// `100 * earned / total`. `total` must be positive.
    pub fn from_fraction(earned: u64, total: u64) -> Self {
        assert!(total > 0, "percentage of an empty total");
        Self(BigRational::new(BigInt::from(100u64) * BigInt::from(earned), BigInt::from(total)))
    }

    pub fn parse(text: &str) -> Result<Self, DecimalParseError> {
        parse_rational(text).map(Self)
    }

    pub fn value(&self) -> &BigRational {
        &self.0
    }

    pub fn into_inner(self) -> BigRational {
        self.0
    }

    /// Half-up, two decimals: the only rounding the reports apply.
    pub fn report(&self) -> String {
        format_half_up(&self.0, 2)
    }

    pub fn exact(&self) -> String {
        format_exact(&self.0)
    }

    pub fn to_f64(&self) -> f64 {
        to_f64(&self.0)
    }

    pub fn in_range(&self) -> bool {
        !self.0.is_negative() && self.0 <= *Self::hundred().value()
    }

    pub fn mean<'a>(values: impl IntoIterator<Item = &'a Percent>) -> Option<Percent> {
        mean(values.into_iter().map(|p| &p.0)).map(Percent)
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.report())
    }
}

impl FromStr for Percent {
    type Err = DecimalParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl From<BigRational> for Percent {
    fn from(value: BigRational) -> Self {
        Self(value)
    }
}

impl Serialize for Percent {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.exact())
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Percent::parse(&s).map_err(serde::de::Error::custom)
    }
}
