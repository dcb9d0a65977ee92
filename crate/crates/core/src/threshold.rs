//! Relative saliency thresholds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Admission rule relative to the maximum of a saliency map.
///
/// `Infinite` admits every strictly positive value. `Finite(t)` with `t > 1`
/// admits values strictly above `max / t`; `Finite(1)` admits only values
/// equal to the maximum. Nothing is admitted when the maximum is not positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RelativeThreshold {
    Finite(f64),
    Infinite,
}

impl RelativeThreshold {
    pub fn finite(t: f64) -> Result<Self> {
        if t.is_finite() && t >= 1.0 {
            Ok(RelativeThreshold::Finite(t))
        } else if t == f64::INFINITY {
            Ok(RelativeThreshold::Infinite)
        } else {
            Err(Error::Parameter(format!("threshold must be >= 1 or inf, got {t}")))
        }
    }

    pub fn validate(self) -> Result<Self> {
        match self {
            RelativeThreshold::Finite(t) => Self::finite(t),
            RelativeThreshold::Infinite => Ok(self),
        }
    }

    /// Whether `value` passes given the map maximum `max`.
    pub fn admits<T: Scalar>(self, value: T, max: T) -> bool {
        if max <= T::zero() {
            return false;
        }
        match self {
            RelativeThreshold::Infinite => value > T::zero(),
            RelativeThreshold::Finite(t) if t == 1.0 => value >= max,
            RelativeThreshold::Finite(t) => value > max / T::of(t),
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, RelativeThreshold::Infinite)
    }

    /// Ordering key; a larger key admits a superset.
    pub fn looseness(self) -> f64 {
        match self {
            RelativeThreshold::Finite(t) => t,
            RelativeThreshold::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for RelativeThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RelativeThreshold::Finite(t) => write!(f, "{t}"),
            RelativeThreshold::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for RelativeThreshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(RelativeThreshold::Infinite);
        }
        let t: f64 = s
            .parse()
            .map_err(|_| Error::Parameter(format!("not a threshold: {s:?}")))?;
        Self::finite(t)
    }
}

impl Serialize for RelativeThreshold {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RelativeThreshold::Finite(t) => serializer.serialize_f64(*t),
            RelativeThreshold::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for RelativeThreshold {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(t) => Self::finite(t),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parsing() {
        assert_eq!("inf".parse::<RelativeThreshold>().unwrap(), RelativeThreshold::Infinite);
        assert_eq!("1.5".parse::<RelativeThreshold>().unwrap(), RelativeThreshold::Finite(1.5));
        assert!("0.5".parse::<RelativeThreshold>().is_err());
        assert!("nan".parse::<RelativeThreshold>().is_err());
        assert!("abc".parse::<RelativeThreshold>().is_err());
    }

    #[test]
    fn admission() {
        let inf = RelativeThreshold::Infinite;
        assert!(inf.admits(0.001f32, 5.0));
        assert!(!inf.admits(0.0f32, 5.0));
        let two = RelativeThreshold::Finite(2.0);
        assert!(two.admits(2.6f64, 5.0));
        assert!(!two.admits(2.5f64, 5.0));
        let one = RelativeThreshold::Finite(1.0);
        assert!(one.admits(5.0f64, 5.0));
        assert!(!one.admits(4.999f64, 5.0));
        for t in [one, two, inf] {
            assert!(!t.admits(0.0f64, 0.0));
            assert!(!t.admits(-1.0f64, -1.0));
        }
    }

    #[test]
    fn json_round_trip() {
        for t in [RelativeThreshold::Infinite, RelativeThreshold::Finite(3.0)] {
            let s = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<RelativeThreshold>(&s).unwrap(), t);
        }
        assert!(serde_json::from_str::<RelativeThreshold>("0.2").is_err());
    }
}
