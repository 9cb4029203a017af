use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

/// A rubric score in hundredths, always within `[1.00, 4.00]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScoreValue(u16);

impl ScoreValue {
    pub const MIN: ScoreValue = ScoreValue(100);
    pub const MAX: ScoreValue = ScoreValue(400);

    pub fn from_hundredths(h: u16) -> Option<Self> {
        (Self::MIN.0..=Self::MAX.0).contains(&h).then_some(ScoreValue(h))
    }

    /// Rounds to the nearest hundredth before range checking.
    pub fn from_f64(v: f64) -> Option<Self> {
        if !v.is_finite() {
            return None;
        }
        let h = (v * 100.0).round();
        if !(100.0..=400.0).contains(&h) {
            return None;
        }
        Some(ScoreValue(h as u16))
    }

    pub fn hundredths(self) -> u16 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 100.0
    }
}

/// Shortest decimal form with at most two places: `3.50` prints as `3.5`,
/// `3.00` as `3`.
impl fmt::Display for ScoreValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (int, frac) = (self.0 / 100, self.0 % 100);
        if frac == 0 {
            write!(f, "{int}")
        } else if frac % 10 == 0 {
            write!(f, "{int}.{}", frac / 10)
        } else {
            write!(f, "{int}.{frac:02}")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Score {
    Value(ScoreValue),
    NotApplicable,
}

/// Outcome of reading a score token that is not a valid score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum ScoreTokenError {
    Unparseable,
    OutOfRange,
}

impl Score {
    pub fn numeric(v: f64) -> Option<Score> {
        ScoreValue::from_f64(v).map(Score::Value)
    }

    pub fn value(self) -> Option<ScoreValue> {
        match self {
            Score::Value(v) => Some(v),
            Score::NotApplicable => None,
        }
    }

    pub fn as_f64(self) -> Option<f64> {
        self.value().map(ScoreValue::as_f64)
    }

    pub fn is_applicable(self) -> bool {
        matches!(self, Score::Value(_))
    }

    /// Reads a score token such as `3.5`, `[ 2.25 ]`, `N/A` or `[N/A]`.
    /// More than two decimal places are rounded half-up to hundredths.
    pub(crate) fn parse_token(token: &str) -> Result<Score, ScoreTokenError> {
        let mut t = token.trim();
        if let Some(inner) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            t = inner.trim();
        }
        if t.eq_ignore_ascii_case("n/a") {
            return Ok(Score::NotApplicable);
        }
        let (negative, digits) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t.strip_prefix('+').unwrap_or(t)),
        };
        let (int, frac) = match digits.split_once('.') {
            Some((i, f)) => (i, f),
            None => (digits, ""),
        };
        let all_digits = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
        if int.is_empty() || !all_digits(int) || !all_digits(frac) || digits.ends_with('.') {
            return Err(ScoreTokenError::Unparseable);
        }
        if negative {
            return Err(ScoreTokenError::OutOfRange);
        }
        let int = int.trim_start_matches('0');
        if int.len() > 1 {
            return Err(ScoreTokenError::OutOfRange);
        }
        let int: u32 = if int.is_empty() { 0 } else { int.parse().unwrap() };
        let fb = frac.as_bytes();
        let digit = |i: usize| fb.get(i).map_or(0, |b| u32::from(b - b'0'));
        let mut hundredths = int * 100 + digit(0) * 10 + digit(1);
        if digit(2) >= 5 {
            hundredths += 1;
        }
        u16::try_from(hundredths)
            .ok()
            .and_then(ScoreValue::from_hundredths)
            .map(Score::Value)
            .ok_or(ScoreTokenError::OutOfRange)
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Score::Value(v) => v.fmt(f),
            Score::NotApplicable => f.write_str("N/A"),
        }
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Score::Value(v) => s.serialize_f64(v.as_f64()),
            Score::NotApplicable => s.serialize_str("N/A"),
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct ScoreVisitor;

        impl Visitor<'_> for ScoreVisitor {
            type Value = Score;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a score in [1, 4], \"N/A\" or null")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Score, E> {
                Score::numeric(v).ok_or_else(|| E::custom(format!("score {v} outside [1, 4]")))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Score, E> {
                self.visit_f64(v as f64)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Score, E> {
                self.visit_f64(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Score, E> {
                Score::parse_token(v).map_err(|_| E::custom(format!("invalid score {v:?}")))
            }

            fn visit_unit<E: de::Error>(self) -> Result<Score, E> {
                Ok(Score::NotApplicable)
            }

            fn visit_none<E: de::Error>(self) -> Result<Score, E> {
                Ok(Score::NotApplicable)
            }
        }

        d.deserialize_any(ScoreVisitor)
    }
}
