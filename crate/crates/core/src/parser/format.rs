use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CharClass {
    /// `L`
    Letter,
    /// `D`
    Digit,
    /// `A`
    Any,
}

impl CharClass {
    fn symbol(self) -> char {
        match self {
            CharClass::Letter => 'L',
            CharClass::Digit => 'D',
            CharClass::Any => 'A',
        }
    }

    fn accepts(self, c: char) -> bool {
        match self {
            CharClass::Letter => c.is_ascii_uppercase(),
            CharClass::Digit => c.is_ascii_digit(),
            CharClass::Any => c.is_ascii_uppercase() || c.is_ascii_digit(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RuleError {
    #[error("rule `{name}`: pattern character `{ch}` is not one of L, D, A")]
    BadClass { name: String, ch: char },
    #[error("rule `{name}`: empty pattern")]
    EmptyPattern { name: String },
    #[error("rule `{name}`: length range {min}..={max} invalid (min must be >= 2 and <= max)")]
    BadLength { name: String, min: usize, max: usize },
}

#[derive(Debug, Error)]
pub enum RulesFileError {
    #[error("format rules io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format rules json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Deserialize, Serialize)]
struct RuleRepr {
    name: String,
    pattern: String,
    min_len: usize,
    max_len: usize,
}

/// A plate layout: ordered character classes with an accepted length range.
///
/// When the plate is longer than the pattern, the last class repeats, so the
/// generic rule is simply pattern `A` with length 4..=8.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RuleRepr", into = "RuleRepr")]
pub struct PlateFormatRule {
    pub name: String,
    pattern: Vec<CharClass>,
    pub min_len: usize,
    pub max_len: usize,
}

impl TryFrom<RuleRepr> for PlateFormatRule {
    type Error = RuleError;

    fn try_from(r: RuleRepr) -> Result<Self, Self::Error> {
        PlateFormatRule::new(r.name, &r.pattern, r.min_len, r.max_len)
    }
}

impl From<PlateFormatRule> for RuleRepr {
    fn from(r: PlateFormatRule) -> Self {
        RuleRepr { pattern: r.pattern_string(), name: r.name, min_len: r.min_len, max_len: r.max_len }
    }
}

impl fmt::Display for PlateFormatRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}, {}..={})", self.name, self.pattern_string(), self.min_len, self.max_len)
    }
}

impl PlateFormatRule {
    pub fn new(name: impl Into<String>, pattern: &str, min_len: usize, max_len: usize) -> Result<Self, RuleError> {
        let name = name.into();
        let classes = pattern
            .chars()
            .map(|ch| match ch {
                'L' => Ok(CharClass::Letter),
                'D' => Ok(CharClass::Digit),
                'A' => Ok(CharClass::Any),
                _ => Err(RuleError::BadClass { name: name.clone(), ch }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if classes.is_empty() {
            return Err(RuleError::EmptyPattern { name });
        }
        if min_len < 2 || min_len > max_len {
            return Err(RuleError::BadLength { name, min: min_len, max: max_len });
        }
        Ok(PlateFormatRule { name, pattern: classes, min_len, max_len })
    }

    /// Length 4..=8, any alphanumeric.
    pub fn generic() -> Self {
        PlateFormatRule::new("generic", "A", 4, 8).expect("valid generic rule")
    }

    pub fn pattern_string(&self) -> String {
        self.pattern.iter().map(|c| c.symbol()).collect()
    }

    /// A rule made only of `A` says nothing about layout; matching it earns
    /// partial validity only.
    pub fn is_generic(&self) -> bool {
        self.pattern.iter().all(|c| *c == CharClass::Any)
    }

    pub fn length_ok(&self, plate: &str) -> bool {
        (self.min_len..=self.max_len).contains(&plate.chars().count())
    }

    pub fn matches(&self, plate: &str) -> bool {
        self.length_ok(plate)
            && plate.chars().enumerate().all(|(i, c)| {
                let class = self.pattern[i.min(self.pattern.len() - 1)];
                class.accepts(c)
            })
    }
}

/// Illustrative defaults: the generic rule and a few common state layouts.
pub fn default_rules() -> Vec<PlateFormatRule> {
    vec![
        PlateFormatRule::generic(),
        PlateFormatRule::new("Texas", "LLLDDDD", 7, 7).unwrap(),
        PlateFormatRule::new("California", "DLLLDDD", 7, 7).unwrap(),
        PlateFormatRule::new("New York", "LLLDDDD", 7, 7).unwrap(),
        PlateFormatRule::new("Florida", "LLLLDD", 6, 6).unwrap(),
    ]
}

pub fn load_rules(path: &Path) -> Result<Vec<PlateFormatRule>, RulesFileError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// The three confidence multipliers a format check can produce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidityLevels {
    pub exact: f64,
    pub partial: f64,
    pub malformed: f64,
}

impl Default for ValidityLevels {
    fn default() -> Self {
        ValidityLevels { exact: 1.0, partial: 0.5, malformed: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatMatch {
    Exact,
    Partial,
    Malformed,
}

/// Classifies a normalized plate against `rules`.
pub fn match_format(plate: &str, rules: &[PlateFormatRule]) -> FormatMatch {
    if rules.iter().any(|r| !r.is_generic() && r.matches(plate)) {
        FormatMatch::Exact
    } else if rules.iter().any(|r| r.length_ok(plate)) {
        FormatMatch::Partial
    } else {
        FormatMatch::Malformed
    }
}

/// Format validity factor for a normalized plate.
pub fn validate_format(plate: &str, rules: &[PlateFormatRule], levels: &ValidityLevels) -> f64 {
    match match_format(plate, rules) {
        FormatMatch::Exact => levels.exact,
        FormatMatch::Partial => levels.partial,
        FormatMatch::Malformed => levels.malformed,
    }
}
