//! Response parsing: plate normalization, state resolution, hedge detection
//! and format validation.

mod format;
mod lexicon;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vqa::{RawResponse, TaskKind};

pub use format::{
    default_rules, load_rules, match_format, validate_format, CharClass, FormatMatch, PlateFormatRule,
    RuleError, RulesFileError, ValidityLevels,
};
pub use lexicon::{resolve_state, StateLexicon, StateResolution};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum NormalizeError {
    #[error("no plate token in response")]
    NoPlateToken,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("could not parse {task} response: {source}")]
    ParseFailure {
        task: TaskKind,
        hedge_terms: Vec<String>,
        #[source]
        source: NormalizeError,
    },
}

/// Hedge phrases and the penalty they carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HedgeConfig {
    pub terms: Vec<String>,
    pub per_hedge: f64,
    pub cap: f64,
}

impl Default for HedgeConfig {
    fn default() -> Self {
        HedgeConfig {
            terms: ["possibly", "might be", "unclear", "cannot determine", "appears to be"]
                .map(String::from)
                .to_vec(),
            per_hedge: 0.3,
            cap: 0.6,
        }
    }
}

impl HedgeConfig {
    fn term_words(&self) -> Vec<(String, Vec<String>)> {
        let mut terms: Vec<_> = self
            .terms
            .iter()
            .map(|t| (t.clone(), t.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>()))
            .filter(|(_, w)| !w.is_empty())
            .collect();
        terms.sort_by_key(|t| std::cmp::Reverse(t.1.len()));
        terms
    }

    fn is_squashed_term(&self, candidate: &str) -> bool {
        self.terms.iter().any(|t| {
            let squashed: String = t.chars().filter(|c| !c.is_whitespace()).collect();
            squashed.eq_ignore_ascii_case(candidate)
        })
    }
}

/// Finds hedge phrases as whole-word, case-insensitive matches over `words`.
/// Returns (start index, word count, term) for each occurrence.
fn hedge_spans(words: &[String], hedges: &HedgeConfig) -> Vec<(usize, usize, String)> {
    let terms = hedges.term_words();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let hit = terms.iter().find(|(_, tw)| {
            i + tw.len() <= words.len() && words[i..i + tw.len()].iter().zip(tw).all(|(a, b)| a == b)
        });
        match hit {
            Some((term, tw)) => {
                spans.push((i, tw.len(), term.clone()));
                i += tw.len();
            }
            None => i += 1,
        }
    }
    spans
}

/// Detected hedge phrases in order, and the capped penalty they imply.
pub fn detect_hedging(text: &str, hedges: &HedgeConfig) -> (Vec<String>, f64) {
    let words: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let found: Vec<String> = hedge_spans(&words, hedges).into_iter().map(|(_, _, t)| t).collect();
    let penalty = (hedges.per_hedge * found.len() as f64).min(hedges.cap);
    (found, penalty)
}

/// Answers of at most this many tokens and characters (hedges aside) are
/// read as the plate itself, whatever their case.
const SHORT_ANSWER_TOKENS: usize = 2;
const SHORT_ANSWER_CHARS: usize = 8;

struct Token {
    /// Alphanumerics with hyphens removed; `None` if the token holds other symbols.
    core: Option<String>,
    lower: String,
}

fn tokenize(text: &str) -> Vec<Token> {
    text.split_whitespace()
        .map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_ascii_alphanumeric());
            let core = if !trimmed.is_empty() && trimmed.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
                Some(trimmed.chars().filter(|c| *c != '-').collect::<String>())
            } else {
                None
            };
            Token { lower: trimmed.to_lowercase(), core }
        })
        .collect()
}

/// Uppercase plate text with spaces and hyphens removed.
///
/// Short answers ("abc 1234", "ABC-1234") are taken whole. Longer prose is
/// reduced to its longest run of plate-like tokens (containing a digit or
/// written in capitals); hedge phrases never contribute to a plate.
pub fn normalize_plate(text: &str, hedges: &HedgeConfig) -> Result<String, NormalizeError> {
    let tokens = tokenize(text);
    let lowers: Vec<String> = tokens.iter().map(|t| t.lower.clone()).collect();
    let mut is_hedge = vec![false; tokens.len()];
    for (start, len, _) in hedge_spans(&lowers, hedges) {
        is_hedge[start..start + len].iter_mut().for_each(|h| *h = true);
    }
    let content: Vec<&Token> = tokens.iter().zip(&is_hedge).filter(|(_, h)| !**h).map(|(t, _)| t).collect();
    let short_answer = content.len() <= SHORT_ANSWER_TOKENS
        && content.iter().all(|t| t.core.as_ref().is_some_and(|c| !c.is_empty()))
        && content.iter().map(|t| t.core.as_ref().map_or(0, String::len)).sum::<usize>() <= SHORT_ANSWER_CHARS;

    let eligible = |t: &Token| match &t.core {
        Some(core) if !core.is_empty() => {
            short_answer
                || core.chars().any(|c| c.is_ascii_digit())
                || (core.len() >= 2 && core.chars().all(|c| c.is_ascii_uppercase()))
        }
        _ => false,
    };

    let mut best: Option<String> = None;
    let mut run = String::new();
    let flush = |run: &mut String, best: &mut Option<String>| {
        let candidate = run.to_ascii_uppercase();
        run.clear();
        if candidate.len() >= 2
            && !hedges.is_squashed_term(&candidate)
            && best.as_ref().is_none_or(|b| candidate.len() > b.len())
        {
            *best = Some(candidate);
        }
    };
    for (t, hedge) in tokens.iter().zip(&is_hedge) {
        if !*hedge && eligible(t) {
            run.push_str(t.core.as_deref().unwrap_or_default());
        } else {
            flush(&mut run, &mut best);
        }
    }
    flush(&mut run, &mut best);
    best.ok_or(NormalizeError::NoPlateToken)
}

/// Everything the parser needs besides the response itself.
#[derive(Debug, Clone)]
pub struct ParserContext {
    pub lexicon: StateLexicon,
    pub rules: Vec<PlateFormatRule>,
    pub hedges: HedgeConfig,
    pub validity: ValidityLevels,
}

impl Default for ParserContext {
    fn default() -> Self {
        ParserContext {
            lexicon: StateLexicon::us(),
            rules: default_rules(),
            hedges: HedgeConfig::default(),
            validity: ValidityLevels::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub task: TaskKind,
    pub value: String,
    pub hedge_terms: Vec<String>,
    pub uncertainty_penalty: f64,
    pub format_validity: f64,
    pub raw_text: String,
}

/// Task-specific parsing of a backend response.
pub fn parse(raw: &RawResponse, ctx: &ParserContext) -> Result<ParsedAnswer, ParseError> {
    let (hedge_terms, uncertainty_penalty) = detect_hedging(&raw.text, &ctx.hedges);
    let (value, format_validity) = match raw.task {
        TaskKind::PlateRecognition => {
            let plate = normalize_plate(&raw.text, &ctx.hedges).map_err(|source| ParseError::ParseFailure {
                task: raw.task,
                hedge_terms: hedge_terms.clone(),
                source,
            })?;
            let validity = validate_format(&plate, &ctx.rules, &ctx.validity);
            (plate, validity)
        }
        TaskKind::StateClassification => match ctx.lexicon.resolve(&raw.text) {
            StateResolution::Resolved(name) => (name, ctx.validity.exact),
            StateResolution::Unresolved => (raw.text.trim().to_string(), ctx.validity.malformed),
        },
        _ => (raw.text.split_whitespace().collect::<Vec<_>>().join(" "), ctx.validity.exact),
    };
    Ok(ParsedAnswer {
        task: raw.task,
        value,
        hedge_terms,
        uncertainty_penalty,
        format_validity,
        raw_text: raw.text.clone(),
    })
}

/// Normalizes an operator-entered value the same way model output is normalized.
pub fn normalize_value(task: TaskKind, text: &str, ctx: &ParserContext) -> Result<String, NormalizeError> {
    match task {
        TaskKind::PlateRecognition => normalize_plate(text, &ctx.hedges),
        TaskKind::StateClassification => Ok(match ctx.lexicon.resolve(text) {
            StateResolution::Resolved(name) => name,
            StateResolution::Unresolved => text.trim().to_string(),
        }),
        _ => Ok(text.split_whitespace().collect::<Vec<_>>().join(" ")),
    }
}
