use std::collections::BTreeMap;

use serde::Serialize;

const STATES: [(&str, &str); 50] = [
    ("AL", "Alabama"),
    ("AK", "Alaska"),
    ("AZ", "Arizona"),
    ("AR", "Arkansas"),
    ("CA", "California"),
    ("CO", "Colorado"),
    ("CT", "Connecticut"),
    ("DE", "Delaware"),
    ("FL", "Florida"),
    ("GA", "Georgia"),
    ("HI", "Hawaii"),
    ("ID", "Idaho"),
    ("IL", "Illinois"),
    ("IN", "Indiana"),
    ("IA", "Iowa"),
    ("KS", "Kansas"),
    ("KY", "Kentucky"),
    ("LA", "Louisiana"),
    ("ME", "Maine"),
    ("MD", "Maryland"),
    ("MA", "Massachusetts"),
    ("MI", "Michigan"),
    ("MN", "Minnesota"),
    ("MS", "Mississippi"),
    ("MO", "Missouri"),
    ("MT", "Montana"),
    ("NE", "Nebraska"),
    ("NV", "Nevada"),
    ("NH", "New Hampshire"),
    ("NJ", "New Jersey"),
    ("NM", "New Mexico"),
    ("NY", "New York"),
    ("NC", "North Carolina"),
    ("ND", "North Dakota"),
    ("OH", "Ohio"),
    ("OK", "Oklahoma"),
    ("OR", "Oregon"),
    ("PA", "Pennsylvania"),
    ("RI", "Rhode Island"),
    ("SC", "South Carolina"),
    ("SD", "South Dakota"),
    ("TN", "Tennessee"),
    ("TX", "Texas"),
    ("UT", "Utah"),
    ("VT", "Vermont"),
    ("VA", "Virginia"),
    ("WA", "Washington"),
    ("WV", "West Virginia"),
    ("WI", "Wisconsin"),
    ("WY", "Wyoming"),
];

const ALIASES: [(&str, &str); 14] = [
    ("calif", "California"),
    ("cali", "California"),
    ("tex", "Texas"),
    ("fla", "Florida"),
    ("penn", "Pennsylvania"),
    ("penna", "Pennsylvania"),
    ("mass", "Massachusetts"),
    ("ariz", "Arizona"),
    ("okla", "Oklahoma"),
    ("n carolina", "North Carolina"),
    ("s carolina", "South Carolina"),
    ("n dakota", "North Dakota"),
    ("s dakota", "South Dakota"),
    ("w virginia", "West Virginia"),
];

/// Canonical US state names with two-letter codes and a few common variants.
#[derive(Debug, Clone, Serialize)]
pub struct StateLexicon {
    canonical: Vec<&'static str>,
    abbreviations: BTreeMap<&'static str, &'static str>,
    /// Lowercase name or variant -> canonical name, as word sequences.
    aliases: BTreeMap<String, &'static str>,
}

impl Default for StateLexicon {
    fn default() -> Self {
        Self::us()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum StateResolution {
    Resolved(String),
    Unresolved,
}

impl StateResolution {
    pub fn name(&self) -> Option<&str> {
        match self {
            StateResolution::Resolved(n) => Some(n),
            StateResolution::Unresolved => None,
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl StateLexicon {
    pub fn us() -> Self {
        let canonical: Vec<_> = STATES.iter().map(|(_, n)| *n).collect();
        let abbreviations = STATES.iter().copied().collect();
        let mut aliases = BTreeMap::new();
        for name in &canonical {
            aliases.insert(name.to_lowercase(), *name);
        }
        for (alias, name) in ALIASES {
            aliases.insert(alias.to_string(), name);
        }
        StateLexicon { canonical, abbreviations, aliases }
    }

    pub fn canonical_names(&self) -> &[&'static str] {
        &self.canonical
    }

    pub fn is_canonical(&self, name: &str) -> bool {
        self.canonical.contains(&name)
    }

    pub fn abbreviation_of(&self, name: &str) -> Option<&'static str> {
        self.abbreviations.iter().find(|(_, n)| **n == name).map(|(a, _)| *a)
    }

    /// Whole-word, case-insensitive match of names and aliases; longest
    /// phrases are consumed first so "West Virginia" does not also count as
    /// "Virginia". Two-letter codes match only in upper case, or when the
    /// whole text is the code, so words like "in" and "or" are not states.
    pub fn resolve(&self, text: &str) -> StateResolution {
        let original = words(text);
        if original.is_empty() {
            return StateResolution::Unresolved;
        }
        let lower: Vec<String> = original.iter().map(|w| w.to_lowercase()).collect();
        let max_len = self.aliases.keys().map(|k| k.split(' ').count()).max().unwrap_or(1);
        let mut found: Vec<&'static str> = Vec::new();
        let mut i = 0;
        while i < lower.len() {
            let mut matched = 0;
            for len in (1..=max_len.min(lower.len() - i)).rev() {
                let phrase = lower[i..i + len].join(" ");
                if let Some(name) = self.aliases.get(&phrase) {
                    found.push(name);
                    matched = len;
                    break;
                }
            }
            if matched == 0 {
                let word = &original[i];
                let code_ok = original.len() == 1 || word.chars().all(|c| c.is_ascii_uppercase());
                if code_ok {
                    if let Some(name) = self.abbreviations.get(word.to_ascii_uppercase().as_str()) {
                        found.push(name);
                    }
                }
                matched = 1;
            }
            i += matched;
        }
        found.sort_unstable();
        found.dedup();
        match found.as_slice() {
            [one] => StateResolution::Resolved(one.to_string()),
            _ => StateResolution::Unresolved,
        }
    }
}

/// Resolves free text to a canonical state name.
pub fn resolve_state(text: &str, lexicon: &StateLexicon) -> StateResolution {
    lexicon.resolve(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(text: &str) -> Option<String> {
        resolve_state(text, &StateLexicon::us()).name().map(str::to_string)
    }

    #[test]
    fn examples() {
        assert_eq!(r("texas").as_deref(), Some("Texas"));
        assert_eq!(r("The plate is from California.").as_deref(), Some("California"));
        assert_eq!(r("New Mexico or New York"), None);
    }

    #[test]
    fn codes_and_aliases() {
        assert_eq!(r("TX").as_deref(), Some("Texas"));
        assert_eq!(r("tx").as_deref(), Some("Texas"));
        assert_eq!(r("Plate from NY").as_deref(), Some("New York"));
        assert_eq!(r("The plate is in Texas").as_deref(), Some("Texas"));
        assert_eq!(r("Calif.").as_deref(), Some("California"));
        assert_eq!(r("West Virginia").as_deref(), Some("West Virginia"));
        assert_eq!(r("ARKANSAS").as_deref(), Some("Arkansas"));
        assert_eq!(r("Texas, yes Texas").as_deref(), Some("Texas"));
    }

    #[test]
    fn nothing_matches() {
        assert_eq!(r("unclear"), None);
        assert_eq!(r(""), None);
        assert_eq!(r("Ontario"), None);
    }

    #[test]
    fn lexicon_is_consistent() {
        let lex = StateLexicon::us();
        assert_eq!(lex.canonical_names().len(), 50);
        for name in lex.aliases.values().chain(lex.abbreviations.values()) {
            assert!(lex.is_canonical(name));
        }
        for name in lex.canonical_names() {
            assert_eq!(r(name).as_deref(), Some(*name));
            let code = lex.abbreviation_of(name).unwrap();
            assert_eq!(r(code).as_deref(), Some(*name));
        }
    }
}
