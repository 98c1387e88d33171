//! Prompt grammar, query expansion and report synthesis from labels.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelVector, ABSENT, PRESENT};
use crate::error::{Error, Result};

/// Grammar bundled with the crate, matching the synthetic classes.
pub const DEFAULT_GRAMMAR: &str = include_str!("../assets/default_grammar.toml");

/// One class entry of a [`PromptGrammar`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassGrammar {
    pub name: String,
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub effects: Vec<String>,
    #[serde(default)]
    pub locations: Vec<String>,
}

/// Slot vocabularies for the positive template
/// `{adverb} {verb} {effect}* {location}* {synonym}` and the negative
/// template `{adverb} {verb} {absence} {synonym}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptGrammar {
    pub adverbs: Vec<String>,
    pub indication_verbs: Vec<String>,
    pub absence_markers: Vec<String>,
    pub classes: Vec<ClassGrammar>,
}

impl PromptGrammar {
    pub fn parse(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Config(format!("grammar: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn default_grammar() -> Self {
        Self::parse(DEFAULT_GRAMMAR).expect("bundled grammar is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Validation("grammar defines no classes".into()));
        }
        if self.adverbs.is_empty() || self.indication_verbs.is_empty() {
            return Err(Error::Validation(
                "grammar needs at least one adverb and one indication verb (an adverb may be empty)".into(),
            ));
        }
        if self.absence_markers.iter().all(|m| m.trim().is_empty()) {
            return Err(Error::Validation("grammar needs a non-empty absence marker".into()));
        }
        let mut names = HashSet::new();
        for c in &self.classes {
            if c.name.trim().is_empty() {
                return Err(Error::Validation("class with empty name".into()));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::Validation(format!("duplicate class `{}`", c.name)));
            }
            if c.synonyms.iter().all(|s| s.trim().is_empty()) {
                return Err(Error::Validation(format!("class `{}` has no synonyms", c.name)));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Positive and negative expansions of every class, in class order.
    pub fn expand(&self, scheme: PromptScheme) -> Result<Vec<PromptQueries>> {
        (0..self.classes.len())
            .map(|c| match scheme {
                PromptScheme::Basic => expand_basic(&self.classes[c].name),
                PromptScheme::Detailed => expand_detailed(self, c),
            })
            .collect()
    }
}

/// Query-text sets for one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptQueries {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptScheme {
    Basic,
    #[default]
    Detailed,
}

impl std::str::FromStr for PromptScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Self::Basic),
            "detailed" => Ok(Self::Detailed),
            other => Err(Error::Config(format!("unknown prompt scheme `{other}`"))),
        }
    }
}

fn join_slots(parts: &[&str]) -> String {
    parts
        .iter()
        .flat_map(|p| p.split_whitespace())
        .collect::<Vec<_>>()
        .join(" ")
}

/// `({class}, No {class})`.
pub fn expand_basic(class_name: &str) -> Result<PromptQueries> {
    let name = class_name.trim();
    if name.is_empty() {
        return Err(Error::Validation("empty class name".into()));
    }
    Ok(PromptQueries {
        positive: vec![name.to_string()],
        negative: vec![format!("No {name}")],
    })
}

/// All slot combinations of both templates for class `class_id`.
/// Effects and locations each add an empty alternative.
pub fn expand_detailed(grammar: &PromptGrammar, class_id: usize) -> Result<PromptQueries> {
    let class = grammar.classes.get(class_id).ok_or_else(|| {
        Error::Validation(format!(
            "class index {class_id} out of range for {} classes",
            grammar.classes.len()
        ))
    })?;
    if class.synonyms.is_empty() {
        return Err(Error::Validation(format!("class `{}` has no synonyms", class.name)));
    }
    let optional = |v: &[String]| {
        let mut out: Vec<String> = v.to_vec();
        out.push(String::new());
        out
    };
    let effects = optional(&class.effects);
    let locations = optional(&class.locations);
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for adverb in &grammar.adverbs {
        for verb in &grammar.indication_verbs {
            for effect in &effects {
                for location in &locations {
                    for syn in &class.synonyms {
                        positive.push(join_slots(&[adverb, verb, effect, location, syn]));
                    }
                }
            }
            for absence in &grammar.absence_markers {
                for syn in &class.synonyms {
                    negative.push(join_slots(&[adverb, verb, absence, syn]));
                }
            }
        }
    }
    Ok(PromptQueries { positive, negative })
}

/// Lowercased, whitespace-collapsed text without trailing punctuation.
pub fn normalize(sentence: &str) -> String {
    sentence
        .trim()
        .trim_end_matches(['.', '!', '?'])
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn as_sentence(query: &str) -> String {
    let mut chars = query.chars();
    let mut out: String = match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    out.push('.');
    out
}

/// Sampling counts for [`ReportSynthesizer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisOptions {
    pub k_pos: usize,
    pub k_neg: usize,
    /// Cap on how many absent classes are mentioned per report.
    pub max_negative_classes: Option<usize>,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            k_pos: 1,
            k_neg: 1,
            max_negative_classes: Some(3),
        }
    }
}

/// Mention of a class recovered from a sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mention {
    pub class: usize,
    pub present: bool,
}

/// Turns label vectors into report sentences drawn from the detailed
/// expansions, and maps sentences back to the class they mention.
#[derive(Clone, Debug)]
pub struct ReportSynthesizer {
    grammar: PromptGrammar,
    expansions: Vec<PromptQueries>,
    options: SynthesisOptions,
    matcher: HashMap<String, Mention>,
}

impl ReportSynthesizer {
    pub fn new(grammar: PromptGrammar, options: SynthesisOptions) -> Result<Self> {
        grammar.validate()?;
        let expansions = grammar.expand(PromptScheme::Detailed)?;
        let mut matcher = HashMap::new();
        for (class, q) in expansions.iter().enumerate() {
            for (texts, present) in [(&q.positive, true), (&q.negative, false)] {
                if options.k_pos > q.positive.len() || options.k_neg > q.negative.len() {
                    return Err(Error::Config(format!(
                        "class `{}` has too few expansions for k_pos = {}, k_neg = {}",
                        grammar.classes[class].name, options.k_pos, options.k_neg
                    )));
                }
                for t in texts {
                    let m = Mention { class, present };
                    if let Some(prev) = matcher.insert(normalize(t), m) {
                        if prev != m {
                            return Err(Error::Validation(format!(
                                "query `{t}` is ambiguous between classes `{}` and `{}`",
                                grammar.classes[prev.class].name, grammar.classes[class].name
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self {
            grammar,
            expansions,
            options,
            matcher,
        })
    }

    pub fn grammar(&self) -> &PromptGrammar {
        &self.grammar
    }

    pub fn options(&self) -> SynthesisOptions {
        self.options
    }

    /// Samples a shuffled report for `labels` under `seed`.
    pub fn synthesize(&self, labels: &LabelVector, seed: u64) -> Result<Vec<String>> {
        let n = self.grammar.classes.len();
        if labels.len() != n {
            return Err(Error::Validation(format!(
                "label vector has {} entries, grammar has {n} classes",
                labels.len()
            )));
        }
        if !labels.has_certain() {
            return Err(Error::Validation(
                "cannot synthesize a report without any present or absent label".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut absent = Vec::new();
        for (c, &v) in labels.values().iter().enumerate() {
            if v == PRESENT {
                let picks = self.expansions[c]
                    .positive
                    .choose_multiple(&mut rng, self.options.k_pos);
                out.extend(picks.map(|q| as_sentence(q)));
            } else if v == ABSENT {
                absent.push(c);
            }
        }
        if let Some(cap) = self.options.max_negative_classes {
            if absent.len() > cap {
                let mut keep: Vec<usize> = absent.choose_multiple(&mut rng, cap).copied().collect();
                keep.sort_unstable();
                absent = keep;
            }
        }
        for c in absent {
            let picks = self.expansions[c]
                .negative
                .choose_multiple(&mut rng, self.options.k_neg);
            out.extend(picks.map(|q| as_sentence(q)));
        }
        if out.is_empty() {
            return Err(Error::Validation("synthesized report is empty".into()));
        }
        out.shuffle(&mut rng);
        Ok(out)
    }

    pub fn match_sentence(&self, sentence: &str) -> Option<Mention> {
        self.matcher.get(&normalize(sentence)).copied()
    }

    /// Present and absent class sets mentioned by `sentences`; errors on a
    /// sentence outside every expansion.
    pub fn parse_report(&self, sentences: &[String]) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
        let mut present = BTreeSet::new();
        let mut absent = BTreeSet::new();
        for s in sentences {
            let m = self
                .match_sentence(s)
                .ok_or_else(|| Error::Validation(format!("sentence `{s}` matches no expansion")))?;
            if m.present {
                present.insert(m.class);
            } else {
                absent.insert(m.class);
            }
        }
        Ok((present, absent))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_scheme() {
        let q = expand_basic("Fracture").unwrap();
        assert_eq!(q.positive, vec!["Fracture"]);
        assert_eq!(q.negative, vec!["No Fracture"]);
        assert!(expand_basic("").is_err());
    }

    #[test]
    fn empty_slots_collapse() {
        assert_eq!(join_slots(&["", "shows", "", "apical", "x"]), "shows apical x");
    }

    #[test]
    fn sentence_form_round_trips_through_normalize() {
        assert_eq!(as_sentence("likely shows x"), "Likely shows x.");
        assert_eq!(normalize("Likely  shows X."), "likely shows x");
    }

    #[test]
    fn default_grammar_is_unambiguous() {
        let s = ReportSynthesizer::new(PromptGrammar::default_grammar(), SynthesisOptions::default());
        assert!(s.is_ok());
    }
}
