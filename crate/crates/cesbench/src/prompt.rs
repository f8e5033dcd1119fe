//! Prompt rendering and free-text class extraction.
//!
//! The two classification prompt templates ship as golden files under
//! `prompts/`; rendering must reproduce them byte for byte. The extraction
//! side turns arbitrary model text into a class decision and never fails:
//! text that matches nothing becomes `Unresolved`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{normalize_label, CesClass};
use crate::metrics::Prediction;

/// Golden simple prompt (single sentence, class list only).
pub const PROMPT_SIMPLE_GOLDEN: &str = include_str!("../prompts/prompt1.txt");
/// Golden extended prompt (class list plus one definition line per class).
pub const PROMPT_EXTENDED_GOLDEN: &str = include_str!("../prompts/prompt2.txt");
/// Golden cluster-mapping prompt template with `{keywords}` and
/// `{categories}` placeholders.
pub const PROMPT_CLUSTER_MAP_GOLDEN: &str = include_str!("../prompts/cluster_map.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptId {
    Simple,
    Extended,
}

impl std::str::FromStr for PromptId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "simple" | "1" | "prompt1" => Ok(PromptId::Simple),
            "extended" | "2" | "prompt2" => Ok(PromptId::Extended),
            other => Err(PromptError::UnknownTemplate(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no definition available for class {0}")]
    MissingDefinition(CesClass),
    #[error("taxonomy is empty")]
    EmptyTaxonomy,
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
}

fn class_definition(class: CesClass) -> &'static str {
    match class {
        CesClass::CulturalReligious => {
            "The image depicts religious symbols, cultural artifacts, traditions, ceremonies, \
             or anything related to culture and belief systems."
        }
        CesClass::FaunaFlora => "The image features animals (fauna) or plants (flora) in any environment.",
        CesClass::Gastronomy => "The image is related to food, cooking, culinary experiences, or dining.",
        CesClass::LandscapeNature => {
            "The image contains natural landscapes, such as mountains, rivers, forests, \
             or other untouched environments."
        }
        CesClass::Sports => {
            "The image shows physical activities, competitions, or sports equipment related \
             to athletic endeavors."
        }
        CesClass::UrbanRural => {
            "The image captures cityscapes, villages, rural settings, buildings, or any \
             human-made environments."
        }
    }
}

/// A classification prompt template: the fixed instruction plus, for the
/// extended form, one definition per class. Custom templates may override
/// definitions; a missing definition is a render-time error.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub id: PromptId,
    definitions: Option<Vec<(CesClass, String)>>,
}

impl PromptTemplate {
    pub fn simple() -> Self {
        Self {
            id: PromptId::Simple,
            definitions: None,
        }
    }

    pub fn extended() -> Self {
        let definitions = CesClass::ALL
            .iter()
            .map(|c| (*c, class_definition(*c).to_string()))
            .collect();
        Self {
            id: PromptId::Extended,
            definitions: Some(definitions),
        }
    }

    pub fn of(id: PromptId) -> Self {
        match id {
            PromptId::Simple => Self::simple(),
            PromptId::Extended => Self::extended(),
        }
    }

    /// Extended template with caller-supplied definitions.
    pub fn extended_with_definitions(definitions: Vec<(CesClass, String)>) -> Self {
        Self {
            id: PromptId::Extended,
            definitions: Some(definitions),
        }
    }

    fn definition_for(&self, class: CesClass) -> Option<&str> {
        self.definitions
            .as_ref()?
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, d)| d.as_str())
    }
}

/// "A, B, ..., or Z" with an Oxford comma; a single name stands alone.
pub fn join_class_names(taxonomy: &[CesClass]) -> String {
    let names: Vec<&str> = taxonomy.iter().map(|c| c.canonical_name()).collect();
    match names.len() {
        0 => String::new(),
        1 => names[0].to_string(),
        2 => format!("{} or {}", names[0], names[1]),
        _ => {
            let head = names[..names.len() - 1].join(", ");
            format!("{head}, or {}", names[names.len() - 1])
        }
    }
}

/// Render a template over the taxonomy. Byte-identical to the golden files
/// for the two canonical templates and the full six-class taxonomy.
pub fn render_prompt(template: &PromptTemplate, taxonomy: &[CesClass]) -> Result<String, PromptError> {
    if taxonomy.is_empty() {
        return Err(PromptError::EmptyTaxonomy);
    }
    let mut out = format!(
        "Classify the image into one of these categories: {}.",
        join_class_names(taxonomy)
    );
    if template.id == PromptId::Extended {
        out.push_str("\nThe definitions for each category are as follows:");
        for class in taxonomy {
            let definition = template
                .definition_for(*class)
                .ok_or(PromptError::MissingDefinition(*class))?;
            out.push_str(&format!("\n{}: {}", class.canonical_name(), definition));
        }
    }
    Ok(out)
}

/// Render the cluster-mapping prompt for a keyword list.
pub fn render_cluster_prompt(keywords: &[String], taxonomy: &[CesClass]) -> Result<String, PromptError> {
    if taxonomy.is_empty() {
        return Err(PromptError::EmptyTaxonomy);
    }
    Ok(PROMPT_CLUSTER_MAP_GOLDEN
        .replace("{keywords}", &keywords.join(", "))
        .replace("{categories}", &join_class_names(taxonomy)))
}

/// How a decision was reached, in matching-pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    /// Whole trimmed response equals a canonical name.
    Exact,
    /// Whole trimmed response equals an alias.
    Alias,
    /// Exactly one class mentioned somewhere in the text.
    Substring,
    /// Several classes mentioned; the earliest occurrence won.
    FirstMention,
    Unresolved,
}

/// The parsed outcome for one model response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDecision {
    pub item_id: String,
    pub predicted: Prediction,
    pub match_kind: MatchKind,
    pub raw_text: String,
}

/// Every (normalized pattern, class, is_canonical) the matcher knows.
fn known_patterns(taxonomy: &[CesClass]) -> Vec<(String, CesClass, bool)> {
    let mut patterns = Vec::new();
    for class in taxonomy {
        patterns.push((normalize_label(class.canonical_name()), *class, true));
        for alias in class.aliases() {
            patterns.push((normalize_label(alias), *class, false));
        }
    }
    patterns
}

/// Normalize for substring search while keeping a 1:1 char mapping:
/// lowercase ASCII, `-`/`_` to space. Length is preserved so offsets in the
/// normalized text equal offsets in the original.
fn normalize_preserving_offsets(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '-' | '_' => ' ',
            c => c.to_ascii_lowercase(),
        })
        .collect()
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Find pattern occurrences bounded by non-word characters.
fn find_bounded(haystack: &str, needle: &str) -> Option<usize> {
    let hay: Vec<char> = haystack.chars().collect();
    let pat: Vec<char> = needle.chars().collect();
    if pat.is_empty() || pat.len() > hay.len() {
        return None;
    }
    for start in 0..=(hay.len() - pat.len()) {
        if hay[start..start + pat.len()] != pat[..] {
            continue;
        }
        let before_ok = start == 0 || !is_word_char(hay[start - 1]);
        let after = start + pat.len();
        let after_ok = after == hay.len() || !is_word_char(hay[after]);
        if before_ok && after_ok {
            return Some(start);
        }
    }
    None
}

/// Map free-form model output to a class decision.
///
/// Pipeline: (1) the whole trimmed response equals a canonical name or
/// alias; (2) exactly one class occurs as a bounded substring; (3) several
/// classes occur, earliest mention wins; (4) otherwise unresolved. Hyphen,
/// underscore, and space are interchangeable separators throughout.
pub fn extract_class(item_id: &str, raw: &str, taxonomy: &[CesClass]) -> ClassDecision {
    let patterns = known_patterns(taxonomy);

    // Step 1: full-text match after trimming whitespace and terminal punctuation.
    let trimmed = raw
        .trim()
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim();
    let normalized_whole = normalize_label(trimmed);
    for (pattern, class, canonical) in &patterns {
        if normalized_whole == *pattern {
            return ClassDecision {
                item_id: item_id.to_string(),
                predicted: Prediction::Class(*class),
                match_kind: if *canonical {
                    MatchKind::Exact
                } else {
                    MatchKind::Alias
                },
                raw_text: raw.to_string(),
            };
        }
    }

    // Steps 2-3: bounded substring occurrences, earliest offset per class.
    let haystack = normalize_preserving_offsets(raw);
    let mut mentions: Vec<(usize, CesClass)> = Vec::new();
    for (pattern, class, _) in &patterns {
        if let Some(offset) = find_bounded(&haystack, pattern) {
            match mentions.iter_mut().find(|(_, c)| c == class) {
                Some(existing) if existing.0 > offset => existing.0 = offset,
                Some(_) => {}
                None => mentions.push((offset, *class)),
            }
        }
    }
    match mentions.len() {
        0 => ClassDecision {
            item_id: item_id.to_string(),
            predicted: Prediction::Unresolved,
            match_kind: MatchKind::Unresolved,
            raw_text: raw.to_string(),
        },
        1 => ClassDecision {
            item_id: item_id.to_string(),
            predicted: Prediction::Class(mentions[0].1),
            match_kind: MatchKind::Substring,
            raw_text: raw.to_string(),
        },
        _ => {
            mentions.sort_by_key(|(offset, class)| (*offset, class.index()));
            ClassDecision {
                item_id: item_id.to_string(),
                predicted: Prediction::Class(mentions[0].1),
                match_kind: MatchKind::FirstMention,
                raw_text: raw.to_string(),
            }
        }
    }
}
