//! Lexical solution matching: tf-idf weighted bag-of-words cosine similarity
//! between a free-text attempt and an exercise's expectations, gated by each
//! expectation's required keywords.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{Course, Expectation, Exercise, InterventionPayload, InterventionKind};

pub const DEFAULT_THRESHOLD: f64 = 0.65;
pub const MATCHER_FILE: &str = "matcher.json";

const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "how", "in", "is", "it", "its", "of", "on",
    "or", "that", "the", "this", "to", "was", "what", "when", "which", "with",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    pub threshold: f64,
    pub stopwords: BTreeSet<String>,
    pub idf_smoothing: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            idf_smoothing: 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("invalid matcher config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("threshold {0} outside [0,1]")]
    Threshold(f64),
    #[error("idf smoothing must be positive, got {0}")]
    Smoothing(f64),
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ConfigError::Threshold(self.threshold));
        }
        if !(self.idf_smoothing > 0.0 && self.idf_smoothing.is_finite()) {
            return Err(ConfigError::Smoothing(self.idf_smoothing));
        }
        Ok(())
    }

    /// Reads `matcher.json` next to a course bundle, falling back to defaults
    /// when the file is absent.
    pub fn load_for_bundle(dir: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = dir.as_ref().join(MATCHER_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    /// Replaces the stopword set with a one-token-per-line file.
    pub fn with_stopword_file(mut self, path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        self.stopwords = parse_stopwords(&text);
        Ok(self)
    }
}

pub fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

/// Lowercased, stopword-free tokens in text order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.iter().any(|t| t == token)
    }

    fn term_counts(&self) -> BTreeMap<&str, f64> {
        let mut counts = BTreeMap::new();
        for t in &self.0 {
            *counts.entry(t.as_str()).or_insert(0.0) += 1.0;
        }
        counts
    }
}

pub fn normalize(text: &str, config: &MatcherConfig) -> TokenSeq {
    TokenSeq(
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .filter(|t| !config.stopwords.contains(t))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub label: Label,
    pub score: f64,
    pub best_expectation_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keyword_misses: Vec<String>,
}

impl MatchResult {
    pub fn is_correct(&self) -> bool {
        self.label == Label::Correct
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("attempt contains no content words")]
    EmptyAttempt,
    #[error("no expectations to compare against")]
    NoExpectations,
    #[error("option index {index} out of range for {len} options")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("payload is not a multiple choice quiz")]
    NotMultipleChoice,
}

/// Grades free-text attempts. Implementations must be pure and reentrant.
pub trait Matcher: Send + Sync {
    fn threshold(&self) -> f64;

    fn score_against(
        &self,
        attempt: &str,
        expectations: &[Expectation],
        threshold: f64,
    ) -> Result<MatchResult, MatchError>;

    fn score_attempt(&self, attempt: &str, exercise: &Exercise) -> Result<MatchResult, MatchError> {
        self.score_against(attempt, &exercise.expectations, self.threshold())
    }
}

/// Document frequencies over a course's expectation texts.
#[derive(Debug, Clone, Default)]
pub struct IdfTable {
    documents: usize,
    df: HashMap<String, usize>,
    smoothing: f64,
}

impl IdfTable {
    pub fn from_course(course: &Course, config: &MatcherConfig) -> Self {
        let texts = course.exercises().flat_map(|e| e.expectations.iter().map(|x| x.text.as_str()));
        Self::from_texts(texts, config)
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, config: &MatcherConfig) -> Self {
        let mut documents = 0;
        let mut df: HashMap<String, usize> = HashMap::new();
        for text in texts {
            documents += 1;
            let distinct: BTreeSet<String> = normalize(text, config).0.into_iter().collect();
            for t in distinct {
                *df.entry(t).or_default() += 1;
            }
        }
        Self {
            documents,
            df,
            smoothing: config.idf_smoothing,
        }
    }

    /// `ln((N + s) / (df + s)) + 1`; tokens absent from the corpus get the
    /// largest finite weight.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0) as f64;
        ((self.documents as f64 + self.smoothing) / (df + self.smoothing)).ln() + 1.0
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    fn weigh<'t>(&self, tokens: &'t TokenSeq) -> BTreeMap<&'t str, f64> {
        let mut v = tokens.term_counts();
        for (t, w) in v.iter_mut() {
            *w *= self.idf(t);
        }
        v
    }
}

fn cosine(a: &BTreeMap<&str, f64>, b: &BTreeMap<&str, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(t, wa)| b.get(t).map(|wb| wa * wb)).sum();
    let na: f64 = a.values().map(|w| w * w).sum();
    let nb: f64 = b.values().map(|w| w * w).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // sqrt(x*x) == x in IEEE arithmetic, so identical vectors score exactly 1.
    (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct TfIdfMatcher {
    config: MatcherConfig,
    idf: IdfTable,
}

impl TfIdfMatcher {
    pub fn new(config: MatcherConfig, idf: IdfTable) -> Self {
        Self { config, idf }
    }

    pub fn for_course(course: &Course, config: MatcherConfig) -> Self {
        let idf = IdfTable::from_course(course, &config);
        Self { config, idf }
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.config
    }

    pub fn idf(&self) -> &IdfTable {
        &self.idf
    }
}

impl Matcher for TfIdfMatcher {
    fn threshold(&self) -> f64 {
        self.config.threshold
    }

    fn score_against(
        &self,
        attempt: &str,
        expectations: &[Expectation],
        threshold: f64,
    ) -> Result<MatchResult, MatchError> {
        let tokens = normalize(attempt, &self.config);
        if tokens.is_empty() {
            return Err(MatchError::EmptyAttempt);
        }
        let attempt_vec = self.idf.weigh(&tokens);

        let mut best: Option<(f64, &Expectation)> = None;
        for e in expectations {
            let expected = normalize(&e.text, &self.config);
            let score = cosine(&attempt_vec, &self.idf.weigh(&expected));
            let better = match best {
                None => true,
                Some((s, b)) => score > s || (score == s && e.id < b.id),
            };
            if better {
                best = Some((score, e));
            }
        }
        let (score, expectation) = best.ok_or(MatchError::NoExpectations)?;

        let keyword_misses: Vec<String> = expectation
            .required_keywords
            .iter()
            .map(|k| k.to_lowercase())
            .filter(|k| !tokens.contains(k))
            .collect();
        let label = if score >= threshold && keyword_misses.is_empty() {
            Label::Correct
        } else {
            Label::Incorrect
        };
        Ok(MatchResult {
            label,
            score,
            best_expectation_id: expectation.id.clone(),
            keyword_misses,
        })
    }
}

/// Convenience wrapper scoring against a whole exercise with an explicit
/// corpus and config.
pub fn score_attempt(
    attempt: &str,
    exercise: &Exercise,
    idf: &IdfTable,
    config: &MatcherConfig,
) -> Result<MatchResult, MatchError> {
    TfIdfMatcher::new(config.clone(), idf.clone()).score_attempt(attempt, exercise)
}

pub fn classify_mcq(selected: usize, payload: &InterventionPayload) -> Result<MatchResult, MatchError> {
    if payload.kind != InterventionKind::MultipleChoice {
        return Err(MatchError::NotMultipleChoice);
    }
    let options = payload.options.as_deref().ok_or(MatchError::NotMultipleChoice)?;
    let option = options.get(selected).ok_or(MatchError::IndexOutOfRange {
        index: selected,
        len: options.len(),
    })?;
    let (label, score) = if option.is_correct {
        (Label::Correct, 1.0)
    } else {
        (Label::Incorrect, 0.0)
    };
    Ok(MatchResult {
        label,
        score,
        best_expectation_id: format!("option-{selected}"),
        keyword_misses: Vec::new(),
    })
}
