//! Authorable course content: skills, videos, exercises and their
//! pedagogical interventions, plus the bundle loader and validator.
//!
//! A course bundle is a directory holding a single `course.json`. Loading is
//! strict by default: unknown keys are rejected so authoring typos surface
//! immediately. Every Error-level validation finding is raised by the loader,
//! so a successfully loaded [`Course`] always satisfies its invariants.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matcher::{normalize, MatcherConfig};

pub const COURSE_FILE: &str = "course.json";

/// Default difficulty prior for exercises that do not declare one.
pub const DEFAULT_DIFFICULTY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Course {
    pub id: String,
    pub title: String,
    pub skills: Vec<Skill>,
    pub units: Vec<Unit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skill {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub prerequisites: Vec<String>,
}

/// One step of a course. The `kind` tag selects the payload variant, so a
/// kind/payload mismatch cannot be represented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Unit {
    Video { skill_id: String, payload: VideoRef },
    Exercise { skill_id: String, payload: Exercise },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Video,
    Exercise,
}

impl Unit {
    pub fn id(&self) -> &str {
        match self {
            Unit::Video { payload, .. } => &payload.id,
            Unit::Exercise { payload, .. } => &payload.id,
        }
    }

    pub fn skill_id(&self) -> &str {
        match self {
            Unit::Video { skill_id, .. } | Unit::Exercise { skill_id, .. } => skill_id,
        }
    }

    pub fn kind(&self) -> UnitKind {
        match self {
            Unit::Video { .. } => UnitKind::Video,
            Unit::Exercise { .. } => UnitKind::Exercise,
        }
    }

    pub fn as_exercise(&self) -> Option<&Exercise> {
        match self {
            Unit::Exercise { payload, .. } => Some(payload),
            Unit::Video { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRef {
    pub id: String,
    pub url: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exercise {
    pub id: String,
    pub skill_id: String,
    pub problem_statement: String,
    /// Prior difficulty in [0,1], fed to the intervention policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
    pub expectations: Vec<Expectation>,
    pub interventions: BTreeMap<InterventionKind, Vec<InterventionPayload>>,
}

impl Exercise {
    pub fn difficulty(&self) -> f64 {
        self.difficulty.unwrap_or(DEFAULT_DIFFICULTY)
    }

    pub fn payloads(&self, kind: InterventionKind) -> &[InterventionPayload] {
        self.interventions.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The first payload flagged as a multiple-choice quiz, if any.
    pub fn quiz(&self) -> Option<&InterventionPayload> {
        self.payloads(InterventionKind::MultipleChoice).first()
    }
}

/// A reference solution an attempt is compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub required_keywords: Vec<String>,
}

/// The closed set of pedagogical interventions. Declaration order is the
/// tie-break order used by the policy and must not be changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    TextHint,
    MathHint,
    Elaboration,
    Explanation,
    ConceptTree,
    MultipleChoice,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 6] = [
        InterventionKind::TextHint,
        InterventionKind::MathHint,
        InterventionKind::Elaboration,
        InterventionKind::Explanation,
        InterventionKind::ConceptTree,
        InterventionKind::MultipleChoice,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InterventionKind::TextHint => "text_hint",
            InterventionKind::MathHint => "math_hint",
            InterventionKind::Elaboration => "elaboration",
            InterventionKind::Explanation => "explanation",
            InterventionKind::ConceptTree => "concept_tree",
            InterventionKind::MultipleChoice => "multiple_choice",
        }
    }
}

impl fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InterventionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InterventionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown intervention kind `{s}`"))
    }
}

/// What the tutor does after delivering an intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Followup {
    Retry,
    #[serde(rename = "question")]
    FollowUpQuestion,
    Confirmation,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqOption {
    pub text: String,
    pub is_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPayload {
    pub kind: InterventionKind,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<McqOption>>,
    pub followup: Followup,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub followup_text: Option<String>,
}

impl InterventionPayload {
    pub fn correct_option(&self) -> Option<usize> {
        self.options.as_ref()?.iter().position(|o| o.is_correct)
    }
}

impl Course {
    pub fn skill(&self, id: &str) -> Option<&Skill> {
        self.skills.iter().find(|s| s.id == id)
    }

    pub fn unit(&self, id: &str) -> Option<&Unit> {
        self.units.iter().find(|u| u.id() == id)
    }

    pub fn exercise(&self, id: &str) -> Option<&Exercise> {
        self.unit(id).and_then(Unit::as_exercise)
    }

    pub fn exercises(&self) -> impl Iterator<Item = &Exercise> {
        self.units.iter().filter_map(Unit::as_exercise)
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("integrity error in `{id}`: {message}")]
    Integrity { id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    #[default]
    Strict,
    Lenient,
}

pub fn load_course(dir: impl AsRef<Path>) -> Result<Course, LoadError> {
    load_course_with(dir, Strictness::Strict)
}

pub fn load_course_with(dir: impl AsRef<Path>, strictness: Strictness) -> Result<Course, LoadError> {
    let path = dir.as_ref().join(COURSE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|source| LoadError::Io { path, source })?;
    parse_course(&text, strictness)
}

/// Parses and validates a course document.
pub fn parse_course(text: &str, strictness: Strictness) -> Result<Course, LoadError> {
    // Syntax first so malformed files report line/column, not a schema path.
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| LoadError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let course: Course = serde_path_to_error::deserialize(&value).map_err(|e| LoadError::Schema {
        path: e.path().to_string(),
        message: e.into_inner().to_string(),
    })?;
    if strictness == Strictness::Strict {
        // Anything that does not survive a round trip was not understood.
        let known = serde_json::to_value(&course).expect("course serializes");
        if let Some(path) = first_unknown_key(&value, &known, "") {
            return Err(LoadError::Schema {
                path,
                message: "unknown field".into(),
            });
        }
    }

    let report = validate_course(&course);
    if let Some(f) = report.errors().next() {
        return Err(LoadError::Integrity {
            id: f.id.clone(),
            message: f.message.clone(),
        });
    }
    Ok(course)
}

fn first_unknown_key(input: &serde_json::Value, known: &serde_json::Value, path: &str) -> Option<String> {
    use serde_json::Value;
    match (input, known) {
        (Value::Object(a), Value::Object(b)) => a.iter().find_map(|(k, v)| {
            let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match b.get(k) {
                None if v.is_null() => None,
                None => Some(here),
                Some(kv) => first_unknown_key(v, kv, &here),
            }
        }),
        (Value::Array(a), Value::Array(b)) => a
            .iter()
            .zip(b)
            .enumerate()
            .find_map(|(i, (v, kv))| first_unknown_key(v, kv, &format!("{path}[{i}]"))),
        _ => None,
    }
}

pub fn serialize_course(course: &Course) -> String {
    serde_json::to_string_pretty(course).expect("course serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    /// The offending skill, unit, exercise or course id.
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Warning)
    }

    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    fn error(&mut self, id: impl Into<String>, message: impl Into<String>) {
        self.findings.push(Finding {
            severity: Severity::Error,
            id: id.into(),
            message: message.into(),
        });
    }

    fn warning(&mut self, id: impl Into<String>, message: impl Into<String>) {
        self.findings.push(Finding {
            severity: Severity::Warning,
            id: id.into(),
            message: message.into(),
        });
    }
}

/// Exercises with fewer kinds than this get a thin-coverage warning.
const MIN_COVERED_KINDS: usize = 4;

pub fn validate_course(course: &Course) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut skill_ids = HashSet::new();
    for skill in &course.skills {
        if !skill_ids.insert(skill.id.as_str()) {
            report.error(&skill.id, "duplicate skill id");
        }
    }
    for skill in &course.skills {
        for pre in &skill.prerequisites {
            if pre == &skill.id {
                report.error(&skill.id, "skill lists itself as a prerequisite");
            } else if !skill_ids.contains(pre.as_str()) {
                report.error(&skill.id, format!("prerequisite references unknown skill `{pre}`"));
            }
        }
    }
    if let Err(cycle) = topological_skill_order(&course.skills) {
        report.error(&cycle[0], format!("prerequisite cycle: {}", describe_cycle(&cycle)));
    }

    let mut unit_ids = HashSet::new();
    for unit in &course.units {
        let id = unit.id();
        if !unit_ids.insert(id) {
            report.error(id, "duplicate unit id");
        }
        if !skill_ids.contains(unit.skill_id()) {
            report.error(id, "unit references unknown skill");
        }
        match unit {
            Unit::Video { payload, .. } => {
                if !(payload.duration_s > 0.0 && payload.duration_s.is_finite()) {
                    report.error(id, "video duration must be positive");
                }
            }
            Unit::Exercise { skill_id, payload } => {
                if &payload.skill_id != skill_id {
                    report.error(id, "exercise skill_id differs from its unit's skill_id");
                }
                validate_exercise(payload, &mut report);
            }
        }
    }
    report
}

fn validate_exercise(ex: &Exercise, report: &mut ValidationReport) {
    let id = ex.id.as_str();
    if let Some(d) = ex.difficulty {
        if !(0.0..=1.0).contains(&d) {
            report.error(id, "difficulty must lie in [0,1]");
        }
    }
    if ex.expectations.is_empty() {
        report.error(id, "exercise has no expectations");
    }
    let config = MatcherConfig::default();
    let mut expectation_ids = HashSet::new();
    for e in &ex.expectations {
        if !expectation_ids.insert(e.id.as_str()) {
            report.error(id, format!("duplicate expectation id `{}`", e.id));
        }
        if normalize(&e.text, &config).is_empty() {
            report.error(id, format!("expectation `{}` is empty after normalization", e.id));
        }
    }

    let covered = ex.interventions.values().filter(|v| !v.is_empty()).count();
    if covered == 0 {
        report.error(id, "exercise has no interventions");
    } else if covered < MIN_COVERED_KINDS {
        report.warning(
            id,
            format!("thin intervention coverage: {covered} of {} kinds", InterventionKind::ALL.len()),
        );
    }

    for (kind, payloads) in &ex.interventions {
        for (i, p) in payloads.iter().enumerate() {
            let at = format!("{kind}[{i}]");
            if p.kind != *kind {
                report.error(id, format!("{at}: payload kind `{}` filed under `{kind}`", p.kind));
            }
            match (&p.options, p.kind == InterventionKind::MultipleChoice) {
                (Some(options), true) => {
                    let correct = options.iter().filter(|o| o.is_correct).count();
                    if options.len() < 2 {
                        report.error(id, format!("{at}: multiple choice needs at least 2 options"));
                    }
                    if correct != 1 {
                        report.error(
                            id,
                            format!("{at}: multiple choice needs exactly one correct option, found {correct}"),
                        );
                    }
                }
                (None, true) => report.error(id, format!("{at}: multiple choice payload has no options")),
                (Some(_), false) => report.error(id, format!("{at}: options are only allowed on multiple choice")),
                (None, false) => {}
            }
            let has_text = p.followup_text.as_deref().is_some_and(|t| !t.trim().is_empty());
            if (p.followup == Followup::Retry) == has_text {
                report.error(id, format!("{at}: followup_text must be present iff followup is not retry"));
            }
        }
    }
}

/// Orders skills so every prerequisite precedes its dependents, breaking ties
/// by lexicographic skill id. Unknown prerequisite ids are ignored here (they
/// are reported separately). On failure returns the skill ids of one cycle.
pub fn topological_skill_order(skills: &[Skill]) -> Result<Vec<String>, Vec<String>> {
    let known: HashSet<&str> = skills.iter().map(|s| s.id.as_str()).collect();
    let mut indegree: BTreeMap<&str, usize> = skills.iter().map(|s| (s.id.as_str(), 0)).collect();
    let mut dependents: HashMap<&str, Vec<&str>> = HashMap::new();
    for s in skills {
        let prereqs: BTreeSet<&str> = s
            .prerequisites
            .iter()
            .map(String::as_str)
            .filter(|p| known.contains(p))
            .collect();
        for p in prereqs {
            *indegree.entry(s.id.as_str()).or_default() += 1;
            dependents.entry(p).or_default().push(s.id.as_str());
        }
    }

    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut order = Vec::with_capacity(indegree.len());
    while let Some(next) = ready.pop_first() {
        order.push(next.to_string());
        for d in dependents.get(next).into_iter().flatten() {
            let deg = indegree.get_mut(d).expect("dependent is a known skill");
            *deg -= 1;
            if *deg == 0 {
                ready.insert(d);
            }
        }
    }
    if order.len() == indegree.len() {
        return Ok(order);
    }

    // Every remaining node has an unprocessed prerequisite; walking those
    // edges backwards must revisit a node.
    let remaining: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d > 0).map(|(k, _)| *k).collect();
    let by_id: HashMap<&str, &Skill> = skills.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut path: Vec<&str> = vec![*remaining.first().expect("non-empty remainder")];
    loop {
        let cur = *path.last().expect("path non-empty");
        let prev = by_id[cur]
            .prerequisites
            .iter()
            .map(String::as_str)
            .filter(|p| remaining.contains(p))
            .min()
            .expect("remaining node has a remaining prerequisite");
        if let Some(pos) = path.iter().position(|p| *p == prev) {
            let mut cycle: Vec<String> = path[pos..].iter().rev().map(|s| s.to_string()).collect();
            let min = (0..cycle.len()).min_by_key(|&i| &cycle[i]).unwrap_or(0);
            cycle.rotate_left(min);
            return Err(cycle);
        }
        path.push(prev);
    }
}

fn describe_cycle(cycle: &[String]) -> String {
    match cycle {
        [a, b] => format!("{a}↔{b}"),
        _ => {
            let mut s = cycle.join("→");
            s.push('→');
            s.push_str(&cycle[0]);
            s
        }
    }
}
