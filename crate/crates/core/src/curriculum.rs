//! Outer loop: builds a student's curriculum once, from the course's
//! prerequisite graph and the student's background answers, then hands out
//! units in that fixed order.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{topological_skill_order, Course, UnitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    None,
    Some,
    Strong,
}

impl Background {
    /// Feature value used by the intervention policy.
    pub fn level(self) -> f64 {
        match self {
            Background::None => 0.0,
            Background::Some => 0.5,
            Background::Strong => 1.0,
        }
    }
}

/// Proficiency assumed for skills the student said nothing about.
pub const DEFAULT_PROFICIENCY: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentProfile {
    pub student_id: String,
    #[serde(default)]
    pub selected_skill_ids: BTreeSet<String>,
    #[serde(default)]
    pub background_answers: BTreeMap<String, Background>,
    #[serde(default)]
    pub proficiency: BTreeMap<String, f64>,
    #[serde(default)]
    pub sessions_count: u32,
}

impl StudentProfile {
    pub fn new(student_id: impl Into<String>) -> Self {
        Self {
            student_id: student_id.into(),
            selected_skill_ids: BTreeSet::new(),
            background_answers: BTreeMap::new(),
            proficiency: BTreeMap::new(),
            sessions_count: 0,
        }
    }

    pub fn background(&self, skill_id: &str) -> Background {
        self.background_answers.get(skill_id).copied().unwrap_or(Background::None)
    }

    pub fn proficiency(&self, skill_id: &str) -> f64 {
        self.proficiency.get(skill_id).copied().unwrap_or(DEFAULT_PROFICIENCY)
    }
}

/// How background answers shape a skill's share of the curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionRule {
    pub none: Inclusion,
    pub some: Inclusion,
    pub strong: Inclusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inclusion {
    All,
    ExercisesOnly,
    Skip,
}

impl Default for InclusionRule {
    fn default() -> Self {
        Self {
            none: Inclusion::All,
            some: Inclusion::ExercisesOnly,
            strong: Inclusion::Skip,
        }
    }
}

impl InclusionRule {
    fn for_background(&self, b: Background) -> Inclusion {
        match b {
            Background::None => self.none,
            Background::Some => self.some,
            Background::Strong => self.strong,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CurriculumError {
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),
    #[error("no skills selected")]
    NothingSelected,
    #[error("prerequisite cycle through `{0}`")]
    Cycle(String),
}

/// A fixed unit order plus a cursor. The order cannot change after creation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Curriculum {
    units: Vec<String>,
    cursor: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Next<'a> {
    Unit(&'a str),
    Done,
}

impl Curriculum {
    /// Rebuilds a curriculum from persisted parts. Duplicate ids or an
    /// out-of-range cursor are rejected.
    pub fn from_parts(units: Vec<String>, cursor: usize) -> Option<Self> {
        let distinct: HashSet<&String> = units.iter().collect();
        (distinct.len() == units.len() && cursor <= units.len()).then_some(Self { units, cursor })
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn is_done(&self) -> bool {
        self.cursor >= self.units.len()
    }

    pub fn next_unit(&mut self) -> Next<'_> {
        match self.units.get(self.cursor) {
            Some(id) => {
                self.cursor += 1;
                Next::Unit(id)
            }
            None => Next::Done,
        }
    }
}

pub fn generate_curriculum(course: &Course, profile: &StudentProfile) -> Result<Curriculum, CurriculumError> {
    generate_curriculum_with(course, profile, &InclusionRule::default())
}

pub fn generate_curriculum_with(
    course: &Course,
    profile: &StudentProfile,
    rule: &InclusionRule,
) -> Result<Curriculum, CurriculumError> {
    if profile.selected_skill_ids.is_empty() {
        return Err(CurriculumError::NothingSelected);
    }
    for id in &profile.selected_skill_ids {
        if course.skill(id).is_none() {
            return Err(CurriculumError::UnknownSkill(id.clone()));
        }
    }

    // Selected skills plus everything they transitively depend on.
    let mut wanted: BTreeSet<&str> = BTreeSet::new();
    let mut stack: Vec<&str> = profile.selected_skill_ids.iter().map(String::as_str).collect();
    while let Some(id) = stack.pop() {
        if !wanted.insert(id) {
            continue;
        }
        let skill = course.skill(id).ok_or_else(|| CurriculumError::UnknownSkill(id.to_string()))?;
        stack.extend(skill.prerequisites.iter().map(String::as_str));
    }

    let order = topological_skill_order(&course.skills).map_err(|c| CurriculumError::Cycle(c[0].clone()))?;
    let mut units = Vec::new();
    for skill_id in order.iter().filter(|s| wanted.contains(s.as_str())) {
        let inclusion = rule.for_background(profile.background(skill_id));
        for unit in course.units.iter().filter(|u| u.skill_id() == skill_id) {
            let keep = match (inclusion, unit.kind()) {
                (Inclusion::All, _) => true,
                (Inclusion::ExercisesOnly, kind) => kind == UnitKind::Exercise,
                (Inclusion::Skip, _) => false,
            };
            if keep {
                units.push(unit.id().to_string());
            }
        }
    }
    Ok(Curriculum { units, cursor: 0 })
}
