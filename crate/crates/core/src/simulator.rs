//! Synthetic students. Each one is a Bernoulli agent per skill whose
//! proficiency grows by a fixed amount per intervention kind; they attempt
//! exercises, answer quizzes and follow-ups, skip when out of patience, and
//! fill in a one-question survey after their first session.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{Course, Exercise, Followup, InterventionKind, Unit};
use crate::curriculum::{generate_curriculum, Background, CurriculumError, Next, StudentProfile};
use crate::eventlog::{EventRecord, RecordPayload};
use crate::fsm::{start_exercise, Deps, ExerciseMode, FsmError, Limits, Outcome, Prompt, StudentAction, TutorEvent};
use crate::matcher::Matcher;
use crate::policy::{ContextVector, Policy};

pub const DEFAULT_SESSION_CAP_S: f64 = 2700.0;
/// Share of exercises the degraded variant runs as quizzes.
pub const QUIZ_RATE: f64 = 0.5;
const MAX_RESPONSIVENESS: f64 = 0.5;
const STEP_LIMIT: usize = 1000;
const UNSURE: &str = "i am not sure";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullIts,
    XmoocIts,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::FullIts => "Full ITS",
            Variant::XmoocIts => "xMOOC ITS",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub student_id: String,
    pub proficiency: BTreeMap<String, f64>,
    #[serde(default)]
    pub responsiveness: BTreeMap<InterventionKind, f64>,
    /// Consecutive failed attempts tolerated on one exercise before skipping.
    pub patience: u32,
    pub guess_rate: f64,
    /// Seconds spent on each tutor event or student action.
    pub reading_speed_s: f64,
    pub satisfaction_bias: f64,
    /// Chance of leaving the session after an exercise ends unsolved.
    #[serde(default)]
    pub dropout_after_failure: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{field} = {value} is out of range")]
    OutOfRange { field: String, value: f64 },
}

impl StudentModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let check = |field: String, value: f64, hi: f64| {
            if (0.0..=hi).contains(&value) {
                Ok(())
            } else {
                Err(ModelError::OutOfRange { field, value })
            }
        };
        for (skill, p) in &self.proficiency {
            check(format!("proficiency.{skill}"), *p, 1.0)?;
        }
        for (kind, d) in &self.responsiveness {
            check(format!("responsiveness.{kind}"), *d, MAX_RESPONSIVENESS)?;
        }
        check("guess_rate".into(), self.guess_rate, 1.0)?;
        check("satisfaction_bias".into(), self.satisfaction_bias, 1.0)?;
        check("dropout_after_failure".into(), self.dropout_after_failure, 1.0)?;
        check("reading_speed_s".into(), self.reading_speed_s, f64::MAX)
    }

    pub fn proficiency(&self, skill_id: &str) -> f64 {
        self.proficiency.get(skill_id).copied().unwrap_or(0.0)
    }

    pub fn responsiveness(&self, kind: InterventionKind) -> f64 {
        self.responsiveness.get(&kind).copied().unwrap_or(0.0)
    }

    /// Answers the background questionnaire from true proficiency.
    pub fn profile(&self) -> StudentProfile {
        let mut profile = StudentProfile::new(self.student_id.clone());
        for (skill, p) in &self.proficiency {
            profile.selected_skill_ids.insert(skill.clone());
            let answer = match *p {
                p if p < 0.4 => Background::None,
                p if p < 0.8 => Background::Some,
                _ => Background::Strong,
            };
            profile.background_answers.insert(skill.clone(), answer);
            profile.proficiency.insert(skill.clone(), *p);
        }
        profile
    }
}

pub fn apply_intervention_effect(model: &StudentModel, kind: InterventionKind, skill_id: &str) -> StudentModel {
    let mut next = model.clone();
    let boost = model.responsiveness(kind);
    if boost > 0.0 {
        let p = next.proficiency.entry(skill_id.to_string()).or_insert(0.0);
        *p = (*p + boost).min(1.0);
    }
    next
}

/// Per-exercise memory of how the student has been doing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Streak {
    pub consecutive_failures: u32,
}

impl Streak {
    pub fn observe(&mut self, events: &[TutorEvent]) {
        for e in events {
            match e {
                TutorEvent::FeedbackCorrect { .. } => self.consecutive_failures = 0,
                TutorEvent::FeedbackIncorrect { .. } => self.consecutive_failures += 1,
                _ => {}
            }
        }
    }
}

/// Picks the student's response to whatever the tutor is asking for.
/// `distractors` are wrong answers to draw from when the student errs.
pub fn simulate_action(
    model: &StudentModel,
    streak: Streak,
    prompt: Prompt<'_>,
    exercise: &Exercise,
    distractors: &[&str],
    rng: &mut dyn RngCore,
) -> StudentAction {
    let p = model.proficiency(&exercise.skill_id);
    match prompt {
        Prompt::Problem if streak.consecutive_failures > model.patience => StudentAction::Skip,
        Prompt::Problem => {
            let knows = rng.random_bool(p);
            let pool: Vec<&str> = if knows {
                exercise.expectations.iter().map(|e| e.text.as_str()).collect()
            } else {
                distractors.to_vec()
            };
            let text = pool.choose(rng).copied().unwrap_or(UNSURE);
            StudentAction::Attempt { text: text.to_string() }
        }
        Prompt::Options(options) => {
            let correct: Vec<usize> = (0..options.len()).filter(|i| options[*i].is_correct).collect();
            let wrong: Vec<usize> = (0..options.len()).filter(|i| !options[*i].is_correct).collect();
            let pick_correct = rng.random_bool(p.max(model.guess_rate));
            let pool = if pick_correct || wrong.is_empty() { &correct } else { &wrong };
            StudentAction::SelectOption {
                index: pool.choose(rng).copied().unwrap_or(0),
            }
        }
        Prompt::FollowUp { followup, text } => {
            let reply = match followup {
                Followup::FollowUpQuestion if rng.random_bool(p) => text.to_string(),
                Followup::FollowUpQuestion => UNSURE.to_string(),
                _ => "yes".to_string(),
            };
            StudentAction::FollowUpReply { text: reply }
        }
        Prompt::Closed => StudentAction::Skip,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionTriple {
    pub context: ContextVector,
    pub kind: InterventionKind,
    pub next_attempt_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub student_id: String,
    pub variant: Variant,
    pub records: Vec<EventRecord>,
    /// Seconds attributed to each record, parallel to `records`.
    pub durations_s: Vec<f64>,
    pub total_time_s: f64,
    pub triples: Vec<InterventionTriple>,
    pub exercises_started: u32,
    pub exercises_solved: u32,
    pub will_refer: bool,
    pub returned: bool,
}

impl SessionLog {
    pub fn success_rate(&self) -> f64 {
        if self.exercises_started == 0 {
            0.0
        } else {
            self.exercises_solved as f64 / self.exercises_started as f64
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Fsm(#[from] FsmError),
    #[error("exercise `{0}` did not finish within {STEP_LIMIT} steps")]
    Runaway(String),
}

/// Everything a simulated session needs besides the student.
pub struct SimContext<'a> {
    pub course: &'a Course,
    pub matcher: &'a dyn Matcher,
    pub policy: &'a dyn Policy,
    pub limits: Limits,
    pub session_cap_s: f64,
}

impl<'a> SimContext<'a> {
    pub fn new(course: &'a Course, matcher: &'a dyn Matcher, policy: &'a dyn Policy) -> Self {
        Self {
            course,
            matcher,
            policy,
            limits: Limits::default(),
            session_cap_s: DEFAULT_SESSION_CAP_S,
        }
    }
}

/// The logistic survey model, `σ(4·success_rate − 2 + bias)`.
pub fn satisfaction(success_rate: f64, bias: f64) -> f64 {
    1.0 / (1.0 + (-(4.0 * success_rate - 2.0 + bias)).exp())
}

struct Recorder {
    student_id: String,
    variant: Variant,
    records: Vec<EventRecord>,
    durations: Vec<f64>,
    elapsed_s: f64,
    session: Option<(String, u64)>,
}

impl Recorder {
    fn push(&mut self, payload: RecordPayload, duration_s: f64) {
        let (session_id, event_id) = match &mut self.session {
            Some((id, n)) => {
                *n += 1;
                (Some(id.clone()), *n)
            }
            None => (None, 0),
        };
        self.records.push(EventRecord {
            seq: self.records.len() as u64 + 1,
            event_id,
            session_id,
            student_id: self.student_id.clone(),
            ts_ms: (self.elapsed_s * 1000.0).round() as u64,
            variant: Some(self.variant),
            payload,
        });
        self.durations.push(duration_s);
        self.elapsed_s += duration_s;
    }

    fn tutor(&mut self, event: TutorEvent, reading_s: f64) {
        let d = match &event {
            TutorEvent::ShowVideo { duration_s, .. } => *duration_s,
            _ => reading_s,
        };
        self.push(RecordPayload::Tutor { event }, d);
    }
}

/// Runs one student through the course: a first session, the survey, and
/// a second session if the student decides to come back.
pub fn simulate_session(
    model: &StudentModel,
    variant: Variant,
    ctx: &SimContext<'_>,
    rng: &mut dyn RngCore,
) -> Result<SessionLog, SimError> {
    model.validate()?;
    let mut student = model.clone();
    let profile = student.profile();
    let mut curriculum = generate_curriculum(ctx.course, &profile)?;
    let mut rec = Recorder {
        student_id: student.student_id.clone(),
        variant,
        records: Vec::new(),
        durations: Vec::new(),
        elapsed_s: 0.0,
        session: None,
    };
    rec.push(RecordPayload::StudentRegistered { profile }, 0.0);

    let mut log = SessionLog {
        student_id: student.student_id.clone(),
        variant,
        records: Vec::new(),
        durations_s: Vec::new(),
        total_time_s: 0.0,
        triples: Vec::new(),
        exercises_started: 0,
        exercises_solved: 0,
        will_refer: false,
        returned: false,
    };

    for session_no in 1..=2 {
        if session_no == 2 {
            let p = satisfaction(log.success_rate(), student.satisfaction_bias);
            log.will_refer = rng.random_bool(p);
            log.returned = rng.random_bool(p);
            if !log.returned {
                break;
            }
        }
        rec.session = Some((format!("{}-{session_no}", student.student_id), 0));
        rec.push(
            RecordPayload::SessionOpened {
                course_id: ctx.course.id.clone(),
                curriculum: curriculum.units().to_vec(),
                cursor: curriculum.cursor(),
            },
            0.0,
        );
        let started = rec.elapsed_s;
        while rec.elapsed_s - started < ctx.session_cap_s {
            let cursor = curriculum.cursor();
            let unit_id = match curriculum.next_unit() {
                Next::Done => {
                    rec.tutor(TutorEvent::CurriculumComplete, student.reading_speed_s);
                    break;
                }
                Next::Unit(id) => id.to_string(),
            };
            rec.push(
                RecordPayload::UnitStarted {
                    unit_id: unit_id.clone(),
                    cursor,
                },
                0.0,
            );
            match ctx.course.unit(&unit_id).expect("curriculum units exist") {
                Unit::Video { payload, .. } => rec.tutor(
                    TutorEvent::ShowVideo {
                        video_id: payload.id.clone(),
                        url: payload.url.clone(),
                        duration_s: payload.duration_s,
                    },
                    student.reading_speed_s,
                ),
                Unit::Exercise { payload, .. } => {
                    let outcome = run_exercise(&mut student, payload, variant, ctx, &mut rec, &mut log, rng)?;
                    log.exercises_started += 1;
                    if outcome == Outcome::Solved {
                        log.exercises_solved += 1;
                    } else if rng.random_bool(student.dropout_after_failure) {
                        break;
                    }
                }
            }
        }
        rec.push(RecordPayload::SessionClosed, 0.0);
        rec.session = None;
    }

    log.total_time_s = rec.durations.iter().sum();
    log.records = rec.records;
    log.durations_s = rec.durations;
    Ok(log)
}

fn run_exercise(
    student: &mut StudentModel,
    exercise: &Exercise,
    variant: Variant,
    ctx: &SimContext<'_>,
    rec: &mut Recorder,
    log: &mut SessionLog,
    rng: &mut dyn RngCore,
) -> Result<Outcome, SimError> {
    let mode = match variant {
        Variant::XmoocIts if rng.random_bool(QUIZ_RATE) => ExerciseMode::QuizDefault,
        _ => ExerciseMode::Dialogue,
    };
    let distractors: Vec<&str> = ctx
        .course
        .exercises()
        .filter(|e| e.id != exercise.id)
        .flat_map(|e| e.expectations.iter().map(|x| x.text.as_str()))
        .collect();
    let (mut state, events) = start_exercise(exercise, ctx.limits, mode);
    for e in events {
        rec.tutor(e, student.reading_speed_s);
    }
    let mut streak = Streak::default();
    for _ in 0..STEP_LIMIT {
        if let Some(outcome) = state.outcome {
            return Ok(outcome);
        }
        let action = simulate_action(student, streak, state.prompt(exercise), exercise, &distractors, rng);
        rec.push(
            RecordPayload::Student {
                action: action.clone(),
                action_id: None,
            },
            student.reading_speed_s,
        );
        let profile = student.profile();
        let out = state.step(
            &action,
            Deps {
                exercise,
                profile: &profile,
                matcher: ctx.matcher,
                policy: ctx.policy,
                rng,
            },
        )?;
        if matches!(action, StudentAction::Attempt { .. }) {
            streak.observe(&out.events);
        }
        for r in out.rewards {
            log.triples.push(InterventionTriple {
                context: r.context,
                kind: r.kind,
                next_attempt_correct: r.reward.success(),
            });
            rec.push(
                RecordPayload::Reward {
                    kind: r.kind,
                    context: r.context,
                    reward: r.reward,
                },
                0.0,
            );
        }
        for e in out.events {
            if let TutorEvent::Intervention { intervention_kind, .. } = &e {
                *student = apply_intervention_effect(student, *intervention_kind, &exercise.skill_id);
            }
            rec.tutor(e, student.reading_speed_s);
        }
    }
    state.outcome.ok_or_else(|| SimError::Runaway(exercise.id.clone()))
}

/// A sampling distribution for one student parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Fixed(f64),
    Uniform([f64; 2]),
    Beta([f64; 2]),
}

impl Dist {
    pub fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        match *self {
            Dist::Fixed(x) => x,
            Dist::Uniform([lo, hi]) if lo >= hi => lo,
            Dist::Uniform([lo, hi]) => rng.random_range(lo..hi),
            Dist::Beta([a, b]) => Beta::new(a, b).map(|d| d.sample(rng)).unwrap_or(f64::NAN),
        }
    }

    fn check(&self, field: &str, lo: f64, hi: f64) -> Result<(), PopulationError> {
        let bad = |why: &str| PopulationError::Invalid(format!("{field}: {why}"));
        match *self {
            Dist::Fixed(x) if !(lo..=hi).contains(&x) => Err(bad("value out of range")),
            Dist::Uniform([a, b]) if a > b || !(lo..=hi).contains(&a) || !(lo..=hi).contains(&b) => {
                Err(bad("range out of bounds or reversed"))
            }
            Dist::Beta([a, b]) if !(a > 0.0 && b > 0.0) => Err(bad("beta parameters must be positive")),
            Dist::Beta(_) if lo > 0.0 || hi < 1.0 => Err(bad("beta samples fall outside the allowed range")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
    pub proficiency: Dist,
    #[serde(default)]
    pub responsiveness: BTreeMap<InterventionKind, Dist>,
    pub patience: Dist,
    pub guess_rate: Dist,
    pub reading_speed_s: Dist,
    pub satisfaction_bias: Dist,
    #[serde(default = "no_dropout")]
    pub dropout_after_failure: Dist,
}

fn default_size() -> usize {
    612
}

fn no_dropout() -> Dist {
    Dist::Fixed(0.0)
}

#[derive(Debug, Error)]
pub enum PopulationError {
    #[error("cannot read population file: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad population file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid population: {0}")]
    Invalid(String),
}

impl PopulationConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PopulationError> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PopulationError> {
        self.proficiency.check("proficiency", 0.0, 1.0)?;
        for (kind, d) in &self.responsiveness {
            d.check(&format!("responsiveness.{kind}"), 0.0, MAX_RESPONSIVENESS)?;
        }
        self.patience.check("patience", 0.0, 1000.0)?;
        self.guess_rate.check("guess_rate", 0.0, 1.0)?;
        self.reading_speed_s.check("reading_speed_s", 0.0, 3600.0)?;
        self.satisfaction_bias.check("satisfaction_bias", 0.0, 1.0)?;
        self.dropout_after_failure.check("dropout_after_failure", 0.0, 1.0)
    }

    /// Draws one student. Skills are sampled in course order.
    pub fn sample_student(&self, student_id: String, course: &Course, rng: &mut dyn RngCore) -> StudentModel {
        let proficiency = course
            .skills
            .iter()
            .map(|s| (s.id.clone(), self.proficiency.sample(rng)))
            .collect();
        let responsiveness = self.responsiveness.iter().map(|(k, d)| (*k, d.sample(rng))).collect();
        StudentModel {
            student_id,
            proficiency,
            responsiveness,
            patience: self.patience.sample(rng).round() as u32,
            guess_rate: self.guess_rate.sample(rng),
            reading_speed_s: self.reading_speed_s.sample(rng),
            satisfaction_bias: self.satisfaction_bias.sample(rng),
            dropout_after_failure: self.dropout_after_failure.sample(rng),
        }
    }
}
