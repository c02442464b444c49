//! The live tutoring engine behind the HTTP API.
//!
//! Every change of state is a record in an append-only log. Reopening a log
//! feeds its records back through the same transition functions the live
//! service uses, checking that each one produces exactly what was logged, so
//! a restarted service ends up where the old one stopped: same profiles,
//! cursors, open exercises, random streams and policy.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tutor_core::content::{load_course, parse_course, serialize_course, Course, LoadError, Strictness, Unit};
use tutor_core::curriculum::{generate_curriculum, Background, Curriculum, Next, StudentProfile};
use tutor_core::eventlog::{count_learning_gain, read_log, EventRecord, GainCounts, LogError, RecordPayload};
use tutor_core::fsm::{
    legal_in, start_exercise, ActionKind, Deps, ExerciseMode, FsmError, FsmState, Limits, Outcome, SessionState,
    StudentAction, TutorEvent,
};
use tutor_core::matcher::{MatcherConfig, TfIdfMatcher};
use tutor_core::policy::PolicyModel;

/// Student id used on records that belong to nobody.
pub const SERVICE_ID: &str = "service";
const COURSE_FILE: &str = "course.json";

/// Initial proficiency for each background answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProficiencyMap {
    pub none: f64,
    pub some: f64,
    pub strong: f64,
}

impl Default for ProficiencyMap {
    fn default() -> Self {
        Self {
            none: 0.2,
            some: 0.5,
            strong: 0.9,
        }
    }
}

impl ProficiencyMap {
    pub fn level(&self, answer: Background) -> f64 {
        match answer {
            Background::None => self.none,
            Background::Some => self.some,
            Background::Strong => self.strong,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Course bundles are loaded from here at startup, and uploads are
    /// written here.
    pub content_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Model used when the log does not seed one.
    pub initial_policy: PolicyModel,
    pub proficiency: ProficiencyMap,
    pub limits: Limits,
    /// Write `<log>.policy.json` every this many policy updates; 0 disables.
    pub snapshot_every: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            content_dir: None,
            log_path: None,
            initial_policy: PolicyModel::default(),
            proficiency: ProficiencyMap::default(),
            limits: Limits::default(),
            snapshot_every: 100,
        }
    }
}

#[derive(Debug, Error)]
pub enum TutorError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),
    #[error("{action:?} is not legal in state {state}")]
    IllegalAction {
        state: FsmState,
        action: ActionKind,
        legal: Vec<ActionKind>,
    },
    #[error("session `{0}` is closed")]
    SessionClosed(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid course: {0}")]
    InvalidCourse(#[from] LoadError),
    #[error("course id `{0}` may only use letters, digits, `-` and `_`")]
    BadCourseId(String),
    #[error("course `{0}` already exists with different content")]
    CourseConflict(String),
    #[error("course bundle {path}: {source}")]
    Content { path: PathBuf, source: LoadError },
    #[error("event log: {0}")]
    Journal(#[from] io::Error),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("replay diverged at log line {line}: {reason}")]
    Diverged { line: usize, reason: String },
}

/// Body of `POST /students`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewStudent {
    #[serde(default)]
    pub background_answers: BTreeMap<String, Background>,
    #[serde(default)]
    pub selected_skill_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub student_id: String,
    pub course_id: String,
    pub sessions_count: u32,
    pub returning: bool,
    pub curriculum: Vec<String>,
    /// Curriculum position the session started from.
    pub cursor: usize,
    pub open: bool,
    pub fsm_state: Option<FsmState>,
    pub legal_actions: Vec<ActionKind>,
    /// Tutor events produced by opening the session.
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionReply {
    pub session_id: String,
    /// Tutor events produced by this action.
    pub events: Vec<EventRecord>,
    pub fsm_state: Option<FsmState>,
    pub legal_actions: Vec<ActionKind>,
    pub open: bool,
    /// True when `action_id` had been seen before and nothing was stepped.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventsPage {
    pub session_id: String,
    /// Tutor and student records with `event_id > since`, in order.
    pub events: Vec<EventRecord>,
    pub last_event_id: u64,
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub students: usize,
    pub returning_students: usize,
    pub returning_pct: Option<f64>,
    pub sessions: usize,
    pub open_sessions: usize,
    pub actions: u64,
    pub exercises: BTreeMap<String, u64>,
    pub learning_gain: GainCounts,
    pub learning_gain_pct: Option<f64>,
    pub policy_updates: u64,
    pub log_records: usize,
}

/// Everything a replay must reproduce, for byte comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateSnapshot {
    pub students: BTreeMap<String, StudentSnapshot>,
    pub sessions: BTreeMap<String, SessionSnapshot>,
    pub policy: PolicyModel,
    pub log_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudentSnapshot {
    pub profile: StudentProfile,
    pub curricula: BTreeMap<String, Curriculum>,
    pub open_session: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionSnapshot {
    pub student_id: String,
    pub course_id: String,
    pub open: bool,
    pub last_event_id: u64,
    pub exercise: Option<ActiveExercise>,
    /// Position of the session's random stream.
    pub rng_word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveExercise {
    pub unit_id: String,
    pub cursor: usize,
    pub state: SessionState,
}

struct LoadedCourse {
    course: Course,
    matcher: TfIdfMatcher,
}

impl LoadedCourse {
    fn new(course: Course) -> Self {
        let matcher = TfIdfMatcher::for_course(&course, MatcherConfig::default());
        Self { course, matcher }
    }
}

struct Student {
    profile: StudentProfile,
    curricula: BTreeMap<String, Curriculum>,
    open_session: Option<String>,
}

struct Session {
    student_id: String,
    course_id: String,
    started_at: usize,
    rng: ChaCha8Rng,
    open: bool,
    exercise: Option<ActiveExercise>,
    last_event_id: u64,
    /// Indices into the tutor's record list.
    records: Vec<usize>,
    replies: BTreeMap<String, Range<usize>>,
}

/// A record before it gets its sequence numbers and timestamp.
#[derive(Debug, Clone, PartialEq)]
struct Pending {
    session_id: Option<String>,
    student_id: String,
    payload: RecordPayload,
}

pub struct Tutor {
    config: ServiceConfig,
    courses: BTreeMap<String, LoadedCourse>,
    students: BTreeMap<String, Student>,
    sessions: BTreeMap<String, Session>,
    policy: PolicyModel,
    records: Vec<EventRecord>,
    journal: Option<BufWriter<File>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn session_rng(ordinal: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(ordinal)
}

fn outcome_name(outcome: Outcome) -> &'static str {
    match outcome {
        Outcome::Solved => "solved",
        Outcome::Skipped => "skipped",
        Outcome::Exhausted => "exhausted",
    }
}

fn valid_course_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn load_content(dir: &Path) -> Result<Vec<Course>, TutorError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(COURSE_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.into_iter()
        .map(|path| load_course(&path).map_err(|source| TutorError::Content { path, source }))
        .collect()
}

fn fsm_error(e: FsmError) -> TutorError {
    match e {
        FsmError::IllegalAction { state, action } => TutorError::IllegalAction {
            state,
            action,
            legal: legal_in(state).to_vec(),
        },
        other => TutorError::InvalidAction(other.to_string()),
    }
}

impl Tutor {
    /// Loads content, then replays the log if there is one. A fresh log is
    /// seeded with the configured policy so the log alone is enough later.
    pub fn open(config: ServiceConfig) -> Result<Self, TutorError> {
        let mut tutor = Tutor {
            policy: config.initial_policy.clone(),
            config,
            courses: BTreeMap::new(),
            students: BTreeMap::new(),
            sessions: BTreeMap::new(),
            records: Vec::new(),
            journal: None,
        };
        if let Some(dir) = &tutor.config.content_dir {
            for course in load_content(dir)? {
                tutor.courses.insert(course.id.clone(), LoadedCourse::new(course));
            }
        }
        if let Some(path) = tutor.config.log_path.clone() {
            if path.exists() {
                let logged = read_log(BufReader::new(File::open(&path)?))?;
                tutor.replay(&logged)?;
            }
            tutor.journal = Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(&path)?));
        }
        if tutor.records.is_empty() {
            let seed = Pending {
                session_id: None,
                student_id: SERVICE_ID.into(),
                payload: RecordPayload::PolicySeeded {
                    policy: tutor.policy.clone(),
                },
            };
            tutor.commit(vec![seed], None)?;
        }
        Ok(tutor)
    }

    pub fn policy(&self) -> &PolicyModel {
        &self.policy
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn course(&self, id: &str) -> Option<&Course> {
        self.courses.get(id).map(|c| &c.course)
    }

    pub fn course_ids(&self) -> Vec<String> {
        self.courses.keys().cloned().collect()
    }

    /// Adds a course from its JSON text. Uploading identical content again
    /// is a no-op; returns whether the course is new.
    pub fn upload_course(&mut self, text: &str, strictness: Strictness) -> Result<(String, bool), TutorError> {
        let course = parse_course(text, strictness)?;
        if !valid_course_id(&course.id) {
            return Err(TutorError::BadCourseId(course.id));
        }
        if let Some(existing) = self.courses.get(&course.id) {
            return if existing.course == course {
                Ok((course.id, false))
            } else {
                Err(TutorError::CourseConflict(course.id))
            };
        }
        if let Some(dir) = &self.config.content_dir {
            let target = dir.join(&course.id);
            fs::create_dir_all(&target)?;
            fs::write(target.join(COURSE_FILE), serialize_course(&course))?;
        }
        let id = course.id.clone();
        self.courses.insert(id.clone(), LoadedCourse::new(course));
        Ok((id, true))
    }

    pub fn register_student(&mut self, request: NewStudent) -> Result<StudentProfile, TutorError> {
        let known = |skill: &str| self.courses.values().any(|c| c.course.skill(skill).is_some());
        for skill in request.background_answers.keys().chain(&request.selected_skill_ids) {
            if !known(skill) {
                return Err(TutorError::UnknownSkill(skill.clone()));
            }
        }
        let mut profile = StudentProfile::new(format!("stu-{:06}", self.students.len() + 1));
        profile.selected_skill_ids = request.selected_skill_ids;
        for (skill, answer) in request.background_answers {
            profile.proficiency.insert(skill.clone(), self.config.proficiency.level(answer));
            profile.background_answers.insert(skill, answer);
        }
        let pending = self.apply_register(profile.clone())?;
        self.commit(pending, None)?;
        Ok(profile)
    }

    pub fn student(&self, id: &str) -> Option<&StudentProfile> {
        self.students.get(id).map(|s| &s.profile)
    }

    /// Starts a session, closing the student's previous one first. The
    /// curriculum is generated on the first session for a course and
    /// resumed afterwards.
    pub fn open_session(&mut self, student_id: &str, course_id: &str) -> Result<SessionView, TutorError> {
        let student = self
            .students
            .get(student_id)
            .ok_or_else(|| TutorError::NotFound(format!("student `{student_id}`")))?;
        if !self.courses.contains_key(course_id) {
            return Err(TutorError::NotFound(format!("course `{course_id}`")));
        }
        if let Some(old) = student.open_session.clone() {
            let pending = self.apply_close(&old)?;
            self.commit(pending, None)?;
        }
        let (session_id, pending) = self.apply_open(student_id, course_id)?;
        let range = self.commit(pending, None)?;
        Ok(self.session_view(&session_id, range))
    }

    pub fn post_action(
        &mut self,
        session_id: &str,
        action: StudentAction,
        action_id: Option<String>,
    ) -> Result<ActionReply, TutorError> {
        let session = self
            .sessions
            .get(session_id)
            .ok_or_else(|| TutorError::NotFound(format!("session `{session_id}`")))?;
        if let Some(range) = action_id.as_ref().and_then(|id| session.replies.get(id)) {
            return Ok(self.action_reply(session_id, range.clone(), true));
        }
        let pending = self.apply_action(session_id, &action, action_id.clone())?;
        let range = self.commit(pending, None)?;
        if let Some(id) = action_id {
            self.sessions.get_mut(session_id).expect("session exists").replies.insert(id, range.clone());
        }
        Ok(self.action_reply(session_id, range, false))
    }

    pub fn events_since(&self, session_id: &str, since: u64) -> Result<EventsPage, TutorError> {
        let session = self
            .sessions
            .get(session_id)
            .ok_or_else(|| TutorError::NotFound(format!("session `{session_id}`")))?;
        let events = session
            .records
            .iter()
            .map(|i| &self.records[*i])
            .filter(|r| r.event_id > since && r.payload.is_dialogue())
            .cloned()
            .collect();
        Ok(EventsPage {
            session_id: session_id.to_string(),
            events,
            last_event_id: session.last_event_id,
            open: session.open,
        })
    }

    pub fn metrics(&self) -> Metrics {
        let returning = self.students.values().filter(|s| s.profile.sessions_count >= 2).count();
        let mut exercises = BTreeMap::new();
        let mut actions = 0;
        for r in &self.records {
            match &r.payload {
                RecordPayload::Student { .. } => actions += 1,
                RecordPayload::Tutor {
                    event: TutorEvent::ExerciseComplete { outcome },
                } => {
                    *exercises.entry(outcome_name(*outcome).to_string()).or_insert(0) += 1;
                }
                _ => {}
            }
        }
        let gain = count_learning_gain(&self.records);
        Metrics {
            students: self.students.len(),
            returning_students: returning,
            returning_pct: (!self.students.is_empty()).then(|| 100.0 * returning as f64 / self.students.len() as f64),
            sessions: self.sessions.len(),
            open_sessions: self.sessions.values().filter(|s| s.open).count(),
            actions,
            exercises,
            learning_gain: gain,
            learning_gain_pct: gain.rate().map(|r| 100.0 * r),
            policy_updates: self.policy.update_count,
            log_records: self.records.len(),
        }
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            students: self
                .students
                .iter()
                .map(|(id, s)| {
                    let snap = StudentSnapshot {
                        profile: s.profile.clone(),
                        curricula: s.curricula.clone(),
                        open_session: s.open_session.clone(),
                    };
                    (id.clone(), snap)
                })
                .collect(),
            sessions: self
                .sessions
                .iter()
                .map(|(id, s)| {
                    let snap = SessionSnapshot {
                        student_id: s.student_id.clone(),
                        course_id: s.course_id.clone(),
                        open: s.open,
                        last_event_id: s.last_event_id,
                        exercise: s.exercise.clone(),
                        rng_word_pos: s.rng.get_word_pos().to_string(),
                    };
                    (id.clone(), snap)
                })
                .collect(),
            policy: self.policy.clone(),
            log_records: self.records.len(),
        }
    }

    pub fn snapshot_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("snapshot serializes")
    }

    fn session_view(&self, session_id: &str, range: Range<usize>) -> SessionView {
        let s = &self.sessions[session_id];
        let student = &self.students[&s.student_id];
        let curriculum = &student.curricula[&s.course_id];
        let fsm_state = s.exercise.as_ref().map(|e| e.state.fsm_state);
        SessionView {
            session_id: session_id.to_string(),
            student_id: s.student_id.clone(),
            course_id: s.course_id.clone(),
            sessions_count: student.profile.sessions_count,
            returning: student.profile.sessions_count > 1,
            curriculum: curriculum.units().to_vec(),
            cursor: s.started_at,
            open: s.open,
            fsm_state,
            legal_actions: fsm_state.map(|s| legal_in(s).to_vec()).unwrap_or_default(),
            events: self.tutor_records(session_id, range),
        }
    }

    fn action_reply(&self, session_id: &str, range: Range<usize>, duplicate: bool) -> ActionReply {
        let s = &self.sessions[session_id];
        let fsm_state = s.exercise.as_ref().map(|e| e.state.fsm_state);
        ActionReply {
            session_id: session_id.to_string(),
            events: self.tutor_records(session_id, range),
            fsm_state,
            legal_actions: fsm_state.map(|s| legal_in(s).to_vec()).unwrap_or_default(),
            open: s.open,
            duplicate,
        }
    }

    fn tutor_records(&self, session_id: &str, range: Range<usize>) -> Vec<EventRecord> {
        self.records[range]
            .iter()
            .filter(|r| r.session_id.as_deref() == Some(session_id) && matches!(r.payload, RecordPayload::Tutor { .. }))
            .cloned()
            .collect()
    }

    // Transition functions. Each checks its preconditions, mutates state and
    // returns the records it implies; the live and replay paths share them.

    fn apply_register(&mut self, profile: StudentProfile) -> Result<Vec<Pending>, TutorError> {
        let id = profile.student_id.clone();
        self.students.insert(
            id.clone(),
            Student {
                profile: profile.clone(),
                curricula: BTreeMap::new(),
                open_session: None,
            },
        );
        Ok(vec![Pending {
            session_id: None,
            student_id: id,
            payload: RecordPayload::StudentRegistered { profile },
        }])
    }

    fn apply_open(&mut self, student_id: &str, course_id: &str) -> Result<(String, Vec<Pending>), TutorError> {
        let loaded = self
            .courses
            .get(course_id)
            .ok_or_else(|| TutorError::NotFound(format!("course `{course_id}`")))?;
        let student = self
            .students
            .get_mut(student_id)
            .ok_or_else(|| TutorError::NotFound(format!("student `{student_id}`")))?;
        if !student.curricula.contains_key(course_id) {
            let course = &loaded.course;
            let mut profile = student.profile.clone();
            profile.selected_skill_ids.retain(|s| course.skill(s).is_some());
            if profile.selected_skill_ids.is_empty() {
                profile.selected_skill_ids = course.skills.iter().map(|s| s.id.clone()).collect();
            }
            let curriculum = generate_curriculum(course, &profile).map_err(|e| match e {
                tutor_core::curriculum::CurriculumError::UnknownSkill(s) => TutorError::UnknownSkill(s),
                other => TutorError::InvalidAction(other.to_string()),
            })?;
            student.curricula.insert(course_id.to_string(), curriculum);
        }
        student.profile.sessions_count += 1;

        let ordinal = self.sessions.len() as u64 + 1;
        let session_id = format!("ses-{ordinal:06}");
        student.open_session = Some(session_id.clone());
        self.sessions.insert(
            session_id.clone(),
            Session {
                student_id: student_id.to_string(),
                course_id: course_id.to_string(),
                started_at: student.curricula[course_id].cursor(),
                rng: session_rng(ordinal),
                open: true,
                exercise: None,
                last_event_id: 0,
                records: Vec::new(),
                replies: BTreeMap::new(),
            },
        );
        let curriculum = &student.curricula[course_id];
        let mut out = vec![Pending {
            session_id: Some(session_id.clone()),
            student_id: student_id.to_string(),
            payload: RecordPayload::SessionOpened {
                course_id: course_id.to_string(),
                curriculum: curriculum.units().to_vec(),
                cursor: curriculum.cursor(),
            },
        }];
        self.advance(&session_id, &mut out);
        Ok((session_id, out))
    }

    /// Moves through the curriculum until an exercise needs the student.
    /// Videos are shown and passed; the end of the curriculum closes the
    /// session.
    fn advance(&mut self, session_id: &str, out: &mut Vec<Pending>) {
        let session = self.sessions.get_mut(session_id).expect("session exists");
        let student = self.students.get_mut(&session.student_id).expect("student exists");
        let course = &self.courses[&session.course_id].course;
        let curriculum = student.curricula.get_mut(&session.course_id).expect("curriculum exists");
        let push = |out: &mut Vec<Pending>, payload| {
            out.push(Pending {
                session_id: Some(session_id.to_string()),
                student_id: session.student_id.clone(),
                payload,
            })
        };
        loop {
            let cursor = curriculum.cursor();
            let unit_id = match curriculum.next_unit() {
                Next::Done => {
                    push(out, RecordPayload::Tutor {
                        event: TutorEvent::CurriculumComplete,
                    });
                    push(out, RecordPayload::SessionClosed);
                    session.open = false;
                    session.exercise = None;
                    student.open_session = None;
                    return;
                }
                Next::Unit(id) => id.to_string(),
            };
            push(out, RecordPayload::UnitStarted {
                unit_id: unit_id.clone(),
                cursor,
            });
            match course.unit(&unit_id).expect("curriculum units exist") {
                Unit::Video { payload, .. } => push(out, RecordPayload::Tutor {
                    event: TutorEvent::ShowVideo {
                        video_id: payload.id.clone(),
                        url: payload.url.clone(),
                        duration_s: payload.duration_s,
                    },
                }),
                Unit::Exercise { payload, .. } => {
                    let (state, events) = start_exercise(payload, self.config.limits, ExerciseMode::Dialogue);
                    for event in events {
                        push(out, RecordPayload::Tutor { event });
                    }
                    session.exercise = Some(ActiveExercise { unit_id, cursor, state });
                    return;
                }
            }
        }
    }

    fn apply_action(
        &mut self,
        session_id: &str,
        action: &StudentAction,
        action_id: Option<String>,
    ) -> Result<Vec<Pending>, TutorError> {
        let session = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| TutorError::NotFound(format!("session `{session_id}`")))?;
        let active = match (&mut session.exercise, session.open) {
            (Some(active), true) => active,
            _ => return Err(TutorError::SessionClosed(session_id.to_string())),
        };
        let loaded = &self.courses[&session.course_id];
        let exercise = loaded
            .course
            .exercise(&active.state.exercise_id)
            .expect("active exercise belongs to the course");
        let profile = &self.students[&session.student_id].profile;

        // Step copies so a rejected action leaves nothing behind.
        let mut state = active.state.clone();
        let mut rng = session.rng.clone();
        let step = state
            .step(
                action,
                Deps {
                    exercise,
                    profile,
                    matcher: &loaded.matcher,
                    policy: &self.policy,
                    rng: &mut rng,
                },
            )
            .map_err(fsm_error)?;
        active.state = state;
        session.rng = rng;

        let student_id = session.student_id.clone();
        let record = |payload| Pending {
            session_id: Some(session_id.to_string()),
            student_id: student_id.clone(),
            payload,
        };
        let mut out = vec![record(RecordPayload::Student {
            action: action.clone(),
            action_id,
        })];
        // The decision above used the model from before these rewards.
        for r in step.rewards {
            self.policy.update(&r.context, r.kind, r.reward);
            out.push(record(RecordPayload::Reward {
                kind: r.kind,
                context: r.context,
                reward: r.reward,
            }));
        }
        out.extend(step.events.into_iter().map(|event| record(RecordPayload::Tutor { event })));
        if active.state.is_complete() {
            session.exercise = None;
            self.advance(session_id, &mut out);
        }
        Ok(out)
    }

    /// Closes a session. An unfinished exercise is abandoned: its open
    /// interventions earn nothing and the cursor goes back so the next
    /// session starts it again. The close record leads so replay can find
    /// the transition from its first line.
    fn apply_close(&mut self, session_id: &str) -> Result<Vec<Pending>, TutorError> {
        let session = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| TutorError::NotFound(format!("session `{session_id}`")))?;
        if !session.open {
            return Err(TutorError::SessionClosed(session_id.to_string()));
        }
        let student = self.students.get_mut(&session.student_id).expect("student exists");
        let record = |payload| Pending {
            session_id: Some(session_id.to_string()),
            student_id: session.student_id.clone(),
            payload,
        };
        let mut out = vec![record(RecordPayload::SessionClosed)];
        if let Some(mut active) = session.exercise.take() {
            for p in active.state.pending_rewards.drain(..) {
                let reward = tutor_core::policy::RewardSignal::new(false);
                self.policy.update(&p.context, p.kind, reward);
                out.push(record(RecordPayload::Reward {
                    kind: p.kind,
                    context: p.context,
                    reward,
                }));
            }
            let curriculum = student.curricula.get_mut(&session.course_id).expect("curriculum exists");
            *curriculum = Curriculum::from_parts(curriculum.units().to_vec(), active.cursor).expect("cursor in range");
        }
        session.open = false;
        student.open_session = None;
        Ok(out)
    }

    /// Numbers and stores records. Live records are stamped and appended to
    /// the journal; during replay the logged records are adopted as they are.
    fn commit(&mut self, pending: Vec<Pending>, logged: Option<&[EventRecord]>) -> Result<Range<usize>, TutorError> {
        let start = self.records.len();
        let ts_ms = now_ms();
        for (i, p) in pending.into_iter().enumerate() {
            let event_id = match &p.session_id {
                Some(id) => self.sessions.get(id).map(|s| s.last_event_id + 1).unwrap_or(1),
                None => 0,
            };
            let record = match logged {
                Some(logged) => logged[i].clone(),
                None => EventRecord {
                    seq: self.records.len() as u64 + 1,
                    event_id,
                    session_id: p.session_id.clone(),
                    student_id: p.student_id,
                    ts_ms,
                    variant: None,
                    payload: p.payload,
                },
            };
            if let Some(id) = &p.session_id {
                let s = self.sessions.get_mut(id).expect("session exists");
                s.last_event_id = event_id;
                s.records.push(self.records.len());
            }
            self.records.push(record);
        }
        if logged.is_none() {
            if let Some(journal) = &mut self.journal {
                for r in &self.records[start..] {
                    tutor_core::eventlog::write_record(journal, r)?;
                }
                journal.flush()?;
            }
            self.maybe_write_policy_snapshot(start)?;
        }
        Ok(start..self.records.len())
    }

    fn maybe_write_policy_snapshot(&self, start: usize) -> io::Result<()> {
        let (Some(log), every) = (&self.config.log_path, self.config.snapshot_every) else {
            return Ok(());
        };
        let crossed = every > 0
            && self.records[start..]
                .iter()
                .any(|r| matches!(r.payload, RecordPayload::Reward { .. }))
            && self.policy.update_count.is_multiple_of(every);
        if !crossed {
            return Ok(());
        }
        let mut path = log.clone().into_os_string();
        path.push(".policy.json");
        let path = PathBuf::from(path);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.policy.to_snapshot())?;
        fs::rename(tmp, path)
    }

    fn replay(&mut self, logged: &[EventRecord]) -> Result<(), TutorError> {
        let mut i = 0;
        while i < logged.len() {
            let r = &logged[i];
            let line = i + 1;
            let diverged = |reason: String| TutorError::Diverged { line, reason };
            let session_id = || r.session_id.clone().ok_or_else(|| diverged("record has no session".into()));
            let pending = match &r.payload {
                RecordPayload::PolicySeeded { policy } => {
                    self.policy = policy.clone();
                    vec![Pending {
                        session_id: r.session_id.clone(),
                        student_id: r.student_id.clone(),
                        payload: r.payload.clone(),
                    }]
                }
                RecordPayload::StudentRegistered { profile } => {
                    if self.students.contains_key(&profile.student_id) {
                        return Err(diverged(format!("student {} registered twice", profile.student_id)));
                    }
                    self.apply_register(profile.clone())?
                }
                RecordPayload::SessionOpened { course_id, .. } => {
                    let (id, pending) = self
                        .apply_open(&r.student_id, course_id)
                        .map_err(|e| diverged(e.to_string()))?;
                    if Some(&id) != r.session_id.as_ref() {
                        return Err(diverged(format!("session id {id} where the log has {:?}", r.session_id)));
                    }
                    pending
                }
                RecordPayload::Student { action, action_id } => self
                    .apply_action(&session_id()?, action, action_id.clone())
                    .map_err(|e| diverged(e.to_string()))?,
                RecordPayload::SessionClosed => self.apply_close(&session_id()?).map_err(|e| diverged(e.to_string()))?,
                other => return Err(diverged(format!("unexpected record {other:?}"))),
            };
            let n = pending.len();
            let slice = logged.get(i..i + n).ok_or_else(|| diverged("log ends mid-transition".into()))?;
            for (k, (p, r)) in pending.iter().zip(slice).enumerate() {
                if p.session_id != r.session_id || p.student_id != r.student_id || p.payload != r.payload {
                    return Err(TutorError::Diverged {
                        line: line + k,
                        reason: format!("expected {:?}, log has {:?}", p.payload, r.payload),
                    });
                }
            }
            let range = self.commit(pending, Some(slice))?;
            if let RecordPayload::Student {
                action_id: Some(id), ..
            } = &r.payload
            {
                let sid = r.session_id.clone().expect("checked above");
                self.sessions.get_mut(&sid).expect("session exists").replies.insert(id.clone(), range);
            }
            i += n;
        }
        Ok(())
    }
}
