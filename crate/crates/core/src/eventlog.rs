//! Append-only JSONL event log. Every tutor event, student action, and
//! resolved reward is one line, and the policy can be rebuilt exactly by
//! folding the reward lines in order.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::InterventionKind;
use crate::curriculum::StudentProfile;
use crate::fsm::{StudentAction, TutorEvent};
use crate::policy::{ContextVector, PolicyModel, RewardSignal};
use crate::simulator::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// Position in the whole log, gapless from 1.
    pub seq: u64,
    /// Position within the session, gapless from 1; 0 for records outside a
    /// session.
    pub event_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub student_id: String,
    pub ts_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(flatten)]
    pub payload: RecordPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RecordPayload {
    Tutor {
        event: TutorEvent,
    },
    Student {
        action: StudentAction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        action_id: Option<String>,
    },
    Reward {
        kind: InterventionKind,
        context: ContextVector,
        reward: RewardSignal,
    },
    StudentRegistered {
        profile: StudentProfile,
    },
    SessionOpened {
        course_id: String,
        curriculum: Vec<String>,
        cursor: usize,
    },
    UnitStarted {
        unit_id: String,
        cursor: usize,
    },
    SessionClosed,
    /// Replaces the model that rewards are folded into.
    PolicySeeded {
        policy: PolicyModel,
    },
}

impl RecordPayload {
    pub fn is_dialogue(&self) -> bool {
        matches!(self, RecordPayload::Tutor { .. } | RecordPayload::Student { .. })
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("corrupt log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
}

pub fn write_record(out: &mut impl Write, record: &EventRecord) -> io::Result<()> {
    let line = serde_json::to_string(record).map_err(io::Error::other)?;
    writeln!(out, "{line}")
}

pub fn write_log(out: &mut impl Write, records: &[EventRecord]) -> io::Result<()> {
    for r in records {
        write_record(out, r)?;
    }
    out.flush()
}

/// Parses a log and checks that `seq` and per-session `event_id` have no
/// gaps. Blank lines are ignored; anything else that fails names its line.
pub fn read_log(input: impl BufRead) -> Result<Vec<EventRecord>, LogError> {
    let mut records = Vec::new();
    let mut last_event: BTreeMap<String, u64> = BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |reason: String| LogError::CorruptLog { line: line_no, reason };
        let record: EventRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        let expected_seq = records.len() as u64 + 1;
        if record.seq != expected_seq {
            return Err(corrupt(format!("seq {} where {expected_seq} was expected", record.seq)));
        }
        match &record.session_id {
            Some(session) => {
                let last = last_event.entry(session.clone()).or_insert(0);
                if record.event_id != *last + 1 {
                    return Err(corrupt(format!(
                        "event_id {} in session {session} after {last}",
                        record.event_id
                    )));
                }
                *last = record.event_id;
            }
            None if record.event_id != 0 => {
                return Err(corrupt(format!("event_id {} outside a session", record.event_id)));
            }
            None => {}
        }
        records.push(record);
    }
    Ok(records)
}

/// Renumbers `seq` from 1, for concatenating logs.
pub fn renumber(records: &mut [EventRecord]) {
    for (i, r) in records.iter_mut().enumerate() {
        r.seq = i as u64 + 1;
    }
}

/// Folds reward records into `base` in log order.
pub fn fold_rewards<'a>(base: PolicyModel, records: impl IntoIterator<Item = &'a EventRecord>) -> PolicyModel {
    let mut model = base;
    for r in records {
        match &r.payload {
            RecordPayload::Reward { kind, context, reward } => model.update(context, *kind, *reward),
            RecordPayload::PolicySeeded { policy } => model = policy.clone(),
            _ => {}
        }
    }
    model
}

pub fn replay_log(input: impl BufRead, base: PolicyModel) -> Result<PolicyModel, LogError> {
    Ok(fold_rewards(base, &read_log(input)?))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GainCounts {
    /// Interventions whose next classified attempt was correct.
    pub helped: u64,
    /// All non-reveal interventions.
    pub total: u64,
}

impl GainCounts {
    pub fn add(&mut self, other: GainCounts) {
        self.helped += other.helped;
        self.total += other.total;
    }

    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.helped as f64 / self.total as f64)
    }
}

#[derive(Default)]
struct Walk {
    exercise: Option<String>,
    open: u64,
    after_attempt: bool,
}

/// Counts learning-gain instances from tutor and student lines alone,
/// without looking at reward records.
pub fn count_learning_gain<'a>(records: impl IntoIterator<Item = &'a EventRecord>) -> GainCounts {
    let mut counts = GainCounts::default();
    let mut walks: BTreeMap<String, Walk> = BTreeMap::new();
    for r in records {
        let key = r.session_id.clone().unwrap_or_else(|| r.student_id.clone());
        let w = walks.entry(key).or_default();
        match &r.payload {
            RecordPayload::Student { action, .. } => {
                w.after_attempt = matches!(action, StudentAction::Attempt { .. });
            }
            RecordPayload::Tutor { event } => {
                let answered = std::mem::take(&mut w.after_attempt);
                match event {
                    TutorEvent::ShowProblem { exercise_id, .. } => {
                        if w.exercise.as_deref() != Some(exercise_id.as_str()) {
                            w.exercise = Some(exercise_id.clone());
                            w.open = 0;
                        }
                    }
                    TutorEvent::FeedbackCorrect { .. } if answered => {
                        counts.helped += w.open;
                        w.open = 0;
                    }
                    TutorEvent::FeedbackIncorrect { .. } if answered => w.open = 0,
                    TutorEvent::Intervention { final_reveal: false, .. } => {
                        counts.total += 1;
                        w.open += 1;
                    }
                    TutorEvent::ExerciseComplete { .. } => {
                        w.open = 0;
                        w.exercise = None;
                    }
                    _ => {}
                }
            }
            _ => {}
        }
    }
    counts
}
