//! Inner loop: the per-exercise dialogue state machine.
//!
//! A session presents the problem, classifies attempts, and after a failed
//! attempt (or a request for help) lets the policy pick an intervention kind.
//! Payloads of a kind are consumed in authored order and never repeated.
//! After the intervention the student is asked to retry, or first answers a
//! follow-up. The loop ends solved, skipped, or exhausted once the
//! intervention budget or the payloads run out.

use std::collections::HashSet;
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{Exercise, Expectation, Followup, InterventionKind, McqOption};
use crate::curriculum::StudentProfile;
use crate::matcher::{classify_mcq, MatchError, MatchResult, Matcher};
use crate::policy::{featurize, ContextVector, Policy, PolicyError, RewardSignal};

pub const DEFAULT_MAX_INTERVENTIONS: u32 = 3;
/// Follow-up answers are short, so they are graded below the main threshold.
pub const FOLLOW_UP_LENIENCY: f64 = 0.15;

const RETRY_PROMPT: &str = "Would you like to try the exercise again?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_interventions: u32,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_interventions: DEFAULT_MAX_INTERVENTIONS,
        }
    }
}

/// How interventions are chosen for one exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExerciseMode {
    /// The policy chooses every intervention.
    #[default]
    Dialogue,
    /// Multiple-choice quizzes are given first while any remain; the policy
    /// only picks once they are used up.
    QuizDefault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "kind", rename_all = "snake_case")]
pub enum FsmState {
    PresentProblem,
    AwaitAction,
    Intervening(InterventionKind),
    AwaitFollowUp,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Solved,
    Skipped,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StudentAction {
    Attempt { text: String },
    AskHelp,
    Skip,
    SelectOption { index: usize },
    FollowUpReply { text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Attempt,
    AskHelp,
    Skip,
    SelectOption,
    FollowUpReply,
}

impl StudentAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            StudentAction::Attempt { .. } => ActionKind::Attempt,
            StudentAction::AskHelp => ActionKind::AskHelp,
            StudentAction::Skip => ActionKind::Skip,
            StudentAction::SelectOption { .. } => ActionKind::SelectOption,
            StudentAction::FollowUpReply { .. } => ActionKind::FollowUpReply,
        }
    }
}

/// Everything the tutor says. `ShowVideo` and `CurriculumComplete` come from
/// the outer loop; the rest are produced by [`SessionState::step`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TutorEvent {
    ShowVideo {
        video_id: String,
        url: String,
        duration_s: f64,
    },
    ShowProblem {
        exercise_id: String,
        text: String,
    },
    FeedbackCorrect {
        score: f64,
    },
    FeedbackIncorrect {
        score: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        revealed_option: Option<usize>,
    },
    Intervention {
        intervention_kind: InterventionKind,
        payload_index: usize,
        body: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        options: Option<Vec<String>>,
        /// Set on the explanation revealed when the exercise is exhausted;
        /// such a reveal is not followed by another attempt.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        final_reveal: bool,
    },
    AskRetry {
        text: String,
    },
    AskFollowUp {
        text: String,
    },
    Acknowledge,
    ExerciseComplete {
        outcome: Outcome,
    },
    CurriculumComplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub text: String,
    pub result: MatchResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GivenIntervention {
    pub kind: InterventionKind,
    pub index: usize,
}

/// An intervention whose reward is not known yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingReward {
    pub kind: InterventionKind,
    pub context: ContextVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedReward {
    pub kind: InterventionKind,
    pub context: ContextVector,
    pub reward: RewardSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub exercise_id: String,
    pub fsm_state: FsmState,
    pub attempts: Vec<AttemptRecord>,
    pub interventions_given: Vec<GivenIntervention>,
    pub outcome: Option<Outcome>,
    pub attempts_remaining: u32,
    pub max_interventions: u32,
    pub mode: ExerciseMode,
    /// The intervention awaiting an option pick or a follow-up reply.
    pub active: Option<GivenIntervention>,
    pub pending_rewards: Vec<PendingReward>,
}

#[derive(Debug, Error, PartialEq)]
pub enum FsmError {
    #[error("{action:?} is not legal in state {state}")]
    IllegalAction { state: FsmState, action: ActionKind },
    #[error("session is for exercise `{expected}`, got `{got}`")]
    WrongExercise { expected: String, got: String },
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl fmt::Display for FsmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FsmState::PresentProblem => f.write_str("present_problem"),
            FsmState::AwaitAction => f.write_str("await_action"),
            FsmState::Intervening(k) => write!(f, "intervening({k})"),
            FsmState::AwaitFollowUp => f.write_str("await_follow_up"),
            FsmState::Complete => f.write_str("complete"),
        }
    }
}

/// Collaborators for one step.
pub struct Deps<'a> {
    pub exercise: &'a Exercise,
    pub profile: &'a StudentProfile,
    pub matcher: &'a dyn Matcher,
    pub policy: &'a dyn Policy,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub events: Vec<TutorEvent>,
    pub rewards: Vec<ResolvedReward>,
}

/// What the student is currently being asked for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prompt<'a> {
    Problem,
    Options(&'a [McqOption]),
    FollowUp { followup: Followup, text: &'a str },
    Closed,
}

pub fn start_exercise(exercise: &Exercise, limits: Limits, mode: ExerciseMode) -> (SessionState, Vec<TutorEvent>) {
    let max_interventions = limits.max_interventions.max(1);
    let mut state = SessionState {
        exercise_id: exercise.id.clone(),
        fsm_state: FsmState::PresentProblem,
        attempts: Vec::new(),
        interventions_given: Vec::new(),
        outcome: None,
        attempts_remaining: max_interventions + 1,
        max_interventions,
        mode,
        active: None,
        pending_rewards: Vec::new(),
    };
    let events = vec![show_problem(exercise)];
    state.fsm_state = FsmState::AwaitAction;
    (state, events)
}

fn show_problem(exercise: &Exercise) -> TutorEvent {
    TutorEvent::ShowProblem {
        exercise_id: exercise.id.clone(),
        text: exercise.problem_statement.clone(),
    }
}

pub fn legal_actions(state: &SessionState) -> &'static [ActionKind] {
    legal_in(state.fsm_state)
}

pub fn legal_in(state: FsmState) -> &'static [ActionKind] {
    use ActionKind::*;
    match state {
        FsmState::AwaitAction => &[Attempt, AskHelp, Skip],
        FsmState::Intervening(InterventionKind::MultipleChoice) => &[SelectOption],
        FsmState::AwaitFollowUp => &[FollowUpReply, Skip],
        FsmState::PresentProblem | FsmState::Intervening(_) | FsmState::Complete => &[],
    }
}

impl SessionState {
    pub fn max_attempts(&self) -> u32 {
        self.max_interventions + 1
    }

    pub fn is_complete(&self) -> bool {
        self.fsm_state == FsmState::Complete
    }

    pub fn last_score(&self) -> Option<f64> {
        self.attempts.last().map(|a| a.result.score)
    }

    fn used(&self, kind: InterventionKind) -> usize {
        self.interventions_given.iter().filter(|g| g.kind == kind).count()
    }

    pub fn available_kinds(&self, exercise: &Exercise) -> Vec<InterventionKind> {
        InterventionKind::ALL
            .into_iter()
            .filter(|k| self.used(*k) < exercise.payloads(*k).len())
            .collect()
    }

    pub fn unused_payloads(&self, exercise: &Exercise) -> usize {
        InterventionKind::ALL
            .into_iter()
            .map(|k| exercise.payloads(k).len().saturating_sub(self.used(k)))
            .sum()
    }

    pub fn prompt<'a>(&self, exercise: &'a Exercise) -> Prompt<'a> {
        let active = self.active.and_then(|g| exercise.payloads(g.kind).get(g.index));
        match (self.fsm_state, active) {
            (FsmState::AwaitAction, _) => Prompt::Problem,
            (FsmState::Intervening(InterventionKind::MultipleChoice), Some(p)) => {
                Prompt::Options(p.options.as_deref().unwrap_or(&[]))
            }
            (FsmState::AwaitFollowUp, Some(p)) => Prompt::FollowUp {
                followup: p.followup,
                text: p.followup_text.as_deref().unwrap_or(""),
            },
            _ => Prompt::Closed,
        }
    }

    /// Advances the machine by one student action. On error the state is
    /// left untouched.
    pub fn step(&mut self, action: &StudentAction, deps: Deps<'_>) -> Result<StepOutput, FsmError> {
        if deps.exercise.id != self.exercise_id {
            return Err(FsmError::WrongExercise {
                expected: self.exercise_id.clone(),
                got: deps.exercise.id.clone(),
            });
        }
        if !legal_actions(self).contains(&action.kind()) {
            return Err(FsmError::IllegalAction {
                state: self.fsm_state,
                action: action.kind(),
            });
        }
        let mut next = self.clone();
        let mut out = StepOutput::default();
        next.apply(action, deps, &mut out)?;
        *self = next;
        Ok(out)
    }

    fn apply(&mut self, action: &StudentAction, deps: Deps<'_>, out: &mut StepOutput) -> Result<(), FsmError> {
        match (self.fsm_state, action) {
            (FsmState::AwaitAction, StudentAction::Attempt { text }) => {
                let result = match deps.matcher.score_attempt(text, deps.exercise) {
                    Err(MatchError::EmptyAttempt) => {
                        out.events.push(show_problem(deps.exercise));
                        return Ok(());
                    }
                    other => other?,
                };
                self.attempts_remaining -= 1;
                let correct = result.is_correct();
                let score = result.score;
                self.attempts.push(AttemptRecord {
                    text: text.clone(),
                    result,
                });
                self.resolve_pending(correct, out);
                if correct {
                    out.events.push(TutorEvent::FeedbackCorrect { score });
                    self.complete(Outcome::Solved, out);
                } else {
                    out.events.push(TutorEvent::FeedbackIncorrect {
                        score,
                        revealed_option: None,
                    });
                    self.intervene(deps, out)?;
                }
            }
            (FsmState::AwaitAction, StudentAction::AskHelp) => self.intervene(deps, out)?,
            (FsmState::AwaitAction | FsmState::AwaitFollowUp, StudentAction::Skip) => {
                self.active = None;
                self.complete(Outcome::Skipped, out);
            }
            (FsmState::Intervening(InterventionKind::MultipleChoice), StudentAction::SelectOption { index }) => {
                let given = self.active.expect("multiple choice state has an active payload");
                let payload = &deps.exercise.payloads(given.kind)[given.index];
                let result = classify_mcq(*index, payload)?;
                if result.is_correct() {
                    out.events.push(TutorEvent::FeedbackCorrect { score: result.score });
                } else {
                    out.events.push(TutorEvent::FeedbackIncorrect {
                        score: result.score,
                        revealed_option: payload.correct_option(),
                    });
                }
                self.ask_retry(out);
            }
            (FsmState::AwaitFollowUp, StudentAction::FollowUpReply { text }) => {
                let given = self.active.expect("follow-up state has an active payload");
                let payload = &deps.exercise.payloads(given.kind)[given.index];
                match payload.followup {
                    Followup::FollowUpQuestion => {
                        let expected = [Expectation {
                            id: "followup".into(),
                            text: payload.followup_text.clone().unwrap_or_default(),
                            required_keywords: Vec::new(),
                        }];
                        let threshold = (deps.matcher.threshold() - FOLLOW_UP_LENIENCY).max(0.0);
                        match deps.matcher.score_against(text, &expected, threshold) {
                            Ok(r) if r.is_correct() => out.events.push(TutorEvent::FeedbackCorrect { score: r.score }),
                            Ok(r) => out.events.push(TutorEvent::FeedbackIncorrect {
                                score: r.score,
                                revealed_option: None,
                            }),
                            Err(MatchError::EmptyAttempt) => out.events.push(TutorEvent::FeedbackIncorrect {
                                score: 0.0,
                                revealed_option: None,
                            }),
                            Err(e) => return Err(e.into()),
                        }
                    }
                    Followup::Confirmation | Followup::Prompt | Followup::Retry => {
                        out.events.push(TutorEvent::Acknowledge)
                    }
                }
                self.ask_retry(out);
            }
            (state, action) => {
                return Err(FsmError::IllegalAction {
                    state,
                    action: action.kind(),
                })
            }
        }
        Ok(())
    }

    fn ask_retry(&mut self, out: &mut StepOutput) {
        self.active = None;
        self.fsm_state = FsmState::AwaitAction;
        out.events.push(TutorEvent::AskRetry {
            text: RETRY_PROMPT.into(),
        });
    }

    fn intervene(&mut self, deps: Deps<'_>, out: &mut StepOutput) -> Result<(), FsmError> {
        let available = self.available_kinds(deps.exercise);
        if available.is_empty() || self.interventions_given.len() >= self.max_interventions as usize || self.attempts_remaining == 0 {
            self.exhaust(deps.exercise, out);
            return Ok(());
        }
        let context = featurize(deps.profile, self, deps.exercise, self.last_score());
        let kind = match self.mode {
            ExerciseMode::QuizDefault if available.contains(&InterventionKind::MultipleChoice) => {
                InterventionKind::MultipleChoice
            }
            _ => deps.policy.select(&context, &available, deps.rng)?,
        };
        let index = self.used(kind);
        let payload = &deps.exercise.payloads(kind)[index];
        let given = GivenIntervention { kind, index };
        self.interventions_given.push(given);
        self.pending_rewards.push(PendingReward { kind, context });
        self.fsm_state = FsmState::Intervening(kind);
        out.events.push(TutorEvent::Intervention {
            intervention_kind: kind,
            payload_index: index,
            body: payload.body.clone(),
            options: payload.options.as_ref().map(|o| o.iter().map(|o| o.text.clone()).collect()),
            final_reveal: false,
        });

        if kind == InterventionKind::MultipleChoice {
            self.active = Some(given);
            if let Some(text) = &payload.followup_text {
                out.events.push(TutorEvent::AskFollowUp { text: text.clone() });
            }
            return Ok(());
        }
        match payload.followup {
            Followup::Retry => self.ask_retry(out),
            _ => {
                self.active = Some(given);
                self.fsm_state = FsmState::AwaitFollowUp;
                out.events.push(TutorEvent::AskFollowUp {
                    text: payload.followup_text.clone().unwrap_or_default(),
                });
            }
        }
        Ok(())
    }

    fn exhaust(&mut self, exercise: &Exercise, out: &mut StepOutput) {
        let kind = InterventionKind::Explanation;
        let index = self.used(kind);
        if let Some(payload) = exercise.payloads(kind).get(index) {
            self.interventions_given.push(GivenIntervention { kind, index });
            out.events.push(TutorEvent::Intervention {
                intervention_kind: kind,
                payload_index: index,
                body: payload.body.clone(),
                options: None,
                final_reveal: true,
            });
        }
        self.active = None;
        self.complete(Outcome::Exhausted, out);
    }

    fn resolve_pending(&mut self, success: bool, out: &mut StepOutput) {
        out.rewards.extend(self.pending_rewards.drain(..).map(|p| ResolvedReward {
            kind: p.kind,
            context: p.context,
            reward: RewardSignal::new(success),
        }));
    }

    fn complete(&mut self, outcome: Outcome, out: &mut StepOutput) {
        // Interventions never followed by another attempt earn nothing.
        self.resolve_pending(false, out);
        self.fsm_state = FsmState::Complete;
        self.outcome = Some(outcome);
        out.events.push(TutorEvent::ExerciseComplete { outcome });
    }

    /// Structural invariants, for tests and replay audits.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.outcome.is_some() != self.is_complete() {
            return Err(format!("outcome {:?} in state {}", self.outcome, self.fsm_state));
        }
        let mut seen = HashSet::new();
        for g in &self.interventions_given {
            if !seen.insert(*g) {
                return Err(format!("payload {}[{}] given twice", g.kind, g.index));
            }
        }
        if self.attempts_remaining as usize + self.attempts.len() != self.max_attempts() as usize {
            return Err(format!(
                "{} attempts made but {} remaining of {}",
                self.attempts.len(),
                self.attempts_remaining,
                self.max_attempts()
            ));
        }
        if self.is_complete() && (!self.pending_rewards.is_empty() || self.active.is_some()) {
            return Err("completed session still holds pending interventions".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::{InterventionPayload, McqOption};
    use crate::matcher::{IdfTable, MatcherConfig, TfIdfMatcher};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    /// Always returns a fixed kind when it is available.
    struct Fixed(InterventionKind);

    impl Policy for Fixed {
        fn select(
            &self,
            _ctx: &ContextVector,
            available: &[InterventionKind],
            _rng: &mut dyn RngCore,
        ) -> Result<InterventionKind, PolicyError> {
            if available.contains(&self.0) {
                Ok(self.0)
            } else {
                available.first().copied().ok_or(PolicyError::NoAvailableIntervention)
            }
        }
    }

    fn payload(kind: InterventionKind, body: &str, followup: Followup, text: Option<&str>) -> InterventionPayload {
        InterventionPayload {
            kind,
            body: body.into(),
            options: None,
            followup,
            followup_text: text.map(String::from),
        }
    }

    fn exercise() -> Exercise {
        let mut interventions = BTreeMap::new();
        interventions.insert(
            InterventionKind::TextHint,
            vec![
                payload(InterventionKind::TextHint, "Think about squared differences.", Followup::Retry, None),
                payload(InterventionKind::TextHint, "Average them.", Followup::Retry, None),
            ],
        );
        interventions.insert(
            InterventionKind::Elaboration,
            vec![payload(
                InterventionKind::Elaboration,
                "Errors are squared so signs cancel out.",
                Followup::FollowUpQuestion,
                Some("why square errors"),
            )],
        );
        interventions.insert(
            InterventionKind::Explanation,
            vec![payload(
                InterventionKind::Explanation,
                "MSE is the mean of squared residuals.",
                Followup::Confirmation,
                Some("Does that make sense?"),
            )],
        );
        interventions.insert(
            InterventionKind::MultipleChoice,
            vec![InterventionPayload {
                kind: InterventionKind::MultipleChoice,
                body: "Which is MSE?".into(),
                options: Some(vec![
                    McqOption {
                        text: "mean of absolute errors".into(),
                        is_correct: false,
                    },
                    McqOption {
                        text: "mean of squared errors".into(),
                        is_correct: true,
                    },
                ]),
                followup: Followup::Retry,
                followup_text: None,
            }],
        );
        Exercise {
            id: "ex-mse".into(),
            skill_id: "loss".into(),
            problem_statement: "What does mean squared error compute?".into(),
            difficulty: None,
            expectations: vec![Expectation {
                id: "e1".into(),
                text: "the mean of the squared differences between predictions and targets".into(),
                required_keywords: vec![],
            }],
            interventions,
        }
    }

    struct Harness {
        exercise: Exercise,
        profile: StudentProfile,
        matcher: TfIdfMatcher,
        rng: ChaCha8Rng,
    }

    impl Harness {
        fn new() -> Self {
            let exercise = exercise();
            let config = MatcherConfig::default();
            let idf = IdfTable::from_texts(exercise.expectations.iter().map(|e| e.text.as_str()), &config);
            Self {
                exercise,
                profile: StudentProfile::new("s"),
                matcher: TfIdfMatcher::new(config, idf),
                rng: ChaCha8Rng::seed_from_u64(0),
            }
        }

        fn step(
            &mut self,
            state: &mut SessionState,
            policy: &dyn Policy,
            action: StudentAction,
        ) -> Result<StepOutput, FsmError> {
            state.step(
                &action,
                Deps {
                    exercise: &self.exercise,
                    profile: &self.profile,
                    matcher: &self.matcher,
                    policy,
                    rng: &mut self.rng,
                },
            )
        }
    }

    fn attempt(text: &str) -> StudentAction {
        StudentAction::Attempt { text: text.into() }
    }

    #[test]
    fn start_presents_problem() {
        let h = Harness::new();
        let (state, events) = start_exercise(&h.exercise, Limits { max_interventions: 1 }, ExerciseMode::Dialogue);
        assert_eq!(state.fsm_state, FsmState::AwaitAction);
        assert_eq!(state.attempts_remaining, 2);
        assert!(matches!(events.as_slice(), [TutorEvent::ShowProblem { .. }]));
    }

    #[test]
    fn incorrect_attempt_then_text_hint() {
        let mut h = Harness::new();
        let (mut s, _) = start_exercise(&h.exercise, Limits::default(), ExerciseMode::Dialogue);
        let out = h.step(&mut s, &Fixed(InterventionKind::TextHint), attempt("gradient boosting")).unwrap();
        let kinds: Vec<_> = out.events.iter().map(tag).collect();
        assert_eq!(kinds, ["feedback_incorrect", "intervention:text_hint", "ask_retry"]);
        assert_eq!(s.fsm_state, FsmState::AwaitAction);
        assert_eq!(s.pending_rewards.len(), 1);
        s.check_invariants().unwrap();
    }

    #[test]
    fn correct_attempt_solves() {
        let mut h = Harness::new();
        let (mut s, _) = start_exercise(&h.exercise, Limits::default(), ExerciseMode::Dialogue);
        let text = h.exercise.expectations[0].text.clone();
        let out = h.step(&mut s, &Fixed(InterventionKind::TextHint), attempt(&text)).unwrap();
        assert_eq!(
            out.events,
            [
                TutorEvent::FeedbackCorrect { score: 1.0 },
                TutorEvent::ExerciseComplete {
                    outcome: Outcome::Solved
                }
            ]
        );
        assert_eq!(s.outcome, Some(Outcome::Solved));
    }

    #[test]
    fn skip_completes() {
        let mut h = Harness::new();
        let (mut s, _) = start_exercise(&h.exercise, Limits::default(), ExerciseMode::Dialogue);
        let out = h.step(&mut s, &Fixed(InterventionKind::TextHint), StudentAction::Skip).unwrap();
        assert_eq!(
            out.events,
            [TutorEvent::ExerciseComplete {
                outcome: Outcome::Skipped
            }]
        );
        assert!(legal_actions(&s).is_empty());
    }

    #[test]
    fn reward_resolves_on_next_attempt() {
        let mut h = Harness::new();
        let policy = Fixed(InterventionKind::TextHint);
        let (mut s, _) = start_exercise(&h.exercise, Limits::default(), ExerciseMode::Dialogue);
        h.step(&mut s, &policy, attempt("no idea")).unwrap();
        let text = h.exercise.expectations[0].text.clone();
        let out = h.step(&mut s, &policy, attempt(&text)).unwrap();
        assert_eq!(out.rewards.len(), 1);
        assert!(out.rewards[0].reward.success());
        assert_eq!(out.rewards[0].kind, InterventionKind::TextHint);
    }

    #[test]
    fn illegal_action_leaves_state_unchanged() {
        let mut h = Harness::new();
        let (mut s, _) = start_exercise(&h.exercise, Limits::default(), ExerciseMode::Dialogue);
        let before = s.clone();
        let err = h
            .step(&mut s, &Fixed(InterventionKind::TextHint), StudentAction::SelectOption { index: 0 })
            .unwrap_err();
        assert!(matches!(err, FsmError::IllegalAction { .. }));
        assert_eq!(s, before);
    }

    #[test]
    fn empty_attempt_reprompts_without_cost() {
        let mut h = Harness::new();
        let (mut s, _) = start_exercise(&h.exercise, Limits::default(), ExerciseMode::Dialogue);
        let out = h.step(&mut s, &Fixed(InterventionKind::TextHint), attempt("  the ?! ")).unwrap();
        assert!(matches!(out.events.as_slice(), [TutorEvent::ShowProblem { .. }]));
        assert_eq!(s.attempts_remaining, 4);
    }

    #[test]
    fn ask_help_does_not_consume_an_attempt() {
        let mut h = Harness::new();
        let (mut s, _) = start_exercise(&h.exercise, Limits::default(), ExerciseMode::Dialogue);
        h.step(&mut s, &Fixed(InterventionKind::TextHint), StudentAction::AskHelp).unwrap();
        assert_eq!(s.attempts_remaining, 4);
        assert_eq!(s.interventions_given.len(), 1);
    }

    #[test]
    fn multiple_choice_reveals_on_wrong_pick() {
        let mut h = Harness::new();
        let policy = Fixed(InterventionKind::MultipleChoice);
        let (mut s, _) = start_exercise(&h.exercise, Limits::default(), ExerciseMode::Dialogue);
        h.step(&mut s, &policy, attempt("absolute value")).unwrap();
        assert_eq!(s.fsm_state, FsmState::Intervening(InterventionKind::MultipleChoice));
        assert_eq!(legal_actions(&s), [ActionKind::SelectOption]);
        let err = h.step(&mut s, &policy, StudentAction::SelectOption { index: 9 }).unwrap_err();
        assert!(matches!(err, FsmError::Match(MatchError::IndexOutOfRange { .. })));
        let out = h.step(&mut s, &policy, StudentAction::SelectOption { index: 0 }).unwrap();
        assert_eq!(
            out.events[0],
            TutorEvent::FeedbackIncorrect {
                score: 0.0,
                revealed_option: Some(1)
            }
        );
        assert_eq!(s.fsm_state, FsmState::AwaitAction);
    }

    #[test]
    fn follow_up_question_is_graded_leniently() {
        let mut h = Harness::new();
        let policy = Fixed(InterventionKind::Elaboration);
        let (mut s, _) = start_exercise(&h.exercise, Limits::default(), ExerciseMode::Dialogue);
        h.step(&mut s, &policy, attempt("absolute value")).unwrap();
        assert_eq!(s.fsm_state, FsmState::AwaitFollowUp);
        assert_eq!(legal_actions(&s), [ActionKind::FollowUpReply, ActionKind::Skip]);
        let out = h
            .step(&mut s, &policy, StudentAction::FollowUpReply { text: "why square errors".into() })
            .unwrap();
        assert!(matches!(out.events[0], TutorEvent::FeedbackCorrect { .. }));
        assert!(matches!(out.events[1], TutorEvent::AskRetry { .. }));
    }

    #[test]
    fn quiz_mode_prefers_multiple_choice() {
        let mut h = Harness::new();
        let (mut s, _) = start_exercise(&h.exercise, Limits::default(), ExerciseMode::QuizDefault);
        h.step(&mut s, &Fixed(InterventionKind::TextHint), attempt("wrong")).unwrap();
        assert_eq!(s.interventions_given[0].kind, InterventionKind::MultipleChoice);
    }

    #[test]
    fn exhaustion_reveals_explanation() {
        let mut h = Harness::new();
        let policy = Fixed(InterventionKind::TextHint);
        let (mut s, _) = start_exercise(&h.exercise, Limits { max_interventions: 2 }, ExerciseMode::Dialogue);
        h.step(&mut s, &policy, attempt("wrong")).unwrap();
        h.step(&mut s, &policy, attempt("still wrong")).unwrap();
        let out = h.step(&mut s, &policy, attempt("wrong again")).unwrap();
        let kinds: Vec<_> = out.events.iter().map(tag).collect();
        assert_eq!(
            kinds,
            ["feedback_incorrect", "intervention:explanation", "exercise_complete"]
        );
        assert_eq!(s.outcome, Some(Outcome::Exhausted));
        // The two hints each resolved on the following attempt.
        assert_eq!(out.rewards.len(), 1);
        s.check_invariants().unwrap();
    }

    fn tag(e: &TutorEvent) -> String {
        match e {
            TutorEvent::Intervention { intervention_kind, .. } => format!("intervention:{intervention_kind}"),
            other => serde_json::to_value(other).unwrap()["kind"].as_str().unwrap().to_string(),
        }
    }

    #[test]
    fn wire_format() {
        let a: StudentAction = serde_json::from_str(r#"{"kind":"select_option","index":2}"#).unwrap();
        assert_eq!(a, StudentAction::SelectOption { index: 2 });
        let e = serde_json::to_value(TutorEvent::ExerciseComplete {
            outcome: Outcome::Skipped,
        })
        .unwrap();
        assert_eq!(e, serde_json::json!({"kind":"exercise_complete","outcome":"skipped"}));
    }
}
