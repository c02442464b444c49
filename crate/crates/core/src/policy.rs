//! Contextual-bandit intervention policy.
//!
//! Each intervention kind owns an online estimator: Beta success counts for
//! cold start and a logistic model over the [`ContextVector`] for context
//! sensitivity. Selection blends the two 50/50 and explores either
//! epsilon-greedily or by Thompson sampling on the Beta part.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{Exercise, InterventionKind};
use crate::curriculum::StudentProfile;
use crate::fsm::SessionState;

pub const CONTEXT_DIM: usize = 11;
pub const LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const SNAPSHOT_VERSION: u32 = 1;
const BLEND: f64 = 0.5;

pub const BACKGROUND: usize = 0;
pub const PROFICIENCY: usize = 1;
pub const ATTEMPT: usize = 2;
pub const LAST_SCORE: usize = 3;
pub const KIND_COUNTS: usize = 4;
pub const DIFFICULTY: usize = 10;

/// Policy input features. The order is part of the event-log wire format:
///
/// | index | feature |
/// |-------|---------|
/// | 0 | background level (none 0, some 0.5, strong 1) |
/// | 1 | skill proficiency estimate |
/// | 2 | classified attempts / maximum attempts |
/// | 3 | last match score (0 before any attempt) |
/// | 4..=9 | interventions already given, one slot per kind in declaration order |
/// | 10 | exercise difficulty prior |
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextVector(pub [f64; CONTEXT_DIM]);

impl ContextVector {
    pub fn features(&self) -> &[f64; CONTEXT_DIM] {
        &self.0
    }

    pub fn kind_count(&self, kind: InterventionKind) -> f64 {
        self.0[KIND_COUNTS + kind.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Builds the context for an intervention decision from the student's
/// profile, the exercise and the inner-loop state so far.
pub fn featurize(
    profile: &StudentProfile,
    state: &SessionState,
    exercise: &Exercise,
    last_score: Option<f64>,
) -> ContextVector {
    let mut x = [0.0; CONTEXT_DIM];
    x[BACKGROUND] = profile.background(&exercise.skill_id).level();
    x[PROFICIENCY] = profile.proficiency(&exercise.skill_id).clamp(0.0, 1.0);
    x[ATTEMPT] = state.attempts.len() as f64 / state.max_attempts() as f64;
    x[LAST_SCORE] = last_score.unwrap_or(0.0).clamp(0.0, 1.0);
    for given in &state.interventions_given {
        x[KIND_COUNTS + given.kind.index()] += 1.0;
    }
    x[DIFFICULTY] = exercise.difficulty().clamp(0.0, 1.0);
    ContextVector(x)
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("no intervention available to choose from")]
    NoAvailableIntervention,
    #[error("unsupported policy snapshot version {0}")]
    Version(u32),
    #[error("invalid policy snapshot: {0}")]
    Snapshot(String),
}

/// Anything that can pick the next intervention kind.
pub trait Policy {
    fn select(
        &self,
        ctx: &ContextVector,
        available: &[InterventionKind],
        rng: &mut dyn RngCore,
    ) -> Result<InterventionKind, PolicyError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Exploration {
    EpsilonGreedy {
        #[serde(with = "decimal")]
        epsilon: f64,
    },
    Thompson,
}

impl Default for Exploration {
    fn default() -> Self {
        Exploration::EpsilonGreedy {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindEstimator {
    #[serde(with = "decimal_array")]
    pub weights: [f64; CONTEXT_DIM],
    #[serde(with = "decimal")]
    pub bias: f64,
    #[serde(with = "decimal")]
    pub alpha: f64,
    #[serde(with = "decimal")]
    pub beta: f64,
}

impl Default for KindEstimator {
    fn default() -> Self {
        Self {
            weights: [0.0; CONTEXT_DIM],
            bias: 0.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl KindEstimator {
    pub fn logit(&self, ctx: &ContextVector) -> f64 {
        self.weights.iter().zip(ctx.0.iter()).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    /// Logistic success estimate for this context.
    pub fn logistic(&self, ctx: &ContextVector) -> f64 {
        sigmoid(self.logit(ctx))
    }

    pub fn beta_mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    /// Blended point estimate used for greedy selection.
    pub fn estimate(&self, ctx: &ContextVector) -> f64 {
        BLEND * self.beta_mean() + (1.0 - BLEND) * self.logistic(ctx)
    }

    fn update(&mut self, ctx: &ContextVector, reward: f64) {
        self.alpha += reward;
        self.beta += 1.0 - reward;
        let grad = self.logistic(ctx) - reward;
        for (w, x) in self.weights.iter_mut().zip(ctx.0.iter()) {
            *w -= LEARNING_RATE * grad * x;
        }
        self.bias -= LEARNING_RATE * grad;
    }
}

/// 1 iff the student's next attempt on the same exercise after the
/// intervention was correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSignal(bool);

impl RewardSignal {
    pub fn new(success: bool) -> Self {
        Self(success)
    }

    pub fn success(self) -> bool {
        self.0
    }

    pub fn value(self) -> f64 {
        if self.0 {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub version: u32,
    pub exploration: Exploration,
    pub update_count: u64,
    pub estimators: BTreeMap<InterventionKind, KindEstimator>,
}

impl Default for PolicyModel {
    fn default() -> Self {
        Self::new(Exploration::default())
    }
}

impl PolicyModel {
    pub fn new(exploration: Exploration) -> Self {
        Self {
            version: SNAPSHOT_VERSION,
            exploration,
            update_count: 0,
            estimators: InterventionKind::ALL.iter().map(|k| (*k, KindEstimator::default())).collect(),
        }
    }

    pub fn estimator(&self, kind: InterventionKind) -> &KindEstimator {
        &self.estimators[&kind]
    }

    pub fn estimator_mut(&mut self, kind: InterventionKind) -> &mut KindEstimator {
        self.estimators.entry(kind).or_default()
    }

    pub fn update(&mut self, ctx: &ContextVector, chosen: InterventionKind, reward: RewardSignal) {
        self.estimator_mut(chosen).update(ctx, reward.value());
        self.update_count += 1;
    }

    pub fn updated(mut self, ctx: &ContextVector, chosen: InterventionKind, reward: RewardSignal) -> Self {
        self.update(ctx, chosen, reward);
        self
    }

    pub fn to_snapshot(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("policy serializes");
        s.push('\n');
        s
    }

    pub fn from_snapshot(text: &str) -> Result<Self, PolicyError> {
        let model: PolicyModel = serde_json::from_str(text).map_err(|e| PolicyError::Snapshot(e.to_string()))?;
        if model.version != SNAPSHOT_VERSION {
            return Err(PolicyError::Version(model.version));
        }
        for k in InterventionKind::ALL {
            let e = model
                .estimators
                .get(&k)
                .ok_or_else(|| PolicyError::Snapshot(format!("missing estimator for {k}")))?;
            if e.alpha < 1.0 || e.beta < 1.0 {
                return Err(PolicyError::Snapshot(format!("{k}: Beta counts below 1")));
            }
            if !(e.weights.iter().all(|w| w.is_finite()) && e.bias.is_finite()) {
                return Err(PolicyError::Snapshot(format!("{k}: non-finite weights")));
            }
        }
        Ok(model)
    }
}

fn sorted_available(available: &[InterventionKind]) -> Vec<InterventionKind> {
    let mut kinds = available.to_vec();
    kinds.sort();
    kinds.dedup();
    kinds
}

/// First kind with the largest score; scores compare lexicographically, and
/// a full tie keeps declaration order.
fn argmax(kinds: &[InterventionKind], mut score: impl FnMut(InterventionKind) -> (f64, f64)) -> InterventionKind {
    let mut best = kinds[0];
    let mut best_score = score(best);
    for &k in &kinds[1..] {
        let s = score(k);
        if s.0 > best_score.0 || (s.0 == best_score.0 && s.1 > best_score.1) {
            best = k;
            best_score = s;
        }
    }
    best
}

impl Policy for PolicyModel {
    fn select(
        &self,
        ctx: &ContextVector,
        available: &[InterventionKind],
        rng: &mut dyn RngCore,
    ) -> Result<InterventionKind, PolicyError> {
        let kinds = sorted_available(available);
        if kinds.is_empty() {
            return Err(PolicyError::NoAvailableIntervention);
        }
        let default = KindEstimator::default();
        let est = |k: InterventionKind| self.estimators.get(&k).unwrap_or(&default);
        match self.exploration {
            Exploration::EpsilonGreedy { epsilon } => {
                if rng.random::<f64>() < epsilon {
                    Ok(kinds[rng.random_range(0..kinds.len())])
                } else {
                    // The logit separates kinds whose sigmoid has saturated.
                    Ok(argmax(&kinds, |k| (est(k).estimate(ctx), est(k).logit(ctx))))
                }
            }
            Exploration::Thompson => Ok(argmax(&kinds, |k| {
                let e = est(k);
                let draw = Beta::new(e.alpha, e.beta)
                    .map(|b| b.sample(&mut *rng))
                    .unwrap_or_else(|_| e.beta_mean());
                (BLEND * draw + (1.0 - BLEND) * e.logistic(ctx), e.logit(ctx))
            })),
        }
    }
}

pub fn select_intervention(
    ctx: &ContextVector,
    available: &[InterventionKind],
    model: &PolicyModel,
    rng: &mut dyn RngCore,
) -> Result<InterventionKind, PolicyError> {
    model.select(ctx, available, rng)
}

pub fn update_policy(
    model: PolicyModel,
    ctx: &ContextVector,
    chosen: InterventionKind,
    reward: RewardSignal,
) -> PolicyModel {
    model.updated(ctx, chosen, reward)
}

/// Floats as shortest round-trip decimal strings.
mod decimal {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{x:?}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        let x: f64 = s.parse().map_err(D::Error::custom)?;
        if !x.is_finite() {
            return Err(D::Error::custom(format!("non-finite value `{s}`")));
        }
        Ok(x)
    }
}

mod decimal_array {
    use super::CONTEXT_DIM;
    use serde::{de::Error, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(xs: &[f64; CONTEXT_DIM], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for x in xs {
            seq.serialize_element(&format!("{x:?}"))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; CONTEXT_DIM], D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        if raw.len() != CONTEXT_DIM {
            return Err(D::Error::invalid_length(raw.len(), &"one weight per context feature"));
        }
        let mut out = [0.0; CONTEXT_DIM];
        for (o, s) in out.iter_mut().zip(&raw) {
            *o = s.parse().map_err(D::Error::custom)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use InterventionKind::*;

    fn ctx() -> ContextVector {
        let mut x = [0.0; CONTEXT_DIM];
        x[PROFICIENCY] = 0.2;
        x[ATTEMPT] = 0.25;
        x[LAST_SCORE] = 0.3;
        x[DIFFICULTY] = 0.5;
        ContextVector(x)
    }

    fn with_logistic(model: &mut PolicyModel, kind: InterventionKind, p: f64) {
        model.estimator_mut(kind).bias = (p / (1.0 - p)).ln();
    }

    #[test]
    fn greedy_picks_highest_estimate() {
        let mut m = PolicyModel::new(Exploration::EpsilonGreedy { epsilon: 0.0 });
        with_logistic(&mut m, TextHint, 0.6);
        with_logistic(&mut m, MultipleChoice, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(m.select(&ctx(), &[MultipleChoice, TextHint], &mut rng), Ok(TextHint));
    }

    #[test]
    fn greedy_ties_follow_declaration_order() {
        let m = PolicyModel::new(Exploration::EpsilonGreedy { epsilon: 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(m.select(&ctx(), &[ConceptTree, Elaboration, MathHint], &mut rng), Ok(MathHint));
    }

    #[test]
    fn empty_available_is_an_error() {
        let m = PolicyModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(m.select(&ctx(), &[], &mut rng), Err(PolicyError::NoAvailableIntervention));
    }

    #[test]
    fn reward_touches_only_the_chosen_kind() {
        let before = PolicyModel::default();
        let after = update_policy(before.clone(), &ctx(), Elaboration, RewardSignal::new(true));
        assert_eq!(after.estimator(Elaboration).alpha, before.estimator(Elaboration).alpha + 1.0);
        assert_eq!(after.estimator(Elaboration).beta, before.estimator(Elaboration).beta);
        for k in InterventionKind::ALL.into_iter().filter(|k| *k != Elaboration) {
            assert_eq!(after.estimator(k), before.estimator(k));
        }
        assert_eq!(after.update_count, 1);
    }

    #[test]
    fn snapshot_stores_decimal_strings() {
        let m = PolicyModel::default().updated(&ctx(), TextHint, RewardSignal::new(true));
        let snap = m.to_snapshot();
        let v: serde_json::Value = serde_json::from_str(&snap).unwrap();
        assert!(v["estimators"]["text_hint"]["weights"][1].is_string());
        assert_eq!(v["exploration"]["strategy"], "epsilon_greedy");
        assert_eq!(PolicyModel::from_snapshot(&snap).unwrap(), m);
    }

    #[test]
    fn snapshot_rejects_bad_counts() {
        let mut m = PolicyModel::default();
        m.estimator_mut(TextHint).alpha = 0.5;
        assert!(PolicyModel::from_snapshot(&m.to_snapshot()).is_err());
    }
}
