//! The A/B protocol on simulated populations: random assignment, one run
//! per student, then the four outcome metrics per arm with 95% intervals
//! and pairwise significance marks.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::Course;
use crate::eventlog::{count_learning_gain, GainCounts};
use crate::fsm::Limits;
use crate::matcher::Matcher;
use crate::policy::PolicyModel;
use crate::simulator::{simulate_session, PopulationConfig, SessionLog, SimContext, SimError, Variant, DEFAULT_SESSION_CAP_S};
use crate::stats::{mean_ci, proportion_ci, two_proportion_z_test, welch_t_test, StatsError, TestResult};

pub const DEFAULT_PARTICIPANTS: usize = 612;
pub const DEFAULT_SPLIT: f64 = 0.8;
pub const REPORT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_participants: usize,
    /// Probability of assignment to the full system.
    pub assignment_split: f64,
    pub seed: u64,
    pub population: PopulationConfig,
    pub limits: Limits,
    pub session_cap_s: f64,
    pub confidence_levels: Vec<f64>,
}

impl ExperimentConfig {
    pub fn new(population: PopulationConfig) -> Self {
        Self {
            n_participants: population.size,
            assignment_split: DEFAULT_SPLIT,
            seed: population.seed,
            population,
            limits: Limits::default(),
            session_cap_s: DEFAULT_SESSION_CAP_S,
            confidence_levels: vec![0.90, REPORT_LEVEL],
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.n_participants < 2 {
            return Err(ExperimentError::Config(format!("n = {} but at least 2 are needed", self.n_participants)));
        }
        if !(self.assignment_split > 0.0 && self.assignment_split <= 1.0) {
            return Err(ExperimentError::Config(format!("split {} outside (0,1]", self.assignment_split)));
        }
        if !(self.session_cap_s > 0.0) {
            return Err(ExperimentError::Config("session cap must be positive".into()));
        }
        self.population
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("student {index}: {source}")]
    Simulation { index: usize, source: SimError },
}

/// Each participant independently gets the full system with probability
/// `split`.
pub fn assign_variants(n: usize, split: f64, rng: &mut dyn RngCore) -> Vec<Variant> {
    let p = split.clamp(0.0, 1.0);
    (0..n)
        .map(|_| if rng.random_bool(p) { Variant::FullIts } else { Variant::XmoocIts })
        .collect()
}

/// The generator for one participant: stream `index + 1` of the experiment
/// seed. Stream 0 is used for assignment.
pub fn student_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn assignment_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningGain {
    pub counts: GainCounts,
    pub proportion: f64,
    pub halfwidth: f64,
}

pub fn compute_learning_gain<'a>(logs: impl IntoIterator<Item = &'a SessionLog>) -> Result<LearningGain, StatsError> {
    let mut counts = GainCounts::default();
    for log in logs {
        counts.total += log.triples.len() as u64;
        counts.helped += log.triples.iter().filter(|t| t.next_attempt_correct).count() as u64;
    }
    gain_from_counts(counts)
}

pub fn gain_from_counts(counts: GainCounts) -> Result<LearningGain, StatsError> {
    if counts.total == 0 {
        return Err(StatsError::NoInterventions);
    }
    let (proportion, halfwidth) = proportion_ci(counts.helped, counts.total, REPORT_LEVEL)?;
    Ok(LearningGain {
        counts,
        proportion,
        halfwidth,
    })
}

/// Per-arm raw outcomes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariantSummary {
    pub time_spent_min: Vec<f64>,
    pub returned: u64,
    pub will_refer: u64,
    pub gain: GainCounts,
}

impl VariantSummary {
    pub fn from_logs<'a>(logs: impl IntoIterator<Item = &'a SessionLog>) -> Self {
        let mut s = Self::default();
        for log in logs {
            s.time_spent_min.push(log.total_time_s / 60.0);
            s.returned += log.returned as u64;
            s.will_refer += log.will_refer as u64;
            s.gain.total += log.triples.len() as u64;
            s.gain.helped += log.triples.iter().filter(|t| t.next_attempt_correct).count() as u64;
        }
        s
    }

    pub fn participants(&self) -> u64 {
        self.time_spent_min.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub time_spent: Option<TestResult>,
    pub returning: Option<TestResult>,
    pub will_refer: Option<TestResult>,
    pub learning_gain: Option<TestResult>,
}

impl Significance {
    pub fn results(&self) -> [Option<TestResult>; 4] {
        [self.time_spent, self.returning, self.will_refer, self.learning_gain]
    }
}

/// Tests `a` against `b`; statistics are positive when `a` is larger.
pub fn compare_variants(a: &VariantSummary, b: &VariantSummary) -> Significance {
    let (na, nb) = (a.participants(), b.participants());
    Significance {
        time_spent: welch_t_test(&a.time_spent_min, &b.time_spent_min).ok(),
        returning: two_proportion_z_test(a.returned, na, b.returned, nb).ok(),
        will_refer: two_proportion_z_test(a.will_refer, na, b.will_refer, nb).ok(),
        learning_gain: two_proportion_z_test(a.gain.helped, a.gain.total, b.gain.helped, b.gain.total).ok(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub halfwidth: f64,
}

impl Estimate {
    fn percent((p, h): (f64, f64)) -> Self {
        Self {
            value: 100.0 * p,
            halfwidth: 100.0 * h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    pub variant: Variant,
    pub participants: u64,
    pub time_spent_min: Option<Estimate>,
    pub returning_pct: Option<Estimate>,
    pub will_refer_pct: Option<Estimate>,
    pub learning_gain_pct: Option<Estimate>,
    pub learning_gain_counts: GainCounts,
}

impl ReportRow {
    fn new(variant: Variant, s: &VariantSummary) -> Self {
        let n = s.participants();
        Self {
            system: variant.label().to_string(),
            variant,
            participants: n,
            time_spent_min: mean_ci(&s.time_spent_min, REPORT_LEVEL)
                .ok()
                .map(|(value, halfwidth)| Estimate { value, halfwidth }),
            returning_pct: proportion_ci(s.returned, n, REPORT_LEVEL).ok().map(Estimate::percent),
            will_refer_pct: proportion_ci(s.will_refer, n, REPORT_LEVEL).ok().map(Estimate::percent),
            learning_gain_pct: proportion_ci(s.gain.helped, s.gain.total, REPORT_LEVEL)
                .ok()
                .map(Estimate::percent),
            learning_gain_counts: s.gain,
        }
    }
}

/// Learning-gain counts taken from the recorded reward triples and,
/// independently, by walking the dialogue events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub from_triples: GainCounts,
    pub from_log_walker: GainCounts,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub n_participants: usize,
    pub assignment_split: f64,
    pub seed: u64,
    pub confidence_level: f64,
    /// xMOOC ITS first, then Full ITS.
    pub rows: Vec<ReportRow>,
    pub pooled_learning_gain_pct: Option<Estimate>,
    /// Full ITS against xMOOC ITS.
    pub significance: Significance,
    pub cross_check: CrossCheck,
}

impl ExperimentReport {
    pub fn row(&self, variant: Variant) -> &ReportRow {
        self.rows.iter().find(|r| r.variant == variant).expect("both rows present")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub struct ExperimentRun {
    pub assignment: Vec<Variant>,
    pub logs: Vec<SessionLog>,
    pub report: ExperimentReport,
}

/// Simulates every participant against a frozen policy. Students run in
/// parallel, each on its own random stream, and results are folded in
/// index order.
pub fn run_experiment(
    config: &ExperimentConfig,
    course: &Course,
    matcher: &dyn Matcher,
    policy: &PolicyModel,
) -> Result<ExperimentRun, ExperimentError> {
    config.validate()?;
    let assignment = assign_variants(config.n_participants, config.assignment_split, &mut assignment_rng(config.seed));
    let logs = assignment
        .par_iter()
        .enumerate()
        .map(|(index, variant)| {
            let mut rng = student_rng(config.seed, index);
            let student = config.population.sample_student(format!("sim-{index:04}"), course, &mut rng);
            let ctx = SimContext {
                course,
                matcher,
                policy,
                limits: config.limits,
                session_cap_s: config.session_cap_s,
            };
            simulate_session(&student, *variant, &ctx, &mut rng).map_err(|source| ExperimentError::Simulation { index, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = summarize(config, &logs);
    Ok(ExperimentRun {
        assignment,
        logs,
        report,
    })
}

pub fn summarize(config: &ExperimentConfig, logs: &[SessionLog]) -> ExperimentReport {
    let arm = |v: Variant| VariantSummary::from_logs(logs.iter().filter(|l| l.variant == v));
    let (xmooc, full) = (arm(Variant::XmoocIts), arm(Variant::FullIts));

    let mut from_triples = xmooc.gain;
    from_triples.add(full.gain);
    let from_log_walker = count_learning_gain(logs.iter().flat_map(|l| l.records.iter()));

    ExperimentReport {
        n_participants: config.n_participants,
        assignment_split: config.assignment_split,
        seed: config.seed,
        confidence_level: REPORT_LEVEL,
        rows: vec![ReportRow::new(Variant::XmoocIts, &xmooc), ReportRow::new(Variant::FullIts, &full)],
        pooled_learning_gain_pct: gain_from_counts(from_triples)
            .ok()
            .map(|g| Estimate::percent((g.proportion, g.halfwidth))),
        significance: compare_variants(&full, &xmooc),
        cross_check: CrossCheck {
            from_triples,
            from_log_walker,
            consistent: from_triples == from_log_walker,
        },
    }
}
