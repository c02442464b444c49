//! Core engine for a dialogue-based tutoring system: content bundles, the
//! lexical solution matcher, the inner-loop dialogue state machine, the
//! contextual-bandit intervention policy, the outer-loop curriculum, plus a
//! simulated-student A/B harness and its statistics.

pub mod content;
pub mod curriculum;
pub mod fsm;
pub mod matcher;
pub mod policy;
pub mod eventlog;
pub mod experiment;
pub mod simulator;
pub mod stats;
