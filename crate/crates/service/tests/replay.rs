mod common;

use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use common::{drive, stable_json, Step};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tutor_core::eventlog::{read_log, replay_log, LogError, RecordPayload};
use tutor_core::policy::PolicyModel;
use tutor_service::{ServiceConfig, Tutor, TutorError};

fn config(log: &Path) -> ServiceConfig {
    ServiceConfig {
        log_path: Some(log.to_path_buf()),
        ..common::config()
    }
}

/// Runs a workload, then abandons the tutor without any shutdown.
fn crashed_run(log: &Path, seed: u64, steps: usize) -> (String, Vec<Step>) {
    let mut tutor = Tutor::open(config(log)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = drive(&mut tutor, &mut rng, steps);
    let snapshot = tutor.snapshot_json();
    std::mem::forget(tutor);
    (snapshot, steps)
}

fn session_ids(tutor: &Tutor) -> Vec<String> {
    tutor.snapshot().sessions.keys().cloned().collect()
}

#[test]
fn workload_covers_the_interesting_paths() {
    let dir = tempfile::tempdir().unwrap();
    let (_, steps) = crashed_run(&dir.path().join("log.jsonl"), 3, 400);
    let opened = steps.iter().filter(|s| matches!(s, Step::Opened(..))).count();
    let rejected = steps.iter().filter(|s| matches!(s, Step::Rejected(..))).count();
    let duplicates = steps
        .iter()
        .filter(|s| matches!(s, Step::Acted(_, _, reply) if reply.contains("\"duplicate\":true")))
        .count();
    assert!(opened >= 10, "{opened}");
    assert!(rejected >= 5, "{rejected}");
    assert!(duplicates >= 3, "{duplicates}");

    let records = read_log(BufReader::new(File::open(dir.path().join("log.jsonl")).unwrap())).unwrap();
    // Some session was abandoned with an exercise open.
    let abandoned = records.windows(2).any(|w| {
        matches!(w[1].payload, RecordPayload::SessionClosed)
            && !matches!(
                w[0].payload,
                RecordPayload::Tutor {
                    event: tutor_core::fsm::TutorEvent::CurriculumComplete
                }
            )
    });
    assert!(abandoned);
}

#[test]
fn restart_reproduces_the_state_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let (before, _) = crashed_run(&log, 11, 400);

    let replayed = Tutor::open(config(&log)).unwrap();
    assert_eq!(replayed.snapshot_json(), before);
    assert!(before.len() > 1000);

    // A second restart is just as good.
    let again = Tutor::open(config(&log)).unwrap();
    assert_eq!(again.snapshot_json(), before);
    assert_eq!(again.metrics(), replayed.metrics());
}

#[test]
fn replayed_tutor_answers_like_the_original() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut live = Tutor::open(config(&log)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    drive(&mut live, &mut rng, 300);

    let copy = dir.path().join("copy.jsonl");
    fs::copy(&log, &copy).unwrap();
    let mut restored = Tutor::open(config(&copy)).unwrap();
    for id in session_ids(&live) {
        assert_eq!(
            stable_json(&live.events_since(&id, 0).unwrap()),
            stable_json(&restored.events_since(&id, 0).unwrap())
        );
    }
    assert_eq!(live.metrics(), restored.metrics());

    let mut rng_b = rng.clone();
    let a = drive(&mut live, &mut rng, 200);
    let b = drive(&mut restored, &mut rng_b, 200);
    assert_eq!(a, b);
    assert_eq!(live.snapshot_json(), restored.snapshot_json());
}

#[test]
fn policy_rebuilt_from_the_log_matches_the_live_one() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut live = Tutor::open(config(&log)).unwrap();
    drive(&mut live, &mut ChaCha8Rng::seed_from_u64(8), 500);

    let rebuilt = replay_log(BufReader::new(File::open(&log).unwrap()), PolicyModel::default()).unwrap();
    assert_eq!(rebuilt.to_snapshot(), live.policy().to_snapshot());

    let rewards = live
        .records()
        .iter()
        .filter(|r| matches!(r.payload, RecordPayload::Reward { .. }))
        .count() as u64;
    assert!(rewards > 0);
    assert_eq!(live.policy().update_count, rewards);
    assert_eq!(live.metrics().policy_updates, rewards);
}

#[test]
fn periodic_policy_snapshots_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut live = Tutor::open(ServiceConfig {
        snapshot_every: 5,
        ..config(&log)
    })
    .unwrap();
    drive(&mut live, &mut ChaCha8Rng::seed_from_u64(2), 300);
    let text = fs::read_to_string(dir.path().join("log.jsonl.policy.json")).unwrap();
    let saved = PolicyModel::from_snapshot(&text).unwrap();
    assert_eq!(saved.update_count % 5, 0);
    assert!(saved.update_count > 0 && saved.update_count <= live.policy().update_count);
}

#[test]
fn a_fresh_log_starts_from_the_configured_policy() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    fs::write(&log, "").unwrap();
    let tutor = Tutor::open(config(&log)).unwrap();
    assert_eq!(tutor.policy(), &PolicyModel::default());
    assert_eq!(tutor.records().len(), 1);
    assert!(matches!(tutor.records()[0].payload, RecordPayload::PolicySeeded { .. }));
    drop(tutor);

    // The seed record makes the log self-contained: a different configured
    // policy does not change what a replay produces.
    let mut other = PolicyModel::default();
    other.update_count = 77;
    let reopened = Tutor::open(ServiceConfig {
        initial_policy: other,
        ..config(&log)
    })
    .unwrap();
    assert_eq!(reopened.policy(), &PolicyModel::default());
}

#[test]
fn a_missing_line_is_reported_by_number() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    crashed_run(&log, 4, 60);
    let text = fs::read_to_string(&log).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.remove(9);
    fs::write(&log, lines.join("\n") + "\n").unwrap();
    match Tutor::open(config(&log)) {
        Err(TutorError::Log(LogError::CorruptLog { line, .. })) => assert_eq!(line, 10),
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("a gap in the log must not load"),
    }
}

#[test]
fn a_tampered_record_is_a_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    crashed_run(&log, 4, 60);
    let text = fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let target = lines.iter().position(|l| l.contains("\"show_problem\"")).unwrap();
    let mut record: serde_json::Value = serde_json::from_str(&lines[target]).unwrap();
    record["event"]["text"] = serde_json::json!("a different question");
    lines[target] = record.to_string();
    fs::write(&log, lines.join("\n") + "\n").unwrap();
    match Tutor::open(config(&log)) {
        Err(TutorError::Diverged { line, .. }) => assert_eq!(line, target + 1),
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("a tampered log must not load"),
    }
}
