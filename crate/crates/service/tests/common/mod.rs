#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;
use tutor_service::{router, ServiceConfig, Tutor};

pub fn courses_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/courses")
}

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

pub fn config() -> ServiceConfig {
    ServiceConfig {
        content_dir: Some(courses_dir()),
        ..ServiceConfig::default()
    }
}

pub fn app() -> Router {
    router(Arc::new(Mutex::new(Tutor::open(config()).unwrap())))
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let body = body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty);
    raw(app, method, uri, body).await
}

pub async fn raw(app: &Router, method: &str, uri: &str, body: Body) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body)
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

pub fn kinds(events: &Value) -> Vec<String> {
    events
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["event"]["kind"].as_str().unwrap_or("").to_string())
        .collect()
}

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};
use tutor_core::curriculum::Background;
use tutor_core::fsm::StudentAction;
use tutor_core::simulator::{simulate_action, StudentModel, Streak};
use tutor_service::tutor::NewStudent;

const DISTRACTORS: &[&str] = &[
    "it is about the learning rate",
    "you add more layers to the network",
    "the data is sorted alphabetically",
];

/// One step of a scripted workload, with what the tutor answered.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Registered(String),
    Opened(String, String),
    Acted(String, StudentAction, String),
    Rejected(String),
}

fn model(student_id: &str, rng: &mut dyn RngCore) -> StudentModel {
    let skills = ["loss-functions", "regularization", "supervised-learning", "overfitting"];
    StudentModel {
        student_id: student_id.into(),
        proficiency: skills.iter().map(|s| (s.to_string(), rng.random_range(0.2..0.9))).collect(),
        responsiveness: BTreeMap::new(),
        patience: 2,
        guess_rate: 0.3,
        reading_speed_s: 5.0,
        satisfaction_bias: 0.5,
        dropout_after_failure: 0.0,
    }
}

/// Replies as JSON without wall-clock stamps, so runs can be compared.
pub fn stable_json<T: serde::Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).unwrap();
    strip_ts(&mut v);
    v.to_string()
}

fn strip_ts(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("ts_ms");
            map.values_mut().for_each(strip_ts);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_ts),
        _ => {}
    }
}

/// Drives a tutor with simulated students: registrations, sessions opened
/// and abandoned mid-exercise, simulated answers, repeated action ids and
/// illegal actions. Fully determined by `rng`.
pub fn drive(tutor: &mut Tutor, rng: &mut dyn RngCore, steps: usize) -> Vec<Step> {
    let courses = ["ml-basics", "ml-foundations"];
    let mut out = Vec::new();
    let mut models: BTreeMap<String, StudentModel> = tutor
        .snapshot()
        .students
        .keys()
        .map(|id| (id.clone(), model(id, rng)))
        .collect();
    let mut streaks: BTreeMap<String, Streak> = BTreeMap::new();
    let mut last_id: BTreeMap<String, String> = BTreeMap::new();
    for _ in 0..steps {
        let roll = rng.random_range(0..100);
        if models.len() < 2 || roll < 4 {
            let mut request = NewStudent::default();
            for skill in ["loss-functions", "regularization", "overfitting"] {
                if rng.random_bool(0.5) {
                    let answer = *[Background::None, Background::Some, Background::Strong].choose(rng).unwrap();
                    request.background_answers.insert(skill.into(), answer);
                }
            }
            let profile = tutor.register_student(request).unwrap();
            models.insert(profile.student_id.clone(), model(&profile.student_id, rng));
            out.push(Step::Registered(profile.student_id));
            continue;
        }
        let ids: Vec<&String> = models.keys().collect();
        let student_id = ids.choose(rng).unwrap().to_string();
        let snap = tutor.snapshot();
        let open = snap.students[&student_id].open_session.clone();
        let Some(session_id) = open.filter(|_| roll >= 10) else {
            let course = *courses.choose(rng).unwrap();
            let view = tutor.open_session(&student_id, course).unwrap();
            out.push(Step::Opened(view.session_id.clone(), stable_json(&view)));
            continue;
        };
        let session = &snap.sessions[&session_id];
        let active = session.exercise.as_ref().expect("open sessions wait on an exercise");
        let course = tutor.course(&session.course_id).unwrap();
        let exercise = course.exercise(&active.state.exercise_id).unwrap();
        let streak = streaks.entry(session_id.clone()).or_default();
        let action = if roll < 13 {
            // Usually illegal in the current state.
            StudentAction::SelectOption { index: 0 }
        } else {
            simulate_action(&models[&student_id], *streak, active.state.prompt(exercise), exercise, DISTRACTORS, rng)
        };
        let action_id = if (13..16).contains(&roll) {
            last_id.get(&session_id).cloned()
        } else if rng.random_bool(0.5) {
            Some(format!("act-{}", out.len()))
        } else {
            None
        };
        match tutor.post_action(&session_id, action.clone(), action_id.clone()) {
            Ok(reply) => {
                if !reply.duplicate {
                    let events: Vec<_> = reply
                        .events
                        .iter()
                        .filter_map(|r| match &r.payload {
                            tutor_core::eventlog::RecordPayload::Tutor { event } => Some(event.clone()),
                            _ => None,
                        })
                        .collect();
                    streak.observe(&events);
                    if events.iter().any(|e| matches!(e, tutor_core::fsm::TutorEvent::ExerciseComplete { .. })) {
                        *streak = Streak::default();
                    }
                }
                if let Some(id) = action_id {
                    last_id.insert(session_id.clone(), id);
                }
                out.push(Step::Acted(session_id, action, stable_json(&reply)));
            }
            Err(e) => out.push(Step::Rejected(e.to_string())),
        }
    }
    out
}
