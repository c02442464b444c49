//! Live tutoring sessions over HTTP, persisted as an append-only event log.

pub mod api;
pub mod tutor;

pub use api::{router, SharedTutor};
pub use tutor::{ServiceConfig, Tutor, TutorError};
