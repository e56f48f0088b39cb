//! Subjective two-alternative assessment: raters see a reconstruction next
//! to the true stimulus and a same-family distractor and pick the closer one.

pub mod events;
pub mod scripted;
pub mod server;
mod session;

pub use session::{build_session, score, Choice, HumComResult, RaterScore, RatingSession, RecordError, Side, Status, Trial, SESSION_VERSION};
