//! Append-only line-delimited JSON event log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use dvaegan_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::session::{Choice, RatingSession};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum Event {
    Register { rater: String },
    Choice(Choice),
}

/// `session.json` logs to `session.events.jsonl`.
pub fn log_path(session_file: &Path) -> PathBuf {
    session_file.with_extension("events.jsonl")
}

pub struct EventLog {
    file: File,
}

impl EventLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn append(&mut self, event: &Event) -> Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// Applies a log to a session. A torn final line from a crash is dropped.
pub fn replay(path: &Path, session: &mut RatingSession) -> Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<std::io::Result<_>>()?;
    let mut applied = 0;
    for (n, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(_) if n + 1 == lines.len() => {
                log::warn!("{}: dropping torn final line {}", path.display(), n + 1);
                break;
            }
            Err(e) => return Err(Error::Validation(format!("{} line {}: {e}", path.display(), n + 1))),
        };
        match event {
            Event::Register { rater } => session.register(&rater),
            Event::Choice(c) => session
                .record(c)
                .map_err(|e| Error::Validation(format!("{} line {}: {e}", path.display(), n + 1)))?,
        }
        applied += 1;
    }
    Ok(applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::Side;

    fn blank() -> RatingSession {
        RatingSession {
            version: 1,
            id: "s".into(),
            seed: 0,
            per_rater_order: false,
            trials: Vec::new(),
            raters: Vec::new(),
            choices: Vec::new(),
        }
    }

    #[test]
    fn event_lines_are_tagged() {
        let e = Event::Choice(Choice { trial: 2, side: Side::B, rater: "r".into(), timestamp_ms: 5 });
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"event":"choice","trial":2,"side":"B","rater":"r","timestamp_ms":5}"#
        );
    }

    #[test]
    fn torn_tail_is_dropped_but_corruption_inside_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        std::fs::write(&p, "{\"event\":\"register\",\"rater\":\"a\"}\n{\"event\":\"reg").unwrap();
        let mut s = blank();
        assert_eq!(replay(&p, &mut s).unwrap(), 1);
        assert_eq!(s.raters, vec!["a".to_string()]);
        std::fs::write(&p, "garbage\n{\"event\":\"register\",\"rater\":\"a\"}\n").unwrap();
        assert!(matches!(replay(&p, &mut blank()), Err(Error::Validation(_))));
    }
}
