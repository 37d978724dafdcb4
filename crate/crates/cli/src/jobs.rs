//! Job records with monotone state transitions and a JSON-lines log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use cforge_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobKind {
    Project,
    Walk,
    Mix,
    Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done) | (JobState::Running, JobState::Failed)
        )
    }
}

/// Milliseconds since the Unix epoch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub queued_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timings: Timings,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

struct Book {
    records: HashMap<String, JobRecord>,
    next: u64,
}

/// In-memory job table. Every change is appended to the log while the table
/// lock is held, so log order matches transition order.
pub struct JobBook {
    book: Mutex<Book>,
    log: Option<Mutex<File>>,
}

impl JobBook {
    pub fn new(log: Option<&Path>) -> Result<Self> {
        let log = match log {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?;
                Some(Mutex::new(f))
            }
            None => None,
        };
        Ok(Self {
            book: Mutex::new(Book {
                records: HashMap::new(),
                next: 1,
            }),
            log,
        })
    }

    fn append(&self, rec: &JobRecord) {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_string(rec).expect("job records serialize");
            line.push('\n');
            let mut f = log.lock().unwrap_or_else(|e| e.into_inner());
            // A failed log write must not take the service down.
            let _ = f.write_all(line.as_bytes());
        }
    }

    pub fn create(&self, kind: JobKind) -> JobRecord {
        let mut book = self.book.lock().unwrap_or_else(|e| e.into_inner());
        let rec = JobRecord {
            job_id: format!("job-{:06}", book.next),
            kind,
            state: JobState::Queued,
            artifacts: Vec::new(),
            result: None,
            error: None,
            timings: Timings {
                queued_ms: now_ms(),
                ..Timings::default()
            },
        };
        book.next += 1;
        book.records.insert(rec.job_id.clone(), rec.clone());
        self.append(&rec);
        rec
    }

    fn transition(&self, id: &str, next: JobState, f: impl FnOnce(&mut JobRecord)) -> Result<JobRecord> {
        let mut book = self.book.lock().unwrap_or_else(|e| e.into_inner());
        let rec = book
            .records
            .get_mut(id)
            .ok_or_else(|| Error::invalid(format!("unknown job {id}")))?;
        if !rec.state.can_become(next) {
            return Err(Error::invalid(format!("job {id} cannot go from {:?} to {next:?}", rec.state)));
        }
        rec.state = next;
        f(rec);
        let rec = rec.clone();
        self.append(&rec);
        Ok(rec)
    }

    pub fn start(&self, id: &str) -> Result<JobRecord> {
        self.transition(id, JobState::Running, |r| r.timings.started_ms = Some(now_ms()))
    }

    pub fn finish(&self, id: &str, artifacts: Vec<String>, result: serde_json::Value) -> Result<JobRecord> {
        self.transition(id, JobState::Done, |r| {
            r.artifacts = artifacts;
            r.result = Some(result);
            r.timings.finished_ms = Some(now_ms());
        })
    }

    pub fn fail(&self, id: &str, message: String) -> Result<JobRecord> {
        self.transition(id, JobState::Failed, |r| {
            r.error = Some(message);
            r.timings.finished_ms = Some(now_ms());
        })
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.book.lock().unwrap_or_else(|e| e.into_inner()).records.get(id).cloned()
    }
}
