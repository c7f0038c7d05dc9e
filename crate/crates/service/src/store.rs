//! On-disk session store.
//!
//! Layout under the store root:
//!
//! ```text
//! images/<sha256>.png
//! sessions/<id>/session.json   games, display orders and targets (never served)
//! sessions/<id>/events.jsonl   append-only answer log, fsynced before each ack
//! sessions/<id>/summary.json   compacted summary, written once all games are answered
//! ```

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ServiceError};

pub const SESSION_GAMES: usize = 30;
pub const HUMAN_K: usize = 9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotoSlot {
    /// Content hash of the PNG; doubles as the photo reference clients submit.
    pub photo_ref: String,
    pub image_id: u32,
    pub class: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionGame {
    pub sketch: String,
    /// Photos in display order.
    pub photos: Vec<PhotoSlot>,
    pub target_id: u32,
    pub target_class: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub participant: String,
    pub config_id: String,
    pub seed: u64,
    pub created_unix_ms: u64,
    pub games: Vec<SessionGame>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerEvent {
    pub index: usize,
    pub photo_ref: String,
    pub image_id: u32,
    pub class: u8,
    pub unix_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub session_id: String,
    pub index: usize,
    /// Index of the next unanswered game.
    pub cursor: usize,
    pub complete: bool,
    /// True when this request repeated an already-recorded answer.
    pub duplicate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameLog {
    pub index: usize,
    pub target_id: u32,
    pub target_class: u8,
    pub chosen_id: u32,
    pub chosen_class: u8,
    pub correct: bool,
    pub class_correct: bool,
    pub unix_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub participant: String,
    pub config_id: String,
    pub seed: u64,
    pub games: usize,
    pub correct: usize,
    pub class_correct: usize,
    pub comm_rate: f64,
    pub class_comm_rate: f64,
    pub log: Vec<GameLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigAggregate {
    pub config_id: String,
    pub participants: usize,
    pub mean_comm_rate: f64,
    pub std_comm_rate: f64,
    pub mean_class_comm_rate: f64,
    pub std_class_comm_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub participant: String,
    pub config_id: String,
    pub seed: u64,
    pub total: usize,
    pub cursor: usize,
    pub complete: bool,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

pub fn valid_hash(hash: &str) -> bool {
    hash.len() == 64 && hash.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase())
}

/// Rates from a full answer log.
pub fn summarize(session: &Session, answers: &[AnswerEvent]) -> Result<SessionSummary> {
    if answers.len() < session.games.len() {
        return Err(ServiceError::Incomplete {
            answered: answers.len(),
            total: session.games.len(),
        });
    }
    let log: Vec<GameLog> = session
        .games
        .iter()
        .zip(answers)
        .enumerate()
        .map(|(i, (g, a))| GameLog {
            index: i,
            target_id: g.target_id,
            target_class: g.target_class,
            chosen_id: a.image_id,
            chosen_class: a.class,
            correct: a.image_id == g.target_id,
            class_correct: a.class == g.target_class,
            unix_ms: a.unix_ms,
        })
        .collect();
    let n = log.len();
    let correct = log.iter().filter(|l| l.correct).count();
    let class_correct = log.iter().filter(|l| l.class_correct).count();
    let rate = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(SessionSummary {
        session_id: session.id.clone(),
        participant: session.participant.clone(),
        config_id: session.config_id.clone(),
        seed: session.seed,
        games: n,
        correct,
        class_correct,
        comm_rate: rate(correct),
        class_comm_rate: rate(class_correct),
        log,
    })
}

/// Mean and population standard deviation over participants' summaries.
pub fn aggregate(config_id: &str, summaries: &[SessionSummary]) -> ConfigAggregate {
    let stats = |xs: Vec<f64>| {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return (0.0, 0.0);
        }
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (mean_comm_rate, std_comm_rate) = stats(summaries.iter().map(|s| s.comm_rate).collect());
    let (mean_class_comm_rate, std_class_comm_rate) = stats(summaries.iter().map(|s| s.class_comm_rate).collect());
    ConfigAggregate {
        config_id: config_id.to_string(),
        participants: summaries.len(),
        mean_comm_rate,
        std_comm_rate,
        mean_class_comm_rate,
        std_class_comm_rate,
    }
}

pub struct Store {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    crash_after_persist: AtomicBool,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("sessions"))?;
        std::fs::create_dir_all(root.join("images"))?;
        Ok(Self {
            root,
            locks: Mutex::new(HashMap::new()),
            crash_after_persist: AtomicBool::new(false),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Makes the next answer submission fail after its event is durable but before
    /// the acknowledgement is returned, as a process crash at that point would.
    pub fn inject_crash_after_persist(&self) {
        self.crash_after_persist.store(true, Ordering::SeqCst);
    }

    fn session_lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table poisoned");
        locks.entry(id.to_string()).or_default().clone()
    }

    fn session_dir(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(ServiceError::NotFound(format!("session {id}")));
        }
        Ok(self.root.join("sessions").join(id))
    }

    /// Stores a PNG under its content hash and returns the hash.
    pub fn put_image(&self, png: &[u8]) -> Result<String> {
        let hash = hex::encode(Sha256::digest(png));
        let path = self.root.join("images").join(format!("{hash}.png"));
        if !path.exists() {
            write_atomic(&path, png)?;
        }
        Ok(hash)
    }

    pub fn image(&self, hash: &str) -> Result<Vec<u8>> {
        if !valid_hash(hash) {
            return Err(ServiceError::NotFound(format!("image {hash}")));
        }
        let path = self.root.join("images").join(format!("{hash}.png"));
        std::fs::read(&path).map_err(|_| ServiceError::NotFound(format!("image {hash}")))
    }

    /// Persists a new session; it becomes visible only once fully written.
    pub fn create(&self, session: &Session) -> Result<()> {
        let dir = self.session_dir(&session.id)?;
        if dir.exists() {
            return Err(ServiceError::Conflict(format!("session {} already exists", session.id)));
        }
        let staging = self.root.join("sessions").join(format!(".{}.staging", session.id));
        std::fs::create_dir_all(&staging)?;
        write_atomic(&staging.join("session.json"), &serde_json::to_vec_pretty(session)?)?;
        File::create(staging.join("events.jsonl"))?.sync_all()?;
        std::fs::rename(&staging, &dir)?;
        File::open(self.root.join("sessions"))?.sync_all()?;
        Ok(())
    }

    pub fn session(&self, id: &str) -> Result<Session> {
        let path = self.session_dir(id)?.join("session.json");
        let bytes = std::fs::read(&path).map_err(|_| ServiceError::NotFound(format!("session {id}")))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn session_ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(self.root.join("sessions"))? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if valid_id(&name) {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Replays the answer log. A final line without a newline is a write that was
    /// interrupted before it was acknowledged and is ignored.
    pub fn answers(&self, id: &str) -> Result<Vec<AnswerEvent>> {
        let path = self.session_dir(id)?.join("events.jsonl");
        let file = File::open(&path).map_err(|_| ServiceError::NotFound(format!("session {id}")))?;
        let mut reader = BufReader::new(file);
        let mut out = Vec::new();
        let mut line = String::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 || !line.ends_with('\n') {
                break;
            }
            let event: AnswerEvent = serde_json::from_str(line.trim_end())?;
            if event.index != out.len() {
                return Err(ServiceError::Corrupt(format!(
                    "session {id}: event for game {} where {} was expected",
                    event.index,
                    out.len()
                )));
            }
            out.push(event);
        }
        Ok(out)
    }

    pub fn status(&self, id: &str) -> Result<SessionStatus> {
        let s = self.session(id)?;
        let cursor = self.answers(id)?.len();
        Ok(SessionStatus {
            session_id: s.id,
            participant: s.participant,
            config_id: s.config_id,
            seed: s.seed,
            total: s.games.len(),
            cursor,
            complete: cursor == s.games.len(),
        })
    }

    /// The game at `index`, provided every earlier game has been answered.
    pub fn game(&self, id: &str, index: usize) -> Result<(Session, SessionGame)> {
        let s = self.session(id)?;
        if index >= s.games.len() {
            return Err(ServiceError::NotFound(format!("game {index} of session {id}")));
        }
        let cursor = self.answers(id)?.len();
        if index > cursor {
            return Err(ServiceError::OutOfOrder { index, cursor });
        }
        let g = s.games[index].clone();
        Ok((s, g))
    }

    /// Records an answer durably, then acknowledges it. Re-submitting the answer
    /// already stored for a game is acknowledged again without a second record.
    pub fn submit(&self, id: &str, index: usize, photo_ref: &str) -> Result<Ack> {
        let lock = self.session_lock(id);
        let _guard = lock.lock().expect("session lock poisoned");
        let s = self.session(id)?;
        if index >= s.games.len() {
            return Err(ServiceError::NotFound(format!("game {index} of session {id}")));
        }
        let answers = self.answers(id)?;
        let cursor = answers.len();
        let ack = |cursor: usize, duplicate: bool| Ack {
            session_id: id.to_string(),
            index,
            cursor,
            complete: cursor == s.games.len(),
            duplicate,
        };
        if index < cursor {
            return if answers[index].photo_ref == photo_ref {
                Ok(ack(cursor, true))
            } else {
                Err(ServiceError::AlreadyAnswered { index })
            };
        }
        if index > cursor {
            return Err(ServiceError::OutOfOrder { index, cursor });
        }
        let slot = s.games[index]
            .photos
            .iter()
            .find(|p| p.photo_ref == photo_ref)
            .ok_or_else(|| ServiceError::ForeignPhoto(photo_ref.to_string()))?;
        let event = AnswerEvent {
            index,
            photo_ref: photo_ref.to_string(),
            image_id: slot.image_id,
            class: slot.class,
            unix_ms: now_ms(),
        };
        let dir = self.session_dir(id)?;
        {
            let mut f = OpenOptions::new().append(true).open(dir.join("events.jsonl"))?;
            let mut line = serde_json::to_vec(&event)?;
            line.push(b'\n');
            f.write_all(&line)?;
            f.sync_all()?;
        }
        if self.crash_after_persist.swap(false, Ordering::SeqCst) {
            return Err(ServiceError::SimulatedCrash);
        }
        let mut all = answers;
        all.push(event);
        if all.len() == s.games.len() {
            let summary = summarize(&s, &all)?;
            write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
        }
        Ok(ack(all.len(), false))
    }

    /// Summary of a completed session, from the compacted file when present and
    /// otherwise rebuilt from the answer log.
    pub fn summary(&self, id: &str) -> Result<SessionSummary> {
        let path = self.session_dir(id)?.join("summary.json");
        if let Ok(bytes) = std::fs::read(&path) {
            return Ok(serde_json::from_slice(&bytes)?);
        }
        let summary = self.replay_summary(id)?;
        write_atomic(&path, &serde_json::to_vec_pretty(&summary)?)?;
        Ok(summary)
    }

    /// Recomputes the summary from `session.json` and the answer log alone.
    pub fn replay_summary(&self, id: &str) -> Result<SessionSummary> {
        let s = self.session(id)?;
        summarize(&s, &self.answers(id)?)
    }

    /// Aggregate over every completed session for `config_id`.
    pub fn aggregate(&self, config_id: &str) -> Result<ConfigAggregate> {
        let mut summaries = Vec::new();
        for id in self.session_ids()? {
            let s = self.session(&id)?;
            if s.config_id != config_id {
                continue;
            }
            match self.summary(&id) {
                Ok(sum) => summaries.push(sum),
                Err(ServiceError::Incomplete { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(aggregate(config_id, &summaries))
    }
}
