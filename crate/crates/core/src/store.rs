//! File-backed persistence, one directory per session:
//!
//! ```text
//! <root>/sessions/<id>/session.json        meta: pseudonym, opt-in, created_at
//! <root>/sessions/<id>/snapshot.json       current SessionState
//! <root>/sessions/<id>/events.jsonl        {"seq","at","event"} per line
//! <root>/sessions/<id>/scales.jsonl        scale submissions
//! <root>/sessions/<id>/staged_plan.json    card awaiting confirmation
//! <root>/sessions/<id>/transcripts/therapist.jsonl
//! <root>/sessions/<id>/transcripts/day<d>-slot<s>.jsonl
//! ```
//!
//! The event log is the source of truth; the snapshot is checked against a
//! replay on every load.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{ArcMutexGuard, Mutex, RawMutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::plan::ExposurePlanCard;
use crate::instruments::{Instrument, ScaleResponses, ScaleScore};
use crate::presence::{AudioRef, ExpressionState, Sentiment};
use crate::protocol::{advance, Phase, ProtocolError, SessionEvent, SessionState};
use crate::stats::{Measure, PairedSample, StatsError};

pub const ENV_DATA_DIR: &str = "VCHATTER_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Channel {
    Therapist,
    Scenario { day: u8, slot: usize },
}

impl Channel {
    fn file_name(&self) -> String {
        match self {
            Channel::Therapist => "therapist.jsonl".into(),
            Channel::Scenario { day, slot } => format!("day{day}-slot{slot}.jsonl"),
        }
    }

    fn from_file_name(name: &str) -> Option<Self> {
        if name == "therapist.jsonl" {
            return Some(Channel::Therapist);
        }
        let (d, s) = name.strip_prefix("day")?.strip_suffix(".jsonl")?.split_once("-slot")?;
        Some(Channel::Scenario { day: d.parse().ok()?, slot: s.parse().ok()? })
    }

    /// Phases in which the therapist channel accepts turns.
    pub const THERAPIST_PHASES: [Phase; 4] =
        [Phase::Assessment, Phase::Planning, Phase::Debrief, Phase::FinalSummary];

    pub fn accepts(&self, state: &SessionState) -> bool {
        match self {
            Channel::Therapist => Self::THERAPIST_PHASES.contains(&state.phase),
            Channel::Scenario { day, slot } => {
                state.phase == Phase::Exposure && *day == state.day && *slot < state.agent_h_count()
            }
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::Therapist => f.write_str("therapist"),
            Channel::Scenario { day, slot } => write!(f, "day{day}-slot{slot}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Author {
    Participant,
    Agent { profile_ref: String },
}

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    /// Per-channel sequence number starting at 1.
    pub seq: u64,
    pub channel: Channel,
    pub author: Author,
    pub day: u8,
    pub phase: Phase,
    pub text: String,
    pub sentiment: Option<Sentiment>,
    pub expression: Option<ExpressionState>,
    pub audio: Option<AudioRef>,
    /// Set on participant turns that asked for help and on the hint replies.
    #[serde(default)]
    pub hint: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub pseudonym: String,
    pub opt_in: bool,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub event: SessionEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleTiming {
    Pre,
    Post,
}

impl ScaleTiming {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pre" => Some(ScaleTiming::Pre),
            "post" => Some(ScaleTiming::Post),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub instrument: Instrument,
    pub timing: ScaleTiming,
    pub responses: ScaleResponses,
    pub score: ScaleScore,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSession {
    pub meta: SessionMeta,
    pub snapshot: SessionState,
    pub events: Vec<EventRecord>,
    pub scales: Vec<ScaleRecord>,
}

impl StoredSession {
    /// Latest submission for an instrument and timing.
    pub fn scale(&self, instrument: Instrument, timing: ScaleTiming) -> Option<&ScaleRecord> {
        self.scales
            .iter()
            .rev()
            .find(|r| r.instrument == instrument && r.timing == timing)
    }

    /// Confirmed plans in order, with the day each was confirmed on.
    pub fn confirmed_plans(&self) -> Vec<(u8, ExposurePlanCard)> {
        let mut state = SessionState::new(&self.meta.session_id, &self.meta.pseudonym, self.meta.created_at);
        let mut out = Vec::new();
        for r in &self.events {
            if let SessionEvent::PlanConfirmed { plan } = &r.event {
                out.push((state.day, plan.clone()));
            }
            if let Ok(next) = advance(&state, &r.event) {
                state = next;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub pseudonym: String,
    pub session_id: String,
    pub pre: BTreeMap<Measure, f64>,
    pub post: BTreeMap<Measure, f64>,
}

/// Outcome measures carried by a scale score. LSAS is a screening scale
/// and feeds none.
pub fn measures_of(score: &ScaleScore) -> Vec<(Measure, f64)> {
    match score {
        ScaleScore::Lsas(_) => vec![],
        ScaleScore::SasA { total } => vec![(Measure::SasA, f64::from(*total))],
        ScaleScore::Ucla { total } => vec![(Measure::Ucla, f64::from(*total))],
        ScaleScore::SocialAttitude(s) => vec![
            (Measure::Contravene, f64::from(s.contravene)),
            (Measure::Fear, f64::from(s.fear)),
            (Measure::Isolation, f64::from(s.isolation)),
        ],
    }
}

/// Pre/post samples per measure, in record order.
pub fn paired_samples(
    records: &[CohortRecord],
    measures: &[Measure],
) -> Result<BTreeMap<Measure, PairedSample>, StatsError> {
    measures
        .iter()
        .map(|&m| {
            let pre = records.iter().map(|r| r.pre.get(&m).copied().ok_or(StatsError::MissingMeasure(m))).collect::<Result<_, _>>()?;
            let post = records.iter().map(|r| r.post.get(&m).copied().ok_or(StatsError::MissingMeasure(m))).collect::<Result<_, _>>()?;
            Ok((m, PairedSample::new(pre, post)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("session {session}: corrupt event log: {detail}")]
    CorruptLog { session: String, detail: String },
    #[error("channel {channel} is not open on day {day} in phase {phase}")]
    ChannelMismatch { channel: Channel, day: u8, phase: Phase },
    #[error("session is closed")]
    SessionClosed,
    #[error("session {0} is busy with another request")]
    Busy(String),
    #[error("pseudonym must be 1-64 characters of A-Z, a-z, 0-9, '_' or '-'")]
    InvalidPseudonym(String),
    #[error("invalid session id {0:?}")]
    InvalidId(String),
    #[error("session {0} already exists")]
    AlreadyExists(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("storage I/O: {0}")]
    Io(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> StoreError + '_ {
    move |e| StoreError::Io(format!("{}: {e}", path.display()))
}

fn valid_token(s: &str) -> bool {
    (1..=64).contains(&s.len()) && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

pub fn validate_pseudonym(p: &str) -> Result<(), StoreError> {
    if valid_token(p) {
        Ok(())
    } else {
        Err(StoreError::InvalidPseudonym(p.to_string()))
    }
}

/// Guard that serialises mutations of one session.
pub type SessionGuard = ArcMutexGuard<RawMutex, ()>;

pub struct Store {
    root: PathBuf,
    guards: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    io: Mutex<HashMap<String, Arc<RwLock<()>>>>,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish()
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let sessions = root.join("sessions");
        fs::create_dir_all(&sessions).map_err(io_err(&sessions))?;
        Ok(Self { root, guards: Mutex::new(HashMap::new()), io: Mutex::new(HashMap::new()) })
    }

    pub fn from_env() -> Result<Self, StoreError> {
        let dir = std::env::var(ENV_DATA_DIR).unwrap_or_else(|_| "vchatter-data".into());
        Self::open(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Exclusive right to mutate `id`. A second caller gets `Busy` instead of
    /// waiting.
    pub fn try_guard(&self, id: &str) -> Result<SessionGuard, StoreError> {
        let m = self.guards.lock().entry(id.to_string()).or_default().clone();
        m.try_lock_arc().ok_or_else(|| StoreError::Busy(id.to_string()))
    }

    fn io_lock(&self, id: &str) -> Arc<RwLock<()>> {
        self.io.lock().entry(id.to_string()).or_default().clone()
    }

    fn dir(&self, id: &str) -> Result<PathBuf, StoreError> {
        if !valid_token(id) {
            return Err(StoreError::InvalidId(id.to_string()));
        }
        Ok(self.root.join("sessions").join(id))
    }

    fn existing_dir(&self, id: &str) -> Result<PathBuf, StoreError> {
        let d = self.dir(id)?;
        if d.join("session.json").is_file() {
            Ok(d)
        } else {
            Err(StoreError::NotFound(id.to_string()))
        }
    }

    pub fn exists(&self, id: &str) -> bool {
        self.existing_dir(id).is_ok()
    }

    pub fn create_session(&self, meta: &SessionMeta) -> Result<SessionState, StoreError> {
        validate_pseudonym(&meta.pseudonym)?;
        let dir = self.dir(&meta.session_id)?;
        let lock = self.io_lock(&meta.session_id);
        let _w = lock.write();
        if dir.exists() {
            return Err(StoreError::AlreadyExists(meta.session_id.clone()));
        }
        fs::create_dir_all(dir.join("transcripts")).map_err(io_err(&dir))?;
        let state = SessionState::new(&meta.session_id, &meta.pseudonym, meta.created_at);
        write_json_atomic(&dir.join("snapshot.json"), &state)?;
        touch(&dir.join("events.jsonl"))?;
        touch(&dir.join("scales.jsonl"))?;
        // meta last: its presence marks the session as complete
        write_json_atomic(&dir.join("session.json"), meta)?;
        tracing::info!(session = %meta.session_id, "session created");
        Ok(state)
    }

    pub fn meta(&self, id: &str) -> Result<SessionMeta, StoreError> {
        let dir = self.existing_dir(id)?;
        read_json(&dir.join("session.json"))
    }

    /// Loads a session and verifies that replaying its event log reproduces
    /// the stored snapshot.
    pub fn load_session(&self, id: &str) -> Result<StoredSession, StoreError> {
        let dir = self.existing_dir(id)?;
        let lock = self.io_lock(id);
        let _r = lock.read();
        let meta: SessionMeta = read_json(&dir.join("session.json"))?;
        let corrupt = |detail: String| StoreError::CorruptLog { session: id.to_string(), detail };
        let snapshot: SessionState =
            read_json(&dir.join("snapshot.json")).map_err(|e| corrupt(format!("snapshot: {e}")))?;
        let events: Vec<EventRecord> =
            read_jsonl(&dir.join("events.jsonl")).map_err(|e| corrupt(e.to_string()))?;
        let replayed = replay(&meta, &events).map_err(corrupt)?;
        if replayed != snapshot {
            return Err(corrupt(format!(
                "replay of {} event(s) ends at day {} {} but snapshot is day {} {}",
                events.len(),
                replayed.day,
                replayed.phase,
                snapshot.day,
                snapshot.phase
            )));
        }
        let scales = read_jsonl(&dir.join("scales.jsonl"))?;
        Ok(StoredSession { meta, snapshot, events, scales })
    }

    pub fn snapshot(&self, id: &str) -> Result<SessionState, StoreError> {
        Ok(self.load_session(id)?.snapshot)
    }

    /// Applies `event`, appends it to the log and rewrites the snapshot.
    pub fn apply_event(&self, id: &str, event: SessionEvent, at: DateTime<Utc>) -> Result<SessionState, StoreError> {
        let stored = self.load_session(id)?;
        let dir = self.existing_dir(id)?;
        let lock = self.io_lock(id);
        let _w = lock.write();
        let mut next = advance(&stored.snapshot, &event)?;
        next.updated_at = at;
        let rec = EventRecord { seq: stored.events.len() as u64 + 1, at, event };
        append_jsonl(&dir.join("events.jsonl"), &rec)?;
        write_json_atomic(&dir.join("snapshot.json"), &next)?;
        tracing::debug!(session = id, seq = rec.seq, event = %rec.event.kind(), phase = %next.phase, "event applied");
        Ok(next)
    }

    /// Appends a turn after checking the channel is open, assigning the next
    /// per-channel sequence number. Durable before returning.
    pub fn append_turn(&self, id: &str, mut entry: TranscriptEntry) -> Result<TranscriptEntry, StoreError> {
        let state = self.snapshot(id)?;
        if state.is_closed() {
            return Err(StoreError::SessionClosed);
        }
        if !entry.channel.accepts(&state) {
            return Err(StoreError::ChannelMismatch { channel: entry.channel.clone(), day: state.day, phase: state.phase });
        }
        let dir = self.existing_dir(id)?;
        let lock = self.io_lock(id);
        let _w = lock.write();
        let path = dir.join("transcripts").join(entry.channel.file_name());
        entry.seq = count_lines(&path)? + 1;
        append_jsonl(&path, &entry)?;
        Ok(entry)
    }

    pub fn transcript(&self, id: &str, channel: &Channel) -> Result<Vec<TranscriptEntry>, StoreError> {
        let dir = self.existing_dir(id)?;
        let lock = self.io_lock(id);
        let _r = lock.read();
        read_jsonl(&dir.join("transcripts").join(channel.file_name()))
    }

    pub fn channels(&self, id: &str) -> Result<Vec<Channel>, StoreError> {
        let dir = self.existing_dir(id)?.join("transcripts");
        let mut out: Vec<Channel> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| Channel::from_file_name(&e.file_name().to_string_lossy()))
            .collect();
        out.sort();
        Ok(out)
    }

    pub fn stage_plan(&self, id: &str, card: Option<&ExposurePlanCard>) -> Result<(), StoreError> {
        let path = self.existing_dir(id)?.join("staged_plan.json");
        match card {
            Some(c) => write_json_atomic(&path, c),
            None => match fs::remove_file(&path) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io_err(&path)(e)),
                _ => Ok(()),
            },
        }
    }

    pub fn staged_plan(&self, id: &str) -> Result<Option<ExposurePlanCard>, StoreError> {
        let path = self.existing_dir(id)?.join("staged_plan.json");
        if path.is_file() {
            read_json(&path).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn append_scale(&self, id: &str, record: &ScaleRecord) -> Result<(), StoreError> {
        let dir = self.existing_dir(id)?;
        let lock = self.io_lock(id);
        let _w = lock.write();
        append_jsonl(&dir.join("scales.jsonl"), record)
    }

    /// All sessions, ordered by pseudonym then session id.
    pub fn list_sessions(&self) -> Result<Vec<SessionMeta>, StoreError> {
        let dir = self.root.join("sessions");
        let mut out = Vec::new();
        for e in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let e = e.map_err(io_err(&dir))?;
            let meta = e.path().join("session.json");
            if meta.is_file() {
                out.push(read_json::<SessionMeta>(&meta)?);
            }
        }
        out.sort_by(|a, b| (&a.pseudonym, &a.session_id).cmp(&(&b.pseudonym, &b.session_id)));
        Ok(out)
    }

    /// Participants with both a pre and a post value for every requested
    /// measure, ordered by pseudonym then session id.
    pub fn export_cohort(&self, measures: &[Measure]) -> Result<Vec<CohortRecord>, StoreError> {
        let mut out = Vec::new();
        for meta in self.list_sessions()? {
            let scales: Vec<ScaleRecord> = read_jsonl(&self.dir(&meta.session_id)?.join("scales.jsonl"))?;
            let collect = |timing| {
                let mut m = BTreeMap::new();
                for r in scales.iter().filter(|r| r.timing == timing) {
                    m.extend(measures_of(&r.score));
                }
                m
            };
            let pre = collect(ScaleTiming::Pre);
            let post = collect(ScaleTiming::Post);
            if measures.iter().all(|m| pre.contains_key(m) && post.contains_key(m)) {
                let keep = |mut m: BTreeMap<Measure, f64>| {
                    m.retain(|k, _| measures.contains(k));
                    m
                };
                out.push(CohortRecord { pseudonym: meta.pseudonym, session_id: meta.session_id, pre: keep(pre), post: keep(post) });
            }
        }
        Ok(out)
    }
}

/// Folds the event log from a fresh session.
pub fn replay(meta: &SessionMeta, events: &[EventRecord]) -> Result<SessionState, String> {
    let mut state = SessionState::new(&meta.session_id, &meta.pseudonym, meta.created_at);
    for (i, r) in events.iter().enumerate() {
        if r.seq != i as u64 + 1 {
            return Err(format!("event {} has seq {}", i + 1, r.seq));
        }
        state = advance(&state, &r.event).map_err(|e| format!("event {}: {e}", r.seq))?;
        state.updated_at = r.at;
    }
    Ok(state)
}

fn touch(path: &Path) -> Result<(), StoreError> {
    File::create(path).map(|_| ()).map_err(io_err(path))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let tmp = path.with_extension("json.tmp");
    let mut text = serde_json::to_string_pretty(value).map_err(|e| StoreError::Io(e.to_string()))?;
    text.push('\n');
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(text.as_bytes()).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Io(format!("{}: {e}", path.display())))
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_string(value).map_err(|e| StoreError::Io(e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    f.write_all(line.as_bytes()).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| StoreError::Io(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn count_lines(path: &Path) -> Result<u64, StoreError> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f).lines().filter(|l| l.as_ref().is_ok_and(|l| !l.trim().is_empty())).count() as u64),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(io_err(path)(e)),
    }
}
