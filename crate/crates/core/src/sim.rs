//! Headless operation: scripted six-day walks on the mock provider, cohort
//! seeding, outcome reports and transcript validation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Duration, TimeZone, Utc};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::plan::PlanEdits;
use crate::clock::{SequentialIds, StepClock};
use crate::instruments::{LsasItem, LsasResponse, SasAResponse, ScaleResponses, SocialAttitude, UclaResponse};
use crate::presence::SentimentClassifier;
use crate::protocol::{advance, agent_h_count, level_for_day, Phase, SessionState, TaskOutcome, DAYS};
use crate::provider::{MockProvider, ProviderScript, ScriptKey};
use crate::service::{outcome_report, ApiError, AuditRecord, Engine, PromptAudit};
use crate::store::{Author, Channel, ScaleTiming, Store, StoreError};

const CANONICAL_SCRIPT: &str = include_str!("../assets/canonical_script.json");
const CANONICAL_PROVIDER: &str = include_str!("../assets/canonical_provider.json");
const CANONICAL_PROVIDER_REF: &str = "canonical_provider.json";

/// Prefix that turns a scenario utterance into a help request.
pub const HELP_PREFIX: &str = "/help";
/// Overlap length used by the memory-isolation check.
pub const ISOLATION_WINDOW: usize = 20;
pub const PROMPTS_FILE: &str = "prompts.jsonl";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid script: {0}")]
    Script(String),
    #[error("cohort size must be at least 1")]
    EmptyCohort,
    #[error("{0} already contains sessions")]
    NotEmpty(String),
    #[error("no sessions in {0}")]
    NoSessions(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Api(#[from] ApiError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SimError + '_ {
    move |e| SimError::Io { path: path.display().to_string(), message: e.to_string() }
}

// ---------------------------------------------------------------------------
// Script

/// Provider replies, inline or as a path relative to the script file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProviderSource {
    Path(String),
    Inline(ProviderScript),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub outcome: TaskOutcome,
    #[serde(default)]
    pub summary: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    #[serde(default)]
    pub pre: Vec<ScaleResponses>,
    #[serde(default)]
    pub post: Vec<ScaleResponses>,
}

/// A scripted participant. Utterances are keyed like provider replies: the
/// participant line under a key is what was said just before the agent reply
/// with the same key. Debrief lines start at turn 1 because turn 0 answers
/// the task summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScript {
    pub pseudonym: String,
    pub provider: ProviderSource,
    pub participant: BTreeMap<String, String>,
    #[serde(default)]
    pub tasks: BTreeMap<u8, TaskPlan>,
    #[serde(default)]
    pub edits: BTreeMap<u8, PlanEdits>,
    #[serde(default)]
    pub scales: ScaleSet,
}

impl SimulationScript {
    /// The bundled six-day walk.
    pub fn canonical() -> Self {
        let mut s: Self = serde_json::from_str(CANONICAL_SCRIPT).expect("bundled script parses");
        s.provider = ProviderSource::Inline(ProviderScript::from_json(CANONICAL_PROVIDER).expect("bundled provider parses"));
        s
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Script(e.to_string()))
    }

    /// Reads a script and inlines a provider file given by path.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut s = Self::from_json(&text)?;
        if let ProviderSource::Path(p) = &s.provider {
            let full = path.parent().unwrap_or(Path::new(".")).join(p);
            let script = if !full.exists() && p == CANONICAL_PROVIDER_REF {
                ProviderScript::from_json(CANONICAL_PROVIDER)
            } else {
                let text = fs::read_to_string(&full).map_err(io_err(&full))?;
                ProviderScript::from_json(&text)
            }
            .map_err(|e| SimError::Script(e.to_string()))?;
            s.provider = ProviderSource::Inline(script);
        }
        Ok(s)
    }

    pub fn provider_script(&self) -> Result<ProviderScript, SimError> {
        match &self.provider {
            ProviderSource::Inline(s) => Ok(s.clone()),
            ProviderSource::Path(p) => Err(SimError::Script(format!("provider file {p} was not resolved"))),
        }
    }

    fn utterances(&self, kind: &str, day: u8, phase: Phase, from: u32) -> Vec<(u32, &str)> {
        (from..)
            .map(|t| (t, self.participant.get(&ScriptKey { kind: kind.into(), day, phase, turn: t }.to_string())))
            .take_while(|(_, u)| u.is_some())
            .map(|(t, u)| (t, u.map(String::as_str).unwrap_or_default()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Prompt log

/// Appends every prompt bundle to a JSONL file.
pub struct JsonlAudit {
    file: Mutex<File>,
}

impl JsonlAudit {
    pub fn create(path: &Path) -> Result<Self, SimError> {
        Ok(Self { file: Mutex::new(File::create(path).map_err(io_err(path))?) })
    }
}

impl PromptAudit for JsonlAudit {
    fn record(&self, rec: AuditRecord) {
        let mut line = serde_json::to_string(&rec).expect("audit record serializes");
        line.push('\n');
        if let Err(e) = self.file.lock().write_all(line.as_bytes()) {
            tracing::error!(error = %e, "cannot write prompt log");
        }
    }
}

pub fn read_prompt_log(path: &Path) -> Result<Vec<AuditRecord>, SimError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| SimError::Script(format!("{}: {e}", path.display()))))
        .collect()
}

// ---------------------------------------------------------------------------
// Driving the engine

fn deterministic_engine(store: Arc<Store>, script: &SimulationScript) -> Result<Engine, SimError> {
    let clock = StepClock::new(Utc.with_ymd_and_hms(2025, 1, 6, 9, 0, 0).unwrap(), Duration::seconds(1));
    Ok(Engine::new(store, Arc::new(MockProvider::new(script.provider_script()?)))
        .with_clock(Arc::new(clock))
        .with_ids(Arc::new(SequentialIds::new("s")))
        .with_sentiment(SentimentClassifier::lexicon_only()))
}

/// Where a scripted walk stopped, if it did not reach the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stall {
    pub session_id: Option<String>,
    pub message: String,
}

struct Walk<'a> {
    engine: &'a Engine,
    script: &'a SimulationScript,
    id: String,
}

impl Walk<'_> {
    fn at(&self, day: u8, phase: Phase) -> impl Fn(ApiError) -> String + '_ {
        move |e| format!("day {day} {phase}: {}: {}", e.code, e.message)
    }

    fn say_all(&self, day: u8, phase: Phase, from: u32, finish: bool) -> Result<Option<crate::service::TurnResult>, String> {
        let lines = self.script.utterances("therapist", day, phase, from);
        if lines.is_empty() {
            return Err(format!("stalled at {phase} on day {day}: no participant utterance"));
        }
        let mut last = None;
        for (i, (_, text)) in lines.iter().enumerate() {
            let fin = finish && i + 1 == lines.len();
            last = Some(self.engine.post_therapist_message(&self.id, text, fin, &mut |_| {}).map_err(self.at(day, phase))?);
        }
        Ok(last)
    }

    fn day(&self, day: u8) -> Result<(), String> {
        let at = |p| self.at(day, p);
        let mut issue = None;
        for (_, text) in self.script.utterances("therapist", day, Phase::Planning, 0) {
            let r = self.engine.post_therapist_message(&self.id, text, false, &mut |_| {}).map_err(at(Phase::Planning))?;
            if r.staged_plan.is_some() {
                issue = None;
            }
            if let Some(e) = r.plan_issue {
                issue = Some(e);
            }
        }
        let edits = self.script.edits.get(&day).cloned().unwrap_or_default();
        let confirmed = self.engine.confirm_plan(&self.id, &edits).map_err(|e| match &issue {
            Some(p) => format!("day {day} Planning: plan card rejected: {p:?} ({p})"),
            None => at(Phase::Planning)(e),
        })?;

        let slots = confirmed.channels.len();
        for turn in 0.. {
            let mut any = false;
            for slot in 0..slots {
                let key = ScriptKey::interlocutor(slot, day, turn).to_string();
                if let Some(text) = self.script.participant.get(&key) {
                    any = true;
                    let (help, text) = match text.strip_prefix(HELP_PREFIX) {
                        Some(rest) => (true, rest.trim()),
                        None => (false, text.as_str()),
                    };
                    self.engine
                        .post_scenario_message(&self.id, slot, text, help, &mut |_| {})
                        .map_err(at(Phase::Exposure))?;
                }
            }
            if !any {
                break;
            }
        }

        let task = self.script.tasks.get(&day).ok_or_else(|| format!("stalled at Exposure on day {day}: no task outcome"))?;
        self.engine.complete_task(&self.id, task.outcome, &task.summary, &mut |_| {}).map_err(at(Phase::Exposure))?;
        self.say_all(day, Phase::Debrief, 1, true)?;
        if day < DAYS {
            self.engine.close_day(&self.id).map_err(at(Phase::DayComplete))?;
        }
        Ok(())
    }

    fn run(&self) -> Result<(), String> {
        for r in &self.script.scales.pre {
            self.engine
                .submit_scale(&self.id, r.instrument(), ScaleTiming::Pre, r)
                .map_err(|e| format!("pre scales: {}: {}", e.code, e.message))?;
        }
        self.say_all(1, Phase::Assessment, 0, true)?;
        for day in 1..=DAYS {
            self.day(day)?;
        }
        for r in &self.script.scales.post {
            self.engine
                .submit_scale(&self.id, r.instrument(), ScaleTiming::Post, r)
                .map_err(|e| format!("post scales: {}: {}", e.code, e.message))?;
        }
        self.say_all(DAYS, Phase::FinalSummary, 0, true)?;
        Ok(())
    }
}

/// Walks one scripted participant through the programme.
pub fn drive(engine: &Engine, script: &SimulationScript) -> Result<String, Stall> {
    let id = engine
        .create_session(&script.pseudonym, true)
        .map_err(|e| Stall { session_id: None, message: format!("create session: {e}") })?
        .session_id;
    let walk = Walk { engine, script, id: id.clone() };
    walk.run().map_err(|message| Stall { session_id: Some(id.clone()), message })?;
    Ok(id)
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub checks: Vec<Check>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_violation: Option<String>,
}

impl ValidationReport {
    fn from_checks(checks: Vec<Check>) -> Self {
        let first_violation = checks.iter().find(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail));
        Self { ok: first_violation.is_none(), checks, first_violation }
    }

    pub fn exit_code(&self) -> i32 {
        if self.ok {
            0
        } else {
            1
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            if c.detail.is_empty() {
                out.push_str(&format!("{mark} {}\n", c.name));
            } else {
                out.push_str(&format!("{mark} {}: {}\n", c.name, c.detail));
            }
        }
        out
    }
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> Check {
    Check { name: name.into(), passed, detail: if passed { String::new() } else { detail.into() } }
}

/// Phases a complete programme visits, in order.
pub fn canonical_phase_order() -> Vec<Phase> {
    let mut v = vec![Phase::Assessment];
    for day in 1..=DAYS {
        v.extend([Phase::Planning, Phase::ScenarioSetup, Phase::Exposure, Phase::Debrief]);
        if day < DAYS {
            v.push(Phase::DayComplete);
        }
    }
    v.extend([Phase::FinalSummary, Phase::Closed]);
    v
}

fn windows(text: &str, n: usize) -> impl Iterator<Item = &str> {
    let idx: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
    (0..idx.len().saturating_sub(n)).map(move |i| &text[idx[i]..idx[i + n]])
}

/// Finds a window of `foreign` text that appears in a context message and
/// is not explained by something the participant typed.
fn leak<'a>(contexts: &[&str], foreign: &[&'a str], participant: &[&str]) -> Option<&'a str> {
    let mut seen = HashSet::new();
    for text in foreign {
        for w in windows(text, ISOLATION_WINDOW) {
            if !seen.insert(w) || participant.iter().any(|p| p.contains(w)) {
                continue;
            }
            if contexts.iter().any(|c| c.contains(w)) {
                return Some(w);
            }
        }
    }
    None
}

fn validate_session(store: &Store, id: &str, prompts: Option<&[AuditRecord]>) -> Result<Vec<Check>, SimError> {
    let stored = store.load_session(id)?;
    let name = |c: &str| format!("{}/{id} {c}", stored.meta.pseudonym);
    let mut checks = Vec::new();
    let s = &stored.snapshot;
    checks.push(check(&name("closed"), s.is_closed(), format!("final phase {} on day {}", s.phase, s.day)));
    let done: Vec<u8> = s.completed_days.iter().copied().collect();
    checks.push(check(&name("completed_days"), done == (1..=DAYS).collect::<Vec<_>>(), format!("{done:?}")));

    let mut state = SessionState::new(&stored.meta.session_id, &stored.meta.pseudonym, stored.meta.created_at);
    let mut phases = vec![state.phase];
    for r in &stored.events {
        state = advance(&state, &r.event).map_err(|e| SimError::Store(StoreError::Io(e.to_string())))?;
        if phases.last() != Some(&state.phase) {
            phases.push(state.phase);
        }
    }
    let expected = canonical_phase_order();
    let mismatch = phases.iter().zip(&expected).position(|(a, b)| a != b).or((phases.len() != expected.len()).then_some(phases.len().min(expected.len())));
    checks.push(check(
        &name("phase_order"),
        mismatch.is_none(),
        format!("diverges at step {} ({:?})", mismatch.unwrap_or(0), phases.get(mismatch.unwrap_or(0))),
    ));

    let plans = stored.confirmed_plans();
    let mut bad = Vec::new();
    for day in 1..=DAYS {
        let level = level_for_day(day).expect("day in range");
        match plans.iter().rev().find(|(d, _)| *d == day) {
            Some((_, c)) if c.level == level && c.roles.len() == agent_h_count(level) => {}
            Some((_, c)) => bad.push(format!("day {day}: {} card with {} role(s)", c.level, c.roles.len())),
            None => bad.push(format!("day {day}: no confirmed plan")),
        }
    }
    checks.push(check(&name("level_schedule"), bad.is_empty(), bad.join("; ")));

    let mut exposure_days = BTreeSet::new();
    let mut missing = Vec::new();
    let mut bare = 0usize;
    let mut scenario_texts: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut therapist_texts = Vec::new();
    let mut participant_texts = Vec::new();
    for channel in store.channels(id)? {
        let entries = store.transcript(id, &channel)?;
        for e in &entries {
            match &e.author {
                Author::Participant => participant_texts.push(e.text.clone()),
                Author::Agent { .. } => {
                    if e.expression.is_none() || e.sentiment.is_none() {
                        bare += 1;
                    }
                    match channel {
                        Channel::Therapist => therapist_texts.push(e.text.clone()),
                        Channel::Scenario { .. } => scenario_texts.entry(channel.to_string()).or_default().push(e.text.clone()),
                    }
                }
            }
        }
    }
    for day in 1..=DAYS {
        let n = agent_h_count(level_for_day(day).expect("day in range"));
        let mut all = true;
        for slot in 0..n {
            if !scenario_texts.contains_key(&Channel::Scenario { day, slot }.to_string()) {
                all = false;
                missing.push(format!("day{day}-slot{slot}"));
            }
        }
        if all {
            exposure_days.insert(day);
        }
    }
    checks.push(check(&name("exposure_transcripts"), missing.is_empty(), format!("missing {}", missing.join(", "))));
    checks.push(check(&name("presence"), bare == 0, format!("{bare} agent turn(s) without sentiment or expression")));

    if let Some(prompts) = prompts {
        let participant: Vec<&str> = participant_texts.iter().map(String::as_str).collect();
        let mut leaks = Vec::new();
        for rec in prompts.iter().filter(|r| r.session_id == id) {
            // a therapist bundle is checked whole; an interlocutor's system
            // text legitimately carries the therapist's plan card
            let mut ctx: Vec<&str> = rec.bundle.context.iter().map(|m| m.content.as_str()).collect();
            if rec.channel == Channel::Therapist {
                ctx.push(&rec.bundle.system_text);
            }
            let foreign: Vec<&str> = match &rec.channel {
                Channel::Therapist => scenario_texts.values().flatten().map(String::as_str).collect(),
                own @ Channel::Scenario { .. } => {
                    let own = own.to_string();
                    therapist_texts
                        .iter()
                        .chain(scenario_texts.iter().filter(|(k, _)| **k != own).flat_map(|(_, v)| v))
                        .map(String::as_str)
                        .collect()
                }
            };
            if let Some(w) = leak(&ctx, &foreign, &participant) {
                leaks.push(format!("{} prompt for {} contains {w:?}", rec.channel, rec.key));
            }
        }
        checks.push(check(&name("memory_isolation"), leaks.is_empty(), leaks.join("; ")));
    }
    Ok(checks)
}

/// Checks every session under a store root. Prompt logs are used for the
/// isolation check when present.
pub fn validate_store(store: &Store, prompts: Option<&[AuditRecord]>) -> Result<ValidationReport, SimError> {
    let sessions = store.list_sessions()?;
    if sessions.is_empty() {
        return Err(SimError::NoSessions(store.root().display().to_string()));
    }
    let mut checks = Vec::new();
    for meta in sessions {
        checks.extend(validate_session(store, &meta.session_id, prompts)?);
    }
    Ok(ValidationReport::from_checks(checks))
}

/// Validates a simulation output directory or a bare data directory.
pub fn validate(dir: &Path) -> Result<ValidationReport, SimError> {
    let data = if dir.join("data").join("sessions").is_dir() { dir.join("data") } else { dir.to_path_buf() };
    if !data.join("sessions").is_dir() {
        return Err(SimError::NoSessions(dir.display().to_string()));
    }
    let prompts = [dir.join(PROMPTS_FILE), data.join(PROMPTS_FILE)].into_iter().find(|p| p.is_file());
    let prompts = prompts.map(|p| read_prompt_log(&p)).transpose()?;
    validate_store(&Store::open(data)?, prompts.as_deref())
}

// ---------------------------------------------------------------------------
// Entry points

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutcome {
    pub session_id: Option<String>,
    pub report: ValidationReport,
}

fn write_pretty(path: &Path, value: &impl Serialize) -> Result<(), SimError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Runs one scripted participant into `out_dir`, writing `data/`,
/// `prompts.jsonl`, `final_state.json` and `validation.json`.
pub fn run_simulation(script: &SimulationScript, out_dir: &Path) -> Result<SimulationOutcome, SimError> {
    let data = out_dir.join("data");
    if data.exists() {
        return Err(SimError::NotEmpty(data.display().to_string()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let store = Arc::new(Store::open(&data)?);
    let audit = Arc::new(JsonlAudit::create(&out_dir.join(PROMPTS_FILE))?);
    let engine = deterministic_engine(store.clone(), script)?.with_audit(audit);
    let driven = drive(&engine, script);
    let session_id = match &driven {
        Ok(id) => Some(id.clone()),
        Err(s) => s.session_id.clone(),
    };
    if let Some(id) = &session_id {
        write_pretty(&out_dir.join("final_state.json"), &engine.get_session(id)?.state)?;
    }
    let prompts = read_prompt_log(&out_dir.join(PROMPTS_FILE))?;
    let mut checks = vec![match &driven {
        Ok(_) => check("walk", true, ""),
        Err(s) => check("walk", false, s.message.clone()),
    }];
    if session_id.is_some() {
        checks.extend(validate_store(&store, Some(&prompts))?.checks);
    }
    let report = ValidationReport::from_checks(checks);
    write_pretty(&out_dir.join("validation.json"), &report)?;
    Ok(SimulationOutcome { session_id, report })
}

pub fn run_simulation_file(script: &Path, out_dir: &Path) -> Result<SimulationOutcome, SimError> {
    run_simulation(&SimulationScript::load(script)?, out_dir)
}

fn clamp_down(rng: &mut ChaCha8Rng, v: u8, min: u8, max_drop: u8) -> u8 {
    v.saturating_sub(rng.random_range(0..=max_drop)).max(min)
}

/// Seeded pre/post responses; post values drift down from pre.
pub fn seeded_scales(rng: &mut ChaCha8Rng) -> ScaleSet {
    let sas_pre: Vec<u8> = (0..18).map(|_| rng.random_range(2..=5)).collect();
    let ucla_pre: Vec<u8> = (0..20).map(|_| rng.random_range(1..=4)).collect();
    let sas_post = sas_pre.iter().map(|&v| clamp_down(rng, v, 1, 1)).collect();
    let ucla_post = ucla_pre.iter().map(|&v| if rng.random_bool(0.3) { v.saturating_sub(1).max(1) } else { v }).collect();
    let att = SocialAttitude { contravene: rng.random_range(4..=7), fear: rng.random_range(3..=7), isolation: rng.random_range(2..=7) };
    let att_post = SocialAttitude {
        contravene: clamp_down(rng, att.contravene, 1, 2),
        fear: clamp_down(rng, att.fear, 1, 2),
        isolation: clamp_down(rng, att.isolation, 1, 3),
    };
    let lsas = LsasResponse {
        items: (0..24).map(|_| LsasItem { fear: rng.random_range(0..=3), avoidance: rng.random_range(0..=3) }).collect(),
    };
    ScaleSet {
        pre: vec![
            ScaleResponses::Lsas(lsas),
            ScaleResponses::SasA(SasAResponse { items: sas_pre }),
            ScaleResponses::Ucla(UclaResponse { items: ucla_pre, reverse_set: BTreeSet::new() }),
            ScaleResponses::SocialAttitude(att),
        ],
        post: vec![
            ScaleResponses::SasA(SasAResponse { items: sas_post }),
            ScaleResponses::Ucla(UclaResponse { items: ucla_post, reverse_set: BTreeSet::new() }),
            ScaleResponses::SocialAttitude(att_post),
        ],
    }
}

/// Populates an empty data directory with `n` simulated participants
/// (`P01`, `P02`, ...) who each complete the canonical walk.
pub fn seed_cohort(data_dir: &Path, n: usize, seed: u64) -> Result<Vec<String>, SimError> {
    if n < 1 {
        return Err(SimError::EmptyCohort);
    }
    let store = Arc::new(Store::open(data_dir)?);
    if !store.list_sessions()?.is_empty() {
        return Err(SimError::NotEmpty(data_dir.display().to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = SimulationScript::canonical();
    let engine = deterministic_engine(store, &base)?;
    let mut ids = Vec::with_capacity(n);
    for i in 1..=n {
        let script = SimulationScript { pseudonym: format!("P{i:02}"), scales: seeded_scales(&mut rng), ..base.clone() };
        let id = drive(&engine, &script).map_err(|s| SimError::Script(s.message))?;
        ids.push(id);
    }
    Ok(ids)
}

/// The outcome table for a data directory, as printed by the CLI and served
/// as text by the API.
pub fn report(data_dir: &Path) -> Result<String, SimError> {
    if !data_dir.join("sessions").is_dir() {
        return Err(SimError::NoSessions(data_dir.display().to_string()));
    }
    let store = Store::open(data_dir)?;
    if store.list_sessions()?.is_empty() {
        return Err(SimError::NoSessions(data_dir.display().to_string()));
    }
    Ok(outcome_report(&store)?.render_table())
}

pub fn default_out_dir() -> PathBuf {
    PathBuf::from("sim-out")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_script_covers_the_walk() {
        let s = SimulationScript::canonical();
        let p = serde_json::to_value(s.provider_script().unwrap()).unwrap();
        // every participant line has a scripted reply under the same key
        for k in s.participant.keys() {
            assert!(p.get(k).is_some(), "{k}");
        }
        assert_eq!(s.tasks.len(), 6);
    }

    #[test]
    fn canonical_run_passes_validation() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_simulation(&SimulationScript::canonical(), dir.path()).unwrap();
        assert!(out.report.ok, "{}", out.report.render());
        assert!(out.report.checks.iter().any(|c| c.name.ends_with("memory_isolation")));
        for f in ["final_state.json", "validation.json", "prompts.jsonl"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let again = validate(dir.path()).unwrap();
        assert!(again.ok);
    }

    #[test]
    fn single_role_high_card_is_reported() {
        let mut s = SimulationScript::canonical();
        let ProviderSource::Inline(p) = &mut s.provider else { unreachable!() };
        p.insert(
            &ScriptKey::therapist(5, Phase::Planning, 1),
            "Interaction Role:\nGender: male\nYou are a club leader named Chen.\n\nExposure Scenario:\nA party.\n\nYour Task:\nSay hello.\n",
        );
        let dir = tempfile::tempdir().unwrap();
        let out = run_simulation(&s, dir.path()).unwrap();
        assert_eq!(out.report.exit_code(), 1);
        let v = out.report.first_violation.unwrap();
        assert!(v.contains("RoleCountMismatch"), "{v}");
        assert!(v.contains("day 5"), "{v}");
    }

    #[test]
    fn missing_debrief_line_stalls() {
        let mut s = SimulationScript::canonical();
        s.participant.remove("therapist/2/Debrief/1");
        let dir = tempfile::tempdir().unwrap();
        let out = run_simulation(&s, dir.path()).unwrap();
        assert!(!out.report.ok);
        assert_eq!(out.report.first_violation.as_deref(), Some("walk: stalled at Debrief on day 2: no participant utterance"));
        let state: SessionState = serde_json::from_str(&fs::read_to_string(dir.path().join("final_state.json")).unwrap()).unwrap();
        assert_eq!((state.day, state.phase), (2, Phase::Debrief));
    }

    #[test]
    fn isolation_detects_a_leak() {
        let ctx = ["You said: the notebooks are on the second shelf, near the pens."];
        let foreign = ["Notebooks are on the second shelf, near the pens."];
        assert!(leak(&ctx, &foreign, &[]).is_some());
        // a participant quoting the interlocutor is allowed to carry it over
        assert!(leak(&ctx, &foreign, &["they said notebooks are on the second shelf, near the pens."]).is_none());
        assert!(leak(&["nothing shared"], &foreign, &[]).is_none());
    }

    #[test]
    fn windows_respect_char_boundaries() {
        let w: Vec<&str> = windows("ab’cd", 3).collect();
        assert_eq!(w, ["ab’", "b’c", "’cd"]);
        assert_eq!(windows("ab", 3).count(), 0);
    }

    #[test]
    fn seeding_and_report() {
        let a = tempfile::tempdir().unwrap();
        assert!(matches!(seed_cohort(a.path(), 0, 1), Err(SimError::EmptyCohort)));
        let ids = seed_cohort(a.path(), 3, 42).unwrap();
        assert_eq!(ids.len(), 3);
        let table = report(a.path()).unwrap();
        assert_eq!(table.lines().filter(|l| l.starts_with(['S', 'U', 'C', 'F', 'I'])).count(), 5, "{table}");
        assert!(matches!(seed_cohort(a.path(), 1, 1), Err(SimError::NotEmpty(_))));

        let one = tempfile::tempdir().unwrap();
        seed_cohort(one.path(), 1, 7).unwrap();
        assert!(matches!(report(one.path()), Err(SimError::Api(e)) if e.code == "insufficient_cohort"));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(report(empty.path()), Err(SimError::NoSessions(_))));
    }
}
