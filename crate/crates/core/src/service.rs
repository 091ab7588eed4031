//! The engine behind the HTTP API: session lifecycle, chat with both agent
//! kinds, plan confirmation, scale submission and outcome reporting.
//!
//! Every mutating call takes the session's guard first, so a second
//! concurrent mutation of the same session fails fast with `busy`.
//! Participant turns are persisted before the provider is called; a failed
//! completion leaves the participant's message on record.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use chrono::Duration;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::agents::plan::{
    apply_user_edits, looks_like_plan_card, parse_plan_card, validate_card, validate_level_pair,
    ExposurePlanCard, PlanCardError, PlanEditError, PlanEdits, PlanViolation,
};
use crate::agents::template::{TemplateError, TemplateStore};
use crate::agents::{
    build_agent_h_prompt, build_agent_p_prompt, build_debrief_prompt, build_hint_prompt,
    debrief_opening, AgentError, AgentProfile, PromptBundle, TherapistContext,
};
use crate::clock::{Clock, IdSource, RandomIds, SystemClock};
use crate::instruments::{Instrument, InstrumentCatalog, InstrumentError, ScaleResponses, ScaleScore};
use crate::presence::{voice_for, ExpressionTable, NullSynthesizer, SentimentClassifier, SynthesisError, Synthesizer};
use crate::protocol::{Phase, ProtocolConfig, ProtocolError, SessionEvent, SessionState, TaskOutcome};
use crate::provider::{ChatMessage, ChatProvider, CompletionParams, CompletionRequest, ProviderError, ScriptKey, StreamChunk};
use crate::stats::{build_outcome_report, Measure, OutcomeReport, StatsError};
use crate::store::{
    paired_samples, validate_pseudonym, Author, Channel, ScaleRecord, ScaleTiming, SessionMeta, Store, StoreError,
    TranscriptEntry,
};

/// A persisted chat message as delivered to clients.
pub type MessageEnvelope = TranscriptEntry;

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub retryable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

impl fmt::Display for ApiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

/// Stable error codes with their HTTP status.
pub const ERROR_CODES: &[(&str, u16)] = &[
    ("validation_error", 400),
    ("not_found", 404),
    ("wrong_phase", 409),
    ("illegal_transition", 409),
    ("session_closed", 409),
    ("slot_out_of_range", 409),
    ("no_staged_plan", 409),
    ("timing_violation", 409),
    ("too_early", 409),
    ("busy", 409),
    ("insufficient_cohort", 409),
    ("plan_violation", 422),
    ("plan_card_invalid", 422),
    ("plan_edit_invalid", 422),
    ("instrument_invalid", 422),
    ("stats_error", 422),
    ("provider_timeout", 504),
    ("provider_rate_limited", 429),
    ("provider_malformed", 502),
    ("provider_auth", 502),
    ("provider_unavailable", 503),
    ("provider_precondition", 500),
    ("synthesis_failed", 500),
    ("template_error", 500),
    ("corrupt_log", 500),
    ("storage_error", 500),
];

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        debug_assert!(ERROR_CODES.iter().any(|(c, _)| *c == code), "undocumented code {code}");
        Self { code: code.into(), message: message.into(), retryable: false, details: None }
    }

    fn retryable(mut self) -> Self {
        self.retryable = true;
        self
    }

    fn with_details(mut self, d: impl Serialize) -> Self {
        self.details = serde_json::to_value(d).ok();
        self
    }

    pub fn http_status(&self) -> u16 {
        ERROR_CODES.iter().find(|(c, _)| *c == self.code).map_or(500, |(_, s)| *s)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new("validation_error", message)
    }

    pub fn wrong_phase(phase: Phase, allowed: &[Phase]) -> Self {
        let allowed: Vec<&str> = allowed.iter().map(|p| p.name()).collect();
        Self::new("wrong_phase", format!("not allowed in phase {phase}; allowed in {}", allowed.join(", ")))
            .with_details(serde_json::json!({ "phase": phase, "allowed": allowed }))
    }
}

impl From<ProtocolError> for ApiError {
    fn from(e: ProtocolError) -> Self {
        let code = match &e {
            ProtocolError::DayOutOfRange(_) => "validation_error",
            ProtocolError::IllegalTransition { .. } => "illegal_transition",
            ProtocolError::SessionClosed => "session_closed",
            ProtocolError::PlanLevelMismatch { .. } | ProtocolError::PlanRoleCount { .. } => "plan_violation",
            ProtocolError::NoActivePlan => "no_staged_plan",
            ProtocolError::SlotOutOfRange { .. } => "slot_out_of_range",
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::new("not_found", e.to_string()),
            StoreError::CorruptLog { .. } => ApiError::new("corrupt_log", e.to_string()),
            StoreError::ChannelMismatch { .. } => ApiError::new("wrong_phase", e.to_string()),
            StoreError::SessionClosed => ApiError::new("session_closed", e.to_string()),
            StoreError::Busy(_) => ApiError::new("busy", e.to_string()).retryable(),
            StoreError::InvalidPseudonym(_) | StoreError::InvalidId(_) => ApiError::validation(e.to_string()),
            StoreError::AlreadyExists(_) => ApiError::new("storage_error", e.to_string()),
            StoreError::Protocol(p) => p.into(),
            StoreError::Io(_) => ApiError::new("storage_error", e.to_string()),
        }
    }
}

impl From<ProviderError> for ApiError {
    fn from(e: ProviderError) -> Self {
        let code = match &e {
            ProviderError::Timeout => "provider_timeout",
            ProviderError::RateLimited { .. } => "provider_rate_limited",
            ProviderError::MalformedResponse(_) => "provider_malformed",
            ProviderError::AuthFailed => "provider_auth",
            ProviderError::Precondition(_) => "provider_precondition",
            ProviderError::Unavailable(_) => "provider_unavailable",
        };
        let mut a = ApiError::new(code, e.to_string()).with_details(&e);
        a.retryable = e.is_retryable();
        a
    }
}

impl From<TemplateError> for ApiError {
    fn from(e: TemplateError) -> Self {
        ApiError::new("template_error", e.to_string())
    }
}

impl From<AgentError> for ApiError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::SessionClosed => ApiError::new("session_closed", e.to_string()),
            AgentError::WrongPhase(_) => ApiError::new("wrong_phase", e.to_string()),
            AgentError::SlotOutOfRange { .. } => ApiError::new("slot_out_of_range", e.to_string()),
            AgentError::Template(t) => t.into(),
        }
    }
}

impl From<PlanCardError> for ApiError {
    fn from(e: PlanCardError) -> Self {
        ApiError::new("plan_card_invalid", e.to_string()).with_details(&e)
    }
}

impl From<PlanEditError> for ApiError {
    fn from(e: PlanEditError) -> Self {
        ApiError::new("plan_edit_invalid", e.to_string()).with_details(&e)
    }
}

impl From<InstrumentError> for ApiError {
    fn from(e: InstrumentError) -> Self {
        ApiError::new("instrument_invalid", e.to_string())
    }
}

impl From<StatsError> for ApiError {
    fn from(e: StatsError) -> Self {
        ApiError::new("stats_error", e.to_string())
    }
}

impl From<SynthesisError> for ApiError {
    fn from(e: SynthesisError) -> Self {
        ApiError::new("synthesis_failed", e.to_string())
    }
}

fn plan_violations(v: &[PlanViolation]) -> ApiError {
    let text: Vec<String> = v.iter().map(ToString::to_string).collect();
    ApiError::new("plan_violation", text.join("; ")).with_details(v)
}

// ---------------------------------------------------------------------------
// Prompt audit

/// Every prompt bundle sent to the provider, for offline isolation checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub session_id: String,
    pub channel: Channel,
    pub key: ScriptKey,
    pub bundle: PromptBundle,
}

pub trait PromptAudit: Send + Sync {
    fn record(&self, rec: AuditRecord);
}

#[derive(Debug, Default)]
pub struct MemoryAudit(Mutex<Vec<AuditRecord>>);

impl MemoryAudit {
    pub fn records(&self) -> Vec<AuditRecord> {
        self.0.lock().clone()
    }
}

impl PromptAudit for MemoryAudit {
    fn record(&self, rec: AuditRecord) {
        self.0.lock().push(rec);
    }
}

// ---------------------------------------------------------------------------
// Engine

#[derive(Debug, Clone, Default)]
pub struct EngineConfig {
    pub protocol: ProtocolConfig,
    pub params: CompletionParams,
    pub expressions: ExpressionTable,
}

pub struct Engine {
    store: Arc<Store>,
    provider: Arc<dyn ChatProvider>,
    templates: Arc<TemplateStore>,
    catalog: InstrumentCatalog,
    synth: Arc<dyn Synthesizer>,
    sentiment: SentimentClassifier,
    clock: Arc<dyn Clock>,
    ids: Arc<dyn IdSource>,
    audit: Option<Arc<dyn PromptAudit>>,
    config: EngineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub meta: SessionMeta,
    pub state: SessionState,
    pub staged_plan: Option<ExposurePlanCard>,
    pub channels: Vec<Channel>,
    pub transcripts: BTreeMap<String, Vec<MessageEnvelope>>,
}

/// Result of one chat exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub participant: MessageEnvelope,
    pub reply: MessageEnvelope,
    pub state: SessionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staged_plan: Option<ExposurePlanCard>,
    /// Why a plan-like reply could not be staged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_issue: Option<PlanCardError>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plan_warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfirmResult {
    pub state: SessionState,
    pub plan: ExposurePlanCard,
    pub channels: Vec<Channel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

const THERAPIST_PHASES: [Phase; 4] = Channel::THERAPIST_PHASES;

fn history_of(entries: &[TranscriptEntry]) -> Vec<ChatMessage> {
    entries
        .iter()
        .map(|e| match e.author {
            Author::Participant => ChatMessage::user(e.text.clone()),
            Author::Agent { .. } => ChatMessage::assistant(e.text.clone()),
        })
        .collect()
}

fn agent_turns(entries: &[TranscriptEntry], day: u8, phase: Phase) -> u32 {
    entries
        .iter()
        .filter(|e| matches!(e.author, Author::Agent { .. }) && e.day == day && e.phase == phase)
        .count() as u32
}

impl Engine {
    pub fn new(store: Arc<Store>, provider: Arc<dyn ChatProvider>) -> Self {
        Self {
            store,
            provider,
            templates: Arc::new(TemplateStore::bundled()),
            catalog: InstrumentCatalog::default(),
            synth: Arc::new(NullSynthesizer),
            sentiment: SentimentClassifier::lexicon_only(),
            clock: Arc::new(SystemClock),
            ids: Arc::new(RandomIds),
            audit: None,
            config: EngineConfig::default(),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }
    pub fn with_ids(mut self, ids: Arc<dyn IdSource>) -> Self {
        self.ids = ids;
        self
    }
    pub fn with_synthesizer(mut self, synth: Arc<dyn Synthesizer>) -> Self {
        self.synth = synth;
        self
    }
    pub fn with_sentiment(mut self, s: SentimentClassifier) -> Self {
        self.sentiment = s;
        self
    }
    pub fn with_templates(mut self, t: Arc<TemplateStore>) -> Self {
        self.templates = t;
        self
    }
    pub fn with_catalog(mut self, c: InstrumentCatalog) -> Self {
        self.catalog = c;
        self
    }
    pub fn with_audit(mut self, a: Arc<dyn PromptAudit>) -> Self {
        self.audit = Some(a);
        self
    }
    pub fn with_config(mut self, c: EngineConfig) -> Self {
        self.config = c;
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn templates(&self) -> &Arc<TemplateStore> {
        &self.templates
    }

    // -- sessions ----------------------------------------------------------

    pub fn create_session(&self, pseudonym: &str, opt_in: bool) -> Result<SessionState, ApiError> {
        let pseudonym = pseudonym.trim();
        if pseudonym.is_empty() {
            return Err(ApiError::validation("pseudonym must not be empty"));
        }
        validate_pseudonym(pseudonym)?;
        let meta = SessionMeta {
            session_id: self.ids.next_id(),
            pseudonym: pseudonym.to_string(),
            opt_in,
            created_at: self.clock.now(),
        };
        Ok(self.store.create_session(&meta)?)
    }

    pub fn get_session(&self, id: &str) -> Result<SessionView, ApiError> {
        let stored = self.store.load_session(id)?;
        let channels = self.store.channels(id)?;
        let mut transcripts = BTreeMap::new();
        for c in &channels {
            transcripts.insert(c.to_string(), self.store.transcript(id, c)?);
        }
        Ok(SessionView {
            meta: stored.meta,
            state: stored.snapshot,
            staged_plan: self.store.staged_plan(id)?,
            channels,
            transcripts,
        })
    }

    fn require_phase(state: &SessionState, allowed: &[Phase]) -> Result<(), ApiError> {
        if state.is_closed() && !allowed.contains(&Phase::Closed) {
            return Err(ProtocolError::SessionClosed.into());
        }
        if allowed.contains(&state.phase) {
            Ok(())
        } else {
            Err(ApiError::wrong_phase(state.phase, allowed))
        }
    }

    fn nonempty(text: &str) -> Result<&str, ApiError> {
        let t = text.trim();
        if t.is_empty() {
            Err(ApiError::validation("message text must not be empty"))
        } else {
            Ok(t)
        }
    }

    fn participant_turn(&self, state: &SessionState, channel: Channel, text: &str, hint: bool) -> TranscriptEntry {
        TranscriptEntry {
            seq: 0,
            channel,
            author: Author::Participant,
            day: state.day,
            phase: state.phase,
            text: text.to_string(),
            sentiment: None,
            expression: None,
            audio: None,
            hint,
            warning: None,
            timestamp: self.clock.now(),
        }
    }

    /// Sends a bundle, streams deltas, and persists the reply with its
    /// sentiment, expression and audio.
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        session_id: &str,
        state: &SessionState,
        channel: Channel,
        profile: &AgentProfile,
        key: ScriptKey,
        bundle: PromptBundle,
        hint: bool,
        sink: &mut dyn FnMut(&str),
    ) -> Result<TranscriptEntry, ApiError> {
        if let Some(a) = &self.audit {
            a.record(AuditRecord {
                session_id: session_id.to_string(),
                channel: channel.clone(),
                key: key.clone(),
                bundle: bundle.clone(),
            });
        }
        let req = CompletionRequest {
            messages: bundle.to_messages(),
            params: self.config.params.clone(),
            key: Some(key.clone()),
        };
        let text = self
            .provider
            .complete_streaming(&req, &mut |c| {
                if let StreamChunk::Delta(d) = c {
                    sink(&d)
                }
            })
            .inspect_err(|e| tracing::warn!(session = session_id, %key, error = %e, "completion failed"))?;
        let sentiment_key = ScriptKey { kind: "sentiment".into(), ..key };
        let sentiment = self.sentiment.classify(&text, Some(sentiment_key));
        let expression = self.config.expressions.expression_for(sentiment, profile.kind);
        let (audio, warning) = voice_for(self.synth.as_ref(), &text, &profile.voice_id);
        let entry = TranscriptEntry {
            seq: 0,
            channel,
            author: Author::Agent { profile_ref: profile.reference() },
            day: state.day,
            phase: state.phase,
            text,
            sentiment: Some(sentiment),
            expression: Some(expression),
            audio,
            hint,
            warning,
            timestamp: self.clock.now(),
        };
        Ok(self.store.append_turn(session_id, entry)?)
    }

    fn therapist_context(&self, id: &str, state: &SessionState) -> Result<TherapistContext, ApiError> {
        let stored = self.store.load_session(id)?;
        let lsas = stored.scale(Instrument::Lsas, ScaleTiming::Pre).and_then(|r| match r.score {
            ScaleScore::Lsas(s) => Some(s),
            _ => None,
        });
        Ok(TherapistContext { lsas, previous_same_level: previous_same_level(&stored.confirmed_plans(), state) })
    }

    // -- therapist channel -------------------------------------------------

    /// Posts a participant message to the therapist and streams the reply.
    /// With `finish`, the phase's closing event fires after the reply:
    /// Assessment → AssessmentDone, Debrief → DebriefDone, FinalSummary →
    /// DayClosed (ending the programme).
    pub fn post_therapist_message(
        &self,
        id: &str,
        text: &str,
        finish: bool,
        sink: &mut dyn FnMut(&str),
    ) -> Result<TurnResult, ApiError> {
        let _g = self.store.try_guard(id)?;
        let state = self.store.snapshot(id)?;
        Self::require_phase(&state, &THERAPIST_PHASES)?;
        let text = Self::nonempty(text)?;
        let closing = match (finish, state.phase) {
            (false, _) => None,
            (true, Phase::Assessment) => Some(SessionEvent::AssessmentDone),
            (true, Phase::Debrief) => Some(SessionEvent::DebriefDone),
            (true, Phase::FinalSummary) => Some(SessionEvent::DayClosed),
            (true, _) => return Err(ApiError::validation("planning ends by confirming a plan, not with finish")),
        };

        let participant = self.store.append_turn(id, self.participant_turn(&state, Channel::Therapist, text, false))?;
        let entries = self.store.transcript(id, &Channel::Therapist)?;
        let ctx = self.therapist_context(id, &state)?;
        let templates = self.templates.current();
        let bundle = build_agent_p_prompt(&templates, &state, &ctx, &history_of(&entries))?;
        let key = ScriptKey::therapist(state.day, state.phase, agent_turns(&entries, state.day, state.phase));
        let reply = self.generate(id, &state, Channel::Therapist, &AgentProfile::therapist(), key, bundle, false, sink)?;

        let mut staged_plan = None;
        let mut plan_issue = None;
        let mut plan_warnings = Vec::new();
        if state.phase == Phase::Planning && looks_like_plan_card(&reply.text) {
            match parse_plan_card(&reply.text, state.level()) {
                Ok(card) => {
                    let mut v = validate_card(&card);
                    if let Some(prev) = &ctx.previous_same_level {
                        v.extend(validate_level_pair(prev, &card).unwrap_or_default());
                    }
                    plan_warnings = v.iter().map(ToString::to_string).collect();
                    self.store.stage_plan(id, Some(&card))?;
                    staged_plan = Some(card);
                }
                Err(e) => {
                    tracing::info!(session = id, error = %e, "plan reply could not be staged");
                    plan_issue = Some(e);
                }
            }
        }

        let state = match closing {
            Some(ev) => self.store.apply_event(id, ev, self.clock.now())?,
            None => state,
        };
        Ok(TurnResult { participant, reply, state, staged_plan, plan_issue, plan_warnings })
    }

    // -- plan --------------------------------------------------------------

    /// Confirms the staged card, optionally edited, and opens the scenario
    /// channel(s).
    pub fn confirm_plan(&self, id: &str, edits: &PlanEdits) -> Result<ConfirmResult, ApiError> {
        let _g = self.store.try_guard(id)?;
        let stored = self.store.load_session(id)?;
        let state = stored.snapshot.clone();
        Self::require_phase(&state, &[Phase::Planning])?;
        let staged = self
            .store
            .staged_plan(id)?
            .ok_or_else(|| ApiError::new("no_staged_plan", "no plan card is awaiting confirmation"))?;
        let card = apply_user_edits(&staged, edits)?;
        let mut violations = validate_card(&card);
        if let Some(prev) = previous_same_level(&stored.confirmed_plans(), &state) {
            violations.extend(validate_level_pair(&prev, &card)?);
        }
        let (blocking, warnings): (Vec<_>, Vec<_>) = violations.into_iter().partition(PlanViolation::is_blocking);
        if !blocking.is_empty() {
            return Err(plan_violations(&blocking));
        }
        self.store.apply_event(id, SessionEvent::PlanConfirmed { plan: card.clone() }, self.clock.now())?;
        let state = self.store.apply_event(id, SessionEvent::ScenarioInstantiated, self.clock.now())?;
        self.store.stage_plan(id, None)?;
        let channels = (0..state.agent_h_count()).map(|slot| Channel::Scenario { day: state.day, slot }).collect();
        Ok(ConfirmResult {
            state,
            plan: card,
            channels,
            warnings: warnings.iter().map(ToString::to_string).collect(),
        })
    }

    // -- scenario channels -------------------------------------------------

    /// Posts to an interlocutor. With `help`, a HelpRequested event is logged
    /// and the reply is a hint.
    pub fn post_scenario_message(
        &self,
        id: &str,
        slot: usize,
        text: &str,
        help: bool,
        sink: &mut dyn FnMut(&str),
    ) -> Result<TurnResult, ApiError> {
        let _g = self.store.try_guard(id)?;
        let state = self.store.snapshot(id)?;
        Self::require_phase(&state, &[Phase::Exposure])?;
        let card = state.active_plan.clone().ok_or_else(|| ApiError::from(ProtocolError::NoActivePlan))?;
        if slot >= state.agent_h_count() {
            return Err(ProtocolError::SlotOutOfRange { slot, available: state.agent_h_count() }.into());
        }
        let text = Self::nonempty(text)?;
        let channel = Channel::Scenario { day: state.day, slot };
        if help {
            self.store.apply_event(id, SessionEvent::HelpRequested { slot }, self.clock.now())?;
        }
        let participant = self.store.append_turn(id, self.participant_turn(&state, channel.clone(), text, help))?;
        let entries = self.store.transcript(id, &channel)?;
        let templates = self.templates.current();
        let history = history_of(&entries);
        let bundle = if help {
            build_hint_prompt(&templates, &card, slot, &history)?
        } else {
            build_agent_h_prompt(&templates, &card, slot, &history)?
        };
        let profile = AgentProfile::interlocutor(&card, slot).expect("slot checked against role count");
        let key = ScriptKey::interlocutor(slot, state.day, agent_turns(&entries, state.day, Phase::Exposure));
        let reply = self.generate(id, &state, channel, &profile, key, bundle, help, sink)?;
        Ok(TurnResult {
            participant,
            reply,
            state: self.store.snapshot(id)?,
            staged_plan: None,
            plan_issue: None,
            plan_warnings: Vec::new(),
        })
    }

    // -- task and debrief --------------------------------------------------

    /// Ends the exposure and opens the debrief with the participant's own
    /// summary. The therapist never sees the scenario transcript.
    pub fn complete_task(
        &self,
        id: &str,
        outcome: TaskOutcome,
        summary: &str,
        sink: &mut dyn FnMut(&str),
    ) -> Result<TurnResult, ApiError> {
        let _g = self.store.try_guard(id)?;
        let state = self.store.snapshot(id)?;
        Self::require_phase(&state, &[Phase::Exposure])?;
        let state = self.store.apply_event(id, SessionEvent::TaskCompleted { outcome }, self.clock.now())?;
        let history = history_of(&self.store.transcript(id, &Channel::Therapist)?);
        let templates = self.templates.current();
        let bundle = build_debrief_prompt(&templates, &state, &history, summary)?;
        let opening = debrief_opening(state.last_outcome, summary);
        let participant = self.store.append_turn(id, self.participant_turn(&state, Channel::Therapist, &opening, false))?;
        let key = ScriptKey::therapist(state.day, Phase::Debrief, 0);
        let reply = self.generate(id, &state, Channel::Therapist, &AgentProfile::therapist(), key, bundle, false, sink)?;
        Ok(TurnResult { participant, reply, state, staged_plan: None, plan_issue: None, plan_warnings: Vec::new() })
    }

    /// Moves from a completed day to the next day's planning, or from the
    /// final summary to Closed.
    pub fn close_day(&self, id: &str) -> Result<SessionState, ApiError> {
        let _g = self.store.try_guard(id)?;
        let stored = self.store.load_session(id)?;
        let state = &stored.snapshot;
        Self::require_phase(state, &[Phase::DayComplete, Phase::FinalSummary])?;
        let now = self.clock.now();
        let min = self.config.protocol.min_hours_between_days;
        if state.phase == Phase::DayComplete && min > 0 {
            let day_start = stored
                .events
                .iter()
                .rev()
                .find(|r| matches!(r.event, SessionEvent::DayClosed))
                .map_or(stored.meta.created_at, |r| r.at);
            let ready = day_start + Duration::hours(i64::from(min));
            if now < ready {
                return Err(ApiError::new("too_early", format!("the next day opens at {}", ready.to_rfc3339()))
                    .retryable()
                    .with_details(serde_json::json!({ "ready_at": ready })));
            }
        }
        Ok(self.store.apply_event(id, SessionEvent::DayClosed, now)?)
    }

    // -- scales and outcomes -----------------------------------------------

    /// Pre scales are accepted until day 1 is complete; post scales only in
    /// the final summary or after closing.
    pub fn submit_scale(
        &self,
        id: &str,
        instrument: Instrument,
        timing: ScaleTiming,
        responses: &ScaleResponses,
    ) -> Result<ScaleScore, ApiError> {
        let _g = self.store.try_guard(id)?;
        let state = self.store.snapshot(id)?;
        if responses.instrument() != instrument {
            return Err(ApiError::validation(format!(
                "payload is for {}, route is for {instrument}",
                responses.instrument()
            )));
        }
        let allowed = match timing {
            ScaleTiming::Pre => !state.completed_days.contains(&1),
            ScaleTiming::Post => matches!(state.phase, Phase::FinalSummary | Phase::Closed),
        };
        if !allowed {
            return Err(ApiError::new(
                "timing_violation",
                match timing {
                    ScaleTiming::Pre => "pre-treatment scales are accepted only before day 1 is complete",
                    ScaleTiming::Post => "post-treatment scales are accepted only after the final day",
                },
            ));
        }
        let score = self.catalog.score(responses)?;
        self.store.append_scale(
            id,
            &ScaleRecord { instrument, timing, responses: responses.clone(), score, at: self.clock.now() },
        )?;
        Ok(score)
    }

    pub fn get_outcomes(&self) -> Result<OutcomeReport, ApiError> {
        outcome_report(&self.store)
    }
}

/// The card confirmed on the other day of the current level's pair, if any.
fn previous_same_level(plans: &[(u8, ExposurePlanCard)], state: &SessionState) -> Option<ExposurePlanCard> {
    plans
        .iter()
        .rev()
        .find(|(day, c)| *day != state.day && c.level == state.level())
        .map(|(_, c)| c.clone())
}

pub const MIN_COHORT: usize = 2;

/// Outcome report over every participant with complete pre/post data.
pub fn outcome_report(store: &Store) -> Result<OutcomeReport, ApiError> {
    let records = store.export_cohort(&Measure::ALL)?;
    if records.len() < MIN_COHORT {
        return Err(ApiError::new(
            "insufficient_cohort",
            format!("{} complete participant(s); at least {MIN_COHORT} needed", records.len()),
        )
        .with_details(serde_json::json!({ "complete": records.len(), "required": MIN_COHORT })));
    }
    let samples = paired_samples(&records, &Measure::ALL)?;
    Ok(build_outcome_report(&samples)?)
}
