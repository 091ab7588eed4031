//! The six-day exposure protocol as a pure state machine.
//!
//! Each day runs Planning -> ScenarioSetup -> Exposure -> Debrief and then
//! either closes (days 1-5) or moves to the final summary (day 6). Day 1 opens
//! with an assessment. Levels follow a fixed ladder, each visited twice.

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::plan::ExposurePlanCard;

pub const DAYS: u8 = 6;

pub const SCHEDULE: [ExposureLevel; DAYS as usize] = [
    ExposureLevel::Low,
    ExposureLevel::Low,
    ExposureLevel::Medium,
    ExposureLevel::Medium,
    ExposureLevel::High,
    ExposureLevel::High,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExposureLevel {
    Low,
    Medium,
    High,
}

impl ExposureLevel {
    /// The therapist prompt's vocabulary for the same ladder.
    pub fn severity_word(self) -> &'static str {
        match self {
            ExposureLevel::Low => "mild",
            ExposureLevel::Medium => "moderate",
            ExposureLevel::High => "severe",
        }
    }

    /// Accepts either vocabulary, case-insensitively.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" | "mild" => Some(ExposureLevel::Low),
            "medium" | "moderate" => Some(ExposureLevel::Medium),
            "high" | "severe" => Some(ExposureLevel::High),
            _ => None,
        }
    }
}

impl fmt::Display for ExposureLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExposureLevel::Low => "Low",
            ExposureLevel::Medium => "Medium",
            ExposureLevel::High => "High",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Assessment,
    Planning,
    ScenarioSetup,
    Exposure,
    Debrief,
    DayComplete,
    FinalSummary,
    Closed,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::Assessment,
        Phase::Planning,
        Phase::ScenarioSetup,
        Phase::Exposure,
        Phase::Debrief,
        Phase::DayComplete,
        Phase::FinalSummary,
        Phase::Closed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Assessment => "Assessment",
            Phase::Planning => "Planning",
            Phase::ScenarioSetup => "ScenarioSetup",
            Phase::Exposure => "Exposure",
            Phase::Debrief => "Debrief",
            Phase::DayComplete => "DayComplete",
            Phase::FinalSummary => "FinalSummary",
            Phase::Closed => "Closed",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskOutcome {
    Success,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum SessionEvent {
    AssessmentDone,
    PlanConfirmed { plan: ExposurePlanCard },
    ScenarioInstantiated,
    HelpRequested { slot: usize },
    TaskCompleted { outcome: TaskOutcome },
    DebriefDone,
    DayClosed,
}

/// Payload-free event discriminant, used by the exported transition table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    AssessmentDone,
    PlanConfirmed,
    ScenarioInstantiated,
    HelpRequested,
    TaskCompleted,
    DebriefDone,
    DayClosed,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::AssessmentDone,
        EventKind::PlanConfirmed,
        EventKind::ScenarioInstantiated,
        EventKind::HelpRequested,
        EventKind::TaskCompleted,
        EventKind::DebriefDone,
        EventKind::DayClosed,
    ];
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl SessionEvent {
    pub fn kind(&self) -> EventKind {
        match self {
            SessionEvent::AssessmentDone => EventKind::AssessmentDone,
            SessionEvent::PlanConfirmed { .. } => EventKind::PlanConfirmed,
            SessionEvent::ScenarioInstantiated => EventKind::ScenarioInstantiated,
            SessionEvent::HelpRequested { .. } => EventKind::HelpRequested,
            SessionEvent::TaskCompleted { .. } => EventKind::TaskCompleted,
            SessionEvent::DebriefDone => EventKind::DebriefDone,
            SessionEvent::DayClosed => EventKind::DayClosed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("day {0} is outside 1..=6")]
    DayOutOfRange(u8),
    #[error("event {event} is not legal in phase {phase}")]
    IllegalTransition { phase: Phase, event: EventKind },
    #[error("session is closed")]
    SessionClosed,
    #[error("plan is for a {found} scenario but day {day} is {expected}")]
    PlanLevelMismatch {
        day: u8,
        expected: ExposureLevel,
        found: ExposureLevel,
    },
    #[error("plan has {found} interaction roles, {expected} required")]
    PlanRoleCount { expected: usize, found: usize },
    #[error("exposure requires a confirmed plan")]
    NoActivePlan,
    #[error("help requested for slot {slot}, but only {available} interlocutor(s) are present")]
    SlotOutOfRange { slot: usize, available: usize },
}

pub fn level_for_day(day: u8) -> Result<ExposureLevel, ProtocolError> {
    if (1..=DAYS).contains(&day) {
        Ok(SCHEDULE[usize::from(day - 1)])
    } else {
        Err(ProtocolError::DayOutOfRange(day))
    }
}

pub fn agent_h_count(level: ExposureLevel) -> usize {
    match level {
        ExposureLevel::High => 2,
        ExposureLevel::Low | ExposureLevel::Medium => 1,
    }
}

/// Typical scenario length in minutes, for progress display.
pub fn expected_duration(level: ExposureLevel) -> u32 {
    match level {
        ExposureLevel::Low => 10,
        ExposureLevel::Medium => 20,
        ExposureLevel::High => 30,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Minimum gap between closing one day and planning the next. Zero
    /// disables the check.
    pub min_hours_between_days: u32,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            min_hours_between_days: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn deployment() -> Self {
        Self {
            min_hours_between_days: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub participant_ref: String,
    pub day: u8,
    pub phase: Phase,
    pub schedule: Vec<ExposureLevel>,
    pub active_plan: Option<ExposurePlanCard>,
    pub last_outcome: Option<TaskOutcome>,
    pub completed_days: BTreeSet<u8>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl SessionState {
    pub fn new(
        session_id: impl Into<String>,
        participant_ref: impl Into<String>,
        at: DateTime<Utc>,
    ) -> Self {
        Self {
            session_id: session_id.into(),
            participant_ref: participant_ref.into(),
            day: 1,
            phase: Phase::Assessment,
            schedule: SCHEDULE.to_vec(),
            active_plan: None,
            last_outcome: None,
            completed_days: BTreeSet::new(),
            created_at: at,
            updated_at: at,
        }
    }

    pub fn level(&self) -> ExposureLevel {
        self.schedule[usize::from(self.day.clamp(1, DAYS) - 1)]
    }

    pub fn agent_h_count(&self) -> usize {
        agent_h_count(self.level())
    }

    pub fn is_closed(&self) -> bool {
        self.phase == Phase::Closed
    }

    /// Applies one event. Does not touch `updated_at`; the caller stamps it.
    pub fn advance(&self, event: &SessionEvent) -> Result<SessionState, ProtocolError> {
        advance(self, event)
    }
}

pub fn advance(state: &SessionState, event: &SessionEvent) -> Result<SessionState, ProtocolError> {
    if state.phase == Phase::Closed {
        return Err(ProtocolError::SessionClosed);
    }
    let illegal = || ProtocolError::IllegalTransition {
        phase: state.phase,
        event: event.kind(),
    };
    let mut next = state.clone();
    match (state.phase, event) {
        (Phase::Assessment, SessionEvent::AssessmentDone) => next.phase = Phase::Planning,
        (Phase::Planning, SessionEvent::PlanConfirmed { plan }) => {
            let expected = level_for_day(state.day)?;
            if plan.level != expected {
                return Err(ProtocolError::PlanLevelMismatch {
                    day: state.day,
                    expected,
                    found: plan.level,
                });
            }
            if plan.roles.len() != agent_h_count(expected) {
                return Err(ProtocolError::PlanRoleCount {
                    expected: agent_h_count(expected),
                    found: plan.roles.len(),
                });
            }
            next.active_plan = Some(plan.clone());
            next.phase = Phase::ScenarioSetup;
        }
        (Phase::ScenarioSetup, SessionEvent::ScenarioInstantiated) => {
            if state.active_plan.is_none() {
                return Err(ProtocolError::NoActivePlan);
            }
            next.phase = Phase::Exposure;
        }
        (Phase::Exposure, SessionEvent::HelpRequested { slot }) => {
            let available = state.agent_h_count();
            if *slot >= available {
                return Err(ProtocolError::SlotOutOfRange {
                    slot: *slot,
                    available,
                });
            }
        }
        (Phase::Exposure, SessionEvent::TaskCompleted { outcome }) => {
            next.last_outcome = Some(*outcome);
            next.phase = Phase::Debrief;
        }
        (Phase::Debrief, SessionEvent::DebriefDone) => {
            next.completed_days.insert(state.day);
            next.phase = if state.day >= DAYS {
                Phase::FinalSummary
            } else {
                Phase::DayComplete
            };
        }
        (Phase::DayComplete, SessionEvent::DayClosed) => {
            next.day = state.day + 1;
            next.phase = Phase::Planning;
            next.active_plan = None;
            next.last_outcome = None;
        }
        (Phase::FinalSummary, SessionEvent::DayClosed) => {
            next.phase = Phase::Closed;
            next.active_plan = None;
        }
        _ => return Err(illegal()),
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: Phase,
    pub event: EventKind,
    pub to: Vec<Phase>,
}

/// Machine-readable transition table for UI state mirroring.
pub fn transition_table() -> Vec<Transition> {
    use EventKind as E;
    use Phase as P;
    let t = |from, event, to: &[Phase]| Transition {
        from,
        event,
        to: to.to_vec(),
    };
    vec![
        t(P::Assessment, E::AssessmentDone, &[P::Planning]),
        t(P::Planning, E::PlanConfirmed, &[P::ScenarioSetup]),
        t(P::ScenarioSetup, E::ScenarioInstantiated, &[P::Exposure]),
        t(P::Exposure, E::HelpRequested, &[P::Exposure]),
        t(P::Exposure, E::TaskCompleted, &[P::Debrief]),
        t(P::Debrief, E::DebriefDone, &[P::DayComplete, P::FinalSummary]),
        t(P::DayComplete, E::DayClosed, &[P::Planning]),
        t(P::FinalSummary, E::DayClosed, &[P::Closed]),
    ]
}

pub fn transition_table_json() -> String {
    serde_json::to_string_pretty(&transition_table()).expect("table serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::plan::{ExposurePlanCard, PlanRole};
    use crate::agents::Gender;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 1, 6, 9, 0, 0).unwrap()
    }

    pub(crate) fn card(level: ExposureLevel) -> ExposurePlanCard {
        let roles = (0..agent_h_count(level))
            .map(|i| PlanRole {
                name: format!("R{i}"),
                gender: Some(if i == 0 { Gender::Male } else { Gender::Female }),
                profile_text: format!("You are now a classmate named R{i}."),
            })
            .collect();
        ExposurePlanCard {
            level,
            roles,
            scenario_text: "A quiet library.".into(),
            task_text: "Ask to borrow a pen.".into(),
            hints: vec![],
        }
    }

    fn event_of(kind: EventKind, state: &SessionState) -> SessionEvent {
        match kind {
            EventKind::AssessmentDone => SessionEvent::AssessmentDone,
            EventKind::PlanConfirmed => SessionEvent::PlanConfirmed {
                plan: card(state.level()),
            },
            EventKind::ScenarioInstantiated => SessionEvent::ScenarioInstantiated,
            EventKind::HelpRequested => SessionEvent::HelpRequested { slot: 0 },
            EventKind::TaskCompleted => SessionEvent::TaskCompleted {
                outcome: TaskOutcome::Success,
            },
            EventKind::DebriefDone => SessionEvent::DebriefDone,
            EventKind::DayClosed => SessionEvent::DayClosed,
        }
    }

    /// Canonical event sequence for a whole six-day session.
    fn canonical_events(state: &SessionState) -> Vec<EventKind> {
        match state.phase {
            Phase::Assessment => vec![EventKind::AssessmentDone],
            Phase::Planning => vec![EventKind::PlanConfirmed],
            Phase::ScenarioSetup => vec![EventKind::ScenarioInstantiated],
            Phase::Exposure => vec![EventKind::TaskCompleted],
            Phase::Debrief => vec![EventKind::DebriefDone],
            Phase::DayComplete | Phase::FinalSummary => vec![EventKind::DayClosed],
            Phase::Closed => vec![],
        }
    }

    #[test]
    fn schedule_lookup() {
        assert_eq!(level_for_day(1), Ok(ExposureLevel::Low));
        assert_eq!(level_for_day(3), Ok(ExposureLevel::Medium));
        assert_eq!(level_for_day(5), Ok(ExposureLevel::High));
        assert_eq!(level_for_day(7), Err(ProtocolError::DayOutOfRange(7)));
        assert_eq!(level_for_day(0), Err(ProtocolError::DayOutOfRange(0)));
    }

    #[test]
    fn interlocutor_counts_and_durations() {
        assert_eq!(agent_h_count(ExposureLevel::High), 2);
        assert_eq!(agent_h_count(ExposureLevel::Low), 1);
        assert_eq!(agent_h_count(ExposureLevel::Medium), 1);
        assert_eq!(expected_duration(ExposureLevel::Low), 10);
        assert_eq!(expected_duration(ExposureLevel::Medium), 20);
        assert_eq!(expected_duration(ExposureLevel::High), 30);
    }

    #[test]
    fn level_vocabulary() {
        assert_eq!(ExposureLevel::parse("Moderate"), Some(ExposureLevel::Medium));
        assert_eq!(ExposureLevel::parse("severe"), Some(ExposureLevel::High));
        assert_eq!(ExposureLevel::parse("LOW"), Some(ExposureLevel::Low));
        assert_eq!(ExposureLevel::parse("extreme"), None);
    }

    #[test]
    fn named_transitions() {
        let s = SessionState::new("s", "p", t0());
        let s = s.advance(&SessionEvent::AssessmentDone).unwrap();
        assert_eq!(s.phase, Phase::Planning);

        let mut last = SessionState::new("s", "p", t0());
        last.day = 6;
        last.phase = Phase::Debrief;
        let fin = last.advance(&SessionEvent::DebriefDone).unwrap();
        assert_eq!(fin.phase, Phase::FinalSummary);
        assert!(fin.completed_days.contains(&6));

        let mut exp = SessionState::new("s", "p", t0());
        exp.phase = Phase::Exposure;
        exp.active_plan = Some(card(ExposureLevel::Low));
        assert_eq!(
            exp.advance(&SessionEvent::PlanConfirmed { plan: card(ExposureLevel::Low) }),
            Err(ProtocolError::IllegalTransition {
                phase: Phase::Exposure,
                event: EventKind::PlanConfirmed
            })
        );
    }

    #[test]
    fn help_does_not_move_phase() {
        let mut s = SessionState::new("s", "p", t0());
        s.phase = Phase::Exposure;
        s.active_plan = Some(card(ExposureLevel::Low));
        let h = s.advance(&SessionEvent::HelpRequested { slot: 0 }).unwrap();
        assert_eq!(h, s);
        assert!(matches!(
            s.advance(&SessionEvent::HelpRequested { slot: 1 }),
            Err(ProtocolError::SlotOutOfRange { slot: 1, available: 1 })
        ));
    }

    #[test]
    fn plan_must_match_day() {
        let mut s = SessionState::new("s", "p", t0());
        s.phase = Phase::Planning;
        assert!(matches!(
            s.advance(&SessionEvent::PlanConfirmed { plan: card(ExposureLevel::High) }),
            Err(ProtocolError::PlanLevelMismatch { .. })
        ));
        let mut bad = card(ExposureLevel::Low);
        bad.roles.push(bad.roles[0].clone());
        assert!(matches!(
            s.advance(&SessionEvent::PlanConfirmed { plan: bad }),
            Err(ProtocolError::PlanRoleCount { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn closed_session_rejects_everything() {
        let mut s = SessionState::new("s", "p", t0());
        s.phase = Phase::Closed;
        for kind in EventKind::ALL {
            assert_eq!(s.advance(&event_of(kind, &s)), Err(ProtocolError::SessionClosed));
        }
    }

    #[test]
    fn exhaustive_phase_event_matrix() {
        let table = transition_table();
        for phase in Phase::ALL {
            for day in 1..=DAYS {
                let mut s = SessionState::new("s", "p", t0());
                s.phase = phase;
                s.day = day;
                if matches!(phase, Phase::ScenarioSetup | Phase::Exposure | Phase::Debrief) {
                    s.active_plan = Some(card(s.level()));
                }
                for kind in EventKind::ALL {
                    let row = table.iter().find(|t| t.from == phase && t.event == kind);
                    match s.advance(&event_of(kind, &s)) {
                        Ok(next) => {
                            let row = row.unwrap_or_else(|| panic!("{phase} + {kind} accepted but not in table"));
                            assert!(row.to.contains(&next.phase), "{phase} + {kind} -> {}", next.phase);
                        }
                        Err(ProtocolError::IllegalTransition { .. }) | Err(ProtocolError::SessionClosed) => {
                            assert!(row.is_none(), "{phase} + {kind} in table but rejected");
                        }
                        Err(e) => panic!("unexpected error {e}"),
                    }
                }
            }
        }
    }

    #[test]
    fn canonical_walk_visits_schedule() {
        let mut s = SessionState::new("s", "p", t0());
        let mut exposures = Vec::new();
        let mut guard = 0;
        while let Some(&kind) = canonical_events(&s).first() {
            s = s.advance(&event_of(kind, &s)).unwrap();
            if s.phase == Phase::Exposure {
                assert!(s.active_plan.is_some());
                exposures.push(s.level());
            }
            guard += 1;
            assert!(guard < 100);
        }
        assert_eq!(s.phase, Phase::Closed);
        assert_eq!(exposures, SCHEDULE.to_vec());
        assert_eq!(s.completed_days, (1..=6).collect());
    }

    #[test]
    fn advance_is_pure() {
        let s = SessionState::new("s", "p", t0());
        let a = s.advance(&SessionEvent::AssessmentDone).unwrap();
        let b = s.advance(&SessionEvent::AssessmentDone).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.phase, Phase::Assessment);
    }

    #[test]
    fn transition_table_exports() {
        let json = transition_table_json();
        let back: Vec<Transition> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, transition_table());
    }

    proptest::proptest! {
        #[test]
        fn random_events_never_reach_exposure_without_a_fitting_plan(
            steps in proptest::collection::vec((0usize..7, 0usize..3, 0usize..3), 0..120)
        ) {
            let mut state = SessionState::new("s", "p", t0());
            for (k, lvl, slot) in steps {
                let event = match EventKind::ALL[k] {
                    EventKind::PlanConfirmed => SessionEvent::PlanConfirmed {
                        plan: card([ExposureLevel::Low, ExposureLevel::Medium, ExposureLevel::High][lvl]),
                    },
                    EventKind::HelpRequested => SessionEvent::HelpRequested { slot },
                    kind => event_of(kind, &state),
                };
                if let Ok(next) = state.advance(&event) {
                    state = next;
                }
                proptest::prop_assert!((1..=DAYS).contains(&state.day));
                proptest::prop_assert!(state.completed_days.iter().all(|&d| d <= state.day));
                if matches!(state.phase, Phase::ScenarioSetup | Phase::Exposure) {
                    let plan = state.active_plan.as_ref();
                    proptest::prop_assert!(plan.is_some());
                    let plan = plan.unwrap();
                    proptest::prop_assert_eq!(plan.level, state.level());
                    proptest::prop_assert_eq!(plan.roles.len(), state.agent_h_count());
                }
            }
        }
    }
}
