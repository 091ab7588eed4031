//! Prompt assembly for the therapist agent (Agent-P) and the scenario
//! interlocutors (Agent-H).
//!
//! Memory rule: a therapist bundle only ever carries therapist-channel turns
//! and text the participant wrote. Interlocutor transcripts never flow back.

pub mod plan;
pub mod template;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruments::LsasScore;
use crate::protocol::{ExposureLevel, Phase, SessionState, TaskOutcome, DAYS};
use crate::provider::ChatMessage;
use plan::ExposurePlanCard;
use template::{render, TemplateError, TemplateSet};

pub const DEFAULT_THERAPIST_NAME: &str = "Miss.Tree";
pub const DEFAULT_PATIENT_DESCRIPTION: &str = "a social anxiety disorder (SAD) patient";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn other(self) -> Gender {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::Male => "male",
            Gender::Female => "female",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Therapist,
    Interlocutor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseTrait {
    Outgoing,
    Gentle,
    Listener,
    Patient,
}

impl BaseTrait {
    pub const ALL: [BaseTrait; 4] = [
        BaseTrait::Outgoing,
        BaseTrait::Gentle,
        BaseTrait::Listener,
        BaseTrait::Patient,
    ];

    pub fn clause(self) -> &'static str {
        match self {
            BaseTrait::Outgoing => {
                "Be outgoing and friendly, and take the initiative to keep the conversation going."
            }
            BaseTrait::Gentle => {
                "Always use gentle words when chatting, even if your character is irritable or impatient."
            }
            BaseTrait::Listener => {
                "Listen carefully and respond to what the user actually said."
            }
            BaseTrait::Patient => {
                "Be patient: the user may reply slowly or briefly, and that is fine."
            }
        }
    }
}

/// Appended after the trait clauses in every interlocutor prompt.
pub const SUSTAIN_CLAUSE: &str = "If the user does not know how to continue, keep the dialogue going by referring back to something said earlier in this conversation.";

pub fn base_traits_text() -> String {
    let mut s: String = BaseTrait::ALL
        .iter()
        .map(|t| format!("- {}\n", t.clause()))
        .collect();
    s.push_str(&format!("- {SUSTAIN_CLAUSE}\n"));
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub kind: AgentKind,
    pub display_name: String,
    pub gender: Gender,
    pub base_traits: Vec<BaseTrait>,
    pub voice_id: String,
    pub template_id: String,
}

impl AgentProfile {
    pub fn therapist() -> Self {
        Self {
            kind: AgentKind::Therapist,
            display_name: DEFAULT_THERAPIST_NAME.into(),
            gender: Gender::Female,
            base_traits: BaseTrait::ALL.to_vec(),
            voice_id: "therapist-female".into(),
            template_id: template::THERAPIST_TEMPLATE_FILE.into(),
        }
    }

    /// Profile for the interlocutor in `slot` of `card`. Roles with no gender
    /// line alternate by slot so each High pair still gets both voices.
    pub fn interlocutor(card: &ExposurePlanCard, slot: usize) -> Option<Self> {
        let role = card.roles.get(slot)?;
        let gender = role
            .gender
            .unwrap_or(if slot == 0 { Gender::Male } else { Gender::Female });
        Some(Self {
            kind: AgentKind::Interlocutor,
            display_name: role.name.clone(),
            gender,
            base_traits: BaseTrait::ALL.to_vec(),
            voice_id: format!("interlocutor-{gender}"),
            template_id: template::INTERLOCUTOR_TEMPLATE_FILE.into(),
        })
    }

    /// Short stable reference stored in transcripts.
    pub fn reference(&self) -> String {
        match self.kind {
            AgentKind::Therapist => "agent-p".into(),
            AgentKind::Interlocutor => format!("agent-h:{}", self.display_name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub kind: AgentKind,
    pub system_text: String,
    pub context: Vec<ChatMessage>,
}

impl PromptBundle {
    pub fn to_messages(&self) -> Vec<ChatMessage> {
        let mut out = Vec::with_capacity(self.context.len() + 1);
        out.push(ChatMessage::system(self.system_text.clone()));
        out.extend(self.context.iter().cloned());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("session is closed")]
    SessionClosed,
    #[error("no therapist prompt for phase {0}")]
    WrongPhase(Phase),
    #[error("slot {slot} is out of range for a card with {roles} role(s)")]
    SlotOutOfRange { slot: usize, roles: usize },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Extra facts available to the therapist beyond the channel history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TherapistContext {
    /// Total and band only; item responses are not shared.
    pub lsas: Option<LsasScore>,
    /// The card already used at today's level, if this is the second day of
    /// the pair.
    pub previous_same_level: Option<ExposurePlanCard>,
}

fn therapist_system(templates: &TemplateSet) -> Result<String, TemplateError> {
    let vars: BTreeMap<&str, String> = [
        ("therapist_name", DEFAULT_THERAPIST_NAME.to_string()),
        ("patient_description", DEFAULT_PATIENT_DESCRIPTION.to_string()),
    ]
    .into();
    render(&templates.therapist, &vars)
}

fn level_directive(level: ExposureLevel) -> String {
    format!("{} ({level})", level.severity_word())
}

fn planning_directive(session: &SessionState, ctx: &TherapistContext) -> String {
    let level = session.level();
    let mut d = format!(
        "Today is day {} of {DAYS}. Present exactly one {} exposure scenario, and only one. \
         Write it as a plan card with the sections \"Interaction Role:\", \"Exposure Scenario:\" and \"Your Task:\". \
         In the Interaction Role section, give every character a line \"Gender: male\" or \"Gender: female\".",
        session.day,
        level_directive(level),
    );
    if level == ExposureLevel::High {
        d.push_str(
            " This is a severe scenario: describe two characters, one male and one female, under the labels \"Character-1:\" and \"Character-2:\".",
        );
    }
    if let Some(prev) = &ctx.previous_same_level {
        if let Some(g) = prev.roles.first().and_then(|r| r.gender) {
            if level != ExposureLevel::High {
                d.push_str(&format!(
                    " The previous {} scenario used a {g} character, so this one must use a {} character.",
                    level.severity_word(),
                    g.other()
                ));
            }
        }
    }
    d.push_str(" Optionally add a \"Hints:\" section with a few short tips.");
    d
}

fn phase_directive(session: &SessionState, ctx: &TherapistContext) -> Result<String, AgentError> {
    Ok(match session.phase {
        Phase::Closed => return Err(AgentError::SessionClosed),
        Phase::Assessment => {
            let mut d = String::from(
                "Current step: assessment. Talk with the patient to uncover which social situations they fear most and why. \
                 Use the Liebowitz Social Anxiety Scale (LSAS) items as a guide to the intensity of their fear and avoidance. \
                 Do not propose an exposure scenario yet.",
            );
            if let Some(s) = &ctx.lsas {
                d.push_str(&format!(
                    " The patient's reported LSAS total is {} ({:?} band).",
                    s.total, s.band
                ));
            }
            d
        }
        Phase::Planning => planning_directive(session, ctx),
        Phase::Debrief => debrief_directive(session.last_outcome, false),
        Phase::FinalSummary => String::from(
            "Current step: final summary. All exposure tasks are complete. Summarize the patient's performance over the six days, \
             point out shortcomings and offer suggestions, praise what they did well, and say you look forward to meeting them again.",
        ),
        Phase::ScenarioSetup | Phase::Exposure | Phase::DayComplete => {
            String::from("Current step: support. The patient is between steps; answer briefly and encourage them.")
        }
    })
}

fn debrief_directive(outcome: Option<TaskOutcome>, empty_summary: bool) -> String {
    let mut d = String::from(
        "Current step: debrief. The patient has just finished today's exposure scenario. Ask how they completed it and what difficulties they met, \
         then work with them to solve those difficulties, with advice based on their own account.",
    );
    if outcome == Some(TaskOutcome::Failed) {
        d.push_str(
            " The patient did not complete the task. Help them summarize the reasons for failure, and adjust the next exposure scenario based on their feedback.",
        );
    }
    if empty_summary {
        d.push_str(" The patient has not described the interaction yet. First ask them to summarize, in their own words, what happened.");
    }
    d
}

fn with_directive(system: String, directive: &str) -> String {
    format!("{}\n\n{}", system.trim_end(), directive)
}

/// Builds the therapist bundle for the session's current phase.
/// `history` must be therapist-channel turns only.
pub fn build_agent_p_prompt(
    templates: &TemplateSet,
    session: &SessionState,
    ctx: &TherapistContext,
    history: &[ChatMessage],
) -> Result<PromptBundle, AgentError> {
    let directive = phase_directive(session, ctx)?;
    Ok(PromptBundle {
        kind: AgentKind::Therapist,
        system_text: with_directive(therapist_system(templates)?, &directive),
        context: history.to_vec(),
    })
}

/// The participant's first debrief turn: the outcome in words followed by
/// their own summary.
pub fn debrief_opening(outcome: Option<TaskOutcome>, user_summary: &str) -> String {
    let lead = match outcome {
        Some(TaskOutcome::Failed) => "I could not complete the task.",
        _ => "I completed the task.",
    };
    let summary = user_summary.trim();
    if summary.is_empty() {
        lead.to_string()
    } else {
        format!("{lead} {summary}")
    }
}

/// Debrief bundle: therapist history plus the participant's own summary of
/// the scenario, never the scenario transcript.
pub fn build_debrief_prompt(
    templates: &TemplateSet,
    session: &SessionState,
    history: &[ChatMessage],
    user_summary: &str,
) -> Result<PromptBundle, AgentError> {
    match session.phase {
        Phase::Debrief => {}
        Phase::Closed => return Err(AgentError::SessionClosed),
        p => return Err(AgentError::WrongPhase(p)),
    }
    let summary = user_summary.trim();
    let directive = debrief_directive(session.last_outcome, summary.is_empty());
    let mut context = history.to_vec();
    context.push(ChatMessage::user(debrief_opening(session.last_outcome, summary)));
    Ok(PromptBundle {
        kind: AgentKind::Therapist,
        system_text: with_directive(therapist_system(templates)?, &directive),
        context,
    })
}

fn companion_clause(card: &ExposurePlanCard, slot: usize) -> String {
    let others: Vec<String> = card
        .roles
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != slot)
        .map(|(_, r)| r.name.clone())
        .collect();
    if others.is_empty() {
        String::new()
    } else {
        format!(
            "{} is also in this scene and talks with the user at the same time; leave room for them.\n\n",
            others.join(" and ")
        )
    }
}

/// Builds the interlocutor bundle for `slot` of `card`. `history` must be
/// that scenario channel's turns only.
pub fn build_agent_h_prompt(
    templates: &TemplateSet,
    card: &ExposurePlanCard,
    slot: usize,
    history: &[ChatMessage],
) -> Result<PromptBundle, AgentError> {
    let role = card.roles.get(slot).ok_or(AgentError::SlotOutOfRange {
        slot,
        roles: card.roles.len(),
    })?;
    let traits = base_traits_text();
    let vars: BTreeMap<&str, String> = [
        ("characteristic", role.profile_text.clone()),
        ("scenario", card.scenario_text.clone()),
        ("companion", companion_clause(card, slot)),
        ("base_traits", traits.clone()),
        ("name", role.name.clone()),
    ]
    .into();
    let mut system_text = render(&templates.interlocutor, &vars)?;
    // Custom templates may omit the trait placeholder; the traits are not optional.
    if !template::placeholders(&templates.interlocutor)
        .iter()
        .any(|p| p == "base_traits")
    {
        system_text = format!("{}\n\n{traits}", system_text.trim_end());
    }
    Ok(PromptBundle {
        kind: AgentKind::Interlocutor,
        system_text,
        context: history.to_vec(),
    })
}

/// Interlocutor bundle for a help request: the character steps out of the
/// scene briefly and offers hints toward the task.
pub fn build_hint_prompt(
    templates: &TemplateSet,
    card: &ExposurePlanCard,
    slot: usize,
    history: &[ChatMessage],
) -> Result<PromptBundle, AgentError> {
    let mut b = build_agent_h_prompt(templates, card, slot, history)?;
    let mut d = format!(
        "The user has asked for help. Briefly step out of the role and give one or two gentle, concrete hints that move them toward their task: {}",
        card.task_text
    );
    if !card.hints.is_empty() {
        d.push_str("\nSuggested hints from the therapist:\n");
        for h in &card.hints {
            d.push_str(&format!("- {h}\n"));
        }
    }
    b.system_text = with_directive(b.system_text, d.trim_end());
    Ok(b)
}
