//! Exposure plan cards: the structured scenario the therapist agent hands the
//! participant each day.
//!
//! A card is written as headed sections:
//!
//! ```text
//! Interaction Role:
//! You are now my friend named Hui. ...
//!
//! Exposure Scenario:
//! On Friday after school, ...
//!
//! Your Task:
//! You must return the homework to the other person's hands.
//! ```
//!
//! High-level cards carry two role blocks labelled `Character-1:` and
//! `Character-2:`. Optional sections are `Hints:` and `Exposure Level:`, and a
//! role block may carry `Gender:` and `Name:` lines.
//!
//! The lenient grammar matches headers case-insensitively, accepts `:` or
//! `：`, tolerates markdown emphasis and heading markers around the header, and
//! ignores any chatter before the first header. Strict mode accepts only the
//! canonical rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Gender;
use crate::protocol::{agent_h_count, ExposureLevel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRole {
    pub name: String,
    pub gender: Option<Gender>,
    pub profile_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposurePlanCard {
    pub level: ExposureLevel,
    pub roles: Vec<PlanRole>,
    pub scenario_text: String,
    pub task_text: String,
    #[serde(default)]
    pub hints: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Section {
    InteractionRole,
    ExposureScenario,
    YourTask,
    Hints,
    Level,
}

impl Section {
    pub fn title(self) -> &'static str {
        match self {
            Section::InteractionRole => "Interaction Role",
            Section::ExposureScenario => "Exposure Scenario",
            Section::YourTask => "Your Task",
            Section::Hints => "Hints",
            Section::Level => "Exposure Level",
        }
    }

    const REQUIRED: [Section; 3] = [
        Section::InteractionRole,
        Section::ExposureScenario,
        Section::YourTask,
    ];
}

/// Header spellings accepted by the lenient grammar, longest first.
const LENIENT_HEADERS: [(&str, Section); 8] = [
    ("interaction roles", Section::InteractionRole),
    ("interaction role", Section::InteractionRole),
    ("exposure scenario", Section::ExposureScenario),
    ("exposure level", Section::Level),
    ("your task", Section::YourTask),
    ("hints", Section::Hints),
    ("hint", Section::Hints),
    ("level", Section::Level),
];

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanCardError {
    #[error("plan text is empty")]
    EmptyInput,
    #[error("missing section \"{0}\"")]
    MissingSection(String),
    #[error("section \"{0}\" is empty")]
    EmptySection(String),
    #[error("section \"{0}\" appears more than once")]
    DuplicateSection(String),
    #[error("expected {expected} interaction role(s), found {found}")]
    RoleCountMismatch { expected: usize, found: usize },
    #[error("card is for a {found} scenario, expected {expected}")]
    LevelMismatch {
        expected: ExposureLevel,
        found: ExposureLevel,
    },
    #[error("unrecognised exposure level \"{0}\"")]
    UnknownLevel(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    pub strict: bool,
}

static CHARACTER_LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^[\s#*_>]*character[\s_-]*(\d+)[\s*_]*[:：]?[\s*_]*(.*)$").unwrap()
});
static STRICT_CHARACTER_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^Character-(\d+):[ \t]*(.*)$").unwrap());
static GENDER_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^[\s*_-]*gender[\s*_]*[:：][\s*_]*(male|female|man|woman|boy|girl)\b").unwrap()
});
static NAME_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^[\s*_-]*name[\s*_]*[:：][\s*_]*(.+?)[\s*_]*$").unwrap());
static NAMED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\bnamed\s+(\p{Lu}[\p{L}\p{N}'’-]*)").unwrap());
static BULLET: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:[-*•]|\d+[.)])\s+").unwrap());

fn strip_markup(s: &str) -> &str {
    s.trim_matches(|c: char| c == '*' || c == '_' || c.is_whitespace())
}

fn header_of(line: &str, strict: bool) -> Option<(Section, String)> {
    if strict {
        let t = line.trim();
        return [
            Section::InteractionRole,
            Section::ExposureScenario,
            Section::YourTask,
            Section::Hints,
            Section::Level,
        ]
        .into_iter()
        .find(|s| t.strip_suffix(':') == Some(s.title()))
        .map(|s| (s, String::new()));
    }
    let core = line.trim_start_matches(|c: char| "#*_>".contains(c) || c.is_whitespace());
    for (prefix, section) in LENIENT_HEADERS {
        let Some(head) = core.get(..prefix.len()) else {
            continue;
        };
        if !head.eq_ignore_ascii_case(prefix) {
            continue;
        }
        let rest = core[prefix.len()..].trim_start_matches(|c: char| c == '*' || c == '_' || c.is_whitespace());
        if let Some(after) = rest.strip_prefix(':').or_else(|| rest.strip_prefix('：')) {
            return Some((section, strip_markup(after).to_string()));
        }
        if strip_markup(rest).is_empty() {
            return Some((section, String::new()));
        }
    }
    None
}

/// True when some line of `text` is a required plan-card header.
pub fn looks_like_plan_card(text: &str) -> bool {
    text.lines().any(|l| {
        matches!(
            header_of(l, false),
            Some((Section::InteractionRole | Section::ExposureScenario | Section::YourTask, _))
        )
    })
}

fn join_trimmed(lines: &[String]) -> String {
    lines.join("\n").trim().to_string()
}

fn derive_name(profile: &str) -> Option<String> {
    NAMED.captures(profile).map(|c| {
        c[1].trim_end_matches(['\'', '’', '-'])
            .to_string()
    })
}

fn parse_gender(word: &str) -> Gender {
    match word.to_ascii_lowercase().as_str() {
        "female" | "woman" | "girl" => Gender::Female,
        _ => Gender::Male,
    }
}

fn parse_role_block(lines: &[String], index: usize) -> Result<PlanRole, PlanCardError> {
    let mut gender = None;
    let mut explicit_name = None;
    let mut kept = Vec::new();
    for line in lines {
        if gender.is_none() {
            if let Some(c) = GENDER_LINE.captures(line) {
                gender = Some(parse_gender(&c[1]));
                continue;
            }
        }
        if explicit_name.is_none() {
            if let Some(c) = NAME_LINE.captures(line) {
                explicit_name = Some(c[1].to_string());
                continue;
            }
        }
        kept.push(line.clone());
    }
    let profile_text = join_trimmed(&kept);
    if profile_text.is_empty() {
        return Err(PlanCardError::EmptySection(
            Section::InteractionRole.title().into(),
        ));
    }
    let name = explicit_name
        .or_else(|| derive_name(&profile_text))
        .unwrap_or_else(|| format!("Character-{}", index + 1));
    Ok(PlanRole {
        name,
        gender,
        profile_text,
    })
}

fn parse_roles(lines: &[String], strict: bool) -> Result<Vec<PlanRole>, PlanCardError> {
    let label = if strict {
        &*STRICT_CHARACTER_LABEL
    } else {
        &*CHARACTER_LABEL
    };
    let mut blocks: Vec<Vec<String>> = Vec::new();
    let mut preamble = Vec::new();
    for line in lines {
        if let Some(c) = label.captures(line) {
            let mut block = Vec::new();
            let first = c.get(2).map_or("", |m| m.as_str()).trim();
            if !first.is_empty() {
                block.push(first.to_string());
            }
            blocks.push(block);
        } else if let Some(block) = blocks.last_mut() {
            block.push(line.clone());
        } else {
            preamble.push(line.clone());
        }
    }
    if blocks.is_empty() {
        blocks.push(preamble);
    }
    blocks
        .iter()
        .enumerate()
        .map(|(i, b)| parse_role_block(b, i))
        .collect()
}

fn parse_hints(lines: &[String]) -> Vec<String> {
    lines
        .iter()
        .map(|l| BULLET.replace(l, "").trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn parse_plan_card(
    text: &str,
    expected_level: ExposureLevel,
) -> Result<ExposurePlanCard, PlanCardError> {
    parse_plan_card_with(text, expected_level, ParseOptions::default())
}

pub fn parse_plan_card_with(
    text: &str,
    expected_level: ExposureLevel,
    opts: ParseOptions,
) -> Result<ExposurePlanCard, PlanCardError> {
    if text.trim().is_empty() {
        return Err(PlanCardError::EmptyInput);
    }

    let mut sections: Vec<(Section, Vec<String>)> = Vec::new();
    for line in text.lines() {
        if let Some((section, rest)) = header_of(line, opts.strict) {
            if sections.iter().any(|(s, _)| *s == section) {
                return Err(PlanCardError::DuplicateSection(section.title().into()));
            }
            let mut body = Vec::new();
            if !rest.is_empty() {
                body.push(rest);
            }
            sections.push((section, body));
        } else if let Some((_, body)) = sections.last_mut() {
            body.push(line.to_string());
        }
    }
    let body = |s: Section| sections.iter().find(|(x, _)| *x == s).map(|(_, b)| b);

    for s in Section::REQUIRED {
        if body(s).is_none() {
            return Err(PlanCardError::MissingSection(s.title().into()));
        }
    }
    for s in Section::REQUIRED {
        if join_trimmed(body(s).unwrap()).is_empty() {
            return Err(PlanCardError::EmptySection(s.title().into()));
        }
    }

    if let Some(lines) = body(Section::Level) {
        let word = join_trimmed(lines);
        let found = ExposureLevel::parse(strip_markup(&word))
            .ok_or_else(|| PlanCardError::UnknownLevel(word.clone()))?;
        if found != expected_level {
            return Err(PlanCardError::LevelMismatch {
                expected: expected_level,
                found,
            });
        }
    }

    let roles = parse_roles(body(Section::InteractionRole).unwrap(), opts.strict)?;
    let expected = agent_h_count(expected_level);
    if roles.len() != expected {
        return Err(PlanCardError::RoleCountMismatch {
            expected,
            found: roles.len(),
        });
    }

    Ok(ExposurePlanCard {
        level: expected_level,
        roles,
        scenario_text: join_trimmed(body(Section::ExposureScenario).unwrap()),
        task_text: join_trimmed(body(Section::YourTask).unwrap()),
        hints: body(Section::Hints).map(|l| parse_hints(l)).unwrap_or_default(),
    })
}

/// Canonical text form; `parse_plan_card` of the result yields the card back.
pub fn render_plan_card(card: &ExposurePlanCard) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{}: {}\n\n",
        Section::Level.title(),
        card.level.severity_word()
    ));
    out.push_str("Interaction Role:\n");
    let labelled = card.roles.len() > 1;
    for (i, role) in card.roles.iter().enumerate() {
        if labelled {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("Character-{}:\n", i + 1));
        }
        let derived = derive_name(&role.profile_text)
            .unwrap_or_else(|| format!("Character-{}", i + 1));
        if derived != role.name {
            out.push_str(&format!("Name: {}\n", role.name));
        }
        if let Some(g) = role.gender {
            out.push_str(&format!("Gender: {g}\n"));
        }
        out.push_str(&role.profile_text);
        out.push('\n');
    }
    out.push_str("\nExposure Scenario:\n");
    out.push_str(&card.scenario_text);
    out.push_str("\n\nYour Task:\n");
    out.push_str(&card.task_text);
    out.push('\n');
    if !card.hints.is_empty() {
        out.push_str("\nHints:\n");
        for h in &card.hints {
            out.push_str(&format!("- {h}\n"));
        }
    }
    out
}

impl fmt::Display for ExposurePlanCard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_plan_card(self))
    }
}

// ---------------------------------------------------------------------------
// User edits

/// Participant edits to a staged card. The task text is the therapist's
/// assignment and cannot be edited.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEdits {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub role_texts: BTreeMap<usize, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub role_genders: BTreeMap<usize, Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_text: Option<String>,
}

impl PlanEdits {
    pub fn is_empty(&self) -> bool {
        self.role_texts.is_empty() && self.role_genders.is_empty() && self.scenario_text.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanEditError {
    #[error("edited {0} is blank")]
    BlankSubstitution(String),
    #[error("edit targets role {slot}, but the card has {roles}")]
    SlotOutOfRange { slot: usize, roles: usize },
}

pub fn apply_user_edits(
    card: &ExposurePlanCard,
    edits: &PlanEdits,
) -> Result<ExposurePlanCard, PlanEditError> {
    let mut next = card.clone();
    let roles = card.roles.len();
    for (&slot, text) in &edits.role_texts {
        let role = next
            .roles
            .get_mut(slot)
            .ok_or(PlanEditError::SlotOutOfRange { slot, roles })?;
        let text = text.trim();
        if text.is_empty() {
            return Err(PlanEditError::BlankSubstitution(format!("role {slot} profile")));
        }
        role.profile_text = text.to_string();
        if let Some(name) = derive_name(text) {
            role.name = name;
        }
    }
    for (&slot, &gender) in &edits.role_genders {
        next.roles
            .get_mut(slot)
            .ok_or(PlanEditError::SlotOutOfRange { slot, roles })?
            .gender = Some(gender);
    }
    if let Some(text) = &edits.scenario_text {
        let text = text.trim();
        if text.is_empty() {
            return Err(PlanEditError::BlankSubstitution("scenario".into()));
        }
        next.scenario_text = text.to_string();
    }
    Ok(next)
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanViolation {
    /// Both scenarios at a Low/Medium level use an interlocutor of the same
    /// gender.
    GenderPairViolation { gender: Gender },
    /// A role has no explicit gender line.
    GenderUnspecified { slot: usize },
    /// A High card must contain one male and one female character.
    HighCardNeedsBothGenders,
    RoleCount { expected: usize, found: usize },
}

impl PlanViolation {
    /// Warnings are surfaced to the participant but do not block confirmation.
    pub fn is_blocking(&self) -> bool {
        !matches!(self, PlanViolation::GenderUnspecified { .. })
    }
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::GenderPairViolation { gender } => write!(
                f,
                "both scenarios at this level use a {gender} character; one must be male and one female"
            ),
            PlanViolation::GenderUnspecified { slot } => {
                write!(f, "role {slot} has no gender line; please set it before continuing")
            }
            PlanViolation::HighCardNeedsBothGenders => {
                f.write_str("a high-level scenario needs one male and one female character")
            }
            PlanViolation::RoleCount { expected, found } => {
                write!(f, "expected {expected} interaction role(s), found {found}")
            }
        }
    }
}

pub fn validate_card(card: &ExposurePlanCard) -> Vec<PlanViolation> {
    let mut out = Vec::new();
    let expected = agent_h_count(card.level);
    if card.roles.len() != expected {
        out.push(PlanViolation::RoleCount {
            expected,
            found: card.roles.len(),
        });
    }
    for (slot, role) in card.roles.iter().enumerate() {
        if role.gender.is_none() {
            out.push(PlanViolation::GenderUnspecified { slot });
        }
    }
    if card.level == ExposureLevel::High && card.roles.len() == 2 {
        if let (Some(a), Some(b)) = (card.roles[0].gender, card.roles[1].gender) {
            if a == b {
                out.push(PlanViolation::HighCardNeedsBothGenders);
            }
        }
    }
    out
}

/// Checks the two scenarios of one Low or Medium level for a male and a
/// female interlocutor. High pairs are exempt: each High card already holds
/// both.
pub fn validate_level_pair(
    first: &ExposurePlanCard,
    second: &ExposurePlanCard,
) -> Result<Vec<PlanViolation>, PlanCardError> {
    if first.level != second.level {
        return Err(PlanCardError::LevelMismatch {
            expected: first.level,
            found: second.level,
        });
    }
    if first.level == ExposureLevel::High {
        return Ok(Vec::new());
    }
    let a = first.roles.first().and_then(|r| r.gender);
    let b = second.roles.first().and_then(|r| r.gender);
    Ok(match (a, b) {
        (Some(a), Some(b)) if a == b => vec![PlanViolation::GenderPairViolation { gender: a }],
        (Some(_), Some(_)) => Vec::new(),
        (None, _) => vec![PlanViolation::GenderUnspecified { slot: 0 }],
        (_, None) => vec![PlanViolation::GenderUnspecified { slot: 0 }],
    })
}
