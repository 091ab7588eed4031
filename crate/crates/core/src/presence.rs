//! Avatar presence: sentiment of generated text, the expression it drives,
//! and speech synthesis behind an adapter.

use std::collections::BTreeMap;
use std::io::Write;
use std::process::{Command, Stdio};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentKind;
use crate::provider::{fnv1a, ChatMessage, ChatProvider, CompletionParams, CompletionRequest, ScriptKey};

pub const ENV_TTS_COMMAND: &str = "VCHATTER_TTS_COMMAND";

const BUNDLED_LEXICON: &str = include_str!("../assets/sentiment_lexicon.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Neutral,
    Negative,
}

impl Sentiment {
    pub fn parse(s: &str) -> Option<Self> {
        let w = s
            .trim()
            .trim_matches(|c: char| !c.is_ascii_alphabetic())
            .to_ascii_lowercase();
        match w.as_str() {
            "positive" => Some(Sentiment::Positive),
            "neutral" => Some(Sentiment::Neutral),
            "negative" => Some(Sentiment::Negative),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpressionState {
    Happy,
    Neutral,
    Concerned,
    Sad,
    Surprised,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexiconError {
    #[error("lexicon line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Word polarity list, one `word<TAB>+1|-1` entry per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    words: BTreeMap<String, i8>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon is valid")
    }
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut words = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: &str| LexiconError::Parse { line: i + 1, message: message.into() };
            let mut parts = line.split_whitespace();
            let word = parts.next().ok_or_else(|| err("missing word"))?;
            let pol: i8 = parts
                .next()
                .ok_or_else(|| err("missing polarity"))?
                .trim_start_matches('+')
                .parse()
                .map_err(|_| err("polarity must be +1 or -1"))?;
            if pol != 1 && pol != -1 {
                return Err(err("polarity must be +1 or -1"));
            }
            words.insert(word.to_lowercase(), pol);
        }
        Ok(Self { words })
    }

    /// Positive and negative hit counts.
    pub fn hits(&self, text: &str) -> (usize, usize) {
        let mut pos = 0;
        let mut neg = 0;
        for tok in text
            .split(|c: char| !(c.is_alphanumeric() || c == '\''))
            .filter(|t| !t.is_empty())
        {
            match self.words.get(&tok.to_lowercase()) {
                Some(1) => pos += 1,
                Some(_) => neg += 1,
                None => {}
            }
        }
        (pos, neg)
    }

    pub fn classify(&self, text: &str) -> Sentiment {
        let (p, n) = self.hits(text);
        match p.cmp(&n) {
            std::cmp::Ordering::Greater => Sentiment::Positive,
            std::cmp::Ordering::Less => Sentiment::Negative,
            std::cmp::Ordering::Equal => Sentiment::Neutral,
        }
    }
}

const SENTIMENT_INSTRUCTION: &str = "Classify the overall sentiment of the user's message. Answer with exactly one word: positive, neutral, or negative.";

/// Asks the provider first and falls back to the lexicon on any error or
/// unusable answer, so classification never fails.
#[derive(Clone, Default)]
pub struct SentimentClassifier {
    pub provider: Option<Arc<dyn ChatProvider>>,
    pub lexicon: Lexicon,
}

impl SentimentClassifier {
    pub fn lexicon_only() -> Self {
        Self::default()
    }

    pub fn with_provider(provider: Arc<dyn ChatProvider>) -> Self {
        Self { provider: Some(provider), lexicon: Lexicon::default() }
    }

    pub fn classify(&self, text: &str, key: Option<ScriptKey>) -> Sentiment {
        if text.trim().is_empty() {
            return Sentiment::Neutral;
        }
        if let Some(p) = &self.provider {
            let req = CompletionRequest {
                messages: vec![ChatMessage::system(SENTIMENT_INSTRUCTION), ChatMessage::user(text)],
                params: CompletionParams { temperature: 0.0, max_tokens: 4, ..Default::default() },
                key,
            };
            match p.complete(&req) {
                Ok(answer) => {
                    if let Some(s) = Sentiment::parse(&answer) {
                        return s;
                    }
                    tracing::debug!(%answer, "unusable sentiment answer, using lexicon");
                }
                Err(e) => tracing::debug!(error = %e, "sentiment provider failed, using lexicon"),
            }
        }
        self.lexicon.classify(text)
    }
}

pub fn classify_sentiment(text: &str) -> Sentiment {
    Lexicon::default().classify(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionRow {
    pub positive: ExpressionState,
    pub neutral: ExpressionState,
    pub negative: ExpressionState,
}

impl ExpressionRow {
    fn get(&self, s: Sentiment) -> ExpressionState {
        match s {
            Sentiment::Positive => self.positive,
            Sentiment::Neutral => self.neutral,
            Sentiment::Negative => self.negative,
        }
    }
}

/// Sentiment → expression per speaker kind; overridable per avatar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionTable {
    pub therapist: ExpressionRow,
    pub interlocutor: ExpressionRow,
}

impl Default for ExpressionTable {
    fn default() -> Self {
        Self {
            therapist: ExpressionRow {
                positive: ExpressionState::Happy,
                neutral: ExpressionState::Neutral,
                negative: ExpressionState::Concerned,
            },
            interlocutor: ExpressionRow {
                positive: ExpressionState::Happy,
                neutral: ExpressionState::Neutral,
                negative: ExpressionState::Sad,
            },
        }
    }
}

impl ExpressionTable {
    pub fn expression_for(&self, s: Sentiment, speaker: AgentKind) -> ExpressionState {
        match speaker {
            AgentKind::Therapist => self.therapist.get(s),
            AgentKind::Interlocutor => self.interlocutor.get(s),
        }
    }
}

pub fn expression_for(s: Sentiment, speaker: AgentKind) -> ExpressionState {
    ExpressionTable::default().expression_for(s, speaker)
}

// ---------------------------------------------------------------------------
// Speech

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioRef {
    pub id: String,
    pub duration_ms: u64,
    pub format: String,
    /// Absent only for the null synthesizer.
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthesisError {
    #[error("cannot synthesize empty text")]
    EmptyText,
    #[error("speech synthesis failed: {0}")]
    Failed(String),
}

pub const MS_PER_WORD: u64 = 60;

pub fn estimated_duration_ms(text: &str) -> u64 {
    MS_PER_WORD * text.split_whitespace().count() as u64
}

/// Stable id derived from voice and text.
pub fn audio_id(text: &str, voice_id: &str) -> String {
    let mut bytes = voice_id.as_bytes().to_vec();
    bytes.push(0);
    bytes.extend_from_slice(text.as_bytes());
    format!("aud-{:016x}", fnv1a(&bytes))
}

pub trait Synthesizer: Send + Sync {
    fn synthesize(&self, text: &str, voice_id: &str) -> Result<AudioRef, SynthesisError>;
}

/// Produces timing only, no audio file.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullSynthesizer;

impl Synthesizer for NullSynthesizer {
    fn synthesize(&self, text: &str, voice_id: &str) -> Result<AudioRef, SynthesisError> {
        if text.trim().is_empty() {
            return Err(SynthesisError::EmptyText);
        }
        Ok(AudioRef {
            id: audio_id(text, voice_id),
            duration_ms: estimated_duration_ms(text),
            format: "none".into(),
            path: None,
        })
    }
}

/// Runs an external program with the text on stdin and the voice id in
/// `VCHATTER_VOICE`; the program prints the audio file path on stdout.
#[derive(Debug, Clone)]
pub struct CommandSynthesizer {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandSynthesizer {
    pub fn from_command_line(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        Some(Self { program: parts.next()?, args: parts.collect() })
    }
}

impl Synthesizer for CommandSynthesizer {
    fn synthesize(&self, text: &str, voice_id: &str) -> Result<AudioRef, SynthesisError> {
        if text.trim().is_empty() {
            return Err(SynthesisError::EmptyText);
        }
        let fail = |e: &dyn std::fmt::Display| SynthesisError::Failed(e.to_string());
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .env("VCHATTER_VOICE", voice_id)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(&e))?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(text.as_bytes())
            .map_err(|e| fail(&e))?;
        let out = child.wait_with_output().map_err(|e| fail(&e))?;
        if !out.status.success() {
            return Err(SynthesisError::Failed(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let path = String::from_utf8_lossy(&out.stdout).trim().to_string();
        if path.is_empty() {
            return Err(SynthesisError::Failed("adapter printed no audio path".into()));
        }
        let format = std::path::Path::new(&path)
            .extension()
            .map(|e| e.to_string_lossy().to_lowercase())
            .unwrap_or_else(|| "bin".into());
        Ok(AudioRef {
            id: audio_id(text, voice_id),
            duration_ms: estimated_duration_ms(text),
            format,
            path: Some(path),
        })
    }
}

/// Adapter chosen from `VCHATTER_TTS_COMMAND`; unset means null.
pub fn synthesizer_from_lookup(get: impl Fn(&str) -> Option<String>) -> Arc<dyn Synthesizer> {
    match get(ENV_TTS_COMMAND).as_deref().and_then(CommandSynthesizer::from_command_line) {
        Some(c) => Arc::new(c),
        None => Arc::new(NullSynthesizer),
    }
}

/// Voice is an enhancement: a synthesis failure yields no audio and a
/// warning instead of an error.
pub fn voice_for(synth: &dyn Synthesizer, text: &str, voice_id: &str) -> (Option<AudioRef>, Option<String>) {
    match synth.synthesize(text, voice_id) {
        Ok(a) => (Some(a), None),
        Err(e) => {
            tracing::warn!(error = %e, "speech synthesis failed; delivering text only");
            (None, Some(e.to_string()))
        }
    }
}
