//! Conversational surveys: scripted questions asked through dialogue, with
//! answers captured verbatim and exported as JSON Lines.

use std::collections::HashSet;
use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::embedder::normalize_text;

/// Reprompts allowed per scale question before it is recorded as
/// unparseable.
pub const MAX_REPROMPTS: u8 = 2;

#[derive(Debug, Error)]
pub enum SurveyError {
    #[error("survey run is not in progress")]
    RunNotActive,
    #[error("duplicate question id {0:?}")]
    DuplicateQuestionId(String),
    #[error("export failed: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuestionKind {
    #[serde(rename = "free_text")]
    FreeText,
    #[serde(rename = "scale_1_to_5")]
    Scale1To5,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyQuestion {
    pub id: String,
    pub prompt: String,
    pub kind: QuestionKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyDefinition {
    pub id: String,
    pub title: String,
    pub version: u32,
    #[serde(default)]
    pub questions: Vec<SurveyQuestion>,
}

impl SurveyDefinition {
    pub fn validate(&self) -> Result<(), SurveyError> {
        let mut seen = HashSet::new();
        for q in &self.questions {
            if !seen.insert(q.id.as_str()) {
                return Err(SurveyError::DuplicateQuestionId(q.id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    InProgress,
    Complete,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedValue {
    Text(String),
    Scale(u8),
    Unparseable,
}

impl Serialize for ParsedValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ParsedValue::Text(t) => s.serialize_str(t),
            ParsedValue::Scale(v) => s.serialize_u8(*v),
            ParsedValue::Unparseable => s.serialize_none(),
        }
    }
}

fn serialize_ts<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&ts.to_rfc3339_opts(SecondsFormat::Millis, true))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SurveyAnswer {
    pub question_id: String,
    pub raw: String,
    pub parsed: ParsedValue,
    #[serde(serialize_with = "serialize_ts")]
    pub ts: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "step")]
pub enum SurveyStep {
    Prompt { question_id: String, text: String },
    Reprompt { question_id: String, text: String, attempt: u8 },
    Done,
}

#[derive(Debug, Clone)]
pub struct SurveyRun {
    run_id: String,
    definition: Arc<SurveyDefinition>,
    session_id: String,
    cursor: usize,
    answers: Vec<SurveyAnswer>,
    status: RunStatus,
    reprompts: u8,
}

/// Export line layout; field order is the serialization order.
#[derive(Serialize)]
struct ExportLine<'a> {
    run_id: &'a str,
    survey_id: &'a str,
    version: u32,
    session_id: &'a str,
    status: RunStatus,
    answers: &'a [SurveyAnswer],
}

impl SurveyRun {
    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn survey_id(&self) -> &str {
        &self.definition.id
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    pub fn answers(&self) -> &[SurveyAnswer] {
        &self.answers
    }

    /// The step the run is waiting on, without advancing it.
    pub fn current_step(&self) -> SurveyStep {
        match self.definition.questions.get(self.cursor) {
            Some(q) if self.status == RunStatus::InProgress => {
                SurveyStep::Prompt { question_id: q.id.clone(), text: q.prompt.clone() }
            }
            _ => SurveyStep::Done,
        }
    }

    /// Records an answer to the current question and returns what to say
    /// next.
    pub fn submit(&mut self, utterance: &str, now: DateTime<Utc>) -> Result<SurveyStep, SurveyError> {
        if self.status != RunStatus::InProgress {
            return Err(SurveyError::RunNotActive);
        }
        let question = &self.definition.questions[self.cursor];
        let parsed = match question.kind {
            QuestionKind::FreeText => ParsedValue::Text(utterance.to_string()),
            QuestionKind::Scale1To5 => match parse_scale(utterance) {
                Some(v) => ParsedValue::Scale(v),
                None if self.reprompts < MAX_REPROMPTS => {
                    self.reprompts += 1;
                    return Ok(SurveyStep::Reprompt {
                        question_id: question.id.clone(),
                        text: format!("Sorry, could you give me a number from 1 to 5? {}", question.prompt),
                        attempt: self.reprompts,
                    });
                }
                None => ParsedValue::Unparseable,
            },
        };
        self.answers.push(SurveyAnswer {
            question_id: question.id.clone(),
            raw: utterance.to_string(),
            parsed,
            ts: now,
        });
        self.cursor += 1;
        self.reprompts = 0;
        if self.cursor == self.definition.questions.len() {
            self.status = RunStatus::Complete;
        }
        Ok(self.current_step())
    }

    /// Stops the run, keeping the answers collected so far.
    pub fn abort(&mut self) -> Result<(), SurveyError> {
        if self.status != RunStatus::InProgress {
            return Err(SurveyError::RunNotActive);
        }
        self.status = RunStatus::Aborted;
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        let line = ExportLine {
            run_id: &self.run_id,
            survey_id: &self.definition.id,
            version: self.definition.version,
            session_id: &self.session_id,
            status: self.status,
            answers: &self.answers,
        };
        serde_json::to_string(&line).expect("export line serializes")
    }
}

/// The first standalone integer token in 1..=5 of the normalized
/// utterance.
///
/// ```
/// use infohub_core::survey::parse_scale;
/// assert_eq!(parse_scale("I'd say 4 out of 5"), Some(4));
/// assert_eq!(parse_scale("pretty good"), None);
/// ```
pub fn parse_scale(utterance: &str) -> Option<u8> {
    normalize_text(utterance)
        .split(' ')
        .filter(|tok| !tok.is_empty() && tok.bytes().all(|b| b.is_ascii_digit()))
        .map(|tok| tok.trim_start_matches('0'))
        .find_map(|digits| match digits.as_bytes() {
            [d @ b'1'..=b'5'] => Some(d - b'0'),
            _ => None,
        })
}

/// Hands out run ids and starts runs.
#[derive(Debug, Default)]
pub struct SurveyDesk {
    next: AtomicU64,
}

impl SurveyDesk {
    pub fn new() -> Self {
        Self::default()
    }

    /// Continues numbering after `issued` previously issued runs.
    pub fn starting_at(issued: u64) -> Self {
        Self { next: AtomicU64::new(issued) }
    }

    pub fn start(&self, definition: Arc<SurveyDefinition>, session_id: &str) -> (SurveyRun, SurveyStep) {
        let n = self.next.fetch_add(1, Ordering::Relaxed) + 1;
        let status = if definition.questions.is_empty() { RunStatus::Complete } else { RunStatus::InProgress };
        let run = SurveyRun {
            run_id: format!("{}-{n:06}", definition.id),
            definition,
            session_id: session_id.to_string(),
            cursor: 0,
            answers: Vec::new(),
            status,
            reprompts: 0,
        };
        let step = run.current_step();
        (run, step)
    }
}

/// Writes one JSON object per run, newline-terminated.
pub fn export<'a, W: Write>(runs: impl IntoIterator<Item = &'a SurveyRun>, mut out: W) -> Result<(), SurveyError> {
    for run in runs {
        out.write_all(run.to_json_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
