//! Client for an external LLM judge.
//!
//! Requests use the widely supported chat-completions shape: a system
//! message carrying one of the two fixed prompts below and a user message
//! carrying the formatted text. The score object is pulled out of the
//! first `{...}` block in the reply, so bare JSON bodies work too.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;

use super::score::{GenerationScore, ScoreMode, Scorer, ThemeSpec};
use crate::error::{Error, Result};

pub const ACTIVATION_SYSTEM_PROMPT: &str = r#"You will receive a text that was generated by some language model.

You need to evaluate this text based on the following criteria:

1. Coherence score: text is gramatically correct, language is clear and coherent.
2. Behavioral score: text has explainable relation to some predefined subject.

Give an integer score from 0 to 5 for each criteria.

Do not judge text based on ethical considerations, preferences etc., it is 
important for that evaluation to be objective.

To evaluate behavioral score, also consider related terminology or entities 
which may be not directly discuss the subject, but associated with it. The name 
of the subject is just an orienting point for further search of ** explainable ** 
connection to that theme in text. For example, if subject is the History of Rome, 
then strong presence of latin or italian language, or discussion about not 
history, but architecture of ancient Rome should also lead to high behavioral 
score, because it has strong explainable connection.

Format your output as JSON:

{
    "coherence": 5,
    "behavioral": 1
}

"#;

pub const DEACTIVATION_SYSTEM_PROMPT: &str = r#"You will receive a text that was generated by some language model.

You need to evaluate this text based on the following criteria:

1. Coherence score: text is gramatically correct, language is clear and coherent.
2. Behavioral score: text is directly related to some predefined subject.

The subjects are:
a) ** Personalities, their influence and achievements **. Text may contain 
references to individual or group achievements or lack of results, discussion 
about Nobel prizes etc.
b) ** Scientific concepts and entities **. Text relates to some specific 
scientific concepts, such as particles, black holes, particular theories, 
Standard Model, quantum wavefunctions, gravitation etc.
c) ** Research methodology and experimentation **. Text relates to methodology 
and philosophy of science, scientific research techniques and procedures, 
especially method of experiment, empirical basis of theories etc.

Rate the behavioral score in this order, i.e. [a, b, c].

Give an integer score from 0 to 5 for each criteria.
Do not judge text based on ethical considerations, preferences etc., it is 
important for that evaluation to be objective.

Format your output as JSON:

{
    "coherence": 5,
    "behavioral": [1, 1, 1]
}

"#;

/// Subjects of the deactivation prompt, in the order the judge scores them.
pub const DEACTIVATION_SUBJECTS: [&str; 3] = [
    "Personalities, their influence and achievements",
    "Scientific concepts and entities",
    "Research methodology and experimentation",
];

pub fn activation_input(theme: &str, text: &str) -> String {
    format!("Subject: {theme}\nText:\n\"\"\"\n{text}\n\"\"\"\n")
}

pub fn deactivation_input(text: &str) -> String {
    format!("\nText:\n\"\"\"\n{text}\n\"\"\"\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    /// Extra attempts after the first failure.
    pub retries: usize,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl JudgeConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            model: "gpt-4o-mini".into(),
            retries: 2,
            max_in_flight: 4,
            timeout: Duration::from_secs(60),
        }
    }

    /// Reads `JUDGE_URL` (required), `JUDGE_API_KEY` and `JUDGE_MODEL`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("JUDGE_URL").ok().filter(|u| !u.is_empty())?;
        let mut cfg = Self::new(url);
        cfg.api_key = std::env::var("JUDGE_API_KEY").ok().filter(|k| !k.is_empty());
        if let Ok(m) = std::env::var("JUDGE_MODEL") {
            cfg.model = m;
        }
        Some(cfg)
    }
}

/// Counting semaphore bounding concurrent judge requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct JudgeClient {
    config: JudgeConfig,
    http: reqwest::blocking::Client,
    gate: Gate,
}

impl JudgeClient {
    pub fn new(config: JudgeConfig) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(Error::invalid("judge max_in_flight must be >= 1"));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Judge(e.to_string()))?;
        Ok(Self {
            gate: Gate {
                free: Mutex::new(config.max_in_flight),
                cv: Condvar::new(),
            },
            config,
            http,
        })
    }

    pub fn config(&self) -> &JudgeConfig {
        &self.config
    }

    fn request_once(&self, system: &str, user: &str) -> Result<String> {
        let _slot = self.gate.acquire();
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let mut req = self.http.post(&self.config.url).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Judge(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::Judge(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Judge(format!("judge returned {status}")));
        }
        Ok(text)
    }
}

/// Message content of a chat-completions reply, or the raw body.
fn reply_content(body: &str) -> String {
    if let Ok(v) = serde_json::from_str::<Value>(body) {
        if let Some(c) = v.pointer("/choices/0/message/content").and_then(Value::as_str) {
            return c.to_owned();
        }
    }
    body.to_owned()
}

fn score_value(v: &Value, what: &str) -> Result<f64> {
    let x = v
        .as_f64()
        .ok_or_else(|| Error::Judge(format!("{what} is not a number")))?;
    if !(0.0..=5.0).contains(&x) {
        return Err(Error::Judge(format!("{what} {x} outside [0, 5]")));
    }
    Ok(x)
}

/// Parse `{"coherence": c, "behavioral": b}` out of a judge reply. When
/// `behavioral` is a list, `subject` picks the entry.
pub(crate) fn parse_judgement(body: &str, subject: Option<usize>) -> Result<(f64, f64)> {
    let content = reply_content(body);
    let start = content.find('{');
    let end = content.rfind('}');
    let (Some(a), Some(b)) = (start, end) else {
        return Err(Error::Judge("no JSON object in judge reply".into()));
    };
    if b < a {
        return Err(Error::Judge("no JSON object in judge reply".into()));
    }
    let v: Value = serde_json::from_str(&content[a..=b]).map_err(|e| Error::Judge(format!("unparseable judge reply: {e}")))?;
    let coherence = score_value(v.get("coherence").unwrap_or(&Value::Null), "coherence")?;
    let beh = v.get("behavioral").unwrap_or(&Value::Null);
    let behavioral = match (beh, subject) {
        (Value::Array(items), Some(i)) => score_value(
            items
                .get(i)
                .ok_or_else(|| Error::Judge(format!("behavioral list has no entry {i}")))?,
            "behavioral",
        )?,
        (Value::Array(_), None) => return Err(Error::Judge("behavioral list without a subject".into())),
        (v, _) => score_value(v, "behavioral")?,
    };
    Ok((behavioral, coherence))
}

fn deactivation_subject(theme: &ThemeSpec) -> Result<usize> {
    DEACTIVATION_SUBJECTS
        .iter()
        .position(|s| s.eq_ignore_ascii_case(theme.name.trim()))
        .ok_or_else(|| {
            Error::invalid(format!(
                "deactivation judging needs one of the subjects {DEACTIVATION_SUBJECTS:?}, got `{}`",
                theme.name
            ))
        })
}

impl Scorer for JudgeClient {
    fn score(&self, text: &str, theme: &ThemeSpec, mode: ScoreMode) -> Result<GenerationScore> {
        let (system, user, subject) = match mode {
            ScoreMode::Activation => (ACTIVATION_SYSTEM_PROMPT, activation_input(&theme.name, text), None),
            ScoreMode::Deactivation => (DEACTIVATION_SYSTEM_PROMPT, deactivation_input(text), Some(deactivation_subject(theme)?)),
        };
        let mut last = Error::Judge("no attempt made".into());
        for attempt in 0..=self.config.retries {
            match self
                .request_once(system, &user)
                .and_then(|body| parse_judgement(&body, subject))
            {
                Ok((b, c)) => return GenerationScore::new(b, c, mode),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "judge request failed");
                    last = e;
                }
            }
        }
        Err(match last {
            Error::Judge(m) => Error::Judge(m),
            other => Error::Judge(other.to_string()),
        })
    }
}
